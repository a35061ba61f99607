//! Greedy autoregressive report generation with cross-attention capture.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::labeler::{find_mentions, FindingOntology};
use crate::model::{score, ImageGrid, ModelConfig, ModelError, ModelParams};
use crate::synth::{finding_regions, SynthError};
use crate::tensor::{argmax, Tensor};
use crate::tokenizer::{Tokenizer, TokenizerError, BOS, EOS};

const SENTENCE_BREAKS: [char; 4] = ['.', ';', '!', '?'];

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("trace index {index} out of range for {len} generated tokens")]
    TraceIndex { index: usize, len: usize },
    #[error("attention layer {layer} out of range for {layers} layers")]
    Layer { layer: usize, layers: usize },
    #[error("attention dump line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerateOptions {
    /// Cap on generated tokens, itself capped by `max_len`.
    pub max_tokens: Option<usize>,
    /// Decoder layer whose cross-attention is recorded; `None` means the last.
    pub attention_layer: Option<usize>,
    /// Only ids below this are candidates. [`greedy_generate`] sets it to the
    /// tokenizer's size when unset.
    pub vocab_limit: Option<usize>,
}

/// Cross-attention captured at the step that produced `token`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub token: u32,
    /// Head-mean attention over the `h·w` image positions.
    pub mean: Vec<f64>,
    /// Raw rows, one per head.
    pub heads: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub grid: ImageGrid,
    pub layer: usize,
    pub steps: Vec<TraceStep>,
}

impl AttentionTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Decoded text without special tokens.
    pub text: String,
    /// Generated ids after BOS, including the final EOS when one was produced.
    pub token_ids: Vec<u32>,
    pub trace: AttentionTrace,
}

/// Greedy decoding of token ids only. Each step re-scores the whole prefix.
pub fn greedy_ids(
    image: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
    opts: &GenerateOptions,
) -> Result<(Vec<u32>, AttentionTrace), DecodeError> {
    let layer = opts.attention_layer.unwrap_or(cfg.num_layers - 1);
    if layer >= cfg.num_layers {
        return Err(DecodeError::Layer { layer, layers: cfg.num_layers });
    }
    let cap = opts.max_tokens.unwrap_or(cfg.max_len).min(cfg.max_len);
    let limit = opts.vocab_limit.unwrap_or(cfg.vocab_size).clamp(1, cfg.vocab_size);
    let mut prefix = vec![BOS];
    let mut steps = Vec::new();
    while steps.len() < cap {
        let scored = score(params, cfg, image, &prefix)?;
        let next = argmax(&scored.next_token_logits()[..limit]) as u32;
        let last = prefix.len() - 1;
        let heads: Vec<Vec<f64>> = scored.cross_attention[layer].iter().map(|h| h.row(last).to_vec()).collect();
        let mut mean = vec![0.0; cfg.image_grid.cells()];
        for h in &heads {
            for (m, &w) in mean.iter_mut().zip(h) {
                *m += w;
            }
        }
        mean.iter_mut().for_each(|m| *m /= heads.len() as f64);
        steps.push(TraceStep { token: next, mean, heads });
        prefix.push(next);
        if next == EOS {
            break;
        }
    }
    prefix.remove(0);
    Ok((prefix, AttentionTrace { grid: cfg.image_grid, layer, steps }))
}

pub fn greedy_generate(
    image: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
    tokenizer: &Tokenizer,
    opts: &GenerateOptions,
) -> Result<Generation, DecodeError> {
    let opts = GenerateOptions { vocab_limit: opts.vocab_limit.or(Some(tokenizer.vocab_size())), ..opts.clone() };
    let (token_ids, trace) = greedy_ids(image, params, cfg, &opts)?;
    let text = tokenizer.decode(&token_ids)?;
    Ok(Generation { text, token_ids, trace })
}

/// Head-mean map of generated token `t`, shaped `[h, w]` (row-major cells).
pub fn attention_map_for_token(trace: &AttentionTrace, t: usize) -> Result<Tensor, DecodeError> {
    let step = trace.steps.get(t).ok_or(DecodeError::TraceIndex { index: t, len: trace.len() })?;
    Tensor::new(vec![trace.grid.height, trace.grid.width], step.mean.clone())
        .map_err(|e| DecodeError::Model(e.into()))
}

/// Re-scores `BOS ++ generated` in one pass and checks that every position's
/// argmax is the token the loop emitted there.
pub fn rescore_agrees(
    image: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
    generated: &[u32],
) -> Result<bool, DecodeError> {
    if generated.is_empty() {
        return Ok(true);
    }
    let mut input = vec![BOS];
    input.extend_from_slice(&generated[..generated.len() - 1]);
    let logits = score(params, cfg, image, &input)?.logits;
    Ok(generated.iter().enumerate().all(|(p, &tok)| argmax(logits.row(p)) as u32 == tok))
}

/// Attention mass one generated token puts on each finding's region.
#[derive(Debug, Clone, PartialEq)]
pub struct MentionMass {
    pub finding: String,
    /// Index into the generated ids.
    pub position: usize,
    /// Mass inside each finding's region, in ontology order.
    pub region_mass: Vec<f64>,
}

/// For every generated token in a sentence that positively mentions a
/// finding, the attention it placed on each finding's cell block. A token is
/// attributed once to each finding its sentence mentions.
pub fn mention_masses(
    gen: &Generation,
    tokenizer: &Tokenizer,
    ontology: &FindingOntology,
) -> Result<Vec<MentionMass>, DecodeError> {
    let grid = gen.trace.grid;
    let ids = ontology.ids();
    let regions = finding_regions(grid, ids.len())?;
    let cells: Vec<Vec<usize>> = regions.iter().map(|r| r.flat_indices(grid.width)).collect();
    let (text, spans) = tokenizer.decode_with_spans(&gen.token_ids)?;
    let is_break = |c: char| SENTENCE_BREAKS.contains(&c);
    let mut sentences: Vec<(Range<usize>, BTreeSet<String>)> = Vec::new();
    for m in find_mentions(&text, ontology).into_iter().filter(|m| !m.negated) {
        let start = text[..m.span.start].rfind(is_break).map_or(0, |i| i + 1);
        let end = text[m.span.end..].find(is_break).map_or(text.len(), |i| m.span.end + i + 1);
        match sentences.iter_mut().find(|(r, _)| r.start == start) {
            Some((_, ids)) => {
                ids.insert(m.finding);
            }
            None => sentences.push((start..end, BTreeSet::from([m.finding]))),
        }
    }
    let mut out = Vec::new();
    for (position, span) in spans.iter().enumerate() {
        if span.is_empty() {
            continue;
        }
        let map = &gen.trace.steps[position].mean;
        for (range, findings) in &sentences {
            if span.start < range.end && range.start < span.end {
                for finding in findings {
                    out.push(MentionMass {
                        finding: finding.clone(),
                        position,
                        region_mass: cells.iter().map(|c| c.iter().map(|&i| map[i]).sum()).collect(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Per-report attention export.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub report: String,
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
    pub grid: ImageGrid,
    pub layer: usize,
    /// One head-mean map per token, `h·w` values each.
    pub maps: Vec<Vec<f64>>,
}

const DUMP_HEADER: &str = "ATTN-V1";

impl AttentionDump {
    pub fn from_generation(gen: &Generation, tokenizer: &Tokenizer) -> Self {
        let tokens = gen
            .token_ids
            .iter()
            .map(|&id| tokenizer.id_to_token(id).unwrap_or("<unk>").to_owned())
            .collect();
        Self {
            report: gen.text.clone(),
            tokens,
            ids: gen.token_ids.clone(),
            grid: gen.trace.grid,
            layer: gen.trace.layer,
            maps: gen.trace.steps.iter().map(|s| s.mean.clone()).collect(),
        }
    }

    /// Values are written with shortest round-trip formatting so that
    /// [`AttentionDump::parse`] recovers them bit for bit.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{DUMP_HEADER}");
        let _ = writeln!(s, "report\t{}", self.report.replace(['\n', '\t'], " "));
        let _ = writeln!(s, "tokens\t{}", self.tokens.join(" "));
        let ids: Vec<String> = self.ids.iter().map(u32::to_string).collect();
        let _ = writeln!(s, "ids\t{}", ids.join(" "));
        let g = self.grid;
        let _ = writeln!(s, "grid\t{} {} {}", g.height, g.width, g.channels);
        let _ = writeln!(s, "layer\t{}", self.layer);
        for map in &self.maps {
            let vals: Vec<String> = map.iter().map(f64::to_string).collect();
            let _ = writeln!(s, "{}", vals.join(" "));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, DecodeError> {
        let err = |line: usize, message: String| DecodeError::Parse { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| lines.next().ok_or_else(|| err(0, format!("missing {what}")));
        let (n, header) = next("header")?;
        if header != DUMP_HEADER {
            return Err(err(n, format!("expected {DUMP_HEADER}, found {header:?}")));
        }
        let mut field = |key: &str| -> Result<(usize, String), DecodeError> {
            let (n, line) = next(key)?;
            let (k, v) = line.split_once('\t').ok_or_else(|| err(n, format!("expected {key}<TAB>value")))?;
            if k != key {
                return Err(err(n, format!("expected field {key}, found {k:?}")));
            }
            Ok((n, v.to_owned()))
        };
        let (_, report) = field("report")?;
        let (_, tokens) = field("tokens")?;
        let tokens: Vec<String> = tokens.split_whitespace().map(str::to_owned).collect();
        let (n, ids) = field("ids")?;
        let ids = ids
            .split_whitespace()
            .map(|v| v.parse::<u32>().map_err(|e| err(n, format!("bad id {v:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let (n, grid) = field("grid")?;
        let extents = grid
            .split_whitespace()
            .map(|v| v.parse::<usize>().map_err(|e| err(n, format!("bad extent {v:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let [height, width, channels] = extents[..] else {
            return Err(err(n, format!("grid needs 3 extents, found {}", extents.len())));
        };
        let (n, layer) = field("layer")?;
        let layer = layer.parse().map_err(|e| err(n, format!("bad layer: {e}")))?;
        if tokens.len() != ids.len() {
            return Err(err(n, format!("{} tokens but {} ids", tokens.len(), ids.len())));
        }
        let mut maps = Vec::new();
        for (n, line) in lines {
            let vals = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| err(n, format!("bad value {v:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if vals.len() != height * width {
                return Err(err(n, format!("expected {} values, found {}", height * width, vals.len())));
            }
            maps.push(vals);
        }
        if maps.len() != ids.len() {
            return Err(err(0, format!("{} maps for {} tokens", maps.len(), ids.len())));
        }
        Ok(Self { report, tokens, ids, grid: ImageGrid { height, width, channels }, layer, maps })
    }

    pub fn save(&self, path: &Path) -> Result<(), DecodeError> {
        std::fs::write(path, self.to_text())
            .map_err(|source| DecodeError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DecodeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| DecodeError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }
}
