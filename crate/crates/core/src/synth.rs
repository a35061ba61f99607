//! Procedural (feature grid, report, labels) triples with spatially
//! localized findings.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeler::{Finding, FindingOntology};
use crate::model::ImageGrid;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("finding layout: {0}")]
    Layout(String),
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    Ratios([f64; 3]),
    #[error("{path} line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Sentence used when no finding is present.
pub const NORMAL_REPORT: &str = "no acute cardiopulmonary process.";
/// Side of the square cell block each finding occupies.
pub const BLOB_SIZE: usize = 2;

fn default_templates() -> usize {
    3
}
fn default_signal() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub grid: ImageGrid,
    /// Positive rate per finding id.
    pub prevalences: BTreeMap<String, f64>,
    /// Sentence variants drawn per finding, at most 3.
    #[serde(default = "default_templates")]
    pub templates_per_finding: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Amplitude added to every channel inside a present finding's region.
    #[serde(default = "default_signal")]
    pub signal: f64,
}

impl GeneratorConfig {
    /// Five findings at 0.30 / 0.20 / 0.05 / 0.25 / 0.35 on a 7×7×16 grid.
    pub fn standard(seed: u64, n_samples: usize) -> Self {
        let prevalences = [
            ("cardiomegaly", 0.30),
            ("edema", 0.20),
            ("consolidation", 0.05),
            ("atelectasis", 0.25),
            ("pleural_effusion", 0.35),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect();
        Self {
            seed,
            n_samples,
            grid: ImageGrid { height: 7, width: 7, channels: 16 },
            prevalences,
            templates_per_finding: 3,
            noise: 0.8,
            signal: 1.0,
        }
    }

    pub fn validate(&self, ontology: &FindingOntology) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        for (id, &p) in &self.prevalences {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("prevalence of {id} is {p}, outside [0, 1]"));
            }
        }
        let ids: Vec<String> = ontology.ids();
        let mut sorted = ids.clone();
        sorted.sort();
        if sorted != self.prevalences.keys().cloned().collect::<Vec<_>>() {
            return bad(format!("prevalences cover {:?}, ontology has {ids:?}", self.prevalences.keys()));
        }
        if !(1..=3).contains(&self.templates_per_finding) {
            return bad(format!("templates_per_finding {} outside 1..=3", self.templates_per_finding));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !self.signal.is_finite() {
            return bad(format!("noise {} and signal {} must be finite, noise non-negative", self.noise, self.signal));
        }
        if self.grid.channels == 0 {
            return bad("grid has no channels".into());
        }
        Ok(())
    }
}

/// Cells `(row, col)` of one finding's block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl Region {
    pub fn cells(&self) -> Vec<(usize, usize)> {
        (self.row..self.row + self.size)
            .flat_map(|r| (self.col..self.col + self.size).map(move |c| (r, c)))
            .collect()
    }

    /// Flattened sequence indices `r·w + c` of the block.
    pub fn flat_indices(&self, width: usize) -> Vec<usize> {
        self.cells().into_iter().map(|(r, c)| r * width + c).collect()
    }
}

/// Block origins in assignment order: centre, then the four corners.
/// Fails when the grid cannot hold `count` disjoint blocks this way.
pub fn finding_regions(grid: ImageGrid, count: usize) -> Result<Vec<Region>, SynthError> {
    let (h, w) = (grid.height, grid.width);
    if h < BLOB_SIZE || w < BLOB_SIZE {
        return Err(SynthError::Layout(format!("{h}x{w} grid is smaller than a {BLOB_SIZE}x{BLOB_SIZE} block")));
    }
    let (far_r, far_c) = (h - BLOB_SIZE, w - BLOB_SIZE);
    let slots = [(far_r / 2, far_c / 2), (0, 0), (0, far_c), (far_r, 0), (far_r, far_c)];
    if count > slots.len() {
        return Err(SynthError::Layout(format!("{count} findings, only {} block positions", slots.len())));
    }
    let regions: Vec<Region> =
        slots[..count].iter().map(|&(row, col)| Region { row, col, size: BLOB_SIZE }).collect();
    for (i, a) in regions.iter().enumerate() {
        for b in &regions[..i] {
            if a.cells().iter().any(|c| b.cells().contains(c)) {
                return Err(SynthError::Layout(format!(
                    "blocks at {:?} and {:?} overlap on a {h}x{w} grid",
                    (a.row, a.col),
                    (b.row, b.col)
                )));
            }
        }
    }
    Ok(regions)
}

/// Sentence variants for a finding. Built-in findings have curated
/// wording; others are phrased from their mention list.
pub fn templates(finding: &Finding) -> Vec<String> {
    let fixed: &[&str] = match finding.id.as_str() {
        "cardiomegaly" => &["moderate cardiomegaly is present.", "the heart is enlarged.", "there is mild cardiomegaly."],
        "edema" => &["mild pulmonary edema is seen.", "there is interstitial edema.", "findings are consistent with edema."],
        "consolidation" => &[
            "focal consolidation is present.",
            "there is consolidation in the lung.",
            "patchy consolidation is noted.",
        ],
        "atelectasis" => &["bibasilar atelectasis is seen.", "there is subsegmental atelectasis.", "minor atelectasis is noted."],
        "pleural_effusion" => &[
            "there is a small pleural effusion.",
            "blunting of the costophrenic angle is seen.",
            "a moderate effusion is present.",
        ],
        _ => &[],
    };
    if !fixed.is_empty() {
        return fixed.iter().map(|s| (*s).to_owned()).collect();
    }
    let p = |i: usize| &finding.phrases[i % finding.phrases.len()];
    vec![format!("there is {}.", p(0)), format!("{} is present.", p(1)), format!("{} is noted.", p(2))]
}

/// One generated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    /// `[h, w, c]` extents of `features`.
    pub extents: Vec<usize>,
    /// Row-major feature grid.
    pub features: Vec<f64>,
    pub report: String,
    /// Present finding ids, in ontology order.
    pub labels: Vec<String>,
}

impl Record {
    pub fn image(&self) -> Result<Tensor, SynthError> {
        Tensor::new(self.extents.clone(), self.features.clone())
            .map_err(|e| SynthError::InvalidConfig(format!("record {}: {e}", self.id)))
    }
}

/// Draws `config.n_samples` records. Record `i` depends only on the seed
/// and `i`.
pub fn generate(config: &GeneratorConfig, ontology: &FindingOntology) -> Result<Vec<Record>, SynthError> {
    config.validate(ontology)?;
    let findings = ontology.findings();
    let n = findings.len();
    let regions = finding_regions(config.grid, n)?;
    let sentence_sets: Vec<Vec<String>> = findings.iter().map(templates).collect();
    let noise = Normal::new(0.0, config.noise).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let [h, w, c] = config.grid.shape();

    let mut out = Vec::with_capacity(config.n_samples);
    for index in 0..config.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(index as u64);
        let present: Vec<usize> =
            (0..n).filter(|&k| rng.gen_bool(config.prevalences[&findings[k].id])).collect();
        let mut features: Vec<f64> = (0..h * w * c).map(|_| noise.sample(&mut rng)).collect();
        for &k in &present {
            for cell in regions[k].flat_indices(w) {
                for v in &mut features[cell * c..(cell + 1) * c] {
                    *v += config.signal;
                }
            }
        }
        for v in &mut features {
            *v = f64::from(*v as f32);
        }
        let mut sentences: Vec<&str> = present
            .iter()
            .map(|&k| sentence_sets[k][rng.gen_range(0..config.templates_per_finding)].as_str())
            .collect();
        sentences.shuffle(&mut rng);
        let report = if sentences.is_empty() { NORMAL_REPORT.to_owned() } else { sentences.join(" ") };
        out.push(Record {
            id: format!("synth-{index:05}"),
            extents: vec![h, w, c],
            features,
            report,
            labels: present.iter().map(|&k| findings[k].id.clone()).collect(),
        });
    }
    Ok(out)
}

/// Seeded disjoint train/validate/test partition; the first two sizes are
/// `round(n·ratio)` and the test split takes the remainder.
pub fn split<T: Clone>(items: &[T], ratios: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>), SynthError> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SynthError::Ratios(ratios));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..n_train + n_val]), pick(&order[n_train + n_val..])))
}

pub fn write_dataset(path: &Path, records: &[Record]) -> Result<(), SynthError> {
    let io_err = |source| SynthError::Io { path: path.display().to_string(), source };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(file, "{line}").map_err(io_err)?;
    }
    file.flush().map_err(io_err)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Record>, SynthError> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| SynthError::Io { path: name.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| SynthError::Io { path: name.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| SynthError::Parse { path: name.clone(), line: i + 1, message };
        let r: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if r.extents.iter().product::<usize>() != r.features.len() {
            return Err(parse_err(format!("extents {:?} do not match {} features", r.extents, r.features.len())));
        }
        out.push(r);
    }
    Ok(out)
}
