//! Corpus-level caption metrics: BLEU-1..4, ROUGE-L and CIDEr-D.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no candidate/reference pairs")]
    EmptyCorpus,
    #[error("pair {index} has no references")]
    EmptyReferences { index: usize },
    #[error("BLEU order {0} must be at least 1")]
    InvalidOrder(usize),
    #[error("IDF undefined: corpus has {documents} distinct reference document(s), need at least 2")]
    DegenerateIdf { documents: usize },
    #[error("{path} line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// ROUGE-L weighting of recall against precision.
pub const ROUGE_BETA_SQUARED: f64 = 1.2;
/// Gaussian length-penalty width of CIDEr-D.
pub const CIDER_SIGMA: f64 = 6.0;
const CIDER_MAX_N: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    #[serde(default)]
    pub id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

impl EvalPair {
    pub fn new(candidate: &str, references: &[&str]) -> Self {
        Self {
            id: String::new(),
            candidate: candidate.to_owned(),
            references: references.iter().map(|r| (*r).to_owned()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub n_pairs: usize,
}

/// Lowercases, isolates every punctuation character as its own token and
/// splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_spans(text).into_iter().map(|(t, _)| t).collect()
}

/// [`tokenize`] with the byte range of each token in `text`.
pub fn tokenize_spans(text: &str) -> Vec<(String, Range<usize>)> {
    let mut out: Vec<(String, Range<usize>)> = Vec::new();
    let mut word: Option<(String, usize)> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            word.get_or_insert_with(|| (String::new(), i)).0.extend(ch.to_lowercase());
            continue;
        }
        if let Some((w, start)) = word.take() {
            out.push((w, start..i));
        }
        if !ch.is_whitespace() {
            out.push((ch.to_lowercase().collect(), i..i + ch.len_utf8()));
        }
    }
    if let Some((w, start)) = word {
        out.push((w, start..text.len()));
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check(pairs: &[EvalPair]) -> Result<(), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    if let Some(index) = pairs.iter().position(|p| p.references.is_empty()) {
        return Err(MetricsError::EmptyReferences { index });
    }
    Ok(())
}

struct Tokenized {
    candidate: Vec<String>,
    references: Vec<Vec<String>>,
}

fn tokenize_pairs(pairs: &[EvalPair]) -> Vec<Tokenized> {
    pairs
        .iter()
        .map(|p| Tokenized {
            candidate: tokenize(&p.candidate),
            references: p.references.iter().map(|r| tokenize(r)).collect(),
        })
        .collect()
}

fn bleu_tokenized(corpus: &[Tokenized], n: usize) -> f64 {
    let mut clipped = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for p in corpus {
        let c = p.candidate.len();
        cand_len += c;
        ref_len += p
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for k in 1..=n {
            let cand = ngram_counts(&p.candidate, k);
            let refs: Vec<_> = p.references.iter().map(|r| ngram_counts(r, k)).collect();
            for (gram, &count) in &cand {
                let max_ref = refs.iter().map(|r| r.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
                clipped[k - 1] += count.min(max_ref);
            }
            totals[k - 1] += c.saturating_sub(k - 1);
        }
    }
    if cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (&m, &t) in clipped.iter().zip(&totals) {
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    bp * (log_sum / n as f64).exp()
}

/// Corpus BLEU-n: clipped n-gram counts summed over the corpus, geometric
/// mean of orders `1..=n`, brevity penalty against the closest reference
/// length (shorter wins ties). No smoothing.
pub fn bleu_n(pairs: &[EvalPair], n: usize) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::InvalidOrder(n));
    }
    check(pairs)?;
    Ok(bleu_tokenized(&tokenize_pairs(pairs), n))
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `(1+β²)PR / (R + β²P)` from an LCS length; 0 when there is no overlap.
pub fn rouge_f(lcs_len: usize, cand_len: usize, ref_len: usize) -> f64 {
    if lcs_len == 0 {
        return 0.0;
    }
    let p = lcs_len as f64 / cand_len as f64;
    let r = lcs_len as f64 / ref_len as f64;
    (1.0 + ROUGE_BETA_SQUARED) * p * r / (r + ROUGE_BETA_SQUARED * p)
}

fn rouge_tokenized(corpus: &[Tokenized]) -> f64 {
    let total: f64 = corpus
        .iter()
        .map(|p| {
            p.references
                .iter()
                .map(|r| rouge_f(lcs(&p.candidate, r), p.candidate.len(), r.len()))
                .fold(0.0, f64::max)
        })
        .sum();
    total / corpus.len() as f64
}

/// Mean over the corpus of the best ROUGE-L F-measure against any reference.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    check(pairs)?;
    Ok(rouge_tokenized(&tokenize_pairs(pairs)))
}

struct TfIdf {
    vecs: Vec<BTreeMap<Vec<String>, f64>>,
    norms: Vec<f64>,
    length: f64,
}

fn tfidf(tokens: &[String], df: &HashMap<Vec<String>, usize>, log_docs: f64) -> TfIdf {
    let mut vecs = Vec::with_capacity(CIDER_MAX_N);
    let mut norms = Vec::with_capacity(CIDER_MAX_N);
    let mut length = 0.0;
    for n in 1..=CIDER_MAX_N {
        let mut vec = BTreeMap::new();
        let mut norm = 0.0;
        for (gram, tf) in ngram_counts(tokens, n) {
            let d = df.get(gram).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_docs - d.ln());
            norm += w * w;
            vec.insert(gram.to_vec(), w);
            if n == 2 {
                length += tf as f64;
            }
        }
        vecs.push(vec);
        norms.push(norm.sqrt());
    }
    TfIdf { vecs, norms, length }
}

fn cider_sim(hyp: &TfIdf, reference: &TfIdf) -> f64 {
    let delta = hyp.length - reference.length;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..CIDER_MAX_N {
        let mut val = 0.0;
        for (gram, &h) in &hyp.vecs[n] {
            if let Some(&r) = reference.vecs[n].get(gram) {
                val += h.min(r) * r;
            }
        }
        if hyp.norms[n] != 0.0 && reference.norms[n] != 0.0 {
            val /= hyp.norms[n] * reference.norms[n];
        }
        total += val * penalty;
    }
    total / CIDER_MAX_N as f64
}

fn cider_tokenized(corpus: &[Tokenized], raw: &[EvalPair]) -> Result<f64, MetricsError> {
    let documents: BTreeSet<Vec<&String>> = raw.iter().map(|p| p.references.iter().collect()).collect();
    if documents.len() < 2 {
        return Err(MetricsError::DegenerateIdf { documents: documents.len() });
    }
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for p in corpus {
        let mut seen: BTreeSet<&[String]> = BTreeSet::new();
        for r in &p.references {
            for n in 1..=CIDER_MAX_N {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for gram in seen {
            *df.entry(gram.to_vec()).or_insert(0) += 1;
        }
    }
    let log_docs = (corpus.len() as f64).ln();
    let mut total = 0.0;
    for p in corpus {
        let hyp = tfidf(&p.candidate, &df, log_docs);
        let sum: f64 = p.references.iter().map(|r| cider_sim(&hyp, &tfidf(r, &df, log_docs))).sum();
        total += sum / p.references.len() as f64 * 10.0;
    }
    Ok(total / corpus.len() as f64)
}

/// CIDEr-D: per order 1..4, clipped TF-IDF similarity with a Gaussian
/// penalty on the bigram-count difference, averaged over orders and
/// references, scaled by 10 and averaged over the corpus. Document
/// frequencies count pairs whose references contain the n-gram.
pub fn cider(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    check(pairs)?;
    cider_tokenized(&tokenize_pairs(pairs), pairs)
}

/// All six scores over one corpus.
pub fn evaluate_pairs(pairs: &[EvalPair]) -> Result<MetricSummary, MetricsError> {
    check(pairs)?;
    let corpus = tokenize_pairs(pairs);
    Ok(MetricSummary {
        bleu_1: bleu_tokenized(&corpus, 1),
        bleu_2: bleu_tokenized(&corpus, 2),
        bleu_3: bleu_tokenized(&corpus, 3),
        bleu_4: bleu_tokenized(&corpus, 4),
        rouge_l: rouge_tokenized(&corpus),
        cider: cider_tokenized(&corpus, pairs)?,
        n_pairs: pairs.len(),
    })
}

/// Reads JSON-lines records `{id, candidate, references}`; blank lines are skipped.
pub fn read_pairs(path: &Path) -> Result<Vec<EvalPair>, MetricsError> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| MetricsError::Io { path: name.clone(), source })?;
    let mut pairs = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| MetricsError::Io { path: name.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: EvalPair = serde_json::from_str(&line)
            .map_err(|e| MetricsError::Parse { path: name.clone(), line: i + 1, message: e.to_string() })?;
        pairs.push(pair);
    }
    Ok(pairs)
}
