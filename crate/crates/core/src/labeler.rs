//! Rule-based finding extraction from report text and per-finding
//! classification scores.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{tokenize, tokenize_spans};

#[derive(Debug, Error)]
pub enum LabelerError {
    #[error("{pred} predictions for {truth} ground-truth samples")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("invalid ontology: {0}")]
    Ontology(String),
    #[error("{path} line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Tokens a negation cue may end before the mention it negates.
pub const NEGATION_WINDOW: usize = 4;
pub const NEGATION_CUES: [&str; 4] = ["no", "without", "free of", "negative for"];
const SENTENCE_BREAKS: [&str; 4] = [".", ";", "!", "?"];

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub id: String,
    pub name: String,
    pub phrases: Vec<String>,
    #[serde(default = "default_true")]
    pub negatable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FindingOntology {
    findings: Vec<Finding>,
    phrase_tokens: Vec<Vec<Vec<String>>>,
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

impl FindingOntology {
    pub fn new(findings: Vec<Finding>) -> Result<Self, LabelerError> {
        if findings.is_empty() {
            return Err(LabelerError::Ontology("no findings".into()));
        }
        let mut ids = BTreeSet::new();
        let mut phrase_tokens = Vec::with_capacity(findings.len());
        for f in &findings {
            if !ids.insert(f.id.as_str()) {
                return Err(LabelerError::Ontology(format!("duplicate finding id {:?}", f.id)));
            }
            if f.phrases.is_empty() {
                return Err(LabelerError::Ontology(format!("finding {:?} has no phrases", f.id)));
            }
            let toks: Vec<Vec<String>> = f.phrases.iter().map(|p| tokenize(p)).collect();
            if let Some(i) = toks.iter().position(Vec::is_empty) {
                return Err(LabelerError::Ontology(format!("finding {:?} phrase {:?} is blank", f.id, f.phrases[i])));
            }
            phrase_tokens.push(toks);
        }
        for (a, fa) in findings.iter().enumerate() {
            for (b, fb) in findings.iter().enumerate() {
                if a == b {
                    continue;
                }
                for (pa, ta) in fa.phrases.iter().zip(&phrase_tokens[a]) {
                    for (pb, tb) in fb.phrases.iter().zip(&phrase_tokens[b]) {
                        if contains_run(ta, tb) {
                            return Err(LabelerError::Ontology(format!(
                                "phrase {pa:?} of {:?} contains phrase {pb:?} of {:?}",
                                fa.id, fb.id
                            )));
                        }
                    }
                }
            }
        }
        Ok(Self { findings, phrase_tokens })
    }

    /// The five built-in synthetic findings.
    pub fn standard() -> Self {
        let f = |id: &str, name: &str, phrases: &[&str]| Finding {
            id: id.into(),
            name: name.into(),
            phrases: phrases.iter().map(|p| (*p).to_owned()).collect(),
            negatable: true,
        };
        Self::new(vec![
            f("cardiomegaly", "Cardiomegaly", &["cardiomegaly", "heart is enlarged"]),
            f("edema", "Edema", &["edema"]),
            f("consolidation", "Consolidation", &["consolidation"]),
            f("atelectasis", "Atelectasis", &["atelectasis"]),
            f("pleural_effusion", "Pleural Effusion", &["effusion", "blunting of the costophrenic"]),
        ])
        .expect("built-in ontology is valid")
    }

    pub fn findings(&self) -> &[Finding] {
        &self.findings
    }

    pub fn ids(&self) -> Vec<String> {
        self.findings.iter().map(|f| f.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Finding> {
        self.findings.iter().find(|f| f.id == id)
    }

    pub fn to_jsonl(&self) -> String {
        self.findings
            .iter()
            .map(|f| serde_json::to_string(f).expect("finding serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str, source: &str) -> Result<Self, LabelerError> {
        let mut findings = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Finding = serde_json::from_str(line)
                .map_err(|e| LabelerError::Parse { path: source.into(), line: i + 1, message: e.to_string() })?;
            findings.push(f);
        }
        Self::new(findings)
    }

    pub fn load(path: &Path) -> Result<Self, LabelerError> {
        let name = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|source| LabelerError::Io { path: name.clone(), source })?;
        let mut text = String::new();
        for line in std::io::BufReader::new(file).lines() {
            text.push_str(&line.map_err(|source| LabelerError::Io { path: name.clone(), source })?);
            text.push('\n');
        }
        Self::from_jsonl(&text, &name)
    }

    pub fn save(&self, path: &Path) -> Result<(), LabelerError> {
        std::fs::write(path, self.to_jsonl())
            .map_err(|source| LabelerError::Io { path: path.display().to_string(), source })
    }
}

fn is_negated(tokens: &[String], start: usize, cues: &[Vec<String>]) -> bool {
    for back in 1..=NEGATION_WINDOW.min(start) {
        let end = start - back;
        if SENTENCE_BREAKS.contains(&tokens[end].as_str()) {
            return false;
        }
        for cue in cues {
            if end + 1 >= cue.len() && tokens[end + 1 - cue.len()..=end] == cue[..] {
                return true;
            }
        }
    }
    false
}

/// One phrase occurrence in a report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub finding: String,
    /// Byte range of the phrase in the input text.
    pub span: Range<usize>,
    pub negated: bool,
}

/// Every phrase occurrence, in text order, with its negation status.
pub fn find_mentions(text: &str, ontology: &FindingOntology) -> Vec<Mention> {
    let spans = tokenize_spans(text);
    let tokens: Vec<String> = spans.iter().map(|(t, _)| t.clone()).collect();
    let cues: Vec<Vec<String>> = NEGATION_CUES.iter().map(|c| tokenize(c)).collect();
    let mut out = Vec::new();
    for s in 0..tokens.len() {
        for (f, phrases) in ontology.findings.iter().zip(&ontology.phrase_tokens) {
            for p in phrases {
                if s + p.len() <= tokens.len() && tokens[s..s + p.len()] == p[..] {
                    out.push(Mention {
                        finding: f.id.clone(),
                        span: spans[s].1.start..spans[s + p.len() - 1].1.end,
                        negated: f.negatable && is_negated(&tokens, s, &cues),
                    });
                }
            }
        }
    }
    out
}

/// Positive finding ids: a finding is positive when some phrase occurs
/// without a negation cue ending in the [`NEGATION_WINDOW`] tokens before
/// it (within the same sentence).
pub fn label_report(text: &str, ontology: &FindingOntology) -> BTreeSet<String> {
    find_mentions(text, ontology).into_iter().filter(|m| !m.negated).map(|m| m.finding).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Positive rate among the ground-truth labels.
    pub prevalence: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_finding: BTreeMap<String, FindingScores>,
    /// Fraction of correct (sample, finding) decisions.
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Binary precision, recall and F1 per finding. Undefined ratios are 0.
pub fn classification_report(
    pred: &[BTreeSet<String>],
    truth: &[BTreeSet<String>],
    findings: &[String],
) -> Result<ClassificationReport, LabelerError> {
    if pred.len() != truth.len() {
        return Err(LabelerError::LengthMismatch { pred: pred.len(), truth: truth.len() });
    }
    let mut per_finding = BTreeMap::new();
    let mut correct = 0;
    for id in findings {
        let (mut tp, mut fp, mut fneg, mut positives) = (0, 0, 0, 0);
        for (p, t) in pred.iter().zip(truth) {
            let (hp, ht) = (p.contains(id), t.contains(id));
            positives += ht as usize;
            match (hp, ht) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
            correct += (hp == ht) as usize;
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        per_finding.insert(
            id.clone(),
            FindingScores {
                precision,
                recall,
                f1,
                prevalence: ratio(positives, truth.len()),
                true_positives: tp,
                false_positives: fp,
                false_negatives: fneg,
            },
        );
    }
    Ok(ClassificationReport { per_finding, accuracy: ratio(correct, truth.len() * findings.len()) })
}

/// Positive rate of each finding among `truth`.
pub fn class_bias(truth: &[BTreeSet<String>], findings: &[String]) -> BTreeMap<String, f64> {
    findings
        .iter()
        .map(|id| (id.clone(), ratio(truth.iter().filter(|t| t.contains(id)).count(), truth.len())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentence_break_ends_negation_scope() {
        let o = FindingOntology::standard();
        assert!(label_report("no acute process. effusion is present.", &o).contains("pleural_effusion"));
        assert!(label_report("free of edema", &o).is_empty());
        assert!(!label_report("one two three four five edema", &o).is_empty());
        assert!(label_report("no one two three edema", &o).is_empty());
        assert!(!label_report("no one two three four edema", &o).is_empty());
    }

    #[test]
    fn overlapping_phrases_are_rejected() {
        let mut fs = FindingOntology::standard().findings().to_vec();
        fs[1].phrases.push("pleural effusion".into());
        assert!(matches!(FindingOntology::new(fs), Err(LabelerError::Ontology(_))));
    }
}
