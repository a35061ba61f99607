//! Byte-pair-encoding sub-word tokenizer.
//!
//! Text is lowercased and split on whitespace. Inside each word, every
//! punctuation character and every digit becomes its own segment, and runs of
//! other characters form merge segments. The last symbol of a word carries
//! the end-of-word marker `</w>`, so decoding can restore word boundaries.
//! Merges never cross segment boundaries.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const END_OF_WORD: &str = "</w>";
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
/// Decoded form of [`UNK`].
pub const REPLACEMENT_GLYPH: char = '\u{FFFD}';

const HEADER: &str = "BPE-V1";
const VOCAB_SENTINEL: &str = "#VOCAB";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("target vocabulary size {target} must exceed {base} base symbols plus 4 reserved tokens")]
    VocabTooSmall { target: usize, base: usize },
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u32),
    #[error("vocab file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("vocab file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Ordered merge rules; a pair's rank is its position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeTable {
    pairs: Vec<(String, String)>,
    ranks: HashMap<String, HashMap<String, usize>>,
}

impl MergeTable {
    pub fn from_pairs(pairs: Vec<(String, String)>) -> Result<Self, String> {
        let mut table = Self::default();
        for pair in pairs {
            if table.rank(&pair.0, &pair.1).is_some() {
                return Err(format!("duplicate merge pair {} {}", pair.0, pair.1));
            }
            table.push(pair);
        }
        Ok(table)
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn rank(&self, left: &str, right: &str) -> Option<usize> {
        self.ranks.get(left).and_then(|m| m.get(right)).copied()
    }

    fn push(&mut self, pair: (String, String)) {
        self.ranks
            .entry(pair.0.clone())
            .or_default()
            .insert(pair.1.clone(), self.pairs.len());
        self.pairs.push(pair);
    }
}

/// Token ↔ id bijection. Ids 0..=3 are the reserved special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for s in SPECIAL_TOKENS {
            v.insert(s);
        }
        v
    }

    /// Adds `token` if absent and returns its id.
    fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_owned());
        self.ids.insert(token.to_owned(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One merge segment of a pre-tokenized word.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Segment {
    text: String,
    /// Whether this segment ends its whitespace-delimited word.
    final_in_word: bool,
}

fn is_isolated(c: char) -> bool {
    c.is_ascii_punctuation() || c.is_ascii_digit() || (!c.is_alphanumeric() && !c.is_whitespace())
}

/// Lowercases, splits on whitespace, then isolates punctuation and digits.
fn pre_tokenize(text: &str) -> Vec<Segment> {
    let lowered = text.to_lowercase();
    let mut out = Vec::new();
    for word in lowered.split_whitespace() {
        let start = out.len();
        let mut run = String::new();
        for c in word.chars() {
            if is_isolated(c) {
                if !run.is_empty() {
                    out.push(Segment { text: std::mem::take(&mut run), final_in_word: false });
                }
                out.push(Segment { text: c.to_string(), final_in_word: false });
            } else {
                run.push(c);
            }
        }
        if !run.is_empty() {
            out.push(Segment { text: run, final_in_word: false });
        }
        if out.len() > start {
            out.last_mut().unwrap().final_in_word = true;
        }
    }
    out
}

/// Initial symbol sequence of a segment: one symbol per character, with the
/// end-of-word marker fused onto the last character when the segment ends a word.
fn initial_symbols(seg: &Segment) -> Vec<String> {
    let mut symbols: Vec<String> = seg.text.chars().map(String::from).collect();
    if seg.final_in_word {
        if let Some(last) = symbols.last_mut() {
            last.push_str(END_OF_WORD);
        }
    }
    symbols
}

fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Trained tokenizer: merge table plus vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    merges: MergeTable,
    vocab: Vocab,
}

impl Tokenizer {
    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Greedy BPE training.
    ///
    /// Repeatedly merges the most frequent adjacent symbol pair (ties broken
    /// by the lexicographically smallest `(left, right)`) until the vocabulary
    /// reaches `target_vocab_size` or no pair occurs at least twice.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_vocab_size: usize) -> Result<Self, TokenizerError> {
        let mut counts: BTreeMap<Segment, usize> = BTreeMap::new();
        for line in corpus {
            for seg in pre_tokenize(line.as_ref()) {
                *counts.entry(seg).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }

        // Every character gets both its inner and its end-of-word form so that
        // any text over the training alphabet encodes without UNK.
        let mut alphabet: Vec<char> = counts.keys().flat_map(|s| s.text.chars()).collect();
        alphabet.sort_unstable();
        alphabet.dedup();
        let base = alphabet.len() * 2;
        if target_vocab_size <= base + SPECIAL_TOKENS.len() {
            return Err(TokenizerError::VocabTooSmall { target: target_vocab_size, base });
        }
        let mut vocab = Vocab::new();
        for &c in &alphabet {
            vocab.insert(&c.to_string());
        }
        for &c in &alphabet {
            vocab.insert(&format!("{c}{END_OF_WORD}"));
        }

        let mut words: Vec<(Vec<String>, usize)> = counts
            .iter()
            .map(|(seg, &n)| (initial_symbols(seg), n))
            .filter(|(symbols, _)| symbols.len() > 1)
            .collect();
        let mut merges = MergeTable::default();

        while vocab.len() < target_vocab_size {
            let mut pair_counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (symbols, n) in &words {
                for w in symbols.windows(2) {
                    *pair_counts.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
                }
            }
            let best = pair_counts
                .into_iter()
                .filter(|&(_, n)| n >= 2)
                .max_by(|(pa, na), (pb, nb)| na.cmp(nb).then_with(|| pb.cmp(pa)));
            let Some(((left, right), _)) = best else { break };
            let (left, right) = (left.to_owned(), right.to_owned());
            for (symbols, _) in &mut words {
                merge_pair(symbols, &left, &right);
            }
            vocab.insert(&format!("{left}{right}"));
            merges.push((left, right));
        }
        Ok(Self { merges, vocab })
    }

    fn encode_segment(&self, seg: &Segment, out: &mut Vec<u32>) {
        let mut symbols = initial_symbols(seg);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merges.rank(&w[0], &w[1]))
                .min();
            let Some(rank) = best else { break };
            let (left, right) = &self.merges.pairs[rank];
            merge_pair(&mut symbols, left, right);
        }
        out.extend(symbols.iter().map(|s| self.vocab.id(s).unwrap_or(UNK)));
    }

    /// Encodes text; unknown characters become [`UNK`]. With `add_specials`
    /// the ids are wrapped in [`BOS`] … [`EOS`].
    pub fn encode(&self, text: &str, add_specials: bool) -> Vec<u32> {
        let mut ids = Vec::new();
        if add_specials {
            ids.push(BOS);
        }
        for seg in pre_tokenize(text) {
            self.encode_segment(&seg, &mut ids);
        }
        if add_specials {
            ids.push(EOS);
        }
        ids
    }

    /// Inverse of [`Tokenizer::encode`] on normalized text. Special tokens are
    /// dropped; [`UNK`] decodes to [`REPLACEMENT_GLYPH`].
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        Ok(self.decode_with_spans(ids)?.0)
    }

    /// Decodes and also returns, per id, the byte range of the text it
    /// produced (empty for special tokens).
    pub fn decode_with_spans(&self, ids: &[u32]) -> Result<(String, Vec<Range<usize>>), TokenizerError> {
        let mut text = String::new();
        let mut spans = Vec::with_capacity(ids.len());
        for &id in ids {
            let token = self.vocab.token(id).ok_or(TokenizerError::UnknownId(id))?;
            let start = text.len();
            match id {
                PAD | BOS | EOS => {}
                UNK => text.push(REPLACEMENT_GLYPH),
                _ => match token.strip_suffix(END_OF_WORD) {
                    Some(stem) => {
                        text.push_str(stem);
                        spans.push(start..text.len());
                        text.push(' ');
                        continue;
                    }
                    None => text.push_str(token),
                },
            }
            spans.push(start..text.len());
        }
        if text.ends_with(' ') {
            text.pop();
        }
        let len = text.len();
        for s in &mut spans {
            s.start = s.start.min(len);
            s.end = s.end.min(len);
        }
        Ok((text, spans))
    }

    /// Token strings for display (attention dumps, debugging).
    pub fn id_to_token(&self, id: u32) -> Option<&str> {
        self.vocab.token(id)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER} {}", self.vocab.len());
        for (l, r) in self.merges.pairs() {
            let _ = writeln!(s, "{l} {r}");
        }
        let _ = writeln!(s, "{VOCAB_SENTINEL}");
        for (id, tok) in self.vocab.tokens().iter().enumerate() {
            let _ = writeln!(s, "{tok}\t{id}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let err = |line: usize, message: String| TokenizerError::Parse { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let size: usize = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| err(1, format!("expected \"{HEADER} <vocab_size>\", got {header:?}")))?;

        let mut pairs = Vec::new();
        let mut saw_sentinel = false;
        let mut last_line = 1;
        for (n, line) in lines.by_ref() {
            last_line = n;
            if line == VOCAB_SENTINEL {
                saw_sentinel = true;
                break;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    pairs.push((l.to_owned(), r.to_owned()))
                }
                _ => return Err(err(n, format!("malformed merge line {line:?}"))),
            }
        }
        if !saw_sentinel {
            return Err(err(last_line + 1, format!("missing {VOCAB_SENTINEL} sentinel")));
        }
        let merges = MergeTable::from_pairs(pairs).map_err(|m| err(last_line, m))?;

        let mut tokens: Vec<String> = Vec::with_capacity(size);
        let mut seen = std::collections::HashSet::new();
        for (n, line) in lines {
            last_line = n;
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| err(n, format!("malformed vocab line {line:?}")))?;
            let id: usize = id.parse().map_err(|_| err(n, format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(err(n, format!("expected id {}, got {id}", tokens.len())));
            }
            if !seen.insert(tok.to_owned()) {
                return Err(err(n, format!("duplicate token {tok:?}")));
            }
            tokens.push(tok.to_owned());
        }
        if tokens.len() != size {
            return Err(err(
                last_line + 1,
                format!("header declares {size} tokens but {} were read", tokens.len()),
            ));
        }
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..4] != SPECIAL_TOKENS {
            return Err(err(last_line, "reserved tokens missing from ids 0..3".into()));
        }
        let mut vocab = Vocab { tokens: Vec::new(), ids: HashMap::new() };
        for tok in &tokens {
            vocab.insert(tok);
        }
        Ok(Self { merges, vocab })
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_text()).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }
}

/// Lowercase and collapse whitespace: the form [`Tokenizer::decode`] returns.
pub fn normalize(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}
