//! Tokenization, sliding-window partitioning, corpus ingestion, and the
//! planted-phrase synthetic corpus.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Default n-gram size.
pub const DEFAULT_NGRAM: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub text: String,
    pub label: usize,
}

impl Instance {
    pub fn new(text: impl Into<String>, label: usize) -> Self {
        Self {
            text: text.into(),
            label,
        }
    }
}

/// A token together with the byte range it came from in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// One stride-1 window over the token list. Token indices are inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Part {
    pub start_token: usize,
    pub end_token: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartSequence {
    pub parts: Vec<Part>,
    pub n: usize,
}

impl PartSequence {
    /// Number of parts `T`.
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercased whitespace tokenization with punctuation split into single
/// character tokens. Offsets refer to the original (not lowercased) text.
pub fn tokenize_with_offsets(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;

    let flush = |tokens: &mut Vec<Token>, start: usize, end: usize| {
        tokens.push(Token {
            text: text[start..end].to_lowercase(),
            start,
            end,
        });
    };

    for (i, c) in text.char_indices() {
        if c.is_whitespace() || is_punctuation(c) {
            if let Some(s) = word_start.take() {
                flush(&mut tokens, s, i);
            }
            if is_punctuation(c) {
                flush(&mut tokens, i, i + c.len_utf8());
            }
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    if let Some(s) = word_start {
        flush(&mut tokens, s, text.len());
    }
    tokens
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text)
        .into_iter()
        .map(|t| t.text)
        .collect()
}

/// Number of parts a text with `token_count` tokens yields for window size `n`.
pub fn part_count(token_count: usize, n: usize) -> usize {
    (token_count + 1).saturating_sub(n).max(1)
}

pub fn partition_ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> Result<PartSequence> {
    if n == 0 {
        return Err(Error::InvalidParameter("n-gram size must be at least 1".into()));
    }
    let width = n.min(tokens.len());
    let parts = (0..part_count(tokens.len(), n))
        .map(|start| {
            let window = &tokens[start..start + width];
            Part {
                start_token: start,
                end_token: (start + width).saturating_sub(1),
                text: window
                    .iter()
                    .map(AsRef::as_ref)
                    .collect::<Vec<_>>()
                    .join(" "),
            }
        })
        .collect();
    Ok(PartSequence { parts, n })
}

/// Split text into sentences on `.`, `!` and `?`. Fragments are trimmed and
/// empty ones dropped.
pub fn split_sentences(text: &str) -> Vec<&str> {
    text.split(['.', '!', '?'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn num_classes(corpus: &[Instance]) -> usize {
    corpus.iter().map(|i| i.label + 1).max().unwrap_or(0)
}

pub fn parse_corpus(contents: &str) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (idx, line) in contents.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::MalformedLine {
            line: line_no,
            message: "expected a JSON object".into(),
        })?;
        let text = obj
            .get("text")
            .ok_or(Error::MissingField {
                line: line_no,
                field: "text",
            })?
            .as_str()
            .ok_or_else(|| Error::MalformedLine {
                line: line_no,
                message: "`text` must be a string".into(),
            })?;
        let label = obj
            .get("label")
            .ok_or(Error::MissingField {
                line: line_no,
                field: "label",
            })?
            .as_u64()
            .ok_or_else(|| Error::MalformedLine {
                line: line_no,
                message: "`label` must be a non-negative integer".into(),
            })?;
        if text.trim().is_empty() {
            return Err(Error::MalformedLine {
                line: line_no,
                message: "`text` is empty".into(),
            });
        }
        out.push(Instance::new(text, label as usize));
    }
    Ok(out)
}

/// Read a JSON Lines corpus (`{"text": ..., "label": ...}` per line).
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    parse_corpus(&fs::read_to_string(path)?)
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[Instance]) -> Result<()> {
    let mut out = String::new();
    for inst in corpus {
        out.push_str(&serde_json::to_string(inst)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Where the planted phrase sits inside a synthetic instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub split: Split,
    pub index: usize,
    pub label: usize,
    pub phrase: String,
    /// First token of the phrase.
    pub token_start: usize,
    /// One past the last token of the phrase.
    pub token_end: usize,
}

impl SpanAnnotation {
    /// Parts (0-based, inclusive) whose window shares at least one token
    /// with the planted phrase.
    pub fn overlapping_parts(&self, token_count: usize, n: usize) -> (usize, usize) {
        let t = part_count(token_count, n);
        let first = (self.token_start + 1).saturating_sub(n);
        let last = (self.token_end - 1).min(t - 1);
        (first.min(t - 1), last)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_train: usize,
    pub num_test: usize,
    pub vocab_size: usize,
    /// One list of phrases per class.
    pub planted_phrases: Vec<Vec<String>>,
    pub noise_length: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Two sentiment-flavoured classes with three 3-gram phrases each.
    pub fn two_class(num_train: usize, num_test: usize, seed: u64) -> Self {
        let phrases = |p: &[&str]| p.iter().map(|s| s.to_string()).collect();
        Self {
            num_train,
            num_test,
            vocab_size: 200,
            planted_phrases: vec![
                phrases(&["truly awful plot", "waste of time", "poorly acted mess"]),
                phrases(&["highly entertaining flick", "great cast overall", "really loved it"]),
            ],
            noise_length: 30,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub annotations: Vec<SpanAnnotation>,
}

impl SyntheticCorpus {
    pub fn test_annotations(&self) -> impl Iterator<Item = &SpanAnnotation> {
        self.annotations.iter().filter(|a| a.split == Split::Test)
    }
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch",
];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Pronounceable filler word for index `i` (two or three syllables).
fn filler_word(i: usize) -> String {
    let syllables = ONSETS.len() * NUCLEI.len();
    let mut word = String::new();
    let mut rest = i;
    for _ in 0..2 {
        let s = rest % syllables;
        rest /= syllables;
        word.push_str(ONSETS[s / NUCLEI.len()]);
        word.push_str(NUCLEI[s % NUCLEI.len()]);
    }
    if rest > 0 {
        word.push_str(&filler_word(rest - 1));
    }
    word
}

pub fn filler_vocabulary(size: usize, exclude: &BTreeSet<String>) -> Vec<String> {
    (0..)
        .map(filler_word)
        .filter(|w| !exclude.contains(w))
        .take(size)
        .collect()
}

/// Noise texts with exactly one planted phrase of the instance's class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let classes = spec.planted_phrases.len();
    if classes < 2 {
        return Err(Error::InvalidParameter(
            "need planted phrases for at least two classes".into(),
        ));
    }
    if spec.vocab_size == 0 {
        return Err(Error::InvalidParameter("vocab_size must be positive".into()));
    }
    let mut seen = BTreeSet::new();
    for (class, phrases) in spec.planted_phrases.iter().enumerate() {
        if phrases.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "class {class} has no planted phrases"
            )));
        }
        let class_tokens: BTreeSet<String> = phrases.iter().flat_map(|p| tokenize(p)).collect();
        if class_tokens.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "class {class} has an empty planted phrase"
            )));
        }
        if let Some(shared) = class_tokens.intersection(&seen).next() {
            return Err(Error::InvalidParameter(format!(
                "planted phrases overlap across classes (token `{shared}`)"
            )));
        }
        seen.extend(class_tokens);
    }
    let vocab = filler_vocabulary(spec.vocab_size, &seen);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut annotations = Vec::new();
    let mut make_split = |split: Split, count: usize, rng: &mut ChaCha8Rng| {
        let mut labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
        labels.shuffle(rng);
        labels
            .into_iter()
            .enumerate()
            .map(|(index, label)| {
                let phrases = &spec.planted_phrases[label];
                let phrase = &phrases[rng.random_range(0..phrases.len())];
                let phrase_tokens = tokenize(phrase);
                let mut tokens: Vec<String> = (0..spec.noise_length)
                    .map(|_| vocab[rng.random_range(0..vocab.len())].clone())
                    .collect();
                let at = rng.random_range(0..=spec.noise_length);
                let end = at + phrase_tokens.len();
                tokens.splice(at..at, phrase_tokens.iter().cloned());
                annotations.push(SpanAnnotation {
                    split,
                    index,
                    label,
                    phrase: phrase_tokens.join(" "),
                    token_start: at,
                    token_end: end,
                });
                Instance::new(tokens.join(" "), label)
            })
            .collect::<Vec<_>>()
    };
    let train = make_split(Split::Train, spec.num_train, &mut rng);
    let test = make_split(Split::Test, spec.num_test, &mut rng);
    Ok(SyntheticCorpus {
        train,
        test,
        annotations,
    })
}
