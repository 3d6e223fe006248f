//! Byte corpora, train/held-out splits and seeded calibration windows.

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// A byte stream split contiguously into a training prefix and a held-out suffix.
#[derive(Debug, Clone)]
pub struct Corpus {
    bytes: Vec<u8>,
    train: Range<usize>,
    heldout: Range<usize>,
    source: Option<PathBuf>,
    hash: String,
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>, heldout_fraction: f64, source: Option<PathBuf>) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Input(match &source {
                Some(p) => format!("{}: corpus is empty", p.display()),
                None => "corpus is empty".into(),
            }));
        }
        if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "held-out fraction must lie in (0, 1), got {heldout_fraction}"
            )));
        }
        let n = bytes.len();
        let held = ((n as f64 * heldout_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        if held >= n {
            return Err(Error::Input(format!("corpus of {n} bytes is too small to split")));
        }
        let hash = content_hash(&bytes);
        Ok(Self {
            train: 0..n - held,
            heldout: n - held..n,
            bytes,
            source,
            hash,
        })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[self.train.clone()]
    }

    pub fn heldout(&self) -> &[u8] {
        &self.bytes[self.heldout.clone()]
    }

    pub fn train_range(&self) -> Range<usize> {
        self.train.clone()
    }

    pub fn heldout_range(&self) -> Range<usize> {
        self.heldout.clone()
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    /// Hex SHA-256 of the full byte stream.
    pub fn hash(&self) -> &str {
        &self.hash
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads `path` as raw bytes; the final `heldout_fraction` becomes the held-out split.
pub fn load_corpus(path: &Path, heldout_fraction: f64) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_bytes(bytes, heldout_fraction, Some(path.to_path_buf()))
}

/// Fixed-length windows of the training split at seeded uniform offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub hash: String,
    pub n: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub offsets: Vec<usize>,
    #[serde(skip)]
    pub sequences: Vec<Vec<u8>>,
}

impl CalibrationSet {
    /// JSON export `{hash, n, seq_len, seed, offsets}`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Draws `n` windows of `seq_len` bytes from the training split. Offsets come
/// from `SplitMix64::new(seed)` via multiply-shift reduction onto
/// `0..=train_len − seq_len`; duplicates are allowed.
pub fn sample_calibration(corpus: &Corpus, n: usize, seq_len: usize, seed: u64) -> Result<CalibrationSet> {
    let train = corpus.train();
    if seq_len == 0 || n == 0 {
        return Err(Error::Config("calibration needs n ≥ 1 and seq_len ≥ 1".into()));
    }
    if seq_len > train.len() {
        return Err(Error::Input(format!(
            "sequence length {seq_len} exceeds the {}-byte training split",
            train.len()
        )));
    }
    let span = (train.len() - seq_len + 1) as u64;
    let mut rng = SplitMix64::new(seed);
    let offsets: Vec<usize> = (0..n).map(|_| rng.below(span) as usize).collect();
    let sequences = offsets.iter().map(|&o| train[o..o + seq_len].to_vec()).collect();
    Ok(CalibrationSet {
        hash: corpus.hash().to_string(),
        n,
        seq_len,
        seed,
        offsets,
        sequences,
    })
}

/// Non-overlapping `seq_len` windows covering `bytes` (a trailing partial window is dropped).
pub fn contiguous_windows(bytes: &[u8], seq_len: usize) -> Vec<&[u8]> {
    bytes.chunks_exact(seq_len).collect()
}

/// Register of generated text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextStyle {
    /// Declarative sentences grouped in paragraphs.
    Prose,
    /// Question/answer pairs over the same vocabulary, used as a fine-tuning task.
    Dialogue,
}

const SUBJECTS: &[&str] = &[
    "the cat", "the old man", "a small bird", "the river", "my sister", "the farmer", "a tired dog",
    "the teacher", "the children", "a stranger", "the queen", "our neighbor", "the baker", "the wind",
];
/// (third person, base form)
const VERBS: &[(&str, &str)] = &[
    ("sees", "see"),
    ("follows", "follow"),
    ("carries", "carry"),
    ("finds", "find"),
    ("watches", "watch"),
    ("remembers", "remember"),
    ("builds", "build"),
    ("paints", "paint"),
    ("calls", "call"),
    ("opens", "open"),
    ("helps", "help"),
    ("visits", "visit"),
];
const OBJECTS: &[&str] = &[
    "the garden", "a red boat", "the long road", "an empty house", "the bright lamp", "a heavy box",
    "the quiet town", "a letter", "the green hill", "the market", "a wooden door", "the morning train",
];
const ADVERBS: &[&str] = &["slowly", "again", "at night", "every day", "with care", "in silence", "before noon"];
const PLACES: &[&str] = &["near the sea", "in the valley", "by the old bridge", "under the trees", "across the field"];

fn pick<T: Copy>(rng: &mut SplitMix64, words: &[T]) -> T {
    // Squared-uniform index skews toward the head of each list.
    let u = rng.next_f64();
    words[((u * u) * words.len() as f64) as usize]
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// Deterministic pseudo-English text of exactly `n_bytes` bytes.
pub fn synthetic_text(seed: u64, n_bytes: usize, style: TextStyle) -> Vec<u8> {
    let mut rng = SplitMix64::derive(seed, "synthetic-text");
    let mut out = String::with_capacity(n_bytes + 128);
    while out.len() < n_bytes {
        let subj = pick(&mut rng, SUBJECTS);
        let (verb, verb_base) = pick(&mut rng, VERBS);
        let obj = pick(&mut rng, OBJECTS);
        match style {
            TextStyle::Prose => {
                let mut s = format!("{} {} {}", capitalize(subj), verb, obj);
                if rng.next_f64() < 0.4 {
                    s.push(' ');
                    s.push_str(pick(&mut rng, PLACES));
                }
                if rng.next_f64() < 0.3 {
                    s.push(' ');
                    s.push_str(pick(&mut rng, ADVERBS));
                }
                s.push_str(if rng.next_f64() < 0.1 { "!" } else { "." });
                out.push_str(&s);
                out.push(if rng.next_f64() < 0.15 { '\n' } else { ' ' });
            }
            TextStyle::Dialogue => {
                out.push_str(&format!(
                    "Q: what does {subj} {verb_base}?\nA: {} {verb} {obj}.\n",
                    capitalize(subj)
                ));
            }
        }
    }
    out.truncate(n_bytes);
    out.into_bytes()
}
