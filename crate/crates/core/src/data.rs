//! Corpus ingestion, byte tokenization, teacher-forcing windows and splits.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::tensorcore::Tensor;

pub const BYTE_SYMBOLS: usize = 256;
pub const BOS: usize = 256;
pub const SEP: usize = 257;
/// 256 byte values plus `BOS` and `SEP`.
pub const VOCAB_SIZE: usize = 258;

/// Records may be malformed up to this fraction before ingestion fails.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

/// Byte-level tokenizer. Ids `0..256` are raw bytes.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(usize::from).collect()
    }

    /// Inverse of [`encode`](Self::encode). Special ids are dropped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&i| i < BYTE_SYMBOLS)
            .map(|&i| i as u8)
            .collect();
        String::from_utf8(bytes).map_err(|e| Error::Input(format!("invalid utf-8: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    #[serde(default)]
    pub prompt: String,
    pub story: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// One JSON object per line with string fields `prompt` and `story`.
    #[default]
    Jsonl,
    /// One document per line, used as the story with an empty prompt.
    PlainText,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub source: PathBuf,
    /// Records seen before filtering, malformed ones included.
    pub raw_count: usize,
    /// `(line number, reason)` for every rejected record.
    pub malformed: Vec<(usize, String)>,
}

impl Corpus {
    pub fn from_examples(examples: Vec<Example>) -> Self {
        Corpus {
            raw_count: examples.len(),
            examples,
            source: PathBuf::new(),
            malformed: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

pub fn ingest(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    let mut corpus = parse_corpus(&text, format)?;
    corpus.source = path.to_path_buf();
    Ok(corpus)
}

/// Parses corpus text. Blank lines are ignored; whitespace-only examples are
/// dropped; malformed records are collected and tolerated up to
/// [`MAX_MALFORMED_FRACTION`].
pub fn parse_corpus(text: &str, format: CorpusFormat) -> Result<Corpus> {
    let mut examples = Vec::new();
    let mut malformed = Vec::new();
    let mut raw_count = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        raw_count += 1;
        let ex = match format {
            CorpusFormat::PlainText => Example {
                prompt: String::new(),
                story: line.to_string(),
            },
            CorpusFormat::Jsonl => match serde_json::from_str::<Example>(line) {
                Ok(ex) => ex,
                Err(e) => {
                    malformed.push((i + 1, e.to_string()));
                    continue;
                }
            },
        };
        if ex.prompt.trim().is_empty() && ex.story.trim().is_empty() {
            continue;
        }
        examples.push(ex);
    }
    if raw_count == 0 {
        return Err(Error::EmptyCorpus);
    }
    if malformed.len() as f64 > MAX_MALFORMED_FRACTION * raw_count as f64 {
        let (line, reason) = &malformed[0];
        return Err(Error::Input(format!(
            "{} of {raw_count} records malformed (first at line {line}: {reason})",
            malformed.len()
        )));
    }
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Corpus {
        examples,
        source: PathBuf::new(),
        raw_count,
        malformed,
    })
}

/// Teacher-forcing pair: `target[t]` is the token after `input[t]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenWindow {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    /// Positions whose target counts toward the LM loss.
    pub loss_mask: Vec<bool>,
    pub origin: usize,
}

impl TokenWindow {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub t: usize,
    pub stride: usize,
    /// Restrict the loss to positions predicting story tokens.
    pub story_only_loss: bool,
}

impl WindowSpec {
    pub fn new(t: usize) -> Self {
        WindowSpec {
            t,
            stride: t,
            story_only_loss: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<TokenWindow>,
    /// Examples whose token stream was shorter than two tokens.
    pub skipped: usize,
}

/// `BOS + prompt + SEP + story` and the index of the first story token.
pub fn example_stream(ex: &Example) -> (Vec<usize>, usize) {
    let tok = ByteTokenizer;
    let mut s = vec![BOS];
    s.extend(tok.encode(&ex.prompt));
    s.push(SEP);
    let story_start = s.len();
    s.extend(tok.encode(&ex.story));
    (s, story_start)
}

/// Start offsets of the `T + 1`-token slices of a stream of length `len`.
///
/// A stream shorter than `T + 1` (but at least 2 tokens) yields a single
/// shortened window covering it.
pub fn window_starts(len: usize, t: usize, stride: usize) -> Vec<(usize, usize)> {
    if len < 2 {
        return Vec::new();
    }
    if len < t + 1 {
        return vec![(0, len)];
    }
    (0..)
        .map(|k| k * stride)
        .take_while(|s| s + t < len)
        .map(|s| (s, t + 1))
        .collect()
}

pub fn make_windows(corpus: &Corpus, spec: &WindowSpec) -> Result<WindowSet> {
    if spec.t < 2 {
        return Err(Error::Config("window length must be at least 2".into()));
    }
    if spec.stride == 0 {
        return Err(Error::Config("window stride must be at least 1".into()));
    }
    let mut windows = Vec::new();
    let mut skipped = 0;
    for (origin, ex) in corpus.examples.iter().enumerate() {
        let (stream, story_start) = example_stream(ex);
        let starts = window_starts(stream.len(), spec.t, spec.stride);
        if starts.is_empty() {
            skipped += 1;
        }
        for (s, n) in starts {
            let slice = &stream[s..s + n];
            let loss_mask = (0..n - 1)
                .map(|t| !spec.story_only_loss || s + t + 1 >= story_start)
                .collect();
            windows.push(TokenWindow {
                input: slice[..n - 1].to_vec(),
                target: slice[1..].to_vec(),
                loss_mask,
                origin,
            });
        }
    }
    Ok(WindowSet { windows, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub val_frac: f64,
    pub seed: u64,
}

/// Seeded shuffle of whole examples; `floor(val_frac * N)` go to validation.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<(Corpus, Corpus)> {
    if !(spec.val_frac > 0.0 && spec.val_frac < 1.0) {
        return Err(Error::Config(format!(
            "val_frac must lie in (0, 1), got {}",
            spec.val_frac
        )));
    }
    let n = corpus.len();
    if n < 2 {
        return Err(Error::Input(format!(
            "cannot split a corpus of {n} examples"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(spec.seed)
        .split(streams::SPLIT)
        .shuffle(&mut order);
    let n_val = (spec.val_frac * n as f64).floor() as usize;
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Corpus {
            examples: idx.iter().map(|&i| corpus.examples[i].clone()).collect(),
            source: corpus.source.clone(),
            raw_count: idx.len(),
            malformed: Vec::new(),
        }
    };
    Ok((pick(&order[n_val..]), pick(&order[..n_val])))
}

/// Deterministic English-like toy corpus of `n_docs` prompt–story pairs.
pub fn toy_corpus(n_docs: usize, seed: u64) -> Corpus {
    const WHO: [&str; 8] = [
        "the fox",
        "a robot",
        "the old sailor",
        "my sister",
        "the king",
        "a small bird",
        "the teacher",
        "our neighbour",
    ];
    const DID: [&str; 8] = [
        "found a key",
        "lost the map",
        "sang a song",
        "built a boat",
        "opened the door",
        "saw the moon",
        "wrote a letter",
        "crossed the river",
    ];
    const WHEN: [&str; 6] = [
        "at dawn",
        "in the rain",
        "after dinner",
        "before the storm",
        "at night",
        "on a quiet day",
    ];
    const THEN: [&str; 6] = [
        "and everyone laughed",
        "and the town was saved",
        "and nobody knew why",
        "and the story ended",
        "and it began again",
        "and all was calm",
    ];
    let mut rng = Rng::new(seed).split(streams::SPLIT);
    let pick = |rng: &mut Rng, xs: &[&'static str]| xs[rng.below(xs.len())];
    let examples = (0..n_docs)
        .map(|_| {
            let who = pick(&mut rng, &WHO);
            let prompt = format!("write about {who}.");
            let sentences = 2 + rng.below(3);
            let story = (0..sentences)
                .map(|_| {
                    format!(
                        "{} {} {} {}.",
                        pick(&mut rng, &WHO),
                        pick(&mut rng, &DID),
                        pick(&mut rng, &WHEN),
                        pick(&mut rng, &THEN)
                    )
                })
                .collect::<Vec<_>>()
                .join(" ");
            Example { prompt, story }
        })
        .collect();
    Corpus::from_examples(examples)
}

/// Writes a corpus as JSONL records.
pub fn write_jsonl(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut out = String::new();
    for ex in &corpus.examples {
        out.push_str(&serde_json::to_string(ex)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

const EMBEDDING_MAGIC: &[u8; 8] = b"EVEEMBED";
pub const EMBEDDING_VERSION: u32 = 1;

/// Frozen-embedding file: magic, `u32` version, `u64` vocab size, `u64`
/// width, then `vocab * width` little-endian `f64` values in row-major order.
pub fn write_embedding_file(path: &Path, table: &Tensor) -> Result<()> {
    if table.rank() != 2 {
        return Err(Error::dim("embedding table must be a matrix"));
    }
    let mut buf = Vec::with_capacity(28 + 8 * table.numel());
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    buf.extend_from_slice(&(table.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(table.cols() as u64).to_le_bytes());
    for v in table.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_embedding_file(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |m: &str| Error::Input(format!("{}: {m}", path.display()));
    if buf.len() < 28 || &buf[..8] != EMBEDDING_MAGIC {
        return Err(bad("not an embedding file"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(bad(&format!(
            "unsupported embedding file version {version}"
        )));
    }
    let rows = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(buf[20..28].try_into().unwrap()) as usize;
    let body = &buf[28..];
    if body.len() != rows * cols * 8 {
        return Err(bad("payload length does not match header"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::matrix(rows, cols, data)
}
