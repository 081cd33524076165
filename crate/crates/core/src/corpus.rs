//! Dataset files, vocabulary, batching and corpus statistics.
//!
//! Two on-disk formats are supported:
//!
//! * CoNLL-style: one `token<TAB>tag` per line, sentences separated by a
//!   blank line, UTF-8.
//! * JSON lines: `{"tokens": [...], "spans": [[start, end, "POS"], ...]}`
//!   with inclusive token offsets.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tagging::{spans_to_tags, tags_to_spans, AspectSpan, Sentiment, Tag};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<String>,
    pub spans: Vec<AspectSpan>,
    pub tags: Vec<Tag>,
}

impl Example {
    pub fn new(tokens: Vec<String>, spans: Vec<AspectSpan>) -> Result<Self> {
        let tags = spans_to_tags(tokens.len(), &spans)?;
        Ok(Example { tokens, spans, tags })
    }

    pub fn from_tags(tokens: Vec<String>, tags: Vec<Tag>) -> Result<Self> {
        let spans = tags_to_spans(&tags)?;
        Ok(Example { tokens, spans, tags })
    }

    /// Unlabeled sentence (all `O`).
    pub fn unlabeled(tokens: Vec<String>) -> Self {
        let tags = vec![Tag::O; tokens.len()];
        Example {
            tokens,
            spans: Vec::new(),
            tags,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tag_ids(&self) -> Vec<usize> {
        self.tags.iter().map(|t| t.index()).collect()
    }
}

fn parse_error(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

/// Parses the tab-separated format. `origin` only labels error messages.
pub fn parse_conll(text: &str, origin: &str) -> Result<Vec<Example>> {
    let mut examples = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut block_start = 1;

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<Tag>, block_start: usize| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let ex = Example::from_tags(std::mem::take(tokens), std::mem::take(tags)).map_err(|e| match e {
            Error::Validity { position, reason } => parse_error(origin, block_start + position, reason),
            other => other,
        })?;
        examples.push(ex);
        Ok(())
    };

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim_end_matches(['\r', ' ']);
        if line.is_empty() {
            flush(&mut tokens, &mut tags, block_start)?;
            block_start = lineno + 1;
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields[0].is_empty() {
            return Err(parse_error(
                origin,
                lineno,
                format!("expected `token<TAB>tag`, found {} field(s)", fields.len()),
            ));
        }
        let tag: Tag = fields[1]
            .parse()
            .map_err(|_| parse_error(origin, lineno, format!("unknown tag `{}`", fields[1])))?;
        tokens.push(fields[0].to_string());
        tags.push(tag);
    }
    flush(&mut tokens, &mut tags, block_start)?;
    Ok(examples)
}

pub fn render_conll(examples: &[Example]) -> String {
    let mut out = String::new();
    for (i, ex) in examples.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (tok, tag) in ex.tokens.iter().zip(&ex.tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&tag.to_string());
            out.push('\n');
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct JsonExample {
    tokens: Vec<String>,
    spans: Vec<(usize, usize, Sentiment)>,
}

pub fn parse_jsonl(text: &str, origin: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: JsonExample = serde_json::from_str(line).map_err(|e| parse_error(origin, i + 1, e.to_string()))?;
        let spans = raw.spans.into_iter().map(|(s, e, x)| AspectSpan::new(s, e, x)).collect();
        let ex = Example::new(raw.tokens, spans).map_err(|e| parse_error(origin, i + 1, e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn render_jsonl(examples: &[Example]) -> String {
    let mut out = String::new();
    for ex in examples {
        let raw = JsonExample {
            tokens: ex.tokens.clone(),
            spans: ex.spans.iter().map(|s| (s.start, s.end, s.sentiment)).collect(),
        };
        out.push_str(&serde_json::to_string(&raw).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

/// Reads a dataset file, choosing the format by extension (`.jsonl` or
/// `.json` for JSON lines, anything else tab-separated).
pub fn read_dataset(path: &Path) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path)?;
    let origin = path.display().to_string();
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "json") => parse_jsonl(&text, &origin),
        _ => parse_conll(&text, &origin),
    }
}

pub fn read_conll(path: &Path) -> Result<Vec<Example>> {
    parse_conll(&fs::read_to_string(path)?, &path.display().to_string())
}

/// Rejects sentences that do not fit the encoder's position table.
pub fn check_lengths(examples: &[Example], max_len: usize, origin: &str) -> Result<()> {
    match examples.iter().position(|e| e.len() > max_len) {
        Some(i) => Err(Error::Config(format!(
            "{origin}: sentence {} has {} tokens, longer than max_len {max_len}",
            i + 1,
            examples[i].len()
        ))),
        None => Ok(()),
    }
}

/// Lowercased token → index map with `<pad>` = 0 and `<unk>` = 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn build(examples: &[Example], min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut order = Vec::new();
        for ex in examples {
            for tok in &ex.tokens {
                let key = tok.to_lowercase();
                let c = counts.entry(key.clone()).or_insert(0);
                if *c == 0 {
                    order.push(key);
                }
                *c += 1;
            }
        }
        let mut tokens = vec![PAD.to_string(), UNK.to_string()];
        tokens.extend(order.into_iter().filter(|t| counts[t] >= min_freq && t != PAD && t != UNK));
        Ok(Vocab::from_tokens(tokens))
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(&token.to_lowercase()).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Right-padded block of sentences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B × T_max]`, padded with `<pad>`.
    pub token_ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    /// Padded positions carry `O`.
    pub tag_ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    /// Positions of the sentences in the source corpus.
    pub source: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.token_ids.first().map_or(0, |r| r.len())
    }
}

pub fn make_batch(examples: &[Example], indices: &[usize], vocab: &Vocab) -> Batch {
    let t_max = indices.iter().map(|&i| examples[i].len()).max().unwrap_or(0);
    let mut b = Batch {
        token_ids: Vec::with_capacity(indices.len()),
        mask: Vec::with_capacity(indices.len()),
        tag_ids: Vec::with_capacity(indices.len()),
        lengths: Vec::with_capacity(indices.len()),
        source: indices.to_vec(),
    };
    for &i in indices {
        let ex = &examples[i];
        let n = ex.len();
        let mut ids = vocab.encode(&ex.tokens);
        ids.resize(t_max, PAD_ID);
        let mut tags = ex.tag_ids();
        tags.resize(t_max, Tag::O.index());
        b.token_ids.push(ids);
        b.tag_ids.push(tags);
        b.mask.push((0..t_max).map(|t| t < n).collect());
        b.lengths.push(n);
    }
    b
}

/// Shuffles under `seed` and splits into batches of `batch_size`; the last
/// partial batch is kept.
pub fn batch(examples: &[Example], vocab: &Vocab, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| make_batch(examples, chunk, vocab))
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub sentences: usize,
    pub aspects: usize,
}

impl std::ops::Add for CorpusStats {
    type Output = CorpusStats;

    fn add(self, o: CorpusStats) -> CorpusStats {
        CorpusStats {
            sentences: self.sentences + o.sentences,
            aspects: self.aspects + o.aspects,
        }
    }
}

pub fn stats(examples: &[Example]) -> CorpusStats {
    CorpusStats {
        sentences: examples.len(),
        aspects: examples.iter().map(|e| e.spans.len()).sum(),
    }
}

/// Whitespace tokenization used for raw text input.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}
