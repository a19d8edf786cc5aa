//! Tokenization, chunking and batch sampling.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerMode {
    ByteLevel,
    Whitespace,
}

/// Byte-level vocabularies reuse control bytes that never occur in text
/// corpora as special ids, so |V| stays 256 and every byte string
/// round-trips.
pub const BYTE_PAD: usize = 0x00;
pub const BYTE_BOS: usize = 0x02;
pub const BYTE_EOS: usize = 0x03;

pub const WORD_PAD: &str = "<pad>";
pub const WORD_BOS: &str = "<bos>";
pub const WORD_EOS: &str = "<eos>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    mode: TokenizerMode,
    vocab: Vec<String>,
    index: BTreeMap<String, usize>,
    pad: usize,
    bos: usize,
    eos: usize,
}

impl Tokenizer {
    pub fn byte_level() -> Self {
        let vocab = (0..256).map(|b| alloc::format!("<0x{b:02X}>")).collect();
        Self {
            mode: TokenizerMode::ByteLevel,
            vocab,
            index: BTreeMap::new(),
            pad: BYTE_PAD,
            bos: BYTE_BOS,
            eos: BYTE_EOS,
        }
    }

    /// Word-level vocabulary from an explicit ordered list; the three
    /// special tokens must be present.
    pub fn whitespace(vocab: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, w) in vocab.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(invalid!("vocabulary entry {i} is not a single token: {w:?}"));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(invalid!("duplicate vocabulary entry {w:?}"));
            }
        }
        let special = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| invalid!("vocabulary lacks special token {s}"))
        };
        let (pad, bos, eos) = (special(WORD_PAD)?, special(WORD_BOS)?, special(WORD_EOS)?);
        Ok(Self {
            mode: TokenizerMode::Whitespace,
            vocab,
            index,
            pad,
            bos,
            eos,
        })
    }

    /// Word-level vocabulary from a corpus: specials first, then every word
    /// that occurs, by descending count then lexicographically.
    pub fn build_whitespace(text: &str) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for w in text.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut vocab: Vec<String> = [WORD_PAD, WORD_BOS, WORD_EOS]
            .iter()
            .map(|s| s.to_string())
            .collect();
        vocab.extend(
            words
                .into_iter()
                .filter(|(w, _)| ![WORD_PAD, WORD_BOS, WORD_EOS].contains(w))
                .map(|(w, _)| w.to_string()),
        );
        Self::whitespace(vocab)
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn bos(&self) -> usize {
        self.bos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        if text.is_empty() {
            return Err(Error::EmptyInput);
        }
        match self.mode {
            TokenizerMode::ByteLevel => Ok(text.bytes().map(usize::from).collect()),
            TokenizerMode::Whitespace => {
                let ids: Vec<usize> = text
                    .split_whitespace()
                    .map(|w| {
                        self.index
                            .get(w)
                            .copied()
                            .ok_or_else(|| Error::OutOfVocabulary(w.to_string()))
                    })
                    .collect::<Result<_>>()?;
                if ids.is_empty() {
                    return Err(Error::EmptyInput);
                }
                Ok(ids)
            }
        }
    }

    /// Inverse of [`Tokenizer::encode`]; exact for byte-level vocabularies.
    /// Whitespace vocabularies rejoin words with single spaces.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab.len()) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: self.vocab.len(),
            });
        }
        match self.mode {
            TokenizerMode::ByteLevel => {
                let bytes: Vec<u8> = ids.iter().map(|&i| i as u8).collect();
                String::from_utf8(bytes).map_err(|e| invalid!("decoded bytes are not UTF-8: {e}"))
            }
            TokenizerMode::Whitespace => {
                let words: Vec<&str> = ids.iter().map(|&i| self.vocab[i].as_str()).collect();
                Ok(words.join(" "))
            }
        }
    }
}

/// A validated sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab: usize, max_context: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        if ids.len() > max_context {
            return Err(invalid!(
                "sequence of length {} exceeds context {}",
                ids.len(),
                max_context
            ));
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A chunk of the corpus: `context` ids starting with bos, plus the id that
/// follows the chunk (for next-token targets) and the number of real
/// (non-padding) positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub id: usize,
    pub seq: TokenSequence,
    pub next: Option<usize>,
    pub real_len: usize,
}

impl Chunk {
    /// Next-token targets per position; `None` on padding.
    pub fn targets(&self) -> Vec<Option<usize>> {
        let ids = self.seq.ids();
        (0..ids.len())
            .map(|t| {
                if t + 1 < self.real_len {
                    Some(ids[t + 1])
                } else if t + 1 == self.real_len {
                    self.next
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn is_full(&self) -> bool {
        self.real_len == self.seq.len()
    }
}

/// Fixed-length chunking with bos prepended: each chunk holds bos followed
/// by `context - 1` corpus tokens; only the final chunk is padded.
pub fn chunk_tokens(ids: &[usize], context: usize, tok: &Tokenizer) -> Result<Vec<Chunk>> {
    if ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    if context < 2 {
        return Err(invalid!("context must be at least 2"));
    }
    let body = context - 1;
    let mut out = Vec::new();
    for (ci, piece) in ids.chunks(body).enumerate() {
        let mut seq = Vec::with_capacity(context);
        seq.push(tok.bos());
        seq.extend_from_slice(piece);
        let real_len = seq.len();
        seq.resize(context, tok.pad());
        let start = ci * body;
        let next = ids.get(start + piece.len()).copied().or(if real_len < context {
            Some(tok.eos())
        } else {
            None
        });
        out.push(Chunk {
            id: ci,
            seq: TokenSequence::new(seq, tok.vocab_size(), context)?,
            next,
            real_len,
        });
    }
    Ok(out)
}

/// Deterministic split of chunks into train and eval by chunk id: every
/// `eval_every`-th chunk goes to eval.
pub fn split_chunks(chunks: &[Chunk], eval_every: usize) -> (Vec<Chunk>, Vec<Chunk>) {
    let eval_every = eval_every.max(2);
    chunks
        .iter()
        .cloned()
        .partition(|c| c.id % eval_every != eval_every - 1)
}

/// Draws batches of sequences from a fixed dataset.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    data: Vec<TokenSequence>,
    batch_size: usize,
    with_replacement: bool,
    stream: RngStream,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(
        data: Vec<TokenSequence>,
        batch_size: usize,
        with_replacement: bool,
        stream: RngStream,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput);
        }
        if batch_size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        if !with_replacement && batch_size > data.len() {
            return Err(invalid!(
                "batch size {batch_size} exceeds dataset size {} without replacement",
                data.len()
            ));
        }
        let order = (0..data.len()).collect();
        Ok(Self {
            data,
            batch_size,
            with_replacement,
            stream,
            order,
            cursor: usize::MAX,
        })
    }

    pub fn dataset_len(&self) -> usize {
        self.data.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn stream_id(&self) -> u64 {
        self.stream.stream_id()
    }

    pub fn next_batch(&mut self) -> Vec<TokenSequence> {
        if self.with_replacement {
            return (0..self.batch_size)
                .map(|_| self.data[self.stream.below(self.data.len())].clone())
                .collect();
        }
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor >= self.order.len() {
                self.stream.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.data[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        out
    }

    pub fn sample_batches(&mut self, count: usize) -> Vec<Vec<TokenSequence>> {
        (0..count).map(|_| self.next_batch()).collect()
    }
}

/// Per-id occurrence counts over a set of sequences.
pub fn token_histogram(seqs: &[TokenSequence], vocab: usize) -> Vec<usize> {
    let mut h = vec![0; vocab];
    for s in seqs {
        for &id in s.ids() {
            h[id] += 1;
        }
    }
    h
}

const NAMES: &[&str] = &[
    "alice", "bob", "carol", "dmitri", "elena", "farid", "grace", "hiro", "ines", "jonas", "kemal", "lucia",
    "mateo", "nadia", "oscar", "priya", "quentin", "rosa", "samir", "tessa",
];
const NOUNS: &[&str] = &[
    "river", "garden", "ledger", "window", "engine", "letter", "market", "harbor", "station", "meadow", "library",
    "kitchen", "bridge", "lantern", "orchard", "tower", "village", "compass", "journal", "violin", "wagon",
    "forest", "island", "museum", "teacher", "doctor", "farmer", "captain", "student", "painter",
];
const ADJS: &[&str] = &[
    "quiet", "bright", "old", "narrow", "heavy", "green", "distant", "careful", "silver", "warm", "broken",
    "gentle", "crowded", "empty", "famous", "hidden",
];
const VERBS: &[&str] = &[
    "visited", "painted", "repaired", "watched", "carried", "opened", "described", "found", "cleaned", "measured",
    "followed", "built", "sold", "borrowed", "studied", "remembered",
];
const PLACES: &[&str] = &[
    "the north road", "the old square", "the east gate", "the small port", "the hill", "the south bank",
    "the market hall", "the train yard",
];
const TIMES: &[&str] = &["in the morning", "at noon", "after dark", "on monday", "in winter", "before the storm", "last year"];

/// Index in `0..n` with probability proportional to `1 / (i + 1)`.
fn zipf_below(rng: &mut RngStream, n: usize) -> usize {
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let mut u = rng.uniform() * h;
    for i in 0..n {
        u -= 1.0 / (i + 1) as f64;
        if u < 0.0 {
            return i;
        }
    }
    n - 1
}

fn pick<'a>(rng: &mut RngStream, xs: &[&'a str]) -> &'a str {
    xs[zipf_below(rng, xs.len())]
}

/// Deterministic template-generated English-like text of at least `bytes`
/// bytes, one sentence per line. Word choices are Zipf-weighted.
pub fn generate_toy_corpus(bytes: usize, rng: &mut RngStream) -> String {
    let mut out = String::with_capacity(bytes + 128);
    while out.len() < bytes {
        let line = match rng.below(6) {
            0 => alloc::format!(
                "{} {} the {} {} near {}.",
                pick(rng, NAMES),
                pick(rng, VERBS),
                pick(rng, ADJS),
                pick(rng, NOUNS),
                pick(rng, PLACES)
            ),
            1 => alloc::format!(
                "the {} {} {} the {} {}.",
                pick(rng, ADJS),
                pick(rng, NOUNS),
                pick(rng, VERBS),
                pick(rng, NOUNS),
                pick(rng, TIMES)
            ),
            2 => alloc::format!(
                "{} and {} {} {} {} {}s.",
                pick(rng, NAMES),
                pick(rng, NAMES),
                pick(rng, VERBS),
                1 + zipf_below(rng, 12),
                pick(rng, ADJS),
                pick(rng, NOUNS)
            ),
            3 => alloc::format!(
                "{} the {} was {} and the {} was {}.",
                pick(rng, TIMES),
                pick(rng, NOUNS),
                pick(rng, ADJS),
                pick(rng, NOUNS),
                pick(rng, ADJS)
            ),
            4 => alloc::format!(
                "did {} see the {} at {}? yes, {} did.",
                pick(rng, NAMES),
                pick(rng, NOUNS),
                pick(rng, PLACES),
                pick(rng, NAMES)
            ),
            _ => alloc::format!(
                "room {} of the {} holds {} {}s.",
                100 + zipf_below(rng, 900),
                pick(rng, NOUNS),
                2 + zipf_below(rng, 30),
                pick(rng, NOUNS)
            ),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}
