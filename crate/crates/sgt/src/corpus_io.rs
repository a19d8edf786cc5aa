//! Corpus and tokenizer files.

use std::path::Path;

use sgt_core::corpus::{chunk_tokens, split_chunks, Chunk, Tokenizer, TokenizerMode};

use crate::config::{RunConfig, TokenizerKind};
use crate::error::CliError;

const TOKENIZER_HEADER: &str = "sgt-tokenizer";
const TOKENIZER_VERSION: u32 = 1;

pub fn read_corpus(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| CliError::format(path, format!("corpus is not UTF-8: {e}")))
}

/// Serializes a tokenizer: a header line `sgt-tokenizer <version> <mode>`
/// followed, in word-level mode, by one token per line in id order.
pub fn tokenizer_to_text(tok: &Tokenizer) -> String {
    match tok.mode() {
        TokenizerMode::ByteLevel => format!("{TOKENIZER_HEADER} {TOKENIZER_VERSION} byte\n"),
        TokenizerMode::Whitespace => {
            let mut s = format!("{TOKENIZER_HEADER} {TOKENIZER_VERSION} whitespace\n");
            for w in tok.vocab() {
                s.push_str(w);
                s.push('\n');
            }
            s
        }
    }
}

pub fn tokenizer_from_text(text: &str, path: &Path) -> Result<Tokenizer, CliError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| CliError::format(path, "empty tokenizer file"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 3 || fields[0] != TOKENIZER_HEADER {
        return Err(CliError::format(path, format!("bad tokenizer header {header:?}")));
    }
    if fields[1] != TOKENIZER_VERSION.to_string() {
        return Err(CliError::format(path, format!("unsupported tokenizer version {}", fields[1])));
    }
    match fields[2] {
        "byte" => Ok(Tokenizer::byte_level()),
        "whitespace" => Ok(Tokenizer::whitespace(lines.map(str::to_string).collect())?),
        m => Err(CliError::format(path, format!("unknown tokenizer mode {m:?}"))),
    }
}

pub fn write_tokenizer(tok: &Tokenizer, path: &Path) -> Result<(), CliError> {
    std::fs::write(path, tokenizer_to_text(tok)).map_err(|e| CliError::io(path, e))
}

pub fn read_tokenizer(path: &Path) -> Result<Tokenizer, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    tokenizer_from_text(&text, path)
}

pub fn build_tokenizer(kind: TokenizerKind, text: &str) -> Result<Tokenizer, CliError> {
    Ok(match kind {
        TokenizerKind::Byte => Tokenizer::byte_level(),
        TokenizerKind::Whitespace => Tokenizer::build_whitespace(text)?,
    })
}

/// Train and held-out chunks of a corpus under a fixed tokenizer.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Chunk>,
    pub eval: Vec<Chunk>,
}

pub fn chunk_corpus(text: &str, tok: &Tokenizer, cfg: &RunConfig) -> Result<Splits, CliError> {
    let ids = tok.encode(text)?;
    let chunks = chunk_tokens(&ids, cfg.data.context, tok)?;
    let (train, eval) = split_chunks(&chunks, cfg.data.eval_every);
    if train.is_empty() || eval.is_empty() {
        return Err(CliError::Config(format!(
            "corpus yields {} chunks, too few for a train/eval split every {}",
            chunks.len(),
            cfg.data.eval_every
        )));
    }
    Ok(Splits { train, eval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn tokenizer_text_round_trips() {
        let p = Path::new("mem");
        let b = Tokenizer::byte_level();
        assert_eq!(tokenizer_from_text(&tokenizer_to_text(&b), p).unwrap(), b);
        let w = Tokenizer::build_whitespace("the cat saw the dog").unwrap();
        let back = tokenizer_from_text(&tokenizer_to_text(&w), p).unwrap();
        assert_eq!(back, w);
        assert!(tokenizer_from_text("sgt-tokenizer 2 byte\n", p).is_err());
        assert!(tokenizer_from_text("tok 1 byte\n", p).is_err());
    }

    #[test]
    fn splits_are_disjoint_by_chunk_id() {
        let text = "abcdefghij".repeat(200);
        let cfg = RunConfig::default();
        let s = chunk_corpus(&text, &Tokenizer::byte_level(), &cfg).unwrap();
        let a: BTreeSet<usize> = s.train.iter().map(|c| c.id).collect();
        let b: BTreeSet<usize> = s.eval.iter().map(|c| c.id).collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), s.train.len() + s.eval.len());
    }
}
