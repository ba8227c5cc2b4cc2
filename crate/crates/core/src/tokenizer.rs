//! Byte-level and character-vocabulary tokenizers, and corpus ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Maps raw bytes to token ids and back.
pub trait Tokenizer: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn encode(&self, bytes: &[u8]) -> Vec<usize>;

    fn decode(&self, ids: &[usize]) -> Vec<u8>;

    /// One-line description stored in checkpoint headers.
    fn descriptor(&self) -> String;

    fn encode_str(&self, text: &str) -> Vec<usize> {
        self.encode(text.as_bytes())
    }
}

/// Every byte is its own token. Lossless on arbitrary input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn vocab_size(&self) -> usize {
        256
    }

    fn encode(&self, bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| b as usize).collect()
    }

    fn decode(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter().map(|&i| i.min(255) as u8).collect()
    }

    fn descriptor(&self) -> String {
        "byte".into()
    }
}

/// One token per character seen at construction; id 0 is `unk`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    symbols: Vec<char>,
    index: BTreeMap<char, usize>,
}

pub const UNK: usize = 0;
const UNK_CHAR: char = '\u{FFFD}';

impl CharVocab {
    pub fn from_text(text: &str) -> Self {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Self::from_symbols(chars)
    }

    fn from_symbols(chars: Vec<char>) -> Self {
        let mut symbols = vec![UNK_CHAR];
        symbols.extend(chars.into_iter().filter(|&c| c != UNK_CHAR));
        let index = symbols
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &c)| (c, i))
            .collect();
        Self { symbols, index }
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols[1..]
    }
}

impl Tokenizer for CharVocab {
    fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    fn encode(&self, bytes: &[u8]) -> Vec<usize> {
        String::from_utf8_lossy(bytes)
            .chars()
            .map(|c| self.index.get(&c).copied().unwrap_or(UNK))
            .collect()
    }

    fn decode(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter()
            .map(|&i| self.symbols.get(i).copied().unwrap_or(UNK_CHAR))
            .collect::<String>()
            .into_bytes()
    }

    fn descriptor(&self) -> String {
        let symbols: String = self.symbols().iter().collect();
        format!("char:{}", serde_json::to_string(&symbols).expect("strings serialize"))
    }
}

/// Rebuilds a tokenizer from [`Tokenizer::descriptor`] output.
pub fn from_descriptor(desc: &str) -> Result<Box<dyn Tokenizer>> {
    if desc == "byte" {
        return Ok(Box::new(ByteTokenizer));
    }
    if let Some(json) = desc.strip_prefix("char:") {
        let symbols: String = serde_json::from_str(json)
            .map_err(|e| Error::Parse(format!("tokenizer descriptor: {e}")))?;
        let chars: Vec<char> = symbols.chars().collect();
        let mut sorted = chars.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != chars.len() {
            return Err(Error::Parse("tokenizer descriptor repeats a symbol".into()));
        }
        return Ok(Box::new(CharVocab::from_symbols(chars)));
    }
    Err(Error::Parse(format!("unknown tokenizer {desc:?}")))
}

/// Reads a file and tokenizes its raw bytes.
pub fn ingest(path: impl AsRef<Path>, tokenizer: &dyn Tokenizer) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    Ok(tokenizer.encode(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mode() {
        let t = ByteTokenizer;
        assert_eq!(t.encode_str("abc"), vec![97, 98, 99]);
        let raw = [0u8, 255, 10, 0xC3, 0x28];
        assert_eq!(t.decode(&t.encode(&raw)), raw);
        assert!(t.encode(b"").is_empty());
    }

    #[test]
    fn char_vocab_round_trip_and_unk() {
        let v = CharVocab::from_text("hello\nworld é");
        let text = "low\nhold é";
        assert_eq!(v.decode(&v.encode_str(text)), text.as_bytes());
        assert_eq!(v.encode_str("z"), vec![UNK]);
        let back = from_descriptor(&v.descriptor()).unwrap();
        assert_eq!(back.encode_str(text), v.encode_str(text));
        assert_eq!(back.vocab_size(), v.vocab_size());
    }

    #[test]
    fn descriptors() {
        assert_eq!(from_descriptor("byte").unwrap().vocab_size(), 256);
        assert!(from_descriptor("bpe").is_err());
        assert!(from_descriptor("char:\"aa\"").is_err());
        assert!(from_descriptor("char:[").is_err());
    }

    #[test]
    fn ingest_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "ab\nc").unwrap();
        assert_eq!(ingest(&path, &ByteTokenizer).unwrap(), vec![97, 98, 10, 99]);
        std::fs::write(&path, "").unwrap();
        assert!(ingest(&path, &ByteTokenizer).unwrap().is_empty());
        assert!(matches!(
            ingest(dir.path().join("missing"), &ByteTokenizer),
            Err(Error::Io(_))
        ));
    }
}
