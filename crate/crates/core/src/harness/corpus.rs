//! Whitespace-tokenized text corpora.

use std::path::Path;

use crate::dist::Vocab;
use crate::error::{Error, Result};
use crate::harness::config::read_vocab_file;
use crate::seq::Token;

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Every sequence has exactly `L` tokens.
    pub sequences: Vec<Vec<Token>>,
    pub vocab: Vocab,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub lines: usize,
    pub dropped_short: usize,
    pub truncated: usize,
    pub unk_replacements: usize,
}

/// Reads one sequence per line. Lines shorter than `seq_len` are dropped,
/// longer ones keep their first `seq_len` tokens, and out-of-vocabulary
/// words become `unk`.
pub fn ingest_corpus(path: &Path, vocab_path: &Path, seq_len: usize, unk: &str) -> Result<(Corpus, IngestStats)> {
    let vocab = read_vocab_file(vocab_path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (sequences, stats) = ingest_text(&text, &vocab, seq_len, unk)?;
    Ok((Corpus { sequences, vocab }, stats))
}

pub fn ingest_text(text: &str, vocab: &Vocab, seq_len: usize, unk: &str) -> Result<(Vec<Vec<Token>>, IngestStats)> {
    let unk_id = vocab.id(unk);
    let mut stats = IngestStats::default();
    let mut sequences = Vec::new();
    for line in text.lines() {
        stats.lines += 1;
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.len() < seq_len {
            stats.dropped_short += 1;
            continue;
        }
        if words.len() > seq_len {
            stats.truncated += 1;
        }
        let mut seq = Vec::with_capacity(seq_len);
        for w in &words[..seq_len] {
            match vocab.id(w) {
                Some(id) => seq.push(id),
                None => {
                    let id = unk_id.ok_or_else(|| {
                        Error::Corpus(format!("word {w:?} is not in the vocabulary and {unk:?} is missing"))
                    })?;
                    stats.unk_replacements += 1;
                    seq.push(id);
                }
            }
        }
        sequences.push(seq);
    }
    if sequences.is_empty() {
        return Err(Error::Corpus(format!("no line has at least {seq_len} tokens")));
    }
    Ok((sequences, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &str) -> Vocab {
        Vocab::new(words.split(' ').map(String::from).collect()).unwrap()
    }

    #[test]
    fn length_rules() {
        let v = vocab("a b c");
        let (seqs, stats) = ingest_text("a b c\na b\nc c c a b a b a\n", &v, 3, "<unk>").unwrap();
        assert_eq!(seqs, vec![vec![0, 1, 2], vec![2, 2, 2]]);
        assert_eq!(stats.dropped_short, 1);
        assert_eq!(stats.truncated, 1);
        assert_eq!(stats.lines, 3);
    }

    #[test]
    fn unknown_words() {
        let v = vocab("a <unk>");
        let (seqs, stats) = ingest_text("a zebra a", &v, 3, "<unk>").unwrap();
        assert_eq!(seqs, vec![vec![0, 1, 0]]);
        assert_eq!(stats.unk_replacements, 1);
        let no_unk = vocab("a b");
        assert!(ingest_text("a zebra a", &no_unk, 3, "<unk>").is_err());
        // Unknown words past the truncation point never matter.
        assert!(ingest_text("a b zebra", &no_unk, 2, "<unk>").is_ok());
    }

    #[test]
    fn empty_result_is_an_error() {
        assert!(ingest_text("a\n\nb a\n", &vocab("a b"), 3, "<unk>").is_err());
    }

    #[test]
    fn reads_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("v.txt"), "x\ny\n\n<unk>\n").unwrap();
        std::fs::write(dir.path().join("c.txt"), "x y q x\n").unwrap();
        let (corpus, _) = ingest_corpus(&dir.path().join("c.txt"), &dir.path().join("v.txt"), 4, "<unk>").unwrap();
        assert_eq!(corpus.sequences, vec![vec![0, 1, 2, 0]]);
        assert_eq!(corpus.vocab.size(), 3);
        assert!(ingest_corpus(&dir.path().join("nope.txt"), &dir.path().join("v.txt"), 4, "<unk>").is_err());
    }
}
