//! Prefix completion for side-by-side inspection of model samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::Vocab;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::seq::{SequenceModel, Token};

pub const DEFAULT_PREFIX_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixSource {
    Model,
    Corpus,
    Random,
}

impl std::str::FromStr for PrefixSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(PrefixSource::Model),
            "corpus" => Ok(PrefixSource::Corpus),
            "random" => Ok(PrefixSource::Random),
            other => Err(Error::Config(format!("unknown prefix source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub prefix: Vec<Token>,
    /// Tokens after the prefix, up to length `L`.
    pub continuation: Vec<Token>,
}

/// `n` prefixes of length `prefix_len` from `source`, each completed by
/// sampling from `model`. Corpus sources yield at most one row per line.
pub fn complete(
    model: &dyn SequenceModel,
    source: PrefixSource,
    corpus: Option<&[Vec<Token>]>,
    n: usize,
    seed: u64,
    prefix_len: usize,
) -> Result<Vec<Completion>> {
    if prefix_len >= model.seq_len() {
        return Err(Error::HistoryTooLong {
            len: prefix_len,
            max_len: model.seq_len(),
        });
    }
    let v = model.vocab().size();
    let prefixes: Vec<Vec<Token>> = match source {
        PrefixSource::Model => (0..n)
            .map(|i| {
                let mut s = model.sample_continuation(&[], &mut stream(seed, "complete-prefix", i as u64))?;
                s.truncate(prefix_len);
                Ok(s)
            })
            .collect::<Result<_>>()?,
        PrefixSource::Corpus => {
            let corpus = corpus.ok_or_else(|| Error::Config("prefix source \"corpus\" needs a corpus".into()))?;
            corpus
                .iter()
                .take(n)
                .map(|s| {
                    s.get(..prefix_len)
                        .map(<[Token]>::to_vec)
                        .ok_or_else(|| Error::Corpus(format!("corpus line shorter than {prefix_len}")))
                })
                .collect::<Result<_>>()?
        }
        PrefixSource::Random => (0..n)
            .map(|i| {
                let mut rng = stream(seed, "complete-random", i as u64);
                (0..prefix_len).map(|_| rng.random_range(0..v)).collect()
            })
            .collect(),
    };
    prefixes
        .into_iter()
        .enumerate()
        .map(|(i, prefix)| {
            let full = model.sample_continuation(&prefix, &mut stream(seed, "complete-continue", i as u64))?;
            Ok(Completion {
                continuation: full[prefix.len()..].to_vec(),
                prefix,
            })
        })
        .collect()
}

/// `prefix words -> continuation words`.
pub fn format_completion(vocab: &Vocab, c: &Completion) -> String {
    let words = |ts: &[Token]| {
        ts.iter()
            .map(|&t| vocab.token(t).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    format!("{} -> {}", words(&c.prefix), words(&c.continuation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{Categorical, Vocab};
    use crate::seq::{PositionalUnigramModel, TabularMarkovModel};

    fn model() -> TabularMarkovModel {
        TabularMarkovModel::random(Vocab::synthetic(5).unwrap(), 14, Some(1), 0.5, &mut stream(1, "m", 0)).unwrap()
    }

    #[test]
    fn lengths_and_determinism() {
        let m = model();
        for src in [PrefixSource::Model, PrefixSource::Random] {
            let a = complete(&m, src, None, 6, 3, DEFAULT_PREFIX_LEN).unwrap();
            assert_eq!(a.len(), 6);
            assert!(a.iter().all(|c| c.prefix.len() == 10 && c.continuation.len() == 4));
            assert_eq!(a, complete(&m, src, None, 6, 3, DEFAULT_PREFIX_LEN).unwrap());
        }
    }

    #[test]
    fn random_prefixes_are_uniform() {
        let m = model();
        let rows = complete(&m, PrefixSource::Random, None, 2_000, 0, 10).unwrap();
        let mut counts = [0usize; 5];
        rows.iter().flat_map(|c| &c.prefix).for_each(|&t| counts[t] += 1);
        let n = 20_000.0;
        let sigma = (n * 0.2 * 0.8f64).sqrt();
        for c in counts {
            assert!((c as f64 - n * 0.2).abs() < 4.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn deterministic_model_gives_identical_rows() {
        let vocab = Vocab::synthetic(3).unwrap();
        let m = PositionalUnigramModel::new(vocab, vec![Categorical::one_hot(3, 2); 12]).unwrap();
        let rows = complete(&m, PrefixSource::Model, None, 4, 0, 10).unwrap();
        assert!(rows.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(
            format_completion(m.vocab(), &rows[0]),
            "w2 w2 w2 w2 w2 w2 w2 w2 w2 w2 -> w2 w2"
        );
    }

    #[test]
    fn corpus_source() {
        let m = model();
        assert!(complete(&m, PrefixSource::Corpus, None, 2, 0, 10).is_err());
        let corpus = vec![(0..14).map(|i| i % 5).collect::<Vec<_>>(); 3];
        let rows = complete(&m, PrefixSource::Corpus, Some(&corpus), 5, 0, 10).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].prefix, corpus[0][..10].to_vec());
        assert!(complete(&m, PrefixSource::Random, None, 1, 0, 14).is_err());
    }
}
