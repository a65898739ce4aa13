use rand_distr::{Distribution, Gamma};

use super::{check_history, SequenceModel, Token};
use crate::dist::{Categorical, Vocab};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// One independent distribution per position; the history content is never
/// looked at, only its length.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalUnigramModel {
    vocab: Vocab,
    rows: Vec<Categorical>,
}

impl PositionalUnigramModel {
    pub fn new(vocab: Vocab, rows: Vec<Categorical>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("unigram model needs at least one position".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != vocab.size()) {
            return Err(Error::DimensionMismatch {
                left: bad.len(),
                right: vocab.size(),
            });
        }
        Ok(PositionalUnigramModel { vocab, rows })
    }

    pub fn random(vocab: Vocab, seq_len: usize, alpha: f64, rng: &mut StreamRng) -> Result<Self> {
        let gamma =
            Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("dirichlet concentration {alpha}: {e}")))?;
        let v = vocab.size();
        let rows = (0..seq_len)
            .map(|_| loop {
                let w: Vec<f64> = (0..v).map(|_| gamma.sample(rng)).collect();
                if let Ok(c) = Categorical::from_weights(&w) {
                    break c;
                }
            })
            .collect();
        PositionalUnigramModel::new(vocab, rows)
    }

    pub fn rows(&self) -> &[Categorical] {
        &self.rows
    }
}

impl SequenceModel for PositionalUnigramModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn seq_len(&self) -> usize {
        self.rows.len()
    }

    fn conditional(&self, history: &[Token]) -> Result<Categorical> {
        check_history(self, history)?;
        Ok(self.rows[history.len()].clone())
    }
}
