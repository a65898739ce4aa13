//! Autoregressive models over fixed-length token sequences.
//!
//! There are no BOS/EOS tokens. The first position is conditioned on the
//! empty history, and every sequence has exactly `seq_len` tokens.

mod fixtures;
mod io;
pub mod recurrent;
mod tabular;
mod unigram;

pub use fixtures::Fixture;
pub use io::{load_model, load_model_file, save_model_file, serialize_model, AnyModel, FORMAT_VERSION};
pub use recurrent::{CellKind, Init, RecurrentConfig, RecurrentLM};
pub use tabular::TabularMarkovModel;
pub use unigram::PositionalUnigramModel;

use crate::dist::{Categorical, Vocab};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// A token id, an index into the [`Vocab`].
pub type Token = usize;

/// Default cap on the number of states [`enumerate_distribution`] will visit.
pub const ENUMERATION_CAP: usize = 1_000_000;

/// Exact next-token conditionals plus ancestral sampling.
///
/// Implementations must be deterministic: the same history always yields the
/// same vector. Sampling consumes exactly the distributions returned by
/// [`SequenceModel::conditional`].
pub trait SequenceModel: Send + Sync {
    fn vocab(&self) -> &Vocab;

    /// The fixed sequence length `L`.
    fn seq_len(&self) -> usize;

    /// `P(W_{l+1} | history)` for a history of length `l < L`.
    fn conditional(&self, history: &[Token]) -> Result<Categorical>;

    /// Conditionals for every prefix `tokens[..l]` with
    /// `l = 0 ..= min(tokens.len(), L - 1)`.
    fn prefix_conditionals(&self, tokens: &[Token]) -> Result<Vec<Categorical>> {
        let n = tokens.len().min(self.seq_len() - 1);
        (0..=n).map(|l| self.conditional(&tokens[..l])).collect()
    }

    /// Extends `prefix` to a full length-`L` sequence by ancestral sampling.
    fn sample_continuation(&self, prefix: &[Token], rng: &mut StreamRng) -> Result<Vec<Token>> {
        check_tokens(self.vocab().size(), prefix)?;
        let mut tokens = prefix.to_vec();
        while tokens.len() < self.seq_len() {
            let next = self.conditional(&tokens)?.sample(rng);
            tokens.push(next);
        }
        tokens.truncate(self.seq_len());
        Ok(tokens)
    }
}

impl<M: SequenceModel + ?Sized> SequenceModel for &M {
    fn vocab(&self) -> &Vocab {
        (**self).vocab()
    }
    fn seq_len(&self) -> usize {
        (**self).seq_len()
    }
    fn conditional(&self, history: &[Token]) -> Result<Categorical> {
        (**self).conditional(history)
    }
    fn prefix_conditionals(&self, tokens: &[Token]) -> Result<Vec<Categorical>> {
        (**self).prefix_conditionals(tokens)
    }
    fn sample_continuation(&self, prefix: &[Token], rng: &mut StreamRng) -> Result<Vec<Token>> {
        (**self).sample_continuation(prefix, rng)
    }
}

pub(crate) fn check_tokens(vocab_size: usize, tokens: &[Token]) -> Result<()> {
    match tokens.iter().find(|&&t| t >= vocab_size) {
        Some(&token) => Err(Error::TokenOutOfRange {
            token,
            size: vocab_size,
        }),
        None => Ok(()),
    }
}

/// Validates a history against a model's vocabulary and length.
pub fn check_history<M: SequenceModel + ?Sized>(model: &M, history: &[Token]) -> Result<()> {
    if history.len() >= model.seq_len() {
        return Err(Error::HistoryTooLong {
            len: history.len(),
            max_len: model.seq_len(),
        });
    }
    check_tokens(model.vocab().size(), history)
}

/// Draws one full sequence.
pub fn sample_sequence<M: SequenceModel + ?Sized>(model: &M, rng: &mut StreamRng) -> Result<Vec<Token>> {
    model.sample_continuation(&[], rng)
}

/// Exact probability of every positive-probability prefix of length `len`,
/// in lexicographic order.
pub fn enumerate_distribution<M: SequenceModel + ?Sized>(
    model: &M,
    len: usize,
    cap: usize,
) -> Result<Vec<(Vec<Token>, f64)>> {
    if len > model.seq_len() {
        return Err(Error::HistoryTooLong {
            len,
            max_len: model.seq_len(),
        });
    }
    let states = (model.vocab().size() as f64).powi(len as i32);
    if states > cap as f64 {
        return Err(Error::EnumerationCap { needed: states, cap });
    }
    let mut level: Vec<(Vec<Token>, f64)> = vec![(Vec::new(), 1.0)];
    for _ in 0..len {
        let mut next = Vec::with_capacity(level.len() * model.vocab().size());
        for (prefix, p) in &level {
            let cond = model.conditional(prefix)?;
            for (tok, &q) in cond.probs().iter().enumerate() {
                if q > 0.0 {
                    let mut extended = prefix.clone();
                    extended.push(tok);
                    next.push((extended, p * q));
                }
            }
        }
        level = next;
    }
    Ok(level)
}

/// Exact marginal of the token at 0-based position `position`.
pub fn exact_position_marginal<M: SequenceModel + ?Sized>(
    model: &M,
    position: usize,
    cap: usize,
) -> Result<Categorical> {
    let v = model.vocab().size();
    let mut acc = vec![0.0; v];
    for (prefix, p) in enumerate_distribution(model, position, cap)? {
        let cond = model.conditional(&prefix)?;
        for (a, q) in acc.iter_mut().zip(cond.probs()) {
            *a += p * q;
        }
    }
    Categorical::from_weights(&acc)
}
