use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{check_history, check_tokens, SequenceModel, Token};
use crate::dist::{Categorical, Vocab};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// A lookup-table model keyed by `(position, context)`.
///
/// With `order = None` the context is the full history, which makes the
/// model an exact oracle for any distribution over length-`L` sequences.
/// With `order = Some(k)` the context is the last `min(k, l)` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMarkovModel {
    vocab: Vocab,
    seq_len: usize,
    order: Option<usize>,
    rows: BTreeMap<(usize, Vec<Token>), Categorical>,
}

/// One stored row, as written to model files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct TabularRow {
    pub position: usize,
    pub context: Vec<Token>,
    pub probs: Categorical,
}

impl TabularMarkovModel {
    /// Builds a model and checks that every reachable `(position, context)`
    /// has a row.
    pub fn new(
        vocab: Vocab,
        seq_len: usize,
        order: Option<usize>,
        rows: BTreeMap<(usize, Vec<Token>), Categorical>,
    ) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        for ((position, context), row) in &rows {
            if *position >= seq_len {
                return Err(Error::HistoryTooLong {
                    len: *position,
                    max_len: seq_len,
                });
            }
            let expected = order.map_or(*position, |k| k.min(*position));
            if context.len() != expected {
                return Err(Error::InvalidDistribution(format!(
                    "row at position {position} has context length {}, expected {expected}",
                    context.len()
                )));
            }
            check_tokens(vocab.size(), context)?;
            if row.len() != vocab.size() {
                return Err(Error::DimensionMismatch {
                    left: row.len(),
                    right: vocab.size(),
                });
            }
        }
        let model = TabularMarkovModel {
            vocab,
            seq_len,
            order,
            rows,
        };
        model.check_reachable()?;
        Ok(model)
    }

    fn check_reachable(&self) -> Result<()> {
        let mut frontier: BTreeSet<Vec<Token>> = BTreeSet::from([Vec::new()]);
        for position in 0..self.seq_len {
            let mut next = BTreeSet::new();
            for context in &frontier {
                let row = self.row(position, context).ok_or_else(|| Error::MissingRow {
                    position,
                    context: context.clone(),
                })?;
                if position + 1 == self.seq_len {
                    continue;
                }
                for (tok, &p) in row.probs().iter().enumerate() {
                    if p > 0.0 {
                        let mut extended = context.clone();
                        extended.push(tok);
                        next.insert(self.context_of(&extended).to_vec());
                    }
                }
            }
            frontier = next;
        }
        Ok(())
    }

    /// A random model with every context populated by a Dirichlet(`alpha`)
    /// row. Small `alpha` gives peaked rows.
    pub fn random(vocab: Vocab, seq_len: usize, order: Option<usize>, alpha: f64, rng: &mut StreamRng) -> Result<Self> {
        let v = vocab.size();
        let gamma =
            Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("dirichlet concentration {alpha}: {e}")))?;
        let total: f64 = (0..seq_len)
            .map(|p| (v as f64).powi(order.map_or(p, |k| k.min(p)) as i32))
            .sum();
        if total > super::ENUMERATION_CAP as f64 {
            return Err(Error::EnumerationCap {
                needed: total,
                cap: super::ENUMERATION_CAP,
            });
        }
        let mut rows = BTreeMap::new();
        for position in 0..seq_len {
            let ctx_len = order.map_or(position, |k| k.min(position));
            for context in all_contexts(v, ctx_len) {
                let row = loop {
                    let w: Vec<f64> = (0..v).map(|_| gamma.sample(rng)).collect();
                    if let Ok(c) = Categorical::from_weights(&w) {
                        break c;
                    }
                };
                rows.insert((position, context), row);
            }
        }
        TabularMarkovModel::new(vocab, seq_len, order, rows)
    }

    /// Closed-form MLE: normalized transition counts. Contexts never observed
    /// get no row; they are unreachable under the fitted model.
    pub fn fit_counts(vocab: Vocab, seq_len: usize, order: Option<usize>, samples: &[Vec<Token>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("no samples to fit".into()));
        }
        let v = vocab.size();
        let mut counts: BTreeMap<(usize, Vec<Token>), Vec<f64>> = BTreeMap::new();
        for seq in samples {
            if seq.len() != seq_len {
                return Err(Error::Corpus(format!(
                    "sample of length {} in a length-{seq_len} fit",
                    seq.len()
                )));
            }
            check_tokens(v, seq)?;
            for position in 0..seq_len {
                let ctx_len = order.map_or(position, |k| k.min(position));
                let context = seq[position - ctx_len..position].to_vec();
                counts.entry((position, context)).or_insert_with(|| vec![0.0; v])[seq[position]] += 1.0;
            }
        }
        let rows = counts
            .into_iter()
            .map(|(key, c)| Ok((key, Categorical::from_weights(&c)?)))
            .collect::<Result<_>>()?;
        TabularMarkovModel::new(vocab, seq_len, order, rows)
    }

    pub fn order(&self) -> Option<usize> {
        self.order
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[Token], &Categorical)> {
        self.rows.iter().map(|((p, c), r)| (*p, c.as_slice(), r))
    }

    pub fn row(&self, position: usize, context: &[Token]) -> Option<&Categorical> {
        // BTreeMap lookups need an owned key; contexts are short.
        self.rows.get(&(position, context.to_vec()))
    }

    fn context_of<'a>(&self, history: &'a [Token]) -> &'a [Token] {
        match self.order {
            None => history,
            Some(k) => &history[history.len().saturating_sub(k)..],
        }
    }

    pub(crate) fn to_rows(&self) -> Vec<TabularRow> {
        self.rows
            .iter()
            .map(|((position, context), probs)| TabularRow {
                position: *position,
                context: context.clone(),
                probs: probs.clone(),
            })
            .collect()
    }

    pub(crate) fn from_rows(vocab: Vocab, seq_len: usize, order: Option<usize>, rows: Vec<TabularRow>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for row in rows {
            if map.insert((row.position, row.context.clone()), row.probs).is_some() {
                return Err(Error::CorruptPayload(format!(
                    "duplicate row for position {} context {:?}",
                    row.position, row.context
                )));
            }
        }
        TabularMarkovModel::new(vocab, seq_len, order, map)
    }
}

fn all_contexts(v: usize, len: usize) -> Vec<Vec<Token>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|c| {
                (0..v).map(move |t| {
                    let mut e = c.clone();
                    e.push(t);
                    e
                })
            })
            .collect();
    }
    out
}

impl SequenceModel for TabularMarkovModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn conditional(&self, history: &[Token]) -> Result<Categorical> {
        check_history(self, history)?;
        let context = self.context_of(history);
        self.row(history.len(), context)
            .cloned()
            .ok_or_else(|| Error::MissingRow {
                position: history.len(),
                context: context.to_vec(),
            })
    }
}
