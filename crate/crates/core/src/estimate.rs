//! Estimators for the marginal distribution of `W_{l+1}` under a history
//! regime: sample-and-count, averaged conditionals, or exact enumeration.
//!
//! Monte-Carlo work is split into fixed-size chunks. Chunk results are
//! combined in index order, so sums are bit-identical for any thread count.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::Categorical;
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};
use crate::seq::{check_tokens, enumerate_distribution, SequenceModel, Token};

/// Work items per parallel chunk.
pub const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryKind {
    /// The model's own samples, `P_M`.
    Model,
    /// Samples from a queryable data model (synthetic oracle), `P_D`.
    DataModel,
    /// Lines of a data corpus.
    DataCorpus,
}

#[derive(Clone, Copy)]
pub enum Backing<'a> {
    Model(&'a dyn SequenceModel),
    /// Sequences plus the vocabulary size they are drawn from.
    Corpus(&'a [Vec<Token>], usize),
}

/// Where histories come from, optionally corrupted at rate `c`.
#[derive(Clone, Copy)]
pub struct HistorySource<'a> {
    pub kind: HistoryKind,
    pub backing: Backing<'a>,
    pub corrupt_rate: f64,
}

impl<'a> HistorySource<'a> {
    pub fn model(model: &'a dyn SequenceModel) -> Self {
        HistorySource {
            kind: HistoryKind::Model,
            backing: Backing::Model(model),
            corrupt_rate: 0.0,
        }
    }

    pub fn data_model(oracle: &'a dyn SequenceModel) -> Self {
        HistorySource {
            kind: HistoryKind::DataModel,
            backing: Backing::Model(oracle),
            corrupt_rate: 0.0,
        }
    }

    pub fn corpus(corpus: &'a [Vec<Token>], vocab_size: usize) -> Self {
        HistorySource {
            kind: HistoryKind::DataCorpus,
            backing: Backing::Corpus(corpus, vocab_size),
            corrupt_rate: 0.0,
        }
    }

    pub fn corrupted(self, rate: f64) -> Self {
        HistorySource {
            corrupt_rate: rate,
            ..self
        }
    }

    /// Stream label for the histories themselves; corruption uses its own.
    pub fn label(&self) -> &'static str {
        match self.kind {
            HistoryKind::Model => "hist-model",
            HistoryKind::DataModel => "hist-data",
            HistoryKind::DataCorpus => "hist-corpus",
        }
    }

    fn check(&self, len: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.corrupt_rate) {
            return Err(Error::Config(format!(
                "corrupt rate {} outside [0, 1]",
                self.corrupt_rate
            )));
        }
        if let Backing::Corpus(c, _) = self.backing {
            if c.is_empty() {
                return Err(Error::Empty("history corpus".into()));
            }
            if let Some(s) = c.iter().find(|s| s.len() < len) {
                return Err(Error::Corpus(format!(
                    "corpus sequence of length {} cannot supply histories of length {len}",
                    s.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Counted,
    Averaged,
    Exact,
}

/// Estimated marginal of the token at 1-based position `l + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalEstimate {
    pub l: usize,
    pub dist: Categorical,
    /// `None` for exact estimates.
    pub n_samples: Option<usize>,
    pub estimator: Estimator,
}

/// Replaces each position independently w.p. `rate` by a uniform draw over
/// the whole vocabulary (the original token included).
///
/// Every position consumes one uniform and one token draw whether or not it
/// is replaced, so corruptions at different rates from the same stream are
/// coupled: a higher rate replaces a superset of positions.
pub fn corrupt_history(history: &[Token], rate: f64, vocab_size: usize, rng: &mut StreamRng) -> Vec<Token> {
    history
        .iter()
        .map(|&t| {
            let u: f64 = rng.random();
            let noise = rng.random_range(0..vocab_size);
            if u < rate {
                noise
            } else {
                t
            }
        })
        .collect()
}

/// Exact distribution after per-position corruption at `rate`.
pub fn corrupt_distribution(dist: &[(Vec<Token>, f64)], rate: f64, vocab_size: usize) -> Vec<(Vec<Token>, f64)> {
    if rate == 0.0 || dist.is_empty() {
        return dist.to_vec();
    }
    let len = dist[0].0.len();
    let keep = 1.0 - rate;
    let noise = rate / vocab_size as f64;
    let mut current: BTreeMap<Vec<Token>, f64> = dist.iter().cloned().collect();
    for pos in 0..len {
        let mut next: BTreeMap<Vec<Token>, f64> = BTreeMap::new();
        for (h, p) in &current {
            for a in 0..vocab_size {
                let w = if a == h[pos] { keep + noise } else { noise };
                if w > 0.0 {
                    let mut h2 = h.clone();
                    h2[pos] = a;
                    *next.entry(h2).or_insert(0.0) += p * w;
                }
            }
        }
        current = next;
    }
    current.into_iter().collect()
}

/// `n` sequences from the source, each truncated to `len` tokens.
///
/// Sequence `i` of a model-backed source is sampled from stream
/// `(seed, label, i)` as a full length-`L` sequence and then truncated, so
/// histories of different lengths are prefixes of one another. Corpus
/// sources return their first `n` lines. Corruption of sequence `i` uses
/// stream `(seed, label + "-corrupt", i)`.
pub fn sample_histories(source: &HistorySource<'_>, n: usize, len: usize, seed: u64) -> Result<Vec<Vec<Token>>> {
    source.check(len)?;
    let label = source.label();
    let mut out: Vec<Vec<Token>> = match source.backing {
        Backing::Model(m) => {
            if len > m.seq_len() {
                return Err(Error::HistoryTooLong {
                    len,
                    max_len: m.seq_len(),
                });
            }
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut s = m.sample_continuation(&[], &mut stream(seed, label, i as u64))?;
                    s.truncate(len);
                    Ok(s)
                })
                .collect::<Result<_>>()?
        }
        Backing::Corpus(c, _) => c.iter().take(n).map(|s| s[..len].to_vec()).collect(),
    };
    if source.corrupt_rate > 0.0 {
        let v = match source.backing {
            Backing::Model(m) => m.vocab().size(),
            Backing::Corpus(_, v) => v,
        };
        let corrupt_label = format!("{label}-corrupt");
        out = out
            .into_par_iter()
            .enumerate()
            .map(|(i, h)| corrupt_history(&h, source.corrupt_rate, v, &mut stream(seed, &corrupt_label, i as u64)))
            .collect();
    }
    Ok(out)
}

/// Exact distribution of length-`len` histories under the source, with the
/// corruption channel applied. Corpus sources give their empirical prefix
/// distribution.
pub fn exact_history_distribution(
    source: &HistorySource<'_>,
    len: usize,
    vocab: usize,
    cap: usize,
) -> Result<Vec<(Vec<Token>, f64)>> {
    source.check(len)?;
    let base = match source.backing {
        Backing::Model(m) => enumerate_distribution(m, len, cap)?,
        Backing::Corpus(c, _) => {
            let mut counts: BTreeMap<&[Token], f64> = BTreeMap::new();
            for s in c {
                *counts.entry(&s[..len]).or_insert(0.0) += 1.0;
            }
            let n = c.len() as f64;
            counts.into_iter().map(|(h, k)| (h.to_vec(), k / n)).collect()
        }
    };
    if source.corrupt_rate > 0.0 {
        let states = (vocab as f64).powi(len as i32);
        if states > cap as f64 {
            return Err(Error::EnumerationCap { needed: states, cap });
        }
    }
    Ok(corrupt_distribution(&base, source.corrupt_rate, vocab))
}

/// Sums `f(i)` for `i in 0..n` in fixed chunks, combining chunk results in
/// order.
pub(crate) fn chunked_reduce<T, F, C>(n: usize, f: F, combine: C) -> Result<Option<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Result<T> + Sync + Send,
    C: Fn(&mut T, T),
{
    let chunks: Vec<Range<usize>> = (0..n).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n)).collect();
    let parts: Vec<T> = chunks.into_par_iter().map(f).collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let Some(mut acc) = iter.next() else {
        return Ok(None);
    };
    for part in iter {
        combine(&mut acc, part);
    }
    Ok(Some(acc))
}

pub(crate) fn add_into(acc: &mut [f64], other: &[f64]) {
    acc.iter_mut().zip(other).for_each(|(a, b)| *a += b);
}

/// Normalized histogram of `tokens[l]` over the samples.
pub fn estimate_marginal_counted(samples: &[Vec<Token>], l: usize, vocab_size: usize) -> Result<MarginalEstimate> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to count".into()));
    }
    let mut counts = vec![0.0; vocab_size];
    for s in samples {
        let tok = *s
            .get(l)
            .ok_or_else(|| Error::Corpus(format!("sample of length {} has no position {}", s.len(), l + 1)))?;
        check_tokens(vocab_size, &[tok])?;
        counts[tok] += 1.0;
    }
    Ok(MarginalEstimate {
        l,
        dist: Categorical::from_weights(&counts)?,
        n_samples: Some(samples.len()),
        estimator: Estimator::Counted,
    })
}

/// Mean of `model.conditional(h)` over the histories, all of length `l`.
pub fn estimate_marginal_averaged<M: SequenceModel + ?Sized>(
    model: &M,
    histories: &[Vec<Token>],
) -> Result<MarginalEstimate> {
    let Some(first) = histories.first() else {
        return Err(Error::Empty("no histories to average over".into()));
    };
    let l = first.len();
    if let Some(h) = histories.iter().find(|h| h.len() != l) {
        return Err(Error::DimensionMismatch {
            left: h.len(),
            right: l,
        });
    }
    let v = model.vocab().size();
    let sum = chunked_reduce(
        histories.len(),
        |range| {
            let mut acc = vec![0.0; v];
            for h in &histories[range] {
                add_into(&mut acc, model.conditional(h)?.probs());
            }
            Ok(acc)
        },
        |a, b| add_into(a, &b),
    )?
    .expect("non-empty");
    let n = histories.len() as f64;
    Ok(MarginalEstimate {
        l,
        dist: Categorical::from_normalized(sum.into_iter().map(|x| x / n).collect()),
        n_samples: Some(histories.len()),
        estimator: Estimator::Averaged,
    })
}

/// `Σ_h P_hist(h) · model_cond(· | h)` over histories of length `l`.
pub fn exact_marginal<M, H>(model_cond: &M, model_hist: &H, l: usize, cap: usize) -> Result<MarginalEstimate>
where
    M: SequenceModel + ?Sized,
    H: SequenceModel + ?Sized,
{
    let dist = enumerate_distribution(model_hist, l, cap)?;
    exact_marginal_over(model_cond, &dist, l)
}

/// Exact averaged marginal over an explicit weighted history set.
pub fn exact_marginal_over<M: SequenceModel + ?Sized>(
    model_cond: &M,
    histories: &[(Vec<Token>, f64)],
    l: usize,
) -> Result<MarginalEstimate> {
    let v = model_cond.vocab().size();
    let mut acc = vec![0.0; v];
    for (h, p) in histories {
        let cond = model_cond.conditional(h)?;
        for (a, q) in acc.iter_mut().zip(cond.probs()) {
            *a += p * q;
        }
    }
    Ok(MarginalEstimate {
        l,
        dist: Categorical::from_weights(&acc)?,
        n_samples: None,
        estimator: Estimator::Exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{d_tv, Vocab};
    use crate::seq::{exact_position_marginal, Fixture, PositionalUnigramModel, TabularMarkovModel, ENUMERATION_CAP};
    use crate::train::sample_many;

    #[test]
    fn counted_examples() {
        let samples = vec![vec![0, 0], vec![1, 1]];
        let m = estimate_marginal_counted(&samples, 1, 2).unwrap();
        assert_eq!(m.dist.probs(), &[0.5, 0.5]);
        let same = vec![vec![1, 0]; 5];
        assert_eq!(
            estimate_marginal_counted(&same, 0, 2).unwrap().dist.probs(),
            &[0.0, 1.0]
        );
        assert!(estimate_marginal_counted(&[], 0, 2).is_err());
        assert!(estimate_marginal_counted(&samples, 2, 2).is_err());
    }

    #[test]
    fn counted_unigram_within_three_sigma() {
        let row = Categorical::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let m = PositionalUnigramModel::new(Vocab::synthetic(4).unwrap(), vec![row.clone(); 2]).unwrap();
        let samples = sample_many(&m, 100_000, 4, "c").unwrap();
        let est = estimate_marginal_counted(&samples, 1, 4).unwrap();
        for (p, q) in est.dist.probs().iter().zip(row.probs()) {
            let sigma = (q * (1.0 - q) / 100_000.0).sqrt();
            assert!((p - q).abs() < 3.0 * sigma, "{p} vs {q}");
        }
    }

    #[test]
    fn averaged_examples() {
        let m = Fixture::Example1.model();
        let est = estimate_marginal_averaged(&m, &vec![vec![0]; 4]).unwrap();
        assert_eq!(est.dist.probs(), &[1.0, 0.0]);
        let est = estimate_marginal_averaged(&m, &[vec![0], vec![1], vec![0], vec![1]]).unwrap();
        assert_eq!(est.dist.probs(), &[0.5, 0.5]);
        let m2 = Fixture::Example2.model();
        let est = estimate_marginal_averaged(&m2, &[vec![1]]).unwrap();
        assert_eq!(est.dist, m2.conditional(&[1]).unwrap());
        assert!(estimate_marginal_averaged(&m2, &[vec![1], vec![]]).is_err());
        assert!(estimate_marginal_averaged(&m2, &[]).is_err());
    }

    #[test]
    fn exact_examples() {
        let m = Fixture::Example1.model();
        assert_eq!(
            exact_marginal(&m, &m, 1, ENUMERATION_CAP).unwrap().dist.probs(),
            &[1.0, 0.0]
        );
        let est = exact_marginal(
            &Fixture::Example2.model(),
            &Fixture::Example2.data(),
            1,
            ENUMERATION_CAP,
        )
        .unwrap();
        assert!((est.dist.prob(0) - 0.7).abs() < 1e-15);
        assert!((est.dist.prob(1) - 0.3).abs() < 1e-15);

        let u = PositionalUnigramModel::random(Vocab::synthetic(3).unwrap(), 4, 1.0, &mut stream(0, "u", 0)).unwrap();
        for l in 0..4 {
            let est = exact_marginal(&u, &u, l, ENUMERATION_CAP).unwrap();
            assert!(d_tv(&est.dist, &u.rows()[l]).unwrap() < 1e-12);
        }
    }

    #[test]
    fn exact_self_marginal_matches_enumeration() {
        let m = TabularMarkovModel::random(Vocab::synthetic(3).unwrap(), 5, None, 0.5, &mut stream(3, "t", 0)).unwrap();
        for l in 0..5 {
            let a = exact_marginal(&m, &m, l, ENUMERATION_CAP).unwrap().dist;
            let b = exact_position_marginal(&m, l, ENUMERATION_CAP).unwrap();
            // Independent route: marginalize the enumerated length-(l+1) joint.
            let mut c = vec![0.0; 3];
            for (s, p) in enumerate_distribution(&m, l + 1, ENUMERATION_CAP).unwrap() {
                c[s[l]] += p;
            }
            for t in 0..3 {
                assert!((a.prob(t) - b.prob(t)).abs() < 1e-12);
                assert!((a.prob(t) - c[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corruption_edge_rates() {
        let h = vec![0, 1, 2, 3, 0, 1];
        assert_eq!(corrupt_history(&h, 0.0, 4, &mut stream(0, "c", 0)), h);
        // At c = 1 the output is exactly the stream's noise draws.
        let mut rng = stream(0, "c", 1);
        let expected: Vec<Token> = (0..h.len())
            .map(|_| {
                let _: f64 = rng.random();
                rng.random_range(0..4)
            })
            .collect();
        assert_eq!(corrupt_history(&h, 1.0, 4, &mut stream(0, "c", 1)), expected);
    }

    #[test]
    fn corruption_change_rate_matches_binomial() {
        let (v, c, n) = (5usize, 0.3, 100_000usize);
        let h: Vec<Token> = (0..n).map(|i| i % v).collect();
        let out = corrupt_history(&h, c, v, &mut stream(2, "c", 0));
        let changed = h.iter().zip(&out).filter(|(a, b)| a != b).count() as f64 / n as f64;
        let p = c * (1.0 - 1.0 / v as f64);
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((changed - p).abs() < 3.0 * sigma, "{changed} vs {p}");
    }

    #[test]
    fn corruption_is_coupled_across_rates() {
        let h = vec![0; 200];
        let lo = corrupt_history(&h, 0.2, 3, &mut stream(5, "c", 0));
        let hi = corrupt_history(&h, 0.6, 3, &mut stream(5, "c", 0));
        for (a, b) in lo.iter().zip(&hi) {
            if *a != 0 {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn exact_corruption_channel() {
        let dist = vec![(vec![0, 1], 1.0)];
        let out = corrupt_distribution(&dist, 1.0, 2);
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|(_, p)| (p - 0.25).abs() < 1e-15));
        let out = corrupt_distribution(&dist, 0.5, 2);
        let total: f64 = out.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-15);
        let p01 = out.iter().find(|(h, _)| h == &vec![0, 1]).unwrap().1;
        assert!((p01 - 0.75 * 0.75).abs() < 1e-15);
    }

    #[test]
    fn sampled_histories_are_nested_prefixes() {
        let m =
            TabularMarkovModel::random(Vocab::synthetic(3).unwrap(), 6, Some(1), 1.0, &mut stream(1, "t", 0)).unwrap();
        let src = HistorySource::model(&m);
        let short = sample_histories(&src, 50, 2, 9).unwrap();
        let long = sample_histories(&src, 80, 5, 9).unwrap();
        for (s, l) in short.iter().zip(&long) {
            assert_eq!(s.as_slice(), &l[..2]);
        }
        assert!(sample_histories(&src.corrupted(1.5), 2, 2, 0).is_err());
        assert!(sample_histories(&src, 2, 7, 0).is_err());
    }

    #[test]
    fn estimators_converge_to_exact() {
        let vocab = Vocab::synthetic(4).unwrap();
        let hist = TabularMarkovModel::random(vocab.clone(), 5, None, 0.6, &mut stream(7, "h", 0)).unwrap();
        let cond = TabularMarkovModel::random(vocab, 5, Some(2), 0.6, &mut stream(7, "c", 0)).unwrap();
        let n = 100_000;
        let samples = sample_histories(&HistorySource::data_model(&hist), n, 5, 3).unwrap();
        for l in 1..4 {
            let exact = exact_marginal(&cond, &hist, l, ENUMERATION_CAP).unwrap();
            let hs: Vec<Vec<Token>> = samples.iter().map(|s| s[..l].to_vec()).collect();
            let avg = estimate_marginal_averaged(&cond, &hs).unwrap();
            assert!(d_tv(&avg.dist, &exact.dist).unwrap() <= 0.01);

            let self_exact = exact_marginal(&hist, &hist, l, ENUMERATION_CAP).unwrap();
            let counted = estimate_marginal_counted(&samples, l, 4).unwrap();
            let self_avg = estimate_marginal_averaged(&hist, &hs).unwrap();
            assert!(d_tv(&counted.dist, &self_exact.dist).unwrap() <= 0.01);
            assert!(d_tv(&counted.dist, &self_avg.dist).unwrap() <= 0.01);
        }
    }

    #[test]
    fn averaged_estimate_independent_of_thread_count() {
        let m = TabularMarkovModel::random(Vocab::synthetic(4).unwrap(), 5, None, 0.5, &mut stream(2, "t", 0)).unwrap();
        let hs = sample_histories(&HistorySource::model(&m), 5_000, 3, 1).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| estimate_marginal_averaged(&m, &hs).unwrap());
        let b = four.install(|| estimate_marginal_averaged(&m, &hs).unwrap());
        assert_eq!(a, b);
        let sa = one.install(|| sample_histories(&HistorySource::model(&m).corrupted(0.3), 3_000, 4, 8).unwrap());
        let sb = four.install(|| sample_histories(&HistorySource::model(&m).corrupted(0.3), 3_000, 4, 8).unwrap());
        assert_eq!(sa, sb);
    }
}
