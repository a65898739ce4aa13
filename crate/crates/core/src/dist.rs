//! Finite categorical distributions and the divergences between them.
//!
//! Logarithms are natural throughout, so `d_js` is bounded by `ln 2`.
//! Terms of the form `0 · ln 0` are taken to be zero.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ p_i = 1` accepted by [`Categorical::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// An ordered token vocabulary. Token id `i` is `tokens[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(repr: VocabRepr) -> Result<Self> {
        Vocab::new(repr.tokens)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::InvalidVocab(format!(
                "need at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let mut seen = HashSet::with_capacity(tokens.len());
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(Error::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens })
    }

    /// Synthetic vocabulary `w0, w1, ...`.
    pub fn synthetic(size: usize) -> Result<Self> {
        Vocab::new((0..size).map(|i| format!("w{i}")).collect())
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }
}

/// A probability vector over a finite vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Categorical {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Categorical {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Categorical::new(probs)
    }
}

impl From<Categorical> for Vec<f64> {
    fn from(c: Categorical) -> Self {
        c.probs
    }
}

impl Categorical {
    /// Validates non-negativity and normalization (within [`SUM_TOLERANCE`]).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("entry {i} is {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(Categorical { probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}")));
        }
        Categorical::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(size: usize) -> Self {
        Categorical {
            probs: vec![1.0 / size as f64; size],
        }
    }

    pub fn one_hot(size: usize, index: usize) -> Self {
        let mut probs = vec![0.0; size];
        probs[index] = 1.0;
        Categorical { probs }
    }

    /// Builds from a vector already known to be normalized (softmax output,
    /// averages of valid distributions).
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6, "not normalized");
        Categorical { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.probs[token]
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF draw for a uniform `u` in `[0, 1)`. Never returns a
    /// zero-probability token.
    pub fn sample_with(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last_positive = i;
                if u < acc {
                    return i;
                }
            }
        }
        last_positive
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sample_with(rng.random::<f64>())
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

fn check_dims(p: &Categorical, q: &Categorical) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(())
}

/// Total variation distance, `½ Σ |p_i − q_i|`.
pub fn d_tv(p: &Categorical, q: &Categorical) -> Result<f64> {
    check_dims(p, q)?;
    let sum: f64 = p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum();
    Ok((0.5 * sum).min(1.0))
}

/// Result of a KL divergence, which is infinite when `p` puts mass where
/// `q` has none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlDivergence {
    Finite(f64),
    Infinite,
}

impl KlDivergence {
    pub fn finite(self) -> Option<f64> {
        match self {
            KlDivergence::Finite(v) => Some(v),
            KlDivergence::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, KlDivergence::Infinite)
    }
}

/// `Σ_{p_i > 0} p_i ln(p_i / q_i)` in nats.
pub fn kl(p: &Categorical, q: &Categorical) -> Result<KlDivergence> {
    check_dims(p, q)?;
    let mut total = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(KlDivergence::Infinite);
            }
            total += a * (a / b).ln();
        }
    }
    Ok(KlDivergence::Finite(total.max(0.0)))
}

/// Jensen-Shannon divergence in nats, bounded by `ln 2`.
pub fn d_js(p: &Categorical, q: &Categorical) -> Result<f64> {
    check_dims(p, q)?;
    let mut total = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += a * (a / m).ln();
        }
        if b > 0.0 {
            total += b * (b / m).ln();
        }
    }
    Ok((0.5 * total).clamp(0.0, std::f64::consts::LN_2))
}

/// Greedy-decoding divergence: 1 when the argmaxes differ.
pub fn d_gd(p: &Categorical, q: &Categorical) -> Result<f64> {
    check_dims(p, q)?;
    Ok(if p.argmax() == q.argmax() { 0.0 } else { 1.0 })
}

/// The distance measures the bias metrics are computed with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Tv,
    Js,
    Gd,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Tv, Metric::Js, Metric::Gd];

    pub fn apply(self, p: &Categorical, q: &Categorical) -> Result<f64> {
        match self {
            Metric::Tv => d_tv(p, q),
            Metric::Js => d_js(p, q),
            Metric::Gd => d_gd(p, q),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Tv => "tv",
            Metric::Js => "js",
            Metric::Gd => "gd",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tv" => Ok(Metric::Tv),
            "js" => Ok(Metric::Js),
            "gd" => Ok(Metric::Gd),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cat(v: &[f64]) -> Categorical {
        Categorical::new(v.to_vec()).unwrap()
    }

    #[test]
    fn tv_examples() {
        assert_eq!(d_tv(&cat(&[1.0, 0.0]), &cat(&[0.5, 0.5])).unwrap(), 0.5);
        let p = cat(&[0.3, 0.7]);
        assert_eq!(d_tv(&p, &p).unwrap(), 0.0);
        let v = d_tv(&cat(&[0.9, 0.1]), &cat(&[0.5, 0.5])).unwrap();
        assert!((v - 0.4).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let p = cat(&[0.2, 0.8]);
        assert_eq!(kl(&p, &p).unwrap(), KlDivergence::Finite(0.0));
        let v = kl(&cat(&[1.0, 0.0]), &cat(&[0.5, 0.5])).unwrap().finite().unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let v = kl(&cat(&[0.75, 0.25]), &cat(&[0.5, 0.5])).unwrap().finite().unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn kl_support_violation_is_infinite() {
        let r = kl(&cat(&[0.5, 0.5]), &cat(&[1.0, 0.0])).unwrap();
        assert!(r.is_infinite());
        assert_eq!(r.finite(), None);
    }

    #[test]
    fn js_examples() {
        let p = cat(&[0.4, 0.6]);
        assert_eq!(d_js(&p, &p).unwrap(), 0.0);
        let v = d_js(&cat(&[1.0, 0.0]), &cat(&[0.0, 1.0])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        // m = (0.75, 0.25): ½[ln(4/3)] + ½[0.5 ln(2/3) + 0.5 ln 2]
        let v = d_js(&cat(&[1.0, 0.0]), &cat(&[0.5, 0.5])).unwrap();
        let expected = 0.5 * (4.0f64 / 3.0).ln() + 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln());
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.215762).abs() < 1e-6);
    }

    #[test]
    fn gd_examples() {
        assert_eq!(d_gd(&cat(&[0.9, 0.1]), &cat(&[0.2, 0.8])).unwrap(), 1.0);
        assert_eq!(d_gd(&cat(&[0.9, 0.1]), &cat(&[0.6, 0.4])).unwrap(), 0.0);
        assert_eq!(d_gd(&cat(&[0.5, 0.5]), &cat(&[0.6, 0.4])).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let p = cat(&[0.5, 0.5]);
        let q = cat(&[0.2, 0.3, 0.5]);
        for m in Metric::ALL {
            assert!(matches!(m.apply(&p, &q), Err(Error::DimensionMismatch { .. })));
        }
        assert!(kl(&p, &q).is_err());
    }

    #[test]
    fn rejects_invalid_vectors() {
        assert!(Categorical::new(vec![0.5, 0.4]).is_err());
        assert!(Categorical::new(vec![1.2, -0.2]).is_err());
        assert!(Categorical::new(vec![f64::NAN, 1.0]).is_err());
        assert!(Categorical::new(vec![]).is_err());
        assert!(Categorical::new(vec![0.5, 0.5 + 5e-10]).is_ok());
    }

    #[test]
    fn vocab_invariants() {
        assert!(Vocab::new(vec!["a".into()]).is_err());
        assert!(Vocab::new(vec!["a".into(), "a".into()]).is_err());
        let v = Vocab::new(vec!["A".into(), "B".into()]).unwrap();
        assert_eq!(v.id("B"), Some(1));
        assert_eq!(v.token(0), Some("A"));
        let bad: std::result::Result<Vocab, _> = serde_json::from_str(r#"{"tokens":["x","x"]}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn sampling_skips_zero_mass() {
        let p = cat(&[0.0, 1.0, 0.0]);
        for u in [0.0, 0.5, 0.999_999] {
            assert_eq!(p.sample_with(u), 1);
        }
        let p = cat(&[0.25, 0.75]);
        assert_eq!(p.sample_with(0.2), 0);
        assert_eq!(p.sample_with(0.25), 1);
    }

    fn arb_dist(n: usize) -> impl Strategy<Value = Categorical> {
        proptest::collection::vec(0.0f64..1.0, n).prop_filter_map("all zero", |w| {
            if has_mass(&w) {
                Categorical::from_weights(&w).ok()
            } else {
                None
            }
        })
    }

    fn has_mass(w: &[f64]) -> bool {
        w.iter().sum::<f64>() > 1e-6
    }

    fn arb_pair() -> impl Strategy<Value = (Categorical, Categorical)> {
        (2usize..8).prop_flat_map(|n| (arb_dist(n), arb_dist(n)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn divergences_bounded_symmetric((p, q) in arb_pair()) {
            let tv = d_tv(&p, &q).unwrap();
            let js = d_js(&p, &q).unwrap();
            prop_assert!((0.0..=1.0).contains(&tv));
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&js));
            prop_assert!(js.is_finite());
            prop_assert_eq!(tv, d_tv(&q, &p).unwrap());
            prop_assert!((js - d_js(&q, &p).unwrap()).abs() < 1e-15);
            prop_assert_eq!(d_gd(&p, &q).unwrap(), d_gd(&q, &p).unwrap());
        }
    }

    proptest! {
        #[test]
        fn self_distance_is_zero(p in (2usize..8).prop_flat_map(arb_dist)) {
            for m in Metric::ALL {
                prop_assert_eq!(m.apply(&p, &p).unwrap(), 0.0);
            }
            prop_assert_eq!(kl(&p, &p).unwrap(), KlDivergence::Finite(0.0));
        }

        #[test]
        fn tv_triangle_inequality(
            (p, q, r) in (2usize..8).prop_flat_map(|n| (arb_dist(n), arb_dist(n), arb_dist(n)))
        ) {
            let pr = d_tv(&p, &r).unwrap();
            let pq = d_tv(&p, &q).unwrap();
            let qr = d_tv(&q, &r).unwrap();
            prop_assert!(pr <= pq + qr + 1e-12);
        }

        #[test]
        fn gibbs_inequality((p, q) in arb_pair()) {
            match kl(&p, &q).unwrap() {
                KlDivergence::Finite(v) => {
                    prop_assert!(v >= 0.0);
                    if d_tv(&p, &q).unwrap() > 1e-6 {
                        prop_assert!(v > 0.0);
                    }
                }
                KlDivergence::Infinite => {
                    prop_assert!(p.probs().iter().zip(q.probs()).any(|(a, b)| *a > 0.0 && *b == 0.0));
                }
            }
        }

        #[test]
        fn disjoint_supports_keep_js_finite(n in 2usize..8, split in 1usize..7) {
            let split = split.min(n - 1);
            let mut a = vec![0.0; n];
            let mut b = vec![0.0; n];
            a[..split].iter_mut().for_each(|x| *x = 1.0);
            b[split..].iter_mut().for_each(|x| *x = 1.0);
            let p = Categorical::from_weights(&a).unwrap();
            let q = Categorical::from_weights(&b).unwrap();
            let js = d_js(&p, &q).unwrap();
            prop_assert!((js - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }
}
