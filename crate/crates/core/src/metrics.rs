//! Exposure-bias measurements.
//!
//! MGD compares the marginal of `W_{l+1}` under a history regime with the
//! data marginal; EB-M is the ratio of MGD under model histories to MGD
//! under data histories. CGD is the expected divergence between model and
//! oracle conditionals over a history distribution; EB-C is the analogous
//! ratio.

use std::fmt;
use std::io::Write;

use serde::{Serialize, Serializer};

use crate::dist::{Categorical, Metric};
use crate::error::{Error, Result};
use crate::estimate::{
    add_into, chunked_reduce, estimate_marginal_averaged, estimate_marginal_counted, exact_history_distribution,
    exact_marginal_over, sample_histories, Estimator, HistoryKind, HistorySource, MarginalEstimate,
};
use crate::seq::{exact_position_marginal, SequenceModel, Token, ENUMERATION_CAP};

/// Below this, a deviation counts as zero when forming ratios.
pub const EPSILON: f64 = 1e-12;
/// Batches used for the batch-means standard error of Monte-Carlo MGD.
pub const SE_BATCHES: usize = 10;
/// Largest history space enumerated for an automatic exact reference.
pub const AUTO_EXACT_CAP: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimation {
    Exact { cap: usize },
    MonteCarlo { n: usize, seed: u64 },
}

impl Estimation {
    pub fn exact() -> Self {
        Estimation::Exact { cap: ENUMERATION_CAP }
    }

    pub fn n_samples(&self) -> Option<usize> {
        match self {
            Estimation::Exact { .. } => None,
            Estimation::MonteCarlo { n, .. } => Some(*n),
        }
    }
}

/// The data side of a measurement.
#[derive(Clone, Copy)]
pub enum DataSource<'a> {
    Oracle(&'a dyn SequenceModel),
    /// Sequences plus the vocabulary size.
    Corpus(&'a [Vec<Token>], usize),
}

impl<'a> DataSource<'a> {
    pub fn histories(&self) -> HistorySource<'a> {
        match *self {
            DataSource::Oracle(o) => HistorySource::data_model(o),
            DataSource::Corpus(c, v) => HistorySource::corpus(c, v),
        }
    }
}

/// Estimator for the data marginal `P_{D|D}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMode {
    /// Exact when the oracle's history space is small enough, otherwise
    /// averaged. Corpora are always counted.
    #[default]
    Auto,
    Exact,
    Averaged,
    Counted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratio {
    Finite(f64),
    Infinite,
}

impl Ratio {
    pub fn value(self) -> f64 {
        match self {
            Ratio::Finite(x) => x,
            Ratio::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Ratio::Infinite)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Finite(x) => write!(f, "{x}"),
            Ratio::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Ratio::Finite(x) => s.serialize_f64(*x),
            Ratio::Infinite => s.serialize_str("inf"),
        }
    }
}

/// `numerator / denominator` with near-zero handling.
pub fn ratio(numerator: f64, denominator: f64) -> Result<Ratio> {
    if denominator >= EPSILON {
        return Ok(Ratio::Finite(numerator / denominator));
    }
    if numerator >= EPSILON {
        Ok(Ratio::Infinite)
    } else {
        Err(Error::DegenerateRatio {
            numerator,
            denominator,
            epsilon: EPSILON,
        })
    }
}

fn check_vocab(model: &dyn SequenceModel, other: &dyn SequenceModel) -> Result<()> {
    if model.vocab() != other.vocab() {
        return Err(Error::DimensionMismatch {
            left: model.vocab().size(),
            right: other.vocab().size(),
        });
    }
    Ok(())
}

fn check_source(model: &dyn SequenceModel, source: &HistorySource<'_>) -> Result<()> {
    match source.backing {
        crate::estimate::Backing::Model(m) => check_vocab(model, m),
        crate::estimate::Backing::Corpus(_, v) if v == model.vocab().size() => Ok(()),
        crate::estimate::Backing::Corpus(_, v) => Err(Error::DimensionMismatch {
            left: model.vocab().size(),
            right: v,
        }),
    }
}

fn check_l(model: &dyn SequenceModel, l: usize) -> Result<()> {
    if l >= model.seq_len() {
        return Err(Error::HistoryTooLong {
            len: l,
            max_len: model.seq_len(),
        });
    }
    Ok(())
}

fn exact_reference(oracle: &dyn SequenceModel, l: usize, cap: usize) -> Result<MarginalEstimate> {
    Ok(MarginalEstimate {
        l,
        dist: exact_position_marginal(oracle, l, cap)?,
        n_samples: None,
        estimator: Estimator::Exact,
    })
}

/// The data marginal `P_{D|D}^{l+1}`.
pub fn reference_marginal(
    data: DataSource<'_>,
    l: usize,
    mode: ReferenceMode,
    est: Estimation,
) -> Result<MarginalEstimate> {
    match data {
        DataSource::Corpus(corpus, v) => match mode {
            ReferenceMode::Auto | ReferenceMode::Counted => {
                let n = est.n_samples().unwrap_or(corpus.len()).min(corpus.len());
                estimate_marginal_counted(&corpus[..n], l, v)
            }
            ReferenceMode::Exact | ReferenceMode::Averaged => Err(Error::CorpusNotQueryable),
        },
        DataSource::Oracle(oracle) => {
            check_l(oracle, l)?;
            match (mode, est) {
                (_, Estimation::Exact { cap }) => exact_reference(oracle, l, cap),
                (ReferenceMode::Exact, Estimation::MonteCarlo { .. }) => exact_reference(oracle, l, ENUMERATION_CAP),
                (ReferenceMode::Auto, Estimation::MonteCarlo { n, seed }) => {
                    match exact_reference(oracle, l, AUTO_EXACT_CAP) {
                        Err(Error::EnumerationCap { .. }) => averaged_reference(oracle, l, n, seed),
                        other => other,
                    }
                }
                (ReferenceMode::Averaged, Estimation::MonteCarlo { n, seed }) => averaged_reference(oracle, l, n, seed),
                (ReferenceMode::Counted, Estimation::MonteCarlo { n, seed }) => {
                    let samples = sample_histories(&HistorySource::data_model(oracle), n, l + 1, seed)?;
                    estimate_marginal_counted(&samples, l, oracle.vocab().size())
                }
            }
        }
    }
}

fn averaged_reference(oracle: &dyn SequenceModel, l: usize, n: usize, seed: u64) -> Result<MarginalEstimate> {
    let hs = sample_histories(&HistorySource::data_model(oracle), n, l, seed)?;
    estimate_marginal_averaged(oracle, &hs)
}

/// `P_{M|H}^{l+1}`: the model's conditionals averaged over histories from
/// `history`.
pub fn history_marginal(
    model: &dyn SequenceModel,
    history: &HistorySource<'_>,
    l: usize,
    est: Estimation,
) -> Result<MarginalEstimate> {
    check_l(model, l)?;
    check_source(model, history)?;
    match est {
        Estimation::Exact { cap } => {
            let dist = exact_history_distribution(history, l, model.vocab().size(), cap)?;
            exact_marginal_over(model, &dist, l)
        }
        Estimation::MonteCarlo { n, seed } => {
            let hs = sample_histories(history, n, l, seed)?;
            estimate_marginal_averaged(model, &hs)
        }
    }
}

pub fn mgd(
    model: &dyn SequenceModel,
    reference: &MarginalEstimate,
    history: &HistorySource<'_>,
    l: usize,
    d: Metric,
    est: Estimation,
) -> Result<f64> {
    let marginal = history_marginal(model, history, l, est)?;
    d.apply(&marginal.dist, &reference.dist)
}

pub fn eb_m(model: &dyn SequenceModel, data: DataSource<'_>, l: usize, d: Metric, est: Estimation) -> Result<Ratio> {
    let reference = reference_marginal(data, l, ReferenceMode::Auto, est)?;
    let num = mgd(model, &reference, &HistorySource::model(model), l, d, est)?;
    let den = mgd(model, &reference, &data.histories(), l, d, est)?;
    ratio(num, den)
}

/// `d(P_{M|M}^{l+1}, P_{M|D}^{l+1})`, which needs no data marginal.
pub fn direct_marginal_gap(
    model: &dyn SequenceModel,
    data: DataSource<'_>,
    l: usize,
    d: Metric,
    est: Estimation,
) -> Result<f64> {
    let own = history_marginal(model, &HistorySource::model(model), l, est)?;
    let fed = history_marginal(model, &data.histories(), l, est)?;
    d.apply(&own.dist, &fed.dist)
}

fn exact_cgd_all(
    model: &dyn SequenceModel,
    oracle: &dyn SequenceModel,
    dist: &[(Vec<Token>, f64)],
    metrics: &[Metric],
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; metrics.len()];
    for (h, p) in dist {
        let (pm, pd) = (model.conditional(h)?, oracle.conditional(h)?);
        for (a, d) in acc.iter_mut().zip(metrics) {
            *a += p * d.apply(&pm, &pd)?;
        }
    }
    Ok(acc)
}

pub fn cgd(
    model: &dyn SequenceModel,
    oracle: &dyn SequenceModel,
    history: &HistorySource<'_>,
    l: usize,
    d: Metric,
    est: Estimation,
) -> Result<f64> {
    if history.kind == HistoryKind::DataCorpus {
        return Err(Error::CorpusNotQueryable);
    }
    check_l(model, l)?;
    check_vocab(model, oracle)?;
    check_source(model, history)?;
    match est {
        Estimation::Exact { cap } => {
            let dist = exact_history_distribution(history, l, model.vocab().size(), cap)?;
            Ok(exact_cgd_all(model, oracle, &dist, &[d])?[0])
        }
        Estimation::MonteCarlo { n, seed } => {
            let hs = sample_histories(history, n, l, seed)?;
            let sum = chunked_reduce(
                hs.len(),
                |range| {
                    let mut acc = 0.0;
                    for h in &hs[range] {
                        acc += d.apply(&model.conditional(h)?, &oracle.conditional(h)?)?;
                    }
                    Ok(acc)
                },
                |a, b| *a += b,
            )?
            .ok_or_else(|| Error::Empty("no histories".into()))?;
            Ok(sum / hs.len() as f64)
        }
    }
}

pub fn eb_c(
    model: &dyn SequenceModel,
    oracle: &dyn SequenceModel,
    l: usize,
    d: Metric,
    est: Estimation,
) -> Result<Ratio> {
    let num = cgd(model, oracle, &HistorySource::model(model), l, d, est)?;
    let den = cgd(model, oracle, &HistorySource::data_model(oracle), l, d, est)?;
    ratio(num, den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureKind {
    EbM,
    EbC,
}

impl MeasureKind {
    pub fn name(self) -> &'static str {
        match self {
            MeasureKind::EbM => "eb-m",
            MeasureKind::EbC => "eb-c",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    /// The `l = 0` row, where both history distributions are empty.
    Sanity,
    /// Monte-Carlo denominator below two of its standard errors.
    Unstable,
    Infinite,
    /// Both deviations below [`EPSILON`].
    Degenerate,
}

impl Flag {
    pub fn name(self) -> &'static str {
        match self {
            Flag::Sanity => "sanity",
            Flag::Unstable => "unstable",
            Flag::Infinite => "infinite",
            Flag::Degenerate => "degenerate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRecord {
    pub l: usize,
    pub model_hist: f64,
    pub data_hist: f64,
    pub model_hist_se: Option<f64>,
    pub data_hist_se: Option<f64>,
    pub ratio: Option<Ratio>,
    pub flags: Vec<Flag>,
}

impl CurveRecord {
    fn new(l: usize, model_hist: f64, data_hist: f64, se: Option<(f64, f64)>) -> Self {
        let mut flags = Vec::new();
        if l == 0 {
            flags.push(Flag::Sanity);
        }
        let ratio = match ratio(model_hist, data_hist) {
            Ok(r) => {
                if r.is_infinite() {
                    flags.push(Flag::Infinite);
                }
                Some(r)
            }
            Err(_) => {
                flags.push(Flag::Degenerate);
                None
            }
        };
        if let Some((_, se_den)) = se {
            if data_hist < 2.0 * se_den {
                flags.push(Flag::Unstable);
            }
        }
        flags.sort();
        CurveRecord {
            l,
            model_hist,
            data_hist,
            model_hist_se: se.map(|s| s.0),
            data_hist_se: se.map(|s| s.1),
            ratio,
            flags,
        }
    }

    /// Whether the ratio enters the curve average.
    pub fn averaged(&self) -> bool {
        self.flags.is_empty() && matches!(self.ratio, Some(Ratio::Finite(_)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationCurve {
    pub kind: MeasureKind,
    pub metric: Metric,
    pub corrupt_rate: f64,
    /// `None` for exact curves.
    pub n_samples: Option<usize>,
    /// Starts with the `l = 0` sanity row.
    pub records: Vec<CurveRecord>,
    pub average_ratio: Option<f64>,
    pub averaged_points: usize,
    pub excluded_points: usize,
}

impl DeviationCurve {
    fn new(
        kind: MeasureKind,
        metric: Metric,
        corrupt_rate: f64,
        n_samples: Option<usize>,
        records: Vec<CurveRecord>,
    ) -> Self {
        let rows: Vec<&CurveRecord> = records.iter().filter(|r| r.l > 0).collect();
        let used: Vec<f64> = rows
            .iter()
            .filter(|r| r.averaged())
            .map(|r| r.ratio.unwrap().value())
            .collect();
        let average_ratio = (!used.is_empty()).then(|| used.iter().sum::<f64>() / used.len() as f64);
        DeviationCurve {
            kind,
            metric,
            corrupt_rate,
            n_samples,
            average_ratio,
            averaged_points: used.len(),
            excluded_points: rows.len() - used.len(),
            records,
        }
    }

    pub fn record(&self, l: usize) -> Option<&CurveRecord> {
        self.records.iter().find(|r| r.l == l)
    }

    /// Mean model-history deviation over `l ≥ 1`.
    pub fn mean_model_hist(&self) -> f64 {
        let rows: Vec<f64> = self.records.iter().filter(|r| r.l > 0).map(|r| r.model_hist).collect();
        rows.iter().sum::<f64>() / rows.len().max(1) as f64
    }
}

pub const EXCLUSION_RULE: &str = "averages use rows with l >= 1 whose ratio is finite and unflagged; \
     rows flagged unstable (denominator below two standard errors), infinite or degenerate are excluded and counted";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub kind: MeasureKind,
    pub l_min: usize,
    /// Inclusive.
    pub l_max: usize,
    pub metrics: Vec<Metric>,
    pub corrupt_rates: Vec<f64>,
    pub estimations: Vec<Estimation>,
    pub reference: ReferenceMode,
}

impl SweepSpec {
    fn validate(&self, model: &dyn SequenceModel) -> Result<()> {
        if self.l_min > self.l_max {
            return Err(Error::Config(format!(
                "l range {}..={} is empty",
                self.l_min, self.l_max
            )));
        }
        check_l(model, self.l_max)?;
        if self.metrics.is_empty() || self.corrupt_rates.is_empty() || self.estimations.is_empty() {
            return Err(Error::Config(
                "sweep needs at least one metric, rate and estimation".into(),
            ));
        }
        if let Some(c) = self.corrupt_rates.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::Config(format!("corrupt rate {c} outside [0, 1]")));
        }
        if self
            .estimations
            .iter()
            .any(|e| matches!(e, Estimation::MonteCarlo { n: 0, .. }))
        {
            return Err(Error::Config("sample count must be positive".into()));
        }
        Ok(())
    }

    fn rows(&self) -> Vec<usize> {
        std::iter::once(0).chain(self.l_min.max(1)..=self.l_max).collect()
    }
}

/// One curve per (estimation, corrupt rate, metric), in that nesting order.
/// Corruption applies to the model's histories only.
pub fn sweep(model: &dyn SequenceModel, data: DataSource<'_>, spec: &SweepSpec) -> Result<Vec<DeviationCurve>> {
    spec.validate(model)?;
    let oracle = match (spec.kind, data) {
        (MeasureKind::EbC, DataSource::Corpus(..)) => return Err(Error::CorpusNotQueryable),
        (_, DataSource::Oracle(o)) => {
            check_vocab(model, o)?;
            Some(o)
        }
        (_, DataSource::Corpus(_, v)) if v != model.vocab().size() => {
            return Err(Error::DimensionMismatch {
                left: model.vocab().size(),
                right: v,
            })
        }
        _ => None,
    };
    let mut curves = Vec::new();
    for &est in &spec.estimations {
        let cells = match (spec.kind, est) {
            (MeasureKind::EbC, Estimation::Exact { cap }) => exact_cgd_cells(model, oracle.unwrap(), spec, cap)?,
            (MeasureKind::EbC, Estimation::MonteCarlo { n, seed }) => {
                mc_cgd_cells(model, oracle.unwrap(), spec, n, seed)?
            }
            (MeasureKind::EbM, _) => mgd_cells(model, data, spec, est)?,
        };
        for (ci, &c) in spec.corrupt_rates.iter().enumerate() {
            for (mi, &metric) in spec.metrics.iter().enumerate() {
                let records = spec
                    .rows()
                    .into_iter()
                    .enumerate()
                    .map(|(ri, l)| {
                        let cell = &cells[ri];
                        let (num, den) = (cell.model[ci][mi], cell.data[mi]);
                        let se = cell.se.as_ref().map(|(sm, sd)| (sm[ci][mi], sd[mi]));
                        CurveRecord::new(l, num, den, se)
                    })
                    .collect();
                curves.push(DeviationCurve::new(spec.kind, metric, c, est.n_samples(), records));
            }
        }
    }
    Ok(curves)
}

/// Deviations at one history length: `model[rate][metric]`, `data[metric]`
/// and, for Monte-Carlo, the matching standard errors.
struct Cell {
    model: Vec<Vec<f64>>,
    data: Vec<f64>,
    se: Option<(Vec<Vec<f64>>, Vec<f64>)>,
}

fn exact_cgd_cells(
    model: &dyn SequenceModel,
    oracle: &dyn SequenceModel,
    spec: &SweepSpec,
    cap: usize,
) -> Result<Vec<Cell>> {
    let v = model.vocab().size();
    spec.rows()
        .into_iter()
        .map(|l| {
            let data_dist = exact_history_distribution(&HistorySource::data_model(oracle), l, v, cap)?;
            let data = exact_cgd_all(model, oracle, &data_dist, &spec.metrics)?;
            let model_vals = spec
                .corrupt_rates
                .iter()
                .map(|&c| {
                    let dist = exact_history_distribution(&HistorySource::model(model).corrupted(c), l, v, cap)?;
                    exact_cgd_all(model, oracle, &dist, &spec.metrics)
                })
                .collect::<Result<_>>()?;
            Ok(Cell {
                model: model_vals,
                data,
                se: None,
            })
        })
        .collect()
}

/// Per-`(l, metric)` mean and standard error of the CGD integrand.
fn cgd_moments(
    model: &dyn SequenceModel,
    oracle: &dyn SequenceModel,
    histories: &[Vec<Token>],
    rows: &[usize],
    metrics: &[Metric],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let width = rows.len() * metrics.len();
    let (sum, sumsq) = chunked_reduce(
        histories.len(),
        |range| {
            let mut s = vec![0.0; width];
            let mut s2 = vec![0.0; width];
            for h in &histories[range] {
                let pm = model.prefix_conditionals(h)?;
                let pd = oracle.prefix_conditionals(h)?;
                for (ri, &l) in rows.iter().enumerate() {
                    for (mi, d) in metrics.iter().enumerate() {
                        let x = d.apply(&pm[l], &pd[l])?;
                        s[ri * metrics.len() + mi] += x;
                        s2[ri * metrics.len() + mi] += x * x;
                    }
                }
            }
            Ok((s, s2))
        },
        |a, b| {
            add_into(&mut a.0, &b.0);
            add_into(&mut a.1, &b.1);
        },
    )?
    .ok_or_else(|| Error::Empty("no histories".into()))?;
    let n = histories.len() as f64;
    let mut means = vec![vec![0.0; metrics.len()]; rows.len()];
    let mut ses = means.clone();
    for ri in 0..rows.len() {
        for mi in 0..metrics.len() {
            let k = ri * metrics.len() + mi;
            let mean = sum[k] / n;
            means[ri][mi] = mean;
            ses[ri][mi] = if histories.len() < 2 {
                f64::INFINITY
            } else {
                let var = ((sumsq[k] / n - mean * mean) * n / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            };
        }
    }
    Ok((means, ses))
}

fn mc_cgd_cells(
    model: &dyn SequenceModel,
    oracle: &dyn SequenceModel,
    spec: &SweepSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<Cell>> {
    let rows = spec.rows();
    let data_hist = sample_histories(&HistorySource::data_model(oracle), n, spec.l_max, seed)?;
    let (data_mean, data_se) = cgd_moments(model, oracle, &data_hist, &rows, &spec.metrics)?;
    drop(data_hist);
    let mut per_rate = Vec::new();
    for &c in &spec.corrupt_rates {
        let hs = sample_histories(&HistorySource::model(model).corrupted(c), n, spec.l_max, seed)?;
        per_rate.push(cgd_moments(model, oracle, &hs, &rows, &spec.metrics)?);
    }
    Ok((0..rows.len())
        .map(|ri| Cell {
            model: per_rate.iter().map(|(m, _)| m[ri].clone()).collect(),
            data: data_mean[ri].clone(),
            se: Some((
                per_rate.iter().map(|(_, s)| s[ri].clone()).collect(),
                data_se[ri].clone(),
            )),
        })
        .collect())
}

/// Averaged marginals for every row, overall and per batch.
struct MarginalSums {
    total: Vec<Vec<f64>>,
    batches: Vec<Vec<Vec<f64>>>,
    batch_counts: Vec<usize>,
}

fn marginal_sums(model: &dyn SequenceModel, histories: &[Vec<Token>], rows: &[usize]) -> Result<MarginalSums> {
    let v = model.vocab().size();
    let n = histories.len();
    let batch_of = |i: usize| i * SE_BATCHES / n;
    let sums = chunked_reduce(
        n,
        |range| {
            let mut acc = MarginalSums {
                total: vec![vec![0.0; v]; rows.len()],
                batches: vec![vec![vec![0.0; v]; rows.len()]; SE_BATCHES],
                batch_counts: vec![0; SE_BATCHES],
            };
            for i in range {
                let conds = model.prefix_conditionals(&histories[i])?;
                let b = batch_of(i);
                acc.batch_counts[b] += 1;
                for (ri, &l) in rows.iter().enumerate() {
                    add_into(&mut acc.total[ri], conds[l].probs());
                    add_into(&mut acc.batches[b][ri], conds[l].probs());
                }
            }
            Ok(acc)
        },
        |a, b| {
            for (x, y) in a.total.iter_mut().zip(&b.total) {
                add_into(x, y);
            }
            for (xb, yb) in a.batches.iter_mut().zip(&b.batches) {
                for (x, y) in xb.iter_mut().zip(yb) {
                    add_into(x, y);
                }
            }
            for (x, y) in a.batch_counts.iter_mut().zip(&b.batch_counts) {
                *x += y;
            }
        },
    )?
    .ok_or_else(|| Error::Empty("no histories".into()))?;
    Ok(sums)
}

fn scaled(sum: &[f64], n: usize) -> Categorical {
    Categorical::from_normalized(sum.iter().map(|x| x / n as f64).collect())
}

/// MGD per metric for each row, with a batch-means standard error.
fn mgd_from_sums(
    sums: &MarginalSums,
    refs: &[Categorical],
    metrics: &[Metric],
    n: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut values = Vec::new();
    let mut ses = Vec::new();
    for (ri, reference) in refs.iter().enumerate() {
        let marginal = scaled(&sums.total[ri], n);
        let mut row_v = Vec::new();
        let mut row_se = Vec::new();
        for d in metrics {
            row_v.push(d.apply(&marginal, reference)?);
            if sums.batch_counts.contains(&0) {
                row_se.push(f64::INFINITY);
                continue;
            }
            let per_batch: Vec<f64> = sums
                .batches
                .iter()
                .zip(&sums.batch_counts)
                .map(|(b, &c)| d.apply(&scaled(&b[ri], c), reference))
                .collect::<Result<_>>()?;
            let k = per_batch.len() as f64;
            let mean = per_batch.iter().sum::<f64>() / k;
            let var = per_batch.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
            row_se.push((var / k).sqrt());
        }
        values.push(row_v);
        ses.push(row_se);
    }
    Ok((values, ses))
}

fn mgd_cells(model: &dyn SequenceModel, data: DataSource<'_>, spec: &SweepSpec, est: Estimation) -> Result<Vec<Cell>> {
    let rows = spec.rows();
    if let DataSource::Corpus(c, _) = data {
        if let Some(s) = c.iter().find(|s| s.len() <= spec.l_max) {
            return Err(Error::Corpus(format!(
                "corpus sequence of length {} has no position {}",
                s.len(),
                spec.l_max + 1
            )));
        }
    }
    let refs: Vec<MarginalEstimate> = match (data, spec.reference, est) {
        // Averaged references reuse the data histories sampled below.
        (DataSource::Oracle(_), ReferenceMode::Averaged | ReferenceMode::Auto, Estimation::MonteCarlo { .. }) => {
            Vec::new()
        }
        _ => rows
            .iter()
            .map(|&l| reference_marginal(data, l, spec.reference, est))
            .collect::<Result<_>>()?,
    };
    match est {
        Estimation::Exact { cap } => {
            let v = model.vocab().size();
            rows.iter()
                .zip(&refs)
                .map(|(&l, reference)| {
                    let fed =
                        exact_marginal_over(model, &exact_history_distribution(&data.histories(), l, v, cap)?, l)?;
                    let data_vals = spec
                        .metrics
                        .iter()
                        .map(|d| d.apply(&fed.dist, &reference.dist))
                        .collect::<Result<_>>()?;
                    let model_vals = spec
                        .corrupt_rates
                        .iter()
                        .map(|&c| {
                            let dist =
                                exact_history_distribution(&HistorySource::model(model).corrupted(c), l, v, cap)?;
                            let own = exact_marginal_over(model, &dist, l)?;
                            spec.metrics
                                .iter()
                                .map(|d| d.apply(&own.dist, &reference.dist))
                                .collect()
                        })
                        .collect::<Result<_>>()?;
                    Ok(Cell {
                        model: model_vals,
                        data: data_vals,
                        se: None,
                    })
                })
                .collect()
        }
        Estimation::MonteCarlo { n, seed } => {
            let data_hist = sample_histories(&data.histories(), n, spec.l_max, seed)?;
            let n_data = data_hist.len();
            let refs: Vec<Categorical> = if refs.is_empty() {
                let DataSource::Oracle(oracle) = data else {
                    unreachable!()
                };
                let mut lazy: Option<MarginalSums> = None;
                rows.iter()
                    .enumerate()
                    .map(|(ri, &l)| {
                        if spec.reference == ReferenceMode::Auto {
                            match exact_reference(oracle, l, AUTO_EXACT_CAP) {
                                Err(Error::EnumerationCap { .. }) => {}
                                other => return other.map(|m| m.dist),
                            }
                        }
                        if lazy.is_none() {
                            lazy = Some(marginal_sums(oracle, &data_hist, &rows)?);
                        }
                        Ok(scaled(&lazy.as_ref().unwrap().total[ri], n_data))
                    })
                    .collect::<Result<_>>()?
            } else {
                refs.into_iter().map(|m| m.dist).collect()
            };
            let fed = marginal_sums(model, &data_hist, &rows)?;
            let (data_vals, data_se) = mgd_from_sums(&fed, &refs, &spec.metrics, n_data)?;
            drop(data_hist);
            let mut per_rate = Vec::new();
            for &c in &spec.corrupt_rates {
                let hs = sample_histories(&HistorySource::model(model).corrupted(c), n, spec.l_max, seed)?;
                let own = marginal_sums(model, &hs, &rows)?;
                per_rate.push(mgd_from_sums(&own, &refs, &spec.metrics, n)?);
            }
            Ok((0..rows.len())
                .map(|ri| Cell {
                    model: per_rate.iter().map(|(m, _)| m[ri].clone()).collect(),
                    data: data_vals[ri].clone(),
                    se: Some((
                        per_rate.iter().map(|(_, s)| s[ri].clone()).collect(),
                        data_se[ri].clone(),
                    )),
                })
                .collect())
        }
    }
}

fn fmt_opt_n(n: Option<usize>) -> String {
    n.map_or_else(|| "exact".to_string(), |n| n.to_string())
}

/// Writes curves as CSV rows, one per `(curve, l)`.
pub fn write_curves_csv<W: Write>(curves: &[DeviationCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "l",
        "metric",
        "corrupt_rate",
        "n_samples",
        "mgd_or_cgd_model_hist",
        "mgd_or_cgd_data_hist",
        "ratio",
        "flags",
    ])?;
    for c in curves {
        for r in &c.records {
            let flags: Vec<&str> = r.flags.iter().map(|f| f.name()).collect();
            w.write_record([
                r.l.to_string(),
                c.metric.name().to_string(),
                c.corrupt_rate.to_string(),
                fmt_opt_n(c.n_samples),
                r.model_hist.to_string(),
                r.data_hist.to_string(),
                r.ratio.map_or_else(String::new, |x| x.to_string()),
                flags.join("|"),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}
