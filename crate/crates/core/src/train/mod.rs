//! Teacher-forcing MLE training, scheduled sampling and perplexity.

mod adam;

pub use adam::{adam_step, AdamConfig, AdamState};

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};
use crate::seq::recurrent::Params;
use crate::seq::{RecurrentLM, SequenceModel, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Mle,
    ScheduledSampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fresh oracle samples drawn per epoch.
    pub sequences_per_epoch: usize,
    pub seed: u64,
    pub method: TrainMethod,
    /// Replacement rate reached at the last epoch of scheduled sampling.
    pub ss_final_rate: f64,
    /// Global gradient-norm clip; off unless set.
    pub clip_norm: Option<f64>,
    /// Held-out oracle samples for the final perplexity.
    pub eval_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 100,
            batch_size: 64,
            sequences_per_epoch: 50_000,
            seed: 0,
            method: TrainMethod::Mle,
            ss_final_rate: 0.1,
            clip_norm: None,
            eval_sequences: 2_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.ss_final_rate) {
            return bad("ss_final_rate must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.sequences_per_epoch == 0 {
            return bad("batch_size and sequences_per_epoch must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("adam betas must lie in [0, 1) and epsilon must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: TrainMethod,
    /// Mean training NLL per token (nats), one entry per epoch.
    pub epoch_nll: Vec<f64>,
    /// Scheduled-sampling rate used in each epoch (all zero for MLE).
    pub epoch_replace_rate: Vec<f64>,
    /// Fraction of conditioning tokens actually replaced in each epoch.
    pub epoch_replaced_fraction: Vec<f64>,
    pub final_perplexity: Option<f64>,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// Equality of everything except wall time.
    pub fn same_results(&self, other: &TrainReport) -> bool {
        self.method == other.method
            && self.epoch_nll == other.epoch_nll
            && self.epoch_replace_rate == other.epoch_replace_rate
            && self.epoch_replaced_fraction == other.epoch_replaced_fraction
            && self.final_perplexity == other.final_perplexity
    }
}

/// Where training sequences come from.
#[derive(Clone, Copy)]
pub enum TrainData<'a> {
    /// Fresh samples every epoch.
    Oracle(&'a dyn SequenceModel),
    /// A fixed dataset, reshuffled every epoch.
    Corpus(&'a [Vec<Token>]),
}

/// Mean over the batch of `(1/L) Σ_l −ln P_M(W_l | W_{1:l−1})`, with its
/// gradient for every parameter tensor.
pub fn mle_loss(model: &RecurrentLM, batch: &[Vec<Token>]) -> Result<(f64, Params)> {
    model.loss_and_grad(batch)
}

/// Linear schedule: 0 at the first epoch, `final_rate` at the last.
/// `epoch` is 1-based.
pub fn ss_rate(epoch: usize, epochs: usize, final_rate: f64) -> f64 {
    if epochs <= 1 {
        return 0.0;
    }
    final_rate * (epoch.saturating_sub(1)) as f64 / (epochs - 1) as f64
}

pub fn train_mle(student: &mut RecurrentLM, data: TrainData<'_>, config: &TrainConfig) -> Result<TrainReport> {
    let config = TrainConfig {
        method: TrainMethod::Mle,
        ..config.clone()
    };
    train(student, data, &config)
}

pub fn train_scheduled_sampling(
    student: &mut RecurrentLM,
    data: TrainData<'_>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let config = TrainConfig {
        method: TrainMethod::ScheduledSampling,
        ..config.clone()
    };
    train(student, data, &config)
}

/// Runs `config.epochs` epochs of mini-batch Adam. Zero epochs leaves the
/// student untouched.
pub fn train(student: &mut RecurrentLM, data: TrainData<'_>, config: &TrainConfig) -> Result<TrainReport> {
    let start = Instant::now();
    let mut report = TrainReport {
        method: config.method,
        epoch_nll: Vec::with_capacity(config.epochs),
        epoch_replace_rate: Vec::with_capacity(config.epochs),
        epoch_replaced_fraction: Vec::with_capacity(config.epochs),
        final_perplexity: None,
        wall_time_secs: 0.0,
    };
    if config.epochs == 0 {
        return Ok(report);
    }
    config.validate()?;
    check_compatible(student, data)?;

    let adam = config.adam();
    let mut state = AdamState::new(student.params());
    for epoch in 1..=config.epochs {
        let mut sequences = epoch_data(data, config, epoch)?;
        if let TrainData::Corpus(_) = data {
            sequences.shuffle(&mut stream(config.seed, "train-shuffle", epoch as u64));
        }
        let rate = match config.method {
            TrainMethod::Mle => 0.0,
            TrainMethod::ScheduledSampling => ss_rate(epoch, config.epochs, config.ss_final_rate),
        };
        let mut nll_sum = 0.0;
        let mut replaced = 0usize;
        for (b, batch) in sequences.chunks(config.batch_size).enumerate() {
            let (loss, mut grads) = if rate > 0.0 {
                let label = format!("ss-replace-{epoch}");
                let mut rngs: Vec<StreamRng> = (0..batch.len())
                    .map(|i| stream(config.seed, &label, (b * config.batch_size + i) as u64))
                    .collect();
                let (loss, grads, n) = student.loss_and_grad_replaced(batch, rate, &mut rngs)?;
                replaced += n;
                (loss, grads)
            } else {
                student.loss_and_grad(batch)?
            };
            if let Some(max_norm) = config.clip_norm {
                let norm = grads.l2_norm();
                if norm > max_norm {
                    grads.scale(max_norm / norm);
                }
            }
            adam_step(student.params_mut(), &grads, &mut state, &adam)?;
            nll_sum += loss * batch.len() as f64;
        }
        let conditioning_slots = (sequences.len() * (student.seq_len() - 1)).max(1);
        report.epoch_nll.push(nll_sum / sequences.len() as f64);
        report.epoch_replace_rate.push(rate);
        report
            .epoch_replaced_fraction
            .push(replaced as f64 / conditioning_slots as f64);
    }

    let eval = match data {
        TrainData::Oracle(oracle) => sample_many(oracle, config.eval_sequences, config.seed, "train-eval")?,
        TrainData::Corpus(corpus) => corpus.to_vec(),
    };
    if !eval.is_empty() {
        report.final_perplexity = Some(perplexity(&*student, &eval)?);
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

fn check_compatible(student: &RecurrentLM, data: TrainData<'_>) -> Result<()> {
    match data {
        TrainData::Oracle(oracle) => {
            if oracle.vocab() != student.vocab() || oracle.seq_len() != student.seq_len() {
                return Err(Error::Config(
                    "student and oracle must share vocabulary and sequence length".into(),
                ));
            }
        }
        TrainData::Corpus(corpus) => {
            if corpus.is_empty() {
                return Err(Error::Empty("training corpus".into()));
            }
            if let Some(bad) = corpus.iter().find(|s| s.len() != student.seq_len()) {
                return Err(Error::Corpus(format!(
                    "corpus sequence of length {} for L = {}",
                    bad.len(),
                    student.seq_len()
                )));
            }
        }
    }
    Ok(())
}

fn epoch_data(data: TrainData<'_>, config: &TrainConfig, epoch: usize) -> Result<Vec<Vec<Token>>> {
    match data {
        TrainData::Oracle(oracle) => sample_many(
            oracle,
            config.sequences_per_epoch,
            config.seed,
            &format!("train-epoch-{epoch}"),
        ),
        TrainData::Corpus(corpus) => Ok(corpus.to_vec()),
    }
}

/// `n` independent sequences; sequence `i` uses stream `(seed, label, i)`.
pub fn sample_many<M: SequenceModel + ?Sized>(model: &M, n: usize, seed: u64, label: &str) -> Result<Vec<Vec<Token>>> {
    (0..n)
        .into_par_iter()
        .map(|i| model.sample_continuation(&[], &mut stream(seed, label, i as u64)))
        .collect()
}

/// `−ln P(seq)` in nats.
pub fn sequence_nll<M: SequenceModel + ?Sized>(model: &M, seq: &[Token]) -> Result<f64> {
    if seq.len() != model.seq_len() {
        return Err(Error::Corpus(format!(
            "sequence of length {} for L = {}",
            seq.len(),
            model.seq_len()
        )));
    }
    let conds = model.prefix_conditionals(seq)?;
    let mut total = 0.0;
    for (c, &t) in conds.iter().zip(seq) {
        let p = c.prob(t);
        if p <= 0.0 {
            return Err(Error::ZeroProbability);
        }
        total -= p.ln();
    }
    Ok(total)
}

/// `exp` of the mean per-token NLL. A zero-probability token makes the
/// perplexity infinite, reported as [`Error::ZeroProbability`].
pub fn perplexity<M: SequenceModel + ?Sized>(model: &M, data: &[Vec<Token>]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("perplexity needs at least one sequence".into()));
    }
    let nlls: Vec<f64> = data.par_iter().map(|s| sequence_nll(model, s)).collect::<Result<_>>()?;
    let total: f64 = nlls.iter().sum();
    Ok((total / (data.len() * model.seq_len()) as f64).exp())
}

/// Perplexity under an exactly weighted set of sequences, such as the output
/// of [`crate::seq::enumerate_distribution`].
pub fn weighted_perplexity<M: SequenceModel + ?Sized>(model: &M, weighted: &[(Vec<Token>, f64)]) -> Result<f64> {
    let mut total = 0.0;
    let mut mass = 0.0;
    for (seq, w) in weighted {
        total += w * sequence_nll(model, seq)?;
        mass += w;
    }
    if !(mass > 0.0) {
        return Err(Error::Empty("no probability mass".into()));
    }
    Ok((total / (mass * model.seq_len() as f64)).exp())
}
