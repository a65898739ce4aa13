//! Exposure-bias quantification for autoregressive sequence models.
//!
//! The crate measures how much a model's next-token predictions degrade
//! when it conditions on its own samples instead of data histories. Two
//! measurement pipelines are provided:
//!
//! * **EB-M**: ratio of marginal generation deviations, comparing the
//!   marginal of `W_{l+1}` under model histories against data histories.
//! * **EB-C**: ratio of conditional generation deviations, which needs a
//!   queryable data distribution (a synthetic oracle).
//!
//! Supporting machinery covers categorical divergences ([`dist`]), exact
//! and recurrent sequence models ([`seq`]), MLE / scheduled-sampling
//! training ([`train`]), marginal estimators ([`estimate`]), the metrics
//! and sweeps themselves ([`metrics`]) and the experiment harness
//! ([`harness`]).

pub mod dist;
pub mod error;
pub mod estimate;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod seq;
pub mod train;

pub use dist::{Categorical, Metric, Vocab};
pub use error::{Error, Result};
pub use seq::{SequenceModel, Token};
