//! Hand-built two-token, length-two models with known bias values.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TabularMarkovModel;
use crate::dist::{Categorical, Vocab};
use crate::error::{Error, Result};

const A: usize = 0;
const B: usize = 1;

/// Builtin `(data, model)` pairs.
///
/// * `Example1`: data is `AA`/`BB` with equal mass; the model always starts
///   with `A` and copies the first token. EB-M under `d_tv` at `l = 1` is
///   infinite even though the model's conditionals are perfect.
/// * `Example2`: data is uniform over all four sequences; the model starts
///   with `A` w.p. 0.9, then `P(A|A) = 0.9`, `P(A|B) = 0.5`. EB-C = 1.8.
/// * `Example2Footnote`: as `Example2` but `P(W_1 = A) = 0.1`. EB-C = 0.2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fixture {
    Example1,
    Example2,
    Example2Footnote,
}

impl Fixture {
    pub fn vocab() -> Vocab {
        Vocab::new(vec!["A".into(), "B".into()]).expect("static vocab")
    }

    /// The data distribution `P_D`.
    pub fn data(self) -> TabularMarkovModel {
        match self {
            Fixture::Example1 => build([0.5, 0.5], [1.0, 0.0], [0.0, 1.0]),
            Fixture::Example2 | Fixture::Example2Footnote => build([0.5, 0.5], [0.5, 0.5], [0.5, 0.5]),
        }
    }

    /// The model distribution `P_M`.
    pub fn model(self) -> TabularMarkovModel {
        match self {
            Fixture::Example1 => build([1.0, 0.0], [1.0, 0.0], [0.0, 1.0]),
            Fixture::Example2 => build([0.9, 0.1], [0.9, 0.1], [0.5, 0.5]),
            Fixture::Example2Footnote => build([0.1, 0.9], [0.9, 0.1], [0.5, 0.5]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Fixture::Example1 => "example1",
            Fixture::Example2 => "example2",
            Fixture::Example2Footnote => "example2-footnote",
        }
    }
}

impl fmt::Display for Fixture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fixture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "example1" => Ok(Fixture::Example1),
            "example2" => Ok(Fixture::Example2),
            "example2-footnote" => Ok(Fixture::Example2Footnote),
            other => Err(Error::Config(format!("unknown fixture {other:?}"))),
        }
    }
}

fn build(first: [f64; 2], after_a: [f64; 2], after_b: [f64; 2]) -> TabularMarkovModel {
    let mut rows = BTreeMap::new();
    let row = |p: [f64; 2]| Categorical::new(p.to_vec()).expect("static row");
    rows.insert((0, vec![]), row(first));
    rows.insert((1, vec![A]), row(after_a));
    rows.insert((1, vec![B]), row(after_b));
    TabularMarkovModel::new(Fixture::vocab(), 2, None, rows).expect("static fixture")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq::SequenceModel;

    #[test]
    fn example1_model_copies_first_token() {
        let m = Fixture::Example1.model();
        assert_eq!(m.conditional(&[A]).unwrap().probs(), &[1.0, 0.0]);
        assert_eq!(m.conditional(&[]).unwrap().probs(), &[1.0, 0.0]);
    }

    #[test]
    fn names_round_trip() {
        for f in [Fixture::Example1, Fixture::Example2, Fixture::Example2Footnote] {
            assert_eq!(f.name().parse::<Fixture>().unwrap(), f);
        }
    }
}
