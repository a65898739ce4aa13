//! Versioned JSON model files.
//!
//! ```json
//! {"format_version": 1, "model_kind": "tabular", "vocab": {"tokens": [...]},
//!  "L": 20, "payload": {...}}
//! ```
//!
//! Tabular payloads list every row explicitly; recurrent payloads list each
//! tensor's shape and row-major values. Floats are written in shortest
//! round-trip form, so stored parameters reload bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::recurrent::{Params, Tensor, PARAM_NAMES};
use super::tabular::TabularRow;
use super::{PositionalUnigramModel, RecurrentConfig, RecurrentLM, SequenceModel, TabularMarkovModel, Token};
use crate::dist::{Categorical, Vocab};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const FORMAT_VERSION: u32 = 1;

/// Any model that can be written to a model file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Tabular(TabularMarkovModel),
    Unigram(PositionalUnigramModel),
    Recurrent(RecurrentLM),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Tabular(_) => "tabular",
            AnyModel::Unigram(_) => "unigram",
            AnyModel::Recurrent(_) => "recurrent",
        }
    }

    fn inner(&self) -> &dyn SequenceModel {
        match self {
            AnyModel::Tabular(m) => m,
            AnyModel::Unigram(m) => m,
            AnyModel::Recurrent(m) => m,
        }
    }
}

impl SequenceModel for AnyModel {
    fn vocab(&self) -> &Vocab {
        self.inner().vocab()
    }
    fn seq_len(&self) -> usize {
        self.inner().seq_len()
    }
    fn conditional(&self, history: &[Token]) -> Result<Categorical> {
        self.inner().conditional(history)
    }
    fn prefix_conditionals(&self, tokens: &[Token]) -> Result<Vec<Categorical>> {
        self.inner().prefix_conditionals(tokens)
    }
    fn sample_continuation(&self, prefix: &[Token], rng: &mut StreamRng) -> Result<Vec<Token>> {
        self.inner().sample_continuation(prefix, rng)
    }
}

impl From<TabularMarkovModel> for AnyModel {
    fn from(m: TabularMarkovModel) -> Self {
        AnyModel::Tabular(m)
    }
}

impl From<PositionalUnigramModel> for AnyModel {
    fn from(m: PositionalUnigramModel) -> Self {
        AnyModel::Unigram(m)
    }
}

impl From<RecurrentLM> for AnyModel {
    fn from(m: RecurrentLM) -> Self {
        AnyModel::Recurrent(m)
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    model_kind: String,
    vocab: Vocab,
    #[serde(rename = "L")]
    seq_len: usize,
    payload: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TabularPayload {
    order: Option<usize>,
    rows: Vec<TabularRow>,
}

#[derive(Serialize, Deserialize)]
struct UnigramPayload {
    rows: Vec<Categorical>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RecurrentPayload {
    config: RecurrentConfig,
    tensors: Vec<NamedTensor>,
}

pub fn serialize_model(model: &AnyModel) -> Result<Vec<u8>> {
    let payload = match model {
        AnyModel::Tabular(m) => serde_json::to_value(TabularPayload {
            order: m.order(),
            rows: m.to_rows(),
        })?,
        AnyModel::Unigram(m) => serde_json::to_value(UnigramPayload {
            rows: m.rows().to_vec(),
        })?,
        AnyModel::Recurrent(m) => serde_json::to_value(RecurrentPayload {
            config: *m.config(),
            tensors: m
                .params()
                .tensors()
                .iter()
                .zip(PARAM_NAMES)
                .map(|(t, name)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape.clone(),
                    values: t.data.clone(),
                })
                .collect(),
        })?,
    };
    let envelope = Envelope {
        format_version: FORMAT_VERSION,
        model_kind: model.kind().to_string(),
        vocab: model.vocab().clone(),
        seq_len: model.seq_len(),
        payload,
    };
    Ok(serde_json::to_vec(&envelope)?)
}

fn corrupt(e: impl std::fmt::Display) -> Error {
    Error::CorruptPayload(e.to_string())
}

pub fn load_model(bytes: &[u8]) -> Result<AnyModel> {
    let raw: serde_json::Value = serde_json::from_slice(bytes).map_err(corrupt)?;
    // Check the version before the rest of the envelope so a future format
    // reports a version error rather than a parse error.
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("missing format_version"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let env: Envelope = serde_json::from_value(raw).map_err(corrupt)?;
    let model = match env.model_kind.as_str() {
        "tabular" => {
            let p: TabularPayload = serde_json::from_value(env.payload).map_err(corrupt)?;
            AnyModel::Tabular(TabularMarkovModel::from_rows(env.vocab, env.seq_len, p.order, p.rows).map_err(corrupt)?)
        }
        "unigram" => {
            let p: UnigramPayload = serde_json::from_value(env.payload).map_err(corrupt)?;
            if p.rows.len() != env.seq_len {
                return Err(corrupt(format!(
                    "{} unigram rows for L = {}",
                    p.rows.len(),
                    env.seq_len
                )));
            }
            AnyModel::Unigram(PositionalUnigramModel::new(env.vocab, p.rows).map_err(corrupt)?)
        }
        "recurrent" => {
            let p: RecurrentPayload = serde_json::from_value(env.payload).map_err(corrupt)?;
            let mut params = Params::zeros(&p.config, env.vocab.size());
            if p.tensors.len() != PARAM_NAMES.len() {
                return Err(corrupt(format!("{} tensors, expected 8", p.tensors.len())));
            }
            for ((slot, name), stored) in params.tensors_mut().into_iter().zip(PARAM_NAMES).zip(p.tensors) {
                if stored.name != name {
                    return Err(corrupt(format!("tensor {} where {name} was expected", stored.name)));
                }
                let numel: usize = stored.shape.iter().product();
                if stored.shape != slot.shape || stored.values.len() != numel {
                    return Err(Error::ShapeMismatch {
                        name: name.into(),
                        detail: format!(
                            "stored shape {:?} with {} values, model expects {:?}",
                            stored.shape,
                            stored.values.len(),
                            slot.shape
                        ),
                    });
                }
                *slot = Tensor {
                    shape: stored.shape,
                    data: stored.values,
                };
            }
            AnyModel::Recurrent(RecurrentLM::new(env.vocab, env.seq_len, p.config, params)?)
        }
        other => return Err(corrupt(format!("unknown model kind {other:?}"))),
    };
    Ok(model)
}

pub fn save_model_file(model: &AnyModel, path: &Path) -> Result<()> {
    let bytes = serialize_model(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model_file(path: &Path) -> Result<AnyModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_model(&bytes)
}
