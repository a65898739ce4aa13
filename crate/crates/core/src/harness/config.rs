//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dist::{Metric, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{Estimation, MeasureKind, ReferenceMode};
use crate::seq::{CellKind, Fixture, Init, ENUMERATION_CAP};
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub base_seed: u64,
    pub output_dir: PathBuf,
    /// Required for random oracles; otherwise taken from the oracle.
    #[serde(default)]
    pub vocab: Option<VocabSpec>,
    /// `L`. Required for random oracles; otherwise taken from the oracle.
    #[serde(default, rename = "L")]
    pub seq_len: Option<usize>,
    pub oracle: OracleSpec,
    pub student: StudentSpec,
    /// Used when the student is trained.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub measure: MeasureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VocabSpec {
    /// Tokens `w0 .. w{size-1}`.
    Synthetic {
        size: usize,
    },
    Tokens {
        tokens: Vec<String>,
    },
    /// One token per line.
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    /// The data side of a builtin fixture.
    Fixture { name: Fixture },
    /// A saved model file.
    ModelFile { path: PathBuf },
    RandomRecurrent {
        #[serde(default)]
        seed: Option<u64>,
        hidden_dim: usize,
        #[serde(default)]
        embed_dim: Option<usize>,
        #[serde(default = "default_cell")]
        cell: CellKind,
        #[serde(default = "default_oracle_init")]
        init: Init,
    },
    RandomTabular {
        #[serde(default)]
        seed: Option<u64>,
        /// Markov order; full history when absent.
        #[serde(default)]
        order: Option<usize>,
        alpha: f64,
    },
    /// Real data: EB-M only.
    Corpus {
        path: PathBuf,
        vocab_path: PathBuf,
        #[serde(default = "default_unk")]
        unk: String,
        /// Training text; defaults to `path`.
        #[serde(default)]
        train_path: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StudentSpec {
    /// The model side of a builtin fixture.
    Fixture { name: Fixture },
    /// A saved model file, used as is.
    ModelFile { path: PathBuf },
    /// A fresh recurrent model trained with `train`.
    Recurrent {
        #[serde(default)]
        seed: Option<u64>,
        hidden_dim: usize,
        #[serde(default)]
        embed_dim: Option<usize>,
        #[serde(default = "default_cell")]
        cell: CellKind,
        #[serde(default)]
        init: Init,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureSpec {
    pub kinds: Vec<MeasureKind>,
    pub metrics: Vec<Metric>,
    pub l_min: usize,
    /// Inclusive; `L - 1` when absent.
    pub l_max: Option<usize>,
    /// Include an exact-enumeration curve.
    pub exact: bool,
    /// Monte-Carlo sample counts, one curve set each.
    pub sample_counts: Vec<usize>,
    pub corrupt_rates: Vec<f64>,
    pub reference: ReferenceMode,
    pub enumeration_cap: usize,
}

impl Default for MeasureSpec {
    fn default() -> Self {
        MeasureSpec {
            kinds: vec![MeasureKind::EbC],
            metrics: vec![Metric::Tv, Metric::Js, Metric::Gd],
            l_min: 1,
            l_max: None,
            exact: false,
            sample_counts: vec![100_000],
            corrupt_rates: vec![0.0],
            reference: ReferenceMode::Auto,
            enumeration_cap: ENUMERATION_CAP,
        }
    }
}

impl MeasureSpec {
    pub fn estimations(&self, seed: u64) -> Vec<Estimation> {
        let exact = self.exact.then_some(Estimation::Exact {
            cap: self.enumeration_cap,
        });
        exact
            .into_iter()
            .chain(self.sample_counts.iter().map(|&n| Estimation::MonteCarlo { n, seed }))
            .collect()
    }
}

fn default_cell() -> CellKind {
    CellKind::Lstm
}

// Random-LSTM oracles in the text-GAN literature draw weights from N(0, 1).
fn default_oracle_init() -> Init {
    Init::Normal { std: 1.0 }
}

fn default_unk() -> String {
    "<unk>".into()
}

/// A parsed config plus the directory relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let loaded = LoadedConfig {
            config,
            base_dir: base_dir.into(),
        };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let dir = std::path::absolute(&dir).map_err(|e| Error::io(&dir, e))?;
        Self::from_json(&text, dir)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    /// SHA-256 of the config's canonical JSON form. The output directory is
    /// left out so a replay elsewhere hashes the same.
    pub fn hash(&self) -> String {
        let mut config = self.config.clone();
        config.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&config).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        let bad = |m: String| Err(Error::Config(m));
        if c.config_version != CONFIG_VERSION {
            return bad(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                c.config_version
            ));
        }
        let random_oracle = matches!(
            c.oracle,
            OracleSpec::RandomRecurrent { .. } | OracleSpec::RandomTabular { .. }
        );
        if random_oracle && (c.vocab.is_none() || c.seq_len.is_none()) {
            return bad("random oracles need both \"vocab\" and \"L\"".into());
        }
        if matches!(c.oracle, OracleSpec::Corpus { .. }) && c.seq_len.is_none() {
            return bad("corpus oracles need \"L\"".into());
        }
        if let StudentSpec::Recurrent { .. } = c.student {
            match &c.train {
                None => return bad("a recurrent student needs a \"train\" section".into()),
                Some(t) => t.validate()?,
            }
        }
        let m = &c.measure;
        if m.metrics.is_empty() || m.corrupt_rates.is_empty() {
            return bad("measure needs at least one metric and one corrupt rate".into());
        }
        if !m.exact && m.sample_counts.is_empty() {
            return bad("measure needs \"exact\" or at least one sample count".into());
        }
        if m.sample_counts.contains(&0) {
            return bad("sample counts must be positive".into());
        }
        if let Some(r) = m.corrupt_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return bad(format!("corrupt rate {r} outside [0, 1]"));
        }
        if matches!(c.oracle, OracleSpec::Corpus { .. }) && m.kinds.contains(&MeasureKind::EbC) {
            return Err(Error::CorpusNotQueryable);
        }
        for p in self.input_paths() {
            if !p.exists() {
                return bad(format!("referenced file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    /// Every file the config reads.
    pub fn input_paths(&self) -> Vec<PathBuf> {
        let c = &self.config;
        let mut out = Vec::new();
        if let Some(VocabSpec::File { path }) = &c.vocab {
            out.push(path.clone());
        }
        match &c.oracle {
            OracleSpec::ModelFile { path } => out.push(path.clone()),
            OracleSpec::Corpus {
                path,
                vocab_path,
                train_path,
                ..
            } => {
                out.push(path.clone());
                out.push(vocab_path.clone());
                out.extend(train_path.clone());
            }
            _ => {}
        }
        if let StudentSpec::ModelFile { path } = &c.student {
            out.push(path.clone());
        }
        out.into_iter().map(|p| self.resolve(&p)).collect()
    }
}

impl VocabSpec {
    pub fn build(&self, loaded: &LoadedConfig) -> Result<Vocab> {
        match self {
            VocabSpec::Synthetic { size } => Vocab::synthetic(*size),
            VocabSpec::Tokens { tokens } => Vocab::new(tokens.clone()),
            VocabSpec::File { path } => read_vocab_file(&loaded.resolve(path)),
        }
    }
}

/// One token per line; blank lines are skipped.
pub fn read_vocab_file(path: &Path) -> Result<Vocab> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocab::new(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
    )
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
