//! End-to-end runs: build the oracle, obtain the student, sweep, and write
//! CSV curves, a summary, checkpoints and a replayable manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, ExperimentConfig, LoadedConfig, OracleSpec, StudentSpec, CONFIG_VERSION};
use super::corpus::{ingest_corpus, IngestStats};
use crate::dist::{Metric, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{
    sweep, write_curves_csv, DataSource, DeviationCurve, Flag, MeasureKind, Ratio, SweepSpec, EXCLUSION_RULE,
};
use crate::rng::{child_seed, stream};
use crate::seq::{
    load_model_file, serialize_model, AnyModel, RecurrentConfig, RecurrentLM, SequenceModel, TabularMarkovModel, Token,
    FORMAT_VERSION,
};
use crate::train::{train, TrainData, TrainReport};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FAILED_MARKER: &str = "FAILED";
pub const ORACLE_FILE: &str = "oracle.json";
pub const STUDENT_FILE: &str = "student.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Oracle, student and sweeps.
    Full,
    /// Oracle and student checkpoints only.
    TrainOnly,
}

pub fn csv_name(kind: MeasureKind) -> &'static str {
    match kind {
        MeasureKind::EbM => "eb_m.csv",
        MeasureKind::EbC => "eb_c.csv",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub base: u64,
    pub oracle: u64,
    pub student: u64,
    pub train: u64,
    pub measure: u64,
}

impl Seeds {
    pub fn derive(base: u64) -> Self {
        Seeds {
            base,
            oracle: child_seed(base, "oracle"),
            student: child_seed(base, "student"),
            train: child_seed(base, "train"),
            measure: child_seed(base, "measure"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub config_version: u32,
    pub model_format_version: u32,
    pub status: String,
    pub error: Option<String>,
    pub mode: RunMode,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Directory relative config paths were resolved against.
    pub base_dir: PathBuf,
    pub seeds: Seeds,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every deterministic output, by file name.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct RowSummary {
    l: usize,
    ratio: Option<Ratio>,
    flags: Vec<Flag>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct CurveSummary {
    kind: MeasureKind,
    metric: Metric,
    corrupt_rate: f64,
    n_samples: Option<usize>,
    average_ratio: Option<f64>,
    averaged_points: usize,
    excluded_points: usize,
    rows: Vec<RowSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Summary {
    config_hash: String,
    exclusion_rule: &'static str,
    averages: Vec<CurveSummary>,
    /// Flag counts per measurement kind over all curves.
    flags: BTreeMap<&'static str, BTreeMap<&'static str, usize>>,
    final_perplexity: Option<f64>,
}

/// What a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
    pub curves: Vec<DeviationCurve>,
    pub train_report: Option<TrainReport>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

struct Writer {
    dir: PathBuf,
    outputs: BTreeMap<String, String>,
}

impl Writer {
    /// Writes a file whose bytes are a function of the config alone.
    fn deterministic(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.plain(name, bytes)?;
        self.outputs.insert(name.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    fn plain(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }
}

enum Data {
    Model(AnyModel),
    Corpus {
        test: Vec<Vec<Token>>,
        train: Vec<Vec<Token>>,
        vocab: Vocab,
    },
}

impl Data {
    fn vocab(&self) -> &Vocab {
        match self {
            Data::Model(m) => m.vocab(),
            Data::Corpus { vocab, .. } => vocab,
        }
    }
}

fn check_shape(what: &str, vocab: &Vocab, seq_len: usize, cfg: &LoadedConfig, expected: Option<&Vocab>) -> Result<()> {
    if let Some(v) = expected {
        if v != vocab {
            return Err(Error::Config(format!(
                "{what} vocabulary differs from the configured one"
            )));
        }
    }
    if let Some(l) = cfg.config.seq_len {
        if l != seq_len {
            return Err(Error::Config(format!("{what} has L = {seq_len}, config says {l}")));
        }
    }
    Ok(())
}

fn build_oracle(cfg: &LoadedConfig, seeds: &Seeds) -> Result<(Data, Option<IngestStats>)> {
    let c = &cfg.config;
    let vocab = c.vocab.as_ref().map(|v| v.build(cfg)).transpose()?;
    let data = match &c.oracle {
        OracleSpec::Fixture { name } => Data::Model(name.data().into()),
        OracleSpec::ModelFile { path } => Data::Model(load_model_file(&cfg.resolve(path))?),
        OracleSpec::RandomRecurrent {
            seed,
            hidden_dim,
            embed_dim,
            cell,
            init,
        } => {
            let rc = RecurrentConfig {
                cell: *cell,
                embed_dim: embed_dim.unwrap_or(*hidden_dim),
                hidden_dim: *hidden_dim,
            };
            let mut rng = stream(seed.unwrap_or(seeds.oracle), "oracle-init", 0);
            Data::Model(RecurrentLM::random(vocab.clone().unwrap(), c.seq_len.unwrap(), rc, *init, &mut rng)?.into())
        }
        OracleSpec::RandomTabular { seed, order, alpha } => {
            let mut rng = stream(seed.unwrap_or(seeds.oracle), "oracle-init", 0);
            Data::Model(
                TabularMarkovModel::random(vocab.clone().unwrap(), c.seq_len.unwrap(), *order, *alpha, &mut rng)?
                    .into(),
            )
        }
        OracleSpec::Corpus {
            path,
            vocab_path,
            unk,
            train_path,
        } => {
            let l = c.seq_len.unwrap();
            let (test, stats) = ingest_corpus(&cfg.resolve(path), &cfg.resolve(vocab_path), l, unk)?;
            let train = match train_path {
                Some(p) => {
                    ingest_corpus(&cfg.resolve(p), &cfg.resolve(vocab_path), l, unk)?
                        .0
                        .sequences
                }
                None => test.sequences.clone(),
            };
            let data = Data::Corpus {
                test: test.sequences,
                train,
                vocab: test.vocab,
            };
            check_shape("corpus", data.vocab(), l, cfg, vocab.as_ref())?;
            return Ok((data, Some(stats)));
        }
    };
    if let Data::Model(m) = &data {
        check_shape("oracle", m.vocab(), m.seq_len(), cfg, vocab.as_ref())?;
    }
    Ok((data, None))
}

fn build_student(cfg: &LoadedConfig, seeds: &Seeds, data: &Data) -> Result<(AnyModel, Option<TrainReport>)> {
    let c = &cfg.config;
    let seq_len = match data {
        Data::Model(m) => m.seq_len(),
        Data::Corpus { .. } => c.seq_len.unwrap(),
    };
    let (student, report) = match &c.student {
        StudentSpec::Fixture { name } => (name.model().into(), None),
        StudentSpec::ModelFile { path } => (load_model_file(&cfg.resolve(path))?, None),
        StudentSpec::Recurrent {
            seed,
            hidden_dim,
            embed_dim,
            cell,
            init,
        } => {
            let rc = RecurrentConfig {
                cell: *cell,
                embed_dim: embed_dim.unwrap_or(*hidden_dim),
                hidden_dim: *hidden_dim,
            };
            let mut rng = stream(seed.unwrap_or(seeds.student), "student-init", 0);
            let mut student = RecurrentLM::random(data.vocab().clone(), seq_len, rc, *init, &mut rng)?;
            let mut tc = c.train.clone().expect("validated");
            tc.seed = seeds.train;
            let source = match data {
                Data::Model(m) => TrainData::Oracle(m),
                Data::Corpus { train, .. } => TrainData::Corpus(train),
            };
            let report = train(&mut student, source, &tc)?;
            (student.into(), Some(report))
        }
    };
    if student.vocab() != data.vocab() || student.seq_len() != seq_len {
        return Err(Error::Config("student and oracle must share vocabulary and L".into()));
    }
    Ok((student, report))
}

fn summarize(config_hash: &str, curves: &[DeviationCurve], report: Option<&TrainReport>) -> Summary {
    let mut flags: BTreeMap<&'static str, BTreeMap<&'static str, usize>> = BTreeMap::new();
    for c in curves {
        let entry = flags.entry(c.kind.name()).or_default();
        for f in c.records.iter().flat_map(|r| &r.flags) {
            *entry.entry(f.name()).or_default() += 1;
        }
    }
    Summary {
        config_hash: config_hash.to_string(),
        exclusion_rule: EXCLUSION_RULE,
        averages: curves
            .iter()
            .map(|c| CurveSummary {
                kind: c.kind,
                metric: c.metric,
                corrupt_rate: c.corrupt_rate,
                n_samples: c.n_samples,
                average_ratio: c.average_ratio,
                averaged_points: c.averaged_points,
                excluded_points: c.excluded_points,
                rows: c
                    .records
                    .iter()
                    .map(|r| RowSummary {
                        l: r.l,
                        ratio: r.ratio,
                        flags: r.flags.clone(),
                    })
                    .collect(),
            })
            .collect(),
        flags,
        final_perplexity: report.and_then(|r| r.final_perplexity),
    }
}

fn new_manifest(cfg: &LoadedConfig, mode: RunMode, seeds: Seeds) -> Result<Manifest> {
    let mut inputs = BTreeMap::new();
    for p in cfg.input_paths() {
        inputs.insert(p.display().to_string(), sha256_file(&p)?);
    }
    Ok(Manifest {
        manifest_version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_version: CONFIG_VERSION,
        model_format_version: FORMAT_VERSION,
        status: "running".into(),
        error: None,
        mode,
        config_hash: cfg.hash(),
        config: cfg.config.clone(),
        base_dir: cfg.base_dir.clone(),
        seeds,
        inputs,
        outputs: BTreeMap::new(),
    })
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = serde_json::to_vec_pretty(manifest)?;
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

/// Runs the configured pipeline. On failure the output directory holds a
/// `FAILED` marker and a manifest with `"status": "failed"`; any files
/// written before the failure are left in place.
pub fn run_experiment(cfg: &LoadedConfig, mode: RunMode) -> Result<RunOutcome> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let marker = dir.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let seeds = Seeds::derive(cfg.config.base_seed);
    let mut manifest = new_manifest(cfg, mode, seeds)?;
    let mut writer = Writer {
        dir: dir.clone(),
        outputs: BTreeMap::new(),
    };
    match run_stages(cfg, mode, &seeds, &mut writer, &manifest.config_hash) {
        Ok((curves, train_report)) => {
            manifest.status = "complete".into();
            manifest.outputs = writer.outputs;
            write_manifest(&dir, &manifest)?;
            Ok(RunOutcome {
                output_dir: dir,
                manifest,
                curves,
                train_report,
            })
        }
        Err(e) => {
            manifest.status = "failed".into();
            manifest.error = Some(e.to_string());
            manifest.outputs = writer.outputs;
            // Best effort: the original error matters more than these writes.
            let _ = fs::write(&marker, format!("{e}\n"));
            let _ = write_manifest(&dir, &manifest);
            Err(e)
        }
    }
}

type StageOutput = (Vec<DeviationCurve>, Option<TrainReport>);

fn run_stages(
    cfg: &LoadedConfig,
    mode: RunMode,
    seeds: &Seeds,
    w: &mut Writer,
    config_hash: &str,
) -> Result<StageOutput> {
    let (data, _) = build_oracle(cfg, seeds)?;
    if let Data::Model(m) = &data {
        w.deterministic(ORACLE_FILE, &serialize_model(m)?)?;
    }
    let (student, report) = build_student(cfg, seeds, &data)?;
    w.deterministic(STUDENT_FILE, &serialize_model(&student)?)?;
    if let Some(r) = &report {
        // Carries wall time, so it is not part of the replay check.
        w.plain(TRAIN_REPORT_FILE, &serde_json::to_vec_pretty(r)?)?;
    }
    if mode == RunMode::TrainOnly {
        return Ok((Vec::new(), report));
    }

    let m = &cfg.config.measure;
    let l_max = m.l_max.unwrap_or(student.seq_len() - 1);
    let source = match &data {
        Data::Model(o) => DataSource::Oracle(o),
        Data::Corpus { test, vocab, .. } => DataSource::Corpus(test, vocab.size()),
    };
    let mut all = Vec::new();
    for &kind in &m.kinds {
        let spec = SweepSpec {
            kind,
            l_min: m.l_min,
            l_max,
            metrics: m.metrics.clone(),
            corrupt_rates: m.corrupt_rates.clone(),
            estimations: m.estimations(seeds.measure),
            reference: m.reference,
        };
        let curves = sweep(&student, source, &spec)?;
        let mut buf = Vec::new();
        write_curves_csv(&curves, &mut buf)?;
        w.deterministic(csv_name(kind), &buf)?;
        all.extend(curves);
    }
    let summary = summarize(config_hash, &all, report.as_ref());
    w.deterministic(SUMMARY_FILE, &serde_json::to_vec_pretty(&summary)?)?;
    Ok((all, report))
}

/// Per-file comparison of a replay against the recorded hashes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub output_dir: PathBuf,
    pub files: Vec<(String, String, Option<String>)>,
}

impl ReplayReport {
    pub fn all_match(&self) -> bool {
        self.files
            .iter()
            .all(|(_, want, got)| got.as_deref() == Some(want.as_str()))
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))
}

/// Re-runs a manifest's config into `output_dir` and compares every
/// recorded output hash. Input files must still hash to the recorded values.
pub fn replay(manifest_path: &Path, output_dir: &Path) -> Result<ReplayReport> {
    let manifest = read_manifest(manifest_path)?;
    if manifest.status != "complete" {
        return Err(Error::Config(format!("manifest records a {} run", manifest.status)));
    }
    for (path, want) in &manifest.inputs {
        let got = sha256_file(Path::new(path))?;
        if &got != want {
            return Err(Error::Config(format!("input {path} changed since the recorded run")));
        }
    }
    let mut config = manifest.config.clone();
    config.output_dir = std::path::absolute(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let cfg = LoadedConfig {
        config,
        base_dir: manifest.base_dir.clone(),
    };
    if cfg.hash() != manifest.config_hash {
        return Err(Error::Config("manifest config does not match its hash".into()));
    }
    let outcome = run_experiment(&cfg, manifest.mode)?;
    let files = manifest
        .outputs
        .iter()
        .map(|(name, want)| (name.clone(), want.clone(), outcome.manifest.outputs.get(name).cloned()))
        .collect();
    Ok(ReplayReport {
        output_dir: outcome.output_dir,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_config(dir: &Path, name: &str, kinds: &str) -> LoadedConfig {
        let text = format!(
            r#"{{"config_version": 1, "base_seed": 1, "output_dir": "out",
                "oracle": {{"kind": "fixture", "name": "{name}"}},
                "student": {{"kind": "fixture", "name": "{name}"}},
                "measure": {{"kinds": {kinds}, "metrics": ["tv"], "exact": true, "sample_counts": [500]}}}}"#
        );
        LoadedConfig::from_json(&text, dir).unwrap()
    }

    #[test]
    fn fixture_run_reports_example2_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&fixture_config(dir.path(), "example2", r#"["eb-c"]"#), RunMode::Full).unwrap();
        let exact = out.curves.iter().find(|c| c.n_samples.is_none()).unwrap();
        assert!((exact.record(1).unwrap().ratio.unwrap().value() - 1.8).abs() < 1e-12);
        let summary: serde_json::Value =
            serde_json::from_slice(&fs::read(out.output_dir.join(SUMMARY_FILE)).unwrap()).unwrap();
        let avg = summary["averages"][0]["average_ratio"].as_f64().unwrap();
        assert!((avg - 1.8).abs() < 1e-12);
        for f in ["eb_c.csv", ORACLE_FILE, STUDENT_FILE, SUMMARY_FILE, MANIFEST_FILE] {
            assert!(out.output_dir.join(f).exists(), "{f}");
        }
        assert_eq!(
            read_manifest(&out.output_dir.join(MANIFEST_FILE)).unwrap().status,
            "complete"
        );
    }

    #[test]
    fn replay_matches() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(
            &fixture_config(dir.path(), "example1", r#"["eb-m", "eb-c"]"#),
            RunMode::Full,
        )
        .unwrap();
        let rep = replay(&out.output_dir.join(MANIFEST_FILE), &dir.path().join("again")).unwrap();
        assert!(rep.all_match(), "{rep:?}");
        assert!(rep.files.iter().any(|(n, _, _)| n == "eb_m.csv"));
        assert_eq!(
            fs::read(out.output_dir.join("eb_c.csv")).unwrap(),
            fs::read(dir.path().join("again/eb_c.csv")).unwrap()
        );
    }

    #[test]
    fn failure_leaves_marker() {
        let dir = tempfile::tempdir().unwrap();
        // Corruption at L = 2 with exact enumeration is fine; an l range past
        // L - 1 is not.
        let mut cfg = fixture_config(dir.path(), "example2", r#"["eb-c"]"#);
        cfg.config.measure.l_max = Some(5);
        assert!(run_experiment(&cfg, RunMode::Full).is_err());
        let out = dir.path().join("out");
        assert!(out.join(FAILED_MARKER).exists());
        let m = read_manifest(&out.join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.status, "failed");
        assert!(m.error.is_some());
        assert!(replay(&out.join(MANIFEST_FILE), &dir.path().join("r")).is_err());
        // A later successful run clears the marker.
        cfg.config.measure.l_max = None;
        run_experiment(&cfg, RunMode::Full).unwrap();
        assert!(!out.join(FAILED_MARKER).exists());
    }

    #[test]
    fn train_only_writes_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"config_version": 1, "base_seed": 5, "output_dir": "out",
            "vocab": {"kind": "synthetic", "size": 3}, "L": 4,
            "oracle": {"kind": "random_tabular", "alpha": 0.5},
            "student": {"kind": "recurrent", "hidden_dim": 4, "cell": "rnn"},
            "train": {"epochs": 2, "sequences_per_epoch": 64, "batch_size": 16, "eval_sequences": 32}}"#;
        let cfg = LoadedConfig::from_json(text, dir.path()).unwrap();
        let out = run_experiment(&cfg, RunMode::TrainOnly).unwrap();
        assert!(out.curves.is_empty());
        assert_eq!(out.train_report.unwrap().epoch_nll.len(), 2);
        assert!(out.output_dir.join(STUDENT_FILE).exists());
        assert!(out.output_dir.join(TRAIN_REPORT_FILE).exists());
        assert!(!out.output_dir.join("eb_c.csv").exists());
        let student = load_model_file(&out.output_dir.join(STUDENT_FILE)).unwrap();
        assert_eq!(student.kind(), "recurrent");
    }
}
