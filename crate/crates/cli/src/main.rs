use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use exbias::harness::config::read_vocab_file;
use exbias::harness::corpus::ingest_text;
use exbias::harness::experiment::{csv_name, MANIFEST_FILE};
use exbias::harness::{
    complete, format_completion, replay, run_experiment, LoadedConfig, PrefixSource, RunMode, RunOutcome,
    DEFAULT_PREFIX_LEN,
};
use exbias::metrics::MeasureKind;
use exbias::seq::{load_model_file, SequenceModel};
use exbias::train::{perplexity, sample_many};
use exbias::Error;

/// Exposure-bias measurements for autoregressive sequence models.
#[derive(Parser)]
#[command(name = "exbias", version)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's base seed; also seeds `complete` and `ppl`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the oracle and train the student; writes checkpoints only.
    Train,
    /// Run the EB-M sweep from the config.
    EbM,
    /// Run the EB-C sweep from the config.
    EbC,
    /// Run every measurement the config lists.
    Sweep,
    /// Print prefix -> continuation pairs sampled from a model.
    Complete {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "model")]
        source: PrefixSource,
        #[arg(short, long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_PREFIX_LEN)]
        prefix_len: usize,
        /// Text corpus, needed for `--source corpus`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Vocabulary file for `--corpus`; must match the model's.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value = "<unk>")]
        unk: String,
    },
    /// Perplexity of a model on a corpus or on samples from an oracle.
    Ppl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "oracle")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value = "<unk>")]
        unk: String,
        #[arg(long, required_unless_present = "corpus")]
        oracle: Option<PathBuf>,
        /// Oracle samples to score.
        #[arg(short, long, default_value_t = 10_000)]
        n: usize,
    },
    /// Re-run a recorded experiment and compare every output hash.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::CorpusNotQueryable => 1,
            _ => 2,
        };
        Failure { code, error: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Config(_)) | Some(Error::CorpusNotQueryable) => 1,
            _ => 2,
        };
        Failure { code, error }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        error: anyhow!(msg.into()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Train => {
            let out = run_config(&cli, RunMode::TrainOnly, None)?;
            if let Some(r) = &out.train_report {
                println!(
                    "trained {} epochs; final NLL {:.4}; perplexity {}",
                    r.epoch_nll.len(),
                    r.epoch_nll.last().copied().unwrap_or(f64::NAN),
                    r.final_perplexity.map_or("n/a".into(), |p| format!("{p:.4}"))
                );
            }
            println!("checkpoints in {}", out.output_dir.display());
        }
        Command::EbM => print_run(&run_config(&cli, RunMode::Full, Some(MeasureKind::EbM))?),
        Command::EbC => print_run(&run_config(&cli, RunMode::Full, Some(MeasureKind::EbC))?),
        Command::Sweep => print_run(&run_config(&cli, RunMode::Full, None)?),
        Command::Complete {
            model,
            source,
            n,
            prefix_len,
            corpus,
            vocab,
            unk,
        } => {
            let m = load_model_file(model)?;
            let lines = match corpus {
                Some(path) => Some(load_corpus(&m, path, vocab.as_deref(), unk, m.seq_len())?),
                None => None,
            };
            let rows = complete(&m, *source, lines.as_deref(), *n, cli.seed.unwrap_or(0), *prefix_len)?;
            for row in &rows {
                println!("{}", format_completion(m.vocab(), row));
            }
        }
        Command::Ppl {
            model,
            corpus,
            vocab,
            unk,
            oracle,
            n,
        } => {
            let m = load_model_file(model)?;
            let data = match (corpus, oracle) {
                (Some(path), _) => load_corpus(&m, path, vocab.as_deref(), unk, m.seq_len())?,
                (None, Some(path)) => {
                    let o = load_model_file(path)?;
                    if o.vocab() != m.vocab() || o.seq_len() != m.seq_len() {
                        return Err(usage("model and oracle must share vocabulary and L"));
                    }
                    sample_many(&o, *n, cli.seed.unwrap_or(0), "ppl")?
                }
                (None, None) => return Err(usage("ppl needs --corpus or --oracle")),
            };
            println!("{}", perplexity(&m, &data)?);
        }
        Command::Replay { manifest } => {
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("replay"));
            let report = replay(manifest, &out)?;
            for (name, want, got) in &report.files {
                let status = if got.as_deref() == Some(want.as_str()) {
                    "match"
                } else {
                    "DIFFERS"
                };
                println!("{status}  {name}");
            }
            if !report.all_match() {
                return Err(Failure {
                    code: 2,
                    error: anyhow!(
                        "replay in {} differs from the recorded run",
                        report.output_dir.display()
                    ),
                });
            }
            println!("replay in {} reproduces all outputs", report.output_dir.display());
        }
    }
    Ok(())
}

fn run_config(cli: &Cli, mode: RunMode, only: Option<MeasureKind>) -> Result<RunOutcome, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| usage("this command needs --config"))?;
    // An unreadable config is a config error, not a runtime failure.
    let mut cfg = LoadedConfig::load(path).map_err(|e| Failure {
        code: 1,
        error: anyhow::Error::from(e).context(format!("loading {}", path.display())),
    })?;
    if let Some(seed) = cli.seed {
        cfg.config.base_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.config.output_dir = std::path::absolute(out).context("resolving --out")?;
    }
    if let Some(kind) = only {
        cfg.config.measure.kinds = vec![kind];
    }
    Ok(run_experiment(&cfg, mode)?)
}

fn load_corpus(
    model: &dyn SequenceModel,
    path: &Path,
    vocab: Option<&Path>,
    unk: &str,
    seq_len: usize,
) -> Result<Vec<Vec<usize>>, Failure> {
    if let Some(vocab_path) = vocab {
        if &read_vocab_file(vocab_path)? != model.vocab() {
            return Err(usage("corpus vocabulary differs from the model's"));
        }
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (sequences, stats) = ingest_text(&text, model.vocab(), seq_len, unk)?;
    eprintln!(
        "corpus: {} sequences ({} short lines dropped, {} truncated, {} unk)",
        sequences.len(),
        stats.dropped_short,
        stats.truncated,
        stats.unk_replacements
    );
    Ok(sequences)
}

fn print_run(out: &RunOutcome) {
    for c in &out.curves {
        let n = c.n_samples.map_or("exact".to_string(), |n| n.to_string());
        let avg = c.average_ratio.map_or("undefined".to_string(), |a| format!("{a:.6}"));
        println!(
            "{} {} c={} n={}: average ratio {} ({} points, {} excluded)",
            c.kind.name(),
            c.metric,
            c.corrupt_rate,
            n,
            avg,
            c.averaged_points,
            c.excluded_points
        );
    }
    let written: Vec<&str> = [MeasureKind::EbM, MeasureKind::EbC]
        .into_iter()
        .map(csv_name)
        .filter(|f| out.manifest.outputs.contains_key(*f))
        .collect();
    println!(
        "wrote {} and {} to {}",
        written.join(", "),
        MANIFEST_FILE,
        out.output_dir.display()
    );
}
