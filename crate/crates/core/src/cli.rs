//! `dpd` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 internal invariant
//! violation.

use std::ffi::OsString;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dpd::{write_trace_csv, DpdHyperParams, DEFAULT_GAMMA, DEFAULT_K};
use crate::error::{Error, Result};
use crate::evalharness::{cross_validate, lambda_range, prepare, write_report, Method, PiGrid, ProtocolConfig};
use crate::features::DEFAULT_DIM;
use crate::ingest::{load_dataset, load_trial_csv, DEFAULT_WINDOW_SAMPLES};
use crate::kv::KvFile;
use crate::model::Model;
use crate::neighbors::IndexKind;
use crate::synthgen::{generate, write_dataset, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "dpd", version, about = "Weak-label trial classification with discriminative pattern discovery")]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic dataset.
    Synth(SynthArgs),
    /// Fit a model archive on a labelled dataset.
    Fit(FitArgs),
    /// Classify one trial CSV with a model archive.
    Classify(ClassifyArgs),
    /// Cross-validate methods on a labelled dataset.
    Cv(CvArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator config (`key = value`); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = 0.0)]
    pub pi: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long)]
    pub min_evidence: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    pub pca_dim: usize,
    #[arg(long, default_value_t = DEFAULT_WINDOW_SAMPLES)]
    pub window_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `brute-force` or `ball-tree`.
    #[arg(long, default_value = "ball-tree", value_parser = parse_index)]
    pub index: IndexKind,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Trial CSV to classify.
    #[arg(long)]
    pub data: PathBuf,
    /// Increment trace CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Protocol config (`key = value`); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Repeat or comma-separate; default is every method.
    #[arg(long, value_delimiter = ',')]
    pub method: Vec<Method>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub grid_k: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_gamma: Option<Vec<f64>>,
    /// `auto` or a comma-separated list.
    #[arg(long)]
    pub grid_pi: Option<String>,
    /// `lo:hi:step`.
    #[arg(long, allow_hyphen_values = true)]
    pub grid_lambda: Option<String>,
}

fn parse_index(s: &str) -> std::result::Result<IndexKind, String> {
    match s {
        "brute-force" => Ok(IndexKind::BruteForce),
        "ball-tree" => Ok(IndexKind::BallTree),
        other => Err(format!("unknown index `{other}` (expected brute-force or ball-tree)")),
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Cv(a) => cmd_cv(a),
    })
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_kv(&KvFile::read(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let trials = generate(&cfg)?;
    write_dataset(&trials, &a.out)?;
    println!("wrote {} trials to {}", trials.len(), a.out.display());
    Ok(())
}

pub fn cmd_fit(a: &FitArgs) -> Result<()> {
    let params = DpdHyperParams {
        k: a.k,
        pi: a.pi,
        lambda: a.lambda,
        gamma: a.gamma,
        min_evidence: a.min_evidence,
    };
    let trials = load_dataset(&a.data)?;
    let model = Model::fit(&trials, params, a.window_samples, a.pca_dim, a.seed, a.index)?;
    model.save(&a.model)?;
    println!(
        "fitted {} trials: bag_pos {} bag_neg {}",
        trials.len(),
        model.bag_pos.len(),
        model.bag_neg.len()
    );
    Ok(())
}

pub fn cmd_classify(a: &ClassifyArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let trial = load_trial_csv(&a.data)?;
    let trace = model.classify(&trial)?;
    if let Some(out) = &a.out {
        write_with(out, |w| write_trace_csv([&trace], w))?;
    }
    println!(
        "{} {} score={} evidence={}/{}{}",
        trace.trial_id,
        trace.prediction,
        trace.score,
        trace.evidence_count(),
        trace.windows.len(),
        if trace.no_evidence { " no_evidence" } else { "" }
    );
    Ok(())
}

pub fn protocol_config(a: &CvArgs) -> Result<ProtocolConfig> {
    let mut cfg = match &a.config {
        Some(p) => ProtocolConfig::from_kv(&KvFile::read(p)?)?,
        None => ProtocolConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.folds {
        cfg.folds = v;
    }
    if let Some(v) = a.test_size {
        cfg.test_size = v;
    }
    if let Some(v) = &a.grid_k {
        cfg.k_grid = v.clone();
    }
    if let Some(v) = &a.grid_gamma {
        cfg.gamma_grid = v.clone();
    }
    if let Some(v) = &a.grid_pi {
        cfg.pi_grid = if v == "auto" {
            PiGrid::default()
        } else {
            PiGrid::Explicit(
                v.split(',')
                    .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad pi `{s}`"))))
                    .collect::<Result<_>>()?,
            )
        };
    }
    if let Some(v) = &a.grid_lambda {
        let parts: Vec<f64> = v
            .split(':')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad lambda grid `{v}`"))))
            .collect::<Result<_>>()?;
        let [lo, hi, step] = parts[..] else {
            return Err(Error::Config(format!("lambda grid must be lo:hi:step, got `{v}`")));
        };
        cfg.lambda_grid = lambda_range(lo, hi, step)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_cv(a: &CvArgs) -> Result<()> {
    let cfg = protocol_config(a)?;
    let methods = if a.method.is_empty() {
        Method::ALL.to_vec()
    } else {
        a.method.clone()
    };
    let data = prepare(&load_dataset(&a.data)?, cfg.window_samples)?;
    let report = cross_validate(&data, &cfg, &methods)?;
    write_report(&report, &a.out)?;
    for s in &report.summaries {
        let acc = s.metrics.iter().find(|(n, _)| *n == "accuracy").map(|(_, v)| v);
        match acc.and_then(|v| v.mean.map(|m| (m, v.sd))) {
            Some((m, sd)) => println!("{:<8} accuracy {m:.3} ({})", s.method, sd.map(|x| format!("{x:.3}")).unwrap_or_default()),
            None => println!("{:<8} accuracy n/a", s.method),
        }
    }
    Ok(())
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<std::fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}
