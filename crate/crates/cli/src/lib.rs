//! Command-line driver for the avseg pipeline.

pub mod config;
pub mod pipeline;
pub mod synth;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use avseg_core::checks;
use avseg_core::io::{DatasetIndex, Split};
use clap::{Args, Parser, Subcommand};

use config::{ConfigError, RunConfig, CONFIG_ENV};
use synth::SynthSpec;

#[derive(Parser, Debug)]
#[command(name = "avseg", version, about = "Retinal vessel segmentation and artery/vein classification")]
struct Cli {
    /// Worker threads for per-image stages (outputs do not depend on it).
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,
    /// Config file (defaults to $AVSEG_CONFIG when set).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.iterations=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset root (overrides `data_root`).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic fundus dataset.
    Synth {
        /// Output root (overrides `data_root`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generator seed (defaults to the config seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 30)]
        train: usize,
        #[arg(long, default_value_t = 10)]
        test: usize,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Write illumination-corrected, Gabor and line-detector previews.
    Prep {
        #[command(flatten)]
        data: DataArg,
        /// Output directory (default `<data>/cache`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the train split; writes checkpoint.ckpt, run.log and config.txt.
    Train {
        #[command(flatten)]
        data: DataArg,
        /// Run directory (overrides `out_root`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict full images with a checkpoint.
    Infer {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score predictions in all three A/V modes.
    Eval {
        #[command(flatten)]
        data: DataArg,
        /// Directory written by `infer`.
        #[arg(long)]
        pred: PathBuf,
        /// Report directory (default: the prediction directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and score the four ablation configurations.
    Ablate {
        #[command(flatten)]
        data: DataArg,
        /// Output directory (overrides `out_root`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient checks.
    Gradcheck {
        /// Number of seeds.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Probed coordinates per tensor in the network check (0 skips it).
        #[arg(long, default_value_t = 2)]
        coords: usize,
    },
}

/// Error tag for the one-line report on stderr.
fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(c) = e.downcast_ref::<avseg_core::Error>() {
        return c.kind();
    }
    if e.downcast_ref::<ConfigError>().is_some() {
        return "config";
    }
    if e.downcast_ref::<GradcheckFailed>().is_some() {
        return "gradcheck";
    }
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<avseg_core::Error>() {
            return c.kind();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "runtime"
}

#[derive(Debug, thiserror::Error)]
#[error("{0} gradient checks exceeded their tolerance")]
struct GradcheckFailed(usize);

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split> {
    match Split::parse(s) {
        Some(x) => Ok(x),
        None => bail!(avseg_core::Error::InvalidParam(format!("unknown split `{s}` (train | test)"))),
    }
}

fn data_root(cfg: &RunConfig, d: &DataArg) -> PathBuf {
    d.data.clone().unwrap_or_else(|| cfg.data_root.clone())
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { out, seed, train, test, size } => {
            let spec = SynthSpec {
                train: *train,
                test: *test,
                height: *size,
                width: *size,
                seed: seed.unwrap_or(cfg.seed),
                ..SynthSpec::default()
            };
            let root = out.clone().unwrap_or_else(|| cfg.data_root.clone());
            let index = synth::synth_dataset(&spec, &root)?;
            println!("synth\t{}\t{} images", root.display(), index.entries.len());
        }
        Command::Prep { data, out } => {
            let root = data_root(&cfg, data);
            let index = DatasetIndex::load(&root)?;
            let out = out.clone().unwrap_or_else(|| root.join("cache"));
            let n = pipeline::prep(&index, &cfg, &out)?;
            println!("prep\t{}\t{n} images", out.display());
        }
        Command::Train { data, out, resume } => {
            let index = DatasetIndex::load(data_root(&cfg, data))?;
            let items = pipeline::prepare_split(&index, Split::Train, &cfg)?;
            let images = pipeline::to_train_images(&items)?;
            let out = out.clone().unwrap_or_else(|| cfg.out_root.clone());
            let s = pipeline::train_run(&cfg, &images, &out, resume.as_deref())?;
            let loss = s.final_loss.map_or("-".to_string(), |l| format!("{l:.6}"));
            println!("train\t{}\titerations {}\tloss {loss}\tconfig {}", s.checkpoint.display(), s.iterations, s.config_hash);
        }
        Command::Infer { data, checkpoint, out, split } => {
            let index = DatasetIndex::load(data_root(&cfg, data))?;
            let items = pipeline::prepare_split(&index, parse_split(split)?, &cfg)?;
            let s = pipeline::infer_run(checkpoint, &cfg, &items, out)?;
            println!("infer\t{}\t{} images\tconfig {}", out.display(), s.images, s.config_hash);
        }
        Command::Eval { data, pred, out, split } => {
            let index = DatasetIndex::load(data_root(&cfg, data))?;
            let items = pipeline::prepare_split(&index, parse_split(split)?, &cfg)?;
            let out = out.as_deref().unwrap_or(pred);
            let s = pipeline::eval_run(&items, pred, cfg.inference.threshold, out)?;
            print!("{}", s.text());
        }
        Command::Ablate { data, out } => {
            let index = DatasetIndex::load(data_root(&cfg, data))?;
            let out = out.clone().unwrap_or_else(|| cfg.out_root.clone());
            let s = pipeline::ablate(&cfg, &index, &out)?;
            print!("{}", s.table);
        }
        Command::Gradcheck { seeds, coords } => gradcheck(*seeds, *coords)?,
    }
    Ok(())
}

fn gradcheck(seeds: u64, coords: usize) -> Result<()> {
    if seeds == 0 {
        bail!(avseg_core::Error::InvalidParam("need at least one seed".into()));
    }
    let seeds: Vec<u64> = (0..seeds).collect();
    let results = checks::suite(&seeds, coords)?;
    println!("check\tmax_rel_error\ttolerance\tprobes\tstatus");
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{}\t{:.3e}\t{:.0e}\t{}\t{status}", r.name, r.max_error, r.tolerance, r.probes);
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        bail!(GradcheckFailed(failed));
    }
    Ok(())
}

/// Runs the CLI on `argv` (program name first) and returns the exit code:
/// 0 on success, 2 on usage errors, 1 on runtime failures. Failures print a
/// single `avseg: error[<kind>]: <message>` line to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads as usize).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("avseg: error[runtime]: thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("avseg: error[{}]: {msg}", error_kind(&e));
            1
        }
    }
}

