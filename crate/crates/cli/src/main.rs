use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ftml_core::experiment::{self, ExperimentConfig, KEYS};
use ftml_core::{Error, GeneratorSpec};

#[derive(Parser)]
#[command(name = "ftml", version, about = "Robust word embeddings via word-level metric learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark.
    Gen {
        /// Generator spec (`key = value` lines); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override a generator key.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Build the synonym dictionary.
    BuildSyn(Common),
    /// Train a classifier and its embedding.
    Train(Common),
    /// Attack a trained checkpoint.
    Attack(Common),
    /// Train and attack over a grid of alpha ratios and betas.
    Sweep(Common),
    /// Distance statistics of a trained embedding.
    Distances(Common),
    /// List configuration keys with their defaults.
    Keys,
}

#[derive(Args)]
struct Common {
    /// Configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    alpha_ratio: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    init_embedding: Option<PathBuf>,
}

fn split_pair(pair: &str) -> Result<(&str, &str), Error> {
    pair.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::InvalidConfig(format!("expected KEY=VALUE, got `{pair}`")))
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let path = |p: &PathBuf| p.to_string_lossy().into_owned();
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("out_dir", self.out_dir.as_ref().map(path)),
            ("mode", self.mode.clone()),
            ("alpha_ratio", self.alpha_ratio.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("attack", self.attack.clone()),
            ("epsilon", self.epsilon.map(|v| v.to_string())),
            ("checkpoint", self.checkpoint.as_ref().map(path)),
            ("init_embedding", self.init_embedding.as_ref().map(path)),
        ];
        for pair in &self.sets {
            let (k, v) = split_pair(pair)?;
            config.set(k, v)?;
        }
        for (k, v) in flags {
            if let Some(v) = v {
                config.set(k, &v)?;
            }
        }
        Ok(config)
    }
}

fn json(value: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { spec, seed, out, sets } => {
            let mut generator = match spec {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
                    GeneratorSpec::parse(&text)?
                }
                None => GeneratorSpec::default(),
            };
            for pair in &sets {
                let (k, v) = split_pair(pair)?;
                generator.set(k, v)?;
            }
            generator.validate()?;
            for entry in experiment::run_gen(&generator, seed, &out)? {
                println!("{}\t{}\t{}", entry.path.display(), entry.bytes, entry.digest);
            }
        }
        Command::BuildSyn(common) => {
            let s = experiment::run_build_syn(&common.resolve()?)?;
            println!("vocabulary {} words, {} with synonyms, mean set size {:.4}", s.vocab_size, s.covered_words, s.mean_set_size);
        }
        Command::Train(common) => {
            let config = common.resolve()?;
            let outcome = experiment::run_train(&config).context("training failed")?;
            for m in &outcome.metrics {
                println!(
                    "epoch {:>3}  ce {:.5}  tr {:.5}  acc {:.4}  syn {:.4}  neg {:.4}  capped {:.4}",
                    m.epoch, m.ce_loss, m.tr_loss, m.clean_accuracy, m.mean_syn_dist, m.mean_neg_dist, m.capped_neg_fraction
                );
            }
            println!("alpha {}  wrote {}", outcome.state.alpha, config.out_dir().display());
        }
        Command::Attack(common) => {
            let report = experiment::run_attack(&common.resolve()?)?;
            println!("{}", json(&report.summary)?);
        }
        Command::Sweep(common) => {
            let config = common.resolve()?;
            let rows = experiment::run_sweep(&config)?;
            println!("alpha_ratio\tbeta\tclean_accuracy\trobust_accuracy\tstatus");
            for row in rows {
                match row.outcome {
                    Ok(s) => println!("{}\t{}\t{:.4}\t{:.4}\tok", row.alpha_ratio, row.beta, s.clean_accuracy, s.robust_accuracy),
                    Err(e) => println!("{}\t{}\t-\t-\tfailed: {e}", row.alpha_ratio, row.beta),
                }
            }
        }
        Command::Distances(common) => {
            let report = experiment::run_distances(&common.resolve()?)?;
            println!("{}", json(&report)?);
        }
        Command::Keys => {
            for (key, default, doc) in KEYS {
                let default = if default.is_empty() { "(unset)" } else { default };
                println!("{key:<20} {default:<20} {doc}");
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_) | Error::Infeasible(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
