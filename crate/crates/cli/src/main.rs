use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedafd_core::config::ExperimentConfig;
use fedafd_core::experiment::{self, run_experiment, Summary};

/// Federated averaging simulator with adaptive federated dropout.
#[derive(Parser, Debug)]
#[command(name = "fedafd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment over all configured seeds.
    Run {
        #[command(flatten)]
        opts: RunOpts,
        /// Summary of a baseline run to compute the speedup ratio against.
        #[arg(long)]
        baseline_summary: Option<PathBuf>,
    },
    /// Run a baseline and a variant config and report the variant's speedup.
    Compare {
        /// Config of the baseline run.
        #[arg(long)]
        baseline: PathBuf,
        /// Config of the variant run; flags below apply to both.
        #[arg(long)]
        variant: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Generate a synthetic dataset and write it in the binary dataset format.
    GenData {
        #[command(flatten)]
        opts: RunOpts,
        /// Destination file.
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunOpts {
    /// Config file, JSON or `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// none, fd, afd_multi or afd_single.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    fdr: Option<String>,
    /// Fraction of clients selected per round.
    #[arg(long)]
    fraction: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    /// Seed(s); repeat or separate with commas.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Any other config field, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let named = [
            ("mode", &self.mode),
            ("fdr", &self.fdr),
            ("client_fraction", &self.fraction),
            ("rounds", &self.rounds),
            ("out", &self.out),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if !self.seed.is_empty() {
            cfg.seeds = self.seed.clone();
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got {kv:?}");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

fn load(path: Option<&PathBuf>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    for w in cfg.validate()? {
        log::warn!("{w}");
    }
    Ok(cfg)
}

fn print_summary(s: &Summary) {
    let std = s.final_accuracy_std.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
    let conv = s.convergence_minutes.map_or("not reached".to_string(), |m| format!("{m:.3} min"));
    println!(
        "{:<12} final accuracy {:.2}% (std {std}, {} seeds)  convergence {conv}  down {:.0} B  up {:.0} B",
        s.run_id,
        100.0 * s.final_accuracy_mean,
        s.seeds.len(),
        s.cum_down_bytes_mean,
        s.cum_up_bytes_mean,
    );
    if let Some(b) = &s.baseline_run_id {
        match s.speedup_ratio {
            Some(r) => println!("{:<12} speedup vs {b}: {r:.2}x", ""),
            None => println!("{:<12} speedup vs {b}: n/a", ""),
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FEDAFD_THREADS") {
        let n: usize = v.parse().with_context(|| format!("FEDAFD_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("FEDAFD_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main_inner() -> Result<()> {
    let cli = Cli::parse();
    configure_threads()?;
    match cli.command {
        Command::Run { opts, baseline_summary } => {
            let cfg = load(opts.config.as_ref(), &opts.overrides)?;
            let baseline = baseline_summary.as_deref().map(Summary::read).transpose()?;
            let s = run_experiment(&cfg, baseline.as_ref())?;
            print_summary(&s);
        }
        Command::Compare { baseline, variant, opts } => {
            let b = load(Some(&baseline), &opts)?;
            let v = load(Some(&variant), &opts)?;
            if b.out == v.out && b.run_id() == v.run_id() {
                bail!("baseline and variant share the output directory {:?}; give them distinct run_id values", b.out.join(b.run_id()));
            }
            let bs = run_experiment(&b, None)?;
            let vs = run_experiment(&v, Some(&bs))?;
            print_summary(&bs);
            print_summary(&vs);
        }
        Command::GenData { opts, output } => {
            let cfg = load(opts.config.as_ref(), &opts.overrides)?;
            let seed = cfg.seeds[0];
            let data = experiment::dataset::<f64>(&cfg, seed)?;
            let file = File::create(&output).with_context(|| format!("cannot create {}", output.display()))?;
            let mut w = BufWriter::new(file);
            data.write_to(&mut w)?;
            w.flush()?;
            println!("wrote {} clients to {}", data.num_clients(), output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match main_inner() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
