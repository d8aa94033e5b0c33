use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lira::config::ExperimentConfig;
use lira::envs::NoiseKind;
use lira::harness::{eval_checkpoint, train};
use lira::LiraError;

/// Light-robust adversarial world-model learning.
#[derive(Parser, Debug)]
#[command(name = "lira", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train world models with the configured mode.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train this seed only, instead of every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the config's or $LIRA_OUTPUT_ROOT/<mode>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under a test disturbance.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "nominal")]
        disturbance: NoiseKind,
        #[arg(long, default_value_t = 30)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-trial CSV; defaults to eval_<disturbance>.csv next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<LiraError> for Failure {
    fn from(e: LiraError) -> Self {
        match e {
            LiraError::Config { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config).map_err(|e| match e {
                LiraError::Io(io) => Failure::Usage(format!("cannot read {}: {io}", config.display())),
                other => other.into(),
            })?;
            let root = out.unwrap_or_else(|| cfg.output_dir());
            let runs: Vec<(u64, PathBuf)> = match seed {
                Some(s) => vec![(s, root)],
                None => cfg.run.seeds.iter().map(|&s| (s, root.join(format!("seed_{s}")))).collect(),
            };
            for (s, dir) in runs {
                let summary = train(&cfg, s, &dir)?;
                let last = summary.rows.last();
                println!(
                    "seed {s}: {} episodes, final return {:.4}, checkpoint {}",
                    summary.rows.len(),
                    last.map_or(f64::NAN, |r| r.ret),
                    summary.final_checkpoint.display()
                );
            }
        }
        Command::Eval { model, disturbance, trials, seed, out } => {
            if trials == 0 {
                return Err(Failure::Usage("--trials must be positive".into()));
            }
            let out = out.unwrap_or_else(|| {
                model.parent().unwrap_or(std::path::Path::new(".")).join(format!("eval_{}.csv", disturbance.name()))
            });
            let report = eval_checkpoint(&model, disturbance, trials, seed, Some(&out)).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("disturbance {} trials {} iqm {:.6}", disturbance.name(), trials, report.iqm);
            println!("per-trial returns: {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
