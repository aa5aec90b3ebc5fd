use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scalegp::data::{self, SincSpec};
use scalegp::harness::{self, ExperimentConfig, Snapshot};
use scalegp::GpError;

#[derive(Parser)]
#[command(name = "scalegp", version, about = "Scalable Gaussian process regression benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a config file and write its report.
    Fit {
        #[arg(short, long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(short, long)]
        output_dir: Option<PathBuf>,
    },
    /// Rebuild a model from a snapshot and write predictions.
    Predict {
        #[arg(short, long)]
        snapshot: PathBuf,
        /// Raw inputs with a header row; defaults to the run's test split.
        #[arg(short, long)]
        input: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Repeat a config over its seeds and summarize.
    Bench {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output_dir: Option<PathBuf>,
        /// Comma-separated seeds; overrides `seeds` from the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Write the sinc toy problem as train.csv and test.csv.
    GenSinc {
        #[arg(short, long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 120)]
        n_train: usize,
        #[arg(long, default_value_t = 300)]
        n_test: usize,
        #[arg(long, default_value_t = 0.04)]
        noise_var: f64,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, GpError> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::parse(&text)
}

fn run(cmd: Command) -> Result<bool, GpError> {
    match cmd {
        Command::Fit { config, output_dir } => {
            let mut cfg = load_config(&config)?;
            if output_dir.is_some() {
                cfg.output_dir = output_dir;
            }
            let report = harness::run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Predict { snapshot, input, output } => {
            let snap = Snapshot::load(&snapshot)?;
            harness::predict_from_snapshot(&snap, input.as_deref(), &output)?;
            log::info!("predictions written to {}", output.display());
        }
        Command::Bench {
            config,
            output_dir,
            seeds,
        } => {
            let mut cfg = load_config(&config)?;
            if output_dir.is_some() {
                cfg.output_dir = output_dir;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
                cfg.validate()?;
            }
            let b = harness::run_bench(&cfg)?;
            println!("method   {}", b.method);
            println!("seeds    {:?}", b.seeds);
            println!("smse     {:.4} +- {:.4}", b.smse.mean, b.smse.std);
            println!("msll     {:.4} +- {:.4}", b.msll.mean, b.msll.std);
            println!("train_s  {:.3} +- {:.3}", b.train_time_s.mean, b.train_time_s.std);
            println!("pred_s   {:.3} +- {:.3}", b.predict_time_s.mean, b.predict_time_s.std);
        }
        Command::Gradcheck { points, seed, tol } => {
            if points == 0 {
                return Err(GpError::config("points", "must be at least 1"));
            }
            let rows = harness::gradcheck_suite(points, seed)?;
            let mut ok = true;
            for r in &rows {
                let pass = r.max_rel_error < tol;
                ok &= pass;
                println!(
                    "{:<6} points={} max_rel_error={:.3e} {}",
                    r.objective,
                    r.points,
                    r.max_rel_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            return Ok(ok);
        }
        Command::GenSinc {
            output_dir,
            seed,
            n_train,
            n_test,
            noise_var,
        } => {
            let spec = SincSpec {
                n_train,
                n_test,
                noise_var,
                ..SincSpec::default()
            };
            let s = data::generate_sinc(&spec, seed)?;
            std::fs::create_dir_all(&output_dir)?;
            data::write_csv(output_dir.join("train.csv"), &s.train, "y", &[])?;
            data::write_csv(output_dir.join("test.csv"), &s.test, "y", &[("y_clean", &s.test_clean)])?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors count as configuration errors
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
