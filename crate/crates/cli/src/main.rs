mod serve;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ocats::experiment::{self, ExperimentConfig, Summary};
use ocats::students::StudentKind;
use ocats::synthetic::{self, SyntheticSpec};

#[derive(Parser)]
#[command(
    name = "ocats",
    version,
    about = "Cost-aware teacher-student routing: tune, simulate, serve"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the few-shot train/dev split and write its id lists.
    Split(Common),
    /// Tune gate thresholds per lambda on the dev stream.
    Tune(Common),
    /// Run shuffled test streams per lambda and write traces and summaries.
    Simulate(Common),
    /// Recompute summary and trajectories from the trace files of a run.
    Report {
        /// Output directory of a previous simulate run.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve `POST /classify` and `GET /stats` over HTTP.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Write a Gaussian-cluster dataset with embeddings and a starter config.
    Synth {
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 40)]
        train_per_class: usize,
        #[arg(long, default_value_t = 2000)]
        test_size: usize,
        #[arg(long, default_value_t = 2.5)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Config file plus flags overriding its fields.
#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    n_shuffles: Option<usize>,
    #[arg(long)]
    stream_seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long, value_parser = parse_student)]
    student: Option<StudentKind>,
    #[arg(long)]
    n_trials: Option<usize>,
    #[arg(long)]
    tuning_dir: Option<PathBuf>,
    #[arg(long)]
    max_test: Option<usize>,
    #[arg(long)]
    teacher_accuracy: Option<f64>,
    /// Permit calls to the paid live teacher.
    #[arg(long)]
    allow_paid: bool,
}

fn parse_student(s: &str) -> Result<StudentKind, String> {
    match s {
        "knn" => Ok(StudentKind::Knn),
        "mlp" => Ok(StudentKind::Mlp),
        other => Err(format!("unknown student `{other}` (expected knn or mlp)")),
    }
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = ExperimentConfig::load(&self.config)?;
        let cwd = std::env::current_dir().context("reading the working directory")?;
        let abs = |p: &Path| if p.is_relative() { cwd.join(p) } else { p.to_path_buf() };
        if let Some(v) = &self.output_dir {
            c.output_dir = abs(v);
        }
        if let Some(v) = &self.lambdas {
            c.lambdas = v.clone();
        }
        if let Some(v) = self.n_shuffles {
            c.n_shuffles = v;
        }
        if let Some(v) = self.stream_seed {
            c.stream_seed = v;
        }
        if let Some(v) = self.split_seed {
            c.split.seed = v;
        }
        if let Some(v) = self.student {
            c.router.student = v;
        }
        if let Some(v) = self.n_trials {
            c.tuning.tpe.n_trials = v;
        }
        if let Some(v) = &self.tuning_dir {
            c.tuning_dir = Some(abs(v));
        }
        if let Some(v) = self.max_test {
            c.max_test = Some(v);
        }
        if let Some(v) = self.teacher_accuracy {
            c.teacher.accuracy = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_summary(summary: &Summary) {
    println!("lambda\tt_c\tt_h\tcalls\taccuracy\tphi_hat\talways_teacher_phi_hat");
    for l in &summary.lambdas {
        let baseline = l
            .always_teacher
            .map(|b| format!("{:.4}", b.phi_hat.mean))
            .unwrap_or_else(|| "-".into());
        println!(
            "{}\t{:.4}\t{:.4}\t{:.1}±{:.1}\t{:.4}±{:.4}\t{:.4}±{:.4}\t{}",
            l.lambda,
            l.thresholds.t_c,
            l.thresholds.t_h,
            l.calls.mean,
            l.calls.std,
            l.accuracy.mean,
            l.accuracy.std,
            l.phi_hat.mean,
            l.phi_hat.std,
            baseline
        );
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Split(common) => {
            let config = common.load()?;
            let r = experiment::run_split(&config)?;
            println!(
                "train {} ids, dev {} ids, fingerprint {}",
                r.train_ids.len(),
                r.dev_ids.len(),
                r.fingerprint
            );
        }
        Command::Tune(common) => {
            let config = common.load()?;
            for r in experiment::run_tune(&config, common.allow_paid)? {
                println!(
                    "lambda {}: t_c={:.4} t_h={:.4} objective={:.4} ({} evaluations)",
                    r.lambda,
                    r.best.thresholds.t_c,
                    r.best.thresholds.t_h,
                    r.best.objective,
                    r.observations.len()
                );
            }
        }
        Command::Simulate(common) => {
            let config = common.load()?;
            let outcome = experiment::run_simulate(&config, common.allow_paid)?;
            print_summary(&outcome.summary);
            if let Some(e) = outcome.error {
                bail!("{e} (partial traces kept in {})", config.output_dir.display());
            }
        }
        Command::Report { output_dir, config } => {
            let dir = match (output_dir, config) {
                (Some(d), _) => d,
                (None, Some(c)) => ExperimentConfig::load(&c)?.output_dir,
                (None, None) => bail!(ocats::Error::Config("pass --output-dir or --config".into())),
            };
            print_summary(&experiment::report(&dir)?);
        }
        Command::Serve { common, addr, lambda } => {
            let mut config = common.load()?;
            if let Some(a) = addr {
                config.serve.addr = a;
            }
            if let Some(l) = lambda {
                config.serve.lambda = l;
            }
            serve::run(config, common.allow_paid)?;
        }
        Command::Synth {
            output_dir,
            classes,
            dim,
            train_per_class,
            test_size,
            spread,
            seed,
        } => {
            let spec = SyntheticSpec {
                classes,
                dim,
                train_per_class,
                test_size,
                spread,
                seed,
            };
            write_synthetic(&spec, &output_dir)?;
            println!("wrote {}", output_dir.display());
        }
    }
    Ok(())
}

fn write_synthetic(spec: &SyntheticSpec, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let data = synthetic::generate(spec)?;
    synthetic::write_dataset(&data.train, &dir.join("train.jsonl"))?;
    synthetic::write_dataset(&data.test, &dir.join("test.jsonl"))?;
    let ids = data.train.items.iter().chain(&data.test.items).map(|i| i.id.as_str());
    synthetic::write_embeddings(&data.embeddings, ids, &dir.join("embeddings.jsonl"))?;
    let config = serde_json::json!({
        "dataset": { "train": "train.jsonl", "test": "test.jsonl" },
        "embeddings": "embeddings.jsonl",
        "split": { "n_train": 3, "n_dev": 20, "seed": 0 },
        "teacher": { "backend": "oracle", "accuracy": 0.83, "seed": 0 },
        "lambdas": [0.05, 0.1, 0.2, 0.3],
        "n_shuffles": 5,
        "output_dir": "run",
        "serve": { "embedder": { "kind": "hashing", "dim": spec.dim, "seed": 0 } }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ocats::Error>() {
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
