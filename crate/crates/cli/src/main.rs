use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use unlearn_core::datasets::{self, LabeledDataset};
use unlearn_core::experiment::{self, ArchConfig, ExperimentConfig, Manifest};
use unlearn_core::models::{self, ClassifierModel, ModelFile, ScoreModel};
use unlearn_core::par::{self, ExecMode};
use unlearn_core::poison;
use unlearn_core::scorelab::{self, Direction, SgldConfig};
use unlearn_core::victim;
use unlearn_core::{Error, Result, Tensor};

/// Generate and evaluate robust unlearnable examples on synthetic data.
#[derive(Parser)]
#[command(name = "unlearn", version)]
struct Cli {
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate normalized train and test splits (train.ulds, test.ulds).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the class-conditional score model by denoising score matching.
    TrainScore {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one Langevin chain from every example; writes final states as a dataset.
    SampleSgld {
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = Dir::Toward)]
        direction: Dir,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the surrogate noise generator.
    TrainGenerator {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit defensive noise for every example (ULPN file).
    CraftNoise {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a victim classifier, optionally on (partially) protected data.
    TrainVictim {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        noise: Option<PathBuf>,
        /// Fraction of examples carrying noise; defaults to 1 with --noise.
        #[arg(long)]
        fraction: Option<f64>,
        /// Hidden widths, e.g. "64,64"; empty for a linear model.
        #[arg(long, default_value = "64,64")]
        arch: String,
        #[arg(long = "rho-a", default_value_t = 0.0)]
        rho_a: f64,
        /// Held-out split for the history's test accuracy column.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the accuracy of a saved classifier.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the full grid and write report.csv, scatter.svg and all artifacts.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the built-in experiment config.
    DefaultConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dir {
    Toward,
    Away,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match par::with_jobs(cli.jobs.max(1), || run(cli.command, cli.jobs.max(1))) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} message={:?}", e.kind(), e.to_string());
            ExitCode::from(if e.is_usage() {
                2
            } else if e.is_numeric() {
                3
            } else {
                1
            })
        }
    }
}

fn config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(experiment::default_config()),
    }
}

fn input(path: &Path) -> Result<&Path> {
    if !path.is_file() {
        return Err(Error::InvalidConfig(format!("input {} does not exist", path.display())));
    }
    Ok(path)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    let (dir, name) = match (path.parent(), path.file_name()) {
        (Some(d), Some(n)) => (d, n.to_string_lossy()),
        _ => return Err(Error::InvalidConfig(format!("bad output path {}", path.display()))),
    };
    Manifest::default().write(dir, &name, bytes)?;
    Ok(())
}

fn load_data(path: &Path) -> Result<LabeledDataset> {
    datasets::load_dataset(input(path)?)
}

fn run(command: Command, jobs: usize) -> Result<()> {
    let mode = ExecMode::from_jobs(jobs);
    match command {
        Command::GenData { config: c, out } => {
            let cfg = config(c.as_deref())?;
            let (train, test) = experiment::build_datasets(&cfg)?;
            let mut m = Manifest::default();
            m.write(&out, "train.ulds", &train.to_bytes())?;
            m.write(&out, "test.ulds", &test.to_bytes())?;
        }
        Command::TrainScore { config: c, data, out } => {
            let cfg = config(c.as_deref())?;
            let (score, history) = experiment::score_stage(&cfg, &load_data(&data)?)?;
            if let Some(last) = history.last() {
                log::info!("final DSM loss {:.5}", last.loss);
            }
            write(&out, &score.to_bytes()?)?;
        }
        Command::SampleSgld {
            score,
            data,
            alpha,
            steps,
            direction,
            seed,
            out,
        } => {
            let model: ScoreModel = models::load_model(input(&score)?)?;
            let ds = load_data(&data)?;
            let direction = match direction {
                Dir::Toward => Direction::Toward,
                Dir::Away => Direction::Away,
            };
            let cfg = SgldConfig::new(alpha, steps, direction, seed);
            let starts: Vec<(Vec<f64>, usize)> = (0..ds.len())
                .map(|i| (ds.features.row(i).iter().map(|&v| v as f64).collect(), ds.labels[i]))
                .collect();
            let chains = scorelab::sgld_chains(&model, &starts, &cfg, mode)?;
            let last: Vec<f32> = chains.iter().flat_map(|t| t.last().iter().map(|&v| v as f32)).collect();
            let samples = ds.with_features(Tensor::new(vec![ds.len(), ds.dim()], last)?)?;
            write(&out, &samples.to_bytes())?;
        }
        Command::TrainGenerator {
            config: c,
            data,
            score,
            out,
        } => {
            let cfg = config(c.as_deref())?;
            let score: ScoreModel = models::load_model(input(&score)?)?;
            let (surrogate, history) = experiment::generator_stage(&cfg, &load_data(&data)?, &score)?;
            write(&out, &surrogate.to_bytes()?)?;
            write(&out.with_extension("csv"), &history.to_csv()?)?;
        }
        Command::CraftNoise {
            config: c,
            generator,
            score,
            data,
            out,
        } => {
            let cfg = config(c.as_deref())?;
            let surrogate: ClassifierModel = models::load_model(input(&generator)?)?;
            let score: ScoreModel = models::load_model(input(&score)?)?;
            let poisoned = experiment::poison_stage(&cfg, &surrogate, &score, &load_data(&data)?)?;
            write(&out, &poisoned.to_bytes())?;
        }
        Command::TrainVictim {
            config: c,
            data,
            noise,
            fraction,
            arch,
            rho_a,
            test,
            out,
        } => {
            let cfg = config(c.as_deref())?;
            let clean = load_data(&data)?;
            let train = match &noise {
                Some(path) => {
                    let poisoned = poison::load_poison(input(path)?, clean.clone())?;
                    victim::mix_partial(&clean, &poisoned, fraction.unwrap_or(1.0), cfg.mix_seed())?
                }
                None if fraction.is_some_and(|p| p > 0.0) => {
                    return Err(Error::InvalidConfig("--fraction > 0 needs --noise".into()));
                }
                None => clean,
            };
            let test = test.as_deref().map(load_data).transpose()?;
            let vcfg = cfg.victim_config(&ArchConfig::parse(&arch)?, rho_a, train.dim(), train.num_classes);
            let (model, history) = victim::train_victim::<f32>(&train, test.as_ref(), &vcfg)?;
            if let Some(last) = history.last() {
                log::info!("train acc {:.4} test acc {:.4}", last.train_acc, last.test_acc);
            }
            write(&out, &model.to_bytes()?)?;
            write(&out.with_extension("csv"), &victim::history_csv(&history)?)?;
        }
        Command::Evaluate { model, data } => {
            let model: ClassifierModel = models::load_model(input(&model)?)?;
            let acc = victim::evaluate_with(&model, &load_data(&data)?, mode)?;
            println!("{acc}");
        }
        Command::Experiment { config: c, out } => {
            let cfg = config(c.as_deref())?;
            let result = experiment::run_to_dir(&cfg, &out, jobs)?;
            log::info!("{} report rows written to {}", result.records.len(), out.join("report.csv").display());
        }
        Command::DefaultConfig => print!("{}", experiment::DEFAULT_CONFIG),
    }
    Ok(())
}
