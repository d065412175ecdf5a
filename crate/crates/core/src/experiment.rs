//! End-to-end protection experiments from one JSON config.
//!
//! Every stage draws its seed from a named stream of the root seed, so the
//! individual CLI commands and a full `experiment` run produce the same
//! artifacts.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{self, GaussianMixtureSpec, LabeledDataset, Normalizer};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRecord};
use crate::models::{self, Activation, ArchSpec, ClassifierModel, ScoreModel};
use crate::par::{self, ExecMode};
use crate::poison::{self, GeneratorConfig, GeneratorHistory, PerturbationBudget, PoisonedDataset};
use crate::rng::stream_seed;
use crate::scorelab::{self, DsmConfig, LossPoint};
use crate::victim::{self, EpochRecord, VictimTrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataKind {
    /// Two isotropic classes separated along the first axis.
    GaussianPair { dim: usize, separation: f64, cov_scale: f64 },
    Mixture { spec: GaussianMixtureSpec },
    TwoMoons { noise: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub kind: DataKind,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standardize with statistics of the training split.
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn yes() -> bool {
    true
}

/// Hidden widths and activation; input and output sizes come from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ArchConfig {
    pub fn new(hidden: &[usize]) -> Self {
        Self {
            hidden: hidden.to_vec(),
            activation: Activation::Relu,
        }
    }

    pub fn resolve(&self, input: usize, output: usize) -> ArchSpec {
        ArchSpec::new(input, &self.hidden, output, self.activation)
    }

    /// Parse `"64,64"` (or `""` for a linear model).
    pub fn parse(s: &str) -> Result<Self> {
        let hidden = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("bad layer width {t:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(&hidden))
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d")?;
        for h in &self.hidden {
            write!(f, "-{h}")?;
        }
        write!(f, "-K")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSettings {
    pub sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "score_arch")]
    pub arch: ArchConfig,
}

fn score_arch() -> ArchConfig {
    ArchConfig {
        hidden: vec![128, 128],
        activation: Activation::Tanh,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSettings {
    /// Defaults to `epochs` passes over the training split.
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default = "ten")]
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub surrogate: ArchConfig,
}

fn ten() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimCell {
    pub arch: ArchConfig,
    #[serde(default)]
    pub rho_a_train: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "ten")]
    pub pgd_steps: usize,
    pub grid: Vec<VictimCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub score: ScoreSettings,
    pub budget: PerturbationBudget,
    pub generator: GeneratorSettings,
    pub victim: VictimSettings,
    pub fractions: Vec<f64>,
    /// Write a clean-vs-poisoned scatter next to the report.
    #[serde(default = "yes")]
    pub scatter: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.dataset.train_per_class == 0 || self.dataset.test_per_class == 0 {
            return Err(Error::InvalidConfig("dataset sizes must be positive".into()));
        }
        self.budget.validate()?;
        self.dsm_config().validate()?;
        self.generator_config(1).validate()?;
        if let Some(p) = self.fractions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidConfig(format!("protection fraction {p} outside [0, 1]")));
        }
        for cell in &self.victim.grid {
            self.victim_config(&cell.arch, cell.rho_a_train, 1, 1).validate()?;
        }
        Ok(())
    }

    pub fn dsm_config(&self) -> DsmConfig {
        DsmConfig {
            sigma: self.score.sigma,
            epochs: self.score.epochs,
            batch_size: self.score.batch_size,
            learning_rate: self.score.learning_rate,
            seed: stream_seed(self.seed, "score.train"),
        }
    }

    pub fn generator_config(&self, n: usize) -> GeneratorConfig {
        let g = &self.generator;
        let per_epoch = n.div_ceil(g.batch_size.max(1));
        GeneratorConfig {
            iterations: g.iterations.unwrap_or(g.epochs * per_epoch),
            learning_rate: g.learning_rate,
            batch_size: g.batch_size,
            seed: stream_seed(self.seed, "generator"),
            record_noise: false,
            exec: ExecMode::Sequential,
        }
    }

    pub fn victim_config(&self, arch: &ArchConfig, rho_a: f64, dim: usize, classes: usize) -> VictimTrainConfig {
        VictimTrainConfig {
            arch: arch.resolve(dim, classes),
            epochs: self.victim.epochs,
            batch_size: self.victim.batch_size,
            learning_rate: self.victim.learning_rate,
            rho_a_train: rho_a,
            pgd_steps: self.victim.pgd_steps,
            pgd_step_size: None,
            seed: stream_seed(self.seed, "victim"),
        }
    }

    pub fn poison_seed(&self) -> u64 {
        stream_seed(self.seed, "poison")
    }

    pub fn mix_seed(&self) -> u64 {
        stream_seed(self.seed, "mix")
    }
}

/// Train and test splits, normalized with training statistics.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let d = &cfg.dataset;
    let gen = |n: usize, stream: &str| -> Result<LabeledDataset> {
        let seed = stream_seed(cfg.seed, stream);
        match &d.kind {
            DataKind::GaussianPair {
                dim,
                separation,
                cov_scale,
            } => datasets::gen_mixture(&GaussianMixtureSpec::gaussian_pair(*dim, *separation, *cov_scale), n, seed),
            DataKind::Mixture { spec } => datasets::gen_mixture(spec, n, seed),
            DataKind::TwoMoons { noise } => datasets::gen_two_moons(n, *noise, seed),
        }
    };
    let train = gen(d.train_per_class, "data.train")?;
    let test = gen(d.test_per_class, "data.test")?;
    let (mut train, mut test) = if d.normalize {
        let norm = Normalizer::fit(&train)?;
        (norm.apply(&train)?, norm.apply(&test)?)
    } else {
        (train, test)
    };
    train.name = "train".into();
    test.name = "test".into();
    Ok((train, test))
}

pub fn score_stage(cfg: &ExperimentConfig, train: &LabeledDataset) -> Result<(ScoreModel, Vec<LossPoint>)> {
    let k = train.num_classes;
    let spec = cfg.score.arch.resolve(train.dim() + k, train.dim());
    let init = ScoreModel::init(&spec, k, cfg.score.sigma, stream_seed(cfg.seed, "score.init"))?;
    scorelab::train_score(&init, train, &cfg.dsm_config())
}

pub fn generator_stage(
    cfg: &ExperimentConfig,
    train: &LabeledDataset,
    score: &ScoreModel,
) -> Result<(ClassifierModel, GeneratorHistory)> {
    let spec = cfg.generator.surrogate.resolve(train.dim(), train.num_classes);
    let init = ClassifierModel::init(&spec, stream_seed(cfg.seed, "surrogate.init"))?;
    let gcfg = GeneratorConfig {
        exec: ExecMode::from_jobs(rayon_threads()),
        ..cfg.generator_config(train.len())
    };
    let (model, history) = poison::train_generator(&init, score, train, &cfg.budget, &gcfg)?;
    if history.violations > 0 {
        return Err(Error::InvalidConfig(format!("{} budget violations during generator training", history.violations)));
    }
    Ok((model, history))
}

pub fn poison_stage(
    cfg: &ExperimentConfig,
    surrogate: &ClassifierModel,
    score: &ScoreModel,
    train: &LabeledDataset,
) -> Result<PoisonedDataset> {
    poison::emit_poison(surrogate, score, train, &cfg.budget, cfg.poison_seed(), ExecMode::from_jobs(rayon_threads()))
}

/// Worker count of the current pool, or 1 when built without rayon.
fn rayon_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// A trained victim and where it came from.
#[derive(Debug, Clone)]
pub struct VictimRun {
    pub name: String,
    pub model: ClassifierModel,
    pub history: Vec<EpochRecord>,
}

pub struct CellOutcome {
    pub records: Vec<MetricsRecord>,
    pub runs: Vec<VictimRun>,
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    train: &'a LabeledDataset,
    test: &'a LabeledDataset,
    poisoned: &'a PoisonedDataset,
    score: &'a ScoreModel,
    clean_norm: f64,
    clean_spread: f64,
}

pub fn cell_id(cell: &VictimCell) -> String {
    format!("{}_rho{}", cell.arch, cell.rho_a_train)
}

fn run_cell(ctx: &Context<'_>, cell: &VictimCell) -> Result<CellOutcome> {
    let cfg = ctx.cfg;
    let vcfg = cfg.victim_config(&cell.arch, cell.rho_a_train, ctx.train.dim(), ctx.train.num_classes);
    let id = cell_id(cell);
    let (clean_model, clean_hist) = victim::train_victim::<f32>(ctx.train, Some(ctx.test), &vcfg)?;
    let clean_acc = victim::evaluate(&clean_model, ctx.test)?;
    let mut runs = vec![VictimRun {
        name: format!("{id}_clean"),
        model: clean_model,
        history: clean_hist,
    }];
    let mut records = Vec::new();
    for &p in &cfg.fractions {
        let mixed = victim::mix_partial(ctx.train, ctx.poisoned, p, cfg.mix_seed())?;
        let (model, history) = victim::train_victim::<f32>(&mixed, Some(ctx.test), &vcfg)?;
        let acc = victim::evaluate(&model, ctx.test)?;
        let (norm, _) = metrics::score_norm_stats(ctx.score, &mixed)?;
        let spread = metrics::intra_class_spread(&mixed.features, &mixed.labels, mixed.num_classes)?.pooled;
        let run_id = format!("{id}_p{p}");
        log::info!("{run_id}: clean {clean_acc:.4} poisoned {acc:.4}");
        records.push(MetricsRecord {
            run_id: run_id.clone(),
            dataset: dataset_label(&cfg.dataset),
            surrogate_arch: cfg.generator.surrogate.to_string(),
            victim_arch: cell.arch.to_string(),
            rho_u: cfg.budget.rho_u,
            rho_a_train: cell.rho_a_train,
            fraction: p,
            clean_test_acc: clean_acc,
            poisoned_test_acc: acc,
            mean_score_norm_clean: ctx.clean_norm,
            mean_score_norm_poisoned: norm,
            intra_class_spread_clean: ctx.clean_spread,
            intra_class_spread_poisoned: spread,
        });
        runs.push(VictimRun { name: run_id, model, history });
    }
    Ok(CellOutcome { records, runs })
}

fn dataset_label(d: &DatasetConfig) -> String {
    match &d.kind {
        DataKind::GaussianPair { dim, .. } => format!("gaussian_pair_d{dim}"),
        DataKind::Mixture { spec } => format!("mixture_d{}_k{}", spec.dim(), spec.num_classes()),
        DataKind::TwoMoons { .. } => "two_moons".into(),
    }
}

/// In-memory results of a full run.
pub struct ExperimentResult {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub score: ScoreModel,
    pub surrogate: ClassifierModel,
    pub generator_history: GeneratorHistory,
    pub poisoned: PoisonedDataset,
    pub records: Vec<MetricsRecord>,
    pub runs: Vec<VictimRun>,
}

/// Run every stage and the whole victim grid. Grid cells run on up to
/// `jobs` threads; results do not depend on `jobs`.
pub fn run(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    par::with_jobs(jobs, || run_inner(cfg, jobs))
}

fn run_inner(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentResult> {
    let (train, test) = build_datasets(cfg)?;
    log::info!("data: {} train, {} test, d = {}", train.len(), test.len(), train.dim());
    let (score, _) = score_stage(cfg, &train)?;
    log::info!("score model trained");
    let (surrogate, generator_history) = generator_stage(cfg, &train, &score)?;
    log::info!("generator trained ({} iterations)", generator_history.points.len());
    let poisoned = poison_stage(cfg, &surrogate, &score, &train)?;
    let (clean_norm, _) = metrics::score_norm_stats(&score, &train)?;
    let clean_spread = metrics::intra_class_spread(&train.features, &train.labels, train.num_classes)?.pooled;
    let ctx = Context {
        cfg,
        train: &train,
        test: &test,
        poisoned: &poisoned,
        score: &score,
        clean_norm,
        clean_spread,
    };
    let outcomes = par::map_indexed(ExecMode::from_jobs(jobs), cfg.victim.grid.len(), |i| run_cell(&ctx, &cfg.victim.grid[i]));
    let (mut records, mut runs) = (Vec::new(), Vec::new());
    for o in outcomes {
        let o = o?;
        records.extend(o.records);
        runs.extend(o.runs);
    }
    Ok(ExperimentResult {
        train,
        test,
        score,
        surrogate,
        generator_history,
        poisoned,
        records,
        runs,
    })
}

/// Written files with their SHA-256, in write order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: Vec<(String, String)>,
}

impl Manifest {
    /// Write `bytes` under `root` and record the hash.
    pub fn write(&mut self, root: &Path, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        let hash = hex::encode(Sha256::digest(bytes));
        log::info!("wrote {} sha256={hash}", path.display());
        self.artifacts.push((rel.to_owned(), hash));
        Ok(path)
    }
}

/// Run the experiment and write every artifact under `out`.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<ExperimentResult> {
    let result = run(cfg, jobs)?;
    let mut m = Manifest::default();
    m.write(out, "config.json", serde_json::to_string_pretty(cfg)?.as_bytes())?;
    m.write(out, "train.ulds", &result.train.to_bytes())?;
    m.write(out, "test.ulds", &result.test.to_bytes())?;
    m.write(out, "score.cwmd", &models::ModelFile::to_bytes(&result.score)?)?;
    m.write(out, "generator.cwmd", &models::ModelFile::to_bytes(&result.surrogate)?)?;
    m.write(out, "generator_history.csv", &result.generator_history.to_csv()?)?;
    m.write(out, "poison.ulpn", &result.poisoned.to_bytes())?;
    for run in &result.runs {
        m.write(out, &format!("victims/{}.cwmd", run.name), &models::ModelFile::to_bytes(&run.model)?)?;
        m.write(out, &format!("victims/{}.csv", run.name), &victim::history_csv(&run.history)?)?;
    }
    m.write(out, "report.csv", &metrics::report_bytes(&result.records)?)?;
    if cfg.scatter {
        let svg = metrics::scatter_svg(&result.train, Some(&result.poisoned.poisoned()?))?;
        m.write(out, "scatter.svg", svg.as_bytes())?;
    }
    let manifest = serde_json::to_string_pretty(&m)?;
    fs::write(out.join("manifest.json"), manifest)?;
    Ok(result)
}

/// The desk-scale default protocol.
pub fn default_config() -> ExperimentConfig {
    serde_json::from_str(DEFAULT_CONFIG).expect("built-in config parses")
}

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_parse_and_display() {
        assert_eq!(ArchConfig::parse("64, 64").unwrap(), ArchConfig::new(&[64, 64]));
        assert_eq!(ArchConfig::parse("").unwrap().hidden, Vec::<usize>::new());
        assert!(ArchConfig::parse("64,x").is_err());
        assert_eq!(ArchConfig::new(&[32]).to_string(), "d-32-K");
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = default_config();
        cfg.validate().unwrap();
        let bad = ExperimentConfig {
            schema_version: 99,
            ..cfg.clone()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let frac = ExperimentConfig {
            fractions: vec![1.5],
            ..cfg
        };
        assert!(frac.validate().is_err());
    }
}
