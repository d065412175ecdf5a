//! Robust unlearnable noise generation.
//!
//! Stage one crafts defensive noise `δᵘ` inside an L∞ ball by signed steps
//! that lower both the surrogate's loss and the norm of the learned score
//! at `x + δᵘ` (pulling samples toward their class modes). Stage two
//! crafts an adversarial perturbation `δᵃ` that raises the loss, and the
//! surrogate is trained on `x + δᵘ + δᵃ`. Repeating both stages over
//! minibatches yields a robust noise generator; a final stage-one pass with
//! the trained surrogate emits the protected dataset.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{ClassifierModel, GradRequest, Reader, Reduction, ScoreModel};
use crate::par::{self, ExecMode};
use crate::rng::{self, Rng};
use crate::tensor::{self, Scalar, Tensor};

/// L∞ budgets, step sizes and step counts for both crafting stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub rho_u: f64,
    pub rho_a: f64,
    pub alpha_u: f64,
    pub alpha_s: f64,
    pub alpha_a: f64,
    pub k_u: usize,
    pub k_a: usize,
    /// Start stage one from `δᵘ = 0` instead of a uniform draw in the ball.
    #[serde(default)]
    pub zero_init: bool,
}

impl PerturbationBudget {
    /// Ten steps per stage, step sizes a fifth of the radius.
    pub fn with_radii(rho_u: f64, rho_a: f64) -> Self {
        Self {
            rho_u,
            rho_a,
            alpha_u: rho_u / 5.0,
            alpha_s: rho_u / 5.0,
            alpha_a: rho_a / 5.0,
            k_u: 10,
            k_a: 10,
            zero_init: false,
        }
    }

    /// Classic error-minimizing (min-min) noise: no score term, no
    /// adversarial stage.
    pub fn error_minimizing(rho_u: f64) -> Self {
        Self {
            alpha_s: 0.0,
            rho_a: 0.0,
            alpha_a: 0.0,
            k_a: 0,
            ..Self::with_radii(rho_u, 0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("{msg}: {self:?}")));
        let all = [self.rho_u, self.rho_a, self.alpha_u, self.alpha_s, self.alpha_a];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("radii and step sizes must be finite and non-negative");
        }
        if self.k_u > 0 && self.rho_u > 0.0 && !(self.alpha_u > 0.0) {
            return bad("stage one needs a positive alpha_u");
        }
        if self.k_a > 0 && self.rho_a > 0.0 && !(self.alpha_a > 0.0) {
            return bad("stage two needs a positive alpha_a");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep every iteration's `δᵘ` in the history.
    #[serde(default)]
    pub record_noise: bool,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!("invalid generator config: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorPoint {
    pub iteration: usize,
    pub loss: f64,
    pub score_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeneratorHistory {
    pub points: Vec<GeneratorPoint>,
    /// Crafted perturbations found outside their ball (expected zero).
    pub violations: usize,
    /// Per-iteration `(batch indices, δᵘ)` when `record_noise` is set.
    pub noise: Vec<(Vec<usize>, Tensor<f32>)>,
}

impl GeneratorHistory {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iteration", "loss", "score_norm"])?;
        for p in &self.points {
            w.serialize((p.iteration, p.loss, p.score_norm))?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// Clamp every entry into `[−ρ, ρ]`.
pub fn project_linf<T: Scalar>(delta: &Tensor<T>, rho: f64) -> Tensor<T> {
    let mut out = delta.clone();
    project_linf_in_place(&mut out, rho);
    out
}

pub fn project_linf_in_place<T: Scalar>(delta: &mut Tensor<T>, rho: f64) {
    let r = inner_radius::<T>(rho.max(0.0));
    for v in delta.data_mut() {
        *v = if r == T::zero() {
            T::zero()
        } else if *v > r {
            r
        } else if *v < -r {
            -r
        } else {
            *v
        };
    }
}

/// `ρ` at precision `T`, rounded toward zero so clamped values never exceed it.
fn inner_radius<T: Scalar>(rho: f64) -> T {
    let mut r = T::of(rho);
    while r.as_f64() > rho {
        r = r - r * T::epsilon();
    }
    r
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Whether every entry lies within `[−ρ, ρ]` at the tensor's precision.
pub fn within_ball<T: Scalar>(delta: &Tensor<T>, rho: f64) -> bool {
    delta.max_abs() <= T::of(rho)
}

/// Starting point for stage one, drawn row-major from `rng`.
pub fn init_delta<T: Scalar>(budget: &PerturbationBudget, shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    if budget.zero_init || budget.rho_u == 0.0 {
        return Tensor::zeros(shape);
    }
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| T::of(rng::symmetric_uniform(rng, budget.rho_u)))
        .collect();
    let mut delta = Tensor::new(shape.to_vec(), data).expect("shape matches length");
    project_linf_in_place(&mut delta, budget.rho_u);
    delta
}

fn check_models<T: Scalar>(surrogate: &ClassifierModel<T>, score: Option<&ScoreModel<T>>, x: &Tensor<T>, labels: &[usize]) -> Result<()> {
    let (n, d) = tensor::expect_matrix("craft", x)?;
    let mut bad = n != labels.len() || surrogate.input_dim() != d;
    if let Some(s) = score {
        bad |= s.dim() != d || s.num_classes() != surrogate.num_classes();
    }
    if bad {
        return Err(Error::ShapeMismatch {
            op: "craft",
            shapes: vec![x.shape().to_vec(), vec![labels.len()], vec![surrogate.input_dim(), surrogate.num_classes()]],
        });
    }
    Ok(())
}

/// Stage one from an explicit starting point:
/// `δ ← Π_ρu(δ − α_u·sign(∂ℓ/∂δ) − α_s·sign(∂‖s(x+δ, y)‖/∂δ))`, `K_u` times.
///
/// Gradients are taken of summed per-example objectives, so each row's
/// update depends only on that row.
pub fn stage_one_from<T: Scalar>(
    surrogate: &ClassifierModel<T>,
    score: &ScoreModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
    budget: &PerturbationBudget,
    init: Tensor<T>,
) -> Result<Tensor<T>> {
    check_models(surrogate, Some(score), x, labels)?;
    let mut delta = init;
    project_linf_in_place(&mut delta, budget.rho_u);
    if budget.rho_u == 0.0 {
        return Ok(delta);
    }
    let alpha_u = T::of(budget.alpha_u);
    let alpha_s = T::of(budget.alpha_s);
    for _ in 0..budget.k_u {
        let xp = x.add(&delta)?;
        let g = surrogate
            .loss(&xp, labels, Reduction::Sum, GradRequest::INPUTS)?
            .input_grad
            .expect("requested");
        let s = if budget.alpha_s > 0.0 {
            Some(score.norm_sum_grad(&xp, labels)?.1)
        } else {
            None
        };
        for (i, dv) in delta.data_mut().iter_mut().enumerate() {
            let mut next = *dv - alpha_u * sign(g.data()[i]);
            if let Some(s) = &s {
                next = next - alpha_s * sign(s.data()[i]);
            }
            *dv = next;
        }
        project_linf_in_place(&mut delta, budget.rho_u);
    }
    Ok(delta)
}

/// Stage one with its own starting draw from `rng`.
pub fn craft_stage_one<T: Scalar>(
    surrogate: &ClassifierModel<T>,
    score: &ScoreModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
    budget: &PerturbationBudget,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    budget.validate()?;
    let init = init_delta(budget, x.shape(), rng);
    stage_one_from(surrogate, score, x, labels, budget, init)
}

/// Stage one over row chunks; identical results in every [`ExecMode`].
#[allow(clippy::too_many_arguments)]
pub fn craft_stage_one_chunked<T: Scalar>(
    surrogate: &ClassifierModel<T>,
    score: &ScoreModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
    budget: &PerturbationBudget,
    rng: &mut Rng,
    chunk: usize,
    mode: ExecMode,
) -> Result<Tensor<T>> {
    budget.validate()?;
    check_models(surrogate, Some(score), x, labels)?;
    let init = init_delta::<T>(budget, x.shape(), rng);
    let parts = par::map_chunks(mode, x.rows(), chunk, |a, b| {
        let idx: Vec<usize> = (a..b).collect();
        stage_one_from(surrogate, score, &x.gather_rows(&idx), &labels[a..b], budget, init.gather_rows(&idx))
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts)
}

/// Stage two: `δᵃ` from zero, `K_a` signed ascent steps on the loss at
/// `x + δᵃ`, each projected onto the `ρ_a` ball.
pub fn craft_stage_two<T: Scalar>(
    surrogate: &ClassifierModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
    budget: &PerturbationBudget,
) -> Result<Tensor<T>> {
    budget.validate()?;
    check_models(surrogate, None, x, labels)?;
    pgd_ascent(surrogate, x, labels, budget.rho_a, budget.alpha_a, budget.k_a, Tensor::zeros(x.shape()))
}

/// Projected signed-gradient ascent on the summed loss.
pub(crate) fn pgd_ascent<T: Scalar>(
    model: &ClassifierModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
    rho: f64,
    step: f64,
    steps: usize,
    init: Tensor<T>,
) -> Result<Tensor<T>> {
    let mut delta = init;
    project_linf_in_place(&mut delta, rho);
    if rho == 0.0 {
        return Ok(delta);
    }
    let alpha = T::of(step);
    for _ in 0..steps {
        let xa = x.add(&delta)?;
        let g = model
            .loss(&xa, labels, Reduction::Sum, GradRequest::INPUTS)?
            .input_grad
            .expect("requested");
        for (dv, &gv) in delta.data_mut().iter_mut().zip(g.data()) {
            *dv = *dv + alpha * sign(gv);
        }
        project_linf_in_place(&mut delta, rho);
    }
    Ok(delta)
}

fn mean_row_norm<T: Scalar>(t: &Tensor<T>) -> f64 {
    let n = t.rows();
    (0..n).map(|i| tensor::l2(t.row(i)).as_f64()).sum::<f64>() / n as f64
}

/// Train the surrogate noise generator.
///
/// Each iteration takes the next minibatch of a per-epoch shuffle, draws
/// the stage-one start, crafts `δᵘ` then `δᵃ`, and takes one gradient step
/// on the mean loss at `x + δᵘ + δᵃ`. All randomness comes from
/// `cfg.seed` in that order. The score model is only read.
pub fn train_generator<T: Scalar>(
    surrogate: &ClassifierModel<T>,
    score: &ScoreModel<T>,
    data: &LabeledDataset,
    budget: &PerturbationBudget,
    cfg: &GeneratorConfig,
) -> Result<(ClassifierModel<T>, GeneratorHistory)> {
    budget.validate()?;
    cfg.validate()?;
    let features: Tensor<T> = data.features.cast();
    check_models(surrogate, Some(score), &features, &data.labels)?;
    let mut model = surrogate.clone();
    let mut rng = rng::rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut history = GeneratorHistory::default();
    for iteration in 0..cfg.iterations {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = order[cursor..end].to_vec();
        cursor = end;

        let x = features.gather_rows(&batch);
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        let delta_u = craft_stage_one_chunked(&model, score, &x, &labels, budget, &mut rng, chunk_size(cfg), cfg.exec)?;
        if !within_ball(&delta_u, budget.rho_u) {
            history.violations += 1;
        }
        let xp = x.add(&delta_u)?;
        let score_norm = mean_row_norm(&score.eval(&xp, &labels)?);

        let delta_a = craft_stage_two(&model, &xp, &labels, budget)?;
        if !within_ball(&delta_a, budget.rho_a) {
            history.violations += 1;
        }
        let xa = xp.add(&delta_a)?;
        let out = model.loss(&xa, &labels, Reduction::Mean, GradRequest::PARAMS)?;
        let loss = out.loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::NanLoss {
                stage: "train_generator",
                step: iteration,
            });
        }
        model.net.sgd_step(&out.param_grads.expect("requested"), cfg.learning_rate)?;
        if !model.net.is_finite() {
            return Err(Error::NanLoss {
                stage: "train_generator",
                step: iteration,
            });
        }
        history.points.push(GeneratorPoint {
            iteration,
            loss,
            score_norm,
        });
        if cfg.record_noise {
            history.noise.push((batch, delta_u.cast()));
        }
    }
    Ok((model, history))
}

fn chunk_size(cfg: &GeneratorConfig) -> usize {
    if cfg.exec.is_parallel() {
        16
    } else {
        cfg.batch_size
    }
}

/// Base data plus per-example defensive noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonedDataset {
    pub base: LabeledDataset,
    pub noise: Tensor<f32>,
    pub budget: PerturbationBudget,
}

impl PoisonedDataset {
    pub fn new(base: LabeledDataset, noise: Tensor<f32>, budget: PerturbationBudget) -> Result<Self> {
        if noise.shape() != base.features.shape() {
            return Err(Error::ShapeMismatch {
                op: "poisoned_dataset",
                shapes: vec![base.features.shape().to_vec(), noise.shape().to_vec()],
            });
        }
        if !within_ball(&noise, budget.rho_u) {
            return Err(Error::InvalidConfig(format!(
                "noise exceeds rho_u = {} (max {})",
                budget.rho_u,
                noise.max_abs()
            )));
        }
        Ok(Self { base, noise, budget })
    }

    /// `x + δᵘ` as a labeled dataset.
    pub fn poisoned(&self) -> Result<LabeledDataset> {
        self.base.with_features(self.base.features.add(&self.noise)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let b = &self.budget;
        let mut out = Vec::new();
        out.extend_from_slice(&POISON_MAGIC);
        out.extend_from_slice(&POISON_VERSION.to_le_bytes());
        for v in [b.rho_u, b.rho_a, b.alpha_u, b.alpha_s, b.alpha_a] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(b.k_u as u32).to_le_bytes());
        out.extend_from_slice(&(b.k_a as u32).to_le_bytes());
        out.push(b.zero_init as u8);
        out.extend_from_slice(&self.base.content_hash());
        out.extend_from_slice(&(self.noise.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.noise.cols() as u32).to_le_bytes());
        for &v in self.noise.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decode a `ULPN` file and attach it to `base`, which must hash to the
    /// value recorded in the header.
    pub fn from_bytes(bytes: &[u8], base: LabeledDataset) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(POISON_MAGIC)?;
        let version = r.u32("version")?;
        if version != POISON_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: POISON_VERSION,
            });
        }
        let mut radii = [0.0f64; 5];
        for v in &mut radii {
            *v = r.f32("budget")? as f64;
        }
        let k_u = r.u32("budget")? as usize;
        let k_a = r.u32("budget")? as usize;
        let zero_init = r.u8("budget")? != 0;
        let hash: [u8; 32] = r.take(32, "base hash")?.try_into().expect("32 bytes");
        let n = r.u64("n")? as usize;
        let d = r.u32("d")? as usize;
        let raw = r.take(n.saturating_mul(d).saturating_mul(4), "noise")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        r.finish()?;
        if hash != base.content_hash() {
            return Err(Error::BaseMismatch);
        }
        let budget = PerturbationBudget {
            rho_u: radii[0],
            rho_a: radii[1],
            alpha_u: radii[2],
            alpha_s: radii[3],
            alpha_a: radii[4],
            k_u,
            k_a,
            zero_init,
        };
        let noise = Tensor::new(vec![n, d], data)?;
        Self::new(base, noise, budget).map_err(|e| Error::Malformed(e.to_string()))
    }
}

const POISON_MAGIC: [u8; 4] = *b"ULPN";
const POISON_VERSION: u32 = 1;

pub fn save_poison(p: &PoisonedDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, p.to_bytes())?;
    Ok(())
}

pub fn load_poison(path: impl AsRef<Path>, base: LabeledDataset) -> Result<PoisonedDataset> {
    PoisonedDataset::from_bytes(&fs::read(path)?, base)
}

/// Final stage-one pass over every example with the trained surrogate.
pub fn emit_poison<T: Scalar>(
    surrogate: &ClassifierModel<T>,
    score: &ScoreModel<T>,
    data: &LabeledDataset,
    budget: &PerturbationBudget,
    seed: u64,
    mode: ExecMode,
) -> Result<PoisonedDataset> {
    budget.validate()?;
    let x: Tensor<T> = data.features.cast();
    let mut rng = rng::rng_from_seed(seed);
    let delta = craft_stage_one_chunked(surrogate, score, &x, &data.labels, budget, &mut rng, 64, mode)?;
    let mut noise: Tensor<f32> = delta.cast();
    project_linf_in_place(&mut noise, budget.rho_u);
    PoisonedDataset::new(data.clone(), noise, budget.clone())
}
