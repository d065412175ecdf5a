//! Denoising score matching and Langevin sampling.
//!
//! The score network is trained to predict `−(x̃ − x)/σ²` on noisy copies
//! `x̃ = x + σε` of the data, which makes it an estimator of the score of
//! the σ-smoothed class-conditional density.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{analytic_score, GaussianMixtureSpec, LabeledDataset};
use crate::diff::{Bindings, Graph};
use crate::error::{Error, Result};
use crate::models::ScoreModel;
use crate::par::{self, ExecMode};
use crate::rng;
use crate::tensor::{self, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsmConfig {
    pub sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DsmConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            epochs: 200,
            batch_size: 64,
            learning_rate: 0.02,
            seed: 0,
        }
    }
}

impl DsmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid DSM config: {self:?}")));
        }
        Ok(())
    }
}

/// One entry of a loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

/// `½ · mean_i ‖s(x̃_i, y_i) + (x̃_i − x_i)/σ²‖²` with `x̃ = x + σε`.
pub fn dsm_loss<T: Scalar>(model: &ScoreModel<T>, x: &Tensor<T>, labels: &[usize], eps: &Tensor<T>) -> Result<T> {
    Ok(dsm_eval(model, x, labels, eps, false)?.0)
}

/// [`dsm_loss`] together with its parameter gradients.
pub fn dsm_loss_grad<T: Scalar>(
    model: &ScoreModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
    eps: &Tensor<T>,
) -> Result<(T, Vec<Tensor<T>>)> {
    dsm_eval(model, x, labels, eps, true)
}

fn dsm_eval<T: Scalar>(
    model: &ScoreModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
    eps: &Tensor<T>,
    grads: bool,
) -> Result<(T, Vec<Tensor<T>>)> {
    let (n, d) = tensor::expect_matrix("dsm_loss", x)?;
    if eps.shape() != x.shape() || d != model.dim() || labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "dsm_loss",
            shapes: vec![x.shape().to_vec(), eps.shape().to_vec(), vec![labels.len()]],
        });
    }
    let sigma = model.sigma();
    let onehot = tensor::one_hot(labels, model.num_classes())?;
    let mut g = Graph::new();
    let xin = g.input("x");
    let ein = g.input("eps");
    let oh = g.input("onehot");
    let noise = g.scale(ein, sigma);
    let noisy = g.add(xin, noise);
    let nodes = model.build(&mut g, noisy, oh);
    let diff = g.sub(noisy, xin);
    let target = g.scale(diff, 1.0 / (sigma * sigma));
    let resid = g.add(nodes.output, target);
    let sq = g.mul(resid, resid);
    let total = g.sum(sq);
    g.scale(total, 0.5 / n as f64);
    let mut b = Bindings::new();
    b.bind(xin, x).bind(ein, eps).bind(oh, &onehot);
    model.net.bind(&nodes, &mut b);
    let ev = g.evaluate(&b)?;
    let loss = ev.output().item();
    if !grads {
        return Ok((loss, Vec::new()));
    }
    let mut gr = ev.backward(&nodes.params)?;
    let grads = nodes.params.iter().map(|&p| gr.take(p).expect("requested")).collect();
    Ok((loss, grads))
}

/// Minibatch gradient descent on the DSM objective.
///
/// Randomness, all from `cfg.seed`: each epoch shuffles the example order,
/// then each batch draws its `ε` row-major from a standard normal.
pub fn train_score<T: Scalar>(
    model: &ScoreModel<T>,
    data: &LabeledDataset,
    cfg: &DsmConfig,
) -> Result<(ScoreModel<T>, Vec<LossPoint>)> {
    cfg.validate()?;
    if (cfg.sigma - model.sigma()).abs() > 0.0 {
        return Err(Error::InvalidConfig(format!(
            "config sigma {} differs from model sigma {}",
            cfg.sigma,
            model.sigma()
        )));
    }
    if data.dim() != model.dim() || data.num_classes != model.num_classes() {
        return Err(Error::ShapeMismatch {
            op: "train_score",
            shapes: vec![vec![data.dim(), data.num_classes], vec![model.dim(), model.num_classes()]],
        });
    }
    let mut model = model.clone();
    let mut rng = rng::rng_from_seed(cfg.seed);
    let features: Tensor<T> = data.features.cast();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = features.gather_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let eps = standard_normal_like(&mut rng, x.shape());
            let (loss, grads) = dsm_loss_grad(&model, &x, &labels, &eps)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NanLoss { stage: "train_score", step });
            }
            model.net.sgd_step(&grads, cfg.learning_rate)?;
            history.push(LossPoint { step, loss });
            step += 1;
        }
    }
    if !model.net.is_finite() {
        return Err(Error::NanLoss { stage: "train_score", step });
    }
    Ok((model, history))
}

fn standard_normal_like<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

/// Anything that can report `∇_x log p(x | y)` at a point.
pub trait ScoreFn: Sync {
    fn dim(&self) -> usize;
    fn score(&self, x: &[f64], y: usize) -> Result<Vec<f64>>;
}

impl<T: Scalar> ScoreFn for ScoreModel<T> {
    fn dim(&self) -> usize {
        ScoreModel::dim(self)
    }

    fn score(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        let input = Tensor::from_f64(&[1, x.len()], x)?;
        let s = self.eval(&input, &[y])?;
        Ok(s.data().iter().map(|v| v.as_f64()).collect())
    }
}

/// Closed-form score of a Gaussian mixture smoothed by `σ`.
#[derive(Debug, Clone)]
pub struct AnalyticScore {
    pub spec: GaussianMixtureSpec,
    pub smoothing: f64,
}

impl ScoreFn for AnalyticScore {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn score(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        analytic_score(&self.spec, self.smoothing, x, y)
    }
}

/// Adapter for plain closures.
pub struct FnScore<F>(pub usize, pub F);

impl<F: Fn(&[f64], usize) -> Vec<f64> + Sync> ScoreFn for FnScore<F> {
    fn dim(&self) -> usize {
        self.0
    }

    fn score(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        Ok((self.1)(x, y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Follow the score: drift toward high density.
    #[default]
    Toward,
    /// Move against the score.
    Away,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgldConfig {
    pub alpha: f64,
    pub steps: usize,
    #[serde(default)]
    pub direction: Direction,
    pub seed: u64,
    #[serde(default = "default_bound")]
    pub divergence_bound: f64,
}

fn default_bound() -> f64 {
    1e6
}

impl SgldConfig {
    pub fn new(alpha: f64, steps: usize, direction: Direction, seed: u64) -> Self {
        Self {
            alpha,
            steps,
            direction,
            seed,
            divergence_bound: default_bound(),
        }
    }
}

/// `steps + 1` states of a chain, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub states: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.dim..(t + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

/// `x_t = x_{t−1} ± α·score(x_{t−1}, y) + √(2α)·ε_t`, `+` for
/// [`Direction::Toward`].
pub fn sgld_run(score: &dyn ScoreFn, x0: &[f64], y: usize, cfg: &SgldConfig) -> Result<Trajectory> {
    let mut rng = rng::rng_from_seed(cfg.seed);
    run_chain(score, x0, y, cfg, &mut rng)
}

/// Independent chains; chain `i` uses ChaCha stream `i` of `cfg.seed`, so
/// chain 0 reproduces [`sgld_run`] and results do not depend on `mode`.
pub fn sgld_chains(
    score: &dyn ScoreFn,
    starts: &[(Vec<f64>, usize)],
    cfg: &SgldConfig,
    mode: ExecMode,
) -> Result<Vec<Trajectory>> {
    par::map_indexed(mode, starts.len(), |i| {
        let mut rng = rng::rng_from_seed(cfg.seed);
        rng.set_stream(i as u64);
        run_chain(score, &starts[i].0, starts[i].1, cfg, &mut rng)
    })
    .into_iter()
    .collect()
}

fn run_chain(score: &dyn ScoreFn, x0: &[f64], y: usize, cfg: &SgldConfig, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    if !(cfg.alpha > 0.0) {
        return Err(Error::InvalidConfig(format!("SGLD step must be positive, got {}", cfg.alpha)));
    }
    let d = x0.len();
    if d != score.dim() {
        return Err(Error::ShapeMismatch {
            op: "sgld_run",
            shapes: vec![vec![d], vec![score.dim()]],
        });
    }
    let sign = match cfg.direction {
        Direction::Toward => 1.0,
        Direction::Away => -1.0,
    };
    let drift = sign * cfg.alpha;
    let diffusion = (2.0 * cfg.alpha).sqrt();
    let mut states = Vec::with_capacity((cfg.steps + 1) * d);
    states.extend_from_slice(x0);
    let mut x = x0.to_vec();
    for step in 1..=cfg.steps {
        let s = score.score(&x, y)?;
        for (xi, si) in x.iter_mut().zip(&s) {
            let e: f64 = StandardNormal.sample(rng);
            *xi += drift * si + diffusion * e;
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm <= cfg.divergence_bound) {
            return Err(Error::Diverged { step, norm });
        }
        states.extend_from_slice(&x);
    }
    Ok(Trajectory { dim: d, states })
}
