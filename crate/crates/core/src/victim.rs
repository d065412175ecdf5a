//! Victim training and evaluation.
//!
//! A victim is whoever trains a classifier on released data. Training is
//! plain minibatch gradient descent, or PGD adversarial training with a
//! random start when `rho_a_train > 0`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{ArchSpec, ClassifierModel, GradRequest, Reduction};
use crate::par::{self, ExecMode};
use crate::poison::{self, PoisonedDataset};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimTrainConfig {
    pub arch: ArchSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub rho_a_train: f64,
    #[serde(default = "default_pgd_steps")]
    pub pgd_steps: usize,
    /// Defaults to `rho_a_train / 4` when absent.
    #[serde(default)]
    pub pgd_step_size: Option<f64>,
    pub seed: u64,
}

fn default_pgd_steps() -> usize {
    10
}

impl VictimTrainConfig {
    pub fn new(arch: ArchSpec, epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            arch,
            epochs,
            batch_size,
            learning_rate,
            rho_a_train: 0.0,
            pgd_steps: default_pgd_steps(),
            pgd_step_size: None,
            seed,
        }
    }

    pub fn adversarial(mut self, rho: f64) -> Self {
        self.rho_a_train = rho;
        self
    }

    pub fn step_size(&self) -> f64 {
        self.pgd_step_size.unwrap_or(self.rho_a_train / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let ok = self.batch_size > 0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.rho_a_train >= 0.0
            && self.rho_a_train.is_finite()
            && (self.rho_a_train == 0.0 || (self.pgd_steps >= 1 && self.step_size() > 0.0));
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid victim config: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// NaN when no test set was given.
    pub test_acc: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "train_acc", "test_acc"])?;
    for r in history {
        w.serialize((r.epoch, r.train_loss, r.train_acc, r.test_acc))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Train a fresh victim on `data`. The initial weights come from the
/// `init` stream of `cfg.seed`; shuffling and PGD starts from `cfg.seed`.
pub fn train_victim<T: Scalar>(
    data: &LabeledDataset,
    test: Option<&LabeledDataset>,
    cfg: &VictimTrainConfig,
) -> Result<(ClassifierModel<T>, Vec<EpochRecord>)> {
    cfg.validate()?;
    data.validate()?;
    if cfg.arch.input_dim != data.dim() || cfg.arch.output_dim != data.num_classes {
        return Err(Error::ShapeMismatch {
            op: "train_victim",
            shapes: vec![vec![cfg.arch.input_dim, cfg.arch.output_dim], vec![data.dim(), data.num_classes]],
        });
    }
    let mut model = ClassifierModel::<T>::init(&cfg.arch, rng::stream_seed(cfg.seed, "init"))?;
    let mut rng = rng::rng_from_seed(cfg.seed);
    let features: Tensor<T> = data.features.cast();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = features.gather_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let x = if cfg.rho_a_train > 0.0 {
                let init = Tensor::new(
                    x.shape().to_vec(),
                    (0..x.len())
                        .map(|_| T::of(rng::symmetric_uniform(&mut rng, cfg.rho_a_train)))
                        .collect(),
                )?;
                let delta = poison::pgd_ascent(&model, &x, &labels, cfg.rho_a_train, cfg.step_size(), cfg.pgd_steps, init)?;
                debug_assert!(poison::within_ball(&delta, cfg.rho_a_train));
                x.add(&delta)?
            } else {
                x
            };
            let out = model.loss(&x, &labels, Reduction::Mean, GradRequest::PARAMS)?;
            let loss = out.loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NanLoss { stage: "train_victim", step });
            }
            model.net.sgd_step(&out.param_grads.expect("requested"), cfg.learning_rate)?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / data.len() as f64,
            train_acc: evaluate(&model, data)?,
            test_acc: match test {
                Some(t) => evaluate(&model, t)?,
                None => f64::NAN,
            },
        };
        log::debug!(
            "victim epoch {epoch}: loss {:.4} train {:.3} test {:.3}",
            record.train_loss,
            record.train_acc,
            record.test_acc
        );
        history.push(record);
    }
    Ok((model, history))
}

/// Fraction of examples whose argmax prediction matches the label.
pub fn evaluate<T: Scalar>(model: &ClassifierModel<T>, data: &LabeledDataset) -> Result<f64> {
    evaluate_with(model, data, ExecMode::Sequential)
}

pub fn evaluate_with<T: Scalar>(model: &ClassifierModel<T>, data: &LabeledDataset, mode: ExecMode) -> Result<f64> {
    if model.input_dim() != data.dim() || model.num_classes() != data.num_classes {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            shapes: vec![vec![model.input_dim(), model.num_classes()], vec![data.dim(), data.num_classes]],
        });
    }
    if data.is_empty() {
        return Err(Error::InvalidConfig("evaluate on an empty dataset".into()));
    }
    let features: Tensor<T> = data.features.cast();
    let counts = par::map_chunks(mode, data.len(), 256, |a, b| -> Result<usize> {
        let idx: Vec<usize> = (a..b).collect();
        let pred = model.predict(&features.gather_rows(&idx))?;
        Ok(pred.iter().zip(&data.labels[a..b]).filter(|(p, y)| p == y).count())
    });
    let mut correct = 0;
    for c in counts {
        correct += c?;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Protect only `round(p·n)` examples, chosen uniformly by `seed`; the
/// rest stay clean.
pub fn mix_partial(clean: &LabeledDataset, poisoned: &PoisonedDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!("protection fraction {fraction} outside [0, 1]")));
    }
    if clean.content_hash() != poisoned.base.content_hash() {
        return Err(Error::BaseMismatch);
    }
    let n = clean.len();
    let k = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng_from_seed(seed));
    let mut features = clean.features.clone();
    for &i in &order[..k] {
        for (v, &e) in features.row_mut(i).iter_mut().zip(poisoned.noise.row(i)) {
            *v += e;
        }
    }
    clean.with_features(features)
}
