//! Synthetic labeled point clouds with known class densities, the `ULDS`
//! dataset file, and feature standardization.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::Reader;
use crate::rng;
use crate::tensor::{log_sum_exp, Tensor};

/// `n` points in `R^d` with labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, features: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            features,
            labels,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.features.shape();
        if shape.len() != 2 || shape[0] != self.labels.len() || self.labels.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                shapes: vec![shape.to_vec(), vec![self.labels.len()]],
            });
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("dataset needs at least one class".into()));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: y as f64,
                classes: self.num_classes,
            });
        }
        if !self.features.is_finite() {
            return Err(Error::NonFinite { op: "dataset" });
        }
        Ok(())
    }

    /// Training splits must contain every class.
    pub fn require_all_classes(&self) -> Result<()> {
        let counts = self.class_counts();
        match counts.iter().position(|&c| c == 0) {
            Some(class) => Err(Error::EmptyClass { class }),
            None => Ok(()),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            features: self.features.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Same data with replaced features.
    pub fn with_features(&self, features: Tensor<f32>) -> Result<Self> {
        Self::new(self.name.clone(), features, self.labels.clone(), self.num_classes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.features.len() * 4 + self.labels.len() * 2);
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for &v in self.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u16).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(name: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: DATASET_VERSION,
            });
        }
        let n = r.u64("n")? as usize;
        let d = r.u32("d")? as usize;
        let k = r.u32("K")? as usize;
        if n == 0 || d == 0 {
            return Err(Error::Malformed(format!("empty dataset n={n} d={d}")));
        }
        let raw = r.take(n.checked_mul(d).and_then(|v| v.checked_mul(4)).ok_or(Error::Truncated { what: "features" })?, "features")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.u16("labels")? as usize);
        }
        r.finish()?;
        let features = Tensor::new(vec![n, d], data)?;
        Self::new(name, features, labels, k).map_err(|e| match e {
            Error::LabelOutOfRange { .. } | Error::NonFinite { .. } => Error::Malformed(e.to_string()),
            other => other,
        })
    }

    /// SHA-256 of the `ULDS` encoding.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

const DATASET_MAGIC: [u8; 4] = *b"ULDS";
const DATASET_VERSION: u32 = 1;

pub fn save_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ds.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabeledDataset::from_bytes(name, &fs::read(path)?)
}

/// Isotropic Gaussian component `N(mean, cov_scale² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    pub cov_scale: f64,
}

/// One class: an equal-weight mixture of components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub components: Vec<Component>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub classes: Vec<ClassSpec>,
}

impl GaussianMixtureSpec {
    /// Equal-weight classes, one component each.
    pub fn isotropic(means: &[Vec<f64>], cov_scale: f64) -> Self {
        let w = 1.0 / means.len() as f64;
        Self {
            classes: means
                .iter()
                .map(|m| ClassSpec {
                    components: vec![Component {
                        mean: m.clone(),
                        cov_scale,
                    }],
                    weight: w,
                })
                .collect(),
        }
    }

    /// Two classes in `R^dim` with means `±separation/2` on the first axis.
    pub fn gaussian_pair(dim: usize, separation: f64, cov_scale: f64) -> Self {
        let mut a = vec![0.0; dim];
        let mut b = vec![0.0; dim];
        a[0] = -separation / 2.0;
        b[0] = separation / 2.0;
        Self::isotropic(&[a, b], cov_scale)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.classes
            .first()
            .and_then(|c| c.components.first())
            .map_or(0, |c| c.mean.len())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.classes.is_empty() || d == 0 {
            return Err(Error::InvalidConfig("mixture needs classes and a positive dimension".into()));
        }
        let mut total = 0.0;
        for (c, class) in self.classes.iter().enumerate() {
            if class.components.is_empty() {
                return Err(Error::InvalidConfig(format!("class {c} has no components")));
            }
            if !(class.weight > 0.0) {
                return Err(Error::InvalidConfig(format!("class {c} weight must be positive")));
            }
            total += class.weight;
            for comp in &class.components {
                if comp.mean.len() != d {
                    return Err(Error::InvalidConfig(format!("class {c} mean has wrong dimension")));
                }
                if !(comp.cov_scale > 0.0) || !comp.cov_scale.is_finite() {
                    return Err(Error::InvalidConfig(format!("class {c} cov_scale must be positive")));
                }
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("class weights sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// Draw `n_per_class` points from every class, grouped by class.
pub fn gen_mixture(spec: &GaussianMixtureSpec, n_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be at least 1".into()));
    }
    let d = spec.dim();
    let mut rng = rng::rng_from_seed(seed);
    let mut data = Vec::with_capacity(spec.num_classes() * n_per_class * d);
    let mut labels = Vec::with_capacity(spec.num_classes() * n_per_class);
    for (c, class) in spec.classes.iter().enumerate() {
        for _ in 0..n_per_class {
            let comp = if class.components.len() == 1 {
                &class.components[0]
            } else {
                &class.components[rng.random_range(0..class.components.len())]
            };
            for &m in &comp.mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push((m + comp.cov_scale * z) as f32);
            }
            labels.push(c);
        }
    }
    let n = labels.len();
    LabeledDataset::new("mixture", Tensor::new(vec![n, d], data)?, labels, spec.num_classes())
}

/// Two interleaved half circles: class 0 on `(cos t, sin t)`, class 1 on
/// `(1 - cos t, 0.5 - sin t)`, `t` evenly spaced over `[0, π]`, plus
/// isotropic Gaussian noise.
pub fn gen_two_moons(n_per_class: usize, noise_scale: f64, seed: u64) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be at least 1".into()));
    }
    if !(noise_scale >= 0.0) {
        return Err(Error::InvalidConfig("noise_scale must be non-negative".into()));
    }
    let mut rng = rng::rng_from_seed(seed);
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    let step = if n_per_class > 1 {
        PI / (n_per_class - 1) as f64
    } else {
        0.0
    };
    for class in 0..2 {
        for i in 0..n_per_class {
            let t = i as f64 * step;
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let (nx, ny): (f64, f64) = if noise_scale > 0.0 {
                (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            data.push((x + noise_scale * nx) as f32);
            data.push((y + noise_scale * ny) as f32);
            labels.push(class);
        }
    }
    LabeledDataset::new("two_moons", Tensor::new(vec![2 * n_per_class, 2], data)?, labels, 2)
}

fn component_log_density(comp: &Component, variance: f64, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(&comp.mean).map(|(a, m)| (a - m) * (a - m)).sum();
    -sq / (2.0 * variance) - 0.5 * d * (2.0 * PI * variance).ln()
}

/// `log q_σ(x | y)` for the class density convolved with `N(0, σ² I)`.
pub fn log_density(spec: &GaussianMixtureSpec, smoothing: f64, x: &[f64], y: usize) -> Result<f64> {
    let class = class_of(spec, x, y)?;
    let log_w = -(class.components.len() as f64).ln();
    let terms: Vec<f64> = class
        .components
        .iter()
        .map(|c| log_w + component_log_density(c, c.cov_scale * c.cov_scale + smoothing * smoothing, x))
        .collect();
    Ok(log_sum_exp(&terms))
}

/// `∇_x log q_σ(x | y)`. For a single component this is
/// `(μ − x) / (s² + σ²)`; for several it is the responsibility-weighted
/// average of the component scores.
pub fn analytic_score(spec: &GaussianMixtureSpec, smoothing: f64, x: &[f64], y: usize) -> Result<Vec<f64>> {
    let class = class_of(spec, x, y)?;
    let vars: Vec<f64> = class
        .components
        .iter()
        .map(|c| c.cov_scale * c.cov_scale + smoothing * smoothing)
        .collect();
    let logs: Vec<f64> = class
        .components
        .iter()
        .zip(&vars)
        .map(|(c, &v)| component_log_density(c, v, x))
        .collect();
    let lse = log_sum_exp(&logs);
    let mut score = vec![0.0; x.len()];
    for ((comp, &v), &l) in class.components.iter().zip(&vars).zip(&logs) {
        let r = (l - lse).exp();
        for ((s, &xi), &m) in score.iter_mut().zip(x).zip(&comp.mean) {
            *s += r * (m - xi) / v;
        }
    }
    Ok(score)
}

fn class_of<'a>(spec: &'a GaussianMixtureSpec, x: &[f64], y: usize) -> Result<&'a ClassSpec> {
    let class = spec.classes.get(y).ok_or(Error::LabelOutOfRange {
        label: y as f64,
        classes: spec.num_classes(),
    })?;
    if x.len() != spec.dim() {
        return Err(Error::ShapeMismatch {
            op: "analytic_score",
            shapes: vec![vec![x.len()], vec![spec.dim()]],
        });
    }
    Ok(class)
}

/// Per-dimension affine standardization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(ds: &LabeledDataset) -> Result<Self> {
        let (n, d) = (ds.len(), ds.dim());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(ds.features.row(i)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, &v), &m) in var.iter_mut().zip(ds.features.row(i)).zip(&mean) {
                let c = v as f64 - m;
                *s += c * c;
            }
        }
        let mut std = Vec::with_capacity(d);
        for (dim, v) in var.into_iter().enumerate() {
            let s = (v / n as f64).sqrt();
            if !(s > 0.0) {
                return Err(Error::ZeroVariance { dim });
            }
            std.push(s);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        self.map(ds, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        self.map(ds, |v, m, s| v * s + m)
    }

    fn map(&self, ds: &LabeledDataset, f: impl Fn(f64, f64, f64) -> f64) -> Result<LabeledDataset> {
        if ds.dim() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                shapes: vec![ds.features.shape().to_vec(), vec![self.mean.len()]],
            });
        }
        let mut features = ds.features.clone();
        for i in 0..ds.len() {
            for ((v, &m), &s) in features.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = f(*v as f64, m, s) as f32;
            }
        }
        ds.with_features(features)
    }
}

/// Standardize features to zero mean and unit per-dimension std.
pub fn normalize(ds: &LabeledDataset) -> Result<(LabeledDataset, Normalizer)> {
    let norm = Normalizer::fit(ds)?;
    Ok((norm.apply(ds)?, norm))
}
