//! Protection and collapse measurements, the CSV report and 2-D scatters.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::ScoreModel;
use crate::tensor::{self, Scalar, Tensor};

/// One row of `report.csv`. Columns appear in field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub dataset: String,
    pub surrogate_arch: String,
    pub victim_arch: String,
    pub rho_u: f64,
    pub rho_a_train: f64,
    pub fraction: f64,
    pub clean_test_acc: f64,
    pub poisoned_test_acc: f64,
    pub mean_score_norm_clean: f64,
    pub mean_score_norm_poisoned: f64,
    pub intra_class_spread_clean: f64,
    pub intra_class_spread_poisoned: f64,
}

pub const REPORT_COLUMNS: [&str; 13] = [
    "run_id",
    "dataset",
    "surrogate_arch",
    "victim_arch",
    "rho_u",
    "rho_a_train",
    "fraction",
    "clean_test_acc",
    "poisoned_test_acc",
    "mean_score_norm_clean",
    "mean_score_norm_poisoned",
    "intra_class_spread_clean",
    "intra_class_spread_poisoned",
];

pub fn report_bytes(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_report(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, report_bytes(records)?)?;
    Ok(())
}

pub fn read_report(bytes: &[u8]) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != REPORT_COLUMNS {
        return Err(Error::Malformed(format!("unexpected report columns {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spread {
    /// Mean pairwise distance within each class (0 for singletons).
    pub per_class: Vec<f64>,
    /// Mean over all within-class pairs.
    pub pooled: f64,
}

/// Exact all-pairs intra-class spread.
pub fn intra_class_spread<T: Scalar>(features: &Tensor<T>, labels: &[usize], num_classes: usize) -> Result<Spread> {
    let (n, _) = tensor::expect_matrix("intra_class_spread", features)?;
    if n != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "intra_class_spread",
            shapes: vec![features.shape().to_vec(), vec![labels.len()]],
        });
    }
    let mut members = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        members
            .get_mut(y)
            .ok_or(Error::LabelOutOfRange {
                label: y as f64,
                classes: num_classes,
            })?
            .push(i);
    }
    let mut per_class = Vec::with_capacity(num_classes);
    let (mut total, mut pairs) = (0.0, 0usize);
    for (class, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::EmptyClass { class });
        }
        let mut sum = 0.0;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                sum += distance(features.row(i), features.row(j));
            }
        }
        let count = idx.len() * (idx.len() - 1) / 2;
        per_class.push(if count == 0 { 0.0 } else { sum / count as f64 });
        total += sum;
        pairs += count;
    }
    let pooled = if pairs == 0 { 0.0 } else { total / pairs as f64 };
    Ok(Spread { per_class, pooled })
}

fn distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean and population standard deviation of `‖s(x, y)‖` over a dataset.
pub fn score_norm_stats<T: Scalar>(score: &ScoreModel<T>, data: &LabeledDataset) -> Result<(f64, f64)> {
    let norms = score_norms(score, data)?;
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

pub fn score_norms<T: Scalar>(score: &ScoreModel<T>, data: &LabeledDataset) -> Result<Vec<f64>> {
    let s = score.eval(&data.features.cast(), &data.labels)?;
    Ok(tensor::row_norms(&s)?.data().iter().map(|v| v.as_f64()).collect())
}

/// Linear map to two dimensions: the top principal axes, or the identity
/// when the data is already 2-D.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// Two unit rows of length `d`.
    pub axes: [Vec<f64>; 2],
    /// Variance along each axis, largest first.
    pub variances: [f64; 2],
    pub is_pca: bool,
}

impl Projection {
    pub fn fit<T: Scalar>(features: &Tensor<T>) -> Result<Self> {
        let (n, d) = tensor::expect_matrix("pca", features)?;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(features.row(i)) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let c: Vec<f64> = features.row(i).iter().zip(&mean).map(|(v, m)| v.as_f64() - m).collect();
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += c[a] * c[b];
                }
            }
        }
        cov /= n as f64;
        if d == 2 {
            return Ok(Self {
                axes: [vec![1.0, 0.0], vec![0.0, 1.0]],
                variances: [cov[(0, 0)], cov[(1, 1)]],
                mean,
                is_pca: false,
            });
        }
        if d < 2 {
            return Err(Error::InvalidConfig("a scatter needs at least two features".into()));
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let axis = |k: usize| eig.eigenvectors.column(order[k]).iter().copied().collect::<Vec<f64>>();
        Ok(Self {
            axes: [axis(0), axis(1)],
            variances: [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]],
            mean,
            is_pca: true,
        })
    }

    pub fn apply<T: Scalar>(&self, row: &[T]) -> [f64; 2] {
        let dot = |axis: &[f64]| -> f64 {
            row.iter()
                .zip(&self.mean)
                .zip(axis)
                .map(|((v, m), a)| (v.as_f64() - m) * a)
                .sum()
        };
        [dot(&self.axes[0]), dot(&self.axes[1])]
    }
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Render clean points as filled dots and optional poisoned points as
/// hollow squares, colored by class. The projection is fit on the clean
/// data and recorded in the SVG metadata.
pub fn scatter_svg(clean: &LabeledDataset, poisoned: Option<&LabeledDataset>) -> Result<String> {
    let proj = Projection::fit(&clean.features)?;
    let mut layers = vec![(clean, false)];
    if let Some(p) = poisoned {
        if p.dim() != clean.dim() {
            return Err(Error::ShapeMismatch {
                op: "scatter_svg",
                shapes: vec![clean.features.shape().to_vec(), p.features.shape().to_vec()],
            });
        }
        layers.push((p, true));
    }
    let points: Vec<Vec<[f64; 2]>> = layers
        .iter()
        .map(|(ds, _)| (0..ds.len()).map(|i| proj.apply(ds.features.row(i))).collect())
        .collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points.iter().flatten() {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let (size, pad) = (480.0, 20.0);
    let scale = |v: f64, k: usize| {
        let span = (hi[k] - lo[k]).max(1e-12);
        let t = (v - lo[k]) / span;
        if k == 0 {
            pad + t * (size - 2.0 * pad)
        } else {
            size - pad - t * (size - 2.0 * pad)
        }
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let kind = if proj.is_pca { "pca" } else { "identity" };
    let _ = writeln!(
        svg,
        r#"<metadata>projection={kind}; variances={:.6},{:.6}; dataset={}</metadata>"#,
        proj.variances[0], proj.variances[1], clean.name
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for ((ds, marked), pts) in layers.iter().zip(&points) {
        for (p, &y) in pts.iter().zip(&ds.labels) {
            let color = PALETTE[y % PALETTE.len()];
            let (x, yv) = (scale(p[0], 0), scale(p[1], 1));
            if *marked {
                let _ = writeln!(
                    svg,
                    r#"<rect class="poisoned" x="{:.2}" y="{:.2}" width="5" height="5" fill="none" stroke="{color}"/>"#,
                    x - 2.5,
                    yv - 2.5
                );
            } else {
                let _ = writeln!(svg, r#"<circle class="clean" cx="{x:.2}" cy="{yv:.2}" r="2" fill="{color}"/>"#);
            }
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_scatter(clean: &LabeledDataset, poisoned: Option<&LabeledDataset>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, scatter_svg(clean, poisoned)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ArchSpec, Mlp};

    #[test]
    fn spread_examples() {
        let same = Tensor::<f64>::matrix(3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(intra_class_spread(&same, &[0, 0, 0], 1).unwrap().pooled, 0.0);
        let two = Tensor::<f64>::matrix(2, 1, vec![0.0, 2.0]).unwrap();
        assert_eq!(intra_class_spread(&two, &[0, 0], 1).unwrap().pooled, 2.0);
        let single = intra_class_spread(&two, &[0, 1], 2).unwrap();
        assert_eq!(single.per_class, vec![0.0, 0.0]);
        assert!(matches!(intra_class_spread(&two, &[0, 0], 2), Err(Error::EmptyClass { class: 1 })));
    }

    #[test]
    fn empty_report_is_header_only() {
        let bytes = report_bytes(&[]).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), format!("{}\n", REPORT_COLUMNS.join(",")));
    }

    #[test]
    fn zero_score_stats() {
        let ds = LabeledDataset::new("t", Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(), vec![0, 1, 0], 2).unwrap();
        let score = ScoreModel::new(Mlp::<f32>::zeros(&ArchSpec::score(2, 2)).unwrap(), 2, 0.5).unwrap();
        assert_eq!(score_norm_stats(&score, &ds).unwrap(), (0.0, 0.0));
    }
}
