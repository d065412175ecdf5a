use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use unlearn_core::datasets::{self, GaussianMixtureSpec, LabeledDataset};
use unlearn_core::models::{ArchSpec, ClassifierModel, ScoreModel};
use unlearn_core::par::ExecMode;
use unlearn_core::poison::{self, PerturbationBudget};
use unlearn_core::scorelab::{self, Direction, SgldConfig};
use unlearn_core::victim;

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn data(dim: usize, n: usize) -> LabeledDataset {
    datasets::gen_mixture(&GaussianMixtureSpec::gaussian_pair(dim, 4.0, 1.0), n, 1).unwrap()
}

fn sgld(c: &mut Criterion) {
    let score = ScoreModel::<f32>::init(&ArchSpec::score(16, 2), 2, 0.5, 2).unwrap();
    let starts: Vec<(Vec<f64>, usize)> = (0..64).map(|i| (vec![0.0; 16], i % 2)).collect();
    let cfg = SgldConfig::new(1e-2, 100, Direction::Toward, 3);
    let mut g = c.benchmark_group("sgld_chains");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| scorelab::sgld_chains(&score, &starts, &cfg, mode).unwrap())
        });
    }
    g.finish();
}

fn emit(c: &mut Criterion) {
    let train = data(64, 256);
    let surrogate = ClassifierModel::<f32>::init(&ArchSpec::new(64, &[64, 64], 2, Default::default()), 4).unwrap();
    let score = ScoreModel::<f32>::init(&ArchSpec::score(64, 2), 2, 0.5, 5).unwrap();
    let budget = PerturbationBudget::with_radii(0.5, 0.25);
    let mut g = c.benchmark_group("emit_poison");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| poison::emit_poison(&surrogate, &score, &train, &budget, 6, mode).unwrap())
        });
    }
    g.finish();
}

fn evaluate(c: &mut Criterion) {
    let test = data(256, 2000);
    let model = ClassifierModel::<f32>::init(&ArchSpec::new(256, &[128, 128], 2, Default::default()), 7).unwrap();
    let mut g = c.benchmark_group("evaluate");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| victim::evaluate_with(&model, &test, mode).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, sgld, emit, evaluate);
criterion_main!(benches);
