//! Brute-force oracles and cross-mode equivalence checks.

use unlearn_core::datasets::{self, GaussianMixtureSpec, LabeledDataset};
use unlearn_core::metrics::{self, Projection};
use unlearn_core::models::{ArchSpec, ClassifierModel, GradRequest, Reduction, ScoreModel};
use unlearn_core::par::ExecMode;
use unlearn_core::poison::{self, GeneratorConfig, PerturbationBudget, PoisonedDataset};
use unlearn_core::rng;
use unlearn_core::scorelab::{self, Direction, SgldConfig};
use unlearn_core::tensor::{self, Tensor};
use unlearn_core::victim::{self, VictimTrainConfig};
use unlearn_core::Error;

fn pair(dim: usize, n: usize, seed: u64) -> LabeledDataset {
    datasets::gen_mixture(&GaussianMixtureSpec::gaussian_pair(dim, 3.0, 1.0), n, seed).unwrap()
}

fn trained_surrogate(data: &LabeledDataset) -> ClassifierModel {
    let cfg = VictimTrainConfig::new(ArchSpec::classifier(data.dim(), 2), 5, 16, 0.1, 1);
    victim::train_victim::<f32>(data, None, &cfg).unwrap().0
}

fn score_model(dim: usize) -> ScoreModel {
    ScoreModel::init(&ArchSpec::score(dim, 2), 2, 0.5, 5).unwrap()
}

#[test]
fn spread_matches_pairwise_loop() {
    let data = datasets::gen_mixture(&GaussianMixtureSpec::isotropic(&[vec![0.0; 4], vec![1.0; 4], vec![-1.0; 4]], 1.0), 10, 8).unwrap();
    let s = metrics::intra_class_spread(&data.features, &data.labels, 3).unwrap();
    let (mut total, mut pairs) = (0.0, 0usize);
    for c in 0..3 {
        let rows: Vec<&[f32]> = (0..data.len()).filter(|&i| data.labels[i] == c).map(|i| data.features.row(i)).collect();
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                if i < j {
                    sum += rows[i].iter().zip(rows[j]).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>().sqrt();
                    count += 1;
                }
            }
        }
        assert!((s.per_class[c] - sum / count as f64).abs() < 1e-9);
        total += sum;
        pairs += count;
    }
    assert!((s.pooled - total / pairs as f64).abs() < 1e-9);
}

#[test]
fn score_norm_stats_match_per_example_loop() {
    let data = pair(3, 20, 2);
    let score = score_model(3);
    let (mean, std) = metrics::score_norm_stats(&score, &data).unwrap();
    let norms: Vec<f64> = (0..data.len())
        .map(|i| {
            let x = data.features.gather_rows(&[i]);
            let s = score.eval(&x, &data.labels[i..=i]).unwrap();
            s.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    let m = norms.iter().sum::<f64>() / norms.len() as f64;
    let v = norms.iter().map(|n| (n - m).powi(2)).sum::<f64>() / norms.len() as f64;
    assert!((mean - m).abs() < 1e-6 * m.max(1.0));
    assert!((std - v.sqrt()).abs() < 1e-6 * m.max(1.0));
}

#[test]
fn evaluate_matches_per_example_loop() {
    let data = pair(4, 25, 3);
    let model = ClassifierModel::<f32>::init(&ArchSpec::classifier(4, 2), 9).unwrap();
    let correct = (0..data.len())
        .filter(|&i| {
            let logits = model.logits(&data.features.gather_rows(&[i])).unwrap();
            tensor::argmax(logits.data()) == data.labels[i]
        })
        .count();
    let expect = correct as f64 / data.len() as f64;
    assert_eq!(victim::evaluate(&model, &data).unwrap(), expect);
    assert_eq!(victim::evaluate_with(&model, &data, ExecMode::Parallel).unwrap(), expect);
}

#[test]
fn pca_agrees_with_power_iteration() {
    use rand::Rng;
    let mut r = rng::rng_from_seed(4);
    let scales = [3.0, 0.5, 2.0, 0.2, 1.0];
    let data: Vec<f64> = (0..400 * 5).map(|k| scales[k % 5] * r.random_range(-1.0..1.0)).collect();
    let x = Tensor::matrix(400, 5, data).unwrap();
    let proj = Projection::fit(&x).unwrap();
    assert!(proj.is_pca);
    assert!(proj.variances[0] >= proj.variances[1]);

    let mut cov = [[0.0f64; 5]; 5];
    for i in 0..400 {
        let row: Vec<f64> = x.row(i).iter().zip(&proj.mean).map(|(v, m)| v - m).collect();
        for a in 0..5 {
            for b in 0..5 {
                cov[a][b] += row[a] * row[b] / 400.0;
            }
        }
    }
    let top = |cov: &[[f64; 5]; 5]| {
        let mut v = [1.0, 0.9, 0.8, 0.7, 0.6];
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let w: Vec<f64> = (0..5).map(|a| (0..5).map(|b| cov[a][b] * v[b]).sum()).collect();
            lambda = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            for a in 0..5 {
                v[a] = w[a] / lambda;
            }
        }
        (lambda, v)
    };
    let (l1, v1) = top(&cov);
    let mut deflated = cov;
    for a in 0..5 {
        for b in 0..5 {
            deflated[a][b] -= l1 * v1[a] * v1[b];
        }
    }
    let (l2, _) = top(&deflated);
    // Population and sample variance differ by n/(n-1); compare both ways.
    let rel = |got: f64, want: f64| ((got - want) / want).abs().min(((got - want * 400.0 / 399.0) / want).abs());
    assert!(rel(proj.variances[0], l1) < 1e-6, "{} vs {l1}", proj.variances[0]);
    assert!(rel(proj.variances[1], l2) < 1e-6, "{} vs {l2}", proj.variances[1]);
    let cos: f64 = proj.axes[0].iter().zip(&v1).map(|(a, b)| a * b).sum();
    assert!((cos.abs() - 1.0).abs() < 1e-6);
}

#[test]
fn stage_two_raises_loss_of_trained_surrogate() {
    let data = pair(8, 100, 6);
    let model = trained_surrogate(&data);
    let budget = PerturbationBudget::with_radii(0.5, 0.25);
    let delta = poison::craft_stage_two(&model, &data.features, &data.labels, &budget).unwrap();
    let before = model.loss(&data.features, &data.labels, Reduction::Mean, GradRequest::NONE).unwrap();
    let after = model.loss(&data.features.add(&delta).unwrap(), &data.labels, Reduction::Mean, GradRequest::NONE).unwrap();
    let raised = before.per_example.iter().zip(&after.per_example).filter(|(b, a)| a >= b).count();
    assert!(raised as f64 >= 0.95 * data.len() as f64, "{raised} of {}", data.len());
}

#[test]
fn crafting_leaves_the_score_model_untouched() {
    let data = pair(6, 40, 7);
    let score = score_model(6);
    let frozen = score.clone();
    let surrogate = ClassifierModel::init(&ArchSpec::classifier(6, 2), 3).unwrap();
    let budget = PerturbationBudget::with_radii(0.5, 0.25);
    let cfg = GeneratorConfig {
        iterations: 10,
        learning_rate: 0.05,
        batch_size: 16,
        seed: 11,
        record_noise: false,
        exec: ExecMode::Sequential,
    };
    let (trained, history) = poison::train_generator(&surrogate, &score, &data, &budget, &cfg).unwrap();
    assert_eq!(history.violations, 0);
    poison::emit_poison(&trained, &score, &data, &budget, 12, ExecMode::Parallel).unwrap();
    assert_eq!(score, frozen);
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let data = pair(5, 60, 9);
    let score = score_model(5);
    let surrogate = trained_surrogate(&data);
    let budget = PerturbationBudget::with_radii(0.5, 0.25);
    let craft = |chunk, mode| {
        let mut r = rng::rng_from_seed(21);
        poison::craft_stage_one_chunked(&surrogate, &score, &data.features, &data.labels, &budget, &mut r, chunk, mode).unwrap()
    };
    let reference = craft(data.len(), ExecMode::Sequential);
    assert_eq!(craft(7, ExecMode::Parallel), reference);
    assert_eq!(craft(16, ExecMode::Sequential), reference);

    let emit = |mode| poison::emit_poison(&surrogate, &score, &data, &budget, 3, mode).unwrap().to_bytes();
    assert_eq!(emit(ExecMode::Sequential), emit(ExecMode::Parallel));

    let starts: Vec<(Vec<f64>, usize)> = (0..10).map(|i| (vec![i as f64 * 0.1; 5], i % 2)).collect();
    let cfg = SgldConfig::new(1e-2, 50, Direction::Toward, 4);
    let seq = scorelab::sgld_chains(&score, &starts, &cfg, ExecMode::Sequential).unwrap();
    let par = scorelab::sgld_chains(&score, &starts, &cfg, ExecMode::Parallel).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn zero_radius_adversarial_training_is_standard_training() {
    let data = pair(4, 30, 10);
    let standard = VictimTrainConfig::new(ArchSpec::classifier(4, 2), 3, 8, 0.1, 2);
    let mut zero = standard.clone().adversarial(0.0);
    zero.pgd_steps = 3;
    zero.pgd_step_size = Some(0.7);
    let a = victim::train_victim::<f32>(&data, None, &standard).unwrap().0;
    let b = victim::train_victim::<f32>(&data, None, &zero).unwrap().0;
    assert_eq!(a, b);
}

#[test]
fn partial_mixing_and_poison_files() {
    let data = pair(3, 20, 11);
    let noise = Tensor::full(&[data.len(), data.dim()], 0.25f32);
    let poisoned = PoisonedDataset::new(data.clone(), noise, PerturbationBudget::with_radii(0.5, 0.25)).unwrap();
    let back = PoisonedDataset::from_bytes(&poisoned.to_bytes(), data.clone()).unwrap();
    assert_eq!(back.to_bytes(), poisoned.to_bytes());

    let other = pair(3, 20, 12);
    assert!(matches!(PoisonedDataset::from_bytes(&poisoned.to_bytes(), other), Err(Error::BaseMismatch)));

    let mixed = victim::mix_partial(&data, &poisoned, 0.25, 5).unwrap();
    let changed = (0..data.len()).filter(|&i| mixed.features.row(i) != data.features.row(i)).count();
    assert_eq!(changed, 10);
    assert_eq!(mixed.labels, data.labels);
    assert_eq!(victim::mix_partial(&data, &poisoned, 0.0, 5).unwrap(), data);
    assert_eq!(victim::mix_partial(&data, &poisoned, 1.0, 5).unwrap(), poisoned.poisoned().unwrap());
}

#[test]
fn datasets_round_trip_through_bytes() {
    let data = datasets::gen_two_moons(15, 0.1, 3).unwrap();
    let back = LabeledDataset::from_bytes(data.name.clone(), &data.to_bytes()).unwrap();
    assert_eq!(back, data);
    let mut bytes = data.to_bytes();
    bytes[0] ^= 1;
    assert!(matches!(LabeledDataset::from_bytes("x", &bytes), Err(Error::BadMagic { .. })));
    assert!(matches!(LabeledDataset::from_bytes("x", &data.to_bytes()[..10]), Err(Error::Truncated { .. })));
}
