use approx::assert_relative_eq;
use proptest::prelude::*;

use unlearn_core::datasets::{self, Component, ClassSpec, GaussianMixtureSpec, LabeledDataset};
use unlearn_core::diff::{self, Bindings, Graph};
use unlearn_core::metrics::{self, MetricsRecord};
use unlearn_core::models::{ArchSpec, ClassifierModel, GradRequest, ModelFile, Reduction, ScoreModel};
use unlearn_core::poison::{self, PerturbationBudget};
use unlearn_core::scorelab::{self, AnalyticScore, Direction, SgldConfig};
use unlearn_core::tensor::Tensor;
use unlearn_core::victim;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

fn labeled(n: usize, d: usize, k: usize) -> impl Strategy<Value = (Tensor<f64>, Vec<usize>)> {
    (matrix(n, d), prop::collection::vec(0..k, n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_lands_in_ball(v in prop::collection::vec(-10.0f64..10.0, 1..40), rho in 0.0f64..3.0) {
        let delta = Tensor::vector(v.clone());
        let p = poison::project_linf(&delta, rho);
        prop_assert!(p.max_abs() <= rho);
        prop_assert_eq!(poison::project_linf(&p, rho), p.clone());
        let p32 = poison::project_linf(&delta.cast::<f32>(), rho);
        prop_assert!(p32.max_abs() as f64 <= rho + 1e-7);
        for (a, b) in v.iter().zip(p.data()) {
            if a.abs() <= rho {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn backward_is_linear(x in matrix(3, 4), w in matrix(3, 4), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        // f = Σ tanh(x)·w, g = ‖x‖, h = a f + b g
        let build = |which: u8| {
            let mut g = Graph::new();
            let xi = g.param("x");
            let wi = g.input("w");
            let t = g.tanh(xi);
            let m = g.mul(t, wi);
            let f = g.sum(m);
            let n = g.norm(xi);
            match which {
                0 => g.set_output(f),
                1 => g.set_output(n),
                _ => {
                    let fa = g.scale(f, a);
                    let nb = g.scale(n, b);
                    g.add(fa, nb);
                }
            }
            (g, xi, wi)
        };
        let grad = |which: u8| {
            let (g, xi, wi) = build(which);
            let bind = Bindings::new().with(xi, &x).with(wi, &w);
            diff::backward(&g, &bind, &[xi]).unwrap().get(xi).unwrap().clone()
        };
        let (gf, gg, gh) = (grad(0), grad(1), grad(2));
        for i in 0..gh.len() {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            prop_assert!((gh.data()[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn forward_is_deterministic((x, y) in labeled(5, 3, 2), seed in 0u64..1000) {
        let model = ClassifierModel::<f64>::init(&ArchSpec::classifier(3, 2), seed).unwrap();
        let a = model.loss(&x, &y, Reduction::Mean, GradRequest::NONE).unwrap();
        let b = model.loss(&x, &y, Reduction::Mean, GradRequest::NONE).unwrap();
        prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        prop_assert!(a.loss >= 0.0);
        prop_assert!(a.per_example.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn score_output_matches_input_shape((x, y) in labeled(6, 4, 3), seed in 0u64..100) {
        let score = ScoreModel::<f64>::init(&ArchSpec::score(4, 3), 3, 0.5, seed).unwrap();
        let s = score.eval(&x, &y).unwrap();
        prop_assert_eq!(s.shape(), x.shape());
    }

    #[test]
    fn model_files_round_trip(seed in 0u64..1000) {
        let m = ClassifierModel::<f32>::init(&ArchSpec::new(5, &[7, 3], 2, Default::default()), seed).unwrap();
        let back = ClassifierModel::<f32>::from_bytes(&m.to_bytes().unwrap()).unwrap();
        let (pa, pb) = (m.net.params(), back.net.params());
        for (a, b) in pa.iter().zip(pb) {
            prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let s = ScoreModel::<f64>::init(&ArchSpec::score(3, 2), 2, 0.25, seed).unwrap();
        prop_assert_eq!(ScoreModel::<f64>::from_bytes(&s.to_bytes().unwrap()).unwrap(), s);
    }

    #[test]
    fn generators_are_pure(seed in 0u64..1000) {
        let spec = GaussianMixtureSpec::gaussian_pair(3, 2.0, 1.0);
        prop_assert_eq!(datasets::gen_mixture(&spec, 7, seed).unwrap(), datasets::gen_mixture(&spec, 7, seed).unwrap());
        prop_assert_eq!(datasets::gen_two_moons(9, 0.1, seed).unwrap(), datasets::gen_two_moons(9, 0.1, seed).unwrap());
    }

    #[test]
    fn zero_score_dsm_loss_is_closed_form((x, y) in labeled(5, 3, 2), eps in matrix(5, 3), sigma in 0.1f64..2.0) {
        let zero = ScoreModel::<f64>::new(unlearn_core::models::Mlp::zeros(&ArchSpec::score(3, 2)).unwrap(), 2, sigma).unwrap();
        let loss = scorelab::dsm_loss(&zero, &x, &y, &eps).unwrap();
        let direct = 0.5 * sigma.powi(-4) * (0..5).map(|i| eps.row(i).iter().map(|e| (sigma * e).powi(2)).sum::<f64>()).sum::<f64>() / 5.0;
        prop_assert!(loss >= 0.0);
        prop_assert!((loss - direct).abs() <= 1e-12 * direct.max(1.0));
    }

    #[test]
    fn adversarial_perturbations_stay_in_ball((x, y) in labeled(6, 3, 2), rho in 0.01f64..1.0, seed in 0u64..100) {
        let model = ClassifierModel::<f64>::init(&ArchSpec::classifier(3, 2), seed).unwrap();
        let budget = PerturbationBudget { alpha_a: rho / 3.0, k_a: 7, ..PerturbationBudget::with_radii(0.5, rho) };
        let delta = poison::craft_stage_two(&model, &x, &y, &budget).unwrap();
        prop_assert!(delta.max_abs() <= rho);
    }

    #[test]
    fn spread_is_rotation_invariant((x, y) in labeled(12, 3, 2), angles in prop::collection::vec(0.0f64..6.3, 3)) {
        prop_assume!(y.contains(&0) && y.contains(&1));
        let mut r = x.clone();
        for (k, &t) in angles.iter().enumerate() {
            let (i, j) = [(0, 1), (1, 2), (0, 2)][k];
            for row in 0..r.rows() {
                let (a, b) = (r.row(row)[i], r.row(row)[j]);
                r.row_mut(row)[i] = t.cos() * a - t.sin() * b;
                r.row_mut(row)[j] = t.sin() * a + t.cos() * b;
            }
        }
        let s0 = metrics::intra_class_spread(&x, &y, 2).unwrap();
        let s1 = metrics::intra_class_spread(&r, &y, 2).unwrap();
        assert_relative_eq!(s0.pooled, s1.pooled, epsilon = 1e-6);
        for (a, b) in s0.per_class.iter().zip(&s1.per_class) {
            assert_relative_eq!(*a, *b, epsilon = 1e-6);
        }
    }

    #[test]
    fn evaluate_ignores_order((x, y) in labeled(20, 2, 2), seed in 0u64..100, perm_seed in 0u64..100) {
        prop_assume!(y.contains(&0) && y.contains(&1));
        let ds = LabeledDataset::new("p", x.cast(), y, 2).unwrap();
        let model = ClassifierModel::<f32>::init(&ArchSpec::classifier(2, 2), seed).unwrap();
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut unlearn_core::rng::rng_from_seed(perm_seed));
        prop_assert_eq!(victim::evaluate(&model, &ds).unwrap(), victim::evaluate(&model, &ds.subset(&idx)).unwrap());
    }

    #[test]
    fn reports_are_deterministic_and_round_trip(vals in prop::collection::vec(0.0f64..1.0, 9)) {
        let rec = MetricsRecord {
            run_id: "r,1".into(),
            dataset: "d".into(),
            surrogate_arch: "d-64-64-K".into(),
            victim_arch: "d-32-K".into(),
            rho_u: vals[0],
            rho_a_train: vals[1],
            fraction: vals[2],
            clean_test_acc: vals[3],
            poisoned_test_acc: vals[4],
            mean_score_norm_clean: vals[5],
            mean_score_norm_poisoned: vals[6],
            intra_class_spread_clean: vals[7],
            intra_class_spread_poisoned: vals[8],
        };
        let a = metrics::report_bytes(&[rec.clone(), rec.clone()]).unwrap();
        prop_assert_eq!(&a, &metrics::report_bytes(&[rec.clone(), rec.clone()]).unwrap());
        let back = metrics::read_report(&a).unwrap();
        prop_assert_eq!(back.len(), 2);
        prop_assert!((back[0].poisoned_test_acc - rec.poisoned_test_acc).abs() <= 1e-9);
        prop_assert_eq!(&back[0].run_id, &rec.run_id);
    }
}

#[test]
fn analytic_score_is_gradient_of_log_density() {
    use rand::{Rng, SeedableRng};
    let spec = GaussianMixtureSpec {
        classes: vec![
            ClassSpec {
                components: vec![
                    Component { mean: vec![1.0, 0.0], cov_scale: 0.8 },
                    Component { mean: vec![-1.0, 1.0], cov_scale: 1.2 },
                ],
                weight: 0.5,
            },
            ClassSpec {
                components: vec![Component { mean: vec![0.0, -2.0], cov_scale: 1.0 }],
                weight: 0.5,
            },
        ],
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y = rng.random_range(0..2);
        let sigma = 0.5;
        let s = datasets::analytic_score(&spec, sigma, &x, y).unwrap();
        let fd = diff::finite_diff(
            |p: &Tensor<f64>| datasets::log_density(&spec, sigma, p.data(), y),
            &Tensor::vector(x.clone()),
            1e-5,
        )
        .unwrap();
        let err: f64 = s.iter().zip(fd.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = s.iter().map(|a| a * a).sum::<f64>().sqrt().max(1.0);
        assert!(err / scale < 1e-6, "x {x:?}: {s:?} vs {:?}", fd.data());
    }
}

#[test]
fn langevin_contracts_and_is_deterministic() {
    let spec = GaussianMixtureSpec::isotropic(&[vec![1.0, -1.0]], 1.0);
    let score = AnalyticScore { spec, smoothing: 0.0 };
    let cfg = SgldConfig::new(1e-2, 400, Direction::Toward, 9);
    let mut before = 0.0;
    let mut after = 0.0;
    for k in 0..50 {
        let t = k as f64 * 0.37;
        let x0 = vec![1.0 + 5.0 * t.cos(), -1.0 + 5.0 * t.sin()];
        let run = scorelab::sgld_run(&score, &x0, 0, &SgldConfig { seed: k, ..cfg.clone() }).unwrap();
        let again = scorelab::sgld_run(&score, &x0, 0, &SgldConfig { seed: k, ..cfg.clone() }).unwrap();
        assert_eq!(run.states, again.states);
        let dist = |s: &[f64]| ((s[0] - 1.0).powi(2) + (s[1] + 1.0).powi(2)).sqrt();
        before += dist(run.state(0));
        after += dist(run.last());
    }
    assert!(after < before, "mean distance {after} not below {before}");
}
