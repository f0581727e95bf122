use feddom_core::analysis::{self, AssumptionEstimates, JsccProbe, QuadraticToy};
use feddom_core::channel::ChannelConfig;
use feddom_core::model::{Jscc, JsccConfig};
use feddom_core::rng;
use feddom_core::Tensor;
use rand::Rng;

fn diag_quadratic(a: &'static [f64]) -> impl Fn(&[f64]) -> feddom_core::Result<Vec<f64>> {
    move |t: &[f64]| Ok(t.iter().zip(a).map(|(x, a)| a * x).collect())
}

#[test]
fn l1_of_diagonal_quadratic() {
    let est = analysis::estimate_l1(diag_quadratic(&[1.0, 2.0, 3.0]), &[0.5, -0.2, 1.0], 30, 1e-3, &mut rng::stream(1, &[])).unwrap();
    assert!((est - 3.0).abs() <= 0.15, "{est}");
    assert!(est <= 3.0 + 1e-9);
}

#[test]
fn l1_of_linear_loss_is_zero() {
    let est = analysis::estimate_l1(|_: &[f64]| Ok(vec![1.0, -2.0]), &[0.0, 0.0], 10, 1e-2, &mut rng::stream(1, &[])).unwrap();
    assert_eq!(est, 0.0);
}

#[test]
fn zero_probes_rejected() {
    assert!(analysis::estimate_l1(diag_quadratic(&[1.0]), &[0.0], 0, 1e-3, &mut rng::stream(1, &[])).is_err());
    assert!(analysis::estimate_l2(|t: &[f64]| Ok(t.to_vec()), &[0.0], 0, 1e-3, &mut rng::stream(1, &[])).is_err());
}

#[test]
fn l2_of_linear_feature_map() {
    let input = [0.6, 0.0, 0.8];
    let f = |t: &[f64]| Ok(vec![t.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>()]);
    let est = analysis::estimate_l2(f, &[0.1, 0.2, 0.3], 2000, 1e-3, &mut rng::stream(2, &[])).unwrap();
    assert!(est <= 1.0 + 1e-9 && est > 0.97, "{est}");
}

#[test]
fn l2_of_constant_map_is_zero() {
    let est = analysis::estimate_l2(|_: &[f64]| Ok(vec![1.0, 2.0]), &[0.1, 0.2], 20, 1e-3, &mut rng::stream(2, &[])).unwrap();
    assert_eq!(est, 0.0);
}

#[test]
fn l2_non_decreasing_in_probe_count() {
    let f = |t: &[f64]| Ok(vec![t[0] * t[1], t[0].sin()]);
    let mut last = 0.0;
    for probes in [1, 2, 5, 10, 40] {
        let est = analysis::estimate_l2(f, &[0.3, 0.7], probes, 1e-3, &mut rng::stream(3, &[])).unwrap();
        assert!(est >= last, "{probes}: {est} < {last}");
        last = est;
    }
}

#[test]
fn quadratic_toy_satisfies_bound() {
    let toy = QuadraticToy::standard(6, 5, 11);
    let eta = 1.0 / toy.l1();
    let (rounds, _) = toy.run(&[5.0; 6], eta, 5, 200, 1);
    let est = toy.analytic_estimates();
    let diag = analysis::diagnose(&toy.traces(&rounds, eta), &est, 1e-12, 3).unwrap();
    assert!(diag.satisfied_fraction.unwrap() >= 0.99, "{:?}", diag.satisfied_fraction);
    assert_eq!(diag.rounds.len(), 199);
    assert!(diag.rounds.iter().all(|r| r.eta_admissible));
    assert!(diag.monotonicity[0].report.compliant_fraction >= 0.99);
}

#[test]
fn quadratic_toy_diverges_above_step_bound() {
    let toy = QuadraticToy::standard(6, 5, 11);
    let eta = 2.2 / toy.l1();
    let (rounds, _) = toy.run(&[5.0; 6], eta, 1, 20, 1);
    let losses: Vec<f64> = rounds.iter().map(|r| r.loss).collect();
    let report = analysis::check_monotonic_decrease(&losses, None, 3).unwrap();
    assert!(report.diverged_at.is_some_and(|r| r < 20), "{report:?}");
}

#[test]
fn toy_fedavg_matches_centralised_descent() {
    let toy = QuadraticToy::standard(4, 3, 5);
    let eta = 0.2;
    let (_, theta) = toy.run(&[1.0, -1.0, 2.0, 0.5], eta, 3, 4, 0);
    let mut c = vec![1.0, -1.0, 2.0, 0.5];
    for _ in 0..12 {
        let g = toy.gradient(&c);
        for (x, g) in c.iter_mut().zip(g) {
            *x -= eta * g;
        }
    }
    for (a, b) in theta.iter().zip(&c) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn noisy_toy_mostly_within_bound() {
    let mut toy = QuadraticToy::standard(6, 5, 11);
    toy.noise_std = 0.05;
    let eta = 0.5 / toy.l1();
    let (rounds, _) = toy.run(&[5.0; 6], eta, 5, 100, 9);
    let diag = analysis::diagnose(&toy.traces(&rounds, eta), &toy.analytic_estimates(), 1e-12, 3).unwrap();
    assert!(diag.satisfied_fraction.unwrap() >= 0.9, "{:?}", diag.satisfied_fraction);
}

#[test]
fn bound_evaluators_are_pure() {
    let est = AssumptionEstimates { l1: 3.0, l2: 0.5, sigma2: 0.2, v: 1.5, samples: 4 };
    let a = analysis::step_size_bound(&[1.0, 0.5], &est, 0.3, 2).unwrap();
    let b = analysis::step_size_bound(&[1.0, 0.5], &est, 0.3, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(analysis::decrease_bound(1.5, &est, 0.1, 0.3, 2).to_bits(), analysis::decrease_bound(1.5, &est, 0.1, 0.3, 2).to_bits());
}

#[test]
fn jscc_probe_estimates() {
    let model = Jscc::new(JsccConfig::default()).unwrap();
    let params = model.init_params::<f64, _>(&mut rng::stream(1, &[]));
    let mut r = rng::stream(2, &[]);
    let images: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::new(vec![3, 32, 32], (0..3072).map(|_| r.random::<f64>()).collect()).unwrap()).collect();
    let channel = ChannelConfig::default();
    let probe = JsccProbe { model: &model, template: &params, channel: &channel, images: &images, snr_db: 5.0, seed: 3 };
    let theta = params.flatten();
    assert_eq!(probe.gradient(&theta).unwrap(), probe.gradient(&theta).unwrap());
    let est = probe.estimate(3, 1e-3, 3, 2, &mut rng::stream(4, &[])).unwrap();
    assert!(est.l1 > 0.0 && est.l2 > 0.0 && est.sigma2 > 0.0 && est.v > 0.0, "{est:?}");
    assert_eq!(est.samples, 10);
}
