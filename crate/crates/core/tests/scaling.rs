use mlpscale::model::{count_forward_flops, InputShape, ModelConfig};
use mlpscale::scaling::{
    compute_cost, fit_allocation, fit_power_law, log_space, lm_least_squares, pareto_frontier, Bounds, ErrorField,
    FnProblem, FrontierPoint, LmOptions, RunRecord,
};
use mlpscale::SeededRng;
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

fn law(a: f64, b: f64, alpha: f64, e_inf: f64) -> impl Fn(f64) -> f64 {
    move |c| a * (b + c).powf(-alpha) + e_inf
}

fn rel(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs()
}

#[test]
fn compute_cost_examples() {
    assert_eq!(compute_cost(1, 1, 1).unwrap(), 3);
    let cfg = ModelConfig::from_notation("B-6/Wi-1024", InputShape::square(64), 10450).unwrap();
    let fwd = count_forward_flops(&cfg);
    assert_eq!(fwd, 73_615_360);
    let c = compute_cost(fwd, 12_000_000, 400).unwrap();
    assert_eq!(c, 73_615_360u128 * 3 * 12_000_000 * 400);
    assert!(rel(c as f64, 1.0601e18) < 1e-4);
    assert_eq!(compute_cost(fwd, 24_000_000, 400).unwrap(), 2 * c);
}

#[test]
fn noiseless_fit_recovers_all_four_parameters() {
    for (a, b, alpha, e_inf) in [(2.0, 0.0, 0.5, 0.1), (3.0, 500.0, 0.35, 0.2), (0.8, 20.0, 0.25, 0.05)] {
        let f = law(a, b, alpha, e_inf);
        let pts: Vec<(f64, f64)> = log_space(10.0, 1e6, 8).into_iter().map(|c| (c, f(c))).collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!(!fit.degenerate);
        assert!(rel(fit.a, a) < 1e-3, "a: {fit:?}");
        assert!(rel(fit.alpha.unwrap(), alpha) < 1e-3, "alpha: {fit:?}");
        assert!(rel(fit.e_inf, e_inf) < 1e-3, "e_inf: {fit:?}");
        if b == 0.0 {
            // No relative error exists at zero; judge the offset on the data's scale.
            assert!(fit.b < 1e-3 * fit.c_min, "b: {fit:?}");
        } else {
            assert!(rel(fit.b, b) < 1e-3, "b: {fit:?}");
        }
    }
}

#[test]
fn noisy_fit_recovers_exponent() {
    let f = law(2.0, 0.0, 0.5, 0.1);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = SeededRng::new(seed);
        let pts: Vec<(f64, f64)> = log_space(10.0, 1e6, 12)
            .into_iter()
            .map(|c| (c, f(c) * (1.0 + noise.sample(&mut rng))))
            .collect();
        let fit = fit_power_law(&pts).unwrap();
        worst = worst.max(rel(fit.alpha.unwrap(), 0.5));
    }
    assert!(worst <= 0.05, "worst alpha error {worst}");
}

#[test]
fn flat_and_short_inputs_are_degenerate() {
    let flat: Vec<_> = log_space(1.0, 1e3, 6).into_iter().map(|c| (c, 0.4)).collect();
    let fit = fit_power_law(&flat).unwrap();
    assert!(fit.degenerate && fit.alpha.is_none() && fit.e_inf == 0.4);
    let fit = fit_power_law(&[(1.0, 0.9), (10.0, 0.5)]).unwrap();
    assert!(fit.degenerate);
    assert!((fit.predict(5.0) - 0.7).abs() < 1e-12);
}

fn frontier_points(p_exp: f64, n_exp: f64, noise: f64, seed: u64) -> Vec<FrontierPoint> {
    let mut rng = SeededRng::new(seed);
    let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
    log_space(1e8, 1e16, 12)
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let jitter = |rng: &mut SeededRng| if noise > 0.0 { 1.0 + normal.sample(rng) } else { 1.0 };
            FrontierPoint {
                compute: c,
                error: 0.9 - 0.05 * i as f64,
                params: c.powf(p_exp) * jitter(&mut rng),
                examples: c.powf(n_exp) * jitter(&mut rng),
            }
        })
        .collect()
}

#[test]
fn allocation_exponents_exact() {
    let (p, n) = fit_allocation(&frontier_points(0.35, 0.65, 0.0, 0)).unwrap();
    assert!((p.exponent - 0.35).abs() <= 1e-9, "{p:?}");
    assert!((n.exponent - 0.65).abs() <= 1e-9, "{n:?}");
    assert!(p.intercept.abs() < 1e-6 && n.intercept.abs() < 1e-6);
}

#[test]
fn allocation_exponents_under_noise() {
    for seed in 0..10 {
        let (p, n) = fit_allocation(&frontier_points(0.35, 0.65, 0.02, seed)).unwrap();
        assert!(rel(p.exponent, 0.35) <= 0.05, "{p:?}");
        assert!(rel(n.exponent, 0.65) <= 0.05, "{n:?}");
    }
}

#[test]
fn lm_bounded_exponential_fit() {
    // y = 3 exp(-0.7 t) sampled exactly; the solver must land on (3, 0.7).
    let ts: Vec<f64> = (0..10).map(|i| i as f64 * 0.5).collect();
    let ys: Vec<f64> = ts.iter().map(|t| 3.0 * (-0.7 * t).exp()).collect();
    let problem = FnProblem {
        len: ts.len(),
        f: |p: &[f64], out: &mut [f64]| {
            for ((o, t), y) in out.iter_mut().zip(&ts).zip(&ys) {
                *o = p[0] * (-p[1] * t).exp() - y;
            }
        },
    };
    let bounds = Bounds {
        lower: vec![0.0, 0.0],
        upper: vec![10.0, 5.0],
    };
    let res = lm_least_squares(&problem, &[1.0, 0.1], &bounds, &LmOptions::default()).unwrap();
    assert!((res.params[0] - 3.0).abs() < 1e-6 && (res.params[1] - 0.7).abs() < 1e-6, "{res:?}");
}

fn record(id: usize, c: u128, e: f64, p: u64) -> RunRecord {
    RunRecord {
        run_id: format!("r{id}"),
        depth: 1,
        width: 1,
        expansion: 4,
        params: p,
        flops_fwd: 1,
        dataset_size: 1,
        epochs: 1,
        batch: 1,
        compute_flops: c,
        upstream_err: Some(e),
        probe_err: None,
        finetune_err: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn frontier_is_idempotent_and_dominance_free(
        raw in prop::collection::vec((1u128..50, 0u32..100, 1u64..5), 1..40),
    ) {
        let runs: Vec<RunRecord> = raw
            .iter()
            .enumerate()
            .map(|(i, &(c, e, p))| record(i, c, e as f64 / 100.0, p))
            .collect();
        let f = pareto_frontier(&runs, ErrorField::Upstream);
        prop_assert!(!f.is_empty());
        prop_assert_eq!(&pareto_frontier(&f, ErrorField::Upstream), &f);
        for w in f.windows(2) {
            prop_assert!(w[0].compute_flops < w[1].compute_flops);
            prop_assert!(w[0].upstream_err.unwrap() > w[1].upstream_err.unwrap());
        }
        // Every run is matched or beaten by some frontier run at no more compute.
        for r in &runs {
            prop_assert!(f.iter().any(|q| q.compute_flops <= r.compute_flops
                && q.upstream_err.unwrap() <= r.upstream_err.unwrap()));
        }
    }

    #[test]
    fn fitted_curves_decrease(
        a in 0.1f64..5.0,
        alpha in 0.1f64..1.0,
        e_inf in 0.0f64..0.3,
    ) {
        let f = law(a, 0.0, alpha, e_inf);
        let pts: Vec<(f64, f64)> = log_space(100.0, 1e7, 8)
            .into_iter()
            .map(|c| (c, f(c).min(1.0)))
            .collect();
        let fit = fit_power_law(&pts).unwrap();
        prop_assume!(!fit.degenerate);
        let ys: Vec<f64> = fit.sample_domain(100).into_iter().map(|c| fit.predict(c)).collect();
        prop_assert!(ys.windows(2).all(|w| w[1] < w[0]));
    }
}
