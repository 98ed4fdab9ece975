use icl_core::baselines::{krr_fit_predict, nn_fit_predict, KrrConfig, NnConfig, RidgeScaling};
use icl_core::rng::{self, stream, Purpose};
use icl_core::task::Context;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

// 3x3 solve by Cramer's rule
fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for i in 0..3 {
            m[i][k] = b[i];
        }
        *o = det(m) / d;
    }
    out
}

#[test]
fn krr_three_points_by_hand() {
    let xs = [-1.0f64, 0.0, 1.0];
    let ys = [1.0, 0.0, 1.0];
    let lambda = 0.01;
    let k = |a: f64, b: f64| (-(a - b) * (a - b)).exp();
    let mut a = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            a[i][j] = k(xs[i], xs[j]) + if i == j { 3.0 * lambda } else { 0.0 };
        }
    }
    let alpha = solve3(a, ys);
    let q = [0.5, -2.0, 0.0];
    let want: Vec<f64> = q.iter().map(|&t| (0..3).map(|i| alpha[i] * k(t, xs[i])).sum()).collect();

    let x = array![[-1.0], [0.0], [1.0]];
    let y = array![1.0, 0.0, 1.0];
    let ctx = Context { x: x.view(), y: y.view() };
    let cfg = KrrConfig {
        bandwidth_sq: Some(1.0),
        ridge: lambda,
        scaling: RidgeScaling::TimesN,
    };
    let got = krr_fit_predict(&cfg, &ctx, array![[0.5], [-2.0], [0.0]].view()).unwrap();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-10, "{g} vs {w}");
    }
    // unscaled ridge with 3 lambda is the same system
    let cfg2 = KrrConfig {
        ridge: 3.0 * lambda,
        scaling: RidgeScaling::Unscaled,
        ..cfg
    };
    let got2 = krr_fit_predict(&cfg2, &ctx, array![[0.5], [-2.0], [0.0]].view()).unwrap();
    for (g, w) in got2.iter().zip(&want) {
        assert!((g - w).abs() < 1e-10);
    }
}

fn random_context(seed: u64, n: usize, d: usize) -> (Array2<f64>, Array1<f64>) {
    let mut r = stream(seed, Purpose::Baseline, 1);
    let x = Array2::from_shape_fn((n, d), |_| rng::normal(&mut r));
    let y = Array1::from_shape_fn(n, |_| rng::normal(&mut r));
    (x, y)
}

#[test]
fn krr_limits_in_ridge() {
    let (x, y) = random_context(1, 20, 3);
    let ctx = Context { x: x.view(), y: y.view() };
    let tiny = KrrConfig {
        ridge: 1e-12,
        ..Default::default()
    };
    let fit = krr_fit_predict(&tiny, &ctx, x.view()).unwrap();
    for (f, t) in fit.iter().zip(&y) {
        assert!((f - t).abs() < 1e-6);
    }
    let huge = KrrConfig {
        ridge: 1e9,
        ..Default::default()
    };
    let fit = krr_fit_predict(&huge, &ctx, x.view()).unwrap();
    assert!(fit.iter().all(|v| v.abs() < 1e-8));

    let mut last = f64::INFINITY;
    for ridge in [10.0, 1.0, 0.1, 0.01, 0.001] {
        let cfg = KrrConfig {
            ridge,
            ..Default::default()
        };
        let fit = krr_fit_predict(&cfg, &ctx, x.view()).unwrap();
        let res = (&fit - &y).mapv(|v| v * v).sum();
        assert!(res < last);
        last = res;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn krr_is_linear_in_targets(seed in 0u64..1000, s in -3.0f64..3.0) {
        let (x, y1) = random_context(seed, 12, 2);
        let (_, y2) = random_context(seed + 5000, 12, 2);
        let (q, _) = random_context(seed + 9000, 4, 2);
        let cfg = KrrConfig::default();
        let f = |y: &Array1<f64>| krr_fit_predict(&cfg, &Context { x: x.view(), y: y.view() }, q.view()).unwrap();
        let comb = &y1 * s + &y2;
        let lhs = f(&comb);
        let rhs = f(&y1) * s + f(&y2);
        for (a, b) in lhs.iter().zip(&rhs) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn one_step_network_on_zero_targets_predicts_zero() {
    let (x, _) = random_context(2, 40, 4);
    let y = Array1::zeros(40);
    let ctx = Context { x: x.view(), y: y.view() };
    let mut r = stream(2, Purpose::Baseline, 2);
    let p = nn_fit_predict(&NnConfig::one_step(64), &ctx, x.view(), &mut r).unwrap();
    assert!(p.iter().all(|v: &f64| v.abs() < 1e-12));
}

#[test]
fn adam_network_learns_one_dimensional_quadratic() {
    let n = 512;
    let mut r = stream(4, Purpose::Baseline, 3);
    let x = Array2::from_shape_fn((n, 1), |_| rng::normal(&mut r));
    let y = x.column(0).mapv(|t| t * t - 1.0);
    let ctx = Context { x: x.view(), y: y.view() };
    let q = Array2::from_shape_fn((256, 1), |_| rng::normal(&mut r));
    let want = q.column(0).mapv(|t| t * t - 1.0);
    let pred = nn_fit_predict(&NnConfig::adam(), &ctx, q.view(), &mut r).unwrap();
    let mae = (&pred - &want).mapv(f64::abs).mean().unwrap();
    assert!(mae < 0.1, "mae {mae}");
}

#[test]
fn one_step_network_learns_single_index_signal() {
    // y = relu(x_1) - 1/sqrt(2 pi) is captured after one aligned step
    let (n, d) = (400, 4);
    let mut r = stream(5, Purpose::Baseline, 4);
    let f = |row: ndarray::ArrayView1<f64>| row[0].max(0.0) - (2.0 * std::f64::consts::PI).sqrt().recip();
    let x = Array2::from_shape_fn((n, d), |_| rng::normal(&mut r));
    let y: Array1<f64> = x.rows().into_iter().map(f).collect();
    let q = Array2::from_shape_fn((200, d), |_| rng::normal(&mut r));
    let want: Array1<f64> = q.rows().into_iter().map(f).collect();
    let ctx = Context { x: x.view(), y: y.view() };
    let pred = nn_fit_predict(&NnConfig::one_step(256), &ctx, q.view(), &mut r).unwrap();
    let mse = (&pred - &want).mapv(|v| v * v).mean().unwrap();
    let var = want.mapv(|v| v * v).mean().unwrap();
    assert!(mse < 0.5 * var, "mse {mse} var {var}");
}

#[test]
fn baselines_reject_bad_inputs() {
    let x = Array2::<f64>::zeros((0, 2));
    let y = Array1::<f64>::zeros(0);
    let ctx = Context { x: x.view(), y: y.view() };
    assert!(krr_fit_predict(&KrrConfig::default(), &ctx, x.view()).is_err());
    let (x, y) = random_context(3, 5, 2);
    let ctx = Context { x: x.view(), y: y.view() };
    let q = Array2::<f64>::zeros((1, 3));
    assert!(krr_fit_predict(&KrrConfig::default(), &ctx, q.view()).is_err());
    let mut r = stream(0, Purpose::Baseline, 0);
    let mut bad = NnConfig::adam();
    bad.width = 0;
    assert!(nn_fit_predict(&bad, &ctx, x.view(), &mut r).is_err());
}
