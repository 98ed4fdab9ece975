use icl_core::model::{Gamma, ModelParams};
use icl_core::pretrain::*;
use icl_core::rng::{self, Purpose};
use icl_core::task::{sample_prompt, sample_task, CoeffScheme, ProblemConfig, Prompt};
use ndarray::{array, Array2};

fn problem(d: usize, r: usize) -> ProblemConfig {
    ProblemConfig::new(d, r, 2, 2, 0.0, CoeffScheme::SphereNormalized)
}

fn prompts(cfg: &ProblemConfig, count: usize, n: usize, seed: u64) -> Vec<Prompt<f64>> {
    (0..count)
        .map(|t| {
            let mut rng = rng::stream(seed, Purpose::Diagnostic, t as u64);
            let task = sample_task(cfg, &mut rng).unwrap();
            sample_prompt(&task, n, cfg, &mut rng).unwrap()
        })
        .collect()
}

#[test]
fn hand_computed_single_step() {
    let gamma: f64 = 0.05;
    let eta = 3.0;
    let params = ModelParams::new(array![[1.0, 0.0]], array![0.0], Gamma::Diagonal(array![gamma])).unwrap();
    let prompt = Prompt {
        x: array![[1.0, 0.0]],
        y: array![1.0],
        query_x: array![1.0, 0.0],
        query_y: 1.0,
    };
    assert!((params.forward(&prompt).unwrap() - gamma).abs() < 1e-15);
    let grad = loss_gradient(&params, &[prompt]).unwrap();
    let w1 = apply_stage1_update(&params.w, &grad, eta);
    let want = 2.0 * eta * (1.0 - gamma) * gamma * 2.0;
    assert!((w1[[0, 0]] - want).abs() < 1e-14, "{} vs {want}", w1[[0, 0]]);
    assert_eq!(w1[[0, 1]], 0.0);
}

#[test]
fn zero_gamma_gives_zero_weights() {
    let mut cfg = TrainConfig::new(problem(4, 2), 6, 20, 10, 5, 5, 3);
    cfg.gamma = Some(0.0);
    let p0 = init_params::<f64>(&cfg).unwrap();
    let (p1, _) = stage1_step(&p0, &cfg).unwrap();
    // only the rounding of eta * (1/eta) survives
    assert!(p1.w.iter().all(|&v| v.abs() < 1e-15));
}

#[test]
fn gradient_matches_finite_differences() {
    let pc = problem(3, 2);
    let mut cfg = TrainConfig::new(pc.clone(), 4, 1, 1, 1, 1, 11);
    cfg.gamma = Some(0.7);
    let params = init_params::<f64>(&cfg).unwrap();
    let data = prompts(&pc, 6, 7, 5);
    let grad = loss_gradient(&params, &data).unwrap();
    let mut pick = rng::stream(5, Purpose::Diagnostic, 999);
    let h = 1e-6;
    for _ in 0..5 {
        let j = (rng::uniform::<f64, _>(&mut pick, 0.0, 4.0) as usize).min(3);
        let k = (rng::uniform::<f64, _>(&mut pick, 0.0, 3.0) as usize).min(2);
        let mut plus = params.clone();
        plus.w[[j, k]] += h;
        let mut minus = params.clone();
        minus.w[[j, k]] -= h;
        let fd = (empirical_loss(&plus, &data).unwrap() - empirical_loss(&minus, &data).unwrap()) / (2.0 * h);
        let rel = (fd - grad[[j, k]]).abs() / grad[[j, k]].abs().max(1e-12);
        assert!(rel < 1e-6, "coord ({j},{k}): fd {fd} analytic {}", grad[[j, k]]);
    }
}

#[test]
fn weight_decay_cancels() {
    let pc = problem(5, 2);
    let cfg = TrainConfig::new(pc.clone(), 8, 1, 1, 1, 1, 21);
    let params = init_params::<f64>(&cfg).unwrap();
    let eta = cfg.eta1_value();
    let data = prompts(&pc, 12, 9, 6);
    let grad = loss_gradient(&params, &data).unwrap();
    let full = apply_stage1_update(&params.w, &grad, eta);

    // (2 eta / T) sum_t (y_t - f_t) grad f_t, accumulated independently
    let gdiag = match &params.gamma {
        Gamma::Diagonal(g) => g.clone(),
        _ => unreachable!(),
    };
    let mut direct = Array2::<f64>::zeros(params.w.dim());
    for p in &data {
        let (f, g) = output_and_gradient(&params, gdiag.view(), p);
        direct.scaled_add(p.query_y - f, &g);
    }
    direct *= 2.0 * eta / data.len() as f64;
    let scale = direct.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for (a, b) in full.iter().zip(direct.iter()) {
        assert!((a - b).abs() <= 1e-10 * scale.max(1.0), "{a} vs {b}");
    }
}

#[test]
fn init_params_invariants() {
    let cfg = TrainConfig::new(problem(10, 3), 400, 1, 1, 1, 1, 4);
    let p = init_params::<f64>(&cfg).unwrap();
    for row in p.w.rows() {
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
    }
    assert!(p.b.iter().all(|&b| (-1.0..=1.0).contains(&b)));
    let g = match &p.gamma {
        Gamma::Diagonal(g) => g.clone(),
        _ => panic!("diagonal expected"),
    };
    let gamma = cfg.gamma_value();
    assert!(g.iter().all(|&v| v.abs() == gamma));
    let positives = g.iter().filter(|&&v| v > 0.0).count() as f64;
    // binomial(400, 1/2): sd 10
    assert!((positives - 200.0).abs() < 40.0);

    let narrow = init_params::<f64>(&TrainConfig { m: 50, ..cfg.clone() }).unwrap();
    assert_eq!(narrow.w, p.w.slice(ndarray::s![..50, ..]));
    assert_eq!(narrow.b, p.b.slice(ndarray::s![..50]));
}

#[test]
fn default_scalings() {
    let cfg = TrainConfig::desk(problem(32, 2), 0);
    let prod = 2.0 * cfg.eta1_value() * cfg.gamma_value();
    // 2 sqrt(r) d^{Q - 1/2}
    assert!((prod - 2.0 * 2f64.sqrt() * 32f64.powf(1.5)).abs() < 1e-9 * prod);
    assert!((cfg.lambda1() * cfg.eta1_value() - 1.0).abs() < 1e-15);
}

#[test]
fn reinit_bias_range_and_mean() {
    let d = 7;
    let cfg = TrainConfig::new(problem(d, 2), 10_000, 1, 1, 1, 1, 8);
    let b = reinit_bias::<f64>(&cfg).unwrap();
    let h = (d as f64).ln();
    assert!(b.iter().all(|&v| v >= -h && v <= h));
    let mean = b.sum() / b.len() as f64;
    assert!(mean.abs() < 3.0 * h / (3.0 * 1e4f64).sqrt());
    let tiny = TrainConfig::new(problem(1, 1), 5, 1, 1, 1, 1, 8);
    assert!(reinit_bias::<f64>(&tiny).is_err());
}

#[test]
fn config_rejections() {
    let mut cfg = TrainConfig::new(problem(4, 2), 8, 1, 1, 1, 1, 0);
    cfg.lambda2 = 0.0;
    assert!(cfg.validate().is_err());
    cfg.lambda2 = -1.0;
    assert!(cfg.validate().is_err());
    let cfg = TrainConfig::new(problem(4, 2), 8, 0, 1, 1, 1, 0);
    assert!(init_params::<f64>(&cfg).is_err());
    let mut cfg = TrainConfig::new(problem(4, 2), 64, 1, 1, 1, 1, 0);
    cfg.solver = Stage2Solver::Direct;
    assert!(cfg.validate().is_err());
}

fn small_stage2(m: usize, t2: usize, seed: u64) -> (TrainConfig, Stage2Data<f64>) {
    let mut cfg = TrainConfig::new(problem(4, 2), m, 50, 20, t2, 16, seed);
    cfg.eta1 = Some(1.0);
    let (features, _) = pretrain_features::<f64>(&cfg).unwrap();
    let data = stage2_data(&features, &cfg).unwrap();
    (cfg, data)
}

#[test]
fn cg_matches_direct() {
    let (mut cfg, data) = small_stage2(8, 200, 31);
    cfg.solver = Stage2Solver::Direct;
    let direct = stage2_ridge(&data, &cfg).unwrap();
    cfg.solver = Stage2Solver::Cg;
    let cg = stage2_ridge(&data, &cfg).unwrap();
    let (gd, gc) = (direct.gamma.to_dense(), cg.gamma.to_dense());
    let diff = (&gd - &gc).mapv(|v| v * v).sum().sqrt();
    let norm = gd.mapv(|v| v * v).sum().sqrt();
    assert!(diff / norm < 1e-6, "relative difference {}", diff / norm);
    assert!((direct.objective - cg.objective).abs() < 1e-9 * direct.objective.max(1.0));
}

#[test]
fn stage2_optimality_and_monotonicity() {
    let (cfg, data) = small_stage2(8, 200, 32);
    let sol = stage2_ridge(&data, &cfg).unwrap();
    let grad = data.objective_gradient(&sol.gamma, cfg.lambda2);
    let gnorm = grad.mapv(|v| v * v).sum().sqrt();
    assert!(gnorm < 1e-6 * sol.grad_norm_at_zero, "{gnorm} vs scale {}", sol.grad_norm_at_zero);
    assert!((gnorm - sol.grad_norm).abs() < 1e-6 * sol.grad_norm_at_zero);
    assert!(sol.objective <= sol.objective_at_zero);
    let zero = Gamma::Dense(Array2::zeros((8, 8)));
    assert!((data.objective(&zero, cfg.lambda2) - sol.objective_at_zero).abs() < 1e-12);
}

#[test]
fn stage2_huge_ridge_shrinks_to_zero() {
    let (mut cfg, data) = small_stage2(8, 100, 33);
    cfg.lambda2 = 1e12;
    let sol = stage2_ridge(&data, &cfg).unwrap();
    assert!(sol.gamma.frobenius_sq().sqrt() < 1e-9);
    assert!(data.predictions(&sol.gamma).iter().all(|p| p.abs() < 1e-9));
    cfg.lambda2 = 0.0;
    assert!(stage2_ridge(&data, &cfg).is_err());
}

#[test]
fn sgd_approaches_the_optimum() {
    let (mut cfg, data) = small_stage2(6, 150, 34);
    let exact = stage2_ridge(&data, &cfg).unwrap();
    cfg.solver = Stage2Solver::Sgd;
    // step chosen below 2 / max_t K_tt so the iteration is stable
    let kmax = data.kernel().diag().iter().cloned().fold(0.0, f64::max);
    cfg.sgd = SgdConfig {
        batch: 16,
        step: 0.5 / kmax,
        epochs: 400,
    };
    let sgd = stage2_ridge(&data, &cfg).unwrap();
    assert!(sgd.objective < exact.objective + 0.05 * (exact.objective_at_zero - exact.objective));
    cfg.sgd.step = 1e3;
    assert!(matches!(stage2_ridge(&data, &cfg), Err(TrainError::SgdDiverged { .. })));
}

#[test]
fn stage1_is_thread_count_independent() {
    let cfg = TrainConfig::new(problem(6, 2), 16, 70, 12, 1, 1, 41);
    let p0 = init_params::<f64>(&cfg).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| stage1_step(&p0, &cfg).unwrap().0.w)
    };
    let (a, b) = (run(1), run(3));
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn autoscale_caps_row_norms() {
    let mut cfg = TrainConfig::new(problem(6, 2), 16, 40, 12, 1, 1, 42);
    let p0 = init_params::<f64>(&cfg).unwrap();
    let (plain, rep) = stage1_step(&p0, &cfg).unwrap();
    assert_eq!(rep.autoscale_factor, 1.0);
    cfg.eta1_autoscale = true;
    let (scaled, rep2) = stage1_step(&p0, &cfg).unwrap();
    if rep.max_row_norm > 1.0 {
        assert!((rep2.max_row_norm - 1.0).abs() < 1e-12);
        assert!(rep2.autoscale_factor < 1.0);
        let ratio = &scaled.w / &plain.w;
        assert!(ratio.iter().filter(|v| v.is_finite()).all(|v| (v - rep2.autoscale_factor).abs() < 1e-10));
    } else {
        assert_eq!(rep2.autoscale_factor, 1.0);
    }
}

#[test]
fn training_report_is_one_json_line() {
    let mut cfg = TrainConfig::new(problem(4, 2), 8, 20, 10, 30, 10, 5);
    cfg.eta1 = Some(1.0);
    let (params, report) = pretrain::<f64>(&cfg).unwrap();
    let line = report.to_json_line();
    assert!(!line.contains('\n'));
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["m"], 8);
    assert_eq!(v["solver"], "cg");
    assert!(matches!(params.gamma, Gamma::LowRank { .. }));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    params.save(&path).unwrap();
    let back = ModelParams::<f64>::load(&path).unwrap();
    assert_eq!(back, params);
}
