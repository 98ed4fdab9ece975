//! End-to-end acceptance checks. One line per criterion:
//! `PASS|FAIL <name> (<seconds>s / <budget>s): <detail>`.
//! Exits nonzero if any criterion fails.

use std::time::{Duration, Instant};

use icl_core::diagnostics::{
    alignment_report, correlation_concentration, empirical_gradient_check, fit_basis_network, gaussian_sample,
};
use icl_core::experiment::{compare_methods, f2_curves, ExperimentConfig, Krr, RiskCurve, Transformer};
use icl_core::hermite::{enumerate_basis, eval_basis, hermite, relu_hermite_coeff, BasisIndex};
use icl_core::model::{full_attention_forward, Gamma, ModelParams};
use icl_core::pretrain::*;
use icl_core::quadrature::gauss_hermite_normal;
use icl_core::rng::{self, Purpose};
use icl_core::task::{sample_prompt, sample_task, CoeffScheme, ProblemConfig, Prompt};
use ndarray::Array2;

const SEED: u64 = 1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Suite {
    failures: usize,
}

impl Suite {
    /// `extra` is time spent earlier on shared work this criterion would
    /// otherwise have to do itself.
    fn check(&mut self, name: &str, budget_s: u64, extra: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let o = f();
        let secs = (start.elapsed() + extra).as_secs_f64();
        let in_time = secs < budget_s as f64;
        let pass = o.pass && in_time;
        if !pass {
            self.failures += 1;
        }
        let late = if in_time { "" } else { " [over budget]" };
        println!(
            "{} {name} ({secs:.1}s / {budget_s}s){late}: {}",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
}

fn prompts(cfg: &ProblemConfig, count: usize, n: usize, seed: u64) -> Vec<Prompt<f64>> {
    (0..count)
        .map(|t| {
            let mut r = rng::stream(seed, Purpose::Diagnostic, t as u64);
            let task = sample_task(cfg, &mut r).unwrap();
            sample_prompt(&task, n, cfg, &mut r).unwrap()
        })
        .collect()
}

fn gaussian_matrix(seed: u64, index: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut r = rng::stream(seed, Purpose::Diagnostic, index);
    Array2::from_shape_fn((rows, cols), |_| rng::normal(&mut r))
}

fn tensor_expectation<F: Fn(&[f64]) -> f64>(r: usize, nodes: usize, f: F) -> f64 {
    let rule = gauss_hermite_normal(nodes);
    let mut idx = vec![0usize; r];
    let mut point = vec![0.0; r];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for (j, &k) in idx.iter().enumerate() {
            point[j] = rule.nodes[k];
            w *= rule.weights[k];
        }
        total += w * f(&point);
        let mut j = 0;
        loop {
            if j == r {
                return total;
            }
            idx[j] += 1;
            if idx[j] < nodes {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

fn hermite_correctness() -> Outcome {
    let rule = gauss_hermite_normal(20);
    let mut worst_1d = 0.0f64;
    for i in 0..=8usize {
        for j in 0..=8usize {
            let v = rule.integrate(|z| hermite::<f64>(i, z) * hermite::<f64>(j, z));
            let want = if i == j { (1..=i).product::<usize>() as f64 } else { 0.0 };
            worst_1d = worst_1d.max((v - want).abs());
        }
    }
    let mut worst_basis = 0.0f64;
    for r in 1..=3 {
        for p in 2..=4 {
            let basis = enumerate_basis(r, 2, p).unwrap();
            for (a, pa) in basis.iter().enumerate() {
                for (b, pb) in basis.iter().enumerate().skip(a) {
                    let v = tensor_expectation(r, 8, |x| eval_basis(pa, x).unwrap() * eval_basis(pb, x).unwrap());
                    let want = if a == b { 1.0 } else { 0.0 };
                    worst_basis = worst_basis.max((v - want).abs());
                }
            }
        }
    }
    outcome(
        worst_1d < 1e-8 && worst_basis < 1e-6,
        format!("max 1-d error {worst_1d:.2e} (< 1e-8), max basis error {worst_basis:.2e} (< 1e-6)"),
    )
}

fn relu_identity() -> Outcome {
    let mut worst = 0.0f64;
    for k in 0..=200 {
        let b = -1.0 + 0.01 * k as f64;
        for i in 2..=6u32 {
            let want =
                (-b * b / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() * hermite::<f64>((i - 2) as usize, b).abs();
            worst = worst.max((relu_hermite_coeff(i, b).abs() - want).abs());
        }
    }
    outcome(worst < 1e-10, format!("max error {worst:.2e} over 201 biases x i in 2..=6 (< 1e-10)"))
}

fn attention_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for inst in 0..100u64 {
        let (m, n, d) = (1 + inst as usize % 8, 1 + (inst as usize * 7) % 32, 2 + inst as usize % 5);
        let w = gaussian_matrix(inst, 10, m, d);
        let b = gaussian_matrix(inst, 11, 1, m).row(0).to_owned();
        let k = gaussian_matrix(inst, 12, m, m);
        let v = gaussian_matrix(inst, 13, 1, 1)[[0, 0]];
        let x = gaussian_matrix(inst, 1, n, d);
        let prompt = Prompt {
            y: gaussian_matrix(inst, 2, 1, n).row(0).to_owned(),
            query_x: gaussian_matrix(inst, 3, 1, d).row(0).to_owned(),
            x,
            query_y: 0.0,
        };
        let full = full_attention_forward(v, k.view(), w.view(), b.view(), &prompt).unwrap();
        let simple = ModelParams::new(w, b, Gamma::Dense(k.t().mapv(|x| x * v)))
            .unwrap()
            .forward(&prompt)
            .unwrap();
        worst = worst.max((full - simple).abs() / (1.0 + full.abs()));
    }
    outcome(worst < 1e-12, format!("max relative gap {worst:.2e} over 100 instances (< 1e-12)"))
}

fn stage1_gradient() -> Outcome {
    let pc = ProblemConfig::new(3, 2, 2, 2, 0.0, CoeffScheme::SphereNormalized);
    let mut cfg = TrainConfig::new(pc.clone(), 4, 1, 1, 1, 1, 11);
    cfg.gamma = Some(0.7);
    let params = init_params::<f64>(&cfg).unwrap();
    let data = prompts(&pc, 6, 7, 5);
    let grad = loss_gradient(&params, &data).unwrap();
    let mut pick = rng::stream(5, Purpose::Diagnostic, 999);
    let h = 1e-6;
    let mut worst_fd = 0.0f64;
    for _ in 0..5 {
        let j = (rng::uniform::<f64, _>(&mut pick, 0.0, 4.0) as usize).min(3);
        let k = (rng::uniform::<f64, _>(&mut pick, 0.0, 3.0) as usize).min(2);
        let mut plus = params.clone();
        plus.w[[j, k]] += h;
        let mut minus = params.clone();
        minus.w[[j, k]] -= h;
        let fd = (empirical_loss(&plus, &data).unwrap() - empirical_loss(&minus, &data).unwrap()) / (2.0 * h);
        worst_fd = worst_fd.max((fd - grad[[j, k]]).abs() / grad[[j, k]].abs().max(1e-12));
    }

    // with lambda = 1/eta the update is (2 eta / T) sum_t (y_t - f_t) grad f_t
    let pc = ProblemConfig::new(5, 2, 2, 2, 0.0, CoeffScheme::SphereNormalized);
    let cfg = TrainConfig::new(pc.clone(), 8, 1, 1, 1, 1, 21);
    let params = init_params::<f64>(&cfg).unwrap();
    let eta = cfg.eta1_value();
    let data = prompts(&pc, 12, 9, 6);
    let full = apply_stage1_update(&params.w, &loss_gradient(&params, &data).unwrap(), eta);
    let Gamma::Diagonal(gdiag) = &params.gamma else { unreachable!() };
    let mut direct = Array2::<f64>::zeros(params.w.dim());
    for p in &data {
        let (f, g) = output_and_gradient(&params, gdiag.view(), p);
        direct.scaled_add(p.query_y - f, &g);
    }
    direct *= 2.0 * eta / data.len() as f64;
    let scale = direct.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let wd = full.iter().zip(&direct).fold(0.0f64, |a, (x, y)| a.max((x - y).abs())) / scale;
    outcome(
        worst_fd < 1e-6 && wd < 1e-10,
        format!("finite-difference rel error {worst_fd:.2e} (< 1e-6), weight-decay identity {wd:.2e} (< 1e-10)"),
    )
}

/// Unit neuron with most of its mass in the index subspace.
fn tilted_neuron(d: usize, r: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..d).map(|k| if k < r { 1.0 + 0.3 * k as f64 } else { 0.15 }).collect();
    let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter().map(|v| v / n).collect()
}

fn main_term() -> Outcome {
    let problem = ProblemConfig::new(8, 2, 2, 2, 0.0, CoeffScheme::SphereNormalized);
    let g = empirical_gradient_check(&problem, &tilted_neuron(8, 2), 1.0, 100_000, 1000, SEED).unwrap();
    let norms: Vec<f64> = g.off_block.iter().map(|o| o.1).collect();
    let decays = norms.windows(2).all(|w| w[1] < w[0]);
    let trail = g.off_block.iter().map(|(t, n, _)| format!("T={t}:{n:.3e}")).collect::<Vec<_>>().join(" ");
    outcome(
        g.relative_deviation < 0.10 && decays,
        format!("first-block relative deviation {:.4} (< 0.10); off-block {trail}", g.relative_deviation),
    )
}

fn stage2_solver() -> Outcome {
    let pc = ProblemConfig::new(4, 2, 2, 2, 0.0, CoeffScheme::SphereNormalized);
    let mut cfg = TrainConfig::new(pc, 8, 50, 20, 200, 16, SEED);
    cfg.eta1 = Some(1.0);
    let (features, _) = pretrain_features::<f64>(&cfg).unwrap();
    let data = stage2_data(&features, &cfg).unwrap();
    cfg.solver = Stage2Solver::Direct;
    let direct = stage2_ridge(&data, &cfg).unwrap();
    cfg.solver = Stage2Solver::Cg;
    let cg = stage2_ridge(&data, &cfg).unwrap();
    let (gd, gc) = (direct.gamma.to_dense(), cg.gamma.to_dense());
    let rel = (&gd - &gc).mapv(|v| v * v).sum().sqrt() / gd.mapv(|v| v * v).sum().sqrt();
    let gnorm = data.objective_gradient(&cg.gamma, cfg.lambda2).mapv(|v| v * v).sum().sqrt();
    let tol = 1e-6 * cg.grad_norm_at_zero;
    outcome(
        rel < 1e-6 && gnorm < tol,
        format!("CG vs direct {rel:.2e} (< 1e-6), objective gradient {gnorm:.2e} (< {tol:.2e})"),
    )
}

fn concentration() -> Outcome {
    let problem = ProblemConfig::new(8, 2, 2, 2, 0.0, CoeffScheme::SphereNormalized);
    let task = sample_task::<f64, _>(&problem, &mut rng::stream(SEED, Purpose::Diagnostic, 1 << 40)).unwrap();
    let grid: Vec<usize> = (6..=14).map(|k| 1 << k).collect();
    let p = BasisIndex::new(vec![2, 0]).unwrap();
    let c = correlation_concentration(&problem, &task, &p, &grid, 200, SEED).unwrap();
    outcome((-0.65..=-0.35).contains(&c.slope), format!("slope {:.3} (in [-0.65, -0.35])", c.slope))
}

fn desk_config(d: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default().with_dims(d, 2);
    c.seed = Some(SEED);
    c
}

fn curve<'a>(curves: &'a [RiskCurve], method: &str) -> &'a RiskCurve {
    curves.iter().find(|c| c.method == method).unwrap()
}

struct Shared {
    cfg: ExperimentConfig,
    w0: Array2<f64>,
    features: ModelParams<f64>,
    stage1: Stage1Report,
    stage1_time: Duration,
}

fn main() {
    let mut suite = Suite { failures: 0 };
    let none = Duration::ZERO;
    suite.check("hermite_correctness", 10, none, hermite_correctness);
    suite.check("relu_coefficient_identity", 5, none, relu_identity);
    suite.check("attention_equivalence", 5, none, attention_equivalence);
    suite.check("stage1_gradient", 10, none, stage1_gradient);
    suite.check("main_term", 300, none, main_term);
    suite.check("stage2_solver", 30, none, stage2_solver);
    suite.check("correlation_concentration", 120, none, concentration);

    // the desk d = 32 Stage I run feeds alignment, basis and both risk-curve checks
    let mut shared: Option<Shared> = None;
    suite.check("alignment", 600, none, || {
        let start = Instant::now();
        let cfg = desk_config(32);
        let tc = cfg.train_config().unwrap();
        let w0 = init_params::<f64>(&tc).unwrap().w;
        let (features, stage1) = pretrain_features::<f64>(&tc).unwrap();
        let problem = cfg.problem().unwrap();
        let trained = alignment_report(features.w.view(), Some(w0.view()), &problem).unwrap();
        let random = alignment_report(w0.view(), None, &problem).unwrap();
        let base = trained.baseline;
        let random_ok = (random.mean_ratio - base).abs() <= 3.0 * random.stderr;
        let o = outcome(
            trained.mean_ratio > 5.0 * base && random_ok,
            format!(
                "trained mean ratio {:.4} (> {:.4}); random init {:.4} +- {:.4} vs r/d = {base:.4}",
                trained.mean_ratio,
                5.0 * base,
                random.mean_ratio,
                random.stderr
            ),
        );
        shared = Some(Shared { cfg, w0, features, stage1, stage1_time: start.elapsed() });
        o
    });
    let shared = shared.expect("shared pretraining");

    suite.check("basis_approximation", 600, shared.stage1_time, || {
        let problem = shared.cfg.problem().unwrap();
        let basis = enumerate_basis(problem.r, problem.q, problem.p).unwrap();
        let x = gaussian_sample::<f64>(20_000, problem.d, SEED, 7);
        let fit = |f: &ModelParams<f64>| fit_basis_network(f, x.view(), &basis, &problem, None).unwrap().mean_residual();
        let mut small_cfg = shared.cfg.clone();
        small_cfg.m = 500;
        let (small, _) = pretrain_features::<f64>(&small_cfg.train_config().unwrap()).unwrap();
        let untrained = ModelParams::new(shared.w0.clone(), shared.features.b.clone(), Gamma::zeros_diagonal(shared.cfg.m))
            .unwrap();
        let (r500, r2000, r_untrained) = (fit(&small), fit(&shared.features), fit(&untrained));
        outcome(
            r2000 < r500 && r2000 < r_untrained,
            format!("mean residual m=500 {r500:.4}, m=2000 {r2000:.4}, untrained m=2000 {r_untrained:.4}"),
        )
    });

    let mut f2: Option<(Vec<RiskCurve>, Duration)> = None;
    suite.check("method_comparison", 1800, shared.stage1_time, || {
        let start = Instant::now();
        let (model, _) = finish_pretraining(shared.features.clone(), shared.stage1.clone(), &shared.cfg.train_config().unwrap())
            .unwrap();
        let curves = f2_curves(&shared.cfg, &model).unwrap();
        let at = |m: &str| curve(&curves, m).at(64).unwrap().excess_risk;
        let (tf, krr, nn) = (at("transformer"), at("krr"), at("nn_one_step"));
        let monotone: Vec<&str> =
            curves.iter().filter(|c| !c.is_non_increasing_within(2.0)).map(|c| c.method.as_str()).collect();
        let o = outcome(
            tf < krr && tf < nn && monotone.is_empty(),
            format!(
                "excess risk at N*=64: transformer {tf:.4}, krr {krr:.4}, one-step nn {nn:.4}; non-monotone: {monotone:?}"
            ),
        );
        f2 = Some((curves, shared.stage1_time + start.elapsed()));
        o
    });
    let (curves32, f2_time) = f2.expect("f2 curves");

    suite.check("dimension_independence", 3600, f2_time, || {
        let cfg = desk_config(16);
        let (model, _) = pretrain::<f64>(&cfg.train_config().unwrap()).unwrap();
        let curves16 = compare_methods(&cfg, &[&Transformer(&model), &Krr(cfg.krr())]).unwrap();
        let (t16, t32) = (curve(&curves16, "transformer"), curve(&curves32, "transformer"));
        let mut worst = (0, 0.0f64);
        for (a, b) in t16.points.iter().zip(&t32.points) {
            let gap = (a.risk_mean - b.risk_mean).abs() / a.risk_mean.min(b.risk_mean);
            if gap > worst.1 {
                worst = (a.context_length, gap);
            }
        }
        let k16 = curve(&curves16, "krr").at(64).unwrap().risk_mean;
        let k32 = curve(&curves32, "krr").at(64).unwrap().risk_mean;
        outcome(
            worst.1 <= 0.25 && k32 > k16,
            format!(
                "largest transformer gap d=16 vs d=32 {:.3} at N*={} (<= 0.25); krr at N*=64: d=16 {k16:.4}, d=32 {k32:.4}",
                worst.1, worst.0
            ),
        )
    });

    println!("{} criteria failed", suite.failures);
    if suite.failures > 0 {
        std::process::exit(1);
    }
}
