use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use icl_core::baselines::NnConfig;
use icl_core::diagnostics::{self, DiagnosticsError};
use icl_core::experiment::{self, ExperimentConfig, ExperimentError, Precision, Predictor};
use icl_core::hermite::{enumerate_basis, BasisIndex};
use icl_core::model::{ModelError, ModelParams};
use icl_core::pretrain::{self, TrainError};
use icl_core::rng::{stream, Purpose};
use icl_core::task::sample_task;
use icl_core::Real;
use serde_json::json;

/// Two-stage pretraining and in-context evaluation of an MLP + linear
/// attention transformer on Gaussian single-index tasks.
#[derive(Parser)]
#[command(name = "icl-sim", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file; keys not given keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; may be repeated. Applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: u64,
    /// Run directory; created if missing and locked for the duration.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run both pretraining stages and write model.bin and report.json.
    Pretrain(Common),
    /// Risk curve of a saved transformer on fresh validation prompts.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Risk curve of a learner fitted on each validation prompt.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: BaselineMethod,
    },
    /// Pretrain, then compare transformer, kernel ridge and one-step network.
    F2(Common),
    /// One pretraining per (d, r) in d_list x r_list.
    Sweep(Common),
    /// Mechanism diagnostics; each writes <name>.csv.
    Diagnose {
        #[arg(value_enum)]
        name: Diagnostic,
        #[command(flatten)]
        common: Common,
        /// Saved model (alignment, basis-fit).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Tasks for gradient-check.
        #[arg(long, default_value_t = 100_000)]
        tasks: usize,
        /// Context length for gradient-check.
        #[arg(long, default_value_t = 1000)]
        context: usize,
        /// Neuron bias for main-term and gradient-check.
        #[arg(long, default_value_t = 1.0)]
        bias: f64,
        /// Repetitions for concentration.
        #[arg(long, default_value_t = 200)]
        reps: usize,
        /// Basis index for concentration, e.g. "1,1".
        #[arg(long)]
        basis: Option<String>,
        /// Input sample size for basis-fit.
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineMethod {
    Krr,
    NnOneStep,
    NnAdam,
    Zero,
}

#[derive(Clone, Copy, ValueEnum)]
enum Diagnostic {
    MainTerm,
    GradientCheck,
    Alignment,
    BasisFit,
    Concentration,
}

impl Diagnostic {
    fn file(self) -> &'static str {
        match self {
            Diagnostic::MainTerm => "main-term.csv",
            Diagnostic::GradientCheck => "gradient-check.csv",
            Diagnostic::Alignment => "alignment.csv",
            Diagnostic::BasisFit => "basis-fit.csv",
            Diagnostic::Concentration => "concentration.csv",
        }
    }
}

/// Holds `<run>/.lock` while alive.
struct RunDir {
    path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    fn open(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        let lock = path.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(anyhow!(Locked(path.display().to_string())));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(Self {
            path: path.to_path_buf(),
            lock,
        })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.file(name);
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("writing {}", p.display()))?))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[derive(Debug)]
struct Locked(String);

impl std::fmt::Display for Locked {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run directory {} is locked by another process", self.0)
    }
}

impl std::error::Error for Locked {}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = &c.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
        cfg.apply_text(&text)?;
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ExperimentError::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.seed = Some(c.seed);
    Ok(cfg)
}

fn setup(c: &Common) -> Result<(ExperimentConfig, RunDir)> {
    let cfg = load_config(c)?;
    let dir = RunDir::open(&c.out)?;
    fs::write(dir.file("config.txt"), cfg.to_text())?;
    Ok((cfg, dir))
}

fn write_curves(dir: &RunDir, name: &str, curves: &[experiment::RiskCurve]) -> Result<PathBuf> {
    let mut w = dir.create(name)?;
    experiment::write_curves_csv(curves, &mut w)?;
    w.flush()?;
    Ok(dir.file(name))
}

fn save_model<T: Real>(dir: &RunDir, model: &ModelParams<T>, report: &pretrain::TrainingReport) -> Result<Vec<PathBuf>> {
    model.save(&dir.file("model.bin"))?;
    fs::write(dir.file("report.json"), report.to_json_line() + "\n")?;
    Ok(vec![dir.file("model.bin"), dir.file("report.json")])
}

fn run_typed<T: Real>(cmd: &Cmd) -> Result<Vec<PathBuf>> {
    match cmd {
        Cmd::Pretrain(c) => {
            let (cfg, dir) = setup(c)?;
            let (model, report) = pretrain::pretrain::<T>(&cfg.train_config()?)?;
            save_model(&dir, &model, &report)
        }
        Cmd::Eval { common, model } => {
            let (cfg, dir) = setup(common)?;
            let model = ModelParams::<T>::load(model)?;
            if model.d() != cfg.d {
                bail!(ExperimentError::Config(format!("model has d = {}, config has d = {}", model.d(), cfg.d)));
            }
            let curves = experiment::compare_methods(&cfg, &[&experiment::Transformer(&model)])?;
            Ok(vec![write_curves(&dir, "eval.csv", &curves)?])
        }
        Cmd::Baseline { common, method } => {
            let (cfg, dir) = setup(common)?;
            let p: Box<dyn Predictor<T>> = match method {
                BaselineMethod::Krr => Box::new(experiment::Krr(cfg.krr())),
                BaselineMethod::NnOneStep => Box::new(experiment::Network(cfg.one_step_nn())),
                BaselineMethod::NnAdam => Box::new(experiment::Network(NnConfig::adam())),
                BaselineMethod::Zero => Box::new(experiment::Zero),
            };
            let curves = experiment::compare_methods(&cfg, &[p.as_ref()])?;
            Ok(vec![write_curves(&dir, "baseline.csv", &curves)?])
        }
        Cmd::F2(c) => {
            let (cfg, dir) = setup(c)?;
            let res = experiment::run_f2_comparison::<T>(&cfg)?;
            let mut out = save_model(&dir, &res.model, &res.report)?;
            out.push(write_curves(&dir, "f2.csv", &res.curves)?);
            Ok(out)
        }
        Cmd::Sweep(c) => {
            let (cfg, dir) = setup(c)?;
            let curves = experiment::run_dimension_sweep::<T>(&cfg)?;
            Ok(vec![write_curves(&dir, "sweep.csv", &curves)?])
        }
        Cmd::Diagnose {
            name,
            common,
            model,
            tasks,
            context,
            bias,
            reps,
            basis,
            samples,
        } => {
            let (cfg, dir) = setup(common)?;
            let problem = cfg.problem()?;
            let seed = common.seed;
            let mut w = dir.create(name.file())?;
            let load = || -> Result<ModelParams<T>> {
                let p = model.as_ref().ok_or_else(|| ExperimentError::Config("--model is required".into()))?;
                Ok(ModelParams::<T>::load(p)?)
            };
            match name {
                Diagnostic::MainTerm => {
                    let mut e1 = vec![0.0; problem.d];
                    e1[0] = 1.0;
                    let m = diagnostics::population_main_term(&e1, *bias, &problem, problem.coeff_second_moment())?;
                    writeln!(w, "coordinate,value")?;
                    for (k, v) in m.iter().enumerate() {
                        writeln!(w, "{k},{v:e}")?;
                    }
                }
                Diagnostic::GradientCheck => {
                    let neuron = tilted_neuron(problem.d, problem.r);
                    let g = diagnostics::empirical_gradient_check(&problem, &neuron, *bias, *tasks, *context, seed)?;
                    g.write_csv(&mut w)?;
                    fs::write(
                        dir.file("gradient-check.json"),
                        json!({
                            "relative_deviation": g.relative_deviation,
                            "empirical": g.empirical,
                            "stderr": g.stderr,
                            "main_term": g.main_term,
                        })
                        .to_string()
                            + "\n",
                    )?;
                }
                Diagnostic::Alignment => {
                    let trained = load()?;
                    let w0 = pretrain::init_params::<T>(&cfg.train_config()?)?.w;
                    let rep = diagnostics::alignment_report(trained.w.view(), Some(w0.view()), &problem)?;
                    rep.write_csv(&mut w)?;
                    fs::write(
                        dir.file("alignment.json"),
                        json!({"mean_ratio": rep.mean_ratio, "stderr": rep.stderr, "baseline": rep.baseline}).to_string()
                            + "\n",
                    )?;
                }
                Diagnostic::BasisFit => {
                    let features = load()?;
                    let basis = enumerate_basis(problem.r, problem.q, problem.p)?;
                    let x = diagnostics::gaussian_sample::<T>(*samples, problem.d, seed, 0);
                    let fit = diagnostics::fit_basis_network(&features, x.view(), &basis, &problem, None)?;
                    fit.write_csv(&mut w)?;
                }
                Diagnostic::Concentration => {
                    let idx = match basis {
                        Some(s) => BasisIndex::new(
                            s.split(',')
                                .map(|v| v.trim().parse::<u32>())
                                .collect::<Result<_, _>>()
                                .map_err(|e| ExperimentError::Config(format!("--basis: {e}")))?,
                        )?,
                        None => enumerate_basis(problem.r, problem.q, problem.p)?.remove(0),
                    };
                    let task = sample_task::<f64, _>(&problem, &mut stream(seed, Purpose::Diagnostic, u64::MAX >> 9))?;
                    let grid: Vec<usize> = (6..=14).map(|k| 1 << k).collect();
                    let c = diagnostics::correlation_concentration(&problem, &task, &idx, &grid, *reps, seed)?;
                    c.write_csv(&mut w)?;
                    fs::write(dir.file("concentration.json"), json!({"slope": c.slope, "exact": c.exact}).to_string() + "\n")?;
                }
            }
            w.flush()?;
            Ok(vec![dir.file(name.file())])
        }
    }
}

/// Unit neuron with most of its mass in the index subspace.
fn tilted_neuron(d: usize, r: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..d).map(|k| if k < r { 1.0 + 0.3 * k as f64 } else { 0.15 }).collect();
    let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter_mut().for_each(|v| *v /= n);
    w
}

fn common(cmd: &Cmd) -> &Common {
    match cmd {
        Cmd::Pretrain(c) | Cmd::F2(c) | Cmd::Sweep(c) => c,
        Cmd::Eval { common, .. } | Cmd::Baseline { common, .. } | Cmd::Diagnose { common, .. } => common,
    }
}

fn command_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Pretrain(_) => "pretrain",
        Cmd::Eval { .. } => "eval",
        Cmd::Baseline { .. } => "baseline",
        Cmd::F2(_) => "f2",
        Cmd::Sweep(_) => "sweep",
        Cmd::Diagnose { .. } => "diagnose",
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if cause.is::<Locked>() {
            return "locked";
        }
        if let Some(x) = cause.downcast_ref::<ExperimentError>() {
            return match x {
                ExperimentError::Config(_) => "config",
                ExperimentError::Task(_) => "config",
                ExperimentError::Train(_) => "train",
                ExperimentError::Model(_) => "model",
                ExperimentError::Baseline(_) => "baseline",
                ExperimentError::Csv(_) | ExperimentError::Io(_) => "io",
            };
        }
        if cause.is::<TrainError>() {
            return "train";
        }
        if cause.is::<ModelError>() {
            return "model";
        }
        if cause.is::<DiagnosticsError>() {
            return "diagnostic";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"status": "error", "kind": "usage", "message": e.kind().to_string()}));
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let start = Instant::now();
    let precision = load_config(common(&cli.cmd)).map(|c| c.precision);
    let res = precision.and_then(|p| match p {
        Precision::F64 => run_typed::<f64>(&cli.cmd),
        Precision::F32 => run_typed::<f32>(&cli.cmd),
    });
    match res {
        Ok(outputs) => {
            println!(
                "{}",
                json!({
                    "status": "ok",
                    "command": command_name(&cli.cmd),
                    "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
                    "wall_ms": start.elapsed().as_secs_f64() * 1e3,
                })
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({"status": "error", "kind": error_kind(&e), "command": command_name(&cli.cmd), "message": format!("{e:#}")})
            );
            ExitCode::FAILURE
        }
    }
}
