//! The outer KerHRM loop and the baselines, for one replica (seed) at a time.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method, Task};
use super::metrics::{env_diagnostics, env_metric, EnvDiagnostics, MetricRecord, TaskKind};
use crate::datagen;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::heterogeneity::{
    assign_environments, clustering_restarts, label_homogeneity, ClusterConfig, ClusterModel, EnvPartition,
};
use crate::invariant::{fit_theta_inv, InvariantConfig};
use crate::linalg;
use crate::mlp::{train_feedback, Alignment, MlpState, TrainConfig};
use crate::ntf_space::{decompose, orthogonal_update, KernelState, NtfSpace};
use crate::scalar::Scalar;

/// Pooled training data (minus the validation holdout) and the test environments of one seed.
#[derive(Debug, Clone)]
pub struct Replica<T> {
    pub seed: u64,
    pub kind: TaskKind,
    pub train: Dataset<T>,
    pub holdout: Dataset<T>,
    pub tests: Vec<Dataset<T>>,
    pub warnings: Vec<String>,
}

/// Environments in configured order; `None` marks an empty CSV bucket.
pub type Environments<T> = Vec<Option<Dataset<T>>>;

/// All environments for `seed`, with the task kind and loader warnings.
pub fn load_environments<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Environments<T>, TaskKind, Vec<String>)> {
    let some = |v: Vec<Dataset<T>>| v.into_iter().map(Some).collect::<Vec<_>>();
    match cfg.task {
        Task::Classification => {
            let g = datagen::SpuriousClsConfig {
                seed,
                ..cfg.cls.clone()
            };
            Ok((
                some(datagen::gen_spurious_classification(&g)?),
                TaskKind::Classification,
                vec![],
            ))
        }
        Task::Regression => {
            let g = datagen::SelBiasConfig {
                seed,
                ..cfg.sel.clone()
            };
            Ok((some(datagen::gen_selection_bias(&g)?), TaskKind::Regression, vec![]))
        }
        Task::ColoredMnist => {
            let (Some(img), Some(lab)) = (&cfg.mnist_images, &cfg.mnist_labels) else {
                return Err(Error::Config(
                    "colored_mnist needs mnist.images and mnist.labels".into(),
                ));
            };
            let raw = datagen::load_mnist_idx(img, lab)?;
            let g = datagen::ColoredMnistConfig {
                seed,
                ..cfg.cmnist.clone()
            };
            Ok((
                some(datagen::make_colored_mnist(&raw, &g)?),
                TaskKind::Classification,
                vec![],
            ))
        }
        Task::Csv => {
            let path = cfg
                .csv_path
                .as_ref()
                .ok_or_else(|| Error::Config("csv task needs csv.path".into()))?;
            let t = datagen::load_csv_regression(
                path,
                &cfg.csv_target,
                &cfg.csv_env,
                &cfg.csv_thresholds,
                &cfg.train_envs,
            )?;
            Ok((t.envs, TaskKind::Regression, t.warnings))
        }
    }
}

pub fn build_replica<T: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<Replica<T>> {
    let (envs, kind, mut warnings) = load_environments::<T>(cfg, seed)?;
    if let Some(&bad) = cfg.train_envs.iter().find(|&&e| e >= envs.len()) {
        return Err(Error::Config(format!(
            "train env {bad} does not exist ({} environments)",
            envs.len()
        )));
    }
    let mut train_parts = Vec::new();
    let mut tests = Vec::new();
    for (i, env) in envs.into_iter().enumerate() {
        match env {
            Some(d) if cfg.train_envs.contains(&i) => train_parts.push(d),
            Some(d) => tests.push(d),
            None => warnings.push(format!("environment {i} is empty and skipped")),
        }
    }
    if tests.is_empty() {
        return Err(Error::Config(
            "no test environments remain after choosing train_envs".into(),
        ));
    }
    let pooled = Dataset::concat(&train_parts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_ba5e);
    let (train, holdout) = pooled.split_holdout(cfg.holdout, &mut rng)?;
    Ok(Replica {
        seed,
        kind,
        train,
        holdout,
        tests,
        warnings,
    })
}

/// The network at initialization and the spectral factors of its tangent kernel on
/// the training inputs, at the largest rank in the sweep.
#[derive(Debug, Clone)]
pub struct Basis<T> {
    pub model0: MlpState<T>,
    pub space: NtfSpace<T>,
    pub lr: T,
    /// `y - f_{w0}(X)` on the training rows: the target of the linearized model.
    pub residual: Array1<T>,
}

pub fn build_basis<T: Scalar>(cfg: &ExperimentConfig, replica: &Replica<T>) -> Result<Basis<T>> {
    let x = replica.train.x.view();
    let model0 = MlpState::init(x.ncols(), cfg.hidden, cfg.activation, replica.seed)?;
    let g = model0.tangent_gram(x)?;
    let kmax = cfg.k_grid.iter().copied().max().expect("validated").min(x.nrows());
    let space = decompose(g.view(), kmax)?;
    let n = T::from_usize_lossy(x.nrows());
    let top = space.singular_values()[0];
    // one over the curvature of the linearized mean squared loss
    let lr = cfg.lr.map_or_else(|| T::lit(0.5) * n / (top * top), T::lit);
    let residual = &replica.train.y - &model0.forward(x)?;
    Ok(Basis {
        model0,
        space,
        lr,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub train: f64,
    pub holdout: f64,
    pub test: MetricRecord,
}

pub fn evaluate<T: Scalar>(model: &MlpState<T>, replica: &Replica<T>) -> Result<Evaluation> {
    let score = |d: &Dataset<T>| -> Result<f64> {
        let p = model.forward(d.x.view())?;
        Ok(env_metric(p.view(), d.y.view(), replica.kind))
    };
    let test = replica.tests.iter().map(score).collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        train: score(&replica.train)?,
        holdout: score(&replica.holdout)?,
        test: MetricRecord::from_values(test),
    })
}

/// True when `a` is a better validation score than `b`.
fn better(kind: TaskKind, a: f64, b: f64) -> bool {
    match kind {
        TaskKind::Classification => a > b,
        TaskKind::Regression => a < b,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub theta_norm: f64,
    pub alignment_cosine: Option<f64>,
    pub cluster_objective: f64,
    pub em_iterations: usize,
    pub purity: Option<f64>,
    pub kl: Option<f64>,
    pub orthogonality_residual: f64,
    pub eval: Evaluation,
}

fn train_config<T: Scalar>(cfg: &ExperimentConfig, basis: &Basis<T>, lambda: f64) -> TrainConfig<T> {
    TrainConfig {
        lambda: T::lit(lambda),
        epochs: cfg.epochs,
        lr: basis.lr,
    }
}

fn inv_config<T: Scalar>(cfg: &ExperimentConfig) -> InvariantConfig<T> {
    InvariantConfig {
        alpha: T::lit(cfg.alpha),
        lr: cfg.inv_lr.map(T::lit),
        steps: cfg.inv_steps,
    }
}

/// Least squares on the reduced features, used when clustering leaves one environment.
fn pooled_theta<T: Scalar>(psi: ArrayView2<T>, y: &Array1<T>) -> Result<Array1<T>> {
    let mut a = psi.t().dot(&psi);
    let jitter = T::lit(1e-10) * (0..a.nrows()).map(|i| a[[i, i]]).sum::<T>();
    for i in 0..a.nrows() {
        a[[i, i]] += jitter;
    }
    linalg::cholesky_solve(a.view(), psi.t().dot(y).view())
}

/// Above this, a classification partition is treated as a split by class.
pub const LABEL_SPLIT_HOMOGENEITY: f64 = 0.95;

/// Lowest-objective restart, skipping partitions that just separate the classes:
/// with +-1 targets a constant center per class fits perfectly, and such
/// environments say nothing about which features are invariant.
fn pick_partition<T: Scalar>(
    runs: Vec<(ClusterModel<T>, EnvPartition<T>)>,
    y: &Array1<T>,
    kind: TaskKind,
    t: usize,
    warnings: &mut Vec<String>,
) -> EnvPartition<T> {
    let split = |p: &EnvPartition<T>| label_homogeneity(&p.hard_labels, y.view()) > LABEL_SPLIT_HOMOGENEITY;
    let n = runs.len();
    let mut first = None;
    for (_, p) in runs {
        if kind == TaskKind::Regression || !split(&p) {
            return p;
        }
        first.get_or_insert(p);
    }
    warnings.push(format!(
        "iteration {t}: all {n} clustering restarts split by class; keeping the best"
    ));
    first.expect("at least one restart")
}

fn iteration_seed(seed: u64, t: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (t as u64)
}

/// Result of a reduced-space method at one rank.
#[derive(Debug, Clone)]
pub struct LoopRun<T> {
    pub k: usize,
    pub model: MlpState<T>,
    pub theta: Array1<T>,
    pub labels: Vec<usize>,
    pub trace: Vec<IterationRecord>,
    pub warnings: Vec<String>,
}

/// Runs `iterations` rounds of: cluster with the current kernel, fit the invariant
/// direction on the learned environments, feedback-train the network, and project the
/// direction out of the kernel features.
pub fn kerhrm_loop<T: Scalar>(
    cfg: &ExperimentConfig,
    replica: &Replica<T>,
    basis: &Basis<T>,
    k: usize,
    iterations: usize,
) -> Result<LoopRun<T>> {
    let space = basis.space.truncate(k.min(basis.space.k()))?;
    let x = replica.train.x.view();
    let y = &replica.train.y;
    let mut state = KernelState::initial(&space);
    let mut model = basis.model0.clone();
    let mut trace = Vec::with_capacity(iterations);
    let mut warnings = Vec::new();
    let mut theta = Array1::zeros(space.k());
    let mut labels = Vec::new();
    for t in 1..=iterations {
        let mut step = || -> Result<IterationRecord> {
            let ccfg = ClusterConfig {
                k: cfg.clusters,
                max_iter: cfg.em_max_iter,
                tol: T::lit(cfg.em_tol),
                seed: iteration_seed(replica.seed, t),
                restarts: cfg.em_restarts,
                ridge: cfg.em_ridge.map(T::lit),
                sigma: cfg.em_sigma.map(T::lit),
                sigma_scale: T::lit(cfg.em_sigma_scale),
            };
            let part = pick_partition(
                clustering_restarts(&state, y.view(), &ccfg)?,
                y,
                replica.kind,
                t,
                &mut warnings,
            );
            warnings.extend(part.warnings.iter().cloned());
            labels = assign_environments(&part, cfg.assign, iteration_seed(replica.seed, t));
            let diag = env_diagnostics(&labels, &replica.train)?;
            theta = match fit_theta_inv(space.psi().view(), basis.residual.view(), &labels, &inv_config(cfg)) {
                Ok(d) => d.theta,
                Err(Error::DegeneratePenalty(msg)) => {
                    warnings.push(format!("iteration {t}: {msg}; falling back to pooled regression"));
                    pooled_theta(space.psi().view(), &basis.residual)?
                }
                Err(e) => return Err(e),
            };
            let align = Alignment::new(&theta, &space)?;
            let start = if cfg.warm_start {
                model.clone()
            } else {
                basis.model0.clone()
            };
            let (trained, report) =
                train_feedback(&start, x, y.view(), Some(&align), &train_config(cfg, basis, cfg.lambda))?;
            if report.non_converged {
                warnings.push(format!(
                    "iteration {t}: feedback training ended above its starting loss"
                ));
            }
            model = trained;
            state = orthogonal_update(&space, &state, theta.view(), cfg.kernel_mode)?;
            Ok(IterationRecord {
                iteration: t,
                theta_norm: linalg::norm(theta.view()).to_f64_lossy(),
                alignment_cosine: report.final_cosine,
                cluster_objective: part.objective_trace.last().map_or(f64::NAN, |v| v.to_f64_lossy()),
                em_iterations: part.objective_trace.len(),
                purity: diag.purity,
                kl: diag.kl,
                orthogonality_residual: state.orthogonality_residual(theta.view()).to_f64_lossy(),
                eval: evaluate(&model, replica)?,
            })
        };
        let rec = step().map_err(|e| e.at_iteration(t))?;
        trace.push(rec);
    }
    Ok(LoopRun {
        k: space.k(),
        model,
        theta,
        labels,
        trace,
        warnings,
    })
}

/// Invariant direction from the ground-truth training environments, then feedback training.
pub fn irm_run<T: Scalar>(
    cfg: &ExperimentConfig,
    replica: &Replica<T>,
    basis: &Basis<T>,
    k: usize,
) -> Result<LoopRun<T>> {
    let space = basis.space.truncate(k.min(basis.space.k()))?;
    let labels = replica
        .train
        .latent_env
        .clone()
        .ok_or_else(|| Error::Config("environment-labeled baseline needs latent_env".into()))?;
    let inv = fit_theta_inv(space.psi().view(), basis.residual.view(), &labels, &inv_config(cfg))?;
    let align = Alignment::new(&inv.theta, &space)?;
    let (model, _) = train_feedback(
        &basis.model0,
        replica.train.x.view(),
        replica.train.y.view(),
        Some(&align),
        &train_config(cfg, basis, cfg.lambda),
    )?;
    Ok(LoopRun {
        k: space.k(),
        model,
        theta: inv.theta,
        labels,
        trace: Vec::new(),
        warnings: Vec::new(),
    })
}

pub fn erm_model<T: Scalar>(cfg: &ExperimentConfig, replica: &Replica<T>, basis: &Basis<T>) -> Result<MlpState<T>> {
    let (model, _) = train_feedback(
        &basis.model0,
        replica.train.x.view(),
        replica.train.y.view(),
        None,
        &train_config(cfg, basis, 0.0),
    )?;
    Ok(model)
}

/// Outcome of one method on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Selected rank, for reduced-space methods.
    pub k: Option<usize>,
    pub eval: Evaluation,
    pub diagnostics: Option<EnvDiagnostics>,
    pub trace: Vec<IterationRecord>,
    pub warnings: Vec<String>,
}

/// Runs every requested method on one seed, sharing data, initialization, and
/// spectral factors. Reduced-space methods pick their rank by holdout score.
pub fn run_seed<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    methods: &[Method],
) -> Result<BTreeMap<Method, SeedResult>> {
    let replica = build_replica::<T>(cfg, seed)?;
    run_seed_on(cfg, &replica, methods)
}

pub fn run_seed_on<T: Scalar>(
    cfg: &ExperimentConfig,
    replica: &Replica<T>,
    methods: &[Method],
) -> Result<BTreeMap<Method, SeedResult>> {
    let basis = build_basis(cfg, replica)?;
    let mut base_warnings = replica.warnings.clone();
    base_warnings.extend(basis.space.warnings().iter().cloned());
    let kind = replica.kind;
    let mut out = BTreeMap::new();

    if methods.contains(&Method::Erm) {
        let model = erm_model(cfg, replica, &basis)?;
        out.insert(
            Method::Erm,
            SeedResult {
                seed: replica.seed,
                k: None,
                eval: evaluate(&model, replica)?,
                diagnostics: None,
                trace: Vec::new(),
                warnings: base_warnings.clone(),
            },
        );
    }

    let want_full = methods.contains(&Method::KerHrm);
    let want_static = methods.contains(&Method::KerHrmStatic);
    if want_full || want_static {
        let iterations = if want_full { cfg.iterations } else { 1 };
        let mut best_full: Option<LoopRun<T>> = None;
        let mut best_static: Option<LoopRun<T>> = None;
        for &k in &cfg.k_grid {
            let run = kerhrm_loop(cfg, replica, &basis, k, iterations)?;
            let last = run.trace.last().expect("iterations >= 1").eval.holdout;
            let first = run.trace[0].eval.holdout;
            if want_static
                && best_static
                    .as_ref()
                    .is_none_or(|b| better(kind, first, b.trace[0].eval.holdout))
            {
                best_static = Some(run.clone());
            }
            if want_full
                && best_full
                    .as_ref()
                    .is_none_or(|b| better(kind, last, b.trace.last().expect("non-empty").eval.holdout))
            {
                best_full = Some(run);
            }
        }
        if let Some(run) = best_full {
            let rec = run.trace.last().expect("non-empty");
            let mut warnings = base_warnings.clone();
            warnings.extend(run.warnings.iter().cloned());
            out.insert(
                Method::KerHrm,
                SeedResult {
                    seed: replica.seed,
                    k: Some(run.k),
                    eval: rec.eval.clone(),
                    diagnostics: Some(EnvDiagnostics {
                        purity: rec.purity,
                        kl: rec.kl,
                    }),
                    trace: run.trace.clone(),
                    warnings,
                },
            );
        }
        if let Some(run) = best_static {
            let rec = &run.trace[0];
            let mut warnings = base_warnings.clone();
            warnings.extend(run.warnings.iter().cloned());
            out.insert(
                Method::KerHrmStatic,
                SeedResult {
                    seed: replica.seed,
                    k: Some(run.k),
                    eval: rec.eval.clone(),
                    diagnostics: Some(EnvDiagnostics {
                        purity: rec.purity,
                        kl: rec.kl,
                    }),
                    trace: vec![rec.clone()],
                    warnings,
                },
            );
        }
    }

    if methods.contains(&Method::Irm) {
        let mut best: Option<(LoopRun<T>, Evaluation)> = None;
        for &k in &cfg.k_grid {
            let run = irm_run(cfg, replica, &basis, k)?;
            let ev = evaluate(&run.model, replica)?;
            if best.as_ref().is_none_or(|(_, b)| better(kind, ev.holdout, b.holdout)) {
                best = Some((run, ev));
            }
        }
        let (run, eval) = best.expect("non-empty k grid");
        out.insert(
            Method::Irm,
            SeedResult {
                seed: replica.seed,
                k: Some(run.k),
                eval,
                diagnostics: None,
                trace: Vec::new(),
                warnings: base_warnings.clone(),
            },
        );
    }
    Ok(out)
}
