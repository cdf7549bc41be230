//! Latent environment inference: a mixture of Gaussian regressions whose means are
//! kernel-ridge fits over the variant features, optimized by soft EM.
//!
//! The clustering kernel is always `K = Psi_V Psi_V^T` with `Psi_V` of rank at most
//! `k`, so the M-step is solved in the `k`-dimensional primal and the dual
//! coefficients are recovered from the residual.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::ntf_space::KernelState;
use crate::scalar::Scalar;

/// Relative column mass below which a cluster counts as empty.
const EMPTY_CLUSTER_MASS: f64 = 1e-8;
/// Slack allowed when checking that the EM objective never rises.
pub const MONOTONE_SLACK: f64 = 1e-7;

/// The pooled residual mixes the spread between clusters with the noise inside them,
/// so the default center width is a fraction of it.
pub const DEFAULT_SIGMA_SCALE: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct ClusterModel<T> {
    pub k: usize,
    /// Dual coefficients, one row per cluster.
    pub alpha_coeffs: Array2<T>,
    pub q: Array1<T>,
    pub sigma: T,
    pub ridge: T,
    /// Primal weights over the columns of `Psi_V` (`beta_j = Psi_V^T alpha_j`), when fitted in factored form.
    pub beta: Option<Array2<T>>,
}

#[derive(Debug, Clone)]
pub struct EnvPartition<T> {
    pub responsibilities: Array2<T>,
    pub hard_labels: Vec<usize>,
    /// Penalized negative log-likelihood after every M-step.
    pub objective_trace: Vec<T>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AssignMode {
    #[default]
    Argmax,
    Sample,
}

impl std::str::FromStr for AssignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(AssignMode::Argmax),
            "sample" => Ok(AssignMode::Sample),
            other => Err(Error::Config(format!("unknown assignment mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig<T> {
    pub k: usize,
    pub max_iter: usize,
    pub tol: T,
    pub seed: u64,
    pub restarts: usize,
    /// `None`: `1e-3 * trace(K) / n`.
    pub ridge: Option<T>,
    /// `None`: `sigma_scale` times the residual RMS of a pooled kernel-ridge fit.
    pub sigma: Option<T>,
    pub sigma_scale: T,
}

impl<T: Scalar> ClusterConfig<T> {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iter: 200,
            tol: T::lit(1e-6),
            seed,
            restarts: 20,
            ridge: None,
            sigma: None,
            sigma_scale: T::lit(DEFAULT_SIGMA_SCALE),
        }
    }
}

fn log_gauss<T: Scalar>(resid: T, sigma: T) -> T {
    let half_log_2pi = T::lit(0.918_938_533_204_672_8);
    -half_log_2pi - sigma.ln() - resid * resid / (T::lit(2.0) * sigma * sigma)
}

/// Density of cluster `j` at a point whose kernel row against the training inputs is `kvec`.
pub fn center_density<T: Scalar>(model: &ClusterModel<T>, j: usize, kvec: ArrayView1<T>, y: T) -> Result<T> {
    if !(model.sigma > T::zero()) {
        return Err(Error::Config(format!("sigma must be > 0, got {}", model.sigma)));
    }
    if j >= model.k || kvec.len() != model.alpha_coeffs.ncols() {
        return Err(Error::Shape(format!(
            "cluster {j} of {}, kernel row of length {} for {} coefficients",
            model.k,
            kvec.len(),
            model.alpha_coeffs.ncols()
        )));
    }
    let f = model.alpha_coeffs.row(j).dot(&kvec);
    Ok(log_gauss(y - f, model.sigma).exp())
}

/// Responsibilities from per-cluster predictions (`n x K`), in log space.
///
/// Rows whose every log-density is non-finite become uniform and add a warning.
pub fn e_step_from_predictions<T: Scalar>(
    preds: ArrayView2<T>,
    y: ArrayView1<T>,
    q: ArrayView1<T>,
    sigma: T,
    warnings: &mut Vec<String>,
) -> Array2<T> {
    let (n, k) = preds.dim();
    let logq = q.mapv(|v| v.ln());
    let mut r = Array2::<T>::zeros((n, k));
    let uniform = T::one() / T::from_usize_lossy(k);
    let mut underflow = 0usize;
    for i in 0..n {
        let mut row = r.row_mut(i);
        for j in 0..k {
            row[j] = logq[j] + log_gauss(y[i] - preds[[i, j]], sigma);
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        if !m.is_finite() {
            row.fill(uniform);
            underflow += 1;
            continue;
        }
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    if underflow > 0 {
        warnings.push(format!(
            "{underflow} points had no finite cluster density; given uniform responsibilities"
        ));
    }
    r
}

/// E-step against an explicit kernel matrix.
pub fn em_e_step<T: Scalar>(
    model: &ClusterModel<T>,
    kmat: ArrayView2<T>,
    y: ArrayView1<T>,
    warnings: &mut Vec<String>,
) -> Result<Array2<T>> {
    if !(model.sigma > T::zero()) {
        return Err(Error::Config(format!("sigma must be > 0, got {}", model.sigma)));
    }
    if kmat.dim() != (y.len(), y.len()) || model.alpha_coeffs.ncols() != y.len() {
        return Err(Error::Shape(format!(
            "kernel {:?}, {} targets, {} coefficients",
            kmat.dim(),
            y.len(),
            model.alpha_coeffs.ncols()
        )));
    }
    let preds = kmat.dot(&model.alpha_coeffs.t());
    Ok(e_step_from_predictions(
        preds.view(),
        y,
        model.q.view(),
        model.sigma,
        warnings,
    ))
}

fn check_m_step_inputs<T: Scalar>(r: ArrayView2<T>, n: usize, ridge: T, sigma: T) -> Result<()> {
    if !(ridge > T::zero()) {
        return Err(Error::Config(format!("ridge must be > 0, got {ridge}")));
    }
    if !(sigma > T::zero()) {
        return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
    }
    if r.nrows() != n || r.ncols() == 0 {
        return Err(Error::Shape(format!("responsibilities {:?} for {n} points", r.dim())));
    }
    Ok(())
}

fn mixture_weights<T: Scalar>(r: ArrayView2<T>) -> Array1<T> {
    r.sum_axis(Axis(0)) / T::from_usize_lossy(r.nrows())
}

/// M-step by dense solves of `(W_j K + ridge I) alpha_j = W_j y`.
pub fn em_m_step<T: Scalar>(
    r: ArrayView2<T>,
    kmat: ArrayView2<T>,
    y: ArrayView1<T>,
    ridge: T,
    sigma: T,
) -> Result<ClusterModel<T>> {
    let n = y.len();
    check_m_step_inputs(r, n, ridge, sigma)?;
    if kmat.dim() != (n, n) {
        return Err(Error::Shape(format!("kernel {:?} for {n} points", kmat.dim())));
    }
    let k = r.ncols();
    let mut alpha = Array2::<T>::zeros((k, n));
    for j in 0..k {
        let w = r.column(j);
        let mut a = &kmat * &w.insert_axis(Axis(1));
        for i in 0..n {
            a[[i, i]] += ridge;
        }
        let rhs = (&w * &y).insert_axis(Axis(1)).to_owned();
        let sol = linalg::lu_solve(a.view(), rhs.view())?;
        alpha.row_mut(j).assign(&sol.column(0));
    }
    Ok(ClusterModel {
        k,
        alpha_coeffs: alpha,
        q: mixture_weights(r),
        sigma,
        ridge,
        beta: None,
    })
}

/// The same M-step through the `k`-dimensional primal:
/// `beta_j = (Psi_V^T W_j Psi_V + ridge I)^-1 Psi_V^T W_j y`, `alpha_j = W_j (y - Psi_V beta_j) / ridge`.
pub fn em_m_step_factored<T: Scalar>(
    r: ArrayView2<T>,
    psi_v: ArrayView2<T>,
    y: ArrayView1<T>,
    ridge: T,
    sigma: T,
) -> Result<ClusterModel<T>> {
    let n = y.len();
    check_m_step_inputs(r, n, ridge, sigma)?;
    if psi_v.nrows() != n {
        return Err(Error::Shape(format!(
            "variant features have {} rows for {n} points",
            psi_v.nrows()
        )));
    }
    let (k, dim) = (r.ncols(), psi_v.ncols());
    let mut alpha = Array2::<T>::zeros((k, n));
    let mut beta = Array2::<T>::zeros((k, dim));
    for j in 0..k {
        let w = r.column(j);
        let weighted = &psi_v * &w.insert_axis(Axis(1));
        let mut a = weighted.t().dot(&psi_v);
        for i in 0..dim {
            a[[i, i]] += ridge;
        }
        let b = weighted.t().dot(&y);
        let bj = linalg::cholesky_solve(a.view(), b.view())
            .map_err(|e| Error::Numeric(format!("cluster {j} ridge system: {e}")))?;
        let f = psi_v.dot(&bj);
        alpha.row_mut(j).assign(&(&w * &(&y - &f) / ridge));
        beta.row_mut(j).assign(&bj);
    }
    Ok(ClusterModel {
        k,
        alpha_coeffs: alpha,
        q: mixture_weights(r),
        sigma,
        ridge,
        beta: Some(beta),
    })
}

/// Mean negative log-likelihood of the mixture at the training points.
pub fn mixture_nll<T: Scalar>(preds: ArrayView2<T>, y: ArrayView1<T>, q: ArrayView1<T>, sigma: T) -> T {
    let n = y.len();
    let logq = q.mapv(|v| v.ln());
    let mut logs = vec![T::zero(); q.len()];
    let mut total = T::zero();
    for i in 0..n {
        for (j, l) in logs.iter_mut().enumerate() {
            *l = logq[j] + log_gauss(y[i] - preds[[i, j]], sigma);
        }
        let m = logs.iter().copied().fold(T::neg_infinity(), T::max);
        let s: T = logs.iter().map(|&l| (l - m).exp()).sum();
        total += m + s.ln();
    }
    -total / T::from_usize_lossy(n)
}

/// Objective minimized by the EM loop: [`mixture_nll`] plus the ridge term
/// `ridge / (2 sigma^2 n) * sum_j ||beta_j||^2`, whose M-step is exactly the ridge solve.
fn penalized_objective<T: Scalar>(model: &ClusterModel<T>, psi_v: ArrayView2<T>, y: ArrayView1<T>) -> (T, Array2<T>) {
    let beta = model.beta.as_ref().expect("factored model");
    let preds = psi_v.dot(&beta.t());
    let nll = mixture_nll(preds.view(), y, model.q.view(), model.sigma);
    let reg = beta.iter().map(|&b| b * b).sum::<T>() * model.ridge
        / (T::lit(2.0) * model.sigma * model.sigma * T::from_usize_lossy(y.len()));
    (nll + reg, preds)
}

/// `1e-3 * trace(K) / n` for `K = Psi_V Psi_V^T`, floored away from zero.
pub fn default_ridge<T: Scalar>(psi_v: ArrayView2<T>) -> T {
    let n = T::from_usize_lossy(psi_v.nrows());
    let tr = psi_v.iter().map(|&v| v * v).sum::<T>();
    (T::lit(1e-3) * tr / n).max(T::lit(1e-10))
}

/// Residual RMS of a single kernel-ridge fit on all points.
pub fn pooled_sigma<T: Scalar>(psi_v: ArrayView2<T>, y: ArrayView1<T>, ridge: T) -> Result<T> {
    let ones = Array2::<T>::ones((y.len(), 1));
    let m = em_m_step_factored(ones.view(), psi_v, y, ridge, T::one())?;
    let f = psi_v.dot(&m.beta.expect("factored").row(0));
    let resid = &y - &f;
    let rms = (resid.dot(&resid) / T::from_usize_lossy(y.len())).sqrt();
    Ok(rms.max(sigma_floor(y)))
}

fn random_responsibilities<T: Scalar>(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let mut r = Array2::<T>::zeros((n, k));
    for mut row in r.rows_mut() {
        let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = draws.iter().sum();
        for (v, d) in row.iter_mut().zip(draws) {
            *v = T::lit(d / s);
        }
    }
    r
}

fn argmax_labels<T: Scalar>(r: ArrayView2<T>) -> Vec<usize> {
    r.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Gives the `n / K` points worst explained by the current centers to cluster `j`.
fn reseed_cluster<T: Scalar>(r: &mut Array2<T>, preds: ArrayView2<T>, y: ArrayView1<T>, j: usize) {
    let (n, k) = r.dim();
    let mut fit: Vec<(usize, T)> = (0..n)
        .map(|i| {
            let best = (0..k)
                .filter(|&c| c != j)
                .map(|c| (y[i] - preds[[i, c]]).abs())
                .fold(T::infinity(), T::min);
            (i, best)
        })
        .collect();
    fit.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    for &(i, _) in fit.iter().take((n / k).max(1)) {
        let mut row = r.row_mut(i);
        row.fill(T::zero());
        row[j] = T::one();
    }
}

struct EmRun<T> {
    model: ClusterModel<T>,
    partition: EnvPartition<T>,
}

fn sigma_floor<T: Scalar>(y: ArrayView1<T>) -> T {
    let scale = y.iter().map(|&v| v.abs()).fold(T::zero(), T::max);
    (T::lit(1e-3) * scale).max(T::lit(1e-8))
}

fn em_from<T: Scalar>(
    psi_v: ArrayView2<T>,
    y: ArrayView1<T>,
    mut r: Array2<T>,
    ridge: T,
    sigma: T,
    max_iter: usize,
    tol: T,
) -> Result<EmRun<T>> {
    let n = y.len();
    let k = r.ncols();
    let min_mass = T::lit(EMPTY_CLUSTER_MASS) * T::from_usize_lossy(n);
    let mut warnings = Vec::new();
    let mut trace: Vec<T> = Vec::new();
    let mut reseeded = false;
    let slack = T::lit(MONOTONE_SLACK);
    let mut model;
    let mut iter = 0;
    loop {
        model = em_m_step_factored(r.view(), psi_v, y, ridge, sigma)?;
        let (obj, preds) = penalized_objective(&model, psi_v, y);
        if !obj.is_finite() {
            return Err(Error::Numeric(format!("clustering objective became {obj}")));
        }
        if let Some(&prev) = trace.last() {
            if obj > prev + slack * prev.abs().max(T::one()) {
                return Err(Error::Invariant(format!(
                    "clustering objective rose from {prev:e} to {obj:e} at EM iteration {iter}"
                )));
            }
        }
        trace.push(obj);
        iter += 1;
        if iter >= max_iter {
            break;
        }
        if trace.len() >= 2 && (trace[trace.len() - 2] - obj).abs() < tol {
            break;
        }
        r = e_step_from_predictions(preds.view(), y, model.q.view(), sigma, &mut warnings);
        let mass = r.sum_axis(Axis(0));
        if let Some(j) = (0..k).find(|&j| mass[j] < min_mass) {
            if reseeded {
                warnings.push(format!(
                    "cluster {j} emptied again after reinitialization; continuing degenerate"
                ));
            } else {
                reseeded = true;
                warnings.push(format!(
                    "cluster {j} emptied at EM iteration {iter}; reinitialized from worst-fit points"
                ));
                reseed_cluster(&mut r, preds.view(), y, j);
                // the reseed is not an EM step, so monotonicity restarts here
                trace.clear();
            }
        }
    }
    let hard_labels = argmax_labels(r.view());
    Ok(EmRun {
        model,
        partition: EnvPartition {
            responsibilities: r,
            hard_labels,
            objective_trace: trace,
            warnings,
        },
    })
}

fn resolve_scales<T: Scalar>(psi_v: ArrayView2<T>, y: ArrayView1<T>, cfg: &ClusterConfig<T>) -> Result<(T, T)> {
    let ridge = cfg.ridge.unwrap_or_else(|| default_ridge(psi_v));
    let sigma = match cfg.sigma {
        Some(s) => s,
        None => (cfg.sigma_scale * pooled_sigma(psi_v, y, ridge)?).max(sigma_floor(y)),
    };
    if !(ridge > T::zero()) || !(sigma > T::zero()) {
        return Err(Error::Config(format!("ridge {ridge} and sigma {sigma} must be > 0")));
    }
    Ok((ridge, sigma))
}

fn validate<T: Scalar>(state: &KernelState<T>, y: ArrayView1<T>, cfg: &ClusterConfig<T>) -> Result<()> {
    if cfg.k < 2 {
        return Err(Error::Config(format!("need at least 2 clusters, got {}", cfg.k)));
    }
    if y.len() < cfg.k {
        return Err(Error::Config(format!(
            "{} points cannot fill {} clusters",
            y.len(),
            cfg.k
        )));
    }
    if state.psi_v.nrows() != y.len() {
        return Err(Error::Shape(format!(
            "kernel state has {} rows for {} targets",
            state.psi_v.nrows(),
            y.len()
        )));
    }
    if cfg.max_iter == 0 {
        return Err(Error::Config("max_iter must be >= 1".into()));
    }
    Ok(())
}

/// EM from `cfg.restarts` seeded random starts, ordered by final objective (best first).
pub fn clustering_restarts<T: Scalar>(
    state: &KernelState<T>,
    y: ArrayView1<T>,
    cfg: &ClusterConfig<T>,
) -> Result<Vec<(ClusterModel<T>, EnvPartition<T>)>> {
    validate(state, y, cfg)?;
    let psi_v = state.psi_v.view();
    let (ridge, sigma) = resolve_scales(psi_v, y, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut runs = Vec::with_capacity(cfg.restarts.max(1));
    for _ in 0..cfg.restarts.max(1) {
        let r0 = random_responsibilities(y.len(), cfg.k, &mut rng);
        let run = em_from(psi_v, y, r0, ridge, sigma, cfg.max_iter, cfg.tol)?;
        runs.push((run.model, run.partition));
    }
    let last = |p: &EnvPartition<T>| *p.objective_trace.last().expect("at least one M-step");
    // stable, so ties keep the earlier restart
    runs.sort_by(|a, b| last(&a.1).partial_cmp(&last(&b.1)).unwrap_or(std::cmp::Ordering::Equal));
    Ok(runs)
}

/// EM from `cfg.restarts` seeded random starts; keeps the run with the lowest final objective.
pub fn run_clustering<T: Scalar>(
    state: &KernelState<T>,
    y: ArrayView1<T>,
    cfg: &ClusterConfig<T>,
) -> Result<(ClusterModel<T>, EnvPartition<T>)> {
    Ok(clustering_restarts(state, y, cfg)?.swap_remove(0))
}

/// Fraction of points whose sign of `y` matches the majority sign in their cluster.
/// Near 1 means each cluster holds a single class.
pub fn label_homogeneity<T: Scalar>(labels: &[usize], y: ArrayView1<T>) -> f64 {
    let k = labels.iter().copied().max().map_or(0, |v| v + 1);
    let mut counts = vec![(0usize, 0usize); k];
    for (&l, &v) in labels.iter().zip(y.iter()) {
        if v > T::zero() {
            counts[l].0 += 1;
        } else {
            counts[l].1 += 1;
        }
    }
    counts.iter().map(|&(p, m)| p.max(m)).sum::<usize>() as f64 / labels.len().max(1) as f64
}

/// EM from given responsibilities (no restarts).
pub fn run_clustering_from<T: Scalar>(
    state: &KernelState<T>,
    y: ArrayView1<T>,
    cfg: &ClusterConfig<T>,
    init: Array2<T>,
) -> Result<(ClusterModel<T>, EnvPartition<T>)> {
    validate(state, y, cfg)?;
    if init.dim() != (y.len(), cfg.k) {
        return Err(Error::Shape(format!("initial responsibilities {:?}", init.dim())));
    }
    let psi_v = state.psi_v.view();
    let (ridge, sigma) = resolve_scales(psi_v, y, cfg)?;
    let run = em_from(psi_v, y, init, ridge, sigma, cfg.max_iter, cfg.tol)?;
    Ok((run.model, run.partition))
}

/// Hard environment labels: argmax (ties to the lowest id) or one categorical draw per row.
pub fn assign_environments<T: Scalar>(partition: &EnvPartition<T>, mode: AssignMode, seed: u64) -> Vec<usize> {
    match mode {
        AssignMode::Argmax => argmax_labels(partition.responsibilities.view()),
        AssignMode::Sample => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            partition
                .responsibilities
                .rows()
                .into_iter()
                .map(|row| {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    for (j, &p) in row.iter().enumerate() {
                        acc += p.to_f64_lossy();
                        if u < acc {
                            return j;
                        }
                    }
                    row.len() - 1
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn model(alpha: Array2<f64>, q: Array1<f64>, sigma: f64) -> ClusterModel<f64> {
        ClusterModel {
            k: alpha.nrows(),
            alpha_coeffs: alpha,
            q,
            sigma,
            ridge: 1e-3,
            beta: None,
        }
    }

    #[test]
    fn density_at_peak_and_one_sigma() {
        let m = model(array![[1.0, 0.0]], array![1.0], 1.0);
        let at = center_density(&m, 0, array![2.0, 5.0].view(), 2.0).unwrap();
        assert!((at - 0.398_942_280_4).abs() < 1e-9);
        let off = center_density(&m, 0, array![2.0, 5.0].view(), 3.0).unwrap();
        assert!((off - 0.241_970_724_5).abs() < 1e-9);
        let zero = model(array![[0.0, 0.0]], array![1.0], 1.0);
        let z = center_density(&zero, 0, array![2.0, 5.0].view(), 0.0).unwrap();
        assert!((z - 0.398_942_280_4).abs() < 1e-9);
    }

    #[test]
    fn density_rejects_bad_sigma() {
        let m = model(array![[0.0]], array![1.0], 0.0);
        assert!(matches!(
            center_density(&m, 0, array![1.0].view(), 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn symmetric_clusters_split_evenly() {
        let m = model(array![[0.5, 0.1], [0.5, 0.1]], array![0.5, 0.5], 1.0);
        let kmat = array![[1.0, 0.2], [0.2, 1.0]];
        let r = em_e_step(&m, kmat.view(), array![0.3, -1.0].view(), &mut vec![]).unwrap();
        assert!(r.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn degenerate_mixture_weights() {
        let m = model(array![[0.5, 0.1], [-0.2, 0.4]], array![1.0, 0.0], 1.0);
        let kmat = array![[1.0, 0.2], [0.2, 1.0]];
        let r = em_e_step(&m, kmat.view(), array![0.3, -1.0].view(), &mut vec![]).unwrap();
        assert_eq!(r, array![[1.0, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn far_points_get_uniform_rows() {
        let mut w = vec![];
        let preds = array![[0.0, 0.0]];
        let r = e_step_from_predictions(preds.view(), array![1.0].view(), array![0.0, 0.0].view(), 1.0, &mut w);
        assert_eq!(r, array![[0.5, 0.5]]);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn identity_kernel_tiny_ridge_interpolates() {
        let y: Array1<f64> = array![1.0, -2.0, 3.0];
        let r = Array2::from_elem((3, 2), 0.5);
        let m = em_m_step(r.view(), Array2::eye(3).view(), y.view(), 1e-10, 1.0).unwrap();
        for j in 0..2 {
            for i in 0..3 {
                assert!((m.alpha_coeffs[[j, i]] - y[i]).abs() < 1e-8);
            }
        }
        assert_eq!(m.q, array![0.5, 0.5]);
    }

    #[test]
    fn single_cluster_rejected() {
        let st = KernelState {
            psi_v: array![[1.0], [2.0], [3.0]],
            iteration: 0,
            theta_history: vec![],
        };
        let cfg = ClusterConfig::new(1, 0);
        assert!(matches!(
            run_clustering(&st, array![1.0, 2.0, 3.0].view(), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tie_goes_to_lowest_id() {
        let p = EnvPartition {
            responsibilities: array![[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]],
            hard_labels: vec![],
            objective_trace: vec![],
            warnings: vec![],
        };
        assert_eq!(assign_environments(&p, AssignMode::Argmax, 0), vec![0, 0, 1]);
    }

    #[test]
    fn sampling_matches_probabilities() {
        let n = 100_000;
        let r = Array2::from_shape_fn((n, 2), |(_, j)| if j == 0 { 0.3 } else { 0.7 });
        let p = EnvPartition {
            responsibilities: r,
            hard_labels: vec![],
            objective_trace: vec![],
            warnings: vec![],
        };
        let a = assign_environments(&p, AssignMode::Sample, 11);
        assert_eq!(a, assign_environments(&p, AssignMode::Sample, 11));
        let frac = a.iter().filter(|&&l| l == 0).count() as f64 / n as f64;
        assert!((frac - 0.3).abs() < 0.01, "{frac}");
    }
}
