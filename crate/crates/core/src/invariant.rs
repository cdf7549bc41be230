//! Invariant direction in reduced tangent-feature space: pooled squared loss over
//! environments plus a penalty on the spread of per-environment gradients.
//!
//! With squared loss each environment gradient is affine in `theta`,
//! `g_e(theta) = A_e theta - b_e` with `A_e = (2/n_e) Psi_e^T Psi_e` and
//! `b_e = (2/n_e) Psi_e^T y_e`, so the whole objective is a quadratic and its gradient
//! is exact.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::ntf_space::NtfSpace;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct InvariantDirection<T> {
    pub theta: Array1<T>,
    pub alpha: T,
    /// Mean squared loss per environment at `theta`, in environment-id order.
    pub per_env_losses: Vec<T>,
    pub penalty_value: T,
    pub objective: T,
    pub converged: bool,
    pub steps: usize,
    /// Objective at every accepted step, starting from `theta = 0`.
    pub objective_trace: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvariantConfig<T> {
    pub alpha: T,
    /// Step size; `None` uses the inverse of the objective's curvature bound.
    pub lr: Option<T>,
    pub steps: usize,
}

impl<T: Scalar> Default for InvariantConfig<T> {
    fn default() -> Self {
        Self {
            alpha: T::lit(10.0),
            lr: None,
            steps: 20_000,
        }
    }
}

/// Mean squared loss over rows `idx` and its gradient `(2/|idx|) Psi_e^T (Psi_e theta - y_e)`.
pub fn env_loss_and_grad<T: Scalar>(
    theta: ArrayView1<T>,
    psi: ArrayView2<T>,
    y: ArrayView1<T>,
    idx: &[usize],
) -> Result<(T, Array1<T>)> {
    if idx.is_empty() {
        return Err(Error::EmptyEnvironment(0));
    }
    if psi.ncols() != theta.len() || psi.nrows() != y.len() {
        return Err(Error::Shape(format!(
            "psi {:?}, theta {}, y {}",
            psi.dim(),
            theta.len(),
            y.len()
        )));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= y.len()) {
        return Err(Error::Shape(format!("row index {bad} out of range")));
    }
    let pe = psi.select(Axis(0), idx);
    let ye = y.select(Axis(0), idx);
    let resid = pe.dot(&theta) - &ye;
    let m = T::from_usize_lossy(idx.len());
    let loss = resid.dot(&resid) / m;
    let grad = pe.t().dot(&resid) * (T::lit(2.0) / m);
    Ok((loss, grad))
}

/// Mean squared deviation of the gradients from their mean (trace of the
/// population covariance).
pub fn gradient_variance<T: Scalar>(grads: &[Array1<T>]) -> Result<T> {
    if grads.len() < 2 {
        return Err(Error::DegeneratePenalty(format!(
            "gradient variance needs at least 2 environments, got {}",
            grads.len()
        )));
    }
    let e = T::from_usize_lossy(grads.len());
    let mut mean = Array1::<T>::zeros(grads[0].len());
    for g in grads {
        if g.len() != mean.len() {
            return Err(Error::Shape("gradients differ in length".into()));
        }
        mean += g;
    }
    mean /= e;
    Ok(grads
        .iter()
        .map(|g| {
            let d = g - &mean;
            d.dot(&d)
        })
        .sum::<T>()
        / e)
}

/// Per-environment quadratic pieces: loss `theta^T A theta / 2 - b.theta + c`, gradient `A theta - b`.
#[derive(Debug, Clone)]
struct EnvQuadratic<T> {
    a: Array2<T>,
    b: Array1<T>,
    c: T,
}

/// The objective `sum_e L_e + alpha * Var_e(grad L_e)` over fixed environments.
#[derive(Debug, Clone)]
pub struct InvariantObjective<T> {
    envs: Vec<EnvQuadratic<T>>,
    env_ids: Vec<usize>,
    alpha: T,
}

/// Groups rows by label, skipping labels with no rows. Returns `(label, rows)` pairs.
pub fn group_by_label(labels: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let count = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); count];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups.into_iter().enumerate().filter(|(_, g)| !g.is_empty()).collect()
}

impl<T: Scalar> InvariantObjective<T> {
    pub fn new(psi: ArrayView2<T>, y: ArrayView1<T>, labels: &[usize], alpha: T) -> Result<Self> {
        if !(alpha >= T::zero()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
        }
        if psi.nrows() != y.len() || labels.len() != y.len() {
            return Err(Error::Shape(format!(
                "psi has {} rows, y {}, labels {}",
                psi.nrows(),
                y.len(),
                labels.len()
            )));
        }
        let groups = group_by_label(labels);
        if groups.len() < 2 {
            return Err(Error::DegeneratePenalty(format!(
                "need at least 2 non-empty environments, got {}",
                groups.len()
            )));
        }
        let two = T::lit(2.0);
        let mut envs = Vec::with_capacity(groups.len());
        let mut env_ids = Vec::with_capacity(groups.len());
        for (id, rows) in groups {
            let pe = psi.select(Axis(0), &rows);
            let ye = y.select(Axis(0), &rows);
            let m = T::from_usize_lossy(rows.len());
            envs.push(EnvQuadratic {
                a: pe.t().dot(&pe) * (two / m),
                b: pe.t().dot(&ye) * (two / m),
                c: ye.dot(&ye) / m,
            });
            env_ids.push(id);
        }
        Ok(Self { envs, env_ids, alpha })
    }

    pub fn num_envs(&self) -> usize {
        self.envs.len()
    }

    pub fn env_ids(&self) -> &[usize] {
        &self.env_ids
    }

    fn env_grads(&self, theta: ArrayView1<T>) -> Vec<Array1<T>> {
        self.envs.iter().map(|e| e.a.dot(&theta) - &e.b).collect()
    }

    pub fn env_losses(&self, theta: ArrayView1<T>) -> Vec<T> {
        let half = T::lit(0.5);
        self.envs
            .iter()
            .map(|e| (half * theta.dot(&e.a.dot(&theta)) - e.b.dot(&theta) + e.c).max(T::zero()))
            .collect()
    }

    pub fn penalty(&self, theta: ArrayView1<T>) -> T {
        gradient_variance(&self.env_grads(theta)).expect("at least two environments")
    }

    pub fn value(&self, theta: ArrayView1<T>) -> T {
        self.env_losses(theta).into_iter().sum::<T>() + self.alpha * self.penalty(theta)
    }

    /// Exact gradient: `sum_e g_e + alpha (2/E) sum_e (A_e - A_bar)(g_e - g_bar)`.
    pub fn gradient(&self, theta: ArrayView1<T>) -> Array1<T> {
        let grads = self.env_grads(theta);
        let e = T::from_usize_lossy(grads.len());
        let k = theta.len();
        let mut gbar = Array1::<T>::zeros(k);
        let mut abar = Array2::<T>::zeros((k, k));
        for (g, env) in grads.iter().zip(&self.envs) {
            gbar += g;
            abar += &env.a;
        }
        gbar /= e;
        abar /= e;
        let mut total = Array1::<T>::zeros(k);
        let mut pen = Array1::<T>::zeros(k);
        for (g, env) in grads.iter().zip(&self.envs) {
            total += g;
            pen += &(&env.a - &abar).dot(&(g - &gbar));
        }
        total.scaled_add(self.alpha * T::lit(2.0) / e, &pen);
        total
    }

    /// Hessian `sum_e A_e + alpha (2/E) sum_e (A_e - A_bar)^2`.
    pub fn hessian(&self) -> Array2<T> {
        let k = self.envs[0].b.len();
        let e = T::from_usize_lossy(self.envs.len());
        let mut abar = Array2::<T>::zeros((k, k));
        for env in &self.envs {
            abar += &env.a;
        }
        abar /= e;
        let mut h = Array2::<T>::zeros((k, k));
        for env in &self.envs {
            h += &env.a;
            let d = &env.a - &abar;
            h.scaled_add(self.alpha * T::lit(2.0) / e, &d.dot(&d));
        }
        h
    }
}

/// Gradient descent from `theta = 0` with step halving whenever the objective would rise.
pub fn fit_theta_inv<T: Scalar>(
    psi: ArrayView2<T>,
    y: ArrayView1<T>,
    labels: &[usize],
    cfg: &InvariantConfig<T>,
) -> Result<InvariantDirection<T>> {
    let obj = InvariantObjective::new(psi, y, labels, cfg.alpha)?;
    let k = psi.ncols();
    let mut lr = match cfg.lr {
        Some(lr) if lr > T::zero() => lr,
        Some(lr) => return Err(Error::Config(format!("learning rate must be > 0, got {lr}"))),
        None => {
            let (vals, _) = linalg::symmetric_eigen(obj.hessian().view())?;
            let top = vals[0];
            if !(top > T::zero()) {
                return Err(Error::Numeric("objective has no curvature".into()));
            }
            T::one() / top
        }
    };
    let mut theta = Array1::<T>::zeros(k);
    let mut value = obj.value(theta.view());
    let mut trace = vec![value];
    let g0 = linalg::norm(obj.gradient(theta.view()).view());
    let grad_tol = T::lit(1e-9) * g0.max(T::one());
    let mut converged = false;
    let mut steps = 0;
    let min_lr = lr * T::lit(1e-12);
    'outer: for step in 0..cfg.steps {
        steps = step;
        let g = obj.gradient(theta.view());
        if linalg::norm(g.view()) <= grad_tol {
            converged = true;
            break;
        }
        loop {
            let mut cand = theta.clone();
            cand.scaled_add(-lr, &g);
            let v = obj.value(cand.view());
            if v <= value {
                theta = cand;
                value = v;
                trace.push(v);
                break;
            }
            lr *= T::lit(0.5);
            if lr < min_lr {
                // no descent possible at machine precision
                converged = true;
                break 'outer;
            }
        }
        steps = step + 1;
    }
    if !converged {
        log::debug!("invariant fit stopped after {steps} steps without reaching tolerance");
    }
    Ok(InvariantDirection {
        per_env_losses: obj.env_losses(theta.view()),
        penalty_value: obj.penalty(theta.view()),
        objective: value,
        theta,
        alpha: cfg.alpha,
        converged,
        steps,
        objective_trace: trace,
    })
}

/// [`fit_theta_inv`] with ground-truth environment labels from `data`.
///
/// `data` must hold the same rows, in the same order, as the space.
pub fn irm_baseline<T: Scalar>(
    data: &Dataset<T>,
    space: &NtfSpace<T>,
    cfg: &InvariantConfig<T>,
) -> Result<InvariantDirection<T>> {
    let labels = data
        .latent_env
        .as_ref()
        .ok_or_else(|| Error::Config("environment-labeled baseline needs latent_env".into()))?;
    if data.len() != space.n() {
        return Err(Error::Shape(format!(
            "dataset has {} rows but the space was built on {}",
            data.len(),
            space.n()
        )));
    }
    fit_theta_inv(space.psi().view(), data.y.view(), labels, cfg)
}
