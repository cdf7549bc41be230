//! Quick randomized self-checks behind the `check` subcommand.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::heterogeneity::{run_clustering, ClusterConfig, MONOTONE_SLACK};
use crate::invariant::InvariantObjective;
use crate::linalg;
use crate::mlp::{feedback_objective, Activation, Alignment, MlpState};
use crate::ntf_space::{decompose, orthogonal_update, KernelMode, KernelState};

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub tolerance: f64,
}

fn normal(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

fn rel_err(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let d = a - b;
    linalg::norm(d.view()) / linalg::norm(a.view()).max(linalg::norm(b.view())).max(1e-12)
}

/// Central differences of `f` at `w`.
fn fd_gradient(w: &Array1<f64>, h: f64, mut f: impl FnMut(&Array1<f64>) -> f64) -> Array1<f64> {
    let mut g = Array1::zeros(w.len());
    let mut wp = w.clone();
    for i in 0..w.len() {
        wp[i] = w[i] + h;
        let up = f(&wp);
        wp[i] = w[i] - h;
        let dn = f(&wp);
        wp[i] = w[i];
        g[i] = (up - dn) / (2.0 * h);
    }
    g
}

fn outcome(name: &'static str, worst: f64, tolerance: f64) -> CheckOutcome {
    CheckOutcome {
        name,
        passed: worst <= tolerance,
        worst,
        tolerance,
    }
}

fn ntf_rows(cases: usize, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for c in 0..cases {
        let act = if c % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let model = MlpState::<f64>::init(3, 6, act, rng.random())?;
        let x = normal(rng, (1, 3));
        let phi = model.ntf(x.view())?;
        let w = model.flatten();
        let fd = fd_gradient(&w, 1e-6, |p| {
            model.with_params(p.view()).unwrap().forward(x.view()).unwrap()[0]
        });
        worst = worst.max(rel_err(&phi.row(0).to_owned(), &fd));
    }
    Ok(outcome("ntf rows vs finite differences", worst, 1e-4))
}

fn invariant_gradient(cases: usize, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let psi = normal(rng, (30, 4));
        let y = normal(rng, (30, 1)).column(0).to_owned();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let obj = InvariantObjective::new(psi.view(), y.view(), &labels, 10.0)?;
        let theta = normal(rng, (4, 1)).column(0).to_owned();
        let fd = fd_gradient(&theta, 1e-5, |t| obj.value(t.view()));
        worst = worst.max(rel_err(&obj.gradient(theta.view()), &fd));
    }
    Ok(outcome(
        "invariant objective gradient vs finite differences",
        worst,
        1e-4,
    ))
}

fn feedback_gradient(cases: usize, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let model0 = MlpState::<f64>::init(3, 5, Activation::Tanh, rng.random())?;
        let x = normal(rng, (12, 3));
        let y = normal(rng, (12, 1)).column(0).to_owned();
        let space = decompose(model0.tangent_gram(x.view())?.view(), 4)?;
        let theta = normal(rng, (4, 1)).column(0).to_owned();
        let align = Alignment::new(&theta, &space)?;
        let f0 = model0.forward(x.view())?;
        let mut w = model0.flatten();
        w.mapv_inplace(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal));
        let model = model0.with_params(w.view())?;
        let (_, grad, _) = feedback_objective(&model, x.view(), y.view(), f0.view(), Some(&align), 1.0)?;
        let fd = fd_gradient(&w, 1e-6, |p| {
            let m = model0.with_params(p.view()).unwrap();
            feedback_objective(&m, x.view(), y.view(), f0.view(), Some(&align), 1.0)
                .unwrap()
                .0
        });
        worst = worst.max(rel_err(&grad, &fd));
    }
    Ok(outcome(
        "feedback objective gradient vs finite differences",
        worst,
        1e-4,
    ))
}

fn gram_spectrum(cases: usize, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.random_range(5..=20);
        let p = rng.random_range(3..=20);
        let phi = normal(rng, (n, p));
        let g = phi.dot(&phi.t());
        let k = n.min(p).min(4);
        let space = decompose(g.view(), k)?;
        // singular values of phi from the eigenvalues of phi^T phi
        let (evals, _) = linalg::symmetric_eigen(phi.t().dot(&phi).view())?;
        let mut sv: Vec<f64> = evals.iter().map(|v| v.max(0.0).sqrt()).collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in space.singular_values().iter().zip(&sv) {
            worst = worst.max((a - b).abs() / b.max(1.0));
        }
    }
    Ok(outcome("gram eigensolve vs primal spectrum", worst, 1e-8))
}

fn orthogonality(cases: usize, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let phi = normal(rng, (25, 8));
        let space = decompose(phi.dot(&phi.t()).view(), 5)?;
        let mut state = KernelState::initial(&space);
        for mode in [KernelMode::Fresh, KernelMode::Cumulative] {
            let theta = normal(rng, (5, 1)).column(0).to_owned();
            state = orthogonal_update(&space, &state, theta.view(), mode)?;
            worst = worst.max(state.orthogonality_residual(theta.view()));
        }
    }
    Ok(outcome("kernel update orthogonality", worst, 1e-8))
}

fn em_monotone(cases: usize, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let phi = normal(rng, (60, 6));
        let space = decompose(phi.dot(&phi.t()).view(), 6)?;
        let y = normal(rng, (60, 1)).column(0).to_owned();
        let mut cfg = ClusterConfig::new(2, rng.random());
        cfg.max_iter = 50;
        cfg.restarts = 1;
        let (_, part) = run_clustering(&KernelState::initial(&space), y.view(), &cfg)?;
        for w in part.objective_trace.windows(2) {
            worst = worst.max((w[1] - w[0]) / w[0].abs().max(1.0));
        }
    }
    Ok(outcome("EM objective non-increasing", worst, MONOTONE_SLACK))
}

/// Runs every check with `cases` random instances each.
pub fn run_checks(cases: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        ntf_rows(cases, &mut rng)?,
        invariant_gradient(cases, &mut rng)?,
        feedback_gradient(cases, &mut rng)?,
        gram_spectrum(cases, &mut rng)?,
        orthogonality(cases, &mut rng)?,
        em_monotone(cases, &mut rng)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_on_small_budget() {
        for c in run_checks(5, 3).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}
