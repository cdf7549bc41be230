use kerhrm::datagen::gen_example41;
use kerhrm::invariant::{fit_theta_inv, irm_baseline, InvariantConfig, InvariantObjective};
use kerhrm::ntf_space::decompose;
use kerhrm::{Dataset, Error};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn cfg(alpha: f64) -> InvariantConfig<f64> {
    InvariantConfig {
        alpha,
        lr: None,
        steps: 50_000,
    }
}

fn least_squares(psi: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
    let a = nalgebra::DMatrix::from_fn(psi.nrows(), psi.ncols(), |i, j| psi[[i, j]]);
    let b = nalgebra::DVector::from_fn(y.len(), |i, _| y[i]);
    let sol = a.svd(true, true).solve(&b, 1e-12).unwrap();
    Array1::from_iter(sol.iter().copied())
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}

#[test]
fn zero_alpha_reaches_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let psi = gaussian(120, 5, &mut rng);
    let truth = Array1::from(vec![1.0, -0.5, 0.25, 2.0, 0.0]);
    let y = psi.dot(&truth) + gaussian(120, 1, &mut rng).column(0).mapv(|v| 0.3 * v);
    // two arbitrary halves: with alpha = 0 the split does not matter
    let labels: Vec<usize> = (0..120).map(|i| i % 2).collect();
    let fit = fit_theta_inv(psi.view(), y.view(), &labels, &cfg(0.0)).unwrap();
    let ls = least_squares(&psi, &y);
    let loss = |t: &Array1<f64>| (psi.dot(t) - &y).mapv(|v| v * v).mean().unwrap();
    assert!(
        (loss(&fit.theta) - loss(&ls)).abs() < 1e-3,
        "{} vs {}",
        loss(&fit.theta),
        loss(&ls)
    );
}

#[test]
fn identical_environments_ignore_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let half = gaussian(50, 4, &mut rng);
    let yh = gaussian(50, 1, &mut rng).column(0).to_owned();
    let psi = ndarray::concatenate![Axis(0), half, half];
    let y = ndarray::concatenate![Axis(0), yh, yh];
    let labels: Vec<usize> = (0..100).map(|i| i / 50).collect();
    let a = fit_theta_inv(psi.view(), y.view(), &labels, &cfg(0.0)).unwrap();
    let b = fit_theta_inv(psi.view(), y.view(), &labels, &cfg(100.0)).unwrap();
    let d = (&a.theta - &b.theta).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    assert!(d < 1e-8, "max difference {d:e}");
    assert!(b.penalty_value.abs() < 1e-12);
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let psi = gaussian(40, 3, &mut rng);
    let y = gaussian(40, 1, &mut rng).column(0).to_owned();
    let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let obj = InvariantObjective::new(psi.view(), y.view(), &labels, 7.0).unwrap();
    let theta = Array1::from(vec![0.3, -1.2, 0.8]);
    let g = obj.gradient(theta.view());
    for i in 0..3 {
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[i] += 1e-6;
        dn[i] -= 1e-6;
        let fd = (obj.value(up.view()) - obj.value(dn.view())) / 2e-6;
        assert!(
            (fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1.0),
            "coord {i}: {fd} vs {}",
            g[i]
        );
    }
}

#[test]
fn objective_trace_never_rises() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let psi = gaussian(60, 4, &mut rng);
    let y = gaussian(60, 1, &mut rng).column(0).to_owned();
    let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let fit = fit_theta_inv(psi.view(), y.view(), &labels, &cfg(10.0)).unwrap();
    for w in fit.objective_trace.windows(2) {
        assert!(w[1] <= w[0]);
    }
}

#[test]
fn single_environment_is_degenerate() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let psi = gaussian(30, 3, &mut rng);
    let y = gaussian(30, 1, &mut rng).column(0).to_owned();
    let err = fit_theta_inv(psi.view(), y.view(), &[0; 30], &cfg(1.0)).unwrap_err();
    assert!(matches!(err, Error::DegeneratePenalty(_)), "{err:?}");
}

/// Input-space direction of a reduced-space `theta` when the space comes from the
/// linear Gram `X X^T`: with `X = U S V^T`, `Psi theta = X V theta`.
fn induced_direction(x: &Array2<f64>, theta: &Array1<f64>) -> Array1<f64> {
    let space = decompose(x.dot(&x.t()).view(), theta.len()).unwrap();
    let v = x.t().dot(space.u()) / space.singular_values();
    v.dot(theta)
}

fn example_cosine(seed: u64) -> f64 {
    let ex = gen_example41::<f64>(1000, &[2.0, -2.0], 5, 0.5, seed).unwrap();
    let data = Dataset::concat(&ex.envs).unwrap();
    let space = decompose(data.x.dot(&data.x.t()).view(), 5).unwrap();
    let fit = irm_baseline(&data, &space, &cfg(100.0)).unwrap();
    cosine(&induced_direction(&data.x, &fit.theta), &ex.psi_s)
}

#[test]
fn oracle_environments_recover_invariant_direction() {
    let c = example_cosine(0);
    assert!(c >= 0.95, "cos = {c}");
}

#[test]
fn labeled_baseline_equals_direct_fit() {
    let ex = gen_example41::<f64>(200, &[1.0, -1.0], 4, 0.5, 3).unwrap();
    let data = Dataset::concat(&ex.envs).unwrap();
    let space = decompose(data.x.dot(&data.x.t()).view(), 4).unwrap();
    let a = irm_baseline(&data, &space, &cfg(10.0)).unwrap();
    let labels = data.latent_env.clone().unwrap();
    let b = fit_theta_inv(space.psi().view(), data.y.view(), &labels, &cfg(10.0)).unwrap();
    assert_eq!(a.theta, b.theta);
}

#[test]
fn labeled_baseline_needs_labels() {
    let ex = gen_example41::<f64>(50, &[1.0], 3, 0.5, 3).unwrap();
    let mut data = ex.envs[0].clone();
    data.latent_env = None;
    let space = decompose(data.x.dot(&data.x.t()).view(), 3).unwrap();
    assert!(matches!(irm_baseline(&data, &space, &cfg(1.0)), Err(Error::Config(_))));
}
