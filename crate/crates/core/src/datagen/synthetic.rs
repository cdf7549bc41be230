use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

/// How the invariant and variant blocks are mixed into the observed features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scramble {
    #[default]
    Identity,
    RandomOrthogonal,
}

impl std::str::FromStr for Scramble {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Scramble::Identity),
            "random_orthogonal" | "orthogonal" => Ok(Scramble::RandomOrthogonal),
            other => Err(Error::Config(format!("unknown scramble `{other}`"))),
        }
    }
}

/// Seeded random orthogonal matrix: Gram-Schmidt QR of a Gaussian matrix, `R` diagonal positive.
pub fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut q = Array2::from_shape_simple_fn((n, n), || rng.sample(StandardNormal));
    linalg::orthonormalize_columns(&mut q, rng);
    q
}

fn scramble_matrix(kind: Scramble, n: usize, rng: &mut ChaCha8Rng) -> Option<Array2<f64>> {
    match kind {
        Scramble::Identity => None,
        Scramble::RandomOrthogonal => Some(random_orthogonal(n, rng)),
    }
}

/// `X = H z` row-wise, i.e. `Z H^T`.
fn apply_scramble(z: Array2<f64>, h: Option<&Array2<f64>>) -> Array2<f64> {
    match h {
        Some(h) => z.dot(&h.t()),
        None => z,
    }
}

fn rademacher(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousClsConfig {
    pub d: usize,
    pub sigma_s2: f64,
    pub sigma_v2: f64,
    pub bias_rates: Vec<f64>,
    pub n_per_env: Vec<usize>,
    pub scramble: Scramble,
    pub seed: u64,
}

impl Default for SpuriousClsConfig {
    fn default() -> Self {
        Self {
            d: 5,
            sigma_s2: 3.0,
            sigma_v2: 0.3,
            bias_rates: vec![0.9, 0.8, 0.1],
            n_per_env: vec![1000, 1000, 1000],
            scramble: Scramble::RandomOrthogonal,
            seed: 0,
        }
    }
}

impl SpuriousClsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        if !(self.sigma_s2 > 0.0 && self.sigma_v2 > 0.0) {
            return Err(Error::Config("sigma_s2 and sigma_v2 must be > 0".into()));
        }
        if self.bias_rates.is_empty() || self.bias_rates.len() != self.n_per_env.len() {
            return Err(Error::Config(
                "bias_rates and n_per_env must be non-empty and equally long".into(),
            ));
        }
        if let Some(r) = self.bias_rates.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::Config(format!("bias rate {r} outside (0, 1]")));
        }
        if self.n_per_env.contains(&0) {
            return Err(Error::Config("every environment needs at least one point".into()));
        }
        Ok(())
    }
}

/// One dataset per configured environment, all sharing the same scramble matrix.
///
/// `spurious_attr` holds the attribute `A`; `latent_env` the environment index.
pub fn gen_spurious_classification<T: Scalar>(cfg: &SpuriousClsConfig) -> Result<Vec<Dataset<T>>> {
    cfg.validate()?;
    let d = cfg.d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = scramble_matrix(cfg.scramble, 2 * d, &mut rng);
    let (ss, sv) = (cfg.sigma_s2.sqrt(), cfg.sigma_v2.sqrt());
    let mut out = Vec::with_capacity(cfg.bias_rates.len());
    for (env, (&r, &n)) in cfg.bias_rates.iter().zip(&cfg.n_per_env).enumerate() {
        let y: Vec<f64> = (0..n).map(|_| rademacher(&mut rng)).collect();
        let agree = (n as f64 * r).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut a = vec![0.0; n];
        for (rank, &i) in order.iter().enumerate() {
            a[i] = if rank < agree { y[i] } else { -y[i] };
        }
        let mut z = Array2::<f64>::zeros((n, 2 * d));
        for i in 0..n {
            for j in 0..d {
                z[[i, j]] = y[i] + ss * rng.sample::<f64, _>(StandardNormal);
                z[[i, d + j]] = a[i] + sv * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let x = apply_scramble(z, h.as_ref());
        let ds = Dataset::with_annotations(x, Array1::from(y), Some(vec![env; n]), Some(a))?;
        out.push(ds.cast());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelBiasConfig {
    pub n_s: usize,
    pub d: usize,
    pub beta: f64,
    pub theta_s: Vec<f64>,
    pub noise_sd: f64,
    pub rates: Vec<f64>,
    pub n_per_env: Vec<usize>,
    pub scramble: Scramble,
    pub seed: u64,
}

impl Default for SelBiasConfig {
    fn default() -> Self {
        Self {
            n_s: 5,
            d: 10,
            beta: 5.0,
            theta_s: vec![0.5, -1.0, 1.0, -0.5, 1.0],
            noise_sd: 0.3f64.sqrt(),
            rates: vec![2.3, -1.1, -2.9, -2.7, -2.5, -2.3, -2.1, -1.9],
            n_per_env: vec![1000, 100, 1000, 1000, 1000, 1000, 1000, 1000],
            scramble: Scramble::RandomOrthogonal,
            seed: 0,
        }
    }
}

impl SelBiasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_s < 3 {
            return Err(Error::Config("n_s must be >= 3 for the S1*S2*S3 term".into()));
        }
        if self.d < self.n_s + 1 {
            return Err(Error::Config(format!(
                "d = {} leaves no variant coordinate after n_s = {}",
                self.d, self.n_s
            )));
        }
        if self.theta_s.len() != self.n_s {
            return Err(Error::Config(format!(
                "theta_s has {} entries for n_s = {}",
                self.theta_s.len(),
                self.n_s
            )));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config("noise_sd must be >= 0".into()));
        }
        if self.rates.is_empty() || self.rates.len() != self.n_per_env.len() {
            return Err(Error::Config(
                "rates and n_per_env must be non-empty and equally long".into(),
            ));
        }
        if let Some(r) = self.rates.iter().find(|r| !(r.abs() > 1.0)) {
            return Err(Error::Config(format!("selection rate {r} needs |r| > 1")));
        }
        if self.n_per_env.contains(&0) {
            return Err(Error::Config("every environment needs at least one point".into()));
        }
        Ok(())
    }
}

/// Keep-probability `|r|^(-5 |y - sign(r) v_b|)`.
pub fn selection_probability(r: f64, y: f64, v_b: f64) -> f64 {
    r.abs().powf(-5.0 * (y - r.signum() * v_b).abs())
}

const SAMPLER_WINDOW: usize = 1_000_000;
const SAMPLER_MIN_RATE: f64 = 1e-4;

/// One dataset per rate; `spurious_attr` holds `V_b`, the first variant coordinate.
pub fn gen_selection_bias<T: Scalar>(cfg: &SelBiasConfig) -> Result<Vec<Dataset<T>>> {
    cfg.validate()?;
    let (ns, d) = (cfg.n_s, cfg.d);
    let nv = d - ns;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = scramble_matrix(cfg.scramble, d, &mut rng);
    let mut out = Vec::with_capacity(cfg.rates.len());
    let mut zbuf = vec![0.0; ns + 1];
    for (env, (&r, &n)) in cfg.rates.iter().zip(&cfg.n_per_env).enumerate() {
        let mut z = Array2::<f64>::zeros((n, d));
        let mut y = Vec::with_capacity(n);
        let mut vb = Vec::with_capacity(n);
        let (mut tried, mut window_tried, mut window_kept) = (0usize, 0usize, 0usize);
        while y.len() < n {
            for v in zbuf.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let s: Vec<f64> = (0..ns).map(|i| 0.8 * zbuf[i] + 0.2 * zbuf[i + 1]).collect();
            let v: Vec<f64> = (0..nv).map(|_| rng.sample(StandardNormal)).collect();
            let f = cfg.theta_s.iter().zip(&s).map(|(t, s)| t * s).sum::<f64>() + cfg.beta * s[0] * s[1] * s[2];
            let target = f + cfg.noise_sd * rng.sample::<f64, _>(StandardNormal);
            let u: f64 = rng.random();
            tried += 1;
            window_tried += 1;
            if u <= selection_probability(r, target, v[0]) {
                let row = y.len();
                for (j, &sj) in s.iter().enumerate() {
                    z[[row, j]] = sj;
                }
                for (j, &vj) in v.iter().enumerate() {
                    z[[row, ns + j]] = vj;
                }
                y.push(target);
                vb.push(v[0]);
                window_kept += 1;
            }
            if window_tried == SAMPLER_WINDOW {
                let rate = window_kept as f64 / window_tried as f64;
                if rate < SAMPLER_MIN_RATE {
                    return Err(Error::StuckSampler(format!(
                        "environment {env} (r = {r}): acceptance {rate:e} over the last {SAMPLER_WINDOW} draws, {} of {n} kept after {tried} draws",
                        y.len()
                    )));
                }
                window_tried = 0;
                window_kept = 0;
            }
        }
        let x = apply_scramble(z, h.as_ref());
        let ds = Dataset::with_annotations(x, Array1::from(y), Some(vec![env; n]), Some(vb))?;
        out.push(ds.cast());
    }
    Ok(out)
}

/// Linear two-Gaussian data `X = Y (psi_s + beta_e psi_v) + N(0, noise_var I)`.
#[derive(Debug, Clone)]
pub struct Example41<T> {
    pub envs: Vec<Dataset<T>>,
    pub psi_s: Array1<f64>,
    pub psi_v: Array1<f64>,
}

pub fn gen_example41<T: Scalar>(
    n_per_env: usize,
    betas: &[f64],
    d: usize,
    noise_var: f64,
    seed: u64,
) -> Result<Example41<T>> {
    if d < 2 {
        return Err(Error::Config("need d >= 2 for two orthogonal directions".into()));
    }
    if betas.is_empty() || n_per_env == 0 {
        return Err(Error::Config("need at least one non-empty environment".into()));
    }
    if !(noise_var >= 0.0) {
        return Err(Error::Config("noise variance must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = Array2::from_shape_simple_fn((d, 2), || rng.sample(StandardNormal));
    linalg::orthonormalize_columns(&mut basis, &mut rng);
    let psi_s = basis.column(0).to_owned();
    let psi_v = basis.column(1).to_owned();
    let sd = noise_var.sqrt();
    let mut envs = Vec::with_capacity(betas.len());
    for (env, &b) in betas.iter().enumerate() {
        let y: Vec<f64> = (0..n_per_env).map(|_| rademacher(&mut rng)).collect();
        let mut x = Array2::<f64>::zeros((n_per_env, d));
        for i in 0..n_per_env {
            for j in 0..d {
                let mean = y[i] * (psi_s[j] + b * psi_v[j]);
                x[[i, j]] = if sd > 0.0 {
                    mean + sd * rng.sample::<f64, _>(StandardNormal)
                } else {
                    mean
                };
            }
        }
        let ds = Dataset::with_annotations(x, Array1::from(y), Some(vec![env; n_per_env]), None)?;
        envs.push(ds.cast());
    }
    Ok(Example41 { envs, psi_s, psi_v })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_bias_count() {
        let cfg = SpuriousClsConfig {
            bias_rates: vec![0.9],
            n_per_env: vec![1000],
            ..Default::default()
        };
        let ds = gen_spurious_classification::<f64>(&cfg).unwrap().remove(0);
        let a = ds.spurious_attr.as_ref().unwrap();
        let agree = a.iter().zip(ds.y.iter()).filter(|(a, y)| *a == *y).count();
        assert_eq!(agree, 900);
    }

    #[test]
    fn scramble_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_orthogonal(10, &mut rng);
        let defect = &h.t().dot(&h) - &Array2::<f64>::eye(10);
        assert!(linalg::max_abs(defect.view()) <= 1e-10);
    }

    #[test]
    fn selection_formula_values() {
        assert_eq!(selection_probability(2.0, 0.7, 0.7), 1.0);
        assert!((selection_probability(2.0, 1.0, 0.0) - 0.03125).abs() < 1e-15);
        assert!((selection_probability(-2.0, 1.0, -1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn noiseless_example_is_exact() {
        let ex = gen_example41::<f64>(20, &[0.0], 4, 0.0, 3).unwrap();
        assert!(ex.psi_s.dot(&ex.psi_v).abs() <= 1e-12);
        let ds = &ex.envs[0];
        for (row, &y) in ds.x.rows().into_iter().zip(ds.y.iter()) {
            for (v, s) in row.iter().zip(ex.psi_s.iter()) {
                assert_eq!(*v, y * s);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = SelBiasConfig::default();
        c.rates[0] = 0.5;
        assert!(gen_selection_bias::<f64>(&c).is_err());
        let c = SpuriousClsConfig {
            bias_rates: vec![0.0],
            n_per_env: vec![10],
            ..Default::default()
        };
        assert!(gen_spurious_classification::<f64>(&c).is_err());
    }
}
