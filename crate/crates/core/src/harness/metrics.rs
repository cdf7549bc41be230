use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl TaskKind {
    /// Name of the per-environment quantity.
    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::Classification => "accuracy",
            TaskKind::Regression => "mse",
        }
    }
}

/// Per-environment accuracy (classification) or MSE (regression) with their mean and
/// sample standard deviation across environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub per_env: Vec<f64>,
    pub mean: f64,
    /// Absent with a single environment.
    pub std: Option<f64>,
}

impl MetricRecord {
    pub fn from_values(per_env: Vec<f64>) -> Self {
        let n = per_env.len() as f64;
        let mean = per_env.iter().sum::<f64>() / n;
        let std =
            (per_env.len() > 1).then(|| (per_env.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self { per_env, mean, std }
    }
}

pub fn env_metric<T: Scalar>(pred: ArrayView1<T>, y: ArrayView1<T>, kind: TaskKind) -> f64 {
    let n = y.len() as f64;
    match kind {
        TaskKind::Classification => {
            let hits = pred
                .iter()
                .zip(y.iter())
                .filter(|(p, y)| (**p > T::zero()) == (**y > T::zero()))
                .count();
            hits as f64 / n
        }
        TaskKind::Regression => {
            pred.iter()
                .zip(y.iter())
                .map(|(p, y)| (*p - *y).to_f64_lossy().powi(2))
                .sum::<f64>()
                / n
        }
    }
}

pub fn metrics<T: Scalar>(preds: &[ArrayView1<T>], ys: &[ArrayView1<T>], kind: TaskKind) -> Result<MetricRecord> {
    if preds.is_empty() || preds.len() != ys.len() {
        return Err(Error::Shape(format!(
            "{} prediction sets for {} environments",
            preds.len(),
            ys.len()
        )));
    }
    let mut vals = Vec::with_capacity(preds.len());
    for (p, y) in preds.iter().zip(ys) {
        if p.len() != y.len() || y.is_empty() {
            return Err(Error::Shape(format!("{} predictions for {} targets", p.len(), y.len())));
        }
        vals.push(env_metric(*p, *y, kind));
    }
    Ok(MetricRecord::from_values(vals))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EnvDiagnostics {
    pub purity: Option<f64>,
    pub kl: Option<f64>,
}

fn permutations_into(k: usize, pool: &mut Vec<usize>, used: &mut [bool], m: usize, out: &mut Vec<Vec<usize>>) {
    if pool.len() == k {
        out.push(pool.clone());
        return;
    }
    for e in 0..m {
        if !used[e] {
            used[e] = true;
            pool.push(e);
            permutations_into(k, pool, used, m, out);
            pool.pop();
            used[e] = false;
        }
    }
}

/// Fraction of points whose learned cluster maps to their true environment under the
/// best cluster-to-environment map. Maps are injective while clusters do not outnumber
/// environments (searched exhaustively up to 6 clusters); otherwise each cluster takes its
/// majority environment.
pub fn purity(learned: &[usize], truth: &[usize]) -> f64 {
    let k = learned.iter().copied().max().map_or(0, |v| v + 1);
    let m = truth.iter().copied().max().map_or(0, |v| v + 1);
    let mut counts = vec![vec![0usize; m]; k];
    for (&l, &t) in learned.iter().zip(truth) {
        counts[l][t] += 1;
    }
    let n = learned.len() as f64;
    if k <= m && k <= 6 {
        let mut maps = Vec::new();
        permutations_into(k, &mut Vec::new(), &mut vec![false; m], m, &mut maps);
        let best = maps
            .iter()
            .map(|map| (0..k).map(|c| counts[c][map[c]]).sum::<usize>())
            .max()
            .unwrap_or(0);
        best as f64 / n
    } else {
        counts
            .iter()
            .map(|row| row.iter().copied().max().unwrap_or(0))
            .sum::<usize>() as f64
            / n
    }
}

fn bernoulli_kl(p: f64, q: f64) -> f64 {
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

/// Mean symmetrized KL between learned environments of the Laplace-smoothed
/// `P(Y > 0 | C)`, with `C` the sign of the spurious attribute, averaged over both
/// attribute values and all environment pairs.
pub fn kl_diagnostic<T: Scalar>(learned: &[usize], y: ArrayView1<T>, attr: &[f64]) -> Option<f64> {
    let k = learned.iter().copied().max().map_or(0, |v| v + 1);
    if k < 2 {
        return None;
    }
    // counts[env][c] = (positives, total)
    let mut counts = vec![[(0usize, 0usize); 2]; k];
    for ((&l, &yi), &a) in learned.iter().zip(y.iter()).zip(attr) {
        let c = usize::from(a > 0.0);
        counts[l][c].1 += 1;
        if yi > T::zero() {
            counts[l][c].0 += 1;
        }
    }
    let prob = |(pos, tot): (usize, usize)| (pos as f64 + 1.0) / (tot as f64 + 2.0);
    let mut total = 0.0;
    let mut terms = 0usize;
    for a in 0..k {
        for b in (a + 1)..k {
            for c in 0..2 {
                let (p, q) = (prob(counts[a][c]), prob(counts[b][c]));
                total += bernoulli_kl(p, q) + bernoulli_kl(q, p);
                terms += 1;
            }
        }
    }
    Some(total / terms as f64)
}

pub fn env_diagnostics<T: Scalar>(learned: &[usize], data: &Dataset<T>) -> Result<EnvDiagnostics> {
    if learned.len() != data.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            learned.len(),
            data.len()
        )));
    }
    Ok(EnvDiagnostics {
        purity: data.latent_env.as_ref().map(|t| purity(learned, t)),
        kl: data
            .spurious_attr
            .as_ref()
            .and_then(|a| kl_diagnostic(learned, data.y.view(), a)),
    })
}
