use ndarray::{concatenate, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Feature matrix with targets and optional ground-truth annotations.
///
/// `latent_env` and `spurious_attr` are never read by the learning code; they exist
/// for purity scoring and the heterogeneity diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub x: Array2<T>,
    pub y: Array1<T>,
    pub latent_env: Option<Vec<usize>>,
    pub spurious_attr: Option<Vec<f64>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(x: Array2<T>, y: Array1<T>) -> Result<Self> {
        Self::with_annotations(x, y, None, None)
    }

    pub fn with_annotations(
        x: Array2<T>,
        y: Array1<T>,
        latent_env: Option<Vec<usize>>,
        spurious_attr: Option<Vec<f64>>,
    ) -> Result<Self> {
        let (n, d) = x.dim();
        if n == 0 || d == 0 {
            return Err(Error::Shape(format!("dataset must be non-empty, got {n}x{d}")));
        }
        if y.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} rows", y.len())));
        }
        if let Some(row) = x.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("row {row} has a non-finite feature")));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("target {i} is not finite")));
        }
        if latent_env.as_ref().is_some_and(|e| e.len() != n) {
            return Err(Error::Shape("latent_env length differs from row count".into()));
        }
        if spurious_attr.as_ref().is_some_and(|a| a.len() != n) {
            return Err(Error::Shape("spurious_attr length differs from row count".into()));
        }
        Ok(Self {
            x,
            y,
            latent_env,
            spurious_attr,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), idx),
            y: self.y.select(Axis(0), idx),
            latent_env: self.latent_env.as_ref().map(|e| idx.iter().map(|&i| e[i]).collect()),
            spurious_attr: self.spurious_attr.as_ref().map(|a| idx.iter().map(|&i| a[i]).collect()),
        }
    }

    /// Stacks datasets row-wise. Annotations survive only if every part carries them.
    pub fn concat(parts: &[Dataset<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero datasets".into()))?;
        if parts.iter().any(|p| p.dim() != first.dim()) {
            return Err(Error::Shape("datasets differ in feature dimension".into()));
        }
        let xs: Vec<_> = parts.iter().map(|p| p.x.view()).collect();
        let ys: Vec<_> = parts.iter().map(|p| p.y.view()).collect();
        let x = concatenate(Axis(0), &xs).expect("same column count");
        let y = concatenate(Axis(0), &ys).expect("vectors");
        let latent_env = parts
            .iter()
            .map(|p| p.latent_env.clone())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.concat());
        let spurious_attr = parts
            .iter()
            .map(|p| p.spurious_attr.clone())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.concat());
        Ok(Self {
            x,
            y,
            latent_env,
            spurious_attr,
        })
    }

    /// Random split into `(train, holdout)` with `round(frac * n)` holdout rows.
    pub fn split_holdout<R: Rng>(&self, frac: f64, rng: &mut R) -> Result<(Self, Self)> {
        let n = self.len();
        let m = (frac * n as f64).round() as usize;
        if m == 0 || m >= n {
            return Err(Error::Config(format!(
                "holdout fraction {frac} leaves no data on one side of {n} rows"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let (hold, train) = idx.split_at(m);
        let mut train = train.to_vec();
        let mut hold = hold.to_vec();
        train.sort_unstable();
        hold.sort_unstable();
        Ok((self.select(&train), self.select(&hold)))
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            x: self.x.mapv(|v| U::lit(v.to_f64_lossy())),
            y: self.y.mapv(|v| U::lit(v.to_f64_lossy())),
            latent_env: self.latent_env.clone(),
            spurious_attr: self.spurious_attr.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_non_finite_rows() {
        let x = array![[1.0, f64::NAN]];
        assert!(matches!(Dataset::new(x, array![1.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_length_mismatch() {
        let x = array![[1.0], [2.0]];
        assert!(Dataset::new(x.clone(), array![1.0]).is_err());
        assert!(Dataset::with_annotations(x, array![1.0, 2.0], Some(vec![0]), None).is_err());
    }

    #[test]
    fn holdout_partitions_rows() {
        let x = Array2::from_shape_fn((20, 1), |(i, _)| i as f64);
        let y = Array1::from_iter((0..20).map(|i| i as f64));
        let d = Dataset::new(x, y).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = d.split_holdout(0.1, &mut rng).unwrap();
        assert_eq!((a.len(), b.len()), (18, 2));
        let mut all: Vec<f64> = a.y.iter().chain(b.y.iter()).copied().collect();
        all.sort_by(|p, q| p.partial_cmp(q).unwrap());
        assert_eq!(all, (0..20).map(|i| i as f64).collect::<Vec<_>>());
    }
}
