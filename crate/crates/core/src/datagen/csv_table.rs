use std::path::Path;

use ndarray::{Array1, Array2};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Environments bucketed from a CSV table. `envs[b]` is `None` when bucket `b` got no rows.
#[derive(Debug, Clone)]
pub struct CsvRegression<T> {
    pub envs: Vec<Option<Dataset<T>>>,
    pub feature_names: Vec<String>,
    /// Per-feature `(mean, sd)` fitted on the training buckets.
    pub standardization: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

fn bucket(value: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().take_while(|&&t| value >= t).count()
}

/// Reads a headed numeric CSV and splits rows into `thresholds.len() + 1` buckets on `env_col`.
///
/// Every column except `target_col` and `env_col` becomes a feature, standardized with
/// statistics pooled over the buckets in `train_envs`.
pub fn load_csv_regression<T: Scalar>(
    path: &Path,
    target_col: &str,
    env_col: &str,
    thresholds: &[f64],
    train_envs: &[usize],
) -> Result<CsvRegression<T>> {
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("thresholds must be strictly increasing".into()));
    }
    let n_buckets = thresholds.len() + 1;
    if train_envs.is_empty() || train_envs.iter().any(|&e| e >= n_buckets) {
        return Err(Error::Config(format!(
            "training buckets {train_envs:?} invalid for {n_buckets} buckets"
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            col: 0,
            msg: e.to_string(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 0,
            col: 0,
            msg: format!("column `{name}` not in header {headers:?}"),
        })
    };
    let (yi, ei) = (find(target_col)?, find(env_col)?);
    let feat_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != yi && c != ei).collect();
    if feat_cols.is_empty() {
        return Err(Error::Parse {
            row: 0,
            col: 0,
            msg: "no feature columns".into(),
        });
    }
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_buckets];
    let mut targets: Vec<Vec<f64>> = vec![Vec::new(); n_buckets];
    for (r, rec) in reader.records().enumerate() {
        // header is row 0
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            col: 0,
            msg: e.to_string(),
        })?;
        let cell = |c: usize| -> Result<f64> {
            let raw = rec.get(c).ok_or_else(|| Error::Parse {
                row,
                col: c,
                msg: "missing cell".into(),
            })?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    col: c,
                    msg: format!("`{raw}` is not a finite number"),
                })
        };
        let b = bucket(cell(ei)?, thresholds);
        targets[b].push(cell(yi)?);
        rows[b].push(feat_cols.iter().map(|&c| cell(c)).collect::<Result<_>>()?);
    }
    let mut warnings = Vec::new();
    for (b, t) in targets.iter().enumerate() {
        if t.is_empty() {
            warnings.push(format!("environment bucket {b} is empty"));
        }
    }
    let p = feat_cols.len();
    let train_rows: Vec<&Vec<f64>> = train_envs.iter().flat_map(|&b| rows[b].iter()).collect();
    if train_rows.is_empty() {
        return Err(Error::Size("training buckets contain no rows".into()));
    }
    let m = train_rows.len() as f64;
    let standardization: Vec<(f64, f64)> = (0..p)
        .map(|j| {
            let mean = train_rows.iter().map(|r| r[j]).sum::<f64>() / m;
            let var = train_rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / m;
            let sd = var.sqrt();
            (mean, if sd > 0.0 { sd } else { 1.0 })
        })
        .collect();
    let envs = rows
        .into_iter()
        .zip(targets)
        .enumerate()
        .map(|(b, (xs, ys))| {
            if ys.is_empty() {
                return Ok(None);
            }
            let n = ys.len();
            let x = Array2::from_shape_fn((n, p), |(i, j)| {
                let (mu, sd) = standardization[j];
                (xs[i][j] - mu) / sd
            });
            Dataset::with_annotations(x, Array1::from(ys), Some(vec![b; n]), None).map(|d| Some(d.cast()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CsvRegression {
        envs,
        feature_names: feat_cols.iter().map(|&c| headers[c].clone()).collect(),
        standardization,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn buckets_by_threshold() {
        let f = write("year,a,price\n1910,1,10\n1930,2,20\n1950,4,30\n");
        let out = load_csv_regression::<f64>(f.path(), "price", "year", &[1920.0, 1940.0], &[0, 1]).unwrap();
        let ids: Vec<usize> = out
            .envs
            .iter()
            .map(|e| e.as_ref().unwrap().latent_env.as_ref().unwrap()[0])
            .collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(out.feature_names, vec!["a"]);
    }

    #[test]
    fn missing_target_column() {
        let f = write("year,a\n1910,1\n");
        assert!(matches!(
            load_csv_regression::<f64>(f.path(), "price", "year", &[], &[0]),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn non_numeric_cell_reports_position() {
        let f = write("year,a,price\n1910,1,10\n1911,x,11\n");
        match load_csv_regression::<f64>(f.path(), "price", "year", &[], &[0]) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (2, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn training_features_are_centered() {
        let f = write("year,a,b,price\n1910,1,5,1\n1911,2,7,2\n1912,6,9,3\n1960,100,100,4\n");
        let out = load_csv_regression::<f64>(f.path(), "price", "year", &[1950.0], &[0]).unwrap();
        let train = out.envs[0].as_ref().unwrap();
        for col in train.x.columns() {
            assert!(col.mean().unwrap().abs() <= 1e-10);
        }
    }

    #[test]
    fn empty_bucket_warns() {
        let f = write("year,a,price\n1910,1,10\n1950,4,30\n");
        let out = load_csv_regression::<f64>(f.path(), "price", "year", &[1920.0, 1940.0], &[0]).unwrap();
        assert!(out.envs[1].is_none());
        assert_eq!(out.warnings.len(), 1);
    }
}
