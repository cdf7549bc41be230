use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::metrics::TaskKind;
use super::pipeline::{run_seed, SeedResult};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SCHEMA_VERSION: u32 = 1;

/// Seed-averaged test metrics of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Mean over seeds of each test environment's metric.
    pub per_env: Vec<f64>,
    /// Mean over seeds of the per-seed Mean_Error (or mean accuracy).
    pub mean: f64,
    /// Mean over seeds of the per-seed Std_Error, when defined.
    pub std: Option<f64>,
    pub train: f64,
    pub holdout: f64,
    pub purity: Option<f64>,
    pub kl: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Option<Vec<f64>> = v.collect();
    vals.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
}

impl Aggregate {
    pub fn from_seeds(seeds: &[SeedResult]) -> Self {
        let n_env = seeds.first().map_or(0, |s| s.eval.test.per_env.len());
        Aggregate {
            per_env: (0..n_env)
                .map(|e| mean(seeds.iter().map(|s| s.eval.test.per_env[e])))
                .collect(),
            mean: mean(seeds.iter().map(|s| s.eval.test.mean)),
            std: mean_opt(seeds.iter().map(|s| s.eval.test.std)),
            train: mean(seeds.iter().map(|s| s.eval.train)),
            holdout: mean(seeds.iter().map(|s| s.eval.holdout)),
            purity: mean_opt(seeds.iter().map(|s| s.diagnostics.as_ref().and_then(|d| d.purity))),
            kl: mean_opt(seeds.iter().map(|s| s.diagnostics.as_ref().and_then(|d| d.kl))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub seeds: Vec<SeedResult>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub task: TaskKind,
    /// What the metric columns hold.
    pub metric: String,
    /// Classification labels are +-1 and predictions are scored by sign.
    pub label_encoding: String,
    pub config: BTreeMap<String, String>,
    pub methods: Vec<MethodSummary>,
    /// Wall-clock seconds by phase; not covered by the determinism contract.
    pub timing: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }

    /// Copy with timing cleared, for comparing runs.
    pub fn without_timing(&self) -> Report {
        Report {
            timing: BTreeMap::new(),
            ..self.clone()
        }
    }

    /// Largest deviation between the stored aggregates and a recomputation from seeds.
    pub fn aggregate_drift(&self) -> f64 {
        let diff = |a: f64, b: f64| if a.is_nan() && b.is_nan() { 0.0 } else { (a - b).abs() };
        let diff_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => diff(a, b),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        };
        let mut worst = 0.0f64;
        for m in &self.methods {
            let r = Aggregate::from_seeds(&m.seeds);
            let a = &m.aggregate;
            if r.per_env.len() != a.per_env.len() {
                return f64::INFINITY;
            }
            for (x, y) in r.per_env.iter().zip(&a.per_env) {
                worst = worst.max(diff(*x, *y));
            }
            for d in [
                diff(r.mean, a.mean),
                diff(r.train, a.train),
                diff(r.holdout, a.holdout),
                diff_opt(r.std, a.std),
                diff_opt(r.purity, a.purity),
                diff_opt(r.kl, a.kl),
            ] {
                worst = worst.max(d);
            }
        }
        worst
    }
}

/// Runs every configured method on every seed (in parallel across seeds) and
/// assembles the report in seed order.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let start = Instant::now();
    let per_seed: Vec<BTreeMap<Method, SeedResult>> = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed::<T>(cfg, s, &cfg.methods))
        .collect::<Result<_>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    let task = match cfg.task {
        super::config::Task::Classification | super::config::Task::ColoredMnist => TaskKind::Classification,
        super::config::Task::Regression | super::config::Task::Csv => TaskKind::Regression,
    };
    let mut methods = Vec::new();
    let mut warnings = Vec::new();
    for &m in &cfg.methods {
        let seeds: Vec<SeedResult> = per_seed.iter().filter_map(|r| r.get(&m).cloned()).collect();
        for s in &seeds {
            warnings.extend(s.warnings.iter().map(|w| format!("{m} seed {}: {w}", s.seed)));
        }
        methods.push(MethodSummary {
            method: m,
            aggregate: Aggregate::from_seeds(&seeds),
            seeds,
        });
    }
    let mut timing = BTreeMap::new();
    timing.insert("total_seconds".to_owned(), elapsed);
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        task,
        metric: task.metric_name().to_owned(),
        label_encoding: "+1/-1, scored by sign".to_owned(),
        config: cfg.echo(),
        methods,
        timing,
        warnings,
    })
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `results.csv` (one row per seed x test env x method) and
/// `trace.csv` (one row per seed x method x iteration) into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Numeric(e.to_string()))?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let results_path = dir.join("results.csv");
    let mut f = create(&results_path)?;
    let mut rows = String::from("schema_version,method,seed,k,env,metric,value\n");
    for m in &report.methods {
        for s in &m.seeds {
            for (e, v) in s.eval.test.per_env.iter().enumerate() {
                let k = s.k.map_or(String::new(), |k| k.to_string());
                rows.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    report.schema_version, m.method, s.seed, k, e, report.metric, v
                ));
            }
        }
    }
    f.write_all(rows.as_bytes()).map_err(|e| Error::io(&results_path, e))?;

    let trace_path = dir.join("trace.csv");
    let mut f = create(&trace_path)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut rows = String::from(
        "schema_version,method,seed,iteration,theta_norm,alignment_cosine,cluster_objective,em_iterations,purity,kl,orthogonality_residual,train,holdout,test_mean,test_std\n",
    );
    for m in &report.methods {
        for s in &m.seeds {
            for t in &s.trace {
                rows.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    report.schema_version,
                    m.method,
                    s.seed,
                    t.iteration,
                    t.theta_norm,
                    opt(t.alignment_cosine),
                    t.cluster_objective,
                    t.em_iterations,
                    opt(t.purity),
                    opt(t.kl),
                    t.orthogonality_residual,
                    t.eval.train,
                    t.eval.holdout,
                    t.eval.test.mean,
                    opt(t.eval.test.std),
                ));
            }
        }
    }
    f.write_all(rows.as_bytes()).map_err(|e| Error::io(&trace_path, e))?;
    Ok(vec![json_path, results_path, trace_path])
}

pub fn load_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: Report = serde_json::from_str(&text).map_err(|e| Error::Parse {
        row: e.line(),
        col: e.column(),
        msg: e.to_string(),
    })?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "report schema {} is not the supported version {SCHEMA_VERSION}",
            report.schema_version
        )));
    }
    Ok(report)
}

/// One human-readable line per method.
pub fn summary_lines(report: &Report) -> Vec<String> {
    report
        .methods
        .iter()
        .map(|m| {
            let a = &m.aggregate;
            format!(
                "{:<14} train {:.4}  test {} {:.4}{}",
                m.method.to_string(),
                a.train,
                report.metric,
                a.mean,
                a.std.map_or(String::new(), |s| format!(" (std {s:.4})"))
            )
        })
        .collect()
}
