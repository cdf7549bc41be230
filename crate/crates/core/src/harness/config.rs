//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{ColoredMnistConfig, Scramble, SelBiasConfig, SpuriousClsConfig};
use crate::error::{Error, Result};
use crate::heterogeneity::AssignMode;
use crate::mlp::Activation;
use crate::ntf_space::KernelMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
    ColoredMnist,
    Csv,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "regression" => Ok(Task::Regression),
            "colored_mnist" => Ok(Task::ColoredMnist),
            "csv" => Ok(Task::Csv),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

impl Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
            Task::ColoredMnist => "colored_mnist",
            Task::Csv => "csv",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "kerhrm")]
    KerHrm,
    #[serde(rename = "kerhrm-static")]
    KerHrmStatic,
    #[serde(rename = "erm")]
    Erm,
    #[serde(rename = "irm")]
    Irm,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kerhrm" => Ok(Method::KerHrm),
            "kerhrm-static" => Ok(Method::KerHrmStatic),
            "erm" => Ok(Method::Erm),
            "irm" => Ok(Method::Irm),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

impl Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::KerHrm => "kerhrm",
            Method::KerHrmStatic => "kerhrm-static",
            Method::Erm => "erm",
            Method::Irm => "irm",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub cls: SpuriousClsConfig,
    pub sel: SelBiasConfig,
    pub cmnist: ColoredMnistConfig,
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
    pub csv_path: Option<PathBuf>,
    pub csv_target: String,
    pub csv_env: String,
    pub csv_thresholds: Vec<f64>,
    /// Generated environments used for training; the rest are test environments.
    pub train_envs: Vec<usize>,
    pub hidden: usize,
    pub activation: Activation,
    pub k_grid: Vec<usize>,
    pub clusters: usize,
    pub iterations: usize,
    pub alpha: f64,
    pub lambda: f64,
    /// Network step size; `None` scales with the tangent kernel's top eigenvalue.
    pub lr: Option<f64>,
    pub epochs: usize,
    pub inv_lr: Option<f64>,
    pub inv_steps: usize,
    pub em_max_iter: usize,
    pub em_tol: f64,
    pub em_restarts: usize,
    pub em_ridge: Option<f64>,
    pub em_sigma: Option<f64>,
    /// Multiplies the pooled residual scale when `em_sigma` is auto.
    pub em_sigma_scale: f64,
    pub assign: AssignMode,
    pub kernel_mode: KernelMode,
    /// Continue feedback training from the previous iterate instead of from `w0`.
    pub warm_start: bool,
    pub holdout: f64,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Classification,
            cls: SpuriousClsConfig::default(),
            sel: SelBiasConfig::default(),
            cmnist: ColoredMnistConfig::default(),
            mnist_images: None,
            mnist_labels: None,
            csv_path: None,
            csv_target: "target".into(),
            csv_env: "env".into(),
            csv_thresholds: Vec::new(),
            train_envs: vec![0, 1],
            hidden: 128,
            activation: Activation::Relu,
            k_grid: vec![10, 15, 20, 25],
            clusters: 2,
            iterations: 3,
            alpha: 10.0,
            lambda: 1.0,
            lr: None,
            epochs: 1000,
            inv_lr: None,
            inv_steps: 20_000,
            em_max_iter: 200,
            em_tol: 1e-6,
            em_restarts: 20,
            em_ridge: None,
            em_sigma: None,
            em_sigma_scale: crate::heterogeneity::DEFAULT_SIGMA_SCALE,
            assign: AssignMode::Argmax,
            kernel_mode: KernelMode::Fresh,
            warm_start: false,
            holdout: 0.1,
            seeds: (0..10).collect(),
            methods: vec![Method::KerHrm, Method::KerHrmStatic, Method::Erm, Method::Irm],
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<V: FromStr>(key: &str, raw: &str) -> Result<V>
where
    V::Err: Display,
{
    raw.parse::<V>()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{raw}`: {e}")))
}

fn parse_list<V: FromStr>(key: &str, raw: &str) -> Result<Vec<V>>
where
    V::Err: Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_opt<V: FromStr>(key: &str, raw: &str) -> Result<Option<V>>
where
    V::Err: Display,
{
    if raw == "auto" {
        Ok(None)
    } else {
        parse(key, raw).map(Some)
    }
}

fn join<V: Display>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn opt<V: Display>(v: &Option<V>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), |x| x.to_string())
}

fn path_opt(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(String::new, |p| p.display().to_string())
}

fn scramble_name(s: Scramble) -> &'static str {
    match s {
        Scramble::Identity => "identity",
        Scramble::RandomOrthogonal => "random_orthogonal",
    }
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "task" => self.task = parse(key, v)?,
            "scramble" => {
                let s: Scramble = parse(key, v)?;
                self.cls.scramble = s;
                self.sel.scramble = s;
            }
            "cls.d" => self.cls.d = parse(key, v)?,
            "cls.sigma_s2" => self.cls.sigma_s2 = parse(key, v)?,
            "cls.sigma_v2" => self.cls.sigma_v2 = parse(key, v)?,
            "cls.bias_rates" => self.cls.bias_rates = parse_list(key, v)?,
            "cls.n_per_env" => self.cls.n_per_env = parse_list(key, v)?,
            "sel.n_s" => self.sel.n_s = parse(key, v)?,
            "sel.d" => self.sel.d = parse(key, v)?,
            "sel.beta" => self.sel.beta = parse(key, v)?,
            "sel.theta_s" => self.sel.theta_s = parse_list(key, v)?,
            "sel.noise_sd" => self.sel.noise_sd = parse(key, v)?,
            "sel.rates" => self.sel.rates = parse_list(key, v)?,
            "sel.n_per_env" => self.sel.n_per_env = parse_list(key, v)?,
            "mnist.images" => self.mnist_images = (!v.is_empty()).then(|| PathBuf::from(v)),
            "mnist.labels" => self.mnist_labels = (!v.is_empty()).then(|| PathBuf::from(v)),
            "mnist.flip_e" => self.cmnist.flip_e = parse_list(key, v)?,
            "mnist.label_noise" => self.cmnist.label_noise = parse(key, v)?,
            "mnist.n_per_env" => self.cmnist.n_per_env = parse_list(key, v)?,
            "mnist.size" => {
                let (h, w) = v
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("`{key}`: expected HxW, got `{v}`")))?;
                self.cmnist.downsample = (parse(key, h.trim())?, parse(key, w.trim())?);
            }
            "csv.path" => self.csv_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "csv.target" => self.csv_target = v.to_string(),
            "csv.env" => self.csv_env = v.to_string(),
            "csv.thresholds" => self.csv_thresholds = parse_list(key, v)?,
            "train_envs" => self.train_envs = parse_list(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "activation" => self.activation = parse(key, v)?,
            "k" => self.k_grid = parse_list(key, v)?,
            "clusters" => self.clusters = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "lr" => self.lr = parse_opt(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "inv_lr" => self.inv_lr = parse_opt(key, v)?,
            "inv_steps" => self.inv_steps = parse(key, v)?,
            "em_max_iter" => self.em_max_iter = parse(key, v)?,
            "em_tol" => self.em_tol = parse(key, v)?,
            "em_restarts" => self.em_restarts = parse(key, v)?,
            "em_ridge" => self.em_ridge = parse_opt(key, v)?,
            "em_sigma" => self.em_sigma = parse_opt(key, v)?,
            "em_sigma_scale" => self.em_sigma_scale = parse(key, v)?,
            "assign" => self.assign = parse(key, v)?,
            "kernel_mode" => self.kernel_mode = parse(key, v)?,
            "warm_start" => self.warm_start = parse(key, v)?,
            "holdout" => self.holdout = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "methods" => self.methods = parse_list(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.seeds.is_empty() {
            return fail("seeds must not be empty");
        }
        if self.iterations == 0 {
            return fail("iterations must be >= 1");
        }
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return fail("k must list positive ranks");
        }
        if self.clusters < 2 {
            return fail("clusters must be >= 2");
        }
        if self.methods.is_empty() {
            return fail("methods must not be empty");
        }
        if self.train_envs.is_empty() {
            return fail("train_envs must not be empty");
        }
        if !(self.alpha >= 0.0 && self.lambda >= 0.0) {
            return fail("alpha and lambda must be >= 0");
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return fail("holdout must lie in (0, 1)");
        }
        if !(self.em_sigma_scale > 0.0) || self.em_sigma.is_some_and(|v| !(v > 0.0)) {
            return fail("em_sigma and em_sigma_scale must be > 0");
        }
        if self.hidden == 0 || self.epochs == 0 {
            return fail("hidden and epochs must be >= 1");
        }
        if self.lr.is_some_and(|v| !(v > 0.0)) || self.inv_lr.is_some_and(|v| !(v > 0.0)) {
            return fail("learning rates must be > 0");
        }
        Ok(())
    }

    /// Every key with its current value, in the syntax `parse` accepts.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("task", self.task.to_string());
        put("scramble", scramble_name(self.cls.scramble).into());
        put("cls.d", self.cls.d.to_string());
        put("cls.sigma_s2", self.cls.sigma_s2.to_string());
        put("cls.sigma_v2", self.cls.sigma_v2.to_string());
        put("cls.bias_rates", join(&self.cls.bias_rates));
        put("cls.n_per_env", join(&self.cls.n_per_env));
        put("sel.n_s", self.sel.n_s.to_string());
        put("sel.d", self.sel.d.to_string());
        put("sel.beta", self.sel.beta.to_string());
        put("sel.theta_s", join(&self.sel.theta_s));
        put("sel.noise_sd", self.sel.noise_sd.to_string());
        put("sel.rates", join(&self.sel.rates));
        put("sel.n_per_env", join(&self.sel.n_per_env));
        put("mnist.images", path_opt(&self.mnist_images));
        put("mnist.labels", path_opt(&self.mnist_labels));
        put("mnist.flip_e", join(&self.cmnist.flip_e));
        put("mnist.label_noise", self.cmnist.label_noise.to_string());
        put("mnist.n_per_env", join(&self.cmnist.n_per_env));
        put(
            "mnist.size",
            format!("{}x{}", self.cmnist.downsample.0, self.cmnist.downsample.1),
        );
        put("csv.path", path_opt(&self.csv_path));
        put("csv.target", self.csv_target.clone());
        put("csv.env", self.csv_env.clone());
        put("csv.thresholds", join(&self.csv_thresholds));
        put("train_envs", join(&self.train_envs));
        put("hidden", self.hidden.to_string());
        put("activation", format!("{:?}", self.activation).to_lowercase());
        put("k", join(&self.k_grid));
        put("clusters", self.clusters.to_string());
        put("iterations", self.iterations.to_string());
        put("alpha", self.alpha.to_string());
        put("lambda", self.lambda.to_string());
        put("lr", opt(&self.lr));
        put("epochs", self.epochs.to_string());
        put("inv_lr", opt(&self.inv_lr));
        put("inv_steps", self.inv_steps.to_string());
        put("em_max_iter", self.em_max_iter.to_string());
        put("em_tol", self.em_tol.to_string());
        put("em_restarts", self.em_restarts.to_string());
        put("em_ridge", opt(&self.em_ridge));
        put("em_sigma", opt(&self.em_sigma));
        put("em_sigma_scale", self.em_sigma_scale.to_string());
        put("assign", format!("{:?}", self.assign).to_lowercase());
        put("kernel_mode", format!("{:?}", self.kernel_mode).to_lowercase());
        put("warm_start", self.warm_start.to_string());
        put("holdout", self.holdout.to_string());
        put("seeds", join(&self.seeds));
        put("methods", join(&self.methods));
        put("out_dir", self.out_dir.display().to_string());
        m
    }
}
