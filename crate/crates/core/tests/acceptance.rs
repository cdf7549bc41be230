//! End-to-end acceptance suite.
//!
//! One test runs every criterion in order and prints a PASS/FAIL line for each,
//! then fails if any criterion failed. Runs that several criteria need (the
//! three-environment classification task in particular) are executed once.
//!
//! The colored-digit criterion needs the MNIST IDX files; point
//! `KERHRM_MNIST_IMAGES` and `KERHRM_MNIST_LABELS` at them, otherwise it is skipped.
//!
//! Classification runs use noise scales 9 / 0.09 for the invariant and spurious
//! blocks. Read as variances, the generator defaults (3 / 0.3) leave the
//! spurious block too weak for plain least squares to latch onto it; read as
//! standard deviations they reproduce the baseline's train/test gap.

use std::path::PathBuf;
use std::time::Instant;

use kerhrm::datagen::gen_example41;
use kerhrm::harness::check::run_checks;
use kerhrm::harness::{run_experiment, ExperimentConfig, Method, Report};
use kerhrm::invariant::{irm_baseline, InvariantConfig};
use kerhrm::ntf_space::decompose;
use kerhrm::Dataset;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const CLASSIFICATION: &str = "
task = classification
cls.bias_rates = 0.9, 0.8, 0.1
cls.n_per_env = 1000, 1000, 1000
cls.sigma_s2 = 9
cls.sigma_v2 = 0.09
lambda = 5
epochs = 400
";

const REGRESSION: &str = "
task = regression
lambda = 5
epochs = 400
methods = kerhrm, erm
";

struct Outcome {
    id: &'static str,
    passed: Option<bool>,
    detail: String,
}

impl Outcome {
    fn new(id: &'static str, passed: bool, detail: String) -> Self {
        Outcome {
            id,
            passed: Some(passed),
            detail,
        }
    }

    fn line(&self) -> String {
        let tag = match self.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        format!("criterion {:>2} {tag}  {}", self.id, self.detail)
    }
}

fn config(base: &str, extra: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!("{base}\n{extra}")).expect("acceptance config")
}

fn run(cfg: &ExperimentConfig) -> (Report, f64) {
    let start = Instant::now();
    let report = run_experiment::<f64>(cfg).expect("experiment failed");
    (report, start.elapsed().as_secs_f64())
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn test_mean(report: &Report, m: Method) -> f64 {
    report.method(m).expect("method in report").aggregate.mean
}

/// Worst orthogonality residual over every recorded kernel update.
fn worst_orthogonality(reports: &[&Report]) -> f64 {
    reports
        .iter()
        .flat_map(|r| r.methods.iter())
        .flat_map(|m| m.seeds.iter())
        .flat_map(|s| s.trace.iter())
        .map(|t| t.orthogonality_residual)
        .fold(0.0, f64::max)
}

fn gram_against_dense_svd(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(2..=50);
        let p = rng.random_range(2..=50);
        let k = rng.random_range(1..=n.min(p).min(10));
        let phi = Array2::from_shape_simple_fn((n, p), || rng.sample::<f64, _>(StandardNormal));
        let space = decompose(phi.dot(&phi.t()).view(), k).expect("decompose");
        let dense = nalgebra::DMatrix::from_fn(p, n, |i, j| phi[[j, i]]);
        let mut sv: Vec<f64> = dense.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in space.singular_values().iter().zip(&sv) {
            worst = worst.max((a - b).abs() / b.max(1.0));
        }
    }
    worst
}

fn example_cosine(seed: u64) -> f64 {
    let ex = gen_example41::<f64>(1000, &[2.0, -2.0], 5, 0.5, seed).expect("generator");
    let data = Dataset::concat(&ex.envs).expect("concat");
    let space = decompose(data.x.dot(&data.x.t()).view(), 5).expect("decompose");
    let fit = irm_baseline(&data, &space, &InvariantConfig::default()).expect("fit");
    // X = U S V^T, so the reduced coordinates act on inputs through V = X^T U S^-1
    let v = data.x.t().dot(space.u()) / space.singular_values();
    let dir: Array1<f64> = v.dot(&fit.theta);
    dir.dot(&ex.psi_s) / (dir.dot(&dir).sqrt() * ex.psi_s.dot(&ex.psi_s).sqrt())
}

fn mnist_paths() -> Option<(PathBuf, PathBuf)> {
    let images = PathBuf::from(std::env::var_os("KERHRM_MNIST_IMAGES")?);
    let labels = PathBuf::from(std::env::var_os("KERHRM_MNIST_LABELS")?);
    (images.is_file() && labels.is_file()).then_some((images, labels))
}

// bypasses libtest capture so the lines appear in a plain `cargo test` log
fn report(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[test]
fn acceptance_criteria() {
    let mut out: Vec<Outcome> = Vec::new();
    let mut emit = |o: Outcome| {
        report(&o.line());
        out.push(o);
    };

    let checks = run_checks(100, 2024).expect("self-checks");
    let find = |prefix: &str| {
        checks
            .iter()
            .find(|c| c.name.starts_with(prefix))
            .expect("check present")
    };

    // 1
    let grads: Vec<_> = [
        "ntf rows",
        "invariant objective gradient",
        "feedback objective gradient",
    ]
    .iter()
    .map(|p| find(p))
    .collect();
    let worst = grads.iter().map(|c| c.worst).fold(0.0, f64::max);
    emit(Outcome::new(
        "1",
        grads.iter().all(|c| c.passed) && worst <= 1e-4,
        format!("analytic vs central differences, 100 instances each: worst relative error {worst:.2e} (<= 1e-4)"),
    ));

    // the shared classification runs
    let c7_cfg = config(
        CLASSIFICATION,
        "methods = erm, kerhrm, kerhrm-static\nseeds = 0,1,2,3,4,5,6,7,8,9",
    );
    let (c7, c7_secs) = run(&c7_cfg);
    let c6_cfg = config(
        CLASSIFICATION,
        "cls.bias_rates = 0.9, 0.1, 0.5\niterations = 2\nmethods = kerhrm\nseeds = 0,1,2,3,4",
    );
    let (c6, _) = run(&c6_cfg);
    let (c8, _) = run(&config(REGRESSION, ""));
    let mut by_k = vec![(2usize, {
        let m = c7.method(Method::KerHrm).expect("kerhrm");
        mean(m.seeds.iter().filter(|s| s.seed < 5).map(|s| s.eval.test.mean))
    })];
    let mut k_reports = Vec::new();
    for k in 3..=5 {
        let (r, _) = run(&config(
            CLASSIFICATION,
            &format!("clusters = {k}\nmethods = kerhrm\nseeds = 0,1,2,3,4"),
        ));
        by_k.push((k, test_mean(&r, Method::KerHrm)));
        k_reports.push(r);
    }

    // 2
    let mut all: Vec<&Report> = vec![&c7, &c6, &c8];
    all.extend(k_reports.iter());
    let orth = worst_orthogonality(&all).max(find("kernel update").worst);
    emit(Outcome::new(
        "2",
        orth <= 1e-8,
        format!("worst normalized <Psi_V(x_i), theta_inv> after every kernel update: {orth:.2e} (<= 1e-8)"),
    ));

    // 3: the pipeline aborts a run whose EM objective rises, so finishing is the evidence
    let em = find("EM objective");
    emit(Outcome::new(
        "3",
        em.passed,
        format!(
            "EM objective non-increasing: all {} experiment runs completed; random instances worst rise {:.2e} (<= 1e-7)",
            all.len(),
            em.worst
        ),
    ));

    // 4
    let gram = gram_against_dense_svd(100);
    emit(Outcome::new(
        "4",
        gram <= 1e-8,
        format!("Gram eigensolve vs dense SVD, n,p <= 50, 100 instances: worst deviation {gram:.2e} (<= 1e-8)"),
    ));

    // 5
    let cos = mean((0..5).map(example_cosine));
    emit(Outcome::new(
        "5",
        cos >= 0.9,
        format!("oracle-environment invariant direction vs Psi_S*: mean cosine over 5 seeds {cos:.4} (>= 0.9)"),
    ));

    // 6
    let purity = c6
        .method(Method::KerHrm)
        .and_then(|m| m.aggregate.purity)
        .unwrap_or(f64::NAN);
    emit(Outcome::new(
        "6",
        purity >= 0.85,
        format!("cluster purity, train r = 0.9 / 0.1, 2 iterations, 5 seeds: {purity:.4} (>= 0.85)"),
    ));

    // 7
    let erm = test_mean(&c7, Method::Erm);
    let ker = test_mean(&c7, Method::KerHrm);
    emit(Outcome::new(
        "7",
        erm <= 0.45 && ker >= erm + 0.15 && (0.55..=0.85).contains(&ker) && c7_secs <= 600.0,
        format!(
            "r2 = 0.8, 10 seeds: ERM test {erm:.4} (<= 0.45), KerHRM test {ker:.4} (>= ERM + 0.15, in [0.55, 0.85]), {c7_secs:.0} s (<= 600)"
        ),
    ));

    // 8
    let (erm_r, ker_r) = (
        &c8.method(Method::Erm).expect("erm").aggregate,
        &c8.method(Method::KerHrm).expect("kerhrm").aggregate,
    );
    let (es, ks) = (erm_r.std.unwrap_or(f64::NAN), ker_r.std.unwrap_or(f64::NAN));
    emit(Outcome::new(
        "8",
        ker_r.mean <= 0.8 * erm_r.mean && ks <= es,
        format!(
            "selection-bias regression, 10 seeds: Mean_Error KerHRM {:.4} vs ERM {:.4} (<= 0.8x), Std_Error {ks:.4} vs {es:.4} (<=)",
            ker_r.mean, erm_r.mean
        ),
    ));

    // 9
    let lo = by_k.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = by_k.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let listing: Vec<String> = by_k.iter().map(|(k, a)| format!("K={k} {a:.4}")).collect();
    emit(Outcome::new(
        "9",
        hi - lo <= 0.08,
        format!(
            "test accuracy by cluster count, 5 seeds: {} spread {:.4} (<= 0.08)",
            listing.join(", "),
            hi - lo
        ),
    ));

    // 10
    match mnist_paths() {
        None => emit(Outcome {
            id: "10",
            passed: None,
            detail: "colored MNIST skipped: set KERHRM_MNIST_IMAGES and KERHRM_MNIST_LABELS to the IDX files".into(),
        }),
        Some((images, labels)) => {
            let cfg = config(
                "",
                &format!(
                    "task = colored_mnist\nmnist.images = {}\nmnist.labels = {}\nmnist.n_per_env = 1000, 1000, 1000\nhidden = 256\nlambda = 5\nepochs = 400\nseeds = 0,1,2,3,4\nmethods = erm, kerhrm",
                    images.display(),
                    labels.display()
                ),
            );
            let (r, secs) = run(&cfg);
            let erm = test_mean(&r, Method::Erm);
            let k = &r.method(Method::KerHrm).expect("kerhrm").aggregate;
            let gap = (k.mean - k.train).abs();
            emit(Outcome::new(
                "10",
                erm <= 0.35 && k.mean >= 0.5 && gap <= 0.15 && secs <= 1800.0,
                format!(
                    "colored MNIST, 5 seeds: ERM test {erm:.4} (<= 0.35), KerHRM test {:.4} (>= 0.5), gap {gap:.4} (<= 0.15), {secs:.0} s",
                    k.mean
                ),
            ));
        }
    }

    // 11
    let stat = test_mean(&c7, Method::KerHrmStatic);
    emit(Outcome::new(
        "11",
        ker >= stat - 0.02,
        format!(
            "criterion-7 task, 10 seeds: KerHRM (3 iterations) {ker:.4} vs single pass {stat:.4} (>= single - 0.02)"
        ),
    ));

    // trace of the feedback loop on the same runs
    let seeds = &c7.method(Method::KerHrm).expect("kerhrm").seeds;
    let first = mean(seeds.iter().map(|s| s.trace[0].eval.test.mean));
    let last = mean(seeds.iter().map(|s| s.trace.last().expect("trace").eval.test.mean));
    let kl_first = mean(seeds.iter().filter_map(|s| s.trace[0].kl));
    let kl_last = mean(seeds.iter().filter_map(|s| s.trace.last().and_then(|t| t.kl)));
    report(&format!(
        "iteration trace: test accuracy {first:.4} -> {last:.4}, between-cluster KL {kl_first:.4} -> {kl_last:.4}"
    ));
    assert!(
        last >= first - 0.02,
        "final-iteration accuracy {last} fell below first {first} - 0.02"
    );

    let failed: Vec<&str> = out.iter().filter(|o| o.passed == Some(false)).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
