use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use kerhrm::harness::check::run_checks;
use kerhrm::harness::pipeline::load_environments;
use kerhrm::harness::report::summary_lines;
use kerhrm::harness::{emit_report, run_experiment, ExperimentConfig, Method};

#[derive(Parser)]
#[command(
    name = "kerhrm",
    version,
    about = "Kernelized heterogeneous risk minimization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write report.json, results.csv and trace.csv.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replaces the configured seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict to these methods (repeatable).
        #[arg(long, value_parser = parse_method)]
        method: Vec<Method>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write the configured task's environments to CSV, one file per environment.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the randomized invariant suite.
    Check {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: kerhrm::Error| e.to_string())
}

fn load_config(
    path: Option<&PathBuf>,
    sets: &[String],
    seed: Option<u64>,
    out: Option<&PathBuf>,
) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{s}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen(cfg: &ExperimentConfig, quiet: bool) -> Result<()> {
    let seed = cfg.seeds[0];
    let (envs, _, warnings) = load_environments::<f64>(cfg, seed)?;
    for w in warnings {
        log::warn!("{w}");
    }
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    for (e, env) in envs.iter().enumerate() {
        let Some(d) = env else { continue };
        let path = cfg.out_dir.join(format!("env{e}.csv"));
        let mut text = String::new();
        for j in 0..d.dim() {
            text.push_str(&format!("x{j},"));
        }
        text.push_str("y,env,spurious\n");
        for i in 0..d.len() {
            for v in d.x.row(i) {
                text.push_str(&format!("{v},"));
            }
            let env_id = d.latent_env.as_ref().map_or(e, |l| l[i]);
            let attr = d.spurious_attr.as_ref().map_or(String::new(), |a| a[i].to_string());
            text.push_str(&format!("{},{env_id},{attr}\n", d.y[i]));
        }
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(text.as_bytes()))
            .with_context(|| format!("writing {}", path.display()))?;
        if !quiet {
            println!("{} ({} rows)", path.display(), d.len());
        }
    }
    Ok(())
}

fn real_main(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            method,
            set,
        } => {
            let mut cfg = load_config(config.as_ref(), &set, seed, out.as_ref())?;
            if !method.is_empty() {
                cfg.methods = method;
            }
            let report = run_experiment::<f64>(&cfg)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            let paths = emit_report(&report, &cfg.out_dir)?;
            if !cli.quiet {
                for l in summary_lines(&report) {
                    println!("{l}");
                }
                for p in paths {
                    println!("wrote {}", p.display());
                }
            }
            Ok(true)
        }
        Command::Gen { config, seed, out, set } => {
            let cfg = load_config(config.as_ref(), &set, seed, out.as_ref())?;
            gen(&cfg, cli.quiet)?;
            Ok(true)
        }
        Command::Check { cases, seed } => {
            let outcomes = run_checks(cases, seed)?;
            let ok = outcomes.iter().all(|c| c.passed);
            for c in &outcomes {
                if !cli.quiet || !c.passed {
                    println!(
                        "{} {:<52} worst {:.3e} (tol {:.0e})",
                        if c.passed { "PASS" } else { "FAIL" },
                        c.name,
                        c.worst,
                        c.tolerance
                    );
                }
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match real_main(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
