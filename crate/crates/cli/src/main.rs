use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use foogd::models::load_checkpoint;
use foogd::workbench::experiment::{evaluate, prepare, write_artifacts, write_plots};
use foogd::workbench::gradsuite::run_gradient_suites;
use foogd::workbench::toy::{run_toy2d, ToyConfig};
use foogd::workbench::{run_experiment, ExperimentConfig, Overrides};
use foogd::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "foogd", version, about = "Federated OOD laboratory")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory, replacing `output.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long = "lambda-m", global = true, value_name = "X")]
    lambda_m: Option<f64>,
    #[arg(long = "lambda-a", global = true, value_name = "X")]
    lambda_a: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the client partition of the training set.
    Partition,
    /// Run federated training and write metrics, history and checkpoint.
    Train,
    /// Evaluate a saved checkpoint on the configured benchmark.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Sweep λ_m on the 2-d ring and report Langevin-sample MMD.
    Toy2d,
    /// Run every finite-difference gradient suite.
    Gradcheck,
    /// Write plot data (CSV, SVG) for a saved checkpoint.
    Export {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

impl Global {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            lambda_m: self.lambda_m,
            lambda_a: self.lambda_a,
            out: self.out.clone(),
        }
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                ExperimentConfig::from_toml_str(&text, &p.display().to_string())?
            }
            None => ExperimentConfig::default(),
        };
        cfg.apply(&self.overrides());
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json values always serialize")
    );
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Serde(e.to_string()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn partition(g: &Global) -> Result<()> {
    let cfg = g.config()?;
    let prepared = prepare(&cfg)?;
    let labels = &prepared.data.train.y;
    let classes = prepared.data.classes;
    let clients: Vec<_> = prepared
        .partition
        .clients
        .iter()
        .zip(&prepared.weights)
        .enumerate()
        .map(|(k, (idx, w))| {
            let mut counts = vec![0usize; classes];
            for &i in idx {
                counts[labels[i]] += 1;
            }
            json!({ "client": k, "size": idx.len(), "weight": w, "class_counts": counts })
        })
        .collect();
    let summary = json!({
        "alpha": prepared.partition.alpha,
        "seed": cfg.seed,
        "classes": classes,
        "clients": clients,
    });
    if g.out.is_some() {
        write_json(&cfg.output.dir.join("partition.json"), &summary)?;
    }
    print_json(&summary);
    Ok(())
}

fn train(g: &Global) -> Result<()> {
    let cfg = g.config()?;
    let outcome = run_experiment(&cfg)?;
    let files = write_artifacts(&cfg, &outcome)?;
    let m = &outcome.metrics;
    print_json(&json!({
        "acc_in": m.acc_in,
        "acc_inc": m.acc_inc,
        "auroc": m.auroc,
        "fpr95": m.fpr95,
        "msp_auroc": m.msp_auroc,
        "msp_fpr95": m.msp_fpr95,
        "files": files,
    }));
    Ok(())
}

fn eval(g: &Global, checkpoint: &Path) -> Result<()> {
    let cfg = g.config()?;
    let bundle = load_checkpoint(checkpoint)?;
    let prepared = prepare(&cfg)?;
    let e = evaluate(&cfg, &prepared, &bundle)?;
    let value = json!({
        "checkpoint": checkpoint,
        "model_checksum": bundle.checksum(),
        "acc_in": e.acc_in,
        "acc_inc": e.acc_inc,
        "auroc": e.detection.auroc,
        "fpr95": e.detection.fpr95,
        "msp_auroc": e.detection.msp_auroc,
        "msp_fpr95": e.detection.msp_fpr95,
        "per_client": to_value(&e.per_client)?,
    });
    if g.out.is_some() {
        write_json(&cfg.output.dir.join("eval.json"), &value)?;
    }
    print_json(&value);
    Ok(())
}

fn toy2d(g: &Global) -> Result<()> {
    let mut cfg = match &g.config {
        Some(_) => ToyConfig::from_experiment(&g.config()?),
        None => ToyConfig::default(),
    };
    if let Some(s) = g.seed {
        let n = cfg.seeds.len() as u64;
        cfg.seeds = (s..s + n).collect();
    }
    if let Some(l) = g.lambda_m {
        cfg.lambda_ms = vec![l];
    }
    let (report, files) = run_toy2d(&cfg, g.out.as_deref())?;
    let mut value = to_value(&report)?;
    value["files"] = to_value(&files)?;
    print_json(&value);
    Ok(())
}

fn gradcheck(g: &Global) -> Result<bool> {
    let results = run_gradient_suites(g.seed.unwrap_or(0))?;
    for r in &results {
        println!(
            "{:<20} max_rel_err {:.3e}  tol {:.0e}  checked {:>4}  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            r.checked,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(dir) = &g.out {
        write_json(&dir.join("gradcheck.json"), &to_value(&results)?)?;
    }
    Ok(results.iter().all(|r| r.passed))
}

fn export(g: &Global, checkpoint: &Path) -> Result<()> {
    let cfg = g.config()?;
    let bundle = load_checkpoint(checkpoint)?;
    let prepared = prepare(&cfg)?;
    let files = write_plots(&cfg, &prepared, &bundle, &cfg.output.dir)?;
    print_json(&json!({ "files": files }));
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let g = &cli.global;
    match &cli.command {
        Command::Partition => partition(g)?,
        Command::Train => train(g)?,
        Command::Eval { checkpoint } => eval(g, checkpoint)?,
        Command::Toy2d => toy2d(g)?,
        Command::Gradcheck => return gradcheck(g),
        Command::Export { checkpoint } => export(g, checkpoint)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(2)
        }
    }
}
