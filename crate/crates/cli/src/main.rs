//! `dnloc`: generate the synthetic dataset, train, evaluate, dump artifacts
//! and run the gradient checks.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 when the command fails.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use dnloc_core::config::RunConfig;
use dnloc_core::eval::{dump_artifacts, evaluate_pairs, AGGREGATE_HEADER};
use dnloc_core::gradsuite;
use dnloc_core::pipeline::Pipeline;
use dnloc_core::synthdata::{build_dataset, Dataset, Split};
use dnloc_core::trainer::train;
use dnloc_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "dnloc", version, about = "Day/night stereo localization with learned features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; every field is optional. Relative paths inside
    /// it resolve against the file's directory.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the command's seed (dataset seed, training seed, RANSAC seed
    /// or gradient-check seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the command's output location.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic day/night dataset. `--out` sets the dataset
    /// directory.
    GenData(Common),
    /// Train the configured scheme. `--out` sets the run directory that
    /// receives history.csv and checkpoints.
    Train(Common),
    /// Evaluate a checkpoint on the test split. Prints one CSV line with the
    /// columns pairs,failures,mean_dx,median_dx,mean_dy,median_dy,
    /// mean_dtheta,median_dtheta,mean_inliers,median_inliers and writes the
    /// per-pair report to `--out`.
    Eval(Common),
    /// Write source, target, transformed target and detector maps of one
    /// pair as PPM images into the `--out` directory.
    Dump(Common),
    /// Run the finite-difference gradient suite; fails if any check exceeds
    /// its tolerance. `--out` optionally receives the results as CSV.
    Gradcheck(Common),
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

fn gen_data(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.dataset.seed = s;
    }
    let root = common.out.clone().unwrap_or(cfg.dataset_dir);
    cfg.dataset.validate()?;
    let manifest = build_dataset(&cfg.dataset, &root)?;
    eprintln!(
        "wrote {} train and {} test pairs to {}",
        manifest.splits.train.len(),
        manifest.splits.test.len(),
        root.display()
    );
    Ok(())
}

fn run_train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let mut t = cfg.train;
    if let Some(s) = common.seed {
        t.seed = s;
    }
    if let Some(o) = &common.out {
        t.out_dir = o.clone();
    }
    t.validate()?;
    let summary = train(&t, &cfg.dataset_dir)?;
    for r in &summary.history {
        eprintln!(
            "epoch {:>3}: total {:.5} (skipped {}), val median dx {:.3} m",
            r.epoch, r.total, r.skipped, r.val_dx
        );
    }
    println!("{}", summary.last_checkpoint.display());
    Ok(())
}

fn run_eval(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let mut e = cfg.eval;
    if let Some(s) = common.seed {
        e.matcher.ransac.seed = s;
    }
    if let Some(o) = &common.out {
        e.out = o.clone();
    }
    e.matcher.validate()?;
    let ds = Dataset::open(&cfg.dataset_dir)?;
    let mut pairs = ds.load_split(Split::Test)?;
    if let Some(n) = e.max_pairs {
        pairs.truncate(n);
    }
    let pipeline = Pipeline::load(&e.checkpoint, e.featnet_checkpoint.as_deref())?;
    let report = evaluate_pairs(&pipeline, &pairs, &ds.camera(), &e.matcher)?;
    report.write_pairs_csv(&e.out)?;
    eprintln!("{AGGREGATE_HEADER}");
    println!("{}", report.aggregate_line());
    Ok(())
}

fn run_dump(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let d = cfg.dump;
    let out = common.out.clone().unwrap_or(d.out_dir);
    let ds = Dataset::open(&cfg.dataset_dir)?;
    let id = match &d.pair {
        Some(id) => id.clone(),
        None => ds
            .ids(Split::Test)
            .first()
            .cloned()
            .ok_or_else(|| Error::Config("dataset has no test pairs".into()))?,
    };
    let pair = ds.load_pair(&id)?;
    let pipeline = Pipeline::load(&d.checkpoint, d.featnet_checkpoint.as_deref())?;
    for p in dump_artifacts(&pipeline, &pair, &out)? {
        println!("{}", p.display());
    }
    Ok(())
}

/// Returns whether every check passed.
fn run_gradcheck(common: &Common) -> Result<bool> {
    // The configuration carries nothing the suite needs, but a malformed file
    // is still reported.
    load_config(common)?;
    let results = gradsuite::run_all(common.seed.unwrap_or(0))?;
    let mut csv = String::from("check,max_rel_error,tolerance,passed\n");
    for r in &results {
        println!(
            "{:<4} {:<42} {:.3e} (tolerance {:.0e})",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.tier.tolerance()
        );
        csv.push_str(&format!("{},{},{},{}\n", r.name, r.max_rel_error, r.tier.tolerance(), r.passed));
    }
    if let Some(path) = &common.out {
        write_file(path, &csv)?;
    }
    Ok(results.iter().all(|r| r.passed))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let outcome = match &cli.command {
        Command::GenData(c) => gen_data(c).map(|_| true),
        Command::Train(c) => run_train(c).map(|_| true),
        Command::Eval(c) => run_eval(c).map(|_| true),
        Command::Dump(c) => run_dump(c).map(|_| true),
        Command::Gradcheck(c) => run_gradcheck(c),
    };
    let _ = std::io::stdout().flush();
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check exceeded tolerance");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
