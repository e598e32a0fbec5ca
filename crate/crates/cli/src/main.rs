//! `mvjump`: runs JSON-described scenarios and compares result directories.
//!
//! Exit codes: 0 pass, 2 acceptance failure, 1 error.

mod compare;
mod config;
mod scenarios;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::Config;

#[derive(Parser)]
#[command(
    name = "mvjump",
    version,
    about = "Mean-field jump diffusion scenario runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "MVJUMP_THREADS")]
        threads: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Per-column max-abs differences of like-named CSV files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Exit with 2 when any delta exceeds this.
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

enum Status {
    Pass,
    Fail,
}

fn run(config: PathBuf, out: PathBuf, seed: Option<u64>, quiet: bool) -> Result<Status> {
    let cfg = Config::load(&config)?;
    let seed = seed.or(cfg.seed).unwrap_or(0);
    println!("seed: {seed}");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let verdict = scenarios::run(&cfg, seed, &out)?;
    let kind = serde_json::to_value(cfg.kind)?;
    scenarios::write_json(
        &out,
        "report.json",
        &json!({
            "kind": kind,
            "seed": seed,
            "pass": verdict.pass,
            "details": verdict.details,
        }),
    )?;
    if !quiet {
        println!(
            "{} {}",
            kind.as_str().unwrap_or("scenario"),
            if verdict.pass { "PASS" } else { "FAIL" }
        );
        println!("{}", serde_json::to_string_pretty(&verdict.details)?);
    }
    Ok(if verdict.pass {
        Status::Pass
    } else {
        Status::Fail
    })
}

fn compare(a: PathBuf, b: PathBuf, tolerance: Option<f64>) -> Result<Status> {
    let deltas = compare::compare_dirs(&a, &b)?;
    println!("file,column,max_abs_delta");
    let mut within = true;
    for d in &deltas {
        println!("{},{},{}", d.file, d.column, d.max_abs_delta);
        within &= tolerance.is_none_or(|t| d.max_abs_delta <= t);
    }
    Ok(if within { Status::Pass } else { Status::Fail })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            threads,
            quiet,
        } => match threads {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .context("building the thread pool")
                .and_then(|pool| pool.install(|| run(config, out, seed, quiet))),
            None => run(config, out, seed, quiet),
        },
        Command::Compare { a, b, tolerance } => compare(a, b, tolerance),
    };
    match result {
        Ok(Status::Pass) => ExitCode::SUCCESS,
        Ok(Status::Fail) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
