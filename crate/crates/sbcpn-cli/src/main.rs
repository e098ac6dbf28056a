mod config;
mod libsvm;
mod runner;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sbcpn::experiments::students_t::{gen_students_t, save_instance, OperatorKind};
use sbcpn::{build_sampler, residual, residual_restricted, solve, RunStatus};

use config::{build_experiment, load_config, BuiltExperiment};

#[derive(Parser)]
#[command(
    name = "sbcpn",
    version,
    about = "Benchmark runner for block proximal Newton solvers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiment described by a TOML config and write CSV outputs.
    ///
    /// Exit code 0 means every trial converged.
    Run { config: PathBuf },
    /// Generate a synthetic heavy-tail regression instance and save it.
    GenStudentsT {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// gaussian-orth | dct
        #[arg(long, default_value = "gaussian-orth")]
        operator: String,
    },
    /// Build the configured problem and run consistency checks on it.
    Check { config: PathBuf },
}

fn main() {
    let code = match run_cli() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run_cli() -> Result<i32> {
    match Cli::parse().cmd {
        Cmd::Run { config } => cmd_run(&config),
        Cmd::GenStudentsT {
            n,
            seed,
            out,
            operator,
        } => cmd_gen(n, seed, &out, &operator),
        Cmd::Check { config } => cmd_check(&config),
    }
}

fn load_built(path: &Path) -> Result<BuiltExperiment> {
    let cfg = load_config(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    build_experiment(&cfg, dir)
}

fn cmd_run(path: &Path) -> Result<i32> {
    let exp = load_built(path)?;
    for line in &exp.describe {
        println!("{line}");
    }
    for w in &exp.warnings {
        eprintln!("warning: {w}");
    }
    let dir = exp
        .run
        .output_dir
        .clone()
        .context("run.output_dir is required by the run command")?;
    let report = runner::execute(&exp)?;
    runner::write_outputs(&exp, &report, &dir)?;
    for (t, outcome) in report.trials.iter().enumerate() {
        println!(
            "trial {t}: seed {} -> {:?} in {} rows, resid {:.3e}",
            outcome.seed,
            outcome.trace.status,
            outcome.trace.records.len(),
            outcome.trace.final_resid_norm()
        );
    }
    println!("wrote {}", dir.display());
    Ok(if report.all_converged { 0 } else { 1 })
}

fn cmd_gen(n: usize, seed: u64, out: &Path, operator: &str) -> Result<i32> {
    let kind: OperatorKind = operator.parse().map_err(|e: String| anyhow::anyhow!(e))?;
    let inst = gen_students_t(n, seed, kind).map_err(|e| anyhow::anyhow!("{e}"))?;
    save_instance(&inst, out).map_err(|e| anyhow::anyhow!("{e}"))?;
    println!(
        "wrote {}: n = {}, m = {}, nu = {}, lambda = {:.6e}",
        out.display(),
        inst.op.cols(),
        inst.op.rows(),
        inst.nu,
        inst.lambda
    );
    Ok(0)
}

fn cmd_check(path: &Path) -> Result<i32> {
    let exp = load_built(path)?;
    let problem = &exp.problem;
    let n = problem.dim();
    let mut failed = 0usize;
    let mut report = |ok: bool, what: &str| {
        println!("{} - {what}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failed += 1;
        }
    };

    // finite-difference agreement of the smooth gradient
    let mut worst_grad = 0.0f64;
    for i in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let x = Array1::from_shape_fn(n, |_| rng.random_range(-0.5..0.5));
        worst_grad = worst_grad.max(sbcpn::gradient_check(
            problem.smooth.as_ref(),
            &x.view(),
            1e-6,
        ));
    }
    report(
        worst_grad <= 1e-5,
        &format!("gradient matches finite differences ({worst_grad:.2e})"),
    );

    // restricted residual equals the slice of the full residual
    let space = sbcpn::unit_space_for(problem);
    let mut worst_res = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let x = Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0));
        let grad = problem.smooth.gradient(&x.view());
        let rep = residual(problem, &x.view(), &grad.view())?;
        let k = exp.units.min(space.unit_count());
        let mut ids = rand::seq::index::sample(&mut rng, space.unit_count(), k).into_vec();
        ids.sort_unstable();
        let block = space.expand(&ids);
        let restricted = residual_restricted(problem, &x.view(), &grad.view(), &block)?;
        let sliced = block.gather(&rep.g_full.view());
        let diff = &restricted - &sliced;
        worst_res = worst_res.max(diff.iter().fold(0.0f64, |a, &v| a.max(v.abs())));
    }
    report(
        worst_res <= 1e-12,
        &format!("block residual equals full-residual slice ({worst_res:.2e})"),
    );

    // short run with every per-iteration invariant assertion enabled
    let mut cfg = exp.solver.clone();
    cfg.check_invariants = true;
    cfg.max_outer = cfg.max_outer.min(40);
    cfg.seed = exp.run.seed_base;
    let mut sampler = build_sampler(&exp.strategy, exp.units, space.clone())
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    match solve(problem, &cfg, sampler.as_mut()) {
        Ok(trace) => {
            let ok = trace.status != RunStatus::InnerFailure;
            report(
                ok,
                &format!(
                    "{} iterations with invariant checks on, status {:?}, resid {:.3e}",
                    trace.records.len(),
                    trace.status,
                    trace.final_resid_norm()
                ),
            );
        }
        Err(e) => report(false, &format!("invariant-checked run errored: {e}")),
    }

    Ok(if failed == 0 { 0 } else { 2 })
}
