//! Multi-trial benchmark runner: solves the configured problem once per seed,
//! writes one CSV per trial plus cross-trial summaries.

use anyhow::{Context, Result};
use std::fmt::Write as _;
use std::path::Path;

use sbcpn::{
    build_sampler, solve, AlgorithmKind, IterationRecord, RunStatus, SolveTrace, SolverConfig,
};

use crate::config::{BuiltExperiment, Timing};

pub struct TrialOutcome {
    pub seed: u64,
    pub trace: SolveTrace,
}

pub struct RunReport {
    pub trials: Vec<TrialOutcome>,
    pub reference: SolveTrace,
    pub all_converged: bool,
}

const CSV_HEADER: &str =
    "iter,time_s,phi,resid_norm,step_size,ls_trials,block_size,inner_iters,cert_norm,step_norm";

fn max_threads() -> usize {
    if let Ok(v) = std::env::var("SBCPN_MAX_THREADS") {
        if let Ok(k) = v.trim().parse::<usize>() {
            return k.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1)
}

/// Runs the reference solve and all trials; pure compute, no file output.
pub fn execute(exp: &BuiltExperiment) -> Result<RunReport> {
    // High-accuracy anchor for the distance column: deterministic full-block
    // line-search run on the same problem.
    let mut ref_cfg = SolverConfig::new(AlgorithmKind::LineSearch);
    ref_cfg.mu = exp.solver.mu;
    ref_cfg.tau = exp.solver.tau;
    ref_cfg.theta = exp.solver.theta;
    ref_cfg.eta_rule = exp.solver.eta_rule;
    ref_cfg.stop_tol = exp.run.reference_tol;
    ref_cfg.max_outer = exp.solver.max_outer.saturating_mul(4);
    ref_cfg.max_inner = exp.solver.max_inner;
    ref_cfg.max_ls_trials = exp.solver.max_ls_trials;
    ref_cfg.refine_floor = exp.solver.refine_floor;
    let space = sbcpn::unit_space_for(&exp.problem);
    let mut full =
        build_sampler("full", space.unit_count(), space).map_err(|e| anyhow::anyhow!("{e}"))?;
    let reference =
        solve(&exp.problem, &ref_cfg, full.as_mut()).map_err(|e| anyhow::anyhow!("{e}"))?;

    let trials = run_trials(exp)?;
    let all_converged = trials
        .iter()
        .all(|t| t.trace.status == RunStatus::Converged);
    Ok(RunReport {
        trials,
        reference,
        all_converged,
    })
}

fn run_trials(exp: &BuiltExperiment) -> Result<Vec<TrialOutcome>> {
    let space = sbcpn::unit_space_for(&exp.problem);
    let seeds: Vec<u64> = (0..exp.run.trials as u64)
        .map(|t| exp.run.seed_base + t)
        .collect();
    let workers = max_threads().min(seeds.len()).max(1);
    let mut out: Vec<Option<TrialOutcome>> = Vec::new();
    out.resize_with(seeds.len(), || None);

    std::thread::scope(|scope| -> Result<()> {
        for chunk_start in (0..seeds.len()).step_by(workers) {
            let chunk_end = (chunk_start + workers).min(seeds.len());
            let mut handles = Vec::new();
            for (t, &seed) in seeds.iter().enumerate().take(chunk_end).skip(chunk_start) {
                let mut cfg = exp.solver.clone();
                cfg.seed = seed;
                cfg.record_iterates = true;
                let space = space.clone();
                let strategy = exp.strategy.clone();
                let units = exp.units;
                let problem = &exp.problem;
                handles.push((
                    t,
                    scope.spawn(move || -> Result<TrialOutcome> {
                        let mut sampler = build_sampler(&strategy, units, space)
                            .map_err(|e| anyhow::anyhow!("{e}"))?;
                        let trace = solve(problem, &cfg, sampler.as_mut())
                            .map_err(|e| anyhow::anyhow!("{e}"))?;
                        Ok(TrialOutcome { seed, trace })
                    }),
                ));
            }
            for (t, h) in handles {
                let outcome = h.join().expect("trial thread panicked")?;
                out[t] = Some(outcome);
            }
        }
        Ok(())
    })?;
    Ok(out
        .into_iter()
        .map(|o| o.expect("every trial filled"))
        .collect())
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_row(r: &IterationRecord, timing: Timing) -> String {
    let time = match timing {
        Timing::Wall => r.wall_clock,
        Timing::None => 0.0,
    };
    let block_size = r.block.as_ref().map(|b| b.len()).unwrap_or(0);
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.k,
        fmt_f(time),
        fmt_f(r.phi),
        fmt_f(r.resid_norm),
        fmt_f(r.step_size),
        r.ls_trials,
        block_size,
        r.inner_iterations,
        fmt_f(r.certificate_norm),
        fmt_f(r.step_norm),
    )
}

pub fn write_trial_csv(trace: &SolveTrace, timing: Timing, path: &Path) -> Result<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in &trace.records {
        text.push_str(&csv_row(r, timing));
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Columnwise means over the included trials, truncated to the shortest one.
pub fn write_average_csv(included: &[&SolveTrace], timing: Timing, path: &Path) -> Result<()> {
    let mut text = String::from("iter,time_s,phi,resid_norm\n");
    if let Some(rows) = included.iter().map(|t| t.records.len()).min() {
        let k = included.len() as f64;
        for i in 0..rows {
            let mut time = 0.0;
            let mut phi = 0.0;
            let mut resid = 0.0;
            for t in included {
                let r = &t.records[i];
                time += match timing {
                    Timing::Wall => r.wall_clock,
                    Timing::None => 0.0,
                };
                phi += r.phi;
                resid += r.resid_norm;
            }
            let _ = writeln!(
                text,
                "{},{},{},{}",
                i,
                fmt_f(time / k),
                fmt_f(phi / k),
                fmt_f(resid / k)
            );
        }
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Mean distance from each trial's k-th iterate to the reference solution.
pub fn write_distance_csv(
    included: &[&SolveTrace],
    reference: &SolveTrace,
    path: &Path,
) -> Result<()> {
    let x_ref = &reference.final_x;
    let mut text = String::from("iter,dist\n");
    if let Some(rows) = included.iter().map(|t| t.iterates.len()).min() {
        let k = included.len() as f64;
        for i in 0..rows {
            let mut acc = 0.0;
            for t in included {
                let d = &t.iterates[i] - x_ref;
                acc += d.dot(&d).sqrt();
            }
            let _ = writeln!(text, "{},{}", i, fmt_f(acc / k));
        }
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_outputs(exp: &BuiltExperiment, report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (t, outcome) in report.trials.iter().enumerate() {
        let path = dir.join(format!("trial_{t:03}.csv"));
        write_trial_csv(&outcome.trace, exp.run.timing, &path)?;
    }
    let included: Vec<&SolveTrace> = report
        .trials
        .iter()
        .filter(|t| t.trace.status != RunStatus::InnerFailure)
        .map(|t| &t.trace)
        .collect();
    write_average_csv(&included, exp.run.timing, &dir.join("average.csv"))?;
    write_distance_csv(
        &included,
        &report.reference,
        &dir.join("distance_to_reference.csv"),
    )?;

    let mut meta = String::new();
    for line in &exp.describe {
        let _ = writeln!(meta, "{line}");
    }
    let _ = writeln!(
        meta,
        "trials = {}, seed_base = {}",
        exp.run.trials, exp.run.seed_base
    );
    let _ = writeln!(
        meta,
        "timing = {}",
        match exp.run.timing {
            Timing::Wall => "wall",
            Timing::None => "none",
        }
    );
    let _ = writeln!(
        meta,
        "reference: tol = {:.1e}, status = {:?}, rows = {}, final resid = {:.6e}",
        exp.run.reference_tol,
        report.reference.status,
        report.reference.records.len(),
        report.reference.final_resid_norm(),
    );
    for (t, outcome) in report.trials.iter().enumerate() {
        let tr = &outcome.trace;
        let _ = writeln!(
            meta,
            "trial {t}: seed = {}, status = {:?}, rows = {}, final resid = {:.6e}",
            outcome.seed,
            tr.status,
            tr.records.len(),
            tr.final_resid_norm(),
        );
        if let Some(why) = &tr.failure {
            let _ = writeln!(meta, "trial {t} failure: {why}");
        }
    }
    if included.len() < report.trials.len() {
        let _ = writeln!(
            meta,
            "warning: {} trial(s) hit an inner failure and were excluded from averages",
            report.trials.len() - included.len()
        );
    }
    for w in &exp.warnings {
        let _ = writeln!(meta, "warning: {w}");
    }
    std::fs::write(dir.join("meta.txt"), meta).context("writing meta.txt")?;
    Ok(())
}
