//! Subcommand implementations. Each returns data for the caller to print and
//! a [`CliError`] carrying the exit code on failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mssrk::engine::{RunFailure, Tableaux, Trajectory};
use mssrk::integrator1d::{GridSpec, Integrator1d};
use mssrk::maxwell3d::{Maxwell, MaxwellSpec};
use mssrk::noise::sample_path;
use mssrk::tableau::{condition_residual, condition_residual_literal, TableauJson};
use mssrk::{builtin_tableau, Tableau};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{MaxwellConfig, NoiseConfig, Run1dConfig};
use crate::output::{
    max_ms_residual, max_relative_drift, noise_statistics, write_1d_csv, write_maxwell_csv, FailureRow, PointStats,
};
use crate::CliError;

/// Flags shared by the run subcommands.
#[derive(Clone, Debug, Default)]
pub struct RunSettings {
    pub out: PathBuf,
    /// Overrides the config's seed(s) with a single seed.
    pub seed: Option<u64>,
    /// Overrides the config's seed list.
    pub seeds: Option<Vec<u64>>,
    /// Overrides the solver tolerance.
    pub tol: Option<f64>,
}

impl RunSettings {
    fn resolve_seeds(&self, listed: &[u64], noise_seed: u64) -> Vec<u64> {
        if let Some(s) = &self.seeds {
            s.clone()
        } else if let Some(s) = self.seed {
            vec![s]
        } else if !listed.is_empty() {
            listed.to_vec()
        } else {
            vec![noise_seed]
        }
    }
}

/// Outcome of one realization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub csv: PathBuf,
    pub steps_completed: usize,
    pub max_invariant_drift: f64,
    pub max_ms_residual: Option<f64>,
    pub error: Option<String>,
}

impl RunSummary {
    pub fn line(&self, invariant: &str) -> String {
        let ms = self
            .max_ms_residual
            .map_or_else(String::new, |r| format!(", max ms residual {r:.3e}"));
        let status = self.error.as_ref().map_or_else(String::new, |e| format!(", FAILED: {e}"));
        format!(
            "seed {}: {} steps, max {invariant} drift {:.3e}{ms}{status} -> {}",
            self.seed,
            self.steps_completed,
            self.max_invariant_drift,
            self.csv.display()
        )
    }
}

/// Condition-residual report for a tableau name or JSON file. `Ok(true)` on PASS.
pub fn check_tableau<W: Write>(arg: &str, tol: f64, out: &mut W) -> Result<bool, CliError> {
    let tableau: Tableau<f64> = if Path::new(arg).is_file() {
        let text = std::fs::read_to_string(arg).map_err(|e| CliError::Config(format!("cannot read {arg}: {e}")))?;
        let j: TableauJson = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{arg}: {e}")))?;
        Tableau::from_json(&j).map_err(|e| CliError::Config(e.to_string()))?
    } else {
        builtin_tableau(arg).map_err(|e| CliError::Config(e.to_string()))?
    };
    let m = condition_residual(&tableau);
    let literal = condition_residual_literal(&tableau);
    let max = m.max_abs();
    let pass = max <= tol;
    writeln!(out, "tableau: {arg} ({} stages)", tableau.stages())?;
    writeln!(out, "condition residual b_k b_j - b_k a_kj - b_j a_jk:")?;
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|x| format!("{x:+.17e}")).collect();
        writeln!(out, "  [{}]", row.join(", "))?;
    }
    writeln!(out, "max residual: {max:.17e}")?;
    writeln!(out, "max residual (b_l b_v - b_l a_lv - b_v a_lv form): {:.17e}", literal.max_abs())?;
    writeln!(out, "verdict: {} (tol {tol:e})", if pass { "PASS" } else { "FAIL" })?;
    Ok(pass)
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let threads = std::env::var("MSSRK_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Io(format!("cannot start worker threads: {e}")))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))
}

fn write_metadata(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

type CsvWriter = fn(&mut BufWriter<File>, &[mssrk::engine::StepRecord<f64>], Option<FailureRow>) -> std::io::Result<()>;

/// Writes the CSV and metadata of one realization.
#[allow(clippy::too_many_arguments)]
fn finish_run(
    out: &Path,
    name: &str,
    seed: u64,
    tau: f64,
    raw: &Value,
    started: Instant,
    result: Result<Trajectory<f64>, RunFailure<f64>>,
    write_csv: CsvWriter,
    drift_key: &str,
) -> Result<RunSummary, CliError> {
    let csv = out.join(format!("{name}_seed{seed}.csv"));
    let meta = out.join(format!("{name}_seed{seed}.json"));
    let (traj, error) = match result {
        Ok(t) => (t, None),
        Err(f) => (f.partial, Some(f.error.to_string())),
    };
    let failure = error.as_ref().map(|_| {
        let step = traj.records.last().map_or(0, |r| r.step + 1);
        FailureRow {
            step,
            time: tau * step as f64,
        }
    });
    let mut w = create(&csv)?;
    write_csv(&mut w, &traj.records, failure)?;
    let summary = RunSummary {
        seed,
        csv,
        steps_completed: traj.records.len().saturating_sub(1),
        max_invariant_drift: max_relative_drift(&traj.records),
        max_ms_residual: max_ms_residual(&traj.records),
        error,
    };
    write_metadata(
        &meta,
        &json!({
            "config": raw,
            "seed": seed,
            "status": if summary.error.is_some() { "failed" } else { "ok" },
            "error": summary.error,
            "steps_completed": summary.steps_completed,
            drift_key: summary.max_invariant_drift,
            "max_ms_residual": summary.max_ms_residual,
            "wall_time_seconds": started.elapsed().as_secs_f64(),
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;
    Ok(summary)
}

fn collect(summaries: Vec<Result<RunSummary, CliError>>) -> Result<Vec<RunSummary>, CliError> {
    let summaries = summaries.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(summaries)
}

/// Returns an error with exit code 3 if any realization failed.
pub fn check_failures(summaries: &[RunSummary]) -> Result<(), CliError> {
    let failed: Vec<String> = summaries
        .iter()
        .filter_map(|s| s.error.as_ref().map(|e| format!("seed {}: {e}", s.seed)))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(failed.join("; ")))
    }
}

fn ensure_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))
}

/// Runs every requested realization of a 1D configuration. Files are written
/// even for failed realizations; see [`check_failures`].
pub fn run_1d(cfg: &Run1dConfig, raw: &Value, settings: &RunSettings) -> Result<Vec<RunSummary>, CliError> {
    let system = cfg.system.build()?;
    if system.dims() != 1 {
        return Err(CliError::Config(format!("run-1d needs one L matrix, got {}", system.dims())));
    }
    let grid = GridSpec::new(cfg.grid.cells, cfg.grid.h, cfg.grid.steps, cfg.grid.tau)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let solver = cfg.solver.build(settings.tol)?;
    cfg.initial.validate(system.n(), 1)?;
    let integrator = Integrator1d::new(system, grid, cfg.tableaux.time.build()?, cfg.tableaux.space.build()?, solver)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let lengths = [grid.length()];
    let base = cfg
        .noise
        .to_spec::<f64>(1, &lengths)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let n = integrator.stepper().system().n();
    let initial = integrator
        .initial_state(|x| cfg.initial.eval(n, &[x], &lengths))
        .map_err(|e| CliError::Config(e.to_string()))?;
    ensure_dir(&settings.out)?;
    let seeds = settings.resolve_seeds(&cfg.seeds, cfg.noise.seed);
    let options = cfg.diagnostics.options();
    let pool = thread_pool()?;
    let results = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let started = Instant::now();
                let mut spec = base.clone();
                spec.seed = seed;
                let noise = integrator
                    .sample_noise(&spec)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                let result = integrator.run(&initial, &noise, &options);
                finish_run(
                    &settings.out,
                    &cfg.name,
                    seed,
                    grid.tau,
                    raw,
                    started,
                    result,
                    |w, r, f| write_1d_csv(w, r, f),
                    "max_invariant_rel_drift",
                )
            })
            .collect::<Vec<_>>()
    });
    collect(results)
}

pub fn maxwell_spec(cfg: &MaxwellConfig) -> Result<MaxwellSpec<f64>, CliError> {
    let lengths: Vec<f64> = cfg.grid.iter().zip(&cfg.dx).map(|(&c, &h)| c as f64 * h).collect();
    let noise = cfg
        .noise
        .to_spec::<f64>(3, &lengths)
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(MaxwellSpec {
        lambda: cfg.lambda,
        cells: cfg.grid,
        spacing: cfg.dx,
        tau: cfg.tau,
        steps: cfg.steps,
        tableaux: Tableaux {
            time: cfg.tableaux.time.build()?,
            space: vec![cfg.tableaux.x.build()?, cfg.tableaux.y.build()?, cfg.tableaux.z.build()?],
        },
        noise,
    })
}

/// Runs every requested realization of a Maxwell configuration.
pub fn run_maxwell(cfg: &MaxwellConfig, raw: &Value, settings: &RunSettings) -> Result<Vec<RunSummary>, CliError> {
    let spec = maxwell_spec(cfg)?;
    let solver = cfg.solver.build(settings.tol)?;
    cfg.initial.validate(6, 3)?;
    let lengths: Vec<f64> = cfg.grid.iter().zip(&cfg.dx).map(|(&c, &h)| c as f64 * h).collect();
    let model = Maxwell::new(spec.clone(), solver).map_err(|e| CliError::Config(e.to_string()))?;
    let initial = model
        .initial_state(|x| {
            let z = cfg.initial.eval(6, x, &lengths);
            [z[0], z[1], z[2], z[3], z[4], z[5]]
        })
        .map_err(|e| CliError::Config(e.to_string()))?;
    ensure_dir(&settings.out)?;
    let seeds = settings.resolve_seeds(&cfg.seeds, cfg.noise.seed);
    let options = cfg.diagnostics.options();
    let pool = thread_pool()?;
    let results = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let started = Instant::now();
                let mut noise_spec = spec.noise.clone();
                noise_spec.seed = seed;
                let noise = sample_path(&noise_spec, spec.steps, spec.tau, model.stepper().stage_points().to_vec())
                    .map_err(|e| CliError::Config(e.to_string()))?;
                let result = model.run(&initial, &noise, &options);
                finish_run(
                    &settings.out,
                    &cfg.name,
                    seed,
                    spec.tau,
                    raw,
                    started,
                    result,
                    |w, r, f| write_maxwell_csv(w, r, f),
                    "max_energy_rel_drift",
                )
            })
            .collect::<Vec<_>>()
    });
    collect(results)
}

/// Result of `sample-noise`.
#[derive(Clone, Debug)]
pub struct NoiseSummary {
    pub csv: PathBuf,
    pub seed: u64,
    pub steps: usize,
    pub stats: Vec<PointStats>,
}

/// Samples a path, writes `k,m,x,dW` rows and returns per-point statistics.
pub fn sample_noise(cfg: &NoiseConfig, raw: &Value, settings: &RunSettings) -> Result<NoiseSummary, CliError> {
    let dims = cfg.points.first().map_or(0, Vec::len);
    if dims == 0 || cfg.points.iter().any(|p| p.len() != dims) {
        return Err(CliError::Config("points must be non-empty and share a dimension".into()));
    }
    let mut spec = cfg
        .noise
        .to_spec::<f64>(dims, &[])
        .map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = settings.seed {
        spec.seed = s;
    }
    let started = Instant::now();
    let path = sample_path(&spec, cfg.steps, cfg.tau, cfg.points.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    ensure_dir(&settings.out)?;
    let csv = settings.out.join(format!("{}_seed{}.csv", cfg.name, spec.seed));
    let mut w = create(&csv)?;
    path.write_csv(&mut w)?;
    w.flush()?;
    let stats = if cfg.steps >= 2 {
        noise_statistics(&path, |m| cfg.tau * spec.covariance(&cfg.points[m], &cfg.points[m]))
    } else {
        Vec::new()
    };
    write_metadata(
        &settings.out.join(format!("{}_seed{}.json", cfg.name, spec.seed)),
        &json!({
            "config": raw,
            "seed": spec.seed,
            "status": "ok",
            "wall_time_seconds": started.elapsed().as_secs_f64(),
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;
    Ok(NoiseSummary {
        csv,
        seed: spec.seed,
        steps: cfg.steps,
        stats,
    })
}
