//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mssrk::engine::{RunOptions, SolverConfig};
use mssrk::integrator1d::{midpoint_step, GridSpec, Integrator1d};
use mssrk::noise::{sample_path, Basis, QWienerSpec};
use mssrk::system::transport2;
use mssrk::tableau::{condition_residual, is_multisymplectic};
use mssrk::builtin_tableau;
use mssrk_cli::commands::{self, RunSettings, RunSummary};
use mssrk_cli::config::{self, MaxwellConfig, NoiseConfig, Run1dConfig};
use mssrk_cli::output::noise_statistics;

struct Outcome {
    pass: bool,
    detail: String,
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(", ")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn out_dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    std::fs::create_dir_all(&d).expect("create output directory");
    d
}

fn settings(dir: &Path) -> RunSettings {
    RunSettings {
        out: dir.to_path_buf(),
        ..RunSettings::default()
    }
}

fn load_1d(name: &str) -> (Run1dConfig, serde_json::Value) {
    config::load(&configs().join(name)).expect("1D config")
}

fn load_maxwell(name: &str) -> (MaxwellConfig, serde_json::Value) {
    config::load(&configs().join(name)).expect("Maxwell config")
}

fn noise_spec(seed: u64) -> QWienerSpec<f64> {
    QWienerSpec {
        eigenvalues: (1..=3).map(|j| 1.0 / (j * j) as f64).collect(),
        basis: Basis::Sine,
        domain: vec![1.0],
        seed,
    }
}

fn tableau_conditions() -> Outcome {
    let mut detail = Vec::new();
    let mut pass = true;
    for name in ["midpoint", "gauss2", "gauss3"] {
        let t = builtin_tableau::<f64>(name).unwrap();
        let r = condition_residual(&t).max_abs();
        pass &= is_multisymplectic(&t, 1e-12);
        detail.push(format!("{name} {r:.1e}"));
    }
    for name in ["euler_explicit", "rk4"] {
        let t = builtin_tableau::<f64>(name).unwrap();
        let r = condition_residual(&t).max_abs();
        pass &= !is_multisymplectic(&t, 1e-12) && r >= 1.0 / 36.0;
        detail.push(format!("{name} {r:.4}"));
    }
    let mut sink = Vec::new();
    pass &= commands::check_tableau("gauss3", 1e-12, &mut sink) == Ok(true);
    pass &= commands::check_tableau("euler_explicit", 1e-12, &mut sink) == Ok(false);
    Outcome {
        pass,
        detail: format!("max residuals: {}", detail.join(", ")),
    }
}

fn midpoint_equivalence() -> Outcome {
    let system = transport2(0.7, 0.4);
    let grid = GridSpec::new(16, 1.0 / 16.0, 50, 0.01).unwrap();
    let mid = builtin_tableau::<f64>("midpoint").unwrap();
    let it = Integrator1d::new(system.clone(), grid, mid.clone(), mid, SolverConfig::default()).unwrap();
    let noise = it.sample_noise(&noise_spec(17)).unwrap();
    let init = |x: f64| {
        let w = 2.0 * std::f64::consts::PI;
        vec![(w * x).sin() + 0.3, (2.0 * w * x).cos()]
    };
    let mut a = it.initial_state(init).unwrap();
    let mut b = a.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..grid.steps {
        a = it.step(&a, &noise).unwrap().0;
        b = midpoint_step(&system, &grid, &b, &noise, &SolverConfig::default()).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            worst = worst.max((x - y).abs());
        }
    }
    Outcome {
        pass: worst <= 1e-12,
        detail: format!("max |engine - midpoint box scheme| = {worst:.3e} (bound 1e-12)"),
    }
}

fn run_1d_config(name: &str, dir: &Path) -> Vec<RunSummary> {
    let (cfg, raw) = load_1d(name);
    commands::run_1d(&cfg, &raw, &settings(dir)).expect("1D run")
}

fn every_step_ms(summaries: &[RunSummary]) -> Vec<f64> {
    // Max over the ms_residual_max column, read back from the CSV files.
    summaries
        .iter()
        .map(|s| {
            let text = std::fs::read_to_string(&s.csv).unwrap();
            text.lines()
                .skip(2)
                .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
                .fold(0.0, f64::max)
        })
        .collect()
}

fn multisymplectic_1d() -> Outcome {
    let dir = out_dir("ms1d");
    let mut pass = true;
    let mut detail = Vec::new();
    for (cfg, bound) in [("transport2_midpoint.json", 1e-10), ("transport2_gauss2.json", 1e-9)] {
        let s = run_1d_config(cfg, &dir);
        let worst = every_step_ms(&s[..1])[0];
        pass &= worst <= bound && s[0].steps_completed == 100 && s[0].error.is_none();
        detail.push(format!("{cfg}: max |R| {worst:.3e} (bound {bound:.0e})"));
    }
    Outcome {
        pass,
        detail: detail.join("; "),
    }
}

fn negative_control() -> Outcome {
    let dir = out_dir("euler");
    let s = run_1d_config("transport2_euler.json", &dir);
    let text = std::fs::read_to_string(&s[0].csv).unwrap();
    let first: f64 = text.lines().nth(2).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    let worst = every_step_ms(&s[..1])[0];
    Outcome {
        pass: first > 1e-4 && worst > 1e-4,
        detail: format!("explicit Euler in time: |R| after step 1 {first:.3e}, max {worst:.3e} (must exceed 1e-4)"),
    }
}

fn quadratic_invariant() -> Outcome {
    let dir = out_dir("invariant");
    let s = run_1d_config("transport2_midpoint.json", &dir);
    let drifts: Vec<f64> = s.iter().map(|r| r.max_invariant_drift).collect();
    Outcome {
        pass: s.len() == 3 && drifts.iter().all(|&d| d <= 1e-10) && s.iter().all(|r| r.steps_completed == 100),
        detail: format!("relative drift per seed [{}] (bound 1e-10)", list(&drifts)),
    }
}

fn maxwell_energy() -> Outcome {
    let dir = out_dir("maxwell_energy");
    let (cfg, raw) = load_maxwell("maxwell_energy.json");
    let s = commands::run_maxwell(&cfg, &raw, &settings(&dir)).expect("Maxwell run");
    let drifts: Vec<f64> = s.iter().map(|r| r.max_invariant_drift).collect();
    Outcome {
        pass: s.len() == 5 && drifts.iter().all(|&d| d <= 1e-10) && s.iter().all(|r| r.steps_completed == 50),
        detail: format!("4^3 grid, 5 seeds, max relative energy drift [{}] (bound 1e-10)", list(&drifts)),
    }
}

fn maxwell_multisymplectic() -> Outcome {
    let dir = out_dir("maxwell_ms");
    let (cfg, raw) = load_maxwell("maxwell_ms.json");
    let s = commands::run_maxwell(&cfg, &raw, &settings(&dir)).expect("Maxwell run");
    let text = std::fs::read_to_string(&s[0].csv).unwrap();
    let worst = text
        .lines()
        .skip(2)
        .map(|l| l.split(',').nth(4).unwrap().parse::<f64>().unwrap())
        .fold(0.0, f64::max);
    Outcome {
        pass: worst <= 1e-9 && s[0].steps_completed == 20,
        detail: format!("2^3 grid, 20 steps, max per-cell |R| {worst:.3e} (bound 1e-9)"),
    }
}

fn noise_statistics_check() -> Outcome {
    let steps = 100_000;
    let tau = 0.01;
    let probes = vec![vec![0.25], vec![0.6]];
    let spec = noise_spec(2024);
    let path = sample_path(&spec, steps, tau, probes.clone()).unwrap();
    // τ Σ_j j^{-2} (√2 sin(jπx))²
    let expected = |m: usize| {
        let x: f64 = probes[m][0];
        tau * (1..=3)
            .map(|j| {
                let e = 2f64.sqrt() * (j as f64 * std::f64::consts::PI * x).sin();
                e * e / (j * j) as f64
            })
            .sum::<f64>()
    };
    let stats = noise_statistics(&path, expected);
    let pass = stats.iter().all(|s| s.variance_ok() && s.correlation_ok(steps));
    let detail: Vec<String> = stats
        .iter()
        .map(|s| {
            format!(
                "x={}: var {:.5e} vs {:.5e} (3 SE {:.1e}), lag-1 corr {:+.2e}",
                s.point[0],
                s.variance,
                s.expected_variance,
                3.0 * s.standard_error,
                s.lag1_correlation
            )
        })
        .collect();
    Outcome {
        pass,
        detail: format!("{} (corr bound {:.2e})", detail.join("; "), 3.0 / (steps as f64).sqrt()),
    }
}

fn determinism() -> Outcome {
    let mut pass = true;
    let mut compared = 0;
    let twice = |f: &dyn Fn(&Path) -> Vec<PathBuf>| -> bool {
        let a = f(&out_dir("determinism_a"));
        let b = f(&out_dir("determinism_b"));
        a.iter().zip(&b).all(|(x, y)| std::fs::read(x).unwrap() == std::fs::read(y).unwrap()) && a.len() == b.len()
    };
    let one_d = |d: &Path| -> Vec<PathBuf> { run_1d_config("transport2_gauss2.json", d).into_iter().map(|s| s.csv).collect() };
    let maxwell = |d: &Path| -> Vec<PathBuf> {
        let (cfg, raw) = load_maxwell("maxwell_ms.json");
        commands::run_maxwell(&cfg, &raw, &settings(d)).unwrap().into_iter().map(|s| s.csv).collect()
    };
    let noise = |d: &Path| -> Vec<PathBuf> {
        let (cfg, raw): (NoiseConfig, _) = config::load(&configs().join("noise_stats.json")).unwrap();
        vec![commands::sample_noise(&cfg, &raw, &settings(d)).unwrap().csv]
    };
    for f in [&one_d as &dyn Fn(&Path) -> Vec<PathBuf>, &maxwell, &noise] {
        pass &= twice(f);
        compared += 1;
    }
    // A larger Maxwell run on one seed, repeated in-process.
    let (cfg, raw) = load_maxwell("maxwell_energy.json");
    let single = RunSettings {
        seed: Some(3),
        ..settings(&out_dir("determinism_c"))
    };
    let a = commands::run_maxwell(&cfg, &raw, &single).unwrap();
    let first = std::fs::read(&a[0].csv).unwrap();
    let b = commands::run_maxwell(&cfg, &raw, &single).unwrap();
    pass &= first == std::fs::read(&b[0].csv).unwrap();
    compared += 1;
    // The trajectory itself, not just its text.
    let it = Integrator1d::new(
        transport2(0.7, 0.4),
        GridSpec::new(8, 0.125, 20, 0.01).unwrap(),
        builtin_tableau("gauss2").unwrap(),
        builtin_tableau("gauss2").unwrap(),
        SolverConfig::default(),
    )
    .unwrap();
    let noise = it.sample_noise(&noise_spec(5)).unwrap();
    let s0 = it.initial_state(|x| vec![x.sin(), x.cos()]).unwrap();
    let opts = RunOptions {
        ms_residual: true,
        tangent_seed: 2,
        snapshot_stride: 5,
    };
    pass &= it.run(&s0, &noise, &opts).unwrap() == it.run(&s0, &noise, &opts).unwrap();
    Outcome {
        pass,
        detail: format!("{compared} configurations rerun, CSV bytes identical; in-memory trajectory identical"),
    }
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(u32, &str, Check, Duration); 9] = [
        (1, "tableau conditions", tableau_conditions, Duration::from_secs(1)),
        (2, "midpoint equivalence", midpoint_equivalence, Duration::from_secs(10)),
        (3, "1D multi-symplectic conservation", multisymplectic_1d, Duration::from_secs(60)),
        (4, "explicit Euler negative control", negative_control, Duration::from_secs(60)),
        (5, "1D quadratic invariant", quadratic_invariant, Duration::from_secs(60)),
        (6, "Maxwell energy conservation", maxwell_energy, Duration::from_secs(300)),
        (7, "Maxwell multi-symplecticity", maxwell_multisymplectic, Duration::from_secs(300)),
        (8, "noise sampler statistics", noise_statistics_check, Duration::from_secs(30)),
        (9, "determinism", determinism, Duration::from_secs(600)),
    ];
    let mut failures = 0;
    for (id, name, check, budget) in criteria {
        let started = Instant::now();
        let outcome = check();
        let elapsed = started.elapsed();
        let in_time = elapsed <= budget;
        let pass = outcome.pass && in_time;
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {id} {}: {name}: {} [{:.2}s, budget {}s{}]",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
