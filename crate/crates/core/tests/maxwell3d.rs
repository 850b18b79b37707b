use mssrk::engine::{RunOptions, SolverConfig, StepState, Tableaux};
use mssrk::maxwell3d::{relative_drift, Maxwell, MaxwellSpec};
use mssrk::noise::{Basis, QWienerSpec};
use mssrk::scalar::max_abs;
use mssrk::builtin_tableau;

fn spec(cells: usize, lambda: f64, steps: usize, time: &str, space: &str, eta: Vec<f64>, seed: u64) -> MaxwellSpec<f64> {
    let s = builtin_tableau::<f64>(space).unwrap();
    MaxwellSpec {
        lambda,
        cells: [cells; 3],
        spacing: [1.0 / cells as f64; 3],
        tau: 0.01,
        steps,
        tableaux: Tableaux {
            time: builtin_tableau(time).unwrap(),
            space: vec![s.clone(), s.clone(), s],
        },
        noise: QWienerSpec {
            eigenvalues: eta,
            basis: Basis::Sine,
            domain: vec![1.0; 3],
            seed,
        },
    }
}

fn field(x: &[f64]) -> [f64; 6] {
    let w = 2.0 * std::f64::consts::PI;
    [
        (w * x[1]).sin(),
        (w * x[2]).cos() + 0.2,
        (w * x[0]).sin() * (w * x[1]).cos(),
        (w * x[2]).sin(),
        0.5 * (w * x[0]).cos(),
        (w * (x[0] + x[1] + x[2])).sin(),
    ]
}

fn energy_drift(m: &Maxwell<f64>) -> f64 {
    let noise = m.sample_noise().unwrap();
    let s0 = m.initial_state(field).unwrap();
    let tr = m.run(&s0, &noise, &RunOptions::default()).unwrap();
    let e0 = tr.records[0].invariant;
    tr.records.iter().map(|r| relative_drift(r.invariant, e0)).fold(0.0, f64::max)
}

#[test]
fn zero_field_stays_zero() {
    let m = Maxwell::new(spec(2, 0.0, 5, "midpoint", "midpoint", vec![0.0], 0), SolverConfig::default()).unwrap();
    let s0 = StepState::zeros(m.stepper().state_len());
    let tr = m.run(&s0, &m.sample_noise().unwrap(), &RunOptions::default()).unwrap();
    assert!(tr.final_state.values.iter().all(|&x| x == 0.0));
    assert!(tr.records.iter().all(|r| r.invariant == 0.0));
}

#[test]
fn energy_conserved_with_noise_on_even_grid() {
    let m = Maxwell::new(spec(4, 0.5, 10, "midpoint", "midpoint", vec![1.0, 0.25, 1.0 / 9.0], 7), SolverConfig::default()).unwrap();
    let d = energy_drift(&m);
    assert!(d <= 1e-12, "{d:e}");
}

#[test]
fn deterministic_energy_conserved() {
    let m = Maxwell::new(spec(3, 0.0, 10, "midpoint", "midpoint", vec![0.0], 0), SolverConfig::default()).unwrap();
    assert!(energy_drift(&m) <= 1e-12);
}

#[test]
fn multistage_energy_conserved() {
    let m = Maxwell::new(spec(2, 0.5, 3, "gauss2", "gauss2", vec![1.0, 0.5], 3), SolverConfig::default()).unwrap();
    let d = energy_drift(&m);
    assert!(d <= 1e-12, "{d:e}");
}

fn max_ms(m: &Maxwell<f64>, steps: usize) -> f64 {
    let noise = m.sample_noise().unwrap();
    let s0 = m.initial_state(field).unwrap();
    let tr = m
        .run(&s0, &noise, &RunOptions { ms_residual: true, tangent_seed: 12, snapshot_stride: 0 })
        .unwrap();
    assert_eq!(tr.records.len(), steps + 1);
    tr.records[1..].iter().map(|r| r.ms_residual_max.unwrap()).fold(0.0, f64::max)
}

#[test]
fn multisymplectic_residual_vanishes() {
    let m = Maxwell::new(spec(2, 0.5, 5, "midpoint", "midpoint", vec![1.0, 0.25], 1), SolverConfig::default()).unwrap();
    let r = max_ms(&m, 5);
    assert!(r <= 1e-9, "{r:e}");
}

#[test]
fn explicit_euler_breaks_multisymplecticity() {
    let m = Maxwell::new(spec(3, 0.5, 3, "euler_explicit", "midpoint", vec![1.0, 0.25], 1), SolverConfig::default()).unwrap();
    let r = max_ms(&m, 3);
    assert!(r > 1e-4, "{r:e}");
}

#[test]
fn post_hoc_stage_residual_within_tolerance() {
    let m = Maxwell::new(spec(2, 0.5, 1, "midpoint", "midpoint", vec![1.0], 4), SolverConfig::default()).unwrap();
    let noise = m.sample_noise().unwrap();
    let s0 = m.initial_state(field).unwrap();
    let (_, block) = m.step(&s0, &noise).unwrap();
    let r = m.stepper().stage_residual(&s0, &noise, &block).unwrap();
    assert!(r <= 1e-13 * max_abs(&s0.values).max(1.0));
}
