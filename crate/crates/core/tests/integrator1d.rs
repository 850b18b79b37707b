use std::sync::Arc;

use mssrk::engine::{RunOptions, SolverConfig, SolverMethod, StepState};
use mssrk::integrator1d::{midpoint_step, GridSpec, Integrator1d};
use mssrk::noise::{Basis, NoisePath, QWienerSpec};
use mssrk::scalar::max_abs;
use mssrk::system::{canonical_k, transport2, Quartic, QuadraticForm, SystemSpec};
use mssrk::{builtin_tableau, Mat};

fn noise_spec(length: f64, seed: u64) -> QWienerSpec<f64> {
    QWienerSpec {
        eigenvalues: vec![1.0, 0.25, 1.0 / 9.0],
        basis: Basis::Sine,
        domain: vec![length],
        seed,
    }
}

fn integrator(system: SystemSpec<f64>, time: &str, space: &str, cells: usize, steps: usize) -> Integrator1d<f64> {
    let g = GridSpec::new(cells, 1.0 / cells as f64, steps, 0.01).unwrap();
    Integrator1d::new(
        system,
        g,
        builtin_tableau(time).unwrap(),
        builtin_tableau(space).unwrap(),
        SolverConfig::default(),
    )
    .unwrap()
}

fn smooth(x: f64) -> Vec<f64> {
    let w = 2.0 * std::f64::consts::PI;
    vec![(w * x).sin() + 0.3, 0.5 * (2.0 * w * x).cos()]
}

#[test]
fn one_stage_engine_matches_midpoint_box_scheme() {
    let sys = transport2(0.7, 0.4);
    let it = integrator(sys.clone(), "midpoint", "midpoint", 16, 50);
    let noise = it.sample_noise(&noise_spec(1.0, 11)).unwrap();
    let mut a = it.initial_state(smooth).unwrap();
    let mut b = a.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        a = it.step(&a, &noise).unwrap().0;
        b = midpoint_step(&sys, it.grid(), &b, &noise, &SolverConfig::default()).unwrap();
        let d = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    assert!(worst <= 1e-12, "max difference {worst:e}");
}

/// Fourier symbol of the deterministic free box scheme: each mode of
/// `z_t = z_x` is multiplied by `(1 + iν tan(θ/2)) / (1 − iν tan(θ/2))`.
#[test]
fn free_box_scheme_matches_fourier_amplification() {
    use num_complex::Complex64;
    let cells = 12;
    let it = integrator(transport2(0.0, 0.0), "midpoint", "midpoint", cells, 1);
    let h = 1.0 / cells as f64;
    let nu = 0.01 / h;
    let mode = 3.0;
    let init = |x: f64| {
        let th = 2.0 * std::f64::consts::PI * mode * x;
        vec![th.cos(), th.sin()]
    };
    let s0 = it.initial_state(init).unwrap();
    let s1 = it.step(&s0, &it.zero_noise()).unwrap().0;
    let theta = 2.0 * std::f64::consts::PI * mode * h;
    let t = (theta / 2.0).tan();
    let g = Complex64::new(1.0, nu * t) / Complex64::new(1.0, -nu * t);
    for i in 0..cells {
        let x = (i as f64 + 0.5) * h;
        let e = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * mode * x) * g;
        for (c, want) in [e.re, e.im].into_iter().enumerate() {
            assert!((s1.values[i * 2 + c] - want).abs() < 1e-13);
        }
    }
}

fn max_ms_residual(it: &Integrator1d<f64>, noise: &NoisePath<f64>, steps: usize) -> f64 {
    let mut s = it.initial_state(smooth).unwrap();
    let mut pair = it.stepper().random_tangent_pair(99);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let (next, block) = it.step(&s, noise).unwrap();
        let (after, ub, vb) = it.tangent_step(&pair, &block, noise).unwrap();
        worst = worst.max(max_abs(&it.ms_residual(&pair, &after, &ub, &vb)));
        s = next;
        pair = after;
    }
    worst
}

#[test]
fn multisymplectic_residual_vanishes_for_symplectic_tableaux() {
    for (space, bound) in [("midpoint", 1e-10), ("gauss2", 1e-9)] {
        let it = integrator(transport2(0.7, 0.4), space, space, 32, 10);
        let noise = it.sample_noise(&noise_spec(1.0, 5)).unwrap();
        let r = max_ms_residual(&it, &noise, 10);
        assert!(r <= bound, "{space}: {r:e}");
    }
}

#[test]
fn explicit_euler_breaks_the_conservation_law() {
    // Odd cell count: with an explicit time tableau the midpoint edge recursion
    // has no periodic solution on even grids.
    let it = integrator(transport2(0.7, 0.4), "euler_explicit", "midpoint", 33, 5);
    let noise = it.sample_noise(&noise_spec(1.0, 5)).unwrap();
    let r = max_ms_residual(&it, &noise, 5);
    assert!(r > 1e-4, "{r:e}");
}

#[test]
fn quadratic_invariant_is_conserved_per_path() {
    for space in ["midpoint", "gauss2"] {
        let it = integrator(transport2(0.7, 0.4), space, space, 16, 40);
        let noise = it.sample_noise(&noise_spec(1.0, 3)).unwrap();
        let s0 = it.initial_state(smooth).unwrap();
        let tr = it.run(&s0, &noise, &RunOptions::default()).unwrap();
        let q0 = tr.records[0].invariant;
        let drift = tr.records.iter().map(|r| ((r.invariant - q0) / q0).abs()).fold(0.0, f64::max);
        assert!(drift <= 1e-12, "{space}: {drift:e}");
    }
}

#[test]
fn gauss3_tableaux_run() {
    let it = integrator(transport2(0.2, 0.3), "gauss3", "gauss3", 6, 3);
    let noise = it.sample_noise(&noise_spec(1.0, 8)).unwrap();
    let s0 = it.initial_state(smooth).unwrap();
    let tr = it.run(&s0, &noise, &RunOptions { ms_residual: true, tangent_seed: 1, snapshot_stride: 0 }).unwrap();
    for r in &tr.records[1..] {
        assert!(r.ms_residual_max.unwrap() <= 1e-9);
    }
}

#[test]
fn linear_tangent_equals_difference_of_steps() {
    let it = integrator(transport2(0.7, 0.4), "gauss2", "gauss2", 8, 1);
    let noise = it.sample_noise(&noise_spec(1.0, 21)).unwrap();
    let s0 = it.initial_state(smooth).unwrap();
    let pair = it.stepper().random_tangent_pair(4);
    let (s1, block) = it.step(&s0, &noise).unwrap();
    let shifted = StepState {
        values: s0.values.iter().zip(&pair.u.values).map(|(a, b)| a + b).collect(),
        level: 0,
    };
    let s1u = it.step(&shifted, &noise).unwrap().0;
    let (after, _, _) = it.tangent_step(&pair, &block, &noise).unwrap();
    for i in 0..s1.values.len() {
        assert!((after.u.values[i] - (s1u.values[i] - s1.values[i])).abs() < 1e-12);
    }
}

fn quartic_system() -> SystemSpec<f64> {
    let k = canonical_k::<f64>();
    let l = k.scaled(-1.0);
    SystemSpec::new(
        "quartic",
        k,
        vec![l],
        Arc::new(Quartic { coefficient: 1.0 }),
        Arc::new(QuadraticForm { matrix: Mat::scaled_identity(2, 0.3) }),
    )
}

#[test]
fn nonlinear_tangent_matches_finite_difference() {
    let it = integrator(quartic_system(), "gauss2", "gauss2", 8, 1);
    let noise = it.sample_noise(&noise_spec(1.0, 2)).unwrap();
    let s0 = it.initial_state(smooth).unwrap();
    let pair = it.stepper().random_tangent_pair(17);
    let (s1, block) = it.step(&s0, &noise).unwrap();
    assert!(block.iterations > 1);
    let eps = 1e-6;
    let shifted = StepState {
        values: s0.values.iter().zip(&pair.u.values).map(|(a, b)| a + eps * b).collect(),
        level: 0,
    };
    let s1e = it.step(&shifted, &noise).unwrap().0;
    let (after, _, _) = it.tangent_step(&pair, &block, &noise).unwrap();
    let err = (0..s1.values.len())
        .map(|i| (after.u.values[i] - (s1e.values[i] - s1.values[i]) / eps).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-5, "{err:e}");
}

#[test]
fn tangent_is_linear() {
    let it = integrator(quartic_system(), "midpoint", "gauss2", 6, 1);
    let noise = it.sample_noise(&noise_spec(1.0, 2)).unwrap();
    let s0 = it.initial_state(smooth).unwrap();
    let (_, block) = it.step(&s0, &noise).unwrap();
    let p = it.stepper().random_tangent_pair(5);
    let (a, _, _) = it.tangent_step(&p, &block, &noise).unwrap();
    let scaled = mssrk::TangentPair {
        u: StepState { values: p.u.values.iter().map(|x| -2.5 * x).collect(), level: 0 },
        v: StepState { values: vec![0.0; p.v.values.len()], level: 0 },
    };
    let (b, _, _) = it.tangent_step(&scaled, &block, &noise).unwrap();
    for i in 0..a.u.values.len() {
        assert!((b.u.values[i] + 2.5 * a.u.values[i]).abs() < 1e-12);
        assert!(b.v.values[i].abs() < 1e-15);
    }
}

#[test]
fn fixed_point_and_newton_agree() {
    let sys = quartic_system();
    let g = GridSpec::new(8, 0.125, 3, 0.01).unwrap();
    let make = |method| {
        Integrator1d::new(
            sys.clone(),
            g,
            builtin_tableau("gauss2").unwrap(),
            builtin_tableau("midpoint").unwrap(),
            SolverConfig { method, ..SolverConfig::default() },
        )
        .unwrap()
    };
    let newton = make(SolverMethod::Newton);
    let picard = make(SolverMethod::FixedPoint);
    let noise = newton.sample_noise(&noise_spec(1.0, 9)).unwrap();
    let s0 = newton.initial_state(smooth).unwrap();
    let a = newton.run(&s0, &noise, &RunOptions::default()).unwrap();
    let b = picard.run(&s0, &noise, &RunOptions::default()).unwrap();
    for (x, y) in a.final_state.values.iter().zip(&b.final_state.values) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn runs_are_bit_identical() {
    let it = integrator(transport2(0.7, 0.4), "gauss2", "midpoint", 8, 5);
    let noise = it.sample_noise(&noise_spec(1.0, 42)).unwrap();
    let s0 = it.initial_state(smooth).unwrap();
    let opts = RunOptions { ms_residual: true, tangent_seed: 3, snapshot_stride: 2 };
    let a = it.run(&s0, &noise, &opts).unwrap();
    let b = it.run(&s0, &it.sample_noise(&noise_spec(1.0, 42)).unwrap(), &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.snapshots.len(), 3);
}

#[test]
fn divergent_nonlinear_run_reports_partial_record() {
    let k = canonical_k::<f64>();
    let sys = SystemSpec::new(
        "stiff",
        k.clone(),
        vec![k.scaled(-1.0)],
        Arc::new(Quartic { coefficient: 1e6 }),
        Arc::new(QuadraticForm { matrix: Mat::zeros(2, 2) }),
    );
    let g = GridSpec::new(4, 0.25, 5, 0.5).unwrap();
    let it = Integrator1d::new(
        sys,
        g,
        builtin_tableau("midpoint").unwrap(),
        builtin_tableau("midpoint").unwrap(),
        SolverConfig { max_iter: 3, method: SolverMethod::FixedPoint, ..SolverConfig::default() },
    )
    .unwrap();
    let s0 = it.initial_state(|x| vec![10.0 + x, -10.0]).unwrap();
    let err = it.run(&s0, &it.zero_noise(), &RunOptions::default()).unwrap_err();
    assert_eq!(err.partial.records.len(), 1);
    assert!(matches!(err.error, mssrk::Error::NoConvergence { .. } | mssrk::Error::NonFinite(_)));
}
