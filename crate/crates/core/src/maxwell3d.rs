//! Stochastic Maxwell equations with multiplicative noise in three periodic
//! dimensions,
//!
//! ```text
//! K dℰ + (L_1 ℰ_x + L_2 ℰ_y + L_3 ℰ_z) dt = λ ℰ ∘ dW,   ℰ = (H, E),
//! ```
//!
//! with `K = [[0, −I₃], [I₃, 0]]` and `L_i = diag(D_i, D_i)`.

use std::sync::Arc;

use crate::engine::{Grid, RunFailure, RunOptions, SolverConfig, StageBlock, StepState, Stepper, Tableaux, TangentPair, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::noise::{sample_path, NoisePath, QWienerSpec};
use crate::scalar::Real;
use crate::system::{QuadraticForm, SystemSpec};

fn curl_block<T: Real>(i: usize) -> Mat<T> {
    let rows: [[f64; 3]; 3] = match i {
        0 => [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
        1 => [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        _ => [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    };
    let mut m = Mat::zeros(6, 6);
    for r in 0..3 {
        for c in 0..3 {
            m[(r, c)] = T::lit(rows[r][c]);
            m[(r + 3, c + 3)] = T::lit(rows[r][c]);
        }
    }
    m
}

/// The `n = 6` system with `S1 = 0` and `S2 = (λ/2)|ℰ|²`.
pub fn maxwell_system<T: Real>(lambda: T) -> SystemSpec<T> {
    let mut k = Mat::zeros(6, 6);
    for i in 0..3 {
        k[(i, i + 3)] = -T::one();
        k[(i + 3, i)] = T::one();
    }
    SystemSpec::new(
        "maxwell",
        k,
        (0..3).map(curl_block).collect(),
        Arc::new(QuadraticForm { matrix: Mat::zeros(6, 6) }),
        Arc::new(QuadraticForm {
            matrix: Mat::scaled_identity(6, lambda),
        }),
    )
}

/// Full configuration of a Maxwell run.
#[derive(Clone, Debug)]
pub struct MaxwellSpec<T> {
    pub lambda: T,
    pub cells: [usize; 3],
    pub spacing: [T; 3],
    pub tau: T,
    pub steps: usize,
    /// Time tableau and one tableau per spatial direction.
    pub tableaux: Tableaux<T>,
    /// Noise over `[0, I_1 Δx] × [0, I_2 Δy] × [0, I_3 Δz]`.
    pub noise: QWienerSpec<T>,
}

/// A configured Maxwell integrator.
pub struct Maxwell<T: Real> {
    stepper: Stepper<T>,
    spec: MaxwellSpec<T>,
}

impl<T: Real> Maxwell<T> {
    pub fn new(spec: MaxwellSpec<T>, solver: SolverConfig<T>) -> Result<Self> {
        if spec.tableaux.space.len() != 3 {
            return Err(Error::Dimension(format!(
                "{} spatial tableaux, expected 3",
                spec.tableaux.space.len()
            )));
        }
        let grid = Grid::new(spec.cells.to_vec(), spec.spacing.to_vec(), spec.tau)?;
        let stepper = Stepper::new(maxwell_system(spec.lambda), grid, spec.tableaux.clone(), solver)?;
        Ok(Self { stepper, spec })
    }

    pub fn stepper(&self) -> &Stepper<T> {
        &self.stepper
    }

    pub fn spec(&self) -> &MaxwellSpec<T> {
        &self.spec
    }

    /// Stage values `ℰ(x)` at every cell's spatial stage points.
    pub fn initial_state(&self, f: impl Fn(&[T]) -> [T; 6]) -> Result<StepState<T>> {
        self.stepper.initial_state(|x| f(x).to_vec())
    }

    pub fn sample_noise(&self) -> Result<NoisePath<T>> {
        sample_path(&self.spec.noise, self.spec.steps, self.spec.tau, self.stepper.stage_points().to_vec())
    }

    pub fn step(&self, state: &StepState<T>, noise: &NoisePath<T>) -> Result<(StepState<T>, StageBlock<T>)> {
        self.stepper.step(state, noise)
    }

    pub fn tangent_step(
        &self,
        pair: &TangentPair<T>,
        primal: &StageBlock<T>,
        noise: &NoisePath<T>,
    ) -> Result<(TangentPair<T>, StageBlock<T>, StageBlock<T>)> {
        self.stepper.tangent_pair_step(pair, primal, noise)
    }

    /// `Σ_cells Σ_{m,p,l} b̃_m b̄_p b̂_l (|E|² + |H|²)`.
    pub fn discrete_energy(&self, state: &StepState<T>) -> T {
        self.stepper.quadratic_invariant(state)
    }

    /// Per-cell residual of the discrete multi-symplectic conservation law.
    pub fn ms_residual(
        &self,
        before: &TangentPair<T>,
        after: &TangentPair<T>,
        u_block: &StageBlock<T>,
        v_block: &StageBlock<T>,
    ) -> Vec<T> {
        self.stepper.ms_residual(before, after, u_block, v_block)
    }

    pub fn run(
        &self,
        initial: &StepState<T>,
        noise: &NoisePath<T>,
        options: &RunOptions,
    ) -> std::result::Result<Trajectory<T>, RunFailure<T>> {
        self.stepper.run(initial, noise, self.spec.steps, options)
    }
}

/// `|E_ρ − E_0| / |E_0|`, or the absolute change when `E_0 = 0`.
pub fn relative_drift<T: Real>(energy: T, initial: T) -> T {
    let d = (energy - initial).abs();
    if initial == T::zero() {
        d
    } else {
        d / initial.abs()
    }
}
