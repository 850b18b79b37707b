//! Stochastic multi-symplectic space-time Runge-Kutta methods for stochastic
//! Hamiltonian PDEs `K dz + Σ_d L_d z_{x_d} dt = ∇S1(z) dt + ∇S2(z) ∘ dW`.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar to `f64`.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::result_large_err)]

pub mod engine;
pub mod error;
pub mod format;
pub mod integrator1d;
pub mod linalg;
pub mod maxwell3d;
pub mod noise;
pub mod scalar;
pub mod system;
pub mod tableau;

pub use engine::{
    Grid, RunFailure, RunOptions, SolverConfig, SolverMethod, StageBlock, StepRecord, StepState, Stepper, Tableaux,
    TangentPair, Trajectory,
};
pub use error::{Error, Result};
pub use linalg::Mat;
pub use noise::{sample_path, Basis, NoisePath, QWienerSpec};
pub use scalar::Real;
pub use system::{make_quadratic_system, transport2, validate, QuadraticSpec, SystemSpec, Violation};
pub use tableau::{builtin_tableau, condition_residual, is_multisymplectic, Tableau};

pub type Tableau64 = Tableau<f64>;
pub type Mat64 = Mat<f64>;
pub type GridSpec64 = integrator1d::GridSpec<f64>;
pub type MaxwellSpec64 = maxwell3d::MaxwellSpec<f64>;
pub type SystemSpec64 = SystemSpec<f64>;
pub type QWienerSpec64 = QWienerSpec<f64>;
pub type NoisePath64 = NoisePath<f64>;
pub type Grid64 = Grid<f64>;
pub type StepState64 = StepState<f64>;
pub type Stepper64 = Stepper<f64>;



pub type Tableau32 = Tableau<f32>;
pub type SystemSpec32 = SystemSpec<f32>;
pub type Stepper32 = Stepper<f32>;
