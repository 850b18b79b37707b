//! The scheme in one spatial dimension, plus a stand-alone implicit midpoint
//! box scheme used as an independent reference for the one-stage case.

use crate::engine::{
    Grid, RunFailure, RunOptions, SolverConfig, StageBlock, StepState, Stepper, Tableaux, TangentPair, Trajectory,
};
use crate::error::{Error, Result};
use crate::linalg::{FullPivLu, Mat};
use crate::noise::{sample_path, NoisePath, QWienerSpec};
use crate::scalar::{max_abs, Real};
use crate::system::SystemSpec;
use crate::tableau::Tableau;

/// Periodic 1D grid: `cells` cells of width `h`, `steps` steps of length `tau`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec<T> {
    pub cells: usize,
    pub h: T,
    pub steps: usize,
    pub tau: T,
}

impl<T: Real> GridSpec<T> {
    pub fn new(cells: usize, h: T, steps: usize, tau: T) -> Result<Self> {
        if cells < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 cells, got {cells}")));
        }
        let g = Self { cells, h, steps, tau };
        g.grid()?;
        Ok(g)
    }

    pub fn length(&self) -> T {
        T::from_usize_lossy(self.cells) * self.h
    }

    pub fn grid(&self) -> Result<Grid<T>> {
        Grid::new(vec![self.cells], vec![self.h], self.tau)
    }
}

/// `uᵀ K v`, the value of `½ dz ∧ K dz` on the pair `(u, v)`.
pub fn wedge<T: Real>(u: &[T], v: &[T], k: &Mat<T>) -> T {
    k.bilinear(u, v)
}

/// A configured 1D integrator.
pub struct Integrator1d<T: Real> {
    stepper: Stepper<T>,
    grid: GridSpec<T>,
}

impl<T: Real> Integrator1d<T> {
    pub fn new(
        system: SystemSpec<T>,
        grid: GridSpec<T>,
        time: Tableau<T>,
        space: Tableau<T>,
        solver: SolverConfig<T>,
    ) -> Result<Self> {
        let tableaux = Tableaux {
            time,
            space: vec![space],
        };
        Ok(Self {
            stepper: Stepper::new(system, grid.grid()?, tableaux, solver)?,
            grid,
        })
    }

    pub fn stepper(&self) -> &Stepper<T> {
        &self.stepper
    }

    pub fn grid(&self) -> &GridSpec<T> {
        &self.grid
    }

    /// Line values `z(x_i + c_m h)` from initial data `z(x)`.
    pub fn initial_state(&self, f: impl Fn(T) -> Vec<T>) -> Result<StepState<T>> {
        self.stepper.initial_state(|x| f(x[0]))
    }

    /// Samples a noise path for all `steps` steps at the spatial stage points.
    pub fn sample_noise(&self, q: &QWienerSpec<T>) -> Result<NoisePath<T>> {
        sample_path(q, self.grid.steps, self.grid.tau, self.stepper.stage_points().to_vec())
    }

    pub fn zero_noise(&self) -> NoisePath<T> {
        NoisePath::zero(self.grid.steps, self.grid.tau, self.stepper.stage_points().to_vec())
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

    /// Per-cell `(ω^{p+1} − ω^p)/τ + (κ_{i+1} − κ_i)/h` for a tangent pair
    /// before and after one step.
    pub fn ms_residual(
        &self,
        before: &TangentPair<T>,
        after: &TangentPair<T>,
        u_block: &StageBlock<T>,
        v_block: &StageBlock<T>,
    ) -> Vec<T> {
        self.stepper.ms_residual(before, after, u_block, v_block)
    }

    /// `Σ_i Σ_m b̃_m |z_{m,i}|²`.
    pub fn quadratic_invariant(&self, state: &StepState<T>) -> T {
        self.stepper.quadratic_invariant(state)
    }

    pub fn run(
        &self,
        initial: &StepState<T>,
        noise: &NoisePath<T>,
        options: &RunOptions,
    ) -> std::result::Result<Trajectory<T>, RunFailure<T>> {
        self.stepper.run(initial, noise, self.grid.steps, options)
    }
}

/// One step of the implicit midpoint box scheme
///
/// ```text
/// K (z_{i+½}^{p+1} − z_{i+½}^p)/τ + L (z_{i+1}^{p+½} − z_i^{p+½})/h
///     = ∇S1(z_{i+½}^{p+½}) + ∇S2(z_{i+½}^{p+½}) ΔW_{i+½}/τ
/// ```
///
/// with cell averages `z_{i+½}^{p+½} = (z_{i+½}^p + z_{i+½}^{p+1})/2 = (z_i^{p+½} + z_{i+1}^{p+½})/2`,
/// solved by Newton's method on the cell values `z_{i+½}^{p+1}` and the
/// edge values `z_i^{p+½}`. `state` holds one `n`-vector per cell centre and
/// `noise` one increment per cell centre.
pub fn midpoint_step<T: Real>(
    system: &SystemSpec<T>,
    grid: &GridSpec<T>,
    state: &StepState<T>,
    noise: &NoisePath<T>,
    solver: &SolverConfig<T>,
) -> Result<StepState<T>> {
    let n = system.n();
    let cells = grid.cells;
    if system.dims() != 1 {
        return Err(Error::Dimension(format!("{} spatial directions, expected 1", system.dims())));
    }
    if state.values.len() != cells * n || noise.num_points() != cells {
        return Err(Error::Dimension("midpoint layout needs one value per cell centre".into()));
    }
    if state.level >= noise.steps() {
        return Err(Error::NoiseIndex {
            step: state.level,
            steps: noise.steps(),
            point: 0,
            points: noise.num_points(),
        });
    }
    let dw = noise.step_increments(state.level);
    let half = T::lit(0.5);
    let nu = grid.tau / grid.h;
    let l = &system.l[0];
    let zp = &state.values;
    let dim = 2 * cells * n;
    // Unknowns: [z^{p+1} per cell | edge values per cell].
    let mut x = vec![T::zero(); dim];
    x[..cells * n].copy_from_slice(zp);
    let avg = |x: &[T], i: usize, c: usize| (zp[i * n + c] + x[i * n + c]) * half;

    let residual = |x: &[T]| -> Vec<T> {
        let (znew, edge) = x.split_at(cells * n);
        let mut r = vec![T::zero(); dim];
        for i in 0..cells {
            let ip = (i + 1) % cells;
            let z: Vec<T> = (0..n).map(|c| avg(x, i, c)).collect();
            let g1 = system.grad_s1(&z);
            let g2 = system.grad_s2(&z);
            for c in 0..n {
                r[i * n + c] = z[c] - (edge[i * n + c] + edge[ip * n + c]) * half;
                let mut e = T::zero();
                for j in 0..n {
                    e = e + system.k[(c, j)] * (znew[i * n + j] - zp[i * n + j])
                        + nu * l[(c, j)] * (edge[ip * n + j] - edge[i * n + j]);
                }
                r[cells * n + i * n + c] = e - grid.tau * g1[c] - dw[i] * g2[c];
            }
        }
        r
    };

    let tol = solver.tol * T::one().max(max_abs(zp));
    let mut r = residual(&x);
    let mut iterations = 0;
    while max_abs(&r) > tol {
        if iterations >= solver.max_iter {
            return Err(Error::NoConvergence {
                iterations,
                residual: max_abs(&r).as_f64(),
            });
        }
        let mut jac = Mat::zeros(dim, dim);
        for i in 0..cells {
            let ip = (i + 1) % cells;
            let z: Vec<T> = (0..n).map(|c| avg(&x, i, c)).collect();
            let h1 = system.hess_s1(&z);
            let h2 = system.hess_s2(&z);
            for c in 0..n {
                let row = i * n + c;
                jac[(row, i * n + c)] = half;
                jac[(row, cells * n + i * n + c)] = jac[(row, cells * n + i * n + c)] - half;
                jac[(row, cells * n + ip * n + c)] = jac[(row, cells * n + ip * n + c)] - half;
                let row = cells * n + i * n + c;
                for j in 0..n {
                    jac[(row, i * n + j)] = system.k[(c, j)] - (grid.tau * h1[(c, j)] + dw[i] * h2[(c, j)]) * half;
                    jac[(row, cells * n + ip * n + j)] = jac[(row, cells * n + ip * n + j)] + nu * l[(c, j)];
                    jac[(row, cells * n + i * n + j)] = jac[(row, cells * n + i * n + j)] - nu * l[(c, j)];
                }
            }
        }
        let lu = FullPivLu::factor(jac, solver.rank_tol);
        let rhs: Vec<T> = r.iter().map(|&v| -v).collect();
        let dx = lu.solve(&rhs);
        for (xi, d) in x.iter_mut().zip(&dx) {
            *xi = *xi + *d;
        }
        iterations += 1;
        r = residual(&x);
        if !max_abs(&r).is_finite() {
            return Err(Error::NonFinite("midpoint residual".into()));
        }
    }
    Ok(StepState {
        values: x[..cells * n].to_vec(),
        level: state.level + 1,
    })
}
