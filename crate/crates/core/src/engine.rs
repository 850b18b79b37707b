//! Space-time stochastic Runge-Kutta scheme on a periodic grid in any number
//! of spatial dimensions.
//!
//! Per cell and per stage tuple `(μ, k)` (spatial stages `μ = (m_1, …, m_M)`,
//! temporal stage `k`) the unknowns are the discrete derivatives `δ_t Z` and
//! `δ_d Z`; per cell and direction `d` the unknowns are the stage values on
//! the cell's lower face in that direction. The relations solved are
//!
//! ```text
//! Z_{μk}   = z_μ^p + τ Σ_j a_kj δ_t Z_{μj}
//! Z_{μk}   = F_d + h_d Σ_n ã_{m_d n} δ_d Z_{μ[m_d←n] k}        for each d
//! F_d(c+e_d) = F_d(c) + h_d Σ_m b̃_m δ_d Z_{μ[m_d←m] k}        for each d
//! τ K δ_t Z + τ Σ_d L_d δ_d Z = τ ∇S1(Z) + ∇S2(Z) ΔW_μ
//! ```
//!
//! and the line values advance with `z_μ^{p+1} = z_μ^p + τ Σ_k b_k δ_t Z_{μk}`.
//!
//! The spatial relations are imposed on the range of `L_d` only. Components in
//! `ker L_d` never enter the PDE through `L_d δ_d Z`; on periodic grids with an
//! even cell count they make the full relations singular and, for generic
//! data, inconsistent. Whenever the unprojected system is solvable both give
//! the same line values, and the conservation laws only involve the
//! projected parts.
//!
//! The implicit system is solved by Newton's method (exact in one iteration
//! for quadratic Hamiltonians) or by a fixed-point iteration that freezes the
//! Hamiltonian source and reuses one factorization of the source-free
//! operator. Each linear solve eliminates the cell-local unknowns and solves
//! the remaining face system with a rank-revealing LU.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::linalg::{FullPivLu, Lu, Mat};
use crate::noise::NoisePath;
use crate::scalar::{max_abs, Real};
use crate::system::{validate, SystemSpec};
use crate::tableau::Tableau;

/// Periodic tensor-product grid with a fixed time step.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    cells: Vec<usize>,
    spacing: Vec<T>,
    tau: T,
}

impl<T: Real> Grid<T> {
    pub fn new(cells: Vec<usize>, spacing: Vec<T>, tau: T) -> Result<Self> {
        if cells.is_empty() || cells.len() != spacing.len() {
            return Err(Error::InvalidGrid(format!(
                "{} cell counts for {} spacings",
                cells.len(),
                spacing.len()
            )));
        }
        if cells.contains(&0) {
            return Err(Error::InvalidGrid("every direction needs at least one cell".into()));
        }
        if spacing.iter().any(|&h| !(h > T::zero()) || !h.is_finite()) {
            return Err(Error::InvalidGrid("spatial steps must be positive".into()));
        }
        if !(tau > T::zero()) || !tau.is_finite() {
            return Err(Error::InvalidGrid("time step must be positive".into()));
        }
        Ok(Self {
            cells,
            spacing,
            tau,
        })
    }

    pub fn dims(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn spacing(&self) -> &[T] {
        &self.spacing
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn num_cells(&self) -> usize {
        self.cells.iter().product()
    }

    /// Domain length along each axis.
    pub fn lengths(&self) -> Vec<T> {
        self.cells
            .iter()
            .zip(&self.spacing)
            .map(|(&c, &h)| T::from_usize_lossy(c) * h)
            .collect()
    }

    /// Multi-index of a cell; direction 0 varies fastest.
    pub fn cell_index(&self, mut c: usize) -> Vec<usize> {
        self.cells
            .iter()
            .map(|&n| {
                let i = c % n;
                c /= n;
                i
            })
            .collect()
    }

    /// Periodic neighbour in the positive `d` direction.
    pub fn neighbor(&self, c: usize, d: usize) -> usize {
        let stride: usize = self.cells[..d].iter().product();
        let i = (c / stride) % self.cells[d];
        if i + 1 == self.cells[d] {
            c - i * stride
        } else {
            c + stride
        }
    }
}

/// Temporal tableau plus one tableau per spatial direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Tableaux<T> {
    pub time: Tableau<T>,
    pub space: Vec<Tableau<T>>,
}

impl<T: Real> Tableaux<T> {
    /// Product of the spatial weights `Π_d b̃^{(d)}_{m_d}` for every stage tuple.
    pub fn spatial_weights(&self) -> Vec<T> {
        let shape: Vec<usize> = self.space.iter().map(Tableau::stages).collect();
        tuples(&shape)
            .iter()
            .map(|mu| {
                mu.iter()
                    .zip(&self.space)
                    .map(|(&m, t)| t.b()[m])
                    .fold(T::one(), |a, b| a * b)
            })
            .collect()
    }
}

/// All multi-indices below `shape`, first index fastest.
fn tuples(shape: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = shape.iter().product();
    (0..total)
        .map(|mut x| {
            shape
                .iter()
                .map(|&s| {
                    let i = x % s;
                    x /= s;
                    i
                })
                .collect()
        })
        .collect()
}

/// Line values `z_μ^p` for every cell and spatial stage tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct StepState<T> {
    /// Layout `[cell][μ][component]`.
    pub values: Vec<T>,
    pub level: usize,
}

impl<T: Real> StepState<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![T::zero(); len],
            level: 0,
        }
    }

    pub fn max_abs(&self) -> T {
        max_abs(&self.values)
    }
}

/// Converged stage data of one step.
#[derive(Clone, Debug)]
pub struct StageBlock<T> {
    /// `Z_{μk}`, layout `[cell][μ][k][component]`.
    pub stages: Vec<T>,
    /// `δ_t Z_{μk}`, same layout as `stages`.
    pub dt: Vec<T>,
    /// `δ_d Z_{μk}` per direction (range part of `L_d`), same layout as `stages`.
    pub dspace: Vec<Vec<T>>,
    /// Lower-face stage values per direction, layout `[cell][transverse tuple][k][component]`.
    pub faces: Vec<Vec<T>>,
    pub noise_step: usize,
    pub iterations: usize,
    /// Max-norm residual of the stage relations at exit.
    pub residual: T,
    local: Vec<T>,
    face: Vec<T>,
}

/// Two tangent fields propagated by the linearised scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentPair<T> {
    pub u: StepState<T>,
    pub v: StepState<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverMethod {
    Newton,
    /// Freeze the Hamiltonian source at the current iterate; one factorization
    /// of the source-free operator serves every iteration of every step.
    FixedPoint,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverConfig<T> {
    /// Convergence threshold on the max-norm residual of the stage relations,
    /// scaled by `max(1, ‖z^p‖∞)`.
    pub tol: T,
    pub max_iter: usize,
    pub method: SolverMethod,
    /// Relative pivot threshold below which the face system is treated as
    /// rank deficient.
    pub rank_tol: T,
}

impl<T: Real> Default for SolverConfig<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-13),
            max_iter: 500,
            method: SolverMethod::Newton,
            rank_tol: T::epsilon().powf(T::lit(0.7)),
        }
    }
}

/// Diagnostics collected by [`Stepper::run`].
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Propagate a random tangent pair and record the max per-cell
    /// multi-symplectic residual of every step.
    pub ms_residual: bool,
    pub tangent_seed: u64,
    /// Keep every `snapshot_stride`-th state (0: none).
    pub snapshot_stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord<T> {
    pub step: usize,
    pub time: T,
    pub invariant: T,
    /// `None` for the initial row or when not requested.
    pub ms_residual_max: Option<T>,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub records: Vec<StepRecord<T>>,
    pub snapshots: Vec<StepState<T>>,
    pub final_state: StepState<T>,
}

/// Error raised mid-run, with everything recorded before it.
#[derive(Debug)]
pub struct RunFailure<T> {
    pub partial: Trajectory<T>,
    pub error: Error,
}

impl<T> std::fmt::Display for RunFailure<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} rows)", self.error, self.partial.records.len())
    }
}

impl<T: std::fmt::Debug> std::error::Error for RunFailure<T> {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Index bookkeeping for the unknowns of one cell.
#[derive(Clone, Debug)]
struct Layout {
    n: usize,
    r: usize,
    dims: usize,
    s: Vec<usize>,
    stages: usize,
    range: Vec<usize>,
    /// Unknowns (and equations) per `(μ, k)` block.
    block: usize,
    /// Offset of `δ_d` within a block; equations `(c_d)` use `ceq_off`.
    delta_off: Vec<usize>,
    ceq_off: Vec<usize>,
    e_off: usize,
    local: usize,
    face_off: Vec<usize>,
    faces: usize,
    trans_count: Vec<usize>,
    /// `[d][μ] -> t`.
    transverse: Vec<Vec<usize>>,
    /// `[d][t][m] -> μ`.
    from_transverse: Vec<Vec<Vec<usize>>>,
    tuples: Vec<Vec<usize>>,
}

impl Layout {
    fn new(n: usize, r: usize, s: Vec<usize>, range: Vec<usize>) -> Self {
        let dims = s.len();
        let stages: usize = s.iter().product();
        let tuples = tuples(&s);
        let mut delta_off = Vec::with_capacity(dims);
        let mut ceq_off = Vec::with_capacity(dims);
        let mut acc = 0;
        for &rd in &range {
            delta_off.push(n + acc);
            ceq_off.push(acc);
            acc += rd;
        }
        let block = n + acc;
        let e_off = acc;
        let trans_count: Vec<usize> = s.iter().map(|&sd| stages / sd).collect();
        let mut face_off = Vec::with_capacity(dims);
        let mut faces = 0;
        for d in 0..dims {
            face_off.push(faces);
            faces += range[d] * r * trans_count[d];
        }
        let mut transverse = vec![vec![0; stages]; dims];
        let mut from_transverse = Vec::with_capacity(dims);
        for d in 0..dims {
            let mut ft = vec![vec![0; s[d]]; trans_count[d]];
            for (mu, tup) in tuples.iter().enumerate() {
                let mut t = 0;
                let mut stride = 1;
                for (e, &me) in tup.iter().enumerate() {
                    if e != d {
                        t += me * stride;
                        stride *= s[e];
                    }
                }
                transverse[d][mu] = t;
                ft[t][tup[d]] = mu;
            }
            from_transverse.push(ft);
        }
        Self {
            n,
            r,
            dims,
            s,
            stages,
            range,
            block,
            delta_off,
            ceq_off,
            e_off,
            local: stages * r * block,
            face_off,
            faces,
            trans_count,
            transverse,
            from_transverse,
            tuples,
        }
    }

    #[inline]
    fn blk(&self, mu: usize, k: usize) -> usize {
        (mu * self.r + k) * self.block
    }

    #[inline]
    fn face(&self, d: usize, t: usize, k: usize) -> usize {
        self.face_off[d] + (t * self.r + k) * self.range[d]
    }

    /// `μ` with its `d` component replaced by `m`.
    #[inline]
    fn replace(&self, d: usize, mu: usize, m: usize) -> usize {
        self.from_transverse[d][self.transverse[d][mu]][m]
    }
}

/// Per-step factorization of the stage Jacobian.
struct Factor<T> {
    local: Vec<Lu<T>>,
    /// `A_c⁻¹ B_c` for every cell.
    ab: Vec<Mat<T>>,
    schur: FullPivLu<T>,
}

/// Integrator for one system, grid and tableau set.
pub struct Stepper<T: Real> {
    system: SystemSpec<T>,
    grid: Grid<T>,
    tableaux: Tableaux<T>,
    solver: SolverConfig<T>,
    layout: Layout,
    /// Orthonormal basis of `range L_d` (columns), its transpose, and `L_d Q_d`.
    q: Vec<Mat<T>>,
    qt: Vec<Mat<T>>,
    lq: Vec<Mat<T>>,
    neighbors: Vec<Vec<usize>>,
    points: Vec<Vec<T>>,
    free_factor: OnceLock<Factor<T>>,
}

/// Source term of the stage equation for one stage tuple; writes
/// `τ ∇S1(Z) + ΔW ∇S2(Z)` (or its linearisation) into `out`.
trait Source<T> {
    fn eval(&self, cell: usize, mu: usize, k: usize, z: &[T], out: &mut [T]);
}

struct Nonlinear<'a, T: Real> {
    system: &'a SystemSpec<T>,
    tau: T,
    dw: &'a [T],
    stages: usize,
}

impl<T: Real> Source<T> for Nonlinear<'_, T> {
    fn eval(&self, cell: usize, mu: usize, _k: usize, z: &[T], out: &mut [T]) {
        let n = z.len();
        let w = self.dw[cell * self.stages + mu];
        let mut g = vec![T::zero(); n];
        self.system.s1.gradient(z, &mut g);
        for i in 0..n {
            out[i] = self.tau * g[i];
        }
        self.system.s2.gradient(z, &mut g);
        for i in 0..n {
            out[i] = out[i] + w * g[i];
        }
    }
}

/// `(τ D²S1(Z*) + ΔW D²S2(Z*)) dZ` with Hessians frozen at a primal solution.
struct Linearized<'a, T> {
    hessians: &'a [Mat<T>],
    r: usize,
    stages: usize,
}

impl<T: Real> Source<T> for Linearized<'_, T> {
    fn eval(&self, cell: usize, mu: usize, k: usize, dz: &[T], out: &mut [T]) {
        let h = &self.hessians[(cell * self.stages + mu) * self.r + k];
        out.iter_mut().for_each(|x| *x = T::zero());
        h.mul_add_vec(dz, out);
    }
}

struct Residual<T> {
    local: Vec<T>,
    face: Vec<T>,
    stages: Vec<T>,
}

impl<T: Real> Residual<T> {
    fn max_abs(&self) -> T {
        max_abs(&self.local).max(max_abs(&self.face))
    }
}

impl<T: Real> Stepper<T> {
    pub fn new(
        system: SystemSpec<T>,
        grid: Grid<T>,
        tableaux: Tableaux<T>,
        solver: SolverConfig<T>,
    ) -> Result<Self> {
        let violations = validate(&system);
        if !violations.is_empty() {
            let text: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(Error::InvalidSystem(text.join("; ")));
        }
        if system.dims() != grid.dims() || tableaux.space.len() != grid.dims() {
            return Err(Error::Dimension(format!(
                "system has {} spatial dimensions, grid {}, spatial tableaux {}",
                system.dims(),
                grid.dims(),
                tableaux.space.len()
            )));
        }
        let n = system.n();
        let rank_floor = T::epsilon().sqrt();
        let q: Vec<Mat<T>> = system.l.iter().map(|l| l.range_basis(rank_floor)).collect();
        let qt: Vec<Mat<T>> = q.iter().map(Mat::transpose).collect();
        let lq: Vec<Mat<T>> = system.l.iter().zip(&q).map(|(l, q)| l.matmul(q)).collect();
        let layout = Layout::new(
            n,
            tableaux.time.stages(),
            tableaux.space.iter().map(Tableau::stages).collect(),
            q.iter().map(Mat::cols).collect(),
        );
        let neighbors = (0..grid.num_cells())
            .map(|c| (0..grid.dims()).map(|d| grid.neighbor(c, d)).collect())
            .collect();
        let points = stage_points(&grid, &tableaux);
        Ok(Self {
            system,
            grid,
            tableaux,
            solver,
            layout,
            q,
            qt,
            lq,
            neighbors,
            points,
            free_factor: OnceLock::new(),
        })
    }

    pub fn system(&self) -> &SystemSpec<T> {
        &self.system
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn tableaux(&self) -> &Tableaux<T> {
        &self.tableaux
    }

    pub fn solver(&self) -> &SolverConfig<T> {
        &self.solver
    }

    /// Spatial evaluation points `x_c + c_μ h`, ordered `[cell][μ]`; the noise
    /// path of a run must be sampled at exactly these points.
    pub fn stage_points(&self) -> &[Vec<T>] {
        &self.points
    }

    /// Length of a [`StepState`] value vector.
    pub fn state_len(&self) -> usize {
        self.grid.num_cells() * self.layout.stages * self.layout.n
    }

    /// Evaluates `f` at every stage point.
    pub fn initial_state(&self, f: impl Fn(&[T]) -> Vec<T>) -> Result<StepState<T>> {
        let n = self.layout.n;
        let mut values = Vec::with_capacity(self.state_len());
        for p in &self.points {
            let z = f(p);
            if z.len() != n {
                return Err(Error::Dimension(format!(
                    "initial data returned {} components, expected {n}",
                    z.len()
                )));
            }
            values.extend(z);
        }
        Ok(StepState { values, level: 0 })
    }

    /// Rank of the source-free stage operator's face system, and its dimension.
    pub fn free_face_rank(&self) -> Result<(usize, usize)> {
        let f = self.free_factor()?;
        Ok((f.schur.rank(), f.schur.dim()))
    }

    fn check_state(&self, s: &StepState<T>) -> Result<()> {
        if s.values.len() != self.state_len() {
            return Err(Error::Dimension(format!(
                "state has {} values, layout needs {}",
                s.values.len(),
                self.state_len()
            )));
        }
        Ok(())
    }

    fn check_noise(&self, noise: &NoisePath<T>, step: usize) -> Result<()> {
        if noise.num_points() != self.points.len() {
            return Err(Error::Dimension(format!(
                "noise sampled at {} points, scheme needs {}",
                noise.num_points(),
                self.points.len()
            )));
        }
        if step >= noise.steps() {
            return Err(Error::NoiseIndex {
                step,
                steps: noise.steps(),
                point: 0,
                points: noise.num_points(),
            });
        }
        let h = self.grid.spacing().iter().copied().fold(T::zero(), T::max);
        let tol = h * T::lit(1e-9);
        for (a, b) in noise.points().iter().zip(&self.points) {
            if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| (x - y).abs() > tol) {
                return Err(Error::Dimension(
                    "noise points do not match the spatial stage abscissae".into(),
                ));
            }
        }
        Ok(())
    }

    /// Advances the line values by one step.
    pub fn step(&self, state: &StepState<T>, noise: &NoisePath<T>) -> Result<(StepState<T>, StageBlock<T>)> {
        self.check_state(state)?;
        self.check_noise(noise, state.level)?;
        let dw = noise.step_increments(state.level);
        let lay = &self.layout;
        let cells = self.grid.num_cells();
        let mut local = vec![T::zero(); cells * lay.local];
        let mut face = vec![T::zero(); cells * lay.faces];
        let source = Nonlinear {
            system: &self.system,
            tau: self.grid.tau,
            dw,
            stages: lay.stages,
        };
        let tol = self.solver.tol * T::one().max(state.max_abs());
        let linear = self.system.is_linear();

        let mut newton: Option<Factor<T>> = None;
        let mut iterations = 0;
        let mut res = self.residual(&state.values, &local, &face, &source);
        let mut rnorm = res.max_abs();
        let mut prev = T::infinity();
        loop {
            if !rnorm.is_finite() {
                return Err(Error::NonFinite(format!("stage residual at step {}", state.level)));
            }
            if rnorm <= tol {
                break;
            }
            if iterations >= self.solver.max_iter {
                return Err(Error::NoConvergence {
                    iterations,
                    residual: rnorm.as_f64(),
                });
            }
            if linear && iterations >= 2 && rnorm > prev * T::lit(0.5) {
                return Err(Error::Inconsistent {
                    residual: rnorm.as_f64(),
                });
            }
            let factor = match self.solver.method {
                SolverMethod::FixedPoint => self.free_factor()?,
                SolverMethod::Newton => {
                    if newton.is_none() || !linear {
                        let hess = self.stage_hessians(&res.stages, dw);
                        newton = Some(self.factor(Some(&hess))?);
                    }
                    newton.as_ref().expect("factor just built")
                }
            };
            let (dl, df) = self.solve_correction(factor, &res)?;
            for (x, d) in local.iter_mut().zip(&dl) {
                *x = *x + *d;
            }
            for (x, d) in face.iter_mut().zip(&df) {
                *x = *x + *d;
            }
            iterations += 1;
            prev = rnorm;
            res = self.residual(&state.values, &local, &face, &source);
            rnorm = res.max_abs();
        }

        let next = self.advance(state, &local);
        if next.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("line values after step {}", state.level)));
        }
        let block = self.stage_block(res.stages, local, face, state.level, iterations, rnorm);
        Ok((next, block))
    }

    /// Propagates a tangent field through the scheme linearised about `primal`.
    pub fn tangent_step(
        &self,
        tangent: &StepState<T>,
        primal: &StageBlock<T>,
        noise: &NoisePath<T>,
    ) -> Result<(StepState<T>, StageBlock<T>)> {
        self.check_state(tangent)?;
        self.check_noise(noise, primal.noise_step)?;
        let hess = self.stage_hessians(&primal.stages, noise.step_increments(primal.noise_step));
        let factor = self.factor(Some(&hess))?;
        self.tangent_solve(tangent, primal, &hess, &factor)
    }

    /// Propagates both fields of a tangent pair with one factorization.
    pub fn tangent_pair_step(
        &self,
        pair: &TangentPair<T>,
        primal: &StageBlock<T>,
        noise: &NoisePath<T>,
    ) -> Result<(TangentPair<T>, StageBlock<T>, StageBlock<T>)> {
        self.check_state(&pair.u)?;
        self.check_state(&pair.v)?;
        self.check_noise(noise, primal.noise_step)?;
        let hess = self.stage_hessians(&primal.stages, noise.step_increments(primal.noise_step));
        let factor = self.factor(Some(&hess))?;
        let (u, ub) = self.tangent_solve(&pair.u, primal, &hess, &factor)?;
        let (v, vb) = self.tangent_solve(&pair.v, primal, &hess, &factor)?;
        Ok((TangentPair { u, v }, ub, vb))
    }

    /// Tangent pair with independent uniform entries in `[-1, 1]`.
    pub fn random_tangent_pair(&self, seed: u64) -> TangentPair<T> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let len = self.state_len();
        let mut draw = |level| StepState {
            values: (0..len).map(|_| T::lit(rng.gen_range(-1.0..=1.0))).collect(),
            level,
        };
        let u = draw(0);
        let v = draw(0);
        TangentPair { u, v }
    }

    fn tangent_solve(
        &self,
        tangent: &StepState<T>,
        primal: &StageBlock<T>,
        hess: &[Mat<T>],
        factor: &Factor<T>,
    ) -> Result<(StepState<T>, StageBlock<T>)> {
        let lay = &self.layout;
        let source = Linearized {
            hessians: hess,
            r: lay.r,
            stages: lay.stages,
        };
        let cells = self.grid.num_cells();
        let mut local = vec![T::zero(); cells * lay.local];
        let mut face = vec![T::zero(); cells * lay.faces];
        let tol = self.solver.tol * T::one().max(tangent.max_abs());
        let mut res = self.residual(&tangent.values, &local, &face, &source);
        let mut rnorm = res.max_abs();
        let mut iterations = 0;
        // Linear problem: one solve plus refinement sweeps.
        while rnorm > tol {
            if iterations >= 4 {
                return Err(Error::NoConvergence {
                    iterations,
                    residual: rnorm.as_f64(),
                });
            }
            let (dl, df) = self.solve_correction(factor, &res)?;
            for (x, d) in local.iter_mut().zip(&dl) {
                *x = *x + *d;
            }
            for (x, d) in face.iter_mut().zip(&df) {
                *x = *x + *d;
            }
            iterations += 1;
            res = self.residual(&tangent.values, &local, &face, &source);
            rnorm = res.max_abs();
            if !rnorm.is_finite() {
                return Err(Error::NonFinite("tangent stage residual".into()));
            }
        }
        let next = self.advance(tangent, &local);
        let block = self.stage_block(res.stages, local, face, primal.noise_step, iterations, rnorm);
        Ok((next, block))
    }

    /// Advances `steps` steps from `initial`, recording the quadratic
    /// invariant, solver iterations and (optionally) the multi-symplectic
    /// residual of a random tangent pair after every step.
    pub fn run(
        &self,
        initial: &StepState<T>,
        noise: &NoisePath<T>,
        steps: usize,
        options: &RunOptions,
    ) -> std::result::Result<Trajectory<T>, RunFailure<T>> {
        let mut traj = Trajectory {
            records: vec![StepRecord {
                step: initial.level,
                time: self.grid.tau * T::from_usize_lossy(initial.level),
                invariant: self.quadratic_invariant(initial),
                ms_residual_max: None,
                iterations: 0,
            }],
            snapshots: Vec::new(),
            final_state: initial.clone(),
        };
        if options.snapshot_stride > 0 {
            traj.snapshots.push(initial.clone());
        }
        if let Err(error) = self.check_state(initial) {
            return Err(RunFailure { partial: traj, error });
        }
        let mut pair = options.ms_residual.then(|| self.random_tangent_pair(options.tangent_seed));
        for _ in 0..steps {
            match self.run_step(&traj.final_state, pair.as_ref(), noise) {
                Ok((state, iterations, next_pair, ms)) => {
                    traj.records.push(StepRecord {
                        step: state.level,
                        time: self.grid.tau * T::from_usize_lossy(state.level),
                        invariant: self.quadratic_invariant(&state),
                        ms_residual_max: ms,
                        iterations,
                    });
                    if options.snapshot_stride > 0 && state.level % options.snapshot_stride == 0 {
                        traj.snapshots.push(state.clone());
                    }
                    traj.final_state = state;
                    pair = next_pair;
                }
                Err(error) => return Err(RunFailure { partial: traj, error }),
            }
        }
        Ok(traj)
    }

    #[allow(clippy::type_complexity)]
    fn run_step(
        &self,
        state: &StepState<T>,
        pair: Option<&TangentPair<T>>,
        noise: &NoisePath<T>,
    ) -> Result<(StepState<T>, usize, Option<TangentPair<T>>, Option<T>)> {
        let (next, block) = self.step(state, noise)?;
        match pair {
            None => Ok((next, block.iterations, None, None)),
            Some(before) => {
                let (after, ub, vb) = self.tangent_pair_step(before, &block, noise)?;
                let r = self.ms_residual(before, &after, &ub, &vb);
                Ok((next, block.iterations, Some(after), Some(max_abs(&r))))
            }
        }
    }

    /// Recomputes the max-norm stage residual of a converged block.
    pub fn stage_residual(&self, state: &StepState<T>, noise: &NoisePath<T>, block: &StageBlock<T>) -> Result<T> {
        self.check_noise(noise, block.noise_step)?;
        let source = Nonlinear {
            system: &self.system,
            tau: self.grid.tau,
            dw: noise.step_increments(block.noise_step),
            stages: self.layout.stages,
        };
        Ok(self.residual(&state.values, &block.local, &block.face, &source).max_abs())
    }

    /// Stage-weighted `Σ_μ W_μ |z_μ|²` summed over cells.
    pub fn quadratic_invariant(&self, state: &StepState<T>) -> T {
        let w = self.tableaux.spatial_weights();
        let n = self.layout.n;
        state
            .values
            .chunks_exact(n)
            .enumerate()
            .map(|(i, z)| w[i % self.layout.stages] * z.iter().map(|&x| x * x).sum::<T>())
            .sum()
    }

    /// Per-cell residual of the discrete multi-symplectic conservation law for
    /// a tangent pair advanced through one step.
    pub fn ms_residual(
        &self,
        before: &TangentPair<T>,
        after: &TangentPair<T>,
        u_block: &StageBlock<T>,
        v_block: &StageBlock<T>,
    ) -> Vec<T> {
        let lay = &self.layout;
        let n = lay.n;
        let cells = self.grid.num_cells();
        let w = self.tableaux.spatial_weights();
        let k_mat = &self.system.k;
        let omega = |pair: &TangentPair<T>, c: usize| -> T {
            (0..lay.stages)
                .map(|mu| {
                    let off = (c * lay.stages + mu) * n;
                    w[mu] * k_mat.bilinear(&pair.u.values[off..off + n], &pair.v.values[off..off + n])
                })
                .sum()
        };
        let bt = self.tableaux.time.b();
        // Weights of transverse tuples per direction.
        let tw: Vec<Vec<T>> = (0..lay.dims)
            .map(|d| {
                (0..lay.trans_count[d])
                    .map(|t| {
                        let mu = lay.from_transverse[d][t][0];
                        lay.tuples[mu]
                            .iter()
                            .enumerate()
                            .filter(|&(e, _)| e != d)
                            .map(|(e, &m)| self.tableaux.space[e].b()[m])
                            .fold(T::one(), |a, b| a * b)
                    })
                    .collect()
            })
            .collect();
        let kappa = |d: usize, c: usize| -> T {
            let per_cell = lay.trans_count[d] * lay.r * n;
            let mut acc = T::zero();
            for t in 0..lay.trans_count[d] {
                for k in 0..lay.r {
                    let off = c * per_cell + (t * lay.r + k) * n;
                    let fu = &u_block.faces[d][off..off + n];
                    let fv = &v_block.faces[d][off..off + n];
                    acc = acc + bt[k] * tw[d][t] * self.system.l[d].bilinear(fu, fv);
                }
            }
            acc
        };
        let tau = self.grid.tau;
        (0..cells)
            .map(|c| {
                let mut r = (omega(after, c) - omega(before, c)) / tau;
                for d in 0..lay.dims {
                    let h = self.grid.spacing[d];
                    r = r + (kappa(d, self.neighbors[c][d]) - kappa(d, c)) / h;
                }
                r
            })
            .collect()
    }

    fn advance(&self, state: &StepState<T>, local: &[T]) -> StepState<T> {
        let lay = &self.layout;
        let n = lay.n;
        let tau = self.grid.tau;
        let b = self.tableaux.time.b();
        let mut values = state.values.clone();
        for c in 0..self.grid.num_cells() {
            let loc = &local[c * lay.local..(c + 1) * lay.local];
            for mu in 0..lay.stages {
                let z = &mut values[(c * lay.stages + mu) * n..(c * lay.stages + mu + 1) * n];
                for k in 0..lay.r {
                    let dt = &loc[lay.blk(mu, k)..lay.blk(mu, k) + n];
                    for i in 0..n {
                        z[i] = z[i] + tau * b[k] * dt[i];
                    }
                }
            }
        }
        StepState {
            values,
            level: state.level + 1,
        }
    }

    fn stage_block(&self, stages: Vec<T>, local: Vec<T>, face: Vec<T>, step: usize, iterations: usize, residual: T) -> StageBlock<T> {
        let lay = &self.layout;
        let n = lay.n;
        let cells = self.grid.num_cells();
        let mut dt = vec![T::zero(); cells * lay.stages * lay.r * n];
        let mut dspace = vec![vec![T::zero(); dt.len()]; lay.dims];
        let mut faces: Vec<Vec<T>> = (0..lay.dims)
            .map(|d| vec![T::zero(); cells * lay.trans_count[d] * lay.r * n])
            .collect();
        for c in 0..cells {
            let loc = &local[c * lay.local..(c + 1) * lay.local];
            for mu in 0..lay.stages {
                for k in 0..lay.r {
                    let b = lay.blk(mu, k);
                    let out = ((c * lay.stages + mu) * lay.r + k) * n;
                    dt[out..out + n].copy_from_slice(&loc[b..b + n]);
                    for d in 0..lay.dims {
                        let coords = &loc[b + lay.delta_off[d]..b + lay.delta_off[d] + lay.range[d]];
                        self.q[d].mul_add_vec(coords, &mut dspace[d][out..out + n]);
                    }
                }
            }
            let fc = &face[c * lay.faces..(c + 1) * lay.faces];
            for d in 0..lay.dims {
                for t in 0..lay.trans_count[d] {
                    for k in 0..lay.r {
                        let off = lay.face(d, t, k);
                        let out = ((c * lay.trans_count[d] + t) * lay.r + k) * n;
                        self.q[d].mul_add_vec(&fc[off..off + lay.range[d]], &mut faces[d][out..out + n]);
                    }
                }
            }
        }
        StageBlock {
            stages,
            dt,
            dspace,
            faces,
            noise_step: step,
            iterations,
            residual,
            local,
            face,
        }
    }

    /// Stage relations evaluated at the unknowns `(local, face)` for line values `zp`.
    fn residual(&self, zp: &[T], local: &[T], face: &[T], source: &impl Source<T>) -> Residual<T> {
        let lay = &self.layout;
        let n = lay.n;
        let r = lay.r;
        let tau = self.grid.tau;
        let at = &self.tableaux.time;
        let cells = self.grid.num_cells();
        let mut rl = vec![T::zero(); cells * lay.local];
        let mut rf = vec![T::zero(); cells * lay.faces];
        let mut stages = vec![T::zero(); cells * lay.stages * r * n];
        let mut tmp = vec![T::zero(); n];
        let mut proj = vec![T::zero(); n];

        for c in 0..cells {
            let loc = &local[c * lay.local..(c + 1) * lay.local];
            let fc = &face[c * lay.faces..(c + 1) * lay.faces];
            let out = &mut rl[c * lay.local..(c + 1) * lay.local];
            for mu in 0..lay.stages {
                let z0 = &zp[(c * lay.stages + mu) * n..(c * lay.stages + mu + 1) * n];
                for k in 0..r {
                    let zi = ((c * lay.stages + mu) * r + k) * n;
                    let z = &mut stages[zi..zi + n];
                    z.copy_from_slice(z0);
                    for j in 0..r {
                        let a = at.a_at(k, j);
                        if a == T::zero() {
                            continue;
                        }
                        let dt = &loc[lay.blk(mu, j)..lay.blk(mu, j) + n];
                        for i in 0..n {
                            z[i] = z[i] + tau * a * dt[i];
                        }
                    }
                    let b = lay.blk(mu, k);
                    let m_here = &lay.tuples[mu];
                    for d in 0..lay.dims {
                        let rd = lay.range[d];
                        let h = self.grid.spacing[d];
                        let ta = &self.tableaux.space[d];
                        let eq = &mut out[b + lay.ceq_off[d]..b + lay.ceq_off[d] + rd];
                        eq.iter_mut().for_each(|x| *x = T::zero());
                        self.qt[d].mul_add_vec(z, eq);
                        let f = &fc[lay.face(d, lay.transverse[d][mu], k)..][..rd];
                        for i in 0..rd {
                            eq[i] = eq[i] - f[i];
                        }
                        for nn in 0..lay.s[d] {
                            let a = ta.a_at(m_here[d], nn);
                            if a == T::zero() {
                                continue;
                            }
                            let mu2 = lay.replace(d, mu, nn);
                            let delta = &loc[lay.blk(mu2, k) + lay.delta_off[d]..][..rd];
                            for i in 0..rd {
                                eq[i] = eq[i] - h * a * delta[i];
                            }
                        }
                    }
                    // τ K δ_t Z + τ Σ L_d δ_d Z − source
                    source.eval(c, mu, k, z, &mut tmp);
                    let eq = &mut out[b + lay.e_off..b + lay.e_off + n];
                    for i in 0..n {
                        eq[i] = -tmp[i];
                    }
                    proj.iter_mut().for_each(|x| *x = T::zero());
                    self.system.k.mul_add_vec(&loc[b..b + n], &mut proj);
                    for d in 0..lay.dims {
                        self.lq[d].mul_add_vec(&loc[b + lay.delta_off[d]..][..lay.range[d]], &mut proj);
                    }
                    for i in 0..n {
                        eq[i] = eq[i] + tau * proj[i];
                    }
                }
            }
            // F_d(c+e_d) − F_d(c) − h Σ_m b̃_m δ_d Z
            let fo = &mut rf[c * lay.faces..(c + 1) * lay.faces];
            for d in 0..lay.dims {
                let rd = lay.range[d];
                let h = self.grid.spacing[d];
                let bw = self.tableaux.space[d].b();
                let nb = self.neighbors[c][d];
                let fnb = &face[nb * lay.faces..(nb + 1) * lay.faces];
                for t in 0..lay.trans_count[d] {
                    for k in 0..r {
                        let off = lay.face(d, t, k);
                        for i in 0..rd {
                            fo[off + i] = fnb[off + i] - fc[off + i];
                        }
                        for m in 0..lay.s[d] {
                            let mu = lay.from_transverse[d][t][m];
                            let delta = &loc[lay.blk(mu, k) + lay.delta_off[d]..][..rd];
                            for i in 0..rd {
                                fo[off + i] = fo[off + i] - h * bw[m] * delta[i];
                            }
                        }
                    }
                }
            }
        }
        Residual {
            local: rl,
            face: rf,
            stages,
        }
    }

    /// `τ D²S1(Z) + ΔW D²S2(Z)` at every stage, layout `[cell][μ][k]`.
    fn stage_hessians(&self, stages: &[T], dw: &[T]) -> Vec<Mat<T>> {
        let lay = &self.layout;
        let n = lay.n;
        let tau = self.grid.tau;
        let mut h1 = Mat::zeros(n, n);
        let mut h2 = Mat::zeros(n, n);
        stages
            .chunks_exact(n)
            .enumerate()
            .map(|(idx, z)| {
                let cell_mu = idx / lay.r;
                let w = dw[cell_mu];
                self.system.s1.hessian(z, &mut h1);
                self.system.s2.hessian(z, &mut h2);
                h1.scaled(tau).add(&h2.scaled(w))
            })
            .collect()
    }

    fn free_factor(&self) -> Result<&Factor<T>> {
        if let Some(f) = self.free_factor.get() {
            return Ok(f);
        }
        let f = self.factor(None)?;
        Ok(self.free_factor.get_or_init(|| f))
    }

    /// Local Jacobian of one cell; `hess` holds the per-stage source
    /// derivatives for that cell (`None`: source-free operator).
    fn local_jacobian(&self, hess: Option<&[Mat<T>]>) -> Mat<T> {
        let lay = &self.layout;
        let n = lay.n;
        let r = lay.r;
        let tau = self.grid.tau;
        let at = &self.tableaux.time;
        let mut a = Mat::zeros(lay.local, lay.local);
        for mu in 0..lay.stages {
            let m_here = &lay.tuples[mu];
            for k in 0..r {
                let row = lay.blk(mu, k);
                for d in 0..lay.dims {
                    let rd = lay.range[d];
                    let h = self.grid.spacing[d];
                    let ta = &self.tableaux.space[d];
                    let er = row + lay.ceq_off[d];
                    for j in 0..r {
                        let coef = tau * at.a_at(k, j);
                        if coef == T::zero() {
                            continue;
                        }
                        let col = lay.blk(mu, j);
                        for i in 0..rd {
                            for l in 0..n {
                                a[(er + i, col + l)] = a[(er + i, col + l)] + coef * self.qt[d][(i, l)];
                            }
                        }
                    }
                    for nn in 0..lay.s[d] {
                        let coef = h * ta.a_at(m_here[d], nn);
                        if coef == T::zero() {
                            continue;
                        }
                        let col = lay.blk(lay.replace(d, mu, nn), k) + lay.delta_off[d];
                        for i in 0..rd {
                            a[(er + i, col + i)] = a[(er + i, col + i)] - coef;
                        }
                    }
                }
                let er = row + lay.e_off;
                for i in 0..n {
                    for l in 0..n {
                        a[(er + i, row + l)] = a[(er + i, row + l)] + tau * self.system.k[(i, l)];
                    }
                }
                if let Some(hs) = hess {
                    let hm = &hs[mu * r + k];
                    for j in 0..r {
                        let coef = tau * at.a_at(k, j);
                        if coef == T::zero() {
                            continue;
                        }
                        let col = lay.blk(mu, j);
                        for i in 0..n {
                            for l in 0..n {
                                a[(er + i, col + l)] = a[(er + i, col + l)] - coef * hm[(i, l)];
                            }
                        }
                    }
                }
                for d in 0..lay.dims {
                    let col = row + lay.delta_off[d];
                    for i in 0..n {
                        for l in 0..lay.range[d] {
                            a[(er + i, col + l)] = a[(er + i, col + l)] + tau * self.lq[d][(i, l)];
                        }
                    }
                }
            }
        }
        a
    }

    fn factor(&self, hess: Option<&[Mat<T>]>) -> Result<Factor<T>> {
        let lay = &self.layout;
        let cells = self.grid.num_cells();
        let per_cell = lay.stages * lay.r;
        let nf = lay.faces;
        let mut local = Vec::with_capacity(cells);
        let mut ab = Vec::with_capacity(cells);
        let shared = if hess.is_none() {
            Some(self.local_jacobian(None))
        } else {
            None
        };
        let mut schur = Mat::zeros(cells * nf, cells * nf);
        for c in 0..cells {
            let a = match (&shared, hess) {
                (Some(a), _) => a.clone(),
                (None, Some(h)) => self.local_jacobian(Some(&h[c * per_cell..(c + 1) * per_cell])),
                (None, None) => unreachable!(),
            };
            let lu = Lu::factor(a).map_err(|p| {
                Error::Singular(format!(
                    "cell {c} stage block has a zero pivot in column {}; the step ratio may be characteristic for this system",
                    p.column
                ))
            })?;
            // B_c: −I from each (c_d) row onto the face it reads.
            let mut b = Mat::zeros(lay.local, nf);
            for mu in 0..lay.stages {
                for k in 0..lay.r {
                    for d in 0..lay.dims {
                        let row = lay.blk(mu, k) + lay.ceq_off[d];
                        let col = lay.face(d, lay.transverse[d][mu], k);
                        for i in 0..lay.range[d] {
                            b[(row + i, col + i)] = -T::one();
                        }
                    }
                }
            }
            let y = lu.solve_mat(&b);
            // Row block of cell c: −I − C_c A_c⁻¹ B_c on own faces, +I on the neighbour's.
            let base = c * nf;
            for d in 0..lay.dims {
                let rd = lay.range[d];
                let h = self.grid.spacing[d];
                let bw = self.tableaux.space[d].b();
                let nb = self.neighbors[c][d];
                for t in 0..lay.trans_count[d] {
                    for k in 0..lay.r {
                        let off = lay.face(d, t, k);
                        for i in 0..rd {
                            let row = base + off + i;
                            schur[(row, base + off + i)] = schur[(row, base + off + i)] - T::one();
                            schur[(row, nb * nf + off + i)] = schur[(row, nb * nf + off + i)] + T::one();
                            for m in 0..lay.s[d] {
                                let mu = lay.from_transverse[d][t][m];
                                let src = lay.blk(mu, k) + lay.delta_off[d] + i;
                                let coef = h * bw[m];
                                for j in 0..nf {
                                    schur[(row, base + j)] = schur[(row, base + j)] + coef * y[(src, j)];
                                }
                            }
                        }
                    }
                }
            }
            local.push(lu);
            ab.push(y);
        }
        if !schur.is_finite() {
            return Err(Error::NonFinite("face system".into()));
        }
        Ok(Factor {
            local,
            ab,
            schur: FullPivLu::factor(schur, self.solver.rank_tol),
        })
    }

    /// Newton-type correction `ΔX = −J⁻¹ r` with the factorized `J`.
    fn solve_correction(&self, f: &Factor<T>, res: &Residual<T>) -> Result<(Vec<T>, Vec<T>)> {
        let lay = &self.layout;
        let cells = self.grid.num_cells();
        let nf = lay.faces;
        // y_c = A_c⁻¹ r_U;  rhs = −r_F + C_c y_c
        let ys: Vec<Vec<T>> = (0..cells)
            .map(|c| f.local[c].solve(&res.local[c * lay.local..(c + 1) * lay.local]))
            .collect();
        let mut rhs: Vec<T> = res.face.iter().map(|&x| -x).collect();
        for c in 0..cells {
            let y = &ys[c];
            for d in 0..lay.dims {
                let h = self.grid.spacing[d];
                let bw = self.tableaux.space[d].b();
                for t in 0..lay.trans_count[d] {
                    for k in 0..lay.r {
                        let off = lay.face(d, t, k);
                        for i in 0..lay.range[d] {
                            let mut acc = T::zero();
                            for m in 0..lay.s[d] {
                                let mu = lay.from_transverse[d][t][m];
                                acc = acc + h * bw[m] * y[lay.blk(mu, k) + lay.delta_off[d] + i];
                            }
                            rhs[c * nf + off + i] = rhs[c * nf + off + i] - acc;
                        }
                    }
                }
            }
        }
        let df = f.schur.solve(&rhs);
        if df.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("face correction".into()));
        }
        let mut dl = vec![T::zero(); cells * lay.local];
        for c in 0..cells {
            let fc = &df[c * nf..(c + 1) * nf];
            let ab = &f.ab[c];
            let out = &mut dl[c * lay.local..(c + 1) * lay.local];
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = ys[c][i];
                for (j, &x) in fc.iter().enumerate() {
                    acc = acc + ab[(i, j)] * x;
                }
                *o = -acc;
            }
        }
        Ok((dl, df))
    }
}

/// `x_c + c_μ h` for every cell and spatial stage tuple.
pub fn stage_points<T: Real>(grid: &Grid<T>, tableaux: &Tableaux<T>) -> Vec<Vec<T>> {
    let shape: Vec<usize> = tableaux.space.iter().map(Tableau::stages).collect();
    let abscissae: Vec<Vec<T>> = tableaux.space.iter().map(Tableau::c).collect();
    let mus = tuples(&shape);
    let mut out = Vec::with_capacity(grid.num_cells() * mus.len());
    for c in 0..grid.num_cells() {
        let idx = grid.cell_index(c);
        for mu in &mus {
            out.push(
                (0..grid.dims())
                    .map(|d| (T::from_usize_lossy(idx[d]) + abscissae[d][mu[d]]) * grid.spacing()[d])
                    .collect(),
            );
        }
    }
    out
}
