//! Stochastic Hamiltonian PDE descriptors
//!
//! `K dz + Σ_d L_d z_{x_d} dt = ∇S1(z) dt + ∇S2(z) ∘ dW`, with skew-symmetric
//! `K`, `L_d` and Hamiltonians supplied as gradient and Hessian evaluators.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;

/// A smooth scalar function of the state, known through its derivatives.
///
/// Implementations must be pure: the engine may evaluate them from several
/// threads at once.
pub trait Hamiltonian<T>: Send + Sync {
    fn gradient(&self, z: &[T], out: &mut [T]);

    fn hessian(&self, z: &[T], out: &mut Mat<T>);

    /// True iff the gradient is affine in the state.
    fn is_quadratic(&self) -> bool {
        false
    }
}

/// `S(z) = ½ zᵀ M z` with symmetric `M`.
#[derive(Clone, Debug)]
pub struct QuadraticForm<T> {
    pub matrix: Mat<T>,
}

impl<T: Real> Hamiltonian<T> for QuadraticForm<T> {
    fn gradient(&self, z: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|x| *x = T::zero());
        self.matrix.mul_add_vec(z, out);
    }

    fn hessian(&self, _z: &[T], out: &mut Mat<T>) {
        out.clone_from(&self.matrix);
    }

    fn is_quadratic(&self) -> bool {
        true
    }
}

/// `S(z) = (c/4) Σ_i z_i⁴`, a separable nonlinear test potential.
#[derive(Clone, Copy, Debug)]
pub struct Quartic<T> {
    pub coefficient: T,
}

impl<T: Real> Hamiltonian<T> for Quartic<T> {
    fn gradient(&self, z: &[T], out: &mut [T]) {
        for (o, &x) in out.iter_mut().zip(z) {
            *o = self.coefficient * x * x * x;
        }
    }

    fn hessian(&self, z: &[T], out: &mut Mat<T>) {
        let three = T::lit(3.0);
        for i in 0..z.len() {
            for j in 0..z.len() {
                out[(i, j)] = if i == j {
                    three * self.coefficient * z[i] * z[i]
                } else {
                    T::zero()
                };
            }
        }
    }
}

type GradFn<T> = dyn Fn(&[T], &mut [T]) + Send + Sync;
type HessFn<T> = dyn Fn(&[T], &mut Mat<T>) + Send + Sync;

/// Hamiltonian built from a pair of closures.
pub struct FnHamiltonian<T> {
    grad: Box<GradFn<T>>,
    hess: Box<HessFn<T>>,
    quadratic: bool,
}

impl<T> FnHamiltonian<T> {
    pub fn new(
        grad: impl Fn(&[T], &mut [T]) + Send + Sync + 'static,
        hess: impl Fn(&[T], &mut Mat<T>) + Send + Sync + 'static,
        quadratic: bool,
    ) -> Self {
        Self {
            grad: Box::new(grad),
            hess: Box::new(hess),
            quadratic,
        }
    }
}

impl<T: Real> Hamiltonian<T> for FnHamiltonian<T> {
    fn gradient(&self, z: &[T], out: &mut [T]) {
        (self.grad)(z, out)
    }

    fn hessian(&self, z: &[T], out: &mut Mat<T>) {
        (self.hess)(z, out)
    }

    fn is_quadratic(&self) -> bool {
        self.quadratic
    }
}

/// One instance of the PDE. Immutable once built.
#[derive(Clone)]
pub struct SystemSpec<T> {
    pub name: String,
    pub k: Mat<T>,
    pub l: Vec<Mat<T>>,
    pub s1: Arc<dyn Hamiltonian<T>>,
    pub s2: Arc<dyn Hamiltonian<T>>,
}

impl<T: Real> SystemSpec<T> {
    pub fn new(
        name: impl Into<String>,
        k: Mat<T>,
        l: Vec<Mat<T>>,
        s1: Arc<dyn Hamiltonian<T>>,
        s2: Arc<dyn Hamiltonian<T>>,
    ) -> Self {
        Self {
            name: name.into(),
            k,
            l,
            s1,
            s2,
        }
    }

    pub fn n(&self) -> usize {
        self.k.rows()
    }

    /// Number of spatial dimensions.
    pub fn dims(&self) -> usize {
        self.l.len()
    }

    pub fn is_linear(&self) -> bool {
        self.s1.is_quadratic() && self.s2.is_quadratic()
    }

    pub fn grad_s1(&self, z: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.n()];
        self.s1.gradient(z, &mut out);
        out
    }

    pub fn grad_s2(&self, z: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.n()];
        self.s2.gradient(z, &mut out);
        out
    }

    pub fn hess_s1(&self, z: &[T]) -> Mat<T> {
        let mut out = Mat::zeros(self.n(), self.n());
        self.s1.hessian(z, &mut out);
        out
    }

    pub fn hess_s2(&self, z: &[T]) -> Mat<T> {
        let mut out = Mat::zeros(self.n(), self.n());
        self.s2.hessian(z, &mut out);
        out
    }
}

impl<T: Real> fmt::Debug for SystemSpec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("n", &self.n())
            .field("k", &self.k)
            .field("l", &self.l)
            .field("linear", &self.is_linear())
            .finish()
    }
}

/// Matrices of the quadratic Hamiltonians `S1 = ½ zᵀAz`, `S2 = ½ zᵀBz`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticSpec<T> {
    pub a: Mat<T>,
    pub b: Mat<T>,
}

pub fn make_quadratic_system<T: Real>(
    name: impl Into<String>,
    k: Mat<T>,
    l: Vec<Mat<T>>,
    q: QuadraticSpec<T>,
) -> Result<SystemSpec<T>> {
    let n = k.rows();
    let square = |m: &Mat<T>| m.rows() == n && m.cols() == n;
    if !square(&k) {
        return Err(Error::Dimension(format!("K is {}x{}", k.rows(), k.cols())));
    }
    if l.is_empty() {
        return Err(Error::Dimension("at least one L matrix is required".into()));
    }
    for (d, ld) in l.iter().enumerate() {
        if !square(ld) {
            return Err(Error::Dimension(format!(
                "L[{d}] is {}x{}, expected {n}x{n}",
                ld.rows(),
                ld.cols()
            )));
        }
    }
    if !square(&q.a) || !square(&q.b) {
        return Err(Error::Dimension(format!("A and B must be {n}x{n}")));
    }
    Ok(SystemSpec::new(
        name,
        k,
        l,
        Arc::new(QuadraticForm { matrix: q.a }),
        Arc::new(QuadraticForm { matrix: q.b }),
    ))
}

/// Canonical 2×2 structure matrix `[[0, −1], [1, 0]]`.
pub fn canonical_k<T: Real>() -> Mat<T> {
    Mat::from_f64_rows(&[&[0.0, -1.0], &[1.0, 0.0]])
}

/// The `n = 2` test system `K z_t + L z_x = ∇S1 + ∇S2 Ẇ` with
/// `K = [[0,−1],[1,0]]`, `L = −K` (so each component is transported, `z_t = z_x`),
/// `S1 = (mass/2)|z|²` and `S2 = (lambda/2)|z|²`.
///
/// `K⁻¹A` and `K⁻¹B` are skew for every choice of `mass` and `lambda`, so the
/// quadratic invariant applies.
pub fn transport2<T: Real>(mass: T, lambda: T) -> SystemSpec<T> {
    let k = canonical_k::<T>();
    let l = k.scaled(-T::one());
    make_quadratic_system(
        "transport2",
        k,
        vec![l],
        QuadraticSpec {
            a: Mat::scaled_identity(2, mass),
            b: Mat::scaled_identity(2, lambda),
        },
    )
    .expect("transport2 dimensions are consistent")
}

/// A failed structural check and its measured residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub check: String,
    pub residual: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}, residual {:?}", self.check, self.residual)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ValidationOptions {
    /// Tolerance for skew-symmetry of `K`, `L_d` and symmetry of Hessians,
    /// relative to `max(1, max|entry|)`.
    pub structure_tol: f64,
    pub probes: usize,
    pub fd_step: f64,
    pub fd_tol: f64,
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            structure_tol: 1e-12,
            probes: 10,
            fd_step: 1e-5,
            fd_tol: 1e-6,
            seed: 0x5eed,
        }
    }
}

pub fn validate<T: Real>(spec: &SystemSpec<T>) -> Vec<Violation> {
    validate_with(spec, &ValidationOptions::default())
}

pub fn validate_with<T: Real>(spec: &SystemSpec<T>, opts: &ValidationOptions) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = spec.n();
    if n < 2 {
        out.push(Violation {
            check: format!("state dimension n = {n} is below 2"),
            residual: n as f64,
        });
    }
    if !spec.k.is_square() {
        out.push(Violation {
            check: "K not square".into(),
            residual: f64::INFINITY,
        });
        return out;
    }
    if spec.l.is_empty() {
        out.push(Violation {
            check: "no L matrices (at least one spatial dimension required)".into(),
            residual: f64::INFINITY,
        });
    }
    let tol_for = |m: &Mat<T>| opts.structure_tol * m.max_abs().as_f64().max(1.0);
    let r = spec.k.skew_residual().as_f64();
    if !(r <= tol_for(&spec.k)) {
        out.push(Violation {
            check: "K not skew-symmetric".into(),
            residual: r,
        });
    }
    for (d, ld) in spec.l.iter().enumerate() {
        if ld.rows() != n || ld.cols() != n {
            out.push(Violation {
                check: format!("L[{d}] has shape {}x{}, expected {n}x{n}", ld.rows(), ld.cols()),
                residual: f64::INFINITY,
            });
            continue;
        }
        let r = ld.skew_residual().as_f64();
        if !(r <= tol_for(ld)) {
            out.push(Violation {
                check: format!("L[{d}] not skew-symmetric"),
                residual: r,
            });
        }
    }
    if n == 0 {
        return out;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // Coarser probes in low precision, where 1e-5 differences are mostly roundoff.
    let h = T::lit(opts.fd_step).max(T::epsilon().cbrt());
    let two_h = h + h;
    let fd_tol = opts.fd_tol.max(10.0 * T::epsilon().sqrt().as_f64());
    let parts: [(&str, &Arc<dyn Hamiltonian<T>>); 2] = [("hess_s1", &spec.s1), ("hess_s2", &spec.s2)];
    for (label, ham) in parts {
        let mut worst_sym = 0.0f64;
        let mut worst_fd = 0.0f64;
        let mut hess = Mat::zeros(n, n);
        let mut gp = vec![T::zero(); n];
        let mut gm = vec![T::zero(); n];
        for _ in 0..opts.probes {
            let z: Vec<T> = (0..n).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
            ham.hessian(&z, &mut hess);
            worst_sym = worst_sym.max(hess.symmetry_residual().as_f64());
            let mut zp = z.clone();
            for j in 0..n {
                zp[j] = z[j] + h;
                ham.gradient(&zp, &mut gp);
                zp[j] = z[j] - h;
                ham.gradient(&zp, &mut gm);
                zp[j] = z[j];
                for i in 0..n {
                    let fd = (gp[i] - gm[i]) / two_h;
                    let scale = T::one().max(hess[(i, j)].abs());
                    worst_fd = worst_fd.max(((fd - hess[(i, j)]).abs() / scale).as_f64());
                }
            }
        }
        if !(worst_sym <= opts.structure_tol) {
            out.push(Violation {
                check: format!("{label} returns a non-symmetric matrix"),
                residual: worst_sym,
            });
        }
        if !(worst_fd <= fd_tol) {
            out.push(Violation {
                check: format!("{label} disagrees with central differences of the gradient"),
                residual: worst_fd,
            });
        }
    }
    out
}

/// Preconditions of the quadratic invariant: `K` nonsingular, `A`, `B`
/// symmetric, `K⁻¹A` and `K⁻¹B` skew (tolerance 1e-12).
pub fn check_quadratic_invariant_preconditions<T: Real>(
    k: &Mat<T>,
    q: &QuadraticSpec<T>,
) -> Vec<Violation> {
    let tol = 1e-12;
    let mut out = Vec::new();
    for (label, m) in [("A", &q.a), ("B", &q.b)] {
        let r = m.symmetry_residual().as_f64();
        if !(r <= tol) {
            out.push(Violation {
                check: format!("{label} not symmetric"),
                residual: r,
            });
        }
    }
    let Some(kinv) = k.inverse() else {
        out.push(Violation {
            check: "K is singular".into(),
            residual: 0.0,
        });
        return out;
    };
    for (label, m) in [("K^-1 A", &q.a), ("K^-1 B", &q.b)] {
        let r = kinv.matmul(m).skew_residual().as_f64();
        if !(r <= tol) {
            out.push(Violation {
                check: format!("{label} not skew-symmetric"),
                residual: r,
            });
        }
    }
    out
}
