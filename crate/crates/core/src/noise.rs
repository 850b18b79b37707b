//! Truncated Q-Wiener increments.
//!
//! `ΔW(x) = Σ_{j≤J} √η_j e_j(x) ξ_{j,k} √τ` with standard normal `ξ_{j,k}`
//! shared by every spatial point of step `k`. The normals are drawn from a
//! ChaCha stream selected by `j` at word offset `4k`, so a given `(seed, j, k)`
//! always yields the same draw regardless of how many points are sampled.

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::sci17;
use crate::scalar::Real;

type BasisFn<T> = dyn Fn(usize, &[T]) -> T + Send + Sync;

/// Eigenfunction family `e_j`. Indices passed to the family start at 1.
#[derive(Clone)]
pub enum Basis<T> {
    /// `e_j(x) = Π_d √2 sin(j_d π x_d / ℓ_d)`; in more than one dimension the
    /// multi-indices `(j_1, …)` are enumerated by total degree, then
    /// lexicographically.
    Sine,
    /// `e_j ≡ 1` for every `j`.
    Unit,
    Custom(Arc<BasisFn<T>>),
}

impl<T> fmt::Debug for Basis<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Basis::Sine => f.write_str("Sine"),
            Basis::Unit => f.write_str("Unit"),
            Basis::Custom(_) => f.write_str("Custom"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct QWienerSpec<T> {
    /// `η_1 ≥ η_2 ≥ … ≥ 0`; the length is the truncation `J`.
    pub eigenvalues: Vec<T>,
    pub basis: Basis<T>,
    /// Domain length along each spatial axis.
    pub domain: Vec<T>,
    pub seed: u64,
}

impl<T: Real> QWienerSpec<T> {
    pub fn truncation(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eigenvalues.is_empty() {
            return Err(Error::InvalidNoise("truncation J must be positive".into()));
        }
        if self.domain.is_empty() || self.domain.iter().any(|l| !(*l > T::zero())) {
            return Err(Error::InvalidNoise("domain lengths must be positive".into()));
        }
        for (j, &eta) in self.eigenvalues.iter().enumerate() {
            if !(eta >= T::zero()) || !eta.is_finite() {
                return Err(Error::InvalidNoise(format!("eigenvalue η_{} = {eta} is not a finite nonnegative number", j + 1)));
            }
            if j > 0 && eta > self.eigenvalues[j - 1] {
                return Err(Error::InvalidNoise("eigenvalues must be nonincreasing".into()));
            }
        }
        Ok(())
    }

    /// `e_j(x)` for the 1-based mode index `j`.
    pub fn eigenfunction(&self, j: usize, x: &[T]) -> T {
        match &self.basis {
            Basis::Unit => T::one(),
            Basis::Custom(f) => f(j, x),
            Basis::Sine => {
                let idx = sine_multi_index(j, x.len());
                let mut v = T::one();
                for ((&jd, &xd), &ld) in idx.iter().zip(x).zip(&self.domain) {
                    let arg = T::lit(PI) * T::from_usize_lossy(jd) * xd / ld;
                    v = v * T::lit(2f64.sqrt()) * arg.sin();
                }
                v
            }
        }
    }

    /// `Σ_j η_j e_j(x_a) e_j(x_b)`, the covariance of `W(1, ·)` at two points.
    pub fn covariance(&self, xa: &[T], xb: &[T]) -> T {
        self.eigenvalues
            .iter()
            .enumerate()
            .map(|(j, &eta)| eta * self.eigenfunction(j + 1, xa) * self.eigenfunction(j + 1, xb))
            .sum()
    }
}

/// The `j`-th (1-based) multi-index of `dims` positive integers, ordered by
/// total degree and then lexicographically.
fn sine_multi_index(j: usize, dims: usize) -> Vec<usize> {
    assert!(j >= 1 && dims >= 1);
    if dims == 1 {
        return vec![j];
    }
    let mut remaining = j;
    let mut degree = dims;
    loop {
        let all = compositions(degree, dims);
        if remaining <= all.len() {
            return all[remaining - 1].clone();
        }
        remaining -= all.len();
        degree += 1;
    }
}

/// Compositions of `total` into `parts` positive integers, lexicographic.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 1..=total - (parts - 1) {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Standard normal `ξ_{j,k}` for every step `k < steps` of mode `j` (0-based).
fn mode_normals(seed: u64, j: usize, steps: usize) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    rng.set_word_pos(0);
    let unit = 1.0 / (1u64 << 53) as f64;
    (0..steps)
        .map(|_| {
            let u1 = ((rng.next_u64() >> 11) + 1) as f64 * unit;
            let u2 = (rng.next_u64() >> 11) as f64 * unit;
            (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
        })
        .collect()
}

/// Pre-sampled increments `ΔW_m^k` at fixed points for a whole run. Immutable.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath<T> {
    increments: Vec<T>,
    steps: usize,
    tau: T,
    points: Vec<Vec<T>>,
}

impl<T: Real> NoisePath<T> {
    /// A path whose increments are all zero.
    pub fn zero(steps: usize, tau: T, points: Vec<Vec<T>>) -> Self {
        Self {
            increments: vec![T::zero(); steps * points.len()],
            steps,
            tau,
            points,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn points(&self) -> &[Vec<T>] {
        &self.points
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn increment_at(&self, k: usize, m: usize) -> Result<T> {
        if k >= self.steps || m >= self.points.len() {
            return Err(Error::NoiseIndex {
                step: k,
                steps: self.steps,
                point: m,
                points: self.points.len(),
            });
        }
        Ok(self.increments[k * self.points.len() + m])
    }

    /// All increments of step `k`, indexed by point.
    pub fn step_increments(&self, k: usize) -> &[T] {
        let np = self.points.len();
        &self.increments[k * np..(k + 1) * np]
    }

    /// CSV with columns `k,m,x,dW` (`k,m,x,y,…,dW` in more dimensions).
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let dims = self.points.first().map_or(1, Vec::len);
        let axes = ["x", "y", "z"];
        let mut header = String::from("k,m");
        for d in 0..dims {
            header.push(',');
            header.push_str(axes.get(d).copied().unwrap_or("w"));
        }
        writeln!(w, "{header},dW")?;
        for k in 0..self.steps {
            for (m, p) in self.points.iter().enumerate() {
                write!(w, "{k},{m}")?;
                for &c in p {
                    write!(w, ",{}", sci17(c.as_f64()))?;
                }
                writeln!(w, ",{}", sci17(self.increments[k * self.points.len() + m].as_f64()))?;
            }
        }
        Ok(())
    }
}

pub fn sample_path<T: Real>(
    spec: &QWienerSpec<T>,
    num_steps: usize,
    tau: T,
    points: Vec<Vec<T>>,
) -> Result<NoisePath<T>> {
    spec.validate()?;
    if !(tau > T::zero()) {
        return Err(Error::InvalidNoise(format!("time step must be positive, got {tau}")));
    }
    let dims = spec.domain.len();
    for p in &points {
        if p.len() != dims {
            return Err(Error::InvalidNoise(format!(
                "point has {} coordinates but the domain has {dims} axes",
                p.len()
            )));
        }
        for (axis, (&x, &l)) in p.iter().zip(&spec.domain).enumerate() {
            let slack = l * T::lit(1e-12);
            if !(x >= -slack && x <= l + slack) {
                return Err(Error::PointOutsideDomain {
                    axis,
                    coord: x.as_f64(),
                    length: l.as_f64(),
                });
            }
        }
    }

    let np = points.len();
    let sqrt_tau = tau.sqrt();
    let mut increments = vec![T::zero(); num_steps * np];
    for (j, &eta) in spec.eigenvalues.iter().enumerate() {
        if eta == T::zero() {
            continue;
        }
        let weights: Vec<T> = points
            .iter()
            .map(|p| eta.sqrt() * spec.eigenfunction(j + 1, p) * sqrt_tau)
            .collect();
        let xi = mode_normals(spec.seed, j, num_steps);
        for (k, &x) in xi.iter().enumerate() {
            let x = T::lit(x);
            for (inc, &w) in increments[k * np..(k + 1) * np].iter_mut().zip(&weights) {
                *inc = *inc + w * x;
            }
        }
    }
    Ok(NoisePath {
        increments,
        steps: num_steps,
        tau,
        points,
    })
}

/// Eigenvalue list: explicit values, or `η_j = j^{-p}` for `j = 1..J`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaJson {
    Values(Vec<f64>),
    Decay(DecayJson),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayJson {
    /// Only `"j^-p"` is recognised.
    pub decay: String,
    pub p: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisJson {
    #[default]
    Sine,
    Unit,
}

/// Wire form `{"J": int, "eta": [...] | {"decay": "j^-p", "p": real},
/// "domain_length": real, "seed": int}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QWienerJson {
    #[serde(rename = "J")]
    pub truncation: usize,
    pub eta: EtaJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_length: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub basis: BasisJson,
}

impl QWienerJson {
    /// Builds the spec over `dims` axes. `default_domain` is used when the
    /// document does not pin `domain_length`.
    pub fn to_spec<T: Real>(&self, dims: usize, default_domain: &[f64]) -> Result<QWienerSpec<T>> {
        let j = self.truncation;
        let eigenvalues: Vec<T> = match &self.eta {
            EtaJson::Values(v) => {
                if v.len() != j {
                    return Err(Error::InvalidNoise(format!(
                        "J = {j} but {} eigenvalues were listed",
                        v.len()
                    )));
                }
                v.iter().map(|&x| T::lit(x)).collect()
            }
            EtaJson::Decay(d) => {
                if d.decay != "j^-p" {
                    return Err(Error::InvalidNoise(format!(
                        "unknown decay law `{}` (expected \"j^-p\")",
                        d.decay
                    )));
                }
                (1..=j).map(|i| T::lit((i as f64).powf(-d.p))).collect()
            }
        };
        let domain: Vec<T> = match self.domain_length {
            Some(l) => vec![T::lit(l); dims],
            None => {
                if default_domain.len() != dims {
                    return Err(Error::InvalidNoise("domain_length is required".into()));
                }
                default_domain.iter().map(|&l| T::lit(l)).collect()
            }
        };
        let spec = QWienerSpec {
            eigenvalues,
            basis: match self.basis {
                BasisJson::Sine => Basis::Sine,
                BasisJson::Unit => Basis::Unit,
            },
            domain,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}
