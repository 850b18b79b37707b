//! Runge-Kutta coefficient sets and the stochastic multi-symplecticity check.
//!
//! One [`Tableau`] describes the method along a single direction (time or one
//! spatial axis). A space-time method pairs one tableau per direction; it is
//! multi-symplectic when every tableau has a vanishing [`condition_residual`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;

/// Default tolerance for [`is_multisymplectic`].
pub const DEFAULT_CONDITION_TOL: f64 = 1e-12;

pub const BUILTIN_NAMES: [&str; 5] = ["midpoint", "gauss2", "gauss3", "euler_explicit", "rk4"];

#[derive(Clone, Debug, PartialEq)]
pub struct Tableau<T> {
    a: Mat<T>,
    b: Vec<T>,
}

impl<T: Real> Tableau<T> {
    pub fn new(a: Mat<T>, b: Vec<T>) -> Result<Self> {
        if b.is_empty() {
            return Err(Error::InvalidTableau("at least one stage is required".into()));
        }
        if a.rows() != b.len() || a.cols() != b.len() {
            return Err(Error::InvalidTableau(format!(
                "a is {}x{} but b has {} entries",
                a.rows(),
                a.cols(),
                b.len()
            )));
        }
        if !a.is_finite() || b.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidTableau("coefficients must be finite".into()));
        }
        Ok(Self { a, b })
    }

    pub fn from_f64(a: &[&[f64]], b: &[f64]) -> Result<Self> {
        Self::new(
            Mat::from_f64_rows(a),
            b.iter().map(|&x| T::lit(x)).collect(),
        )
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self) -> &Mat<T> {
        &self.a
    }

    #[inline]
    pub fn a_at(&self, i: usize, j: usize) -> T {
        self.a[(i, j)]
    }

    pub fn b(&self) -> &[T] {
        &self.b
    }

    /// Abscissae, always recomputed as row sums of `a`.
    pub fn c(&self) -> Vec<T> {
        (0..self.stages())
            .map(|m| self.a.row(m).iter().copied().sum())
            .collect()
    }

    pub fn to_json(&self) -> TableauJson {
        TableauJson {
            stages: self.stages(),
            a: self.a.to_rows().iter().map(|r| r.iter().map(|x| x.as_f64()).collect()).collect(),
            b: self.b.iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn from_json(j: &TableauJson) -> Result<Self> {
        if j.stages != j.b.len() || j.stages != j.a.len() {
            return Err(Error::InvalidTableau(format!(
                "declared {} stages but a has {} rows and b has {} entries",
                j.stages,
                j.a.len(),
                j.b.len()
            )));
        }
        let rows: Vec<Vec<T>> = j
            .a
            .iter()
            .map(|r| r.iter().map(|&x| T::lit(x)).collect())
            .collect();
        let a = Mat::from_rows(&rows)
            .ok_or_else(|| Error::InvalidTableau("rows of a have different lengths".into()))?;
        Self::new(a, j.b.iter().map(|&x| T::lit(x)).collect())
    }
}

/// Wire form `{"stages": s, "a": [[...]], "b": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableauJson {
    pub stages: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

/// `M_kj = b_k b_j − b_k a_kj − b_j a_jk`.
pub fn condition_residual<T: Real>(t: &Tableau<T>) -> Mat<T> {
    let s = t.stages();
    let mut m = Mat::zeros(s, s);
    for k in 0..s {
        for j in 0..s {
            let (bk, bj) = (t.b[k], t.b[j]);
            m[(k, j)] = bk * bj - bk * t.a[(k, j)] - bj * t.a[(j, k)];
        }
    }
    m
}

/// The relation exactly as printed for the z-direction of the 3D scheme,
/// `b_l b_v − b_l a_lv − b_v a_lv`, with the same index on both `a` terms.
///
/// Only reported for comparison; [`condition_residual`] is the check used.
pub fn condition_residual_literal<T: Real>(t: &Tableau<T>) -> Mat<T> {
    let s = t.stages();
    let mut m = Mat::zeros(s, s);
    for l in 0..s {
        for v in 0..s {
            let (bl, bv) = (t.b[l], t.b[v]);
            m[(l, v)] = bl * bv - bl * t.a[(l, v)] - bv * t.a[(l, v)];
        }
    }
    m
}

pub fn is_multisymplectic<T: Real>(t: &Tableau<T>, tol: T) -> bool {
    condition_residual(t).max_abs() <= tol
}

#[allow(clippy::excessive_precision)]
pub fn builtin_tableau<T: Real>(name: &str) -> Result<Tableau<T>> {
    match name {
        "midpoint" => Tableau::from_f64(&[&[0.5]], &[1.0]),
        "euler_explicit" => Tableau::from_f64(&[&[0.0]], &[1.0]),
        "gauss2" => Tableau::from_f64(
            &[
                &[0.25, -0.038675134594812882254574390251],
                &[0.538675134594812882254574390251, 0.25],
            ],
            &[0.5, 0.5],
        ),
        "gauss3" => Tableau::from_f64(
            &[
                &[
                    0.1388888888888888888889,
                    -0.0359766675249389034564,
                    0.00978944401530832604958,
                ],
                &[
                    0.300263194980864592438,
                    0.2222222222222222222222,
                    -0.02248541720308681466025,
                ],
                &[
                    0.2679883337624694517282,
                    0.4804211119693833479008,
                    0.1388888888888888888889,
                ],
            ],
            &[
                0.2777777777777777777778,
                0.4444444444444444444444,
                0.2777777777777777777778,
            ],
        ),
        "rk4" => Tableau::from_f64(
            &[
                &[0.0, 0.0, 0.0, 0.0],
                &[0.5, 0.0, 0.0, 0.0],
                &[0.0, 0.5, 0.0, 0.0],
                &[0.0, 0.0, 1.0, 0.0],
            ],
            &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
        ),
        _ => Err(Error::UnknownTableau {
            name: name.to_string(),
            valid: BUILTIN_NAMES.join(", "),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn residual_of(name: &str) -> Mat<f64> {
        condition_residual(&builtin_tableau::<f64>(name).unwrap())
    }

    #[test]
    fn midpoint_has_zero_residual() {
        let t = builtin_tableau::<f64>("midpoint").unwrap();
        assert_eq!(t.stages(), 1);
        assert_eq!(t.a_at(0, 0), 0.5);
        assert_eq!(t.b(), &[1.0]);
        assert_eq!(residual_of("midpoint")[(0, 0)], 0.0);
    }

    #[test]
    fn explicit_euler_residual_is_one() {
        assert_eq!(residual_of("euler_explicit")[(0, 0)], 1.0);
        assert!(!is_multisymplectic(&builtin_tableau::<f64>("euler_explicit").unwrap(), 1e-12));
    }

    #[test]
    fn gauss_tableaux_satisfy_condition() {
        for name in ["gauss2", "gauss3"] {
            let m = residual_of(name);
            assert!(m.max_abs() < 1e-14, "{name}: {:?}", m);
            assert!(is_multisymplectic(&builtin_tableau::<f64>(name).unwrap(), 1e-12));
        }
    }

    #[test]
    fn gauss_abscissae_are_collocation_nodes() {
        let c = builtin_tableau::<f64>("gauss2").unwrap().c();
        let r = 3f64.sqrt() / 6.0;
        assert!((c[0] - (0.5 - r)).abs() < 1e-16);
        assert!((c[1] - (0.5 + r)).abs() < 1e-16);
        let c3 = builtin_tableau::<f64>("gauss3").unwrap().c();
        let r3 = 15f64.sqrt() / 10.0;
        assert!((c3[0] - (0.5 - r3)).abs() < 1e-15);
        assert!((c3[1] - 0.5).abs() < 1e-15);
        assert!((c3[2] - (0.5 + r3)).abs() < 1e-15);
    }

    #[test]
    fn rk4_residual_matrix() {
        // Frozen from exact rational evaluation: 36·M.
        let expect = [
            [1.0, -4.0, 2.0, 1.0],
            [-4.0, 4.0, -2.0, 2.0],
            [2.0, -2.0, 4.0, -4.0],
            [1.0, 2.0, -4.0, 1.0],
        ];
        let m = residual_of("rk4");
        for k in 0..4 {
            for j in 0..4 {
                assert!((36.0 * m[(k, j)] - expect[k][j]).abs() < 1e-14);
            }
        }
        assert!((m[(0, 0)] - 1.0 / 36.0).abs() < 1e-16);
        assert!((m.max_abs() - 1.0 / 9.0).abs() < 1e-15);
        assert!(!is_multisymplectic(&builtin_tableau::<f64>("rk4").unwrap(), 1e-12));
    }

    #[test]
    fn literal_form_agrees_for_symmetric_a_only() {
        let g2 = builtin_tableau::<f64>("gauss2").unwrap();
        assert!(condition_residual_literal(&g2).max_abs() > 1e-3);
        let mid = builtin_tableau::<f64>("midpoint").unwrap();
        assert_eq!(condition_residual_literal(&mid).max_abs(), 0.0);
    }

    #[test]
    fn unknown_name_lists_valid_names() {
        let err = builtin_tableau::<f64>("heun").unwrap_err().to_string();
        for n in BUILTIN_NAMES {
            assert!(err.contains(n));
        }
    }

    #[test]
    fn works_in_single_precision() {
        let t = builtin_tableau::<f32>("gauss2").unwrap();
        assert!(is_multisymplectic(&t, 1e-6));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let t = builtin_tableau::<f64>("gauss3").unwrap();
        let text = serde_json::to_string(&t.to_json()).unwrap();
        let back = Tableau::<f64>::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, t);

        let bad: TableauJson =
            serde_json::from_str(r#"{"stages": 2, "a": [[0.5]], "b": [1.0]}"#).unwrap();
        assert!(Tableau::<f64>::from_json(&bad).is_err());
        assert!(serde_json::from_str::<TableauJson>(r#"{"stages":1,"a":[[0.5]],"b":[1],"c":[0.5]}"#).is_err());
    }

    proptest! {
        #[test]
        fn one_stage_family_b_equals_twice_a(a in -10.0f64..10.0) {
            let t = Tableau::<f64>::from_f64(&[&[a]], &[2.0 * a]).unwrap();
            prop_assert_eq!(condition_residual(&t)[(0, 0)], 0.0);
        }

        #[test]
        fn diagonal_family_b_equals_twice_diag(d in proptest::collection::vec(-3.0f64..3.0, 1..5)) {
            let s = d.len();
            let mut a = Mat::<f64>::zeros(s, s);
            for i in 0..s { a[(i, i)] = d[i]; }
            let b: Vec<f64> = d.iter().map(|x| 2.0 * x).collect();
            let t = Tableau::new(a, b).unwrap();
            // Off-diagonal entries are b_k b_j, so only the diagonal vanishes in general.
            let m = condition_residual(&t);
            for i in 0..s { prop_assert_eq!(m[(i, i)], 0.0); }
        }

        #[test]
        fn residual_is_symmetric(
            a in proptest::collection::vec(-2.0f64..2.0, 9),
            b in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let rows: Vec<Vec<f64>> = a.chunks(3).map(<[f64]>::to_vec).collect();
            let t = Tableau::new(Mat::from_rows(&rows).unwrap(), b).unwrap();
            prop_assert!(condition_residual(&t).symmetry_residual() <= 1e-13);
        }

        #[test]
        fn check_is_monotone_in_tolerance(a in -1.0f64..1.0, b in -1.0f64..1.0, t1 in 0.0f64..1.0, extra in 0.0f64..1.0) {
            let t = Tableau::<f64>::from_f64(&[&[a]], &[b]).unwrap();
            if is_multisymplectic(&t, t1) {
                prop_assert!(is_multisymplectic(&t, t1 + extra));
            }
        }
    }
}
