//! Strict JSON run configurations. Unknown keys are rejected.

use std::path::Path;

use mssrk::engine::{RunOptions, SolverConfig, SolverMethod};
use mssrk::noise::QWienerJson;
use mssrk::system::{make_quadratic_system, transport2, QuadraticSpec};
use mssrk::tableau::TableauJson;
use mssrk::{builtin_tableau, Mat, SystemSpec, Tableau};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::CliError;

/// Reads and parses a JSON document, returning the typed config and the raw
/// value for echoing into metadata.
pub fn load<C: DeserializeOwned>(path: &Path) -> Result<(C, serde_json::Value), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse<C: DeserializeOwned>(text: &str) -> Result<(C, serde_json::Value), CliError> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    let typed = serde_json::from_value(raw.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((typed, raw))
}

/// A built-in tableau name or inline coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TableauRef {
    Name(String),
    Inline(TableauJson),
}

impl TableauRef {
    pub fn build(&self) -> Result<Tableau<f64>, CliError> {
        match self {
            TableauRef::Name(n) => builtin_tableau(n),
            TableauRef::Inline(j) => Tableau::from_json(j),
        }
        .map_err(|e| CliError::Config(e.to_string()))
    }
}

/// `"transport2"` with optional coefficients, or explicit matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemJson {
    Named(NamedSystem),
    Matrices(MatrixSystem),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSystem {
    pub name: String,
    /// `S1 = (mass/2)|z|²`.
    #[serde(default)]
    pub mass: f64,
    /// `S2 = (lambda/2)|z|²`.
    #[serde(default)]
    pub lambda: f64,
}

/// `S1 = ½ zᵀAz`, `S2 = (lambda/2) zᵀBz`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSystem {
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
    #[serde(rename = "L")]
    pub l: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(default = "one")]
    pub lambda: f64,
}

fn one() -> f64 {
    1.0
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Mat<f64>, CliError> {
    Mat::from_rows(rows).ok_or_else(|| CliError::Config(format!("{what} has rows of different lengths")))
}

impl SystemJson {
    pub fn build(&self) -> Result<SystemSpec<f64>, CliError> {
        match self {
            SystemJson::Named(n) => match n.name.as_str() {
                "transport2" => Ok(transport2(n.mass, n.lambda)),
                other => Err(CliError::Config(format!(
                    "unknown system `{other}` (built-in 1D system: transport2)"
                ))),
            },
            SystemJson::Matrices(m) => {
                let l = m
                    .l
                    .iter()
                    .enumerate()
                    .map(|(i, rows)| matrix(rows, &format!("L[{i}]")))
                    .collect::<Result<Vec<_>, _>>()?;
                make_quadratic_system(
                    "custom",
                    matrix(&m.k, "K")?,
                    l,
                    QuadraticSpec {
                        a: matrix(&m.a, "A")?,
                        b: matrix(&m.b, "B")?.scaled(m.lambda),
                    },
                )
                .map_err(|e| CliError::Config(e.to_string()))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodJson {
    #[default]
    Newton,
    FixedPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverJson {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub method: MethodJson,
}

fn default_tol() -> f64 {
    1e-13
}

fn default_max_iter() -> usize {
    500
}

impl Default for SolverJson {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_max_iter(),
            method: MethodJson::Newton,
        }
    }
}

impl SolverJson {
    pub fn build(&self, tol_override: Option<f64>) -> Result<SolverConfig<f64>, CliError> {
        let tol = tol_override.unwrap_or(self.tol);
        if tol <= 0.0 || !tol.is_finite() {
            return Err(CliError::Config(format!("solver tolerance must be positive, got {tol}")));
        }
        if self.max_iter == 0 {
            return Err(CliError::Config("max_iter must be at least 1".into()));
        }
        Ok(SolverConfig {
            tol,
            max_iter: self.max_iter,
            method: match self.method {
                MethodJson::Newton => SolverMethod::Newton,
                MethodJson::FixedPoint => SolverMethod::FixedPoint,
            },
            ..SolverConfig::default()
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsJson {
    #[serde(default)]
    pub ms_residual: bool,
    #[serde(default)]
    pub tangent_seed: u64,
    #[serde(default)]
    pub snapshot_stride: usize,
}

impl DiagnosticsJson {
    pub fn options(&self) -> RunOptions {
        RunOptions {
            ms_residual: self.ms_residual,
            tangent_seed: self.tangent_seed,
            snapshot_stride: self.snapshot_stride,
        }
    }
}

/// `z_c(x) = offset_c + Σ amplitude · sin(2π k·x/ℓ + phase)` over the listed modes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialJson {
    #[serde(default)]
    pub offset: Vec<f64>,
    #[serde(default)]
    pub modes: Vec<ModeJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeJson {
    pub component: usize,
    /// One integer wavenumber per spatial axis.
    pub wavenumber: Vec<i64>,
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

impl InitialJson {
    pub fn validate(&self, n: usize, dims: usize) -> Result<(), CliError> {
        if !self.offset.is_empty() && self.offset.len() != n {
            return Err(CliError::Config(format!("initial offset has {} entries, expected {n}", self.offset.len())));
        }
        for m in &self.modes {
            if m.component >= n || m.wavenumber.len() != dims {
                return Err(CliError::Config(format!(
                    "initial mode needs component < {n} and {dims} wavenumbers"
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, n: usize, x: &[f64], lengths: &[f64]) -> Vec<f64> {
        let mut z = if self.offset.is_empty() {
            vec![0.0; n]
        } else {
            self.offset.clone()
        };
        for m in &self.modes {
            let arg: f64 = m
                .wavenumber
                .iter()
                .zip(x.iter().zip(lengths))
                .map(|(&k, (&xi, &l))| 2.0 * std::f64::consts::PI * k as f64 * xi / l)
                .sum();
            z[m.component] += m.amplitude * (arg + m.phase).sin();
        }
        z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid1dJson {
    pub cells: usize,
    pub h: f64,
    pub steps: usize,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tableaux1dJson {
    pub time: TableauRef,
    pub space: TableauRef,
}

/// Configuration of `run-1d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Run1dConfig {
    #[serde(default = "default_name_1d")]
    pub name: String,
    pub system: SystemJson,
    pub grid: Grid1dJson,
    pub tableaux: Tableaux1dJson,
    pub noise: QWienerJson,
    #[serde(default)]
    pub initial: InitialJson,
    #[serde(default)]
    pub solver: SolverJson,
    #[serde(default)]
    pub diagnostics: DiagnosticsJson,
    /// Seed sweep; when empty the noise seed is used.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

fn default_name_1d() -> String {
    "run1d".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableauxMaxwellJson {
    pub time: TableauRef,
    pub x: TableauRef,
    pub y: TableauRef,
    pub z: TableauRef,
}

/// Configuration of `run-maxwell`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaxwellConfig {
    #[serde(default = "default_name_maxwell")]
    pub name: String,
    pub lambda: f64,
    pub grid: [usize; 3],
    pub dx: [f64; 3],
    pub tau: f64,
    pub steps: usize,
    pub tableaux: TableauxMaxwellJson,
    pub noise: QWienerJson,
    #[serde(default)]
    pub initial: InitialJson,
    #[serde(default)]
    pub solver: SolverJson,
    #[serde(default)]
    pub diagnostics: DiagnosticsJson,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

fn default_name_maxwell() -> String {
    "maxwell".into()
}

/// Configuration of `sample-noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_name_noise")]
    pub name: String,
    pub noise: QWienerJson,
    /// Evaluation points, one coordinate list each.
    pub points: Vec<Vec<f64>>,
    pub steps: usize,
    pub tau: f64,
}

fn default_name_noise() -> String {
    "noise".into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_keys() {
        let text = r#"{"noise": {"J": 1, "eta": [1.0], "domain_length": 1.0}, "points": [[0.5]], "steps": 2, "tau": 0.1, "colour": 1}"#;
        assert!(matches!(parse::<NoiseConfig>(text), Err(CliError::Config(_))));
        let ok = text.replace(", \"colour\": 1", "");
        assert!(parse::<NoiseConfig>(&ok).is_ok());
    }

    #[test]
    fn tableau_by_name_or_inline() {
        let t: TableauRef = serde_json::from_str(r#""gauss2""#).unwrap();
        assert_eq!(t.build().unwrap().stages(), 2);
        let t: TableauRef = serde_json::from_str(r#"{"stages": 1, "a": [[0.5]], "b": [1.0]}"#).unwrap();
        assert_eq!(t.build().unwrap().b(), &[1.0]);
        let t: TableauRef = serde_json::from_str(r#""gauss9""#).unwrap();
        assert!(t.build().is_err());
    }

    #[test]
    fn matrix_system_scales_b_by_lambda() {
        let s: SystemJson = serde_json::from_str(
            r#"{"K": [[0,-1],[1,0]], "L": [[[0,1],[-1,0]]], "A": [[0,0],[0,0]], "B": [[1,0],[0,1]], "lambda": 3}"#,
        )
        .unwrap();
        let sys = s.build().unwrap();
        assert_eq!(sys.grad_s2(&[1.0, 2.0]), vec![3.0, 6.0]);
        let named: SystemJson = serde_json::from_str(r#"{"name": "transport2", "mass": 2}"#).unwrap();
        assert_eq!(named.build().unwrap().grad_s1(&[1.0, 0.0]), vec![2.0, 0.0]);
    }

    #[test]
    fn initial_modes_evaluate() {
        let init = InitialJson {
            offset: vec![1.0, 0.0],
            modes: vec![ModeJson {
                component: 1,
                wavenumber: vec![1],
                amplitude: 2.0,
                phase: 0.0,
            }],
        };
        init.validate(2, 1).unwrap();
        let z = init.eval(2, &[0.25], &[1.0]);
        assert_eq!(z[0], 1.0);
        assert!((z[1] - 2.0).abs() < 1e-15);
        assert!(init.validate(3, 1).is_err());
    }
}
