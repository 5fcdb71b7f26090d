//! Experiment configuration: JSON schema, validation and construction of
//! the numerical objects.

use std::path::Path;
use std::sync::Arc;

use embspec_core::floquet::ModulusTolerance;
use embspec_core::ode::IntegratorConfig;
use embspec_core::potentials::{
    make_example5_with_beta, make_perturbation, MatrixField, Perturbation, PerturbationClass, Potential, Profile, ScalarFn,
};
use embspec_core::spectral::MatchingConfig;
use embspec_core::spline::CubicSpline;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::CliError;

fn default_beta() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub lambda0: Option<f64>,
    pub potential: PotentialSpec,
    #[serde(default)]
    pub perturbation: Option<PerturbationSpec>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub matching: MatchingConfig,
    #[serde(default)]
    pub floquet: FloquetSettings,
    #[serde(default)]
    pub bands: BandSettings,
    #[serde(default)]
    pub persist: PersistSettings,
    #[serde(default)]
    pub decay: DecaySettings,
}

/// A named potential or an object description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PotentialSpec {
    Name(String),
    Object(PotentialObject),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialObject {
    Example5,
    Mathieu {
        #[serde(default = "one")]
        q: f64,
    },
    Free {
        #[serde(default = "pi")]
        period: f64,
    },
    /// `A = A_p + A_c`, both sampled. `A_p` is interpolated by a periodic
    /// spline over one period, `A_c` by a natural spline and set to zero
    /// outside its table.
    Table {
        period: f64,
        periodic: MatrixTable,
        #[serde(default)]
        localized: Option<MatrixTable>,
    },
}

fn one() -> f64 {
    1.0
}

fn pi() -> f64 {
    std::f64::consts::PI
}

/// Samples `(x_i, A(x_i))`, each matrix given row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixTable {
    pub x: Vec<f64>,
    pub entries: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Name(String),
    Object(Profile),
}

impl ProfileSpec {
    pub fn profile(&self) -> Result<Profile, CliError> {
        match self {
            Self::Name(s) => Profile::from_name(s).map_err(|e| CliError::Config(e.to_string())),
            Self::Object(p) => Ok(p.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub class: PerturbationClass,
    pub profile: ProfileSpec,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FloquetSettings {
    pub tol_center: f64,
    /// Spectral parameter for `monodromy`; defaults to `lambda0`.
    pub lambda: Option<f64>,
}

impl Default for FloquetSettings {
    fn default() -> Self {
        Self {
            tol_center: embspec_core::floquet::DEFAULT_TOL_CENTER,
            lambda: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandSettings {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub samples: usize,
    /// Diagonal entry of `A_p` whose scalar band structure is scanned.
    pub component: usize,
}

impl Default for BandSettings {
    fn default() -> Self {
        Self {
            lambda_min: -1.0,
            lambda_max: 4.0,
            samples: 201,
            component: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// The perturbation profile as a `T_beta` coupling.
    Transversal,
    /// The same coupling with its components along the functional kernels
    /// removed.
    Tangent,
    /// The profile on the `(1,1)` entry.
    Diagonal,
}

impl Direction {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Transversal => "transversal",
            Self::Tangent => "tangent",
            Self::Diagonal => "diagonal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersistSettings {
    pub epsilons: Vec<f64>,
    pub directions: Vec<Direction>,
    /// Coupled component `j` of the `(1, j)` entry, 1-based as in `b_1j`.
    pub column: usize,
}

impl Default for PersistSettings {
    fn default() -> Self {
        Self {
            epsilons: vec![0.04, 0.02, 0.01],
            directions: vec![Direction::Transversal, Direction::Tangent, Direction::Diagonal],
            column: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecaySettings {
    pub probes: usize,
    pub dim: usize,
    pub horizon: f64,
    pub fit_tol: f64,
}

impl Default for DecaySettings {
    fn default() -> Self {
        Self {
            probes: 20,
            dim: 2,
            horizon: 50.0,
            fit_tol: 1e-2,
        }
    }
}

/// A loaded configuration with its raw text.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub raw: String,
}

/// 1-based line and column of the first occurrence of `"key"`.
fn locate(raw: &str, key: &str) -> Option<(usize, usize)> {
    let needle = format!("\"{key}\"");
    raw.lines()
        .enumerate()
        .find_map(|(i, l)| l.find(&needle).map(|c| (i + 1, c + 1)))
}

fn at(raw: &str, key: &str, msg: String) -> CliError {
    match locate(raw, key) {
        Some((l, c)) => CliError::Config(format!("line {l}, column {c}: {msg}")),
        None => CliError::Config(msg),
    }
}

impl LoadedConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&raw)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(raw: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig = serde_json::from_str(raw).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        let loaded = Self {
            config,
            raw: raw.to_owned(),
        };
        loaded.validate()?;
        Ok(loaded)
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let raw = &self.raw;
        if !(c.beta > 1.0) {
            return Err(at(
                raw,
                "beta",
                format!(
                    "beta = {} is not allowed: the weighted space X_beta with weight (1+|x|)^beta requires beta > 1",
                    c.beta
                ),
            ));
        }
        if c.n == 0 {
            return Err(at(raw, "n", "n must be at least 1".into()));
        }
        let i = &c.integrator;
        for (key, v) in [
            ("rel_tol", i.rel_tol),
            ("abs_tol", i.abs_tol),
            ("max_step", i.max_step),
            ("renorm_interval", i.renorm_interval),
        ] {
            if !(v > 0.0) {
                return Err(at(raw, key, format!("integrator {key} must be positive, got {v}")));
            }
        }
        c.matching
            .validate()
            .map_err(|e| at(raw, "matching", e.to_string()))?;
        if !(c.floquet.tol_center > 0.0 && c.floquet.tol_center < 0.1) {
            return Err(at(raw, "tol_center", format!("tol_center must lie in (0, 0.1), got {}", c.floquet.tol_center)));
        }
        let b = &c.bands;
        if !(b.lambda_max > b.lambda_min) || b.samples < 2 {
            return Err(at(raw, "bands", "band scan needs lambda_max > lambda_min and at least 2 samples".into()));
        }
        if b.component >= c.n {
            return Err(at(raw, "component", format!("component {} out of range for n = {}", b.component, c.n)));
        }
        let p = &c.persist;
        if p.epsilons.len() < 3
            || p.epsilons.iter().any(|e| !(*e > 0.0))
            || p.epsilons.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(at(raw, "epsilons", "epsilons must be at least three positive, strictly decreasing values".into()));
        }
        if c.n >= 2 && (p.column < 2 || p.column > c.n) {
            return Err(at(raw, "column", format!("coupling column must lie in 2..={}, got {}", c.n, p.column)));
        }
        let d = &c.decay;
        if d.dim < 2 || !(d.horizon > 0.0) || !(d.fit_tol > 0.0) {
            return Err(at(raw, "decay", "decay probes need dim >= 2, positive horizon and fit_tol".into()));
        }
        if let Some(pert) = &c.perturbation {
            if !pert.epsilon.is_finite() {
                return Err(at(raw, "epsilon", "epsilon must be finite".into()));
            }
            pert.profile.profile().map_err(|e| at(raw, "profile", e.to_string()))?;
        }
        let pot = self.potential()?;
        if pot.n != c.n {
            return Err(at(raw, "n", format!("n = {} but the potential has {} components", c.n, pot.n)));
        }
        Ok(())
    }

    pub fn integrator(&self) -> IntegratorConfig {
        self.config.integrator
    }

    pub fn tolerance(&self) -> ModulusTolerance {
        ModulusTolerance::new(self.config.floquet.tol_center).expect("validated")
    }

    pub fn is_example5(&self) -> bool {
        matches!(
            &self.config.potential,
            PotentialSpec::Name(s) if s == "example5"
        ) || matches!(&self.config.potential, PotentialSpec::Object(PotentialObject::Example5))
    }

    pub fn lambda0(&self) -> Result<f64, CliError> {
        self.config
            .lambda0
            .ok_or_else(|| CliError::Config("this command needs \"lambda0\" in the config".into()))
    }

    pub fn potential(&self) -> Result<Potential, CliError> {
        let c = &self.config;
        let obj = match &c.potential {
            PotentialSpec::Name(s) => match s.as_str() {
                "example5" => PotentialObject::Example5,
                "mathieu" => PotentialObject::Mathieu { q: 1.0 },
                "free" => PotentialObject::Free { period: pi() },
                other => {
                    return Err(at(
                        &self.raw,
                        "potential",
                        format!("unknown potential '{other}' (expected example5, mathieu, free or an object)"),
                    ))
                }
            },
            PotentialSpec::Object(o) => o.clone(),
        };
        let bad = |e: embspec_core::Error| at(&self.raw, "potential", e.to_string());
        match obj {
            PotentialObject::Example5 => {
                let l0 = c
                    .lambda0
                    .ok_or_else(|| at(&self.raw, "potential", "example5 needs \"lambda0\"".into()))?;
                Ok(make_example5_with_beta(l0, c.beta).potential)
            }
            PotentialObject::Mathieu { q } => {
                let vp: ScalarFn = Arc::new(move |x| 2.0 * q * (2.0 * x).cos());
                Potential::scalar_periodic(vp, pi(), c.beta).map_err(bad)
            }
            PotentialObject::Free { period } => {
                Potential::new(MatrixField::zero(c.n), MatrixField::zero(c.n), period, c.beta).map_err(bad)
            }
            PotentialObject::Table {
                period,
                periodic,
                localized,
            } => {
                let ap = table_field(&periodic, true).map_err(bad)?;
                if let Some(w) = periodic.x.first().zip(periodic.x.last()).map(|(a, b)| b - a) {
                    if (w - period).abs() > 1e-12 * period.max(1.0) {
                        return Err(at(
                            &self.raw,
                            "periodic",
                            format!("periodic table spans {w}, expected one period {period}"),
                        ));
                    }
                }
                let a = match localized {
                    Some(t) => ap.add(&table_field(&t, false).map_err(bad)?),
                    None => ap.clone(),
                };
                Potential::new(a, ap, period, c.beta).map_err(bad)
            }
        }
    }

    pub fn perturbation(&self) -> Result<Option<Perturbation>, CliError> {
        let c = &self.config;
        match &c.perturbation {
            None => Ok(None),
            Some(p) => {
                let profile = p.profile.profile()?;
                make_perturbation(c.n, p.class, &profile, p.epsilon, c.beta)
                    .map(Some)
                    .map_err(|e| at(&self.raw, "perturbation", e.to_string()))
            }
        }
    }

    /// Profile used by `persist`: the configured one or `sech^2`.
    pub fn persist_profile(&self) -> Result<Profile, CliError> {
        match &self.config.perturbation {
            Some(p) => p.profile.profile(),
            None => Ok(Profile::Sech2 { center: 0.0, width: 1.0 }),
        }
    }
}

fn table_field(t: &MatrixTable, periodic: bool) -> embspec_core::Result<MatrixField> {
    use embspec_core::Error;
    if t.x.len() != t.entries.len() {
        return Err(Error::InvalidInput(format!(
            "table has {} abscissae but {} matrices",
            t.x.len(),
            t.entries.len()
        )));
    }
    let len = t.entries.first().map_or(0, |e| e.len());
    let n = (len as f64).sqrt().round() as usize;
    if n == 0 || n * n != len || t.entries.iter().any(|e| e.len() != len) {
        return Err(Error::InvalidInput("table entries must all be square matrices of one size".into()));
    }
    let mut splines = Vec::with_capacity(len);
    for k in 0..len {
        let ys: Vec<f64> = t.entries.iter().map(|e| e[k]).collect();
        splines.push(if periodic {
            CubicSpline::periodic(t.x.clone(), ys)?
        } else {
            CubicSpline::natural(t.x.clone(), ys)?
        });
    }
    let (lo, hi) = (t.x[0], *t.x.last().unwrap());
    Ok(MatrixField::new(n, move |x| {
        if !periodic && (x < lo || x > hi) {
            return DMatrix::zeros(n, n);
        }
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = splines[i * n + j].eval(x);
            }
        }
        m
    }))
}
