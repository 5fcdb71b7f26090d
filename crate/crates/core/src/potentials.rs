//! Potentials `A`, their periodic limits `A_p`, perturbations `B` and the
//! weighted sup-norm `sup |F(x)| (1 + |x|)^beta` that measures their decay.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::CoefficientField;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// Symmetric `n x n` matrix-valued function of `x`.
#[derive(Clone)]
pub struct MatrixField {
    n: usize,
    f: Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>,
}

impl fmt::Debug for MatrixField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MatrixField({}x{})", self.n, self.n)
    }
}

impl MatrixField {
    pub fn new<F>(n: usize, f: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self { n, f: Arc::new(f) }
    }

    pub fn zero(n: usize) -> Self {
        Self::new(n, move |_| DMatrix::zeros(n, n))
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        Self::new(n, move |_| m.clone())
    }

    /// Diagonal field with the given scalar entries.
    pub fn diagonal(entries: Vec<ScalarFn>) -> Self {
        let n = entries.len();
        Self::new(n, move |x| DMatrix::from_fn(n, n, |i, j| if i == j { entries[i](x) } else { 0.0 }))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn eval(&self, x: f64) -> DMatrix<f64> {
        (self.f)(x)
    }

    pub fn scaled(&self, c: f64) -> Self {
        let f = self.f.clone();
        Self::new(self.n, move |x| f(x) * c)
    }

    pub fn add(&self, other: &MatrixField) -> Self {
        assert_eq!(self.n, other.n);
        let (a, b) = (self.f.clone(), other.f.clone());
        Self::new(self.n, move |x| a(x) + b(x))
    }

    pub fn sub(&self, other: &MatrixField) -> Self {
        self.add(&other.scaled(-1.0))
    }

    /// Largest symmetry defect `max |F - F^T|` over the samples.
    pub fn symmetry_defect(&self, samples: impl IntoIterator<Item = f64>) -> f64 {
        samples
            .into_iter()
            .map(|x| {
                let m = self.eval(x);
                (&m - m.transpose()).amax()
            })
            .fold(0.0, f64::max)
    }
}

/// `x -> [[0, I], [F(x) - lambda I, 0]]`, the first-order form of
/// `-u'' + F u = lambda u`.
pub fn first_order_field(potential: &MatrixField, lambda: f64) -> CoefficientField {
    let n = potential.dim();
    let pot = potential.clone();
    CoefficientField::from_fill(2 * n, move |x, out| {
        let a = pot.eval(x);
        for i in 0..n {
            out[(i, n + i)] = 1.0;
            for j in 0..n {
                out[(n + i, j)] = a[(i, j)];
            }
            out[(n + i, i)] -= lambda;
        }
    })
}

/// Result of a weighted sup-norm evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormEstimate {
    pub value: f64,
    pub argmax: f64,
    /// Maximum over the sampling grid before local refinement.
    pub grid_value: f64,
    /// `|grid maximum - maximum over every other grid point|`.
    pub refinement_defect: f64,
}

fn weighted_max_norm(f: &MatrixField, beta: f64, x: f64) -> Result<f64> {
    let m = f.eval(x);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite matrix entry at x = {x}")));
    }
    Ok(m.amax() * (1.0 + x.abs()).powf(beta))
}

/// `sup_{|x| <= window} max_ij |F_ij(x)| (1 + |x|)^beta`, by dense sampling
/// at `density` points per unit length followed by golden-section
/// refinement around the best sample.
pub fn xbeta_norm(f: &MatrixField, beta: f64, window: f64, density: f64) -> Result<NormEstimate> {
    if !(beta > 1.0) {
        return Err(Error::InvalidInput(format!("beta must exceed 1, got {beta}")));
    }
    if !(window > 0.0) || !(density > 0.0) {
        return Err(Error::InvalidInput("window and density must be positive".into()));
    }
    let count = (2.0 * window * density).ceil() as usize + 1;
    let step = 2.0 * window / (count - 1) as f64;
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut coarse = f64::NEG_INFINITY;
    for i in 0..count {
        let x = -window + i as f64 * step;
        let v = weighted_max_norm(f, beta, x)?;
        if v > best.1 {
            best = (i, v);
        }
        if i % 2 == 0 {
            coarse = coarse.max(v);
        }
    }
    let centre = -window + best.0 as f64 * step;
    let lo = (centre - step).max(-window);
    let hi = (centre + step).min(window);
    let (arg, refined) = golden_max(|x| weighted_max_norm(f, beta, x), lo, hi, 1e-13)?;
    let (value, argmax) = if refined > best.1 { (refined, arg) } else { (best.1, centre) };
    Ok(NormEstimate {
        value,
        argmax,
        grid_value: best.1,
        refinement_defect: (best.1 - coarse).abs(),
    })
}

/// Golden-section search for a maximum on `[a, b]`.
pub(crate) fn golden_max<F>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while (b - a).abs() > tol * (1.0 + a.abs().max(b.abs())) {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    let x = 0.5 * (a + b);
    Ok((x, f(x)?.max(fc).max(fd)))
}

/// Norm on `[-window, window]` and on twice that window; fails when the
/// two differ by more than `1e-10` relative, i.e. when `F` does not decay
/// like `(1 + |x|)^-beta`.
pub fn stabilized_xbeta_norm(f: &MatrixField, beta: f64, window: f64, density: f64) -> Result<NormEstimate> {
    let inner = xbeta_norm(f, beta, window, density)?;
    let outer = xbeta_norm(f, beta, 2.0 * window, density)?;
    if (outer.value - inner.value).abs() > 1e-10 * inner.value.max(1.0) {
        return Err(Error::InsufficientDecay {
            beta,
            inner: inner.value,
            outer: outer.value,
        });
    }
    Ok(outer)
}

pub const DEFAULT_NORM_WINDOW: f64 = 30.0;
pub const DEFAULT_NORM_DENSITY: f64 = 200.0;

/// Potential `A` of the operator `-d^2/dx^2 + A(x)` with its periodic limit.
#[derive(Clone, Debug)]
pub struct Potential {
    pub n: usize,
    pub a: MatrixField,
    pub ap: MatrixField,
    pub period: f64,
    pub beta: f64,
}

impl Potential {
    /// Validates symmetry and periodicity on a sample grid.
    pub fn new(a: MatrixField, ap: MatrixField, period: f64, beta: f64) -> Result<Self> {
        if a.dim() != ap.dim() {
            return Err(Error::InvalidInput("A and A_p have different dimensions".into()));
        }
        if !(period > 0.0) {
            return Err(Error::InvalidInput(format!("period must be positive, got {period}")));
        }
        if !(beta > 1.0) {
            return Err(Error::InvalidInput(format!("beta must exceed 1, got {beta}")));
        }
        let pot = Self {
            n: a.dim(),
            a,
            ap,
            period,
            beta,
        };
        let samples: Vec<f64> = (0..=400).map(|i| -20.0 + 0.1 * i as f64 + 1e-3).collect();
        let sym = pot.a.symmetry_defect(samples.iter().cloned()).max(pot.ap.symmetry_defect(samples.iter().cloned()));
        if sym > 0.0 {
            return Err(Error::InvalidInput(format!("potential is not symmetric (defect {sym:e})")));
        }
        let per = samples
            .iter()
            .map(|&x| (pot.ap.eval(x + period) - pot.ap.eval(x)).amax())
            .fold(0.0, f64::max);
        if per >= 1e-12 {
            return Err(Error::InvalidInput(format!(
                "A_p is not {period}-periodic (defect {per:e})"
            )));
        }
        Ok(pot)
    }

    /// Scalar periodic potential, `A = A_p = vp`.
    pub fn scalar_periodic(vp: ScalarFn, period: f64, beta: f64) -> Result<Self> {
        let f = MatrixField::diagonal(vec![vp]);
        Self::new(f.clone(), f, period, beta)
    }

    /// Mathieu potential `2 q cos(2x)` with period pi.
    pub fn mathieu(q: f64) -> Self {
        Self::scalar_periodic(Arc::new(move |x| 2.0 * q * (2.0 * x).cos()), PI, 2.0)
            .expect("Mathieu potential is valid")
    }

    /// Zero potential with the given nominal period.
    pub fn free(n: usize, period: f64) -> Self {
        Self::new(MatrixField::zero(n), MatrixField::zero(n), period, 2.0).expect("zero potential is valid")
    }

    /// `A - A_p`.
    pub fn localized_part(&self) -> MatrixField {
        self.a.sub(&self.ap)
    }

    /// Checks that `A - A_p` has a finite, window-stable weighted norm.
    pub fn check_asymptotic_periodicity(&self) -> Result<NormEstimate> {
        stabilized_xbeta_norm(&self.localized_part(), self.beta, DEFAULT_NORM_WINDOW, DEFAULT_NORM_DENSITY)
    }

    /// First-order field of `-u'' + (A + B) u = lambda u`.
    pub fn full_field(&self, lambda: f64, b: Option<&Perturbation>) -> CoefficientField {
        match b {
            Some(b) => first_order_field(&self.a.add(&b.field()), lambda),
            None => first_order_field(&self.a, lambda),
        }
    }

    /// First-order field of the system at infinity, `A` replaced by `A_p`.
    pub fn field_at_infinity(&self, lambda: f64) -> CoefficientField {
        first_order_field(&self.ap, lambda)
    }

    /// Scalar periodic potential on the diagonal entry `component`.
    pub fn periodic_component(&self, component: usize) -> Result<ScalarFn> {
        if component >= self.n {
            return Err(Error::InvalidInput(format!(
                "component {component} out of range for n = {}",
                self.n
            )));
        }
        let ap = self.ap.clone();
        Ok(Arc::new(move |x| ap.eval(x)[(component, component)]))
    }
}

/// Structural class of a perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationClass {
    /// Any symmetric matrix.
    Full,
    /// Diagonal matrices.
    Diagonal,
    /// A single coupling `b_1j = b_j1`, `j > 1`, zero elsewhere.
    OffdiagRow1,
    /// Zero diagonal with couplings only in the first row and column.
    TBeta,
}

impl fmt::Display for PerturbationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Full => "full",
            Self::Diagonal => "diagonal",
            Self::OffdiagRow1 => "offdiag_row1",
            Self::TBeta => "t_beta",
        };
        f.write_str(s)
    }
}

impl PerturbationClass {
    /// Whether entry `(i, j)` (0-based) may be nonzero.
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            Self::Full => true,
            Self::Diagonal => i == j,
            Self::OffdiagRow1 | Self::TBeta => i != j && (i == 0 || j == 0),
        }
    }
}

/// Named scalar profiles for perturbation entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    /// `sech^2((x - center) / width)`
    Sech2 {
        #[serde(default)]
        center: f64,
        #[serde(default = "one")]
        width: f64,
    },
    /// `tanh(x/w) sech^2(x/w)`, odd about `center`.
    TanhSech2 {
        #[serde(default)]
        center: f64,
        #[serde(default = "one")]
        width: f64,
    },
    /// `exp(-((x - center)/width)^2)`
    Gaussian {
        #[serde(default)]
        center: f64,
        #[serde(default = "one")]
        width: f64,
    },
    /// Smooth bump supported on `[a, b]`, peak value 1.
    Bump { a: f64, b: f64 },
    /// `(1 + |x|)^-exponent`.
    Power { exponent: f64 },
    /// Natural cubic spline through the table, zero outside it.
    Table { x: Vec<f64>, values: Vec<f64> },
}

fn one() -> f64 {
    1.0
}

impl Profile {
    /// Parses a bare profile name with default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "sech2" => Self::Sech2 { center: 0.0, width: 1.0 },
            "tanh_sech2" => Self::TanhSech2 { center: 0.0, width: 1.0 },
            "gaussian" => Self::Gaussian { center: 0.0, width: 1.0 },
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown profile '{other}' (expected sech2, tanh_sech2, gaussian, or an object)"
                )))
            }
        })
    }

    pub fn to_fn(&self) -> Result<ScalarFn> {
        Ok(match *self {
            Self::Sech2 { center, width } => {
                positive_width(width)?;
                Arc::new(move |x| sech((x - center) / width).powi(2))
            }
            Self::TanhSech2 { center, width } => {
                positive_width(width)?;
                Arc::new(move |x| {
                    let t = (x - center) / width;
                    t.tanh() * sech(t).powi(2)
                })
            }
            Self::Gaussian { center, width } => {
                positive_width(width)?;
                Arc::new(move |x| (-((x - center) / width).powi(2)).exp())
            }
            Self::Bump { a, b } => {
                if !(b > a) {
                    return Err(Error::InvalidInput(format!("bump support [{a}, {b}] is empty")));
                }
                Arc::new(move |x| {
                    let t = (2.0 * x - a - b) / (b - a);
                    if t.abs() >= 1.0 {
                        0.0
                    } else {
                        (1.0 - 1.0 / (1.0 - t * t)).exp()
                    }
                })
            }
            Self::Power { exponent } => Arc::new(move |x| (1.0 + x.abs()).powf(-exponent)),
            Self::Table { ref x, ref values } => {
                let spline = crate::spline::CubicSpline::natural(x.clone(), values.clone())?;
                let (lo, hi) = (spline.lower(), spline.upper());
                Arc::new(move |t| if t < lo || t > hi { 0.0 } else { spline.eval(t) })
            }
        })
    }
}

fn positive_width(w: f64) -> Result<()> {
    if w > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("profile width must be positive, got {w}")))
    }
}

pub fn sech(x: f64) -> f64 {
    // 2 e^{-|x|} / (1 + e^{-2|x|}) avoids overflow of cosh
    let e = (-x.abs()).exp();
    2.0 * e / (1.0 + e * e)
}

/// A symmetric, decaying perturbation `epsilon * B(x)` of a given class.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub n: usize,
    pub class: PerturbationClass,
    pub beta: f64,
    pub epsilon: f64,
    shape: MatrixField,
}

impl Perturbation {
    /// Builds `epsilon * B` with the listed upper-triangle entries
    /// `(i, j, profile)`; the lower triangle is filled by symmetry.
    pub fn from_entries(
        n: usize,
        class: PerturbationClass,
        entries: Vec<(usize, usize, ScalarFn)>,
        epsilon: f64,
        beta: f64,
    ) -> Result<Self> {
        if !(beta > 1.0) {
            return Err(Error::InvalidInput(format!("beta must exceed 1, got {beta}")));
        }
        if !epsilon.is_finite() {
            return Err(Error::InvalidInput("epsilon must be finite".into()));
        }
        for (i, j, _) in &entries {
            if *i >= n || *j >= n {
                return Err(Error::InvalidInput(format!("entry ({i}, {j}) out of range for n = {n}")));
            }
            if !class.allows(*i, *j) {
                return Err(Error::InvalidInput(format!(
                    "entry ({i}, {j}) is not allowed in class {class}"
                )));
            }
        }
        if class == PerturbationClass::OffdiagRow1 && entries.len() > 1 {
            return Err(Error::InvalidInput("offdiag_row1 carries a single coupling".into()));
        }
        let shape = MatrixField::new(n, move |x| {
            let mut m = DMatrix::zeros(n, n);
            for (i, j, f) in &entries {
                let v = f(x);
                m[(*i, *j)] = v;
                m[(*j, *i)] = v;
            }
            m
        });
        let p = Self {
            n,
            class,
            beta,
            epsilon,
            shape,
        };
        stabilized_xbeta_norm(&p.shape, beta, DEFAULT_NORM_WINDOW, DEFAULT_NORM_DENSITY)?;
        Ok(p)
    }

    /// Wraps an arbitrary field, checking class structure and symmetry on samples.
    pub fn from_field(class: PerturbationClass, shape: MatrixField, epsilon: f64, beta: f64) -> Result<Self> {
        let n = shape.dim();
        let samples: Vec<f64> = (0..=600).map(|i| -30.0 + 0.1 * i as f64 + 1e-3).collect();
        for &x in &samples {
            let m = shape.eval(x);
            for i in 0..n {
                for j in 0..n {
                    if m[(i, j)] != m[(j, i)] {
                        return Err(Error::InvalidInput(format!("perturbation is not symmetric at x = {x}")));
                    }
                    if m[(i, j)] != 0.0 && !class.allows(i, j) {
                        return Err(Error::InvalidInput(format!(
                            "entry ({i}, {j}) is nonzero at x = {x}, not allowed in class {class}"
                        )));
                    }
                }
            }
        }
        stabilized_xbeta_norm(&shape, beta, DEFAULT_NORM_WINDOW, DEFAULT_NORM_DENSITY)?;
        Ok(Self {
            n,
            class,
            beta,
            epsilon,
            shape,
        })
    }

    pub fn zero(n: usize, beta: f64) -> Self {
        Self {
            n,
            class: PerturbationClass::Full,
            beta,
            epsilon: 0.0,
            shape: MatrixField::zero(n),
        }
    }

    /// Unscaled profile matrix `B`.
    pub fn shape(&self) -> &MatrixField {
        &self.shape
    }

    /// `epsilon * B` as a matrix field.
    pub fn field(&self) -> MatrixField {
        self.shape.scaled(self.epsilon)
    }

    pub fn eval(&self, x: f64) -> DMatrix<f64> {
        self.shape.eval(x) * self.epsilon
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    /// Weighted norm of `epsilon * B`.
    pub fn norm(&self) -> Result<NormEstimate> {
        let mut est = xbeta_norm(&self.shape, self.beta, DEFAULT_NORM_WINDOW, DEFAULT_NORM_DENSITY)?;
        let s = self.epsilon.abs();
        est.value *= s;
        est.grid_value *= s;
        est.refinement_defect *= s;
        Ok(est)
    }

    /// Same direction with the shape rescaled to unit weighted norm and
    /// `epsilon = 1`.
    pub fn normalized(&self) -> Result<Self> {
        let nrm = xbeta_norm(&self.shape, self.beta, DEFAULT_NORM_WINDOW, DEFAULT_NORM_DENSITY)?.value;
        if nrm == 0.0 {
            return Err(Error::InvalidInput("cannot normalize a zero perturbation".into()));
        }
        Ok(Self {
            shape: self.shape.scaled(1.0 / nrm),
            epsilon: 1.0,
            ..self.clone()
        })
    }
}

/// Builds a perturbation of the given class from one profile. The profile
/// is placed at `(0,0)` for `diagonal`, at `(0,1)` for `offdiag_row1`, on
/// every first-row coupling for `t_beta`, and on every entry for `full`.
pub fn make_perturbation(n: usize, class: PerturbationClass, profile: &Profile, epsilon: f64, beta: f64) -> Result<Perturbation> {
    let f = profile.to_fn()?;
    let entries: Vec<(usize, usize, ScalarFn)> = match class {
        PerturbationClass::Diagonal => vec![(0, 0, f)],
        PerturbationClass::OffdiagRow1 => {
            if n < 2 {
                return Err(Error::InvalidInput("offdiag_row1 needs n >= 2".into()));
            }
            vec![(0, 1, f)]
        }
        PerturbationClass::TBeta => {
            if n < 2 {
                return Err(Error::InvalidInput("t_beta needs n >= 2".into()));
            }
            (1..n).map(|j| (0, j, f.clone())).collect()
        }
        PerturbationClass::Full => (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).map(|(i, j)| (i, j, f.clone())).collect(),
    };
    Perturbation::from_entries(n, class, entries, epsilon, beta)
}

/// The bundled two-component example: a reflectionless `sech^2` well
/// carrying a bound state, decoupled from a Mathieu channel whose band
/// contains that bound state's energy.
#[derive(Clone, Debug)]
pub struct Example5 {
    pub lambda0: f64,
    pub potential: Potential,
    /// Unit-norm eigenfunction `(sech(x)/sqrt 2, 0)`.
    pub eigenfunction: ExactEigenfunction,
}

/// Closed-form eigenfunction with its derivative.
#[derive(Clone)]
pub struct ExactEigenfunction {
    pub normalization: f64,
    pub value: VectorFn,
    pub derivative: VectorFn,
    pub second_derivative: VectorFn,
}

impl fmt::Debug for ExactEigenfunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExactEigenfunction")
            .field("normalization", &self.normalization)
            .finish()
    }
}

/// Example potential `A = diag(1 - 2 sech^2 x + lambda0, 2 cos 2x)` with
/// `A_p = diag(1 + lambda0, 2 cos 2x)`, period pi, `beta = 2`.
pub fn make_example5(lambda0: f64) -> Example5 {
    make_example5_with_beta(lambda0, 2.0)
}

pub fn make_example5_with_beta(lambda0: f64, beta: f64) -> Example5 {
    let vc: ScalarFn = Arc::new(move |x| 1.0 - 2.0 * sech(x).powi(2) + lambda0);
    let vp: ScalarFn = Arc::new(|x| 2.0 * (2.0 * x).cos());
    let vc_inf: ScalarFn = Arc::new(move |_| 1.0 + lambda0);
    let potential = Potential::new(
        MatrixField::diagonal(vec![vc, vp.clone()]),
        MatrixField::diagonal(vec![vc_inf, vp]),
        PI,
        beta,
    )
    .expect("example potential is valid");
    let c = 0.5f64.sqrt();
    let eigenfunction = ExactEigenfunction {
        normalization: c,
        value: Arc::new(move |x| DVector::from_vec(vec![c * sech(x), 0.0])),
        derivative: Arc::new(move |x| DVector::from_vec(vec![-c * sech(x) * x.tanh(), 0.0])),
        second_derivative: Arc::new(move |x| {
            let s = sech(x);
            DVector::from_vec(vec![c * s * (1.0 - 2.0 * s * s), 0.0])
        }),
    };
    Example5 {
        lambda0,
        potential,
        eigenfunction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> MatrixField {
        MatrixField::new(1, move |x| DMatrix::from_element(1, 1, f(x)))
    }

    #[test]
    fn zero_field_has_zero_norm() {
        let est = xbeta_norm(&MatrixField::zero(2), 2.0, 10.0, 50.0).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn weight_cancellation_gives_unit_norm() {
        let beta = 2.5;
        let f = scalar(move |x| (1.0 + x.abs()).powf(-beta));
        let est = xbeta_norm(&f, beta, 30.0, 100.0).unwrap();
        assert!((est.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn beta_must_exceed_one() {
        assert!(xbeta_norm(&MatrixField::zero(1), 1.0, 10.0, 10.0).is_err());
        assert!(make_perturbation(2, PerturbationClass::Diagonal, &Profile::from_name("sech2").unwrap(), 1.0, 0.5).is_err());
    }

    #[test]
    fn example_eigenfunction_solves_the_equation() {
        let ex = make_example5(-0.28);
        for i in 0..=400 {
            let x = -10.0 + 0.05 * i as f64;
            let u = (ex.eigenfunction.value)(x)[0];
            let upp = (ex.eigenfunction.second_derivative)(x)[0];
            let vc = ex.potential.a.eval(x)[(0, 0)];
            let r = -upp + (vc - ex.lambda0) * u;
            assert!(r.abs() < 1e-10, "x = {x}, r = {r}");
        }
    }

    #[test]
    fn example_eigenfunction_second_derivative_matches_differences() {
        let ex = make_example5(-0.28);
        let h = 1e-4;
        for x in [-3.0, -0.4, 0.0, 1.3, 4.0] {
            let fd = ((ex.eigenfunction.value)(x + h)[0] - 2.0 * (ex.eigenfunction.value)(x)[0]
                + (ex.eigenfunction.value)(x - h)[0])
                / (h * h);
            assert!((fd - (ex.eigenfunction.second_derivative)(x)[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn example_eigenfunction_is_unit_normalized() {
        let ex = make_example5(-0.28);
        // composite Simpson on [-40, 40]
        let n = 40_000;
        let h = 80.0 / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let x = -40.0 + i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * (ex.eigenfunction.value)(x)[0].powi(2);
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-12);
        assert!((ex.eigenfunction.normalization - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn example_localized_part_has_finite_norm() {
        let ex = make_example5(-0.28);
        let est = ex.potential.check_asymptotic_periodicity().unwrap();
        assert!(est.value > 0.0 && est.value < 10.0);
    }

    #[test]
    fn diagonal_constructor() {
        let b = make_perturbation(2, PerturbationClass::Diagonal, &Profile::from_name("sech2").unwrap(), 1.0, 2.0).unwrap();
        let m = b.eval(0.7);
        assert!((m[(0, 0)] - sech(0.7).powi(2)).abs() < 1e-15);
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(m[(1, 1)], 0.0);
    }

    #[test]
    fn t_beta_constructor_has_zero_diagonal() {
        let b = make_perturbation(3, PerturbationClass::TBeta, &Profile::from_name("sech2").unwrap(), 0.5, 2.0).unwrap();
        let m = b.eval(-0.3);
        for i in 0..3 {
            assert_eq!(m[(i, i)], 0.0);
        }
        assert_eq!(m[(1, 2)], 0.0);
        assert!((m[(0, 2)] - 0.5 * sech(0.3).powi(2)).abs() < 1e-15);
        assert_eq!(m[(0, 1)], m[(1, 0)]);
        // T_beta sits inside the full class
        assert!(Perturbation::from_field(PerturbationClass::Full, b.shape().clone(), 1.0, 2.0).is_ok());
    }

    #[test]
    fn class_structure_is_enforced() {
        let f: ScalarFn = Arc::new(|x| sech(x).powi(2));
        assert!(Perturbation::from_entries(2, PerturbationClass::TBeta, vec![(0, 0, f.clone())], 1.0, 2.0).is_err());
        assert!(Perturbation::from_entries(2, PerturbationClass::Diagonal, vec![(0, 1, f.clone())], 1.0, 2.0).is_err());
        let full = make_perturbation(2, PerturbationClass::Full, &Profile::from_name("sech2").unwrap(), 1.0, 2.0).unwrap();
        assert!(Perturbation::from_field(PerturbationClass::TBeta, full.shape().clone(), 1.0, 2.0).is_err());
    }

    #[test]
    fn slowly_decaying_profile_is_rejected() {
        let err = make_perturbation(1, PerturbationClass::Diagonal, &Profile::Power { exponent: 1.5 }, 1.0, 2.0).unwrap_err();
        assert!(matches!(err, Error::InsufficientDecay { .. }));
    }

    #[test]
    fn bump_norm_matches_dense_scan_on_support() {
        let b = make_perturbation(2, PerturbationClass::OffdiagRow1, &Profile::Bump { a: 1.0, b: 2.0 }, 1.0, 2.0).unwrap();
        let est = b.norm().unwrap();
        let bump = Profile::Bump { a: 1.0, b: 2.0 }.to_fn().unwrap();
        let mut best = 0.0f64;
        for i in 0..=200_000 {
            let x = 1.0 + i as f64 * 1e-5;
            best = best.max(bump(x) * (1.0 + x).powi(2));
        }
        assert!((est.value - best).abs() < 1e-9, "{} vs {best}", est.value);
    }

    #[test]
    fn unknown_profile_name() {
        assert!(Profile::from_name("triangle").is_err());
    }

    #[test]
    fn non_periodic_ap_is_rejected() {
        let ap = MatrixField::new(1, |x| DMatrix::from_element(1, 1, x.cos()));
        assert!(Potential::new(ap.clone(), ap, 1.0, 2.0).is_err());
    }

    #[test]
    fn asymmetric_potential_is_rejected() {
        let a = MatrixField::new(2, |x| DMatrix::from_row_slice(2, 2, &[0.0, x, 0.0, 0.0]));
        assert!(Potential::new(a, MatrixField::zero(2), 1.0, 2.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_field(c: [f64; 3], w: [f64; 3]) -> MatrixField {
            MatrixField::new(2, move |x| {
                let a = c[0] * sech(x / w[0]).powi(2);
                let b = c[1] * (-(x - 1.0).powi(2) / w[1]).exp();
                let d = c[2] * sech((x + 2.0) / w[2]).powi(4);
                DMatrix::from_row_slice(2, 2, &[a, b, b, d])
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn norm_is_homogeneous(c in prop::array::uniform3(-2.0f64..2.0), w in prop::array::uniform3(0.5f64..2.0), s in -5.0f64..5.0) {
                let f = random_field(c, w);
                let n1 = xbeta_norm(&f, 2.0, 20.0, 40.0).unwrap().value;
                let n2 = xbeta_norm(&f.scaled(s), 2.0, 20.0, 40.0).unwrap().value;
                prop_assert!((n2 - s.abs() * n1).abs() <= 1e-12 * (1.0 + n2.abs()));
            }

            #[test]
            fn triangle_inequality(c1 in prop::array::uniform3(-2.0f64..2.0), c2 in prop::array::uniform3(-2.0f64..2.0), w in prop::array::uniform3(0.5f64..2.0)) {
                let (f, g) = (random_field(c1, w), random_field(c2, [w[2], w[0], w[1]]));
                let nf = xbeta_norm(&f, 2.0, 20.0, 40.0).unwrap().value;
                let ng = xbeta_norm(&g, 2.0, 20.0, 40.0).unwrap().value;
                let nfg = xbeta_norm(&f.add(&g), 2.0, 20.0, 40.0).unwrap().value;
                prop_assert!(nfg <= nf + ng + 1e-12);
            }

            #[test]
            fn constructors_are_symmetric(c in -3.0f64..3.0, x in -10.0f64..10.0) {
                for class in [PerturbationClass::Full, PerturbationClass::Diagonal, PerturbationClass::OffdiagRow1, PerturbationClass::TBeta] {
                    let b = make_perturbation(3, class, &Profile::Sech2 { center: c, width: 1.0 }, 0.7, 2.0).unwrap();
                    let m = b.eval(x);
                    prop_assert_eq!(m.clone(), m.transpose());
                }
            }
        }
    }
}
