//! Adaptive integration of linear ODEs `Y' = C(x) Y`.
//!
//! The stepper is the Dormand–Prince 5(4) pair with a PI step-size
//! controller. Backward integration (`x1 < x0`) is carried out in the
//! reflected variable `s = -(x - x0)`, so no matrix is ever inverted.
//! Subspace propagation re-orthonormalizes with a thin QR factorization so
//! that exponentially separated directions do not swamp each other.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

type FillFn = dyn Fn(f64, &mut DMatrix<f64>) + Send + Sync;

/// A real `N x N` matrix-valued function `x -> C(x)` on an interval.
#[derive(Clone)]
pub struct CoefficientField {
    dim: usize,
    domain: (f64, f64),
    fill: Arc<FillFn>,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField")
            .field("dim", &self.dim)
            .field("domain", &self.domain)
            .finish()
    }
}

impl CoefficientField {
    /// Field defined by a closure that writes `C(x)` into a preallocated
    /// `dim x dim` buffer. The buffer is zeroed before every call.
    pub fn from_fill<F>(dim: usize, fill: F) -> Self
    where
        F: Fn(f64, &mut DMatrix<f64>) + Send + Sync + 'static,
    {
        Self {
            dim,
            domain: (f64::NEG_INFINITY, f64::INFINITY),
            fill: Arc::new(fill),
        }
    }

    /// Field defined by a closure returning a fresh matrix.
    pub fn new<F>(dim: usize, f: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self::from_fill(dim, move |x, out| out.copy_from(&f(x)))
    }

    /// Constant coefficient matrix.
    pub fn constant(c: DMatrix<f64>) -> Self {
        assert!(c.is_square(), "coefficient matrix must be square");
        let dim = c.nrows();
        Self::from_fill(dim, move |_, out| out.copy_from(&c))
    }

    pub fn with_domain(mut self, lo: f64, hi: f64) -> Self {
        self.domain = (lo, hi);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn eval(&self, x: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        (self.fill)(x, &mut out);
        out
    }

    fn eval_into(&self, x: f64, out: &mut DMatrix<f64>) -> Result<()> {
        out.fill(0.0);
        (self.fill)(x, out);
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteCoefficient { x })
        }
    }

    /// `C(x) + D(x)`.
    pub fn add(&self, other: &CoefficientField) -> CoefficientField {
        assert_eq!(self.dim, other.dim);
        let a = self.clone();
        let b = other.clone();
        let domain = (
            self.domain.0.max(other.domain.0),
            self.domain.1.min(other.domain.1),
        );
        CoefficientField::from_fill(self.dim, move |x, out| {
            (a.fill)(x, out);
            let mut tmp = DMatrix::zeros(out.nrows(), out.ncols());
            (b.fill)(x, &mut tmp);
            *out += tmp;
        })
        .with_domain(domain.0, domain.1)
    }

    fn check_in_domain(&self, x: f64) -> Result<()> {
        let (lo, hi) = self.domain;
        if x < lo || x > hi || !x.is_finite() {
            return Err(Error::OutsideDomain { x, lo, hi });
        }
        Ok(())
    }
}

/// Tolerances and step controls for the integrator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    /// Distance in `x` between re-orthonormalizations in subspace propagation.
    pub renorm_interval: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            max_step: 0.5,
            renorm_interval: 1.0,
            max_steps: 2_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerances(rel_tol: f64, abs_tol: f64) -> Self {
        Self {
            rel_tol,
            abs_tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.rel_tol, self.abs_tol, self.max_step, self.renorm_interval]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !ok || self.max_steps == 0 {
            return Err(Error::InvalidInput(format!(
                "integrator settings must be strictly positive: {self:?}"
            )));
        }
        Ok(())
    }
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const PI_BETA: f64 = 0.04;

/// Integrator state for `Y' = C(x) Y`, advanced in either direction.
struct Stepper<'a> {
    field: &'a CoefficientField,
    cfg: IntegratorConfig,
    dir: f64,
    x: f64,
    y: DMatrix<f64>,
    h: f64,
    err_old: f64,
    steps: usize,
    coeff: DMatrix<f64>,
    k: [DMatrix<f64>; 7],
    fsal_valid: bool,
}

impl<'a> Stepper<'a> {
    fn new(field: &'a CoefficientField, x0: f64, y0: DMatrix<f64>, dir: f64, cfg: IntegratorConfig) -> Self {
        let (n, k) = y0.shape();
        let zero = DMatrix::zeros(n, k);
        Self {
            field,
            cfg,
            dir,
            x: x0,
            y: y0,
            h: cfg.max_step.min(1e-2),
            err_old: 1e-4,
            steps: 0,
            coeff: DMatrix::zeros(field.dim, field.dim),
            k: std::array::from_fn(|_| zero.clone()),
            fsal_valid: false,
        }
    }

    /// `dY/ds = dir * C(x0 + dir*s) Y` evaluated at physical abscissa `x`.
    fn rhs(&mut self, x: f64, y: &DMatrix<f64>, slot: usize) -> Result<()> {
        self.field.eval_into(x, &mut self.coeff)?;
        self.k[slot].gemm(self.dir, &self.coeff, y, 0.0);
        Ok(())
    }

    fn advance_to(&mut self, target: f64) -> Result<()> {
        let from = self.x;
        loop {
            let remaining = (target - self.x) * self.dir;
            if remaining <= 1e-14 * (1.0 + target.abs()) {
                self.x = target;
                return Ok(());
            }
            if self.steps >= self.cfg.max_steps {
                return Err(Error::TooManySteps {
                    from,
                    to: target,
                    max_steps: self.cfg.max_steps,
                });
            }
            let mut h = self.h.min(self.cfg.max_step);
            let last = h >= remaining;
            if last {
                h = remaining;
            }
            self.try_step(h, last.then_some(target))?;
        }
    }

    fn try_step(&mut self, mut h: f64, mut snap: Option<f64>) -> Result<()> {
        loop {
            if h < 1e-14 * (1.0 + self.x.abs()) {
                return Err(Error::StepUnderflow { x: self.x, h });
            }
            self.steps += 1;
            let x = self.x;
            let d = self.dir;
            if !self.fsal_valid {
                let y = self.y.clone();
                self.rhs(x, &y, 0)?;
                self.fsal_valid = true;
            }
            let k = &self.k;
            let y2 = &self.y + &k[0] * (h * A21);
            self.rhs(x + d * C2 * h, &y2, 1)?;
            let k = &self.k;
            let y3 = &self.y + (&k[0] * A31 + &k[1] * A32) * h;
            self.rhs(x + d * C3 * h, &y3, 2)?;
            let k = &self.k;
            let y4 = &self.y + (&k[0] * A41 + &k[1] * A42 + &k[2] * A43) * h;
            self.rhs(x + d * C4 * h, &y4, 3)?;
            let k = &self.k;
            let y5 = &self.y + (&k[0] * A51 + &k[1] * A52 + &k[2] * A53 + &k[3] * A54) * h;
            self.rhs(x + d * C5 * h, &y5, 4)?;
            let k = &self.k;
            let y6 = &self.y
                + (&k[0] * A61 + &k[1] * A62 + &k[2] * A63 + &k[3] * A64 + &k[4] * A65) * h;
            self.rhs(x + d * h, &y6, 5)?;
            let k = &self.k;
            let y_new = &self.y
                + (&k[0] * A71 + &k[2] * A73 + &k[3] * A74 + &k[4] * A75 + &k[5] * A76) * h;
            let x_new = snap.unwrap_or(x + d * h);
            self.rhs(x_new, &y_new, 6)?;
            let k = &self.k;
            let err_vec =
                (&k[0] * E1 + &k[2] * E3 + &k[3] * E4 + &k[4] * E5 + &k[5] * E6 + &k[6] * E7) * h;

            let mut acc = 0.0;
            for ((e, a), b) in err_vec.iter().zip(self.y.iter()).zip(y_new.iter()) {
                let sc = self.cfg.abs_tol + self.cfg.rel_tol * a.abs().max(b.abs());
                acc += (e / sc).powi(2);
            }
            let err = (acc / err_vec.len() as f64).sqrt();
            if !err.is_finite() {
                return Err(Error::NonFiniteCoefficient { x });
            }

            let fac11 = err.powf(0.2 - PI_BETA * 0.75);
            if err <= 1.0 {
                let fac = (fac11 / self.err_old.powf(PI_BETA) / SAFETY)
                    .clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
                self.err_old = err.max(1e-4);
                self.x = x_new;
                self.y = y_new;
                self.k.swap(0, 6);
                // a step clipped to hit a target must not shrink the controller's suggestion
                if snap.is_none() || h / fac > self.h {
                    self.h = h / fac;
                }
                return Ok(());
            }
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
            snap = None;
        }
    }
}

fn direction(x0: f64, x1: f64) -> f64 {
    if x1 >= x0 {
        1.0
    } else {
        -1.0
    }
}

fn check_endpoints(field: &CoefficientField, x0: f64, x1: f64, cfg: &IntegratorConfig) -> Result<()> {
    cfg.validate()?;
    field.check_in_domain(x0)?;
    field.check_in_domain(x1)
}

/// Solves `Y' = C(x) Y`, `Y(x0) = Y0` and returns `Y(x1)`. `x1 < x0` is allowed.
pub fn integrate_matrix_ode(
    field: &CoefficientField,
    x0: f64,
    x1: f64,
    y0: &DMatrix<f64>,
    cfg: &IntegratorConfig,
) -> Result<DMatrix<f64>> {
    check_endpoints(field, x0, x1, cfg)?;
    if y0.nrows() != field.dim() {
        return Err(Error::InvalidInput(format!(
            "initial value has {} rows, field dimension is {}",
            y0.nrows(),
            field.dim()
        )));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("initial value is not finite".into()));
    }
    let mut st = Stepper::new(field, x0, y0.clone(), direction(x0, x1), *cfg);
    st.advance_to(x1)?;
    Ok(st.y)
}

/// Vector version of [`integrate_matrix_ode`].
pub fn integrate_vector_ode(
    field: &CoefficientField,
    x0: f64,
    x1: f64,
    v0: &DVector<f64>,
    cfg: &IntegratorConfig,
) -> Result<DVector<f64>> {
    let y0 = DMatrix::from_column_slice(v0.len(), 1, v0.as_slice());
    let y = integrate_matrix_ode(field, x0, x1, &y0, cfg)?;
    Ok(DVector::from_column_slice(y.as_slice()))
}

/// Values of `Y` at each abscissa of `xs`, which must run monotonically away
/// from `x0` (in either direction).
pub fn integrate_sampled(
    field: &CoefficientField,
    x0: f64,
    xs: &[f64],
    y0: &DMatrix<f64>,
    cfg: &IntegratorConfig,
) -> Result<Vec<DMatrix<f64>>> {
    let Some(&x_last) = xs.last() else {
        return Ok(Vec::new());
    };
    check_endpoints(field, x0, x_last, cfg)?;
    let dir = direction(x0, x_last);
    check_monotone(x0, xs, dir)?;
    let mut st = Stepper::new(field, x0, y0.clone(), dir, *cfg);
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        st.advance_to(x)?;
        out.push(st.y.clone());
    }
    Ok(out)
}

fn check_monotone(x0: f64, xs: &[f64], dir: f64) -> Result<()> {
    let mut prev = x0;
    for &x in xs {
        if (x - prev) * dir < 0.0 {
            return Err(Error::InvalidInput(
                "sample abscissae must move monotonically away from x0".into(),
            ));
        }
        prev = x;
    }
    Ok(())
}

/// Thin QR with a non-negative diagonal in `R`.
pub(crate) fn thin_qr(m: DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = m.ncols();
    let qr = m.qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for i in 0..k.min(r.nrows()) {
        if r[(i, i)] < 0.0 {
            q.column_mut(i).neg_mut();
            r.row_mut(i).neg_mut();
        }
    }
    (q, r)
}

fn collapse_ratio(r: &DMatrix<f64>) -> f64 {
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

const COLLAPSE_TOL: f64 = 1e-13;

fn orthonormal_input(basis: &DMatrix<f64>, dim: usize) -> Result<()> {
    if basis.nrows() != dim || basis.ncols() == 0 || basis.ncols() > dim {
        return Err(Error::InvalidInput(format!(
            "subspace basis must be {dim} x k with 1 <= k <= {dim}, got {:?}",
            basis.shape()
        )));
    }
    let gram = basis.transpose() * basis;
    let defect = (gram - DMatrix::identity(basis.ncols(), basis.ncols())).amax();
    if defect > 1e-8 {
        return Err(Error::InvalidInput(format!(
            "subspace basis is not orthonormal (Gram defect {defect:e})"
        )));
    }
    Ok(())
}

/// Orthonormal basis of the image of `span(basis)` under the solution
/// operator from `x0` to `x1`.
pub fn evolve_subspace(
    field: &CoefficientField,
    basis: &DMatrix<f64>,
    x0: f64,
    x1: f64,
    cfg: &IntegratorConfig,
) -> Result<DMatrix<f64>> {
    Ok(evolve_subspace_tracked(field, basis, x0, x1, cfg)?.basis)
}

/// Result of a subspace propagation that also records the cumulative
/// logarithmic growth of each column of the QR factorization.
#[derive(Debug, Clone)]
pub struct TrackedSubspace {
    pub basis: DMatrix<f64>,
    /// Renormalization abscissae, starting at `x0`.
    pub xs: Vec<f64>,
    /// `log_growth[j][i]`: accumulated `log R_ii` up to `xs[j]`.
    pub log_growth: Vec<Vec<f64>>,
}

/// Like [`evolve_subspace`], but keeps the discrete-QR growth record used for
/// Lyapunov-type rate measurements.
pub fn evolve_subspace_tracked(
    field: &CoefficientField,
    basis: &DMatrix<f64>,
    x0: f64,
    x1: f64,
    cfg: &IntegratorConfig,
) -> Result<TrackedSubspace> {
    check_endpoints(field, x0, x1, cfg)?;
    orthonormal_input(basis, field.dim())?;
    let dir = direction(x0, x1);
    let k = basis.ncols();
    let mut st = Stepper::new(field, x0, basis.clone(), dir, *cfg);
    let mut xs = vec![x0];
    let mut acc = vec![0.0; k];
    let mut log_growth = vec![acc.clone()];
    let mut x = x0;
    while (x1 - x) * dir > 0.0 {
        let next = if (x1 - x) * dir <= cfg.renorm_interval * (1.0 + 1e-12) {
            x1
        } else {
            x + dir * cfg.renorm_interval
        };
        st.advance_to(next)?;
        let (q, r) = thin_qr(std::mem::replace(&mut st.y, DMatrix::zeros(0, 0)));
        let ratio = collapse_ratio(&r);
        if ratio < COLLAPSE_TOL || !ratio.is_finite() {
            return Err(Error::RankCollapse { x: next, ratio });
        }
        for (i, a) in acc.iter_mut().enumerate() {
            *a += r[(i, i)].ln();
        }
        st.y = q;
        st.fsal_valid = false;
        x = next;
        xs.push(x);
        log_growth.push(acc.clone());
    }
    Ok(TrackedSubspace {
        basis: st.y,
        xs,
        log_growth,
    })
}

/// Subspace propagated through a grid with a QR factorization at every grid
/// point, so that individual solutions inside the subspace can be recovered
/// without integrating in their unstable direction.
#[derive(Debug, Clone)]
pub struct SubspaceTrajectory {
    /// Grid, starting at the initial abscissa.
    pub xs: Vec<f64>,
    /// Orthonormal basis at each grid point.
    pub bases: Vec<DMatrix<f64>>,
    /// `factors[j]` maps coordinates at `xs[j]` to coordinates at `xs[j+1]`:
    /// `Phi(xs[j+1], xs[j]) Q_j = Q_{j+1} factors[j]`.
    pub factors: Vec<DMatrix<f64>>,
}

impl SubspaceTrajectory {
    /// Basis at the final grid point.
    pub fn final_basis(&self) -> &DMatrix<f64> {
        self.bases.last().expect("trajectory has at least one point")
    }

    /// The solution whose value at the final grid point is
    /// `final_basis() * coeffs`, evaluated at every grid point.
    pub fn solution_from_end(&self, coeffs: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let n = self.xs.len();
        let mut c = coeffs.clone();
        let mut out = vec![DVector::zeros(0); n];
        out[n - 1] = &self.bases[n - 1] * &c;
        for j in (0..n - 1).rev() {
            c = self.factors[j]
                .clone()
                .solve_upper_triangular(&c)
                .ok_or(Error::RankCollapse { x: self.xs[j], ratio: 0.0 })?;
            out[j] = &self.bases[j] * &c;
        }
        Ok(out)
    }
}

/// Propagates `span(basis)` from `x0` through the monotone grid `xs`.
pub fn evolve_subspace_sampled(
    field: &CoefficientField,
    basis: &DMatrix<f64>,
    x0: f64,
    xs: &[f64],
    cfg: &IntegratorConfig,
) -> Result<SubspaceTrajectory> {
    let Some(&x_last) = xs.last() else {
        return Err(Error::InvalidInput("empty grid".into()));
    };
    check_endpoints(field, x0, x_last, cfg)?;
    orthonormal_input(basis, field.dim())?;
    let dir = direction(x0, x_last);
    check_monotone(x0, xs, dir)?;
    let mut st = Stepper::new(field, x0, basis.clone(), dir, *cfg);
    let mut grid = vec![x0];
    let mut bases = vec![basis.clone()];
    let mut factors = Vec::with_capacity(xs.len());
    for &x in xs {
        if x == *grid.last().unwrap() {
            continue;
        }
        st.advance_to(x)?;
        let (q, r) = thin_qr(std::mem::replace(&mut st.y, DMatrix::zeros(0, 0)));
        let ratio = collapse_ratio(&r);
        if ratio < COLLAPSE_TOL || !ratio.is_finite() {
            return Err(Error::RankCollapse { x, ratio });
        }
        st.y = q.clone();
        st.fsal_valid = false;
        grid.push(x);
        bases.push(q);
        factors.push(r);
    }
    Ok(SubspaceTrajectory {
        xs: grid,
        bases,
        factors,
    })
}

/// Largest principal angle (radians) between the column spans of two
/// orthonormal bases of equal rank.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // sine form: acos loses half the digits near zero angle
    let residual = b - a * (a.transpose() * b);
    let largest = residual.singular_values().iter().cloned().fold(0.0, f64::max);
    largest.min(1.0).asin()
}
