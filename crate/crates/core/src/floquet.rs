//! Monodromy, Floquet multipliers and exponents, the decomposition
//! `Phi(x) = G(x) e^{Rx}` and the stable/center/unstable split of `R`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{expm, logm, max_abs, real_range_basis, to_complex, CMatrix, EigenDecomposition};
use crate::ode::{integrate_matrix_ode, integrate_sampled, CoefficientField, IntegratorConfig};
use crate::potentials::{first_order_field, MatrixField, Potential, ScalarFn};

/// Default band `| |mu| - 1 | < tol` for unit-modulus multipliers.
pub const DEFAULT_TOL_CENTER: f64 = 1e-6;

/// Exponents with `tol <= p |Re w| < GUARD_FACTOR * tol` are rejected as
/// too close to the center to classify.
pub const GUARD_FACTOR: f64 = 100.0;

/// Eigenvector matrices with a larger condition number are treated as
/// defective.
pub const MAX_EIGENVECTOR_COND: f64 = 1e8;

/// Number of grid intervals on `[0, p]` for the sampled periodic factor.
pub const G_GRID: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulusTolerance {
    pub tol_center: f64,
}

impl Default for ModulusTolerance {
    fn default() -> Self {
        Self {
            tol_center: DEFAULT_TOL_CENTER,
        }
    }
}

impl ModulusTolerance {
    pub fn new(tol_center: f64) -> Result<Self> {
        if !(tol_center > 0.0 && tol_center < 0.1) {
            return Err(Error::InvalidInput(format!(
                "tol_center must lie in (0, 0.1), got {tol_center}"
            )));
        }
        Ok(Self { tol_center })
    }
}

/// A `p`-periodic first-order system `U' = C(x) U`.
#[derive(Clone, Debug)]
pub struct PeriodicSystem {
    field: CoefficientField,
    period: f64,
}

impl PeriodicSystem {
    /// Checks periodicity of the coefficients on a sample grid.
    pub fn new(field: CoefficientField, period: f64) -> Result<Self> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::InvalidInput(format!("period must be positive, got {period}")));
        }
        let defect = (0..64)
            .map(|i| {
                let x = (i as f64 + 0.37) * period / 64.0;
                (field.eval(x + period) - field.eval(x)).amax()
            })
            .fold(0.0, f64::max);
        if defect > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "coefficients are not {period}-periodic (defect {defect:e})"
            )));
        }
        Ok(Self { field, period })
    }

    /// System at infinity `[[0, I], [A_p - lambda I, 0]]` of a potential.
    pub fn at_infinity(potential: &Potential, lambda: f64) -> Self {
        Self {
            field: potential.field_at_infinity(lambda),
            period: potential.period,
        }
    }

    /// Scalar `u'' = (V_p(x) - lambda) u`.
    pub fn scalar(vp: ScalarFn, period: f64, lambda: f64) -> Result<Self> {
        Self::new(first_order_field(&MatrixField::diagonal(vec![vp]), lambda), period)
    }

    pub fn field(&self) -> &CoefficientField {
        &self.field
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }
}

/// `Phi(p)` with `Phi(0) = I`.
pub fn monodromy(system: &PeriodicSystem, cfg: &IntegratorConfig) -> Result<DMatrix<f64>> {
    let n = system.dim();
    integrate_matrix_ode(&system.field, 0.0, system.period, &DMatrix::identity(n, n), cfg)
}

fn sort_complex(values: &mut [Complex64]) {
    values.sort_by(|a, b| {
        a.norm()
            .total_cmp(&b.norm())
            .then(a.im.total_cmp(&b.im))
            .then(a.re.total_cmp(&b.re))
    });
}

/// Eigenvalues of `M` sorted by modulus then imaginary part, and the number
/// of them within `tol_center` of the unit circle.
pub fn floquet_multipliers(m: &DMatrix<f64>, tol: ModulusTolerance) -> Result<(Vec<Complex64>, usize)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("monodromy matrix is not finite".into()));
    }
    let mut values = EigenDecomposition::from_real(m)?.values;
    sort_complex(&mut values);
    let count = values.iter().filter(|mu| (mu.norm() - 1.0).abs() < tol.tol_center).count();
    if count % 2 == 1 {
        return Err(Error::OddCenterCount { count });
    }
    Ok((values, count))
}

/// `w = log(mu) / p` on the principal branch.
pub fn floquet_exponents(multipliers: &[Complex64], period: f64) -> Result<Vec<Complex64>> {
    multipliers
        .iter()
        .map(|mu| {
            if mu.norm() == 0.0 {
                Err(Error::ZeroMultiplier)
            } else {
                Ok(mu.ln() / period)
            }
        })
        .collect()
}

/// Which part of the spectrum an exponent belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Stable,
    Center,
    Unstable,
}

/// Spectral projections of `R` grouped by the sign of the real part of the
/// eigenvalues, with real orthonormal bases of their ranges.
#[derive(Debug, Clone)]
pub struct SpectralSplit {
    /// Eigenvalues of `R` in a fixed order (ascending real part, then
    /// imaginary part).
    pub exponents: Vec<Complex64>,
    pub parts: Vec<Part>,
    pub p_stable: CMatrix,
    pub p_center: CMatrix,
    pub p_unstable: CMatrix,
    pub stable: DMatrix<f64>,
    pub center: DMatrix<f64>,
    pub unstable: DMatrix<f64>,
    /// Condition number of the eigenvector matrix.
    pub cond: f64,
}

impl SpectralSplit {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.stable.ncols(), self.center.ncols(), self.unstable.ncols())
    }

    /// Smallest positive real part among the unstable exponents.
    pub fn omega_min(&self) -> Option<f64> {
        self.exponents
            .iter()
            .zip(&self.parts)
            .filter(|(_, p)| **p == Part::Unstable)
            .map(|(w, _)| w.re)
            .min_by(|a, b| a.total_cmp(b))
    }
}

/// Splits `C^N` by the sign of `Re w` for the eigenvalues `w` of `r`:
/// `|Re w| < tol` is center, `tol <= |Re w| < 100 tol` is an error.
pub fn spectral_split(r: &CMatrix, tol: f64) -> Result<SpectralSplit> {
    let eig = EigenDecomposition::new(r)?;
    if !(eig.cond <= MAX_EIGENVECTOR_COND) {
        return Err(Error::DefectiveMonodromy { cond: eig.cond });
    }
    let n = r.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (eig.values[a], eig.values[b]);
        x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im))
    });
    let mut parts = Vec::with_capacity(n);
    let (mut s, mut c, mut u) = (Vec::new(), Vec::new(), Vec::new());
    for &i in &order {
        let re = eig.values[i].re;
        let part = if re.abs() < tol {
            c.push(i);
            Part::Center
        } else if re.abs() < GUARD_FACTOR * tol {
            return Err(Error::GapViolation { re });
        } else if re < 0.0 {
            s.push(i);
            Part::Stable
        } else {
            u.push(i);
            Part::Unstable
        };
        parts.push(part);
    }
    let p_stable = eig.projection(&s)?;
    let p_center = eig.projection(&c)?;
    let p_unstable = eig.projection(&u)?;
    Ok(SpectralSplit {
        exponents: order.iter().map(|&i| eig.values[i]).collect(),
        parts,
        stable: real_range_basis(&p_stable, s.len())?,
        center: real_range_basis(&p_center, c.len())?,
        unstable: real_range_basis(&p_unstable, u.len())?,
        p_stable,
        p_center,
        p_unstable,
        cond: eig.cond,
    })
}

/// Floquet data of a periodic system.
#[derive(Debug, Clone)]
pub struct FloquetData {
    pub period: f64,
    pub monodromy: DMatrix<f64>,
    pub multipliers: Vec<Complex64>,
    pub exponents: Vec<Complex64>,
    /// `R = log(M) / p`.
    pub r: CMatrix,
    /// Uniform grid `j p / G_GRID`, `j = 0..=G_GRID`.
    pub grid: Vec<f64>,
    /// `Phi(x_j)` on the grid.
    pub phi_samples: Vec<DMatrix<f64>>,
    /// `G(x_j) = Phi(x_j) e^{-R x_j}`.
    pub g_samples: Vec<CMatrix>,
    pub center_count: usize,
    pub split: SpectralSplit,
    /// `|G(p) - I|`.
    pub periodicity_defect: f64,
    pub tol: ModulusTolerance,
}

/// Computes `M`, its multipliers and exponents, `R`, samples of `G` and
/// the spectral split of `R`.
pub fn floquet_decomposition(
    system: &PeriodicSystem,
    cfg: &IntegratorConfig,
    tol: ModulusTolerance,
) -> Result<FloquetData> {
    let n = system.dim();
    let p = system.period;
    let grid: Vec<f64> = (0..=G_GRID).map(|j| j as f64 * p / G_GRID as f64).collect();
    let mut phi_samples = vec![DMatrix::identity(n, n)];
    phi_samples.extend(integrate_sampled(&system.field, 0.0, &grid[1..], &DMatrix::identity(n, n), cfg)?);
    let m = phi_samples[G_GRID].clone();
    let (multipliers, center_count) = floquet_multipliers(&m, tol)?;
    let exponents = floquet_exponents(&multipliers, p)?;
    let r = logm(&to_complex(&m))? / Complex64::new(p, 0.0);
    let split = spectral_split(&r, tol.tol_center / p)?;
    if split.dims().1 != center_count {
        return Err(Error::GapViolation {
            re: split
                .exponents
                .iter()
                .map(|w| w.re.abs())
                .filter(|re| *re * p >= tol.tol_center)
                .fold(f64::INFINITY, f64::min),
        });
    }
    let g_samples: Vec<CMatrix> = grid
        .iter()
        .zip(&phi_samples)
        .map(|(&x, phi)| to_complex(phi) * expm(&(&r * Complex64::new(-x, 0.0))))
        .collect();
    let periodicity_defect = max_abs(&(&g_samples[G_GRID] - CMatrix::identity(n, n)));
    Ok(FloquetData {
        period: p,
        monodromy: m,
        multipliers,
        exponents,
        r,
        grid,
        phi_samples,
        g_samples,
        center_count,
        split,
        periodicity_defect,
        tol,
    })
}

impl FloquetData {
    pub fn dim(&self) -> usize {
        self.monodromy.nrows()
    }

    /// `|det M - 1|`.
    pub fn det_defect(&self) -> f64 {
        (self.monodromy.determinant() - 1.0).abs()
    }

    /// `max_i |e^{p w_i} - mu_i|`.
    pub fn spectral_mapping_defect(&self) -> f64 {
        self.exponents
            .iter()
            .zip(&self.multipliers)
            .map(|(w, mu)| ((w * self.period).exp() - mu).norm())
            .fold(0.0, f64::max)
    }

    /// Each `e^{p w}` for `w` an eigenvalue of `R` matched to its nearest
    /// multiplier; returns the largest distance.
    pub fn r_spectrum_defect(&self) -> f64 {
        self.split
            .exponents
            .iter()
            .map(|w| {
                let e = (w * self.period).exp();
                self.multipliers.iter().map(|mu| (e - mu).norm()).fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    }

    /// Largest distance between a multiplier modulus `r` and the nearest
    /// `1/r'` from the multiset.
    pub fn pairing_defect(&self) -> f64 {
        let mut mods: Vec<f64> = self.multipliers.iter().map(|m| m.norm()).collect();
        mods.sort_by(|a, b| a.total_cmp(b));
        let inv: Vec<f64> = mods.iter().rev().map(|r| 1.0 / r).collect();
        mods.iter().zip(&inv).map(|(a, b)| (a - b).abs() / a.max(1.0)).fold(0.0, f64::max)
    }

    /// `max_j |Phi(x_j + p) - G(x_j) e^{R (x_j + p)}|` over the first
    /// `G_GRID` grid points, with `Phi` from a fresh integration.
    pub fn decomposition_defect(&self, system: &PeriodicSystem, cfg: &IntegratorConfig) -> Result<f64> {
        let n = self.dim();
        let xs: Vec<f64> = self.grid[..G_GRID].iter().map(|x| x + self.period).collect();
        let phis = integrate_sampled(system.field(), 0.0, &xs, &DMatrix::identity(n, n), cfg)?;
        let mut worst = 0.0f64;
        for ((g, x), phi) in self.g_samples.iter().zip(&xs).zip(&phis) {
            let rec = g * expm(&(&self.r * Complex64::new(*x, 0.0)));
            let scale = phi.amax().max(1.0);
            worst = worst.max(max_abs(&(to_complex(phi) - rec)) / scale);
        }
        Ok(worst)
    }

    /// `2m`, and the codimension `2m + 1` of the range of the matching map.
    pub fn codimension(&self) -> (usize, usize) {
        (self.center_count, self.center_count + 1)
    }

    /// `Phi(x)` for `x` on the sample grid, extended by `Phi(x + kp) = Phi(x) M^k`.
    pub fn phi_at_grid(&self, j: usize, k: i32) -> Result<DMatrix<f64>> {
        let mk = if k >= 0 {
            self.monodromy.pow(k as u32)
        } else {
            self.monodromy
                .clone()
                .try_inverse()
                .ok_or(Error::ZeroMultiplier)?
                .pow((-k) as u32)
        };
        Ok(&self.phi_samples[j] * mk)
    }

    /// Checks that `e^{p value}` is not a multiplier and that `value` is not
    /// an eigenvalue of `R`, each to within `tol`. The two tests agree
    /// for real `value`.
    pub fn resonance_predicates(&self, value: f64, tol: f64) -> (bool, bool) {
        let e = Complex64::new((self.period * value).exp(), 0.0);
        let by_multiplier = self.multipliers.iter().all(|mu| (mu - e).norm() > tol * e.norm().max(1.0));
        let by_exponent = self.split.exponents.iter().all(|w| (w - value).norm() > tol);
        (by_multiplier, by_exponent)
    }
}

/// Smallest `|Im w|` among center exponents, as a fraction of the
/// Brillouin half-width `pi / p`; values near 0 or 1 indicate a band edge.
pub fn band_position(data: &FloquetData) -> Option<f64> {
    data.split
        .exponents
        .iter()
        .zip(&data.split.parts)
        .filter(|(_, p)| **p == Part::Center)
        .map(|(w, _)| w.im.abs() * data.period / PI)
        .min_by(|a, b| a.total_cmp(b))
}
