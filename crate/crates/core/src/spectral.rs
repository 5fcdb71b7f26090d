//! Hill discriminant and band scans for scalar periodic potentials, and
//! embedded-eigenvalue detection by matching the subspaces of solutions
//! that decay at `+inf` and at `-inf`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floquet::{floquet_decomposition, ModulusTolerance, PeriodicSystem};
use crate::linalg::smallest_singular_pair;
use crate::ode::{evolve_subspace, evolve_subspace_sampled, integrate_matrix_ode, thin_qr, IntegratorConfig};
use crate::potentials::{Perturbation, Potential, ScalarFn};

/// `tr M(lambda)` for `u'' = (V_p(x) - lambda) u`.
pub fn hill_discriminant(vp: &ScalarFn, period: f64, lambda: f64, cfg: &IntegratorConfig) -> Result<f64> {
    let sys = PeriodicSystem::scalar(vp.clone(), period, lambda)?;
    let m = crate::floquet::monodromy(&sys, cfg)?;
    Ok(m.trace())
}

/// `|Delta| <= 2 + IN_BAND_SLACK` counts as inside a band.
pub const IN_BAND_SLACK: f64 = 1e-8;

/// Band edges are refined by bisection to this width.
pub const EDGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct BandStructure {
    pub lambdas: Vec<f64>,
    pub discriminants: Vec<f64>,
    pub in_band: Vec<bool>,
    /// Closed band intervals clipped to the scanned range.
    pub bands: Vec<(f64, f64)>,
    /// Refined roots of `|Delta| = 2` found inside the range.
    pub edges: Vec<f64>,
}

impl BandStructure {
    /// Band containing `lambda`, if any.
    pub fn band_of(&self, lambda: f64) -> Option<(f64, f64)> {
        self.bands.iter().copied().find(|(a, b)| *a <= lambda && lambda <= *b)
    }
}

fn in_band(delta: f64) -> bool {
    delta.abs() <= 2.0 + IN_BAND_SLACK
}

/// Samples `Delta` on a uniform grid, classifies each sample and refines
/// every sign change of `|Delta| - 2` by bisection.
pub fn band_scan(
    vp: &ScalarFn,
    period: f64,
    range: (f64, f64),
    samples: usize,
    cfg: &IntegratorConfig,
) -> Result<BandStructure> {
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) || samples < 2 {
        return Err(Error::InvalidInput(format!(
            "band scan needs a finite range lo < hi and at least two samples, got [{lo}, {hi}] with {samples}"
        )));
    }
    let lambdas: Vec<f64> = (0..samples)
        .map(|i| lo + (hi - lo) * i as f64 / (samples - 1) as f64)
        .collect();
    let discriminants: Vec<f64> = lambdas
        .par_iter()
        .map(|&l| hill_discriminant(vp, period, l, cfg))
        .collect::<Result<_>>()?;
    let flags: Vec<bool> = discriminants.iter().map(|d| in_band(*d)).collect();
    let crossings: Vec<usize> = (0..samples - 1).filter(|&i| flags[i] != flags[i + 1]).collect();
    let edges: Vec<f64> = crossings
        .par_iter()
        .map(|&i| {
            let (mut a, mut b) = (lambdas[i], lambdas[i + 1]);
            let fa = flags[i];
            while b - a > EDGE_TOL {
                let m = 0.5 * (a + b);
                if in_band(hill_discriminant(vp, period, m, cfg)?) == fa {
                    a = m;
                } else {
                    b = m;
                }
            }
            Ok(0.5 * (a + b))
        })
        .collect::<Result<_>>()?;
    let mut bands = Vec::new();
    let mut start = if flags[0] { Some(lo) } else { None };
    for (&i, &e) in crossings.iter().zip(&edges) {
        if flags[i] {
            bands.push((start.take().unwrap_or(lo), e));
        } else {
            start = Some(e);
        }
    }
    if let Some(s) = start {
        bands.push((s, hi));
    }
    Ok(BandStructure {
        lambdas,
        discriminants,
        in_band: flags,
        bands,
        edges,
    })
}

/// Which end of the line a subspace is anchored at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    /// Solutions decaying as `x -> +inf`, anchored at `+T`.
    Plus,
    /// Solutions decaying as `x -> -inf`, anchored at `-T`.
    Minus,
}

/// Orthonormal basis at `x = +t` (stable side) or `x = -t` (unstable side)
/// of the solutions of the periodic system that decay towards that end.
/// The stable subspace at `t` is `Phi(t) X^s = Phi(t mod p) X^s` because
/// `M` preserves `X^s`.
pub fn infinity_subspace(
    system: &PeriodicSystem,
    split_basis: &DMatrix<f64>,
    side: Side,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<DMatrix<f64>> {
    let n = system.dim();
    if split_basis.ncols() == 0 {
        return Err(Error::NoHyperbolicDirections { dim: n });
    }
    let anchor = match side {
        Side::Plus => t,
        Side::Minus => -t,
    };
    let tau = anchor.rem_euclid(system.period());
    let phi = integrate_matrix_ode(system.field(), 0.0, tau, &DMatrix::identity(n, n), cfg)?;
    Ok(thin_qr(phi * split_basis).0)
}

/// Settings of the matching procedure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingConfig {
    /// Truncation abscissa `T`.
    pub t: f64,
    /// Half-width of the lambda search interval.
    pub radius: f64,
    /// Mismatch below which a candidate is flagged as an eigenvalue.
    pub tol: f64,
    /// Points of the coarse lambda grid.
    pub coarse_points: usize,
    /// Width at which the golden-section refinement stops.
    pub lambda_tol: f64,
    /// Grid spacing for eigenfunction samples.
    pub grid_step: f64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            t: 15.0,
            radius: 0.05,
            tol: 1e-5,
            coarse_points: 21,
            lambda_tol: 1e-11,
            grid_step: 0.01,
        }
    }
}

impl MatchingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t", self.t),
            ("radius", self.radius),
            ("tol", self.tol),
            ("lambda_tol", self.lambda_tol),
            ("grid_step", self.grid_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("matching.{name} must be positive, got {v}")));
            }
        }
        if self.coarse_points < 3 {
            return Err(Error::InvalidInput("matching.coarse_points must be at least 3".into()));
        }
        Ok(())
    }
}

/// Outcome of one mismatch evaluation.
#[derive(Debug, Clone)]
pub struct Mismatch {
    pub lambda: f64,
    /// Smallest singular value of `[S_0 | -U_0]`.
    pub sigma: f64,
    /// Orthonormal bases at `x = 0` of the solutions decaying at `+inf`
    /// and at `-inf`.
    pub s0: DMatrix<f64>,
    pub u0: DMatrix<f64>,
    /// Unit-norm matching vectors `S_0 a / |S_0 a|` and `U_0 b / |U_0 b|`.
    pub v0s: DVector<f64>,
    pub v0u: DVector<f64>,
}

/// Embedded-eigenvalue candidate.
#[derive(Debug, Clone)]
pub struct EigenCandidate {
    pub lambda: f64,
    pub mismatch: f64,
    pub flagged: bool,
    pub v0s: DVector<f64>,
    pub v0u: DVector<f64>,
    /// Coarse scan `(lambda, sigma)`.
    pub scan: Vec<(f64, f64)>,
}

/// Sampled eigenfunction in `U = (u, u')` coordinates.
#[derive(Debug, Clone)]
pub struct Eigenfunction {
    pub lambda: f64,
    pub xs: Vec<f64>,
    /// `U(x_j)` with `u` normalized to unit L2 norm.
    pub values: Vec<DVector<f64>>,
    /// Discrete L2 norm of `-u'' + (A + B - lambda) u`.
    pub residual: f64,
    /// Mismatch of the bases used for the reconstruction.
    pub sigma: f64,
}

impl Eigenfunction {
    pub fn n(&self) -> usize {
        self.values[0].len() / 2
    }

    /// Component `i` of `u` at every grid point.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[i]).collect()
    }

    /// `|U(x_j)|`.
    pub fn norms(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm()).collect()
    }

    /// `u` at an arbitrary abscissa inside the grid, by cubic Hermite
    /// interpolation of `u` with the stored `u'`.
    pub fn eval(&self, x: f64) -> DVector<f64> {
        let n = self.n();
        let (lo, hi) = (self.xs[0], *self.xs.last().unwrap());
        if x <= lo || x >= hi {
            return DVector::zeros(n);
        }
        let h = self.xs[1] - self.xs[0];
        let j = (((x - lo) / h).floor() as usize).min(self.xs.len() - 2);
        let (a, b) = (&self.values[j], &self.values[j + 1]);
        hermite(x - self.xs[j], self.xs[j + 1] - self.xs[j], a, b, n)
    }
}

/// Cubic Hermite interpolation of the first `n` components of state
/// vectors whose last `n` components are the derivatives.
pub(crate) fn hermite(s: f64, h: f64, a: &DVector<f64>, b: &DVector<f64>, n: usize) -> DVector<f64> {
    let t = s / h;
    let h00 = (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t);
    let h10 = t * (1.0 - t) * (1.0 - t);
    let h01 = t * t * (3.0 - 2.0 * t);
    let h11 = t * t * (t - 1.0);
    DVector::from_fn(n, |i, _| h00 * a[i] + h10 * h * a[n + i] + h01 * b[i] + h11 * h * b[n + i])
}

/// Matching problem for `-u'' + (A + B) u = lambda u`.
#[derive(Debug, Clone)]
pub struct MatchingProblem {
    pub potential: Potential,
    pub perturbation: Option<Perturbation>,
    pub config: MatchingConfig,
    pub integrator: IntegratorConfig,
    pub tol: ModulusTolerance,
}

struct AnchoredBases {
    stable_t: DMatrix<f64>,
    unstable_t: DMatrix<f64>,
}

impl MatchingProblem {
    pub fn new(potential: Potential, perturbation: Option<Perturbation>, config: MatchingConfig) -> Result<Self> {
        config.validate()?;
        if let Some(b) = &perturbation {
            if b.n != potential.n {
                return Err(Error::InvalidInput(format!(
                    "perturbation is {0}x{0} but the potential is {1}x{1}",
                    b.n, potential.n
                )));
            }
        }
        let problem = Self {
            potential,
            perturbation,
            config,
            integrator: IntegratorConfig::default(),
            tol: ModulusTolerance::default(),
        };
        problem.check_truncation()?;
        Ok(problem)
    }

    pub fn with_integrator(mut self, cfg: IntegratorConfig) -> Self {
        self.integrator = cfg;
        self
    }

    pub fn with_tolerance(mut self, tol: ModulusTolerance) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_perturbation(&self, b: Option<Perturbation>) -> Self {
        Self {
            perturbation: b,
            ..self.clone()
        }
    }

    /// The weighted tail of `A - A_p + B` beyond `T` must be below `1e-8`
    /// of its weighted norm.
    pub fn check_truncation(&self) -> Result<()> {
        let mut f = self.potential.localized_part();
        if let Some(b) = &self.perturbation {
            f = f.add(&b.field());
        }
        let beta = self.potential.beta;
        let weighted = |x: f64| f.eval(x).amax() * (1.0 + x.abs()).powf(beta);
        let t = self.config.t;
        let steps = 4000;
        let mut total = 0.0f64;
        let mut tail = 0.0f64;
        for i in 0..=steps {
            let x = (t + 30.0) * i as f64 / steps as f64;
            for y in [x, -x] {
                let v = weighted(y);
                total = total.max(v);
                if x >= t {
                    tail = tail.max(v);
                }
            }
        }
        if total > 0.0 && tail > 1e-8 * total {
            return Err(Error::Precondition(format!(
                "truncation T = {t} too small: weighted tail {tail:e} exceeds 1e-8 of the norm {total:e}"
            )));
        }
        Ok(())
    }

    fn anchored(&self, lambda: f64) -> Result<AnchoredBases> {
        let sys = PeriodicSystem::at_infinity(&self.potential, lambda);
        let data = floquet_decomposition(&sys, &self.integrator, self.tol)?;
        let t = self.config.t;
        Ok(AnchoredBases {
            stable_t: infinity_subspace(&sys, &data.split.stable, Side::Plus, t, &self.integrator)?,
            unstable_t: infinity_subspace(&sys, &data.split.unstable, Side::Minus, t, &self.integrator)?,
        })
    }

    /// Anchored bases at `+T` and `-T`.
    pub fn infinity_subspaces(&self, lambda: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let a = self.anchored(lambda)?;
        Ok((a.stable_t, a.unstable_t))
    }

    /// `sigma_min([S_0 | -U_0])` with the matching vectors.
    pub fn mismatch(&self, lambda: f64) -> Result<Mismatch> {
        let bases = self.anchored(lambda)?;
        let field = self.potential.full_field(lambda, self.perturbation.as_ref());
        let t = self.config.t;
        let s0 = evolve_subspace(&field, &bases.stable_t, t, 0.0, &self.integrator)?;
        let u0 = evolve_subspace(&field, &bases.unstable_t, -t, 0.0, &self.integrator)?;
        mismatch_from_bases(lambda, s0, u0)
    }

    /// Coarse scan on `lambda_guess +- radius` followed by golden-section
    /// refinement of the smallest sample.
    pub fn find_embedded_eigenvalue(&self, lambda_guess: f64) -> Result<EigenCandidate> {
        let c = &self.config;
        let (lo, hi) = (lambda_guess - c.radius, lambda_guess + c.radius);
        let k = c.coarse_points;
        let grid: Vec<f64> = (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect();
        let sigmas: Vec<f64> = grid
            .par_iter()
            .map(|&l| self.mismatch(l).map(|m| m.sigma))
            .collect::<Result<_>>()?;
        let j = (0..k).min_by(|&a, &b| sigmas[a].total_cmp(&sigmas[b])).unwrap();
        if j == 0 || j == k - 1 {
            return Err(Error::NoLocalMinimum { lo, hi });
        }
        let (mut a, mut b) = (grid[j - 1], grid[j + 1]);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = b - g * (b - a);
        let mut x2 = a + g * (b - a);
        let mut f1 = self.mismatch(x1)?.sigma;
        let mut f2 = self.mismatch(x2)?.sigma;
        while b - a > c.lambda_tol {
            if f1 < f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - g * (b - a);
                f1 = self.mismatch(x1)?.sigma;
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + g * (b - a);
                f2 = self.mismatch(x2)?.sigma;
            }
        }
        let best = self.mismatch(0.5 * (a + b))?;
        let best = if best.sigma <= sigmas[j] {
            best
        } else {
            self.mismatch(grid[j])?
        };
        Ok(EigenCandidate {
            lambda: best.lambda,
            mismatch: best.sigma,
            flagged: best.sigma < c.tol,
            v0s: best.v0s,
            v0u: best.v0u,
            scan: grid.into_iter().zip(sigmas).collect(),
        })
    }

    /// Symmetric grid `-T, ..., 0, ..., T` with spacing close to `grid_step`.
    pub fn grid(&self) -> Vec<f64> {
        let t = self.config.t;
        let half = (t / self.config.grid_step).round().max(2.0) as usize;
        (0..=2 * half).map(|i| -t + t * i as f64 / half as f64).collect()
    }

    /// Eigenfunction at a flagged candidate. The two halves are built from
    /// QR-factor trajectories integrated from `+-T` towards `0`, so no
    /// solution is ever integrated in its growing direction.
    pub fn eigenfunction(&self, candidate: &EigenCandidate) -> Result<Eigenfunction> {
        if !candidate.flagged {
            return Err(Error::NotAnEigenvalue {
                lambda: candidate.lambda,
                mismatch: candidate.mismatch,
            });
        }
        let lambda = candidate.lambda;
        let bases = self.anchored(lambda)?;
        let field = self.potential.full_field(lambda, self.perturbation.as_ref());
        let grid = self.grid();
        let half = grid.len() / 2;
        let t = self.config.t;
        let right: Vec<f64> = grid[half..grid.len() - 1].iter().rev().copied().collect();
        let left: Vec<f64> = grid[1..=half].to_vec();
        let plus = evolve_subspace_sampled(&field, &bases.stable_t, t, &right, &self.integrator)?;
        let minus = evolve_subspace_sampled(&field, &bases.unstable_t, -t, &left, &self.integrator)?;
        let k = plus.final_basis().ncols();
        let mut m = DMatrix::zeros(plus.final_basis().nrows(), k + minus.final_basis().ncols());
        m.columns_mut(0, k).copy_from(plus.final_basis());
        m.columns_mut(k, minus.final_basis().ncols()).copy_from(&(-minus.final_basis()));
        let (sigma, v) = smallest_singular_pair(&m)?;
        let a = DVector::from_column_slice(&v.as_slice()[..k]);
        let b = DVector::from_column_slice(&v.as_slice()[k..]);
        let right_vals = plus.solution_from_end(&a)?;
        let left_vals = minus.solution_from_end(&b)?;
        // plus runs T -> 0, minus runs -T -> 0; both end at the junction
        let mut values: Vec<DVector<f64>> = left_vals[..left_vals.len() - 1].to_vec();
        values.push((&left_vals[left_vals.len() - 1] + &right_vals[right_vals.len() - 1]) * 0.5);
        values.extend(right_vals[..right_vals.len() - 1].iter().rev().cloned());
        let n = self.potential.n;
        let h = grid[1] - grid[0];
        let norm = simpson_weights(values.len(), h)
            .iter()
            .zip(&values)
            .map(|(w, v)| w * v.rows(0, n).norm_squared())
            .sum::<f64>()
            .sqrt();
        // sign: largest component of u positive
        let (mut big, mut sign) = (0.0, 1.0);
        for v in &values {
            for i in 0..n {
                if v[i].abs() > big {
                    big = v[i].abs();
                    sign = v[i].signum();
                }
            }
        }
        for v in values.iter_mut() {
            *v *= sign / norm;
        }
        let mut ef = Eigenfunction {
            lambda,
            xs: grid,
            values,
            residual: 0.0,
            sigma,
        };
        ef.residual = self.residual(&ef);
        Ok(ef)
    }

    /// Discrete L2 norm of `-u'' + (A + B - lambda) u`, with `u''` from
    /// fourth-order differences of the sampled `u'`.
    pub fn residual(&self, ef: &Eigenfunction) -> f64 {
        let n = ef.n();
        let h = ef.xs[1] - ef.xs[0];
        let mut acc = 0.0;
        for j in 2..ef.xs.len() - 2 {
            let x = ef.xs[j];
            let mut a = self.potential.a.eval(x);
            if let Some(b) = &self.perturbation {
                a += b.eval(x);
            }
            let u = ef.values[j].rows(0, n).into_owned();
            let d = |k: usize| ef.values[k].rows(n, n).into_owned();
            let upp = (-d(j + 2) + d(j + 1) * 8.0 - d(j - 1) * 8.0 + d(j - 2)) / (12.0 * h);
            let r = -upp + &a * &u - &u * ef.lambda;
            acc += r.norm_squared() * h;
        }
        acc.sqrt()
    }
}

/// `sigma_min([S_0 | -U_0])` for given orthonormal bases at the matching point.
pub fn mismatch_from_bases(lambda: f64, s0: DMatrix<f64>, u0: DMatrix<f64>) -> Result<Mismatch> {
    let (rows, k, l) = (s0.nrows(), s0.ncols(), u0.ncols());
    if u0.nrows() != rows {
        return Err(Error::InvalidInput("matching bases have different dimensions".into()));
    }
    let mut m = DMatrix::zeros(rows, k + l);
    m.columns_mut(0, k).copy_from(&s0);
    m.columns_mut(k, l).copy_from(&(-&u0));
    let (sigma, v) = smallest_singular_pair(&m)?;
    let a = DVector::from_column_slice(&v.as_slice()[..k]);
    let b = DVector::from_column_slice(&v.as_slice()[k..]);
    let unit = |w: DVector<f64>| {
        let n = w.norm();
        if n > 0.0 {
            w / n
        } else {
            w
        }
    };
    Ok(Mismatch {
        lambda,
        sigma,
        v0s: unit(&s0 * a),
        v0u: unit(&u0 * b),
        s0,
        u0,
    })
}

/// Composite Simpson weights on `len` equally spaced points (trapezoid on
/// the last interval when `len - 1` is odd).
pub fn simpson_weights(len: usize, h: f64) -> Vec<f64> {
    let mut w = vec![0.0; len];
    if len < 2 {
        return w;
    }
    let intervals = len - 1;
    let even = intervals - intervals % 2;
    for (i, wi) in w.iter_mut().enumerate().take(even + 1) {
        *wi += h / 3.0
            * if i == 0 || i == even {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
    }
    if even < intervals {
        w[even] += h / 2.0;
        w[even + 1] += h / 2.0;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::floquet::{floquet_multipliers, monodromy};
    use crate::ode::{integrate_vector_ode, max_principal_angle};
    use crate::potentials::{make_example5, make_perturbation, sech, PerturbationClass, Profile};
    use nalgebra::DMatrix;
    use std::f64::consts::PI;
    use std::sync::{Arc, OnceLock};

    fn mathieu() -> ScalarFn {
        Arc::new(|x| 2.0 * (2.0 * x).cos())
    }

    fn cfg() -> IntegratorConfig {
        IntegratorConfig::default()
    }

    /// Midpoint of the first Mathieu band from an independent bisection on
    /// the discriminant.
    fn lambda0() -> f64 {
        static L: OnceLock<f64> = OnceLock::new();
        *L.get_or_init(|| {
            let d = |l: f64| hill_discriminant(&mathieu(), PI, l, &cfg()).unwrap();
            let root = |mut a: f64, mut b: f64, target: f64| {
                let sa = d(a) - target;
                while b - a > 1e-12 {
                    let m = 0.5 * (a + b);
                    if (d(m) - target) * sa > 0.0 {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                0.5 * (a + b)
            };
            0.5 * (root(-1.0, -0.3, 2.0) + root(-0.3, 0.5, -2.0))
        })
    }

    fn example_problem(b: Option<Perturbation>) -> MatchingProblem {
        let ex = make_example5(lambda0());
        MatchingProblem::new(ex.potential, b, MatchingConfig::default()).unwrap()
    }

    #[test]
    fn free_discriminant() {
        let zero: ScalarFn = Arc::new(|_| 0.0);
        assert!((hill_discriminant(&zero, PI, 1.0, &cfg()).unwrap() + 2.0).abs() < 1e-8);
        assert!((hill_discriminant(&zero, PI, 4.0, &cfg()).unwrap() - 2.0).abs() < 1e-8);
    }

    #[test]
    fn mathieu_lowest_edge_is_stable_under_tolerance_change() {
        let edge = |c: &IntegratorConfig| {
            let (mut a, mut b) = (-1.0, -0.3);
            while b - a > 1e-11 {
                let m = 0.5 * (a + b);
                if hill_discriminant(&mathieu(), PI, m, c).unwrap() > 2.0 {
                    a = m;
                } else {
                    b = m;
                }
            }
            0.5 * (a + b)
        };
        let e1 = edge(&cfg());
        let e2 = edge(&IntegratorConfig::with_tolerances(1e-12, 1e-14));
        assert!((e1 - e2).abs() < 1e-6);
        // a_0(1) for Mathieu's equation
        assert!((e1 + 0.455_138_604).abs() < 1e-6, "{e1}");
    }

    #[test]
    fn free_band_scan_is_a_single_band() {
        let zero: ScalarFn = Arc::new(|_| 0.0);
        let bs = band_scan(&zero, PI, (0.5, 5.0), 101, &cfg()).unwrap();
        assert_eq!(bs.bands, vec![(0.5, 5.0)]);
    }

    #[test]
    fn mathieu_band_scan_has_gaps() {
        let bs = band_scan(&mathieu(), PI, (-1.0, 4.0), 201, &cfg()).unwrap();
        assert!(bs.bands.len() >= 2);
        for e in &bs.edges {
            let d = hill_discriminant(&mathieu(), PI, *e, &cfg()).unwrap();
            assert!((d.abs() - 2.0).abs() < 1e-6, "edge {e}: {d}");
        }
        let (a, b) = bs.bands[0];
        let mid = 0.5 * (a + b);
        assert!((mid - lambda0()).abs() < 1e-8);
        assert!(hill_discriminant(&mathieu(), PI, mid, &cfg()).unwrap().abs() < 2.0);
    }

    #[test]
    fn band_scan_rejects_bad_range() {
        assert!(band_scan(&mathieu(), PI, (1.0, 1.0), 10, &cfg()).is_err());
    }

    #[test]
    fn free_negative_energy_stable_direction() {
        let sys = PeriodicSystem::scalar(Arc::new(|_| 0.0), 1.0, -1.0).unwrap();
        let data = floquet_decomposition(&sys, &cfg(), ModulusTolerance::default()).unwrap();
        let s = infinity_subspace(&sys, &data.split.stable, Side::Plus, 15.0, &cfg()).unwrap();
        let expected = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]) / 2f64.sqrt();
        assert!(max_principal_angle(&s, &expected) < 1e-8);
    }

    #[test]
    fn constant_diagonal_stable_subspace() {
        let ap = crate::potentials::MatrixField::constant(DMatrix::from_diagonal_element(2, 2, 2.0));
        let pot = Potential::new(ap.clone(), ap, 1.0, 2.0).unwrap();
        let sys = PeriodicSystem::at_infinity(&pot, 1.0);
        let data = floquet_decomposition(&sys, &cfg(), ModulusTolerance::default()).unwrap();
        assert_eq!(data.center_count, 0);
        let s = infinity_subspace(&sys, &data.split.stable, Side::Plus, 15.0, &cfg()).unwrap();
        let expected = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]) / 2f64.sqrt();
        assert!(max_principal_angle(&s, &expected) < 1e-8);
    }

    #[test]
    fn example_subspaces_are_one_dimensional() {
        let p = example_problem(None);
        let (s, u) = p.infinity_subspaces(lambda0()).unwrap();
        assert_eq!((s.ncols(), u.ncols()), (1, 1));
    }

    #[test]
    fn free_band_has_no_hyperbolic_directions() {
        let pot = Potential::free(1, 1.0);
        let p = MatchingProblem::new(pot, None, MatchingConfig::default()).unwrap();
        assert_eq!(p.mismatch(1.0).unwrap_err(), Error::NoHyperbolicDirections { dim: 2 });
    }

    #[test]
    fn mismatch_vanishes_at_the_embedded_eigenvalue() {
        let p = example_problem(None);
        let m = p.mismatch(lambda0()).unwrap();
        assert!(m.sigma < 1e-6, "{}", m.sigma);
        // matching vector is (sech, sech')/|.| at 0, i.e. e_1
        assert!((m.v0s[0].abs() - 1.0).abs() < 1e-6);
    }

    /// Shooting on the decoupled scalar equation `u'' = (1 - 2 sech^2 - mu) u`
    /// from the decaying tail: returns the Wronskian-type mismatch
    /// `u'(0) / u(0)` of the even continuation.
    fn scalar_shooting_derivative(mu: f64, eps: f64) -> f64 {
        let k = (1.0 - mu).sqrt();
        let x0 = 20.0;
        let f = crate::ode::CoefficientField::new(2, move |x| {
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0 - (2.0 - eps) * sech(x).powi(2) - mu, 0.0])
        });
        let v = integrate_vector_ode(&f, x0, 0.0, &DVector::from_vec(vec![1.0, -k]), &cfg()).unwrap();
        v[1] / v[0]
    }

    #[test]
    fn no_eigenvalue_off_the_sech_level() {
        let p = example_problem(None);
        let m = p.mismatch(lambda0() + 0.1).unwrap();
        assert!(m.sigma > 0.01, "{}", m.sigma);
        // the even tail solution of the scalar equation has u'(0) != 0 there
        assert!(scalar_shooting_derivative(0.1, 0.0).abs() > 0.01);
        assert!(scalar_shooting_derivative(0.0, 0.0).abs() < 1e-8);
    }

    #[test]
    fn unperturbed_eigenvalue_is_found() {
        let p = example_problem(None);
        let c = p.find_embedded_eigenvalue(lambda0() + 0.013).unwrap();
        assert!(c.flagged);
        assert!((c.lambda - lambda0()).abs() < 1e-7, "{}", c.lambda - lambda0());
    }

    #[test]
    fn unperturbed_eigenfunction_is_sech() {
        let p = example_problem(None);
        let c = p.find_embedded_eigenvalue(lambda0()).unwrap();
        let ef = p.eigenfunction(&c).unwrap();
        assert!(ef.residual < 1e-5, "{}", ef.residual);
        let c0 = 0.5f64.sqrt();
        for (x, v) in ef.xs.iter().zip(&ef.values) {
            assert!((v[0] - c0 * sech(*x)).abs() < 1e-6, "x = {x}: {}", v[0] - c0 * sech(*x));
            assert!(v[1].abs() < 1e-6);
        }
        let u1 = ef.component(0);
        let n = u1.len();
        for j in 0..n {
            assert!((u1[j] - u1[n - 1 - j]).abs() < 1e-6);
        }
    }

    #[test]
    fn diagonal_shift_matches_scalar_shooting() {
        let eps = 0.01;
        let b = make_perturbation(2, PerturbationClass::Diagonal, &Profile::from_name("sech2").unwrap(), eps, 2.0).unwrap();
        let p = example_problem(Some(b));
        let c = p.find_embedded_eigenvalue(lambda0()).unwrap();
        assert!(c.flagged);
        // shooting oracle on the scalar sech block: even bound state of
        // -u'' - (2 - eps) sech^2 u = (mu - 1) u, in mu = lambda - lambda0
        let (mut a, mut bb) = (-0.05, 0.05);
        let fa = scalar_shooting_derivative(a, eps);
        while bb - a > 1e-13 {
            let m = 0.5 * (a + bb);
            if scalar_shooting_derivative(m, eps) * fa > 0.0 {
                a = m;
            } else {
                bb = m;
            }
        }
        let shift = 0.5 * (a + bb);
        assert!((c.lambda - lambda0() - shift).abs() < 1e-7, "{} vs {shift}", c.lambda - lambda0());
        // closed form for the sech^2 well: 1 - s^2 with s(s+1) = 2 - eps
        let s = 0.5 * (-1.0 + (9.0 - 4.0 * eps).sqrt());
        assert!((shift - (1.0 - s * s)).abs() < 1e-9);
        let ef = p.eigenfunction(&c).unwrap();
        assert!(ef.component(1).iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn offdiagonal_coupling_destroys_the_eigenvalue() {
        let b = make_perturbation(2, PerturbationClass::TBeta, &Profile::from_name("sech2").unwrap(), 0.05, 2.0).unwrap();
        let p = example_problem(Some(b));
        let c = p.find_embedded_eigenvalue(lambda0()).unwrap();
        assert!(!c.flagged);
        assert!(c.mismatch > 10.0 * p.config.tol, "{}", c.mismatch);
    }

    #[test]
    fn mismatch_is_basis_independent() {
        let p = example_problem(None);
        let l = lambda0() + 0.02;
        let m = p.mismatch(l).unwrap();
        // flip the sign of the basis vectors: the only orthogonal mixes in 1D
        let m2 = mismatch_from_bases(l, -m.s0.clone(), m.u0.clone()).unwrap();
        assert!((m.sigma - m2.sigma).abs() < 1e-10);
    }

    #[test]
    fn truncation_insensitivity() {
        let l = lambda0() + 0.02;
        let a = example_problem(None).mismatch(l).unwrap().sigma;
        let mut p = example_problem(None);
        p.config.t = 20.0;
        let b = p.mismatch(l).unwrap().sigma;
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn short_truncation_is_rejected() {
        let ex = make_example5(lambda0());
        let cfg = MatchingConfig {
            t: 3.0,
            ..MatchingConfig::default()
        };
        assert!(matches!(MatchingProblem::new(ex.potential, None, cfg).unwrap_err(), Error::Precondition(_)));
    }

    #[test]
    fn mismatch_is_continuous_in_lambda() {
        let p = example_problem(None);
        let l = lambda0() + 0.03;
        let a = p.mismatch(l).unwrap().sigma;
        let b = p.mismatch(l + 1e-6).unwrap().sigma;
        assert!((a - b).abs() < 1e-4);
    }

    #[test]
    fn unflagged_candidate_has_no_eigenfunction() {
        let p = example_problem(None);
        let c = EigenCandidate {
            lambda: 0.0,
            mismatch: 1.0,
            flagged: false,
            v0s: DVector::zeros(4),
            v0u: DVector::zeros(4),
            scan: vec![],
        };
        assert!(matches!(p.eigenfunction(&c).unwrap_err(), Error::NotAnEigenvalue { .. }));
    }

    #[test]
    fn example_center_count_from_blocks() {
        let m = monodromy(&PeriodicSystem::scalar(mathieu(), PI, lambda0()).unwrap(), &cfg()).unwrap();
        assert_eq!(floquet_multipliers(&m, ModulusTolerance::default()).unwrap().1, 2);
    }

    #[test]
    fn simpson_weights_integrate_cubics() {
        let h = 0.25;
        let w = simpson_weights(5, h);
        let s: f64 = w.iter().enumerate().map(|(i, w)| w * (i as f64 * h).powi(3)).sum();
        assert!((s - 0.25).abs() < 1e-14);
        // odd interval count: trapezoid on the last interval
        let w = simpson_weights(6, h);
        let s: f64 = w.iter().enumerate().map(|(i, w)| w * (i as f64 * h).powi(2)).sum();
        assert!((s - 1.25f64.powi(3) / 3.0).abs() <= h.powi(3) / 6.0 + 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(8))]

            #[test]
            fn random_orthogonal_remixing(theta in 0.0f64..std::f64::consts::TAU, l in 0.0f64..0.3) {
                // mix the 2D stable subspace of a constant 4x4 system
                let ap = crate::potentials::MatrixField::constant(DMatrix::from_diagonal_element(2, 2, 2.0));
                let pot = Potential::new(ap.clone(), ap, 1.0, 2.0).unwrap();
                let p = MatchingProblem::new(pot, None, MatchingConfig::default()).unwrap();
                let m = p.mismatch(l).unwrap();
                let rot = DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
                let m2 = mismatch_from_bases(l, &m.s0 * &rot, &m.u0 * rot.transpose()).unwrap();
                prop_assert!((m.sigma - m2.sigma).abs() < 1e-10);
            }
        }
    }
}
