//! First-order perturbation data at an embedded eigenvalue: the eigenvalue
//! derivative, bounded Bloch solutions, the tangent functionals and
//! numerical persistence scans.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::floquet::{FloquetData, ModulusTolerance, PeriodicSystem};
use crate::linalg::EigenDecomposition;
use crate::ode::{integrate_sampled, IntegratorConfig};
use crate::potentials::{golden_max, ExactEigenfunction, Perturbation, PerturbationClass, Potential, ScalarFn};
use crate::quadrature::integrate_with_breaks;
use crate::spectral::{Eigenfunction, MatchingProblem};

/// A vector-valued function of `x` known on some interval.
pub trait VectorProfile: Send + Sync {
    fn eval(&self, x: f64) -> DVector<f64>;

    /// Interval on which `eval` is meaningful.
    fn support(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
}

impl VectorProfile for ExactEigenfunction {
    fn eval(&self, x: f64) -> DVector<f64> {
        (self.value)(x)
    }
}

impl VectorProfile for Eigenfunction {
    fn eval(&self, x: f64) -> DVector<f64> {
        Eigenfunction::eval(self, x)
    }

    fn support(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }
}

const QUAD_ABS: f64 = 1e-13;
const QUAD_REL: f64 = 1e-12;
const TAIL_BOUND: f64 = 1e-10;

fn covers(f: &dyn VectorProfile, t: f64, what: &str) -> Result<()> {
    let (lo, hi) = f.support();
    if lo > -t || hi < t {
        return Err(Error::GridMismatch(format!(
            "{what} is sampled on [{lo}, {hi}], which does not cover [-{t}, {t}]"
        )));
    }
    Ok(())
}

fn breaks(t: f64) -> Vec<f64> {
    let k = (2.0 * t).ceil().max(2.0) as usize;
    (0..=k).map(|i| -t + 2.0 * t * i as f64 / k as f64).collect()
}

/// `int_{-t}^{t} f`, rejecting integrands still larger than `1e-10` at
/// the window ends.
fn window_integral<F: FnMut(f64) -> f64>(mut f: F, t: f64) -> Result<f64> {
    let tail = f(t).abs() + f(-t).abs();
    if tail > TAIL_BOUND {
        return Err(Error::QuadratureDiverged { a: -t, b: t, estimate: tail });
    }
    Ok(integrate_with_breaks(f, &breaks(t), QUAD_ABS, QUAD_REL)?.value)
}

/// `-int <u, B u>` over `[-t, t]`.
pub fn lambda_prime(b: &Perturbation, u: &dyn VectorProfile, t: f64) -> Result<f64> {
    covers(u, t, "eigenfunction")?;
    let v = window_integral(
        |x| {
            let ux = u.eval(x);
            ux.dot(&(b.eval(x) * &ux))
        },
        t,
    )?;
    Ok(-v)
}

/// A bounded real solution `z(x)` of the system at infinity: the real or
/// imaginary part of `Phi(x) v` with `M v = mu v`, `|mu| = 1`.
#[derive(Debug, Clone)]
pub struct BlochWave {
    pub period: f64,
    pub multiplier: Complex64,
    pub imaginary: bool,
    /// `1 / sup |z|` over one period.
    pub scale: f64,
    n: usize,
    taus: Vec<f64>,
    /// `Phi(tau_j) v` with the phase fixed.
    samples: Vec<DVector<Complex64>>,
}

/// Intervals per period for the sampled Bloch factor.
pub const BLOCH_GRID: usize = 512;

impl BlochWave {
    fn raw(&self, x: f64) -> DVector<Complex64> {
        let p = self.period;
        let k = (x / p).floor();
        let tau = x - k * p;
        let h = p / BLOCH_GRID as f64;
        let j = ((tau / h).floor() as usize).min(BLOCH_GRID - 1);
        let n = self.n;
        let (a, b) = (&self.samples[j], &self.samples[j + 1]);
        let t = (tau - self.taus[j]) / h;
        let h00 = (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t);
        let h10 = t * (1.0 - t) * (1.0 - t);
        let h01 = t * t * (3.0 - 2.0 * t);
        let h11 = t * t * (t - 1.0);
        let phase = self.multiplier.powf(k);
        DVector::from_fn(n, |i, _| {
            (a[i] * h00 + a[n + i] * (h10 * h) + b[i] * h01 + b[n + i] * (h11 * h)) * phase
        })
    }

    fn part(&self, c: Complex64) -> f64 {
        if self.imaginary {
            c.im
        } else {
            c.re
        }
    }
}

impl VectorProfile for BlochWave {
    fn eval(&self, x: f64) -> DVector<f64> {
        self.raw(x).map(|c| self.part(c) * self.scale)
    }
}

/// Real bounded solutions of `-z'' + A_p z = lambda0 z`: two per center
/// multiplier pair, normalized to unit sup-norm over one period.
pub fn generalized_eigenfunctions(
    potential: &Potential,
    lambda0: f64,
    cfg: &IntegratorConfig,
    tol: ModulusTolerance,
) -> Result<Vec<BlochWave>> {
    let sys = PeriodicSystem::at_infinity(potential, lambda0);
    let n2 = sys.dim();
    let n = n2 / 2;
    let p = sys.period();
    let taus: Vec<f64> = (0..=BLOCH_GRID).map(|j| j as f64 * p / BLOCH_GRID as f64).collect();
    let mut phis = vec![DMatrix::identity(n2, n2)];
    phis.extend(integrate_sampled(sys.field(), 0.0, &taus[1..], &DMatrix::identity(n2, n2), cfg)?);
    let eig = EigenDecomposition::from_real(&phis[BLOCH_GRID])?;
    let mut centers: Vec<usize> = (0..n2)
        .filter(|&i| (eig.values[i].norm() - 1.0).abs() < tol.tol_center && eig.values[i].im > 0.0)
        .collect();
    centers.sort_by(|&a, &b| eig.values[a].arg().total_cmp(&eig.values[b].arg()));
    let on_axis = (0..n2)
        .filter(|&i| (eig.values[i].norm() - 1.0).abs() < tol.tol_center && eig.values[i].im.abs() <= 1e-8)
        .count();
    if on_axis > 0 {
        return Err(Error::BandEdge { lambda: lambda0 });
    }
    let mut waves = Vec::with_capacity(2 * centers.len());
    for i in centers {
        let mut v: DVector<Complex64> = eig.vectors.column(i).into_owned();
        let lead = (0..n).max_by(|&a, &b| v[a].norm().total_cmp(&v[b].norm())).unwrap();
        let phase = v[lead].conj() / v[lead].norm();
        v *= phase;
        let samples: Vec<DVector<Complex64>> = phis.iter().map(|phi| phi.map(|r| Complex64::new(r, 0.0)) * &v).collect();
        for imaginary in [false, true] {
            let mut wave = BlochWave {
                period: p,
                multiplier: eig.values[i],
                imaginary,
                scale: 1.0,
                n,
                taus: taus.clone(),
                samples: samples.clone(),
            };
            let size = |x: f64| wave.raw(x).iter().map(|c| wave.part(*c).abs()).fold(0.0, f64::max);
            let (j, grid_sup) = taus[..BLOCH_GRID]
                .iter()
                .map(|&t| size(t))
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            if grid_sup == 0.0 {
                return Err(Error::BandEdge { lambda: lambda0 });
            }
            // refine between the neighbouring nodes; the maximum may sit
            // at a node where |z| has a kink
            let h = p / BLOCH_GRID as f64;
            let t0 = taus[j];
            let (_, refined) = golden_max(|x| Ok(size(x)), t0 - h, t0 + h, 1e-14)?;
            wave.scale = 1.0 / refined.max(grid_sup);
            waves.push(wave);
        }
    }
    Ok(waves)
}

/// `F_k'(0)B` split into its two integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FunctionalValue {
    /// `-int <z, B u> + lambda' int <z, u>`.
    pub value: f64,
    /// `-int <z, B u>`.
    pub main: f64,
    /// `lambda' int <z, u>`, reported even when structurally zero.
    pub correction: f64,
}

/// `F_k'(0)B = -int <z_k, (B - lambda'(0)B) u>` over `[-t, t]`.
pub fn tangent_functional(
    b: &Perturbation,
    z: &dyn VectorProfile,
    u: &dyn VectorProfile,
    lambda_prime: f64,
    t: f64,
) -> Result<FunctionalValue> {
    covers(u, t, "eigenfunction")?;
    covers(z, t, "generalized eigenfunction")?;
    let main = -window_integral(
        |x| {
            let ux = u.eval(x);
            z.eval(x).dot(&(b.eval(x) * ux))
        },
        t,
    )?;
    let overlap = window_integral(|x| z.eval(x).dot(&u.eval(x)), t)?;
    let correction = lambda_prime * overlap;
    Ok(FunctionalValue {
        value: main + correction,
        main,
        correction,
    })
}

/// The two-component reduction `int b_12 z_2 u_1` (first component of
/// `u` coupled to the second component of `z`).
pub fn coupling_functional(b: &Perturbation, z: &dyn VectorProfile, u: &dyn VectorProfile, t: f64) -> Result<f64> {
    if b.n != 2 {
        return Err(Error::InvalidInput("the coupling reduction needs n = 2".into()));
    }
    covers(u, t, "eigenfunction")?;
    window_integral(|x| b.eval(x)[(0, 1)] * z.eval(x)[1] * u.eval(x)[0], t)
}

/// `(2m, 2m + 1)` at `lambda0`.
pub fn codimension(data: &FloquetData) -> (usize, usize) {
    data.codimension()
}

/// Tangent data at an embedded eigenvalue.
#[derive(Clone)]
pub struct TangentData {
    pub lambda0: f64,
    pub u: Arc<dyn VectorProfile>,
    pub z: Vec<BlochWave>,
    pub center_count: usize,
    /// Integration window `[-t, t]`.
    pub t: f64,
}

impl std::fmt::Debug for TangentData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TangentData")
            .field("lambda0", &self.lambda0)
            .field("center_count", &self.center_count)
            .field("t", &self.t)
            .finish()
    }
}

impl TangentData {
    pub fn new(
        potential: &Potential,
        lambda0: f64,
        u: Arc<dyn VectorProfile>,
        t: f64,
        cfg: &IntegratorConfig,
        tol: ModulusTolerance,
    ) -> Result<Self> {
        let z = generalized_eigenfunctions(potential, lambda0, cfg, tol)?;
        Ok(Self {
            lambda0,
            u,
            center_count: z.len(),
            z,
            t,
        })
    }

    pub fn lambda_prime(&self, b: &Perturbation) -> Result<f64> {
        lambda_prime(b, self.u.as_ref(), self.t)
    }

    /// `F_k'(0)B` for every `k`.
    pub fn functionals(&self, b: &Perturbation) -> Result<Vec<FunctionalValue>> {
        let lp = self.lambda_prime(b)?;
        self.z
            .iter()
            .map(|z| tangent_functional(b, z, self.u.as_ref(), lp, self.t))
            .collect()
    }

    /// Kernel `w_k` with `F_k'(0)B = -int b w_k` for a perturbation
    /// carrying one symmetric coupling `b` at `(0, j)` (`lambda' = 0` there).
    fn coupling_kernel(&self, k: usize, j: usize) -> impl Fn(f64) -> f64 + '_ {
        move |x| {
            let (u, z) = (self.u.eval(x), self.z[k].eval(x));
            z[j] * u[0] + z[0] * u[j]
        }
    }

    /// Gram matrix of the normalized kernels `w_k` for a coupling at `(0, j)`.
    pub fn coupling_gram(&self, j: usize) -> Result<DMatrix<f64>> {
        let m = self.z.len();
        let mut g = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in a..m {
                let (wa, wb) = (self.coupling_kernel(a, j), self.coupling_kernel(b, j));
                let v = window_integral(|x| wa(x) * wb(x), self.t)?;
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        let d = DVector::from_fn(m, |i, _| 1.0 / g[(i, i)].sqrt());
        Ok(DMatrix::from_fn(m, m, |a, b| g[(a, b)] * d[a] * d[b]))
    }

    /// Removes from the coupling profile `f` at `(0, j)` its `L2` components
    /// along the kernels, so that every `F_k'(0)` vanishes on the result;
    /// returns a `T_beta` perturbation normalized to unit weighted norm.
    pub fn tangent_projection(&self, j: usize, f: ScalarFn, beta: f64) -> Result<Perturbation> {
        let n = self.u.eval(0.0).len();
        if j == 0 || j >= n {
            return Err(Error::InvalidInput(format!("coupling column {j} out of range 1..{n}")));
        }
        let m = self.z.len();
        let mut gram = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for a in 0..m {
            let wa = self.coupling_kernel(a, j);
            rhs[a] = window_integral(|x| wa(x) * f(x), self.t)?;
            for b in a..m {
                let wb = self.coupling_kernel(b, j);
                let v = window_integral(|x| wa(x) * wb(x), self.t)?;
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
        }
        let c = gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Precondition("functional kernels are linearly dependent".into()))?
            .solve(&rhs);
        let td = self.clone();
        let projected: ScalarFn = Arc::new(move |x| {
            let mut v = f(x);
            for k in 0..c.len() {
                v -= c[k] * td.coupling_kernel(k, j)(x);
            }
            v
        });
        Perturbation::from_entries(n, PerturbationClass::TBeta, vec![(0, j, projected)], 1.0, beta)?.normalized()
    }
}

/// One row of a persistence scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScanRow {
    pub epsilon: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PersistenceScan {
    pub rows: Vec<ScanRow>,
    /// Slope of `log sigma` against `log epsilon` over the three smallest
    /// `epsilon`.
    pub exponent: f64,
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Runs the eigenvalue search for `B = epsilon * direction` at every
/// `epsilon` (in parallel) and fits the scaling exponent of the minimal
/// mismatch.
pub fn persistence_scan(
    problem: &MatchingProblem,
    direction: &Perturbation,
    epsilons: &[f64],
    lambda0: f64,
) -> Result<PersistenceScan> {
    if epsilons.len() < 3 {
        return Err(Error::InvalidInput("a persistence scan needs at least three epsilons".into()));
    }
    if epsilons.iter().any(|e| !(*e > 0.0)) || epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput("epsilons must be positive and strictly decreasing".into()));
    }
    let norm = direction.with_epsilon(1.0).norm()?.value;
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Precondition(format!(
            "scan direction must have unit weighted norm, got {norm}"
        )));
    }
    let rows: Vec<ScanRow> = epsilons
        .par_iter()
        .map(|&eps| {
            let p = problem.with_perturbation(Some(direction.with_epsilon(eps)));
            let c = p.find_embedded_eigenvalue(lambda0)?;
            Ok(ScanRow {
                epsilon: eps,
                lambda: c.lambda,
                sigma: c.mismatch,
                flagged: c.flagged,
            })
        })
        .collect::<Result<_>>()?;
    let tail = &rows[rows.len() - 3..];
    let exponent = loglog_slope(
        &tail.iter().map(|r| r.epsilon).collect::<Vec<_>>(),
        &tail.iter().map(|r| r.sigma).collect::<Vec<_>>(),
    );
    Ok(PersistenceScan { rows, exponent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::floquet::floquet_decomposition;
    use crate::ode::{integrate_vector_ode, CoefficientField};
    use crate::potentials::{make_example5, make_perturbation, sech, MatrixField, Profile};
    use crate::quadrature::simpson;
    use crate::spectral::{hill_discriminant, MatchingConfig};
    use std::f64::consts::PI;
    use std::sync::OnceLock;

    fn cfg() -> IntegratorConfig {
        IntegratorConfig::default()
    }

    fn lambda0() -> f64 {
        static L: OnceLock<f64> = OnceLock::new();
        *L.get_or_init(|| {
            let vp: ScalarFn = Arc::new(|x| 2.0 * (2.0 * x).cos());
            let d = |l: f64| hill_discriminant(&vp, PI, l, &cfg()).unwrap();
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

    fn tangent_data() -> TangentData {
        let ex = make_example5(lambda0());
        TangentData::new(&ex.potential, ex.lambda0, Arc::new(ex.eigenfunction.clone()), 15.0, &cfg(), ModulusTolerance::default())
            .unwrap()
    }

    fn sech2() -> Profile {
        Profile::from_name("sech2").unwrap()
    }

    #[test]
    fn zero_perturbation_has_zero_derivative() {
        let td = tangent_data();
        let b = Perturbation::zero(2, 2.0);
        assert_eq!(td.lambda_prime(&b).unwrap(), 0.0);
        for f in td.functionals(&b).unwrap() {
            assert_eq!(f.value, 0.0);
        }
    }

    #[test]
    fn diagonal_sech_derivative() {
        let td = tangent_data();
        let b = make_perturbation(2, PerturbationClass::Diagonal, &sech2(), 1.0, 2.0).unwrap();
        let lp = td.lambda_prime(&b).unwrap();
        let oracle = -0.5 * simpson(|x| sech(x).powi(4), -40.0, 40.0, 400_000);
        assert!((oracle + 2.0 / 3.0).abs() < 1e-12);
        assert!((lp - oracle).abs() < 1e-8);
    }

    /// Even bound state of `-u'' - (2 - eps) sech^2 u = (mu - 1) u` by
    /// shooting from the tail and bisecting on `u'(0)`.
    fn shooting_shift(eps: f64) -> f64 {
        let dprime = |mu: f64| {
            let k = (1.0 - mu).sqrt();
            let f = CoefficientField::new(2, move |x| {
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0 - (2.0 - eps) * sech(x).powi(2) - mu, 0.0])
            });
            let v = integrate_vector_ode(&f, 25.0, 0.0, &DVector::from_vec(vec![1.0, -k]), &IntegratorConfig::with_tolerances(1e-12, 1e-14)).unwrap();
            v[1] / v[0]
        };
        let (mut a, mut b) = (-0.1, 0.1);
        let fa = dprime(a);
        while b - a > 1e-14 {
            let m = 0.5 * (a + b);
            if dprime(m) * fa > 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn eigenvalue_shift_is_opposite_to_the_derivative_formula() {
        // the shooting slope of the decoupled problem converges to
        // +int <u, B u> = 2/3; the formula gives the opposite sign
        let td = tangent_data();
        let b = make_perturbation(2, PerturbationClass::Diagonal, &sech2(), 1.0, 2.0).unwrap();
        let lp = td.lambda_prime(&b).unwrap();
        let eps = [1e-2, 5e-3, 2.5e-3];
        let q: Vec<f64> = eps.iter().map(|e| shooting_shift(*e) / e).collect();
        let r1 = 2.0 * q[1] - q[0];
        let r2 = 2.0 * q[2] - q[1];
        let limit = (4.0 * r2 - r1) / 3.0;
        assert!((limit - 2.0 / 3.0).abs() < 1e-6, "{limit}");
        assert!((limit + lp).abs() < 1e-6);
        // first-order convergence of the difference quotients
        assert!(((q[0] - q[1]) / (q[1] - q[2]) - 2.0).abs() < 0.1);
    }

    #[test]
    fn coupling_is_a_structural_zero_for_the_derivative() {
        let td = tangent_data();
        let b = make_perturbation(2, PerturbationClass::TBeta, &sech2(), 1.0, 2.0).unwrap();
        assert_eq!(td.lambda_prime(&b).unwrap(), 0.0);
    }

    #[test]
    fn free_bloch_waves_are_cos_and_sin() {
        // one period must contain the maxima of both cos and |sin|
        let pot = Potential::free(1, 2.5);
        let z = generalized_eigenfunctions(&pot, 1.0, &cfg(), ModulusTolerance::default()).unwrap();
        assert_eq!(z.len(), 2);
        for x in [-7.3, -1.0, 0.0, 0.4, 3.9, 12.0] {
            assert!((z[0].eval(x)[0] - x.cos()).abs() < 1e-7, "x = {x}: {} {}", z[0].eval(x)[0], z[1].eval(x)[0]);
            assert!((z[1].eval(x)[0] - x.sin()).abs() < 1e-7, "x = {x}: {} {}", z[1].eval(x)[0], z[1].scale);
        }
    }

    #[test]
    fn mathieu_bloch_waves_stay_bounded_and_match_direct_integration() {
        let td = tangent_data();
        let t = 15.0;
        for z in &td.z {
            let window_sup = |k: i32| {
                (0..BLOCH_GRID)
                    .map(|i| z.eval((k as f64 + i as f64 / BLOCH_GRID as f64) * PI).amax())
                    .fold(0.0, f64::max)
            };
            let s0 = window_sup(0);
            assert!(s0 <= 1.0 + 1e-12 && s0 > 1.0 - 1e-4, "{s0}");
            // no trend in the per-period maxima over [-50T, 50T]
            let ks: Vec<i32> = (-(50.0 * t / PI) as i32..(50.0 * t / PI) as i32).collect();
            let sups: Vec<f64> = ks.iter().map(|&k| window_sup(k).ln()).collect();
            let xs: Vec<f64> = ks.iter().map(|&k| k as f64 * PI).collect();
            let n = xs.len() as f64;
            let (mx, my) = (xs.iter().sum::<f64>() / n, sups.iter().sum::<f64>() / n);
            let slope = xs.iter().zip(&sups).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
                / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
            assert!(slope.abs() * PI < 1e-3, "{slope}");
            assert!(sups.iter().all(|s| s.exp() <= 1.0 / z.scale.min(1.0) * 2.0));
            assert!((0..400).all(|i| z.eval(-30.0 + 0.15 * i as f64)[0].abs() < 1e-10));
        }
        // direct integration of the Mathieu block from the sampled initial state
        let ex = make_example5(lambda0());
        let field = ex.potential.field_at_infinity(lambda0());
        let z = &td.z[0];
        let h = 1e-6;
        let d0 = (z.eval(h) - z.eval(-h)) / (2.0 * h);
        let v0 = DVector::from_vec(vec![z.eval(0.0)[0], z.eval(0.0)[1], d0[0], d0[1]]);
        let v = integrate_vector_ode(&field, 0.0, 40.0, &v0, &cfg()).unwrap();
        assert!((v[1] - z.eval(40.0)[1]).abs() < 1e-5);
    }

    #[test]
    fn band_edge_is_reported() {
        let pot = Potential::free(1, 1.0);
        // lambda = (2 pi)^2 gives mu = 1, a double multiplier
        let err = generalized_eigenfunctions(&pot, (2.0 * PI).powi(2), &cfg(), ModulusTolerance::default()).unwrap_err();
        assert!(matches!(err, Error::BandEdge { .. } | Error::DefectiveMonodromy { .. } | Error::OddCenterCount { .. }), "{err:?}");
    }

    #[test]
    fn diagonal_perturbations_have_zero_functionals() {
        let td = tangent_data();
        let b = make_perturbation(2, PerturbationClass::Full, &sech2(), 1.0, 2.0).unwrap();
        let diag = Perturbation::from_field(
            PerturbationClass::Diagonal,
            MatrixField::new(2, {
                let s = b.shape().clone();
                move |x| {
                    let m = s.eval(x);
                    DMatrix::from_diagonal(&m.diagonal())
                }
            }),
            1.0,
            2.0,
        )
        .unwrap();
        for f in td.functionals(&diag).unwrap() {
            assert!(f.value.abs() < 1e-10);
        }
    }

    #[test]
    fn general_and_reduced_functionals_differ_by_sign() {
        let td = tangent_data();
        let b = make_perturbation(2, PerturbationClass::TBeta, &sech2(), 1.0, 2.0).unwrap();
        let general = td.functionals(&b).unwrap();
        for (z, g) in td.z.iter().zip(&general) {
            let reduced = coupling_functional(&b, z, td.u.as_ref(), td.t).unwrap();
            assert!((g.value + reduced).abs() < 1e-8, "{} vs {reduced}", g.value);
            assert_eq!(g.correction, 0.0);
        }
        assert!(general.iter().any(|g| g.value.abs() > 1e-3));
    }

    #[test]
    fn kernels_are_independent() {
        let td = tangent_data();
        assert_eq!(td.center_count, 2);
        let g = td.coupling_gram(1).unwrap();
        assert!(g.determinant() > 1e-6);
    }

    #[test]
    fn codimension_of_the_example() {
        let ex = make_example5(lambda0());
        let sys = PeriodicSystem::at_infinity(&ex.potential, lambda0());
        let data = floquet_decomposition(&sys, &cfg(), ModulusTolerance::default()).unwrap();
        assert_eq!(codimension(&data), (2, 3));
        let c = MatrixField::constant(DMatrix::from_diagonal_element(2, 2, 2.0));
        let pot = Potential::new(c.clone(), c, 1.0, 2.0).unwrap();
        let data = floquet_decomposition(&PeriodicSystem::at_infinity(&pot, 1.0), &cfg(), ModulusTolerance::default()).unwrap();
        assert_eq!(codimension(&data).0, 0);
        let data = floquet_decomposition(&PeriodicSystem::at_infinity(&Potential::free(1, 1.0), 1.0), &cfg(), ModulusTolerance::default()).unwrap();
        assert_eq!(codimension(&data).0, 2);
    }

    #[test]
    fn projected_direction_is_tangent() {
        let td = tangent_data();
        let f: ScalarFn = Arc::new(|x| sech(x - 0.3).powi(2) + 0.5 * (-(x + 1.0).powi(2)).exp());
        let b = td.tangent_projection(1, f, 2.0).unwrap();
        assert!((b.norm().unwrap().value - 1.0).abs() < 1e-9);
        for v in td.functionals(&b).unwrap() {
            assert!(v.value.abs() < 1e-10, "{}", v.value);
        }
    }

    #[test]
    fn sampled_eigenfunction_must_cover_the_window() {
        let ex = make_example5(lambda0());
        let p = MatchingProblem::new(ex.potential, None, MatchingConfig::default()).unwrap();
        let c = p.find_embedded_eigenvalue(lambda0()).unwrap();
        let ef = p.eigenfunction(&c).unwrap();
        let b = make_perturbation(2, PerturbationClass::Diagonal, &sech2(), 1.0, 2.0).unwrap();
        assert!(matches!(lambda_prime(&b, &ef, 20.0).unwrap_err(), Error::GridMismatch(_)));
        let lp = lambda_prime(&b, &ef, 15.0).unwrap();
        assert!((lp + 2.0 / 3.0).abs() < 1e-7, "{lp}");
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [0.04, 0.02, 0.01];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(2)).collect();
        assert!((loglog_slope(&xs, &ys) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn scan_validates_inputs() {
        let ex = make_example5(lambda0());
        let p = MatchingProblem::new(ex.potential, None, MatchingConfig::default()).unwrap();
        let b = make_perturbation(2, PerturbationClass::Diagonal, &sech2(), 1.0, 2.0).unwrap();
        assert!(matches!(persistence_scan(&p, &b, &[0.04, 0.02, 0.01], lambda0()).unwrap_err(), Error::Precondition(_)));
        let b = b.normalized().unwrap();
        assert!(persistence_scan(&p, &b, &[0.01, 0.02, 0.04], lambda0()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn profile(c: f64, w: f64) -> ScalarFn {
            Arc::new(move |x| sech((x - c) / w).powi(2))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(6))]

            #[test]
            fn functionals_are_linear(c1 in -2.0f64..2.0, c2 in -2.0f64..2.0, s in -3.0f64..3.0) {
                let td = tangent_data();
                let mk = |c: f64, w: f64, s: f64| Perturbation::from_entries(2, PerturbationClass::Full,
                    vec![(0, 0, profile(c, w)), (0, 1, profile(-c, w)), (1, 1, profile(c, 2.0 * w))], s, 2.0).unwrap();
                let (b1, b2) = (mk(c1, 1.0, 1.0), mk(c2, 0.7, 1.0));
                let sum = Perturbation::from_field(PerturbationClass::Full, b1.shape().add(&b2.shape().scaled(s)), 1.0, 2.0).unwrap();
                let l = |b: &Perturbation| td.lambda_prime(b).unwrap();
                prop_assert!((l(&sum) - l(&b1) - s * l(&b2)).abs() < 1e-10);
                let (f1, f2, fs) = (td.functionals(&b1).unwrap(), td.functionals(&b2).unwrap(), td.functionals(&sum).unwrap());
                for k in 0..fs.len() {
                    prop_assert!((fs[k].value - f1[k].value - s * f2[k].value).abs() < 1e-10);
                }
            }
        }
    }
}
