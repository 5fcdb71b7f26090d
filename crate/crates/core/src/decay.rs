//! Decay-rate fits of eigenfunction tails and empirical checks of the
//! rate bands of perturbed exponential dichotomies.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{cond2, EigenDecomposition};
use crate::ode::{evolve_subspace_tracked, thin_qr, CoefficientField, IntegratorConfig};
use crate::spectral::Eigenfunction;

/// Least-squares line fit of one tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailFit {
    /// Decay rate `-d log|V| / d|x|`.
    pub rate: f64,
    pub r2: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    pub left: TailFit,
    pub right: TailFit,
    /// Smallest positive real part of the exponents at infinity.
    pub omega_min: f64,
    /// Both tails have `R^2 > 0.99`.
    pub good_fit: bool,
    /// Both rates lie in `(0, 1.05 omega_min]`.
    pub within_bound: bool,
}

impl DecayFit {
    /// Both rates lie in `(0, factor * omega_min]`.
    pub fn rates_within(&self, factor: f64) -> bool {
        [self.left.rate, self.right.rate].iter().all(|r| *r > 0.0 && *r <= factor * self.omega_min)
    }
}

pub const MIN_R2: f64 = 0.99;
/// Relative slack on the decay-rate bound.
pub const RATE_SLACK: f64 = 1.05;

fn line_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

/// Fits `log|V|` against `|x|` on `inner <= |x| <= outer` for each side.
/// A tail whose maxima over consecutive unit windows do not decrease is
/// rejected.
pub fn fit_tail_rates(xs: &[f64], norms: &[f64], inner: f64, outer: f64) -> Result<(TailFit, TailFit)> {
    if xs.len() != norms.len() {
        return Err(Error::GridMismatch(format!("{} abscissae, {} values", xs.len(), norms.len())));
    }
    if !(0.0 <= inner && inner < outer) {
        return Err(Error::InvalidInput(format!("tail window [{inner}, {outer}] is empty")));
    }
    let side = |sign: f64| -> Result<TailFit> {
        let mut pts: Vec<(f64, f64)> = xs
            .iter()
            .zip(norms)
            .filter(|(x, _)| **x * sign >= inner && **x * sign <= outer)
            .map(|(x, v)| (x.abs(), *v))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pts.len() < 3 {
            return Err(Error::DecayFitRejected(format!(
                "only {} samples in the tail window [{inner}, {outer}]",
                pts.len()
            )));
        }
        if pts.iter().any(|(_, v)| !(*v > 0.0)) {
            return Err(Error::DecayFitRejected("tail contains zero or non-finite values".into()));
        }
        let mut window_max = Vec::new();
        let mut start = pts[0].0;
        let mut current = 0.0f64;
        for &(x, v) in &pts {
            if x >= start + 1.0 {
                window_max.push(current);
                start = x;
                current = 0.0;
            }
            current = current.max(v);
        }
        window_max.push(current);
        if window_max.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::DecayFitRejected(format!(
                "tail at {} is not monotone",
                if sign > 0.0 { "+inf" } else { "-inf" }
            )));
        }
        let (lx, ly): (Vec<f64>, Vec<f64>) = pts.iter().map(|(x, v)| (*x, v.ln())).unzip();
        let (slope, r2) = line_fit(&lx, &ly);
        Ok(TailFit {
            rate: -slope,
            r2,
            points: pts.len(),
        })
    };
    Ok((side(-1.0)?, side(1.0)?))
}

/// Decay fit of `|U(x)|` on `|x| in [T/2, T]`.
pub fn fit_decay_rate(ef: &Eigenfunction, omega_min: f64) -> Result<DecayFit> {
    let t = ef.xs.last().copied().unwrap_or(0.0).min(-ef.xs[0]);
    let (left, right) = fit_tail_rates(&ef.xs, &ef.norms(), 0.5 * t, t)?;
    let good_fit = left.r2 > MIN_R2 && right.r2 > MIN_R2;
    let within_bound = [left.rate, right.rate].iter().all(|r| *r > 0.0 && *r <= RATE_SLACK * omega_min);
    Ok(DecayFit {
        left,
        right,
        omega_min,
        good_fit,
        within_bound,
    })
}

/// Dichotomy data of a constant hyperbolic matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DichotomyRates {
    /// Largest real part among eigenvalues with negative real part.
    pub kappa_s: f64,
    /// Smallest real part among eigenvalues with positive real part.
    pub kappa_u: f64,
    /// Condition number of the eigenvector matrix.
    pub k: f64,
    pub dim_s: usize,
    pub dim_u: usize,
}

impl DichotomyRates {
    /// `min(-kappa_s, kappa_u) / (2K)`.
    pub fn max_delta(&self) -> f64 {
        (-self.kappa_s).min(self.kappa_u) / (2.0 * self.k)
    }
}

pub fn dichotomy_rates(base: &DMatrix<f64>) -> Result<DichotomyRates> {
    let eig = EigenDecomposition::from_real(base)?;
    let re: Vec<f64> = eig.values.iter().map(|v| v.re).collect();
    let scale = base.amax().max(1.0);
    if re.iter().any(|r| r.abs() <= 1e-12 * scale) {
        return Err(Error::Precondition("base system has eigenvalues on the imaginary axis".into()));
    }
    let stable: Vec<f64> = re.iter().copied().filter(|r| *r < 0.0).collect();
    let unstable: Vec<f64> = re.iter().copied().filter(|r| *r > 0.0).collect();
    if stable.is_empty() || unstable.is_empty() {
        return Err(Error::Precondition("base system needs both stable and unstable directions".into()));
    }
    Ok(DichotomyRates {
        kappa_s: stable.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        kappa_u: unstable.iter().cloned().fold(f64::INFINITY, f64::min),
        k: cond2(&eig.vectors),
        dim_s: stable.len(),
        dim_u: unstable.len(),
    })
}

/// Outcome of one roughness probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoughnessProbe {
    pub delta: f64,
    pub rates: DichotomyRates,
    /// Slowest measured decay rate of the stable family.
    pub measured_s: f64,
    /// Slowest measured growth rate of the unstable family.
    pub measured_u: f64,
    /// `[kappa_s, kappa_s + 2 K delta]`.
    pub band_s: (f64, f64),
    /// `[kappa_u - 2 K delta, kappa_u]`.
    pub band_u: (f64, f64),
    pub fit_tol: f64,
    pub pass: bool,
}

/// Orthonormal frame adapted to the base flag: real eigenvector columns
/// ordered by decreasing real part, a conjugate pair contributing its real
/// and imaginary parts. Invariant when `D = 0`, so the QR growth rates do
/// not carry a slow alignment transient when two rates are close.
fn spectral_frame(base: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = EigenDecomposition::from_real(base)?;
    let n = base.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (va, vb) = (eig.values[a], eig.values[b]);
        vb.re.total_cmp(&va.re).then(vb.im.total_cmp(&va.im))
    });
    let mut frame = DMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let v = eig.vectors.column(k);
        let second_of_pair = eig.values[k].im < 0.0;
        for i in 0..n {
            frame[(i, col)] = if second_of_pair { v[i].im } else { v[i].re };
        }
    }
    Ok(thin_qr(frame).0)
}

/// Propagates the base-adapted frame under `base + D(x)` over `[0, horizon]` and
/// reads off the growth rates of the QR diagonal, fitted by regression
/// over the second half of the horizon. The stable family is the last
/// `dim_s` columns, the unstable family the first `dim_u`.
pub fn roughness_probe(
    base: &DMatrix<f64>,
    d: Option<&CoefficientField>,
    delta: f64,
    horizon: f64,
    cfg: &IntegratorConfig,
    fit_tol: f64,
) -> Result<RoughnessProbe> {
    let rates = dichotomy_rates(base)?;
    if !(delta >= 0.0) || delta >= rates.max_delta() && delta > 0.0 {
        return Err(Error::Precondition(format!(
            "delta = {delta} is not below min(-kappa_s, kappa_u)/(2K) = {}",
            rates.max_delta()
        )));
    }
    if !(horizon > 0.0) {
        return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
    }
    let n = base.nrows();
    let field = match d {
        Some(d) => CoefficientField::constant(base.clone()).add(d),
        None => CoefficientField::constant(base.clone()),
    };
    let tracked = evolve_subspace_tracked(&field, &spectral_frame(base)?, 0.0, horizon, cfg)?;
    let start = tracked.xs.iter().position(|x| *x >= 0.5 * horizon).unwrap_or(0);
    let xs = &tracked.xs[start..];
    let slope = |col: usize| {
        let ys: Vec<f64> = tracked.log_growth[start..].iter().map(|g| g[col]).collect();
        line_fit(xs, &ys).0
    };
    let slopes: Vec<f64> = (0..n).map(slope).collect();
    let measured_u = slopes[..rates.dim_u].iter().cloned().fold(f64::INFINITY, f64::min);
    let measured_s = slopes[n - rates.dim_s..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let spread = 2.0 * rates.k * delta;
    let band_s = (rates.kappa_s, rates.kappa_s + spread);
    let band_u = (rates.kappa_u - spread, rates.kappa_u);
    let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo - fit_tol && v <= hi + fit_tol;
    Ok(RoughnessProbe {
        delta,
        rates,
        measured_s,
        measured_u,
        band_s,
        band_u,
        fit_tol,
        pass: inside(measured_s, band_s) && inside(measured_u, band_u),
    })
}

/// Random mean-zero field `D(x) = sum_i a_i M_i cos(w_i x + phi_i)` scaled
/// so that `sup_x |D(x)|_2` over `[0, horizon]` equals `delta`.
pub fn random_bounded_field(n: usize, delta: f64, terms: usize, horizon: f64, rng: &mut ChaCha8Rng) -> CoefficientField {
    let parts: Vec<(DMatrix<f64>, f64, f64, f64)> = (0..terms)
        .map(|_| {
            let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            (m, rng.random_range(0.2..1.0), rng.random_range(0.5..4.0), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let raw = move |x: f64| {
        let mut acc = DMatrix::zeros(n, n);
        for (m, a, w, phi) in &parts {
            acc += m * (a * (w * x + phi).cos());
        }
        acc
    };
    let samples = (horizon * 200.0).ceil() as usize;
    let sup = (0..=samples)
        .map(|i| {
            let x = horizon * i as f64 / samples as f64;
            raw(x).singular_values().max()
        })
        .fold(0.0, f64::max);
    let scale = if sup > 0.0 { delta / sup } else { 0.0 };
    CoefficientField::new(n, move |x| raw(x) * scale)
}

/// Hyperbolic base `V diag(r) V^-1` with random rates `|r| in [0.5, 2]`,
/// half of them negative, and a moderately conditioned `V`.
pub fn random_hyperbolic_base(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let rates: Vec<f64> = (0..n)
        .map(|i| {
            let r = rng.random_range(0.5..2.0);
            if i < n / 2 {
                -r
            } else {
                r
            }
        })
        .collect();
    let v = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3));
    let vinv = v.clone().try_inverse().expect("diagonally dominant matrix is invertible");
    v * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(rates)) * vinv
}

/// One seeded random probe: random base, random field with
/// `delta = frac * max_delta` for `frac` drawn from `[0.1, 0.9]`.
pub fn random_probe(
    n: usize,
    seed: u64,
    horizon: f64,
    cfg: &IntegratorConfig,
    fit_tol: f64,
) -> Result<RoughnessProbe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = random_hyperbolic_base(n, &mut rng);
    let rates = dichotomy_rates(&base)?;
    let delta = rng.random_range(0.1..0.9) * rates.max_delta();
    let d = random_bounded_field(n, delta, 4, horizon, &mut rng);
    roughness_probe(&base, Some(&d), delta, horizon, cfg, fit_tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe_cfg() -> IntegratorConfig {
        IntegratorConfig {
            renorm_interval: 0.5,
            ..IntegratorConfig::default()
        }
    }

    #[test]
    fn exact_exponential_tail() {
        let xs: Vec<f64> = (0..=3000).map(|i| -15.0 + 0.01 * i as f64).collect();
        let v: Vec<f64> = xs.iter().map(|x| (-2.0 * x.abs()).exp()).collect();
        let (l, r) = fit_tail_rates(&xs, &v, 7.5, 15.0).unwrap();
        assert!((l.rate - 2.0).abs() < 1e-6 && (r.rate - 2.0).abs() < 1e-6);
        assert!(l.r2 > 0.999_999);
    }

    #[test]
    fn growing_tail_is_rejected() {
        let xs: Vec<f64> = (0..=3000).map(|i| -15.0 + 0.01 * i as f64).collect();
        let v: Vec<f64> = xs.iter().map(|x| (-2.0 * x.abs()).exp() + 1e-3 * (0.4 * x.abs()).exp()).collect();
        assert!(matches!(fit_tail_rates(&xs, &v, 7.5, 15.0).unwrap_err(), Error::DecayFitRejected(_)));
    }

    #[test]
    fn unperturbed_rates_are_exact() {
        let base = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let p = roughness_probe(&base, None, 0.0, 50.0, &probe_cfg(), 1e-2).unwrap();
        assert!((p.measured_s + 1.0).abs() < 1e-3 && (p.measured_u - 1.0).abs() < 1e-3);
        assert!(p.pass);
    }

    #[test]
    fn rotation_generator_perturbation() {
        let base = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let delta = 0.05;
        let d = CoefficientField::constant(DMatrix::from_row_slice(2, 2, &[0.0, delta, -delta, 0.0]));
        let p = roughness_probe(&base, Some(&d), delta, 50.0, &probe_cfg(), 1e-2).unwrap();
        // eigenvalues of R + D are -+sqrt(1 - delta^2)
        let exact = (1.0 - delta * delta).sqrt();
        assert!((p.measured_s + exact).abs() < 1e-3, "{}", p.measured_s);
        assert!(p.measured_s >= -1.0 && p.measured_s <= -1.0 + 2.0 * p.rates.k * delta);
        assert!(p.pass);
    }

    #[test]
    fn shifted_base_rates() {
        // saddle block u'' = u next to a rotation block, shifted by 0.3
        let eta = 0.3;
        let mut base = DMatrix::zeros(4, 4);
        base[(0, 1)] = 1.0;
        base[(1, 0)] = 1.0;
        base[(2, 3)] = 1.0;
        base[(3, 2)] = -1.0;
        base += DMatrix::identity(4, 4) * eta;
        let rates = dichotomy_rates(&base).unwrap();
        assert!((rates.kappa_s + 0.7).abs() < 1e-12 && (rates.kappa_u - 0.3).abs() < 1e-12);
        let p = roughness_probe(&base, None, 0.0, 50.0, &probe_cfg(), 1e-2).unwrap();
        assert!((p.measured_s + 0.7).abs() < 1e-3, "{}", p.measured_s);
        assert!((p.measured_u - 0.3).abs() < 1e-3, "{}", p.measured_u);
    }

    #[test]
    fn inadmissible_delta_is_rejected() {
        let base = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let d = CoefficientField::constant(DMatrix::zeros(2, 2));
        assert!(matches!(
            roughness_probe(&base, Some(&d), 0.6, 10.0, &probe_cfg(), 1e-2).unwrap_err(),
            Error::Precondition(_)
        ));
    }

    #[test]
    fn random_field_has_requested_sup() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = random_bounded_field(3, 0.1, 4, 20.0, &mut rng);
        let sup = (0..=4000).map(|i| d.eval(i as f64 * 0.005).singular_values().max()).fold(0.0, f64::max);
        assert!((sup - 0.1).abs() < 1e-3);
    }

    #[test]
    fn random_probes_are_deterministic_and_inside_the_bands() {
        for seed in 0..4 {
            let a = random_probe(2, seed, 50.0, &probe_cfg(), 1e-2).unwrap();
            let b = random_probe(2, seed, 50.0, &probe_cfg(), 1e-2).unwrap();
            assert_eq!(a, b);
            assert!(a.pass, "{a:?}");
        }
    }

    fn example_fit(b: Option<crate::potentials::Perturbation>) -> DecayFit {
        use crate::potentials::make_example5;
        use crate::spectral::{MatchingConfig, MatchingProblem};
        let ex = make_example5(-0.282_693_710_3);
        let problem = MatchingProblem::new(ex.potential, b, MatchingConfig::default()).unwrap();
        let cand = problem.find_embedded_eigenvalue(ex.lambda0).unwrap();
        let ef = problem.eigenfunction(&cand).unwrap();
        fit_decay_rate(&ef, 1.0).unwrap()
    }

    #[test]
    fn example_eigenfunction_decays_at_unit_rate() {
        let fit = example_fit(None);
        assert!((fit.left.rate - 1.0).abs() < 0.02 && (fit.right.rate - 1.0).abs() < 0.02, "{fit:?}");
        assert!(fit.good_fit && fit.within_bound);
    }

    #[test]
    fn diagonal_perturbation_keeps_the_rate() {
        use crate::potentials::{make_perturbation, PerturbationClass, Profile};
        let b = make_perturbation(2, PerturbationClass::Diagonal, &Profile::from_name("sech2").unwrap(), 0.01, 2.0).unwrap();
        let base = example_fit(None);
        let fit = example_fit(Some(b));
        assert!((fit.left.rate - base.left.rate).abs() < 0.05);
        assert!((fit.right.rate - base.right.rate).abs() < 0.05);
    }
}
