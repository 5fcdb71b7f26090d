//! Cubic interpolation for tabulated potentials.

use crate::error::{Error, Result};

/// Piecewise cubic interpolant through `(x_i, y_i)` with stored second
/// derivatives.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    m: Vec<f64>,
    periodic: bool,
}

fn check_abscissae(xs: &[f64], ys: &[f64], min_len: usize) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput(format!(
            "table has {} abscissae but {} values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < min_len {
        return Err(Error::InvalidInput(format!("table needs at least {min_len} points")));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("table abscissae must be strictly increasing".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("table contains non-finite values".into()));
    }
    Ok(())
}

/// Solves a tridiagonal system in place (Thomas algorithm).
fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = diag.to_vec();
    for i in 0..n {
        if i > 0 {
            let w = sub[i] / d[i - 1];
            d[i] -= w * c[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        c[i] = if i + 1 < n { sup[i] } else { 0.0 };
    }
    rhs[n - 1] /= d[n - 1];
    for i in (0..n - 1).rev() {
        rhs[i] = (rhs[i] - c[i] * rhs[i + 1]) / d[i];
    }
}

impl CubicSpline {
    /// Natural spline (zero curvature at both ends).
    pub fn natural(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        check_abscissae(&xs, &ys, 2)?;
        let n = xs.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            let k = n - 2;
            let mut sub = vec![0.0; k];
            let mut diag = vec![0.0; k];
            let mut sup = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = xs[i] - xs[i - 1];
                let h1 = xs[i + 1] - xs[i];
                sub[i - 1] = h0;
                diag[i - 1] = 2.0 * (h0 + h1);
                sup[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
            }
            solve_tridiagonal(&sub, &diag, &sup, &mut rhs);
            m[1..n - 1].copy_from_slice(&rhs);
        }
        Ok(Self {
            xs,
            ys,
            m,
            periodic: false,
        })
    }

    /// Periodic spline over `[xs[0], xs[last]]`; the first and last values
    /// must coincide.
    pub fn periodic(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        check_abscissae(&xs, &ys, 4)?;
        let n = xs.len();
        let scale = ys.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        if (ys[0] - ys[n - 1]).abs() > 1e-12 * scale {
            return Err(Error::InvalidInput(
                "periodic table must repeat its first value at the end".into(),
            ));
        }
        // unknowns m_0..m_{k-1}, k = n - 1, cyclic
        let k = n - 1;
        let h = |i: usize| xs[i + 1] - xs[i];
        let mut a = nalgebra::DMatrix::<f64>::zeros(k, k);
        let mut rhs = nalgebra::DVector::<f64>::zeros(k);
        for i in 0..k {
            let hp = h((i + k - 1) % k);
            let hn = h(i);
            a[(i, (i + k - 1) % k)] += hp;
            a[(i, i)] += 2.0 * (hp + hn);
            a[(i, (i + 1) % k)] += hn;
            let y_prev = ys[(i + k - 1) % k];
            let y_next = ys[i + 1];
            rhs[i] = 6.0 * ((y_next - ys[i]) / hn - (ys[i] - y_prev) / hp);
        }
        let sol = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidInput("singular periodic spline system".into()))?;
        let mut m: Vec<f64> = sol.iter().cloned().collect();
        m.push(m[0]);
        Ok(Self {
            xs,
            ys,
            m,
            periodic: true,
        })
    }

    pub fn lower(&self) -> f64 {
        self.xs[0]
    }

    pub fn upper(&self) -> f64 {
        *self.xs.last().unwrap()
    }

    /// Evaluates the spline. Periodic splines wrap `x`; natural splines
    /// extrapolate linearly from the end intervals.
    pub fn eval(&self, x: f64) -> f64 {
        let (lo, hi) = (self.lower(), self.upper());
        let x = if self.periodic {
            lo + (x - lo).rem_euclid(hi - lo)
        } else {
            x
        };
        let n = self.xs.len();
        let i = match self.xs.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(i) => i.min(n - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(n - 2),
        };
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let h = x1 - x0;
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        if !self.periodic && (x < lo || x > hi) {
            let (xe, ye, slope) = if x < lo {
                (x0, y0, (y1 - y0) / h - h * (2.0 * m0 + m1) / 6.0)
            } else {
                (x1, y1, (y1 - y0) / h + h * (m0 + 2.0 * m1) / 6.0)
            };
            return ye + slope * (x - xe);
        }
        let a = (x1 - x) / h;
        let b = (x - x0) / h;
        a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_cubic_interior_accuracy() {
        let xs: Vec<f64> = (0..=40).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
        let s = CubicSpline::natural(xs, ys).unwrap();
        for i in 5..35 {
            let x = 0.05 + i as f64 * 0.1;
            assert!((s.eval(x) - x.sin()).abs() < 1e-5);
        }
    }

    #[test]
    fn periodic_spline_wraps() {
        let p = std::f64::consts::PI;
        let xs: Vec<f64> = (0..=64).map(|i| i as f64 * p / 64.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (2.0 * x).cos()).collect();
        let s = CubicSpline::periodic(xs, ys).unwrap();
        for x in [-3.0, -0.1, 0.7, 5.2, 11.0] {
            assert!((s.eval(x) - (2.0 * x).cos()).abs() < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn rejects_unsorted_table() {
        assert!(CubicSpline::natural(vec![0.0, 2.0, 1.0], vec![0.0; 3]).is_err());
        assert!(CubicSpline::periodic(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0, 1.0]).is_err());
    }
}
