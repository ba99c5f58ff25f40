use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Breakpoint grid resolution in metres.
pub const BREAKPOINT_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseFit {
    pub breakpoint_gsd: f64,
    pub slope_left: f64,
    pub slope_right: f64,
    pub value_at_breakpoint: f64,
    pub sse: f64,
}

impl PiecewiseFit {
    pub fn predict(&self, x: f64) -> f64 {
        let d = x - self.breakpoint_gsd;
        self.value_at_breakpoint + if d < 0.0 { self.slope_left * d } else { self.slope_right * d }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub sse: f64,
}

pub fn secant_slope(a: (f64, f64), b: (f64, f64)) -> f64 {
    (b.1 - a.1) / (b.0 - a.0)
}

fn check_xy(xs: &[f64], ys: &[f64], min_len: usize) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!("{} xs but {} ys", xs.len(), ys.len())));
    }
    if xs.len() < min_len {
        return Err(Error::invalid(format!("need at least {min_len} points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite data"));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("xs must be strictly increasing"));
    }
    Ok(())
}

/// Ordinary least-squares line.
pub fn line_fit(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    check_xy(xs, ys, 2)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(LineFit { intercept, slope, sse })
}

/// Solves the 3x3 system `a x = b` by Gaussian elimination with partial
/// pivoting; `None` when (numerically) singular.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = a.iter().flatten().fold(0f64, |m, v| m.max(v.abs())).max(1e-300);
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0f64; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Continuous two-segment least squares at a fixed breakpoint `c`. A side
/// with no data inherits the other side's slope.
fn fit_at(xs: &[f64], ys: &[f64], c: f64) -> Result<PiecewiseFit> {
    let basis = |x: f64| [1.0, (x - c).min(0.0), (x - c).max(0.0)];
    let mut ata = [[0f64; 3]; 3];
    let mut aty = [0f64; 3];
    for (&x, &y) in xs.iter().zip(ys) {
        let r = basis(x);
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += r[i] * r[j];
            }
            aty[i] += r[i] * y;
        }
    }
    let [level, left, right] = match solve3(ata, aty) {
        Some(p) => p,
        None => {
            // All points on one side of `c`: a single line through it.
            let l = line_fit(xs, ys)?;
            [l.intercept + l.slope * c, l.slope, l.slope]
        }
    };
    let fit = PiecewiseFit {
        breakpoint_gsd: c,
        slope_left: left,
        slope_right: right,
        value_at_breakpoint: level,
        sse: 0.0,
    };
    let sse = xs.iter().zip(ys).map(|(&x, &y)| (y - fit.predict(x)).powi(2)).sum();
    Ok(PiecewiseFit { sse, ..fit })
}

/// Grid search over breakpoints `min x, min x + 0.01, ..` up to `max x`.
/// The lowest SSE wins; candidates within rounding of the best keep the
/// smaller breakpoint.
pub fn piecewise_fit(xs: &[f64], ys: &[f64]) -> Result<PiecewiseFit> {
    check_xy(xs, ys, 4)?;
    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    let steps = ((hi - lo) / BREAKPOINT_STEP + 1e-9).floor() as usize;
    let scale: f64 = ys.iter().map(|y| y * y).sum::<f64>().max(1.0);
    let mut best: Option<PiecewiseFit> = None;
    for k in 0..=steps {
        let c = lo + k as f64 * BREAKPOINT_STEP;
        let fit = fit_at(xs, ys, c)?;
        if best.is_none_or(|b| fit.sse < b.sse - 1e-12 * scale) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one candidate"))
}
