//! Wasserstein-2 estimators and convergence-order fits.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numerics::{psd_sqrt, random_unit_vec, SeedSpec, VecD};
use crate::samplers::GaussianLaw;

fn sorted(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample value".into()));
    }
    let mut out = values.to_vec();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Exact W2 between two empirical measures on the line.
///
/// Equal sizes use the sorted matching; otherwise the two quantile step
/// functions are integrated over the merged breakpoints `i/n ∪ j/m`.
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    let a = sorted(a)?;
    let b = sorted(b)?;
    if a.len() == b.len() {
        let ss: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        return Ok((ss / a.len() as f64).sqrt());
    }
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut prev = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        // next breakpoints compared exactly as (i+1)·m vs (j+1)·n
        let (ni, nj) = ((i + 1) as u128 * m as u128, (j + 1) as u128 * n as u128);
        let next = if ni <= nj {
            (i + 1) as f64 / n as f64
        } else {
            (j + 1) as f64 / m as f64
        };
        let diff = a[i] - b[j];
        acc += diff * diff * (next - prev);
        prev = next;
        if ni <= nj {
            i += 1;
        }
        if nj <= ni {
            j += 1;
        }
    }
    Ok(acc.max(0.0).sqrt())
}

/// Exact W2 between the empirical measure of `a` and `N(mean, sd²)`.
///
/// Each sorted sample `a_(i)` is coupled with the Gaussian quantiles on
/// `[(i−1)/n, i/n]`; the integrals of `z φ(z)` and `z² φ(z)` are closed form.
pub fn w2_1d_vs_gaussian(a: &[f64], mean: f64, sd: f64) -> Result<f64> {
    if !(sd >= 0.0) || !mean.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bad Gaussian N({mean}, {sd}²)"
        )));
    }
    let a = sorted(a)?;
    let n = a.len();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let pdf = |z: f64| {
        if z.is_infinite() {
            0.0
        } else {
            (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
        }
    };
    let zpdf = |z: f64| if z.is_infinite() { 0.0 } else { z * pdf(z) };
    let quantile = |i: usize| match i {
        0 => f64::NEG_INFINITY,
        k if k == n => f64::INFINITY,
        k => std_normal.inverse_cdf(k as f64 / n as f64),
    };
    let w = 1.0 / n as f64;
    let mut acc = 0.0;
    let mut lo = quantile(0);
    for (i, &ai) in a.iter().enumerate() {
        let hi = quantile(i + 1);
        let c = ai - mean;
        // ∫ (c − sd·z)² φ(z) dz over [lo, hi]
        let m1 = pdf(lo) - pdf(hi);
        let m2 = w - (zpdf(hi) - zpdf(lo));
        acc += c * c * w - 2.0 * c * sd * m1 + sd * sd * m2;
        lo = hi;
    }
    Ok(acc.max(0.0).sqrt())
}

/// Closed-form W2 (Bures) distance between two Gaussian laws.
pub fn w2_gaussian(a: &GaussianLaw, b: &GaussianLaw) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument("dimension mismatch".into()));
    }
    let mean_sq = (&a.mean - &b.mean).norm_squared();
    let root_b = psd_sqrt(&b.cov)?;
    let inner = &root_b * &a.cov * &root_b;
    let cross = psd_sqrt(&(0.5 * (&inner + inner.transpose())))?.trace();
    let cov_term = a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok((mean_sq + cov_term.max(0.0)).sqrt())
}

/// Sliced W2 over `n_proj` random directions drawn from `seed`.
pub fn sliced_w2(a: &[VecD], b: &[VecD], n_proj: usize, seed: SeedSpec) -> Result<f64> {
    if n_proj == 0 {
        return Err(Error::InvalidArgument("n_proj must be at least 1".into()));
    }
    let d = a.first().ok_or(Error::EmptySample)?.len();
    let mut rng = seed.rng();
    let dirs: Vec<VecD> = (0..n_proj).map(|_| random_unit_vec(d, &mut rng)).collect();
    sliced_w2_with_directions(a, b, &dirs)
}

/// RMS over `dirs` of the 1-D W2 between projections.
pub fn sliced_w2_with_directions(a: &[VecD], b: &[VecD], dirs: &[VecD]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    if dirs.is_empty() {
        return Err(Error::InvalidArgument("no projection directions".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != d) || dirs.iter().any(|u| u.len() != d) {
        return Err(Error::InvalidArgument("dimension mismatch".into()));
    }
    let mut acc = 0.0;
    for u in dirs {
        let pa: Vec<f64> = a.iter().map(|x| x.dot(u)).collect();
        let pb: Vec<f64> = b.iter().map(|x| x.dot(u)).collect();
        acc += w2_1d(&pa, &pb)?.powi(2);
    }
    Ok((acc / dirs.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two paired points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("x values are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LinearFit {
        slope,
        intercept,
        r2,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Indices of the points that entered the fit.
    pub used: Vec<usize>,
}

/// Least squares on `(log h, log(err − floor))`, skipping points with
/// `err ≤ 2·floor`.
pub fn fit_order(h_list: &[f64], err_list: &[f64], floor: f64) -> Result<OrderFit> {
    if h_list.len() != err_list.len() {
        return Err(Error::InvalidArgument(
            "h and error lists differ in length".into(),
        ));
    }
    if h_list.len() < 3 {
        return Err(Error::InvalidArgument(
            "need at least three step sizes".into(),
        ));
    }
    if !(floor >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "floor must be non-negative, got {floor}"
        )));
    }
    let used: Vec<usize> = (0..h_list.len())
        .filter(|&i| err_list[i] > 2.0 * floor && err_list[i] > 0.0 && h_list[i] > 0.0)
        .collect();
    if used.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "only {} points lie above twice the floor {floor:e}",
            used.len()
        )));
    }
    let x: Vec<f64> = used.iter().map(|&i| h_list[i].ln()).collect();
    let y: Vec<f64> = used.iter().map(|&i| (err_list[i] - floor).ln()).collect();
    let fit = linear_fit(&x, &y)?;
    Ok(OrderFit {
        slope: fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
        used,
    })
}
