//! Small statistics kernels shared by the estimator, metrics and trajectory code.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len().max(1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    libm::sqrt(variance(xs))
}

pub fn norm(xs: &[f64]) -> f64 {
    libm::sqrt(dot(xs, xs))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Sample Pearson correlation.
///
/// Fails with [`Error::DegenerateVariance`] when either argument is constant,
/// since the correlation is undefined there.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    Error::check_dim("pearson operands", x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::InsufficientData("pearson needs at least 2 points".into()));
    }
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0) {
        return Err(Error::DegenerateVariance { what: "x" });
    }
    if !(syy > 0.0) {
        return Err(Error::DegenerateVariance { what: "y" });
    }
    let r = sxy / (libm::sqrt(sxx) * libm::sqrt(syy));
    Ok(r.clamp(-1.0, 1.0))
}

/// Ranks starting at 1, with tied values sharing the mean of their ranks.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) hold ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = r;
        }
        i = j;
    }
    ranks
}

/// Summary of a sample: mean, population std and quartiles.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    /// Quartiles use linear interpolation between order statistics. Returns
    /// `None` for an empty sample.
    pub fn of(xs: &[f64]) -> Option<Summary> {
        if xs.is_empty() {
            return None;
        }
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (sorted.len() - 1) as f64;
            let lo = libm::floor(pos) as usize;
            let hi = libm::ceil(pos) as usize;
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        };
        Some(Summary {
            count: xs.len(),
            mean: mean(xs),
            std: std_dev(xs),
            min: sorted[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

/// Ordinary least-squares slope of `y` on `x` with its 95% confidence
/// half-width (normal approximation on the slope's standard error).
pub fn slope_with_ci(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    Error::check_dim("regression operands", x.len(), y.len())?;
    let n = x.len();
    if n < 3 {
        return Err(Error::InsufficientData("regression needs at least 3 points".into()));
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if !(sxx > 0.0) {
        return Err(Error::DegenerateVariance { what: "x" });
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - (intercept + slope * a);
            r * r
        })
        .sum();
    let se = libm::sqrt(sse / (n - 2) as f64 / sxx);
    Ok((slope, 1.959_963_984_540_054 * se))
}
