//! Distances between laws: total variation through densities or histograms,
//! the exact one-dimensional Wasserstein dual, a two-sample KS test, rank
//! correlation, and a smoothed lower-bound proxy built from a fixed battery
//! of norm-bounded test functions.

use crate::density::DensityEstimate;
use crate::error::{Error, Result};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    TotalVariation,
    Wasserstein1d,
    SmoothedProxy,
}

/// The total-variation values here use the half-L1 normalization, under
/// which laws are at distance at most 1; the companion `l1` field carries
/// the sup over test functions bounded by 1, which is exactly twice that.
#[derive(Clone, Debug, Serialize)]
pub struct DistanceEstimate {
    pub kind: DistanceKind,
    pub value: f64,
    pub half_width: f64,
    /// Integral of |p - q| without the 1/2 (total-variation kinds only).
    pub l1: Option<f64>,
    /// Smallest estimated mass captured by the grid, per argument.
    pub mass_captured: Option<f64>,
    pub grid_points: usize,
    pub warning: Option<String>,
}

/// Trapezoid-free uniform-grid quadrature of |p - q| from two density
/// evaluations on the same grid. Cells are treated as having equal volume
/// `cell`; the grids must match point for point.
pub fn tv_density_grid(p: &[DensityEstimate], q: &[DensityEstimate], cell: f64) -> Result<DistanceEstimate> {
    if p.is_empty() || p.len() != q.len() {
        return Err(Error::Config(format!(
            "grids differ in size: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if !(cell > 0.0) {
        return Err(Error::Config("cell volume must be positive".into()));
    }
    for (a, b) in p.iter().zip(q) {
        if a.point != b.point {
            return Err(Error::Config(format!(
                "grids disagree at {:?} vs {:?}",
                a.point, b.point
            )));
        }
        if !a.alpha.is_empty() || !b.alpha.is_empty() {
            return Err(Error::Config("total variation needs level-zero density estimates".into()));
        }
    }
    let mut l1 = 0.0;
    let mut var = 0.0;
    let mut mass_p = 0.0;
    let mut mass_q = 0.0;
    for (a, b) in p.iter().zip(q) {
        l1 += (a.value - b.value).abs() * cell;
        var += (a.std_error * a.std_error + b.std_error * b.std_error) * cell * cell;
        mass_p += a.value * cell;
        mass_q += b.value * cell;
    }
    let mass = mass_p.min(mass_q);
    let warning = if mass < 0.99 {
        Some(format!("grid captures only {:.1}% of the mass", 100.0 * mass))
    } else {
        None
    };
    Ok(DistanceEstimate {
        kind: DistanceKind::TotalVariation,
        value: 0.5 * l1,
        half_width: 0.5 * var.sqrt(),
        l1: Some(l1),
        mass_captured: Some(mass),
        grid_points: p.len(),
        warning,
    })
}

/// Histogram total variation on a shared binning of the pooled range.
pub fn tv_histogram(f: &[f64], g: &[f64], bins: usize) -> Result<DistanceEstimate> {
    if f.is_empty() || g.is_empty() {
        return Err(Error::Config("empty sample set".into()));
    }
    if bins < 2 {
        return Err(Error::Config("need at least two bins".into()));
    }
    let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
    if !finite(f) || !finite(g) {
        return Err(Error::Estimator("nonfinite samples in histogram".into()));
    }
    let lo = f.iter().chain(g).cloned().fold(f64::INFINITY, f64::min);
    let hi = f.iter().chain(g).cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        // All samples equal: identical point masses.
        return Ok(DistanceEstimate {
            kind: DistanceKind::TotalVariation,
            value: 0.0,
            half_width: 0.0,
            l1: Some(0.0),
            mass_captured: Some(1.0),
            grid_points: bins,
            warning: None,
        });
    }
    let width = (hi - lo) / bins as f64;
    let index = |x: f64| (((x - lo) / width) as usize).min(bins - 1);
    let mut cf = vec![0.0f64; bins];
    let mut cg = vec![0.0f64; bins];
    for &x in f {
        cf[index(x)] += 1.0;
    }
    for &x in g {
        cg[index(x)] += 1.0;
    }
    let (nf, ng) = (f.len() as f64, g.len() as f64);
    let mut l1 = 0.0;
    let mut var = 0.0;
    for b in 0..bins {
        let (pf, pg) = (cf[b] / nf, cg[b] / ng);
        l1 += (pf - pg).abs();
        var += pf * (1.0 - pf) / nf + pg * (1.0 - pg) / ng;
    }
    Ok(DistanceEstimate {
        kind: DistanceKind::TotalVariation,
        value: 0.5 * l1,
        half_width: 0.5 * var.sqrt(),
        l1: Some(l1),
        mass_captured: Some(1.0),
        grid_points: bins,
        warning: None,
    })
}

/// Exact L1 distance between the empirical quantile functions, which is the
/// one-dimensional Wasserstein distance of the empirical laws. Works for
/// unequal sample counts by sweeping the merged quantile breakpoints.
pub fn wasserstein_1d(f: &[f64], g: &[f64]) -> Result<DistanceEstimate> {
    if f.is_empty() || g.is_empty() {
        return Err(Error::Config("empty sample set".into()));
    }
    let mut xs = f.to_vec();
    let mut ys = g.to_vec();
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Estimator("nonfinite samples".into()));
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (n, m) = (xs.len(), ys.len());
    let mut value = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    while i < n && j < m {
        let ui = (i + 1) as f64 / n as f64;
        let uj = (j + 1) as f64 / m as f64;
        let next = ui.min(uj);
        value += (next - u) * (xs[i] - ys[j]).abs();
        u = next;
        if ui <= uj + 1e-15 {
            i += 1;
        }
        if uj <= ui + 1e-15 {
            j += 1;
        }
    }
    // Paired error heuristic, only meaningful for equal sample counts.
    let (half_width, warning) = if n == m {
        let mean = value;
        let msq: f64 = xs.iter().zip(&ys).map(|(a, b)| {
            let d = (a - b).abs();
            d * d
        }).sum::<f64>() / n as f64;
        let se = ((msq - mean * mean).max(0.0) / n as f64).sqrt();
        (se, None)
    } else {
        (0.0, Some("no error estimate for unequal sample counts".to_string()))
    };
    Ok(DistanceEstimate {
        kind: DistanceKind::Wasserstein1d,
        value,
        half_width,
        l1: None,
        mass_captured: None,
        grid_points: 0,
        warning,
    })
}

/// Dimension-checked wrapper for callers holding vector samples.
pub fn wasserstein_rows(f: &[Vec<f64>], g: &[Vec<f64>]) -> Result<DistanceEstimate> {
    let dim = f.first().map_or(0, Vec::len);
    if dim != 1 || g.iter().chain(f).any(|r| r.len() != 1) {
        return Err(Error::Unsupported(
            "the Wasserstein dual is computed in dimension 1 only".into(),
        ));
    }
    let fs: Vec<f64> = f.iter().map(|r| r[0]).collect();
    let gs: Vec<f64> = g.iter().map(|r| r[0]).collect();
    wasserstein_1d(&fs, &gs)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub m: usize,
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic tail; ties are
/// handled by advancing both empirical CDFs through equal values before
/// comparing, which keeps the statistic well defined for atoms.
pub fn ks_two_sample(f: &[f64], g: &[f64]) -> Result<KsResult> {
    if f.is_empty() || g.is_empty() {
        return Err(Error::Config("empty sample set".into()));
    }
    let mut xs = f.to_vec();
    let mut ys = g.to_vec();
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Estimator("nonfinite samples".into()));
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < n && j < m {
        let t = xs[i].min(ys[j]);
        while i < n && xs[i] == t {
            i += 1;
        }
        while j < m && ys[j] == t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n as f64 * m as f64) / (n as f64 + m as f64);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let mut p = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k as f64 * lambda).powi(2)).exp();
        p += term;
        sign = -sign;
        if term.abs() < 1e-12 {
            break;
        }
    }
    Ok(KsResult {
        statistic: d,
        p_value: (2.0 * p).clamp(0.0, 1.0),
        n,
        m,
    })
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config("need two equal-length series of length >= 2".into()));
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let rx = rank(x);
    let ry = rank(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Estimator("constant ranks".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Lower-bound proxy for the smoothed distance of order k: the largest
/// discrepancy of sample means over a fixed battery of functions whose
/// derivatives up to order k are bounded by 1. A sup over a finite battery
/// can only undershoot the true supremum.
pub fn d_k_proxy(f: &[f64], g: &[f64], k: usize) -> Result<DistanceEstimate> {
    if f.is_empty() || g.is_empty() {
        return Err(Error::Config("empty sample set".into()));
    }
    let mut best = 0.0f64;
    let mut best_hw = 0.0f64;
    let mut consider = |vals_f: (f64, f64), vals_g: (f64, f64)| {
        let d = (vals_f.0 - vals_g.0).abs();
        if d > best {
            best = d;
            best_hw = (vals_f.1 * vals_f.1 + vals_g.1 * vals_g.1).sqrt();
        }
    };
    let mean_se = |xs: &[f64], func: &dyn Fn(f64) -> f64| {
        let n = xs.len() as f64;
        let mut s = 0.0;
        let mut s2 = 0.0;
        for &x in xs {
            let v = func(x);
            s += v;
            s2 += v * v;
        }
        let m = s / n;
        (m, ((s2 / n - m * m).max(0.0) / n).sqrt())
    };
    let freqs: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
    let phases = [0.0, 0.7853981633974483, 1.5707963267948966, 2.356194490192345];
    for &a in &freqs {
        // sin(a x + b) / max(1, a)^k keeps all derivatives through order k
        // bounded by 1.
        let scale = a.max(1.0).powi(k as i32);
        for &b in &phases {
            let func = move |x: f64| (a * x + b).sin() / scale;
            consider(mean_se(f, &func), mean_se(g, &func));
        }
    }
    let tanh_fn = |x: f64| x.tanh();
    consider(mean_se(f, &tanh_fn), mean_se(g, &tanh_fn));
    Ok(DistanceEstimate {
        kind: DistanceKind::SmoothedProxy,
        value: best,
        half_width: best_hw,
        l1: None,
        mass_captured: None,
        grid_points: 0,
        warning: None,
    })
}
