//! Jump diffusions with truncated marks.
//!
//! Jumps whose marks fall outside a ball of radius `m + 1` are dropped; a
//! radial cutoff fades the jump coefficient between the radii `m - 1` and
//! `m + 1`, so the truncated coefficient stays smooth in the mark. Two
//! equivalent samplers are provided. The thinning form draws candidate marks
//! from the mark law restricted to the ball and accepts each against the
//! state-dependent intensity `gamma`. The smooth form folds acceptance into
//! the mark law itself: rejected candidates become marks near a far-away
//! anchor where the cutoff vanishes, so every candidate updates the state
//! through the same smooth map and the terminal value is a smooth function
//! of the marks. Conditionally on the candidate count and times, the
//! weighted calculus then applies with the marks as coordinates, cutoff
//! values as weights, and the recursive candidate density as `p`.

use crate::distance::{spearman_rho, tv_density_grid, DistanceEstimate};
use crate::density::{density_grid_with, PathSample};
use crate::error::{Error, Result};
use crate::expr::{eval_scalar, eval_with_inputs, Expr};
use crate::jet::{jet_of, path_norms_vec};
use crate::localization::{bump_psi, ln_phi_taylor, ln_psi_taylor, psi_taylor};
use crate::malliavin::{det_taylor, CoordCtx, MallContext};
use crate::mc::{run_sharded, Accumulator, VecMoments};
use crate::noise::ComponentLaw;
use crate::profile::{NondegeneracyProfile, ProfileRow};
use crate::rng::Stream;
use crate::taylor::Taylor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// Hard cap on the drift integrator step.
const RK4_CAP: f64 = 1e-3;
/// Rejection samplers give up after this many draws.
const REJECT_CAP: u64 = 1_000_000;
/// Composite-Simpson panel count shared by every fixed quadrature that feeds
/// the candidate density. Sampler and density must use the same figures, so
/// accuracy matters less than consistency here.
const THETA_PANELS: usize = 200;
/// Density estimates localize away from ill-conditioned paths: the gate
/// opens smoothly between these determinant values. Marks sitting at the
/// cutoff band edge would otherwise feed an unbounded inverse covariance
/// into the weights.
const DET_GATE: f64 = 0.02;

/// State-dependent jump dynamics `dX = g(X) dt + c(Z, X-) dJ` with candidate
/// intensity `gamma(z, x)` bounded by `c_bar` and mark density `h`.
///
/// Slot convention: `c` and `gamma` read the mark in slots `0..dim` and the
/// state in slots `dim..2*dim`; `drift` and the optional envelopes read only
/// slots `0..dim` (the state for `drift`, the mark for the envelopes).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JumpModel {
    pub dim: usize,
    pub c: Vec<Expr>,
    pub gamma: Expr,
    pub c_bar: f64,
    pub drift: Vec<Expr>,
    /// Product mark density, one factor per coordinate.
    pub mark_law: Vec<ComponentLaw>,
    pub x0: Vec<f64>,
    /// Pointwise envelopes `|c(z, .)| in [c_lower(z), c_upper(z)]` and
    /// `gamma(z, .) in [gamma_lower(z), gamma_upper(z)]`, used for the
    /// regeneration statistic and sampled hypothesis checks.
    #[serde(default)]
    pub c_lower: Option<Expr>,
    #[serde(default)]
    pub c_upper: Option<Expr>,
    #[serde(default)]
    pub gamma_lower: Option<Expr>,
    #[serde(default)]
    pub gamma_upper: Option<Expr>,
}

impl JumpModel {
    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        if self.c.len() != d || self.drift.len() != d || self.mark_law.len() != d || self.x0.len() != d {
            return Err(Error::Config(format!(
                "coefficient shapes disagree with dimension {d}: c {}, drift {}, marks {}, x0 {}",
                self.c.len(),
                self.drift.len(),
                self.mark_law.len(),
                self.x0.len()
            )));
        }
        if !(self.c_bar.is_finite() && self.c_bar > 0.0) {
            return Err(Error::Config(format!("intensity bound must be positive, got {}", self.c_bar)));
        }
        for e in self.c.iter().chain(std::iter::once(&self.gamma)) {
            if let Some(&s) = e.vars().iter().find(|&&s| s >= 2 * d) {
                return Err(Error::Config(format!("jump coefficient uses slot {s}, have mark+state slots 0..{}", 2 * d)));
            }
        }
        for e in self.drift.iter() {
            if let Some(&s) = e.vars().iter().find(|&&s| s >= d) {
                return Err(Error::Config(format!("drift uses slot {s}, state has slots 0..{d}")));
            }
        }
        for e in [&self.c_lower, &self.c_upper, &self.gamma_lower, &self.gamma_upper].into_iter().flatten() {
            if let Some(&s) = e.vars().iter().find(|&&s| s >= d) {
                return Err(Error::Config(format!("envelope uses slot {s}, marks have slots 0..{d}")));
            }
        }
        for law in &self.mark_law {
            law.validate()?;
            let (lo, hi) = law.support();
            if !(lo == f64::NEG_INFINITY && hi == f64::INFINITY) && !(lo < 0.0 && hi > 0.0) {
                // The truncation ball is centered at the origin; a mark law
                // supported away from it would make every candidate null.
                return Err(Error::Config("mark law support must contain a neighborhood of 0 or be the whole line".into()));
            }
        }
        for v in self.x0.iter() {
            if !v.is_finite() {
                return Err(Error::Config("initial state must be finite".into()));
            }
        }
        Ok(())
    }

    fn sample_mark_raw(&self, stream: &mut Stream) -> Vec<f64> {
        self.mark_law.iter().map(|law| law.sample(stream)).collect()
    }
}

/// Scalar test model: Cauchy marks, drift pulling toward the origin, jump
/// size proportional to the mark with a gentle state modulation, and a
/// candidate intensity bounded away from both 0 and the envelope.
pub fn cauchy_test_model() -> JumpModel {
    let z = Expr::var(0);
    let x = Expr::var(1);
    let xs = Expr::var(0); // state slot for drift/envelopes
    JumpModel {
        dim: 1,
        c: vec![&z * &(&Expr::constant(1.0) + &(&Expr::constant(0.1) * &x.sin()))],
        gamma: &Expr::constant(0.75) + &(&Expr::constant(0.2) * &x.tanh()),
        c_bar: 1.0,
        drift: vec![-&(&Expr::constant(0.5) * &xs.tanh())],
        mark_law: vec![ComponentLaw::Cauchy { location: 0.0, scale: 1.0 }],
        x0: vec![0.3],
        c_lower: Some(&Expr::constant(0.9) * &xs.pow(2).sqrt()),
        c_upper: Some(&Expr::constant(1.1) * &xs.pow(2).sqrt()),
        gamma_lower: Some(Expr::constant(0.55)),
        gamma_upper: Some(Expr::constant(0.95)),
    }
}

/// Radial cutoff: 1 on the ball of radius `m - 1`, 0 outside radius `m + 1`,
/// a smooth radial ramp in between.
pub fn cutoff_value(m: u32, z: &[f64]) -> f64 {
    let lo = m as f64 - 1.0;
    let hi = m as f64 + 1.0;
    let r2: f64 = z.iter().map(|v| v * v).sum();
    if r2 <= lo * lo {
        return 1.0;
    }
    if r2 >= hi * hi {
        return 0.0;
    }
    let arg = 1.0 + (r2.sqrt() - lo) / 2.0;
    bump_psi(1.0, arg, 0).expect("ramp argument is interior")[0]
}

/// Jet of the radial cutoff in the mark coordinates. Exactly constant on the
/// plateau and outside the support, so null marks carry a genuinely flat
/// weight rather than a numerically small one.
pub fn cutoff_taylor(m: u32, z: &[Taylor]) -> Result<Taylor> {
    let order = z.first().map(|t| t.order()).unwrap_or(0);
    let lo = m as f64 - 1.0;
    let hi = m as f64 + 1.0;
    let mut r2 = Taylor::constant(0.0, order);
    for zi in z {
        r2 = r2.add(&zi.mul(zi));
    }
    if r2.value() <= lo * lo {
        return Ok(Taylor::constant(1.0, order));
    }
    if r2.value() >= hi * hi {
        return Ok(Taylor::constant(0.0, order));
    }
    let r = r2.sqrt().ok_or_else(|| Error::Domain("cutoff ramp at the origin".into()))?;
    let arg = r.add_scalar(-lo).scaled(0.5).add_scalar(1.0);
    Ok(psi_taylor(1.0, &arg))
}

/// Anchor for null marks, placed so the bump around it stays outside the
/// cutoff support: distance `m + 3` along the first axis, bump radius 2.
pub fn null_anchor(m: u32, dim: usize) -> Vec<f64> {
    let mut a = vec![0.0; dim];
    a[0] = m as f64 + 3.0;
    a
}

fn simpson_rule(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, fa: f64, fb: f64) -> (f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    ((b - a) / 6.0 * (fa + 4.0 * fm + fb), fm)
}

fn simpson_recurse(
    f: &mut impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> (f64, f64) {
    let m = 0.5 * (a + b);
    let (left, flm) = simpson_rule(f, a, m, fa, fm);
    let (right, frm) = simpson_rule(f, m, b, fm, fb);
    let err = (left + right - whole) / 15.0;
    if depth == 0 || err.abs() <= tol {
        return (left + right + err, err.abs());
    }
    let (lv, le) = simpson_recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1);
    let (rv, re) = simpson_recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1);
    (lv + rv, le + re)
}

/// Adaptive Simpson quadrature with a global error estimate.
fn adaptive_simpson(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> (f64, f64) {
    let fa = f(a);
    let fb = f(b);
    let (whole, fm) = simpson_rule(&mut f, a, b, fa, fb);
    simpson_recurse(&mut f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Fixed composite Simpson over `[a, b]` with `THETA_PANELS` panels, the
/// shared grid behind every candidate-density quantity.
fn fixed_simpson(mut f: impl FnMut(f64) -> f64, a: f64, b: f64) -> f64 {
    let n = THETA_PANELS;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for j in 1..n {
        let w = if j % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + h * j as f64);
    }
    acc * h / 3.0
}

#[derive(Clone, Copy, Debug)]
pub struct RateReport {
    /// Candidate intensity `2 c_bar * mass`.
    pub lambda: f64,
    /// Mark-law mass of the ball of radius `m + 1`.
    pub mass: f64,
    /// Quadrature error bound (scalar marks) or Monte Carlo standard error
    /// (higher dimensions), already scaled to `lambda`.
    pub error: f64,
}

/// Candidate rate for truncation level `m`. Scalar marks integrate the
/// density adaptively; higher dimensions fall back to Monte Carlo and the
/// stream is consumed only in that case.
pub fn rate_lambda(model: &JumpModel, m: u32, stream: &Stream) -> Result<RateReport> {
    model.validate()?;
    if m == 0 {
        return Err(Error::Config("truncation level must be at least 1".into()));
    }
    let hi = m as f64 + 1.0;
    if model.dim == 1 {
        let law = model.mark_law[0].clone();
        let (mass, err) = adaptive_simpson(|z| law.pdf(z), -hi, hi, 1e-13);
        Ok(RateReport { lambda: 2.0 * model.c_bar * mass, mass, error: 2.0 * model.c_bar * err })
    } else {
        let n = 200_000u64;
        let model = model.clone();
        let acc = run_sharded(
            stream,
            n,
            || VecMoments::new(1),
            |mom, s| {
                let z = model.sample_mark_raw(s);
                let r2: f64 = z.iter().map(|v| v * v).sum();
                mom.push(&[if r2 <= hi * hi { 1.0 } else { 0.0 }]);
                Ok(())
            },
        )?;
        let mass = acc.mean(0);
        Ok(RateReport {
            lambda: 2.0 * model.c_bar * mass,
            mass,
            error: 2.0 * model.c_bar * acc.std_error(0),
        })
    }
}

fn mu_ball_fixed(model: &JumpModel, m: u32) -> f64 {
    let hi = m as f64 + 1.0;
    fixed_simpson(|z| model.mark_law[0].pdf(z), -hi, hi)
}

/// Probability that a candidate at state `x` is null, i.e. resampled into
/// the far bump: `1 - (2 c_bar mu_B)^{-1} * integral_B gamma(z, x) h(z) dz`.
/// Always in `[1/2, 1]` when `gamma` respects its bound. Scalar marks only.
pub fn theta_m(model: &JumpModel, m: u32, x: &[f64]) -> Result<f64> {
    model.validate()?;
    require_scalar_marks(model)?;
    let hi = m as f64 + 1.0;
    let mut point = vec![0.0; 2];
    point[1] = x[0];
    let mut bad = None;
    let mass = fixed_simpson(
        |z| {
            point[0] = z;
            match eval_scalar(&model.gamma, &point) {
                Ok(g) => g * model.mark_law[0].pdf(z),
                Err(e) => {
                    bad = Some(e);
                    0.0
                }
            }
        },
        -hi,
        hi,
    );
    if let Some(e) = bad {
        return Err(e);
    }
    Ok(1.0 - mass / (2.0 * model.c_bar * mu_ball_fixed(model, m)))
}

fn require_scalar_marks(model: &JumpModel) -> Result<()> {
    if model.dim != 1 {
        return Err(Error::Unsupported(format!(
            "candidate-density quadrature is implemented for scalar marks, dimension is {}",
            model.dim
        )));
    }
    Ok(())
}

/// Same quantity with the state as a jet, integrating coefficientwise over
/// the shared fixed grid.
fn theta_taylor(model: &JumpModel, m: u32, x: &[Taylor], order: usize) -> Result<Taylor> {
    require_scalar_marks(model)?;
    let hi = m as f64 + 1.0;
    let n = THETA_PANELS;
    let h = 2.0 * hi / n as f64;
    let mut acc = Taylor::constant(0.0, order);
    for j in 0..=n {
        let z = -hi + h * j as f64;
        let w = if j == 0 || j == n {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let inputs = [Taylor::constant(z, order), x[0].clone()];
        let g = eval_with_inputs(std::slice::from_ref(&model.gamma), &inputs)?.remove(0);
        acc = acc.add(&g.scaled(w * model.mark_law[0].pdf(z)));
    }
    let mass = acc.scaled(h / 3.0);
    Ok(mass.scaled(-1.0 / (2.0 * model.c_bar * mu_ball_fixed(model, m))).add_scalar(1.0))
}

/// Mass of the normalized radial bump `psi_1(|u|)` on the line.
fn bump_mass_1d() -> f64 {
    static MASS: OnceLock<f64> = OnceLock::new();
    *MASS.get_or_init(|| {
        adaptive_simpson(|u| bump_psi(1.0, u, 0).expect("bump value")[0], -2.0, 2.0, 1e-13).0
    })
}

fn sample_mark_in_ball(model: &JumpModel, m: u32, stream: &mut Stream) -> Result<Vec<f64>> {
    let hi = m as f64 + 1.0;
    for _ in 0..REJECT_CAP {
        let z = model.sample_mark_raw(stream);
        let r2: f64 = z.iter().map(|v| v * v).sum();
        if r2 <= hi * hi {
            return Ok(z);
        }
    }
    Err(Error::Model("mark law puts vanishing mass in the truncation ball".into()))
}

/// Draw from the density proportional to `psi_1(|u|)` by rejection from the
/// uniform box.
fn sample_bump_offset(dim: usize, stream: &mut Stream) -> Result<Vec<f64>> {
    for _ in 0..REJECT_CAP {
        let u: Vec<f64> = (0..dim).map(|_| stream.uniform(-2.0, 2.0)).collect();
        let r2: f64 = u.iter().map(|v| v * v).sum();
        if r2 >= 4.0 {
            continue;
        }
        let value = bump_psi(1.0, r2.sqrt(), 0)?[0];
        if stream.next_f64() < value {
            return Ok(u);
        }
    }
    Err(Error::Resource("bump rejection sampler exceeded its draw cap".into()))
}

fn gamma_at(model: &JumpModel, z: &[f64], x: &[f64]) -> Result<f64> {
    let mut point = Vec::with_capacity(2 * model.dim);
    point.extend_from_slice(z);
    point.extend_from_slice(x);
    let g = eval_scalar(&model.gamma, &point)?;
    if !(g.is_finite() && (-1e-12..=model.c_bar * (1.0 + 1e-12)).contains(&g)) {
        return Err(Error::Model(format!(
            "candidate intensity {g} escapes [0, {}] at mark {z:?}, state {x:?}",
            model.c_bar
        )));
    }
    Ok(g.clamp(0.0, model.c_bar))
}

/// One candidate mark at state `x`: with probability `gamma(z, x) / (2 c_bar)`
/// a real mark from the ball, otherwise a null mark near the far anchor. The
/// split needs no quadrature, so the sampled law is exact.
pub fn sample_qm(model: &JumpModel, m: u32, x: &[f64], stream: &mut Stream) -> Result<Vec<f64>> {
    let z = sample_mark_in_ball(model, m, stream)?;
    let g = gamma_at(model, &z, x)?;
    if stream.uniform(0.0, 2.0 * model.c_bar) < g {
        return Ok(z);
    }
    let anchor = null_anchor(m, model.dim);
    let off = sample_bump_offset(model.dim, stream)?;
    Ok(anchor.iter().zip(off).map(|(a, o)| a + o).collect())
}

/// Candidate density at `(z, x)`: bump part weighted by `theta_m` plus the
/// accepted part `gamma h / (2 c_bar mu_B)` inside the ball. Normalized up
/// to the shared quadrature error. Scalar marks only.
pub fn qm_density(model: &JumpModel, m: u32, x: &[f64], z: f64) -> Result<f64> {
    require_scalar_marks(model)?;
    let hi = m as f64 + 1.0;
    let mut value = 0.0;
    let anchor = null_anchor(m, 1)[0];
    let off = z - anchor;
    if off.abs() < 2.0 {
        value += theta_m(model, m, x)? * bump_psi(1.0, off, 0)?[0] / bump_mass_1d();
    }
    if z.abs() < hi {
        let g = gamma_at(model, &[z], x)?;
        value += g * model.mark_law[0].pdf(z) / (2.0 * model.c_bar * mu_ball_fixed(model, m));
    }
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Candidates accepted or rejected against an auxiliary uniform.
    Thinning,
    /// Rejection folded into the mark law; every candidate maps through the
    /// smooth update.
    Smooth,
}

/// One simulated path skeleton: candidate times, marks, and the state after
/// each candidate.
#[derive(Clone, Debug)]
pub struct PathRecord {
    pub m: u32,
    pub t: f64,
    pub representation: Representation,
    pub times: Vec<f64>,
    pub marks: Vec<Vec<f64>>,
    /// Thinning: the uniform cleared the intensity. Smooth: the mark landed
    /// where the cutoff is positive.
    pub accepted: Vec<bool>,
    /// State right after each candidate.
    pub states: Vec<Vec<f64>>,
    pub x_t: Vec<f64>,
}

fn check_horizon(t: f64) -> Result<()> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Config(format!("horizon must be finite and nonnegative, got {t}")));
    }
    Ok(())
}

/// Classical RK4 for the drift flow; the step never exceeds `RK4_CAP` nor a
/// tenth of the interval.
fn flow_scalar(model: &JumpModel, x: &mut [f64], dt: f64) -> Result<()> {
    if dt <= 0.0 {
        return Ok(());
    }
    let step = RK4_CAP.min(dt / 10.0);
    let steps = (dt / step).ceil() as usize;
    let h = dt / steps as f64;
    let d = model.dim;
    let eval = |p: &[f64]| -> Result<Vec<f64>> {
        model.drift.iter().map(|e| eval_scalar(e, p)).collect()
    };
    let mut stage = vec![0.0; d];
    for _ in 0..steps {
        let k1 = eval(x)?;
        for i in 0..d {
            stage[i] = x[i] + 0.5 * h * k1[i];
        }
        let k2 = eval(&stage)?;
        for i in 0..d {
            stage[i] = x[i] + 0.5 * h * k2[i];
        }
        let k3 = eval(&stage)?;
        for i in 0..d {
            stage[i] = x[i] + h * k3[i];
        }
        let k4 = eval(&stage)?;
        for i in 0..d {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    Ok(())
}

fn flow_taylor(model: &JumpModel, x: &mut Vec<Taylor>, dt: f64) -> Result<()> {
    if dt <= 0.0 {
        return Ok(());
    }
    let step = RK4_CAP.min(dt / 10.0);
    let steps = (dt / step).ceil() as usize;
    let h = dt / steps as f64;
    let d = model.dim;
    for _ in 0..steps {
        let k1 = eval_with_inputs(&model.drift, x)?;
        let s2: Vec<Taylor> = (0..d).map(|i| x[i].add(&k1[i].scaled(0.5 * h))).collect();
        let k2 = eval_with_inputs(&model.drift, &s2)?;
        let s3: Vec<Taylor> = (0..d).map(|i| x[i].add(&k2[i].scaled(0.5 * h))).collect();
        let k3 = eval_with_inputs(&model.drift, &s3)?;
        let s4: Vec<Taylor> = (0..d).map(|i| x[i].add(&k3[i].scaled(h))).collect();
        let k4 = eval_with_inputs(&model.drift, &s4)?;
        for i in 0..d {
            let incr = k1[i].add(&k2[i].scaled(2.0)).add(&k3[i].scaled(2.0)).add(&k4[i]);
            x[i] = x[i].add(&incr.scaled(h / 6.0));
        }
    }
    Ok(())
}

fn draw_times(t: f64, lambda: f64, stream: &mut Stream) -> Vec<f64> {
    let j = stream.poisson(lambda * t);
    let mut times: Vec<f64> = (0..j).map(|_| stream.uniform(0.0, t)).collect();
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    times
}

fn apply_jump(model: &JumpModel, x: &mut [f64], z: &[f64], cut: f64) -> Result<()> {
    if cut == 0.0 {
        return Ok(());
    }
    let mut point = Vec::with_capacity(2 * model.dim);
    point.extend_from_slice(z);
    point.extend_from_slice(x);
    let c: Vec<f64> = model.c.iter().map(|e| eval_scalar(e, &point)).collect::<Result<_>>()?;
    for i in 0..model.dim {
        x[i] += cut * c[i];
    }
    Ok(())
}

/// Thinning sampler: candidates arrive at rate `2 c_bar mu_B`, each accepted
/// when an independent uniform on `[0, 2 c_bar]` falls below the intensity.
pub fn simulate_path(model: &JumpModel, m: u32, t: f64, stream: &mut Stream) -> Result<PathRecord> {
    check_horizon(t)?;
    let rate = rate_lambda(model, m, stream)?;
    let times = draw_times(t, rate.lambda, stream);
    let mut x = model.x0.clone();
    let mut prev = 0.0;
    let mut marks = Vec::with_capacity(times.len());
    let mut accepted = Vec::with_capacity(times.len());
    let mut states = Vec::with_capacity(times.len());
    for &s in &times {
        flow_scalar(model, &mut x, s - prev)?;
        prev = s;
        let z = sample_mark_in_ball(model, m, stream)?;
        let g = gamma_at(model, &z, &x)?;
        let acc = stream.uniform(0.0, 2.0 * model.c_bar) < g;
        if acc {
            apply_jump(model, &mut x, &z, cutoff_value(m, &z))?;
        }
        marks.push(z);
        accepted.push(acc);
        states.push(x.clone());
    }
    flow_scalar(model, &mut x, t - prev)?;
    Ok(PathRecord { m, t, representation: Representation::Thinning, times, marks, accepted, states, x_t: x })
}

/// Smooth sampler: identical in law to the thinning form, but every
/// candidate flows through the cutoff jump map, with rejection absorbed into
/// the mark law as far null marks.
pub fn simulate_path_smooth(model: &JumpModel, m: u32, t: f64, stream: &mut Stream) -> Result<PathRecord> {
    check_horizon(t)?;
    let rate = rate_lambda(model, m, stream)?;
    let times = draw_times(t, rate.lambda, stream);
    let mut x = model.x0.clone();
    let mut prev = 0.0;
    let mut marks = Vec::with_capacity(times.len());
    let mut accepted = Vec::with_capacity(times.len());
    let mut states = Vec::with_capacity(times.len());
    for &s in &times {
        flow_scalar(model, &mut x, s - prev)?;
        prev = s;
        let z = sample_qm(model, m, &x, stream)?;
        let cut = cutoff_value(m, &z);
        apply_jump(model, &mut x, &z, cut)?;
        marks.push(z);
        accepted.push(cut > 0.0);
        states.push(x.clone());
    }
    flow_scalar(model, &mut x, t - prev)?;
    Ok(PathRecord { m, t, representation: Representation::Smooth, times, marks, accepted, states, x_t: x })
}

/// The weighted-calculus context of one smooth path, conditional on its
/// candidate count and times: marks as coordinates, cutoff values as
/// weights, and the log of the sequential candidate density differentiated
/// through the replayed skeleton.
pub struct PathContext {
    pub ctx: MallContext,
    /// Terminal state as jets over the mark coordinates.
    pub x: Vec<Taylor>,
}

/// Replays a smooth record in jet arithmetic. Returns the terminal jets and
/// the joint log-density of the marks, both at `order`.
fn path_jets(model: &JumpModel, record: &PathRecord, order: usize) -> Result<(Vec<Taylor>, Taylor)> {
    let m = record.m;
    let d = model.dim;
    let hi = m as f64 + 1.0;
    let norm_real = (2.0 * model.c_bar * mu_ball_fixed(model, m)).ln();
    let mut x: Vec<Taylor> = model.x0.iter().map(|&v| Taylor::constant(v, order)).collect();
    let mut lnp = Taylor::constant(0.0, order);
    let mut prev = 0.0;
    for (k, z_vals) in record.marks.iter().enumerate() {
        flow_taylor(model, &mut x, record.times[k] - prev)?;
        prev = record.times[k];
        let z: Vec<Taylor> =
            (0..d).map(|i| Taylor::var((k * d + i) as u32, z_vals[i], order)).collect();
        let r = z_vals.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r < hi {
            // Accepted branch of the candidate density:
            // gamma(z, x) h(z) / (2 c_bar mu_B).
            let mut inputs = z.clone();
            inputs.extend(x.iter().cloned());
            let g = eval_with_inputs(std::slice::from_ref(&model.gamma), &inputs)?.remove(0);
            let lg = g
                .ln()
                .ok_or_else(|| Error::Model(format!("mark {z_vals:?} accepted where the intensity vanishes")))?;
            lnp = lnp.add(&lg).add_scalar(-norm_real);
            for i in 0..d {
                let lh = model.mark_law[i].log_density_taylor((k * d + i) as u32, z_vals[i], order)?;
                lnp = lnp.add(&lh);
            }
        } else {
            // Null branch: theta_m(x) times the normalized far bump.
            let th = theta_taylor(model, m, &x, order)?;
            let lth = th.ln().ok_or_else(|| Error::Model("null-candidate probability vanished".into()))?;
            lnp = lnp.add(&lth).add_scalar(-bump_mass_1d().ln());
            let anchor = null_anchor(m, d);
            let mut u2 = Taylor::constant(0.0, order);
            for i in 0..d {
                let off = z[i].add_scalar(-anchor[i]);
                u2 = u2.add(&off.mul(&off));
            }
            if u2.value() > 1.0 {
                let u = u2.sqrt().ok_or_else(|| Error::Domain("bump radius at 0".into()))?;
                let lb = ln_psi_taylor(1.0, &u)
                    .ok_or_else(|| Error::Model(format!("null mark {z_vals:?} outside the bump support")))?;
                lnp = lnp.add(&lb);
            }
        }
        let cut = cutoff_taylor(m, &z)?;
        if cut.value() != 0.0 {
            let mut inputs = z.clone();
            inputs.extend(x.iter().cloned());
            let c = eval_with_inputs(&model.c, &inputs)?;
            for i in 0..d {
                x[i] = x[i].add(&cut.mul(&c[i]));
            }
        }
    }
    flow_taylor(model, &mut x, record.t - prev)?;
    Ok((x, lnp))
}

/// Value of the joint candidate log-density along a smooth record.
pub fn log_path_density(model: &JumpModel, record: &PathRecord) -> Result<f64> {
    require_smooth(record)?;
    model.validate()?;
    require_scalar_marks(model)?;
    Ok(path_jets(model, record, 0)?.1.value())
}

fn require_smooth(record: &PathRecord) -> Result<()> {
    if record.representation != Representation::Smooth {
        return Err(Error::Config(
            "thinning records are not differentiable in their marks; use the smooth representation".into(),
        ));
    }
    Ok(())
}

pub fn path_context(model: &JumpModel, record: &PathRecord, order: usize) -> Result<PathContext> {
    require_smooth(record)?;
    model.validate()?;
    require_scalar_marks(model)?;
    let d = model.dim;
    let (x_hi, lnp) = path_jets(model, record, order + 1)?;
    let mut coords = Vec::with_capacity(record.marks.len() * d);
    for (k, z_vals) in record.marks.iter().enumerate() {
        let z: Vec<Taylor> =
            (0..d).map(|i| Taylor::var((k * d + i) as u32, z_vals[i], order)).collect();
        let weight = cutoff_taylor(record.m, &z)?;
        for (i, zi) in z_vals.iter().enumerate() {
            let var = (k * d + i) as u32;
            coords.push(CoordCtx { var, value: *zi, weight: weight.clone(), dlogp: lnp.partial(var) });
        }
    }
    let ctx = MallContext::new(coords, order);
    let x = x_hi.iter().map(|t| t.truncated(order)).collect();
    Ok(PathContext { ctx, x })
}

/// First-variation data of one path: the tangent matrix, its maintained
/// inverse, the Frobenius bound on the condition number, and the
/// regeneration statistic built from marks under the cutoff plateau.
pub struct TangentFlow {
    pub y: DMatrix<f64>,
    pub y_hat: DMatrix<f64>,
    pub cond: f64,
    /// `|y_hat|^{-2} * sum of c_lower(z)^2` over plateau marks; `None` when
    /// the model carries no lower envelope.
    pub rho: Option<f64>,
}

fn drift_jacobian(model: &JumpModel, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = model.dim;
    let jets: Vec<Taylor> = x.iter().enumerate().map(|(i, &v)| Taylor::var(i as u32, v, 1)).collect();
    let out = eval_with_inputs(&model.drift, &jets)?;
    let vals: Vec<f64> = out.iter().map(|t| t.value()).collect();
    let jac = DMatrix::from_fn(d, d, |i, j| out[i].gradient(j as u32));
    Ok((vals, jac))
}

type TangentState = (Vec<f64>, DMatrix<f64>, DMatrix<f64>);

fn flow_tangent(model: &JumpModel, state: &mut TangentState, dt: f64) -> Result<()> {
    if dt <= 0.0 {
        return Ok(());
    }
    let step = RK4_CAP.min(dt / 10.0);
    let steps = (dt / step).ceil() as usize;
    let h = dt / steps as f64;
    let deriv = |s: &TangentState| -> Result<TangentState> {
        let (g, jac) = drift_jacobian(model, &s.0)?;
        Ok((g, &jac * &s.1, -(&s.2 * &jac)))
    };
    let shift = |s: &TangentState, k: &TangentState, a: f64| -> TangentState {
        (
            s.0.iter().zip(&k.0).map(|(x, dx)| x + a * dx).collect(),
            &s.1 + &k.1 * a,
            &s.2 + &k.2 * a,
        )
    };
    for _ in 0..steps {
        let k1 = deriv(state)?;
        let k2 = deriv(&shift(state, &k1, 0.5 * h))?;
        let k3 = deriv(&shift(state, &k2, 0.5 * h))?;
        let k4 = deriv(&shift(state, &k3, h))?;
        for i in 0..model.dim {
            state.0[i] += h / 6.0 * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i]);
        }
        state.1 += (&k1.1 + &k2.1 * 2.0 + &k3.1 * 2.0 + &k4.1) * (h / 6.0);
        state.2 += (&k1.2 + &k2.2 * 2.0 + &k3.2 * 2.0 + &k4.2) * (h / 6.0);
    }
    Ok(())
}

/// Replays a record and integrates the tangent equation, updating through
/// each effective jump by `I + cut * grad_x c` and maintaining the inverse
/// factor by factor.
pub fn tangent_flow(model: &JumpModel, record: &PathRecord) -> Result<TangentFlow> {
    model.validate()?;
    let d = model.dim;
    let eye = DMatrix::<f64>::identity(d, d);
    let mut state: TangentState = (model.x0.clone(), eye.clone(), eye.clone());
    let mut prev = 0.0;
    for (k, z) in record.marks.iter().enumerate() {
        flow_tangent(model, &mut state, record.times[k] - prev)?;
        prev = record.times[k];
        if !record.accepted[k] {
            continue;
        }
        let cut = cutoff_value(record.m, z);
        if cut == 0.0 {
            continue;
        }
        let mut jets: Vec<Taylor> = z.iter().map(|&v| Taylor::constant(v, 1)).collect();
        for (i, &v) in state.0.iter().enumerate() {
            jets.push(Taylor::var((d + i) as u32, v, 1));
        }
        let c = eval_with_inputs(&model.c, &jets)?;
        let a = &eye + DMatrix::from_fn(d, d, |i, j| cut * c[i].gradient((d + j) as u32));
        let a_inv = a
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Model(format!("jump map is singular at mark {z:?}")))?;
        for i in 0..d {
            state.0[i] += cut * c[i].value();
        }
        state.1 = &a * &state.1;
        state.2 = &state.2 * &a_inv;
    }
    flow_tangent(model, &mut state, record.t - prev)?;
    let (_, y, y_hat) = state;
    let cond = y.norm() * y_hat.norm();
    let rho = match &model.c_lower {
        None => None,
        Some(env) => {
            let plateau = record.m as f64 - 1.0;
            let mut sum = 0.0;
            for z in &record.marks {
                let r2: f64 = z.iter().map(|v| v * v).sum();
                if r2 <= plateau * plateau {
                    let lo = eval_scalar(env, z)?;
                    sum += lo * lo;
                }
            }
            let nh = y_hat.norm();
            Some(sum / (nh * nh))
        }
    };
    Ok(TangentFlow { y, y_hat, cond, rho })
}

/// Samples candidate marks near `x0`-centered states and checks the
/// intensity and the optional envelopes pointwise. A sampled check, not a
/// proof.
pub fn spot_check(model: &JumpModel, m: u32, n: u64, stream: &mut Stream) -> Result<()> {
    model.validate()?;
    let d = model.dim;
    for _ in 0..n {
        let z = sample_mark_in_ball(model, m, stream)?;
        let x: Vec<f64> = model.x0.iter().map(|&v| v + 3.0 * stream.normal()).collect();
        let g = gamma_at(model, &z, &x)?;
        if let Some(env) = &model.gamma_lower {
            let lo = eval_scalar(env, &z)?;
            if g < lo - 1e-9 {
                return Err(Error::Model(format!("intensity {g} below its envelope {lo} at {z:?}")));
            }
        }
        if let Some(env) = &model.gamma_upper {
            let hi = eval_scalar(env, &z)?;
            if g > hi + 1e-9 {
                return Err(Error::Model(format!("intensity {g} above its envelope {hi} at {z:?}")));
            }
        }
        if model.c_lower.is_some() || model.c_upper.is_some() {
            let mut point = Vec::with_capacity(2 * d);
            point.extend_from_slice(&z);
            point.extend_from_slice(&x);
            let norm: f64 = model
                .c
                .iter()
                .map(|e| eval_scalar(e, &point).map(|v| v * v))
                .sum::<Result<f64>>()?
                .sqrt();
            if let Some(env) = &model.c_lower {
                let lo = eval_scalar(env, &z)?;
                if norm < lo - 1e-9 {
                    return Err(Error::Model(format!("jump size {norm} below its envelope {lo} at {z:?}")));
                }
            }
            if let Some(env) = &model.c_upper {
                let hi = eval_scalar(env, &z)?;
                if norm > hi + 1e-9 {
                    return Err(Error::Model(format!("jump size {norm} above its envelope {hi} at {z:?}")));
                }
            }
        }
    }
    Ok(())
}

/// Truncation-convergence study: each level is compared against the largest
/// one, which stands in for the untruncated law.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JumpStudy {
    pub model: JumpModel,
    /// Strictly increasing truncation levels; the last is the reference.
    pub levels: Vec<u32>,
    pub t: f64,
    /// Paths per level for the histogram distance.
    pub n_paths: u64,
    pub bins: usize,
    /// Paths per level for the Sobolev and nondegeneracy pass.
    pub n_sobolev: u64,
    pub p: u32,
    pub epsilons: Vec<f64>,
    /// Paths for the density-estimator cross-check on the smallest level;
    /// 0 disables it.
    #[serde(default)]
    pub n_density: u64,
    #[serde(default)]
    pub grid_lo: f64,
    #[serde(default)]
    pub grid_hi: f64,
    #[serde(default)]
    pub grid_cells: usize,
    /// Thresholds (> 1) for the regeneration-mass report; empty skips it.
    #[serde(default)]
    pub a_grid: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct JumpLevelRow {
    pub m: u32,
    pub lambda: f64,
    /// Histogram total variation against the reference sample.
    pub tv: f64,
    pub tv_half_width: f64,
    /// `E(|F|_3^p)^{1/p}` over the smooth representation.
    pub sobolev: f64,
    pub sobolev_se: f64,
    pub mean_candidates: f64,
    /// Fraction of paths with a singular terminal covariance (no effective
    /// mark): the atom the density estimator must exclude.
    pub degenerate_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct CrossCheck {
    pub m: u32,
    /// Windowed total variation from the gate-localized density estimator.
    pub density_tv: DistanceEstimate,
    /// Same window and gate, estimated by a weighted histogram instead.
    pub hist_tv: f64,
    pub hist_half_width: f64,
}

#[derive(Clone, Debug)]
pub struct EtaThetaRow {
    pub a: f64,
    /// `(1/ln a) * E(gamma_lower(Z) ; c_lower(Z)^2 >= 1/a)` over the raw
    /// mark law.
    pub value: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug)]
pub struct JumpReport {
    pub m_ref: u32,
    pub lambda_ref: f64,
    pub rows: Vec<JumpLevelRow>,
    /// Distance between the closest level and the reference: the resolution
    /// limit of using a finite reference in place of the full law.
    pub proxy_error: f64,
    pub spearman_tv: Option<f64>,
    pub profile: NondegeneracyProfile,
    pub cross_check: Option<CrossCheck>,
    pub eta_theta: Vec<EtaThetaRow>,
}

impl JumpStudy {
    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.dim != 1 {
            return Err(Error::Unsupported("the convergence study compares scalar terminal laws".into()));
        }
        if self.levels.is_empty() || self.levels.windows(2).any(|w| w[0] >= w[1]) || self.levels[0] == 0 {
            return Err(Error::Config(format!("levels must be strictly increasing and positive: {:?}", self.levels)));
        }
        check_horizon(self.t)?;
        if self.t == 0.0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.n_paths < 100 || self.bins < 8 {
            return Err(Error::Config("need at least 100 paths and 8 bins".into()));
        }
        if self.n_sobolev < 50 || self.p == 0 {
            return Err(Error::Config("need at least 50 Sobolev paths and p >= 1".into()));
        }
        if self.epsilons.is_empty() || self.epsilons.windows(2).any(|w| w[0] >= w[1]) || self.epsilons[0] <= 0.0 {
            return Err(Error::Config("epsilons must be positive and strictly increasing".into()));
        }
        if self.n_density > 0 && (self.grid_cells < 4 || !(self.grid_lo < self.grid_hi)) {
            return Err(Error::Config("density cross-check needs a sane grid".into()));
        }
        if self.a_grid.iter().any(|&a| a <= 1.0) || self.a_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("a-grid thresholds must exceed 1 and increase".into()));
        }
        Ok(())
    }
}

/// Heavy tails would starve a raw histogram of center resolution, so both
/// samples are remapped through the same bounded injection first; total
/// variation is invariant under that.
fn squash(x: f64) -> f64 {
    (x / 4.0).tanh()
}

struct PathBag {
    xs: Vec<f64>,
    candidates: VecMoments,
}

impl Accumulator for PathBag {
    fn merge(&mut self, other: Self) {
        self.xs.extend(other.xs);
        self.candidates.merge(other.candidates);
    }
}

fn terminal_sample(model: &JumpModel, m: u32, t: f64, n: u64, stream: &Stream) -> Result<(Vec<f64>, f64)> {
    let acc = run_sharded(
        stream,
        n,
        || PathBag { xs: Vec::new(), candidates: VecMoments::new(1) },
        |bag, s| {
            let rec = simulate_path_smooth(model, m, t, s)?;
            bag.xs.push(rec.x_t[0]);
            bag.candidates.push(&[rec.marks.len() as f64]);
            Ok(())
        },
    )?;
    let mean = acc.candidates.mean(0);
    Ok((acc.xs, mean))
}

struct NormBag {
    mom: VecMoments,
    dets: Vec<f64>,
}

impl Accumulator for NormBag {
    fn merge(&mut self, other: Self) {
        self.mom.merge(other.mom);
        self.dets.extend(other.dets);
    }
}

/// Sobolev norm of the terminal state over the smooth representation plus
/// the per-path covariance determinants for the nondegeneracy profile.
fn sobolev_and_dets(
    model: &JumpModel,
    m: u32,
    t: f64,
    p: u32,
    n: u64,
    stream: &Stream,
) -> Result<(f64, f64, f64, Vec<f64>)> {
    let acc = run_sharded(
        stream,
        n,
        || NormBag { mom: VecMoments::new(2), dets: Vec::new() },
        |bag, s| {
            let rec = simulate_path_smooth(model, m, t, s)?;
            let pc = path_context(model, &rec, 3)?;
            let jets = pc
                .x
                .iter()
                .map(|f| jet_of(&pc.ctx, f, 3))
                .collect::<Result<Vec<_>>>()?;
            let norms = path_norms_vec(&jets, 3)?;
            let grads = pc.x.iter().map(|f| pc.ctx.grad(f)).collect::<Result<Vec<_>>>()?;
            let cov = pc.ctx.covariance(&grads);
            bag.mom.push(&[norms.total.powi(p as i32), if cov.det <= 0.0 { 1.0 } else { 0.0 }]);
            bag.dets.push(cov.det.max(0.0));
            Ok(())
        },
    )?;
    if acc.mom.rejected() > 0 {
        return Err(Error::Estimator(format!("{} nonfinite Sobolev samples", acc.mom.rejected())));
    }
    let mean = acc.mom.mean(0);
    let norm = mean.powf(1.0 / p as f64);
    // Delta method through the p-th root.
    let se = if mean > 0.0 {
        acc.mom.std_error(0) * norm / (p as f64 * mean)
    } else {
        0.0
    };
    Ok((norm, se, acc.mom.mean(1), acc.dets))
}

fn tails_from_dets(mut dets: Vec<f64>, epsilons: &[f64]) -> Vec<f64> {
    dets.sort_by(|a, b| a.partial_cmp(b).expect("finite determinants"));
    let n = dets.len() as f64;
    epsilons.iter().map(|&e| dets.partition_point(|&d| d <= e) as f64 / n).collect()
}

/// Smooth away-from-zero gate in the covariance determinant, the localizer
/// behind every jump-path density estimate. Paths with no effective mark or
/// a nearly flat mark response are weighted out instead of feeding a huge
/// inverse covariance into the weights.
fn conditioning_gate(pc: &PathContext) -> Result<(f64, Option<Taylor>)> {
    if pc.ctx.dim() == 0 {
        return Ok((0.0, None));
    }
    let grads = pc.x.iter().map(|f| pc.ctx.grad(f)).collect::<Result<Vec<_>>>()?;
    let sigma = pc.ctx.sigma_taylor(&grads);
    let det = det_taylor(&sigma);
    match ln_phi_taylor(DET_GATE, &det) {
        None => Ok((0.0, None)),
        Some(ln) => Ok((ln.value().exp(), Some(ln))),
    }
}

/// Windowed histogram distance with each path weighted by the conditioning
/// gate, normalized by the full path count: the sampling-side twin of the
/// gate-localized density distance.
fn weighted_window_tv(a: &[(f64, f64)], b: &[(f64, f64)], lo: f64, hi: f64, cells: usize) -> (f64, f64) {
    let width = (hi - lo) / cells as f64;
    let fill = |xs: &[(f64, f64)]| {
        let mut mass = vec![0.0; cells];
        let mut mass2 = vec![0.0; cells];
        for &(x, w) in xs {
            if !(lo..hi).contains(&x) || w == 0.0 {
                continue;
            }
            let cell = ((x - lo) / width) as usize;
            mass[cell] += w;
            mass2[cell] += w * w;
        }
        let n = xs.len() as f64;
        (0..cells)
            .map(|i| {
                let p = mass[i] / n;
                (p, (mass2[i] / n - p * p).max(0.0) / n)
            })
            .collect::<Vec<_>>()
    };
    let ca = fill(a);
    let cb = fill(b);
    let mut l1 = 0.0;
    let mut var = 0.0;
    for i in 0..cells {
        l1 += (ca[i].0 - cb[i].0).abs();
        var += ca[i].1 + cb[i].1;
    }
    (0.5 * l1, 0.5 * var.sqrt())
}

fn gated_sample(
    model: &JumpModel,
    m: u32,
    t: f64,
    n: u64,
    stream: &Stream,
) -> Result<Vec<(f64, f64)>> {
    struct Bag(Vec<(f64, f64)>);
    impl Accumulator for Bag {
        fn merge(&mut self, other: Self) {
            self.0.extend(other.0);
        }
    }
    let acc = run_sharded(
        stream,
        n,
        || Bag(Vec::new()),
        |bag, s| {
            let rec = simulate_path_smooth(model, m, t, s)?;
            let pc = path_context(model, &rec, 1)?;
            let (gate, _) = conditioning_gate(&pc)?;
            bag.0.push((rec.x_t[0], gate));
            Ok(())
        },
    )?;
    Ok(acc.0)
}

fn density_provider<'a>(
    model: &'a JumpModel,
    m: u32,
    t: f64,
) -> impl Fn(&mut Stream) -> Result<Option<PathSample>> + Sync + 'a {
    move |s: &mut Stream| {
        let rec = simulate_path_smooth(model, m, t, s)?;
        let pc = path_context(model, &rec, 2)?;
        let (theta, ln_theta) = conditioning_gate(&pc)?;
        Ok(Some(PathSample { ctx: pc.ctx, f: pc.x, theta, ln_theta }))
    }
}

pub fn tv_convergence_experiment(study: &JumpStudy, stream: &Stream) -> Result<JumpReport> {
    study.validate()?;
    let model = &study.model;
    let m_ref = *study.levels.last().expect("validated non-empty");
    spot_check(model, m_ref, 500, &mut stream.substream(900_000))?;
    let rate_ref = rate_lambda(model, m_ref, stream)?;

    let (ref_xs, _) = terminal_sample(model, m_ref, study.t, study.n_paths, &stream.substream(0))?;
    let ref_squashed: Vec<f64> = ref_xs.iter().map(|&x| squash(x)).collect();

    let mut rows = Vec::with_capacity(study.levels.len());
    let mut profile_rows = Vec::with_capacity(study.levels.len());
    for (k, &m) in study.levels.iter().enumerate() {
        let lambda = rate_lambda(model, m, stream)?.lambda;
        let (xs, mean_candidates) =
            terminal_sample(model, m, study.t, study.n_paths, &stream.substream(1 + k as u64))?;
        let squashed: Vec<f64> = xs.iter().map(|&x| squash(x)).collect();
        let tv = crate::distance::tv_histogram(&squashed, &ref_squashed, study.bins)?;
        let (sobolev, sobolev_se, degenerate_fraction, dets) = sobolev_and_dets(
            model,
            m,
            study.t,
            study.p,
            study.n_sobolev,
            &stream.substream(1_000_000 + k as u64),
        )?;
        profile_rows.push(ProfileRow {
            label: format!("m={m}"),
            det_tail: tails_from_dets(dets, &study.epsilons),
            lambda_tail: Vec::new(),
            n: study.n_sobolev,
        });
        rows.push(JumpLevelRow {
            m,
            lambda,
            tv: tv.value,
            tv_half_width: tv.half_width,
            sobolev,
            sobolev_se,
            mean_candidates,
            degenerate_fraction,
        });
    }
    // Scalar covariances have det = lambda_min; share the tail vectors.
    for row in &mut profile_rows {
        row.lambda_tail = row.det_tail.clone();
    }
    let tail = profile_rows.len().min(2);
    let grid = study.epsilons.len();
    let mut eta = vec![0.0_f64; grid];
    let mut eta_bar = vec![0.0_f64; grid];
    for row in profile_rows.iter().rev().take(tail) {
        for j in 0..grid {
            eta[j] = eta[j].max(row.det_tail[j]);
            eta_bar[j] = eta_bar[j].max(row.lambda_tail[j]);
        }
    }
    let profile = NondegeneracyProfile { epsilons: study.epsilons.clone(), rows: profile_rows, eta, eta_bar, tail };

    let proxy_error = if rows.len() >= 2 { rows[rows.len() - 2].tv } else { rows[0].tv };
    let spearman_tv = if rows.len() >= 3 {
        let ms: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
        let tvs: Vec<f64> = rows.iter().map(|r| r.tv).collect();
        spearman_rho(&ms, &tvs).ok()
    } else {
        None
    };

    let cross_check = if study.n_density > 0 {
        let m0 = study.levels[0];
        let cells = study.grid_cells;
        let cell = (study.grid_hi - study.grid_lo) / cells as f64;
        let points: Vec<Vec<f64>> = (0..cells)
            .map(|i| vec![study.grid_lo + (i as f64 + 0.5) * cell])
            .collect();
        let p = density_grid_with(
            density_provider(model, m0, study.t),
            1,
            &[],
            &points,
            study.n_density,
            &stream.substream(2_000_000),
        )?;
        let q = density_grid_with(
            density_provider(model, m_ref, study.t),
            1,
            &[],
            &points,
            study.n_density,
            &stream.substream(2_000_001),
        )?;
        let density_tv = tv_density_grid(&p, &q, cell)?;
        let xa = gated_sample(model, m0, study.t, 4 * study.n_density, &stream.substream(3_000_000))?;
        let xb = gated_sample(model, m_ref, study.t, 4 * study.n_density, &stream.substream(3_000_001))?;
        let (hist_tv, hist_half_width) =
            weighted_window_tv(&xa, &xb, study.grid_lo, study.grid_hi, cells);
        Some(CrossCheck { m: m0, density_tv, hist_tv, hist_half_width })
    } else {
        None
    };

    let eta_theta = match (&model.c_lower, &model.gamma_lower) {
        (Some(c_lo), Some(g_lo)) if !study.a_grid.is_empty() => {
            let acc = run_sharded(
                &stream.substream(4_000_000),
                200_000,
                || VecMoments::new(study.a_grid.len()),
                |mom, s| {
                    let z = model.sample_mark_raw(s);
                    let c2 = eval_scalar(c_lo, &z)?.powi(2);
                    let g = eval_scalar(g_lo, &z)?;
                    let row: Vec<f64> =
                        study.a_grid.iter().map(|&a| if c2 >= 1.0 / a { g } else { 0.0 }).collect();
                    mom.push(&row);
                    Ok(())
                },
            )?;
            study
                .a_grid
                .iter()
                .enumerate()
                .map(|(i, &a)| EtaThetaRow {
                    a,
                    value: acc.mean(i) / a.ln(),
                    std_error: acc.std_error(i) / a.ln(),
                })
                .collect()
        }
        _ => Vec::new(),
    };

    Ok(JumpReport {
        m_ref,
        lambda_ref: rate_ref.lambda,
        rows,
        proxy_error,
        spearman_tv,
        profile,
        cross_check,
        eta_theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::ks_two_sample;
    use crate::noise::ComponentLaw;

    fn flat_model(gamma: f64, mark: ComponentLaw) -> JumpModel {
        JumpModel {
            dim: 1,
            c: vec![Expr::var(0)],
            gamma: Expr::constant(gamma),
            c_bar: 1.0,
            drift: vec![Expr::constant(0.0)],
            mark_law: vec![mark],
            x0: vec![0.0],
            c_lower: None,
            c_upper: None,
            gamma_lower: None,
            gamma_upper: None,
        }
    }

    #[test]
    fn cutoff_has_plateau_band_and_support() {
        assert_eq!(cutoff_value(4, &[0.0]), 1.0);
        assert_eq!(cutoff_value(4, &[-3.0]), 1.0);
        assert_eq!(cutoff_value(4, &[5.0]), 0.0);
        assert_eq!(cutoff_value(4, &[-6.2]), 0.0);
        let mid = cutoff_value(4, &[4.0]);
        assert!(mid > 0.0 && mid < 1.0, "ramp value {mid}");
        // Plateau jets are exactly flat.
        let z = [Taylor::var(0, 1.7, 3)];
        let jet = cutoff_taylor(4, &z).unwrap();
        assert_eq!(jet.value(), 1.0);
        assert_eq!(jet.partial_deriv(&[0]), 0.0);
        // Band jets match a central difference of the value.
        let z = [Taylor::var(0, 4.3, 2)];
        let jet = cutoff_taylor(4, &z).unwrap();
        let h = 1e-6;
        let fd = (cutoff_value(4, &[4.3 + h]) - cutoff_value(4, &[4.3 - h])) / (2.0 * h);
        assert!((jet.partial_deriv(&[0]) - fd).abs() < 1e-6, "jet {} fd {fd}", jet.partial_deriv(&[0]));
    }

    #[test]
    fn rate_matches_reference_masses() {
        let stream = Stream::new(7);
        // Gaussian marks: the ball of radius 7 holds all the mass.
        let g = flat_model(0.5, ComponentLaw::Gaussian { mean: 0.0, variance: 1.0 });
        let r = rate_lambda(&g, 6, &stream).unwrap();
        assert!((r.lambda - 2.0).abs() < 1e-6, "lambda {}", r.lambda);
        // Scaling the intensity bound scales the rate exactly.
        let mut g2 = g.clone();
        g2.c_bar = 3.5;
        let r2 = rate_lambda(&g2, 6, &stream).unwrap();
        assert!((r2.lambda / r.lambda - 3.5).abs() < 1e-9);
        // Compactly supported marks inside the ball: mass exactly 1.
        let b = flat_model(0.5, ComponentLaw::SmoothBounded { lo: -0.5, hi: 0.5 });
        let rb = rate_lambda(&b, 2, &stream).unwrap();
        assert!((rb.mass - 1.0).abs() < 1e-9, "mass {}", rb.mass);
        // Cauchy closed form: mass = (2/pi) atan(m + 1).
        let c = flat_model(0.5, ComponentLaw::Cauchy { location: 0.0, scale: 1.0 });
        let rc = rate_lambda(&c, 4, &stream).unwrap();
        let expect = 2.0 * (5.0_f64).atan() / std::f64::consts::PI;
        assert!((rc.mass - expect).abs() < 1e-8, "mass {} vs {expect}", rc.mass);
    }

    #[test]
    fn theta_spans_its_range() {
        // gamma == c_bar: half the candidates are null.
        let full = flat_model(1.0, ComponentLaw::Cauchy { location: 0.0, scale: 1.0 });
        let th = theta_m(&full, 3, &[0.0]).unwrap();
        assert!((th - 0.5).abs() < 1e-9, "theta {th}");
        // gamma == 0: every candidate is null.
        let none = flat_model(0.0, ComponentLaw::Cauchy { location: 0.0, scale: 1.0 });
        assert!((theta_m(&none, 3, &[0.0]).unwrap() - 1.0).abs() < 1e-12);
        let model = cauchy_test_model();
        let th = theta_m(&model, 2, &[0.3]).unwrap();
        assert!(th > 0.5 && th < 1.0, "theta {th}");
    }

    #[test]
    fn candidate_sampler_matches_its_density() {
        let model = cauchy_test_model();
        let m = 2;
        let x = [0.3];
        let n = 30_000usize;
        let mut stream = Stream::new(42);
        let mut null_count = 0usize;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let z = sample_qm(&model, m, &x, &mut stream).unwrap()[0];
            if z.abs() >= m as f64 + 1.0 {
                null_count += 1;
            }
            samples.push(z);
        }
        // Null fraction against theta.
        let th = theta_m(&model, m, &x).unwrap();
        let se = (th * (1.0 - th) / n as f64).sqrt();
        let frac = null_count as f64 / n as f64;
        assert!((frac - th).abs() < 4.0 * se, "null fraction {frac} vs theta {th}");
        // Chi-square of the binned sample against the quadrature of qm.
        let mut edges: Vec<f64> = (0..=24).map(|i| -3.0 + 6.0 * i as f64 / 24.0).collect();
        edges.extend((1..=16).map(|i| 3.0 + 4.0 * i as f64 / 16.0));
        let mut stat = 0.0;
        let mut total_p = 0.0;
        for w in edges.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (p, _) = adaptive_simpson(|z| qm_density(&model, m, &x, z).unwrap(), a, b, 1e-10);
            total_p += p;
            let observed = samples.iter().filter(|&&z| z >= a && z < b).count() as f64;
            let expected = p * n as f64;
            assert!(expected > 5.0, "bin [{a}, {b}] expects {expected}");
            stat += (observed - expected).powi(2) / expected;
        }
        assert!((total_p - 1.0).abs() < 1e-4, "density mass {total_p}");
        let df = (edges.len() - 2) as f64;
        let chi = statrs::distribution::ChiSquared::new(df).unwrap();
        let p_value = 1.0 - statrs::distribution::ContinuousCDF::cdf(&chi, stat);
        assert!(p_value > 1e-3, "chi-square {stat} at {df} df, p {p_value}");
    }

    #[test]
    fn ball_sampler_gives_up_on_far_laws() {
        let far = flat_model(0.5, ComponentLaw::Cauchy { location: 1e12, scale: 1.0 });
        let mut stream = Stream::new(3);
        let err = sample_mark_in_ball(&far, 2, &mut stream).unwrap_err();
        assert!(matches!(err, Error::Model(_)), "got {err:?}");
    }

    #[test]
    fn drift_flow_matches_linear_closed_form() {
        let mut model = flat_model(0.0, ComponentLaw::Gaussian { mean: 0.0, variance: 1.0 });
        model.drift = vec![&Expr::constant(-0.5) * &Expr::var(0)];
        model.x0 = vec![1.3];
        let mut x = model.x0.clone();
        flow_scalar(&model, &mut x, 2.0).unwrap();
        assert!((x[0] - 1.3 * (-1.0_f64).exp()).abs() < 1e-10, "flow {x:?}");
        // gamma == 0 makes both samplers deterministic transport.
        let mut stream = Stream::new(11);
        let a = simulate_path(&model, 3, 2.0, &mut stream).unwrap();
        let b = simulate_path_smooth(&model, 3, 2.0, &mut stream).unwrap();
        assert!((a.x_t[0] - x[0]).abs() < 1e-12);
        assert!((b.x_t[0] - x[0]).abs() < 1e-12);
        assert!(b.accepted.iter().all(|&acc| !acc), "all candidates null");
    }

    #[test]
    fn symmetric_marks_preserve_the_mean() {
        let model = flat_model(1.0, ComponentLaw::Gaussian { mean: 0.0, variance: 1.0 });
        let n = 6_000u64;
        let acc = run_sharded(
            &Stream::new(19),
            n,
            || VecMoments::new(2),
            |mom, s| {
                let rec = simulate_path(&model, 3, 0.5, s)?;
                mom.push(&[rec.x_t[0], rec.marks.len() as f64]);
                Ok(())
            },
        )
        .unwrap();
        let z = acc.mean(0) / acc.std_error(0);
        assert!(z.abs() < 3.0, "terminal mean {} (z = {z})", acc.mean(0));
        // Candidate count matches the rate.
        let lam = rate_lambda(&model, 3, &Stream::new(1)).unwrap().lambda;
        let zc = (acc.mean(1) - lam * 0.5) / acc.std_error(1);
        assert!(zc.abs() < 4.0, "candidate count z = {zc}");
    }

    #[test]
    fn accepted_intensity_matches_the_gamma_integral() {
        let gamma0 = 0.6;
        let model = flat_model(gamma0, ComponentLaw::Cauchy { location: 0.0, scale: 1.0 });
        let t = 0.8;
        let acc = run_sharded(
            &Stream::new(23),
            5_000,
            || VecMoments::new(1),
            |mom, s| {
                let rec = simulate_path(&model, 4, t, s)?;
                mom.push(&[rec.accepted.iter().filter(|&&a| a).count() as f64]);
                Ok(())
            },
        )
        .unwrap();
        let mass = rate_lambda(&model, 4, &Stream::new(1)).unwrap().mass;
        let expect = gamma0 * mass * t;
        let z = (acc.mean(0) - expect) / acc.std_error(0);
        assert!(z.abs() < 3.0, "accepted rate {} vs {expect} (z = {z})", acc.mean(0));
    }

    #[test]
    fn smooth_and_thinning_transitions_agree_in_law() {
        let model = cauchy_test_model();
        let m = 2;
        let mut x_pre = model.x0.clone();
        flow_scalar(&model, &mut x_pre, 0.4).unwrap();
        let n = 20_000usize;
        let mut s1 = Stream::new(101);
        let mut s2 = Stream::new(202);
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            // Thinning transition.
            let z = sample_mark_in_ball(&model, m, &mut s1).unwrap();
            let g = gamma_at(&model, &z, &x_pre).unwrap();
            let mut xa = x_pre.clone();
            if s1.uniform(0.0, 2.0 * model.c_bar) < g {
                apply_jump(&model, &mut xa, &z, cutoff_value(m, &z)).unwrap();
            }
            a.push(xa[0]);
            // Smooth transition.
            let zb = sample_qm(&model, m, &x_pre, &mut s2).unwrap();
            let mut xb = x_pre.clone();
            apply_jump(&model, &mut xb, &zb, cutoff_value(m, &zb)).unwrap();
            b.push(xb[0]);
        }
        let ks = ks_two_sample(&a, &b).unwrap();
        assert!(ks.p_value > 0.005, "KS {} p {}", ks.statistic, ks.p_value);
    }

    #[test]
    fn candidate_log_density_differentiates_correctly() {
        let model = cauchy_test_model();
        let m = 2;
        // Hunt for a path holding both a real and a null mark.
        let mut record = None;
        for seed in 0..200 {
            let mut s = Stream::new(5000 + seed);
            let rec = simulate_path_smooth(&model, m, 1.0, &mut s).unwrap();
            let real = rec.marks.iter().any(|z| z[0].abs() < m as f64 + 1.0);
            let null = rec.marks.iter().any(|z| z[0].abs() >= m as f64 + 1.0);
            if real && null {
                record = Some(rec);
                break;
            }
        }
        let record = record.expect("mixed path within 200 seeds");
        let pc = path_context(&model, &record, 1).unwrap();
        let h = 1e-5;
        for (k, _) in record.marks.iter().enumerate() {
            // Log-density gradient against a central difference.
            let mut plus = record.clone();
            plus.marks[k][0] += h;
            let mut minus = record.clone();
            minus.marks[k][0] -= h;
            let fd = (log_path_density(&model, &plus).unwrap() - log_path_density(&model, &minus).unwrap()) / (2.0 * h);
            let jet = pc.ctx.coord(k).dlogp.value();
            assert!(
                (jet - fd).abs() < 1e-4 * (1.0 + fd.abs()),
                "coord {k}: dlogp {jet} vs fd {fd}"
            );
            // Terminal-state gradient the same way.
            let (xp, _) = path_jets(&model, &plus, 0).unwrap();
            let (xm, _) = path_jets(&model, &minus, 0).unwrap();
            let fd_x = (xp[0].value() - xm[0].value()) / (2.0 * h);
            let jet_x = pc.x[0].gradient(k as u32);
            assert!(
                (jet_x - fd_x).abs() < 1e-5 * (1.0 + fd_x.abs()),
                "coord {k}: dx {jet_x} vs fd {fd_x}"
            );
        }
    }

    #[test]
    fn paths_satisfy_the_duality_identity() {
        let model = cauchy_test_model();
        let acc = run_sharded(
            &Stream::new(77),
            6_000,
            || VecMoments::new(1),
            |mom, s| {
                let rec = simulate_path_smooth(&model, 2, 0.4, s)?;
                if rec.marks.is_empty() {
                    mom.push(&[0.0]);
                    return Ok(());
                }
                let pc = path_context(&model, &rec, 2)?;
                let f = &pc.x[0];
                let ones: Vec<Taylor> = (0..pc.ctx.dim()).map(|_| Taylor::constant(1.0, 2)).collect();
                let grad = pc.ctx.grad(f)?;
                let lhs = pc.ctx.inner(&grad, &ones).value();
                let rhs = f.value() * pc.ctx.divergence(&ones)?.value();
                mom.push(&[lhs - rhs]);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(acc.rejected(), 0);
        let z = acc.mean(0) / acc.std_error(0);
        assert!(z.abs() < 4.0, "duality gap {} (z = {z})", acc.mean(0));
    }

    #[test]
    fn tangent_flow_reproduces_linear_growth() {
        // No jumps, no drift: identity.
        let still = flat_model(0.0, ComponentLaw::Gaussian { mean: 0.0, variance: 1.0 });
        let mut stream = Stream::new(31);
        let rec = simulate_path_smooth(&still, 3, 1.0, &mut stream).unwrap();
        let tf = tangent_flow(&still, &rec).unwrap();
        assert_eq!(tf.y[(0, 0)], 1.0);
        assert_eq!(tf.y_hat[(0, 0)], 1.0);
        // Linear drift beta = 1 over t = 0.5: y = e^{1/2}.
        let mut lin = flat_model(0.0, ComponentLaw::Gaussian { mean: 0.0, variance: 1.0 });
        lin.drift = vec![Expr::var(0)];
        lin.x0 = vec![0.7];
        let rec = simulate_path_smooth(&lin, 3, 0.5, &mut stream).unwrap();
        let tf = tangent_flow(&lin, &rec).unwrap();
        assert!((tf.y[(0, 0)] - 0.5_f64.exp()).abs() < 1e-8, "y {}", tf.y[(0, 0)]);
        assert!((tf.y[(0, 0)] * tf.y_hat[(0, 0)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn tangent_inverse_and_regeneration_hold_on_jump_paths() {
        let model = cauchy_test_model();
        let mut stream = Stream::new(57);
        let mut saw_plateau_mark = false;
        for _ in 0..40 {
            let rec = simulate_path_smooth(&model, 2, 1.0, &mut stream).unwrap();
            let tf = tangent_flow(&model, &rec).unwrap();
            let resid = (&tf.y_hat * &tf.y - DMatrix::<f64>::identity(1, 1)).norm();
            assert!(resid < 1e-8, "inverse residual {resid}");
            assert!(tf.cond < 1e8, "condition bound {}", tf.cond);
            let rho = tf.rho.expect("model carries envelopes");
            assert!(rho >= 0.0);
            let plateau = rec
                .marks
                .iter()
                .any(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt() <= rec.m as f64 - 1.0);
            saw_plateau_mark |= plateau;
            assert_eq!(rho > 0.0, plateau, "rho {rho} without a plateau mark");
        }
        assert!(saw_plateau_mark, "sampler never produced a plateau mark");
    }

    #[test]
    fn single_level_study_reports_noise_floor() {
        let study = JumpStudy {
            model: cauchy_test_model(),
            levels: vec![3],
            t: 0.5,
            n_paths: 2_000,
            bins: 32,
            n_sobolev: 150,
            p: 2,
            epsilons: vec![1e-3, 1e-2, 1e-1, 1.0],
            n_density: 0,
            grid_lo: 0.0,
            grid_hi: 0.0,
            grid_cells: 0,
            a_grid: vec![std::f64::consts::E.powi(2), std::f64::consts::E.powi(4)],
        };
        let report = tv_convergence_experiment(&study, &Stream::new(9)).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.m_ref, 3);
        let row = &report.rows[0];
        assert!(row.tv < 3.0 * row.tv_half_width + 0.05, "tv {} hw {}", row.tv, row.tv_half_width);
        assert!(report.spearman_tv.is_none());
        assert!(row.sobolev > 0.0 && row.sobolev_se.is_finite());
        assert!(row.degenerate_fraction > 0.0, "some paths never jump effectively");
        assert_eq!(report.profile.rows.len(), 1);
        assert!(report.profile.rows[0].det_tail.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(report.eta_theta.len(), 2);
        assert!(report.eta_theta.iter().all(|r| r.value >= 0.0 && r.std_error.is_finite()));
    }

    #[test]
    fn coarser_truncation_sits_farther_from_the_reference() {
        let study = JumpStudy {
            model: cauchy_test_model(),
            levels: vec![2, 6],
            t: 0.5,
            n_paths: 1_600,
            bins: 32,
            n_sobolev: 120,
            p: 2,
            epsilons: vec![1e-3, 1e-2, 1e-1, 1.0],
            n_density: 350,
            grid_lo: -3.5,
            grid_hi: 4.0,
            grid_cells: 40,
            a_grid: Vec::new(),
        };
        let report = tv_convergence_experiment(&study, &Stream::new(13)).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(
            report.rows[0].tv > report.rows[1].tv,
            "tv({}) = {} should exceed tv({}) = {}",
            report.rows[0].m,
            report.rows[0].tv,
            report.rows[1].m,
            report.rows[1].tv
        );
        assert!((report.proxy_error - report.rows[0].tv).abs() < 1e-15);
        let cc = report.cross_check.expect("cross-check enabled");
        let slack = 3.0 * (cc.density_tv.half_width + cc.hist_half_width) + 0.05;
        assert!(
            (cc.density_tv.value - cc.hist_tv).abs() < slack,
            "density {} vs histogram {} (slack {slack})",
            cc.density_tv.value,
            cc.hist_tv
        );
    }

    #[test]
    fn shapes_and_modes_are_validated() {
        let model = cauchy_test_model();
        let mut bad = model.clone();
        bad.c = vec![Expr::var(2)];
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = model.clone();
        bad.c_bar = 0.0;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = model.clone();
        bad.drift = vec![Expr::var(1)];
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(matches!(rate_lambda(&model, 0, &Stream::new(1)), Err(Error::Config(_))));
        // Thinning records cannot back a mark context.
        let mut stream = Stream::new(4);
        let rec = simulate_path(&model, 2, 0.3, &mut stream).unwrap();
        assert!(matches!(path_context(&model, &rec, 1), Err(Error::Config(_))));
        // The spot check accepts the reference model.
        spot_check(&model, 4, 300, &mut Stream::new(5)).unwrap();
        // An intensity crossing its bound is caught.
        let mut hot = model.clone();
        hot.gamma = Expr::constant(1.5);
        let err = spot_check(&hot, 4, 50, &mut Stream::new(6)).unwrap_err();
        assert!(matches!(err, Error::Model(_)), "got {err}");
    }
}
