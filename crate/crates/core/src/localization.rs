//! Smooth localization: bump functions and products of localizing variables.
//!
//! Two bump shapes cover every localization in the crate:
//!
//! * `psi_a`: 1 on [-a, a], a smooth decay on a < |x| < 2a, 0 outside;
//!   used to keep a statistic small.
//! * `phi_a`: 1 for |x| >= a, a smooth rise on a/2 < |x| < a, 0 for
//!   |x| <= a/2; used to keep a statistic away from zero.
//!
//! Both satisfy the exact scale relations `psi_a(x) = psi_1(x/a)` and
//! `phi_a(x) = phi_1(x/a)`. Inside the decay bands the log-derivatives are
//! evaluated from the closed-form exponent, never by differentiating a
//! numerical quotient of the bump itself, so they stay stable where the bump
//! underflows.

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::malliavin::MallContext;
use crate::noise::NoiseSpec;
use crate::rng::Stream;
use crate::taylor::Taylor;
use serde::{Deserialize, Serialize};

/// Exponent value below which `exp` underflows to zero in f64; at that point
/// the bump and every derivative are below the double-precision floor and the
/// expansion is exactly zero.
const EXP_FLOOR: f64 = -700.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Region {
    Plateau,
    Band,
    Zero,
}

fn psi_region(a: f64, x: f64) -> Region {
    let r = x.abs();
    if r <= a {
        Region::Plateau
    } else if r >= 2.0 * a {
        Region::Zero
    } else {
        Region::Band
    }
}

fn phi_region(a: f64, x: f64) -> Region {
    let r = x.abs();
    if r >= a {
        Region::Plateau
    } else if r <= 0.5 * a {
        Region::Zero
    } else {
        Region::Band
    }
}

fn check_radius(a: f64) -> Result<()> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::Config(format!("bump radius must be positive and finite, got {a}")));
    }
    Ok(())
}

/// Exponent of `psi_a` in its decay band: 1 - a^2 / (a^2 - (|x| - a)^2).
fn psi_exponent(a: f64, arg: &Taylor) -> Taylor {
    let abs = if arg.value() >= 0.0 { arg.clone() } else { arg.neg() };
    let s = abs.add_scalar(-a);
    let den = s.mul(&s).neg().add_scalar(a * a);
    let inv = den.recip().expect("band interior keeps a^2 - (|x|-a)^2 positive");
    inv.scaled(-a * a).add_scalar(1.0)
}

/// Exponent of `phi_a` in its rise band: 1 - a^2 / (2|x| - a)^2.
fn phi_exponent(a: f64, arg: &Taylor) -> Taylor {
    let abs = if arg.value() >= 0.0 { arg.clone() } else { arg.neg() };
    let s = abs.scaled(2.0).add_scalar(-a);
    let sq = s.mul(&s);
    let inv = sq.recip().expect("band interior keeps 2|x| - a positive");
    inv.scaled(-a * a).add_scalar(1.0)
}

fn zero_like(arg: &Taylor) -> Taylor {
    arg.scaled(0.0)
}

fn one_like(arg: &Taylor) -> Taylor {
    arg.scaled(0.0).add_scalar(1.0)
}

/// `psi_a` applied to an expansion. Plateau and zero regions yield exact
/// constant expansions; the band composes the closed-form exponent.
pub fn psi_taylor(a: f64, arg: &Taylor) -> Taylor {
    match psi_region(a, arg.value()) {
        Region::Plateau => one_like(arg),
        Region::Zero => zero_like(arg),
        Region::Band => {
            let g = psi_exponent(a, arg);
            if g.value() < EXP_FLOOR || !g.is_finite() {
                zero_like(arg)
            } else {
                g.exp()
            }
        }
    }
}

/// `phi_a` applied to an expansion.
pub fn phi_taylor(a: f64, arg: &Taylor) -> Taylor {
    match phi_region(a, arg.value()) {
        Region::Plateau => one_like(arg),
        Region::Zero => zero_like(arg),
        Region::Band => {
            let g = phi_exponent(a, arg);
            if g.value() < EXP_FLOOR || !g.is_finite() {
                zero_like(arg)
            } else {
                g.exp()
            }
        }
    }
}

/// `ln psi_a` applied to an expansion; `None` where the bump vanishes.
/// On the plateau the logarithm is exactly the zero expansion.
pub fn ln_psi_taylor(a: f64, arg: &Taylor) -> Option<Taylor> {
    match psi_region(a, arg.value()) {
        Region::Plateau => Some(zero_like(arg)),
        Region::Zero => None,
        Region::Band => {
            let g = psi_exponent(a, arg);
            if g.value() < EXP_FLOOR || !g.is_finite() {
                None
            } else {
                Some(g)
            }
        }
    }
}

/// `ln phi_a` applied to an expansion; `None` where the bump vanishes.
pub fn ln_phi_taylor(a: f64, arg: &Taylor) -> Option<Taylor> {
    match phi_region(a, arg.value()) {
        Region::Plateau => Some(zero_like(arg)),
        Region::Zero => None,
        Region::Band => {
            let g = phi_exponent(a, arg);
            if g.value() < EXP_FLOOR || !g.is_finite() {
                None
            } else {
                Some(g)
            }
        }
    }
}

/// Value and derivatives of `psi_a` at a scalar point, up to `order`.
/// Returns `[psi, psi', ..., psi^(order)]`.
pub fn bump_psi(a: f64, x: f64, order: usize) -> Result<Vec<f64>> {
    check_radius(a)?;
    let t = psi_taylor(a, &Taylor::var(0, x, order));
    Ok(scalar_derivs(&t, order))
}

/// Value and derivatives of `phi_a` at a scalar point, up to `order`.
pub fn bump_phi(a: f64, x: f64, order: usize) -> Result<Vec<f64>> {
    check_radius(a)?;
    let t = phi_taylor(a, &Taylor::var(0, x, order));
    Ok(scalar_derivs(&t, order))
}

/// Value and derivatives of `ln psi_a` at a scalar point; `None` where the
/// bump vanishes.
pub fn bump_psi_log(a: f64, x: f64, order: usize) -> Result<Option<Vec<f64>>> {
    check_radius(a)?;
    Ok(ln_psi_taylor(a, &Taylor::var(0, x, order)).map(|t| scalar_derivs(&t, order)))
}

/// Value and derivatives of `ln phi_a` at a scalar point; `None` where the
/// bump vanishes.
pub fn bump_phi_log(a: f64, x: f64, order: usize) -> Result<Option<Vec<f64>>> {
    check_radius(a)?;
    Ok(ln_phi_taylor(a, &Taylor::var(0, x, order)).map(|t| scalar_derivs(&t, order)))
}

fn scalar_derivs(t: &Taylor, order: usize) -> Vec<f64> {
    (0..=order).map(|k| t.partial_deriv(&vec![0u32; k])).collect()
}

/// Which side of zero a term pins its statistic to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BumpKind {
    /// `psi_a`: keeps the statistic within [-2a, 2a].
    NearZero,
    /// `phi_a`: keeps the statistic outside (-a/2, a/2).
    AwayFromZero,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocTerm {
    pub kind: BumpKind,
    pub radius: f64,
    pub statistic: Expr,
}

/// Product localizer: one bump per term, applied to that term's statistic.
/// The empty product is the constant 1 (no localization).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LocalizationSpec {
    pub terms: Vec<LocTerm>,
}

/// Jets of the localizer at one sample. `ln_theta` is absent exactly where
/// the localizer vanishes; estimators weight by `theta` so those samples
/// contribute nothing.
#[derive(Clone, Debug)]
pub struct ThetaEval {
    pub theta: Taylor,
    pub ln_theta: Option<Taylor>,
}

impl LocalizationSpec {
    pub fn none() -> LocalizationSpec {
        LocalizationSpec { terms: Vec::new() }
    }

    pub fn near_zero(radius: f64, statistic: Expr) -> LocTerm {
        LocTerm { kind: BumpKind::NearZero, radius, statistic }
    }

    pub fn away_from_zero(radius: f64, statistic: Expr) -> LocTerm {
        LocTerm { kind: BumpKind::AwayFromZero, radius, statistic }
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.terms {
            check_radius(t.radius)?;
        }
        Ok(())
    }

    pub fn is_trivial(&self) -> bool {
        self.terms.is_empty()
    }

    /// Jets of the term statistics against a realized context.
    fn statistic_jets(&self, ctx: &MallContext) -> Result<Vec<Taylor>> {
        let exprs: Vec<Expr> = self.terms.iter().map(|t| t.statistic.clone()).collect();
        ctx.eval_vec(&exprs)
    }

    /// Theta and ln Theta jets at a realized sample. The log is assembled as
    /// the sum of the per-term band exponents, never as ln of the product,
    /// which would underflow near the support edge.
    pub fn theta(&self, ctx: &MallContext) -> Result<ThetaEval> {
        let order = ctx.order();
        let mut theta = Taylor::constant(1.0, order);
        let mut ln_theta = Some(Taylor::constant(0.0, order));
        for (term, stat) in self.terms.iter().zip(self.statistic_jets(ctx)?) {
            let (bump, ln_bump) = match term.kind {
                BumpKind::NearZero => (psi_taylor(term.radius, &stat), ln_psi_taylor(term.radius, &stat)),
                BumpKind::AwayFromZero => (phi_taylor(term.radius, &stat), ln_phi_taylor(term.radius, &stat)),
            };
            theta = theta.mul(&bump);
            ln_theta = match (ln_theta, ln_bump) {
                (Some(a), Some(b)) => Some(a.add(&b)),
                _ => None,
            };
        }
        Ok(ThetaEval { theta, ln_theta })
    }

    /// Localizer value at a plain point (no jets).
    pub fn theta_value(&self, point: &[f64]) -> Result<f64> {
        let mut out = 1.0;
        for term in &self.terms {
            let x = crate::expr::eval_scalar(&term.statistic, point)?;
            let b = match term.kind {
                BumpKind::NearZero => bump_psi(term.radius, x, 0)?[0],
                BumpKind::AwayFromZero => bump_phi(term.radius, x, 0)?[0],
            };
            out *= b;
            if out == 0.0 {
                return Ok(0.0);
            }
        }
        Ok(out)
    }
}

/// Direct estimate of the localizer's Sobolev control constant, `1 v
/// ||ln Theta||_{1,q,p,Theta}`, next to the term-sum upper-bound ingredient
/// `sum_i a_i^{-q} ||Theta_i||_{1,q,p,Theta}` (whose multiplicative constant
/// is not computable).
#[derive(Clone, Debug, Serialize)]
pub struct MqpEstimate {
    pub m: f64,
    /// Standard error of the underlying norm (0 when the max picked 1).
    pub m_se: f64,
    pub bound_term: f64,
    pub n: u64,
    /// Fraction of samples with Theta = 0.
    pub vanished: f64,
}

pub fn m_qp_estimate(
    loc: &LocalizationSpec,
    noise: &NoiseSpec,
    q: usize,
    p: u32,
    n: u64,
    stream: &Stream,
) -> Result<MqpEstimate> {
    loc.validate()?;
    if q == 0 || q > crate::jet::MAX_ORDER {
        return Err(Error::Config(format!("q must be in 1..={}, got {q}", crate::jet::MAX_ORDER)));
    }
    let terms = loc.terms.len();
    // Row layout: [theta * |ln theta|_{1,q}^p, theta * |theta_i|_{1,q}^p ..., 1_{theta = 0}]
    let acc = crate::mc::run_sharded(stream, n, || crate::mc::VecMoments::new(terms + 2), |acc, s| {
        let v = noise.sample(s);
        let ctx = MallContext::from_noise(noise, &v, q)?;
        let ev = loc.theta(&ctx)?;
        let tv = ev.theta.value();
        let mut row = vec![0.0; terms + 2];
        if tv > 0.0 {
            let ln = ev.ln_theta.as_ref().expect("theta > 0 has a log");
            let norm = crate::jet::path_norms(&crate::jet::jet_of(&ctx, ln, q)?, q)?.deriv_total;
            row[0] = tv * norm.powi(p as i32);
            for (i, stat) in loc.statistic_jets(&ctx)?.iter().enumerate() {
                let sn = crate::jet::path_norms(&crate::jet::jet_of(&ctx, stat, q)?, q)?.deriv_total;
                row[1 + i] = tv * sn.powi(p as i32);
            }
        } else {
            row[terms + 1] = 1.0;
        }
        acc.push(&row);
        Ok(())
    })?;
    if acc.rejected() > 0 {
        return Err(Error::Estimator(format!("{} nonfinite samples", acc.rejected())));
    }
    let root = |m: f64| if m > 0.0 { m.powf(1.0 / p as f64) } else { 0.0 };
    let moment = acc.mean(0);
    let norm = root(moment);
    let se = if moment > 0.0 {
        acc.std_error(0) / (p as f64 * moment.powf((p as f64 - 1.0) / p as f64))
    } else {
        0.0
    };
    let mut bound = 0.0;
    for (i, t) in loc.terms.iter().enumerate() {
        bound += t.radius.powi(-(q as i32)) * root(acc.mean(1 + i));
    }
    Ok(MqpEstimate {
        m: norm.max(1.0),
        m_se: if norm > 1.0 { se } else { 0.0 },
        bound_term: bound,
        n: acc.n(),
        vanished: acc.mean(terms + 1),
    })
}
