//! Integration-by-parts weights and their self-tests.
//!
//! The weight H_r(F, G) satisfies E(d_r phi(F) G) = E(phi(F) H_r(F, G)); the
//! multi-index weight iterates the construction once per index entry. Under
//! a localizer Theta the same identities hold against the Theta-weighted
//! expectation with a correction involving D ln Theta. Everything is built
//! from the covariance inverse assembled as adjugate over determinant, so
//! derivatives of the inverse come from differentiating cofactors.

use crate::error::{Error, Result};
use crate::expr::{eval_with_inputs, Expr};
use crate::jet::{jet_of, path_norms_vec, MAX_ORDER};
use crate::localization::LocalizationSpec;
use crate::malliavin::{gamma_taylor, CovarianceReport, MallContext};
use crate::mc::{run_sharded, VecMoments};
use crate::noise::NoiseSpec;
use crate::rng::Stream;
use crate::taylor::Taylor;
use serde::{Deserialize, Serialize};

/// Relative disagreement between the two algebraic forms of the weight that
/// is treated as an internal inconsistency rather than rounding.
const FORM_TOL: f64 = 1e-6;

/// Per-sample weight machinery for one functional: gradients and the
/// covariance inverse are computed once and reused across indices and
/// recursion levels.
pub struct WeightEngine<'a> {
    ctx: &'a MallContext,
    grads: Vec<Vec<Taylor>>,
    gamma: Vec<Vec<Taylor>>,
    /// Weighted gradient of ln Theta when localizing.
    dln: Option<Vec<Taylor>>,
    pub cov: CovarianceReport,
}

impl<'a> WeightEngine<'a> {
    /// Returns `None` when the covariance is degenerate at this sample; the
    /// caller counts such samples and localizes if they are not rare.
    pub fn new(ctx: &'a MallContext, f: &[Taylor], ln_theta: Option<&Taylor>) -> Result<Option<Self>> {
        let grads = f.iter().map(|c| ctx.grad(c)).collect::<Result<Vec<_>>>()?;
        let cov = ctx.covariance(&grads);
        if cov.degenerate {
            return Ok(None);
        }
        let sigma = ctx.sigma_taylor(&grads);
        let Some((gamma, _det)) = gamma_taylor(&sigma) else {
            return Ok(None);
        };
        let dln = match ln_theta {
            Some(t) => Some(ctx.grad(t)?),
            None => None,
        };
        Ok(Some(WeightEngine { ctx, grads, gamma, dln, cov }))
    }

    pub fn dim(&self) -> usize {
        self.grads.len()
    }

    /// First-order weight for component `r`, localized when the engine was
    /// built with a log-localizer. Both algebraic forms are evaluated and
    /// must agree; the divergence form is returned.
    pub fn h(&self, g: &Taylor, r: usize) -> Result<Taylor> {
        let d = self.dim();
        if r >= d {
            return Err(Error::Config(format!("component {r} out of range (d = {d})")));
        }
        let j = self.ctx.dim();
        // Form 1: divergence(sum_r' G gamma^{r',r} DF^{r'}).
        let mut u = vec![Taylor::constant(0.0, g.order()); j];
        for r2 in 0..d {
            let coef = g.mul(&self.gamma[r2][r]);
            for (uj, dfj) in u.iter_mut().zip(self.grads[r2].iter()) {
                *uj = uj.add(&coef.mul(dfj));
            }
        }
        let form1 = self.ctx.divergence(&u)?;
        // Form 2: sum_r' G divergence(gamma^{r',r} DF^{r'}) - gamma^{r',r} <DF^{r'}, DG>.
        let dg = self.ctx.grad(g)?;
        let mut form2 = Taylor::constant(0.0, form1.order());
        for r2 in 0..d {
            let up: Vec<Taylor> = self.grads[r2].iter().map(|t| self.gamma[r2][r].mul(t)).collect();
            let a = g.mul(&self.ctx.divergence(&up)?);
            let b = self.gamma[r2][r].mul(&self.ctx.inner(&self.grads[r2], &dg));
            form2 = form2.add(&a.sub(&b));
        }
        let (v1, v2) = (form1.value(), form2.value());
        if (v1 - v2).abs() > FORM_TOL * (1.0 + v1.abs().max(v2.abs())) {
            return Err(Error::Estimator(format!(
                "weight forms disagree: {v1} vs {v2}"
            )));
        }
        match &self.dln {
            None => Ok(form1),
            Some(dln) => {
                let mut corr = Taylor::constant(0.0, form1.order());
                for r2 in 0..d {
                    corr = corr.add(&self.gamma[r2][r].mul(&self.ctx.inner(dln, &self.grads[r2])));
                }
                Ok(form1.sub(&g.mul(&corr)))
            }
        }
    }

    /// Iterated weight for a multi-index: the first entry is applied last,
    /// to the weight of the remaining entries. The empty index returns G.
    pub fn h_multi(&self, g: &Taylor, beta: &[usize]) -> Result<Taylor> {
        match beta.split_first() {
            None => Ok(g.clone()),
            Some((&b1, rest)) => {
                let inner = self.h_multi(g, rest)?;
                self.h(&inner, b1)
            }
        }
    }
}

/// One pathwise weight evaluation;teaching/debugging entry point over
/// expressions. `None` value means the covariance was degenerate there.
#[derive(Clone, Debug)]
pub struct WeightSample {
    pub beta: Vec<usize>,
    pub value: Option<Taylor>,
}

/// Evaluates H_beta(F, G) at a point with its own expansion up to
/// `jet_order`. The base expansion order is `beta.len() + 1 + jet_order`.
pub fn h_weight(
    f: &[Expr],
    g: &Expr,
    beta: &[usize],
    loc: &LocalizationSpec,
    noise: &NoiseSpec,
    v: &[f64],
    jet_order: usize,
) -> Result<WeightSample> {
    let q = beta.len();
    let base = q + 1 + jet_order;
    if base > MAX_ORDER {
        return Err(Error::Config(format!(
            "weight of order {q} with jets to {jet_order} needs expansions of order {base}, above the maximum {MAX_ORDER}"
        )));
    }
    let ctx = MallContext::from_noise(noise, v, base)?;
    let fs = ctx.eval_vec(f)?;
    let gv = ctx.eval(g)?;
    let ev = loc.theta(&ctx)?;
    if ev.theta.value() == 0.0 {
        return Err(Error::Domain("localizer vanishes at the requested point".into()));
    }
    let ln = if loc.is_trivial() { None } else { ev.ln_theta.as_ref() };
    let engine = WeightEngine::new(&ctx, &fs, ln)?;
    Ok(WeightSample {
        beta: beta.to_vec(),
        value: match engine {
            None => None,
            Some(e) => Some(e.h_multi(&gv, beta)?),
        },
    })
}

/// One identity check: E(d_beta phi(F) G) = E(phi(F) H_beta(F, G)), both
/// sides under the localized expectation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelfTestCase {
    pub name: String,
    pub noise: NoiseSpec,
    /// Components of F; variable slots refer to noise coordinates.
    pub f: Vec<Expr>,
    /// Multiplier G; slots refer to noise coordinates.
    pub g: Expr,
    /// Test function; slots refer to components of F.
    pub phi: Expr,
    /// Differentiation multi-index over components of F.
    pub beta: Vec<usize>,
    #[serde(default)]
    pub loc: LocalizationSpec,
    /// Closed-form value of both sides, when one exists.
    #[serde(default)]
    pub oracle: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelfTestResult {
    pub name: String,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    /// Paired difference and its z-score.
    pub diff: f64,
    pub diff_se: f64,
    pub z: f64,
    pub oracle: Option<f64>,
    pub degenerate_fraction: f64,
    pub n: u64,
}

impl SelfTestResult {
    /// z-score of the estimate against the closed-form value, when present.
    pub fn oracle_z(&self) -> Option<(f64, f64)> {
        self.oracle.map(|o| {
            let za = if self.lhs_se > 0.0 { (self.lhs - o) / self.lhs_se } else { 0.0 };
            let zb = if self.rhs_se > 0.0 { (self.rhs - o) / self.rhs_se } else { 0.0 };
            (za, zb)
        })
    }
}

/// Runs one identity check by Monte Carlo. `corrupt` flips the sign of the
/// log-density gradients before computing weights; a correct implementation
/// must then fail loudly, which is what the negative control asserts.
pub fn ibp_selftest(
    case: &SelfTestCase,
    n: u64,
    stream: &Stream,
    corrupt: bool,
) -> Result<SelfTestResult> {
    let q = case.beta.len();
    let d = case.f.len();
    if q == 0 {
        return Err(Error::Config("empty differentiation index".into()));
    }
    if q + 1 > MAX_ORDER {
        return Err(Error::Config(format!("index length {q} needs order {} > {MAX_ORDER}", q + 1)));
    }
    for &b in &case.beta {
        if b >= d {
            return Err(Error::Config(format!("index entry {b} out of range (d = {d})")));
        }
    }
    case.loc.validate()?;
    let order = q + 1;
    // Columns: lhs, rhs, lhs - rhs, degenerate flag.
    let acc = run_sharded(stream, n, || VecMoments::new(4), |acc, s| {
        let v = case.noise.sample(s);
        let mut ctx = MallContext::from_noise(&case.noise, &v, order)?;
        if corrupt {
            ctx.flip_log_gradient();
        }
        let ev = case.loc.theta(&ctx)?;
        let theta = ev.theta.value();
        if theta == 0.0 {
            acc.push(&[0.0, 0.0, 0.0, 0.0]);
            return Ok(());
        }
        let fs = ctx.eval_vec(&case.f)?;
        let gv = ctx.eval(&case.g)?;
        // phi derivatives at the point F(v), from a fresh expansion in the
        // component slots.
        let inputs: Vec<Taylor> = fs.iter().enumerate().map(|(r, t)| Taylor::var(r as u32, t.value(), q)).collect();
        let phi = eval_with_inputs(std::slice::from_ref(&case.phi), &inputs)?.pop().expect("one expr");
        let beta_vars: Vec<u32> = case.beta.iter().map(|&b| b as u32).collect();
        let lhs = theta * phi.partial_deriv(&beta_vars) * gv.value();
        let ln = if case.loc.is_trivial() { None } else { ev.ln_theta.as_ref() };
        match WeightEngine::new(&ctx, &fs, ln)? {
            None => acc.push(&[0.0, 0.0, 0.0, 1.0]),
            Some(engine) => {
                let h = engine.h_multi(&gv, &case.beta)?;
                let rhs = theta * phi.value() * h.value();
                acc.push(&[lhs, rhs, lhs - rhs, 0.0]);
            }
        }
        Ok(())
    })?;
    if acc.rejected() > 0 {
        return Err(Error::Estimator(format!("{} nonfinite samples in {}", acc.rejected(), case.name)));
    }
    let diff = acc.mean(2);
    let diff_se = acc.std_error(2);
    Ok(SelfTestResult {
        name: case.name.clone(),
        lhs: acc.mean(0),
        lhs_se: acc.std_error(0),
        rhs: acc.mean(1),
        rhs_se: acc.std_error(1),
        diff,
        diff_se,
        z: if diff_se > 0.0 { diff / diff_se } else { 0.0 },
        oracle: case.oracle,
        degenerate_fraction: acc.mean(3),
        n: acc.n(),
    })
}

/// Direct duality check E(<DF, U>) = E(F divergence(U)) for a scalar F and a
/// process U given entrywise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualityCase {
    pub name: String,
    pub noise: NoiseSpec,
    pub f: Expr,
    pub u: Vec<Expr>,
    #[serde(default)]
    pub oracle: Option<f64>,
}

pub fn duality_selftest(case: &DualityCase, n: u64, stream: &Stream, corrupt: bool) -> Result<SelfTestResult> {
    if case.u.len() != case.noise.dim() {
        return Err(Error::Config(format!(
            "process has {} entries, noise has {}",
            case.u.len(),
            case.noise.dim()
        )));
    }
    let acc = run_sharded(stream, n, || VecMoments::new(4), |acc, s| {
        let v = case.noise.sample(s);
        let mut ctx = MallContext::from_noise(&case.noise, &v, 2)?;
        if corrupt {
            ctx.flip_log_gradient();
        }
        let f = ctx.eval(&case.f)?;
        let us = ctx.eval_vec(&case.u)?;
        let lhs = ctx.inner(&ctx.grad(&f)?, &us).value();
        let rhs = f.value() * ctx.divergence(&us)?.value();
        acc.push(&[lhs, rhs, lhs - rhs, 0.0]);
        Ok(())
    })?;
    if acc.rejected() > 0 {
        return Err(Error::Estimator(format!("{} nonfinite samples in {}", acc.rejected(), case.name)));
    }
    let diff = acc.mean(2);
    let diff_se = acc.std_error(2);
    Ok(SelfTestResult {
        name: case.name.clone(),
        lhs: acc.mean(0),
        lhs_se: acc.std_error(0),
        rhs: acc.mean(1),
        rhs_se: acc.std_error(1),
        diff,
        diff_se,
        z: if diff_se > 0.0 { diff / diff_se } else { 0.0 },
        oracle: case.oracle,
        degenerate_fraction: acc.mean(3),
        n: acc.n(),
    })
}

/// Pathwise bound ingredients: the weight's own Sobolev norm next to the
/// quantity m^{l+1} (1 + |F|_{1,l+1}^{2d(l+2)} + |LF|_{l-1}^2) that controls
/// it, with l taken at index-length plus requested norm order. The
/// multiplicative constant in the control is unknown; the ratio's empirical
/// boundedness across samples is the diagnostic.
#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    pub m_f: f64,
    /// A_{l+q}(F).
    pub a: f64,
    /// |H_beta(F,G)|_l.
    pub h_norm: f64,
    /// |G|_{l+q}.
    pub g_norm: f64,
    /// |gamma_F|_l, entrywise-summed jet norms of the covariance inverse.
    pub gamma_norm: f64,
    /// h_norm / (a^q g_norm).
    pub ratio: f64,
}

pub fn bound_report(
    f: &[Expr],
    g: &Expr,
    beta: &[usize],
    l: usize,
    noise: &NoiseSpec,
    v: &[f64],
) -> Result<Option<BoundReport>> {
    let q = beta.len();
    let d = f.len();
    let base = q + 1 + l;
    if base > MAX_ORDER {
        return Err(Error::Config(format!(
            "bound report at l = {l}, q = {q} needs order {base}, above the maximum {MAX_ORDER}"
        )));
    }
    let ctx = MallContext::from_noise(noise, v, base)?;
    let fs = ctx.eval_vec(f)?;
    let gv = ctx.eval(g)?;
    let Some(engine) = WeightEngine::new(&ctx, &fs, None)? else {
        return Ok(None);
    };
    let h = engine.h_multi(&gv, beta)?;
    let h_norm = path_norms_vec(&[jet_of(&ctx, &h, l)?], l)?.total;
    let g_norm = path_norms_vec(&[jet_of(&ctx, &gv, (l + q).min(base))?], l + q)?.total;
    let lq = l + q;
    let f_jets = fs.iter().map(|t| jet_of(&ctx, t, lq + 1)).collect::<Result<Vec<_>>>()?;
    let f_first: f64 = path_norms_vec(&f_jets, lq + 1)?.deriv_total;
    let lf = fs.iter().map(|t| ctx.ou(t)).collect::<Result<Vec<Taylor>>>()?;
    let lf_jets = lf.iter().map(|t| jet_of(&ctx, t, lq - 1)).collect::<Result<Vec<_>>>()?;
    let lf_norm = path_norms_vec(&lf_jets, lq - 1)?.total;
    let m_f = engine.cov.m_f;
    let a = m_f.powi(lq as i32 + 1)
        * (1.0 + f_first.powi(2 * d as i32 * (lq as i32 + 2)) + lf_norm * lf_norm);
    let mut gamma_sq = 0.0;
    for row in &engine.gamma {
        for entry in row {
            let jet = jet_of(&ctx, entry, l)?;
            for k in 0..=l {
                gamma_sq += jet.tensor_norm_sq(k);
            }
        }
    }
    Ok(Some(BoundReport {
        m_f,
        a,
        h_norm,
        g_norm,
        gamma_norm: gamma_sq.sqrt(),
        ratio: h_norm / (a.powi(q as i32) * g_norm),
    }))
}

/// The stock identity battery: Gaussian closed-form pairs, a curved
/// two-dimensional case, boundary-supported laws with edge cutoffs, and
/// localized variants of each flavor.
pub fn default_battery() -> Vec<SelfTestCase> {
    use crate::noise::{Component, ComponentLaw, WeightSpec};
    let gauss1 = NoiseSpec::iid_gaussian(1);
    let gauss2 = NoiseSpec::iid_gaussian(2);
    let expo = NoiseSpec::new(vec![Component {
        law: ComponentLaw::Exponential { rate: 1.0 },
        weight: WeightSpec::SmoothCutoff { width: 0.4 },
    }])
    .unwrap();
    let bounded = NoiseSpec::new(vec![Component {
        law: ComponentLaw::SmoothBounded { lo: -1.0, hi: 1.0 },
        weight: WeightSpec::SmoothCutoff { width: 0.5 },
    }])
    .unwrap();
    let e = std::f64::consts::E;
    vec![
        SelfTestCase {
            name: "gauss-sin-order1".into(),
            noise: gauss1.clone(),
            f: vec![Expr::var(0)],
            g: Expr::constant(1.0),
            phi: Expr::var(0).sin(),
            beta: vec![0],
            loc: LocalizationSpec::none(),
            oracle: Some(1.0 / e.sqrt()),
        },
        SelfTestCase {
            name: "gauss-linear-order1".into(),
            noise: gauss1.clone(),
            f: vec![Expr::var(0)],
            g: Expr::constant(1.0),
            phi: Expr::var(0),
            beta: vec![0],
            loc: LocalizationSpec::none(),
            oracle: Some(1.0),
        },
        SelfTestCase {
            name: "gauss-cos-order2".into(),
            noise: gauss1.clone(),
            f: vec![Expr::var(0)],
            g: Expr::constant(1.0),
            phi: Expr::var(0).cos(),
            beta: vec![0, 0],
            loc: LocalizationSpec::none(),
            oracle: Some(-1.0 / e.sqrt()),
        },
        SelfTestCase {
            name: "gauss-scaled-coordinate".into(),
            noise: gauss1.clone(),
            f: vec![&Expr::constant(2.0) * &Expr::var(0)],
            g: Expr::constant(1.0),
            phi: Expr::var(0).sin(),
            beta: vec![0],
            loc: LocalizationSpec::none(),
            oracle: Some((-2.0f64).exp()),
        },
        SelfTestCase {
            name: "gauss-cubic-drift".into(),
            noise: gauss1.clone(),
            f: vec![&Expr::var(0) + &(&Expr::var(0).pow(3) / &Expr::constant(3.0))],
            g: &Expr::constant(1.0) + &(&Expr::var(0) * &Expr::var(0)),
            phi: Expr::var(0).tanh(),
            beta: vec![0],
            loc: LocalizationSpec::none(),
            oracle: None,
        },
        SelfTestCase {
            name: "gauss-2d-cross".into(),
            noise: gauss2.clone(),
            f: vec![
                &Expr::var(0) + &(&Expr::var(0) * &Expr::var(1)),
                &Expr::var(1) + &(&Expr::var(1).pow(3) / &Expr::constant(10.0)),
            ],
            g: Expr::var(0).cos(),
            phi: (-&(&Expr::var(0).pow(2) + &Expr::var(1).pow(2))).exp(),
            beta: vec![0, 1],
            loc: LocalizationSpec {
                terms: vec![LocalizationSpec::away_from_zero(
                    0.2,
                    &Expr::constant(1.0) + &Expr::var(1),
                )],
            },
            oracle: None,
        },
        SelfTestCase {
            name: "gauss-sin-localized".into(),
            noise: gauss1.clone(),
            f: vec![Expr::var(0)],
            g: Expr::constant(1.0),
            phi: Expr::var(0).sin(),
            beta: vec![0],
            loc: LocalizationSpec {
                terms: vec![LocalizationSpec::near_zero(1.0, Expr::var(0))],
            },
            oracle: None,
        },
        SelfTestCase {
            name: "gauss-cos-order2-localized".into(),
            noise: gauss1,
            f: vec![Expr::var(0)],
            g: Expr::constant(1.0),
            phi: Expr::var(0).cos(),
            beta: vec![0, 0],
            loc: LocalizationSpec {
                terms: vec![LocalizationSpec::near_zero(1.5, Expr::var(0))],
            },
            oracle: None,
        },
        SelfTestCase {
            name: "exponential-edge-cutoff".into(),
            noise: expo,
            f: vec![Expr::var(0)],
            g: Expr::constant(1.0),
            phi: Expr::var(0).sin(),
            beta: vec![0],
            // The localizer must vanish on the whole weight ramp (v < 0.4),
            // not just where the weight is zero: on the ramp the weight is
            // positive but tiny, so 1/sigma is unbounded and single samples
            // can overflow the weight products.
            loc: LocalizationSpec {
                terms: vec![LocalizationSpec::away_from_zero(0.8, Expr::var(0))],
            },
            oracle: None,
        },
        SelfTestCase {
            name: "bounded-support-order2".into(),
            noise: bounded,
            f: vec![Expr::var(0)],
            g: Expr::constant(1.0),
            phi: Expr::var(0).cos(),
            beta: vec![0, 0],
            // Support |v| <= 0.5: exactly the weight plateau, same reasoning
            // as the exponential case.
            loc: LocalizationSpec {
                terms: vec![LocalizationSpec::near_zero(0.25, Expr::var(0))],
            },
            oracle: None,
        },
    ]
}

/// Direct duality battery.
pub fn default_duality_battery() -> Vec<DualityCase> {
    use crate::noise::{Component, ComponentLaw, WeightSpec};
    let gauss1 = NoiseSpec::iid_gaussian(1);
    let gauss2 = NoiseSpec::iid_gaussian(2);
    let expo = NoiseSpec::new(vec![Component {
        law: ComponentLaw::Exponential { rate: 2.0 },
        weight: WeightSpec::SmoothCutoff { width: 0.3 },
    }])
    .unwrap();
    vec![
        DualityCase {
            name: "square-against-one".into(),
            noise: gauss1.clone(),
            f: &Expr::var(0) * &Expr::var(0),
            u: vec![Expr::constant(1.0)],
            oracle: Some(0.0),
        },
        DualityCase {
            name: "sine-against-coordinate".into(),
            noise: gauss1,
            f: Expr::var(0).sin(),
            u: vec![Expr::var(0)],
            oracle: None,
        },
        DualityCase {
            name: "cross-product-2d".into(),
            noise: gauss2,
            f: &Expr::var(0) * &Expr::var(1),
            u: vec![Expr::var(1), Expr::var(0)],
            oracle: None,
        },
        DualityCase {
            name: "exponential-cutoff".into(),
            noise: expo,
            f: Expr::var(0).tanh(),
            u: vec![Expr::var(0).cos()],
            oracle: None,
        },
    ]
}
