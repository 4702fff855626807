//! Monte Carlo Sobolev norms under a localized measure and the scalar
//! diagnostics built from them.
//!
//! All expectations here are against the sub-probability measure weighted by
//! the localizer: E_loc(X) is estimated as the plain average of Theta(w) X(w)
//! without renormalizing, so the trivial localizer recovers ordinary
//! expectations and any localizer can only shrink a norm computed on the
//! same sample set.

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::jet::{jet_of, path_norms_vec, Jet, MAX_ORDER};
use crate::localization::LocalizationSpec;
use crate::malliavin::MallContext;
use crate::mc::{run_sharded, VecMoments};
use crate::noise::NoiseSpec;
use crate::rng::Stream;
use crate::taylor::Taylor;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct SobolevEstimate {
    /// ||F||_{1,l,p,Theta}: derivatives only.
    pub deriv_norm: f64,
    pub deriv_norm_se: f64,
    /// ||F||_{l,p,Theta}: value plus derivatives.
    pub total_norm: f64,
    pub total_norm_se: f64,
    pub n: u64,
    /// Fraction of samples where the localizer vanished.
    pub vanished: f64,
}

fn require_clean(acc: &VecMoments) -> Result<()> {
    if acc.rejected() > 0 {
        return Err(Error::Estimator(format!(
            "{} of {} samples were nonfinite",
            acc.rejected(),
            acc.rejected() + acc.n()
        )));
    }
    Ok(())
}

/// p-th root of a moment estimate with a delta-method standard error.
fn rooted(moment: f64, se: f64, p: u32) -> (f64, f64) {
    if moment <= 0.0 {
        return (0.0, 0.0);
    }
    let root = moment.powf(1.0 / p as f64);
    (root, se / (p as f64 * moment.powf((p as f64 - 1.0) / p as f64)))
}

/// Estimates the localized Sobolev norms of a vector functional.
pub fn sobolev_norm_mc(
    exprs: &[Expr],
    l: usize,
    p: u32,
    loc: &LocalizationSpec,
    noise: &NoiseSpec,
    n: u64,
    stream: &Stream,
) -> Result<SobolevEstimate> {
    if exprs.is_empty() {
        return Err(Error::Config("need at least one component".into()));
    }
    if p == 0 {
        return Err(Error::Config("p must be at least 1".into()));
    }
    if l > MAX_ORDER {
        return Err(Error::Config(format!("order {l} exceeds the maximum {MAX_ORDER}")));
    }
    loc.validate()?;
    let acc = run_sharded(stream, n, || VecMoments::new(3), |acc, s| {
        let v = noise.sample(s);
        let theta = loc.theta_value(&v)?;
        if theta == 0.0 {
            acc.push(&[0.0, 0.0, 1.0]);
            return Ok(());
        }
        let ctx = MallContext::from_noise(noise, &v, l)?;
        let fs = ctx.eval_vec(exprs)?;
        let jets = fs.iter().map(|f| jet_of(&ctx, f, l)).collect::<Result<Vec<Jet>>>()?;
        let norms = path_norms_vec(&jets, l)?;
        acc.push(&[
            theta * norms.deriv_total.powi(p as i32),
            theta * norms.total.powi(p as i32),
            0.0,
        ]);
        Ok(())
    })?;
    require_clean(&acc)?;
    let (deriv_norm, deriv_norm_se) = rooted(acc.mean(0), acc.std_error(0), p);
    let (total_norm, total_norm_se) = rooted(acc.mean(1), acc.std_error(1), p);
    Ok(SobolevEstimate {
        deriv_norm,
        deriv_norm_se,
        total_norm,
        total_norm_se,
        n: acc.n(),
        vanished: acc.mean(2),
    })
}

/// The scalar diagnostics controlling the integration-by-parts bounds, all
/// estimated from one shared sample set so their ratios are coherent.
#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticsReport {
    /// max(1, || (det sigma)^{-1} ||_{p,Theta}).
    pub s: f64,
    pub s_se: f64,
    /// Set when a degenerate covariance was sampled: the inverse-determinant
    /// moment is infinite and `s` is reported as such.
    pub s_unbounded: bool,
    /// 1 + ||F||_{1,q,p,Theta} + ||LF||_{q-2,p,Theta}.
    pub q_f: f64,
    pub q_f_se: f64,
    /// Same with the second functional's terms added; present when one was given.
    pub q_pair: Option<f64>,
    pub q_pair_se: Option<f64>,
    /// max(1, ||ln Theta||_{1,q,p,Theta}).
    pub m_theta: f64,
    pub m_theta_se: f64,
    /// max(1, E_Theta((det sigma)^{-p}) (||F||_{1,q+2,p,Theta} + ||LF||_{q,p,Theta})).
    pub u: f64,
    pub u_se: f64,
    pub degenerate_fraction: f64,
    pub vanished_fraction: f64,
    pub n: u64,
    pub q: usize,
    pub p: u32,
}

/// Estimates S, Q, m, U for a vector functional under a localizer.
/// Needs jets up to q+2; with the order cap at 4 this means q = 2.
pub fn diagnostics(
    exprs: &[Expr],
    second: Option<&[Expr]>,
    loc: &LocalizationSpec,
    q: usize,
    p: u32,
    noise: &NoiseSpec,
    n: u64,
    stream: &Stream,
) -> Result<DiagnosticsReport> {
    if q < 2 {
        return Err(Error::Config(format!(
            "diagnostics reference ||LF||_{{q-2}}; q must be at least 2, got {q}"
        )));
    }
    if q + 2 > MAX_ORDER {
        return Err(Error::Config(format!(
            "diagnostics at q = {q} need tensors of order {}, above the maximum {MAX_ORDER}",
            q + 2
        )));
    }
    if p == 0 {
        return Err(Error::Config("p must be at least 1".into()));
    }
    loc.validate()?;
    let pair_cols = second.map_or(0, |_| 2);
    // Columns: det^-p, |F|_{1,q}^p, |LF|_{q-2}^p, |F|_{1,q+2}^p, |LF|_q^p,
    // |ln Theta|_{1,q}^p, [pair |F|_{1,q}^p, pair |LF|_{q-2}^p,]
    // degenerate flag, vanished flag; all Theta-weighted.
    let cols = 6 + pair_cols + 2;
    let deg_col = 6 + pair_cols;
    let van_col = deg_col + 1;
    let acc = run_sharded(stream, n, || VecMoments::new(cols), |acc, s| {
        let v = noise.sample(s);
        let mut row = vec![0.0; cols];
        let ctx = MallContext::from_noise(noise, &v, q + 2)?;
        let ev = loc.theta(&ctx)?;
        let theta = ev.theta.value();
        if theta == 0.0 {
            row[van_col] = 1.0;
            acc.push(&row);
            return Ok(());
        }
        let pw = |x: f64| x.powi(p as i32);
        let fill = |row: &mut Vec<f64>, exprs: &[Expr], c_1q: usize, c_lf: usize, full: bool| -> Result<f64> {
            let fs = ctx.eval_vec(exprs)?;
            let jets = fs.iter().map(|f| jet_of(&ctx, f, q + 2)).collect::<Result<Vec<Jet>>>()?;
            let norms = path_norms_vec(&jets, q + 2)?;
            let first_q: f64 = norms.norms[1..=q].iter().sum();
            row[c_1q] = theta * pw(first_q);
            let lf = fs.iter().map(|f| ctx.ou(f)).collect::<Result<Vec<Taylor>>>()?;
            let lf_jets = lf.iter().map(|t| jet_of(&ctx, t, q)).collect::<Result<Vec<Jet>>>()?;
            let lf_norms = path_norms_vec(&lf_jets, q)?;
            let lf_qm2: f64 = lf_norms.norms[..=q - 2].iter().sum();
            row[c_lf] = theta * pw(lf_qm2);
            if full {
                row[3] = theta * pw(norms.deriv_total);
                row[4] = theta * pw(lf_norms.total);
                let grads = fs.iter().map(|f| ctx.grad(f)).collect::<Result<Vec<_>>>()?;
                let cov = ctx.covariance(&grads);
                let inv = if cov.degenerate { f64::INFINITY } else { pw(1.0 / cov.det) };
                if inv.is_finite() {
                    row[0] = theta * inv;
                } else {
                    row[deg_col] = 1.0;
                }
            }
            Ok(theta)
        };
        fill(&mut row, exprs, 1, 2, true)?;
        if let Some(sec) = second {
            fill(&mut row, sec, 6, 7, false)?;
        }
        if let Some(ln) = &ev.ln_theta {
            let norm = path_norms_vec(&[jet_of(&ctx, ln, q)?], q)?.deriv_total;
            row[5] = theta * pw(norm);
        }
        acc.push(&row);
        Ok(())
    })?;
    require_clean(&acc)?;
    let degenerate_fraction = acc.mean(deg_col);
    let s_unbounded = degenerate_fraction > 0.0;
    let (s_root, s_se) = rooted(acc.mean(0), acc.std_error(0), p);
    let s = if s_unbounded { f64::INFINITY } else { s_root.max(1.0) };
    let (f1q, f1q_se) = rooted(acc.mean(1), acc.std_error(1), p);
    let (lfq2, lfq2_se) = rooted(acc.mean(2), acc.std_error(2), p);
    let q_f = 1.0 + f1q + lfq2;
    let q_f_se = (f1q_se.powi(2) + lfq2_se.powi(2)).sqrt();
    let (q_pair, q_pair_se) = if second.is_some() {
        let (a, a_se) = rooted(acc.mean(6), acc.std_error(6), p);
        let (b, b_se) = rooted(acc.mean(7), acc.std_error(7), p);
        (
            Some(q_f + a + b),
            Some((q_f_se.powi(2) + a_se.powi(2) + b_se.powi(2)).sqrt()),
        )
    } else {
        (None, None)
    };
    let (m_root, m_se) = rooted(acc.mean(5), acc.std_error(5), p);
    let m_theta = m_root.max(1.0);
    let (f1q2, f1q2_se) = rooted(acc.mean(3), acc.std_error(3), p);
    let (lfq, lfq_se) = rooted(acc.mean(4), acc.std_error(4), p);
    let det_moment = acc.mean(0);
    let det_moment_se = acc.std_error(0);
    let norm_sum = f1q2 + lfq;
    let norm_sum_se = (f1q2_se.powi(2) + lfq_se.powi(2)).sqrt();
    let (u, u_se) = if s_unbounded {
        (f64::INFINITY, f64::INFINITY)
    } else {
        let prod = det_moment * norm_sum;
        let rel = if det_moment > 0.0 && norm_sum > 0.0 {
            ((det_moment_se / det_moment).powi(2) + (norm_sum_se / norm_sum).powi(2)).sqrt()
        } else {
            0.0
        };
        (prod.max(1.0), prod * rel)
    };
    Ok(DiagnosticsReport {
        s,
        s_se: if s_unbounded { f64::INFINITY } else { s_se },
        s_unbounded,
        q_f,
        q_f_se,
        q_pair,
        q_pair_se,
        m_theta,
        m_theta_se: if m_root > 1.0 { m_se } else { 0.0 },
        u,
        u_se,
        degenerate_fraction,
        vanished_fraction: acc.mean(van_col),
        n: acc.n(),
        q,
        p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localization::LocalizationSpec;
    use approx::assert_relative_eq;

    #[test]
    fn coordinate_norms_are_exact_or_tight() {
        let spec = NoiseSpec::iid_gaussian(1);
        let e = [Expr::var(0)];
        let est = sobolev_norm_mc(&e, 1, 2, &LocalizationSpec::none(), &spec, 50_000, &Stream::new(3)).unwrap();
        // |DF| = 1 on every sample: the derivative norm is exactly 1.
        assert_eq!(est.deriv_norm, 1.0);
        assert_eq!(est.vanished, 0.0);

        let est = sobolev_norm_mc(&e, 0, 2, &LocalizationSpec::none(), &spec, 100_000, &Stream::new(4)).unwrap();
        assert!((est.total_norm - 1.0).abs() < 3.0 * est.total_norm_se + 0.01, "{est:?}");
    }

    #[test]
    fn localization_shrinks_norms_on_shared_samples() {
        let spec = NoiseSpec::iid_gaussian(1);
        let e = [Expr::var(0)];
        let loc = LocalizationSpec {
            terms: vec![LocalizationSpec::near_zero(0.5, Expr::var(0))],
        };
        let seed = Stream::new(5);
        let plain = sobolev_norm_mc(&e, 1, 2, &LocalizationSpec::none(), &spec, 20_000, &seed).unwrap();
        let local = sobolev_norm_mc(&e, 1, 2, &loc, &spec, 20_000, &seed).unwrap();
        assert!(local.total_norm < plain.total_norm);
        assert!(local.deriv_norm < plain.deriv_norm);
        assert!(local.vanished > 0.0);
    }

    #[test]
    fn diagnostics_reference_values() {
        let spec = NoiseSpec::iid_gaussian(1);
        let e = [Expr::var(0)];
        let rep = diagnostics(&e, None, &LocalizationSpec::none(), 2, 2, &spec, 50_000, &Stream::new(6)).unwrap();
        // det sigma = 1 on every sample.
        assert_eq!(rep.s, 1.0);
        assert!(!rep.s_unbounded);
        assert_eq!(rep.m_theta, 1.0);
        assert_eq!(rep.m_theta_se, 0.0);
        // Q = 1 + ||V||_{1,2,2} + ||LV||_{0,2} = 1 + 1 + E(V^2)^{1/2} ~ 3.
        assert!((rep.q_f - 3.0).abs() < 0.02, "q_f {}", rep.q_f);
        assert!(rep.u >= 1.0 && rep.u.is_finite());
        assert_eq!(rep.degenerate_fraction, 0.0);
        assert!(rep.q_pair.is_none());
    }

    #[test]
    fn degenerate_pair_is_flagged_unbounded() {
        let spec = NoiseSpec::iid_gaussian(1);
        let e = [Expr::var(0), Expr::var(0)];
        let rep = diagnostics(&e, None, &LocalizationSpec::none(), 2, 2, &spec, 2_000, &Stream::new(7)).unwrap();
        assert!(rep.s_unbounded);
        assert!(rep.s.is_infinite());
        assert!(rep.u.is_infinite());
        assert_eq!(rep.degenerate_fraction, 1.0);
    }

    #[test]
    fn pair_diagnostics_add_second_terms() {
        let spec = NoiseSpec::iid_gaussian(1);
        let e = [Expr::var(0)];
        let sec = [Expr::var(0)];
        let rep = diagnostics(&e, Some(&sec), &LocalizationSpec::none(), 2, 2, &spec, 20_000, &Stream::new(8)).unwrap();
        let pair = rep.q_pair.unwrap();
        // Identical pair: the added terms equal the original ones.
        assert_relative_eq!(pair - rep.q_f, rep.q_f - 1.0, max_relative = 1e-9);
    }

    #[test]
    fn small_q_rejected() {
        let spec = NoiseSpec::iid_gaussian(1);
        let e = [Expr::var(0)];
        assert!(diagnostics(&e, None, &LocalizationSpec::none(), 1, 2, &spec, 100, &Stream::new(9)).is_err());
        assert!(diagnostics(&e, None, &LocalizationSpec::none(), 3, 2, &spec, 100, &Stream::new(9)).is_err());
    }
}
