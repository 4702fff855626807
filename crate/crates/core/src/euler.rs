//! Euler schemes for scalar diffusions as simple functionals of a Brownian
//! increment grid, and the step-refinement total-variation study: distance
//! of each coarse terminal law to the finest one, with the Sobolev-norm
//! boundedness table and non-degeneracy profile that the convergence
//! theorems ask for.

use crate::density::{density_grid, DensityEstimate};
use crate::distance::{spearman_rho, tv_density_grid, DistanceEstimate};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::localization::LocalizationSpec;
use crate::noise::NoiseSpec;
use crate::profile::{nondegeneracy_profile, FamilyMember, NondegeneracyProfile};
use crate::rng::Stream;
use crate::sobolev::sobolev_norm_mc;
use serde::{Deserialize, Serialize};

/// Scalar diffusion dX = b(X) dt + a(X) dW on [0, 1]; `drift` and
/// `diffusion` read the current state through slot 0.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EulerModel {
    pub drift: Expr,
    pub diffusion: Expr,
    pub x0: f64,
}

/// Terminal value of the Euler scheme with 2^level steps as an expression
/// over the matching Brownian-grid noise (slot k is the k-th increment).
pub fn euler_functional(model: &EulerModel, level: u32) -> Result<(Expr, NoiseSpec)> {
    for (name, e) in [("drift", &model.drift), ("diffusion", &model.diffusion)] {
        if e.vars().iter().any(|&v| v != 0) {
            return Err(Error::Config(format!(
                "{name} must read the state through slot 0 only"
            )));
        }
    }
    let noise = NoiseSpec::brownian_grid(1, level)?;
    let steps = 1u64 << level;
    let h = Expr::constant(0.5f64.powi(level as i32));
    let mut x = Expr::constant(model.x0);
    for k in 0..steps {
        let state = x.clone();
        let bind = |i: usize| if i == 0 { Some(state.clone()) } else { None };
        let b = model.drift.substitute(&bind);
        let a = model.diffusion.substitute(&bind);
        x = &(&x + &(&b * &h)) + &(&a * &Expr::var(k as usize));
    }
    Ok((x, noise))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EulerStudy {
    pub model: EulerModel,
    /// Coarse refinement levels (step count 2^level), strictly increasing.
    pub levels: Vec<u32>,
    /// Reference level whose law stands in for the exact one.
    pub ref_level: u32,
    pub n_density: u64,
    pub n_sobolev: u64,
    /// Moment order for the Sobolev table.
    pub p: u32,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_cells: usize,
    pub epsilons: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EulerRow {
    pub level: u32,
    pub steps: u64,
    pub tv: f64,
    pub tv_half_width: f64,
    pub mass_captured: f64,
    /// ||X^n||_{3,p} estimate: the uniform-in-n boundedness column.
    pub sobolev: f64,
    pub sobolev_se: f64,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EulerReport {
    pub rows: Vec<EulerRow>,
    pub ref_level: u32,
    pub ref_sobolev: f64,
    pub profile: NondegeneracyProfile,
    /// Rank correlation of TV against refinement; negative means the laws
    /// approach the reference as the step shrinks.
    pub spearman_tv: Option<f64>,
}

fn level_density(
    model: &EulerModel,
    level: u32,
    points: &[Vec<f64>],
    n: u64,
    stream: &Stream,
) -> Result<(Vec<DensityEstimate>, Expr, NoiseSpec)> {
    let (f, noise) = euler_functional(model, level)?;
    let ests = density_grid(
        std::slice::from_ref(&f),
        &[],
        points,
        &LocalizationSpec::none(),
        &noise,
        n,
        stream,
    )?;
    Ok((ests, f, noise))
}

pub fn run_euler_tv(study: &EulerStudy, stream: &Stream) -> Result<EulerReport> {
    if study.levels.is_empty() || study.levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("levels must be non-empty and strictly increasing".into()));
    }
    if *study.levels.last().unwrap() >= study.ref_level {
        return Err(Error::Config("reference level must exceed every study level".into()));
    }
    if study.grid_cells < 2 || !(study.grid_hi > study.grid_lo) {
        return Err(Error::Config("density grid is empty or inverted".into()));
    }
    let cell = (study.grid_hi - study.grid_lo) / study.grid_cells as f64;
    let points: Vec<Vec<f64>> = (0..study.grid_cells)
        .map(|i| vec![study.grid_lo + (i as f64 + 0.5) * cell])
        .collect();
    // Stream layout: substream 0 for the reference, k+1 for level k, a high
    // branch for the Sobolev and profile passes.
    let (ref_density, ref_f, ref_noise) =
        level_density(&study.model, study.ref_level, &points, study.n_density, &stream.substream(0))?;
    let ref_sob = sobolev_norm_mc(
        std::slice::from_ref(&ref_f),
        3,
        study.p,
        &LocalizationSpec::none(),
        &ref_noise,
        study.n_sobolev,
        &stream.substream(1_000_000),
    )?;
    let mut rows = Vec::with_capacity(study.levels.len());
    let mut family = Vec::new();
    for (k, &level) in study.levels.iter().enumerate() {
        let sub = stream.substream(k as u64 + 1);
        let (dens, f, noise) = level_density(&study.model, level, &points, study.n_density, &sub)?;
        let tv: DistanceEstimate = tv_density_grid(&dens, &ref_density, cell)?;
        let sob = sobolev_norm_mc(
            std::slice::from_ref(&f),
            3,
            study.p,
            &LocalizationSpec::none(),
            &noise,
            study.n_sobolev,
            &stream.substream(1_000_001 + k as u64),
        )?;
        family.push(FamilyMember {
            label: format!("level-{level}"),
            f: vec![f],
            noise,
        });
        rows.push(EulerRow {
            level,
            steps: 1 << level,
            tv: tv.value,
            tv_half_width: tv.half_width,
            mass_captured: tv.mass_captured.unwrap_or(0.0),
            sobolev: sob.total_norm,
            sobolev_se: sob.total_norm_se,
            warning: tv.warning,
        });
    }
    family.push(FamilyMember {
        label: format!("level-{}", study.ref_level),
        f: vec![ref_f],
        noise: ref_noise,
    });
    let profile = nondegeneracy_profile(
        &family,
        &study.epsilons,
        study.n_sobolev,
        &stream.substream(2_000_000),
        2.min(family.len()),
    )?;
    let spearman_tv = if rows.len() >= 3 {
        let idx: Vec<f64> = (0..rows.len()).map(|i| i as f64).collect();
        let tvs: Vec<f64> = rows.iter().map(|r| r.tv).collect();
        spearman_rho(&idx, &tvs).ok()
    } else {
        None
    };
    Ok(EulerReport {
        rows,
        ref_level: study.ref_level,
        ref_sobolev: ref_sob.total_norm,
        profile,
        spearman_tv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ou_model() -> EulerModel {
        // dX = -0.5 X dt + dW from x0 = 1.
        EulerModel {
            drift: &Expr::constant(-0.5) * &Expr::var(0),
            diffusion: Expr::constant(1.0),
            x0: 1.0,
        }
    }

    #[test]
    fn scheme_expression_matches_manual_recursion() {
        let model = EulerModel {
            drift: Expr::var(0).sin(),
            diffusion: &Expr::constant(0.3) * &Expr::var(0),
            x0: 0.7,
        };
        let (f, noise) = euler_functional(&model, 2).unwrap();
        assert_eq!(noise.dim(), 4);
        let mut s = Stream::new(60);
        for _ in 0..50 {
            let v = noise.sample(&mut s);
            let got = crate::expr::eval_scalar(&f, &v).unwrap();
            let h = 0.25;
            let mut x = 0.7f64;
            for &dw in &v {
                x = x + x.sin() * h + 0.3 * x * dw;
            }
            assert_relative_eq!(got, x, max_relative = 1e-12);
        }
    }

    #[test]
    fn state_slot_validation() {
        let model = EulerModel {
            drift: Expr::var(1),
            diffusion: Expr::constant(1.0),
            x0: 0.0,
        };
        assert!(euler_functional(&model, 1).is_err());
    }

    #[test]
    fn ou_terminal_density_matches_gaussian_oracle() {
        // For linear drift the scheme is a Gaussian chain: the terminal law
        // is exactly N(mean, var) with mean = x0 (1 - theta h)^steps and
        // var = h sum (1 - theta h)^{2k}. The estimator must hit it.
        let level = 3u32;
        let (f, noise) = euler_functional(&ou_model(), level).unwrap();
        let steps = 1u64 << level;
        let h = 0.5f64.powi(level as i32);
        let m = (1.0 - 0.5 * h).powi(steps as i32);
        let mut var = 0.0;
        for k in 0..steps {
            var += h * (1.0 - 0.5 * h).powi(2 * k as i32);
        }
        let pts = vec![vec![0.0], vec![0.6], vec![1.2]];
        let ests = density_grid(
            std::slice::from_ref(&f),
            &[],
            &pts,
            &LocalizationSpec::none(),
            &noise,
            60_000,
            &Stream::new(61),
        )
        .unwrap();
        for est in &ests {
            let y = est.point[0];
            let z = (y - m) / var.sqrt();
            let oracle = (-0.5 * z * z).exp() / (var * 2.0 * std::f64::consts::PI).sqrt();
            assert!(
                (est.value - oracle).abs() < 4.0 * est.std_error,
                "p({y}) = {} +- {}, oracle {oracle}",
                est.value,
                est.std_error
            );
        }
    }

    #[test]
    fn constant_coefficients_are_exact_in_law() {
        // dX = 0.2 dt + 0.7 dW: every refinement gives N(x0 + 0.2, 0.49).
        let model = EulerModel {
            drift: Expr::constant(0.2),
            diffusion: Expr::constant(0.7),
            x0: 0.0,
        };
        let study = EulerStudy {
            model,
            levels: vec![1, 2],
            ref_level: 4,
            n_density: 20_000,
            n_sobolev: 1_000,
            p: 2,
            grid_lo: -2.8,
            grid_hi: 3.2,
            grid_cells: 40,
            epsilons: vec![0.1, 0.3, 0.6],
        };
        let report = run_euler_tv(&study, &Stream::new(62)).unwrap();
        for row in &report.rows {
            assert!(
                row.tv < 3.0 * row.tv_half_width + 0.02,
                "level {} TV {} exceeds noise floor {}",
                row.level,
                row.tv,
                row.tv_half_width
            );
        }
        // Constant diffusion keeps det sigma = 0.49 at every level.
        for row in &report.profile.rows {
            assert_eq!(row.det_tail, vec![0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn linear_sde_tv_shrinks_with_refinement() {
        // dX = 0.8 X dW: the coarse laws drift toward the reference as the
        // grid refines.
        let model = EulerModel {
            drift: Expr::constant(0.0),
            diffusion: &Expr::constant(0.8) * &Expr::var(0),
            x0: 1.0,
        };
        let study = EulerStudy {
            model,
            levels: vec![0, 1, 2],
            ref_level: 4,
            n_density: 25_000,
            n_sobolev: 1_000,
            p: 2,
            grid_lo: 0.02,
            grid_hi: 4.0,
            grid_cells: 50,
            epsilons: vec![0.01, 0.1, 1.0],
        };
        let report = run_euler_tv(&study, &Stream::new(63)).unwrap();
        let rho = report.spearman_tv.unwrap();
        assert!(rho < 0.0, "TV should decrease with refinement, rho = {rho}");
        // Sobolev norms stay within a uniform band rather than blowing up.
        let max = report.rows.iter().map(|r| r.sobolev).fold(0.0, f64::max);
        let min = report.rows.iter().map(|r| r.sobolev).fold(f64::INFINITY, f64::min);
        assert!(max / min < 10.0, "Sobolev norms spread too widely: {min}..{max}");
    }

    #[test]
    fn study_validation() {
        let mut study = EulerStudy {
            model: ou_model(),
            levels: vec![2, 1],
            ref_level: 4,
            n_density: 100,
            n_sobolev: 100,
            p: 2,
            grid_lo: -1.0,
            grid_hi: 1.0,
            grid_cells: 4,
            epsilons: vec![0.1],
        };
        assert!(run_euler_tv(&study, &Stream::new(1)).is_err());
        study.levels = vec![1, 2];
        study.ref_level = 2;
        assert!(run_euler_tv(&study, &Stream::new(1)).is_err());
    }
}
