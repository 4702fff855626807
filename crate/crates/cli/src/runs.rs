//! One driver per subcommand: load config, run the library op on split
//! streams, write the tables. Returns the number of failed threshold checks
//! so main can map them to exit code 1.

use crate::config::{self, load_json, resolve};
use crate::Common;
use mkit_core::euler::{run_euler_tv, EulerModel, EulerStudy};
use mkit_core::ibp::{default_battery, default_duality_battery, ibp_selftest, duality_selftest, SelfTestResult};
use mkit_core::jump::{tv_convergence_experiment, JumpModel, JumpStudy};
use mkit_core::profile::{nondegeneracy_profile, FamilyMember, NondegeneracyProfile};
use mkit_core::{Error, Result, Stream};
use std::fmt::Write as _;
use std::path::Path;

fn write_file(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn join<T: std::fmt::Display>(xs: &[T], sep: &str) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

fn index_label(alpha: &[usize]) -> String {
    if alpha.is_empty() {
        "-".into()
    } else {
        join(alpha, ";")
    }
}

pub fn density(common: &Common) -> Result<usize> {
    let cfg: config::DensityConfig = load_json(&common.config)?;
    config::require_samples(cfg.n_samples)?;
    let model: config::DensityModel = load_json(&resolve(&common.config, &cfg.model))?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let stream = Stream::new(seed);

    let mut out = String::new();
    writeln!(out, "# seed={seed}").unwrap();
    writeln!(out, "point,alpha,estimate,stderr,n_samples,degenerate_fraction").unwrap();
    for (ai, alpha) in cfg.alphas.iter().enumerate() {
        let ests = mkit_core::density::density_grid(
            &model.f,
            alpha,
            &cfg.points,
            &model.localization,
            &model.noise,
            cfg.n_samples,
            &stream.substream(ai as u64),
        )?;
        for est in &ests {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                join(&est.point, ";"),
                index_label(alpha),
                est.value,
                est.std_error,
                est.n,
                est.degenerate_fraction
            )
            .unwrap();
            if let Some(w) = &est.warning {
                eprintln!("warning: point {} alpha {}: {w}", join(&est.point, ";"), index_label(alpha));
            }
        }
    }
    write_file(&common.out, "density.csv", &out)?;
    Ok(0)
}

fn oracle_z(r: &SelfTestResult) -> Option<f64> {
    r.oracle.map(|o| {
        let zl = ((r.lhs - o) / r.lhs_se).abs();
        let zr = ((r.rhs - o) / r.rhs_se).abs();
        zl.max(zr)
    })
}

pub fn ibp_suite(common: &Common) -> Result<usize> {
    let cfg: config::IbpConfig = load_json(&common.config)?;
    config::require_samples(cfg.n_samples)?;
    if !(cfg.z_max > 0.0) {
        return Err(Error::Config(format!("z_max = {}, need positive", cfg.z_max)));
    }
    let (battery, duality) = match &cfg.model {
        None => (default_battery(), default_duality_battery()),
        Some(rel) => {
            let file: config::BatteryFile = load_json(&resolve(&common.config, rel))?;
            (file.battery, file.duality)
        }
    };
    if battery.is_empty() && duality.is_empty() {
        return Err(Error::Config("battery is empty: no identities to test".into()));
    }
    let seed = common.seed.unwrap_or(cfg.seed);
    let stream = Stream::new(seed);

    let mut out = String::new();
    writeln!(out, "# seed={seed}").unwrap();
    writeln!(out, "# z_max={}", cfg.z_max).unwrap();
    writeln!(out, "name,kind,lhs,rhs,z,oracle_z,n,pass").unwrap();
    let mut failures = 0usize;
    let mut record = |r: &SelfTestResult, kind: &str, out: &mut String| {
        let oz = oracle_z(r);
        let ok = r.z.abs() <= cfg.z_max && oz.map_or(true, |z| z <= cfg.z_max);
        if !ok {
            failures += 1;
        }
        let oz_text = oz.map_or(String::new(), |z| z.to_string());
        writeln!(out, "{},{kind},{},{},{},{oz_text},{},{}", r.name, r.lhs, r.rhs, r.z, r.n, ok).unwrap();
        println!(
            "{} {kind} {}  z={:.3}{}",
            if ok { "PASS" } else { "FAIL" },
            r.name,
            r.z,
            oz.map_or(String::new(), |z| format!("  oracle_z={z:.3}"))
        );
    };
    for (i, case) in battery.iter().enumerate() {
        let r = ibp_selftest(case, cfg.n_samples, &stream.substream(i as u64), cfg.corrupt)?;
        record(&r, "ibp", &mut out);
    }
    for (i, case) in duality.iter().enumerate() {
        let r = duality_selftest(case, cfg.n_samples, &stream.substream(1000 + i as u64), cfg.corrupt)?;
        record(&r, "duality", &mut out);
    }
    write_file(&common.out, "ibp_suite.csv", &out)?;
    Ok(failures)
}

fn profile_table(seed: u64, profile: &NondegeneracyProfile) -> String {
    let mut out = String::new();
    writeln!(out, "# seed={seed}").unwrap();
    writeln!(out, "# tail={}", profile.tail).unwrap();
    writeln!(out, "label,epsilon,det_tail,lambda_tail,n").unwrap();
    for row in &profile.rows {
        for (k, eps) in profile.epsilons.iter().enumerate() {
            writeln!(out, "{},{eps},{},{},{}", row.label, row.det_tail[k], row.lambda_tail[k], row.n).unwrap();
        }
    }
    for (k, eps) in profile.epsilons.iter().enumerate() {
        writeln!(out, "eta,{eps},{},,", profile.eta[k]).unwrap();
    }
    for (k, eps) in profile.epsilons.iter().enumerate() {
        writeln!(out, "eta_bar,{eps},,{},", profile.eta_bar[k]).unwrap();
    }
    out
}

pub fn euler_tv(common: &Common) -> Result<usize> {
    let cfg: config::EulerConfig = load_json(&common.config)?;
    let model: EulerModel = load_json(&resolve(&common.config, &cfg.model))?;
    let study = EulerStudy {
        model,
        levels: cfg.levels,
        ref_level: cfg.ref_level,
        n_density: cfg.n_density,
        n_sobolev: cfg.n_sobolev,
        p: cfg.p,
        grid_lo: cfg.grid_lo,
        grid_hi: cfg.grid_hi,
        grid_cells: cfg.grid_cells,
        epsilons: cfg.epsilons,
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    let report = run_euler_tv(&study, &Stream::new(seed))?;

    let mut out = String::new();
    writeln!(out, "# seed={seed}").unwrap();
    writeln!(out, "# ref_level={}", report.ref_level).unwrap();
    writeln!(out, "# ref_sobolev={}", report.ref_sobolev).unwrap();
    match report.spearman_tv {
        Some(rho) => writeln!(out, "# spearman_tv={rho}").unwrap(),
        None => writeln!(out, "# spearman_tv=none").unwrap(),
    }
    writeln!(out, "level,steps,tv,tv_half_width,mass_captured,sobolev,sobolev_se").unwrap();
    for row in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.level, row.steps, row.tv, row.tv_half_width, row.mass_captured, row.sobolev, row.sobolev_se
        )
        .unwrap();
        println!("level {}  steps {}  tv {:.4} ± {:.4}", row.level, row.steps, row.tv, row.tv_half_width);
        if let Some(w) = &row.warning {
            eprintln!("warning: level {}: {w}", row.level);
        }
    }
    write_file(&common.out, "euler_tv.csv", &out)?;
    write_file(&common.out, "euler_profile.csv", &profile_table(seed, &report.profile))?;
    Ok(0)
}

pub fn jump_converge(common: &Common) -> Result<usize> {
    let cfg: config::JumpConfig = load_json(&common.config)?;
    let model: JumpModel = load_json(&resolve(&common.config, &cfg.model))?;
    let study = JumpStudy {
        model,
        levels: cfg.levels,
        t: cfg.t,
        n_paths: cfg.n_paths,
        bins: cfg.bins,
        n_sobolev: cfg.n_sobolev,
        p: cfg.p,
        epsilons: cfg.epsilons,
        n_density: cfg.n_density,
        grid_lo: cfg.grid_lo,
        grid_hi: cfg.grid_hi,
        grid_cells: cfg.grid_cells,
        a_grid: cfg.a_grid,
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    let report = tv_convergence_experiment(&study, &Stream::new(seed))?;

    let mut out = String::new();
    writeln!(out, "# seed={seed}").unwrap();
    writeln!(out, "# m_ref={}", report.m_ref).unwrap();
    writeln!(out, "# lambda_ref={}", report.lambda_ref).unwrap();
    for row in &report.rows {
        writeln!(out, "# lambda m={} {}", row.m, row.lambda).unwrap();
    }
    writeln!(out, "# proxy_error={}", report.proxy_error).unwrap();
    match report.spearman_tv {
        Some(rho) => writeln!(out, "# spearman_tv={rho}").unwrap(),
        None => writeln!(out, "# spearman_tv=none").unwrap(),
    }
    writeln!(out, "m,lambda,tv,tv_half_width,sobolev,sobolev_se,mean_candidates,degenerate_fraction").unwrap();
    for row in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.m,
            row.lambda,
            row.tv,
            row.tv_half_width,
            row.sobolev,
            row.sobolev_se,
            row.mean_candidates,
            row.degenerate_fraction
        )
        .unwrap();
        println!("m {}  lambda {:.4}  tv {:.4} ± {:.4}", row.m, row.lambda, row.tv, row.tv_half_width);
    }
    write_file(&common.out, "jump_tv.csv", &out)?;
    write_file(&common.out, "jump_profile.csv", &profile_table(seed, &report.profile))?;
    if !report.eta_theta.is_empty() {
        let mut extra = String::new();
        writeln!(extra, "# seed={seed}").unwrap();
        writeln!(extra, "a,value,std_error").unwrap();
        for row in &report.eta_theta {
            writeln!(extra, "{},{},{}", row.a, row.value, row.std_error).unwrap();
        }
        write_file(&common.out, "jump_eta_theta.csv", &extra)?;
    }
    if let Some(cc) = &report.cross_check {
        let mut extra = String::new();
        writeln!(extra, "# seed={seed}").unwrap();
        writeln!(extra, "m,density_tv,density_half_width,density_mass,hist_tv,hist_half_width").unwrap();
        let mass = cc.density_tv.mass_captured.map_or(String::new(), |m| m.to_string());
        writeln!(
            extra,
            "{},{},{},{mass},{},{}",
            cc.m, cc.density_tv.value, cc.density_tv.half_width, cc.hist_tv, cc.hist_half_width
        )
        .unwrap();
        if let Some(w) = &cc.density_tv.warning {
            eprintln!("warning: cross-check density: {w}");
        }
        write_file(&common.out, "jump_crosscheck.csv", &extra)?;
    }
    Ok(0)
}

pub fn diagnostics(common: &Common) -> Result<usize> {
    let cfg: config::DiagnosticsConfig = load_json(&common.config)?;
    config::require_samples(cfg.n_samples)?;
    let family: Vec<FamilyMember> = load_json(&resolve(&common.config, &cfg.model))?;
    let tail = cfg.tail.unwrap_or_else(|| family.len().min(2));
    let seed = common.seed.unwrap_or(cfg.seed);
    let profile = nondegeneracy_profile(&family, &cfg.epsilons, cfg.n_samples, &Stream::new(seed), tail)?;
    write_file(&common.out, "profile.csv", &profile_table(seed, &profile))?;
    Ok(0)
}
