//! Experiment harness: JSON configs in, CSV tables out.
//!
//! Every run is deterministic given (config, seed); reruns produce
//! byte-identical files. Exit codes are a stable contract: 0 success,
//! 1 a statistical threshold failed, 2 configuration or I/O error.

use clap::{Args, Parser, Subcommand};
use mkit_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

mod config;
mod runs;

const EXIT_NOTES: &str = "Exit codes:
  0  success
  1  a statistical acceptance threshold failed
  2  configuration or I/O error

Worker threads default to the MKIT_WORKERS environment variable when
--workers is absent. Outputs are byte-identical for any worker count.";

#[derive(Parser)]
#[command(name = "mkit", version, about = "Monte Carlo experiments with integration-by-parts weights", after_long_help = EXIT_NOTES)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config (seeds are mandatory; no wall-clock seeding).
    #[arg(long)]
    config: PathBuf,
    /// Override the seed recorded in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the sampling pool.
    #[arg(long)]
    workers: Option<usize>,
    /// Directory for the output tables.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate a density (or a derivative of one) on a grid of points.
    ///
    /// Writes density.csv: point,alpha,estimate,stderr,n_samples,degenerate_fraction
    /// with one row per (point, alpha) pair. Coordinates and index entries are
    /// joined with ';'; an empty index prints as '-'. The config names a model
    /// file (noise, functional, optional localization), resolved relative to
    /// the config.
    #[command(verbatim_doc_comment)]
    Density(Common),
    /// Run the integration-by-parts identity battery and report z-scores.
    ///
    /// Writes ibp_suite.csv: name,kind,lhs,rhs,z,oracle_z,n,pass. Exits 1 when
    /// any |z| exceeds z_max (default 4). Without a battery file the built-in
    /// battery runs; an explicitly empty battery is a config error.
    #[command(verbatim_doc_comment)]
    IbpSuite(Common),
    /// Distance of an Euler scheme to its fine-step reference law, per level.
    ///
    /// Writes euler_tv.csv: level,steps,tv,tv_half_width,mass_captured,sobolev,sobolev_se
    /// and euler_profile.csv: label,epsilon,det_tail,lambda_tail,n with trailing
    /// eta/eta_bar rows (tail maxima of the det and eigenvalue columns).
    #[command(verbatim_doc_comment)]
    EulerTv(Common),
    /// Truncation-convergence study for a jump SDE driven by a mark density.
    ///
    /// Writes jump_tv.csv: m,lambda,tv,tv_half_width,sobolev,sobolev_se,mean_candidates,degenerate_fraction
    /// with the per-level jump rates recorded in '# lambda' header lines, plus
    /// jump_profile.csv, and jump_eta_theta.csv / jump_crosscheck.csv when the
    /// config enables those passes.
    #[command(verbatim_doc_comment)]
    JumpConverge(Common),
    /// Tail profile of the covariance determinant across a functional family.
    ///
    /// Writes profile.csv: label,epsilon,det_tail,lambda_tail,n with trailing
    /// eta/eta_bar rows.
    #[command(verbatim_doc_comment)]
    Diagnostics(Common),
}

impl Cmd {
    fn common(&self) -> &Common {
        match self {
            Cmd::Density(c) | Cmd::IbpSuite(c) | Cmd::EulerTv(c) | Cmd::JumpConverge(c) | Cmd::Diagnostics(c) => c,
        }
    }
}

fn init_workers(flag: Option<usize>) -> mkit_core::Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("MKIT_WORKERS") {
            Ok(s) => Some(
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("MKIT_WORKERS={s} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    }
    Ok(())
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Estimator(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.cmd.common();
    if let Err(e) = init_workers(common.workers) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    if let Err(e) = std::fs::create_dir_all(&common.out) {
        eprintln!("error: cannot create {}: {e}", common.out.display());
        return ExitCode::from(2);
    }
    let result = match &cli.cmd {
        Cmd::Density(c) => runs::density(c),
        Cmd::IbpSuite(c) => runs::ibp_suite(c),
        Cmd::EulerTv(c) => runs::euler_tv(c),
        Cmd::JumpConverge(c) => runs::jump_converge(c),
        Cmd::Diagnostics(c) => runs::diagnostics(c),
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failures) => {
            eprintln!("{failures} threshold check(s) failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
