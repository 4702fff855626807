//! Non-degeneracy profiles: tail probabilities of the covariance
//! determinant (and smallest eigenvalue) across a family of functionals,
//! with a max-over-tail proxy for the limiting profile.

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::malliavin::MallContext;
use crate::mc::{run_sharded, Accumulator};
use crate::noise::NoiseSpec;
use crate::rng::Stream;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyMember {
    pub label: String,
    pub f: Vec<Expr>,
    pub noise: NoiseSpec,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProfileRow {
    pub label: String,
    /// P(det sigma <= eps) per grid entry, from one shared sorted sample set.
    pub det_tail: Vec<f64>,
    /// Same for the smallest eigenvalue.
    pub lambda_tail: Vec<f64>,
    pub n: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct NondegeneracyProfile {
    pub epsilons: Vec<f64>,
    pub rows: Vec<ProfileRow>,
    /// Pointwise max of det tails over the last `tail` family members: the
    /// finite-family stand-in for a limit superior in the family index.
    pub eta: Vec<f64>,
    pub eta_bar: Vec<f64>,
    pub tail: usize,
}

struct SampleBag {
    rows: Vec<(f64, f64)>,
}

impl Accumulator for SampleBag {
    fn merge(&mut self, other: SampleBag) {
        self.rows.extend(other.rows);
    }
}

/// Tail probabilities are computed by sorting one shared sample set per
/// family member and counting by binary search, so monotonicity in eps is
/// exact by construction rather than up to Monte Carlo noise.
pub fn nondegeneracy_profile(
    family: &[FamilyMember],
    epsilons: &[f64],
    n: u64,
    stream: &Stream,
    tail: usize,
) -> Result<NondegeneracyProfile> {
    if family.is_empty() {
        return Err(Error::Config("empty functional family".into()));
    }
    if epsilons.is_empty() || epsilons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("epsilon grid must be strictly increasing".into()));
    }
    if tail == 0 || tail > family.len() {
        return Err(Error::Config(format!(
            "tail window {tail} must lie in 1..={}",
            family.len()
        )));
    }
    let mut rows = Vec::with_capacity(family.len());
    for (k, member) in family.iter().enumerate() {
        let sub = stream.substream(k as u64);
        let bag = run_sharded(&sub, n, || SampleBag { rows: Vec::new() }, |acc, s| {
            let v = member.noise.sample(s);
            let ctx = MallContext::from_noise(&member.noise, &v, 1)?;
            let fs = ctx.eval_vec(&member.f)?;
            let grads = fs.iter().map(|t| ctx.grad(t)).collect::<Result<Vec<_>>>()?;
            let cov = ctx.covariance(&grads);
            if !cov.det.is_finite() || !cov.lambda.is_finite() {
                return Err(Error::Estimator(format!(
                    "nonfinite covariance for {}",
                    member.label
                )));
            }
            acc.rows.push((cov.det, cov.lambda));
            Ok(())
        })?;
        let mut dets: Vec<f64> = bag.rows.iter().map(|r| r.0).collect();
        let mut lams: Vec<f64> = bag.rows.iter().map(|r| r.1).collect();
        dets.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lams.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let total = dets.len() as f64;
        let tail_of = |sorted: &[f64]| -> Vec<f64> {
            epsilons
                .iter()
                .map(|&e| sorted.partition_point(|&x| x <= e) as f64 / total)
                .collect()
        };
        rows.push(ProfileRow {
            label: member.label.clone(),
            det_tail: tail_of(&dets),
            lambda_tail: tail_of(&lams),
            n: dets.len() as u64,
        });
    }
    let window = &rows[rows.len() - tail..];
    let sup_over = |pick: &dyn Fn(&ProfileRow) -> &Vec<f64>| -> Vec<f64> {
        (0..epsilons.len())
            .map(|j| window.iter().map(|r| pick(r)[j]).fold(0.0, f64::max))
            .collect()
    };
    let eta = sup_over(&|r| &r.det_tail);
    let eta_bar = sup_over(&|r| &r.lambda_tail);
    Ok(NondegeneracyProfile {
        epsilons: epsilons.to_vec(),
        rows,
        eta,
        eta_bar,
        tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn member(label: &str, f: Vec<Expr>, j: usize) -> FamilyMember {
        FamilyMember {
            label: label.into(),
            f,
            noise: NoiseSpec::iid_gaussian(j),
        }
    }

    #[test]
    fn coordinate_has_unit_determinant() {
        let fam = [member("coordinate", vec![Expr::var(0)], 1)];
        let p = nondegeneracy_profile(&fam, &[0.25, 0.5, 0.99, 1.0, 2.0], 4_000, &Stream::new(40), 1).unwrap();
        assert_eq!(p.rows[0].det_tail, vec![0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(p.rows[0].lambda_tail, p.rows[0].det_tail);
    }

    #[test]
    fn duplicated_component_is_fully_degenerate() {
        let fam = [member("copy", vec![Expr::var(0), Expr::var(0)], 2)];
        let p = nondegeneracy_profile(&fam, &[1e-9, 0.1, 1.0], 2_000, &Stream::new(41), 1).unwrap();
        assert!(p.rows[0].det_tail.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn product_determinant_is_chi_square() {
        // F = V1 V2 gives det sigma = V1^2 + V2^2, a chi-square with two
        // degrees of freedom: P(det <= eps) = 1 - exp(-eps/2).
        let fam = [member("product", vec![&Expr::var(0) * &Expr::var(1)], 2)];
        let eps = [0.1, 0.5, 1.0, 2.0, 4.0];
        let n = 200_000u64;
        let p = nondegeneracy_profile(&fam, &eps, n, &Stream::new(42), 1).unwrap();
        for (j, &e) in eps.iter().enumerate() {
            let oracle = 1.0 - (-e / 2.0).exp();
            let se = (oracle * (1.0 - oracle) / n as f64).sqrt();
            let got = p.rows[0].det_tail[j];
            assert!(
                (got - oracle).abs() < 3.0 * se,
                "eps = {e}: {got} vs {oracle} (se {se})"
            );
        }
    }

    #[test]
    fn tails_are_monotone_sample_exactly() {
        let fam = [
            member("curved", vec![&Expr::var(0) + &(&Expr::var(0) * &Expr::var(1))], 2),
            member("product", vec![&Expr::var(0) * &Expr::var(1)], 2),
        ];
        let eps: Vec<f64> = (1..40).map(|i| 0.05 * i as f64).collect();
        let p = nondegeneracy_profile(&fam, &eps, 20_000, &Stream::new(43), 2).unwrap();
        for row in &p.rows {
            assert!(row.det_tail.windows(2).all(|w| w[0] <= w[1]));
            assert!(row.lambda_tail.windows(2).all(|w| w[0] <= w[1]));
        }
        assert!(p.eta.windows(2).all(|w| w[0] <= w[1]));
        for j in 0..eps.len() {
            assert!(p.eta[j] >= p.rows[0].det_tail[j].max(p.rows[1].det_tail[j]) - 1e-15);
        }
    }

    #[test]
    fn deterministic_gap_in_two_dimensions() {
        // F = (V1, V1 + 0.1 V2): sigma is constant with det 0.01.
        let f = vec![
            Expr::var(0),
            &Expr::var(0) + &(&Expr::constant(0.1) * &Expr::var(1)),
        ];
        let fam = [member("near-collinear", f, 2)];
        let p = nondegeneracy_profile(&fam, &[0.005, 0.009, 0.011, 0.02], 1_000, &Stream::new(44), 1).unwrap();
        assert_eq!(p.rows[0].det_tail, vec![0.0, 0.0, 1.0, 1.0]);
        // The small eigenvalue sits just below det / 2 here.
        assert_eq!(p.rows[0].lambda_tail[3], 1.0);
    }

    #[test]
    fn grid_validation() {
        let fam = [member("coordinate", vec![Expr::var(0)], 1)];
        assert!(nondegeneracy_profile(&fam, &[0.5, 0.5], 100, &Stream::new(1), 1).is_err());
        assert!(nondegeneracy_profile(&fam, &[], 100, &Stream::new(1), 1).is_err());
        assert!(nondegeneracy_profile(&fam, &[0.1], 100, &Stream::new(1), 2).is_err());
        assert!(nondegeneracy_profile(&[], &[0.1], 100, &Stream::new(1), 1).is_err());
    }
}
