//! Sharded Monte Carlo driver with bitwise-reproducible results.
//!
//! Work is cut into fixed-size shards. Shard `s` draws from
//! `stream.substream(s)` and accumulates locally in sample order; shard
//! results are merged sequentially in shard-index order. The schedule is
//! therefore independent of how rayon distributes shards over workers, and a
//! run is reproducible bit for bit for any worker count.

use crate::error::{Error, Result};
use crate::rng::Stream;
use rayon::prelude::*;

/// Samples per shard.
pub const SHARD_SIZE: u64 = 8192;

/// Neumaier-compensated sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Shard-local state that can be folded into a single result.
pub trait Accumulator: Send {
    fn merge(&mut self, other: Self);
}

/// Scalar sample moments. Nonfinite samples are counted and excluded.
#[derive(Clone, Debug, Default)]
pub struct Moments {
    n: u64,
    rejected: u64,
    sum: CompensatedSum,
    sumsq: CompensatedSum,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        if x.is_finite() {
            self.n += 1;
            self.sum.add(x);
            self.sumsq.add(x * x);
        } else {
            self.rejected += 1;
        }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sum.total() / self.n as f64
        }
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        let n = self.n as f64;
        let mean = self.sum.total() / n;
        ((self.sumsq.total() - n * mean * mean) / (n - 1.0)).max(0.0)
    }

    pub fn std_error(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }

    /// Fails unless every sample was finite.
    pub fn require_clean(&self) -> Result<&Self> {
        if self.rejected > 0 {
            Err(Error::Estimator(format!(
                "{} of {} samples were nonfinite",
                self.rejected,
                self.n + self.rejected
            )))
        } else {
            Ok(self)
        }
    }
}

impl Accumulator for Moments {
    fn merge(&mut self, other: Moments) {
        self.n += other.n;
        self.rejected += other.rejected;
        self.sum.merge(&other.sum);
        self.sumsq.merge(&other.sumsq);
    }
}

/// Entrywise moments of a fixed-length sample vector. A row with any
/// nonfinite entry is rejected whole, so all entries share one sample set.
#[derive(Clone, Debug)]
pub struct VecMoments {
    n: u64,
    rejected: u64,
    sum: Vec<CompensatedSum>,
    sumsq: Vec<CompensatedSum>,
}

impl VecMoments {
    pub fn new(dim: usize) -> VecMoments {
        VecMoments {
            n: 0,
            rejected: 0,
            sum: vec![CompensatedSum::default(); dim],
            sumsq: vec![CompensatedSum::default(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.sum.len(), "row length mismatch");
        if row.iter().any(|x| !x.is_finite()) {
            self.rejected += 1;
            return;
        }
        self.n += 1;
        for (k, &x) in row.iter().enumerate() {
            self.sum[k].add(x);
            self.sumsq[k].add(x * x);
        }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn mean(&self, k: usize) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sum[k].total() / self.n as f64
        }
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| self.mean(k)).collect()
    }

    pub fn std_error(&self, k: usize) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        let n = self.n as f64;
        let mean = self.sum[k].total() / n;
        let var = ((self.sumsq[k].total() - n * mean * mean) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }

    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| self.std_error(k)).collect()
    }
}

impl Accumulator for VecMoments {
    fn merge(&mut self, other: VecMoments) {
        assert_eq!(self.dim(), other.dim());
        self.n += other.n;
        self.rejected += other.rejected;
        for k in 0..self.sum.len() {
            self.sum[k].merge(&other.sum[k]);
            self.sumsq[k].merge(&other.sumsq[k]);
        }
    }
}

impl<A: Accumulator, B: Accumulator> Accumulator for (A, B) {
    fn merge(&mut self, other: (A, B)) {
        self.0.merge(other.0);
        self.1.merge(other.1);
    }
}

/// Runs `n` samples through `body`, sharded over the rayon pool. On failure
/// the error from the lowest-indexed failing shard is returned, so error
/// reporting is as reproducible as success.
pub fn run_sharded<A, F>(stream: &Stream, n: u64, make: impl Fn() -> A + Sync, body: F) -> Result<A>
where
    A: Accumulator,
    F: Fn(&mut A, &mut Stream) -> Result<()> + Sync,
{
    let shards = n.div_ceil(SHARD_SIZE);
    let results: Vec<Result<A>> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut sub = stream.substream(s);
            let mut acc = make();
            let count = SHARD_SIZE.min(n - s * SHARD_SIZE);
            for _ in 0..count {
                body(&mut acc, &mut sub)?;
            }
            Ok(acc)
        })
        .collect();
    let mut out = make();
    for r in results {
        out.merge(r?);
    }
    Ok(out)
}

/// Mean and standard error of a scalar functional of the noise stream.
pub fn mc_moments<F>(stream: &Stream, n: u64, f: F) -> Result<Moments>
where
    F: Fn(&mut Stream) -> Result<f64> + Sync,
{
    run_sharded(stream, n, Moments::default, |acc, s| {
        acc.push(f(s)?);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_moments(n: u64) -> Moments {
        let stream = Stream::new(42);
        mc_moments(&stream, n, |s| Ok(s.normal())).unwrap()
    }

    #[test]
    fn moments_of_standard_normal() {
        let m = gaussian_moments(200_000);
        assert_eq!(m.n(), 200_000);
        assert!(m.mean().abs() < 0.01, "mean {}", m.mean());
        assert!((m.variance() - 1.0).abs() < 0.02, "var {}", m.variance());
        assert!((m.std_error() - (1.0 / 200_000f64).sqrt()).abs() < 1e-4);
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| gaussian_moments(100_000))
        };
        let a = run(1);
        let b = run(4);
        let c = run(7);
        assert_eq!(a.mean().to_bits(), b.mean().to_bits());
        assert_eq!(a.mean().to_bits(), c.mean().to_bits());
        assert_eq!(a.variance().to_bits(), b.variance().to_bits());
    }

    #[test]
    fn nonfinite_samples_are_counted_not_averaged() {
        let stream = Stream::new(7);
        let m = mc_moments(&stream, 10_000, |s| {
            let x = s.normal();
            Ok(if x > 2.0 { f64::NAN } else { x })
        })
        .unwrap();
        assert!(m.rejected() > 100);
        assert_eq!(m.n() + m.rejected(), 10_000);
        assert!(m.mean() < 0.0, "conditioned mean must drop below zero");
        assert!(m.require_clean().is_err());
    }

    #[test]
    fn first_failing_shard_wins() {
        let stream = Stream::new(3);
        let run = || {
            run_sharded(&stream, 50_000, Moments::default, |acc, s| {
                let x = s.normal();
                if x > 3.5 {
                    return Err(Error::Estimator(format!("bad draw {x}")));
                }
                acc.push(x);
                Ok(())
            })
        };
        let e1 = run().unwrap_err().to_string();
        let e2 = run().unwrap_err().to_string();
        assert_eq!(e1, e2);
    }

    #[test]
    fn partial_final_shard() {
        let n = 3 * SHARD_SIZE + 17;
        let stream = Stream::new(11);
        let m = mc_moments(&stream, n, |s| Ok(s.next_f64())).unwrap();
        assert_eq!(m.n(), n);
        assert!((m.mean() - 0.5).abs() < 0.01);
    }

    #[test]
    fn vector_moments_reject_rows_whole() {
        let mut vm = VecMoments::new(2);
        vm.push(&[1.0, 2.0]);
        vm.push(&[f64::INFINITY, 0.0]);
        vm.push(&[3.0, 4.0]);
        assert_eq!(vm.n(), 2);
        assert_eq!(vm.rejected(), 1);
        assert_eq!(vm.means(), vec![2.0, 3.0]);
    }
}
