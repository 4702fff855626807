//! Pathwise weighted calculus over a realized noise vector.
//!
//! A `MallContext` freezes one sample of the noise together with, per
//! coordinate, the weight expansion and the log-density gradient expansion.
//! Every operator here is plain truncated-Taylor algebra against that
//! context: the weighted derivative `D_i F = pi_i dF/dv_i`, the divergence
//! (the adjoint of D under the expectation), the operator `L = delta(D .)`,
//! and the covariance matrix of a vector functional with its inverse. Each
//! application of a derivative-consuming operator lowers the usable jet
//! order by one; callers budget orders accordingly.

use crate::error::{Error, Result};
use crate::expr::{EvalCtx, Expr};
use crate::noise::NoiseSpec;
use crate::taylor::Taylor;
use nalgebra::DMatrix;

/// One noise coordinate, frozen at its sampled value.
#[derive(Clone, Debug)]
pub struct CoordCtx {
    /// Global jet variable id.
    pub var: u32,
    pub value: f64,
    /// Expansion of the weight pi_i around the sample.
    pub weight: Taylor,
    /// Expansion of d ln p / d v_i around the sample.
    pub dlogp: Taylor,
}

#[derive(Clone, Debug)]
pub struct MallContext {
    coords: Vec<CoordCtx>,
    order: usize,
}

impl MallContext {
    pub fn new(coords: Vec<CoordCtx>, order: usize) -> MallContext {
        MallContext { coords, order }
    }

    /// Builds the context for a product-law noise vector at a sampled point.
    /// Every coordinate must be interior to its support.
    pub fn from_noise(spec: &NoiseSpec, v: &[f64], order: usize) -> Result<MallContext> {
        if v.len() != spec.dim() {
            return Err(Error::Config(format!(
                "point has {} coordinates, spec has {}",
                v.len(),
                spec.dim()
            )));
        }
        let coords = spec
            .components()
            .iter()
            .zip(v.iter())
            .enumerate()
            .map(|(i, (c, &vi))| {
                Ok(CoordCtx {
                    var: i as u32,
                    value: vi,
                    weight: c.weight.weight_taylor(&c.law, i as u32, vi, order),
                    dlogp: c.law.dlogp_taylor(i as u32, vi, order)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MallContext { coords, order })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn coord(&self, i: usize) -> &CoordCtx {
        &self.coords[i]
    }

    pub fn coords(&self) -> &[CoordCtx] {
        &self.coords
    }

    /// Sampled point as a plain vector.
    pub fn point(&self) -> Vec<f64> {
        self.coords.iter().map(|c| c.value).collect()
    }

    /// Negates every log-density gradient. This deliberately breaks the
    /// duality between derivative and divergence; it exists so self-tests
    /// can prove they would catch a wrong measure (a passing suite with
    /// this switch on would be vacuous).
    pub fn flip_log_gradient(&mut self) {
        for c in &mut self.coords {
            c.dlogp = c.dlogp.neg();
        }
    }

    /// Jet of coordinate `i` as a variable.
    pub fn leaf(&self, i: usize) -> Result<Taylor> {
        let c = self.coords.get(i).ok_or_else(|| {
            Error::Config(format!("coordinate {i} out of range (dim {})", self.coords.len()))
        })?;
        Ok(Taylor::var(c.var, c.value, self.order))
    }

    /// Evaluates expressions against this context with shared memoization.
    pub fn eval_vec(&self, exprs: &[Expr]) -> Result<Vec<Taylor>> {
        let leaf = |i: usize| self.leaf(i);
        let mut ec = EvalCtx::new(&leaf);
        exprs.iter().map(|e| ec.eval(e)).collect()
    }

    pub fn eval(&self, expr: &Expr) -> Result<Taylor> {
        Ok(self.eval_vec(std::slice::from_ref(expr))?.pop().expect("one expr"))
    }

    /// Weighted derivative along coordinate `i`: `pi_i * df/dv_i`.
    /// Consumes one jet order.
    pub fn d_i(&self, f: &Taylor, i: usize) -> Result<Taylor> {
        let c = self.coords.get(i).ok_or_else(|| {
            Error::Config(format!("coordinate {i} out of range (dim {})", self.coords.len()))
        })?;
        need_order(f, 1)?;
        Ok(c.weight.mul(&f.partial(c.var)))
    }

    /// Full weighted gradient, one entry per coordinate.
    pub fn grad(&self, f: &Taylor) -> Result<Vec<Taylor>> {
        (0..self.coords.len()).map(|i| self.d_i(f, i)).collect()
    }

    /// Pathwise inner product of two processes.
    pub fn inner(&self, a: &[Taylor], b: &[Taylor]) -> Taylor {
        assert_eq!(a.len(), b.len(), "process length mismatch");
        let order = a
            .iter()
            .chain(b.iter())
            .map(|t| t.order())
            .min()
            .unwrap_or(self.order);
        let mut acc = Taylor::constant(0.0, order);
        for (x, y) in a.iter().zip(b.iter()) {
            acc = acc.add(&x.mul(y));
        }
        acc
    }

    /// Divergence of a process: the adjoint of the weighted gradient,
    /// `-sum_i (d/dv_i (pi_i u_i) + pi_i u_i d ln p/dv_i)`.
    /// Consumes one jet order.
    pub fn divergence(&self, u: &[Taylor]) -> Result<Taylor> {
        if u.len() != self.coords.len() {
            return Err(Error::Config(format!(
                "process has {} entries, context has {}",
                u.len(),
                self.coords.len()
            )));
        }
        let order = u.iter().map(|t| t.order()).min().unwrap_or(self.order);
        if order == 0 {
            return Err(Error::Config("divergence needs one spare jet order".into()));
        }
        let mut acc = Taylor::constant(0.0, order - 1);
        for (c, ui) in self.coords.iter().zip(u.iter()) {
            let wu = c.weight.mul(ui);
            let term = wu.partial(c.var).add(&wu.mul(&c.dlogp));
            acc = acc.add(&term);
        }
        Ok(acc.neg())
    }

    /// `L F = divergence(grad F)`. Consumes two jet orders.
    pub fn ou(&self, f: &Taylor) -> Result<Taylor> {
        need_order(f, 2)?;
        self.divergence(&self.grad(f)?)
    }

    /// Covariance matrix entries as jets: `sigma[k][k'] = <DF^k, DF^k'>`.
    pub fn sigma_taylor(&self, grads: &[Vec<Taylor>]) -> Vec<Vec<Taylor>> {
        let d = grads.len();
        let mut out = vec![vec![Taylor::constant(0.0, 0); d]; d];
        for k in 0..d {
            for k2 in k..d {
                let s = self.inner(&grads[k], &grads[k2]);
                out[k][k2] = s.clone();
                if k2 != k {
                    out[k2][k] = s;
                }
            }
        }
        out
    }

    /// Value-level covariance report for a vector functional, from its
    /// weighted gradients.
    pub fn covariance(&self, grads: &[Vec<Taylor>]) -> CovarianceReport {
        let d = grads.len();
        let mut sigma = DMatrix::zeros(d, d);
        for k in 0..d {
            for k2 in k..d {
                let mut s = 0.0;
                for (a, b) in grads[k].iter().zip(grads[k2].iter()) {
                    s += a.value() * b.value();
                }
                sigma[(k, k2)] = s;
                sigma[(k2, k)] = s;
            }
        }
        CovarianceReport::from_sigma(sigma)
    }
}

fn need_order(f: &Taylor, k: usize) -> Result<()> {
    if f.order() < k {
        Err(Error::Config(format!(
            "operation consumes {k} jet orders but the argument has {}",
            f.order()
        )))
    } else {
        Ok(())
    }
}

/// Degeneracy floor: below this determinant (or above condition 10^12) the
/// matrix is not inverted. Degenerate samples are handled by localization,
/// never by pseudo-inverses.
pub const DET_FLOOR: f64 = 1e-300;
pub const COND_CEIL: f64 = 1e12;

#[derive(Clone, Debug)]
pub struct CovarianceReport {
    pub sigma: DMatrix<f64>,
    pub det: f64,
    /// Smallest eigenvalue.
    pub lambda: f64,
    /// max(1, 1/det).
    pub m_f: f64,
    pub gamma: Option<DMatrix<f64>>,
    pub degenerate: bool,
}

impl CovarianceReport {
    pub fn from_sigma(sigma: DMatrix<f64>) -> CovarianceReport {
        let d = sigma.nrows();
        let eig = sigma.clone().symmetric_eigenvalues();
        let lambda = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let lambda_max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let det: f64 = eig.iter().product();
        let cond = if lambda > 0.0 { lambda_max / lambda } else { f64::INFINITY };
        let degenerate = !(det > DET_FLOOR) || cond > COND_CEIL || !det.is_finite();
        let gamma = if degenerate {
            None
        } else {
            sigma.clone().try_inverse()
        };
        let m_f = if det > 0.0 { (1.0 / det).max(1.0) } else { f64::INFINITY };
        let _ = d;
        CovarianceReport { sigma, det, lambda, m_f, gamma, degenerate }
    }
}

/// Determinant of a matrix of jets by cofactor expansion along the first
/// row. Exponential in the dimension; fine for the small d used here.
pub fn det_taylor(m: &[Vec<Taylor>]) -> Taylor {
    let d = m.len();
    if d == 0 {
        return Taylor::constant(1.0, 0);
    }
    if d == 1 {
        return m[0][0].clone();
    }
    if d == 2 {
        return m[0][0].mul(&m[1][1]).sub(&m[0][1].mul(&m[1][0]));
    }
    let mut acc: Option<Taylor> = None;
    for j in 0..d {
        let sub = minor(m, 0, j);
        let mut term = m[0][j].mul(&det_taylor(&sub));
        if j % 2 == 1 {
            term = term.neg();
        }
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term),
        });
    }
    acc.expect("d >= 1")
}

fn minor(m: &[Vec<Taylor>], row: usize, col: usize) -> Vec<Vec<Taylor>> {
    m.iter()
        .enumerate()
        .filter(|(i, _)| *i != row)
        .map(|(_, r)| {
            r.iter()
                .enumerate()
                .filter(|(j, _)| *j != col)
                .map(|(_, t)| t.clone())
                .collect()
        })
        .collect()
}

/// Inverse of a jet matrix via adjugate over determinant, so the inverse's
/// derivatives come from differentiating cofactors, never from perturbing a
/// numerically inverted matrix. Returns the inverse and the determinant jet;
/// `None` when the determinant vanishes at the point.
pub fn gamma_taylor(m: &[Vec<Taylor>]) -> Option<(Vec<Vec<Taylor>>, Taylor)> {
    let d = m.len();
    let det = det_taylor(m);
    let inv_det = det.recip()?;
    let mut gamma = vec![vec![Taylor::constant(0.0, 0); d]; d];
    for i in 0..d {
        for j in 0..d {
            // adj(A)[j][i] = (-1)^{i+j} det(minor_ij)
            let mut cof = if d == 1 {
                Taylor::constant(1.0, det.order())
            } else {
                det_taylor(&minor(m, i, j))
            };
            if (i + j) % 2 == 1 {
                cof = cof.neg();
            }
            gamma[j][i] = cof.mul(&inv_det);
        }
    }
    Some((gamma, det))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::mc::{mc_moments, Moments};
    use crate::noise::{Component, ComponentLaw, NoiseSpec, WeightSpec};
    use crate::rng::Stream;
    use approx::assert_relative_eq;

    fn gauss_ctx(v: &[f64], order: usize) -> MallContext {
        MallContext::from_noise(&NoiseSpec::iid_gaussian(v.len()), v, order).unwrap()
    }

    #[test]
    fn divergence_of_constant_process_is_the_coordinate() {
        let ctx = gauss_ctx(&[0.3], 3);
        let u = vec![Taylor::constant(1.0, 3)];
        let d = ctx.divergence(&u).unwrap();
        assert_relative_eq!(d.value(), 0.3);
        assert_relative_eq!(d.partial_deriv(&[0]), 1.0);
    }

    #[test]
    fn divergence_of_coordinate_process() {
        let ctx = gauss_ctx(&[2.0], 3);
        let v = ctx.leaf(0).unwrap();
        let d = ctx.divergence(&[v]).unwrap();
        // -(1 + v * (-v)) = v^2 - 1
        assert_relative_eq!(d.value(), 3.0);
        assert_relative_eq!(d.partial_deriv(&[0]), 4.0);
        assert_relative_eq!(d.partial_deriv(&[0, 0]), 2.0);
    }

    #[test]
    fn ou_operator_references() {
        let ctx = gauss_ctx(&[1.0], 4);
        let v = ctx.leaf(0).unwrap();
        assert_relative_eq!(ctx.ou(&v).unwrap().value(), 1.0);
        let sq = v.mul(&v);
        // L(V^2) = 2V^2 - 2, zero at v = 1
        let l = ctx.ou(&sq).unwrap();
        assert_relative_eq!(l.value(), 0.0);
        assert_relative_eq!(l.partial_deriv(&[0]), 4.0);
        let c = Taylor::constant(5.0, 4);
        assert_relative_eq!(ctx.ou(&c).unwrap().value(), 0.0);
    }

    #[test]
    fn product_rule_pathwise() {
        // divergence(F U) = F divergence(U) - <DF, U> on random points.
        let mut s = Stream::new(21);
        for _ in 0..1000 {
            let v = [s.normal(), s.normal()];
            let ctx = gauss_ctx(&v, 4);
            let (x, y) = (ctx.leaf(0).unwrap(), ctx.leaf(1).unwrap());
            let f = x.mul(&x).add(&y.scaled(0.5)).add_scalar(0.3);
            let u = vec![x.mul(&y), y.mul(&y).sub(&x)];
            let fu: Vec<Taylor> = u.iter().map(|t| f.mul(t)).collect();
            let lhs = ctx.divergence(&fu).unwrap().value();
            let rhs = f.mul(&ctx.divergence(&u).unwrap()).sub(&ctx.inner(&ctx.grad(&f).unwrap(), &u)).value();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn chain_rule_for_ou_operator() {
        // L(phi(F)) = sum_r dphi LF^r - sum_rr' d2phi <DF^r, DF^r'>
        let mut s = Stream::new(22);
        for _ in 0..1000 {
            let v = [s.normal(), s.normal()];
            let ctx = gauss_ctx(&v, 4);
            let (x, y) = (ctx.leaf(0).unwrap(), ctx.leaf(1).unwrap());
            let f = [x.mul(&y).add(&x), y.mul(&y).scaled(0.5)];
            // phi(a, b) = sin(a) * b
            let phi = f[0].sin().mul(&f[1]);
            let lhs = ctx.ou(&phi).unwrap().value();
            let grads: Vec<Vec<Taylor>> = f.iter().map(|c| ctx.grad(c).unwrap()).collect();
            let dphi = [f[0].cos().mul(&f[1]), f[0].sin()];
            let d2 = [
                [f[0].sin().mul(&f[1]).neg(), f[0].cos()],
                [f[0].cos(), Taylor::constant(0.0, 4)],
            ];
            let mut rhs = 0.0;
            for r in 0..2 {
                rhs += dphi[r].value() * ctx.ou(&f[r]).unwrap().value();
            }
            for r in 0..2 {
                for r2 in 0..2 {
                    rhs -= d2[r][r2].value() * ctx.inner(&grads[r], &grads[r2]).value();
                }
            }
            assert_relative_eq!(lhs, rhs, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn duality_in_expectation() {
        // E(<DF, U>) = E(F divergence(U)) for F = V^2, U = 1: both are 0.
        let spec = NoiseSpec::iid_gaussian(1);
        let stream = Stream::new(30);
        let m: Moments = mc_moments(&stream, 200_000, |s| {
            let v = spec.sample(s);
            let ctx = MallContext::from_noise(&spec, &v, 2)?;
            let x = ctx.leaf(0)?;
            let f = x.mul(&x);
            let u = vec![Taylor::constant(1.0, 2)];
            let lhs = ctx.inner(&ctx.grad(&f)?, &u).value();
            let rhs = f.value() * ctx.divergence(&u)?.value();
            Ok(lhs - rhs)
        })
        .unwrap();
        assert!(m.mean().abs() < 4.0 * m.std_error() + 1e-12, "{} vs {}", m.mean(), m.std_error());
    }

    #[test]
    fn covariance_reference_cases() {
        let ctx = gauss_ctx(&[0.4], 2);
        let v = ctx.leaf(0).unwrap();
        let rep = ctx.covariance(&[ctx.grad(&v).unwrap()]);
        assert_eq!(rep.det, 1.0);
        assert_eq!(rep.m_f, 1.0);
        assert!(!rep.degenerate);
        assert_relative_eq!(rep.gamma.as_ref().unwrap()[(0, 0)], 1.0);

        // Two copies of the same coordinate: rank one.
        let ctx = gauss_ctx(&[0.4, 1.1], 2);
        let x = ctx.leaf(0).unwrap();
        let g = ctx.grad(&x).unwrap();
        let rep = ctx.covariance(&[g.clone(), g]);
        assert!(rep.degenerate);
        assert!(rep.gamma.is_none());
        assert!(rep.det.abs() < 1e-12);
    }

    #[test]
    fn covariance_on_dyadic_grid() {
        let spec = NoiseSpec::brownian_grid(1, 2).unwrap();
        let v = vec![0.1, -0.2, 0.3, 0.05];
        let ctx = MallContext::from_noise(&spec, &v, 2).unwrap();
        let mut f = Taylor::constant(0.0, 2);
        for i in 0..4 {
            f = f.add(&ctx.leaf(i).unwrap());
        }
        let rep = ctx.covariance(&[ctx.grad(&f).unwrap()]);
        assert_relative_eq!(rep.det, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn eigen_sandwich_pathwise() {
        // lambda^d <= det <= lambda * lambda_max^{d-1} for random 3x3 Grams.
        let mut s = Stream::new(9);
        for _ in 0..200 {
            let v: Vec<f64> = (0..3).map(|_| s.normal()).collect();
            let ctx = gauss_ctx(&v, 2);
            let ls: Vec<Taylor> = (0..3).map(|i| ctx.leaf(i).unwrap()).collect();
            let f = [
                ls[0].mul(&ls[1]).add(&ls[2]),
                ls[1].mul(&ls[1]).add(&ls[0].scaled(0.3)),
                ls[2].mul(&ls[0]).sub(&ls[1]),
            ];
            let grads: Vec<Vec<Taylor>> = f.iter().map(|c| ctx.grad(c).unwrap()).collect();
            let rep = ctx.covariance(&grads);
            let eig = rep.sigma.clone().symmetric_eigenvalues();
            let lmax = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let tol = 1e-9 * (1.0 + lmax.powi(3));
            assert!(rep.lambda.powi(3) <= rep.det + tol);
            assert!(rep.det <= rep.lambda * lmax * lmax + tol);
            if let Some(g) = &rep.gamma {
                let id = g * &rep.sigma;
                for i in 0..3 {
                    for j in 0..3 {
                        let want = if i == j { 1.0 } else { 0.0 };
                        assert!((id[(i, j)] - want).abs() < 1e-8, "gamma sigma != I");
                    }
                }
            }
        }
    }

    #[test]
    fn jet_matrix_inverse_matches_values_and_derivatives() {
        let ctx = gauss_ctx(&[0.3, -0.8], 4);
        let (x, y) = (ctx.leaf(0).unwrap(), ctx.leaf(1).unwrap());
        let m = vec![
            vec![x.mul(&x).add_scalar(2.0), x.mul(&y)],
            vec![x.mul(&y), y.mul(&y).add_scalar(1.5)],
        ];
        let (gamma, det) = gamma_taylor(&m).unwrap();
        // Values match the numeric inverse.
        let nm = DMatrix::from_fn(2, 2, |i, j| m[i][j].value());
        let ninv = nm.clone().try_inverse().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(gamma[i][j].value(), ninv[(i, j)], max_relative = 1e-12);
            }
        }
        assert_relative_eq!(det.value(), nm.determinant(), max_relative = 1e-12);
        // d/dx of the inverse matches finite differences of numeric inverses.
        let h = 1e-6;
        let at = |vx: f64| {
            let c = gauss_ctx(&[vx, -0.8], 1);
            let (x, y) = (c.leaf(0).unwrap(), c.leaf(1).unwrap());
            let m = [
                [x.mul(&x).add_scalar(2.0).value(), x.mul(&y).value()],
                [x.mul(&y).value(), y.mul(&y).add_scalar(1.5).value()],
            ];
            DMatrix::from_fn(2, 2, |i, j| m[i][j]).try_inverse().unwrap()
        };
        let (p, m2) = (at(0.3 + h), at(0.3 - h));
        for i in 0..2 {
            for j in 0..2 {
                let fd = (p[(i, j)] - m2[(i, j)]) / (2.0 * h);
                assert_relative_eq!(gamma[i][j].partial_deriv(&[0]), fd, max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn flipped_log_gradient_breaks_duality() {
        let spec = NoiseSpec::iid_gaussian(1);
        let mut ctx = MallContext::from_noise(&spec, &[0.3], 2).unwrap();
        ctx.flip_log_gradient();
        let u = vec![Taylor::constant(1.0, 2)];
        // Honest value is +0.3; the corrupted context gives -0.3.
        assert_relative_eq!(ctx.divergence(&u).unwrap().value(), -0.3);
    }

    #[test]
    fn chain_rule_first_order_across_specs() {
        // First-order tensor of phi(F) equals sum_r dphi_r DF^r for mixed specs.
        let specs = [
            NoiseSpec::iid_gaussian(2),
            NoiseSpec::new(vec![
                Component {
                    law: ComponentLaw::Exponential { rate: 1.3 },
                    weight: WeightSpec::SmoothCutoff { width: 0.1 },
                },
                Component {
                    law: ComponentLaw::Gaussian { mean: 0.0, variance: 1.0 },
                    weight: WeightSpec::Constant { value: 0.7 },
                },
            ])
            .unwrap(),
            NoiseSpec::brownian_grid(2, 0).unwrap(),
        ];
        let mut s = Stream::new(55);
        for spec in &specs {
            for _ in 0..333 {
                let v = spec.sample(&mut s);
                let ctx = MallContext::from_noise(&spec, &v, 3).unwrap();
                let exprs = [
                    &(&Expr::var(0) * &Expr::var(1)) + &Expr::var(0),
                    &(&Expr::var(1) * &Expr::var(1)) * &Expr::constant(0.5),
                ];
                let f = ctx.eval_vec(&exprs).unwrap();
                let phi = f[0].sin().mul(&f[1].cos());
                let lhs = ctx.grad(&phi).unwrap();
                let dphi = [f[0].cos().mul(&f[1].cos()), f[0].sin().mul(&f[1].sin()).neg()];
                for i in 0..2 {
                    let mut rhs = 0.0;
                    for r in 0..2 {
                        rhs += dphi[r].value() * ctx.d_i(&f[r], i).unwrap().value();
                    }
                    let got = lhs[i].value();
                    let scale = 1.0 + got.abs();
                    assert!((got - rhs).abs() / scale < 1e-10, "{got} vs {rhs}");
                }
            }
        }
    }
}
