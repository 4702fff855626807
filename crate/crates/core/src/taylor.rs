//! Truncated multivariate Taylor expansions.
//!
//! A [`Taylor`] holds the expansion of a smooth function around a point, over
//! an explicit set of active variables, truncated at a total degree. The
//! stored coefficients are Taylor coefficients `c_beta = d^beta f / beta!`.
//! All derivative propagation in this crate is exact arithmetic on these
//! expansions; there is no finite differencing anywhere in the calculus.
//!
//! `order` is the number of trustworthy derivative orders: products and sums
//! keep the minimum of their operands' orders, a partial derivative drops it
//! by one, compositions preserve it.

use smallvec::SmallVec;
use std::collections::HashMap;
use std::sync::{OnceLock, RwLock};

pub type VarSet = SmallVec<[u32; 4]>;

/// Hard cap on coefficients per expansion. Exceeding it is a programming or
/// configuration error; API layers validate sizes before building jets.
pub const MAX_COEFFS: usize = 1 << 21;

/// Order given to exact leaves (constants); far above any working order, so
/// the minimum rule always clamps to the inexact operand.
pub const EXACT_ORDER: usize = 64;

/// Number of multi-degrees over `m` variables with total degree <= `k`.
pub fn shape_size(m: usize, k: usize) -> usize {
    if m == 0 {
        return 1;
    }
    // C(m + k, k), exact in u128 for every size below MAX_COEFFS.
    let mut num: u128 = 1;
    let mut den: u128 = 1;
    for j in 1..=k as u128 {
        num *= m as u128 + j;
        den *= j;
    }
    (num / den) as usize
}

struct Shape {
    m: usize,
    /// Multi-degrees in graded order; within a grade the first variable's
    /// degree descends. Truncation to a lower order is a prefix slice.
    degs: Vec<Box<[u8]>>,
    /// Start offset of each grade in `degs`.
    grade_offsets: Vec<usize>,
    rank: HashMap<Box<[u8]>, u32>,
}

impl Shape {
    fn build(m: usize, k: usize) -> Shape {
        let total = shape_size(m, k);
        assert!(
            total <= MAX_COEFFS,
            "expansion over {m} variables at order {k} needs {total} coefficients (cap {MAX_COEFFS})"
        );
        let mut degs = Vec::with_capacity(total);
        let mut grade_offsets = Vec::with_capacity(k + 2);
        let mut buf = vec![0u8; m];
        for t in 0..=k {
            grade_offsets.push(degs.len());
            emit_grade(m, t, 0, &mut buf, &mut degs);
        }
        grade_offsets.push(degs.len());
        let mut rank = HashMap::with_capacity(total);
        for (i, d) in degs.iter().enumerate() {
            rank.insert(d.clone(), i as u32);
        }
        Shape { m, degs, grade_offsets, rank }
    }

    #[inline]
    fn rank_of(&self, deg: &[u8]) -> u32 {
        debug_assert_eq!(deg.len(), self.m);
        let t: usize = deg.iter().map(|&d| d as usize).sum();
        if t == 0 {
            return 0;
        }
        if t == 1 {
            let pos = deg.iter().position(|&d| d == 1).unwrap();
            return (self.grade_offsets[1] + pos) as u32;
        }
        *self.rank.get(deg).expect("degree outside shape")
    }
}

fn emit_grade(m: usize, t: usize, pos: usize, buf: &mut Vec<u8>, out: &mut Vec<Box<[u8]>>) {
    if m == 0 {
        if t == 0 {
            out.push(buf.clone().into_boxed_slice());
        }
        return;
    }
    if pos == m - 1 {
        buf[pos] = t as u8;
        out.push(buf.clone().into_boxed_slice());
        buf[pos] = 0;
        return;
    }
    for a in (0..=t).rev() {
        buf[pos] = a as u8;
        emit_grade(m, t - a, pos + 1, buf, out);
    }
    buf[pos] = 0;
}

fn shape(m: usize, k: usize) -> &'static Shape {
    static CACHE: OnceLock<RwLock<HashMap<(usize, usize), &'static Shape>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(s) = cache.read().unwrap().get(&(m, k)) {
        return s;
    }
    let mut w = cache.write().unwrap();
    w.entry((m, k)).or_insert_with(|| Box::leak(Box::new(Shape::build(m, k))))
}

/// Truncated multivariate Taylor expansion.
#[derive(Clone, Debug)]
pub struct Taylor {
    vars: VarSet,
    order: usize,
    coeffs: Vec<f64>,
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|j| j as f64).product()
}

impl Taylor {
    pub fn constant(value: f64, order: usize) -> Taylor {
        Taylor { vars: VarSet::new(), order, coeffs: vec![value] }
    }

    fn constant_like(vars: &VarSet, order: usize, value: f64) -> Taylor {
        let mut coeffs = vec![0.0; shape_size(vars.len(), order)];
        coeffs[0] = value;
        Taylor { vars: vars.clone(), order, coeffs }
    }

    /// The expansion of the coordinate function `v -> v_var` around `value`.
    pub fn var(var: u32, value: f64, order: usize) -> Taylor {
        let vars: VarSet = smallvec::smallvec![var];
        let mut coeffs = vec![0.0; shape_size(1, order)];
        coeffs[0] = value;
        if order >= 1 {
            coeffs[1] = 1.0;
        }
        Taylor { vars, order, coeffs }
    }

    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vars(&self) -> &[u32] {
        &self.vars
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    fn shape(&self) -> &'static Shape {
        shape(self.vars.len(), self.order)
    }

    /// Taylor coefficient for a multi-degree given over this expansion's
    /// variable positions. Missing entries are zero.
    fn coeff_by_deg(&self, deg: &[u8]) -> f64 {
        let t: usize = deg.iter().map(|&d| d as usize).sum();
        if t > self.order {
            return 0.0;
        }
        self.coeffs[self.shape().rank_of(deg) as usize]
    }

    /// Plain partial derivative for a multi-index of global variable ids
    /// (with repetition), e.g. `[i, i, j]` for d^3 f / dv_i^2 dv_j.
    pub fn partial_deriv(&self, alpha: &[u32]) -> f64 {
        if alpha.len() > self.order {
            panic!("derivative order {} exceeds expansion order {}", alpha.len(), self.order);
        }
        let mut deg = vec![0u8; self.vars.len()];
        for a in alpha {
            match self.vars.iter().position(|v| v == a) {
                Some(p) => deg[p] += 1,
                None => return 0.0,
            }
        }
        let fact: f64 = deg.iter().map(|&d| factorial(d as usize)).product();
        self.coeff_by_deg(&deg) * fact
    }

    /// Gradient entry d f / dv_var.
    pub fn gradient(&self, var: u32) -> f64 {
        self.partial_deriv(&[var])
    }

    pub fn truncated(&self, k: usize) -> Taylor {
        if k >= self.order {
            return self.clone();
        }
        let n = shape_size(self.vars.len(), k);
        Taylor { vars: self.vars.clone(), order: k, coeffs: self.coeffs[..n].to_vec() }
    }

    /// Re-expresses the expansion over a superset of its variables.
    fn embedded(&self, vars: &VarSet, order: usize) -> Taylor {
        debug_assert!(order <= self.order);
        if *vars == self.vars {
            return self.truncated(order);
        }
        let src = self.truncated(order);
        let pos: Vec<usize> = src
            .vars
            .iter()
            .map(|v| vars.iter().position(|w| w == v).expect("embed target must be a superset"))
            .collect();
        let out_shape = shape(vars.len(), order);
        let mut coeffs = vec![0.0; out_shape.degs.len()];
        let src_shape = src.shape();
        let mut buf = vec![0u8; vars.len()];
        for (i, deg) in src_shape.degs.iter().enumerate() {
            let c = src.coeffs[i];
            if c == 0.0 {
                continue;
            }
            buf.iter_mut().for_each(|b| *b = 0);
            for (p, &d) in deg.iter().enumerate() {
                buf[pos[p]] = d;
            }
            coeffs[out_shape.rank_of(&buf) as usize] = c;
        }
        Taylor { vars: vars.clone(), order, coeffs }
    }

    fn union_vars(a: &Taylor, b: &Taylor) -> VarSet {
        if a.vars == b.vars {
            return a.vars.clone();
        }
        let mut u: VarSet = a.vars.clone();
        for v in &b.vars {
            if !u.contains(v) {
                u.push(*v);
            }
        }
        u.sort_unstable();
        u
    }

    pub fn add(&self, other: &Taylor) -> Taylor {
        self.linear(other, 1.0)
    }

    pub fn sub(&self, other: &Taylor) -> Taylor {
        self.linear(other, -1.0)
    }

    fn linear(&self, other: &Taylor, w: f64) -> Taylor {
        let order = self.order.min(other.order);
        let vars = Taylor::union_vars(self, other);
        let mut out = self.embedded(&vars, order);
        let ob = other.embedded(&vars, order);
        for (x, y) in out.coeffs.iter_mut().zip(ob.coeffs.iter()) {
            *x += w * y;
        }
        out
    }

    pub fn neg(&self) -> Taylor {
        self.scaled(-1.0)
    }

    pub fn scaled(&self, s: f64) -> Taylor {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|c| *c *= s);
        out
    }

    pub fn add_scalar(&self, s: f64) -> Taylor {
        let mut out = self.clone();
        out.coeffs[0] += s;
        out
    }

    pub fn mul(&self, other: &Taylor) -> Taylor {
        let order = self.order.min(other.order);
        let vars = Taylor::union_vars(self, other);
        let a = self.embedded(&vars, order);
        let b = other.embedded(&vars, order);
        let sh = a.shape();
        let mut coeffs = vec![0.0; sh.degs.len()];
        let mut buf = vec![0u8; vars.len()];
        for ta in 0..=order {
            for ia in sh.grade_offsets[ta]..sh.grade_offsets[ta + 1] {
                let ca = a.coeffs[ia];
                if ca == 0.0 {
                    continue;
                }
                let da = &sh.degs[ia];
                for tb in 0..=(order - ta) {
                    for ib in sh.grade_offsets[tb]..sh.grade_offsets[tb + 1] {
                        let cb = b.coeffs[ib];
                        if cb == 0.0 {
                            continue;
                        }
                        let db = &sh.degs[ib];
                        for (o, (&x, &y)) in buf.iter_mut().zip(da.iter().zip(db.iter())) {
                            *o = x + y;
                        }
                        coeffs[sh.rank_of(&buf) as usize] += ca * cb;
                    }
                }
            }
        }
        Taylor { vars, order, coeffs }
    }

    /// Partial derivative with respect to a global variable id. Drops the
    /// order by one; the expansion must have positive order.
    pub fn partial(&self, var: u32) -> Taylor {
        assert!(self.order > 0, "cannot differentiate an order-0 expansion");
        let order = self.order - 1;
        let Some(p) = self.vars.iter().position(|v| *v == var) else {
            return Taylor::constant_like(&self.vars, order, 0.0);
        };
        let out_shape = shape(self.vars.len(), order);
        let in_shape = self.shape();
        let mut coeffs = vec![0.0; out_shape.degs.len()];
        let mut buf = vec![0u8; self.vars.len()];
        for (i, deg) in out_shape.degs.iter().enumerate() {
            buf.copy_from_slice(deg);
            buf[p] += 1;
            let c = self.coeffs[in_shape.rank_of(&buf) as usize];
            coeffs[i] = c * (deg[p] as f64 + 1.0);
        }
        Taylor { vars: self.vars.clone(), order, coeffs }
    }

    /// Composes a univariate smooth function on top of this expansion.
    /// `derivs[k]` must be g^(k) evaluated at `self.value()`.
    pub fn compose(&self, derivs: &[f64]) -> Taylor {
        assert!(derivs.len() >= self.order + 1);
        let k = self.order;
        let mut q = self.clone();
        q.coeffs[0] = 0.0;
        let mut acc = Taylor::constant_like(&self.vars, k, derivs[k] / factorial(k));
        for j in (0..k).rev() {
            acc = acc.mul(&q);
            acc.coeffs[0] += derivs[j] / factorial(j);
        }
        acc
    }

    pub fn exp(&self) -> Taylor {
        let e = self.value().exp();
        let derivs = vec![e; self.order + 1];
        self.compose(&derivs)
    }

    pub fn ln(&self) -> Option<Taylor> {
        let c0 = self.value();
        if !(c0 > 0.0) {
            return None;
        }
        let mut derivs = vec![0.0; self.order + 1];
        derivs[0] = c0.ln();
        let mut p = 1.0 / c0; // g^(k) = (-1)^(k-1) (k-1)! / c0^k
        for k in 1..=self.order {
            derivs[k] = p * factorial(k - 1) * if k % 2 == 1 { 1.0 } else { -1.0 };
            p /= c0;
        }
        Some(self.compose(&derivs))
    }

    pub fn recip(&self) -> Option<Taylor> {
        let c0 = self.value();
        if c0 == 0.0 || !c0.is_finite() {
            return None;
        }
        let mut derivs = vec![0.0; self.order + 1];
        let mut p = 1.0 / c0;
        for k in 0..=self.order {
            derivs[k] = p * factorial(k) * if k % 2 == 0 { 1.0 } else { -1.0 };
            p /= c0;
        }
        Some(self.compose(&derivs))
    }

    pub fn sqrt(&self) -> Option<Taylor> {
        let c0 = self.value();
        if !(c0 > 0.0) {
            return None;
        }
        let mut derivs = vec![0.0; self.order + 1];
        let mut coef = 1.0;
        for k in 0..=self.order {
            derivs[k] = coef * c0.powf(0.5 - k as f64);
            coef *= 0.5 - k as f64;
        }
        Some(self.compose(&derivs))
    }

    pub fn sin(&self) -> Taylor {
        let (s, c) = self.value().sin_cos();
        let cycle = [s, c, -s, -c];
        let derivs: Vec<f64> = (0..=self.order).map(|k| cycle[k % 4]).collect();
        self.compose(&derivs)
    }

    pub fn cos(&self) -> Taylor {
        let (s, c) = self.value().sin_cos();
        let cycle = [c, -s, -c, s];
        let derivs: Vec<f64> = (0..=self.order).map(|k| cycle[k % 4]).collect();
        self.compose(&derivs)
    }

    /// Integer power by repeated squaring; exact for any base value.
    pub fn powi(&self, n: i32) -> Option<Taylor> {
        if n < 0 {
            return self.recip().and_then(|r| r.powi(-n));
        }
        let mut acc = Taylor::constant_like(&self.vars, self.order, 1.0);
        let mut base = self.clone();
        let mut e = n as u32;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc.mul(&base);
            }
            e >>= 1;
            if e > 0 {
                base = base.mul(&base);
            }
        }
        Some(acc)
    }

    /// Real power; requires a strictly positive base value.
    pub fn powf(&self, p: f64) -> Option<Taylor> {
        let c0 = self.value();
        if !(c0 > 0.0) {
            return None;
        }
        let mut derivs = vec![0.0; self.order + 1];
        let mut coef = 1.0;
        for k in 0..=self.order {
            derivs[k] = coef * c0.powf(p - k as f64);
            coef *= p - k as f64;
        }
        Some(self.compose(&derivs))
    }

    /// True when every coefficient is finite.
    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }
}
