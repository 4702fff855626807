//! Weighted derivative tensors of a functional and their norms.
//!
//! For a functional F = f(V) the order-k tensor collects the iterated
//! weighted derivatives D_{(a_1..a_k)}F over coordinate tuples. Per-coordinate
//! weights commute across distinct coordinates, so when every weight depends
//! only on its own coordinate the tensor is symmetric and is stored once per
//! multiset of coordinates. Weights that couple several coordinates (radial
//! cutoffs over vector marks) break that symmetry; storage then falls back to
//! the full tuple-indexed array computed by the bare recursion.

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::malliavin::MallContext;
use crate::noise::NoiseSpec;
use crate::taylor::Taylor;

/// Highest tensor order the engine computes. Order 4 covers second-order
/// integration-by-parts weights plus the extra order the density-derivative
/// estimator consumes.
pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    /// Tensor order k.
    pub order: usize,
    /// True when entries are stored per nondecreasing multiset of local
    /// coordinate indices (colex rank); false for full tuple-major storage.
    pub symmetric: bool,
    pub entries: Vec<f64>,
}

/// Value and weighted derivative tensors of one functional at one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub value: f64,
    /// Global coordinate ids with tensor slots, ascending.
    pub active: Vec<u32>,
    pub tensors: Vec<Tensor>,
}

/// Tensor norms and their aggregates: `norms[k] = |D^(k)F|` (with
/// `norms[0] = |F|`), `deriv_total = sum_{k=1..l} |D^(k)F|`,
/// `total = |F| + deriv_total`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathNorms {
    pub norms: Vec<f64>,
    pub deriv_total: f64,
    pub total: f64,
}

fn binom(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut out = 1usize;
    for i in 0..k {
        out = out * (n - i) / (i + 1);
    }
    out
}

/// Colex rank of a nondecreasing tuple of local indices.
fn sym_rank(tuple: &[usize]) -> usize {
    let mut rank = 0;
    for (t, &i) in tuple.iter().enumerate() {
        rank += binom(i + t, t + 1);
    }
    rank
}

fn sym_len(s: usize, k: usize) -> usize {
    binom(s + k - 1, k)
}

/// Calls `f` for every nondecreasing tuple of length k over 0..s, in colex
/// rank order.
fn for_each_multiset(s: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut tuple = vec![0usize; k];
    loop {
        f(&tuple);
        // Colex successor: bump the first position that can grow.
        let mut t = 0;
        loop {
            if t == k {
                return;
            }
            let cap = if t + 1 < k { tuple[t + 1] } else { s - 1 };
            if tuple[t] < cap {
                tuple[t] += 1;
                for u in 0..t {
                    tuple[u] = 0;
                }
                break;
            }
            t += 1;
        }
    }
}

/// k! / prod(multiplicity!) for a nondecreasing tuple: how many ordered
/// tuples share this multiset.
fn multiset_count(tuple: &[usize]) -> f64 {
    let k = tuple.len();
    let mut fact = vec![1.0f64; k + 1];
    for i in 1..=k {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut denom = 1.0;
    let mut run = 1usize;
    for t in 1..k {
        if tuple[t] == tuple[t - 1] {
            run += 1;
        } else {
            denom *= fact[run];
            run = 1;
        }
    }
    denom *= fact[run];
    fact[k] / denom
}

/// Extracts the weighted tensors of `f` against `ctx`, up to `order`.
pub fn jet_of(ctx: &MallContext, f: &Taylor, order: usize) -> Result<Jet> {
    if order > MAX_ORDER {
        return Err(Error::Config(format!("tensor order {order} exceeds the maximum {MAX_ORDER}")));
    }
    if f.order() < order {
        return Err(Error::Config(format!(
            "jet of order {order} requested from a degree-{} expansion",
            f.order()
        )));
    }
    let active: Vec<u32> = f.vars().to_vec();
    for &a in &active {
        if a as usize >= ctx.dim() {
            return Err(Error::Config(format!("expression variable {a} outside the noise vector")));
        }
    }
    let coupled = active.iter().any(|&a| {
        let c = ctx.coord(a as usize);
        c.weight.vars().iter().any(|v| *v != c.var)
    });
    let tensors = if coupled {
        full_tensors(ctx, f, &active, order)?
    } else {
        sym_tensors(ctx, f, &active, order)
    };
    Ok(Jet { value: f.value(), active, tensors })
}

/// Symmetric path: per-coordinate operators commute, and the m-fold weighted
/// derivative along one coordinate expands as sum_l a_{m,l} d^l with
/// a_{1,1} = pi and a_{m+1,l} = pi (a_{m,l}' + a_{m,l-1}).
fn sym_tensors(ctx: &MallContext, f: &Taylor, active: &[u32], order: usize) -> Vec<Tensor> {
    let s = active.len();
    // Operator coefficients per active coordinate: coeff[t][m][l], Taylors
    // in v_t. Constant weights collapse to a_{m,m} = pi^m.
    let coeff: Vec<Vec<Vec<Taylor>>> = active
        .iter()
        .map(|&a| {
            let w = &ctx.coord(a as usize).weight;
            let mut rows: Vec<Vec<Taylor>> = vec![vec![w.clone()]];
            for m in 1..order {
                let prev = &rows[m - 1];
                let mut row = Vec::with_capacity(m + 1);
                for l in 0..=m {
                    // a_{m+1, l+1} = pi * (a_{m, l+1}' + a_{m, l})
                    let mut t = if l < prev.len() && prev[l].order() > 0 {
                        prev[l].partial(ctx.coord(a as usize).var)
                    } else {
                        Taylor::constant(0.0, prev[0].order().saturating_sub(1))
                    };
                    if l >= 1 {
                        t = t.add(&prev[l - 1]);
                    }
                    row.push(w.mul(&t));
                }
                rows.push(row);
            }
            rows
        })
        .collect();
    let mut tensors = Vec::with_capacity(order);
    let mut mults = vec![0usize; s];
    let mut degs: Vec<u32> = Vec::new();
    for k in 1..=order {
        let mut entries = vec![0.0f64; if s == 0 { 0 } else { sym_len(s, k) }];
        if s > 0 {
            let mut pos = 0usize;
            for_each_multiset(s, k, |tuple| {
                mults.iter_mut().for_each(|m| *m = 0);
                for &t in tuple {
                    mults[t] += 1;
                }
                // Sum over derivative orders l_t in 1..=m_t of
                // prod_t a^{(t)}_{m_t, l_t} * d^{(l)} f.
                let mut entry = 0.0;
                let occupied: Vec<usize> = (0..s).filter(|t| mults[*t] > 0).collect();
                let mut ls: Vec<usize> = occupied.iter().map(|_| 1).collect();
                loop {
                    let mut prod = 1.0;
                    for (j, &t) in occupied.iter().enumerate() {
                        prod *= coeff[t][mults[t] - 1][ls[j] - 1].value();
                    }
                    if prod != 0.0 {
                        degs.clear();
                        for (j, &t) in occupied.iter().enumerate() {
                            for _ in 0..ls[j] {
                                degs.push(active[t]);
                            }
                        }
                        entry += prod * f.partial_deriv(&degs);
                    }
                    // Next l-vector.
                    let mut j = 0;
                    loop {
                        if j == occupied.len() {
                            break;
                        }
                        if ls[j] < mults[occupied[j]] {
                            ls[j] += 1;
                            for u in 0..j {
                                ls[u] = 1;
                            }
                            break;
                        }
                        j += 1;
                    }
                    if j == occupied.len() {
                        break;
                    }
                }
                entries[pos] = entry;
                pos += 1;
            });
        }
        tensors.push(Tensor { order: k, symmetric: true, entries });
    }
    tensors
}

/// General path: iterate D_a directly on expansions. Entry (a_1..a_k) is
/// D_{a_k}( ... D_{a_1} f ), tuple-major storage.
fn full_tensors(ctx: &MallContext, f: &Taylor, active: &[u32], order: usize) -> Result<Vec<Tensor>> {
    let s = active.len();
    let mut tensors = Vec::with_capacity(order);
    let mut layer: Vec<Taylor> = vec![f.clone()];
    for k in 1..=order {
        let mut next = Vec::with_capacity(layer.len() * s);
        for t in &layer {
            for &a in active {
                next.push(ctx.d_i(t, a as usize)?);
            }
        }
        tensors.push(Tensor {
            order: k,
            symmetric: false,
            entries: next.iter().map(|t| t.value()).collect(),
        });
        layer = next;
    }
    Ok(tensors)
}

impl Jet {
    pub fn order(&self) -> usize {
        self.tensors.len()
    }

    fn local(&self, global: u32) -> Option<usize> {
        self.active.binary_search(&global).ok()
    }

    /// Tensor entry for a tuple of global coordinate ids. Coordinates the
    /// functional does not touch give 0.
    pub fn entry(&self, alpha: &[u32]) -> f64 {
        let k = alpha.len();
        if k == 0 {
            return self.value;
        }
        assert!(k <= self.order(), "no order-{k} tensor");
        let mut local = Vec::with_capacity(k);
        for &a in alpha {
            match self.local(a) {
                Some(t) => local.push(t),
                None => return 0.0,
            }
        }
        let t = &self.tensors[k - 1];
        if t.symmetric {
            local.sort_unstable();
            t.entries[sym_rank(&local)]
        } else {
            let s = self.active.len();
            // Tuple-major with a_1 outermost.
            let mut idx = 0usize;
            for &l in &local {
                idx = idx * s + l;
            }
            t.entries[idx]
        }
    }

    /// Euclidean norm of the order-k tensor over all ordered tuples;
    /// k = 0 gives |F|.
    pub fn tensor_norm_sq(&self, k: usize) -> f64 {
        if k == 0 {
            return self.value * self.value;
        }
        let t = &self.tensors[k - 1];
        if t.symmetric {
            let mut acc = 0.0;
            let mut pos = 0usize;
            let s = self.active.len();
            if s == 0 {
                return 0.0;
            }
            for_each_multiset(s, k, |tuple| {
                let e = t.entries[pos];
                acc += multiset_count(tuple) * e * e;
                pos += 1;
            });
            acc
        } else {
            t.entries.iter().map(|e| e * e).sum()
        }
    }
}

/// Norms of a scalar functional up to order `l`.
pub fn path_norms(jet: &Jet, l: usize) -> Result<PathNorms> {
    path_norms_vec(std::slice::from_ref(jet), l)
}

/// Norms of a vector functional: tensor norms aggregate over components
/// before the square root.
pub fn path_norms_vec(jets: &[Jet], l: usize) -> Result<PathNorms> {
    if jets.iter().any(|j| j.order() < l) {
        return Err(Error::Config(format!("norms to order {l} need tensors to order {l}")));
    }
    let mut norms = Vec::with_capacity(l + 1);
    for k in 0..=l {
        let sq: f64 = jets.iter().map(|j| j.tensor_norm_sq(k)).sum();
        norms.push(sq.sqrt());
    }
    let deriv_total: f64 = norms[1..].iter().sum();
    let total = norms[0] + deriv_total;
    Ok(PathNorms { norms, deriv_total, total })
}

/// Evaluates an expression over a noise spec at a point and extracts its
/// weighted tensors.
pub fn eval_jet(expr: &Expr, spec: &NoiseSpec, v: &[f64], order: usize) -> Result<Jet> {
    Ok(vector_jet(std::slice::from_ref(expr), spec, v, order)?.pop().expect("one expr"))
}

/// Componentwise jets with shared subgraph evaluation.
pub fn vector_jet(exprs: &[Expr], spec: &NoiseSpec, v: &[f64], order: usize) -> Result<Vec<Jet>> {
    if order > MAX_ORDER {
        return Err(Error::Config(format!("tensor order {order} exceeds the maximum {MAX_ORDER}")));
    }
    let ctx = MallContext::from_noise(spec, v, order)?;
    let fs = ctx.eval_vec(exprs)?;
    fs.iter().map(|f| jet_of(&ctx, f, order)).collect()
}

/// Divergence of a process given entrywise as expressions, with its own
/// tensors up to `order`. One extra derivative order is consumed internally.
pub fn divergence(u: &[Expr], spec: &NoiseSpec, v: &[f64], order: usize) -> Result<Jet> {
    if order + 1 > MAX_ORDER {
        return Err(Error::Config(format!(
            "divergence to order {order} consumes order {}, above the maximum {MAX_ORDER}",
            order + 1
        )));
    }
    let ctx = MallContext::from_noise(spec, v, order + 1)?;
    let us = ctx.eval_vec(u)?;
    let d = ctx.divergence(&us)?;
    jet_of(&ctx, &d, order)
}

/// Componentwise `L F = divergence(grad F)` with tensors up to `order`.
/// Two extra derivative orders are consumed internally.
pub fn ou_operator(f: &[Expr], spec: &NoiseSpec, v: &[f64], order: usize) -> Result<Vec<Jet>> {
    if order + 2 > MAX_ORDER {
        return Err(Error::Config(format!(
            "L to order {order} consumes order {}, above the maximum {MAX_ORDER}",
            order + 2
        )));
    }
    let ctx = MallContext::from_noise(spec, v, order + 2)?;
    let fs = ctx.eval_vec(f)?;
    fs.iter()
        .map(|t| jet_of(&ctx, &ctx.ou(t)?, order))
        .collect()
}
