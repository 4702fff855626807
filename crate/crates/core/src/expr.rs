//! Expression graphs for simple functionals.
//!
//! An [`Expr`] is an immutable DAG over numbered input slots. Graphs are
//! cheap to clone (nodes are reference counted) and shared subgraphs are
//! evaluated once per evaluation call. Evaluation is generic over the leaf
//! values: binding slot `i` to the coordinate expansion of `v_i` yields the
//! functional's Taylor data at a noise point, while binding slots to already
//! computed expansions composes functions (test functions applied to a vector
//! functional, coefficient fields applied to a simulated state, ...).
//!
//! The JSON form is an s-expression: numbers are constants, `["var", i]` is a
//! slot, and operator nodes are arrays like `["*", ["var", 0], ["var", 0]]`.

use crate::error::{Error, Result};
use crate::localization::{phi_taylor, psi_taylor};
use crate::taylor::Taylor;
use serde_json::Value;
use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
enum Kind {
    Const(f64),
    Var(usize),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    Neg(Expr),
    Pow(Expr, i32),
    Exp(Expr),
    Ln(Expr),
    Sin(Expr),
    Cos(Expr),
    Sqrt(Expr),
    Tanh(Expr),
    Psi(f64, Expr),
    Phi(f64, Expr),
}

#[derive(Debug)]
struct Node {
    id: u64,
    kind: Kind,
}

/// A smooth scalar expression over numbered input slots.
#[derive(Clone, Debug)]
pub struct Expr(Arc<Node>);

fn node(kind: Kind) -> Expr {
    Expr(Arc::new(Node { id: NEXT_ID.fetch_add(1, Ordering::Relaxed), kind }))
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        node(Kind::Const(c))
    }

    pub fn var(i: usize) -> Expr {
        node(Kind::Var(i))
    }

    pub fn pow(&self, n: i32) -> Expr {
        node(Kind::Pow(self.clone(), n))
    }

    pub fn exp(&self) -> Expr {
        node(Kind::Exp(self.clone()))
    }

    pub fn ln(&self) -> Expr {
        node(Kind::Ln(self.clone()))
    }

    pub fn sin(&self) -> Expr {
        node(Kind::Sin(self.clone()))
    }

    pub fn cos(&self) -> Expr {
        node(Kind::Cos(self.clone()))
    }

    pub fn sqrt(&self) -> Expr {
        node(Kind::Sqrt(self.clone()))
    }

    pub fn tanh(&self) -> Expr {
        node(Kind::Tanh(self.clone()))
    }

    /// Plateau bump of radius `a` applied to this expression.
    pub fn psi(&self, a: f64) -> Expr {
        node(Kind::Psi(a, self.clone()))
    }

    /// Away-from-zero bump of radius `a` applied to this expression.
    pub fn phi(&self, a: f64) -> Expr {
        node(Kind::Phi(a, self.clone()))
    }

    /// Rewrites the graph with slot `i` replaced by `bind(i)` wherever the
    /// binding returns an expression; other slots pass through. Shared
    /// subgraphs are rewritten once, so iterated substitution (schemes built
    /// step by step) stays proportional to the graph size.
    pub fn substitute(&self, bind: &dyn Fn(usize) -> Option<Expr>) -> Expr {
        let mut memo: HashMap<u64, Expr> = HashMap::new();
        self.subst_inner(bind, &mut memo)
    }

    fn subst_inner(&self, bind: &dyn Fn(usize) -> Option<Expr>, memo: &mut HashMap<u64, Expr>) -> Expr {
        if let Some(e) = memo.get(&self.0.id) {
            return e.clone();
        }
        let out = match &self.0.kind {
            Kind::Const(_) => self.clone(),
            Kind::Var(i) => bind(*i).unwrap_or_else(|| self.clone()),
            Kind::Add(a, b) => node(Kind::Add(a.subst_inner(bind, memo), b.subst_inner(bind, memo))),
            Kind::Sub(a, b) => node(Kind::Sub(a.subst_inner(bind, memo), b.subst_inner(bind, memo))),
            Kind::Mul(a, b) => node(Kind::Mul(a.subst_inner(bind, memo), b.subst_inner(bind, memo))),
            Kind::Div(a, b) => node(Kind::Div(a.subst_inner(bind, memo), b.subst_inner(bind, memo))),
            Kind::Neg(a) => node(Kind::Neg(a.subst_inner(bind, memo))),
            Kind::Pow(a, n) => node(Kind::Pow(a.subst_inner(bind, memo), *n)),
            Kind::Exp(a) => node(Kind::Exp(a.subst_inner(bind, memo))),
            Kind::Ln(a) => node(Kind::Ln(a.subst_inner(bind, memo))),
            Kind::Sin(a) => node(Kind::Sin(a.subst_inner(bind, memo))),
            Kind::Cos(a) => node(Kind::Cos(a.subst_inner(bind, memo))),
            Kind::Sqrt(a) => node(Kind::Sqrt(a.subst_inner(bind, memo))),
            Kind::Tanh(a) => node(Kind::Tanh(a.subst_inner(bind, memo))),
            Kind::Psi(r, a) => node(Kind::Psi(*r, a.subst_inner(bind, memo))),
            Kind::Phi(r, a) => node(Kind::Phi(*r, a.subst_inner(bind, memo))),
        };
        memo.insert(self.0.id, out.clone());
        out
    }

    /// The set of input slots the expression reads.
    pub fn vars(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut seen = std::collections::HashSet::new();
        self.collect_vars(&mut out, &mut seen);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<usize>, seen: &mut std::collections::HashSet<u64>) {
        if !seen.insert(self.0.id) {
            return;
        }
        match &self.0.kind {
            Kind::Const(_) => {}
            Kind::Var(i) => {
                out.insert(*i);
            }
            Kind::Add(a, b) | Kind::Sub(a, b) | Kind::Mul(a, b) | Kind::Div(a, b) => {
                a.collect_vars(out, seen);
                b.collect_vars(out, seen);
            }
            Kind::Neg(a)
            | Kind::Pow(a, _)
            | Kind::Exp(a)
            | Kind::Ln(a)
            | Kind::Sin(a)
            | Kind::Cos(a)
            | Kind::Sqrt(a)
            | Kind::Tanh(a)
            | Kind::Psi(_, a)
            | Kind::Phi(_, a) => a.collect_vars(out, seen),
        }
    }
}

/// Shared evaluation context; memoizes node results so DAG sharing pays off.
pub struct EvalCtx<'a> {
    leaf: &'a dyn Fn(usize) -> Result<Taylor>,
    memo: HashMap<u64, Taylor>,
}

impl<'a> EvalCtx<'a> {
    pub fn new(leaf: &'a dyn Fn(usize) -> Result<Taylor>) -> Self {
        EvalCtx { leaf, memo: HashMap::new() }
    }

    pub fn eval(&mut self, e: &Expr) -> Result<Taylor> {
        if let Some(t) = self.memo.get(&e.0.id) {
            return Ok(t.clone());
        }
        let fail = |op: &'static str, msg: String| Error::Eval { node: e.0.id, op, msg };
        let t = match &e.0.kind {
            Kind::Const(c) => Taylor::constant(*c, crate::taylor::EXACT_ORDER),
            Kind::Var(i) => (self.leaf)(*i)?,
            Kind::Add(a, b) => self.eval(a)?.add(&self.eval(b)?),
            Kind::Sub(a, b) => self.eval(a)?.sub(&self.eval(b)?),
            Kind::Mul(a, b) => self.eval(a)?.mul(&self.eval(b)?),
            Kind::Div(a, b) => {
                let den = self.eval(b)?;
                let inv = den
                    .recip()
                    .ok_or_else(|| fail("div", format!("denominator value {}", den.value())))?;
                self.eval(a)?.mul(&inv)
            }
            Kind::Neg(a) => self.eval(a)?.neg(),
            Kind::Pow(a, n) => {
                let base = self.eval(a)?;
                base.powi(*n)
                    .ok_or_else(|| fail("pow", format!("base value {} exponent {n}", base.value())))?
            }
            Kind::Exp(a) => self.eval(a)?.exp(),
            Kind::Ln(a) => {
                let x = self.eval(a)?;
                x.ln().ok_or_else(|| fail("ln", format!("argument value {}", x.value())))?
            }
            Kind::Sin(a) => self.eval(a)?.sin(),
            Kind::Cos(a) => self.eval(a)?.cos(),
            Kind::Sqrt(a) => {
                let x = self.eval(a)?;
                x.sqrt().ok_or_else(|| fail("sqrt", format!("argument value {}", x.value())))?
            }
            Kind::Tanh(a) => tanh_taylor(&self.eval(a)?),
            Kind::Psi(r, a) => {
                if !(*r > 0.0) {
                    return Err(fail("psi", format!("radius {r}")));
                }
                psi_taylor(*r, &self.eval(a)?)
            }
            Kind::Phi(r, a) => {
                if !(*r > 0.0) {
                    return Err(fail("phi", format!("radius {r}")));
                }
                phi_taylor(*r, &self.eval(a)?)
            }
        };
        self.memo.insert(e.0.id, t.clone());
        Ok(t)
    }
}

fn tanh_taylor(x: &Taylor) -> Taylor {
    // Saturate far out: the residual 2/(e^{2x}+1) and all its derivatives are
    // below 1e-16 there, and the direct formula would overflow e^{2x}.
    if x.value() >= 20.0 {
        return x.scaled(0.0).add_scalar(1.0);
    }
    if x.value() <= -20.0 {
        return x.scaled(0.0).add_scalar(-1.0);
    }
    let e2 = x.scaled(2.0).exp();
    let inv = e2.add_scalar(1.0).recip().expect("e^{2x} + 1 >= 1");
    inv.scaled(-2.0).add_scalar(1.0)
}

/// Evaluates expressions with input slot `i` bound to `inputs[i]`, sharing
/// subgraph results across the whole list.
pub fn eval_with_inputs(exprs: &[Expr], inputs: &[Taylor]) -> Result<Vec<Taylor>> {
    let leaf = |i: usize| -> Result<Taylor> {
        inputs
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Config(format!("expression reads slot {i} but only {} inputs were bound", inputs.len())))
    };
    let mut ctx = EvalCtx::new(&leaf);
    exprs.iter().map(|e| ctx.eval(e)).collect()
}

/// Constants evaluate as order-MAX expansions; when every leaf is a constant
/// the minimum rule never engages, so evaluation at plain numbers works too.
pub fn eval_scalar(e: &Expr, point: &[f64]) -> Result<f64> {
    let inputs: Vec<Taylor> = point.iter().map(|&x| Taylor::constant(x, 0)).collect();
    Ok(eval_with_inputs(std::slice::from_ref(e), &inputs)?[0].value())
}

impl std::ops::Add for &Expr {
    type Output = Expr;
    fn add(self, rhs: &Expr) -> Expr {
        node(Kind::Add(self.clone(), rhs.clone()))
    }
}

impl std::ops::Sub for &Expr {
    type Output = Expr;
    fn sub(self, rhs: &Expr) -> Expr {
        node(Kind::Sub(self.clone(), rhs.clone()))
    }
}

impl std::ops::Mul for &Expr {
    type Output = Expr;
    fn mul(self, rhs: &Expr) -> Expr {
        node(Kind::Mul(self.clone(), rhs.clone()))
    }
}

impl std::ops::Div for &Expr {
    type Output = Expr;
    fn div(self, rhs: &Expr) -> Expr {
        node(Kind::Div(self.clone(), rhs.clone()))
    }
}

impl std::ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        node(Kind::Neg(self.clone()))
    }
}

impl Expr {
    /// Serializes to the JSON s-expression form.
    pub fn to_json(&self) -> Value {
        match &self.0.kind {
            Kind::Const(c) => serde_json::json!(c),
            Kind::Var(i) => serde_json::json!(["var", i]),
            Kind::Add(a, b) => serde_json::json!(["+", a.to_json(), b.to_json()]),
            Kind::Sub(a, b) => serde_json::json!(["-", a.to_json(), b.to_json()]),
            Kind::Mul(a, b) => serde_json::json!(["*", a.to_json(), b.to_json()]),
            Kind::Div(a, b) => serde_json::json!(["/", a.to_json(), b.to_json()]),
            Kind::Neg(a) => serde_json::json!(["neg", a.to_json()]),
            Kind::Pow(a, n) => serde_json::json!(["pow", a.to_json(), n]),
            Kind::Exp(a) => serde_json::json!(["exp", a.to_json()]),
            Kind::Ln(a) => serde_json::json!(["ln", a.to_json()]),
            Kind::Sin(a) => serde_json::json!(["sin", a.to_json()]),
            Kind::Cos(a) => serde_json::json!(["cos", a.to_json()]),
            Kind::Sqrt(a) => serde_json::json!(["sqrt", a.to_json()]),
            Kind::Tanh(a) => serde_json::json!(["tanh", a.to_json()]),
            Kind::Psi(r, a) => serde_json::json!(["psi", r, a.to_json()]),
            Kind::Phi(r, a) => serde_json::json!(["phi", r, a.to_json()]),
        }
    }

    /// Parses the JSON s-expression form. `+` and `*` accept more than two
    /// operands and fold left.
    pub fn from_json(v: &Value) -> Result<Expr> {
        let bad = |msg: String| Error::Config(format!("bad expression: {msg}"));
        match v {
            Value::Number(n) => {
                Ok(Expr::constant(n.as_f64().ok_or_else(|| bad(format!("number {n} out of f64 range")))?))
            }
            Value::Array(items) => {
                let head = items
                    .first()
                    .and_then(|h| h.as_str())
                    .ok_or_else(|| bad("operator array must start with a string".into()))?;
                let args = &items[1..];
                let unary = |args: &[Value]| -> Result<Expr> {
                    if args.len() != 1 {
                        return Err(bad(format!("{head} takes one argument")));
                    }
                    Expr::from_json(&args[0])
                };
                let fold = |args: &[Value], f: fn(&Expr, &Expr) -> Expr| -> Result<Expr> {
                    if args.len() < 2 {
                        return Err(bad(format!("{head} takes at least two arguments")));
                    }
                    let mut acc = Expr::from_json(&args[0])?;
                    for a in &args[1..] {
                        acc = f(&acc, &Expr::from_json(a)?);
                    }
                    Ok(acc)
                };
                match head {
                    "var" => {
                        if args.len() != 1 {
                            return Err(bad("var takes one index".into()));
                        }
                        let i = args[0]
                            .as_u64()
                            .ok_or_else(|| bad("var index must be a nonnegative integer".into()))?;
                        Ok(Expr::var(i as usize))
                    }
                    "+" => fold(args, |a, b| a + b),
                    "-" => {
                        if args.len() != 2 {
                            return Err(bad("- takes two arguments".into()));
                        }
                        Ok(&Expr::from_json(&args[0])? - &Expr::from_json(&args[1])?)
                    }
                    "*" => fold(args, |a, b| a * b),
                    "/" => {
                        if args.len() != 2 {
                            return Err(bad("/ takes two arguments".into()));
                        }
                        Ok(&Expr::from_json(&args[0])? / &Expr::from_json(&args[1])?)
                    }
                    "neg" => Ok(-&unary(args)?),
                    "pow" => {
                        if args.len() != 2 {
                            return Err(bad("pow takes base and integer exponent".into()));
                        }
                        let n = args[1]
                            .as_i64()
                            .ok_or_else(|| bad("pow exponent must be an integer".into()))?;
                        Ok(Expr::from_json(&args[0])?.pow(n as i32))
                    }
                    "exp" => Ok(unary(args)?.exp()),
                    "ln" => Ok(unary(args)?.ln()),
                    "sin" => Ok(unary(args)?.sin()),
                    "cos" => Ok(unary(args)?.cos()),
                    "sqrt" => Ok(unary(args)?.sqrt()),
                    "tanh" => Ok(unary(args)?.tanh()),
                    "psi" | "phi" => {
                        if args.len() != 2 {
                            return Err(bad(format!("{head} takes radius and argument")));
                        }
                        let r = args[0]
                            .as_f64()
                            .filter(|r| *r > 0.0)
                            .ok_or_else(|| bad(format!("{head} radius must be positive")))?;
                        let sub = Expr::from_json(&args[1])?;
                        Ok(if head == "psi" { sub.psi(r) } else { sub.phi(r) })
                    }
                    other => Err(bad(format!("unknown operator {other:?}"))),
                }
            }
            other => Err(bad(format!("expected number or array, got {other}"))),
        }
    }
}

impl serde::Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for Expr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        Expr::from_json(&v).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn var_inputs(point: &[f64], order: usize) -> Vec<Taylor> {
        point.iter().enumerate().map(|(i, &x)| Taylor::var(i as u32, x, order)).collect()
    }

    #[test]
    fn arithmetic_and_derivatives() {
        let x = Expr::var(0);
        let y = Expr::var(1);
        let f = &(&x * &x) + &(&y * &Expr::constant(3.0));
        let t = eval_with_inputs(&[f], &var_inputs(&[2.0, 5.0], 2)).unwrap().remove(0);
        assert_eq!(t.value(), 19.0);
        assert_eq!(t.partial_deriv(&[0]), 4.0);
        assert_eq!(t.partial_deriv(&[1]), 3.0);
        assert_eq!(t.partial_deriv(&[0, 0]), 2.0);
    }

    #[test]
    fn shared_subgraph_evaluates_once() {
        // Building a deep chain of shared nodes stays linear in depth.
        let mut f = Expr::var(0);
        for _ in 0..200 {
            f = &(&f * &f).psi(1e12) + &Expr::constant(0.125);
        }
        let t = eval_with_inputs(&[f], &var_inputs(&[0.2, 0.0], 1)).unwrap().remove(0);
        assert!(t.value().is_finite());
    }

    #[test]
    fn division_by_zero_reports_node() {
        let f = &Expr::constant(1.0) / &Expr::var(0);
        let err = eval_with_inputs(&[f], &var_inputs(&[0.0], 1)).unwrap_err();
        match err {
            Error::Eval { op, .. } => assert_eq!(op, "div"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn json_roundtrip() {
        let x = Expr::var(0);
        let y = Expr::var(1);
        let f = &(&x.sin() * &y.exp()).psi(2.0) / &(&x + &Expr::constant(4.0));
        let json = f.to_json();
        let g = Expr::from_json(&json).unwrap();
        let p = [0.3, -0.7];
        let a = eval_with_inputs(&[f], &var_inputs(&p, 3)).unwrap().remove(0);
        let b = eval_with_inputs(&[g], &var_inputs(&p, 3)).unwrap().remove(0);
        assert_eq!(a.coeffs(), b.coeffs());
    }

    #[test]
    fn json_nary_and_errors() {
        let v: Value = serde_json::from_str(r#"["+", 1.0, 2.0, ["var", 0]]"#).unwrap();
        let e = Expr::from_json(&v).unwrap();
        assert_eq!(eval_scalar(&e, &[4.0]).unwrap(), 7.0);
        for bad in [r#"["frob", 1]"#, r#"["var", -1]"#, r#"["psi", -1.0, 0.5]"#, r#""x""#] {
            let v: Value = serde_json::from_str(bad).unwrap();
            assert!(Expr::from_json(&v).is_err(), "{bad}");
        }
    }

    #[test]
    fn tanh_matches_reference() {
        for &x in &[-25.0, -3.0, -0.4, 0.0, 1.7, 25.0] {
            let f = Expr::var(0).tanh();
            let t = eval_with_inputs(&[f], &var_inputs(&[x], 2)).unwrap().remove(0);
            assert_relative_eq!(t.value(), x.tanh(), epsilon = 1e-12);
            let sech2 = 1.0 - x.tanh() * x.tanh();
            assert_relative_eq!(t.partial_deriv(&[0]), sech2, epsilon = 1e-10, max_relative = 1e-8);
        }
    }

    #[test]
    fn unbound_slot_is_config_error() {
        let f = Expr::var(3);
        assert!(matches!(eval_with_inputs(&[f], &var_inputs(&[1.0], 1)), Err(Error::Config(_))));
    }
}
