//! Covariance function algebra: base kernels, sum/product composition,
//! evaluation, gram matrices, and analytic parameter gradients.

mod parse;
mod sop;

pub use parse::{format_kernel, parse_kernel};
pub use sop::{parse_to_sum_of_products, simplify, struct_of, ProductTerm, StructExpr, SumOfProducts};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::prior::PriorSpec;

/// The six base covariance kinds. Ordering defines the canonical sort used
/// by symbolic structures (CONST < LIN < PER < SE < WN < RQ).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BaseKernelKind {
    Const,
    Lin,
    Per,
    Se,
    Wn,
    Rq,
}

impl BaseKernelKind {
    /// Number of hyperparameters the kind expects, in declaration order.
    /// SE: (sigma, ell); LIN: (sigma); PER: (sigma, p, ell); WN: (sigma);
    /// CONST: (sigma); RQ: (sigma, alpha, ell).
    pub fn arity(self) -> usize {
        match self {
            BaseKernelKind::Se => 2,
            BaseKernelKind::Lin => 1,
            BaseKernelKind::Per => 3,
            BaseKernelKind::Wn => 1,
            BaseKernelKind::Const => 1,
            BaseKernelKind::Rq => 3,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BaseKernelKind::Se => "SE",
            BaseKernelKind::Lin => "LIN",
            BaseKernelKind::Per => "PER",
            BaseKernelKind::Wn => "WN",
            BaseKernelKind::Const => "CONST",
            BaseKernelKind::Rq => "RQ",
        }
    }

    /// Stationary kinds depend only on the lag x - x'.
    pub fn is_stationary(self) -> bool {
        !matches!(self, BaseKernelKind::Lin)
    }
}

impl std::fmt::Display for BaseKernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Expression tree over base kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelExpr {
    Base {
        kind: BaseKernelKind,
        params: Vec<String>,
    },
    Sum(Box<KernelExpr>, Box<KernelExpr>),
    Product(Box<KernelExpr>, Box<KernelExpr>),
}

impl KernelExpr {
    pub fn base(kind: BaseKernelKind, params: &[&str]) -> Self {
        assert_eq!(
            params.len(),
            kind.arity(),
            "{} expects {} parameters",
            kind.symbol(),
            kind.arity()
        );
        KernelExpr::Base {
            kind,
            params: params.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// All parameter names referenced by the expression, in traversal order.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_params(&mut out);
        out
    }

    fn collect_params(&self, out: &mut Vec<String>) {
        match self {
            KernelExpr::Base { params, .. } => {
                for p in params {
                    if !out.contains(p) {
                        out.push(p.clone());
                    }
                }
            }
            KernelExpr::Sum(a, b) | KernelExpr::Product(a, b) => {
                a.collect_params(out);
                b.collect_params(out);
            }
        }
    }
}

/// Sum of two kernels (global interaction).
pub fn add_funcs(a: KernelExpr, b: KernelExpr) -> KernelExpr {
    KernelExpr::Sum(Box::new(a), Box::new(b))
}

/// Product of two kernels (local interaction).
pub fn mult_funcs(a: KernelExpr, b: KernelExpr) -> KernelExpr {
    KernelExpr::Product(Box::new(a), Box::new(b))
}

/// One named random choice in the hyperparameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub value: f64,
    pub scope: String,
    pub prior: PriorSpec,
}

/// Named positive reals with scope tags and prior specs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HyperParams {
    entries: IndexMap<String, ParamEntry>,
}

impl HyperParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: f64, scope: &str, prior: PriorSpec) {
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                scope: scope.to_string(),
                prior,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        self.entries
            .get(name)
            .map(|e| e.value)
            .ok_or_else(|| Error::UnresolvedParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.value = value)
            .ok_or_else(|| Error::UnresolvedParam(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnresolvedParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_in_scope(&self, scope: &str) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.scope == scope)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn lookup_fn(&self) -> impl Fn(&str) -> Option<f64> + '_ {
        move |name| self.entries.get(name).map(|e| e.value)
    }

    /// Sum of log prior densities of every entry given its (current) parents.
    pub fn log_prior(&self) -> Result<f64> {
        let lookup = self.lookup_fn();
        let mut total = 0.0;
        for entry in self.entries.values() {
            total += entry.prior.log_density(entry.value, &lookup)?;
        }
        Ok(total)
    }

    /// Verify that every parameter the expression references is present.
    pub fn resolves(&self, expr: &KernelExpr) -> Result<()> {
        for name in expr.param_names() {
            self.get(&name)?;
        }
        Ok(())
    }
}

fn base_value(kind: BaseKernelKind, p: &[f64], x: f64, x2: f64) -> f64 {
    let d = x - x2;
    match kind {
        BaseKernelKind::Se => {
            let (sigma, ell) = (p[0], p[1]);
            sigma * sigma * (-d * d / (2.0 * ell * ell)).exp()
        }
        BaseKernelKind::Lin => p[0] * p[0] * x * x2,
        BaseKernelKind::Per => {
            let (sigma, period, ell) = (p[0], p[1], p[2]);
            let s = (std::f64::consts::PI * d / period).sin();
            sigma * sigma * (-2.0 * s * s / (ell * ell)).exp()
        }
        // Exact bitwise input equality: memo-table inputs are replay values.
        BaseKernelKind::Wn => {
            if x.to_bits() == x2.to_bits() {
                p[0] * p[0]
            } else {
                0.0
            }
        }
        BaseKernelKind::Const => p[0] * p[0],
        BaseKernelKind::Rq => {
            let (sigma, alpha, ell) = (p[0], p[1], p[2]);
            sigma * sigma * (1.0 + d * d / (2.0 * alpha * ell * ell)).powf(-alpha)
        }
    }
}

/// Partial derivative of a base kernel with respect to its `idx`-th parameter.
fn base_partial(kind: BaseKernelKind, p: &[f64], idx: usize, x: f64, x2: f64) -> f64 {
    let d = x - x2;
    match kind {
        BaseKernelKind::Se => {
            let (sigma, ell) = (p[0], p[1]);
            let e = (-d * d / (2.0 * ell * ell)).exp();
            match idx {
                0 => 2.0 * sigma * e,
                1 => sigma * sigma * e * d * d / (ell * ell * ell),
                _ => unreachable!(),
            }
        }
        BaseKernelKind::Lin => 2.0 * p[0] * x * x2,
        BaseKernelKind::Per => {
            let (sigma, period, ell) = (p[0], p[1], p[2]);
            let u = std::f64::consts::PI * d / period;
            let e = (-2.0 * u.sin() * u.sin() / (ell * ell)).exp();
            match idx {
                0 => 2.0 * sigma * e,
                1 => {
                    sigma * sigma
                        * e
                        * (2.0 * std::f64::consts::PI * d * (2.0 * u).sin())
                        / (period * period * ell * ell)
                }
                2 => sigma * sigma * e * 4.0 * u.sin() * u.sin() / (ell * ell * ell),
                _ => unreachable!(),
            }
        }
        BaseKernelKind::Wn => {
            if x.to_bits() == x2.to_bits() {
                2.0 * p[0]
            } else {
                0.0
            }
        }
        BaseKernelKind::Const => 2.0 * p[0],
        BaseKernelKind::Rq => {
            let (sigma, alpha, ell) = (p[0], p[1], p[2]);
            let b = 1.0 + d * d / (2.0 * alpha * ell * ell);
            match idx {
                0 => 2.0 * sigma * b.powf(-alpha),
                1 => {
                    sigma * sigma
                        * b.powf(-alpha)
                        * (-b.ln() + d * d / (2.0 * alpha * ell * ell * b))
                }
                2 => sigma * sigma * b.powf(-alpha - 1.0) * d * d / (ell * ell * ell),
                _ => unreachable!(),
            }
        }
    }
}

fn resolve_params(params: &[String], table: &HyperParams) -> Result<Vec<f64>> {
    params.iter().map(|n| table.get(n)).collect()
}

/// Evaluate k(x, x2 | theta) by recursive descent over the expression tree.
pub fn eval_kernel(expr: &KernelExpr, params: &HyperParams, x: f64, x2: f64) -> Result<f64> {
    let v = eval_rec(expr, params, x, x2)?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: format!("kernel evaluation at ({x}, {x2})"),
        });
    }
    Ok(v)
}

fn eval_rec(expr: &KernelExpr, params: &HyperParams, x: f64, x2: f64) -> Result<f64> {
    match expr {
        KernelExpr::Base { kind, params: names } => {
            let p = resolve_params(names, params)?;
            Ok(base_value(*kind, &p, x, x2))
        }
        KernelExpr::Sum(a, b) => Ok(eval_rec(a, params, x, x2)? + eval_rec(b, params, x, x2)?),
        KernelExpr::Product(a, b) => Ok(eval_rec(a, params, x, x2)? * eval_rec(b, params, x, x2)?),
    }
}

/// d k(x, x2 | theta) / d theta_wrt, including parameters shared across leaves.
pub fn eval_kernel_grad(
    expr: &KernelExpr,
    params: &HyperParams,
    x: f64,
    x2: f64,
    wrt: &str,
) -> Result<f64> {
    match expr {
        KernelExpr::Base { kind, params: names } => {
            let p = resolve_params(names, params)?;
            let mut g = 0.0;
            for (idx, name) in names.iter().enumerate() {
                if name == wrt {
                    g += base_partial(*kind, &p, idx, x, x2);
                }
            }
            Ok(g)
        }
        KernelExpr::Sum(a, b) => {
            Ok(eval_kernel_grad(a, params, x, x2, wrt)? + eval_kernel_grad(b, params, x, x2, wrt)?)
        }
        KernelExpr::Product(a, b) => {
            let ka = eval_rec(a, params, x, x2)?;
            let kb = eval_rec(b, params, x, x2)?;
            let ga = eval_kernel_grad(a, params, x, x2, wrt)?;
            let gb = eval_kernel_grad(b, params, x, x2, wrt)?;
            Ok(ga * kb + ka * gb)
        }
    }
}

/// Gram matrix with entries k(xs[i], xs2[j]). When both input vectors are the
/// same points the result is symmetrized exactly before any factorization.
pub fn gram_matrix(
    expr: &KernelExpr,
    params: &HyperParams,
    xs: &[f64],
    xs2: &[f64],
) -> Result<Matrix> {
    assert!(!xs.is_empty() && !xs2.is_empty(), "inputs must be non-empty");
    let mut m = Matrix::zeros(xs.len(), xs2.len());
    for (i, &a) in xs.iter().enumerate() {
        for (j, &b) in xs2.iter().enumerate() {
            m[(i, j)] = eval_kernel(expr, params, a, b)?;
        }
    }
    if xs.len() == xs2.len() && xs.iter().zip(xs2).all(|(a, b)| a.to_bits() == b.to_bits()) {
        m.symmetrize();
    }
    Ok(m)
}

/// Gram matrix of partial derivatives d k / d theta_wrt on a square input set.
pub fn gram_matrix_grad(
    expr: &KernelExpr,
    params: &HyperParams,
    xs: &[f64],
    wrt: &str,
) -> Result<Matrix> {
    let mut m = Matrix::zeros(xs.len(), xs.len());
    for (i, &a) in xs.iter().enumerate() {
        for (j, &b) in xs.iter().enumerate() {
            m[(i, j)] = eval_kernel_grad(expr, params, a, b, wrt)?;
        }
    }
    m.symmetrize();
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn se_params(sigma: f64, ell: f64) -> HyperParams {
        let mut p = HyperParams::new();
        p.insert("sf", sigma, "hyper", PriorSpec::gamma(5.0, 1.0));
        p.insert("l", ell, "hyper", PriorSpec::gamma(5.0, 1.0));
        p
    }

    #[test]
    fn lin_vanishes_at_origin() {
        let mut p = HyperParams::new();
        p.insert("s1", 1.0, "hyper", PriorSpec::gamma(5.0, 1.0));
        let k = KernelExpr::base(BaseKernelKind::Lin, &["s1"]);
        assert_eq!(eval_kernel(&k, &p, 0.0, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn wn_is_kronecker_delta() {
        let mut p = HyperParams::new();
        p.insert("s", 2.0, "hyper", PriorSpec::gamma(5.0, 1.0));
        let k = KernelExpr::base(BaseKernelKind::Wn, &["s"]);
        assert_eq!(eval_kernel(&k, &p, 1.3, 1.3).unwrap(), 4.0);
        assert_eq!(eval_kernel(&k, &p, 1.3, 1.4).unwrap(), 0.0);
    }

    #[test]
    fn se_matches_direct_formula() {
        // Parameters from the seven-parameter composite fit: sigma=0.4, ell=6.3.
        let p = se_params(0.4, 6.3);
        let k = KernelExpr::base(BaseKernelKind::Se, &["sf", "l"]);
        let direct = 0.4f64.powi(2) * (-(0.0f64 - 6.3).powi(2) / (2.0 * 6.3 * 6.3)).exp();
        let got = eval_kernel(&k, &p, 0.0, 6.3).unwrap();
        assert!((got - direct).abs() < 1e-15);
    }

    #[test]
    fn const_gram_all_nine() {
        let mut p = HyperParams::new();
        p.insert("c", 3.0, "hyper", PriorSpec::gamma(5.0, 1.0));
        let k = KernelExpr::base(BaseKernelKind::Const, &["c"]);
        let g = gram_matrix(&k, &p, &[0.0, 1.0], &[0.0, 1.0]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(g[(i, j)], 9.0);
            }
        }
    }

    #[test]
    fn singleton_gram_matches_eval() {
        let p = se_params(1.2, 0.7);
        let k = KernelExpr::base(BaseKernelKind::Se, &["sf", "l"]);
        let g = gram_matrix(&k, &p, &[0.3], &[1.8]).unwrap();
        assert_eq!(g[(0, 0)], eval_kernel(&k, &p, 0.3, 1.8).unwrap());
    }

    #[test]
    fn se_gram_matches_scalar_oracle() {
        let p = se_params(1.0, 1.0);
        let k = KernelExpr::base(BaseKernelKind::Se, &["sf", "l"]);
        let xs = [0.0, 1.0, 2.0];
        let g = gram_matrix(&k, &p, &xs, &xs).unwrap();
        for (i, &a) in xs.iter().enumerate() {
            for (j, &b) in xs.iter().enumerate() {
                let direct = (-(a - b) * (a - b) / 2.0).exp();
                assert!((g[(i, j)] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sum_and_product_distribute() {
        let mut p = HyperParams::new();
        p.insert("s1", 1.4, "hyper", PriorSpec::gamma(5.0, 1.0));
        p.insert("s2", 0.8, "hyper", PriorSpec::gamma(5.0, 1.0));
        p.insert("per_p", 2.3, "hyper", PriorSpec::gamma(5.0, 1.0));
        p.insert("per_l", 1.1, "hyper", PriorSpec::gamma(5.0, 1.0));
        let lin = KernelExpr::base(BaseKernelKind::Lin, &["s1"]);
        let per = KernelExpr::base(BaseKernelKind::Per, &["s2", "per_p", "per_l"]);
        let (x, x2) = (0.4, -1.9);
        let kl = eval_kernel(&lin, &p, x, x2).unwrap();
        let kp = eval_kernel(&per, &p, x, x2).unwrap();
        let sum = add_funcs(lin.clone(), per.clone());
        let prod = mult_funcs(lin, per);
        assert!((eval_kernel(&sum, &p, x, x2).unwrap() - (kl + kp)).abs() < 1e-14);
        assert!((eval_kernel(&prod, &p, x, x2).unwrap() - kl * kp).abs() < 1e-14);
    }

    #[test]
    fn addition_commutes_at_random_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut p = HyperParams::new();
        p.insert("s1", 1.0, "hyper", PriorSpec::gamma(5.0, 1.0));
        p.insert("sf", 0.5, "hyper", PriorSpec::gamma(5.0, 1.0));
        p.insert("l", 2.0, "hyper", PriorSpec::gamma(5.0, 1.0));
        let a = KernelExpr::base(BaseKernelKind::Lin, &["s1"]);
        let b = KernelExpr::base(BaseKernelKind::Se, &["sf", "l"]);
        let ab = add_funcs(a.clone(), b.clone());
        let ba = add_funcs(b, a);
        for _ in 0..100 {
            let x = rng.gen_range(-5.0..5.0);
            let x2 = rng.gen_range(-5.0..5.0);
            let va = eval_kernel(&ab, &p, x, x2).unwrap();
            let vb = eval_kernel(&ba, &p, x, x2).unwrap();
            assert!((va - vb).abs() < 1e-14);
        }
    }

    #[test]
    fn symmetry_of_all_base_kinds() {
        let mut p = HyperParams::new();
        for (i, name) in ["a", "b", "c", "d", "e", "f", "g"].iter().enumerate() {
            p.insert(name, 0.5 + i as f64 * 0.3, "hyper", PriorSpec::gamma(5.0, 1.0));
        }
        let kernels = vec![
            KernelExpr::base(BaseKernelKind::Se, &["a", "b"]),
            KernelExpr::base(BaseKernelKind::Lin, &["a"]),
            KernelExpr::base(BaseKernelKind::Per, &["a", "b", "c"]),
            KernelExpr::base(BaseKernelKind::Wn, &["a"]),
            KernelExpr::base(BaseKernelKind::Const, &["a"]),
            KernelExpr::base(BaseKernelKind::Rq, &["a", "b", "c"]),
        ];
        for k in kernels {
            for &(x, x2) in &[(0.0, 1.5), (-2.3, 0.7), (4.4, 4.4)] {
                let v1 = eval_kernel(&k, &p, x, x2).unwrap();
                let v2 = eval_kernel(&k, &p, x2, x).unwrap();
                assert!((v1 - v2).abs() < 1e-14, "{k:?} not symmetric");
            }
        }
    }

    #[test]
    fn unresolved_param_is_config_error() {
        let p = HyperParams::new();
        let k = KernelExpr::base(BaseKernelKind::Lin, &["missing"]);
        assert!(matches!(
            eval_kernel(&k, &p, 0.0, 1.0),
            Err(Error::UnresolvedParam(_))
        ));
    }

    #[test]
    fn analytic_partials_match_finite_differences() {
        let mut p = HyperParams::new();
        p.insert("s", 1.3, "hyper", PriorSpec::gamma(5.0, 1.0));
        p.insert("pp", 2.1, "hyper", PriorSpec::gamma(5.0, 1.0));
        p.insert("pl", 0.9, "hyper", PriorSpec::gamma(5.0, 1.0));
        p.insert("ra", 1.7, "hyper", PriorSpec::gamma(5.0, 1.0));
        p.insert("rl", 1.2, "hyper", PriorSpec::gamma(5.0, 1.0));
        let kernels = vec![
            KernelExpr::base(BaseKernelKind::Se, &["s", "pl"]),
            KernelExpr::base(BaseKernelKind::Per, &["s", "pp", "pl"]),
            KernelExpr::base(BaseKernelKind::Rq, &["s", "ra", "rl"]),
            KernelExpr::base(BaseKernelKind::Lin, &["s"]),
        ];
        let (x, x2) = (0.37, -1.12);
        for k in kernels {
            for name in k.param_names() {
                let g = eval_kernel_grad(&k, &p, x, x2, &name).unwrap();
                let v0 = p.get(&name).unwrap();
                let h = 1e-6 * v0;
                let mut pp = p.clone();
                pp.set(&name, v0 + h).unwrap();
                let up = eval_kernel(&k, &pp, x, x2).unwrap();
                pp.set(&name, v0 - h).unwrap();
                let dn = eval_kernel(&k, &pp, x, x2).unwrap();
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (g - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "{k:?} d/d{name}: analytic {g} vs fd {fd}"
                );
            }
        }
    }
}
