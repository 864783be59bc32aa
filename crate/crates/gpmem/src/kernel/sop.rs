//! Sum-of-products normalization, rewrite-rule simplification, and the
//! canonical symbolic structure extracted from a kernel expression.
//!
//! The pipeline is: distribute products over sums, apply the rewrite rules
//! (SE x SE folds into one SE, stationary x WN collapses to WN, LIN + LIN
//! merges, CONST factors are absorbed into a sibling's scale), then erase
//! parameters and sort everything canonically.

use serde::{Deserialize, Serialize};

use super::{eval_kernel, BaseKernelKind, HyperParams, KernelExpr};
use crate::error::Result;
use crate::prior::PriorSpec;

/// One base-kernel leaf with its parameter names.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseLeaf {
    pub kind: BaseKernelKind,
    pub params: Vec<String>,
}

impl BaseLeaf {
    fn to_expr(&self) -> KernelExpr {
        KernelExpr::Base {
            kind: self.kind,
            params: self.params.clone(),
        }
    }
}

/// A product of base leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductOfBases {
    pub factors: Vec<BaseLeaf>,
}

/// A sum of products of base leaves; parameters retained.
#[derive(Debug, Clone, PartialEq)]
pub struct SumOfProducts {
    pub terms: Vec<ProductOfBases>,
}

impl SumOfProducts {
    pub fn to_expr(&self) -> KernelExpr {
        let term_exprs: Vec<KernelExpr> = self
            .terms
            .iter()
            .map(|t| {
                let mut it = t.factors.iter();
                let first = it.next().expect("term has at least one factor").to_expr();
                it.fold(first, |acc, f| {
                    KernelExpr::Product(Box::new(acc), Box::new(f.to_expr()))
                })
            })
            .collect();
        let mut it = term_exprs.into_iter();
        let first = it.next().expect("sum has at least one term");
        it.fold(first, |acc, t| KernelExpr::Sum(Box::new(acc), Box::new(t)))
    }

    pub fn eval(&self, params: &HyperParams, x: f64, x2: f64) -> Result<f64> {
        eval_kernel(&self.to_expr(), params, x, x2)
    }
}

/// Fully distribute Product over Sum, producing a flat sum of products.
pub fn parse_to_sum_of_products(expr: &KernelExpr) -> SumOfProducts {
    match expr {
        KernelExpr::Base { kind, params } => SumOfProducts {
            terms: vec![ProductOfBases {
                factors: vec![BaseLeaf {
                    kind: *kind,
                    params: params.clone(),
                }],
            }],
        },
        KernelExpr::Sum(a, b) => {
            let mut left = parse_to_sum_of_products(a);
            let right = parse_to_sum_of_products(b);
            left.terms.extend(right.terms);
            left
        }
        KernelExpr::Product(a, b) => {
            let left = parse_to_sum_of_products(a);
            let right = parse_to_sum_of_products(b);
            let mut terms = Vec::with_capacity(left.terms.len() * right.terms.len());
            for lt in &left.terms {
                for rt in &right.terms {
                    let mut factors = lt.factors.clone();
                    factors.extend(rt.factors.clone());
                    terms.push(ProductOfBases { factors });
                }
            }
            SumOfProducts { terms }
        }
    }
}

/// Allocates fresh parameter names for folded values in the derived table.
struct Folder {
    derived: HyperParams,
    counter: usize,
}

impl Folder {
    fn fresh(&mut self, value: f64) -> String {
        let name = format!("_fold{}", self.counter);
        self.counter += 1;
        self.derived
            .insert(&name, value, "derived", PriorSpec::gamma(1.0, 1.0));
        name
    }

    fn value(&self, name: &str) -> f64 {
        self.derived.get(name).expect("folded param resolves")
    }
}

/// WN absorbs these under multiplication (stationary kinds; the delta
/// annihilates everything off-diagonal and they evaluate to sigma^2 on it).
fn wn_absorbable(kind: BaseKernelKind) -> bool {
    matches!(
        kind,
        BaseKernelKind::Se | BaseKernelKind::Per | BaseKernelKind::Const | BaseKernelKind::Wn
    )
}

fn simplify_term(term: &mut ProductOfBases, folder: &mut Folder) -> bool {
    // CONST absorption: scale a sibling factor and drop the constant.
    if term.factors.len() > 1 {
        if let Some(ci) = term
            .factors
            .iter()
            .position(|f| f.kind == BaseKernelKind::Const)
        {
            let c_sigma = folder.value(&term.factors[ci].params[0]);
            let other = if ci == 0 { 1 } else { 0 };
            let scaled = folder.value(&term.factors[other].params[0]) * c_sigma;
            let name = folder.fresh(scaled);
            term.factors[other].params[0] = name;
            term.factors.remove(ci);
            return true;
        }
    }
    // Stationary x WN collapses to WN with multiplied scales.
    if let Some(wi) = term.factors.iter().position(|f| f.kind == BaseKernelKind::Wn) {
        if let Some(oi) = term
            .factors
            .iter()
            .enumerate()
            .position(|(i, f)| i != wi && wn_absorbable(f.kind))
        {
            let merged = folder.value(&term.factors[wi].params[0])
                * folder.value(&term.factors[oi].params[0]);
            let name = folder.fresh(merged);
            let keep = wi.min(oi);
            let drop = wi.max(oi);
            term.factors[keep] = BaseLeaf {
                kind: BaseKernelKind::Wn,
                params: vec![name],
            };
            term.factors.remove(drop);
            return true;
        }
    }
    // SE x SE folds into a single SE: scales multiply, inverse square
    // lengthscales add.
    let se_indices: Vec<usize> = term
        .factors
        .iter()
        .enumerate()
        .filter(|(_, f)| f.kind == BaseKernelKind::Se)
        .map(|(i, _)| i)
        .collect();
    if se_indices.len() >= 2 {
        let (i, j) = (se_indices[0], se_indices[1]);
        let sa = folder.value(&term.factors[i].params[0]);
        let la = folder.value(&term.factors[i].params[1]);
        let sb = folder.value(&term.factors[j].params[0]);
        let lb = folder.value(&term.factors[j].params[1]);
        let lc = (1.0 / (1.0 / (la * la) + 1.0 / (lb * lb))).sqrt();
        let sigma_name = folder.fresh(sa * sb);
        let ell_name = folder.fresh(lc);
        term.factors[i] = BaseLeaf {
            kind: BaseKernelKind::Se,
            params: vec![sigma_name, ell_name],
        };
        term.factors.remove(j);
        return true;
    }
    false
}

fn is_pure_lin(term: &ProductOfBases) -> bool {
    term.factors.len() == 1 && term.factors[0].kind == BaseKernelKind::Lin
}

/// Apply the four rewrite rules to fixpoint. Folded parameter values live in
/// a fresh derived table (which also carries over the source entries, so the
/// result evaluates against the returned table alone).
pub fn simplify(sop: &SumOfProducts, params: &HyperParams) -> (SumOfProducts, HyperParams) {
    let mut folder = Folder {
        derived: params.clone(),
        counter: 0,
    };
    let mut terms = sop.terms.clone();
    loop {
        let mut changed = false;
        for term in &mut terms {
            while simplify_term(term, &mut folder) {
                changed = true;
            }
        }
        // LIN + LIN merges: variances add.
        let lin_positions: Vec<usize> = terms
            .iter()
            .enumerate()
            .filter(|(_, t)| is_pure_lin(t))
            .map(|(i, _)| i)
            .collect();
        if lin_positions.len() >= 2 {
            let (i, j) = (lin_positions[0], lin_positions[1]);
            let sa = folder.value(&terms[i].factors[0].params[0]);
            let sb = folder.value(&terms[j].factors[0].params[0]);
            let name = folder.fresh((sa * sa + sb * sb).sqrt());
            terms[i].factors[0].params[0] = name;
            terms.remove(j);
            changed = true;
        }
        if !changed {
            break;
        }
    }
    (SumOfProducts { terms }, folder.derived)
}

/// A product term with parameters erased; factors kept canonically sorted.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProductTerm {
    factors: Vec<BaseKernelKind>,
}

impl ProductTerm {
    pub fn new(mut factors: Vec<BaseKernelKind>) -> Self {
        factors.sort();
        ProductTerm { factors }
    }

    pub fn factors(&self) -> &[BaseKernelKind] {
        &self.factors
    }
}

impl std::fmt::Display for ProductTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<&str> = self.factors.iter().map(|k| k.symbol()).collect();
        f.write_str(&parts.join("*"))
    }
}

/// Canonical symbolic sum of products: the random variable the structure
/// posterior is tabulated over.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StructExpr {
    terms: Vec<ProductTerm>,
}

impl StructExpr {
    pub fn new(mut terms: Vec<ProductTerm>) -> Self {
        terms.sort();
        StructExpr { terms }
    }

    pub fn terms(&self) -> &[ProductTerm] {
        &self.terms
    }

    /// Parse the serialized form, e.g. `LIN + SE*PER + WN`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for (ti, term_text) in text.split('+').enumerate() {
            let mut kinds = Vec::new();
            for factor in term_text.split('*') {
                let sym = factor.trim();
                let kind = match sym.to_ascii_uppercase().as_str() {
                    "SE" => BaseKernelKind::Se,
                    "LIN" => BaseKernelKind::Lin,
                    "PER" => BaseKernelKind::Per,
                    "WN" => BaseKernelKind::Wn,
                    "CONST" | "C" => BaseKernelKind::Const,
                    "RQ" => BaseKernelKind::Rq,
                    other => {
                        return Err(crate::error::Error::Parse {
                            position: ti,
                            message: format!("unknown kernel symbol `{other}`"),
                        })
                    }
                };
                kinds.push(kind);
            }
            terms.push(ProductTerm::new(kinds));
        }
        Ok(StructExpr::new(terms))
    }
}

impl std::fmt::Display for StructExpr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.terms.iter().map(|t| t.to_string()).collect();
        f.write_str(&parts.join(" + "))
    }
}

/// Canonical symbolic form of an expression: simplify the sum of products,
/// erase parameters, sort terms and factors.
pub fn struct_of(expr: &KernelExpr, params: &HyperParams) -> StructExpr {
    let sop = parse_to_sum_of_products(expr);
    let (simplified, _) = simplify(&sop, params);
    StructExpr::new(
        simplified
            .terms
            .iter()
            .map(|t| ProductTerm::new(t.factors.iter().map(|f| f.kind).collect()))
            .collect(),
    )
}
