//! Structure discovery: a stochastic grammar over kernel compositions,
//! Metropolis–Hastings over the grammar choices, tabulation of the structure
//! posterior, and the Boolean query calculus over posterior samples.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gp::{log_likelihood, GPModel};
use crate::inference::{mh, MhStats};
use crate::kernel::{
    add_funcs, mult_funcs, struct_of, BaseKernelKind, HyperParams, KernelExpr, ProductTerm,
    StructExpr,
};
use crate::prior::PriorSpec;

/// The grammar's primitive kernel vocabulary, each with its wired
/// hyperparameter names, plus the WN parameter used for the empty-selection
/// fallback and the sum-vs-product operator probability.
#[derive(Debug, Clone)]
pub struct BaseKernelSet {
    pub entries: Vec<(BaseKernelKind, Vec<String>)>,
    pub fallback_wn_param: String,
    pub p_sum: f64,
}

impl BaseKernelSet {
    /// Default vocabulary [LIN, PER, SE, WN] with seven Gamma(5,1)
    /// hyperparameters t1..t7 in scope "hyper".
    pub fn default_with_params<R: Rng + ?Sized>(rng: &mut R) -> (Self, HyperParams) {
        let mut params = HyperParams::new();
        let prior = PriorSpec::gamma(5.0, 1.0);
        let lookup = |_: &str| None;
        for name in ["t1", "t2", "t3", "t4", "t5", "t6", "t7"] {
            let v = prior.sample(rng, &lookup).expect("gamma sample");
            params.insert(name, v, "hyper", prior.clone());
        }
        let set = BaseKernelSet {
            entries: vec![
                (BaseKernelKind::Lin, vec!["t1".into()]),
                (BaseKernelKind::Per, vec!["t2".into(), "t3".into(), "t4".into()]),
                (BaseKernelKind::Se, vec!["t5".into(), "t6".into()]),
                (BaseKernelKind::Wn, vec!["t7".into()]),
            ],
            fallback_wn_param: "t7".into(),
            p_sum: 0.5,
        };
        (set, params)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The grammar's random choices in fixed dimension: every inclusion bit, a
/// full permutation, and every operator bit are always present; composition
/// reads only the selected prefix, so excluded choices are merely unused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrammarState {
    pub include: Vec<bool>,
    pub perm: Vec<usize>,
    pub ops: Vec<bool>,
}

impl GrammarState {
    /// Compose the kernel expression this state denotes: selected kernels in
    /// permutation order, right-folded with Sum where an operator bit fires
    /// and Product otherwise. Empty selection falls back to WN.
    pub fn compose(&self, bk: &BaseKernelSet) -> KernelExpr {
        let selected: Vec<&(BaseKernelKind, Vec<String>)> = self
            .perm
            .iter()
            .filter(|&&i| self.include[i])
            .map(|&i| &bk.entries[i])
            .collect();
        if selected.is_empty() {
            return KernelExpr::Base {
                kind: BaseKernelKind::Wn,
                params: vec![bk.fallback_wn_param.clone()],
            };
        }
        let leaves: Vec<KernelExpr> = selected
            .iter()
            .map(|(kind, params)| KernelExpr::Base {
                kind: *kind,
                params: params.clone(),
            })
            .collect();
        let joins = leaves.len() - 1;
        let mut iter = leaves.into_iter().rev();
        let mut acc = iter.next().expect("non-empty");
        for (expr, &is_sum) in iter.zip(self.ops.iter().take(joins).rev()) {
            acc = if is_sum {
                add_funcs(expr, acc)
            } else {
                mult_funcs(expr, acc)
            };
        }
        acc
    }
}

/// Draw a grammar state from its prior: i.i.d. Bernoulli(1/2) inclusion,
/// uniform permutation, i.i.d. Bernoulli(p_sum) operators.
pub fn sample_grammar<R: Rng + ?Sized>(
    bk: &BaseKernelSet,
    rng: &mut R,
) -> (GrammarState, KernelExpr) {
    let m = bk.len();
    let include: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.5)).collect();
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(rng);
    let ops: Vec<bool> = (0..m.saturating_sub(1))
        .map(|_| rng.gen_bool(bk.p_sum))
        .collect();
    let state = GrammarState { include, perm, ops };
    let kernel = state.compose(bk);
    (state, kernel)
}

/// How grammar proposals are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrammarProposal {
    /// Resample one uniformly chosen site (an inclusion bit, the permutation,
    /// or an operator bit) from its prior.
    SingleSite,
    /// Resample the whole state from the prior.
    Independence,
}

fn grammar_log_lik(
    state: &GrammarState,
    bk: &BaseKernelSet,
    params: &HyperParams,
    xs: &[f64],
    ys: &[f64],
) -> Result<f64> {
    let kernel = state.compose(bk);
    let model = GPModel::new(kernel, params.clone())?;
    log_likelihood(&model, xs, ys)
}

/// `steps` MH transitions over the grammar choices with hyperparameters held
/// fixed. Prior proposals, so the acceptance ratio is the likelihood ratio;
/// numeric failures count as rejections.
pub fn grammar_mh<R: Rng + ?Sized>(
    state: &mut GrammarState,
    bk: &BaseKernelSet,
    params: &HyperParams,
    xs: &[f64],
    ys: &[f64],
    steps: usize,
    proposal: GrammarProposal,
    rng: &mut R,
) -> Result<MhStats> {
    if xs.is_empty() {
        return Err(Error::Data("memo table is empty".into()));
    }
    let m = bk.len();
    let mut stats = MhStats::default();
    let mut current_ll: Option<f64> = None;
    for _ in 0..steps {
        stats.proposed += 1;
        let old_ll = match current_ll {
            Some(v) => v,
            None => match grammar_log_lik(state, bk, params, xs, ys) {
                Ok(v) => {
                    current_ll = Some(v);
                    v
                }
                Err(_) => {
                    stats.numeric_failures += 1;
                    continue;
                }
            },
        };
        let mut proposed = state.clone();
        match proposal {
            GrammarProposal::SingleSite => {
                // Sites: m inclusion bits, the permutation, m-1 operator bits.
                let site = rng.gen_range(0..(m + 1 + proposed.ops.len()));
                if site < m {
                    proposed.include[site] = rng.gen_bool(0.5);
                } else if site == m {
                    proposed.perm.shuffle(rng);
                } else {
                    proposed.ops[site - m - 1] = rng.gen_bool(bk.p_sum);
                }
            }
            GrammarProposal::Independence => {
                proposed = sample_grammar(bk, rng).0;
            }
        }
        match grammar_log_lik(&proposed, bk, params, xs, ys) {
            Ok(new_ll) => {
                let log_a = new_ll - old_ll;
                if log_a >= 0.0 || rng.gen_range(0.0..1.0_f64).ln() < log_a {
                    *state = proposed;
                    current_ll = Some(new_ll);
                    stats.accepted += 1;
                }
            }
            Err(_) => stats.numeric_failures += 1,
        }
    }
    Ok(stats)
}

/// One recorded posterior draw over structures.
#[derive(Debug, Clone)]
pub struct PosteriorSample {
    pub rep: usize,
    pub structure: StructExpr,
    pub kernel: KernelExpr,
    pub log_lik: f64,
    pub theta: IndexMap<String, f64>,
}

#[derive(Debug, Clone, Default)]
pub struct PosteriorSampleSet {
    pub samples: Vec<PosteriorSample>,
}

impl PosteriorSampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Order-stable concatenation (multi-chain merge).
    pub fn merge(mut self, other: PosteriorSampleSet) -> PosteriorSampleSet {
        self.samples.extend(other.samples);
        self
    }

    /// Marginal probability of each distinct structure, with its mean
    /// log-likelihood over the samples carrying it.
    pub fn marginals(&self) -> Vec<(StructExpr, f64, f64)> {
        let mut acc: BTreeMap<StructExpr, (usize, f64)> = BTreeMap::new();
        for s in &self.samples {
            let e = acc.entry(s.structure.clone()).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += s.log_lik;
        }
        let t = self.samples.len() as f64;
        let mut out: Vec<(StructExpr, f64, f64)> = acc
            .into_iter()
            .map(|(k, (n, ll))| (k, n as f64 / t, ll / n as f64))
            .collect();
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        out
    }

    /// Line format: rep index, StructExpr text, log-likelihood, θ snapshot as
    /// JSON — tab separated.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let theta = serde_json::to_string(&s.theta).expect("theta serializes");
            out.push_str(&format!("{}\t{}\t{}\t{}\n", s.rep, s.structure, s.log_lik, theta));
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<PosteriorSampleSet> {
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.splitn(4, '\t').collect();
            if fields.len() != 4 {
                return Err(Error::Data(format!(
                    "line {}: expected 4 tab-separated fields",
                    lineno + 1
                )));
            }
            let rep = fields[0]
                .parse()
                .map_err(|_| Error::Data(format!("line {}: bad rep index", lineno + 1)))?;
            let structure = StructExpr::parse(fields[1])?;
            let log_lik = fields[2]
                .parse()
                .map_err(|_| Error::Data(format!("line {}: bad log-likelihood", lineno + 1)))?;
            let theta: IndexMap<String, f64> = serde_json::from_str(fields[3])
                .map_err(|_| Error::Data(format!("line {}: bad theta snapshot", lineno + 1)))?;
            samples.push(PosteriorSample {
                rep,
                structure,
                kernel: KernelExpr::Base {
                    kind: BaseKernelKind::Wn,
                    params: vec![],
                },
                log_lik,
                theta,
            });
        }
        Ok(PosteriorSampleSet { samples })
    }
}

/// Discovery configuration: the nested schedule repeat(outer, do(grammar
/// grammar_steps, hyper hyper_steps)) with a burn-in prefix discarded.
#[derive(Debug, Clone)]
pub struct DiscoveryConfig {
    pub outer: usize,
    pub grammar_steps: usize,
    pub hyper_steps: usize,
    pub burn_in_fraction: f64,
    pub proposal: GrammarProposal,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            outer: 200,
            grammar_steps: 1,
            hyper_steps: 2,
            burn_in_fraction: 0.25,
            proposal: GrammarProposal::SingleSite,
        }
    }
}

/// Run the full discovery schedule, recording one sample per outer repetition
/// after both inner kernels have run, then discarding the burn-in prefix.
pub fn run_structure_discovery<R: Rng + ?Sized>(
    xs: &[f64],
    ys: &[f64],
    bk: &BaseKernelSet,
    params: &mut HyperParams,
    config: &DiscoveryConfig,
    rng: &mut R,
) -> Result<PosteriorSampleSet> {
    if xs.is_empty() {
        return Err(Error::Data("memo table is empty".into()));
    }
    let (mut state, _) = sample_grammar(bk, rng);
    let mut samples = Vec::with_capacity(config.outer);
    for rep in 0..config.outer {
        grammar_mh(
            &mut state,
            bk,
            params,
            xs,
            ys,
            config.grammar_steps,
            config.proposal,
            rng,
        )?;
        let kernel = state.compose(bk);
        {
            let mut target = |p: &HyperParams| -> Result<f64> {
                let model = GPModel::new(kernel.clone(), p.clone())?;
                log_likelihood(&model, xs, ys)
            };
            mh(params, "hyper", config.hyper_steps, &mut target, rng)?;
        }
        let model = GPModel::new(kernel.clone(), params.clone())?;
        let log_lik = log_likelihood(&model, xs, ys).unwrap_or(f64::NEG_INFINITY);
        let theta: IndexMap<String, f64> = params
            .iter()
            .map(|(name, e)| (name.to_string(), e.value))
            .collect();
        samples.push(PosteriorSample {
            rep,
            structure: struct_of(&kernel, params),
            kernel,
            log_lik,
            theta,
        });
    }
    let burn = ((config.outer as f64) * config.burn_in_fraction).floor() as usize;
    Ok(PosteriorSampleSet {
        samples: samples.split_off(burn.min(samples.len())),
    })
}

/// 1 iff the query's product term is one of the sample's top-level additive
/// terms (exact multiset equality over base kinds).
pub fn cont(term: &ProductTerm, sample: &StructExpr) -> u8 {
    u8::from(sample.terms().contains(term))
}

/// Boolean query over atomic product terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryExpr {
    Term(ProductTerm),
    And(Box<QueryExpr>, Box<QueryExpr>),
    Or(Box<QueryExpr>, Box<QueryExpr>),
}

impl QueryExpr {
    pub fn term(kinds: &[BaseKernelKind]) -> Self {
        QueryExpr::Term(ProductTerm::new(kinds.to_vec()))
    }

    pub fn and(a: QueryExpr, b: QueryExpr) -> Self {
        QueryExpr::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: QueryExpr, b: QueryExpr) -> Self {
        QueryExpr::Or(Box::new(a), Box::new(b))
    }

    /// Shorthand for a noise-dominated structure: WN OR LIN*WN.
    pub fn noise() -> Self {
        QueryExpr::or(
            QueryExpr::term(&[BaseKernelKind::Wn]),
            QueryExpr::term(&[BaseKernelKind::Lin, BaseKernelKind::Wn]),
        )
    }

    pub fn eval(&self, sample: &StructExpr) -> bool {
        match self {
            QueryExpr::Term(t) => cont(t, sample) == 1,
            QueryExpr::And(a, b) => a.eval(sample) && b.eval(sample),
            QueryExpr::Or(a, b) => a.eval(sample) || b.eval(sample),
        }
    }

    /// Distinct atomic terms appearing in the query.
    pub fn atoms(&self) -> Vec<ProductTerm> {
        let mut out = Vec::new();
        fn go(q: &QueryExpr, out: &mut Vec<ProductTerm>) {
            match q {
                QueryExpr::Term(t) => {
                    if !out.contains(t) {
                        out.push(t.clone());
                    }
                }
                QueryExpr::And(a, b) | QueryExpr::Or(a, b) => {
                    go(a, out);
                    go(b, out);
                }
            }
        }
        go(self, &mut out);
        out
    }
}

/// Average the per-sample Boolean evaluation over the posterior samples.
pub fn query_prob(query: &QueryExpr, samples: &PosteriorSampleSet) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("query over empty sample set".into()));
    }
    let hits = samples
        .samples
        .iter()
        .filter(|s| query.eval(&s.structure))
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Parse query text: atomic terms like `LIN` or `SE*PER`, combined with
/// `AND`, `OR` (case-insensitive; OR binds loosest) and parentheses.
pub fn parse_query(text: &str) -> Result<QueryExpr> {
    let mut p = QueryParser {
        src: text.as_bytes(),
        pos: 0,
    };
    let q = p.or_expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.err("trailing input"));
    }
    Ok(q)
}

struct QueryParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> QueryParser<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            position: self.pos,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek_word(&mut self) -> Option<String> {
        self.skip_ws();
        let start = self.pos;
        let mut end = start;
        while end < self.src.len() && self.src[end].is_ascii_alphanumeric() {
            end += 1;
        }
        if end == start {
            None
        } else {
            Some(
                std::str::from_utf8(&self.src[start..end])
                    .expect("ascii")
                    .to_ascii_uppercase(),
            )
        }
    }

    fn take_word(&mut self) -> Result<String> {
        let w = self.peek_word().ok_or_else(|| self.err("expected word"))?;
        self.pos += w.len();
        Ok(w)
    }

    fn or_expr(&mut self) -> Result<QueryExpr> {
        let mut left = self.and_expr()?;
        while self.peek_word().as_deref() == Some("OR") {
            self.take_word()?;
            let right = self.and_expr()?;
            left = QueryExpr::or(left, right);
        }
        Ok(left)
    }

    fn and_expr(&mut self) -> Result<QueryExpr> {
        let mut left = self.atom()?;
        while self.peek_word().as_deref() == Some("AND") {
            self.take_word()?;
            let right = self.atom()?;
            left = QueryExpr::and(left, right);
        }
        Ok(left)
    }

    fn atom(&mut self) -> Result<QueryExpr> {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&b'(') {
            self.pos += 1;
            let inner = self.or_expr()?;
            self.skip_ws();
            if self.src.get(self.pos) != Some(&b')') {
                return Err(self.err("expected `)`"));
            }
            self.pos += 1;
            return Ok(inner);
        }
        let mut kinds = vec![self.kind()?];
        loop {
            self.skip_ws();
            if self.src.get(self.pos) == Some(&b'*') {
                self.pos += 1;
                kinds.push(self.kind()?);
            } else {
                break;
            }
        }
        Ok(QueryExpr::Term(ProductTerm::new(kinds)))
    }

    fn kind(&mut self) -> Result<BaseKernelKind> {
        let word = self.take_word()?;
        match word.as_str() {
            "SE" => Ok(BaseKernelKind::Se),
            "LIN" => Ok(BaseKernelKind::Lin),
            "PER" => Ok(BaseKernelKind::Per),
            "WN" => Ok(BaseKernelKind::Wn),
            "CONST" | "C" => Ok(BaseKernelKind::Const),
            "RQ" => Ok(BaseKernelKind::Rq),
            other => Err(self.err(format!("unknown kernel symbol `{other}`"))),
        }
    }
}
