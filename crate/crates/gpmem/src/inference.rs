//! Scope-tagged inference over hyperparameter tables: single-site
//! Metropolis–Hastings with prior or Gaussian-drift proposals, nested
//! schedules, and gradient ascent on the GP marginal likelihood.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gp::{cholesky_with_jitter, log_likelihood_from_factor};
use crate::kernel::{gram_matrix, gram_matrix_grad, HyperParams, KernelExpr};

/// Per-scope transition bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MhStats {
    pub proposed: usize,
    pub accepted: usize,
    pub numeric_failures: usize,
}

impl MhStats {
    pub fn merge(&mut self, other: MhStats) {
        self.proposed += other.proposed;
        self.accepted += other.accepted;
        self.numeric_failures += other.numeric_failures;
    }
}

/// Names whose prior references `site` as a hierarchy parent.
fn children_of(params: &HyperParams, site: &str) -> Vec<String> {
    params
        .iter()
        .filter(|(name, entry)| *name != site && entry.prior.parents().contains(&site))
        .map(|(name, _)| name.to_string())
        .collect()
}

/// Sum of the log prior densities of `names` under the current table.
fn log_prior_of(params: &HyperParams, names: &[String]) -> Result<f64> {
    let lookup = params.lookup_fn();
    let mut total = 0.0;
    for name in names {
        let entry = params.entry(name)?;
        total += entry.prior.log_density(entry.value, &lookup)?;
    }
    Ok(total)
}

/// `steps` single-site transitions over the scope. Each step picks one member
/// uniformly at random and proposes from its prior conditional on current
/// hierarchy parents. The acceptance ratio is the likelihood ratio times the
/// ratio of the children's prior densities under the new vs old parent value
/// (the proposed site's own prior cancels against the proposal density).
/// Numeric failures in the target count as rejections.
pub fn mh<R: Rng + ?Sized>(
    params: &mut HyperParams,
    scope: &str,
    steps: usize,
    target: &mut dyn FnMut(&HyperParams) -> Result<f64>,
    rng: &mut R,
) -> Result<MhStats> {
    let members = params.names_in_scope(scope);
    if members.is_empty() {
        return Err(Error::Config(format!("scope `{scope}` has no members")));
    }
    let mut stats = MhStats::default();
    let mut current_ll: Option<f64> = None;
    for _ in 0..steps {
        stats.proposed += 1;
        let site = &members[rng.gen_range(0..members.len())];
        let children = children_of(params, site);
        let old_value = params.get(site)?;
        let old_children_lp = log_prior_of(params, &children)?;
        let old_ll = match current_ll {
            Some(v) => v,
            None => match target(params) {
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
        let proposal = {
            let prior = params.entry(site)?.prior.clone();
            let lookup = params.lookup_fn();
            prior.sample(rng, &lookup)
        };
        let new_value = match proposal {
            Ok(v) if v.is_finite() => v,
            _ => {
                stats.numeric_failures += 1;
                continue;
            }
        };
        params.set(site, new_value)?;
        let accept = match (target(params), log_prior_of(params, &children)) {
            (Ok(new_ll), Ok(new_children_lp)) => {
                let log_a = (new_ll + new_children_lp) - (old_ll + old_children_lp);
                if log_a >= 0.0 || rng.gen_range(0.0..1.0_f64).ln() < log_a {
                    current_ll = Some(new_ll);
                    true
                } else {
                    false
                }
            }
            _ => {
                stats.numeric_failures += 1;
                false
            }
        };
        if accept {
            stats.accepted += 1;
        } else {
            params.set(site, old_value)?;
        }
    }
    Ok(stats)
}

/// Symmetric Gaussian drift proposals with sd `width`; acceptance uses the
/// full posterior ratio (likelihood, own prior, children priors). Proposals
/// outside a prior's support are auto-rejected.
pub fn mh_drift<R: Rng + ?Sized>(
    params: &mut HyperParams,
    scope: &str,
    steps: usize,
    width: f64,
    target: &mut dyn FnMut(&HyperParams) -> Result<f64>,
    rng: &mut R,
) -> Result<MhStats> {
    let members = params.names_in_scope(scope);
    if members.is_empty() {
        return Err(Error::Config(format!("scope `{scope}` has no members")));
    }
    let mut stats = MhStats::default();
    let mut current_ll: Option<f64> = None;
    for _ in 0..steps {
        stats.proposed += 1;
        let site = &members[rng.gen_range(0..members.len())];
        let mut affected = children_of(params, site);
        affected.push(site.clone());
        let old_value = params.get(site)?;
        let old_lp = log_prior_of(params, &affected)?;
        let old_ll = match current_ll {
            Some(v) => v,
            None => match target(params) {
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
        let noise: f64 = rng.sample(StandardNormal);
        let new_value = old_value + width * noise;
        if !params.entry(site)?.prior.in_support(new_value) {
            continue;
        }
        params.set(site, new_value)?;
        let accept = match (target(params), log_prior_of(params, &affected)) {
            (Ok(new_ll), Ok(new_lp)) => {
                let log_a = (new_ll + new_lp) - (old_ll + old_lp);
                if log_a >= 0.0 || rng.gen_range(0.0..1.0_f64).ln() < log_a {
                    current_ll = Some(new_ll);
                    true
                } else {
                    false
                }
            }
            _ => {
                stats.numeric_failures += 1;
                false
            }
        };
        if accept {
            stats.accepted += 1;
        } else {
            params.set(site, old_value)?;
        }
    }
    Ok(stats)
}

/// A composite inference schedule: leaves are scoped transition batches.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Repeat(usize, Box<Schedule>),
    Do(Vec<Schedule>),
    Mh { scope: String, steps: usize },
    Drift { scope: String, steps: usize, width: f64 },
    Gradient { scope: String, steps: usize, step_size: f64 },
}

impl Schedule {
    pub fn repeat(n: usize, inner: Schedule) -> Self {
        Schedule::Repeat(n, Box::new(inner))
    }

    fn scopes<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Schedule::Repeat(_, inner) => inner.scopes(out),
            Schedule::Do(items) => items.iter().for_each(|s| s.scopes(out)),
            Schedule::Mh { scope, .. }
            | Schedule::Drift { scope, .. }
            | Schedule::Gradient { scope, .. } => out.push(scope),
        }
    }

    /// Parse text like `repeat(100, do(mh(hyperhyper,2), mh(hyper,1)))`.
    /// Leaves: `mh(scope,steps)`, `drift(scope,steps,width)`,
    /// `gradient(scope,steps[,step_size])`.
    pub fn parse(text: &str) -> Result<Schedule> {
        let mut p = ScheduleParser {
            src: text.as_bytes(),
            pos: 0,
        };
        let s = p.node()?;
        p.skip_ws();
        if p.pos < p.src.len() {
            return Err(p.err("trailing input"));
        }
        Ok(s)
    }
}

struct ScheduleParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> ScheduleParser<'a> {
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

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected `{}`", c as char)))
        }
    }

    fn word(&mut self) -> Result<String> {
        self.skip_ws();
        if self.peek() == Some(b'"') {
            self.pos += 1;
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos] != b'"' {
                self.pos += 1;
            }
            if self.pos == self.src.len() {
                return Err(self.err("unterminated string"));
            }
            let s = std::str::from_utf8(&self.src[start..self.pos])
                .map_err(|_| self.err("invalid utf8"))?
                .to_string();
            self.pos += 1;
            return Ok(s);
        }
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric()
                || matches!(self.src[self.pos], b'_' | b'-' | b'.' | b'+'))
        {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected identifier or number"));
        }
        Ok(std::str::from_utf8(&self.src[start..self.pos])
            .expect("ascii")
            .to_string())
    }

    fn number(&mut self) -> Result<f64> {
        let w = self.word()?;
        w.parse()
            .map_err(|_| self.err(format!("expected number, got `{w}`")))
    }

    fn integer(&mut self) -> Result<usize> {
        let w = self.word()?;
        w.parse()
            .map_err(|_| self.err(format!("expected integer, got `{w}`")))
    }

    fn node(&mut self) -> Result<Schedule> {
        let head = self.word()?;
        self.expect(b'(')?;
        let node = match head.as_str() {
            "repeat" => {
                let n = self.integer()?;
                self.expect(b',')?;
                let inner = self.node()?;
                Schedule::Repeat(n, Box::new(inner))
            }
            "do" => {
                let mut items = vec![self.node()?];
                while self.peek() == Some(b',') {
                    self.pos += 1;
                    items.push(self.node()?);
                }
                Schedule::Do(items)
            }
            "mh" => {
                let scope = self.word()?;
                self.expect(b',')?;
                let steps = self.integer()?;
                Schedule::Mh { scope, steps }
            }
            "drift" => {
                let scope = self.word()?;
                self.expect(b',')?;
                let steps = self.integer()?;
                self.expect(b',')?;
                let width = self.number()?;
                Schedule::Drift {
                    scope,
                    steps,
                    width,
                }
            }
            "gradient" => {
                let scope = self.word()?;
                self.expect(b',')?;
                let steps = self.integer()?;
                let step_size = if self.peek() == Some(b',') {
                    self.pos += 1;
                    self.number()?
                } else {
                    DEFAULT_STEP_SIZE
                };
                Schedule::Gradient {
                    scope,
                    steps,
                    step_size,
                }
            }
            other => return Err(self.err(format!("unknown schedule form `{other}`"))),
        };
        self.expect(b')')?;
        Ok(node)
    }
}

pub const DEFAULT_STEP_SIZE: f64 = 1e-2;

/// A differentiable log target (likelihood term only; priors are handled by
/// the inference operators).
pub trait DiffTarget {
    fn value(&self, params: &HyperParams) -> Result<f64>;
    fn grad(&self, params: &HyperParams, site: &str) -> Result<f64>;
}

/// GP marginal likelihood of a fixed dataset under a fixed kernel expression,
/// with the standard analytic gradient
/// d/dtheta_j = 1/2 alpha^T (dK/dtheta_j) alpha - 1/2 tr(K^-1 dK/dtheta_j).
pub struct GpTarget<'a> {
    pub kernel: &'a KernelExpr,
    pub xs: &'a [f64],
    pub ys: &'a [f64],
}

impl<'a> DiffTarget for GpTarget<'a> {
    fn value(&self, params: &HyperParams) -> Result<f64> {
        let k = gram_matrix(self.kernel, params, self.xs, self.xs)?;
        let (factor, _) = cholesky_with_jitter(&k)?;
        log_likelihood_from_factor(&factor, self.ys)
    }

    fn grad(&self, params: &HyperParams, site: &str) -> Result<f64> {
        let k = gram_matrix(self.kernel, params, self.xs, self.xs)?;
        let (factor, _) = cholesky_with_jitter(&k)?;
        let alpha = factor.solve(self.ys);
        let dk = gram_matrix_grad(self.kernel, params, self.xs, site)?;
        let kinv = factor.inverse();
        let n = self.xs.len();
        let mut quad = 0.0;
        let mut trace = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += alpha[i] * dk[(i, j)] * alpha[j];
                trace += kinv[(i, j)] * dk[(j, i)];
            }
        }
        let g = 0.5 * quad - 0.5 * trace;
        if !g.is_finite() {
            return Err(Error::Numeric {
                param: site.to_string(),
                message: "gradient is not finite".into(),
            });
        }
        Ok(g)
    }
}

fn scope_log_posterior(
    target: &dyn DiffTarget,
    params: &HyperParams,
    members: &[String],
) -> Result<f64> {
    Ok(target.value(params)? + log_prior_of(params, &members.to_vec())?)
}

/// Backtracking gradient ascent on log target (likelihood + scope priors).
/// The step size is halved (at most 20 times per step) until the target does
/// not decrease; parameters are clamped into prior support.
pub fn gradient_ascent(
    params: &mut HyperParams,
    scope: &str,
    steps: usize,
    step_size: f64,
    target: &dyn DiffTarget,
) -> Result<()> {
    let members = params.names_in_scope(scope);
    if members.is_empty() {
        return Err(Error::Config(format!("scope `{scope}` has no members")));
    }
    for _ in 0..steps {
        let current = scope_log_posterior(target, params, &members)?;
        let lookup_values: Vec<f64> = members
            .iter()
            .map(|m| params.get(m))
            .collect::<Result<_>>()?;
        let mut grad = Vec::with_capacity(members.len());
        {
            let lookup = params.lookup_fn();
            for m in &members {
                let entry = params.entry(m)?;
                let g = target.grad(params, m)? + entry.prior.log_density_grad(entry.value, &lookup)?;
                if !g.is_finite() {
                    return Err(Error::Numeric {
                        param: m.clone(),
                        message: "gradient is not finite".into(),
                    });
                }
                grad.push(g);
            }
        }
        let mut eta = step_size;
        let mut moved = false;
        for _ in 0..=20 {
            for (i, m) in members.iter().enumerate() {
                let prior = params.entry(m)?.prior.clone();
                let candidate = prior.clamp(lookup_values[i] + eta * grad[i]);
                params.set(m, candidate)?;
            }
            match scope_log_posterior(target, params, &members) {
                Ok(v) if v.is_finite() && v >= current => {
                    moved = true;
                    break;
                }
                _ => eta *= 0.5,
            }
        }
        if !moved {
            for (i, m) in members.iter().enumerate() {
                params.set(m, lookup_values[i])?;
            }
        }
    }
    Ok(())
}

/// Result of executing a schedule: per-scope transition counts and the full
/// log target (likelihood + all priors) recorded after every top-level
/// repetition.
#[derive(Debug, Clone, Default)]
pub struct ScheduleReport {
    pub transitions: IndexMap<String, MhStats>,
    pub trace: Vec<f64>,
}

/// Execute a composite schedule against a differentiable target. Unknown or
/// empty scope tags fail before any transition runs.
pub fn nested_schedule<R: Rng + ?Sized>(
    schedule: &Schedule,
    params: &mut HyperParams,
    target: &dyn DiffTarget,
    rng: &mut R,
) -> Result<ScheduleReport> {
    let mut scopes = Vec::new();
    schedule.scopes(&mut scopes);
    for scope in &scopes {
        if params.names_in_scope(scope).is_empty() {
            return Err(Error::Config(format!("unknown scope tag `{scope}`")));
        }
    }
    let mut report = ScheduleReport::default();
    match schedule {
        Schedule::Repeat(n, inner) => {
            for _ in 0..*n {
                run_node(inner, params, target, rng, &mut report)?;
                report.trace.push(full_log_target(target, params)?);
            }
        }
        other => {
            run_node(other, params, target, rng, &mut report)?;
            report.trace.push(full_log_target(target, params)?);
        }
    }
    Ok(report)
}

fn full_log_target(target: &dyn DiffTarget, params: &HyperParams) -> Result<f64> {
    Ok(target.value(params)? + params.log_prior()?)
}

fn run_node<R: Rng + ?Sized>(
    node: &Schedule,
    params: &mut HyperParams,
    target: &dyn DiffTarget,
    rng: &mut R,
    report: &mut ScheduleReport,
) -> Result<()> {
    match node {
        Schedule::Repeat(n, inner) => {
            for _ in 0..*n {
                run_node(inner, params, target, rng, report)?;
            }
        }
        Schedule::Do(items) => {
            for item in items {
                run_node(item, params, target, rng, report)?;
            }
        }
        Schedule::Mh { scope, steps } => {
            let mut f = |p: &HyperParams| target.value(p);
            let stats = mh(params, scope, *steps, &mut f, rng)?;
            report.transitions.entry(scope.clone()).or_default().merge(stats);
        }
        Schedule::Drift {
            scope,
            steps,
            width,
        } => {
            let mut f = |p: &HyperParams| target.value(p);
            let stats = mh_drift(params, scope, *steps, *width, &mut f, rng)?;
            report.transitions.entry(scope.clone()).or_default().merge(stats);
        }
        Schedule::Gradient {
            scope,
            steps,
            step_size,
        } => {
            gradient_ascent(params, scope, *steps, *step_size, target)?;
            report
                .transitions
                .entry(scope.clone())
                .or_default()
                .merge(MhStats {
                    proposed: *steps,
                    accepted: *steps,
                    numeric_failures: 0,
                });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::BaseKernelKind;
    use crate::prior::PriorSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat(_: &HyperParams) -> Result<f64> {
        Ok(0.0)
    }

    #[test]
    fn zero_steps_is_identity() {
        let mut p = HyperParams::new();
        p.insert("a", 3.0, "hyper", PriorSpec::uniform(0.0, 10.0));
        let before = p.get("a").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stats = mh(&mut p, "hyper", 0, &mut flat, &mut rng).unwrap();
        assert_eq!(stats.proposed, 0);
        assert_eq!(p.get("a").unwrap(), before);
    }

    #[test]
    fn flat_likelihood_recovers_uniform_prior() {
        let mut p = HyperParams::new();
        p.insert("a", 5.0, "hyper", PriorSpec::uniform(0.0, 10.0));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 50_000;
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            mh(&mut p, "hyper", 1, &mut flat, &mut rng).unwrap();
            draws.push(p.get("a").unwrap());
        }
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, v) in draws.iter().enumerate() {
            let emp = (i + 1) as f64 / n as f64;
            let cdf = v / 10.0;
            ks = ks.max((emp - cdf).abs());
        }
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    #[test]
    fn drift_width_zero_keeps_chain_constant() {
        let mut p = HyperParams::new();
        p.insert("a", 4.0, "hyper", PriorSpec::uniform(0.0, 10.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        mh_drift(&mut p, "hyper", 100, 0.0, &mut flat, &mut rng).unwrap();
        assert_eq!(p.get("a").unwrap(), 4.0);
    }

    #[test]
    fn drift_samples_standard_normal_target() {
        let mut p = HyperParams::new();
        p.insert("a", 0.0, "hyper", PriorSpec::uniform(-50.0, 50.0));
        let mut target = |p: &HyperParams| -> Result<f64> {
            let v = p.get("a")?;
            Ok(-0.5 * v * v)
        };
        // Uniform prior over a wide box contributes a constant; the chain
        // targets exp(-x^2/2) up to normalization.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            mh_drift(&mut p, "hyper", 1, 1.0, &mut target, &mut rng).unwrap();
            let v = p.get("a").unwrap();
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((0.9..=1.1).contains(&var), "variance {var}");
    }

    #[test]
    fn drift_rejects_out_of_support() {
        let mut p = HyperParams::new();
        p.insert("a", 0.1, "hyper", PriorSpec::uniform(0.0, 10.0));
        // A huge negative drift will frequently leave support; the value must
        // never become negative.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            mh_drift(&mut p, "hyper", 1, 5.0, &mut flat, &mut rng).unwrap();
            assert!(p.get("a").unwrap() >= 0.0);
        }
    }

    #[test]
    fn scope_isolation() {
        let mut p = HyperParams::new();
        p.insert("a", 1.0, "hyper", PriorSpec::uniform(0.0, 10.0));
        p.insert("b", 2.0, "other", PriorSpec::uniform(0.0, 10.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        mh(&mut p, "hyper", 500, &mut flat, &mut rng).unwrap();
        assert_eq!(p.get("b").unwrap(), 2.0);
    }

    #[test]
    fn hierarchical_acceptance_includes_children() {
        // A Gamma(alpha, 1) child with alpha itself random: proposing alpha
        // must weight the child's density. With the child pinned at a value
        // favoring large alpha, the alpha chain should shift upward relative
        // to its prior mean.
        let mut p = HyperParams::new();
        p.insert("alpha", 2.0, "hyperhyper", PriorSpec::gamma(2.0, 1.0));
        p.insert(
            "child",
            8.0,
            "hyper",
            PriorSpec::Gamma {
                shape: "alpha".into(),
                rate: 1.0.into(),
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            mh(&mut p, "hyperhyper", 1, &mut flat, &mut rng).unwrap();
            sum += p.get("alpha").unwrap();
        }
        let mean = sum / n as f64;
        // Prior mean of alpha is 2; conditioning on child=8 pulls it well
        // above that (posterior mode of a Gamma shape given one large draw).
        assert!(mean > 3.0, "posterior mean {mean}");
        // And the child itself must never have been resampled.
        assert_eq!(p.get("child").unwrap(), 8.0);
    }

    #[test]
    fn detailed_balance_two_state() {
        // Restrict a Bernoulli site to {0,1} with an asymmetric likelihood and
        // check pi_i P_ij = pi_j P_ji empirically.
        let mut p = HyperParams::new();
        p.insert("b", 0.0, "grammar", PriorSpec::Bernoulli { p: 0.5 });
        let mut target = |p: &HyperParams| -> Result<f64> {
            Ok(if p.get("b")? == 1.0 { 1.2 } else { 0.0 })
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 60_000;
        let mut count = [[0usize; 2]; 2];
        let mut prev = p.get("b").unwrap() as usize;
        for _ in 0..n {
            mh(&mut p, "grammar", 1, &mut target, &mut rng).unwrap();
            let cur = p.get("b").unwrap() as usize;
            count[prev][cur] += 1;
            prev = cur;
        }
        let flow01 = count[0][1] as f64 / n as f64;
        let flow10 = count[1][0] as f64 / n as f64;
        let se = ((flow01 + flow10) / n as f64).sqrt();
        assert!(
            (flow01 - flow10).abs() < 3.0 * se + 0.01,
            "flows {flow01} vs {flow10}"
        );
    }

    #[test]
    fn seed_determinism() {
        let build = || {
            let mut p = HyperParams::new();
            p.insert("a", 1.0, "hyper", PriorSpec::gamma(5.0, 1.0));
            p.insert("b", 1.0, "hyper", PriorSpec::gamma(5.0, 1.0));
            p
        };
        let mut target = |p: &HyperParams| -> Result<f64> { Ok(-p.get("a")? - p.get("b")?) };
        let run = |mut p: HyperParams, t: &mut dyn FnMut(&HyperParams) -> Result<f64>| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            mh(&mut p, "hyper", 1000, t, &mut rng).unwrap();
            (p.get("a").unwrap(), p.get("b").unwrap())
        };
        assert_eq!(run(build(), &mut target), run(build(), &mut target));
    }

    #[test]
    fn schedule_parse_and_counters() {
        let sched = Schedule::parse("repeat(100, do(mh(hyperhyper,2), mh(hyper,1)))").unwrap();
        assert_eq!(
            sched,
            Schedule::repeat(
                100,
                Schedule::Do(vec![
                    Schedule::Mh {
                        scope: "hyperhyper".into(),
                        steps: 2
                    },
                    Schedule::Mh {
                        scope: "hyper".into(),
                        steps: 1
                    },
                ])
            )
        );
        let mut p = HyperParams::new();
        p.insert("alpha", 5.0, "hyperhyper", PriorSpec::gamma(5.0, 1.0));
        p.insert(
            "a",
            1.0,
            "hyper",
            PriorSpec::Gamma {
                shape: "alpha".into(),
                rate: 1.0.into(),
            },
        );
        struct Flat;
        impl DiffTarget for Flat {
            fn value(&self, _: &HyperParams) -> Result<f64> {
                Ok(0.0)
            }
            fn grad(&self, _: &HyperParams, _: &str) -> Result<f64> {
                Ok(0.0)
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = nested_schedule(&sched, &mut p, &Flat, &mut rng).unwrap();
        assert_eq!(report.transitions["hyperhyper"].proposed, 200);
        assert_eq!(report.transitions["hyper"].proposed, 100);
        assert_eq!(report.trace.len(), 100);
    }

    #[test]
    fn schedule_rejects_unknown_scope() {
        let sched = Schedule::parse("repeat(5, mh(nosuch,1))").unwrap();
        let mut p = HyperParams::new();
        p.insert("a", 1.0, "hyper", PriorSpec::gamma(5.0, 1.0));
        struct Flat;
        impl DiffTarget for Flat {
            fn value(&self, _: &HyperParams) -> Result<f64> {
                Ok(0.0)
            }
            fn grad(&self, _: &HyperParams, _: &str) -> Result<f64> {
                Ok(0.0)
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            nested_schedule(&sched, &mut p, &Flat, &mut rng),
            Err(Error::Config(_))
        ));
        assert_eq!(p.get("a").unwrap(), 1.0);
    }

    #[test]
    fn repeat_unrolls_exactly() {
        let a = Schedule::parse("repeat(2, do(mh(hyper,3)))").unwrap();
        let b = Schedule::parse("do(mh(hyper,3), mh(hyper,3))").unwrap();
        let run = |s: &Schedule| {
            let mut p = HyperParams::new();
            p.insert("a", 1.0, "hyper", PriorSpec::gamma(5.0, 1.0));
            struct Flat;
            impl DiffTarget for Flat {
                fn value(&self, _: &HyperParams) -> Result<f64> {
                    Ok(0.0)
                }
                fn grad(&self, _: &HyperParams, _: &str) -> Result<f64> {
                    Ok(0.0)
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            nested_schedule(s, &mut p, &Flat, &mut rng).unwrap();
            p.get("a").unwrap()
        };
        assert_eq!(run(&a).to_bits(), run(&b).to_bits());
    }

    #[test]
    fn gp_gradient_matches_finite_differences() {
        let kernel = KernelExpr::base(BaseKernelKind::Se, &["sf", "l"]);
        let mut p = HyperParams::new();
        p.insert("sf", 1.2, "hyper", PriorSpec::gamma(5.0, 1.0));
        p.insert("l", 0.9, "hyper", PriorSpec::gamma(5.0, 1.0));
        let xs = [0.0, 0.8, 1.5, 2.3, 3.1, 4.0];
        let ys = [0.3, -0.4, 0.9, 0.1, -0.7, 0.5];
        let target = GpTarget {
            kernel: &kernel,
            xs: &xs,
            ys: &ys,
        };
        for site in ["sf", "l"] {
            let analytic = target.grad(&p, site).unwrap();
            let v = p.get(site).unwrap();
            let h = 1e-5 * v;
            p.set(site, v + h).unwrap();
            let up = target.value(&p).unwrap();
            p.set(site, v - h).unwrap();
            let dn = target.value(&p).unwrap();
            p.set(site, v).unwrap();
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (analytic - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                "{site}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn gradient_ascent_zero_steps_is_identity() {
        let mut p = HyperParams::new();
        p.insert("a", 2.0, "hyper", PriorSpec::uniform(0.0, 10.0));
        struct Quad;
        impl DiffTarget for Quad {
            fn value(&self, p: &HyperParams) -> Result<f64> {
                let v = p.get("a")?;
                Ok(-(v - 7.0) * (v - 7.0))
            }
            fn grad(&self, p: &HyperParams, _: &str) -> Result<f64> {
                Ok(-2.0 * (p.get("a")? - 7.0))
            }
        }
        gradient_ascent(&mut p, "hyper", 0, 1e-2, &Quad).unwrap();
        assert_eq!(p.get("a").unwrap(), 2.0);
    }

    #[test]
    fn gradient_ascent_converges_on_quadratic() {
        let mut p = HyperParams::new();
        p.insert("a", 2.0, "hyper", PriorSpec::uniform(0.0, 10.0));
        struct Quad;
        impl DiffTarget for Quad {
            fn value(&self, p: &HyperParams) -> Result<f64> {
                let v = p.get("a")?;
                Ok(-(v - 7.0) * (v - 7.0))
            }
            fn grad(&self, p: &HyperParams, _: &str) -> Result<f64> {
                Ok(-2.0 * (p.get("a")? - 7.0))
            }
        }
        gradient_ascent(&mut p, "hyper", 100, 0.4, &Quad).unwrap();
        assert!((p.get("a").unwrap() - 7.0).abs() < 1e-6);
    }

    #[test]
    fn gradient_ascent_never_decreases_target() {
        let kernel = KernelExpr::base(BaseKernelKind::Se, &["sf", "l"]);
        let mut p = HyperParams::new();
        p.insert("sf", 0.5, "hyper", PriorSpec::gamma(5.0, 1.0));
        p.insert("l", 2.0, "hyper", PriorSpec::gamma(5.0, 1.0));
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [0.5, -0.8, 0.6, -0.3];
        let target = GpTarget {
            kernel: &kernel,
            xs: &xs,
            ys: &ys,
        };
        let members = ["sf".to_string(), "l".to_string()];
        let before = scope_log_posterior(&target, &p, &members).unwrap();
        gradient_ascent(&mut p, "hyper", 10, 1e-2, &target).unwrap();
        let after = scope_log_posterior(&target, &p, &members).unwrap();
        assert!(after >= before - 1e-12);
    }
}
