//! Thompson-sampling Bayesian optimization over a black-box objective: an SE
//! emulator on the (action, reward) history, MH refreshes of its two
//! hyperparameters, and three action-search strategies.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::gp::{log_likelihood, posterior, sample_joint, GPModel, PosteriorGaussian};
use crate::kernel::{BaseKernelKind, HyperParams, KernelExpr};
use crate::prior::PriorSpec;

/// The bandit's belief and history: SE hyperparameters (sigma, ell) with
/// Uniform(0,10) priors, plus the action/reward record.
#[derive(Debug, Clone)]
pub struct BanditState {
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub sigma: f64,
    pub ell: f64,
}

impl BanditState {
    pub fn new(sigma: f64, ell: f64) -> Self {
        BanditState {
            actions: Vec::new(),
            rewards: Vec::new(),
            sigma,
            ell,
        }
    }

    fn model(&self) -> Result<GPModel> {
        let mut params = HyperParams::new();
        params.insert("sf", self.sigma, "hyper", PriorSpec::uniform(0.0, 10.0));
        params.insert("l", self.ell, "hyper", PriorSpec::uniform(0.0, 10.0));
        GPModel::new(KernelExpr::base(BaseKernelKind::Se, &["sf", "l"]), params)
    }

    pub fn log_likelihood(&self) -> Result<f64> {
        log_likelihood(&self.model()?, &self.actions, &self.rewards)
    }

    pub fn posterior(&self, xq: &[f64]) -> Result<PosteriorGaussian> {
        posterior(&self.model()?, &self.actions, &self.rewards, xq)
    }

    pub fn push(&mut self, action: f64, reward: f64) {
        self.actions.push(action);
        self.rewards.push(reward);
    }
}

/// How the next action is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    UniformArgmax,
    DriftArgmax,
    TauSearch,
}

#[derive(Debug, Clone)]
pub struct BayesOptConfig {
    pub bounds: (f64, f64),
    pub iterations: usize,
    pub candidates: usize,
    pub temperature: f64,
    pub n_avg: usize,
    pub drift_width: f64,
    pub update_steps: usize,
    pub search_steps: usize,
    pub mode: SearchMode,
    pub grid_points: usize,
}

impl Default for BayesOptConfig {
    fn default() -> Self {
        BayesOptConfig {
            bounds: (-20.0, 20.0),
            iterations: 15,
            candidates: 20,
            temperature: 1.0,
            n_avg: 10,
            drift_width: 1.0,
            update_steps: 50,
            search_steps: 30,
            mode: SearchMode::UniformArgmax,
            grid_points: 512,
        }
    }
}

/// One-variable-at-a-time MH over (sigma, ell) against an arbitrary
/// likelihood: proposals Uniform(0,10) alternating between the two sites.
/// Exposed for test harnesses; `tau_update` wires in the real marginal
/// likelihood.
pub fn tau_update_with<R: Rng + ?Sized>(
    state: &mut BanditState,
    steps: usize,
    lik: &mut dyn FnMut(&BanditState) -> Result<f64>,
    rng: &mut R,
) -> Result<usize> {
    let mut accepted = 0;
    let mut current: Option<f64> = None;
    for step in 0..steps {
        let proposal: f64 = rng.gen_range(0.0..10.0);
        let mut candidate = state.clone();
        if step % 2 == 0 {
            candidate.sigma = proposal;
        } else {
            candidate.ell = proposal;
        }
        if state.actions.is_empty() {
            // With no history the likelihood is vacuous: prior draws are
            // accepted unconditionally.
            *state = candidate;
            accepted += 1;
            continue;
        }
        let old = match current {
            Some(v) => v,
            None => match lik(state) {
                Ok(v) => {
                    current = Some(v);
                    v
                }
                Err(_) => continue,
            },
        };
        match lik(&candidate) {
            Ok(new) => {
                let log_a = new - old;
                if log_a >= 0.0 || rng.gen_range(0.0..1.0_f64).ln() < log_a {
                    *state = candidate;
                    current = Some(new);
                    accepted += 1;
                }
            }
            Err(_) => {}
        }
    }
    Ok(accepted)
}

/// MH refresh of (sigma, ell) by the full marginal-likelihood ratio
/// (quadratic form and determinant) of the action/reward history.
pub fn tau_update<R: Rng + ?Sized>(
    state: &mut BanditState,
    steps: usize,
    rng: &mut R,
) -> Result<usize> {
    tau_update_with(state, steps, &mut |s| s.log_likelihood(), rng)
}

/// Monte Carlo estimate of the posterior value at `x`: the mean of `n_avg`
/// independent single-point posterior draws.
pub fn mu_tilde<R: Rng + ?Sized>(
    state: &BanditState,
    x: f64,
    n_avg: usize,
    rng: &mut R,
) -> Result<f64> {
    assert!(n_avg >= 1);
    let post = state.posterior(&[x])?;
    let mut sum = 0.0;
    for _ in 0..n_avg {
        sum += sample_joint(&post, rng)?[0];
    }
    Ok(sum / n_avg as f64)
}

/// MH-like walk over actions driven by an arbitrary value estimator: accept
/// x' with probability min{1, exp((value(x') - value(x)) / s)}; proposals
/// N(x, varsigma^2), rejected outside the bounds.
pub fn tau_search_with<R: Rng + ?Sized>(
    x_start: f64,
    steps: usize,
    s: f64,
    varsigma: f64,
    bounds: (f64, f64),
    value: &mut dyn FnMut(f64, &mut R) -> Result<f64>,
    rng: &mut R,
) -> Result<f64> {
    assert!(s > 0.0, "temperature must be positive");
    let mut x = x_start;
    for _ in 0..steps {
        let noise: f64 = rng.sample(StandardNormal);
        let proposal = x + varsigma * noise;
        if proposal < bounds.0 || proposal > bounds.1 {
            continue;
        }
        let (v_new, v_old) = match (value(proposal, rng), value(x, rng)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => continue,
        };
        let log_a = (v_new - v_old) / s;
        if log_a >= 0.0 || rng.gen_range(0.0..1.0_f64).ln() < log_a {
            x = proposal;
        }
    }
    Ok(x)
}

/// The default action chain: value estimates are mu_tilde under the current
/// belief, starting from the most recent action.
pub fn tau_search<R: Rng + ?Sized>(
    state: &BanditState,
    x_current: f64,
    steps: usize,
    s: f64,
    varsigma: f64,
    n_avg: usize,
    bounds: (f64, f64),
    rng: &mut R,
) -> Result<f64> {
    tau_search_with(
        x_current,
        steps,
        s,
        varsigma,
        bounds,
        &mut |x, rng| mu_tilde(state, x, n_avg, rng),
        rng,
    )
}

/// Candidate actions for `mc_argmax`: uniform over the bounds, or unit-width
/// Gaussian drift around the last action clamped into the bounds.
pub fn draw_candidates<R: Rng + ?Sized>(
    mode: SearchMode,
    last_action: Option<f64>,
    bounds: (f64, f64),
    count: usize,
    rng: &mut R,
) -> Vec<f64> {
    (0..count)
        .map(|_| match mode {
            SearchMode::DriftArgmax => {
                let last = last_action.expect("drift mode requires a last action");
                let noise: f64 = rng.sample(StandardNormal);
                (last + noise).clamp(bounds.0, bounds.1)
            }
            _ => rng.gen_range(bounds.0..bounds.1),
        })
        .collect()
}

/// Draw candidates, sample the emulator once at each, and return the
/// candidate with the largest sampled value (ties to the lowest index).
pub fn mc_argmax<R: Rng + ?Sized>(
    sample_at: &mut dyn FnMut(f64, &mut R) -> Result<f64>,
    mode: SearchMode,
    last_action: Option<f64>,
    bounds: (f64, f64),
    count: usize,
    rng: &mut R,
) -> Result<f64> {
    let candidates = draw_candidates(mode, last_action, bounds, count, rng);
    let mut best = candidates[0];
    let mut best_value = f64::NEG_INFINITY;
    for (i, &c) in candidates.iter().enumerate() {
        let v = sample_at(c, rng)?;
        if v > best_value || (i == 0) {
            best = c;
            best_value = v;
        }
    }
    Ok(best)
}

/// One trace line per completed iteration.
#[derive(Debug, Clone)]
pub struct BoRecord {
    pub iteration: usize,
    pub action: f64,
    pub reward: f64,
    pub sigma: f64,
    pub ell: f64,
    pub best_action: f64,
    pub best_reward: f64,
    pub grid_argmax: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BoTrace {
    pub records: Vec<BoRecord>,
    pub aborted_iterations: Vec<(usize, String)>,
}

impl BoTrace {
    /// Line format: iteration, action, reward, sigma, ell, best-so-far
    /// action and reward, posterior-mean grid argmax — tab separated.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.iteration,
                r.action,
                r.reward,
                r.sigma,
                r.ell,
                r.best_action,
                r.best_reward,
                r.grid_argmax
            ));
        }
        out
    }
}

fn grid_argmax(state: &BanditState, bounds: (f64, f64), points: usize) -> Result<f64> {
    let grid: Vec<f64> = (0..points)
        .map(|i| bounds.0 + (bounds.1 - bounds.0) * i as f64 / (points - 1) as f64)
        .collect();
    let post = state.posterior(&grid)?;
    let mut best = grid[0];
    let mut best_mean = f64::NEG_INFINITY;
    for (i, &x) in grid.iter().enumerate() {
        if post.mean[i] > best_mean {
            best = x;
            best_mean = post.mean[i];
        }
    }
    Ok(best)
}

/// Full Thompson-sampling loop. Per iteration: refresh (sigma, ell), pick an
/// action with the configured search mode, probe the objective, and append
/// the (action, reward) pair. Objective failures abort the iteration but
/// preserve all state.
pub fn thompson_run<R: Rng + ?Sized>(
    objective: &mut dyn FnMut(f64) -> Result<f64>,
    config: &BayesOptConfig,
    rng: &mut R,
) -> Result<BoTrace> {
    let mut state = BanditState::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
    let mut trace = BoTrace::default();
    for iteration in 0..config.iterations {
        tau_update(&mut state, config.update_steps, rng)?;
        let action = if state.actions.is_empty() {
            rng.gen_range(config.bounds.0..config.bounds.1)
        } else {
            let last = *state.actions.last().expect("non-empty");
            match config.mode {
                SearchMode::TauSearch => tau_search(
                    &state,
                    last,
                    config.search_steps,
                    config.temperature,
                    config.drift_width,
                    config.n_avg,
                    config.bounds,
                    rng,
                )?,
                mode => {
                    let snapshot = state.clone();
                    mc_argmax(
                        &mut |x, rng| {
                            let post = snapshot.posterior(&[x])?;
                            Ok(sample_joint(&post, rng)?[0])
                        },
                        mode,
                        Some(last),
                        config.bounds,
                        config.candidates,
                        rng,
                    )?
                }
            }
        };
        let reward = match objective(action) {
            Ok(y) if y.is_finite() => y,
            Ok(y) => {
                trace
                    .aborted_iterations
                    .push((iteration, format!("non-finite objective value {y} at {action}")));
                continue;
            }
            Err(e) => {
                trace.aborted_iterations.push((iteration, e.to_string()));
                continue;
            }
        };
        state.push(action, reward);
        let (best_idx, best_reward) = state
            .rewards
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        let gx = grid_argmax(&state, config.bounds, config.grid_points)?;
        trace.records.push(BoRecord {
            iteration,
            action,
            reward,
            sigma: state.sigma,
            ell: state.ell,
            best_action: state.actions[best_idx],
            best_reward,
            grid_argmax: gx,
        });
    }
    Ok(trace)
}
