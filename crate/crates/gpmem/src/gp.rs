//! Exact Gaussian-process conditioning, joint sampling, and marginal
//! likelihood via Cholesky factorization. The prior mean is identically zero.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::{eval_kernel, gram_matrix, HyperParams, KernelExpr};
use crate::linalg::{CholeskyFactor, Matrix};

/// Relative jitter ladder: start at 1e-8 * mean(diag), escalate tenfold up to
/// 1e-2 * mean(diag) before giving up. A zero try comes first so exactly
/// representable matrices factor without perturbation.
const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;

/// Zero-mean GP with a kernel expression and its hyperparameter table.
#[derive(Debug, Clone)]
pub struct GPModel {
    pub kernel: KernelExpr,
    pub params: HyperParams,
}

impl GPModel {
    pub fn new(kernel: KernelExpr, params: HyperParams) -> Result<Self> {
        params.resolves(&kernel)?;
        Ok(GPModel { kernel, params })
    }
}

/// Factor `k` with escalating diagonal jitter; returns the factor and the
/// jitter that succeeded.
pub fn cholesky_with_jitter(k: &Matrix) -> Result<(CholeskyFactor, f64)> {
    if !k.is_finite() {
        return Err(Error::NonFinite {
            context: "gram matrix".into(),
        });
    }
    let scale = {
        let m = k.diag_mean();
        if m > 0.0 {
            m
        } else {
            1.0
        }
    };
    let mut attempted = Vec::new();
    let mut jitter = 0.0;
    loop {
        let mut kj = k.clone();
        if jitter > 0.0 {
            kj.add_diagonal(jitter);
        }
        match CholeskyFactor::new(&kj) {
            Ok(f) => return Ok((f, jitter)),
            Err(_) => {
                attempted.push(jitter);
                jitter = if jitter == 0.0 {
                    JITTER_START * scale
                } else {
                    jitter * 10.0
                };
                if jitter > JITTER_MAX * scale {
                    return Err(Error::NotPositiveDefinite { attempted });
                }
            }
        }
    }
}

/// Gaussian posterior (or prior, when conditioned on nothing) at query inputs.
#[derive(Debug, Clone)]
pub struct PosteriorGaussian {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub inputs: Vec<f64>,
}

/// Log marginal likelihood: -1/2 y^T alpha - sum_i log L_ii - (n/2) log 2pi,
/// with alpha from two triangular solves. Never forms an explicit inverse.
pub fn log_likelihood(model: &GPModel, xs: &[f64], ys: &[f64]) -> Result<f64> {
    assert_eq!(xs.len(), ys.len());
    assert!(!xs.is_empty(), "need at least one data point");
    let k = gram_matrix(&model.kernel, &model.params, xs, xs)?;
    let (factor, _) = cholesky_with_jitter(&k)?;
    log_likelihood_from_factor(&factor, ys)
}

/// Same computation given an already-built factor of the training gram.
pub fn log_likelihood_from_factor(factor: &CholeskyFactor, ys: &[f64]) -> Result<f64> {
    let n = ys.len();
    let alpha = factor.solve(ys);
    let quad: f64 = ys.iter().zip(&alpha).map(|(y, a)| y * a).sum();
    let ll = -0.5 * quad - factor.log_diag_sum() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !ll.is_finite() {
        return Err(Error::NonFinite {
            context: "log likelihood".into(),
        });
    }
    Ok(ll)
}

/// Predictive posterior at `xq` given training data. With empty training data
/// this is the prior: mean zero, covariance K(xq, xq).
pub fn posterior(model: &GPModel, xs: &[f64], ys: &[f64], xq: &[f64]) -> Result<PosteriorGaussian> {
    assert_eq!(xs.len(), ys.len());
    assert!(!xq.is_empty(), "query inputs must be non-empty");
    let kqq = gram_matrix(&model.kernel, &model.params, xq, xq)?;
    if xs.is_empty() {
        return Ok(PosteriorGaussian {
            mean: vec![0.0; xq.len()],
            cov: kqq,
            inputs: xq.to_vec(),
        });
    }
    let kxx = gram_matrix(&model.kernel, &model.params, xs, xs)?;
    let (factor, _) = cholesky_with_jitter(&kxx)?;
    posterior_from_factor(model, &factor, xs, ys, xq)
}

/// Conditioning against a prebuilt training factor (used by the memoizer's
/// incremental path).
pub fn posterior_from_factor(
    model: &GPModel,
    factor: &CholeskyFactor,
    xs: &[f64],
    ys: &[f64],
    xq: &[f64],
) -> Result<PosteriorGaussian> {
    let kqq = gram_matrix(&model.kernel, &model.params, xq, xq)?;
    let kxq = gram_matrix(&model.kernel, &model.params, xs, xq)?;
    // v = L \ Kxq; mean = v^T (L \ y); cov = Kqq - v^T v.
    let v = factor.solve_lower_matrix(&kxq);
    let ly = factor.solve_lower(ys);
    let mut mean = vec![0.0; xq.len()];
    for j in 0..xq.len() {
        let mut acc = 0.0;
        for i in 0..xs.len() {
            acc += v[(i, j)] * ly[i];
        }
        mean[j] = acc;
    }
    let mut cov = kqq;
    for a in 0..xq.len() {
        for b in 0..xq.len() {
            let mut acc = 0.0;
            for i in 0..xs.len() {
                acc += v[(i, a)] * v[(i, b)];
            }
            cov[(a, b)] -= acc;
        }
    }
    cov.symmetrize();
    Ok(PosteriorGaussian {
        mean,
        cov,
        inputs: xq.to_vec(),
    })
}

/// One joint draw mu + L z with z i.i.d. standard normal.
///
/// A posterior covariance can come out numerically indefinite when query
/// points (nearly) coincide with conditioning inputs and the true variance
/// there is zero; in that degenerate case fall back to independent draws
/// with the marginal variances clamped at zero.
pub fn sample_joint<R: Rng + ?Sized>(post: &PosteriorGaussian, rng: &mut R) -> Result<Vec<f64>> {
    let factor = match cholesky_with_jitter(&post.cov) {
        Ok((factor, _)) => factor,
        Err(_) => {
            let mut out = post.mean.clone();
            for (i, v) in out.iter_mut().enumerate() {
                let sd = post.cov[(i, i)].max(0.0).sqrt();
                *v += sd * rng.sample::<f64, _>(StandardNormal);
            }
            return Ok(out);
        }
    };
    let n = post.mean.len();
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = post.mean.clone();
    for i in 0..n {
        for j in 0..=i {
            out[i] += factor.lower()[(i, j)] * z[j];
        }
    }
    Ok(out)
}

/// Incrementally maintained training factor for an append-only dataset.
/// Extends the Cholesky factor by one row per new observation; a full
/// refactorization happens whenever the kernel or its parameters change.
#[derive(Debug, Clone)]
pub struct IncrementalFactor {
    factor: Option<CholeskyFactor>,
    jitter: f64,
    n: usize,
}

impl IncrementalFactor {
    pub fn new() -> Self {
        IncrementalFactor {
            factor: None,
            jitter: 0.0,
            n: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Drop the factor (parameters changed); it is rebuilt lazily.
    pub fn invalidate(&mut self) {
        self.factor = None;
        self.n = 0;
    }

    /// Rebuild from scratch for the full current dataset.
    pub fn refactor(&mut self, model: &GPModel, xs: &[f64]) -> Result<()> {
        if xs.is_empty() {
            self.invalidate();
            return Ok(());
        }
        let k = gram_matrix(&model.kernel, &model.params, xs, xs)?;
        let (factor, jitter) = cholesky_with_jitter(&k)?;
        self.factor = Some(factor);
        self.jitter = jitter;
        self.n = xs.len();
        Ok(())
    }

    /// Append one input. `xs` is the full input list including the new last
    /// element. Falls back to a full refactorization if the rank-1 extension
    /// hits a non-positive pivot.
    pub fn append(&mut self, model: &GPModel, xs: &[f64]) -> Result<()> {
        debug_assert_eq!(self.n + 1, xs.len());
        if self.factor.is_none() || self.n + 1 != xs.len() {
            return self.refactor(model, xs);
        }
        let x_new = xs[xs.len() - 1];
        let prev = &xs[..xs.len() - 1];
        let mut cross = Vec::with_capacity(prev.len());
        for &x in prev {
            cross.push(eval_kernel(&model.kernel, &model.params, x, x_new)?);
        }
        let diag = eval_kernel(&model.kernel, &model.params, x_new, x_new)? + self.jitter;
        let factor = self.factor.as_mut().expect("factor present");
        match factor.extend(&cross, diag) {
            Ok(()) => {
                self.n += 1;
                Ok(())
            }
            Err(_) => self.refactor(model, xs),
        }
    }

    pub fn factor(&self) -> Option<&CholeskyFactor> {
        self.factor.as_ref()
    }
}

impl Default for IncrementalFactor {
    fn default() -> Self {
        Self::new()
    }
}
