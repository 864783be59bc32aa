//! The statistical memoizer: wraps a source function into a memoizing prober
//! and an online GP emulator that share one memo table.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gp::{posterior_from_factor, sample_joint, GPModel, IncrementalFactor, PosteriorGaussian};
use crate::kernel::{HyperParams, KernelExpr};

/// Where a memo-table entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Probed,
    Observed,
}

#[derive(Debug, Clone)]
pub struct MemoEntry {
    pub x: f64,
    pub y: f64,
    pub origin: Origin,
    pub label: Option<String>,
}

struct Shared {
    model: GPModel,
    table: Vec<MemoEntry>,
    factor: IncrementalFactor,
    invocations: usize,
}

impl Shared {
    fn xs(&self) -> Vec<f64> {
        self.table.iter().map(|e| e.x).collect()
    }

    fn ys(&self) -> Vec<f64> {
        self.table.iter().map(|e| e.y).collect()
    }

    fn push(&mut self, entry: MemoEntry) -> Result<()> {
        self.table.push(entry);
        let xs = self.xs();
        if self.factor.len() + 1 == xs.len() {
            self.factor.append(&self.model, &xs)
        } else {
            self.factor.refactor(&self.model, &xs)
        }
    }

    fn ensure_factor(&mut self) -> Result<()> {
        if self.factor.len() != self.table.len() {
            let xs = self.xs();
            self.factor.refactor(&self.model, &xs)?;
        }
        Ok(())
    }

    fn posterior(&mut self, xq: &[f64]) -> Result<PosteriorGaussian> {
        let xs = self.xs();
        let ys = self.ys();
        if xs.is_empty() {
            return crate::gp::posterior(&self.model, &[], &[], xq);
        }
        self.ensure_factor()?;
        let factor = self.factor.factor().expect("factor ensured");
        posterior_from_factor(&self.model, factor, &xs, &ys, xq)
    }
}

/// The memoizing side of a `gpmem` pair: probes the source function, caching
/// results by exact input equality.
pub struct Prober {
    shared: Rc<RefCell<Shared>>,
    source: Box<dyn FnMut(f64) -> Result<f64>>,
}

/// The emulator side: a GP conditioned on the shared memo table.
pub struct Emulator {
    shared: Rc<RefCell<Shared>>,
}

/// Build a linked (prober, emulator) pair over one fresh memo table.
pub fn gpmem(
    source: impl FnMut(f64) -> Result<f64> + 'static,
    kernel: KernelExpr,
    params: HyperParams,
) -> Result<(Prober, Emulator)> {
    let model = GPModel::new(kernel, params)?;
    let shared = Rc::new(RefCell::new(Shared {
        model,
        table: Vec::new(),
        factor: IncrementalFactor::new(),
        invocations: 0,
    }));
    Ok((
        Prober {
            shared: shared.clone(),
            source: Box::new(source),
        },
        Emulator { shared },
    ))
}

impl Prober {
    /// Probe the source at `x`, memoizing: a repeat probe of an already
    /// probed input is a pure table lookup.
    pub fn compute(&mut self, x: f64) -> Result<f64> {
        if let Some(y) = self
            .shared
            .borrow()
            .table
            .iter()
            .find(|e| e.origin == Origin::Probed && e.x.to_bits() == x.to_bits())
            .map(|e| e.y)
        {
            return Ok(y);
        }
        let y = (self.source)(x).map_err(|e| Error::Source {
            x,
            message: e.to_string(),
        })?;
        if !y.is_finite() {
            return Err(Error::Source {
                x,
                message: format!("source returned non-finite value {y}"),
            });
        }
        let mut shared = self.shared.borrow_mut();
        shared.invocations += 1;
        shared.push(MemoEntry {
            x,
            y,
            origin: Origin::Probed,
            label: None,
        })?;
        Ok(y)
    }

    /// Number of actual source-function invocations so far.
    pub fn invocations(&self) -> usize {
        self.shared.borrow().invocations
    }
}

impl Emulator {
    /// Record an externally supplied (x, y) pair without probing the source.
    /// Returns the entry index.
    pub fn observe(&mut self, x: f64, y: f64, label: Option<&str>) -> Result<usize> {
        let mut shared = self.shared.borrow_mut();
        let id = shared.table.len();
        shared.push(MemoEntry {
            x,
            y,
            origin: Origin::Observed,
            label: label.map(str::to_string),
        })?;
        Ok(id)
    }

    /// Remove every Observed entry carrying `label`; Probed entries are never
    /// removed. Returns the count removed.
    pub fn forget(&mut self, label: &str) -> usize {
        let mut shared = self.shared.borrow_mut();
        let before = shared.table.len();
        shared
            .table
            .retain(|e| !(e.origin == Origin::Observed && e.label.as_deref() == Some(label)));
        let removed = before - shared.table.len();
        if removed > 0 {
            shared.factor.invalidate();
        }
        removed
    }

    /// One joint posterior draw at the query inputs; with an empty table this
    /// is a draw from the prior.
    pub fn emulate<R: Rng + ?Sized>(&mut self, xq: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let post = self.shared.borrow_mut().posterior(xq)?;
        sample_joint(&post, rng)
    }

    /// Exact posterior (mean and covariance) at the query inputs.
    pub fn posterior(&mut self, xq: &[f64]) -> Result<PosteriorGaussian> {
        self.shared.borrow_mut().posterior(xq)
    }

    /// Current conditioning data in table order.
    pub fn data(&self) -> (Vec<f64>, Vec<f64>) {
        let shared = self.shared.borrow();
        (shared.xs(), shared.ys())
    }

    pub fn table_len(&self) -> usize {
        self.shared.borrow().table.len()
    }

    pub fn params(&self) -> HyperParams {
        self.shared.borrow().model.params.clone()
    }

    pub fn kernel(&self) -> KernelExpr {
        self.shared.borrow().model.kernel.clone()
    }

    /// Replace the hyperparameter table (belief update from inference).
    /// Invalidates cached factorizations; the memo table is untouched.
    pub fn set_params(&mut self, params: HyperParams) -> Result<()> {
        let mut shared = self.shared.borrow_mut();
        params.resolves(&shared.model.kernel)?;
        shared.model.params = params;
        shared.factor.invalidate();
        Ok(())
    }

    /// Replace kernel and parameters together (structure change).
    pub fn set_model(&mut self, kernel: KernelExpr, params: HyperParams) -> Result<()> {
        let model = GPModel::new(kernel, params)?;
        let mut shared = self.shared.borrow_mut();
        shared.model = model;
        shared.factor.invalidate();
        Ok(())
    }

    /// Log marginal likelihood of the current memo table under the current
    /// model.
    pub fn log_likelihood(&mut self) -> Result<f64> {
        let mut shared = self.shared.borrow_mut();
        if shared.table.is_empty() {
            return Err(Error::Data("memo table is empty".into()));
        }
        shared.ensure_factor()?;
        let ys = shared.ys();
        crate::gp::log_likelihood_from_factor(shared.factor.factor().expect("ensured"), &ys)
    }
}

/// The running-example objective used throughout the docs and the demo mode.
pub fn tutorial_objective(x: f64) -> f64 {
    (-0.1 * (x - 2.0).abs()).exp() * 10.0 * (0.4 * x).cos() + 0.2
}
