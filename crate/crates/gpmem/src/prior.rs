//! Prior specifications for random choices (hyperparameters, grammar bits).
//!
//! Gamma shape/rate arguments may reference other named random choices, which
//! is how the hierarchical hyperprior setups are wired.

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// A scalar that is either a literal or the current value of another choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HyperRef {
    Const(f64),
    Param(String),
}

impl HyperRef {
    pub fn resolve(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<f64> {
        match self {
            HyperRef::Const(v) => Ok(*v),
            HyperRef::Param(name) => {
                lookup(name).ok_or_else(|| Error::UnresolvedParam(name.clone()))
            }
        }
    }
}

impl From<f64> for HyperRef {
    fn from(v: f64) -> Self {
        HyperRef::Const(v)
    }
}

impl From<&str> for HyperRef {
    fn from(name: &str) -> Self {
        HyperRef::Param(name.to_string())
    }
}

/// Prior over a single random choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PriorSpec {
    Gamma { shape: HyperRef, rate: HyperRef },
    UniformContinuous { lo: f64, hi: f64 },
    Bernoulli { p: f64 },
}

impl PriorSpec {
    pub fn gamma(shape: f64, rate: f64) -> Self {
        PriorSpec::Gamma {
            shape: shape.into(),
            rate: rate.into(),
        }
    }

    pub fn uniform(lo: f64, hi: f64) -> Self {
        PriorSpec::UniformContinuous { lo, hi }
    }

    /// Names of other random choices this prior depends on.
    pub fn parents(&self) -> Vec<&str> {
        match self {
            PriorSpec::Gamma { shape, rate } => {
                let mut out = Vec::new();
                if let HyperRef::Param(n) = shape {
                    out.push(n.as_str());
                }
                if let HyperRef::Param(n) = rate {
                    out.push(n.as_str());
                }
                out
            }
            _ => Vec::new(),
        }
    }

    /// Log density of `value` with parent references resolved via `lookup`.
    pub fn log_density(&self, value: f64, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<f64> {
        match self {
            PriorSpec::Gamma { shape, rate } => {
                let a = shape.resolve(lookup)?;
                let b = rate.resolve(lookup)?;
                if a <= 0.0 || b <= 0.0 {
                    return Err(Error::Config(format!(
                        "gamma prior requires positive shape/rate, got ({a}, {b})"
                    )));
                }
                if value <= 0.0 {
                    return Ok(f64::NEG_INFINITY);
                }
                Ok(a * b.ln() - ln_gamma(a) + (a - 1.0) * value.ln() - b * value)
            }
            PriorSpec::UniformContinuous { lo, hi } => {
                if value < *lo || value > *hi {
                    Ok(f64::NEG_INFINITY)
                } else {
                    Ok(-(hi - lo).ln())
                }
            }
            PriorSpec::Bernoulli { p } => {
                if value == 1.0 {
                    Ok(p.ln())
                } else if value == 0.0 {
                    Ok((1.0 - p).ln())
                } else {
                    Ok(f64::NEG_INFINITY)
                }
            }
        }
    }

    /// Draw a value conditional on current parent values.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        lookup: &dyn Fn(&str) -> Option<f64>,
    ) -> Result<f64> {
        match self {
            PriorSpec::Gamma { shape, rate } => {
                let a = shape.resolve(lookup)?;
                let b = rate.resolve(lookup)?;
                let dist = rand_distr::Gamma::new(a, 1.0 / b)
                    .map_err(|e| Error::Config(format!("gamma prior: {e}")))?;
                Ok(dist.sample(rng))
            }
            PriorSpec::UniformContinuous { lo, hi } => Ok(rng.gen_range(*lo..*hi)),
            PriorSpec::Bernoulli { p } => Ok(if rng.gen_bool(*p) { 1.0 } else { 0.0 }),
        }
    }

    /// Support check for drift proposals and gradient clamping.
    pub fn in_support(&self, value: f64) -> bool {
        match self {
            PriorSpec::Gamma { .. } => value > 0.0,
            PriorSpec::UniformContinuous { lo, hi } => value >= *lo && value <= *hi,
            PriorSpec::Bernoulli { .. } => value == 0.0 || value == 1.0,
        }
    }

    /// Clamp a value into the (closure of the) support.
    pub fn clamp(&self, value: f64) -> f64 {
        match self {
            PriorSpec::Gamma { .. } => value.max(1e-9),
            PriorSpec::UniformContinuous { lo, hi } => value.clamp(*lo + 1e-12, *hi - 1e-12),
            PriorSpec::Bernoulli { .. } => {
                if value >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// d/dvalue of the log density (continuous priors only).
    pub fn log_density_grad(
        &self,
        value: f64,
        lookup: &dyn Fn(&str) -> Option<f64>,
    ) -> Result<f64> {
        match self {
            PriorSpec::Gamma { shape, rate } => {
                let a = shape.resolve(lookup)?;
                let b = rate.resolve(lookup)?;
                Ok((a - 1.0) / value - b)
            }
            PriorSpec::UniformContinuous { .. } => Ok(0.0),
            PriorSpec::Bernoulli { .. } => Err(Error::Config(
                "bernoulli prior has no continuous gradient".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_log_density_matches_closed_form() {
        // Gamma(1, b) is Exponential(b): log b - b x.
        let p = PriorSpec::gamma(1.0, 2.0);
        let ld = p.log_density(0.7, &|_| None).unwrap();
        assert!((ld - (2.0_f64.ln() - 2.0 * 0.7)).abs() < 1e-12);
    }

    #[test]
    fn uniform_support() {
        let p = PriorSpec::uniform(0.0, 10.0);
        assert_eq!(p.log_density(-0.3, &|_| None).unwrap(), f64::NEG_INFINITY);
        assert!((p.log_density(5.0, &|_| None).unwrap() - (-(10.0_f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_parent_resolution() {
        let p = PriorSpec::Gamma {
            shape: "alpha".into(),
            rate: 1.0.into(),
        };
        assert_eq!(p.parents(), vec!["alpha"]);
        let lookup = |n: &str| if n == "alpha" { Some(2.0) } else { None };
        let ld = p.log_density(1.0, &lookup).unwrap();
        // Gamma(2,1) at 1: log(x e^-x) = -1.
        assert!((ld - (-1.0)).abs() < 1e-12);
        assert!(p.log_density(1.0, &|_| None).is_err());
    }
}
