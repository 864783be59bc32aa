//! Dataset plumbing: two-column CSV I/O and the hermetic dataset generators
//! used by the regression and structure-discovery test workflows.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gp::{posterior, sample_joint, GPModel};
use crate::kernel::{parse_kernel, HyperParams};
use crate::prior::PriorSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub source: String,
}

impl Dataset {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if xs.len() != ys.len() || xs.is_empty() {
            return Err(Error::Data(format!(
                "need matching non-empty columns, got {} x and {} y",
                xs.len(),
                ys.len()
            )));
        }
        if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        Ok(Dataset {
            xs,
            ys,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y\n");
        for (x, y) in self.xs.iter().zip(&self.ys) {
            out.push_str(&format!("{x},{y}\n"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Parse two-column CSV text; a leading `x,y` header row is optional.
pub fn parse_csv(text: &str, source: &str) -> Result<Dataset> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if lineno == 0 && trimmed.eq_ignore_ascii_case("x,y") {
            continue;
        }
        let mut fields = trimmed.split(',');
        let (fx, fy) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) => (a.trim(), b.trim()),
            _ => {
                return Err(Error::Data(format!(
                    "line {}: expected exactly two comma-separated columns",
                    lineno + 1
                )))
            }
        };
        let x: f64 = fx
            .parse()
            .map_err(|_| Error::Data(format!("line {}: bad x value `{fx}`", lineno + 1)))?;
        let y: f64 = fy
            .parse()
            .map_err(|_| Error::Data(format!("line {}: bad y value `{fy}`", lineno + 1)))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Data(format!(
                "line {}: non-finite value",
                lineno + 1
            )));
        }
        xs.push(x);
        ys.push(y);
    }
    Dataset::new(xs, ys, source)
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, &path.display().to_string())
}

/// The robust-regression target function (noise-free part).
pub fn neal_f_true(x: f64) -> f64 {
    0.3 + 0.4 * x + 0.5 * (2.7 * x).sin() + 1.1 / (1.0 + x * x)
}

/// Robust-regression dataset: inputs uniform on [-2, 2]; additive Gaussian
/// noise with sd 0.1 in 95% of cases and sd 1.0 otherwise (outliers).
pub fn gen_neal(n: usize, seed: u64) -> Dataset {
    assert!(n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.gen_range(-2.0..2.0);
        let sd = if rng.gen_bool(0.95) { 0.1 } else { 1.0 };
        let noise: f64 = rng.sample(StandardNormal);
        xs.push(x);
        ys.push(neal_f_true(x) + sd * noise);
    }
    Dataset::new(xs, ys, format!("gen-neal(n={n}, seed={seed})")).expect("generated data is finite")
}

/// Synthetic draw from a LIN + PER + WN prior with fixed, well-separated
/// hyperparameters; used for the structure-recovery workflow.
pub fn gen_lin_per_wn(n: usize, seed: u64) -> Dataset {
    assert!(n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = parse_kernel("LIN(a) + PER(s,p,l) + WN(nz)").expect("fixed kernel parses");
    let mut params = HyperParams::new();
    let prior = PriorSpec::gamma(5.0, 1.0);
    params.insert("a", 0.4, "gen", prior.clone());
    params.insert("s", 2.0, "gen", prior.clone());
    params.insert("p", 2.0, "gen", prior.clone());
    params.insert("l", 1.0, "gen", prior.clone());
    params.insert("nz", 0.3, "gen", prior);
    let model = GPModel::new(kernel, params).expect("fixed model resolves");
    let xs: Vec<f64> = (0..n)
        .map(|i| -5.0 + 10.0 * i as f64 / (n.max(2) - 1) as f64)
        .collect();
    let prior_at_xs = posterior(&model, &[], &[], &xs).expect("prior covariance");
    let ys = sample_joint(&prior_at_xs, &mut rng).expect("prior draw");
    Dataset::new(xs, ys, format!("gen-lin-per-wn(n={n}, seed={seed})"))
        .expect("generated data is finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_headerless_pairs() {
        let d = parse_csv("0,1\n1,2", "inline").unwrap();
        assert_eq!(d.xs, vec![0.0, 1.0]);
        assert_eq!(d.ys, vec![1.0, 2.0]);
    }

    #[test]
    fn header_is_optional() {
        let with = parse_csv("x,y\n0,1\n1,2", "inline").unwrap();
        let without = parse_csv("0,1\n1,2", "inline").unwrap();
        assert_eq!(with.xs, without.xs);
        assert_eq!(with.ys, without.ys);
    }

    #[test]
    fn malformed_rows_carry_line_numbers() {
        let err = parse_csv("0,1\nbogus,2\n", "inline").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = parse_csv("0,1\n1,2,3\n", "inline").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = parse_csv("0,1\n1,inf\n", "inline").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn csv_round_trip() {
        let d = gen_neal(50, 7);
        let back = parse_csv(&d.to_csv(), "inline").unwrap();
        assert_eq!(d.xs, back.xs);
        assert_eq!(d.ys, back.ys);
    }

    #[test]
    fn neal_f_true_at_zero() {
        assert!((neal_f_true(0.0) - 1.4).abs() < 1e-15);
    }

    #[test]
    fn neal_is_seed_deterministic() {
        let a = gen_neal(100, 42);
        let b = gen_neal(100, 42);
        assert_eq!(a.xs, b.xs);
        assert_eq!(a.ys, b.ys);
        let c = gen_neal(100, 43);
        assert_ne!(a.ys, c.ys);
    }

    #[test]
    fn neal_inputs_in_range() {
        let d = gen_neal(1000, 1);
        assert!(d.xs.iter().all(|x| (-2.0..2.0).contains(x)));
    }

    #[test]
    fn neal_noise_mixture_tail() {
        // Count residuals beyond 0.5: P = 0.95 P(|N(0,0.1)|>0.5) + 0.05 P(|N(0,1)|>0.5).
        let n = 100_000;
        let d = gen_neal(n, 11);
        let exceed = d
            .xs
            .iter()
            .zip(&d.ys)
            .filter(|(x, y)| (*y - neal_f_true(**x)).abs() > 0.5)
            .count() as f64
            / n as f64;
        // P(|N(0,1)| > 0.5) = 0.6171; P(|N(0,0.1)| > 0.5) = P(|N(0,1)| > 5) ~ 5.7e-7.
        let expected = 0.95 * 5.7e-7 + 0.05 * 0.6171;
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!(
            (exceed - expected).abs() < 3.0 * se + 1e-3,
            "{exceed} vs {expected}"
        );
    }

    #[test]
    fn synthetic_generator_is_deterministic_and_sized() {
        let a = gen_lin_per_wn(60, 3);
        let b = gen_lin_per_wn(60, 3);
        assert_eq!(a.ys, b.ys);
        assert_eq!(a.len(), 60);
        assert!(a.ys.iter().all(|y| y.is_finite()));
    }
}
