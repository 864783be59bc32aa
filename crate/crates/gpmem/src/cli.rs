//! Command-line front-end: seeded, reproducible runs of the regression,
//! structure-discovery, query, and Bayesian-optimization workflows, plus the
//! hermetic dataset generators.
//!
//! Every output file embeds a schema version and the exact run configuration
//! so results can be replayed; identical configurations produce byte-identical
//! files.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bayesopt::{thompson_run, BayesOptConfig, SearchMode};
use crate::data::{gen_lin_per_wn, gen_neal, load_csv, Dataset};
use crate::error::{Error, Result};
use crate::gp::{posterior, sample_joint, GPModel};
use crate::inference::{nested_schedule, GpTarget, Schedule};
use crate::kernel::{format_kernel, parse_kernel, HyperParams, KernelExpr};
use crate::memo::tutorial_objective;
use crate::prior::PriorSpec;
use crate::structure::{
    parse_query, query_prob, run_structure_discovery, BaseKernelSet, DiscoveryConfig,
    PosteriorSampleSet,
};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Parser, Debug)]
#[command(name = "gpmem", version, about = "Gaussian-process memoization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptMode {
    Uniform,
    Drift,
    TauSearch,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Generator {
    Neal,
    LinPerWn,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Hierarchical GP regression with a nested inference schedule.
    Regress {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Inference schedule, e.g. repeat(100, do(mh(hyperhyper,2), mh(hyper,1)))
        #[arg(long)]
        schedule: Option<String>,
        /// Kernel text; overrides the default hierarchical SE+WN model.
        #[arg(long)]
        kernel: Option<String>,
        #[arg(long, default_value_t = 1)]
        chains: usize,
        /// Number of emulator sample paths to emit.
        #[arg(long, default_value_t = 5)]
        paths: usize,
    },
    /// Kernel-structure discovery over the stochastic grammar.
    Discover {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Outer repetitions of the discovery schedule.
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        chains: usize,
        /// Fraction of outer repetitions discarded as burn-in.
        #[arg(long, default_value_t = 0.25)]
        burn_in: f64,
    },
    /// Evaluate a Boolean structure query against a discovery sample log.
    Query {
        /// Path to a sample log produced by `discover`.
        #[arg(long)]
        samples: PathBuf,
        /// Query text, e.g. "WN OR LIN*WN".
        #[arg(long)]
        query: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Thompson-sampling Bayesian optimization.
    Optimize {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = OptMode::Uniform)]
        mode: OptMode,
        #[arg(long, default_value_t = 15)]
        iterations: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 10)]
        navg: usize,
        #[arg(long, default_value_t = 1.0)]
        drift_width: f64,
        /// `demo` for the built-in objective, or `cmd:<program>` to probe an
        /// external command (x on stdin, y on stdout).
        #[arg(long, default_value = "demo")]
        objective: String,
        /// MH steps per hyperparameter refresh.
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
    /// Generate a hermetic dataset as CSV.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        generator: Generator,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

/// Exit-code mapping: 0 success, 2 configuration error, 3 data error,
/// 4 numeric failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::UnresolvedParam(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Source { .. } => 3,
        Error::NonFinite { .. } | Error::NotPositiveDefinite { .. } | Error::Numeric { .. } => 4,
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct RunConfig {
    command: String,
    seed: u64,
    data: Option<String>,
    schedule: Option<String>,
    kernel: Option<String>,
    chains: Option<usize>,
    steps: Option<usize>,
    mode: Option<String>,
    iterations: Option<usize>,
    temperature: Option<f64>,
    navg: Option<usize>,
    drift_width: Option<f64>,
    objective: Option<String>,
    generator: Option<String>,
    n: Option<usize>,
    burn_in: Option<f64>,
    query: Option<String>,
}

impl RunConfig {
    fn new(command: &str, seed: u64) -> Self {
        RunConfig {
            command: command.to_string(),
            seed,
            data: None,
            schedule: None,
            kernel: None,
            chains: None,
            steps: None,
            mode: None,
            iterations: None,
            temperature: None,
            navg: None,
            drift_width: None,
            objective: None,
            generator: None,
            n: None,
            burn_in: None,
            query: None,
        }
    }
}

fn write_json(path: &Path, config: &RunConfig, result: &serde_json::Value) -> Result<()> {
    let doc = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "result": result,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("document serializes");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn csv_header(config: &RunConfig) -> String {
    format!(
        "# schema_version={}\n# config={}\n",
        SCHEMA_VERSION,
        serde_json::to_string(config).expect("config serializes")
    )
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Regress {
            seed,
            data,
            out,
            schedule,
            kernel,
            chains,
            paths,
        } => cmd_regress(seed, &data, &out, schedule, kernel, chains, paths),
        Cmd::Discover {
            seed,
            data,
            out,
            steps,
            chains,
            burn_in,
        } => cmd_discover(seed, &data, &out, steps, chains, burn_in),
        Cmd::Query {
            samples,
            query,
            out,
        } => cmd_query(&samples, &query, out.as_deref()),
        Cmd::Optimize {
            seed,
            out,
            mode,
            iterations,
            temperature,
            navg,
            drift_width,
            objective,
            steps,
        } => cmd_optimize(
            seed,
            &out,
            mode,
            iterations,
            temperature,
            navg,
            drift_width,
            &objective,
            steps,
        ),
        Cmd::GenData {
            seed,
            generator,
            n,
            out,
        } => cmd_gen_data(seed, generator, n, &out),
    }
}

/// The hierarchical robust-regression model: SE + WN kernel whose three
/// hyperparameters draw from Gamma priors with their own Gamma(5,1)
/// hyperpriors.
fn neal_model<R: Rng + ?Sized>(rng: &mut R) -> (KernelExpr, HyperParams) {
    let kernel = parse_kernel("SE(sf,l) + WN(sigma)").expect("fixed kernel parses");
    let mut params = HyperParams::new();
    let top = PriorSpec::gamma(5.0, 1.0);
    let lookup = |_: &str| None;
    for name in ["a_sf", "b_sf", "a_l", "b_l", "a_s", "b_s"] {
        let v = top.sample(rng, &lookup).expect("gamma sample");
        params.insert(name, v, "hyperhyper", top.clone());
    }
    for (name, shape, rate) in [
        ("sf", "a_sf", "b_sf"),
        ("l", "a_l", "b_l"),
        ("sigma", "a_s", "b_s"),
    ] {
        let prior = PriorSpec::Gamma {
            shape: shape.into(),
            rate: rate.into(),
        };
        let v = {
            let lookup = params.lookup_fn();
            prior.sample(rng, &lookup).expect("gamma sample")
        };
        params.insert(name, v, "hyper", prior);
    }
    (kernel, params)
}

/// Flat model for a user-supplied kernel: every named parameter gets a
/// Gamma(5,1) prior in scope "hyper".
fn flat_model<R: Rng + ?Sized>(kernel_text: &str, rng: &mut R) -> Result<(KernelExpr, HyperParams)> {
    let kernel = parse_kernel(kernel_text)?;
    let mut params = HyperParams::new();
    let prior = PriorSpec::gamma(5.0, 1.0);
    let lookup = |_: &str| None;
    for name in kernel.param_names() {
        if !params.contains(&name) {
            let v = prior.sample(rng, &lookup).expect("gamma sample");
            params.insert(&name, v, "hyper", prior.clone());
        }
    }
    Ok((kernel, params))
}

#[derive(Serialize)]
struct ChainResult {
    chain: usize,
    seed: u64,
    final_params: Vec<(String, f64)>,
    log_target_trace: Vec<f64>,
    transitions: Vec<(String, usize, usize)>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_regress(
    seed: u64,
    data: &Path,
    out: &Path,
    schedule_text: Option<String>,
    kernel_text: Option<String>,
    chains: usize,
    paths: usize,
) -> Result<()> {
    if chains == 0 {
        return Err(Error::Config("--chains must be at least 1".into()));
    }
    let dataset = load_csv(data)?;
    let schedule_text = schedule_text
        .unwrap_or_else(|| "repeat(100, do(mh(hyperhyper,2), mh(hyper,1)))".to_string());
    let schedule = Schedule::parse(&schedule_text)?;
    let mut config = RunConfig::new("regress", seed);
    config.data = Some(dataset.source.clone());
    config.schedule = Some(schedule_text.clone());
    config.kernel = kernel_text.clone();
    config.chains = Some(chains);

    std::fs::create_dir_all(out)?;
    let mut chain_results = Vec::new();
    let mut final_model: Option<(KernelExpr, HyperParams)> = None;
    for chain in 0..chains {
        let chain_seed = seed.wrapping_add(chain as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(chain_seed);
        let (kernel, mut params) = match &kernel_text {
            Some(text) => flat_model(text, &mut rng)?,
            None => neal_model(&mut rng),
        };
        let target = GpTarget {
            kernel: &kernel,
            xs: &dataset.xs,
            ys: &dataset.ys,
        };
        let report = nested_schedule(&schedule, &mut params, &target, &mut rng)?;
        chain_results.push(ChainResult {
            chain,
            seed: chain_seed,
            final_params: params.iter().map(|(n, e)| (n.to_string(), e.value)).collect(),
            log_target_trace: report.trace.clone(),
            transitions: report
                .transitions
                .iter()
                .map(|(s, st)| (s.clone(), st.proposed, st.accepted))
                .collect(),
        });
        if chain == 0 {
            final_model = Some((kernel, params));
        }
    }
    let (kernel, params) = final_model.expect("at least one chain");
    let model = GPModel::new(kernel.clone(), params.clone())?;

    // 201-point predictive grid over the data range: mean +/- 2 sd.
    let (lo, hi) = dataset
        .xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let grid: Vec<f64> = (0..201)
        .map(|i| lo + (hi - lo) * i as f64 / 200.0)
        .collect();
    let post = posterior(&model, &dataset.xs, &dataset.ys, &grid)?;
    let mut grid_csv = csv_header(&config);
    grid_csv.push_str("x,mean,lo,hi\n");
    for (i, &x) in grid.iter().enumerate() {
        let sd = post.cov[(i, i)].max(0.0).sqrt();
        grid_csv.push_str(&format!(
            "{x},{},{},{}\n",
            post.mean[i],
            post.mean[i] - 2.0 * sd,
            post.mean[i] + 2.0 * sd
        ));
    }
    std::fs::write(out.join("regress_grid.csv"), grid_csv)?;

    // Emulator sample paths on the same grid, drawn after the chains so the
    // path RNG stream is independent of chain count.
    let mut path_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70617468);
    let mut paths_csv = csv_header(&config);
    paths_csv.push_str("path,x,y\n");
    for p in 0..paths {
        let draw = sample_joint(&post, &mut path_rng)?;
        for (i, &x) in grid.iter().enumerate() {
            paths_csv.push_str(&format!("{p},{x},{}\n", draw[i]));
        }
    }
    std::fs::write(out.join("regress_paths.csv"), paths_csv)?;

    let result = serde_json::json!({
        "kernel": format_kernel(&kernel),
        "chains": chain_results,
    });
    write_json(&out.join("regress_params.json"), &config, &result)?;
    println!(
        "regress: {} chains, final log target {:.4}",
        chains,
        chain_results[0]
            .log_target_trace
            .last()
            .copied()
            .unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_discover(
    seed: u64,
    data: &Path,
    out: &Path,
    steps: usize,
    chains: usize,
    burn_in: f64,
) -> Result<()> {
    if chains == 0 {
        return Err(Error::Config("--chains must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&burn_in) {
        return Err(Error::Config("--burn-in must be in [0, 1)".into()));
    }
    let dataset = load_csv(data)?;
    let mut config = RunConfig::new("discover", seed);
    config.data = Some(dataset.source.clone());
    config.steps = Some(steps);
    config.chains = Some(chains);
    config.burn_in = Some(burn_in);
    std::fs::create_dir_all(out)?;

    let disc = DiscoveryConfig {
        outer: steps,
        burn_in_fraction: burn_in,
        ..DiscoveryConfig::default()
    };
    let mut merged = PosteriorSampleSet::default();
    for chain in 0..chains {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(chain as u64));
        let (bk, mut params) = BaseKernelSet::default_with_params(&mut rng);
        let set =
            run_structure_discovery(&dataset.xs, &dataset.ys, &bk, &mut params, &disc, &mut rng)?;
        merged = merged.merge(set);
    }

    let mut log = csv_header(&config);
    log.push_str(&merged.to_lines());
    std::fs::write(out.join("discover_samples.log"), log)?;

    let marginals = merged.marginals();
    let table: Vec<serde_json::Value> = marginals
        .iter()
        .map(|(s, p, ll)| {
            serde_json::json!({
                "structure": s.to_string(),
                "probability": p,
                "mean_log_likelihood": ll,
            })
        })
        .collect();
    let peak = &marginals[0];
    let peak_sample = merged
        .samples
        .iter()
        .filter(|s| s.structure == peak.0)
        .max_by(|a, b| a.log_lik.partial_cmp(&b.log_lik).unwrap())
        .expect("peak structure has samples");
    let result = serde_json::json!({
        "samples": merged.len(),
        "marginals": table,
        "peak": {
            "structure": peak.0.to_string(),
            "probability": peak.1,
            "kernel": format_kernel(&peak_sample.kernel),
            "theta": peak_sample.theta,
        },
    });
    write_json(&out.join("discover_marginals.json"), &config, &result)?;
    println!(
        "discover: {} samples, peak {} (p={:.3})",
        merged.len(),
        peak.0,
        peak.1
    );
    Ok(())
}

fn cmd_query(samples: &Path, query_text: &str, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(samples)?;
    let set = PosteriorSampleSet::from_lines(&text)?;
    let query = parse_query(query_text)?;
    let prob = query_prob(&query, &set)?;
    let mut per_term = Vec::new();
    for atom in query.atoms() {
        let p = query_prob(&crate::structure::QueryExpr::Term(atom.clone()), &set)?;
        per_term.push(serde_json::json!({ "term": atom.to_string(), "probability": p }));
    }
    let mut config = RunConfig::new("query", 0);
    config.data = Some(samples.display().to_string());
    config.query = Some(query_text.to_string());
    let result = serde_json::json!({
        "query": query_text,
        "probability": prob,
        "samples": set.len(),
        "terms": per_term,
    });
    let doc = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "result": result,
    });
    println!("{}", serde_json::to_string_pretty(&doc).expect("serializes"));
    if let Some(path) = out {
        std::fs::create_dir_all(path)?;
        write_json(&path.join("query_result.json"), &config, &result)?;
    }
    Ok(())
}

fn external_objective(program: String) -> impl FnMut(f64) -> Result<f64> {
    move |x| {
        let mut parts = program.split_whitespace();
        let bin = parts
            .next()
            .ok_or_else(|| Error::Config("empty objective command".into()))?;
        let mut child = Command::new(bin)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Source {
                x,
                message: format!("spawning `{program}`: {e}"),
            })?;
        child
            .stdin
            .as_mut()
            .expect("piped stdin")
            .write_all(format!("{x}\n").as_bytes())
            .map_err(|e| Error::Source {
                x,
                message: e.to_string(),
            })?;
        let output = child.wait_with_output().map_err(|e| Error::Source {
            x,
            message: e.to_string(),
        })?;
        if !output.status.success() {
            return Err(Error::Source {
                x,
                message: format!("objective exited with {}", output.status),
            });
        }
        let text = String::from_utf8_lossy(&output.stdout);
        text.split_whitespace()
            .next()
            .and_then(|t| t.parse::<f64>().ok())
            .ok_or_else(|| Error::Source {
                x,
                message: format!("objective output not a decimal literal: `{}`", text.trim()),
            })
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_optimize(
    seed: u64,
    out: &Path,
    mode: OptMode,
    iterations: usize,
    temperature: f64,
    navg: usize,
    drift_width: f64,
    objective: &str,
    update_steps: usize,
) -> Result<()> {
    if temperature <= 0.0 {
        return Err(Error::Config("--temperature must be positive".into()));
    }
    if navg == 0 {
        return Err(Error::Config("--navg must be at least 1".into()));
    }
    let mut config = RunConfig::new("optimize", seed);
    config.mode = Some(
        match mode {
            OptMode::Uniform => "uniform",
            OptMode::Drift => "drift",
            OptMode::TauSearch => "tau-search",
        }
        .to_string(),
    );
    config.iterations = Some(iterations);
    config.temperature = Some(temperature);
    config.navg = Some(navg);
    config.drift_width = Some(drift_width);
    config.objective = Some(objective.to_string());
    config.steps = Some(update_steps);
    std::fs::create_dir_all(out)?;

    let bo = BayesOptConfig {
        iterations,
        temperature,
        n_avg: navg,
        drift_width,
        update_steps,
        mode: match mode {
            OptMode::Uniform => SearchMode::UniformArgmax,
            OptMode::Drift => SearchMode::DriftArgmax,
            OptMode::TauSearch => SearchMode::TauSearch,
        },
        ..BayesOptConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run_result = if objective == "demo" {
        let mut f = |x: f64| Ok(tutorial_objective(x));
        thompson_run(&mut f, &bo, &mut rng)
    } else if let Some(program) = objective.strip_prefix("cmd:") {
        let mut f = external_objective(program.to_string());
        thompson_run(&mut f, &bo, &mut rng)
    } else {
        return Err(Error::Config(format!(
            "unknown objective `{objective}`; expected `demo` or `cmd:<program>`"
        )));
    };
    // Flush whatever trace exists even if the run aborted.
    let trace = match run_result {
        Ok(t) => t,
        Err(e) => {
            let mut partial = csv_header(&config);
            partial.push_str("iteration,action,reward,sigma,ell,best_action,best_reward,grid_argmax\n");
            std::fs::write(out.join("optimize_trace.csv"), partial)?;
            return Err(e);
        }
    };

    let mut trace_csv = csv_header(&config);
    trace_csv.push_str("iteration,action,reward,sigma,ell,best_action,best_reward,grid_argmax\n");
    for r in &trace.records {
        trace_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
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
    std::fs::write(out.join("optimize_trace.csv"), trace_csv)?;

    let result = serde_json::json!({
        "iterations_completed": trace.records.len(),
        "aborted_iterations": trace
            .aborted_iterations
            .iter()
            .map(|(i, m)| serde_json::json!({"iteration": i, "message": m}))
            .collect::<Vec<_>>(),
        "best": trace.records.last().map(|r| serde_json::json!({
            "action": r.best_action,
            "reward": r.best_reward,
            "grid_argmax": r.grid_argmax,
        })),
    });
    write_json(&out.join("optimize_summary.json"), &config, &result)?;
    if let Some(r) = trace.records.last() {
        println!(
            "optimize: best action {:.4} with reward {:.4}",
            r.best_action, r.best_reward
        );
    } else {
        println!("optimize: no completed iterations");
    }
    Ok(())
}

fn cmd_gen_data(seed: u64, generator: Generator, n: usize, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let (dataset, name): (Dataset, &str) = match generator {
        Generator::Neal => (gen_neal(n, seed), "neal"),
        Generator::LinPerWn => (gen_lin_per_wn(n, seed), "lin_per_wn"),
    };
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("gen_{name}.csv"));
    dataset.save(&path)?;
    println!("gen-data: wrote {} rows to {}", dataset.len(), path.display());
    Ok(())
}
