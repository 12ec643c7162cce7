//! Command-line driver: argument parsing, worker-thread configuration,
//! result records and their JSONL/CSV serialization.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::couple;
use crate::engine::{self, collect_blocks, substream};
use crate::error::{Error, Result};
use crate::estimate::{self, BlockHistogram};
use crate::model::ModelParams;
use crate::stats::{self, Estimate, Method};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Jsonl,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "dynperc", version, about = "Biased random walk on dynamical percolation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate speed, diffusivity and derivative at one parameter point.
    Simulate(SimulateConfig),
    /// One record per cell of a lambda and/or (p, mu) grid.
    Sweep(SweepConfig),
    /// Run the verification suites; nonzero exit if a hard check fails.
    Verify(VerifyConfig),
    /// Whole speed curve from one unbiased block sample.
    Curve(CurveConfig),
    /// Derivative of the speed by coupled finite differences.
    #[command(name = "couple-derivative")]
    CoupleDerivative(CoupleDerivativeConfig),
    /// Monotone coupling of two 1-d walks in a shared environment.
    #[command(name = "couple-monotone-1d")]
    CoupleMonotone1d(CoupleMonotoneConfig),
}

#[derive(Debug, Clone, Args)]
pub struct CommonOpts {
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long, default_value_t = 0.5)]
    pub p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; overrides DYNPERC_THREADS. Results do not depend on
    /// this beyond wall time.
    #[arg(long)]
    pub replicas: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Jsonl)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateConfig {
    #[command(flatten)]
    pub common: CommonOpts,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 100_000)]
    pub blocks: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SweepConfig {
    #[command(flatten)]
    pub common: CommonOpts,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 20_000)]
    pub blocks: usize,
    /// Comma-separated, strictly increasing lambda values.
    #[arg(long = "lambda-grid", value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    /// Comma-separated, strictly increasing p values.
    #[arg(long = "p-grid", value_delimiter = ',')]
    pub p_grid: Option<Vec<f64>>,
    /// Comma-separated, strictly increasing mu values.
    #[arg(long = "mu-grid", value_delimiter = ',')]
    pub mu_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyConfig {
    #[command(flatten)]
    pub common: CommonOpts,
    /// all, regen, tails, identities or einstein.
    #[arg(long, default_value = "all")]
    pub suite: String,
    /// Block budget per check.
    #[arg(long, default_value_t = 50_000)]
    pub blocks: usize,
}

#[derive(Debug, Clone, Args)]
pub struct CurveConfig {
    #[command(flatten)]
    pub common: CommonOpts,
    #[arg(long, default_value_t = 100_000)]
    pub blocks: usize,
    /// Lambdas at which to evaluate the curve.
    #[arg(long = "lambda-grid", value_delimiter = ',', required = true)]
    pub lambda_grid: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct CoupleDerivativeConfig {
    #[command(flatten)]
    pub common: CommonOpts,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.05)]
    pub eps: f64,
    #[arg(long, default_value_t = 100_000)]
    pub blocks: usize,
}

#[derive(Debug, Clone, Args)]
pub struct CoupleMonotoneConfig {
    #[command(flatten)]
    pub common: CommonOpts,
    #[arg(long, default_value_t = 0.5)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 50_000)]
    pub blocks: usize,
}

/// One named estimate inside a [`ResultRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedEstimate {
    pub name: String,
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
    pub method: Method,
}

impl NamedEstimate {
    pub fn new(name: &str, e: Estimate) -> Self {
        Self {
            name: name.to_string(),
            value: e.value,
            stderr: e.stderr,
            n: e.n,
            method: e.method,
        }
    }
}

/// Result of one pass/fail check of the verification suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// One output record; serialized as one JSON line or a group of CSV rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub cmd: String,
    pub params: ModelParams,
    pub estimates: Vec<NamedEstimate>,
    pub seed: u64,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checks: Option<Vec<CheckResult>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl ResultRecord {
    fn new(cmd: &str, params: ModelParams, seed: u64) -> Self {
        Self {
            cmd: cmd.to_string(),
            params,
            estimates: Vec::new(),
            seed,
            version: VERSION.to_string(),
            blocks: None,
            eps: None,
            error: None,
            checks: None,
            wall_time_s: None,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .ok()
                .map(|d| d.as_secs()),
        }
    }

    fn assert_finite(&self) {
        for e in &self.estimates {
            assert!(
                e.value.is_finite() && e.stderr.is_finite(),
                "non-finite estimate {}",
                e.name
            );
        }
    }
}

/// Number of worker threads: flag wins over DYNPERC_THREADS, which wins
/// over the rayon default.
pub fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        if n < 1 {
            return Err(Error::InvalidParams("replicas must be >= 1".into()));
        }
        return Ok(Some(n));
    }
    match std::env::var("DYNPERC_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| Error::InvalidParams(format!("bad DYNPERC_THREADS value {v:?}")))?;
            if n < 1 {
                return Err(Error::InvalidParams("DYNPERC_THREADS must be >= 1".into()));
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn configure_thread_pool(flag: Option<usize>) -> Result<()> {
    if let Some(n) = resolve_threads(flag)? {
        // a second invocation in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn validate_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidParams(format!("{name} grid is empty")));
    }
    if !grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidParams(format!(
            "{name} grid must be strictly increasing: {grid:?}"
        )));
    }
    Ok(())
}

fn tail_estimate(samples: &[f64], rng_seed: (u64, u64)) -> Option<Estimate> {
    let mut rng = substream(rng_seed.0, engine::streams::BOOTSTRAP, rng_seed.1);
    match stats::fit_tail_exponent(samples, &mut rng) {
        Ok((slope, (lo, hi))) => Some(Estimate::new(
            slope,
            // map the bootstrap 95% interval back to one standard error
            ((hi - lo) / 3.92).max(0.0),
            samples.len(),
            Method::Identity,
        )),
        Err(_) => None,
    }
}

pub fn cmd_simulate(config: &SimulateConfig) -> Result<ResultRecord> {
    let params = ModelParams::new(config.common.d, config.common.p, config.common.mu, config.lambda)?;
    let seed = config.common.seed;
    let start = Instant::now();
    let blocks = collect_blocks(&params, config.blocks, seed)?;
    let mut record = ResultRecord::new("simulate", params, seed);
    record.blocks = Some(config.blocks);
    record
        .estimates
        .push(NamedEstimate::new("speed", estimate::estimate_speed_direct(&blocks)?));
    let mut boot_rng = substream(seed, engine::streams::BOOTSTRAP, 0);
    record.estimates.push(NamedEstimate::new(
        "sigma2",
        estimate::estimate_sigma2(&blocks, &mut boot_rng)?,
    ));
    record.estimates.push(NamedEstimate::new(
        "speed_derivative",
        estimate::estimate_derivative_formula(&blocks, &params, &mut boot_rng)?,
    ));
    let taus: Vec<f64> = blocks.iter().map(|b| b.tau).collect();
    let (tau_mean, tau_se) = stats::mean_stderr(&taus);
    record.estimates.push(NamedEstimate::new(
        "mean_tau",
        Estimate::new(tau_mean, tau_se, blocks.len(), Method::Direct),
    ));
    if let Some(e) = tail_estimate(&taus, (seed, 1)) {
        record.estimates.push(NamedEstimate::new("tau_tail_slope", e));
    }
    let uas: Vec<f64> = blocks.iter().map(|b| b.u_a as f64).collect();
    if let Some(e) = tail_estimate(&uas, (seed, 2)) {
        record.estimates.push(NamedEstimate::new("ua_tail_slope", e));
    }
    record.wall_time_s = Some(start.elapsed().as_secs_f64());
    record.assert_finite();
    Ok(record)
}

pub fn cmd_sweep(config: &SweepConfig) -> Result<Vec<ResultRecord>> {
    let lambdas = match &config.lambda_grid {
        Some(g) => {
            validate_grid("lambda", g)?;
            g.clone()
        }
        None => vec![config.lambda],
    };
    let ps = match &config.p_grid {
        Some(g) => {
            validate_grid("p", g)?;
            g.clone()
        }
        None => vec![config.common.p],
    };
    let mus = match &config.mu_grid {
        Some(g) => {
            validate_grid("mu", g)?;
            g.clone()
        }
        None => vec![config.common.mu],
    };
    let seed = config.common.seed;
    let mut records = Vec::new();
    for &p in &ps {
        for &mu in &mus {
            for &lambda in &lambdas {
                let start = Instant::now();
                let params = ModelParams::new(config.common.d, p, mu, lambda)?;
                let mut record = ResultRecord::new("sweep", params, seed);
                record.blocks = Some(config.blocks);
                match collect_blocks(&params, config.blocks, seed)
                    .and_then(|blocks| estimate::estimate_speed_direct(&blocks).map(|e| (blocks, e)))
                {
                    Ok((blocks, speed)) => {
                        record.estimates.push(NamedEstimate::new("speed", speed));
                        let taus: Vec<f64> = blocks.iter().map(|b| b.tau).collect();
                        let (m, se) = stats::mean_stderr(&taus);
                        record.estimates.push(NamedEstimate::new(
                            "mean_tau",
                            Estimate::new(m, se, blocks.len(), Method::Direct),
                        ));
                        record.assert_finite();
                    }
                    Err(err) => {
                        // record the failed cell and keep sweeping
                        record.error = Some(err.to_string());
                    }
                }
                record.wall_time_s = Some(start.elapsed().as_secs_f64());
                records.push(record);
            }
        }
    }
    Ok(records)
}

pub fn cmd_curve(config: &CurveConfig) -> Result<ResultRecord> {
    validate_grid("lambda", &config.lambda_grid)?;
    let params = ModelParams::new(config.common.d, config.common.p, config.common.mu, 0.0)?;
    if config
        .lambda_grid
        .iter()
        .any(|&l| l > estimate::IMPORTANCE_LAMBDA_WARN)
    {
        eprintln!(
            "warning: reweighting from unbiased blocks degrades for lambda > {}",
            estimate::IMPORTANCE_LAMBDA_WARN
        );
    }
    let seed = config.common.seed;
    let start = Instant::now();
    let blocks = collect_blocks(&params, config.blocks, seed)?;
    let hist = BlockHistogram::from_blocks(&blocks);
    let taus: Vec<f64> = blocks.iter().map(|b| b.tau).collect();
    let mean_tau = stats::mean(&taus);
    let curve = estimate::speed_curve_from_unbiased(&hist, mean_tau, params.d, &config.lambda_grid)?;
    let mut record = ResultRecord::new("curve", params, seed);
    record.blocks = Some(config.blocks);
    for point in &curve {
        record.estimates.push(NamedEstimate::new(
            &format!("speed@{}", point.lambda),
            point.speed,
        ));
        record.estimates.push(NamedEstimate::new(
            &format!("speed_derivative@{}", point.lambda),
            point.derivative,
        ));
    }
    record.wall_time_s = Some(start.elapsed().as_secs_f64());
    record.assert_finite();
    Ok(record)
}

pub fn cmd_couple_derivative(config: &CoupleDerivativeConfig) -> Result<ResultRecord> {
    let params = ModelParams::new(config.common.d, config.common.p, config.common.mu, config.lambda)?;
    let seed = config.common.seed;
    let start = Instant::now();
    let blocks = couple::collect_coupled_blocks(&params, config.eps, config.blocks, seed)?;
    let mut record = ResultRecord::new("couple-derivative", params, seed);
    record.blocks = Some(config.blocks);
    record.eps = Some(config.eps);
    record.estimates.push(NamedEstimate::new(
        "speed_derivative",
        couple::estimate_derivative_coupled(&blocks, config.eps)?,
    ));
    let taus: Vec<f64> = blocks.iter().map(|b| b.lo.tau).collect();
    let (m, se) = stats::mean_stderr(&taus);
    record.estimates.push(NamedEstimate::new(
        "mean_tau",
        Estimate::new(m, se, blocks.len(), Method::Direct),
    ));
    let n = blocks.len() as f64;
    let frac = blocks
        .iter()
        .filter(|b| b.first_very_bad_index.is_some())
        .count() as f64
        / n;
    record.estimates.push(NamedEstimate::new(
        "very_bad_fraction",
        Estimate::new(
            frac,
            (frac * (1.0 - frac) / n).sqrt(),
            blocks.len(),
            Method::Direct,
        ),
    ));
    record.wall_time_s = Some(start.elapsed().as_secs_f64());
    record.assert_finite();
    Ok(record)
}

pub fn cmd_couple_monotone_1d(config: &CoupleMonotoneConfig) -> Result<ResultRecord> {
    let (p, mu) = (config.common.p, config.common.mu);
    let params = ModelParams::new(1, p, mu, config.lambda1)?;
    let seed = config.common.seed;
    let start = Instant::now();
    let pairs =
        couple::collect_monotone_pairs(p, mu, config.lambda1, config.lambda2, config.blocks, seed)?;
    let mut record = ResultRecord::new("couple-monotone-1d", params, seed);
    record.blocks = Some(config.blocks);
    let gaps: Vec<f64> = pairs
        .iter()
        .map(|pr| (pr.disp_hi - pr.disp_lo) as f64)
        .collect();
    let (gap_mean, gap_se) = stats::mean_stderr(&gaps);
    record.estimates.push(NamedEstimate::new(
        "mean_gap",
        Estimate::new(gap_mean, gap_se, pairs.len(), Method::Direct),
    ));
    let n = pairs.len() as f64;
    let frac = pairs.iter().filter(|pr| pr.separated).count() as f64 / n;
    record.estimates.push(NamedEstimate::new(
        "separation_prob",
        Estimate::new(
            frac,
            (frac * (1.0 - frac) / n).sqrt(),
            pairs.len(),
            Method::Direct,
        ),
    ));
    record.estimates.push(NamedEstimate::new(
        "separation_lower_bound",
        Estimate::new(
            couple::monotone_separation_bound(mu, config.lambda1, config.lambda2),
            0.0,
            pairs.len(),
            Method::Identity,
        ),
    ));
    let taus: Vec<f64> = pairs.iter().map(|pr| pr.tau).collect();
    let (m, se) = stats::mean_stderr(&taus);
    record.estimates.push(NamedEstimate::new(
        "mean_tau",
        Estimate::new(m, se, pairs.len(), Method::Direct),
    ));
    record.wall_time_s = Some(start.elapsed().as_secs_f64());
    record.assert_finite();
    Ok(record)
}

fn check(name: &str, passed: bool, detail: String, checks: &mut Vec<CheckResult>) {
    println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    checks.push(CheckResult {
        name: name.to_string(),
        passed,
        detail,
    });
}

fn verify_regen(blocks: usize, seed: u64, checks: &mut Vec<CheckResult>) -> Result<()> {
    for mu in [0.5, 1.0, 2.0] {
        let params = ModelParams::new(2, 0.5, mu, 1.0)?;
        let sample = collect_blocks(&params, blocks, seed)?;
        let taus: Vec<f64> = sample.iter().map(|b| b.tau).collect();
        let (m, se) = stats::mean_stderr(&taus);
        let expected = (1.0f64 / mu).exp();
        check(
            &format!("regen-mean-tau-mu-{mu}"),
            (m - expected).abs() <= 3.0 * se,
            format!("mean {m:.5} vs e^(1/mu) {expected:.5} (se {se:.5})"),
            checks,
        );
    }
    Ok(())
}

fn verify_tails(blocks: usize, seed: u64, checks: &mut Vec<CheckResult>) -> Result<()> {
    let blocks = blocks.max(10_000);
    let slope_of = |mu: f64, sub: u64| -> Result<(f64, (f64, f64), Vec<f64>, Vec<f64>)> {
        let params = ModelParams::new(2, 0.5, mu, 1.0)?;
        let sample = collect_blocks(&params, blocks, seed + sub)?;
        let taus: Vec<f64> = sample.iter().map(|b| b.tau).collect();
        let uas: Vec<f64> = sample.iter().map(|b| b.u_a as f64).collect();
        let mut rng = substream(seed, engine::streams::BOOTSTRAP, 10 + sub);
        let fit = stats::fit_tail_exponent(&taus, &mut rng)?;
        Ok((fit.0, fit.1, taus, uas))
    };
    let (tau_slope, (_, tau_hi), _, uas1) = slope_of(1.0, 0)?;
    check(
        "tails-tau-exponential",
        tau_slope < 0.0 && tau_hi < 0.0,
        format!("slope {tau_slope:.4}, CI upper {tau_hi:.4}"),
        checks,
    );
    let mut rng = substream(seed, engine::streams::BOOTSTRAP, 20);
    let (ua1_slope, (_, ua1_hi)) = stats::fit_tail_exponent(&uas1, &mut rng)?;
    check(
        "tails-ua-exponential",
        ua1_slope < 0.0 && ua1_hi < 0.0,
        format!("slope {ua1_slope:.4}, CI upper {ua1_hi:.4}"),
        checks,
    );
    let (_, _, _, uas4) = slope_of(4.0, 1)?;
    let mut rng = substream(seed, engine::streams::BOOTSTRAP, 21);
    let (ua4_slope, _) = stats::fit_tail_exponent(&uas4, &mut rng)?;
    check(
        "tails-ua-steepen-with-mu",
        ua4_slope < ua1_slope,
        format!("slope(mu=4) {ua4_slope:.4} < slope(mu=1) {ua1_slope:.4}"),
        checks,
    );
    Ok(())
}

fn verify_identities(blocks: usize, seed: u64, checks: &mut Vec<CheckResult>) -> Result<()> {
    let n = blocks.min(100_000);
    for lambda in [0.5, 1.0] {
        let params = ModelParams::new(2, 0.5, 1.0, lambda)?;
        let est = estimate::check_martingale_identity(&params, 20.0, n, seed)?;
        check(
            &format!("identity-martingale-lambda-{lambda}"),
            est.within(1.0, 3.0),
            format!("mean {:.5} (se {:.5}), target 1", est.value, est.stderr),
            checks,
        );
    }
    let params = ModelParams::new(2, 0.5, 1.0, 0.0)?;
    let est = estimate::check_orthogonality(&params, 20.0, n, seed)?;
    check(
        "identity-orthogonality",
        est.within(0.0, 3.0),
        format!("mean {:.5} (se {:.5}), target 0", est.value, est.stderr),
        checks,
    );
    Ok(())
}

fn verify_einstein(blocks: usize, seed: u64, checks: &mut Vec<CheckResult>) -> Result<()> {
    let params = ModelParams::new(2, 0.5, 1.0, 0.0)?;
    let sample = collect_blocks(&params, blocks, seed)?;
    let mut rng = substream(seed, engine::streams::BOOTSTRAP, 30);
    let sigma2 = estimate::estimate_sigma2(&sample, &mut rng)?;
    let deriv = estimate::estimate_derivative_formula(&sample, &params, &mut rng)?;
    let combined = (sigma2.stderr.powi(2) + deriv.stderr.powi(2)).sqrt();
    check(
        "einstein-derivative-vs-sigma2",
        (deriv.value - sigma2.value).abs() <= 3.0 * combined,
        format!(
            "v'(0) {:.5} vs sigma2 {:.5} (combined se {combined:.5})",
            deriv.value, sigma2.value
        ),
        checks,
    );
    Ok(())
}

/// Runs the selected verification suite; `Ok(false)` means a check failed.
pub fn cmd_verify(config: &VerifyConfig) -> Result<(ResultRecord, bool)> {
    let seed = config.common.seed;
    let start = Instant::now();
    let mut checks = Vec::new();
    let suite = config.suite.as_str();
    let known = ["all", "regen", "tails", "identities", "einstein"];
    if !known.contains(&suite) {
        return Err(Error::InvalidParams(format!(
            "unknown suite {suite:?}; expected one of {known:?}"
        )));
    }
    if suite == "all" || suite == "regen" {
        verify_regen(config.blocks, seed, &mut checks)?;
    }
    if suite == "all" || suite == "tails" {
        verify_tails(config.blocks, seed, &mut checks)?;
    }
    if suite == "all" || suite == "identities" {
        verify_identities(config.blocks, seed, &mut checks)?;
    }
    if suite == "all" || suite == "einstein" {
        verify_einstein(config.blocks, seed, &mut checks)?;
    }
    let all_passed = checks.iter().all(|c| c.passed);
    let params = ModelParams::new(2, 0.5, 1.0, 1.0)?;
    let mut record = ResultRecord::new("verify", params, seed);
    record.blocks = Some(config.blocks);
    record.checks = Some(checks);
    record.wall_time_s = Some(start.elapsed().as_secs_f64());
    Ok((record, all_passed))
}

/// Serializes records as JSON lines.
pub fn render_jsonl(records: &[ResultRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Flat CSV mirror: one row per estimate, numeric values identical to the
/// JSONL encoding.
pub fn render_csv(records: &[ResultRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "cmd", "d", "p", "mu", "lambda", "name", "value", "stderr", "n", "method", "seed",
    ])?;
    for r in records {
        for e in &r.estimates {
            let method = serde_json::to_value(e.method)?
                .as_str()
                .expect("method serializes to a string")
                .to_string();
            w.write_record([
                r.cmd.clone(),
                r.params.d.to_string(),
                format_f64(r.params.p),
                format_f64(r.params.mu),
                format_f64(r.params.lambda),
                e.name.clone(),
                format_f64(e.value),
                format_f64(e.stderr),
                e.n.to_string(),
                method,
                r.seed.to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Shortest representation that parses back to the same f64, matching what
/// the JSONL encoder emits.
fn format_f64(x: f64) -> String {
    let mut buf = ryu_format(x);
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(x: f64) -> String {
    // serde_json uses the same shortest round-trip representation
    serde_json::to_string(&x).expect("finite float")
}

fn emit(records: &[ResultRecord], format: OutputFormat, out: &Option<PathBuf>) -> Result<()> {
    let payload = match format {
        OutputFormat::Jsonl => render_jsonl(records)?,
        OutputFormat::Csv => render_csv(records)?,
    };
    match out {
        Some(path) => std::fs::write(path, payload)?,
        None => std::io::stdout().write_all(payload.as_bytes())?,
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidParams(_) => 2,
        Error::Censored { .. } => 3,
        _ => 1,
    }
}

/// Runs a parsed invocation and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = (|| -> Result<i32> {
        match &cli.command {
            Command::Simulate(c) => {
                configure_thread_pool(c.common.replicas)?;
                let record = cmd_simulate(c)?;
                emit(&[record], c.common.format, &c.common.out)?;
                Ok(0)
            }
            Command::Sweep(c) => {
                configure_thread_pool(c.common.replicas)?;
                let records = cmd_sweep(c)?;
                emit(&records, c.common.format, &c.common.out)?;
                Ok(0)
            }
            Command::Verify(c) => {
                configure_thread_pool(c.common.replicas)?;
                let (record, passed) = cmd_verify(c)?;
                emit(&[record], c.common.format, &c.common.out)?;
                Ok(if passed { 0 } else { 1 })
            }
            Command::Curve(c) => {
                configure_thread_pool(c.common.replicas)?;
                let record = cmd_curve(c)?;
                emit(&[record], c.common.format, &c.common.out)?;
                Ok(0)
            }
            Command::CoupleDerivative(c) => {
                configure_thread_pool(c.common.replicas)?;
                let record = cmd_couple_derivative(c)?;
                emit(&[record], c.common.format, &c.common.out)?;
                Ok(0)
            }
            Command::CoupleMonotone1d(c) => {
                configure_thread_pool(c.common.replicas)?;
                let record = cmd_couple_monotone_1d(c)?;
                emit(&[record], c.common.format, &c.common.out)?;
                Ok(0)
            }
        }
    })();
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}
