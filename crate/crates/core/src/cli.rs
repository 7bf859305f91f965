//! Batch front end: `solve`, `sweep`, `simulate`, `ingest` and `validate`.
//!
//! Every command reads a run file (`--config`), writes versioned JSON and
//! RFC-4180 CSV into the output directory, and maps errors onto exit codes
//! 1 (config), 2 (infeasible) and 3 (numeric).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{MarketConfig, RunConfig, SCHEMA_VERSION};
use crate::constants::AssumptionEstimates;
use crate::coverage::{coverage_of_shift, revenue_of_shift};
use crate::error::{FairbidError, Result};
use crate::ingest::{self, CellReport, FilterOutcome, FilterThresholds, KeywordPair, LogFormat};
use crate::market::{validate, FairnessSpec, MarketInstance, ShiftMatrix, Violation};
use crate::matrix::Matrix;
use crate::outer_solver::{self, OuterResult, OuterSolverConfig, ResolvedParameters};
use crate::simulator::{self, MechanismSummary, SimulationReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const DEFAULT_SAMPLES: u64 = 100_000;
const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(name = "fairbid", version, about = "Fairness-constrained revenue-optimal ad auctions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the optimal fair shifts.
    Solve(CommonArgs),
    /// Sweep a uniform lower bound and tabulate the fairness metrics.
    Sweep(CommonArgs),
    /// Monte-Carlo simulation of the shifted auction.
    Simulate(CommonArgs),
    /// Turn a bid log into market files.
    Ingest(CommonArgs),
    /// Check a run or market file.
    Validate(CommonArgs),
}

#[derive(Clone, Debug, Default, Args)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "N")]
    pub samples: Option<u64>,
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    #[arg(long = "ell-grid", value_name = "N")]
    pub ell_grid: Option<usize>,
}

pub fn exit_code(e: &FairbidError) -> i32 {
    match e {
        FairbidError::Infeasible(_) => EXIT_INFEASIBLE,
        FairbidError::Config(_)
        | FairbidError::Io { .. }
        | FairbidError::Parse { .. }
        | FairbidError::Csv(_)
        | FairbidError::Shape(_)
        | FairbidError::Parameter(_)
        | FairbidError::Regularity { .. }
        | FairbidError::UnknownKeyword(_) => EXIT_CONFIG,
        _ => EXIT_NUMERIC,
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Solve(a) => load(a).and_then(|c| cmd_solve(&c).map(|_| ())),
        Command::Sweep(a) => load(a).and_then(|c| cmd_sweep(&c, a.jobs).map(|_| ())),
        Command::Simulate(a) => load(a).and_then(|c| cmd_simulate(&c).map(|_| ())),
        Command::Ingest(a) => load(a).and_then(|c| cmd_ingest(&c).map(|_| ())),
        Command::Validate(a) => cmd_validate(&a.config).map(|_| ()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Loads the run file and applies command-line overrides.
pub fn load(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if args.out.is_some() {
        cfg.output_dir = args.out.clone();
    }
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if args.samples.is_some() {
        cfg.samples = args.samples;
    }
    if let Some(g) = args.ell_grid {
        cfg.sweep.ell_grid = g;
    }
    if args.jobs == Some(0) {
        return Err(FairbidError::Config("--jobs must be at least 1".into()));
    }
    cfg.check()?;
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| FairbidError::io(&dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| FairbidError::Numerical(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| FairbidError::io(path, e))
}

fn solver_config(cfg: &RunConfig) -> OuterSolverConfig {
    let s = &cfg.solver;
    let defaults = OuterSolverConfig::default();
    OuterSolverConfig {
        epsilon: s.epsilon(),
        gamma: s.gamma,
        xi: s.xi,
        max_iters: s.max_iters,
        inner_gamma: s.inner_gamma,
        inner_max_iters: s.inner_max_iters,
        min_coverage: s.min_coverage.unwrap_or(defaults.min_coverage),
        trace: None,
    }
}

fn load_market(cfg: &RunConfig) -> Result<(MarketConfig, MarketInstance)> {
    let mc = MarketConfig::load(cfg.market_path()?)?;
    let market = mc.build_market()?;
    Ok((mc, market))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlphaFile {
    pub schema_version: u32,
    pub advertisers: Vec<String>,
    pub alpha: Matrix,
}

#[derive(Clone, Debug, Serialize)]
pub struct CoverageFile {
    pub schema_version: u32,
    pub advertisers: Vec<String>,
    pub coverage: Matrix,
    /// Projected target the shifts were solved for.
    pub target: Matrix,
    pub proportional: Matrix,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveSummary {
    pub schema_version: u32,
    pub revenue: f64,
    pub revenue_unconstrained: f64,
    pub kappa: f64,
    pub iterations: usize,
    pub best_iter: usize,
    pub converged: bool,
    pub parameters: ResolvedParameters,
    pub estimates: AssumptionEstimates,
    pub warnings: Vec<String>,
}

fn warnings_of(violations: &[Violation]) -> Vec<String> {
    violations.iter().map(|v| v.message.clone()).collect()
}

fn solve_checked(market: &MarketInstance, spec: &FairnessSpec, cfg: &OuterSolverConfig) -> Result<(OuterResult, Vec<String>)> {
    let report = validate(market, spec)?;
    if let Some(v) = report.violations.iter().find(|v| v.infeasible) {
        return Err(FairbidError::Infeasible(v.message.clone()));
    }
    for v in &report.violations {
        log::warn!("{}", v.message);
    }
    Ok((outer_solver::solve(market, spec, cfg)?, warnings_of(&report.violations)))
}

/// Solves the market's own fairness bounds and writes `alpha.json`,
/// `coverage.json`, `summary.json` and `trace.csv`.
pub fn cmd_solve(cfg: &RunConfig) -> Result<SolveSummary> {
    let (mc, market) = load_market(cfg)?;
    let spec = mc.fairness_spec()?;
    let dir = output_dir(cfg)?;
    let (res, warnings) = solve_checked(&market, &spec, &solver_config(cfg))?;
    let zero = ShiftMatrix::zeros(market.n(), market.m());
    let rev_m = revenue_of_shift(&market, &zero)?;
    if !res.converged {
        log::warn!("outer solver stopped after {} iterations without settling", res.iterations);
    }
    let names = market.advertisers().to_vec();
    write_json(
        &dir.join("alpha.json"),
        &AlphaFile {
            schema_version: SCHEMA_VERSION,
            advertisers: names.clone(),
            alpha: res.alpha.matrix().clone(),
        },
    )?;
    write_json(
        &dir.join("coverage.json"),
        &CoverageFile {
            schema_version: SCHEMA_VERSION,
            advertisers: names,
            coverage: res.coverage.matrix().clone(),
            target: res.target.matrix().clone(),
            proportional: res.coverage.proportional(),
        },
    )?;
    outer_solver::write_trace(&dir.join("trace.csv"), &res.trace)?;
    let summary = SolveSummary {
        schema_version: SCHEMA_VERSION,
        revenue: res.revenue,
        revenue_unconstrained: rev_m,
        kappa: if rev_m != 0.0 { res.revenue / rev_m } else { f64::NAN },
        iterations: res.iterations,
        best_iter: res.best_iter,
        converged: res.converged,
        parameters: res.parameters,
        estimates: res.estimates,
        warnings,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    log::info!("revenue {:.6} (unconstrained {:.6})", summary.revenue, rev_m);
    Ok(summary)
}

/// One row of `sweep.csv`. Simulated columns are empty when no samples are
/// drawn; failed points keep `ell` and the error in `status`.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub ell: f64,
    pub kappa: Option<f64>,
    pub d_tv: Option<f64>,
    pub slift: Option<f64>,
    #[serde(rename = "revenue_F")]
    pub revenue_f: Option<f64>,
    #[serde(rename = "revenue_M")]
    pub revenue_m: Option<f64>,
    pub solver_iters: Option<usize>,
    pub kappa_sim: Option<f64>,
    pub d_tv_sim: Option<f64>,
    pub slift_sim: Option<f64>,
    pub converged: Option<bool>,
    pub status: String,
}

pub fn ell_grid(points: usize, ell_max: f64) -> Vec<f64> {
    if points <= 1 {
        return vec![0.0];
    }
    (0..points).map(|k| ell_max * k as f64 / (points - 1) as f64).collect()
}

struct Reference {
    exact: MechanismSummary,
    sim: Option<SimulationReport>,
}

fn sweep_point(market: &MarketInstance, cfg: &RunConfig, reference: &Reference, ell: f64) -> Result<SweepRow> {
    let spec = FairnessSpec::uniform_lower(market.n(), market.m(), ell);
    let (res, _) = solve_checked(market, &spec, &solver_config(cfg))?;
    let fair = MechanismSummary::exact(&res.coverage, res.revenue);
    let exact = simulator::metrics(&reference.exact, &fair)?;
    let mut row = SweepRow {
        ell,
        kappa: Some(exact.kappa),
        d_tv: Some(exact.d_tv),
        slift: Some(exact.slift),
        revenue_f: Some(res.revenue),
        revenue_m: Some(reference.exact.revenue),
        solver_iters: Some(res.iterations),
        converged: Some(res.converged),
        status: "ok".into(),
        ..Default::default()
    };
    if let Some(sim_m) = &reference.sim {
        let sim_f = simulator::simulate(market, &res.alpha, sim_m.samples, sim_m.seed)?;
        let s = simulator::metrics(&MechanismSummary::from(sim_m), &MechanismSummary::from(&sim_f))?;
        row.kappa_sim = Some(s.kappa);
        row.d_tv_sim = Some(s.d_tv);
        row.slift_sim = Some(s.slift);
    }
    Ok(row)
}

/// Solves every grid point (in parallel, up to `jobs` threads) and writes
/// `sweep.csv`. A failing point is recorded in its row and does not stop
/// the sweep.
pub fn cmd_sweep(cfg: &RunConfig, jobs: Option<usize>) -> Result<Vec<SweepRow>> {
    let (_, market) = load_market(cfg)?;
    if market.m() != 2 {
        log::warn!("sweep is defined for two types; using the same bound for all {} types", market.m());
    }
    let dir = output_dir(cfg)?;
    let zero = ShiftMatrix::zeros(market.n(), market.m());
    let q0 = coverage_of_shift(&market, &zero)?;
    let reference = Reference {
        exact: MechanismSummary::exact(&q0, revenue_of_shift(&market, &zero)?),
        sim: match cfg.samples {
            Some(s) => Some(simulator::simulate(&market, &zero, s, cfg.seed.unwrap_or(DEFAULT_SEED))?),
            None => None,
        },
    };
    let grid = ell_grid(cfg.sweep.ell_grid, cfg.sweep.ell_max);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| FairbidError::Config(e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        grid.par_iter()
            .map(|&ell| {
                sweep_point(&market, cfg, &reference, ell).unwrap_or_else(|e| {
                    log::error!("ell={ell}: {e}");
                    SweepRow {
                        ell,
                        revenue_m: Some(reference.exact.revenue),
                        status: format!("error({}): {e}", exit_code(&e)),
                        ..Default::default()
                    }
                })
            })
            .collect()
    });
    let path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| FairbidError::io(&path, e))?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulationFile {
    pub schema_version: u32,
    pub advertisers: Vec<String>,
    pub alpha: Matrix,
    pub exact_coverage: Matrix,
    pub exact_revenue: f64,
    #[serde(flatten)]
    pub report: SimulationReport,
}

/// Simulates the shifts in `alpha` (zeros when unset) and writes
/// `simulation.json`.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulationFile> {
    let (_, market) = load_market(cfg)?;
    let alpha = match &cfg.alpha {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| FairbidError::io(p, e))?;
            let file: AlphaFile =
                serde_json::from_str(&text).map_err(|e| FairbidError::Config(format!("{}: {e}", p.display())))?;
            ShiftMatrix::new(file.alpha)?
        }
        None => ShiftMatrix::zeros(market.n(), market.m()),
    };
    let dir = output_dir(cfg)?;
    let report = simulator::simulate(
        &market,
        &alpha,
        cfg.samples.unwrap_or(DEFAULT_SAMPLES),
        cfg.seed.unwrap_or(DEFAULT_SEED),
    )?;
    let file = SimulationFile {
        schema_version: SCHEMA_VERSION,
        advertisers: market.advertisers().to_vec(),
        alpha: alpha.matrix().clone(),
        exact_coverage: coverage_of_shift(&market, &alpha)?.matrix().clone(),
        exact_revenue: revenue_of_shift(&market, &alpha)?,
        report,
    };
    write_json(&dir.join("simulation.json"), &file)?;
    Ok(file)
}

#[derive(Clone, Debug, Serialize)]
pub struct IngestReport {
    pub schema_version: u32,
    pub records: usize,
    pub malformed: usize,
    pub thresholds: FilterThresholds,
    pub filters: Vec<FilterOutcome>,
    pub pairs: Vec<KeywordPair>,
    pub markets: Vec<IngestedMarket>,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct IngestedMarket {
    pub file: String,
    pub keywords: [String; 2],
    pub cells: Vec<CellReport>,
}

fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Parses, filters, pairs and fits; writes one market file per usable
/// keyword pair plus `ingest.json`. Fails if no market could be built.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestReport> {
    let section = cfg
        .ingest
        .as_ref()
        .ok_or_else(|| FairbidError::Config("run config has no [ingest] section".into()))?;
    let log = ingest::parse_log(&section.log, &LogFormat::from_section(section)?)?;
    let th = FilterThresholds {
        min_bids: section.min_bids,
        min_variance: section.min_variance,
        min_win_rate: section.min_win_rate,
    };
    let filters = log
        .keywords()
        .map(|k| ingest::filter_advertisers(&log, k, &th))
        .collect::<Result<Vec<_>>>()?;
    let sets: Vec<_> = filters
        .iter()
        .map(|f| (f.keyword.clone(), f.kept.iter().cloned().collect()))
        .collect();
    let pairs = ingest::pairs_from_sets(&sets);
    let dir = output_dir(cfg)?;
    let mut markets = Vec::new();
    let mut failures = Vec::new();
    for pair in &pairs {
        match ingest::fit_market(&log, pair, section.fit, section.type_prob) {
            Ok(fitted) => {
                let name = format!("market_{}__{}.json", file_stem(&pair.keyword_a), file_stem(&pair.keyword_b));
                fitted.config.save(dir.join(&name))?;
                markets.push(IngestedMarket {
                    file: name,
                    keywords: [pair.keyword_a.clone(), pair.keyword_b.clone()],
                    cells: fitted.cells,
                });
            }
            Err(e) => {
                log::warn!("pair ({}, {}): {e}", pair.keyword_a, pair.keyword_b);
                failures.push(format!("{} / {}: {e}", pair.keyword_a, pair.keyword_b));
            }
        }
    }
    let report = IngestReport {
        schema_version: SCHEMA_VERSION,
        records: log.len(),
        malformed: log.malformed(),
        thresholds: th,
        filters,
        pairs,
        markets,
        failures,
    };
    write_json(&dir.join("ingest.json"), &report)?;
    if report.markets.is_empty() {
        return Err(FairbidError::Fit("no keyword pair produced a market".into()));
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationSummary {
    pub n: usize,
    pub m: usize,
    pub warnings: Vec<String>,
}

/// Accepts a run file or a bare market file. Infeasible bounds fail with
/// exit code 2; other violations are reported as warnings.
pub fn cmd_validate(path: &Path) -> Result<ValidationSummary> {
    let mc = match RunConfig::load(path) {
        Ok(run) => {
            if let Some(section) = &run.ingest {
                LogFormat::from_section(section)?;
                if !section.log.exists() {
                    return Err(FairbidError::Config(format!("bid log {} not found", section.log.display())));
                }
            }
            match &run.market {
                Some(p) => MarketConfig::load(p)?,
                None => {
                    return Ok(ValidationSummary {
                        n: 0,
                        m: 0,
                        warnings: vec![],
                    })
                }
            }
        }
        Err(run_err) => MarketConfig::load(path).map_err(|_| run_err)?,
    };
    let market = mc.build_market()?;
    let report = validate(&market, &mc.fairness_spec()?)?;
    if let Some(v) = report.violations.iter().find(|v| v.infeasible) {
        return Err(FairbidError::Infeasible(v.message.clone()));
    }
    for v in &report.violations {
        log::warn!("{}", v.message);
    }
    Ok(ValidationSummary {
        n: market.n(),
        m: market.m(),
        warnings: warnings_of(&report.violations),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints() {
        assert_eq!(ell_grid(11, 0.5)[10], 0.5);
        assert_eq!(ell_grid(11, 0.5)[0], 0.0);
        assert_eq!(ell_grid(1, 0.5), vec![0.0]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&FairbidError::Infeasible("x".into())), EXIT_INFEASIBLE);
        assert_eq!(exit_code(&FairbidError::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&FairbidError::Numerical("x".into())), EXIT_NUMERIC);
    }

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from(["fairbid", "sweep", "--config", "a.toml", "--jobs", "2", "--ell-grid", "5"]).unwrap();
        match cli.command {
            Command::Sweep(a) => {
                assert_eq!(a.jobs, Some(2));
                assert_eq!(a.ell_grid, Some(5));
            }
            other => panic!("{other:?}"),
        }
    }
}
