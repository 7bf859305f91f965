//! Market and run configuration files (JSON or TOML, chosen by extension).

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::distributions::{GivenDensity, Kde, ValuationDistribution, VirtualDistribution};
use crate::error::{FairbidError, Result};
use crate::market::{FairnessSpec, MarketInstance};
use crate::matrix::Matrix;

/// Version stamped into every file this crate writes.
pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// One distribution cell as written in a market file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DistSpec {
    Exponential {
        rate: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    Lognormal {
        mu: f64,
        sigma: f64,
    },
    TruncatedNormal {
        mu: f64,
        sigma: f64,
        lo: f64,
        hi: f64,
    },
    Empirical {
        samples: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bandwidth: Option<f64>,
    },
    VirtualGiven(GivenDensity),
}

impl DistSpec {
    pub fn build(&self) -> Result<VirtualDistribution> {
        let valuation = match self {
            DistSpec::VirtualGiven(g) => return VirtualDistribution::virtual_given(g.clone()),
            DistSpec::Exponential { rate } => ValuationDistribution::Exponential { rate: *rate },
            DistSpec::Uniform { lo, hi } => ValuationDistribution::Uniform { lo: *lo, hi: *hi },
            DistSpec::Lognormal { mu, sigma } => ValuationDistribution::LogNormal { mu: *mu, sigma: *sigma },
            DistSpec::TruncatedNormal { mu, sigma, lo, hi } => ValuationDistribution::TruncatedNormal {
                mu: *mu,
                sigma: *sigma,
                lo: *lo,
                hi: *hi,
            },
            DistSpec::Empirical { samples, bandwidth } => {
                ValuationDistribution::Empirical(Kde::new(samples.clone(), *bandwidth)?)
            }
        };
        VirtualDistribution::from_valuation(valuation)
    }
}

/// Market file: instance plus optional fairness bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    pub type_prob: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advertisers: Option<Vec<String>>,
    pub dist: Vec<Vec<DistSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constrained: Option<Vec<bool>>,
}

impl MarketConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_file(path.as_ref())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = if is_toml(path) {
            toml::to_string_pretty(self).map_err(|e| FairbidError::Config(e.to_string()))?
        } else {
            serde_json::to_string_pretty(self).map_err(|e| FairbidError::Config(e.to_string()))?
        };
        std::fs::write(path, text).map_err(|e| FairbidError::io(path, e))
    }

    pub fn build_market(&self) -> Result<MarketInstance> {
        let n = self.dist.len();
        let m = self.type_prob.len();
        if self.n.is_some_and(|v| v != n) || self.m.is_some_and(|v| v != m) {
            return Err(FairbidError::Shape(format!(
                "declared n={:?}, m={:?} but dist is {n} x {m}",
                self.n, self.m
            )));
        }
        let mut dist = Vec::with_capacity(n);
        for (i, row) in self.dist.iter().enumerate() {
            let cells = row
                .iter()
                .enumerate()
                .map(|(j, spec)| {
                    spec.build().map_err(|e| match e {
                        FairbidError::Regularity { .. } | FairbidError::Parameter(_) => {
                            FairbidError::Config(format!("dist[{i}][{j}]: {e}"))
                        }
                        other => other,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            dist.push(cells);
        }
        match &self.advertisers {
            Some(names) => MarketInstance::with_names(self.type_prob.clone(), dist, names.clone()),
            None => MarketInstance::new(self.type_prob.clone(), dist),
        }
    }

    /// Bounds from the file; missing matrices default to `0` / `1`.
    pub fn fairness_spec(&self) -> Result<FairnessSpec> {
        let n = self.dist.len();
        let m = self.type_prob.len();
        let lower = match &self.lower {
            Some(rows) => Matrix::from_rows(rows)?,
            None => Matrix::zeros(n, m),
        };
        let upper = match &self.upper {
            Some(rows) => Matrix::from_rows(rows)?,
            None => Matrix::filled(n, m, 1.0),
        };
        let constrained = self.constrained.clone().unwrap_or_else(|| vec![true; n]);
        FairnessSpec::new(lower, upper, constrained)
    }
}

fn default_epsilon() -> f64 {
    1e-4
}

/// Solver overrides; unset values fall back to the estimated defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub xi: Option<f64>,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub inner_gamma: Option<f64>,
    #[serde(default)]
    pub inner_max_iters: Option<usize>,
    /// Coverage floor as a fraction of each type's probability.
    #[serde(default)]
    pub min_coverage: Option<f64>,
}

impl SolverSection {
    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or_else(default_epsilon)
    }
}

fn default_ell_grid() -> usize {
    11
}

fn default_ell_max() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_ell_grid")]
    pub ell_grid: usize,
    #[serde(default = "default_ell_max")]
    pub ell_max: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            ell_grid: default_ell_grid(),
            ell_max: default_ell_max(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    #[default]
    Lognormal,
    Kde,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeProbMode {
    #[default]
    Volume,
    Equal,
}

fn default_delimiter() -> char {
    ','
}
fn default_keyword_col() -> usize {
    0
}
fn default_advertiser_col() -> usize {
    1
}
fn default_bid_col() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_min_bids() -> usize {
    1000
}
fn default_min_variance() -> f64 {
    3e-3
}
fn default_min_win_rate() -> f64 {
    0.05
}
fn default_malformed() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    pub log: PathBuf,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_keyword_col")]
    pub keyword_col: usize,
    #[serde(default = "default_advertiser_col")]
    pub advertiser_col: usize,
    #[serde(default = "default_bid_col")]
    pub bid_col: usize,
    #[serde(default = "default_true")]
    pub has_header: bool,
    #[serde(default)]
    pub fit: FitMethod,
    #[serde(default)]
    pub type_prob: TypeProbMode,
    #[serde(default = "default_min_bids")]
    pub min_bids: usize,
    #[serde(default = "default_min_variance")]
    pub min_variance: f64,
    #[serde(default = "default_min_win_rate")]
    pub min_win_rate: f64,
    /// Largest tolerated fraction of malformed lines.
    #[serde(default = "default_malformed")]
    pub malformed_threshold: f64,
}

/// A run file driving the CLI subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub market: Option<PathBuf>,
    /// Shift matrix (an `alpha.json` from `solve`) used by `simulate`.
    #[serde(default)]
    pub alpha: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub samples: Option<u64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub ingest: Option<IngestSection>,
}

impl RunConfig {
    /// Loads the file and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: RunConfig = load_file(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.market.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.alpha.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.output_dir.as_mut() {
            resolve(p);
        }
        if let Some(ing) = cfg.ingest.as_mut() {
            resolve(&mut ing.log);
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.solver.epsilon() <= 0.0 || !self.solver.epsilon().is_finite() {
            return Err(FairbidError::Config("epsilon must be positive".into()));
        }
        for (name, v) in [
            ("gamma", self.solver.gamma),
            ("xi", self.solver.xi),
            ("inner_gamma", self.solver.inner_gamma),
        ] {
            if v.is_some_and(|x| !(x > 0.0 && x.is_finite())) {
                return Err(FairbidError::Config(format!("{name} must be positive")));
            }
        }
        if self.solver.min_coverage.is_some_and(|x| !(0.0..0.5).contains(&x)) {
            return Err(FairbidError::Config("min_coverage must lie in [0, 0.5)".into()));
        }
        if self.samples == Some(0) {
            return Err(FairbidError::Config("samples must be at least 1".into()));
        }
        if self.sweep.ell_grid < 1 {
            return Err(FairbidError::Config("ell_grid must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sweep.ell_max) {
            return Err(FairbidError::Config("ell_max must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn market_path(&self) -> Result<&Path> {
        self.market
            .as_deref()
            .ok_or_else(|| FairbidError::Config("run config has no market path".into()))
    }
}

fn is_toml(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"))
}

fn load_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| FairbidError::io(path, e))?;
    if is_toml(path) {
        toml::from_str(&text).map_err(|e| FairbidError::Config(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| FairbidError::Config(format!("{}: {e}", path.display())))
    }
}
