//! Valuation distributions and the distribution of their virtual valuations.
//!
//! A [`VirtualDistribution`] is what the rest of the crate consumes: the
//! density `f`, CDF `F` and inverse map of the virtual value `phi(V)`. It is
//! built either from a [`ValuationDistribution`] by change of variables or
//! directly from a density given in virtual space.

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{FairbidError, Result};
use crate::quadrature::{integrate_segments, QuadratureRule};

/// Lower truncation quantile used for infinite supports.
pub const TRUNCATION_LO: f64 = 1e-10;
/// Upper truncation quantile used for infinite supports.
pub const TRUNCATION_HI: f64 = 1.0 - 1e-10;

/// Grid size used when a constructor checks strict regularity.
const REGULARITY_GRID: usize = 512;
const BISECTION_TOL: f64 = 1e-12;

fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn norm_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

fn norm_ppf(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Bisection for an increasing `f` on `[lo, hi]`; returns `x` with `f(x) ~ target`.
fn bisect_increasing(f: impl Fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= tol || mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Gaussian kernel density estimate over a bid sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Kde {
    samples: Vec<f64>,
    bandwidth: f64,
}

impl Kde {
    /// `bandwidth = None` selects Silverman's rule of thumb.
    pub fn new(samples: Vec<f64>, bandwidth: Option<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(FairbidError::Parameter("empirical sample list is empty".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(FairbidError::Parameter("empirical sample contains non-finite values".into()));
        }
        let bandwidth = match bandwidth {
            Some(h) => h,
            None => silverman_bandwidth(&samples),
        };
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(FairbidError::Parameter(format!("kernel bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Kde { samples, bandwidth })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    fn pdf(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        self.samples.iter().map(|s| norm_pdf((x - s) / h)).sum::<f64>() / (self.samples.len() as f64 * h)
    }

    fn cdf(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        self.samples.iter().map(|s| norm_cdf((x - s) / h)).sum::<f64>() / self.samples.len() as f64
    }

    fn sf(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        self.samples.iter().map(|s| norm_sf((x - s) / h)).sum::<f64>() / self.samples.len() as f64
    }

    fn bracket(&self) -> (f64, f64) {
        let (mn, mx) = self
            .samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        (mn - 40.0 * self.bandwidth, mx + 40.0 * self.bandwidth)
    }
}

/// `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`, falling back to `sd` when the IQR is zero.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let idx = p * (n - 1.0);
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (idx - lo as f64)
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Distribution of an advertiser's valuation for one user type.
#[derive(Clone, Debug, PartialEq)]
pub enum ValuationDistribution {
    Exponential { rate: f64 },
    Uniform { lo: f64, hi: f64 },
    LogNormal { mu: f64, sigma: f64 },
    TruncatedNormal { mu: f64, sigma: f64, lo: f64, hi: f64 },
    Empirical(Kde),
}

/// Outcome of [`ValuationDistribution::check_strict_regularity`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularityReport {
    pub regular: bool,
    /// First grid valuation at which `phi` failed to increase.
    pub violation: Option<f64>,
}

impl ValuationDistribution {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FairbidError::Parameter(msg));
        match *self {
            ValuationDistribution::Exponential { rate } if !(rate > 0.0 && rate.is_finite()) => {
                bad(format!("exponential rate must be positive, got {rate}"))
            }
            ValuationDistribution::Uniform { lo, hi } if !(lo < hi && lo.is_finite() && hi.is_finite()) => {
                bad(format!("uniform needs finite lo < hi, got [{lo}, {hi}]"))
            }
            ValuationDistribution::LogNormal { mu, sigma } if !(sigma > 0.0 && mu.is_finite() && sigma.is_finite()) => {
                bad(format!("lognormal needs sigma > 0, got mu={mu} sigma={sigma}"))
            }
            ValuationDistribution::TruncatedNormal { mu, sigma, lo, hi }
                if !(sigma > 0.0 && lo < hi && mu.is_finite() && sigma.is_finite() && !lo.is_nan() && !hi.is_nan()) =>
            {
                bad(format!("truncated normal needs sigma > 0 and lo < hi, got mu={mu} sigma={sigma} [{lo}, {hi}]"))
            }
            ValuationDistribution::Empirical(ref k) if k.samples.is_empty() || !(k.bandwidth > 0.0) => {
                bad("empirical distribution needs samples and a positive bandwidth".into())
            }
            _ => Ok(()),
        }
    }

    /// Closed support `[lo, hi]`; either end may be infinite.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            ValuationDistribution::Exponential { .. } => (0.0, f64::INFINITY),
            ValuationDistribution::Uniform { lo, hi } => (lo, hi),
            ValuationDistribution::LogNormal { .. } => (0.0, f64::INFINITY),
            ValuationDistribution::TruncatedNormal { lo, hi, .. } => (lo, hi),
            ValuationDistribution::Empirical(_) => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    fn truncnorm_parts(mu: f64, sigma: f64, lo: f64, hi: f64) -> (f64, f64, f64) {
        let a = (lo - mu) / sigma;
        let b = (hi - mu) / sigma;
        let z = if a > 0.0 { norm_sf(a) - norm_sf(b) } else { norm_cdf(b) - norm_cdf(a) };
        (a, b, z)
    }

    pub fn pdf(&self, v: f64) -> f64 {
        let (lo, hi) = self.support();
        if v < lo || v > hi {
            return 0.0;
        }
        match *self {
            ValuationDistribution::Exponential { rate } => rate * (-rate * v).exp(),
            ValuationDistribution::Uniform { lo, hi } => 1.0 / (hi - lo),
            ValuationDistribution::LogNormal { mu, sigma } => {
                if v <= 0.0 {
                    0.0
                } else {
                    norm_pdf((v.ln() - mu) / sigma) / (v * sigma)
                }
            }
            ValuationDistribution::TruncatedNormal { mu, sigma, lo, hi } => {
                let (_, _, z) = Self::truncnorm_parts(mu, sigma, lo, hi);
                norm_pdf((v - mu) / sigma) / (sigma * z)
            }
            ValuationDistribution::Empirical(ref k) => k.pdf(v),
        }
    }

    pub fn cdf(&self, v: f64) -> f64 {
        let (lo, hi) = self.support();
        if v <= lo {
            return 0.0;
        }
        if v >= hi {
            return 1.0;
        }
        match *self {
            ValuationDistribution::Exponential { rate } => -(-rate * v).exp_m1(),
            ValuationDistribution::Uniform { lo, hi } => (v - lo) / (hi - lo),
            ValuationDistribution::LogNormal { mu, sigma } => norm_cdf((v.ln() - mu) / sigma),
            ValuationDistribution::TruncatedNormal { mu, sigma, lo, hi } => {
                let (a, b, z) = Self::truncnorm_parts(mu, sigma, lo, hi);
                let x = (v - mu) / sigma;
                if a > 0.0 {
                    (norm_sf(a) - norm_sf(x)) / z
                } else {
                    let _ = b;
                    (norm_cdf(x) - norm_cdf(a)) / z
                }
            }
            ValuationDistribution::Empirical(ref k) => k.cdf(v),
        }
    }

    /// Survival function `1 - cdf`, computed without cancellation in the upper tail.
    pub fn sf(&self, v: f64) -> f64 {
        let (lo, hi) = self.support();
        if v <= lo {
            return 1.0;
        }
        if v >= hi {
            return 0.0;
        }
        match *self {
            ValuationDistribution::Exponential { rate } => (-rate * v).exp(),
            ValuationDistribution::Uniform { lo, hi } => (hi - v) / (hi - lo),
            ValuationDistribution::LogNormal { mu, sigma } => norm_sf((v.ln() - mu) / sigma),
            ValuationDistribution::TruncatedNormal { mu, sigma, lo, hi } => {
                let (a, b, z) = Self::truncnorm_parts(mu, sigma, lo, hi);
                let x = (v - mu) / sigma;
                if x > 0.0 {
                    (norm_sf(x) - norm_sf(b)) / z
                } else {
                    let _ = a;
                    (norm_cdf(b) - norm_cdf(x)) / z
                }
            }
            ValuationDistribution::Empirical(ref k) => k.sf(v),
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        match *self {
            ValuationDistribution::Exponential { rate } => -(-p).ln_1p() / rate,
            ValuationDistribution::Uniform { lo, hi } => lo + p * (hi - lo),
            ValuationDistribution::LogNormal { mu, sigma } => (mu + sigma * norm_ppf(p)).exp(),
            ValuationDistribution::TruncatedNormal { mu, sigma, lo, hi } => {
                let (a, b, _) = Self::truncnorm_parts(mu, sigma, lo, hi);
                let x = if a > 0.0 {
                    let (sa, sb) = (norm_sf(a), norm_sf(b));
                    -norm_ppf(sa - p * (sa - sb))
                } else {
                    let (ca, cb) = (norm_cdf(a), norm_cdf(b));
                    norm_ppf(ca + p * (cb - ca))
                };
                (mu + sigma * x).clamp(lo, hi)
            }
            ValuationDistribution::Empirical(ref k) => {
                let (lo, hi) = k.bracket();
                bisect_increasing(|x| k.cdf(x), p, lo, hi, 1e-13)
            }
        }
    }

    /// Support with infinite ends (or ends where the density vanishes)
    /// replaced by the truncation quantiles.
    pub fn truncated_support(&self) -> (f64, f64) {
        let (lo, hi) = self.support();
        let lo = if lo.is_finite() && self.pdf(lo) > 0.0 {
            lo
        } else {
            self.quantile(TRUNCATION_LO)
        };
        let hi = if hi.is_finite() && self.pdf(hi) > 0.0 {
            hi
        } else {
            self.quantile(TRUNCATION_HI)
        };
        (lo, hi)
    }

    /// `phi(v) = v - (1 - cdf(v)) / pdf(v)`.
    pub fn virtual_valuation(&self, v: f64) -> Result<f64> {
        let (lo, hi) = self.support();
        if !(v >= lo && v <= hi) {
            return Err(FairbidError::Domain { value: v, lo, hi });
        }
        let pdf = self.pdf(v);
        if !(pdf > 0.0) {
            return Err(FairbidError::Singularity { at: v });
        }
        Ok(v - self.sf(v) / pdf)
    }

    /// `phi` extended monotonically where the density underflows.
    fn phi_raw(&self, v: f64) -> f64 {
        let pdf = self.pdf(v);
        if pdf > 0.0 {
            v - self.sf(v) / pdf
        } else if self.cdf(v) < 0.5 {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    /// Evaluates `phi` on a quantile-spaced grid and reports the first point
    /// where it fails to strictly increase.
    pub fn check_strict_regularity(&self, grid_size: usize) -> RegularityReport {
        let grid_size = grid_size.max(2);
        let mut prev: Option<f64> = None;
        for k in 0..grid_size {
            let p = TRUNCATION_LO + (TRUNCATION_HI - TRUNCATION_LO) * k as f64 / (grid_size - 1) as f64;
            let v = self.quantile(p);
            let phi = self.phi_raw(v);
            if let Some(last) = prev {
                if !(phi > last) {
                    return RegularityReport {
                        regular: false,
                        violation: Some(v),
                    };
                }
            }
            prev = Some(phi);
        }
        RegularityReport {
            regular: true,
            violation: None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ValuationDistribution::Exponential { rate } => Exp::new(rate).expect("validated rate").sample(rng),
            ValuationDistribution::Uniform { lo, hi } => rng.random_range(lo..hi),
            ValuationDistribution::LogNormal { mu, sigma } => {
                LogNormal::new(mu, sigma).expect("validated lognormal").sample(rng)
            }
            ValuationDistribution::TruncatedNormal { .. } => self.quantile(rng.random::<f64>()),
            ValuationDistribution::Empirical(ref k) => {
                let idx = rng.random_range(0..k.samples.len());
                k.samples[idx] + k.bandwidth * rng.sample::<f64, _>(rand_distr::StandardNormal)
            }
        }
    }
}

/// Densities specified directly in virtual-value space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "density", rename_all = "snake_case")]
pub enum GivenDensity {
    /// `rate * exp(-rate (y - loc))` on `[loc, inf)`.
    Exponential {
        rate: f64,
        #[serde(default)]
        loc: f64,
    },
    Uniform { lo: f64, hi: f64 },
    Normal { mu: f64, sigma: f64 },
}

impl GivenDensity {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            GivenDensity::Exponential { rate, loc } => rate > 0.0 && rate.is_finite() && loc.is_finite(),
            GivenDensity::Uniform { lo, hi } => lo < hi && lo.is_finite() && hi.is_finite(),
            GivenDensity::Normal { mu, sigma } => sigma > 0.0 && mu.is_finite() && sigma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(FairbidError::Parameter(format!("invalid virtual-space density {self:?}")))
        }
    }

    fn support(&self) -> (f64, f64) {
        match *self {
            GivenDensity::Exponential { loc, .. } => (loc, f64::INFINITY),
            GivenDensity::Uniform { lo, hi } => (lo, hi),
            GivenDensity::Normal { .. } => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    fn density(&self, y: f64) -> f64 {
        match *self {
            GivenDensity::Exponential { rate, loc } => {
                if y < loc {
                    0.0
                } else {
                    rate * (-rate * (y - loc)).exp()
                }
            }
            GivenDensity::Uniform { lo, hi } => {
                if y < lo || y > hi {
                    0.0
                } else {
                    1.0 / (hi - lo)
                }
            }
            GivenDensity::Normal { mu, sigma } => norm_pdf((y - mu) / sigma) / sigma,
        }
    }

    fn cdf(&self, y: f64) -> f64 {
        match *self {
            GivenDensity::Exponential { rate, loc } => {
                if y <= loc {
                    0.0
                } else {
                    -(-rate * (y - loc)).exp_m1()
                }
            }
            GivenDensity::Uniform { lo, hi } => ((y - lo) / (hi - lo)).clamp(0.0, 1.0),
            GivenDensity::Normal { mu, sigma } => norm_cdf((y - mu) / sigma),
        }
    }

    fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        match *self {
            GivenDensity::Exponential { rate, loc } => loc - (-p).ln_1p() / rate,
            GivenDensity::Uniform { lo, hi } => lo + p * (hi - lo),
            GivenDensity::Normal { mu, sigma } => mu + sigma * norm_ppf(p),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            GivenDensity::Exponential { rate, loc } => loc + Exp::new(rate).expect("validated rate").sample(rng),
            GivenDensity::Uniform { lo, hi } => rng.random_range(lo..hi),
            GivenDensity::Normal { mu, sigma } => Normal::new(mu, sigma).expect("validated normal").sample(rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Source {
    Given(GivenDensity),
    Derived(ValuationDistribution),
}

/// Density `f` and CDF `F` of an advertiser's virtual value for one type.
///
/// Integration against `f` happens in *base* coordinates: the valuation for
/// derived distributions (`int g(y) f(y) dy = int g(phi(v)) pdf(v) dv`) and
/// the virtual value itself for given densities. This keeps the heavy left
/// tail of e.g. lognormal virtual values out of the quadrature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualDistribution {
    source: Source,
    /// Truncated virtual support.
    support: (f64, f64),
    /// Truncated integration interval in base coordinates.
    base: (f64, f64),
    /// `phi` tabulated on the base interval, derived distributions only.
    table: Option<PhiTable>,
}

/// Monotone table of `(x, phi(x))` used to bracket `phi^{-1}` before the
/// root is polished on the exact function.
#[derive(Clone, Debug, PartialEq)]
struct PhiTable {
    x: Vec<f64>,
    phi: Vec<f64>,
}

impl PhiTable {
    fn build(d: &ValuationDistribution, base: (f64, f64)) -> Self {
        let mut ps: Vec<f64> = (0..=1024).map(|k| k as f64 / 1024.0).collect();
        for e in 1..=40 {
            let t = 10f64.powf(-(e as f64) / 4.0);
            ps.push(t);
            ps.push(1.0 - t);
        }
        let mut x: Vec<f64> = ps
            .into_iter()
            .map(|p| d.quantile(p.clamp(TRUNCATION_LO, TRUNCATION_HI)).clamp(base.0, base.1))
            .chain([base.0, base.1])
            .collect();
        x.sort_by(f64::total_cmp);
        x.dedup();
        let phi = x.iter().map(|&v| d.phi_raw(v)).collect();
        PhiTable { x, phi }
    }

    /// Bracket `[x_k, x_{k+1}]` with `phi(x_k) < y <= phi(x_{k+1})`, if the
    /// tabulated values are monotone around `y`.
    fn bracket(&self, y: f64) -> Option<(f64, f64)> {
        let k = self.phi.partition_point(|&p| p < y);
        if k == 0 || k >= self.x.len() {
            return None;
        }
        Some((self.x[k - 1], self.x[k]))
    }
}

/// Illinois false position on a bracket of an increasing `f`; falls back to
/// bisection when the bracket does not straddle `target`.
fn polish_increasing(f: impl Fn(f64) -> f64, target: f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (f(a) - target, f(b) - target);
    if !(fa < 0.0 && fb >= 0.0 && fa.is_finite() && fb.is_finite()) {
        return bisect_increasing(f, target, lo, hi, tol);
    }
    if fb == 0.0 {
        return b;
    }
    let mut side = 0i8;
    let mut x = b;
    for _ in 0..200 {
        let mut next = b - fb * (b - a) / (fb - fa);
        if !(next > a && next < b) {
            next = 0.5 * (a + b);
        }
        let moved = (next - x).abs();
        x = next;
        let fx = f(x) - target;
        if fx == 0.0 {
            return x;
        }
        if fx < 0.0 {
            a = x;
            fa = fx;
            if side == -1 {
                fb *= 0.5;
            }
            side = -1;
        } else {
            b = x;
            fb = fx;
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        }
        if b - a <= tol || moved <= 0.25 * tol {
            break;
        }
    }
    x
}

impl VirtualDistribution {
    /// A density given directly in virtual space.
    pub fn virtual_given(density: GivenDensity) -> Result<Self> {
        density.validate()?;
        let (lo, hi) = density.support();
        let lo = if lo.is_finite() { lo } else { density.quantile(TRUNCATION_LO) };
        let hi = if hi.is_finite() { hi } else { density.quantile(TRUNCATION_HI) };
        Ok(VirtualDistribution {
            source: Source::Given(density),
            support: (lo, hi),
            base: (lo, hi),
            table: None,
        })
    }

    /// Change of variables from a strictly regular valuation distribution.
    pub fn from_valuation(dist: ValuationDistribution) -> Result<Self> {
        dist.validate()?;
        let report = dist.check_strict_regularity(REGULARITY_GRID);
        if let Some(at) = report.violation {
            return Err(FairbidError::Regularity { at });
        }
        let (a, b) = dist.truncated_support();
        let support = (dist.phi_raw(a), dist.phi_raw(b));
        if !(support.0.is_finite() && support.1.is_finite() && support.0 < support.1) {
            return Err(FairbidError::Numerical(format!(
                "virtual support [{}, {}] is degenerate",
                support.0, support.1
            )));
        }
        let table = Some(PhiTable::build(&dist, (a, b)));
        Ok(VirtualDistribution {
            source: Source::Derived(dist),
            support,
            base: (a, b),
            table,
        })
    }

    pub fn is_virtual_given(&self) -> bool {
        matches!(self.source, Source::Given(_))
    }

    /// Valuation distribution this was derived from, if any.
    pub fn source(&self) -> Option<&ValuationDistribution> {
        match &self.source {
            Source::Derived(d) => Some(d),
            Source::Given(_) => None,
        }
    }

    pub fn given(&self) -> Option<&GivenDensity> {
        match &self.source {
            Source::Given(g) => Some(g),
            Source::Derived(_) => None,
        }
    }

    /// Truncated virtual support.
    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn density(&self, y: f64) -> f64 {
        match &self.source {
            Source::Given(g) => g.density(y),
            Source::Derived(d) => {
                if y < self.support.0 || y > self.support.1 {
                    return 0.0;
                }
                let v = self.base_of_virtual(y);
                let slope = self.phi_slope(d, v);
                if slope > 0.0 {
                    d.pdf(v) / slope
                } else {
                    0.0
                }
            }
        }
    }

    pub fn cdf(&self, y: f64) -> f64 {
        match &self.source {
            Source::Given(g) => g.cdf(y),
            Source::Derived(d) => {
                if y < self.support.0 {
                    0.0
                } else if y >= self.support.1 {
                    1.0
                } else {
                    d.cdf(self.base_of_virtual(y))
                }
            }
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        match &self.source {
            Source::Given(g) => g.quantile(p),
            Source::Derived(d) => d.phi_raw(d.quantile(p)),
        }
    }

    /// Valuation whose virtual value is `y`, searched over the full support.
    /// Clipped to the support infimum when `y` is below the virtual range.
    pub fn phi_inverse(&self, y: f64) -> f64 {
        let d = match &self.source {
            Source::Given(_) => return y,
            Source::Derived(d) => d,
        };
        let (true_lo, true_hi) = d.support();
        let (mut lo, mut hi) = self.base;
        if d.phi_raw(lo) >= y {
            if true_lo.is_finite() {
                if d.phi_raw(true_lo) >= y {
                    return true_lo;
                }
                hi = lo;
                lo = true_lo;
            } else {
                let mut step = (hi - lo).max(1.0);
                hi = lo;
                for _ in 0..200 {
                    lo = hi - step;
                    if d.phi_raw(lo) < y {
                        break;
                    }
                    hi = lo;
                    step *= 2.0;
                }
            }
        } else if d.phi_raw(hi) < y {
            if true_hi.is_finite() {
                return true_hi;
            }
            let mut step = (hi - lo).max(1.0);
            lo = hi;
            for _ in 0..200 {
                hi = lo + step;
                if d.phi_raw(hi) >= y {
                    break;
                }
                lo = hi;
                step *= 2.0;
            }
        }
        bisect_increasing(|v| d.phi_raw(v), y, lo, hi, BISECTION_TOL)
    }

    /// Infimum of the bid space: valuation support for derived distributions,
    /// virtual support for given densities.
    pub fn bid_infimum(&self) -> f64 {
        match &self.source {
            Source::Given(g) => g.support().0,
            Source::Derived(d) => d.support().0,
        }
    }

    /// Virtual value of a submitted bid (identity for given densities).
    pub fn virtual_of_bid(&self, bid: f64) -> Result<f64> {
        match &self.source {
            Source::Given(g) => {
                let (lo, hi) = g.support();
                if bid >= lo && bid <= hi {
                    Ok(bid)
                } else {
                    Err(FairbidError::Domain { value: bid, lo, hi })
                }
            }
            Source::Derived(d) => d.virtual_valuation(bid),
        }
    }

    /// Draws a bid: a valuation for derived distributions, a virtual value
    /// for given densities.
    pub fn sample_bid<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.source {
            Source::Given(g) => g.sample(rng),
            Source::Derived(d) => d.sample(rng),
        }
    }

    /// `E[phi]`, the quantity bounded by `rho`.
    pub fn mean(&self) -> Result<f64> {
        let (a, b) = self.base;
        integrate_segments(
            |x| self.virtual_at_base(x) * self.base_density(x),
            &[a, b],
            &QuadratureRule::default(),
        )
    }

    pub(crate) fn base_interval(&self) -> (f64, f64) {
        self.base
    }

    pub(crate) fn virtual_at_base(&self, x: f64) -> f64 {
        match &self.source {
            Source::Given(_) => x,
            Source::Derived(d) => d.phi_raw(x),
        }
    }

    pub(crate) fn base_density(&self, x: f64) -> f64 {
        match &self.source {
            Source::Given(g) => g.density(x),
            Source::Derived(d) => d.pdf(x),
        }
    }

    /// Quantile in base coordinates, clamped to the base interval.
    pub(crate) fn base_quantile(&self, p: f64) -> f64 {
        let x = match &self.source {
            Source::Given(g) => g.quantile(p),
            Source::Derived(d) => d.quantile(p),
        };
        x.clamp(self.base.0, self.base.1)
    }

    /// Base coordinate of virtual value `y`, clamped to the base interval.
    pub(crate) fn base_of_virtual(&self, y: f64) -> f64 {
        match &self.source {
            Source::Given(_) => y.clamp(self.base.0, self.base.1),
            Source::Derived(d) => {
                if y <= self.support.0 {
                    self.base.0
                } else if y >= self.support.1 {
                    self.base.1
                } else {
                    let (lo, hi) = self
                        .table
                        .as_ref()
                        .and_then(|t| t.bracket(y))
                        .unwrap_or(self.base);
                    polish_increasing(|v| d.phi_raw(v), y, lo, hi, BISECTION_TOL)
                }
            }
        }
    }

    fn phi_slope(&self, d: &ValuationDistribution, v: f64) -> f64 {
        let (lo, hi) = d.support();
        let h = 1e-6 * (1.0 + v.abs());
        let a = (v - h).max(lo);
        let b = (v + h).min(hi);
        (d.phi_raw(b) - d.phi_raw(a)) / (b - a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::breakpoints_within;
    use rand::SeedableRng;

    fn kde(samples: &[f64], h: f64) -> ValuationDistribution {
        ValuationDistribution::Empirical(Kde::new(samples.to_vec(), Some(h)).unwrap())
    }

    #[test]
    fn virtual_valuation_closed_forms() {
        let u = ValuationDistribution::Uniform { lo: 0.0, hi: 1.0 };
        assert!((u.virtual_valuation(0.75).unwrap() - 0.5).abs() < 1e-15);
        let e = ValuationDistribution::Exponential { rate: 1.0 };
        assert!((e.virtual_valuation(3.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn virtual_valuation_errors() {
        let u = ValuationDistribution::Uniform { lo: 0.0, hi: 1.0 };
        assert!(matches!(u.virtual_valuation(1.5), Err(FairbidError::Domain { .. })));
        let ln = ValuationDistribution::LogNormal { mu: 0.0, sigma: 0.5 };
        assert!(matches!(ln.virtual_valuation(0.0), Err(FairbidError::Singularity { .. })));
    }

    #[test]
    fn kde_virtual_valuation_matches_kernel_sum() {
        let d = kde(&[1.0, 2.0, 3.0], 0.5);
        // oracle: pdf by direct kernel summation, cdf by integrating that pdf
        let h = 0.5;
        let pdf = |x: f64| {
            [1.0, 2.0, 3.0]
                .iter()
                .map(|s: &f64| (-(x - s).powi(2) / (2.0 * h * h)).exp() / (h * (2.0 * std::f64::consts::PI).sqrt()))
                .sum::<f64>()
                / 3.0
        };
        let cdf = integrate_segments(pdf, &[-20.0, 2.0], &QuadratureRule::default()).unwrap();
        let expected = 2.0 - (1.0 - cdf) / pdf(2.0);
        let got = d.virtual_valuation(2.0).unwrap();
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn regularity_of_standard_families() {
        for d in [
            ValuationDistribution::Uniform { lo: 0.0, hi: 1.0 },
            ValuationDistribution::Exponential { rate: 1.0 },
            ValuationDistribution::TruncatedNormal { mu: 1.0, sigma: 0.5, lo: 0.0, hi: 3.0 },
        ] {
            assert!(d.check_strict_regularity(256).regular, "{d:?}");
        }
    }

    #[test]
    fn bimodal_kde_is_irregular_between_modes() {
        let d = kde(&[0.0, 10.0], 0.5);
        let report = d.check_strict_regularity(512);
        assert!(!report.regular);
        let at = report.violation.unwrap();
        assert!(at > 0.0 && at < 10.0, "violation at {at}");
        assert!(matches!(
            VirtualDistribution::from_valuation(d),
            Err(FairbidError::Regularity { .. })
        ));
    }

    #[test]
    fn uniform_change_of_variables() {
        let vd = VirtualDistribution::from_valuation(ValuationDistribution::Uniform { lo: 0.0, hi: 1.0 }).unwrap();
        let (lo, hi) = vd.support();
        assert!((lo + 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        for k in 0..100 {
            let y = -0.99 + 1.98 * k as f64 / 99.0;
            assert!((vd.cdf(y) - (y + 1.0) / 2.0).abs() < 1e-9);
            assert!((vd.density(y) - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn exponential_change_of_variables() {
        let vd = VirtualDistribution::from_valuation(ValuationDistribution::Exponential { rate: 1.0 }).unwrap();
        assert!((vd.support().0 + 1.0).abs() < 1e-12);
        for k in 0..100 {
            let y = -1.0 + 10.0 * k as f64 / 99.0;
            assert!((vd.density(y) - (-(y + 1.0)).exp()).abs() < 1e-9, "y={y}");
            assert!((vd.cdf(y) - (1.0 - (-(y + 1.0)).exp())).abs() < 1e-9);
        }
    }

    #[test]
    fn densities_integrate_to_one_and_quantiles_invert() {
        let dists = vec![
            VirtualDistribution::virtual_given(GivenDensity::Exponential { rate: 1.0, loc: 0.0 }).unwrap(),
            VirtualDistribution::virtual_given(GivenDensity::Normal { mu: 1.0, sigma: 0.1 }).unwrap(),
            VirtualDistribution::virtual_given(GivenDensity::Uniform { lo: -1.0, hi: 1.0 }).unwrap(),
            VirtualDistribution::from_valuation(ValuationDistribution::Exponential { rate: 2.0 }).unwrap(),
            VirtualDistribution::from_valuation(ValuationDistribution::LogNormal { mu: 0.0, sigma: 0.4 }).unwrap(),
            VirtualDistribution::from_valuation(ValuationDistribution::TruncatedNormal {
                mu: 1.0,
                sigma: 0.5,
                lo: 0.0,
                hi: 3.0,
            })
            .unwrap(),
        ];
        for vd in &dists {
            let (a, b) = vd.base_interval();
            let mass = integrate_segments(|x| vd.base_density(x), &[a, b], &QuadratureRule::default()).unwrap();
            assert!((mass - 1.0).abs() <= 1e-8, "{vd:?}: mass {mass}");
            for p in [0.01, 0.5, 0.99] {
                let y = vd.quantile(p);
                assert!((vd.cdf(y) - p).abs() <= 1e-8, "{vd:?}: F(q({p})) = {}", vd.cdf(y));
            }
        }
    }

    #[test]
    fn virtual_space_density_integrates_for_smooth_families() {
        for vd in [
            VirtualDistribution::from_valuation(ValuationDistribution::Exponential { rate: 1.0 }).unwrap(),
            VirtualDistribution::from_valuation(ValuationDistribution::Uniform { lo: 0.0, hi: 2.0 }).unwrap(),
        ] {
            let (lo, hi) = vd.support();
            let bps = breakpoints_within(lo, hi, []);
            let mass = integrate_segments(|y| vd.density(y), &bps, &QuadratureRule::default()).unwrap();
            assert!((mass - 1.0).abs() <= 1e-8, "mass {mass}");
        }
    }

    #[test]
    fn phi_inverse_roundtrip_including_tails() {
        let d = ValuationDistribution::LogNormal { mu: 0.0, sigma: 0.4 };
        let vd = VirtualDistribution::from_valuation(d.clone()).unwrap();
        for v in [0.2, 0.9, 1.7, 5.0] {
            let y = d.virtual_valuation(v).unwrap();
            assert!((vd.phi_inverse(y) - v).abs() < 1e-9, "v={v}");
        }
        // far below the virtual range clips to the valuation infimum
        let u = VirtualDistribution::from_valuation(ValuationDistribution::Uniform { lo: 0.5, hi: 1.5 }).unwrap();
        assert_eq!(u.phi_inverse(-10.0), 0.5);
    }

    #[test]
    fn silverman_default_bandwidth() {
        let k = Kde::new(vec![1.0, 2.0, 3.0, 4.0, 5.0], None).unwrap();
        assert!(k.bandwidth() > 0.0);
        assert!(Kde::new(vec![], None).is_err());
        assert!(Kde::new(vec![2.0, 2.0], None).is_err());
    }

    #[test]
    fn sampling_matches_cdf() {
        let d = ValuationDistribution::TruncatedNormal { mu: 1.0, sigma: 0.5, lo: 0.0, hi: 3.0 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let below = (0..n).filter(|_| d.sample(&mut rng) < 1.2).count() as f64 / n as f64;
        let p = d.cdf(1.2);
        assert!((below - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt());
    }

    #[test]
    fn given_density_tag() {
        let g: GivenDensity = serde_json::from_str(r#"{"density":"exponential","rate":1.0}"#).unwrap();
        assert_eq!(g, GivenDensity::Exponential { rate: 1.0, loc: 0.0 });
    }
}
