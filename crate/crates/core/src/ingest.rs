//! Bid-log parsing, advertiser filtering, keyword pairing and per-cell
//! distribution fitting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::config::{DistSpec, FitMethod, IngestSection, MarketConfig, TypeProbMode, SCHEMA_VERSION};
use crate::distributions::{Kde, ValuationDistribution};
use crate::error::{FairbidError, Result};
use crate::market::MarketInstance;

/// Minimum bids per advertiser and keyword for a fit.
pub const MIN_FIT_BIDS: usize = 30;

/// Column mapping of a delimited bid log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogFormat {
    pub delimiter: u8,
    pub keyword_col: usize,
    pub advertiser_col: usize,
    pub bid_col: usize,
    pub has_header: bool,
    /// Largest tolerated fraction of malformed lines.
    pub malformed_threshold: f64,
}

impl Default for LogFormat {
    fn default() -> Self {
        LogFormat {
            delimiter: b',',
            keyword_col: 0,
            advertiser_col: 1,
            bid_col: 2,
            has_header: true,
            malformed_threshold: 1e-3,
        }
    }
}

impl LogFormat {
    pub fn from_section(s: &IngestSection) -> Result<Self> {
        if !s.delimiter.is_ascii() {
            return Err(FairbidError::Config(format!("delimiter {:?} is not ASCII", s.delimiter)));
        }
        Ok(LogFormat {
            delimiter: s.delimiter as u8,
            keyword_col: s.keyword_col,
            advertiser_col: s.advertiser_col,
            bid_col: s.bid_col,
            has_header: s.has_header,
            malformed_threshold: s.malformed_threshold,
        })
    }
}

/// Bids grouped by keyword, then advertiser, in arrival order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BidLog {
    keywords: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    records: usize,
    malformed: usize,
}

impl BidLog {
    pub fn push(&mut self, keyword: &str, advertiser: &str, bid: f64) -> Result<()> {
        if keyword.is_empty() || advertiser.is_empty() {
            return Err(FairbidError::Parameter("empty keyword or advertiser id".into()));
        }
        if !(bid > 0.0 && bid.is_finite()) {
            return Err(FairbidError::Parameter(format!("bid must be positive, got {bid}")));
        }
        self.keywords
            .entry(keyword.to_string())
            .or_default()
            .entry(advertiser.to_string())
            .or_default()
            .push(bid);
        self.records += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records == 0
    }

    /// Lines skipped as malformed during parsing.
    pub fn malformed(&self) -> usize {
        self.malformed
    }

    pub fn keywords(&self) -> impl Iterator<Item = &str> {
        self.keywords.keys().map(String::as_str)
    }

    pub fn bids(&self, keyword: &str) -> Result<&BTreeMap<String, Vec<f64>>> {
        self.keywords
            .get(keyword)
            .ok_or_else(|| FairbidError::UnknownKeyword(keyword.to_string()))
    }

    fn volume(&self, keyword: &str) -> Result<usize> {
        Ok(self.bids(keyword)?.values().map(Vec::len).sum())
    }
}

/// Streams a delimited log. Malformed lines are skipped; if their share
/// exceeds the threshold the parse fails naming the first bad line.
pub fn parse_log(path: impl AsRef<Path>, format: &LogFormat) -> Result<BidLog> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| FairbidError::io(path, e))?;
    parse_reader(file, format)
}

pub fn parse_reader<R: std::io::Read>(reader: R, format: &LogFormat) -> Result<BidLog> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(format.has_header)
        .flexible(true)
        .from_reader(reader);
    let mut log = BidLog::default();
    let mut lines = 0usize;
    let mut first_bad: Option<(u64, String)> = None;
    let mut record = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        let parsed = match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => parse_fields(&record, format).and_then(|(k, a, b)| log.push(k, a, b)),
            Err(e) => Err(FairbidError::Parameter(e.to_string())),
        };
        lines += 1;
        if let Err(e) = parsed {
            log.malformed += 1;
            if first_bad.is_none() {
                first_bad = Some((record.position().map_or(line, |p| p.line()), e.to_string()));
            }
        }
    }
    if lines == 0 {
        log::warn!("bid log is empty");
        return Ok(log);
    }
    let share = log.malformed as f64 / lines as f64;
    if share > format.malformed_threshold {
        let (line, message) = first_bad.unwrap_or((0, String::new()));
        return Err(FairbidError::Parse {
            line,
            message: format!(
                "{message} ({} of {lines} lines malformed, above the {} threshold)",
                log.malformed, format.malformed_threshold
            ),
        });
    }
    if log.malformed > 0 {
        log::warn!("skipped {} malformed lines of {lines}", log.malformed);
    }
    Ok(log)
}

fn parse_fields<'r>(record: &'r csv::StringRecord, f: &LogFormat) -> Result<(&'r str, &'r str, f64)> {
    let get = |c: usize| {
        record
            .get(c)
            .map(str::trim)
            .ok_or_else(|| FairbidError::Parameter(format!("missing column {c}")))
    };
    let bid_text = get(f.bid_col)?;
    let bid = bid_text
        .parse::<f64>()
        .map_err(|_| FairbidError::Parameter(format!("bid {bid_text:?} is not a number")))?;
    Ok((get(f.keyword_col)?, get(f.advertiser_col)?, bid))
}

/// Thresholds of the three filtering rules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FilterThresholds {
    pub min_bids: usize,
    pub min_variance: f64,
    pub min_win_rate: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            min_bids: 1000,
            min_variance: 3e-3,
            min_win_rate: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    TooFewBids,
    LowVariance,
    LowWinRate,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterOutcome {
    pub keyword: String,
    pub kept: Vec<String>,
    pub removed: Vec<(String, FilterRule)>,
    /// Replay win rate of every advertiser that reached the third rule.
    pub win_rates: BTreeMap<String, f64>,
}

fn sample_variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Round `r` pits the `r`-th bid of every advertiser that has one; the
/// highest bid wins and ties split the win. Returns wins / rounds entered.
pub fn replay_win_rates(bids: &BTreeMap<String, &Vec<f64>>) -> BTreeMap<String, f64> {
    let rounds = bids.values().map(|v| v.len()).max().unwrap_or(0);
    let mut wins: BTreeMap<&str, f64> = bids.keys().map(|k| (k.as_str(), 0.0)).collect();
    for r in 0..rounds {
        let entrants: Vec<(&str, f64)> = bids
            .iter()
            .filter_map(|(a, v)| v.get(r).map(|&b| (a.as_str(), b)))
            .collect();
        let top = entrants.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<&str> = entrants.iter().filter(|e| e.1 == top).map(|e| e.0).collect();
        let share = 1.0 / winners.len() as f64;
        for w in winners {
            *wins.get_mut(w).expect("entrant is a bidder") += share;
        }
    }
    bids.iter()
        .map(|(a, v)| (a.clone(), if v.is_empty() { 0.0 } else { wins[a.as_str()] / v.len() as f64 }))
        .collect()
}

/// Applies the bid-count, variance and win-rate rules in that order.
pub fn filter_advertisers(log: &BidLog, keyword: &str, th: &FilterThresholds) -> Result<FilterOutcome> {
    let bids = log.bids(keyword)?;
    let mut removed = Vec::new();
    let mut survivors: BTreeMap<String, &Vec<f64>> = BTreeMap::new();
    for (adv, b) in bids {
        if b.len() < th.min_bids {
            removed.push((adv.clone(), FilterRule::TooFewBids));
        } else if sample_variance(b) < th.min_variance {
            removed.push((adv.clone(), FilterRule::LowVariance));
        } else {
            survivors.insert(adv.clone(), b);
        }
    }
    let win_rates = replay_win_rates(&survivors);
    let mut kept = Vec::new();
    for (adv, &rate) in &win_rates {
        if rate < th.min_win_rate {
            removed.push((adv.clone(), FilterRule::LowWinRate));
        } else {
            kept.push(adv.clone());
        }
    }
    Ok(FilterOutcome {
        keyword: keyword.to_string(),
        kept,
        removed,
        win_rates,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct KeywordPair {
    pub keyword_a: String,
    pub keyword_b: String,
    pub shared: Vec<String>,
}

/// All keyword pairs sharing at least two post-filter advertisers.
pub fn pair_keywords(log: &BidLog, th: &FilterThresholds) -> Result<Vec<KeywordPair>> {
    let kept: Vec<(String, BTreeSet<String>)> = log
        .keywords()
        .map(|k| Ok((k.to_string(), filter_advertisers(log, k, th)?.kept.into_iter().collect())))
        .collect::<Result<_>>()?;
    Ok(pairs_from_sets(&kept))
}

pub fn pairs_from_sets(kept: &[(String, BTreeSet<String>)]) -> Vec<KeywordPair> {
    let mut out = Vec::new();
    for (x, (ka, sa)) in kept.iter().enumerate() {
        for (kb, sb) in &kept[x + 1..] {
            let shared: Vec<String> = sa.intersection(sb).cloned().collect();
            if shared.len() >= 2 {
                out.push(KeywordPair {
                    keyword_a: ka.clone(),
                    keyword_b: kb.clone(),
                    shared,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellReport {
    pub advertiser: String,
    pub keyword: String,
    pub method: FitMethod,
    pub regular: bool,
    /// Replaced by the other fit because the first one was irregular.
    pub fell_back: bool,
}

#[derive(Clone, Debug)]
pub struct FittedMarket {
    pub config: MarketConfig,
    pub market: MarketInstance,
    pub cells: Vec<CellReport>,
}

/// Maximum-likelihood `(mu, sigma)` of `ln(bid)`.
pub fn lognormal_mle(bids: &[f64]) -> Result<(f64, f64)> {
    if bids.is_empty() {
        return Err(FairbidError::Fit("no bids".into()));
    }
    let logs: Vec<f64> = bids.iter().map(|b| b.ln()).collect();
    let n = logs.len() as f64;
    let mu = logs.iter().sum::<f64>() / n;
    let sigma = (logs.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / n).sqrt();
    if !(sigma > 1e-12 * mu.abs().max(1.0)) {
        return Err(FairbidError::Fit("bids are constant; lognormal scale is zero".into()));
    }
    Ok((mu, sigma))
}

fn fit_cell(bids: &[f64], method: FitMethod) -> Result<(DistSpec, ValuationDistribution)> {
    match method {
        FitMethod::Lognormal => {
            let (mu, sigma) = lognormal_mle(bids)?;
            Ok((DistSpec::Lognormal { mu, sigma }, ValuationDistribution::LogNormal { mu, sigma }))
        }
        FitMethod::Kde => {
            if sample_variance(bids) <= 0.0 {
                return Err(FairbidError::Fit("bids are constant; kernel bandwidth is zero".into()));
            }
            let kde = Kde::new(bids.to_vec(), None)?;
            let bandwidth = Some(kde.bandwidth());
            Ok((
                DistSpec::Empirical {
                    samples: bids.to_vec(),
                    bandwidth,
                },
                ValuationDistribution::Empirical(kde),
            ))
        }
    }
}

/// Two-type market over the pair's shared advertisers. A cell whose fit is
/// irregular is refitted with the other method.
pub fn fit_market(log: &BidLog, pair: &KeywordPair, method: FitMethod, type_prob: TypeProbMode) -> Result<FittedMarket> {
    if pair.shared.len() < 2 {
        return Err(FairbidError::Fit("a keyword pair needs at least two shared advertisers".into()));
    }
    let keywords = [pair.keyword_a.as_str(), pair.keyword_b.as_str()];
    let tables = [log.bids(keywords[0])?, log.bids(keywords[1])?];
    let other = match method {
        FitMethod::Lognormal => FitMethod::Kde,
        FitMethod::Kde => FitMethod::Lognormal,
    };
    let mut dist = Vec::new();
    let mut cells = Vec::new();
    for adv in &pair.shared {
        let mut row = Vec::new();
        for (j, table) in tables.iter().enumerate() {
            let bids = table
                .get(adv)
                .ok_or_else(|| FairbidError::Fit(format!("{adv} has no bids on {}", keywords[j])))?;
            if bids.len() < MIN_FIT_BIDS {
                return Err(FairbidError::Fit(format!(
                    "{adv} has {} bids on {}, need {MIN_FIT_BIDS}",
                    bids.len(),
                    keywords[j]
                )));
            }
            let (spec, valuation) = fit_cell(bids, method)?;
            let regular = valuation.check_strict_regularity(512).regular;
            let (spec, used, fell_back, regular) = if regular {
                (spec, method, false, true)
            } else {
                let (spec2, val2) = fit_cell(bids, other)?;
                let ok = val2.check_strict_regularity(512).regular;
                (spec2, other, true, ok)
            };
            cells.push(CellReport {
                advertiser: adv.clone(),
                keyword: keywords[j].to_string(),
                method: used,
                regular,
                fell_back,
            });
            row.push(spec);
        }
        dist.push(row);
    }
    if cells.iter().all(|c| !c.regular) {
        return Err(FairbidError::Fit(format!(
            "every fitted cell for ({}, {}) is irregular",
            keywords[0], keywords[1]
        )));
    }
    if let Some(c) = cells.iter().find(|c| !c.regular) {
        return Err(FairbidError::Fit(format!(
            "no regular fit for {} on {}",
            c.advertiser, c.keyword
        )));
    }
    let probs = match type_prob {
        TypeProbMode::Equal => vec![0.5, 0.5],
        TypeProbMode::Volume => {
            let (a, b) = (log.volume(keywords[0])? as f64, log.volume(keywords[1])? as f64);
            vec![a / (a + b), b / (a + b)]
        }
    };
    let config = MarketConfig {
        schema_version: SCHEMA_VERSION,
        n: Some(pair.shared.len()),
        m: Some(2),
        type_prob: probs,
        advertisers: Some(pair.shared.clone()),
        dist,
        lower: None,
        upper: None,
        constrained: None,
    };
    let market = config.build_market()?;
    Ok(FittedMarket { config, market, cells })
}
