//! From a traffic corpus to padding histograms.
//!
//! Inter-arrival times are split into within-burst and between-burst
//! samples by thresholding the instantaneous bandwidth, each sample set is
//! fitted with a normal or log-normal model by maximum likelihood, the
//! burst-mode model is shifted towards shorter delays by a percentile knob,
//! and token histograms are drawn from the resulting distributions.

use rand::Rng;
use rand_distr::{Distribution, Normal as NormalSampler};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::histograms::{HistogramError, HistogramSet, Rounding, TokenHistogram, DEFAULT_BINS};
use crate::traces::{instantaneous_bandwidth, interarrival_times, Corpus, Direction, DirectionFilter, TraceError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("sample {0} is not positive")]
    NonPositiveSample(f64),
    #[error("sample {0} is not a finite non-negative number")]
    InvalidSample(f64),
    #[error("fitted scale is zero")]
    DegenerateScale,
    #[error("no samples")]
    EmptySamples,
    #[error("percentile must lie in (0, 0.5], got {0}")]
    InvalidPercentile(f64),
    #[error("{0:?} traffic has no packets to split")]
    TooFewEvents(Direction),
    #[error("{0:?} traffic spans zero time")]
    ZeroDuration(Direction),
    #[error("{0:?} traffic has no burst-labeled gaps")]
    NoBursts(Direction),
    #[error("{0:?} traffic has no gap-labeled intervals")]
    NoGaps(Direction),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Histogram(#[from] HistogramError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Bandwidth level separating burst gaps from inter-burst gaps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// Per-direction average bandwidth over the whole corpus.
    Auto,
    /// Bytes per second.
    Fixed(f64),
}

/// Inter-arrival samples of one direction, split by burst membership.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DirectionSplit {
    /// Times between packets inside a burst (gap-mode source).
    pub burst_samples: Vec<f64>,
    /// Times between the end of a burst and the start of the next
    /// (burst-mode source).
    pub gap_samples: Vec<f64>,
    /// Bytes per second.
    pub threshold: f64,
    /// Mean packets per burst, `None` when no gap was burst-labeled.
    pub mean_burst_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstGapSplit {
    pub outgoing: DirectionSplit,
    pub incoming: DirectionSplit,
    pub window: usize,
}

impl BurstGapSplit {
    pub fn direction(&self, d: Direction) -> &DirectionSplit {
        match d {
            Direction::Outgoing => &self.outgoing,
            Direction::Incoming => &self.incoming,
        }
    }
}

/// Labels every inter-arrival gap of every trace, per direction, as burst
/// (instantaneous bandwidth at or above the threshold) or gap.
///
/// Bandwidth uses windows of `window` consecutive same-direction packets. Gap
/// `i` takes the window starting at gap `i`, or the last window when fewer
/// than `window - 1` gaps follow it. Traces with fewer than `window` packets
/// in a direction contribute nothing to that direction.
pub fn split_burst_gap(corpus: &Corpus, window: usize, threshold: Threshold) -> Result<BurstGapSplit, FitError> {
    if window < 2 {
        return Err(FitError::InvalidParams(format!("window must be at least 2, got {window}")));
    }
    if let Threshold::Fixed(t) = threshold {
        if !(t >= 0.0) {
            return Err(FitError::InvalidParams(format!("threshold must be non-negative, got {t}")));
        }
    }
    let split_one = |direction: Direction| -> Result<DirectionSplit, FitError> {
        let usable: Vec<_> =
            corpus.traces.iter().map(|t| t.filter_direction(direction)).filter(|t| t.len() >= window).collect();
        if usable.is_empty() {
            return Err(FitError::TooFewEvents(direction));
        }
        let level = match threshold {
            Threshold::Fixed(t) => t,
            Threshold::Auto => {
                let bytes: u64 = usable.iter().map(|t| t.total_bytes()).sum();
                let duration: f64 = usable.iter().map(|t| t.duration()).sum();
                if !(duration > 0.0) {
                    return Err(FitError::ZeroDuration(direction));
                }
                bytes as f64 / duration
            }
        };
        let mut out = DirectionSplit { threshold: level, ..DirectionSplit::default() };
        let mut runs = Vec::new();
        for trace in &usable {
            let gaps = interarrival_times(trace, DirectionFilter::Both)?;
            let bandwidth = instantaneous_bandwidth(trace, window)?;
            let mut run = 0usize;
            for (i, &gap) in gaps.iter().enumerate() {
                let bw = bandwidth[i.min(bandwidth.len() - 1)].1;
                if bw >= level {
                    out.burst_samples.push(gap);
                    run += 1;
                } else {
                    out.gap_samples.push(gap);
                    if run > 0 {
                        runs.push(run);
                    }
                    run = 0;
                }
            }
            if run > 0 {
                runs.push(run);
            }
        }
        if !runs.is_empty() {
            out.mean_burst_length = Some(runs.iter().sum::<usize>() as f64 / runs.len() as f64 + 1.0);
        }
        Ok(out)
    };
    Ok(BurstGapSplit { outgoing: split_one(Direction::Outgoing)?, incoming: split_one(Direction::Incoming)?, window })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum FitFamily {
    /// Normal model of the log delays, i.e. log-normal delays.
    #[default]
    LogNormal,
    /// Normal model of the raw delays.
    Normal,
}

impl std::str::FromStr for FitFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lognormal" | "log-normal" => Ok(FitFamily::LogNormal),
            "normal" => Ok(FitFamily::Normal),
            other => Err(format!("unknown fit family {other:?}; expected normal or lognormal")),
        }
    }
}

impl std::fmt::Display for FitFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FitFamily::LogNormal => "lognormal",
            FitFamily::Normal => "normal",
        })
    }
}

/// What to do with zero delays before taking logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroHandling {
    /// Replace zeros with the smallest positive sample.
    #[default]
    ReplaceWithSmallest,
    Reject,
}

/// A fitted delay model. `mu` and `sigma` parameterize the normal
/// distribution of the log delays (log-normal family) or of the delays
/// themselves (normal family).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionFit {
    pub family: FitFamily,
    pub mu: f64,
    pub sigma: f64,
    pub sample_count: usize,
    pub ks_statistic: f64,
}

impl DistributionFit {
    fn location_scale(&self) -> Normal {
        Normal::new(self.mu, self.sigma).expect("fits keep sigma positive")
    }

    fn transform(&self, x: f64) -> f64 {
        match self.family {
            FitFamily::Normal => x,
            FitFamily::LogNormal => x.ln(),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if self.family == FitFamily::LogNormal && x <= 0.0 {
            return 0.0;
        }
        self.location_scale().cdf(self.transform(x))
    }

    /// Density of the underlying normal (of the log delays for the
    /// log-normal family).
    pub fn normal_pdf(&self, y: f64) -> f64 {
        self.location_scale().pdf(y)
    }

    /// The `p`-quantile of the underlying normal.
    pub fn normal_quantile(&self, p: f64) -> f64 {
        self.location_scale().inverse_cdf(p)
    }

    /// Expected delay under the model (for the normal family, before
    /// truncation at zero).
    pub fn mean_delay(&self) -> f64 {
        match self.family {
            FitFamily::Normal => self.mu,
            FitFamily::LogNormal => (self.mu + self.sigma * self.sigma / 2.0).exp(),
        }
    }

    /// Draws one delay. The normal family is truncated to non-negative
    /// values by rejection, falling back to zero when the mass above zero is
    /// too small to hit.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let normal = NormalSampler::new(self.mu, self.sigma).expect("fits keep sigma positive");
        match self.family {
            FitFamily::LogNormal => normal.sample(rng).exp(),
            FitFamily::Normal => {
                for _ in 0..10_000 {
                    let x = normal.sample(rng);
                    if x >= 0.0 {
                        return x;
                    }
                }
                0.0
            }
        }
    }
}

/// Kolmogorov-Smirnov distance between the empirical distribution of
/// `samples` and `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> Result<f64, FitError> {
    if samples.is_empty() {
        return Err(FitError::EmptySamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let d = sorted.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        let above = ((i + 1) as f64 / n - f).abs();
        let below = (i as f64 / n - f).abs();
        d.max(above).max(below)
    });
    Ok(d.clamp(0.0, 1.0))
}

/// Maximum-likelihood fit, replacing zero delays with the smallest positive
/// one for the log-normal family.
pub fn fit_mle(samples: &[f64], family: FitFamily) -> Result<DistributionFit, FitError> {
    fit_mle_with(samples, family, ZeroHandling::default())
}

pub fn fit_mle_with(samples: &[f64], family: FitFamily, zeros: ZeroHandling) -> Result<DistributionFit, FitError> {
    if samples.len() < 2 {
        return Err(FitError::TooFewSamples { needed: 2, found: samples.len() });
    }
    if let Some(&bad) = samples.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(FitError::InvalidSample(bad));
    }
    let cleaned: Vec<f64> = match family {
        FitFamily::Normal => samples.to_vec(),
        FitFamily::LogNormal => {
            let smallest = samples.iter().copied().filter(|&x| x > 0.0).min_by(f64::total_cmp);
            match (zeros, smallest) {
                (_, None) => return Err(FitError::NonPositiveSample(0.0)),
                (ZeroHandling::Reject, Some(_)) if samples.contains(&0.0) => {
                    return Err(FitError::NonPositiveSample(0.0))
                }
                (_, Some(s)) => samples.iter().map(|&x| if x > 0.0 { x } else { s }).collect(),
            }
        }
    };
    let values: Vec<f64> = match family {
        FitFamily::Normal => cleaned.clone(),
        FitFamily::LogNormal => cleaned.iter().map(|x| x.ln()).collect(),
    };
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let sigma = (values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
    let first = values[0];
    if !(sigma > 0.0) || values.iter().all(|&v| v == first) {
        return Err(FitError::DegenerateScale);
    }
    let mut fit = DistributionFit { family, mu, sigma, sample_count: samples.len(), ks_statistic: 0.0 };
    fit.ks_statistic = ks_statistic(&cleaned, |x| fit.cdf(x))?;
    Ok(fit)
}

/// Shifts a fit towards shorter delays. The new location is the
/// `percentile`-quantile of the original model and the new scale is chosen
/// so the new peak density equals the original density at that quantile:
/// `sigma' = 1 / (sqrt(2 pi) f(mu'))`, which simplifies to
/// `sigma * exp(z^2 / 2)` for the standard score `z` of the percentile.
/// The median leaves the fit unchanged.
pub fn tune(fit: &DistributionFit, percentile: f64) -> Result<DistributionFit, FitError> {
    if !(percentile > 0.0 && percentile <= 0.5) {
        return Err(FitError::InvalidPercentile(percentile));
    }
    let z = Normal::standard().inverse_cdf(percentile);
    Ok(DistributionFit { mu: fit.mu + fit.sigma * z, sigma: fit.sigma * (z * z / 2.0).exp(), ..*fit })
}

/// Nearest-rank quantile of unsorted data.
pub fn empirical_quantile(samples: &[f64], q: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// Knobs for turning a split into histograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterializeParams {
    pub family: FitFamily,
    /// Burst-mode shift; 0.5 keeps the empirical fit.
    pub percentile: f64,
    pub bins: usize,
    /// Maximum practical delay; `None` uses the 99th percentile of each
    /// histogram's source samples.
    pub max_iat: Option<f64>,
    /// Finite tokens per histogram.
    pub token_budget: usize,
    /// Probability of drawing the infinity bin of a burst-mode histogram.
    pub pn_burst: f64,
    pub rounding: Rounding,
}

impl Default for MaterializeParams {
    fn default() -> Self {
        MaterializeParams {
            family: FitFamily::LogNormal,
            percentile: 0.5,
            bins: DEFAULT_BINS,
            max_iat: None,
            token_budget: 300,
            pn_burst: 0.1,
            rounding: Rounding::Nearest,
        }
    }
}

/// Fit summary for one of the four histograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleFit {
    pub role: String,
    pub fit: DistributionFit,
    pub tuned: DistributionFit,
    /// KS distance of a fit on even-indexed samples, measured on the
    /// odd-indexed ones.
    pub holdout_ks: Option<f64>,
    pub max_iat: f64,
    pub infinity_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub percentile: f64,
    pub roles: Vec<RoleFit>,
}

impl FitReport {
    /// Tab-separated table with a header row.
    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "role\tfamily\tmu\tsigma\tmu_tuned\tsigma_tuned\tks\tholdout_ks\tsamples\tmax_iat\tinfinity_tokens\n",
        );
        for r in &self.roles {
            let holdout = r.holdout_ks.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{:.6}\t{}\n",
                r.role,
                r.fit.family,
                r.fit.mu,
                r.fit.sigma,
                r.tuned.mu,
                r.tuned.sigma,
                r.fit.ks_statistic,
                holdout,
                r.fit.sample_count,
                r.max_iat,
                r.infinity_tokens
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Materialized {
    pub histograms: HistogramSet,
    pub report: FitReport,
}

fn holdout_ks(samples: &[f64], family: FitFamily) -> Option<f64> {
    let train: Vec<f64> = samples.iter().step_by(2).copied().collect();
    let test: Vec<f64> = samples.iter().skip(1).step_by(2).copied().collect();
    let fit = fit_mle(&train, family).ok()?;
    ks_statistic(&test, |x| fit.cdf(x)).ok()
}

/// Draws `count` delays from `fit`.
pub fn draw_delays<R: Rng + ?Sized>(fit: &DistributionFit, count: usize, rng: &mut R) -> Vec<f64> {
    (0..count).map(|_| fit.sample(rng)).collect()
}

enum Mode {
    Burst,
    Gap,
}

/// Fits, tunes and draws the four histograms of a [`HistogramSet`]. Send
/// histograms come from outgoing samples and receive histograms from
/// incoming samples. Burst-mode histograms are built from inter-burst gaps
/// under the shifted fit and get `pn_burst` infinity probability; gap-mode
/// histograms are built from within-burst times under the unshifted fit
/// and get infinity tokens matching the direction's mean burst length.
pub fn materialize_histograms<R: Rng + ?Sized>(
    split: &BurstGapSplit,
    params: &MaterializeParams,
    rng: &mut R,
) -> Result<Materialized, FitError> {
    if params.token_budget < params.bins {
        return Err(FitError::InvalidParams(format!(
            "token budget {} is below the bin count {}",
            params.token_budget, params.bins
        )));
    }
    if !(params.percentile > 0.0 && params.percentile <= 0.5) {
        return Err(FitError::InvalidPercentile(params.percentile));
    }
    let mut roles = Vec::with_capacity(4);
    let mut build = |name: &str, direction: Direction, mode: Mode| -> Result<TokenHistogram, FitError> {
        let source = split.direction(direction);
        let samples = match mode {
            Mode::Burst => {
                if source.gap_samples.is_empty() {
                    return Err(FitError::NoGaps(direction));
                }
                &source.gap_samples
            }
            Mode::Gap => &source.burst_samples,
        };
        let fit = fit_mle(samples, params.family)?;
        let tuned = match mode {
            Mode::Burst => tune(&fit, params.percentile)?,
            Mode::Gap => fit,
        };
        let max_iat = match params.max_iat {
            Some(m) => m,
            None => empirical_quantile(samples, 0.99).unwrap_or(0.0),
        };
        let delays = draw_delays(&tuned, params.token_budget, rng);
        let mut hist = TokenHistogram::build(params.bins, max_iat, &delays)?.with_rounding(params.rounding);
        let infinity_tokens = match mode {
            Mode::Burst => hist.set_infinity_tokens_burst(params.pn_burst)?,
            Mode::Gap => {
                let mean = source.mean_burst_length.ok_or(FitError::NoBursts(direction))?;
                hist.set_infinity_tokens_gap(mean)?
            }
        };
        roles.push(RoleFit {
            role: name.to_string(),
            fit,
            tuned,
            holdout_ks: holdout_ks(samples, params.family),
            max_iat,
            infinity_tokens,
        });
        Ok(hist)
    };
    let histograms = HistogramSet {
        send_burst: build("send_burst", Direction::Outgoing, Mode::Burst)?,
        send_gap: build("send_gap", Direction::Outgoing, Mode::Gap)?,
        receive_burst: build("receive_burst", Direction::Incoming, Mode::Burst)?,
        receive_gap: build("receive_gap", Direction::Incoming, Mode::Gap)?,
    };
    Ok(Materialized { histograms, report: FitReport { percentile: params.percentile, roles } })
}
