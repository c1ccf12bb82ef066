//! Token histograms over inter-arrival delays.
//!
//! Bins grow exponentially towards a practical maximum `M`: with `n` bins,
//! bin 0 covers `[0, M/2^(n-2))`, bin `i` for `1 <= i <= n-2` covers
//! `[M/2^(n-1-i), M/2^(n-2-i))`, and the last bin `[M, inf)` is the
//! infinity bin. Each bin holds integer tokens; a bin is drawn with
//! probability proportional to its tokens, and drawing the infinity bin
//! yields [`Delay::Infinite`].
//!
//! Indices in this module are zero-based.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of bins.
pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HistogramError {
    #[error("invalid histogram parameters: {0}")]
    InvalidParams(String),
    #[error("negative delay {0}")]
    NegativeTime(f64),
    #[error("no samples to build a histogram from")]
    EmptySamples,
    #[error("infinity-bin probability must lie in [0, 1), got {0}")]
    InvalidProbability(f64),
    #[error("mean burst length {mean} invalid for {finite_tokens} finite tokens")]
    InvalidMeanLength { mean: f64, finite_tokens: u64 },
    #[error("histogram has no tokens")]
    EmptyHistogram,
}

/// A sampled delay. `Infinite` comes from the infinity bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Delay {
    Finite(f64),
    Infinite,
}

impl Delay {
    pub fn finite(self) -> Option<f64> {
        match self {
            Delay::Finite(t) => Some(t),
            Delay::Infinite => None,
        }
    }
}

/// How analytic infinity-bin token counts are turned into integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Rounding {
    /// Nearest integer, halves away from zero.
    #[default]
    Nearest,
    Ceiling,
}

impl Rounding {
    fn apply(self, x: f64) -> u64 {
        let r = match self {
            Rounding::Nearest => x.round(),
            Rounding::Ceiling => x.ceil(),
        };
        r.max(0.0) as u64
    }
}

/// A half-open delay interval `[lo, hi)`; `hi` is infinite for the last bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
}

impl Bin {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.lo && t < self.hi
    }
}

fn check_geometry(n: usize, max_iat: f64) -> Result<(), HistogramError> {
    if n < 2 {
        return Err(HistogramError::InvalidParams(format!("need at least 2 bins, got {n}")));
    }
    if n > 1000 {
        return Err(HistogramError::InvalidParams(format!("too many bins: {n}")));
    }
    if !(max_iat > 0.0) || !max_iat.is_finite() {
        return Err(HistogramError::InvalidParams(format!("maximum delay must be positive, got {max_iat}")));
    }
    Ok(())
}

/// Lower edge of bin `i` (zero-based). Bin 0 starts at zero.
fn lower_edge(n: usize, max_iat: f64, i: usize) -> f64 {
    if i == 0 {
        0.0
    } else {
        max_iat / 2f64.powi((n - 1 - i) as i32)
    }
}

/// The `n` bins for maximum practical delay `max_iat`.
pub fn bin_boundaries(n: usize, max_iat: f64) -> Result<Vec<Bin>, HistogramError> {
    check_geometry(n, max_iat)?;
    Ok((0..n)
        .map(|i| Bin {
            lo: lower_edge(n, max_iat, i),
            hi: if i + 1 == n { f64::INFINITY } else { lower_edge(n, max_iat, i + 1) },
        })
        .collect())
}

/// Index of the bin holding `t`, for an `n`-bin geometry.
fn locate(n: usize, max_iat: f64, t: f64) -> usize {
    (1..n).rev().find(|&i| t >= lower_edge(n, max_iat, i)).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HistogramRepr")]
pub struct TokenHistogram {
    #[serde(rename = "n")]
    bins: usize,
    #[serde(rename = "M")]
    max_iat: f64,
    tokens: Vec<u64>,
    initial_tokens: Vec<u64>,
    #[serde(default)]
    rounding: Rounding,
}

#[derive(Deserialize)]
struct HistogramRepr {
    #[serde(rename = "n")]
    bins: usize,
    #[serde(rename = "M")]
    max_iat: f64,
    tokens: Vec<u64>,
    initial_tokens: Vec<u64>,
    #[serde(default)]
    rounding: Rounding,
}

impl TryFrom<HistogramRepr> for TokenHistogram {
    type Error = HistogramError;

    fn try_from(r: HistogramRepr) -> Result<Self, Self::Error> {
        check_geometry(r.bins, r.max_iat)?;
        if r.tokens.len() != r.bins || r.initial_tokens.len() != r.bins {
            return Err(HistogramError::InvalidParams(format!(
                "expected {} token counts, got {} and {}",
                r.bins,
                r.tokens.len(),
                r.initial_tokens.len()
            )));
        }
        if r.initial_tokens.iter().all(|&k| k == 0) {
            return Err(HistogramError::EmptyHistogram);
        }
        Ok(TokenHistogram {
            bins: r.bins,
            max_iat: r.max_iat,
            tokens: r.tokens,
            initial_tokens: r.initial_tokens,
            rounding: r.rounding,
        })
    }
}

/// Which bin a token was removed from, and whether the histogram had to be
/// refilled first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Consumed {
    pub bin: usize,
    pub refilled: bool,
}

impl TokenHistogram {
    /// A histogram with explicit token counts, the last entry being the
    /// infinity bin. The counts also become the refill snapshot.
    pub fn from_tokens(max_iat: f64, tokens: Vec<u64>) -> Result<Self, HistogramError> {
        check_geometry(tokens.len(), max_iat)?;
        if tokens.iter().all(|&k| k == 0) {
            return Err(HistogramError::EmptyHistogram);
        }
        Ok(TokenHistogram {
            bins: tokens.len(),
            max_iat,
            initial_tokens: tokens.clone(),
            tokens,
            rounding: Rounding::default(),
        })
    }

    /// Counts `samples` into the finite bins. Samples at or above the
    /// maximum are clamped into the last finite bin; the infinity bin starts
    /// empty and is set with one of the `set_infinity_tokens_*` methods.
    pub fn build(n: usize, max_iat: f64, samples: &[f64]) -> Result<Self, HistogramError> {
        check_geometry(n, max_iat)?;
        if samples.is_empty() {
            return Err(HistogramError::EmptySamples);
        }
        let mut tokens = vec![0u64; n];
        for &s in samples {
            if !(s >= 0.0) {
                return Err(HistogramError::NegativeTime(s));
            }
            let i = locate(n, max_iat, s).min(n - 2);
            tokens[i] += 1;
        }
        Ok(TokenHistogram { bins: n, max_iat, initial_tokens: tokens.clone(), tokens, rounding: Rounding::default() })
    }

    /// Every draw lands in the infinity bin, so a machine using it never pads.
    pub fn disabled(n: usize, max_iat: f64) -> Result<Self, HistogramError> {
        let mut tokens = vec![0u64; n];
        if let Some(last) = tokens.last_mut() {
            *last = 1;
        }
        Self::from_tokens(max_iat, tokens)
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn rounding(&self) -> Rounding {
        self.rounding
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn max_iat(&self) -> f64 {
        self.max_iat
    }

    pub fn tokens(&self) -> &[u64] {
        &self.tokens
    }

    pub fn initial_tokens(&self) -> &[u64] {
        &self.initial_tokens
    }

    pub fn infinity_bin(&self) -> usize {
        self.bins - 1
    }

    /// Tokens in the finite bins (`K`).
    pub fn finite_tokens(&self) -> u64 {
        self.tokens[..self.bins - 1].iter().sum()
    }

    pub fn infinity_tokens(&self) -> u64 {
        self.tokens[self.bins - 1]
    }

    pub fn total_tokens(&self) -> u64 {
        self.tokens.iter().sum()
    }

    pub fn boundaries(&self) -> Vec<Bin> {
        bin_boundaries(self.bins, self.max_iat).expect("geometry validated at construction")
    }

    pub fn bin(&self, i: usize) -> Bin {
        Bin {
            lo: lower_edge(self.bins, self.max_iat, i),
            hi: if i + 1 == self.bins { f64::INFINITY } else { lower_edge(self.bins, self.max_iat, i + 1) },
        }
    }

    pub fn bin_index(&self, t: f64) -> Result<usize, HistogramError> {
        if !(t >= 0.0) {
            return Err(HistogramError::NegativeTime(t));
        }
        Ok(locate(self.bins, self.max_iat, t))
    }

    fn delay_bin(&self, delay: Delay) -> usize {
        match delay {
            Delay::Infinite => self.infinity_bin(),
            Delay::Finite(t) => locate(self.bins, self.max_iat, t.max(0.0)),
        }
    }

    /// Probability of drawing bin `i`: `k_i / (K + k_n)`.
    pub fn probability(&self, i: usize) -> f64 {
        let total = self.total_tokens();
        if total == 0 {
            0.0
        } else {
            self.tokens[i] as f64 / total as f64
        }
    }

    fn set_infinity(&mut self, k_n: u64) {
        let last = self.bins - 1;
        self.tokens[last] = k_n;
        self.initial_tokens[last] = k_n;
    }

    /// Sets the infinity bin so it is drawn with probability `p_n`, using
    /// `k_n = p_n / (1 - p_n) * K`. Returns the token count set.
    pub fn set_infinity_tokens_burst(&mut self, p_n: f64) -> Result<u64, HistogramError> {
        if !(0.0..1.0).contains(&p_n) {
            return Err(HistogramError::InvalidProbability(p_n));
        }
        let k = self.finite_tokens();
        if k == 0 {
            return Err(HistogramError::EmptyHistogram);
        }
        let k_n = self.rounding.apply(p_n / (1.0 - p_n) * k as f64);
        self.set_infinity(k_n);
        Ok(k_n)
    }

    /// Sets the infinity bin so runs of draws without replacement before the
    /// first infinity token average `mean_len`:
    /// `k_n = (K - mean_len + 1) / (mean_len - 1)`, at least 1.
    pub fn set_infinity_tokens_gap(&mut self, mean_len: f64) -> Result<u64, HistogramError> {
        let k = self.finite_tokens();
        if !(mean_len > 1.0) || !mean_len.is_finite() || (k as f64) < mean_len {
            return Err(HistogramError::InvalidMeanLength { mean: mean_len, finite_tokens: k });
        }
        let k_n = self.rounding.apply((k as f64 - mean_len + 1.0) / (mean_len - 1.0)).max(1);
        self.set_infinity(k_n);
        Ok(k_n)
    }

    /// Draws a bin with probability proportional to its tokens and returns a
    /// uniform delay inside it. Tokens are left in place.
    pub fn sample_delay<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Delay, HistogramError> {
        // An exhausted histogram draws as if refilled, since the next
        // consume refills it anyway.
        let tokens = if self.total_tokens() == 0 { &self.initial_tokens } else { &self.tokens };
        let total: u64 = tokens.iter().sum();
        if total == 0 {
            return Err(HistogramError::EmptyHistogram);
        }
        let mut pick = rng.random_range(0..total);
        let mut chosen = self.bins - 1;
        for (i, &k) in tokens.iter().enumerate() {
            if pick < k {
                chosen = i;
                break;
            }
            pick -= k;
        }
        if chosen == self.infinity_bin() {
            return Ok(Delay::Infinite);
        }
        let bin = self.bin(chosen);
        Ok(Delay::Finite(rng.random_range(bin.lo..bin.hi)))
    }

    fn take_from(&mut self, target: usize) -> Option<usize> {
        let found = (target..self.bins)
            .find(|&i| self.tokens[i] > 0)
            .or_else(|| (0..target).rev().find(|&i| self.tokens[i] > 0))?;
        self.tokens[found] -= 1;
        Some(found)
    }

    /// Removes one token for `delay`: from its own bin, else the nearest
    /// non-empty greater bin, else the nearest non-empty smaller bin. An
    /// empty histogram is first refilled from its initial snapshot.
    pub fn consume_token(&mut self, delay: Delay) -> Consumed {
        let target = self.delay_bin(delay);
        if let Some(bin) = self.take_from(target) {
            return Consumed { bin, refilled: false };
        }
        self.refill();
        let bin = self.take_from(target).expect("initial snapshot holds at least one token");
        Consumed { bin, refilled: true }
    }

    /// Puts back the token for the delay that was being counted down and
    /// removes one for the delay that actually elapsed.
    pub fn return_token(&mut self, sampled: f64, actual: f64) -> Consumed {
        let back = self.delay_bin(Delay::Finite(sampled));
        self.tokens[back] += 1;
        self.consume_token(Delay::Finite(actual))
    }

    pub fn refill(&mut self) {
        self.tokens.clone_from(&self.initial_tokens);
    }
}

/// The four histograms one endpoint runs with: burst- and gap-mode
/// histograms for the machine reacting to its own application data (send)
/// and for the machine reacting to the peer's packets (receive).
///
/// Sets are expressed from the client's point of view. The bridge runs the
/// [`mirrored`](HistogramSet::mirrored) set, so each machine always draws
/// from histograms fitted to the direction it pads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSet {
    pub send_burst: TokenHistogram,
    pub send_gap: TokenHistogram,
    pub receive_burst: TokenHistogram,
    pub receive_gap: TokenHistogram,
}

impl HistogramSet {
    /// A set whose every draw is infinite: machines never leave idle.
    pub fn disabled(n: usize, max_iat: f64) -> Result<Self, HistogramError> {
        let h = TokenHistogram::disabled(n, max_iat)?;
        Ok(HistogramSet { send_burst: h.clone(), send_gap: h.clone(), receive_burst: h.clone(), receive_gap: h })
    }

    pub fn mirrored(&self) -> HistogramSet {
        HistogramSet {
            send_burst: self.receive_burst.clone(),
            send_gap: self.receive_gap.clone(),
            receive_burst: self.send_burst.clone(),
            receive_gap: self.send_gap.clone(),
        }
    }

    /// Histograms in wire order: send burst, send gap, receive burst,
    /// receive gap.
    pub fn as_array(&self) -> [&TokenHistogram; 4] {
        [&self.send_burst, &self.send_gap, &self.receive_burst, &self.receive_gap]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("histograms serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
