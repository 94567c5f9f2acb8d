//! Cross-correlation of a local and a receive tag stream.
//!
//! The histogram of `receive − local` differences inside the search range is
//! built with a merged two-pointer sweep, so cost grows with the number of
//! pairs inside the range rather than with the product of stream lengths.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::gamma_lr;
use thiserror::Error;

use crate::units::{Picos, TagStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrelationError {
    #[error("invalid correlation config: {0}")]
    Config(String),
    #[error("search half-width {halfwidth} exceeds the combined stream span {span}")]
    HalfwidthExceedsSpan { halfwidth: Picos, span: Picos },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelationConfig {
    pub coarse_bin: Picos,
    pub search_halfwidth: Picos,
    /// Centre of the scanned offset range.
    pub search_center: Picos,
    pub coincidence_window: Picos,
    pub fine_bin: Picos,
    pub min_peak_significance: f64,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        CorrelationConfig {
            coarse_bin: Picos(500),
            search_halfwidth: Picos(20_000_000),
            search_center: Picos::ZERO,
            coincidence_window: Picos(1000),
            fine_bin: Picos(1),
            min_peak_significance: 6.0,
        }
    }
}

impl CorrelationConfig {
    pub fn validate(&self) -> Result<(), CorrelationError> {
        let err = |m: &str| Err(CorrelationError::Config(m.to_string()));
        if self.fine_bin.0 <= 0 || self.coarse_bin.0 <= 0 {
            return err("bin widths must be positive");
        }
        if self.fine_bin > self.coarse_bin {
            return err("fine_bin must not exceed coarse_bin");
        }
        if self.coincidence_window < self.fine_bin {
            return err("coincidence_window must be at least fine_bin");
        }
        if self.search_halfwidth < self.coarse_bin {
            return err("search_halfwidth must be at least coarse_bin");
        }
        if !(self.min_peak_significance > 0.0) {
            return err("min_peak_significance must be positive");
        }
        Ok(())
    }

    /// Number of histogram bins covering `[center − H, center + H)`.
    pub fn bin_count(&self) -> usize {
        ((2 * self.search_halfwidth.0 + self.coarse_bin.0 - 1) / self.coarse_bin.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// Lower edge of bin 0.
    pub start: Picos,
    pub bin: Picos,
    pub counts: Vec<u32>,
}

impl Histogram {
    pub fn center(&self, k: usize) -> Picos {
        Picos(self.start.0 + k as i64 * self.bin.0 + self.bin.0 / 2)
    }

    /// Full width at half maximum of the tallest peak, in ps, from the
    /// outermost bins at or above half height around it.
    pub fn fwhm(&self) -> Picos {
        let Some((kmax, &hmax)) = self.counts.iter().enumerate().max_by_key(|&(_, c)| *c) else {
            return Picos::ZERO;
        };
        let half = hmax as f64 / 2.0;
        let mut lo = kmax;
        while lo > 0 && self.counts[lo - 1] as f64 >= half {
            lo -= 1;
        }
        let mut hi = kmax;
        while hi + 1 < self.counts.len() && self.counts[hi + 1] as f64 >= half {
            hi += 1;
        }
        Picos((hi - lo + 1) as i64 * self.bin.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationResult {
    /// Relative offset: centroid of coincident `receive − local` differences.
    pub tau: Option<Picos>,
    pub peak_height: u64,
    pub accidental_mean: f64,
    pub car: f64,
    /// Set when no off-peak counts exist; `car` then holds the peak height.
    pub accidentals_empty: bool,
    /// Peak excess over accidentals in units of `sqrt(accidental_mean)`.
    pub significance: f64,
    pub coincidences: Vec<(Picos, Picos)>,
    pub found: bool,
    pub histogram: Histogram,
}

impl CorrelationResult {
    fn not_found(histogram: Histogram) -> CorrelationResult {
        CorrelationResult {
            tau: None,
            peak_height: 0,
            accidental_mean: 0.0,
            car: 0.0,
            accidentals_empty: true,
            significance: 0.0,
            coincidences: Vec::new(),
            found: false,
            histogram,
        }
    }
}

/// Visits every `(local, receive)` pair with `lo <= r − l < hi`.
fn for_each_pair(
    local: &[Picos],
    receive: &[Picos],
    lo: i64,
    hi: i64,
    mut f: impl FnMut(Picos, Picos),
) {
    let mut j0 = 0usize;
    for &l in local {
        while j0 < receive.len() && receive[j0].0 - l.0 < lo {
            j0 += 1;
        }
        let mut j = j0;
        while j < receive.len() && receive[j].0 - l.0 < hi {
            f(l, receive[j]);
            j += 1;
        }
    }
}

/// Difference histogram over the configured search range.
pub fn difference_histogram(
    local: &[Picos],
    receive: &[Picos],
    cfg: &CorrelationConfig,
) -> Histogram {
    let start = cfg.search_center.0 - cfg.search_halfwidth.0;
    let end = cfg.search_center.0 + cfg.search_halfwidth.0;
    let bin = cfg.coarse_bin.0;
    let mut counts = vec![0u32; cfg.bin_count()];
    for_each_pair(local, receive, start, end, |l, r| {
        counts[((r.0 - l.0 - start) / bin) as usize] += 1;
    });
    Histogram {
        start: Picos(start),
        bin: cfg.coarse_bin,
        counts,
    }
}

/// One-sided Gaussian tail probability beyond `sigmas`.
pub fn gaussian_tail(sigmas: f64) -> f64 {
    0.5 * erfc(sigmas / std::f64::consts::SQRT_2)
}

/// `P(X >= k)` for `X ~ Poisson(lambda)`.
pub fn poisson_upper_tail(k: u64, lambda: f64) -> f64 {
    if k == 0 {
        1.0
    } else if lambda <= 0.0 {
        0.0
    } else {
        gamma_lr(k as f64, lambda)
    }
}

/// All pairs with `|r − l − tau| <= window`.
pub fn extract_coincidences(
    local: &[Picos],
    receive: &[Picos],
    tau: Picos,
    window: Picos,
) -> Vec<(Picos, Picos)> {
    let mut out = Vec::new();
    for_each_pair(
        local,
        receive,
        tau.0 - window.0,
        tau.0 + window.0 + 1,
        |l, r| out.push((l, r)),
    );
    out
}

/// Iterated windowed centroid starting from `start`.
///
/// `density` is the accidental pair density per ps. Its uniform pedestal
/// inside the window is subtracted so the estimate does not lean toward the
/// current window centre.
fn refine_tau(
    local: &[Picos],
    receive: &[Picos],
    start: Picos,
    window: Picos,
    density: f64,
) -> Option<Picos> {
    let pedestal = density * (2 * window.0 + 1) as f64;
    let mut center = start;
    let mut visited = Vec::new();
    for _ in 0..20 {
        let mut sum: i128 = 0;
        let mut n: i128 = 0;
        for_each_pair(
            local,
            receive,
            center.0 - window.0,
            center.0 + window.0 + 1,
            |l, r| {
                sum += (r.0 - l.0) as i128;
                n += 1;
            },
        );
        if n == 0 {
            return None;
        }
        let signal = n as f64 - pedestal;
        let next = if pedestal > 0.0 && signal >= 1.0 {
            let excess = sum as f64 - pedestal * center.as_f64();
            Picos((excess / signal).round() as i64)
        } else {
            Picos(div_round(sum, n) as i64)
        };
        // keep the update inside the current window
        let next = Picos(next.0.clamp(center.0 - window.0, center.0 + window.0));
        if next == center || visited.contains(&next) {
            return Some(next);
        }
        visited.push(center);
        center = next;
    }
    Some(center)
}

/// Integer division rounding to nearest, ties away from zero.
pub fn div_round(num: i128, den: i128) -> i128 {
    let (q, r) = (num / den, num % den);
    if 2 * r.abs() >= den.abs() {
        q + if (num < 0) != (den < 0) { -1 } else { 1 }
    } else {
        q
    }
}

pub fn correlate(
    local: &TagStream,
    receive: &TagStream,
    cfg: &CorrelationConfig,
) -> Result<CorrelationResult, CorrelationError> {
    correlate_tags(local.tags(), receive.tags(), cfg)
}

pub fn correlate_tags(
    local: &[Picos],
    receive: &[Picos],
    cfg: &CorrelationConfig,
) -> Result<CorrelationResult, CorrelationError> {
    cfg.validate()?;
    if local.is_empty() || receive.is_empty() {
        return Ok(CorrelationResult::not_found(Histogram {
            start: cfg.search_center - cfg.search_halfwidth,
            bin: cfg.coarse_bin,
            counts: vec![0; cfg.bin_count()],
        }));
    }
    let first = local[0].min(receive[0]);
    let last = local[local.len() - 1].max(receive[receive.len() - 1]);
    let span = last - first;
    if cfg.search_halfwidth > span && span > Picos::ZERO {
        return Err(CorrelationError::HalfwidthExceedsSpan {
            halfwidth: cfg.search_halfwidth,
            span,
        });
    }

    let hist = difference_histogram(local, receive, cfg);
    let (peak_k, peak) = hist
        .counts
        .iter()
        .enumerate()
        .max_by(|a, b| {
            let off = |k: usize| (hist.center(k) - cfg.search_center).0.abs();
            a.1.cmp(b.1).then_with(|| off(b.0).cmp(&off(a.0)))
        })
        .map(|(k, &c)| (k, c as u64))
        .unwrap();

    let far = 10 * cfg.coincidence_window.0;
    let mean_outside = |limit: i64| {
        let peak_c = hist.center(peak_k).0;
        let (mut sum, mut n) = (0u64, 0u64);
        for (k, &c) in hist.counts.iter().enumerate() {
            if (hist.center(k).0 - peak_c).abs() > limit {
                sum += c as u64;
                n += 1;
            }
        }
        (n > 0).then(|| (sum as f64 / n as f64, n))
    };
    let (acc_mean, n_off) = mean_outside(far)
        .or_else(|| mean_outside(cfg.coincidence_window.0))
        .unwrap_or((0.0, 1));

    let accidentals_empty = acc_mean == 0.0;
    let car = if accidentals_empty {
        peak as f64
    } else {
        peak as f64 / acc_mean
    };
    let significance = if accidentals_empty {
        f64::INFINITY
    } else {
        (peak as f64 - acc_mean) / acc_mean.sqrt()
    };
    let lambda = acc_mean.max(1.0 / n_off as f64);
    let s = cfg.min_peak_significance;
    let found = peak as f64 - acc_mean >= s * acc_mean.sqrt()
        && poisson_upper_tail(peak, lambda) <= gaussian_tail(s);

    let mut result = CorrelationResult {
        tau: None,
        peak_height: peak,
        accidental_mean: acc_mean,
        car,
        accidentals_empty,
        significance,
        coincidences: Vec::new(),
        found: false,
        histogram: hist,
    };
    if !found {
        return Ok(result);
    }
    let start = result.histogram.center(peak_k);
    let density = acc_mean / cfg.coarse_bin.as_f64();
    if let Some(tau) = refine_tau(local, receive, start, cfg.coincidence_window, density) {
        result.tau = Some(tau);
        result.coincidences = extract_coincidences(local, receive, tau, cfg.coincidence_window);
        result.found = true;
    }
    Ok(result)
}

/// Removes a linear frequency offset: `t ↦ t − drift·(t − t_ref)`.
pub fn apply_drift_compensation(receive: &TagStream, drift: f64, t_ref: Picos) -> TagStream {
    if drift == 0.0 {
        return receive.clone();
    }
    let tags = receive
        .tags()
        .iter()
        .map(|&t| t - Picos((drift * (t - t_ref).as_f64()).round() as i64))
        .collect();
    TagStream::from_unsorted(receive.channel(), tags)
}
