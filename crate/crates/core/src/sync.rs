//! Two-way offset recovery and the stationary software clocks.
//!
//! Direction α pairs Alice's local stream with Bob's receive stream, direction
//! β pairs Bob's local stream with Alice's receive stream. With
//! `τα = Tα + δ` and `τβ = Tβ − δ`, the absolute offset follows from
//! [`absolute_offset`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::{
    apply_drift_compensation, correlate_tags, div_round, CorrelationConfig, CorrelationError,
};
use crate::source::{derive_seed, generate_background_between};
use crate::units::{window, Channel, Picos, TagStream, PS_PER_S};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("synchronization lost at acquisition {index} after {missed} consecutive misses")]
    SyncLost { index: usize, missed: usize },
    #[error(transparent)]
    Correlation(#[from] CorrelationError),
    #[error("invalid acquisition config: {0}")]
    Config(String),
    #[error("streams are too short for a single acquisition")]
    NoAcquisitions,
    #[error("stream for {expected} carries channel {found}")]
    WrongChannel { expected: Channel, found: Channel },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    Synchronized,
    Drifting,
}

impl SyncMode {
    pub fn name(self) -> &'static str {
        match self {
            SyncMode::Synchronized => "sync",
            SyncMode::Drifting => "drift",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionConfig {
    /// Acquisition time T_a, s.
    pub acquisition_time: f64,
    /// Consecutive missed acquisitions tolerated before giving up.
    pub max_missed: usize,
    pub correlation: CorrelationConfig,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            acquisition_time: 1.0,
            max_missed: 5,
            correlation: CorrelationConfig::default(),
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<(), SyncError> {
        if !(self.acquisition_time > 0.0) || !self.acquisition_time.is_finite() {
            return Err(SyncError::Config(format!(
                "acquisition_time must be positive, got {}",
                self.acquisition_time
            )));
        }
        self.correlation.validate()?;
        Ok(())
    }

    pub fn acquisition_ps(&self) -> Picos {
        Picos((self.acquisition_time * PS_PER_S as f64).round() as i64)
    }
}

/// The four detector streams of one run, each in its own site's clock frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkStreams {
    pub alice_local: TagStream,
    pub alice_receive: TagStream,
    pub bob_local: TagStream,
    pub bob_receive: TagStream,
}

impl LinkStreams {
    pub fn new(
        alice_local: TagStream,
        alice_receive: TagStream,
        bob_local: TagStream,
        bob_receive: TagStream,
    ) -> Result<LinkStreams, SyncError> {
        for (s, ch) in [
            (&alice_local, Channel::AliceLocal),
            (&alice_receive, Channel::AliceReceive),
            (&bob_local, Channel::BobLocal),
            (&bob_receive, Channel::BobReceive),
        ] {
            if s.channel() != ch {
                return Err(SyncError::WrongChannel {
                    expected: ch,
                    found: s.channel(),
                });
            }
        }
        Ok(LinkStreams {
            alice_local,
            alice_receive,
            bob_local,
            bob_receive,
        })
    }

    pub fn get(&self, ch: Channel) -> &TagStream {
        match ch {
            Channel::AliceLocal => &self.alice_local,
            Channel::AliceReceive => &self.alice_receive,
            Channel::BobLocal => &self.bob_local,
            Channel::BobReceive => &self.bob_receive,
        }
    }

    /// Relabels Alice as Bob and vice versa.
    pub fn swapped(&self) -> LinkStreams {
        LinkStreams {
            alice_local: self.bob_local.clone().with_channel(Channel::AliceLocal),
            alice_receive: self.bob_receive.clone().with_channel(Channel::AliceReceive),
            bob_local: self.alice_local.clone().with_channel(Channel::BobLocal),
            bob_receive: self.alice_receive.clone().with_channel(Channel::BobReceive),
        }
    }

    /// `(local, receive)` of direction α.
    pub fn alpha(&self) -> (&TagStream, &TagStream) {
        (&self.alice_local, &self.bob_receive)
    }

    /// `(local, receive)` of direction β.
    pub fn beta(&self) -> (&TagStream, &TagStream) {
        (&self.bob_local, &self.alice_receive)
    }

    /// Start of the first acquisition and the number of whole acquisitions.
    pub fn acquisition_grid(&self, t_a: Picos) -> (Picos, usize) {
        let (al, bl) = (&self.alice_local, &self.bob_local);
        let start = match (al.first(), bl.first()) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => return (Picos::ZERO, 0),
        };
        let end = al.last().unwrap_or(start).max(bl.last().unwrap_or(start));
        let start = Picos(start.0.div_euclid(t_a.0) * t_a.0);
        (start, ((end - start).0 / t_a.0) as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncRecord {
    pub acq_index: usize,
    pub t_mid: Picos,
    pub tau_alpha: Picos,
    pub tau_beta: Picos,
    pub delta: Picos,
    pub t_prop_measured: Picos,
    pub drift_alpha: f64,
    pub drift_beta: f64,
    pub found_alpha: bool,
    pub found_beta: bool,
}

impl SyncRecord {
    pub fn found(&self) -> bool {
        self.found_alpha && self.found_beta
    }
}

/// `δ = (τα − τβ − Tα + Tβ)/2`, rounded to nearest with ties away from zero.
pub fn absolute_offset(
    tau_alpha: Picos,
    tau_beta: Picos,
    tprop_alpha: Picos,
    tprop_beta: Picos,
) -> Picos {
    let num =
        tau_alpha.0 as i128 - tau_beta.0 as i128 - tprop_alpha.0 as i128 + tprop_beta.0 as i128;
    Picos(div_round(num, 2) as i64)
}

/// Mean of two offsets, rounded like [`absolute_offset`].
pub fn mean_offset(a: Picos, b: Picos) -> Picos {
    Picos(div_round(a.0 as i128 + b.0 as i128, 2) as i64)
}

/// One direction's outcome for one acquisition.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DirectionFix {
    pub tau: Option<Picos>,
}

/// Correlates one direction inside `[t0, t1)` of local time. Receive tags
/// are first de-stretched about `t_mid` by `drift` and moved back by `shift`.
pub(crate) fn correlate_window(
    local: &TagStream,
    receive: &TagStream,
    t0: Picos,
    t1: Picos,
    shift: Picos,
    drift: f64,
    cfg: &CorrelationConfig,
) -> Result<DirectionFix, CorrelationError> {
    let l = window(local.tags(), t0, t1);
    let lo = t0 + cfg.search_center + shift - cfg.search_halfwidth - cfg.coincidence_window;
    let hi = t1 + cfg.search_center + shift + cfg.search_halfwidth + cfg.coincidence_window;
    let raw = window(receive.tags(), lo, hi);
    let t_mid = Picos((t0.0 + t1.0) / 2);
    let moved: Vec<Picos> = if drift == 0.0 {
        raw.iter().map(|&t| t - shift).collect()
    } else {
        let s = TagStream::from_unsorted(receive.channel(), raw.to_vec());
        apply_drift_compensation(&s, drift, t_mid)
            .into_tags()
            .into_iter()
            .map(|t| t - shift)
            .collect()
    };
    let res = correlate_tags(l, &moved, cfg)?;
    Ok(DirectionFix {
        tau: res.tau.map(|t| t + shift),
    })
}

/// Per-direction state of the synchronized clock recursion.
#[derive(Debug, Clone, Default)]
pub(crate) struct Recursion {
    first: Option<Picos>,
    prev: Option<Picos>,
    pub drift: f64,
    pub shift: Picos,
}

impl Recursion {
    /// Feeds one acquisition's full offset (or a miss) and returns the
    /// synchronized-clock residual.
    pub fn step(&mut self, tau: Option<Picos>, t_a: Picos) -> Option<Picos> {
        let shift_used = self.shift;
        match tau {
            Some(t) => {
                if self.first.is_none() {
                    self.first = Some(t);
                }
                if let Some(p) = self.prev {
                    self.drift = (t - p).as_f64() / t_a.as_f64();
                }
                self.prev = Some(t);
            }
            None => {
                // carry the drift forward and predict the missing offset
                if let Some(p) = self.prev {
                    self.prev = Some(p + Picos((self.drift * t_a.as_f64()).round() as i64));
                }
            }
        }
        self.shift += Picos((self.drift * t_a.as_f64()).round() as i64);
        tau.map(|t| t - shift_used)
    }
}

pub fn run_stationary_sync(
    streams: &LinkStreams,
    cfg: &AcquisitionConfig,
    mode: SyncMode,
) -> Result<Vec<SyncRecord>, SyncError> {
    cfg.validate()?;
    let t_a = cfg.acquisition_ps();
    let (start, n) = streams.acquisition_grid(t_a);
    if n == 0 {
        return Err(SyncError::NoAcquisitions);
    }
    let (al, ar) = streams.alpha();
    let (bl, br) = streams.beta();
    let mut rec_a = Recursion::default();
    let mut rec_b = Recursion::default();
    let mut missed = 0usize;
    let mut last_delta = Picos::ZERO;
    let mut last_tprop = Picos::ZERO;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t0 = start + Picos(i as i64 * t_a.0);
        let t1 = t0 + t_a;
        let t_mid = Picos((t0.0 + t1.0) / 2);
        let (shift_a, drift_a, shift_b, drift_b) = match mode {
            SyncMode::Synchronized => (rec_a.shift, rec_a.drift, rec_b.shift, rec_b.drift),
            SyncMode::Drifting => (Picos::ZERO, 0.0, Picos::ZERO, 0.0),
        };
        let fa = correlate_window(al, ar, t0, t1, shift_a, drift_a, &cfg.correlation)?;
        let fb = correlate_window(bl, br, t0, t1, shift_b, drift_b, &cfg.correlation)?;

        let (ta, tb) = match mode {
            SyncMode::Synchronized => (rec_a.step(fa.tau, t_a), rec_b.step(fb.tau, t_a)),
            SyncMode::Drifting => {
                rec_a.step(fa.tau, t_a);
                rec_b.step(fb.tau, t_a);
                (fa.tau, fb.tau)
            }
        };
        let found = ta.is_some() && tb.is_some();
        if found {
            missed = 0;
        } else {
            missed += 1;
            if missed > cfg.max_missed {
                return Err(SyncError::SyncLost { index: i, missed });
            }
        }
        let (tau_alpha, tau_beta) = (ta.unwrap_or(Picos::ZERO), tb.unwrap_or(Picos::ZERO));
        if found {
            last_delta = absolute_offset(tau_alpha, tau_beta, Picos::ZERO, Picos::ZERO);
            last_tprop = mean_offset(tau_alpha, tau_beta);
        }
        out.push(SyncRecord {
            acq_index: i,
            t_mid,
            tau_alpha,
            tau_beta,
            delta: last_delta,
            t_prop_measured: last_tprop,
            drift_alpha: rec_a.drift,
            drift_beta: rec_b.drift,
            found_alpha: ta.is_some(),
            found_beta: tb.is_some(),
        });
    }
    Ok(out)
}

/// Correlation quality at one injected background rate.
#[derive(Debug, Clone, PartialEq)]
pub struct CarPoint {
    /// Extra background per detector, counts/s.
    pub background_rate: f64,
    /// Direction-acquisitions evaluated.
    pub trials: usize,
    pub found_fraction: f64,
    /// Mean CAR over trials with a populated off-peak region.
    pub car_mean: f64,
    pub peak_mean: f64,
}

/// Half-width of the sweep search, in coincidence windows.
const SWEEP_HALFWIDTH_WINDOWS: i64 = 200;

/// Adds Poisson background at each rate to all four detectors and
/// correlates up to `max_acquisitions` acquisitions per direction.
///
/// Each direction is first located on the clean data; the sweep then
/// searches a narrow range around the last peak it found, so the histogram
/// stays small however loud the noise gets.
pub fn car_sweep(
    streams: &LinkStreams,
    cfg: &AcquisitionConfig,
    rates: &[f64],
    max_acquisitions: usize,
    seed: u64,
) -> Result<Vec<CarPoint>, SyncError> {
    cfg.validate()?;
    if let Some(r) = rates.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
        return Err(SyncError::Config(format!(
            "background rate must be non-negative, got {r}"
        )));
    }
    let t_a = cfg.acquisition_ps();
    let (start, n) = streams.acquisition_grid(t_a);
    let n = n.min(max_acquisitions);
    if n == 0 {
        return Err(SyncError::NoAcquisitions);
    }
    let dirs = [streams.alpha(), streams.beta()];
    let mut centers = [Picos::ZERO; 2];
    for (d, (local, receive)) in dirs.iter().enumerate() {
        let fix = correlate_window(
            local,
            receive,
            start,
            start + t_a,
            Picos::ZERO,
            0.0,
            &cfg.correlation,
        )?;
        centers[d] = fix.tau.ok_or(SyncError::SyncLost {
            index: 0,
            missed: 1,
        })?;
    }
    let mut narrow = cfg.correlation.clone();
    narrow.search_halfwidth = Picos(
        (SWEEP_HALFWIDTH_WINDOWS * cfg.correlation.coincidence_window.0)
            .max(20 * cfg.correlation.coarse_bin.0)
            .min(cfg.correlation.search_halfwidth.0),
    );
    let margin = narrow.search_halfwidth + narrow.coincidence_window;
    let noisy = |tags: &[Picos], lo: Picos, hi: Picos, rate: f64, seed: u64| -> Vec<Picos> {
        let extra = generate_background_between(
            rate,
            lo.as_seconds(),
            hi.as_seconds(),
            seed,
            Channel::AliceLocal,
        );
        let mut v: Vec<Picos> = tags.iter().copied().chain(extra.into_tags()).collect();
        v.sort_unstable();
        v.dedup();
        v
    };

    let mut out = Vec::with_capacity(rates.len());
    for (k, &rate) in rates.iter().enumerate() {
        let mut c = centers;
        let (mut found, mut trials, mut car_sum, mut car_n, mut peak_sum) =
            (0usize, 0usize, 0.0, 0usize, 0.0);
        for i in 0..n {
            let t0 = start + Picos(i as i64 * t_a.0);
            let t1 = t0 + t_a;
            for (d, (local, receive)) in dirs.iter().enumerate() {
                let base = derive_seed(derive_seed(seed, k as u64), (2 * i + d) as u64);
                let l = noisy(
                    window(local.tags(), t0, t1),
                    t0,
                    t1,
                    rate,
                    derive_seed(base, 0),
                );
                let (lo, hi) = (t0 + c[d] - margin, t1 + c[d] + margin);
                let r = noisy(
                    window(receive.tags(), lo, hi),
                    lo,
                    hi,
                    rate,
                    derive_seed(base, 1),
                );
                let mut cc = narrow.clone();
                cc.search_center = c[d];
                let res = correlate_tags(&l, &r, &cc)?;
                trials += 1;
                peak_sum += res.peak_height as f64;
                if !res.accidentals_empty {
                    car_sum += res.car;
                    car_n += 1;
                }
                if let Some(tau) = res.tau {
                    found += 1;
                    c[d] = tau;
                }
            }
        }
        out.push(CarPoint {
            background_rate: rate,
            trials,
            found_fraction: found as f64 / trials as f64,
            car_mean: if car_n > 0 {
                car_sum / car_n as f64
            } else {
                f64::INFINITY
            },
            peak_mean: peak_sum / trials as f64,
        });
    }
    Ok(out)
}
