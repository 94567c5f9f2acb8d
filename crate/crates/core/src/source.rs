//! Synthetic photon-pair, background and dark-count time tags.
//!
//! Each site owns one pair source. One photon of every pair goes to the
//! local detector, its twin is sent across the channel. Both arms lose
//! photons independently and both get Gaussian timing jitter. Times here are
//! in the source (true) frame; propagation and clock transforms happen later.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{round_ps, Channel, Picos, TagStream, PS_PER_S};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    #[error("invalid source config: {field} = {value} ({reason})")]
    InvalidConfig {
        field: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("duration must be positive, got {0} s")]
    BadDuration(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    /// Pair emission rate, pairs/s.
    pub pair_rate: f64,
    /// Probability that the local photon is detected.
    pub local_efficiency: f64,
    /// Probability that the transmitted photon is detected at the far site.
    pub channel_efficiency: f64,
    /// Per-arm Gaussian timing jitter, s.
    pub pair_jitter_sigma: f64,
    /// Non-paralyzable detector dead time, s.
    pub detector_dead_time: f64,
    /// Sky background on the far receive detector, counts/s.
    pub background_rate: f64,
    /// Dark counts on each detector, counts/s.
    pub dark_rate: f64,
    /// Scintillation index of a mean-preserving log-normal per-second
    /// modulation of the channel efficiency. Zero disables it.
    pub scintillation_index: f64,
    pub rng_seed: u64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            pair_rate: 1.0e4,
            local_efficiency: 0.5,
            channel_efficiency: 0.2,
            pair_jitter_sigma: 350e-12,
            detector_dead_time: 25e-9,
            background_rate: 5.0e3,
            dark_rate: 100.0,
            scintillation_index: 0.0,
            rng_seed: 1,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<(), SourceError> {
        let prob = |field, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(SourceError::InvalidConfig {
                    field,
                    value,
                    reason: "must lie in [0, 1]",
                })
            }
        };
        let nonneg = |field, value: f64| {
            if value.is_finite() && value >= 0.0 {
                Ok(())
            } else {
                Err(SourceError::InvalidConfig {
                    field,
                    value,
                    reason: "must be finite and >= 0",
                })
            }
        };
        prob("local_efficiency", self.local_efficiency)?;
        prob("channel_efficiency", self.channel_efficiency)?;
        nonneg("pair_rate", self.pair_rate)?;
        nonneg("pair_jitter_sigma", self.pair_jitter_sigma)?;
        nonneg("detector_dead_time", self.detector_dead_time)?;
        nonneg("background_rate", self.background_rate)?;
        nonneg("dark_rate", self.dark_rate)?;
        nonneg("scintillation_index", self.scintillation_index)?;
        Ok(())
    }

    pub fn dead_time(&self) -> Picos {
        Picos(round_ps(self.detector_dead_time * PS_PER_S as f64))
    }
}

/// Ground truth of one pair-generation run.
#[derive(Debug, Clone)]
pub struct EmissionRecord {
    pub true_emission_times: Vec<Picos>,
    pub local_detections: TagStream,
    /// Emission index of each local detection, in the same order.
    pub local_emission_indices: Vec<usize>,
    /// `(emission index, jittered source-frame time)` for every transmitted
    /// photon that survived the channel and the far detector's dead time.
    pub transmitted_detections: Vec<(usize, Picos)>,
}

/// SplitMix64 finalizer, used to derive independent sub-stream seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SCINTILLATION_STREAM: u64 = 0x5C17;

/// Emission times (s) of a homogeneous Poisson process on `[start, end)`.
pub fn poisson_times<R: Rng>(rng: &mut R, rate: f64, start: f64, end: f64) -> Vec<f64> {
    if rate <= 0.0 || end <= start {
        return Vec::new();
    }
    let exp = Exp::new(rate).expect("rate > 0");
    let mut out = Vec::with_capacity(((end - start) * rate * 1.01) as usize + 16);
    let mut t = start + exp.sample(rng);
    while t < end {
        out.push(t);
        t += exp.sample(rng);
    }
    out
}

fn seconds_to_ps(t: f64) -> Picos {
    Picos(round_ps(t * PS_PER_S as f64))
}

/// Drops detections that fall inside the dead time of the previous kept
/// detection. Input must be sorted; output is strictly increasing.
pub fn apply_dead_time(sorted: &[Picos], dead_time: Picos) -> Vec<Picos> {
    let gap = dead_time.0.max(1);
    let mut out = Vec::with_capacity(sorted.len());
    let mut last: Option<i64> = None;
    for &t in sorted {
        match last {
            Some(l) if t.0 - l < gap => {}
            _ => {
                out.push(t);
                last = Some(t.0);
            }
        }
    }
    out
}

/// Dead-time filter over `(tag, id)` pairs; ids ride along with their tags.
pub(crate) fn dead_time_indexed<T: Ord>(mut v: Vec<(Picos, T)>, dead: i64) -> Vec<(Picos, T)> {
    v.sort_unstable();
    let mut last: Option<i64> = None;
    v.retain(|&(t, _)| match last {
        Some(l) if t.0 - l < dead => false,
        _ => {
            last = Some(t.0);
            true
        }
    });
    v
}

/// Merges several detection sources hitting one physical detector.
pub fn merge_detector(channel: Channel, parts: &[&[Picos]], dead_time: Picos) -> TagStream {
    let mut all: Vec<Picos> = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        all.extend_from_slice(p);
    }
    all.sort_unstable();
    let kept = apply_dead_time(&all, dead_time);
    TagStream::new(channel, kept).expect("dead-time filter yields increasing tags")
}

/// Mean-preserving log-normal efficiency factor for the whole second `second`.
fn scintillation_factor(cfg: &SourceConfig, second: i64) -> f64 {
    if cfg.scintillation_index <= 0.0 {
        return 1.0;
    }
    let var = (1.0 + cfg.scintillation_index).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        derive_seed(cfg.rng_seed, SCINTILLATION_STREAM),
        second as u64,
    ));
    let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
    (var.sqrt() * z - 0.5 * var).exp()
}

/// Generates pairs on `[0, duration)` seeded by `cfg.rng_seed`.
pub fn generate_pairs(
    cfg: &SourceConfig,
    duration: f64,
    local_channel: Channel,
) -> Result<EmissionRecord, SourceError> {
    if !(duration > 0.0) {
        return Err(SourceError::BadDuration(duration));
    }
    generate_pairs_between(cfg, 0.0, duration, cfg.rng_seed, local_channel)
}

/// Generates pairs on `[start, end)` with an explicit seed. Used to build long
/// scenarios in independent chunks.
pub fn generate_pairs_between(
    cfg: &SourceConfig,
    start: f64,
    end: f64,
    seed: u64,
    local_channel: Channel,
) -> Result<EmissionRecord, SourceError> {
    cfg.validate()?;
    if !(end > start) {
        return Err(SourceError::BadDuration(end - start));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emissions = poisson_times(&mut rng, cfg.pair_rate, start, end);
    let jitter = Normal::new(0.0, cfg.pair_jitter_sigma).expect("sigma >= 0");

    let mut true_times = Vec::with_capacity(emissions.len());
    let mut local = Vec::with_capacity((emissions.len() as f64 * cfg.local_efficiency) as usize);
    let mut transmitted = Vec::new();
    let mut scint_second = i64::MIN;
    let mut channel_eff = cfg.channel_efficiency;
    for (idx, &t) in emissions.iter().enumerate() {
        true_times.push(seconds_to_ps(t));
        let sec = t.floor() as i64;
        if sec != scint_second {
            scint_second = sec;
            channel_eff = (cfg.channel_efficiency * scintillation_factor(cfg, sec)).min(1.0);
        }
        // fixed draw order keeps output reproducible
        let keep_local = rng.random::<f64>() < cfg.local_efficiency;
        let keep_far = rng.random::<f64>() < channel_eff;
        if keep_local {
            local.push((seconds_to_ps(t + jitter.sample(&mut rng)), idx));
        }
        if keep_far {
            transmitted.push((idx, seconds_to_ps(t + jitter.sample(&mut rng))));
        }
    }

    let dead = cfg.dead_time().0.max(1);
    let local = dead_time_indexed(local, dead);
    let transmitted: Vec<(usize, Picos)> =
        dead_time_indexed(transmitted.into_iter().map(|(i, t)| (t, i)).collect(), dead)
            .into_iter()
            .map(|(t, i)| (i, t))
            .collect();
    let (tags, indices): (Vec<Picos>, Vec<usize>) = local.into_iter().unzip();

    Ok(EmissionRecord {
        true_emission_times: true_times,
        local_detections: TagStream::new(local_channel, tags).expect("dead-time filtered"),
        local_emission_indices: indices,
        transmitted_detections: transmitted,
    })
}

/// Homogeneous Poisson noise stream on `[0, duration)`, sorted and deduplicated.
pub fn generate_background(rate: f64, duration: f64, seed: u64, channel: Channel) -> TagStream {
    generate_background_between(rate, 0.0, duration, seed, channel)
}

pub fn generate_background_between(
    rate: f64,
    start: f64,
    end: f64,
    seed: u64,
    channel: Channel,
) -> TagStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tags = poisson_times(&mut rng, rate, start, end)
        .into_iter()
        .map(seconds_to_ps)
        .collect();
    TagStream::from_unsorted(channel, tags)
}
