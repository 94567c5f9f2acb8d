//! Site clocks: offset, frequency drift, aging and white-FM phase noise.
//!
//! A clock maps true time `t` to local time `t + offset(t)` where
//! `offset(t) = δ0 + ΔU·t + ½·aging·t² + x(t)` and `x` is a random-walk phase.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{round_ps, Picos, TagStream, PS_PER_S};

/// Largest accepted |ΔU|.
pub const MAX_FRACTIONAL_DRIFT: f64 = 1.0e-4;

/// Phase noise grid spacing, s.
const NOISE_STEP: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClockError {
    #[error("fractional_drift {0} exceeds the ±1e-4 sanity bound")]
    DriftOutOfRange(f64),
    #[error("invalid clock parameter {field} = {value}")]
    Invalid { field: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClockParams {
    pub delta0: Picos,
    pub fractional_drift: f64,
    /// Linear aging of the fractional frequency, 1/s.
    pub drift_rate_of_change: f64,
    /// Allan deviation at 1 s of the white-FM noise.
    pub white_fm_amplitude: f64,
    pub seed: u64,
}

impl Default for ClockParams {
    fn default() -> Self {
        ClockParams {
            delta0: Picos::ZERO,
            fractional_drift: 0.0,
            drift_rate_of_change: 0.0,
            white_fm_amplitude: 0.0,
            seed: 0,
        }
    }
}

impl ClockParams {
    pub fn validate(&self) -> Result<(), ClockError> {
        if !self.fractional_drift.is_finite() || self.fractional_drift.abs() >= MAX_FRACTIONAL_DRIFT
        {
            return Err(ClockError::DriftOutOfRange(self.fractional_drift));
        }
        if !self.drift_rate_of_change.is_finite() {
            return Err(ClockError::Invalid {
                field: "drift_rate_of_change",
                value: self.drift_rate_of_change,
            });
        }
        if !self.white_fm_amplitude.is_finite() || self.white_fm_amplitude < 0.0 {
            return Err(ClockError::Invalid {
                field: "white_fm_amplitude",
                value: self.white_fm_amplitude,
            });
        }
        Ok(())
    }
}

/// Random-walk phase sampled on a fixed grid and linearly interpolated.
///
/// Samples are drawn in order from one seeded stream, so a longer horizon
/// extends the path without changing its prefix.
#[derive(Debug, Clone)]
pub struct PhaseNoise {
    step: f64,
    /// Phase in seconds at `k·step`.
    x: Vec<f64>,
}

impl PhaseNoise {
    pub fn new(amplitude: f64, seed: u64, horizon: f64) -> PhaseNoise {
        if amplitude <= 0.0 || !(horizon > 0.0) {
            return PhaseNoise {
                step: NOISE_STEP,
                x: vec![0.0],
            };
        }
        let n = (horizon / NOISE_STEP).ceil() as usize + 2;
        let normal = Normal::new(0.0, amplitude * NOISE_STEP.sqrt()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(n);
        let mut acc = 0.0;
        x.push(acc);
        for _ in 1..n {
            acc += normal.sample(&mut rng);
            x.push(acc);
        }
        PhaseNoise {
            step: NOISE_STEP,
            x,
        }
    }

    /// Phase in seconds at true time `t` (s). Held constant outside the grid.
    pub fn phase(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.x[0];
        }
        let u = t / self.step;
        let k = u.floor() as usize;
        if k + 1 >= self.x.len() {
            return *self.x.last().unwrap();
        }
        let w = u - k as f64;
        self.x[k] + w * (self.x[k + 1] - self.x[k])
    }
}

/// A clock with its noise path realized up to a horizon.
#[derive(Debug, Clone)]
pub struct ClockModel {
    pub params: ClockParams,
    noise: PhaseNoise,
}

impl ClockModel {
    pub fn new(params: ClockParams, horizon: f64) -> ClockModel {
        let noise = PhaseNoise::new(params.white_fm_amplitude, params.seed, horizon);
        ClockModel { params, noise }
    }

    /// Offset of local minus true time at true time `t`, in ps (not rounded).
    pub fn offset_ps(&self, t: Picos) -> f64 {
        let p = &self.params;
        let ts = t.as_seconds();
        let t_ps = t.as_f64();
        p.delta0.as_f64()
            + p.fractional_drift * t_ps
            + 0.5 * p.drift_rate_of_change * ts * t_ps
            + self.noise.phase(ts) * PS_PER_S as f64
    }

    fn continuous_part(&self, t: Picos) -> i64 {
        round_ps(self.offset_ps(t) - self.params.delta0.as_f64())
    }

    pub fn to_local(&self, t: Picos) -> Picos {
        t + self.params.delta0 + Picos(self.continuous_part(t))
    }

    /// Inverts [`ClockModel::to_local`] by fixed-point iteration.
    pub fn to_true(&self, local: Picos) -> Picos {
        let mut t = local - self.params.delta0;
        for _ in 0..6 {
            let next = local - self.params.delta0 - Picos(self.continuous_part(t));
            if next == t {
                break;
            }
            t = next;
        }
        t
    }

    pub fn stream_to_local(&self, stream: &TagStream) -> TagStream {
        let tags = stream.tags().iter().map(|&t| self.to_local(t)).collect();
        TagStream::from_unsorted(stream.channel(), tags)
    }
}

fn horizon_of(stream: &TagStream) -> f64 {
    stream.last().map(|t| t.as_seconds() + 1.0).unwrap_or(1.0)
}

/// Maps true-time tags into the clock's local frame.
pub fn to_local_frame(true_tags: &TagStream, clk: &ClockParams) -> TagStream {
    ClockModel::new(clk.clone(), horizon_of(true_tags)).stream_to_local(true_tags)
}

/// Inverse of [`to_local_frame`].
pub fn from_local_frame(local_tags: &TagStream, clk: &ClockParams) -> TagStream {
    let model = ClockModel::new(clk.clone(), horizon_of(local_tags) + 1.0);
    let tags = local_tags
        .tags()
        .iter()
        .map(|&t| model.to_true(t))
        .collect();
    TagStream::from_unsorted(local_tags.channel(), tags)
}

/// Instantaneous offset of `first` minus `second` at true time `t`.
pub fn relative_offset_truth(first: &ClockParams, second: &ClockParams, t: Picos) -> Picos {
    let horizon = t.as_seconds().max(0.0) + 1.0;
    let a = ClockModel::new(first.clone(), horizon);
    let b = ClockModel::new(second.clone(), horizon);
    relative_offset_between(&a, &b, t)
}

pub fn relative_offset_between(first: &ClockModel, second: &ClockModel, t: Picos) -> Picos {
    Picos(round_ps(first.offset_ps(t) - second.offset_ps(t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stability::{fit_loglog_slope, overlapping_adev, PhaseSeries};
    use crate::units::Channel;
    use proptest::prelude::*;

    fn stream(tags: &[i64]) -> TagStream {
        TagStream::new(
            Channel::AliceLocal,
            tags.iter().copied().map(Picos).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_and_pure_offset() {
        let s = stream(&[0, 5, 1_000_000]);
        assert_eq!(to_local_frame(&s, &ClockParams::default()), s);
        let clk = ClockParams {
            delta0: Picos(1000),
            ..ClockParams::default()
        };
        assert_eq!(to_local_frame(&stream(&[0]), &clk).tags(), &[Picos(1000)]);
    }

    #[test]
    fn drift_of_450_ps_per_second() {
        let clk = ClockParams {
            fractional_drift: 4.5e-10,
            ..ClockParams::default()
        };
        let out = to_local_frame(&stream(&[PS_PER_S]), &clk);
        assert_eq!(out.tags(), &[Picos(PS_PER_S + 450)]);
    }

    #[test]
    fn truth_examples() {
        let a = ClockParams {
            white_fm_amplitude: 1e-11,
            seed: 4,
            ..ClockParams::default()
        };
        for t in [0, 7 * PS_PER_S, 123 * PS_PER_S] {
            assert_eq!(relative_offset_truth(&a, &a, Picos(t)), Picos(0));
        }
        let a = ClockParams {
            delta0: Picos(500),
            ..ClockParams::default()
        };
        let b = ClockParams {
            delta0: Picos(-500),
            ..ClockParams::default()
        };
        assert_eq!(
            relative_offset_truth(&a, &b, Picos(9 * PS_PER_S)),
            Picos(1000)
        );
    }

    #[test]
    fn truth_slope_matches_drift_difference() {
        let a = ClockParams {
            fractional_drift: 5.0e-10,
            ..ClockParams::default()
        };
        let b = ClockParams {
            fractional_drift: 0.5e-10,
            ..ClockParams::default()
        };
        let d0 = relative_offset_truth(&a, &b, Picos(10 * PS_PER_S));
        let d1 = relative_offset_truth(&a, &b, Picos(20 * PS_PER_S));
        assert_eq!((d1 - d0).0, 4500);
    }

    #[test]
    fn rejects_large_drift() {
        let clk = ClockParams {
            fractional_drift: 2e-4,
            ..ClockParams::default()
        };
        assert_eq!(clk.validate(), Err(ClockError::DriftOutOfRange(2e-4)));
    }

    #[test]
    fn noise_prefix_is_stable() {
        let short = PhaseNoise::new(1e-11, 9, 10.0);
        let long = PhaseNoise::new(1e-11, 9, 100.0);
        for k in 0..900 {
            let t = k as f64 * 0.0107;
            assert_eq!(short.phase(t), long.phase(t));
        }
    }

    #[test]
    fn white_fm_noise_has_random_walk_adev() {
        let model = ClockModel::new(
            ClockParams {
                white_fm_amplitude: 1e-11,
                seed: 21,
                ..ClockParams::default()
            },
            2001.0,
        );
        let x: Vec<f64> = (0..2000)
            .map(|i| model.offset_ps(Picos(i * PS_PER_S)) * 1e-12)
            .collect();
        let series = PhaseSeries::new(x, 1.0).unwrap();
        let taus: Vec<f64> = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 100.0].to_vec();
        let adev = overlapping_adev(&series, &taus).unwrap();
        let slope = fit_loglog_slope(&adev, (1.0, 100.0)).unwrap();
        assert!((slope + 0.5).abs() <= 0.1, "slope {slope}");
        let a1 = adev[0].1;
        assert!((0.7e-11..1.3e-11).contains(&a1), "adev(1s) {a1}");
    }

    proptest! {
        #[test]
        fn noiseless_round_trip(
            delta0 in -1_000_000_000i64..1_000_000_000,
            drift in -5e-5f64..5e-5,
            aging in -1e-9f64..1e-9,
            tags in proptest::collection::btree_set(0i64..3_000_000_000_000_000, 1..50),
        ) {
            let clk = ClockParams {
                delta0: Picos(delta0),
                fractional_drift: drift,
                drift_rate_of_change: aging,
                ..ClockParams::default()
            };
            let s = TagStream::new(Channel::BobLocal, tags.into_iter().map(Picos).collect()).unwrap();
            let back = from_local_frame(&to_local_frame(&s, &clk), &clk);
            prop_assert_eq!(back.len(), s.len());
            for (a, b) in back.tags().iter().zip(s.tags()) {
                prop_assert!((a.0 - b.0).abs() <= 1, "{} vs {}", a.0, b.0);
            }
        }
    }
}
