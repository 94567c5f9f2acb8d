//! End-to-end scenario simulation: pair sources, propagation, background,
//! detector dead time and the two site clocks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{relative_offset_between, ClockModel, ClockParams};
use crate::io::scenario::{Link, Scenario};
use crate::orbit::{Direction, OrbitError, OrbitGeometry, OrbitParams};
use crate::source::{
    dead_time_indexed, derive_seed, generate_background_between, generate_pairs_between,
    SourceConfig, SourceError,
};
use crate::sync::LinkStreams;
use crate::units::{picos_from_seconds, round_ps, Channel, Picos, TagStream, PS_PER_S};

/// Scenarios are generated in independent chunks of this many seconds.
pub const CHUNK_SECONDS: f64 = 60.0;

const NOISE: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Orbit(#[from] OrbitError),
    #[error("scenario is too long for pair bookkeeping ({0} emissions)")]
    TooManyEmissions(u64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimulateOptions {
    /// Record which receive tag belongs to which local tag.
    pub true_pairs: bool,
}

/// Ground truth at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSample {
    /// True time, s.
    pub t: f64,
    /// Clock offset of B minus A, ps.
    pub delta: i64,
    /// Downlink (α) and uplink (β) light times, ps.
    pub t_prop_alpha: f64,
    pub t_prop_beta: f64,
    /// Slant range, m.
    pub range: f64,
}

/// Injected parameters written next to the simulated tags. Analysis commands
/// never read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub label: String,
    pub duration: f64,
    pub clock_a: ClockParams,
    pub clock_b: ClockParams,
    /// ΔU of B relative to A.
    pub fractional_drift: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orbit: Option<OrbitParams>,
    /// One sample per second at half-second offsets.
    pub samples: Vec<TruthSample>,
}

impl Truth {
    /// Truth sample nearest to true time `t` (s).
    pub fn sample_near(&self, t: f64) -> Option<&TruthSample> {
        let k = (t - 0.5)
            .round()
            .clamp(0.0, self.samples.len().saturating_sub(1) as f64);
        self.samples.get(k as usize)
    }
}

/// Indices of the local and receive tags of each detected pair, per direction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TruePairs {
    pub alpha: Vec<(usize, usize)>,
    pub beta: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub streams: LinkStreams,
    pub truth: Truth,
    pub true_pairs: Option<TruePairs>,
}

enum Propagation {
    Fixed(Picos),
    Orbit(OrbitGeometry),
}

impl Propagation {
    fn delay(&self, t: Picos, dir: Direction) -> Picos {
        match self {
            Propagation::Fixed(d) => *d,
            Propagation::Orbit(g) => Picos(round_ps(
                g.delay_at_scenario_time(t.as_seconds(), dir) * PS_PER_S as f64,
            )),
        }
    }

    fn delay_s(&self, t: f64, dir: Direction) -> f64 {
        match self {
            Propagation::Fixed(d) => d.as_seconds(),
            Propagation::Orbit(g) => g.delay_at_scenario_time(t, dir),
        }
    }
}

/// Per-tag payload: the global emission id, or nothing when pairs are not
/// tracked (halves the memory of long runs).
trait TagId: Ord + Copy {
    const NOISE: Self;
    fn from_id(id: u32) -> Self;
}

impl TagId for u32 {
    const NOISE: u32 = NOISE;
    fn from_id(id: u32) -> u32 {
        id
    }
}

impl TagId for () {
    const NOISE: () = ();
    fn from_id(_: u32) {}
}

/// One direction's true-time detector streams.
struct DirectionTags<T> {
    local: Vec<(Picos, T)>,
    receive: Vec<(Picos, T)>,
}

fn direction_tags<T: TagId>(
    src: &SourceConfig,
    duration: f64,
    prop: &Propagation,
    dir: Direction,
) -> Result<DirectionTags<T>, SimulateError> {
    let end_ps = picos_from_seconds(duration).expect("duration validated");
    let mut local = Vec::new();
    let mut receive = Vec::new();
    let mut next_id: u64 = 0;
    let chunks = (duration / CHUNK_SECONDS).ceil() as u64;
    for k in 0..chunks {
        let start = k as f64 * CHUNK_SECONDS;
        let end = (start + CHUNK_SECONDS).min(duration);
        let chunk_seed = derive_seed(src.rng_seed, k);
        let rec = generate_pairs_between(
            src,
            start,
            end,
            derive_seed(chunk_seed, 1),
            Channel::AliceLocal,
        )?;
        let base = next_id;
        next_id += rec.true_emission_times.len() as u64;
        if next_id >= NOISE as u64 {
            return Err(SimulateError::TooManyEmissions(next_id));
        }
        for (&t, &i) in rec
            .local_detections
            .tags()
            .iter()
            .zip(&rec.local_emission_indices)
        {
            local.push((t, T::from_id((base + i as u64) as u32)));
        }
        for &(i, t) in &rec.transmitted_detections {
            receive.push((t + prop.delay(t, dir), T::from_id((base + i as u64) as u32)));
        }
        let dark = generate_background_between(
            src.dark_rate,
            start,
            end,
            derive_seed(chunk_seed, 2),
            Channel::AliceLocal,
        );
        local.extend(dark.tags().iter().map(|&t| (t, T::NOISE)));
        let noise = generate_background_between(
            src.background_rate + src.dark_rate,
            start,
            end,
            derive_seed(chunk_seed, 3),
            Channel::AliceReceive,
        );
        receive.extend(noise.tags().iter().map(|&t| (t, T::NOISE)));
    }
    let dead = src.dead_time().0.max(1);
    let clip = |v: Vec<(Picos, T)>| {
        let mut v = dead_time_indexed(v, dead);
        v.retain(|&(t, _)| t >= Picos::ZERO && t < end_ps);
        v
    };
    Ok(DirectionTags {
        local: clip(local),
        receive: clip(receive),
    })
}

fn to_stream<T>(clock: &ClockModel, channel: Channel, tagged: &[(Picos, T)]) -> TagStream {
    let tags: Vec<Picos> = tagged.iter().map(|&(t, _)| clock.to_local(t)).collect();
    // the clock map is monotone at these drift rates, so ids stay aligned
    TagStream::new(channel, tags).expect("clock map preserves order")
}

fn pair_indices(local: &[(Picos, u32)], receive: &[(Picos, u32)]) -> Vec<(usize, usize)> {
    let mut by_id: Vec<(u32, usize)> = local
        .iter()
        .enumerate()
        .filter(|(_, &(_, id))| id != NOISE)
        .map(|(i, &(_, id))| (id, i))
        .collect();
    by_id.sort_unstable();
    let mut out: Vec<(usize, usize)> = receive
        .iter()
        .enumerate()
        .filter(|(_, &(_, id))| id != NOISE)
        .filter_map(|(j, &(_, id))| {
            by_id
                .binary_search_by_key(&id, |&(k, _)| k)
                .ok()
                .map(|p| (by_id[p].1, j))
        })
        .collect();
    out.sort_unstable();
    out
}

fn assemble<T>(
    clock_a: &ClockModel,
    clock_b: &ClockModel,
    alpha: DirectionTags<T>,
    beta: DirectionTags<T>,
) -> LinkStreams {
    let alice_local = to_stream(clock_a, Channel::AliceLocal, &alpha.local);
    drop(alpha.local);
    let bob_receive = to_stream(clock_b, Channel::BobReceive, &alpha.receive);
    drop(alpha.receive);
    let bob_local = to_stream(clock_b, Channel::BobLocal, &beta.local);
    drop(beta.local);
    let alice_receive = to_stream(clock_a, Channel::AliceReceive, &beta.receive);
    LinkStreams {
        alice_local,
        alice_receive,
        bob_local,
        bob_receive,
    }
}

pub fn simulate(scenario: &Scenario, opts: SimulateOptions) -> Result<Simulation, SimulateError> {
    let duration = scenario.duration;
    let prop = match &scenario.link {
        Link::Fixed { range } => Propagation::Fixed(Picos(round_ps(
            range / scenario.constants.c * PS_PER_S as f64,
        ))),
        Link::Orbit(o) => Propagation::Orbit(o.geometry()?),
    };
    let horizon = duration + 1.0;
    let clock_a = ClockModel::new(scenario.clock_a.clone(), horizon);
    let clock_b = ClockModel::new(scenario.clock_b.clone(), horizon);

    let (streams, true_pairs) = if opts.true_pairs {
        let alpha = direction_tags::<u32>(
            &scenario.source_a,
            duration,
            &prop,
            Direction::DownlinkAlpha,
        )?;
        let beta =
            direction_tags::<u32>(&scenario.source_b, duration, &prop, Direction::UplinkBeta)?;
        let pairs = TruePairs {
            alpha: pair_indices(&alpha.local, &alpha.receive),
            beta: pair_indices(&beta.local, &beta.receive),
        };
        (assemble(&clock_a, &clock_b, alpha, beta), Some(pairs))
    } else {
        let alpha = direction_tags::<()>(
            &scenario.source_a,
            duration,
            &prop,
            Direction::DownlinkAlpha,
        )?;
        let beta =
            direction_tags::<()>(&scenario.source_b, duration, &prop, Direction::UplinkBeta)?;
        (assemble(&clock_a, &clock_b, alpha, beta), None)
    };

    let samples = (0..duration.floor() as usize)
        .map(|k| {
            let t = k as f64 + 0.5;
            let tp = picos_from_seconds(t).expect("inside scenario");
            let ta = prop.delay_s(t, Direction::DownlinkAlpha);
            TruthSample {
                t,
                delta: relative_offset_between(&clock_b, &clock_a, tp).0,
                t_prop_alpha: ta * PS_PER_S as f64,
                t_prop_beta: prop.delay_s(t, Direction::UplinkBeta) * PS_PER_S as f64,
                range: ta * scenario.constants.c,
            }
        })
        .collect();
    let truth = Truth {
        label: scenario.label.clone(),
        duration,
        clock_a: scenario.clock_a.clone(),
        clock_b: scenario.clock_b.clone(),
        fractional_drift: scenario.clock_b.fractional_drift - scenario.clock_a.fractional_drift,
        range: match scenario.link {
            Link::Fixed { range } => Some(range),
            Link::Orbit(_) => None,
        },
        orbit: scenario.orbit().cloned(),
        samples,
    };
    Ok(Simulation {
        streams,
        truth,
        true_pairs,
    })
}
