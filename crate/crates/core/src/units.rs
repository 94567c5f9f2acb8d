//! Shared time units, tag streams and physical constants.

use std::fmt;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Picoseconds per second.
pub const PS_PER_S: i64 = 1_000_000_000_000;

/// Largest magnitude accepted by [`picos_from_seconds`].
pub const MAX_ABS_SECONDS: f64 = 1.0e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnitError {
    #[error("{0} s is outside the representable range of ±1e6 s")]
    OutOfRange(f64),
    #[error("tag stream {channel} is not strictly increasing at index {index}")]
    NotIncreasing { channel: Channel, index: usize },
}

/// Integer picosecond count. All tag arithmetic is exact.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Picos(pub i64);

impl Picos {
    pub const ZERO: Picos = Picos(0);

    pub fn from_seconds(s: f64) -> Result<Picos, UnitError> {
        picos_from_seconds(s)
    }

    pub fn as_seconds(self) -> f64 {
        seconds_from_picos(self)
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64
    }

    pub fn abs(self) -> Picos {
        Picos(self.0.abs())
    }
}

impl fmt::Display for Picos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ps", self.0)
    }
}

impl Add for Picos {
    type Output = Picos;
    fn add(self, rhs: Picos) -> Picos {
        Picos(self.0 + rhs.0)
    }
}

impl Sub for Picos {
    type Output = Picos;
    fn sub(self, rhs: Picos) -> Picos {
        Picos(self.0 - rhs.0)
    }
}

impl Neg for Picos {
    type Output = Picos;
    fn neg(self) -> Picos {
        Picos(-self.0)
    }
}

impl AddAssign for Picos {
    fn add_assign(&mut self, rhs: Picos) {
        self.0 += rhs.0;
    }
}

impl SubAssign for Picos {
    fn sub_assign(&mut self, rhs: Picos) {
        self.0 -= rhs.0;
    }
}

/// Converts seconds to picoseconds, rounding to nearest with ties away from zero.
///
/// This is the single rounding rule used wherever a real-valued model time
/// becomes a tag.
pub fn picos_from_seconds(s: f64) -> Result<Picos, UnitError> {
    if !s.is_finite() || s.abs() >= MAX_ABS_SECONDS {
        return Err(UnitError::OutOfRange(s));
    }
    let whole = s.trunc();
    let frac = s - whole;
    Ok(Picos(
        whole as i64 * PS_PER_S + round_ps(frac * PS_PER_S as f64),
    ))
}

pub fn seconds_from_picos(p: Picos) -> f64 {
    // split to keep the integer part exact
    let whole = p.0.div_euclid(PS_PER_S);
    let frac = p.0.rem_euclid(PS_PER_S);
    whole as f64 + frac as f64 * 1e-12
}

/// Rounds a real picosecond quantity to an integer, ties away from zero.
#[inline]
pub fn round_ps(x: f64) -> i64 {
    x.round() as i64
}

/// Detector channel. The discriminant doubles as the on-disk channel id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    AliceLocal = 0,
    AliceReceive = 1,
    BobLocal = 2,
    BobReceive = 3,
}

impl Channel {
    pub const ALL: [Channel; 4] = [
        Channel::AliceLocal,
        Channel::AliceReceive,
        Channel::BobLocal,
        Channel::BobReceive,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Channel> {
        Channel::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::AliceLocal => "alice_local",
            Channel::AliceReceive => "alice_receive",
            Channel::BobLocal => "bob_local",
            Channel::BobReceive => "bob_receive",
        }
    }

    pub fn from_name(name: &str) -> Option<Channel> {
        Channel::ALL.iter().copied().find(|c| c.name() == name)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Detection timestamps on one channel, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagStream {
    channel: Channel,
    tags: Vec<Picos>,
}

impl TagStream {
    pub fn new(channel: Channel, tags: Vec<Picos>) -> Result<TagStream, UnitError> {
        if let Some(i) = tags.windows(2).position(|w| w[1] <= w[0]) {
            return Err(UnitError::NotIncreasing {
                channel,
                index: i + 1,
            });
        }
        Ok(TagStream { channel, tags })
    }

    /// Sorts and removes duplicate timestamps.
    pub fn from_unsorted(channel: Channel, mut tags: Vec<Picos>) -> TagStream {
        tags.sort_unstable();
        tags.dedup();
        TagStream { channel, tags }
    }

    pub fn empty(channel: Channel) -> TagStream {
        TagStream {
            channel,
            tags: Vec::new(),
        }
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn tags(&self) -> &[Picos] {
        &self.tags
    }

    pub fn into_tags(self) -> Vec<Picos> {
        self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn first(&self) -> Option<Picos> {
        self.tags.first().copied()
    }

    pub fn last(&self) -> Option<Picos> {
        self.tags.last().copied()
    }

    /// Tags in the half-open interval `[start, end)`.
    pub fn window(&self, start: Picos, end: Picos) -> &[Picos] {
        window(&self.tags, start, end)
    }

    pub fn with_channel(self, channel: Channel) -> TagStream {
        TagStream {
            channel,
            tags: self.tags,
        }
    }
}

/// Sub-slice of sorted `tags` inside `[start, end)`.
pub fn window(tags: &[Picos], start: Picos, end: Picos) -> &[Picos] {
    let lo = tags.partition_point(|&t| t < start);
    let hi = tags.partition_point(|&t| t < end);
    &tags[lo..hi.max(lo)]
}

/// Physical constants used by the orbit model. Defaults are standard geodetic values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalConstants {
    /// Speed of light, m/s.
    pub c: f64,
    /// Earth gravitational parameter G·M, m³/s².
    pub gm: f64,
    /// Mean Earth radius, m.
    pub earth_radius: f64,
    /// Sidereal rotation rate, rad/s.
    pub earth_rotation_rate: f64,
    /// Sun-synchronous nodal precession rate, rad/s.
    pub precession_rate: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        PhysicalConstants {
            c: 299_792_458.0,
            gm: 3.986_004_418e14,
            earth_radius: 6_371_000.0,
            earth_rotation_rate: 2.0 * std::f64::consts::PI / 86164.0905,
            precession_rate: 2.0 * std::f64::consts::PI / (365.2422 * 86_400.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seconds_to_picos_examples() {
        assert_eq!(picos_from_seconds(1.0).unwrap(), Picos(1_000_000_000_000));
        assert_eq!(picos_from_seconds(0.0).unwrap(), Picos(0));
        assert_eq!(picos_from_seconds(27.1e-12).unwrap(), Picos(27));
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(picos_from_seconds(1.0e6).is_err());
        assert!(picos_from_seconds(-2.0e6).is_err());
        assert!(picos_from_seconds(f64::NAN).is_err());
    }

    #[test]
    fn range_covers_a_million_seconds() {
        let p = picos_from_seconds(999_999.0).unwrap();
        assert_eq!(p.0, 999_999 * PS_PER_S);
    }

    #[test]
    fn tag_stream_rejects_duplicates() {
        let err = TagStream::new(Channel::BobLocal, vec![Picos(1), Picos(1)]).unwrap_err();
        assert_eq!(
            err,
            UnitError::NotIncreasing {
                channel: Channel::BobLocal,
                index: 1
            }
        );
        let s = TagStream::from_unsorted(Channel::BobLocal, vec![Picos(5), Picos(1), Picos(5)]);
        assert_eq!(s.tags(), &[Picos(1), Picos(5)]);
    }

    #[test]
    fn window_is_half_open() {
        let s = TagStream::new(Channel::AliceLocal, (0..10).map(Picos).collect()).unwrap();
        assert_eq!(
            s.window(Picos(2), Picos(5)),
            &[Picos(2), Picos(3), Picos(4)]
        );
        assert!(s.window(Picos(5), Picos(2)).is_empty());
    }

    #[test]
    fn channel_ids_round_trip() {
        for c in Channel::ALL {
            assert_eq!(Channel::from_id(c.id()), Some(c));
            assert_eq!(Channel::from_name(c.name()), Some(c));
        }
        assert_eq!(Channel::from_id(4), None);
    }

    proptest! {
        #[test]
        // exact while an f64 second count still resolves half a picosecond
        fn picos_round_trip(x in -4_096_000_000_000_000i64..4_096_000_000_000_000i64) {
            let p = Picos(x);
            prop_assert_eq!(picos_from_seconds(seconds_from_picos(p)).unwrap(), p);
        }

        #[test]
        fn conversion_is_monotone(a in -1.0e5f64..1.0e5, b in -1.0e5f64..1.0e5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(picos_from_seconds(lo).unwrap() <= picos_from_seconds(hi).unwrap());
        }
    }
}
