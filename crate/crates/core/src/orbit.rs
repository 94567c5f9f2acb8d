//! Circular-orbit pass geometry and the propagation delays it imposes on tags.
//!
//! Site A plays the satellite, site B the ground station. Photons from A to B
//! (direction α) travel the downlink, photons from B to A (direction β) the
//! uplink.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{round_ps, Channel, PhysicalConstants, Picos, TagStream, PS_PER_S};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrbitError {
    #[error("altitude must be positive, got {0} m")]
    BadAltitude(f64),
    #[error("inclination must lie in [0, pi], got {0} rad")]
    BadInclination(f64),
    #[error("initial latitude {lat} rad is unreachable at inclination {inclination} rad")]
    LatitudeDomain { lat: f64, inclination: f64 },
    #[error("propagation shift produced non-increasing tags at index {0}")]
    NonMonotone(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Satellite (A) to ground (B).
    DownlinkAlpha,
    /// Ground (B) to satellite (A).
    UplinkBeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitParams {
    pub altitude: f64,
    pub inclination: f64,
    pub qgs_latitude: f64,
    pub qgs_longitude: f64,
    pub initial_sat_latitude: f64,
    pub initial_sat_longitude: f64,
    /// Scenario time (s) at which orbit time is zero.
    #[serde(default)]
    pub epoch: f64,
    /// Include Earth rotation and nodal precession in the ground track.
    #[serde(default = "yes")]
    pub earth_rotation: bool,
    #[serde(default)]
    pub constants: PhysicalConstants,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTrackSample {
    pub t: f64,
    pub sat_latitude: f64,
    pub sat_longitude: f64,
    pub beta: f64,
    pub slant_range_d: f64,
    pub elevation_eps: f64,
    pub t_prop: f64,
}

impl OrbitParams {
    /// Orbit whose ground track passes over the station at orbit time zero.
    pub fn overhead_pass(altitude: f64, inclination: f64, qgs_lat: f64, qgs_lon: f64) -> Self {
        OrbitParams {
            altitude,
            inclination,
            qgs_latitude: qgs_lat,
            qgs_longitude: qgs_lon,
            initial_sat_latitude: qgs_lat,
            initial_sat_longitude: qgs_lon,
            epoch: 0.0,
            earth_rotation: true,
            constants: PhysicalConstants::default(),
        }
    }

    pub fn radius(&self) -> f64 {
        self.constants.earth_radius + self.altitude
    }

    pub fn mean_motion(&self) -> f64 {
        (self.constants.gm / self.radius().powi(3)).sqrt()
    }

    pub fn period(&self) -> f64 {
        2.0 * PI / self.mean_motion()
    }

    pub fn orbital_speed(&self) -> f64 {
        (self.constants.gm / self.radius()).sqrt()
    }

    pub fn validate(&self) -> Result<(), OrbitError> {
        self.geometry().map(|_| ())
    }

    /// Precomputes the pass constants for fast repeated evaluation.
    pub fn geometry(&self) -> Result<OrbitGeometry, OrbitError> {
        if !(self.altitude > 0.0) || !self.altitude.is_finite() {
            return Err(OrbitError::BadAltitude(self.altitude));
        }
        if !(0.0..=PI).contains(&self.inclination) {
            return Err(OrbitError::BadInclination(self.inclination));
        }
        let (sin_i, cos_i) = self.inclination.sin_cos();
        let arg = self.initial_sat_latitude.sin() / sin_i;
        let arg = if arg.abs() > 1.0 && arg.abs() < 1.0 + 1e-12 {
            arg.signum()
        } else {
            arg
        };
        if !(arg.abs() <= 1.0) {
            return Err(OrbitError::LatitudeDomain {
                lat: self.initial_sat_latitude,
                inclination: self.inclination,
            });
        }
        let lambda0 = arg.asin();
        let phi_shift = self.initial_sat_longitude - (lambda0.sin() * cos_i).atan2(lambda0.cos());
        let c = &self.constants;
        Ok(OrbitGeometry {
            r: self.radius(),
            re: c.earth_radius,
            c: c.c,
            speed: self.orbital_speed(),
            omega0: self.mean_motion(),
            lambda0,
            sin_i,
            cos_i,
            phi_shift,
            phi_rate: if self.earth_rotation {
                c.precession_rate - c.earth_rotation_rate
            } else {
                0.0
            },
            qgs_lat: self.qgs_latitude,
            qgs_lon: self.qgs_longitude,
            sin_q: self.qgs_latitude.sin(),
            cos_q: self.qgs_latitude.cos(),
            epoch: self.epoch,
        })
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrbitGeometry {
    r: f64,
    re: f64,
    c: f64,
    speed: f64,
    omega0: f64,
    lambda0: f64,
    sin_i: f64,
    cos_i: f64,
    phi_shift: f64,
    phi_rate: f64,
    qgs_lat: f64,
    qgs_lon: f64,
    sin_q: f64,
    cos_q: f64,
    epoch: f64,
}

impl OrbitGeometry {
    pub fn epoch(&self) -> f64 {
        self.epoch
    }

    /// Sub-satellite latitude and longitude at orbit time `t` (s).
    pub fn sub_satellite_point(&self, t: f64) -> (f64, f64) {
        let u = self.omega0 * t + self.lambda0;
        let (su, cu) = u.sin_cos();
        let lat = (su * self.sin_i).clamp(-1.0, 1.0).asin();
        let lon = (su * self.cos_i).atan2(cu) + self.phi_shift + self.phi_rate * t;
        (lat, normalize_angle(lon))
    }

    pub fn sample(&self, t: f64) -> GroundTrackSample {
        let (lat, lon) = self.sub_satellite_point(t);
        // cos(pi/2 - x) = sin x
        let cos_beta = (lat.sin() * self.sin_q
            + lat.cos() * self.cos_q * (self.qgs_lon - lon).cos())
        .clamp(-1.0, 1.0);
        let (r, re) = (self.r, self.re);
        let d = (r * r + re * re - 2.0 * r * re * cos_beta).max(0.0).sqrt();
        let sin_eps = if d > 0.0 {
            ((r * cos_beta - re) / d).clamp(-1.0, 1.0)
        } else {
            1.0
        };
        GroundTrackSample {
            t,
            sat_latitude: lat,
            sat_longitude: lon,
            beta: cos_beta.acos(),
            slant_range_d: d,
            elevation_eps: sin_eps.asin(),
            t_prop: d / self.c,
        }
    }

    pub fn slant_range(&self, t: f64) -> f64 {
        self.sample(t).slant_range_d
    }

    pub fn point_ahead_angle(&self, t: f64) -> f64 {
        2.0 / self.c * self.speed * self.sample(t).elevation_eps.sin()
    }

    /// One-way light time (s) for a photon leaving at orbit time `t`.
    pub fn delay(&self, t: f64, direction: Direction) -> f64 {
        let down = self.slant_range(t) / self.c;
        match direction {
            Direction::DownlinkAlpha => down,
            // range to the satellite where it will be on arrival
            Direction::UplinkBeta => self.slant_range(t + down) / self.c,
        }
    }

    /// Delay for a photon leaving at scenario time `t`.
    pub fn delay_at_scenario_time(&self, t: f64, direction: Direction) -> f64 {
        self.delay(t - self.epoch, direction)
    }

    pub fn qgs(&self) -> (f64, f64) {
        (self.qgs_lat, self.qgs_lon)
    }
}

pub fn sub_satellite_point(orbit: &OrbitParams, t: f64) -> Result<(f64, f64), OrbitError> {
    Ok(orbit.geometry()?.sub_satellite_point(t))
}

pub fn slant_range(orbit: &OrbitParams, t: f64) -> Result<GroundTrackSample, OrbitError> {
    Ok(orbit.geometry()?.sample(t))
}

pub fn point_ahead_angle(orbit: &OrbitParams, t: f64) -> Result<f64, OrbitError> {
    Ok(orbit.geometry()?.point_ahead_angle(t))
}

/// Shifts source-frame tags by the direction's propagation delay. Tag times are
/// scenario times; the orbit epoch maps them to orbit time.
pub fn apply_motion(
    tags: &[Picos],
    channel: Channel,
    orbit: &OrbitParams,
    direction: Direction,
) -> Result<TagStream, OrbitError> {
    let geo = orbit.geometry()?;
    shift_tags(tags, channel, |t| {
        geo.delay_at_scenario_time(t.as_seconds(), direction)
    })
}

/// Shifts tags by a fixed one-way light time over `range` metres.
pub fn apply_fixed_range(
    tags: &[Picos],
    channel: Channel,
    range: f64,
    constants: &PhysicalConstants,
) -> TagStream {
    let shift = Picos(round_ps(range / constants.c * PS_PER_S as f64));
    let out = tags.iter().map(|&t| t + shift).collect();
    TagStream::new(channel, out).expect("uniform shift keeps order")
}

fn shift_tags(
    tags: &[Picos],
    channel: Channel,
    delay: impl Fn(Picos) -> f64,
) -> Result<TagStream, OrbitError> {
    let mut out = Vec::with_capacity(tags.len());
    for (i, &t) in tags.iter().enumerate() {
        let s = t + Picos(round_ps(delay(t) * PS_PER_S as f64));
        if let Some(&prev) = out.last() {
            if s <= prev {
                return Err(OrbitError::NonMonotone(i));
            }
        }
        out.push(s);
    }
    Ok(TagStream::new(channel, out).expect("checked above"))
}

/// Slant range at elevation `eps` for altitude `a`, closed form.
pub fn range_at_elevation(a: f64, eps: f64, earth_radius: f64) -> f64 {
    let s = eps.sin();
    (earth_radius * earth_radius * s * s + 2.0 * earth_radius * a + a * a).sqrt() - earth_radius * s
}

/// Orbit time (s) after culmination at which an overhead pass reaches `eps`.
pub fn time_to_elevation(orbit: &OrbitParams, eps: f64) -> f64 {
    let re = orbit.constants.earth_radius;
    let d = range_at_elevation(orbit.altitude, eps, re);
    let cos_beta = (re + d * eps.sin()) / orbit.radius();
    cos_beta.clamp(-1.0, 1.0).acos() / orbit.mean_motion()
}
