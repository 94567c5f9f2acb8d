//! Scenario files (TOML) and the measurement-only run configuration.
//!
//! Angles are written in degrees in files and held in radians in memory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::ClockParams;
use crate::correlation::CorrelationConfig;
use crate::orbit::OrbitParams;
use crate::source::{derive_seed, SourceConfig};
use crate::sync::AcquisitionConfig;
use crate::tracking::{CoarseScanConfig, FitConfig};
use crate::units::{PhysicalConstants, Picos};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: cannot read: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl ToString) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.to_string(),
        message: message.to_string(),
    }
}

const BUNDLED: [(&str, &str); 3] = [
    (
        "stationary_night",
        include_str!("../../scenarios/stationary_night.scenario"),
    ),
    (
        "stationary_day",
        include_str!("../../scenarios/stationary_day.scenario"),
    ),
    (
        "leo_pass",
        include_str!("../../scenarios/leo_pass.scenario"),
    ),
];

/// Text of a bundled scenario by name, with or without the `.scenario` suffix.
pub fn bundled(name: &str) -> Option<&'static str> {
    let stem = name.strip_suffix(".scenario").unwrap_or(name);
    BUNDLED.iter().find(|(n, _)| *n == stem).map(|(_, t)| *t)
}

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSection {
    pub altitude: f64,
    pub inclination_deg: f64,
    #[serde(flatten)]
    pub pass: PassTemplate,
}

/// Everything about the pass geometry except altitude and inclination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassTemplate {
    pub qgs_latitude_deg: f64,
    pub qgs_longitude_deg: f64,
    /// Defaults to the station latitude.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_sat_latitude_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_sat_longitude_deg: Option<f64>,
    /// Scenario time of culmination; defaults to mid-scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<f64>,
    #[serde(default = "default_true")]
    pub earth_rotation: bool,
}

fn default_true() -> bool {
    true
}

impl PassTemplate {
    pub fn orbit(
        &self,
        altitude: f64,
        inclination: f64,
        duration: f64,
        constants: PhysicalConstants,
    ) -> OrbitParams {
        OrbitParams {
            altitude,
            inclination,
            qgs_latitude: self.qgs_latitude_deg.to_radians(),
            qgs_longitude: self.qgs_longitude_deg.to_radians(),
            initial_sat_latitude: self
                .initial_sat_latitude_deg
                .unwrap_or(self.qgs_latitude_deg)
                .to_radians(),
            initial_sat_longitude: self
                .initial_sat_longitude_deg
                .unwrap_or(self.qgs_longitude_deg)
                .to_radians(),
            epoch: self.epoch.unwrap_or(duration / 2.0),
            earth_rotation: self.earth_rotation,
            constants,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingSection {
    pub a_min: f64,
    pub a_max: f64,
    pub a_step: f64,
    pub theta_min_deg: f64,
    pub theta_max_deg: f64,
    pub theta_step_deg: f64,
    pub scan_duration: f64,
    pub seed_bin: Picos,
    pub seed_halfwidth: Picos,
    pub seed_window: f64,
    pub correlation: CorrelationConfig,
    pub fit: FitConfig,
}

impl Default for TrackingSection {
    fn default() -> Self {
        TrackingSection::from(&CoarseScanConfig::default())
    }
}

impl From<&CoarseScanConfig> for TrackingSection {
    fn from(c: &CoarseScanConfig) -> Self {
        TrackingSection {
            a_min: c.a_range.0,
            a_max: c.a_range.1,
            a_step: c.a_step,
            theta_min_deg: c.theta_range.0.to_degrees(),
            theta_max_deg: c.theta_range.1.to_degrees(),
            theta_step_deg: c.theta_step.to_degrees(),
            scan_duration: c.scan_duration,
            seed_bin: c.seed_bin,
            seed_halfwidth: c.seed_halfwidth,
            seed_window: c.seed_window,
            correlation: c.correlation.clone(),
            fit: c.fit.clone(),
        }
    }
}

impl TrackingSection {
    pub fn to_config(&self) -> Result<CoarseScanConfig, ScenarioError> {
        if !(self.a_step > 0.0) {
            return Err(invalid("tracking.a_step", "must be positive"));
        }
        if !(self.theta_step_deg > 0.0) {
            return Err(invalid("tracking.theta_step_deg", "must be positive"));
        }
        if !(self.a_min > 0.0 && self.a_max >= self.a_min) {
            return Err(invalid("tracking.a_min", "need 0 < a_min <= a_max"));
        }
        if !(0.0..=180.0).contains(&self.theta_min_deg)
            || !(self.theta_min_deg..=180.0).contains(&self.theta_max_deg)
        {
            return Err(invalid(
                "tracking.theta_min_deg",
                "need 0 <= theta_min <= theta_max <= 180",
            ));
        }
        if !(self.scan_duration > 0.0) {
            return Err(invalid("tracking.scan_duration", "must be positive"));
        }
        if !(self.seed_window > 0.0) {
            return Err(invalid("tracking.seed_window", "must be positive"));
        }
        self.correlation
            .validate()
            .map_err(|e| invalid("tracking.correlation", e))?;
        Ok(CoarseScanConfig {
            a_range: (self.a_min, self.a_max),
            a_step: self.a_step,
            theta_range: (
                self.theta_min_deg.to_radians(),
                self.theta_max_deg.to_radians(),
            ),
            theta_step: self.theta_step_deg.to_radians(),
            scan_duration: self.scan_duration,
            correlation: self.correlation.clone(),
            seed_bin: self.seed_bin,
            seed_halfwidth: self.seed_halfwidth,
            seed_window: self.seed_window,
            fit: self.fit.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub label: String,
    pub duration: f64,
    /// Fixed link range of a stationary testbed, m.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<f64>,
    pub source_a: SourceConfig,
    pub source_b: SourceConfig,
    #[serde(default)]
    pub clock_a: ClockParams,
    #[serde(default)]
    pub clock_b: ClockParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orbit: Option<OrbitSection>,
    #[serde(default)]
    pub acquisition: AcquisitionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracking: Option<TrackingSection>,
    #[serde(default)]
    pub constants: PhysicalConstants,
}

/// Propagation geometry of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub enum Link {
    Fixed { range: f64 },
    Orbit(OrbitParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub label: String,
    pub duration: f64,
    pub source_a: SourceConfig,
    pub source_b: SourceConfig,
    pub clock_a: ClockParams,
    pub clock_b: ClockParams,
    pub link: Link,
    pub acquisition: AcquisitionConfig,
    pub tracking: Option<CoarseScanConfig>,
    pub constants: PhysicalConstants,
    /// Pass geometry without altitude and inclination, for orbit scenarios.
    pub pass: Option<PassTemplate>,
}

impl Scenario {
    pub fn orbit(&self) -> Option<&OrbitParams> {
        match &self.link {
            Link::Orbit(o) => Some(o),
            Link::Fixed { .. } => None,
        }
    }

    /// Replaces every seed with one derived from `master`.
    pub fn reseed(&mut self, master: u64) {
        self.source_a.rng_seed = derive_seed(master, 1);
        self.source_b.rng_seed = derive_seed(master, 2);
        self.clock_a.seed = derive_seed(master, 3);
        self.clock_b.seed = derive_seed(master, 4);
    }

    /// The configuration a measurement run may see: no source, clock or
    /// orbit truth.
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            label: self.label.clone(),
            duration: self.duration,
            acquisition: self.acquisition.clone(),
            pass: self.pass.clone().map(|mut p| {
                p.epoch = Some(self.orbit().map(|o| o.epoch).unwrap_or(self.duration / 2.0));
                p
            }),
            tracking: self.tracking.as_ref().map(TrackingSection::from),
            constants: self.constants,
        }
    }
}

impl ScenarioFile {
    pub fn validate(self) -> Result<Scenario, ScenarioError> {
        if self.label.trim().is_empty() {
            return Err(invalid("label", "must not be empty"));
        }
        if !(self.duration > 0.0) || self.duration >= crate::units::MAX_ABS_SECONDS {
            return Err(invalid("duration", "must be positive and below 1e6 s"));
        }
        for (name, s) in [("source_a", &self.source_a), ("source_b", &self.source_b)] {
            s.validate().map_err(|e| invalid(name, e))?;
        }
        for (name, c) in [("clock_a", &self.clock_a), ("clock_b", &self.clock_b)] {
            c.validate().map_err(|e| invalid(name, e))?;
        }
        self.acquisition
            .validate()
            .map_err(|e| invalid("acquisition", e))?;
        let (link, pass) = match (&self.range, &self.orbit) {
            (Some(_), Some(_)) => {
                return Err(invalid(
                    "range",
                    "give either `range` or an [orbit] section, not both",
                ))
            }
            (None, None) => {
                return Err(invalid(
                    "range",
                    "stationary scenarios need a fixed `range` in metres",
                ))
            }
            (Some(r), None) => {
                if !(*r > 0.0) {
                    return Err(invalid("range", "must be positive"));
                }
                (Link::Fixed { range: *r }, None)
            }
            (None, Some(o)) => {
                let orbit = o.pass.orbit(
                    o.altitude,
                    o.inclination_deg.to_radians(),
                    self.duration,
                    self.constants,
                );
                orbit.validate().map_err(|e| invalid("orbit", e))?;
                (Link::Orbit(orbit), Some(o.pass.clone()))
            }
        };
        let tracking = self.tracking.as_ref().map(|t| t.to_config()).transpose()?;
        Ok(Scenario {
            label: self.label,
            duration: self.duration,
            source_a: self.source_a,
            source_b: self.source_b,
            clock_a: self.clock_a,
            clock_b: self.clock_b,
            link,
            acquisition: self.acquisition,
            tracking,
            constants: self.constants,
            pass,
        })
    }
}

/// Measurement-side configuration written next to simulated tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub label: String,
    pub duration: f64,
    pub acquisition: AcquisitionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass: Option<PassTemplate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracking: Option<TrackingSection>,
    #[serde(default)]
    pub constants: PhysicalConstants,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, ScenarioError> {
    if text.trim().is_empty() {
        return Err(ScenarioError::Parse {
            line: 1,
            message: "file is empty".into(),
        });
    }
    toml::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.span().map(|s| line_of(text, s.start)).unwrap_or(1),
        message: e.message().to_string(),
    })
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    parse_toml::<ScenarioFile>(text)?.validate()
}

/// Loads a scenario file. A missing path that names a bundled scenario
/// falls back to the bundled text.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    match fs::read_to_string(path) {
        Ok(text) => parse_scenario(&text),
        Err(e) => {
            let name = path.to_string_lossy();
            match bundled(&name) {
                Some(text) if !path.exists() => parse_scenario(text),
                _ => Err(ScenarioError::Io {
                    path: name.into_owned(),
                    source: e,
                }),
            }
        }
    }
}

pub fn parse_run_config(text: &str) -> Result<RunConfig, ScenarioError> {
    let cfg: RunConfig = parse_toml(text)?;
    cfg.acquisition
        .validate()
        .map_err(|e| invalid("acquisition", e))?;
    if let Some(t) = &cfg.tracking {
        t.to_config()?;
    }
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_run_config(&text)
}

pub fn run_config_to_toml(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("run config serializes")
}
