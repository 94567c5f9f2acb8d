//! Orbit tracking: coarse (a, θ) scan, separable least-squares orbit fit and
//! the tracked software clocks for an emulated pass.
//!
//! Each direction is fitted on its own with
//! `τ_fit(t) = T_prop(t; a, θ) + m·(t − t_ref) + b`, where `T_prop` is the
//! downlink light time for α and the uplink light time for β.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::{correlate_tags, CorrelationConfig, CorrelationError};
use crate::orbit::{Direction, OrbitError, OrbitGeometry, OrbitParams};
use crate::sync::{
    absolute_offset, AcquisitionConfig, LinkStreams, Recursion, SyncError, SyncMode, SyncRecord,
};
use crate::units::{round_ps, window, Picos, TagStream, PS_PER_S};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarseScanConfig {
    /// Altitude range, m.
    pub a_range: (f64, f64),
    pub a_step: f64,
    /// Inclination range, rad.
    pub theta_range: (f64, f64),
    pub theta_step: f64,
    /// Seconds of pass data used by the scan.
    pub scan_duration: f64,
    /// Per-cell correlation; `search_halfwidth` bounds the residual offset
    /// searched around each cell's prediction.
    pub correlation: CorrelationConfig,
    /// Bin width of the wide correlation that seeds each cell.
    pub seed_bin: Picos,
    /// Half-width of that correlation.
    pub seed_halfwidth: Picos,
    /// Length of the seed window, s, centred in the scan data.
    pub seed_window: f64,
    pub fit: FitConfig,
}

impl Default for CoarseScanConfig {
    fn default() -> Self {
        CoarseScanConfig {
            a_range: (650e3, 750e3),
            a_step: 133.0,
            theta_range: (96f64.to_radians(), 100f64.to_radians()),
            theta_step: 0.1f64.to_radians(),
            scan_duration: 12.0,
            correlation: CorrelationConfig {
                search_halfwidth: Picos(200_000),
                ..CorrelationConfig::default()
            },
            seed_bin: Picos(100_000),
            seed_halfwidth: Picos(6_000_000_000),
            seed_window: 0.25,
            fit: FitConfig::default(),
        }
    }
}

impl CoarseScanConfig {
    pub fn a_values(&self) -> Vec<f64> {
        grid(self.a_range, self.a_step)
    }

    pub fn theta_values(&self) -> Vec<f64> {
        grid(self.theta_range, self.theta_step)
    }

    pub fn validate(&self) -> Result<(), TrackingError> {
        let bad = |m: &str| Err(TrackingError::Config(m.to_string()));
        if !(self.a_step > 0.0 && self.theta_step > 0.0) {
            return bad("grid steps must be positive");
        }
        if !(self.a_range.0 > 0.0 && self.a_range.1 >= self.a_range.0) {
            return bad("altitude range must be positive and ordered");
        }
        if !(self.theta_range.1 >= self.theta_range.0) {
            return bad("inclination range must be ordered");
        }
        if !(self.scan_duration > 0.0 && self.seed_window > 0.0) {
            return bad("scan and seed durations must be positive");
        }
        if self.seed_bin <= Picos::ZERO || self.seed_halfwidth <= self.seed_bin {
            return bad("seed correlation needs 0 < seed_bin < seed_halfwidth");
        }
        self.correlation.validate()?;
        self.fit.validate()
    }
}

fn grid(range: (f64, f64), step: f64) -> Vec<f64> {
    let n = ((range.1 - range.0) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| range.0 + k as f64 * step).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Fewest coincidences a fit accepts.
    pub min_points: usize,
    /// Shortest data span, s, over which altitude and inclination are
    /// refitted; shorter sets only update `m` and `b`.
    pub min_orbit_span: f64,
    pub max_iterations: usize,
    /// Outlier cut in units of the coincidence window.
    pub outlier_factor: f64,
    /// Standard deviation of the zero-mean prior on the drift `m`.
    /// Zero disables the prior.
    pub drift_prior_sigma: f64,
    /// Half-width of the per-acquisition search around the fitted model.
    pub track_halfwidth: Picos,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            min_points: 100,
            min_orbit_span: 10.0,
            max_iterations: 50,
            outlier_factor: 5.0,
            drift_prior_sigma: 3e-11,
            track_halfwidth: Picos(50_000),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), TrackingError> {
        if self.min_points < 4 || self.max_iterations == 0 {
            return Err(TrackingError::Config(
                "fit needs min_points >= 4 and max_iterations >= 1".into(),
            ));
        }
        if !(self.min_orbit_span >= 0.0) {
            return Err(TrackingError::Config(
                "min_orbit_span must be non-negative".into(),
            ));
        }
        if !(self.outlier_factor > 0.0) || !(self.drift_prior_sigma >= 0.0) {
            return Err(TrackingError::Config(
                "outlier_factor must be positive and drift_prior_sigma non-negative".into(),
            ));
        }
        if self.track_halfwidth <= Picos::ZERO {
            return Err(TrackingError::Config(
                "track_halfwidth must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("coarse scan failed: no cell locked (best significance {max_significance:.2} sigma)")]
    ScanFailed { max_significance: f64 },
    #[error("orbit fit has degenerate geometry")]
    DegenerateGeometry,
    #[error("orbit fit needs {min} coincidences, has {have}")]
    TooFewPoints { have: usize, min: usize },
    #[error("invalid tracking configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Correlation(#[from] CorrelationError),
    #[error(transparent)]
    Orbit(#[from] OrbitError),
    #[error(transparent)]
    Sync(#[from] SyncError),
}

/// `template` with altitude `a` (m) and inclination `theta` (rad).
pub fn orbit_with(template: &OrbitParams, a: f64, theta: f64) -> OrbitParams {
    OrbitParams {
        altitude: a,
        inclination: theta,
        ..template.clone()
    }
}

fn direction_streams(streams: &LinkStreams, dir: Direction) -> (&TagStream, &TagStream) {
    match dir {
        Direction::DownlinkAlpha => streams.alpha(),
        Direction::UplinkBeta => streams.beta(),
    }
}

const NODES: usize = 5;

fn cheb_nodes() -> [f64; NODES] {
    std::array::from_fn(|k| (PI * (k as f64 + 0.5) / NODES as f64).cos())
}

/// Chebyshev coefficients of the interpolant through values at `cheb_nodes`.
fn cheb_coeffs(values: &[f64; NODES]) -> [f64; NODES] {
    std::array::from_fn(|j| {
        let s: f64 = (0..NODES)
            .map(|k| values[k] * (PI * j as f64 * (k as f64 + 0.5) / NODES as f64).cos())
            .sum();
        let c = 2.0 * s / NODES as f64;
        if j == 0 {
            c / 2.0
        } else {
            c
        }
    })
}

fn cheb_basis(u: f64) -> [f64; NODES] {
    let mut b = [0.0; NODES];
    b[0] = 1.0;
    b[1] = u;
    for k in 2..NODES {
        b[k] = 2.0 * u * b[k - 1] - b[k - 2];
    }
    b
}

fn cheb_eval(c: &[f64; NODES], u: f64) -> f64 {
    cheb_basis(u).iter().zip(c).map(|(b, c)| b * c).sum()
}

/// Light time tabulated as degree-4 Chebyshev interpolants over whole
/// seconds of local time.
#[derive(Debug, Clone)]
pub struct DelayTable {
    first_second: i64,
    seconds: Vec<[f64; NODES]>,
}

impl DelayTable {
    /// Covers `[start, end)`; the delay is in ps.
    pub fn new(geo: &OrbitGeometry, dir: Direction, start: Picos, end: Picos) -> DelayTable {
        let first = start.0.div_euclid(PS_PER_S);
        let last = (end.0 - 1).div_euclid(PS_PER_S).max(first);
        let nodes = cheb_nodes();
        let seconds = (first..=last)
            .map(|s| {
                let v = nodes.map(|x| {
                    geo.delay_at_scenario_time(s as f64 + 0.5 + 0.5 * x, dir) * PS_PER_S as f64
                });
                cheb_coeffs(&v)
            })
            .collect();
        DelayTable {
            first_second: first,
            seconds,
        }
    }

    pub fn eval(&self, t: Picos) -> f64 {
        let s = t.0.div_euclid(PS_PER_S);
        let k = (s - self.first_second).clamp(0, self.seconds.len() as i64 - 1);
        let sec = self.first_second + k;
        let u = 2.0 * (t.0 - sec * PS_PER_S) as f64 / PS_PER_S as f64 - 1.0;
        cheb_eval(&self.seconds[k as usize], u)
    }
}

/// `local + shift(local)`, kept strictly increasing.
fn shifted(local: &[Picos], shift: impl Fn(Picos) -> f64) -> Vec<Picos> {
    let mut out: Vec<Picos> = Vec::with_capacity(local.len());
    for &l in local {
        let mut v = l + Picos(round_ps(shift(l)));
        if let Some(&p) = out.last() {
            if v <= p {
                v = p + Picos(1);
            }
        }
        out.push(v);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseCell {
    pub a: f64,
    pub theta: f64,
    /// Summed peak height of both directions.
    pub height: u64,
    pub height_alpha: u64,
    pub height_beta: u64,
    pub significance: f64,
    pub found: bool,
    /// Residual offsets found in the cell frame, α then β.
    pub b_alpha: Option<Picos>,
    pub b_beta: Option<Picos>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseScanResult {
    pub a_values: Vec<f64>,
    pub theta_values: Vec<f64>,
    /// Row-major, altitude outer.
    pub cells: Vec<CoarseCell>,
    pub best: usize,
    pub start: Picos,
    pub end: Picos,
}

impl CoarseScanResult {
    pub fn best_cell(&self) -> &CoarseCell {
        &self.cells[self.best]
    }

    pub fn cell(&self, ia: usize, it: usize) -> &CoarseCell {
        &self.cells[ia * self.theta_values.len() + it]
    }

    /// Whether the locked cells form one 8-connected region.
    pub fn island_is_contiguous(&self) -> bool {
        let nt = self.theta_values.len();
        let found: Vec<bool> = self.cells.iter().map(|c| c.found).collect();
        let total = found.iter().filter(|&&f| f).count();
        let Some(seed) = found.iter().position(|&f| f) else {
            return true;
        };
        let mut seen = vec![false; found.len()];
        let mut stack = vec![seed];
        seen[seed] = true;
        let mut count = 0;
        while let Some(i) = stack.pop() {
            count += 1;
            let (ia, it) = (i / nt, i % nt);
            for da in -1i64..=1 {
                for dt in -1i64..=1 {
                    let (ja, jt) = (ia as i64 + da, it as i64 + dt);
                    if ja < 0 || jt < 0 || jt >= nt as i64 {
                        continue;
                    }
                    let j = ja as usize * nt + jt as usize;
                    if j < found.len() && found[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count == total
    }

    pub fn locked_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.found).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("altitude_m,inclination_deg,peak_height,found\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{:.1},{:.4},{},{}\n",
                c.a,
                c.theta.to_degrees(),
                c.height,
                u8::from(c.found)
            ));
        }
        s
    }
}

/// Seed offset of one direction in the frame of the grid-centre orbit,
/// measured at `t_sub`.
fn seed_offset(
    local: &TagStream,
    receive: &TagStream,
    geo: &OrbitGeometry,
    dir: Direction,
    t0: Picos,
    t1: Picos,
    cfg: &CoarseScanConfig,
) -> Result<CorrelationOutcome, TrackingError> {
    let l = window(local.tags(), t0, t1);
    let l_shift = shifted(l, |t| {
        geo.delay_at_scenario_time(t.as_seconds(), dir) * PS_PER_S as f64
    });
    let margin = cfg.seed_halfwidth + cfg.seed_bin;
    let r = match (l_shift.first(), l_shift.last()) {
        (Some(&a), Some(&b)) => window(receive.tags(), a - margin, b + margin),
        _ => &[],
    };
    let ccfg = CorrelationConfig {
        coarse_bin: cfg.seed_bin,
        search_halfwidth: cfg.seed_halfwidth,
        search_center: Picos::ZERO,
        coincidence_window: Picos(4 * cfg.seed_bin.0),
        fine_bin: Picos(1),
        min_peak_significance: cfg.correlation.min_peak_significance,
    };
    let res = correlate_tags(&l_shift, r, &ccfg)?;
    Ok(CorrelationOutcome {
        tau: res.tau,
        height: res.peak_height,
        significance: res.significance,
    })
}

struct CorrelationOutcome {
    tau: Option<Picos>,
    /// Coincidences inside the window around the refined offset.
    height: u64,
    significance: f64,
}

/// Correlates `local` shifted by `shift` against `receive`, searching around
/// `center`.
/// Outcome, shifted local tags and the coincidences of one correlation.
type Shifted = (CorrelationOutcome, Vec<Picos>, Vec<(Picos, Picos)>);

fn correlate_shifted(
    local: &[Picos],
    receive: &[Picos],
    shift: impl Fn(Picos) -> f64,
    center: Picos,
    halfwidth: Picos,
    base: &CorrelationConfig,
) -> Result<Shifted, TrackingError> {
    let l_shift = shifted(local, shift);
    let margin = halfwidth + base.coincidence_window + Picos(1);
    let r = match (l_shift.first(), l_shift.last()) {
        (Some(&a), Some(&b)) => window(receive, a + center - margin, b + center + margin),
        _ => &[],
    };
    let cfg = CorrelationConfig {
        search_center: center,
        search_halfwidth: halfwidth,
        ..base.clone()
    };
    let res = correlate_tags(&l_shift, r, &cfg)?;
    let out = CorrelationOutcome {
        tau: res.tau,
        height: res.coincidences.len() as u64,
        significance: res.significance,
    };
    Ok((out, l_shift, res.coincidences))
}

const SEGMENT: i64 = PS_PER_S / 4;

/// Pairs of one direction whose offset from the grid-centre model lies
/// within `limit`, bucketed by quarter second and sorted by that offset.
struct PairIndex {
    local: Vec<Picos>,
    receive: Vec<Picos>,
    start: Picos,
    segments: Vec<Segment>,
}

#[derive(Clone, Default)]
struct Segment {
    /// (offset, local index, receive index), sorted.
    pairs: Vec<(i64, u32, u32)>,
    local_span: (u32, u32),
    receive_span: (u32, u32),
}

impl PairIndex {
    fn new(
        local: &[Picos],
        receive: &[Picos],
        center: &DelayTable,
        seed: Picos,
        limit: i64,
        (start, end): (Picos, Picos),
    ) -> PairIndex {
        let n_seg = (((end - start).0 + SEGMENT - 1) / SEGMENT).max(1);
        let mut keep_l = Vec::new();
        let mut keep_r = Vec::new();
        let mut pairs = Vec::new();
        let mut j0 = 0usize;
        for (i, &l) in local.iter().enumerate() {
            let m = l.0 + round_ps(center.eval(l)) + seed.0;
            while j0 < receive.len() && receive[j0].0 < m - limit {
                j0 += 1;
            }
            let mut j = j0;
            while j < receive.len() && receive[j].0 <= m + limit {
                pairs.push((receive[j].0 - m, keep_l.len() as u32, j));
                j += 1;
            }
            if j > j0 {
                keep_l.push(i);
            }
            keep_r.extend(j0..j);
        }
        keep_r.sort_unstable();
        keep_r.dedup();
        let mut segments = vec![Segment::default(); n_seg as usize];
        for s in &mut segments {
            s.local_span = (u32::MAX, 0);
            s.receive_span = (u32::MAX, 0);
        }
        for (e, li, j) in pairs {
            let seg =
                ((local[keep_l[li as usize]] - start).0 / SEGMENT).clamp(0, n_seg - 1) as usize;
            let rj = keep_r.binary_search(&j).expect("kept") as u32;
            let s = &mut segments[seg];
            s.pairs.push((e, li, rj));
            s.local_span = (s.local_span.0.min(li), s.local_span.1.max(li + 1));
            s.receive_span = (s.receive_span.0.min(rj), s.receive_span.1.max(rj + 1));
        }
        for s in &mut segments {
            s.pairs.sort_unstable();
        }
        PairIndex {
            local: keep_l.iter().map(|&i| local[i]).collect(),
            receive: keep_r.iter().map(|&j| receive[j]).collect(),
            start,
            segments,
        }
    }

    /// Tags of the pairs whose offset is within `hw` of `model(l)`, the
    /// cell's departure from the centre model, in time order.
    fn select(
        &self,
        model: impl Fn(Picos) -> f64,
        hw: Picos,
        marks: &mut (Vec<bool>, Vec<bool>),
    ) -> (Vec<Picos>, Vec<Picos>) {
        marks.0.resize(self.local.len(), false);
        marks.1.resize(self.receive.len(), false);
        let margin = hw.0 + 1000;
        let (mut l_span, mut r_span) = ((usize::MAX, 0), (usize::MAX, 0));
        for (k, seg) in self.segments.iter().enumerate() {
            if seg.pairs.is_empty() {
                continue;
            }
            let t0 = self.start + Picos(k as i64 * SEGMENT);
            let at = [t0, t0 + Picos(SEGMENT / 2), t0 + Picos(SEGMENT)].map(&model);
            let lo = round_ps(at.iter().cloned().fold(f64::INFINITY, f64::min)) - margin;
            let hi = round_ps(at.iter().cloned().fold(f64::NEG_INFINITY, f64::max)) + margin;
            let a = seg.pairs.partition_point(|p| p.0 < lo);
            let b = seg.pairs.partition_point(|p| p.0 <= hi);
            if a == b {
                continue;
            }
            for &(_, i, j) in &seg.pairs[a..b] {
                marks.0[i as usize] = true;
                marks.1[j as usize] = true;
            }
            l_span = (
                l_span.0.min(seg.local_span.0 as usize),
                l_span.1.max(seg.local_span.1 as usize),
            );
            r_span = (
                r_span.0.min(seg.receive_span.0 as usize),
                r_span.1.max(seg.receive_span.1 as usize),
            );
        }
        let take = |flags: &mut [bool], span: (usize, usize), tags: &[Picos]| {
            let mut out = Vec::new();
            for i in span.0..span.1.max(span.0) {
                if std::mem::take(&mut flags[i]) {
                    out.push(tags[i]);
                }
            }
            out
        };
        (
            take(&mut marks.0, l_span, &self.local),
            take(&mut marks.1, r_span, &self.receive),
        )
    }
}

/// Grid search over altitude and inclination on the first
/// `scan_duration` seconds after `start`.
pub fn coarse_scan(
    streams: &LinkStreams,
    cfg: &CoarseScanConfig,
    template: &OrbitParams,
    start: Picos,
) -> Result<CoarseScanResult, TrackingError> {
    cfg.validate()?;
    let end = start + Picos(round_ps(cfg.scan_duration * PS_PER_S as f64));
    let mid = Picos((start.0 + end.0) / 2);
    let half_seed = Picos(round_ps(
        cfg.seed_window.min(cfg.scan_duration) * PS_PER_S as f64 / 2.0,
    ));
    let (s0, s1) = (mid - half_seed, mid + half_seed);
    let a_values = cfg.a_values();
    let theta_values = cfg.theta_values();
    let a_c = 0.5 * (cfg.a_range.0 + cfg.a_range.1);
    let theta_c = 0.5 * (cfg.theta_range.0 + cfg.theta_range.1);
    let center_geo = orbit_with(template, a_c, theta_c).geometry()?;

    let dirs = [Direction::DownlinkAlpha, Direction::UplinkBeta];
    let mut seeds = [Picos::ZERO; 2];
    for (k, &dir) in dirs.iter().enumerate() {
        let (l, r) = direction_streams(streams, dir);
        let s = seed_offset(l, r, &center_geo, dir, s0, s1, cfg)?;
        seeds[k] = s.tau.ok_or(TrackingError::ScanFailed {
            max_significance: s.significance,
        })?;
    }
    let t_sub = mid.as_seconds();
    let geos: Vec<Option<OrbitGeometry>> = a_values
        .iter()
        .flat_map(|&a| theta_values.iter().map(move |&th| (a, th)))
        .map(|(a, th)| orbit_with(template, a, th).geometry().ok())
        .collect();

    // Only pairs that can fall inside some cell's search range matter, so
    // each direction is cut down to those tags once.
    let probes: Vec<f64> = (0..=8)
        .map(|k| start.as_seconds() + k as f64 / 8.0 * cfg.scan_duration)
        .collect();
    let hw = cfg.correlation.search_halfwidth
        + cfg.correlation.coincidence_window
        + cfg.correlation.coarse_bin;
    let mut indexes = Vec::with_capacity(2);
    for (k, &dir) in dirs.iter().enumerate() {
        let rel = |g: &OrbitGeometry, t: f64| {
            (g.delay_at_scenario_time(t, dir) - g.delay_at_scenario_time(t_sub, dir))
                * PS_PER_S as f64
        };
        let reach = geos
            .iter()
            .flatten()
            .flat_map(|g| {
                probes
                    .iter()
                    .map(|&t| (rel(g, t) - rel(&center_geo, t)).abs())
            })
            .fold(0.0, f64::max);
        let (local, receive) = direction_streams(streams, dir);
        let center_table = DelayTable::new(&center_geo, dir, start, end);
        indexes.push(PairIndex::new(
            window(local.tags(), start, end),
            receive.tags(),
            &center_table,
            seeds[k],
            round_ps(1.25 * reach) + hw.0,
            (start, end),
        ));
    }

    let mut marks = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    let center_tables = dirs.map(|d| DelayTable::new(&center_geo, d, start, end));
    let mut cells = Vec::with_capacity(geos.len());
    let mut max_sig = f64::NEG_INFINITY;
    for (idx, geo) in geos.iter().enumerate() {
        let a = a_values[idx / theta_values.len()];
        let theta = theta_values[idx % theta_values.len()];
        let mut cell = CoarseCell {
            a,
            theta,
            height: 0,
            height_alpha: 0,
            height_beta: 0,
            significance: 0.0,
            found: false,
            b_alpha: None,
            b_beta: None,
        };
        if let Some(geo) = geo {
            let mut ok = true;
            let mut sig = f64::INFINITY;
            for (k, &dir) in dirs.iter().enumerate() {
                let table = DelayTable::new(geo, dir, start, end);
                let offset = (center_geo.delay_at_scenario_time(t_sub, dir)
                    - geo.delay_at_scenario_time(t_sub, dir))
                    * PS_PER_S as f64;
                let center = seeds[k] + Picos(round_ps(offset));
                let (l, r) = indexes[k].select(
                    |t| table.eval(t) - center_tables[k].eval(t) + offset,
                    hw,
                    &mut marks[k],
                );
                let (res, _, _) = correlate_shifted(
                    &l,
                    &r,
                    |t| table.eval(t),
                    center,
                    cfg.correlation.search_halfwidth,
                    &cfg.correlation,
                )?;
                sig = sig.min(res.significance);
                ok &= res.tau.is_some();
                if k == 0 {
                    cell.height_alpha = res.height;
                    cell.b_alpha = res.tau;
                } else {
                    cell.height_beta = res.height;
                    cell.b_beta = res.tau;
                }
            }
            cell.height = cell.height_alpha + cell.height_beta;
            cell.significance = sig;
            cell.found = ok;
            max_sig = max_sig.max(sig);
        }
        cells.push(cell);
    }
    let best = cells
        .iter()
        .enumerate()
        .filter(|(_, c)| c.found)
        .max_by(|(_, x), (_, y)| {
            x.height
                .cmp(&y.height)
                .then_with(|| (y.a - a_c).abs().total_cmp(&(x.a - a_c).abs()))
                .then_with(|| {
                    (y.theta - theta_c)
                        .abs()
                        .total_cmp(&(x.theta - theta_c).abs())
                })
        })
        .map(|(i, _)| i)
        .ok_or(TrackingError::ScanFailed {
            max_significance: if max_sig.is_finite() { max_sig } else { 0.0 },
        })?;
    Ok(CoarseScanResult {
        a_values,
        theta_values,
        cells,
        best,
        start,
        end,
    })
}

/// Per-second moments of the points, in the Chebyshev basis of that second.
#[derive(Debug, Clone, Default)]
struct BinMoments {
    n: usize,
    g: [[f64; NODES]; NODES],
    z: [f64; NODES],
    yy: f64,
}

impl BinMoments {
    fn add(&mut self, u: f64, y: f64) {
        let b = cheb_basis(u);
        for i in 0..NODES {
            for j in 0..NODES {
                self.g[i][j] += b[i] * b[j];
            }
            self.z[i] += y * b[i];
        }
        self.yy += y * y;
        self.n += 1;
    }
}

/// A bin reduced to virtual residual rows `W·c − w0` plus a constant.
#[derive(Debug, Clone)]
struct ReducedBin {
    second: i64,
    w: Vec<[f64; NODES]>,
    w0: Vec<f64>,
    constant: f64,
    /// Reference delay at the bin's Chebyshev nodes, ps.
    ref_nodes: [f64; NODES],
}

fn reduce(second: i64, m: &BinMoments, ref_nodes: [f64; NODES]) -> ReducedBin {
    let g = DMatrix::from_fn(NODES, NODES, |i, j| m.g[i][j]);
    let eig = SymmetricEigen::new(g);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut w = Vec::new();
    let mut w0 = Vec::new();
    let mut explained = 0.0;
    for k in 0..NODES {
        let lam = eig.eigenvalues[k];
        if !(lam > 1e-10 * lmax) {
            continue;
        }
        let q = eig.eigenvectors.column(k);
        let qz: f64 = (0..NODES).map(|i| q[i] * m.z[i]).sum();
        let s = lam.sqrt();
        w.push(std::array::from_fn(|i| s * q[i]));
        w0.push(qz / s);
        explained += qz * qz / lam;
    }
    ReducedBin {
        second,
        w,
        w0,
        constant: (m.yy - explained).max(0.0),
        ref_nodes,
    }
}

/// One point of one direction: local time and `r − l`.
pub type Coincidence = (Picos, Picos);

/// Orbit-fit state of one direction.
#[derive(Debug, Clone)]
pub struct OrbitFitState {
    pub direction: Direction,
    pub template: OrbitParams,
    /// Origin of `t` in the drift term.
    pub t_ref: Picos,
    pub a_fit: f64,
    pub theta_fit: f64,
    pub m: f64,
    /// ps.
    pub b: f64,
    /// Data-only covariance of `(a, θ, m, b)` in m, rad, 1, ps.
    pub covariance: Matrix4<f64>,
    pub accumulated_coincidences: Vec<Coincidence>,
    pub rms: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Reference model the stored residuals are taken against.
    ref_b: f64,
    ref_geo: OrbitGeometry,
    /// `r − l − T_ref(l) − ref_b` per point, ps.
    residuals: Vec<f64>,
    rejected: Vec<bool>,
}

impl OrbitFitState {
    /// Starts from a coarse solution: `(a, θ)` with `b` the offset seen in
    /// that cell's frame.
    pub fn new(
        direction: Direction,
        template: &OrbitParams,
        t_ref: Picos,
        a: f64,
        theta: f64,
        b: f64,
    ) -> Result<OrbitFitState, TrackingError> {
        let ref_geo = orbit_with(template, a, theta).geometry()?;
        Ok(OrbitFitState {
            direction,
            template: template.clone(),
            t_ref,
            a_fit: a,
            theta_fit: theta,
            m: 0.0,
            b,
            covariance: Matrix4::from_element(f64::NAN),
            accumulated_coincidences: Vec::new(),
            rms: f64::NAN,
            iterations: 0,
            converged: false,
            ref_b: b,
            ref_geo,
            residuals: Vec::new(),
            rejected: Vec::new(),
        })
    }

    pub fn orbit(&self) -> OrbitParams {
        orbit_with(&self.template, self.a_fit, self.theta_fit)
    }

    pub fn geometry(&self) -> Result<OrbitGeometry, TrackingError> {
        Ok(self.orbit().geometry()?)
    }

    fn seconds(&self, t: Picos) -> f64 {
        (t - self.t_ref).as_seconds()
    }

    /// Fitted clock part `m·(t − t_ref) + b`, ps.
    pub fn clock_part(&self, t: Picos) -> f64 {
        self.m * self.seconds(t) * PS_PER_S as f64 + self.b
    }

    pub fn n_points(&self) -> usize {
        self.rejected.iter().filter(|&&r| !r).count()
    }

    /// Correlation coefficient of `a` and `m` in the covariance.
    pub fn corr_a_m(&self) -> f64 {
        let c = &self.covariance;
        c[(0, 2)] / (c[(0, 0)] * c[(2, 2)]).sqrt()
    }

    /// Appends points, keeping them time-sorted.
    pub fn add_coincidences(&mut self, pts: &[Coincidence]) {
        let dir = self.direction;
        for &(l, tau) in pts {
            let t_ref = self.ref_geo.delay_at_scenario_time(l.as_seconds(), dir) * PS_PER_S as f64;
            let y = (tau.as_f64() - t_ref) - self.ref_b;
            self.accumulated_coincidences.push((l, tau));
            self.residuals.push(y);
            self.rejected.push(false);
        }
        if self
            .accumulated_coincidences
            .windows(2)
            .any(|w| w[1].0 < w[0].0)
        {
            let mut idx: Vec<usize> = (0..self.accumulated_coincidences.len()).collect();
            idx.sort_by_key(|&i| self.accumulated_coincidences[i]);
            self.accumulated_coincidences = idx
                .iter()
                .map(|&i| self.accumulated_coincidences[i])
                .collect();
            self.residuals = idx.iter().map(|&i| self.residuals[i]).collect();
            self.rejected = idx.iter().map(|&i| self.rejected[i]).collect();
        }
    }

    fn bin_of(&self, l: Picos) -> (i64, f64) {
        let s = l.0.div_euclid(PS_PER_S);
        let u = 2.0 * (l.0 - s * PS_PER_S) as f64 / PS_PER_S as f64 - 1.0;
        (s, u)
    }

    fn reduced_bins(&self) -> Vec<ReducedBin> {
        let mut bins: BTreeMap<i64, BinMoments> = BTreeMap::new();
        for (k, &(l, _)) in self.accumulated_coincidences.iter().enumerate() {
            if self.rejected[k] {
                continue;
            }
            let (s, u) = self.bin_of(l);
            bins.entry(s).or_default().add(u, self.residuals[k]);
        }
        let nodes = cheb_nodes();
        bins.iter()
            .map(|(&s, m)| {
                let refs = nodes.map(|x| {
                    self.ref_geo
                        .delay_at_scenario_time(s as f64 + 0.5 + 0.5 * x, self.direction)
                        * PS_PER_S as f64
                });
                reduce(s, m, refs)
            })
            .collect()
    }

    /// Orbit-part Chebyshev coefficients of every bin relative to the
    /// reference, ps.
    fn orbit_coeffs(&self, bins: &[ReducedBin], a: f64, theta: f64) -> Option<Vec<[f64; NODES]>> {
        let geo = orbit_with(&self.template, a, theta).geometry().ok()?;
        let nodes = cheb_nodes();
        Some(
            bins.iter()
                .map(|b| {
                    let mut v = [0.0; NODES];
                    for k in 0..NODES {
                        let t = b.second as f64 + 0.5 + 0.5 * nodes[k];
                        v[k] = geo.delay_at_scenario_time(t, self.direction) * PS_PER_S as f64
                            - b.ref_nodes[k];
                    }
                    cheb_coeffs(&v)
                })
                .collect(),
        )
    }
}

/// Stacked virtual residuals `e + A·[m, b']` at one `(a, θ)`.
struct Linearized {
    e: DVector<f64>,
    a: DMatrix<f64>,
}

fn linearize(state: &OrbitFitState, bins: &[ReducedBin], coeffs: &[[f64; NODES]]) -> Linearized {
    let rows: usize = bins.iter().map(|b| b.w.len()).sum();
    let mut e = DVector::zeros(rows);
    let mut a = DMatrix::zeros(rows, 2);
    let mut r = 0;
    for (bin, c) in bins.iter().zip(coeffs) {
        // drift in ps/s times (t − t_ref) over the bin: constant and linear
        // Chebyshev coefficients
        let t_mid = bin.second as f64 + 0.5 - state.t_ref.as_seconds();
        let cm = [t_mid, 0.5];
        for (row, w0) in bin.w.iter().zip(&bin.w0) {
            e[r] = row.iter().zip(c).map(|(w, c)| w * c).sum::<f64>() - w0;
            a[(r, 0)] = row[0] * cm[0] + row[1] * cm[1];
            a[(r, 1)] = row[0];
            r += 1;
        }
    }
    Linearized { e, a }
}

/// Least-squares `(m, b')` with the drift prior; returns the solution and
/// the reduced sum of squares including the prior row.
fn solve_linear(lin: &Linearized, prior_weight: f64) -> Option<(Vector2<f64>, f64)> {
    let mut ata: Matrix2<f64> = (lin.a.transpose() * &lin.a).fixed_view::<2, 2>(0, 0).into();
    ata[(0, 0)] += prior_weight * prior_weight;
    let atb: Vector2<f64> = (lin.a.transpose() * &lin.e).fixed_view::<2, 1>(0, 0).into();
    let x = ata.cholesky()?.solve(&(-atb));
    let r = &lin.e + &lin.a * DVector::from_column_slice(x.as_slice());
    let cost = r.norm_squared() + (prior_weight * x[0]).powi(2);
    Some((x, cost))
}

fn reduced_residual(lin: &Linearized, x: &Vector2<f64>, prior_weight: f64) -> DVector<f64> {
    let r = &lin.e + &lin.a * DVector::from_column_slice(x.as_slice());
    let mut out = DVector::zeros(r.len() + 1);
    out.rows_mut(0, r.len()).copy_from(&r);
    out[r.len()] = prior_weight * x[0];
    out
}

const FD_STEP: [f64; 2] = [1.0, 1e-6];

/// Refits `(a, θ, m, b)` of one direction on its accumulated points.
pub fn precise_fit(
    state: &OrbitFitState,
    cfg: &FitConfig,
    coincidence_window: Picos,
) -> Result<OrbitFitState, TrackingError> {
    let mut st = state.clone();
    for _round in 0..3 {
        let have = st.n_points();
        if have < cfg.min_points {
            return Err(TrackingError::TooFewPoints {
                have,
                min: cfg.min_points,
            });
        }
        fit_once(&mut st, cfg)?;
        if !reject_outliers(&mut st, cfg.outlier_factor * coincidence_window.as_f64()) {
            break;
        }
    }
    Ok(st)
}

fn fit_once(st: &mut OrbitFitState, cfg: &FitConfig) -> Result<(), TrackingError> {
    let bins = st.reduced_bins();
    let n = st.n_points();
    let constant: f64 = bins.iter().map(|b| b.constant).sum();
    let sigma_y = if st.rms.is_finite() && st.rms > 0.0 {
        st.rms
    } else {
        500.0
    };
    // the linear unknowns are the drift in ps/s and the offset in ps
    let prior = if cfg.drift_prior_sigma > 0.0 {
        sigma_y / (cfg.drift_prior_sigma * PS_PER_S as f64)
    } else {
        0.0
    };
    let eval = |a: f64, th: f64| -> Option<(Linearized, Vector2<f64>, f64)> {
        let c = st.orbit_coeffs(&bins, a, th)?;
        let lin = linearize(st, &bins, &c);
        let (x, cost) = solve_linear(&lin, prior)?;
        Some((lin, x, cost))
    };

    let (mut a, mut th) = (st.a_fit, st.theta_fit);
    let (mut lin, mut x, mut cost) = eval(a, th).ok_or(TrackingError::DegenerateGeometry)?;
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    let max_da = 5_000.0;
    let max_dth = 0.5f64.to_radians();
    let span = match (
        st.accumulated_coincidences.first(),
        st.accumulated_coincidences.last(),
    ) {
        (Some(a), Some(b)) => (b.0 - a.0).as_seconds(),
        _ => 0.0,
    };
    let max_iterations = if span >= cfg.min_orbit_span {
        cfg.max_iterations
    } else {
        0
    };
    while iterations < max_iterations {
        iterations += 1;
        let r0 = reduced_residual(&lin, &x, prior);
        let mut jac = DMatrix::zeros(r0.len(), 2);
        for (p, &h) in FD_STEP.iter().enumerate() {
            let (ap, tp) = if p == 0 { (a + h, th) } else { (a, th + h) };
            let (am, tm) = if p == 0 { (a - h, th) } else { (a, th - h) };
            let (lp, xp, _) = eval(ap, tp).ok_or(TrackingError::DegenerateGeometry)?;
            let (lm, xm, _) = eval(am, tm).ok_or(TrackingError::DegenerateGeometry)?;
            let d =
                (reduced_residual(&lp, &xp, prior) - reduced_residual(&lm, &xm, prior)) / (2.0 * h);
            jac.set_column(p, &d);
        }
        let jtj: Matrix2<f64> = (jac.transpose() * &jac).fixed_view::<2, 2>(0, 0).into();
        let jtr: Vector2<f64> = (jac.transpose() * &r0).fixed_view::<2, 1>(0, 0).into();
        if !(jtj[(0, 0)] > 0.0) || !(jtj[(1, 1)] > 0.0) {
            return Err(TrackingError::DegenerateGeometry);
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = jtj;
            damped[(0, 0)] *= 1.0 + lambda;
            damped[(1, 1)] *= 1.0 + lambda;
            let Some(ch) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = ch.solve(&(-jtr));
            let da = step[0].clamp(-max_da, max_da);
            let dth = step[1].clamp(-max_dth, max_dth);
            if let Some((l2, x2, c2)) = eval(a + da, th + dth) {
                if c2 <= cost {
                    let dx = x2 - x;
                    a += da;
                    th += dth;
                    lin = l2;
                    x = x2;
                    cost = c2;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if da.abs() < 1.0
                        && dth.abs() < 1e-5f64.to_radians()
                        && dx[0].abs() < 1e-13 * PS_PER_S as f64
                        && dx[1].abs() < 0.1
                    {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no downhill step left: at the minimum to working precision
            converged = true;
        }
        if converged {
            break;
        }
    }

    // data-only covariance over all four parameters
    let rows = lin.e.len();
    let mut j4 = DMatrix::zeros(rows, 4);
    for (p, &h) in FD_STEP.iter().enumerate() {
        let (ap, tp) = if p == 0 { (a + h, th) } else { (a, th + h) };
        let (am, tm) = if p == 0 { (a - h, th) } else { (a, th - h) };
        let cp = st
            .orbit_coeffs(&bins, ap, tp)
            .ok_or(TrackingError::DegenerateGeometry)?;
        let cm = st
            .orbit_coeffs(&bins, am, tm)
            .ok_or(TrackingError::DegenerateGeometry)?;
        let d = (linearize(st, &bins, &cp).e - linearize(st, &bins, &cm).e) / (2.0 * h);
        j4.set_column(p, &d);
    }
    // m as a fractional frequency, b in ps
    j4.set_column(2, &(lin.a.column(0) * PS_PER_S as f64));
    j4.set_column(3, &lin.a.column(1));
    let data_cost =
        (&lin.e + &lin.a * DVector::from_column_slice(x.as_slice())).norm_squared() + constant;
    let dof = (n as f64 - 4.0).max(1.0);
    let sigma2 = data_cost / dof;
    let info: Matrix4<f64> = (j4.transpose() * &j4).fixed_view::<4, 4>(0, 0).into();
    st.covariance = info
        .try_inverse()
        .map(|inv| inv * sigma2)
        .unwrap_or_else(|| Matrix4::from_element(f64::INFINITY));

    st.a_fit = a;
    st.theta_fit = th;
    st.m = x[0] / PS_PER_S as f64;
    st.b = st.ref_b + x[1];
    st.rms = (data_cost / n.max(1) as f64).sqrt();
    st.iterations = iterations;
    st.converged = converged;
    Ok(())
}

/// Marks points farther than `limit` ps from the fitted model. Returns
/// whether anything changed.
fn reject_outliers(st: &mut OrbitFitState, limit: f64) -> bool {
    let Some(geo) = st.orbit().geometry().ok() else {
        return false;
    };
    let table_start = st.accumulated_coincidences.first().map(|p| p.0);
    let table_end = st.accumulated_coincidences.last().map(|p| p.0 + Picos(1));
    let (Some(t0), Some(t1)) = (table_start, table_end) else {
        return false;
    };
    let fitted = DelayTable::new(&geo, st.direction, t0, t1);
    let reference = DelayTable::new(&st.ref_geo, st.direction, t0, t1);
    let mut changed = false;
    for k in 0..st.residuals.len() {
        let l = st.accumulated_coincidences[k].0;
        let model = fitted.eval(l) - reference.eval(l) + st.clock_part(l) - st.ref_b;
        let out = (st.residuals[k] - model).abs() > limit;
        if out != st.rejected[k] {
            st.rejected[k] = out;
            changed = true;
        }
    }
    changed
}

/// Parameters of both directions after one acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSnapshot {
    pub acq_index: usize,
    pub t_mid: Picos,
    pub direction: Direction,
    pub a: f64,
    pub theta: f64,
    pub m: f64,
    pub b: f64,
    pub n_points: usize,
    pub rms: f64,
    pub sigma_a: f64,
    pub corr_a_m: f64,
}

impl FitSnapshot {
    fn of(acq_index: usize, t_mid: Picos, st: &OrbitFitState) -> FitSnapshot {
        FitSnapshot {
            acq_index,
            t_mid,
            direction: st.direction,
            a: st.a_fit,
            theta: st.theta_fit,
            m: st.m,
            b: st.b,
            n_points: st.n_points(),
            rms: st.rms,
            sigma_a: st.covariance[(0, 0)].sqrt(),
            corr_a_m: st.corr_a_m(),
        }
    }
}

pub fn fit_history_csv(history: &[FitSnapshot]) -> String {
    let mut s = String::from(
        "acq_index,t_mid_s,direction,altitude_m,inclination_deg,drift,offset_ps,points,rms_ps,sigma_altitude_m,corr_altitude_drift\n",
    );
    for h in history {
        s.push_str(&format!(
            "{},{:.3},{},{:.3},{:.6},{:.5e},{:.3},{},{:.3},{:.5e},{:.5e}\n",
            h.acq_index,
            h.t_mid.as_seconds(),
            match h.direction {
                Direction::DownlinkAlpha => "alpha",
                Direction::UplinkBeta => "beta",
            },
            h.a,
            h.theta.to_degrees(),
            h.m,
            h.b,
            h.n_points,
            h.rms,
            h.sigma_a,
            h.corr_a_m
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrackedRun {
    pub scan: CoarseScanResult,
    pub records: Vec<SyncRecord>,
    pub history: Vec<FitSnapshot>,
    pub final_states: [OrbitFitState; 2],
}

/// Coarse scan at the start of the pass, then per acquisition: de-spread
/// with the current fit, correlate, accumulate coincidences and refit.
pub fn run_tracked_sync(
    streams: &LinkStreams,
    acq: &AcquisitionConfig,
    scan_cfg: &CoarseScanConfig,
    template: &OrbitParams,
    mode: SyncMode,
) -> Result<TrackedRun, TrackingError> {
    acq.validate()?;
    let t_a = acq.acquisition_ps();
    let (start, n) = streams.acquisition_grid(t_a);
    if n == 0 {
        return Err(SyncError::NoAcquisitions.into());
    }
    let scan = coarse_scan(streams, scan_cfg, template, start)?;
    let best = scan.best_cell().clone();
    let dirs = [Direction::DownlinkAlpha, Direction::UplinkBeta];
    let bs = [best.b_alpha, best.b_beta].map(|b| b.expect("locked cell").as_f64());
    let mut states = [
        OrbitFitState::new(dirs[0], template, start, best.a, best.theta, bs[0])?,
        OrbitFitState::new(dirs[1], template, start, best.a, best.theta, bs[1])?,
    ];
    let fit = &scan_cfg.fit;
    let window_w = acq.correlation.coincidence_window;
    let mut recursions = [Recursion::default(), Recursion::default()];
    let mut records = Vec::with_capacity(n);
    let mut history = Vec::with_capacity(2 * n);
    let mut missed = 0usize;
    let mut last = (Picos::ZERO, Picos::ZERO, Picos::ZERO, Picos::ZERO);
    for i in 0..n {
        let t0 = start + Picos(i as i64 * t_a.0);
        let t1 = t0 + t_a;
        let t_mid = Picos((t0.0 + t1.0) / 2);
        let mut resid = [None, None];
        let mut t_fit = [0.0; 2];
        for k in 0..2 {
            let st = &states[k];
            let geo = st.geometry()?;
            let table = DelayTable::new(&geo, dirs[k], t0, t1);
            t_fit[k] = table.eval(t_mid);
            let (local, receive) = direction_streams(streams, dirs[k]);
            let l = window(local.tags(), t0, t1);
            let (res, l_shift, pairs) = match mode {
                SyncMode::Synchronized => {
                    let rec = &recursions[k];
                    let (s, d) = (rec.shift.as_f64(), rec.drift);
                    correlate_shifted(
                        l,
                        receive.tags(),
                        |t| table.eval(t) + st.clock_part(t) + s + d * (t - t_mid).as_f64(),
                        Picos::ZERO,
                        fit.track_halfwidth,
                        &acq.correlation,
                    )?
                }
                SyncMode::Drifting => correlate_shifted(
                    l,
                    receive.tags(),
                    |t| table.eval(t),
                    Picos(round_ps(st.clock_part(t_mid))),
                    fit.track_halfwidth,
                    &acq.correlation,
                )?,
            };
            let pts: Vec<Coincidence> = pairs
                .iter()
                .filter_map(|&(ls, r)| {
                    let j = l_shift.binary_search(&ls).ok()?;
                    Some((l[j], r - l[j]))
                })
                .collect();
            resid[k] = match mode {
                SyncMode::Synchronized => {
                    let full = res.tau.map(|t| t + recursions[k].shift);
                    recursions[k].step(full, t_a)
                }
                SyncMode::Drifting => res.tau,
            };
            if res.tau.is_some() {
                states[k].add_coincidences(&pts);
            }
        }
        for k in 0..2 {
            if resid[k].is_some() && states[k].n_points() >= fit.min_points {
                match precise_fit(&states[k], fit, window_w) {
                    Ok(next) => states[k] = next,
                    Err(TrackingError::DegenerateGeometry) => {}
                    Err(e) => return Err(e),
                }
            }
            history.push(FitSnapshot::of(i, t_mid, &states[k]));
        }

        let found = resid[0].is_some() && resid[1].is_some();
        if found {
            missed = 0;
            let tp = t_fit.map(|x| Picos(round_ps(x)));
            let tau_a = tp[0] + resid[0].unwrap();
            let tau_b = tp[1] + resid[1].unwrap();
            let delta = match mode {
                SyncMode::Synchronized => absolute_offset(tau_a, tau_b, tp[0], tp[1]),
                SyncMode::Drifting => {
                    let ta = mean_delay(&states, t_mid, Direction::DownlinkAlpha)?;
                    let tb = mean_delay(&states, t_mid, Direction::UplinkBeta)?;
                    absolute_offset(tau_a, tau_b, Picos(round_ps(ta)), Picos(round_ps(tb)))
                }
            };
            let range = mean_delay(&states, t_mid, Direction::DownlinkAlpha)?;
            last = (tau_a, tau_b, delta, Picos(round_ps(range)));
        } else {
            missed += 1;
            if missed > acq.max_missed {
                return Err(SyncError::SyncLost { index: i, missed }.into());
            }
        }
        let drift = |k: usize| match mode {
            SyncMode::Synchronized => states[k].m + recursions[k].drift,
            SyncMode::Drifting => states[k].m,
        };
        records.push(SyncRecord {
            acq_index: i,
            t_mid,
            tau_alpha: last.0,
            tau_beta: last.1,
            delta: last.2,
            t_prop_measured: last.3,
            drift_alpha: drift(0),
            drift_beta: drift(1),
            found_alpha: resid[0].is_some(),
            found_beta: resid[1].is_some(),
        });
    }
    Ok(TrackedRun {
        scan,
        records,
        history,
        final_states: states,
    })
}

/// Light time of `dir` at `t`, ps, averaged over the two directions'
/// orbit solutions. Each fit can trade a near-constant delay offset against
/// its `b`; the two trade with opposite signs, so the mean cancels it.
pub fn mean_delay(
    states: &[OrbitFitState; 2],
    t: Picos,
    dir: Direction,
) -> Result<f64, TrackingError> {
    let mut sum = 0.0;
    for st in states {
        sum += st.geometry()?.delay_at_scenario_time(t.as_seconds(), dir);
    }
    Ok(sum / 2.0 * PS_PER_S as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template() -> OrbitParams {
        let mut o = OrbitParams::overhead_pass(
            700e3,
            98.2f64.to_radians(),
            35f64.to_radians(),
            (-106.5f64).to_radians(),
        );
        o.epoch = 143.0;
        o
    }

    /// Noiseless points `(l, T(l) + m·(l − t_ref) + b)` at `rate` per second.
    fn synthetic(
        dir: Direction,
        m: f64,
        b: f64,
        t_ref: Picos,
        span: (f64, f64),
        rate: usize,
    ) -> Vec<Coincidence> {
        let geo = template().geometry().unwrap();
        let n = ((span.1 - span.0) * rate as f64) as usize;
        (0..n)
            .map(|k| {
                // irrational step keeps the points off the bin edges
                let t = span.0 + (k as f64 + 0.37) / rate as f64;
                let l = Picos(round_ps(t * PS_PER_S as f64));
                let tau = geo.delay_at_scenario_time(l.as_seconds(), dir) * PS_PER_S as f64
                    + m * (l - t_ref).as_f64()
                    + b;
                (l, Picos(round_ps(tau)))
            })
            .collect()
    }

    fn fit_cfg(prior: f64) -> FitConfig {
        FitConfig {
            drift_prior_sigma: prior,
            ..FitConfig::default()
        }
    }

    #[test]
    fn delay_table_tracks_direct_evaluation() {
        let geo = template().geometry().unwrap();
        let start = Picos(3 * PS_PER_S + 17);
        let end = Picos(283 * PS_PER_S);
        for dir in [Direction::DownlinkAlpha, Direction::UplinkBeta] {
            let table = DelayTable::new(&geo, dir, start, end);
            let mut t = start;
            while t < end {
                let direct = geo.delay_at_scenario_time(t.as_seconds(), dir) * PS_PER_S as f64;
                assert!((table.eval(t) - direct).abs() < 1.0, "{t:?}");
                t += Picos(977_777_777);
            }
        }
    }

    #[test]
    fn noiseless_fit_recovers_truth() {
        let t_ref = Picos(100 * PS_PER_S);
        let (m, b) = (4.5e-10, 2.5e6);
        let pts = synthetic(Direction::DownlinkAlpha, m, b, t_ref, (100.0, 200.0), 200);
        let mut st = OrbitFitState::new(
            Direction::DownlinkAlpha,
            &template(),
            t_ref,
            700_400.0,
            98.25f64.to_radians(),
            b + 1000.0,
        )
        .unwrap();
        st.add_coincidences(&pts);
        let fit = precise_fit(&st, &fit_cfg(0.0), Picos(1000)).unwrap();
        assert!((fit.a_fit - 700e3).abs() < 1.0, "a {}", fit.a_fit);
        assert!(
            (fit.theta_fit.to_degrees() - 98.2).abs() < 1e-4,
            "θ {}",
            fit.theta_fit.to_degrees()
        );
        assert!((fit.m - m).abs() < 1e-12, "m {}", fit.m);
        assert!((fit.b - b).abs() < 5.0, "b {}", fit.b);
        assert!(fit.rms < 1.0);
        assert_eq!(fit.n_points(), pts.len());

        let c = fit.covariance;
        for i in 0..4 {
            assert!(c[(i, i)] >= 0.0);
            for j in 0..4 {
                let scale = (c[(i, i)] * c[(j, j)]).sqrt();
                assert!((c[(i, j)] - c[(j, i)]).abs() <= 1e-6 * scale);
                assert!(c[(i, j)].abs() <= scale * (1.0 + 1e-9));
            }
        }
        assert!(fit.corr_a_m().abs() <= 1.0);
    }

    #[test]
    fn short_span_fits_only_the_clock() {
        let t_ref = Picos(50 * PS_PER_S);
        let pts = synthetic(
            Direction::UplinkBeta,
            0.0,
            -7000.0,
            t_ref,
            (50.0, 53.0),
            100,
        );
        let mut st = OrbitFitState::new(
            Direction::UplinkBeta,
            &template(),
            t_ref,
            700e3,
            98.2f64.to_radians(),
            0.0,
        )
        .unwrap();
        st.add_coincidences(&pts);
        let fit = precise_fit(&st, &fit_cfg(3e-11), Picos(1000)).unwrap();
        assert_eq!(fit.iterations, 0);
        assert_eq!(fit.a_fit, 700e3);
        assert!((fit.b + 7000.0).abs() < 1.0);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let t_ref = Picos(0);
        let pts = synthetic(Direction::DownlinkAlpha, 0.0, 0.0, t_ref, (10.0, 60.0), 1);
        let mut st = OrbitFitState::new(
            Direction::DownlinkAlpha,
            &template(),
            t_ref,
            700e3,
            1.7,
            0.0,
        )
        .unwrap();
        st.add_coincidences(&pts);
        assert!(matches!(
            precise_fit(&st, &FitConfig::default(), Picos(1000)),
            Err(TrackingError::TooFewPoints { have: 50, min: 100 })
        ));
    }

    #[test]
    fn drift_prior_pushes_the_two_directions_apart() {
        // β sees the clock with the opposite sign; a prior that holds m near
        // zero makes each fit soak the drift into altitude, in mirror image
        let t_ref = Picos(40 * PS_PER_S);
        let mut da = Vec::new();
        for (dir, m, b) in [
            (Direction::DownlinkAlpha, 4.5e-10, 2.5e6),
            (Direction::UplinkBeta, -4.5e-10, -2.5e6),
        ] {
            let pts = synthetic(dir, m, b, t_ref, (40.0, 90.0), 100);
            let mut st =
                OrbitFitState::new(dir, &template(), t_ref, 700e3, 98.2f64.to_radians(), b)
                    .unwrap();
            st.add_coincidences(&pts);
            let fit = precise_fit(&st, &fit_cfg(1e-12), Picos(1000)).unwrap();
            assert!(fit.corr_a_m().abs() > 0.9, "{}", fit.corr_a_m());
            da.push(fit.a_fit - 700e3);
        }
        assert!(da[0].abs() > 5.0 && da[1].abs() > 5.0, "{da:?}");
        assert!(da[0] * da[1] < 0.0, "{da:?}");
    }

    #[test]
    fn adding_points_out_of_order_keeps_them_sorted() {
        let t_ref = Picos(0);
        let mut pts = synthetic(Direction::DownlinkAlpha, 0.0, 0.0, t_ref, (10.0, 12.0), 50);
        let mut st = OrbitFitState::new(
            Direction::DownlinkAlpha,
            &template(),
            t_ref,
            700e3,
            1.7,
            0.0,
        )
        .unwrap();
        let tail = pts.split_off(60);
        st.add_coincidences(&tail);
        st.add_coincidences(&pts);
        assert!(st
            .accumulated_coincidences
            .windows(2)
            .all(|w| w[0].0 < w[1].0));
        assert_eq!(st.n_points(), 100);
    }

    fn grid_of(found: &[&str]) -> CoarseScanResult {
        let nt = found[0].len();
        let cells = found
            .iter()
            .enumerate()
            .flat_map(|(ia, row)| {
                row.chars().enumerate().map(move |(it, c)| CoarseCell {
                    a: ia as f64,
                    theta: it as f64,
                    height: u64::from(c == '#'),
                    height_alpha: 0,
                    height_beta: 0,
                    significance: 0.0,
                    found: c == '#',
                    b_alpha: None,
                    b_beta: None,
                })
            })
            .collect();
        CoarseScanResult {
            a_values: (0..found.len()).map(|i| i as f64).collect(),
            theta_values: (0..nt).map(|i| i as f64).collect(),
            cells,
            best: 0,
            start: Picos(0),
            end: Picos(0),
        }
    }

    #[test]
    fn island_contiguity() {
        let one = grid_of(&["....", ".##.", "..#.", "...#"]);
        assert!(one.island_is_contiguous());
        assert_eq!(one.locked_cells(), 4);
        let two = grid_of(&["#...", "....", "..##", "...."]);
        assert!(!two.island_is_contiguous());
        // a row end does not touch the next row start
        let wrap = grid_of(&["...#", "#...", "...."]);
        assert!(!wrap.island_is_contiguous());
        assert!(grid_of(&["...", "..."]).island_is_contiguous());
        let csv = one.to_csv();
        assert!(csv.starts_with("altitude_m,inclination_deg,peak_height,found\n"));
        assert_eq!(csv.lines().count(), 17);
    }

    #[test]
    fn scan_grid_validation() {
        let cfg = CoarseScanConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.theta_values().len(), 41);
        assert!((cfg.a_values()[1] - cfg.a_values()[0] - 133.0).abs() < 1e-9);
        let bad = CoarseScanConfig {
            a_step: 0.0,
            ..CoarseScanConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrackingError::Config(_))));
    }
}
