//! Delimited-text analysis products: sync records, stability tables,
//! ranging series and plot data.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::write_atomic;
use crate::stability::{
    default_taus, fit_loglog_slope, modified_adev, overlapping_adev, time_deviation, PhaseSeries,
    StabilityError,
};
use crate::sync::SyncRecord;
use crate::units::{Picos, PS_PER_S};

#[derive(Debug, Error)]
pub enum RecordsError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no records")]
    Empty,
    #[error(transparent)]
    Stability(#[from] StabilityError),
}

/// Value in ps with three decimals.
pub fn fmt_ps(x: f64) -> String {
    format!("{x:.3}")
}

/// Six significant figures.
pub fn fmt_sig(x: f64) -> String {
    format!("{x:.5e}")
}

pub const RECORD_HEADER: &str = "acq_index,t_mid_ps,tau_alpha_ps,tau_beta_ps,delta_ps,\
t_prop_measured_ps,drift_alpha,drift_beta,found_alpha,found_beta";

pub fn encode_records<W: Write>(w: &mut W, records: &[SyncRecord]) -> std::io::Result<()> {
    writeln!(w, "{RECORD_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.acq_index,
            r.t_mid.0,
            r.tau_alpha.0,
            r.tau_beta.0,
            r.delta.0,
            r.t_prop_measured.0,
            fmt_sig(r.drift_alpha),
            fmt_sig(r.drift_beta),
            u8::from(r.found_alpha),
            u8::from(r.found_beta)
        )?;
    }
    Ok(())
}

pub fn records_to_string(records: &[SyncRecord]) -> String {
    let mut buf = Vec::new();
    encode_records(&mut buf, records).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

pub fn write_records(path: &Path, records: &[SyncRecord]) -> Result<(), RecordsError> {
    write_atomic(path, |w| Ok(encode_records(w, records)?))
}

pub fn parse_records(text: &str) -> Result<Vec<SyncRecord>, RecordsError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RECORD_HEADER => {}
        _ => {
            return Err(RecordsError::Parse {
                line: 1,
                message: "missing sync-record header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| RecordsError::Parse {
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 10 {
            return Err(bad(format!("expected 10 fields, found {}", f.len())));
        }
        let int = |k: usize| -> Result<i64, RecordsError> {
            f[k].parse()
                .map_err(|e| bad(format!("field {}: {e}", k + 1)))
        };
        let real = |k: usize| -> Result<f64, RecordsError> {
            f[k].parse()
                .map_err(|e| bad(format!("field {}: {e}", k + 1)))
        };
        let flag = |k: usize| -> Result<bool, RecordsError> {
            match f[k] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(bad(format!(
                    "field {}: expected 0 or 1, got `{other}`",
                    k + 1
                ))),
            }
        };
        out.push(SyncRecord {
            acq_index: usize::try_from(int(0)?).map_err(|e| bad(e.to_string()))?,
            t_mid: Picos(int(1)?),
            tau_alpha: Picos(int(2)?),
            tau_beta: Picos(int(3)?),
            delta: Picos(int(4)?),
            t_prop_measured: Picos(int(5)?),
            drift_alpha: real(6)?,
            drift_beta: real(7)?,
            found_alpha: flag(8)?,
            found_beta: flag(9)?,
        });
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<SyncRecord>, RecordsError> {
    parse_records(&fs::read_to_string(path)?)
}

/// δ series in seconds with missed acquisitions marked as gaps.
pub fn delta_phase_series(records: &[SyncRecord]) -> Result<PhaseSeries, RecordsError> {
    if records.len() < 2 {
        return Err(RecordsError::Empty);
    }
    let tau0 = (records[1].t_mid - records[0].t_mid).as_seconds()
        / (records[1].acq_index - records[0].acq_index).max(1) as f64;
    let x = records.iter().map(|r| r.delta.as_seconds()).collect();
    let gaps: Vec<usize> = (0..records.len())
        .filter(|&i| !records[i].found())
        .collect();
    Ok(PhaseSeries::with_gaps(x, tau0, &gaps)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub tau: f64,
    pub adev: f64,
    pub mdev: f64,
    pub tdev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityTable {
    pub rows: Vec<StabilityRow>,
}

impl StabilityTable {
    pub fn compute(series: &PhaseSeries) -> Result<StabilityTable, RecordsError> {
        let n = series.len();
        let taus: Vec<f64> = default_taus(n, series.tau0())
            .into_iter()
            .filter(|&t| (3.0 * t / series.tau0()).round() as usize <= n)
            .collect();
        let adev = overlapping_adev(series, &taus)?;
        let mdev = modified_adev(series, &taus)?;
        let tdev = time_deviation(series, &taus)?;
        let rows = taus
            .iter()
            .enumerate()
            .map(|(i, &tau)| StabilityRow {
                tau,
                adev: adev[i].1,
                mdev: mdev[i].1,
                tdev: tdev[i].1,
            })
            .collect();
        Ok(StabilityTable { rows })
    }

    fn column(&self, pick: impl Fn(&StabilityRow) -> f64) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.tau, pick(r))).collect()
    }

    /// Log-log slopes of ADEV, MDEV and TDEV over `range` (s).
    pub fn slopes(&self, range: (f64, f64)) -> Result<(f64, f64, f64), StabilityError> {
        Ok((
            fit_loglog_slope(&self.column(|r| r.adev), range)?,
            fit_loglog_slope(&self.column(|r| r.mdev), range)?,
            fit_loglog_slope(&self.column(|r| r.tdev), range)?,
        ))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau_s,adev,mdev,tdev_s\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                fmt_sig(r.tau),
                fmt_sig(r.adev),
                fmt_sig(r.mdev),
                fmt_sig(r.tdev)
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangePoint {
    pub t: f64,
    pub range: f64,
    pub residual: f64,
}

/// Range `c·T_prop_measured` per found record. Residuals are taken against
/// `reference(t)` when given, otherwise against the series mean.
pub fn range_series(
    records: &[SyncRecord],
    c: f64,
    reference: Option<&dyn Fn(f64) -> f64>,
) -> Vec<RangePoint> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.found())
        .map(|r| {
            (
                r.t_mid.as_seconds(),
                r.t_prop_measured.as_f64() / PS_PER_S as f64 * c,
            )
        })
        .collect();
    let mean = pts.iter().map(|p| p.1).sum::<f64>() / pts.len().max(1) as f64;
    pts.into_iter()
        .map(|(t, d)| RangePoint {
            t,
            range: d,
            residual: d - reference.map_or(mean, |f| f(t)),
        })
        .collect()
}

pub fn range_csv(points: &[RangePoint]) -> String {
    let mut s = String::from("t_s,range_m,residual_m\n");
    for p in points {
        s.push_str(&format!("{:.3},{:.4},{:.4}\n", p.t, p.range, p.residual));
    }
    s
}

/// δ trajectory for plotting, in ps relative to the first record.
pub fn delta_plot_csv(records: &[SyncRecord]) -> String {
    let mut s = String::from("t_s,delta_ps,found\n");
    for r in records {
        s.push_str(&format!(
            "{:.3},{},{}\n",
            r.t_mid.as_seconds(),
            fmt_ps(r.delta.as_f64()),
            u8::from(r.found())
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, delta: i64, found: bool) -> SyncRecord {
        SyncRecord {
            acq_index: i,
            t_mid: Picos(500_000_000_000 + i as i64 * PS_PER_S),
            tau_alpha: Picos(5_485_000 + delta),
            tau_beta: Picos(5_485_000 - delta),
            delta: Picos(delta),
            t_prop_measured: Picos(5_485_000),
            drift_alpha: 4.5e-10,
            drift_beta: -4.5e-10,
            found_alpha: found,
            found_beta: true,
        }
    }

    #[test]
    fn records_round_trip() {
        let recs: Vec<_> = (0..20)
            .map(|i| rec(i, -3 + i as i64 * 7, i % 5 != 0))
            .collect();
        let text = records_to_string(&recs);
        assert!(text.starts_with(RECORD_HEADER));
        let back = parse_records(&text).unwrap();
        // drifts pass through six significant figures
        assert_eq!(back.len(), recs.len());
        for (a, b) in back.iter().zip(&recs) {
            assert_eq!(a.delta, b.delta);
            assert_eq!(a.found_alpha, b.found_alpha);
            assert!((a.drift_alpha - b.drift_alpha).abs() <= 1e-5 * b.drift_alpha.abs());
        }
        assert_eq!(records_to_string(&back), text);
    }

    #[test]
    fn malformed_record_line_is_reported() {
        let mut text = records_to_string(&[rec(0, 1, true), rec(1, 2, true)]);
        text.push_str("2,3,4\n");
        match parse_records(&text) {
            Err(RecordsError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn phase_series_marks_misses() {
        let recs: Vec<_> = (0..10).map(|i| rec(i, i as i64, i != 4)).collect();
        let s = delta_phase_series(&recs).unwrap();
        assert_eq!(s.gaps(), vec![4]);
        assert!((s.tau0() - 1.0).abs() < 1e-12);
        assert!((s.x()[3] - 3e-12).abs() < 1e-24);
    }

    #[test]
    fn stationary_range_is_constant() {
        let recs: Vec<_> = (0..5).map(|i| rec(i, 0, true)).collect();
        let pts = range_series(&recs, 299_792_458.0, None);
        for p in &pts {
            assert!((p.range - 1644.37).abs() < 0.1, "{}", p.range);
            assert!(p.residual.abs() < 1e-9);
        }
        assert!(range_csv(&pts).starts_with("t_s,range_m,residual_m\n0.500,"));
    }

    #[test]
    fn formatting_rules() {
        assert_eq!(fmt_ps(27.1234), "27.123");
        assert_eq!(fmt_sig(1.0 / 3.0 * 1e-11), "3.33333e-12");
    }
}
