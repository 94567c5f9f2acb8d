//! Allan-family stability statistics for phase (time-offset) series.

use log::warn;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("phase series needs at least 3 points, got {0}")]
    TooShort(usize),
    #[error("tau0 must be positive, got {0}")]
    BadTau0(f64),
    #[error("tau {tau} s is not an integer multiple of tau0 = {tau0} s")]
    NotMultiple { tau: f64, tau0: f64 },
    #[error("tau {tau} s needs more data than the series holds")]
    TauTooLong { tau: f64 },
    #[error("no gap-free terms left at tau {tau} s")]
    NoTerms { tau: f64 },
    #[error("only {0} usable points in slope-fit range, need 3")]
    TooFewPoints(usize),
    #[error("gap index {0} outside the series")]
    BadGap(usize),
}

/// Evenly sampled phase values in seconds, with optional missing samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSeries {
    x: Vec<f64>,
    tau0: f64,
    missing: Vec<bool>,
}

impl PhaseSeries {
    pub fn new(x: Vec<f64>, tau0: f64) -> Result<PhaseSeries, StabilityError> {
        PhaseSeries::with_gaps(x, tau0, &[])
    }

    /// `gaps` lists indices whose values are missing; their `x` entries are ignored.
    pub fn with_gaps(
        x: Vec<f64>,
        tau0: f64,
        gaps: &[usize],
    ) -> Result<PhaseSeries, StabilityError> {
        if x.len() < 3 {
            return Err(StabilityError::TooShort(x.len()));
        }
        if !(tau0 > 0.0) || !tau0.is_finite() {
            return Err(StabilityError::BadTau0(tau0));
        }
        let mut missing = vec![false; x.len()];
        for &g in gaps {
            *missing.get_mut(g).ok_or(StabilityError::BadGap(g))? = true;
        }
        Ok(PhaseSeries { x, tau0, missing })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn tau0(&self) -> f64 {
        self.tau0
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn gaps(&self) -> Vec<usize> {
        (0..self.x.len()).filter(|&i| self.missing[i]).collect()
    }

    fn averaging_factor(&self, tau: f64) -> Result<usize, StabilityError> {
        let m = tau / self.tau0;
        let mr = m.round();
        if mr < 1.0 || (m - mr).abs() > 1e-9 * m.max(1.0) {
            return Err(StabilityError::NotMultiple {
                tau,
                tau0: self.tau0,
            });
        }
        Ok(mr as usize)
    }

    fn ok(&self, i: usize) -> bool {
        !self.missing[i]
    }
}

/// Octave-spaced averaging times from `tau0` up to `n·tau0/4`.
pub fn default_taus(n: usize, tau0: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut m = 1usize;
    while m * 4 <= n {
        out.push(m as f64 * tau0);
        m *= 2;
    }
    out
}

/// Overlapping Allan deviation.
pub fn overlapping_adev(
    series: &PhaseSeries,
    taus: &[f64],
) -> Result<Vec<(f64, f64)>, StabilityError> {
    taus.iter()
        .map(|&tau| {
            let m = series.averaging_factor(tau)?;
            let n = series.len();
            if 2 * m > n - 1 {
                return Err(StabilityError::TauTooLong { tau });
            }
            let x = series.x();
            let mut sum = 0.0;
            let mut count = 0usize;
            for i in 0..n - 2 * m {
                if series.ok(i) && series.ok(i + m) && series.ok(i + 2 * m) {
                    let d = x[i + 2 * m] - 2.0 * x[i + m] + x[i];
                    sum += d * d;
                    count += 1;
                }
            }
            if count == 0 {
                return Err(StabilityError::NoTerms { tau });
            }
            let mt = m as f64 * series.tau0();
            Ok((tau, (sum / (2.0 * count as f64 * mt * mt)).sqrt()))
        })
        .collect()
}

/// Non-overlapping Allan deviation, kept as a cross-check of the overlapping form.
pub fn classical_adev(
    series: &PhaseSeries,
    taus: &[f64],
) -> Result<Vec<(f64, f64)>, StabilityError> {
    taus.iter()
        .map(|&tau| {
            let m = series.averaging_factor(tau)?;
            let n = series.len();
            if 2 * m > n - 1 {
                return Err(StabilityError::TauTooLong { tau });
            }
            let x = series.x();
            let mut sum = 0.0;
            let mut count = 0usize;
            let mut i = 0;
            while i + 2 * m < n {
                if series.ok(i) && series.ok(i + m) && series.ok(i + 2 * m) {
                    let d = x[i + 2 * m] - 2.0 * x[i + m] + x[i];
                    sum += d * d;
                    count += 1;
                }
                i += m;
            }
            if count == 0 {
                return Err(StabilityError::NoTerms { tau });
            }
            let mt = m as f64 * series.tau0();
            Ok((tau, (sum / (2.0 * count as f64 * mt * mt)).sqrt()))
        })
        .collect()
}

/// Modified Allan deviation.
pub fn modified_adev(
    series: &PhaseSeries,
    taus: &[f64],
) -> Result<Vec<(f64, f64)>, StabilityError> {
    let n = series.len();
    let mut prefix = vec![0.0; n + 1];
    let mut gap_prefix = vec![0usize; n + 1];
    for i in 0..n {
        let ok = series.ok(i);
        prefix[i + 1] = prefix[i] + if ok { series.x()[i] } else { 0.0 };
        gap_prefix[i + 1] = gap_prefix[i] + usize::from(!ok);
    }
    let block = |a: usize, b: usize| prefix[b] - prefix[a];
    taus.iter()
        .map(|&tau| {
            let m = series.averaging_factor(tau)?;
            if 3 * m > n {
                return Err(StabilityError::TauTooLong { tau });
            }
            let mut sum = 0.0;
            let mut count = 0usize;
            for j in 0..=n - 3 * m {
                if gap_prefix[j + 3 * m] != gap_prefix[j] {
                    continue;
                }
                let s =
                    block(j + 2 * m, j + 3 * m) - 2.0 * block(j + m, j + 2 * m) + block(j, j + m);
                sum += s * s;
                count += 1;
            }
            if count == 0 {
                return Err(StabilityError::NoTerms { tau });
            }
            let mt = m as f64 * series.tau0();
            let mf = m as f64;
            Ok((tau, (sum / (2.0 * mf * mf * mt * mt * count as f64)).sqrt()))
        })
        .collect()
}

/// Time deviation, `τ·MDEV/√3`.
pub fn time_deviation(
    series: &PhaseSeries,
    taus: &[f64],
) -> Result<Vec<(f64, f64)>, StabilityError> {
    Ok(modified_adev(series, taus)?
        .into_iter()
        .map(|(tau, mdev)| (tau, tau * mdev / 3f64.sqrt()))
        .collect())
}

/// Least-squares slope of `ln dev` against `ln tau` over `[range.0, range.1]`.
pub fn fit_loglog_slope(points: &[(f64, f64)], range: (f64, f64)) -> Result<f64, StabilityError> {
    let (lo, hi) = (range.0 * (1.0 - 1e-9), range.1 * (1.0 + 1e-9));
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(tau, dev) in points {
        if tau < lo || tau > hi {
            continue;
        }
        if !(dev > 0.0) || !dev.is_finite() || !(tau > 0.0) {
            warn!("dropping non-positive deviation {dev} at tau {tau} from slope fit");
            continue;
        }
        xs.push(tau.ln());
        ys.push(dev.ln());
    }
    if xs.len() < 3 {
        return Err(StabilityError::TooFewPoints(xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseType {
    WhitePm,
    FlickerPm,
    WhiteFm,
    FlickerFm,
    RandomWalkFm,
}

impl NoiseType {
    pub fn name(self) -> &'static str {
        match self {
            NoiseType::WhitePm => "white PM",
            NoiseType::FlickerPm => "flicker PM",
            NoiseType::WhiteFm => "white FM",
            NoiseType::FlickerFm => "flicker FM",
            NoiseType::RandomWalkFm => "random-walk FM",
        }
    }
}

/// Nearest power-law noise type for a modified-ADEV log-log slope.
pub fn classify_mdev_slope(slope: f64) -> NoiseType {
    const TABLE: [(f64, NoiseType); 5] = [
        (-1.5, NoiseType::WhitePm),
        (-1.0, NoiseType::FlickerPm),
        (-0.5, NoiseType::WhiteFm),
        (0.0, NoiseType::FlickerFm),
        (0.5, NoiseType::RandomWalkFm),
    ];
    TABLE
        .iter()
        .min_by(|a, b| (a.0 - slope).abs().total_cmp(&(b.0 - slope).abs()))
        .unwrap()
        .1
}
