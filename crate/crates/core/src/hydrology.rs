//! Return-period flood thresholds from Gumbel fits of annual maxima.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Return periods in years.
pub const RETURN_PERIODS: [f64; 9] = [1.5, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0];

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Minimum number of usable years for a fit.
pub const MIN_YEARS: usize = 5;

/// A year is dropped when more than this fraction of its days is missing.
pub const MAX_MISSING_FRACTION: f64 = 0.2;

/// Maximum of every calendar year with enough valid days. `NaN` marks a
/// missing day. Returns `(year, maximum)` pairs in order.
pub fn annual_maxima_by_year(dates: &[NaiveDate], values: &[f64]) -> Result<Vec<(i32, f64)>> {
    if dates.len() != values.len() {
        return Err(Error::Shape(format!("{} dates for {} values", dates.len(), values.len())));
    }
    let mut years: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for (d, &v) in dates.iter().zip(values) {
        let e = years.entry(d.year()).or_insert((f64::NEG_INFINITY, 0));
        if v.is_finite() {
            e.0 = e.0.max(v);
            e.1 += 1;
        }
    }
    Ok(years
        .into_iter()
        .filter(|&(y, (_, n))| {
            let days = days_in_year(y) as f64;
            n > 0 && (days - n as f64) / days <= MAX_MISSING_FRACTION
        })
        .map(|(y, (m, _))| (y, m))
        .collect())
}

/// Annual maxima for fitting; fails below [`MIN_YEARS`] usable years.
pub fn annual_maxima(dates: &[NaiveDate], values: &[f64]) -> Result<Vec<f64>> {
    let m = annual_maxima_by_year(dates, values)?;
    if m.len() < MIN_YEARS {
        return Err(Error::InsufficientRecord(format!(
            "{} usable years, need {MIN_YEARS}",
            m.len()
        )));
    }
    Ok(m.into_iter().map(|(_, v)| v).collect())
}

fn days_in_year(y: i32) -> u32 {
    if NaiveDate::from_ymd_opt(y, 2, 29).is_some() {
        366
    } else {
        365
    }
}

/// First two sample L-moments `(λ1, λ2)` from unbiased probability-weighted moments.
pub fn lmoments(sample: &[f64]) -> Result<(f64, f64)> {
    let n = sample.len();
    if n < 2 {
        return Err(Error::InsufficientRecord(format!("L-moments need 2 values, got {n}")));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let nf = n as f64;
    let b0 = x.iter().sum::<f64>() / nf;
    let b1 = x
        .iter()
        .enumerate()
        .map(|(i, v)| v * i as f64 / (nf - 1.0))
        .sum::<f64>()
        / nf;
    Ok((b0, (2.0 * b1 - b0).max(0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelFit {
    pub mu: f64,
    pub beta: f64,
}

/// L-moment Gumbel fit: `β = λ2 / ln 2`, `μ = λ1 − γ β`.
pub fn gumbel_fit(maxima: &[f64]) -> Result<GumbelFit> {
    let (l1, l2) = lmoments(maxima)?;
    if l2 <= 0.0 {
        return Ok(GumbelFit { mu: l1, beta: 0.0 });
    }
    let beta = l2 / std::f64::consts::LN_2;
    Ok(GumbelFit {
        mu: l1 - EULER_GAMMA * beta,
        beta,
    })
}

/// Gumbel quantile with annual non-exceedance probability `1 − 1/RP`.
pub fn return_level(rp: f64, mu: f64, beta: f64) -> Result<f64> {
    if !(rp > 1.0) {
        return Err(Error::Invalid(format!("return period {rp} must exceed 1 year")));
    }
    if beta == 0.0 {
        return Ok(mu);
    }
    Ok(mu - beta * (-(1.0 - 1.0 / rp).ln()).ln())
}

/// Thresholds of one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointThresholds {
    pub point_id: u64,
    pub fit: GumbelFit,
    pub n_years: usize,
    /// `θ_r` per entry of [`RETURN_PERIODS`], clamped at 0.
    pub theta: [f64; 9],
}

impl PointThresholds {
    pub fn from_fit(point_id: u64, fit: GumbelFit, n_years: usize) -> Result<Self> {
        let mut theta = [0.0; 9];
        for (t, &rp) in theta.iter_mut().zip(&RETURN_PERIODS) {
            *t = return_level(rp, fit.mu, fit.beta)?.max(0.0);
        }
        Ok(Self {
            point_id,
            fit,
            n_years,
            theta,
        })
    }

    pub fn theta_for(&self, rp: f64) -> Result<f64> {
        RETURN_PERIODS
            .iter()
            .position(|&r| r == rp)
            .map(|i| self.theta[i])
            .ok_or_else(|| Error::Invalid(format!("return period {rp} not tabulated")))
    }
}

/// Per-point thresholds `θ_r` for every tabulated return period.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FloodThresholds {
    pub points: Vec<PointThresholds>,
}

impl FloodThresholds {
    /// Fits every point. `series[p]` holds the daily record of point `p`.
    pub fn fit(point_ids: &[u64], dates: &[NaiveDate], series: &[Vec<f64>]) -> Result<Self> {
        if point_ids.len() != series.len() {
            return Err(Error::Shape("one series per point required".into()));
        }
        let points = point_ids
            .par_iter()
            .zip(series.par_iter())
            .map(|(&id, s)| {
                let maxima = annual_maxima(dates, s).map_err(|e| match e {
                    Error::InsufficientRecord(m) => Error::InsufficientRecord(format!("point {id}: {m}")),
                    e => e,
                })?;
                PointThresholds::from_fit(id, gumbel_fit(&maxima)?, maxima.len())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Severity rank of discharge `x` at point index `p`.
    pub fn severity(&self, p: usize, x: f64) -> f64 {
        severity_rank(x, &self.points[p].theta)
    }

    /// `(point_id, rp, theta, mu, beta, n_years)` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["point_id", "rp", "theta", "mu", "beta", "n_years"])?;
        for p in &self.points {
            for (rp, th) in RETURN_PERIODS.iter().zip(&p.theta) {
                out.write_record([
                    p.point_id.to_string(),
                    rp.to_string(),
                    th.to_string(),
                    p.fit.mu.to_string(),
                    p.fit.beta.to_string(),
                    p.n_years.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut points: Vec<PointThresholds> = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let field = |i: usize| -> Result<&str> {
                rec.get(i).ok_or_else(|| Error::Format("threshold row too short".into()))
            };
            let num = |i: usize| -> Result<f64> {
                field(i)?
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("threshold field {i}: {e}")))
            };
            let id: u64 = field(0)?.parse().map_err(|e| Error::Format(format!("point id: {e}")))?;
            let rp = num(1)?;
            let k = RETURN_PERIODS
                .iter()
                .position(|&r| r == rp)
                .ok_or_else(|| Error::Format(format!("unknown return period {rp}")))?;
            if points.last().is_none_or(|p| p.point_id != id) {
                points.push(PointThresholds {
                    point_id: id,
                    fit: GumbelFit {
                        mu: num(3)?,
                        beta: num(4)?,
                    },
                    n_years: field(5)?.parse().map_err(|e| Error::Format(format!("n_years: {e}")))?,
                    theta: [f64::NAN; 9],
                });
            }
            points.last_mut().unwrap().theta[k] = num(2)?;
        }
        if points.iter().any(|p| p.theta.iter().any(|t| t.is_nan())) {
            return Err(Error::Format("threshold table is missing return periods".into()));
        }
        Ok(Self { points })
    }
}

/// Largest return period whose threshold `x` meets, or 0.
pub fn severity_rank(x: f64, theta: &[f64; 9]) -> f64 {
    let mut r = 0.0;
    for (rp, th) in RETURN_PERIODS.iter().zip(theta) {
        if x >= *th {
            r = *rp;
        }
    }
    r
}

/// `series[i] ≥ θ`.
pub fn classify_events(series: &[f64], theta: f64) -> Vec<bool> {
    series.iter().map(|&x| x >= theta).collect()
}
