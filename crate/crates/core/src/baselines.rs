//! Persistence and day-of-year climatology forecasters.

use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DOY_SLOTS: usize = 366;
pub const N_QUANTILES: usize = 11;
/// Half-width of the pooling window in days.
pub const WINDOW_HALF: usize = 15;

/// `x_prev` repeated for every lead: `[L][P]`.
pub fn persistence_forecast(x_prev: &[f64], leads: usize) -> Vec<Vec<f64>> {
    vec![x_prev.to_vec(); leads]
}

/// Zero-based slot on a 366-day calendar; Feb 29 has its own slot and every
/// later day of a non-leap year shifts up by one.
pub fn doy_slot(date: NaiveDate) -> usize {
    let ord = date.ordinal0() as usize;
    let leap = NaiveDate::from_ymd_opt(date.year(), 2, 29).is_some();
    if !leap && ord >= 59 {
        ord + 1
    } else {
        ord
    }
}

/// Slots within `±WINDOW_HALF` of `slot`, wrapping over the year end.
pub fn window_slots(slot: usize) -> impl Iterator<Item = usize> {
    (0..=2 * WINDOW_HALF).map(move |k| (slot + DOY_SLOTS + k - WINDOW_HALF) % DOY_SLOTS)
}

/// Which climatological statistic scores the deterministic forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClimatologyStat {
    #[default]
    Median,
    Mean,
}

/// Per point and day-of-year slot: 11 quantiles at 0%, 10%, …, 100%, plus the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ClimatologyTable {
    pub point_ids: Vec<u64>,
    /// `[P][366][11]`
    pub quantiles: Vec<Vec<[f64; N_QUANTILES]>>,
    /// `[P][366]`
    pub means: Vec<Vec<f64>>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

impl ClimatologyTable {
    /// Builds the table from `series[p]` over `dates`; `NaN` marks missing days.
    pub fn build(point_ids: &[u64], dates: &[NaiveDate], series: &[Vec<f64>]) -> Result<Self> {
        if point_ids.len() != series.len() || series.iter().any(|s| s.len() != dates.len()) {
            return Err(Error::Shape("one series per point, one value per date".into()));
        }
        let (first, last) = match (dates.first(), dates.last()) {
            (Some(a), Some(b)) => (*a, *b),
            _ => return Err(Error::InsufficientRecord("empty history".into())),
        };
        if (last - first).num_days() + 1 < 2 * 365 {
            return Err(Error::InsufficientRecord("climatology needs at least two years".into()));
        }
        let slots: Vec<usize> = dates.iter().map(|&d| doy_slot(d)).collect();
        let mut by_slot: Vec<Vec<usize>> = vec![Vec::new(); DOY_SLOTS];
        for (i, &s) in slots.iter().enumerate() {
            by_slot[s].push(i);
        }
        let per_point: Vec<(Vec<[f64; N_QUANTILES]>, Vec<f64>)> = series
            .par_iter()
            .map(|s| {
                let mut q = Vec::with_capacity(DOY_SLOTS);
                let mut m = Vec::with_capacity(DOY_SLOTS);
                for slot in 0..DOY_SLOTS {
                    let mut pool: Vec<f64> = window_slots(slot)
                        .flat_map(|w| by_slot[w].iter().map(|&i| s[i]))
                        .filter(|v| v.is_finite())
                        .collect();
                    if pool.is_empty() {
                        q.push([f64::NAN; N_QUANTILES]);
                        m.push(f64::NAN);
                        continue;
                    }
                    pool.sort_by(f64::total_cmp);
                    let mut row = [0.0; N_QUANTILES];
                    for (k, r) in row.iter_mut().enumerate() {
                        *r = quantile_sorted(&pool, k as f64 / 10.0);
                    }
                    q.push(row);
                    m.push(pool.iter().sum::<f64>() / pool.len() as f64);
                }
                (q, m)
            })
            .collect();
        let (quantiles, means) = per_point.into_iter().unzip();
        Ok(Self {
            point_ids: point_ids.to_vec(),
            quantiles,
            means,
        })
    }

    /// Forecast for issuance `date`: lead `l` gets the statistic at `date + l`. `[L][P]`.
    pub fn forecast(&self, date: NaiveDate, leads: usize, stat: ClimatologyStat) -> Vec<Vec<f64>> {
        (1..=leads)
            .map(|l| {
                let slot = doy_slot(date + chrono::Days::new(l as u64));
                (0..self.point_ids.len())
                    .map(|p| match stat {
                        ClimatologyStat::Median => self.quantiles[p][slot][5],
                        ClimatologyStat::Mean => self.means[p][slot],
                    })
                    .collect()
            })
            .collect()
    }

    /// `(point_id, doy, q0..q100)` with 1-based `doy`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["point_id".to_string(), "doy".to_string()];
        header.extend((0..N_QUANTILES).map(|k| format!("q{}", 10 * k)));
        out.write_record(&header)?;
        for (p, id) in self.point_ids.iter().enumerate() {
            for slot in 0..DOY_SLOTS {
                let mut rec = vec![id.to_string(), (slot + 1).to_string()];
                rec.extend(self.quantiles[p][slot].iter().map(|v| v.to_string()));
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads quantiles back; means are not stored and come back as the median.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut point_ids: Vec<u64> = Vec::new();
        let mut quantiles: Vec<Vec<[f64; N_QUANTILES]>> = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != 2 + N_QUANTILES {
                return Err(Error::Format("climatology row has the wrong width".into()));
            }
            let id: u64 = rec[0].parse().map_err(|e| Error::Format(format!("point id: {e}")))?;
            if point_ids.last() != Some(&id) {
                point_ids.push(id);
                quantiles.push(Vec::with_capacity(DOY_SLOTS));
            }
            let mut row = [0.0; N_QUANTILES];
            for (k, v) in row.iter_mut().enumerate() {
                *v = rec[2 + k].parse().map_err(|e| Error::Format(format!("quantile: {e}")))?;
            }
            quantiles.last_mut().unwrap().push(row);
        }
        if quantiles.iter().any(|q| q.len() != DOY_SLOTS) {
            return Err(Error::Format("climatology table needs 366 rows per point".into()));
        }
        let means = quantiles.iter().map(|q| q.iter().map(|r| r[5]).collect()).collect();
        Ok(Self {
            point_ids,
            quantiles,
            means,
        })
    }
}
