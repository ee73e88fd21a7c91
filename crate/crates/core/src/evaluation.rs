//! Forecast generation over issuance dates and per-point scoring.

use rayon::prelude::*;

use crate::baselines::{persistence_forecast, ClimatologyStat, ClimatologyTable};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hydrology::{classify_events, FloodThresholds, RETURN_PERIODS};
use crate::metrics::{continuous_metrics, event_metrics, MetricReport, PointLeadReport};
use crate::model::{reconstruct_discharge, Model, ModelOrders};
use crate::tensor::Tensor;
use crate::training::Prepared;

/// Discharge forecasts `[L, P]` per issuance day.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecasts {
    pub days: Vec<usize>,
    pub values: Vec<Tensor>,
}

impl Forecasts {
    pub fn leads(&self) -> usize {
        self.values.first().map_or(0, |v| v.shape()[0])
    }
}

fn from_rows(rows: Vec<Vec<f64>>, p: usize) -> Result<Tensor> {
    let l = rows.len();
    Tensor::new(vec![l, p], rows.into_iter().flatten().collect())
}

/// Trained-model forecasts, reconstructed from the predicted deltas.
pub fn model_forecasts(model: &Model, prep: &Prepared, days: &[usize], orders: &ModelOrders) -> Result<Forecasts> {
    let values = days
        .par_iter()
        .map(|&d| {
            let sample = prep.data.sample(d)?;
            let y = model.predict(&prep.inputs(&sample), orders)?;
            reconstruct_discharge(&y, &sample.x_prev)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Forecasts {
        days: days.to_vec(),
        values,
    })
}

pub fn persistence_forecasts(data: &Dataset, days: &[usize]) -> Result<Forecasts> {
    let (p, l) = (data.n_points(), data.spec().lead_times);
    let values = days
        .iter()
        .map(|&d| {
            let prev = data
                .sim
                .discharge
                .get((d.checked_sub(1).ok_or_else(|| Error::Invalid("issuance day 0".into()))?) * p..d * p)
                .ok_or_else(|| Error::Invalid(format!("issuance day {d} outside the record")))?;
            from_rows(persistence_forecast(prev, l), p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Forecasts {
        days: days.to_vec(),
        values,
    })
}

pub fn climatology_forecasts(
    data: &Dataset,
    table: &ClimatologyTable,
    days: &[usize],
    stat: ClimatologyStat,
) -> Result<Forecasts> {
    let ids: Vec<u64> = data.points.points().iter().map(|p| p.id).collect();
    if table.point_ids != ids {
        return Err(Error::Invalid("climatology table lists different points".into()));
    }
    let (p, l) = (data.n_points(), data.spec().lead_times);
    let values = days
        .iter()
        .map(|&d| from_rows(table.forecast(data.sim.date(d), l, stat), p))
        .collect::<Result<Vec<_>>>()?;
    Ok(Forecasts {
        days: days.to_vec(),
        values,
    })
}

type Record = (Vec<u64>, Vec<chrono::NaiveDate>, Vec<Vec<f64>>);

fn record_before(data: &Dataset, end_day: usize) -> Record {
    let ids = data.points.points().iter().map(|p| p.id).collect();
    let end = end_day.min(data.sim.days);
    let dates = (0..end).map(|d| data.sim.date(d)).collect();
    let series = data
        .sim
        .discharge_by_point()
        .into_iter()
        .map(|mut s| {
            s.truncate(end);
            s
        })
        .collect();
    (ids, dates, series)
}

/// Builds the climatology from the discharge record before `end_day`.
pub fn climatology_table(data: &Dataset, end_day: usize) -> Result<ClimatologyTable> {
    let (ids, dates, series) = record_before(data, end_day);
    ClimatologyTable::build(&ids, &dates, &series)
}

/// The observed targets themselves.
pub fn observed(data: &Dataset, days: &[usize]) -> Result<Forecasts> {
    let values = days
        .iter()
        .map(|&d| Ok(data.sample(d)?.target))
        .collect::<Result<Vec<_>>>()?;
    Ok(Forecasts {
        days: days.to_vec(),
        values,
    })
}

/// Fits thresholds on the discharge record before `end_day`.
pub fn fit_thresholds(data: &Dataset, end_day: usize) -> Result<FloodThresholds> {
    let (ids, dates, series) = record_before(data, end_day);
    FloodThresholds::fit(&ids, &dates, &series)
}

/// Scores `pred` against `obs` per point and lead, with events at every tabulated return period.
pub fn evaluate(obs: &Forecasts, pred: &Forecasts, point_ids: &[u64], thresholds: &FloodThresholds) -> Result<MetricReport> {
    if obs.days != pred.days || obs.days.is_empty() {
        return Err(Error::Shape("observations and forecasts must cover the same non-empty days".into()));
    }
    let (l_n, p_n) = (obs.leads(), point_ids.len());
    if pred.leads() != l_n || thresholds.points.len() != p_n {
        return Err(Error::Shape("forecast leads or threshold table do not match".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..p_n).flat_map(|p| (0..l_n).map(move |l| (p, l))).collect();
    let entries = pairs
        .par_iter()
        .map(|&(p, l)| {
            let o: Vec<f64> = obs.values.iter().map(|t| t.get(&[l, p])).collect();
            let f: Vec<f64> = pred.values.iter().map(|t| t.get(&[l, p])).collect();
            let events = RETURN_PERIODS
                .iter()
                .zip(&thresholds.points[p].theta)
                .map(|(&rp, &th)| Ok((rp, event_metrics(&classify_events(&o, th), &classify_events(&f, th))?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(PointLeadReport {
                point_id: point_ids[p],
                lead: l + 1,
                continuous: continuous_metrics(&o, &f)?,
                events,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { entries })
}
