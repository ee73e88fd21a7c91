//! Continuous and event-based skill scores, per point and aggregated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Return periods averaged into the headline F1.
pub const F1_RETURN_PERIODS: [f64; 5] = [1.5, 2.0, 5.0, 10.0, 20.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when either series has zero variance.
    pub r: Option<f64>,
    /// Nash–Sutcliffe efficiency; `None` when the observations are constant.
    pub r2: Option<f64>,
    pub kge: Option<f64>,
}

/// Scores over pairs where both values are finite.
pub fn continuous_metrics(obs: &[f64], pred: &[f64]) -> Result<ContinuousMetrics> {
    if obs.len() != pred.len() {
        return Err(Error::Shape(format!("{} observations, {} predictions", obs.len(), pred.len())));
    }
    let (o, p): (Vec<f64>, Vec<f64>) = obs
        .iter()
        .zip(pred)
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .map(|(a, b)| (*a, *b))
        .unzip();
    let n = o.len();
    if n < 2 {
        return Err(Error::InsufficientRecord(format!("{n} valid pairs, need 2")));
    }
    let nf = n as f64;
    let mae = o.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / nf;
    let sse: f64 = o.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
    let rmse = (sse / nf).sqrt();
    let mo = o.iter().sum::<f64>() / nf;
    let mp = p.iter().sum::<f64>() / nf;
    let so: f64 = o.iter().map(|a| (a - mo) * (a - mo)).sum();
    let sp: f64 = p.iter().map(|b| (b - mp) * (b - mp)).sum();
    let cov: f64 = o.iter().zip(&p).map(|(a, b)| (a - mo) * (b - mp)).sum();
    let r = (so > 0.0 && sp > 0.0).then(|| (cov / (so * sp).sqrt()).clamp(-1.0, 1.0));
    let r2 = (so > 0.0).then(|| 1.0 - sse / so);
    let kge = match r {
        Some(r) if mo != 0.0 && mp != 0.0 => {
            let beta = mp / mo;
            let cv_o = (so / nf).sqrt() / mo;
            let cv_p = (sp / nf).sqrt() / mp;
            let gamma = cv_p / cv_o;
            Some(1.0 - ((r - 1.0).powi(2) + (beta - 1.0).powi(2) + (gamma - 1.0).powi(2)).sqrt())
        }
        _ => None,
    };
    Ok(ContinuousMetrics { mae, rmse, r, r2, kge })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn count(obs: &[bool], pred: &[bool]) -> Result<Self> {
        if obs.len() != pred.len() {
            return Err(Error::Shape("event series differ in length".into()));
        }
        let mut c = Confusion::default();
        for (&o, &p) in obs.iter().zip(pred) {
            match (o, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn metrics(self) -> EventMetrics {
        let tp = self.tp as f64;
        let precision = (self.tp + self.fp > 0).then(|| tp / (self.tp + self.fp) as f64);
        let recall = (self.tp + self.fn_ > 0).then(|| tp / (self.tp + self.fn_) as f64);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            // no predicted positives but actual ones exist: nothing was found
            (None, Some(r)) => Some(r),
            _ => None,
        };
        EventMetrics { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn event_metrics(obs: &[bool], pred: &[bool]) -> Result<EventMetrics> {
    Ok(Confusion::count(obs, pred)?.metrics())
}

/// Mean and median over the defined entries, with the exclusion count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
    pub excluded: usize,
}

pub fn summarize(values: &[Option<f64>]) -> Result<Summary> {
    let mut v: Vec<f64> = values.iter().flatten().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Err(Error::Invalid("no valid points to aggregate".into()));
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    Ok(Summary {
        mean: v.iter().sum::<f64>() / n as f64,
        median,
        count: n,
        excluded: values.len() - n,
    })
}

/// Metrics of one point at one lead time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointLeadReport {
    pub point_id: u64,
    /// 1-based lead time.
    pub lead: usize,
    pub continuous: ContinuousMetrics,
    /// `(return period, metrics)`.
    pub events: Vec<(f64, EventMetrics)>,
}

/// All per-point metrics of one forecaster.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub entries: Vec<PointLeadReport>,
}

/// Aggregated scores at one lead (or over all leads when `lead` is `None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub lead: Option<usize>,
    pub mae: Summary,
    pub rmse: Summary,
    pub r: Summary,
    pub r2: Summary,
    pub kge: Summary,
    /// F1 averaged over [`F1_RETURN_PERIODS`] per point, then over points.
    pub f1: Option<Summary>,
}

impl MetricReport {
    pub fn leads(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.entries.iter().map(|e| e.lead).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    fn select(&self, lead: Option<usize>) -> impl Iterator<Item = &PointLeadReport> {
        self.entries.iter().filter(move |e| lead.is_none_or(|l| e.lead == l))
    }

    /// Per-point F1 at `rp` for the selected leads.
    pub fn f1_values(&self, lead: Option<usize>, rp: f64) -> Vec<Option<f64>> {
        self.select(lead)
            .map(|e| e.events.iter().find(|(r, _)| *r == rp).and_then(|(_, m)| m.f1))
            .collect()
    }

    pub fn aggregate(&self, lead: Option<usize>) -> Result<AggregateRow> {
        let pick = |f: &dyn Fn(&ContinuousMetrics) -> Option<f64>| -> Vec<Option<f64>> {
            self.select(lead).map(|e| f(&e.continuous)).collect()
        };
        let f1: Vec<Option<f64>> = self
            .select(lead)
            .map(|e| {
                let v: Vec<f64> = e
                    .events
                    .iter()
                    .filter(|(r, _)| F1_RETURN_PERIODS.contains(r))
                    .filter_map(|(_, m)| m.f1)
                    .collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        Ok(AggregateRow {
            lead,
            mae: summarize(&pick(&|m| Some(m.mae)))?,
            rmse: summarize(&pick(&|m| Some(m.rmse)))?,
            r: summarize(&pick(&|m| m.r))?,
            r2: summarize(&pick(&|m| m.r2))?,
            kge: summarize(&pick(&|m| m.kge))?,
            f1: summarize(&f1).ok(),
        })
    }
}
