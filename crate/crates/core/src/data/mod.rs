//! Synthetic river-network data, sample assembly and the dataset container.
//!
//! Container layout (little endian):
//!
//! ```text
//! b"RSDS" | u32 version | u32 len + TOML metadata | u32 len + PointSet CSV
//! | u32 count | count x named tensor (ParamStore payload encoding)
//! ```
//!
//! The named tensors are the daily simulation arrays; samples are cut from
//! them on demand by [`Dataset::sample`].

pub mod network;
pub mod simulate;

use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub use network::{default_grid, generate_network, SyntheticNetwork, N_STATIC};
pub use simulate::{
    hres_sigma, route, simulate, Simulation, CPC_VARS, ERA5_VARS, GLOFAS_VARS, HRES_VARS, MIN_DAYS,
};

use crate::error::{Error, Result};
use crate::geometry::PointSet;
use crate::nn::params::{read_named_tensor, read_u32, truncated, write_named_tensor};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"RSDS";
pub const DATASET_VERSION: u32 = 1;

/// Temporal layout of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSpec {
    pub hindcast_steps: usize,
    pub lead_times: usize,
    pub era5_shift: usize,
    pub glofas_shift: usize,
    pub cpc_shift: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            hindcast_steps: 4,
            lead_times: 7,
            era5_shift: 1,
            glofas_shift: 1,
            cpc_shift: 2,
        }
    }
}

impl SampleSpec {
    fn max_shift(&self) -> usize {
        self.era5_shift.max(self.glofas_shift).max(self.cpc_shift)
    }

    /// Days `[first, last]` of a window ending `shift + 1` days before issuance `t`.
    pub fn input_days(&self, t: usize, shift: usize) -> Option<(usize, usize)> {
        let first = t.checked_sub(self.hindcast_steps + shift)?;
        Some((first, t - shift - 1))
    }

    /// Issuance days with a full input window and a full target window.
    pub fn valid_issuances(&self, days: usize) -> std::ops::Range<usize> {
        let first = (self.hindcast_steps + self.max_shift()).max(1);
        let end = days.saturating_sub(self.lead_times);
        first..end.max(first)
    }
}

/// Everything needed to regenerate or interpret a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub seed: u64,
    pub grid_width: usize,
    pub grid_height: usize,
    pub spec: SampleSpec,
}

/// One issuance: inputs up to the day before, targets after.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSample {
    pub issuance: NaiveDate,
    pub day: usize,
    /// `[T, P, ERA5_VARS]`
    pub era5: Tensor,
    /// `[T, P, GLOFAS_VARS]`
    pub glofas: Tensor,
    /// `[T, P, 1]`
    pub cpc: Tensor,
    /// `[L, P, HRES_VARS]`
    pub hres: Tensor,
    /// `[P, V_s]`
    pub static_attrs: Tensor,
    /// `[L, P]` in m³/s.
    pub target: Tensor,
    /// `[P]` discharge on the day before issuance.
    pub x_prev: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub points: PointSet,
    pub sim: Simulation,
}

/// Chronologically ordered, disjoint issuance-day lists.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn window(values: &[f64], n_points: usize, vars: usize, first: usize, last: usize) -> Vec<f64> {
    values[first * n_points * vars..(last + 1) * n_points * vars].to_vec()
}

/// Generates a network of `n_points` on a grid with room to spare and simulates it.
pub fn generate_dataset(seed: u64, n_points: usize, days: usize, spec: SampleSpec) -> Result<Dataset> {
    let side = ((n_points as f64 * 1.6).sqrt().ceil() as usize).max(1);
    let net = generate_network(seed, side, side, n_points)?;
    let start = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
    let sim = simulate(&net, start, days, seed.wrapping_add(1))?;
    Ok(Dataset {
        meta: DatasetMeta {
            seed,
            grid_width: side,
            grid_height: side,
            spec,
        },
        points: net.point_set()?,
        sim,
    })
}

impl Dataset {
    pub fn spec(&self) -> SampleSpec {
        self.meta.spec
    }

    pub fn n_points(&self) -> usize {
        self.sim.n_points
    }

    pub fn issuance_days(&self) -> Vec<usize> {
        self.spec().valid_issuances(self.sim.days).collect()
    }

    pub fn static_tensor(&self) -> Tensor {
        let p = self.points.len();
        Tensor::new(vec![p, self.points.n_static()], self.points.static_matrix()).expect("static matrix shape")
    }

    /// Inputs only; the hres-like block and targets are left out.
    pub fn past_inputs(&self, t: usize) -> Result<(Tensor, Tensor, Tensor, Vec<f64>)> {
        let spec = self.spec();
        let (p, steps) = (self.n_points(), spec.hindcast_steps);
        let span = |shift| {
            spec.input_days(t, shift)
                .ok_or_else(|| Error::InsufficientRecord(format!("issuance day {t} lacks a full input window")))
        };
        let (e0, e1) = span(spec.era5_shift)?;
        let (g0, g1) = span(spec.glofas_shift)?;
        let (c0, c1) = span(spec.cpc_shift)?;
        if t == 0 || t > self.sim.days {
            return Err(Error::InsufficientRecord(format!("issuance day {t} outside the record")));
        }
        Ok((
            Tensor::new(vec![steps, p, ERA5_VARS], window(&self.sim.era5, p, ERA5_VARS, e0, e1))?,
            Tensor::new(vec![steps, p, GLOFAS_VARS], window(&self.sim.glofas, p, GLOFAS_VARS, g0, g1))?,
            Tensor::new(vec![steps, p, CPC_VARS], window(&self.sim.cpc, p, CPC_VARS, c0, c1))?,
            self.sim.discharge_at(t - 1).to_vec(),
        ))
    }

    /// Assembles the sample issued on day `t`.
    pub fn sample(&self, t: usize) -> Result<ForecastSample> {
        let spec = self.spec();
        let (p, leads) = (self.n_points(), spec.lead_times);
        if t + leads >= self.sim.days {
            return Err(Error::InsufficientRecord(format!("issuance day {t} lacks {leads} target days")));
        }
        let (era5, glofas, cpc, x_prev) = self.past_inputs(t)?;
        let mut hres = Vec::with_capacity(leads * p * HRES_VARS);
        let mut target = Vec::with_capacity(leads * p);
        for l in 1..=leads {
            hres.extend(self.sim.hres_forecast(t, l));
            target.extend_from_slice(self.sim.discharge_at(t + l));
        }
        Ok(ForecastSample {
            issuance: self.sim.date(t),
            day: t,
            era5,
            glofas,
            cpc,
            hres: Tensor::new(vec![leads, p, HRES_VARS], hres)?,
            static_attrs: self.static_tensor(),
            target: Tensor::new(vec![leads, p], target)?,
            x_prev,
        })
    }

    /// Splits issuance days by fraction, dropping `T + L + shift` days at each
    /// boundary so no target of one split is an input of the next.
    pub fn split(&self, train_frac: f64, val_frac: f64) -> Result<Splits> {
        if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0) {
            return Err(Error::Config("split fractions must be positive and sum below 1".into()));
        }
        let days = self.issuance_days();
        let n = days.len();
        let a = (n as f64 * train_frac).round() as usize;
        let b = (n as f64 * (train_frac + val_frac)).round() as usize;
        self.split_at(&days, a, b)
    }

    /// Splits at the first issuance on or after each date.
    pub fn split_by_dates(&self, val_start: NaiveDate, test_start: NaiveDate) -> Result<Splits> {
        if val_start >= test_start {
            return Err(Error::Config("validation must start before test".into()));
        }
        let days = self.issuance_days();
        let a = days.partition_point(|&d| self.sim.date(d) < val_start);
        let b = days.partition_point(|&d| self.sim.date(d) < test_start);
        self.split_at(&days, a, b)
    }

    fn split_at(&self, days: &[usize], a: usize, b: usize) -> Result<Splits> {
        let spec = self.spec();
        let gap = spec.hindcast_steps + spec.lead_times + spec.max_shift();
        let train = days[..a].to_vec();
        let val: Vec<usize> = days[a..b].iter().copied().skip(gap).collect();
        let test: Vec<usize> = days[b..].iter().copied().skip(gap).collect();
        if train.is_empty() || test.is_empty() {
            return Err(Error::InsufficientRecord("record too short for a train/val/test split".into()));
        }
        Ok(Splits { train, val, test })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let meta = toml::to_string(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut csv = Vec::new();
        self.points.write_csv(&mut csv)?;
        let sim_meta = toml::to_string(&SimHeader::from(&self.sim)).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        for blob in [meta.as_bytes(), sim_meta.as_bytes(), &csv] {
            w.write_all(&(blob.len() as u32).to_le_bytes())?;
            w.write_all(blob)?;
        }
        let (d, p) = (self.sim.days, self.sim.n_points);
        let arrays: [(&str, &Vec<f64>, usize); 6] = [
            ("precip", &self.sim.precip, 1),
            ("discharge", &self.sim.discharge, 1),
            ("hres_truth", &self.sim.hres_truth, HRES_VARS),
            ("era5", &self.sim.era5, ERA5_VARS),
            ("glofas", &self.sim.glofas, GLOFAS_VARS),
            ("cpc", &self.sim.cpc, CPC_VARS),
        ];
        w.write_all(&(arrays.len() as u32).to_le_bytes())?;
        for (name, values, vars) in arrays {
            write_named_tensor(&mut w, name, &Tensor::new(vec![d, p, vars], values.clone())?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let mut blob = || -> Result<Vec<u8>> {
            let mut b = vec![0u8; read_u32(&mut r)? as usize];
            r.read_exact(&mut b).map_err(truncated)?;
            Ok(b)
        };
        let text = |b: Vec<u8>| String::from_utf8(b).map_err(|e| Error::Format(e.to_string()));
        let meta: DatasetMeta = toml::from_str(&text(blob()?)?).map_err(|e| Error::Format(e.to_string()))?;
        let header: SimHeader = toml::from_str(&text(blob()?)?).map_err(|e| Error::Format(e.to_string()))?;
        let points = PointSet::read_csv(blob()?.as_slice(), meta.grid_width, meta.grid_height)?;
        if points.len() != header.n_points {
            return Err(Error::Format("point table and simulation disagree".into()));
        }
        let count = read_u32(&mut r)?;
        let mut sim = Simulation {
            start: header.start,
            days: header.days,
            n_points: header.n_points,
            hres_seed: header.hres_seed,
            precip: Vec::new(),
            discharge: Vec::new(),
            hres_truth: Vec::new(),
            era5: Vec::new(),
            glofas: Vec::new(),
            cpc: Vec::new(),
        };
        for _ in 0..count {
            let (name, t) = read_named_tensor(&mut r)?;
            let vars = t.shape().get(2).copied().unwrap_or(0);
            if t.shape()[..2] != [header.days, header.n_points] {
                return Err(Error::Format(format!("array {name} has shape {:?}", t.shape())));
            }
            let (slot, want) = match name.as_str() {
                "precip" => (&mut sim.precip, 1),
                "discharge" => (&mut sim.discharge, 1),
                "hres_truth" => (&mut sim.hres_truth, HRES_VARS),
                "era5" => (&mut sim.era5, ERA5_VARS),
                "glofas" => (&mut sim.glofas, GLOFAS_VARS),
                "cpc" => (&mut sim.cpc, CPC_VARS),
                other => return Err(Error::Format(format!("unknown array {other}"))),
            };
            if vars != want {
                return Err(Error::Format(format!("array {name} has {vars} channels, expected {want}")));
            }
            *slot = t.into_data();
        }
        let n = header.days * header.n_points;
        if sim.precip.len() != n || sim.discharge.len() != n || sim.cpc.len() != n {
            return Err(Error::Format("dataset is missing arrays".into()));
        }
        Ok(Self { meta, points, sim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimHeader {
    start: NaiveDate,
    days: usize,
    n_points: usize,
    hres_seed: u64,
}

impl From<&Simulation> for SimHeader {
    fn from(s: &Simulation) -> Self {
        Self {
            start: s.start,
            days: s.days,
            n_points: s.n_points,
            hres_seed: s.hres_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        generate_dataset(11, 30, 420, SampleSpec::default()).unwrap()
    }

    fn bytes(d: &Dataset) -> Vec<u8> {
        let mut b = Vec::new();
        d.write(&mut b).unwrap();
        b
    }

    #[test]
    fn input_windows_for_day_twenty() {
        let spec = SampleSpec::default();
        assert_eq!(spec.input_days(20, spec.era5_shift), Some((15, 18)));
        assert_eq!(spec.input_days(20, spec.glofas_shift), Some((15, 18)));
        assert_eq!(spec.input_days(20, spec.cpc_shift), Some((14, 17)));
        assert_eq!(spec.input_days(5, 2), None);
        assert_eq!(spec.valid_issuances(420), 6..413);
    }

    #[test]
    fn sample_contents_follow_the_windows() {
        let d = small();
        let s = d.sample(20).unwrap();
        let p = d.n_points();
        assert_eq!(s.era5.shape(), &[4, p, ERA5_VARS]);
        assert_eq!(s.hres.shape(), &[7, p, HRES_VARS]);
        for q in 0..p {
            assert_eq!(s.x_prev[q].to_bits(), d.sim.discharge[19 * p + q].to_bits());
            for l in 0..7 {
                assert_eq!(s.target.get(&[l, q]), d.sim.discharge[(21 + l) * p + q]);
            }
            let g = s.glofas.get(&[3, q, 0]);
            let want = d.sim.glofas[(18 * p + q) * GLOFAS_VARS];
            assert_eq!(g.to_bits(), want.to_bits());
            assert_eq!(s.cpc.get(&[0, q, 0]).to_bits(), d.sim.cpc[14 * p + q].to_bits());
        }
        assert!(d.sample(5).is_err());
        assert!(d.sample(413).is_err());
        assert!(d.sample(412).is_ok());
    }

    #[test]
    fn mutating_the_future_leaves_inputs_unchanged() {
        let d = small();
        let p = d.n_points();
        for t in [6usize, 50, 200, 412] {
            let before = d.past_inputs(t).unwrap();
            let mut m = d.clone();
            let noise = |v: &mut Vec<f64>, vars: usize| {
                for (i, x) in v.iter_mut().enumerate().skip(t * p * vars) {
                    *x = (i as f64).sin() * 1e3;
                }
            };
            noise(&mut m.sim.precip, 1);
            noise(&mut m.sim.discharge, 1);
            noise(&mut m.sim.hres_truth, HRES_VARS);
            noise(&mut m.sim.era5, ERA5_VARS);
            noise(&mut m.sim.glofas, GLOFAS_VARS);
            noise(&mut m.sim.cpc, CPC_VARS);
            m.sim.hres_seed ^= 0xFFFF;
            let after = m.past_inputs(t).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&before.0), bits(&after.0));
            assert_eq!(bits(&before.1), bits(&after.1));
            assert_eq!(bits(&before.2), bits(&after.2));
            assert_eq!(before.3, after.3);
        }
    }

    #[test]
    fn splits_are_ordered_and_disjoint() {
        let d = small();
        let s = d.split(0.7, 0.15).unwrap();
        assert!(s.train.last().unwrap() < s.val.first().unwrap());
        assert!(s.val.last().unwrap() < s.test.first().unwrap());
        let gap = 4 + 7 + 2;
        assert!(s.val[0] - s.train.last().unwrap() > gap);
        assert!(d.split(0.9, 0.2).is_err());
        let by_date = d
            .split_by_dates(
                NaiveDate::from_ymd_opt(2000, 10, 1).unwrap(),
                NaiveDate::from_ymd_opt(2000, 12, 1).unwrap(),
            )
            .unwrap();
        assert!(d.sim.date(*by_date.train.last().unwrap()) < NaiveDate::from_ymd_opt(2000, 10, 1).unwrap());
        assert!(d.sim.date(by_date.test[0]) >= NaiveDate::from_ymd_opt(2000, 12, 1).unwrap());
    }

    #[test]
    fn container_roundtrips() {
        let d = small();
        let b = bytes(&d);
        let back = Dataset::read(b.as_slice()).unwrap();
        assert_eq!(bytes(&back), b);
        assert_eq!(back.meta, d.meta);
        for t in (6..106).step_by(1) {
            let (x, y) = (d.sample(t).unwrap(), back.sample(t).unwrap());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.era5), bits(&y.era5));
            assert_eq!(bits(&x.hres), bits(&y.hres));
            assert_eq!(bits(&x.target), bits(&y.target));
        }
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let mut d = small();
        d.sim.days = 0;
        for v in [
            &mut d.sim.precip,
            &mut d.sim.discharge,
            &mut d.sim.hres_truth,
            &mut d.sim.era5,
            &mut d.sim.glofas,
            &mut d.sim.cpc,
        ] {
            v.clear();
        }
        let b = bytes(&d);
        let back = Dataset::read(b.as_slice()).unwrap();
        assert!(back.issuance_days().is_empty());
        assert_eq!(bytes(&back), b);
    }

    #[test]
    fn corrupt_files_fail_cleanly() {
        let mut b = bytes(&small());
        assert!(matches!(Dataset::read(&b[..b.len() / 2]), Err(Error::Format(_))));
        b[4] = 9;
        assert!(matches!(Dataset::read(b.as_slice()), Err(Error::Version { found: 9, .. })));
        b[0] = b'X';
        assert!(matches!(Dataset::read(b.as_slice()), Err(Error::Format(_))));
    }
}
