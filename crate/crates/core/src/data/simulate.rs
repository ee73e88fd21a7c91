use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Geometric, Pareto, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::network::SyntheticNetwork;
use crate::error::{Error, Result};

pub const ERA5_VARS: usize = 6;
pub const GLOFAS_VARS: usize = 3;
pub const CPC_VARS: usize = 1;
pub const HRES_VARS: usize = 3;
pub const MIN_DAYS: usize = 400;
/// Days simulated and discarded so storages start near equilibrium.
pub const SPIN_UP_DAYS: usize = 365;
/// Probability that a single input value is reported missing.
pub const MISSING_RATE: f64 = 0.002;

/// Forecast-noise scale of the hres-like channels at lead `l` (1-based).
pub fn hres_sigma(lead: usize) -> f64 {
    0.15 + 0.1 * lead.saturating_sub(1) as f64
}

/// Routes local runoff through the network. Each point is a linear reservoir
/// releasing `k` of its storage per day; releases reach the downstream point
/// the next day. Inputs and outputs are `[D * P]`, day-major.
pub fn route(net: &SyntheticNetwork, runoff: &[f64], initial_storage: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = net.len();
    if p == 0 || !runoff.len().is_multiple_of(p) || initial_storage.len() != p {
        return Err(Error::Shape("runoff must be [D * P] and storage [P]".into()));
    }
    let days = runoff.len() / p;
    let mut storage = vec![0.0; days * p];
    let mut discharge = vec![0.0; days * p];
    let mut prev_s = initial_storage.to_vec();
    let mut inflow = vec![0.0; p];
    for d in 0..days {
        for q in 0..p {
            let water = prev_s[q] + runoff[d * p + q] + inflow[q];
            let out = net.reservoir_k[q] * water;
            discharge[d * p + q] = out;
            storage[d * p + q] = water - out;
        }
        inflow.iter_mut().for_each(|v| *v = 0.0);
        for q in 0..p {
            if let Some(down) = net.downstream[q] {
                inflow[down] += discharge[d * p + q];
            }
        }
        prev_s.copy_from_slice(&storage[d * p..(d + 1) * p]);
    }
    Ok((storage, discharge))
}

/// Daily forcing and state arrays; every array is day-major `[D, P, V]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub start: NaiveDate,
    pub days: usize,
    pub n_points: usize,
    /// Seed of the lead-dependent hres-like noise.
    pub hres_seed: u64,
    pub precip: Vec<f64>,
    pub discharge: Vec<f64>,
    /// True precipitation, temperature and humidity, the basis of hres-like forecasts.
    pub hres_truth: Vec<f64>,
    pub era5: Vec<f64>,
    pub glofas: Vec<f64>,
    pub cpc: Vec<f64>,
}

impl Simulation {
    pub fn date(&self, day: usize) -> NaiveDate {
        self.start + chrono::Days::new(day as u64)
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        (0..self.days).map(|d| self.date(d)).collect()
    }

    pub fn discharge_at(&self, day: usize) -> &[f64] {
        &self.discharge[day * self.n_points..(day + 1) * self.n_points]
    }

    /// Discharge series per point, `[P][D]`.
    pub fn discharge_by_point(&self) -> Vec<Vec<f64>> {
        (0..self.n_points)
            .map(|p| (0..self.days).map(|d| self.discharge[d * self.n_points + p]).collect())
            .collect()
    }

    /// Hres-like forecast issued on `issue` for `issue + lead`, `[P, HRES_VARS]`.
    pub fn hres_forecast(&self, issue: usize, lead: usize) -> Vec<f64> {
        let target = issue + lead;
        let p = self.n_points;
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.hres_seed ^ (issue as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (lead as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F),
        );
        let s = hres_sigma(lead);
        let truth = &self.hres_truth[target * p * HRES_VARS..(target + 1) * p * HRES_VARS];
        let mut out = Vec::with_capacity(p * HRES_VARS);
        for q in 0..p {
            let e: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let t = &truth[q * HRES_VARS..(q + 1) * HRES_VARS];
            out.push(t[0] * (s * e[0] - 0.5 * s * s).exp());
            out.push(t[1] + 2.0 * s * e[1]);
            out.push(t[2] + 0.2 * s * e[2]);
        }
        out
    }
}

fn seasonal(date: NaiveDate, phase_day: f64) -> f64 {
    (2.0 * std::f64::consts::PI * (date.ordinal0() as f64 - phase_day) / 365.25).sin()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn maybe_missing(rng: &mut ChaCha8Rng, v: f64) -> f64 {
    if rng.random::<f64>() < MISSING_RATE {
        f64::NAN
    } else {
        v
    }
}

/// Rain cell drifting across the grid.
struct Storm {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    radius: f64,
    intensity: f64,
    days_left: usize,
}

/// Generates `days` of daily data starting on `start`.
pub fn simulate(net: &SyntheticNetwork, start: NaiveDate, days: usize, seed: u64) -> Result<Simulation> {
    if days < MIN_DAYS {
        return Err(Error::InsufficientRecord(format!("simulation needs at least {MIN_DAYS} days")));
    }
    let p = net.len();
    let total = days + SPIN_UP_DAYS;
    let first = start - chrono::Days::new(SPIN_UP_DAYS as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (net.grid.width as f64, net.grid.height as f64);

    let mut precip = vec![0.0; total * p];
    let mut temperature = vec![0.0; total * p];
    let mut humidity = vec![0.0; total * p];
    let mut regional_temp = 0.0;
    let mut regional = 0.0;
    let mut storms: Vec<Storm> = Vec::new();
    for d in 0..total {
        let date = first + chrono::Days::new(d as u64);
        let wet = 1.0 + 0.6 * seasonal(date, 250.0);
        let innovation: f64 = Exp1.sample(&mut rng);
        regional = 0.7 * regional + 0.3 * innovation;
        for s in &mut storms {
            s.x += s.vx;
            s.y += s.vy;
            s.intensity *= rng.random_range(0.6..1.15);
            s.days_left -= 1;
        }
        storms.retain(|s| s.days_left > 0);
        let n_new = Poisson::new(0.2 + 0.15 * wet).unwrap().sample(&mut rng) as usize;
        for _ in 0..n_new {
            storms.push(Storm {
                x: rng.random_range(-0.2 * w..w),
                y: rng.random_range(0.0..h),
                vx: 0.04 * w + 0.5 * normal(&mut rng),
                vy: 0.5 * normal(&mut rng),
                radius: rng.random_range(1.5..(w.max(h) / 3.0).max(2.0)),
                intensity: 10.0 * Pareto::new(1.0, 2.5).unwrap().sample(&mut rng),
                days_left: 1 + Geometric::new(0.3).unwrap().sample(&mut rng) as usize,
            });
        }
        regional_temp = 0.8 * regional_temp + 0.6 * normal(&mut rng);
        let temp_base = 10.0 + 8.0 * seasonal(date, 110.0) + 2.0 * regional_temp;
        for q in 0..p {
            let (x, y) = (net.cells[q].0 as f64 + 0.5, net.cells[q].1 as f64 + 0.5);
            let local: f64 = Exp1.sample(&mut rng);
            let mut v = 0.8 * wet * (0.8 * regional + 0.2 * local);
            for s in &storms {
                let d2 = (x - s.x).powi(2) + (y - s.y).powi(2);
                v += s.intensity * (-d2 / (2.0 * s.radius * s.radius)).exp();
            }
            v *= net.precip_scale[q];
            precip[d * p + q] = v;
            temperature[d * p + q] = temp_base - net.elevation[q] / 150.0 + 0.5 * normal(&mut rng);
            humidity[d * p + q] = (0.6 + 0.3 * (v / 5.0).tanh() + 0.05 * normal(&mut rng)).clamp(0.0, 1.0);
        }
    }

    let runoff: Vec<f64> = precip
        .iter()
        .enumerate()
        .map(|(i, v)| net.runoff_coeff[i % p] * v)
        .collect();
    let (storage, discharge) = route(net, &runoff, &vec![0.0; p])?;

    let mut inflow = vec![0.0; total * p];
    for d in 1..total {
        for q in 0..p {
            if let Some(down) = net.downstream[q] {
                inflow[d * p + down] += discharge[(d - 1) * p + q];
            }
        }
    }
    let skip = SPIN_UP_DAYS * p;
    let mut era5 = Vec::with_capacity(days * p * ERA5_VARS);
    let mut glofas = Vec::with_capacity(days * p * GLOFAS_VARS);
    let mut cpc = Vec::with_capacity(days * p);
    let mut hres_truth = Vec::with_capacity(days * p * HRES_VARS);
    let mut weekly = vec![0.0; p];
    for d in 0..total {
        for q in 0..p {
            let i = d * p + q;
            weekly[q] = weekly[q] * 6.0 / 7.0 + precip[i] / 7.0;
            if i < skip {
                continue;
            }
            let views = [
                precip[i] * (0.3 * normal(&mut rng) - 0.045).exp(),
                temperature[i] + normal(&mut rng),
                humidity[i] + 0.05 * normal(&mut rng),
                (storage[i] * (1.0 + 0.05 * normal(&mut rng))).max(0.0).ln_1p(),
                runoff[i] * (0.2 * normal(&mut rng) - 0.02).exp(),
                weekly[q] * (1.0 + 0.1 * normal(&mut rng)),
            ];
            for v in views {
                era5.push(maybe_missing(&mut rng, v));
            }
            let q_obs = (discharge[i] * (1.0 + 0.03 * normal(&mut rng))).max(0.0);
            for v in [q_obs, q_obs.ln_1p(), inflow[i].ln_1p()] {
                glofas.push(maybe_missing(&mut rng, v));
            }
            let gauge = precip[i] * (0.2 * normal(&mut rng) - 0.02).exp();
            cpc.push(maybe_missing(&mut rng, gauge));
            hres_truth.extend([precip[i], temperature[i], humidity[i]]);
        }
    }

    Ok(Simulation {
        start,
        days,
        n_points: p,
        hres_seed: rng.random(),
        precip: precip[skip..].to_vec(),
        discharge: discharge[skip..].to_vec(),
        hres_truth,
        era5,
        glofas,
        cpc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::network::generate_network;

    fn chain(k: f64, n: usize) -> SyntheticNetwork {
        let mut net = generate_network(0, n, 1, 1).unwrap();
        net.cells = (0..n).map(|x| (x, 0)).collect();
        net.elevation = (0..n).map(|x| x as f64).collect();
        net.downstream = (0..n).map(|x| x.checked_sub(1)).collect();
        net.reservoir_k = vec![k; n];
        net.runoff_coeff = vec![1.0; n];
        net.precip_scale = vec![1.0; n];
        net.drainage_area = (0..n).map(|x| (n - x) as f64).collect();
        net
    }

    #[test]
    fn no_rain_decays_geometrically() {
        let net = chain(0.4, 3);
        let (_, q) = route(&net, &vec![0.0; 60 * 3], &[10.0, 0.0, 0.0]).unwrap();
        for d in 1..60 {
            assert!(q[d * 3] <= q[(d - 1) * 3] + 1e-12);
        }
        assert!((q[0] - 4.0).abs() < 1e-12 && (q[3] - 2.4).abs() < 1e-12);
        assert!(q[59 * 3..].iter().all(|v| *v < 1e-10));
    }

    #[test]
    fn impulse_peaks_after_hop_count() {
        let n = 4;
        let net = chain(0.95, n);
        let days = 20;
        let mut runoff = vec![0.0; days * n];
        runoff[n - 1] = 100.0;
        let (_, q) = route(&net, &runoff, &vec![0.0; n]).unwrap();
        for target in 0..n {
            let hops = n - 1 - target;
            let series: Vec<f64> = (0..days).map(|d| q[d * n + target]).collect();
            let peak = (0..days).max_by(|&a, &b| series[a].total_cmp(&series[b])).unwrap();
            assert_eq!(peak, hops);
            assert!(series[..hops].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn mass_balance_at_roots() {
        let net = generate_network(9, 8, 8, 40).unwrap();
        let p = net.len();
        let days = 400;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let runoff: Vec<f64> = (0..days * p).map(|_| rng.random_range(0.0..5.0)).collect();
        let (storage, q) = route(&net, &runoff, &vec![0.0; p]).unwrap();
        let injected: f64 = runoff.iter().sum();
        let out: f64 = (0..days)
            .flat_map(|d| (0..p).map(move |x| (d, x)))
            .filter(|&(_, x)| net.downstream[x].is_none())
            .map(|(d, x)| q[d * p + x])
            .sum();
        let stored: f64 = storage[(days - 1) * p..].iter().sum();
        let in_transit: f64 = (0..p)
            .filter(|&x| net.downstream[x].is_some())
            .map(|x| q[(days - 1) * p + x])
            .sum();
        assert!((injected - out - stored - in_transit).abs() < 1e-8 * injected);
    }

    #[test]
    fn routing_is_linear() {
        let net = generate_network(2, 6, 6, 20).unwrap();
        let p = net.len();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r: Vec<f64> = (0..50 * p).map(|_| rng.random_range(0.0..3.0)).collect();
        let r2: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        let (_, q) = route(&net, &r, &vec![0.0; p]).unwrap();
        let (_, q2) = route(&net, &r2, &vec![0.0; p]).unwrap();
        for (a, b) in q.iter().zip(&q2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn simulation_shapes_and_hres_noise() {
        let net = generate_network(1, 8, 8, 24).unwrap();
        let start = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
        assert!(simulate(&net, start, 399, 0).is_err());
        let sim = simulate(&net, start, 420, 5).unwrap();
        let p = net.len();
        assert_eq!(sim.discharge.len(), 420 * p);
        assert_eq!(sim.era5.len(), 420 * p * ERA5_VARS);
        assert!(sim.discharge.iter().all(|v| v.is_finite() && *v > 0.0));
        assert_eq!(sim.hres_forecast(10, 3), sim.hres_forecast(10, 3));

        let mut var = Vec::new();
        for lead in 1..=7 {
            let mut acc = 0.0;
            let mut n = 0.0;
            for issue in 0..400 {
                let f = sim.hres_forecast(issue, lead);
                let t = &sim.hres_truth[(issue + lead) * p * HRES_VARS..];
                for q in 0..p {
                    acc += (f[q * HRES_VARS + 1] - t[q * HRES_VARS + 1]).powi(2);
                    n += 1.0;
                }
            }
            var.push(acc / n);
        }
        assert!(var.windows(2).all(|w| w[1] >= w[0]), "{var:?}");
    }
}
