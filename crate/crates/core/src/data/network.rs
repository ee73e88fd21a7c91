use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GeoPoint, GridSpec, PointSet};

/// Static attributes per point.
pub const N_STATIC: usize = 8;

/// Tree-structured river network on a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticNetwork {
    pub grid: GridSpec,
    /// Cell `(x, y)` of each point.
    pub cells: Vec<(usize, usize)>,
    /// Meters above the outlet datum.
    pub elevation: Vec<f64>,
    pub downstream: Vec<Option<usize>>,
    /// Fraction of precipitation that becomes runoff.
    pub runoff_coeff: Vec<f64>,
    /// Fraction of reservoir storage released per day.
    pub reservoir_k: Vec<f64>,
    /// Multiplier of the regional precipitation.
    pub precip_scale: Vec<f64>,
    /// Number of points draining through each point, itself included.
    pub drainage_area: Vec<f64>,
}

impl SyntheticNetwork {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Hops from each point to its root.
    pub fn hops_to_outlet(&self) -> Vec<usize> {
        (0..self.len())
            .map(|mut p| {
                let mut h = 0;
                while let Some(d) = self.downstream[p] {
                    p = d;
                    h += 1;
                }
                h
            })
            .collect()
    }

    /// Points ordered so that every point precedes its downstream neighbor.
    pub fn upstream_first(&self) -> Vec<usize> {
        let hops = self.hops_to_outlet();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| hops[b].cmp(&hops[a]).then(a.cmp(&b)));
        order
    }

    /// `[P, N_STATIC]`: log drainage area, elevation (km), reservoir constant,
    /// runoff coefficient, precipitation scale, hops to outlet / 10, local
    /// slope (m per hop), log upstream neighbors + 1.
    pub fn static_attributes(&self) -> Vec<Vec<f64>> {
        let hops = self.hops_to_outlet();
        let mut n_up = vec![0usize; self.len()];
        for d in self.downstream.iter().flatten() {
            n_up[*d] += 1;
        }
        (0..self.len())
            .map(|p| {
                let slope = self.downstream[p].map_or(0.0, |d| self.elevation[p] - self.elevation[d]);
                vec![
                    self.drainage_area[p].ln_1p(),
                    self.elevation[p] / 1000.0,
                    self.reservoir_k[p],
                    self.runoff_coeff[p],
                    self.precip_scale[p],
                    hops[p] as f64 / 10.0,
                    slope / 100.0,
                    (n_up[p] as f64).ln_1p(),
                ]
            })
            .collect()
    }

    /// Point id is the row-major cell index.
    pub fn point_set(&self) -> Result<PointSet> {
        let attrs = self.static_attributes();
        let points = self
            .cells
            .iter()
            .zip(attrs)
            .enumerate()
            .map(|(p, (&(x, y), static_attrs))| {
                let (lat, lon) = self.grid.cell_center(x, y);
                GeoPoint {
                    id: (y * self.grid.width + x) as u64,
                    lat,
                    lon,
                    elevation: self.elevation[p],
                    grid_x: x,
                    grid_y: y,
                    static_attrs,
                }
            })
            .collect();
        PointSet::new(points, self.grid.width, self.grid.height)
    }
}

/// Grid placement used by generated networks.
pub fn default_grid(width: usize, height: usize) -> GridSpec {
    GridSpec {
        width,
        height,
        north: 52.0,
        west: 5.0,
        cell_deg: 0.1,
    }
}

/// Grows a random spanning forest by repeatedly attaching a free 8-neighbor
/// cell upstream of an existing point, always uphill.
pub fn generate_network(seed: u64, width: usize, height: usize, n_points: usize) -> Result<SyntheticNetwork> {
    if n_points == 0 || n_points > width * height {
        return Err(Error::Invalid(format!(
            "cannot place {n_points} points on a {width}x{height} grid"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut occupied = vec![false; width * height];
    let mut cells = Vec::with_capacity(n_points);
    let mut elevation = Vec::with_capacity(n_points);
    let mut downstream = Vec::with_capacity(n_points);

    let n_roots = (n_points / 64).clamp(1, 8);
    while cells.len() < n_roots {
        let (x, y) = (rng.random_range(0..width), rng.random_range(0..height));
        if !occupied[y * width + x] {
            occupied[y * width + x] = true;
            cells.push((x, y));
            elevation.push(rng.random_range(0.0..20.0));
            downstream.push(None);
        }
    }

    let free_neighbors = |occ: &[bool], (x, y): (usize, usize)| -> Vec<(usize, usize)> {
        let mut v = Vec::with_capacity(8);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if (dx, dy) != (0, 0) && nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                    let (nx, ny) = (nx as usize, ny as usize);
                    if !occ[ny * width + nx] {
                        v.push((nx, ny));
                    }
                }
            }
        }
        v
    };

    let mut active: Vec<usize> = (0..cells.len()).collect();
    while cells.len() < n_points {
        let slot = rng.random_range(0..active.len());
        let parent = active[slot];
        let free = free_neighbors(&occupied, cells[parent]);
        let Some(&cell) = free.choose(&mut rng) else {
            active.swap_remove(slot);
            continue;
        };
        occupied[cell.1 * width + cell.0] = true;
        cells.push(cell);
        elevation.push(elevation[parent] + rng.random_range(2.0..30.0));
        downstream.push(Some(parent));
        active.push(cells.len() - 1);
    }

    let n = cells.len();
    let runoff_coeff = (0..n).map(|_| rng.random_range(0.3..0.8)).collect();
    let reservoir_k = (0..n).map(|_| rng.random_range(0.08..0.35)).collect();
    let precip_scale: Vec<f64> = cells
        .iter()
        .map(|&(x, _)| 0.7 + 0.6 * x as f64 / width.max(1) as f64 + rng.random_range(-0.1..0.1))
        .collect();
    let mut net = SyntheticNetwork {
        grid: default_grid(width, height),
        cells,
        elevation,
        downstream,
        runoff_coeff,
        reservoir_k,
        precip_scale,
        drainage_area: vec![1.0; n],
    };
    for p in net.upstream_first() {
        if let Some(d) = net.downstream[p] {
            net.drainage_area[d] += net.drainage_area[p];
        }
    }
    Ok(net)
}
