//! Fixtures shared by the benchmarks.

use hydroscan::geometry::{GeoPoint, PointSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Owned buffers for one selective-scan call of `s` steps, `e` channels and `n` states.
pub struct ScanFixture {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

impl ScanFixture {
    pub fn new(s: usize, e: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |len: usize, lo: f64, hi: f64| (0..len).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        Self {
            x: v(s * e, -1.0, 1.0),
            delta: v(s * e, 1e-3, 1.0),
            a: v(e * n, -2.0, -0.05),
            b: v(s * n, -1.0, 1.0),
            c: v(s * n, -1.0, 1.0),
            d: v(e, -1.0, 1.0),
        }
    }

    pub fn inputs(&self) -> hydroscan::ssm::scan::ScanInputs<'_> {
        hydroscan::ssm::scan::ScanInputs {
            x: &self.x,
            delta: &self.delta,
            a: &self.a,
            b: &self.b,
            c: &self.c,
            d: &self.d,
        }
    }
}

/// `count` distinct random cells of a `w` by `h` grid.
pub fn sparse_points(count: usize, w: usize, h: usize, seed: u64) -> PointSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = rand::seq::index::sample(&mut rng, w * h, count);
    let points = cells
        .iter()
        .enumerate()
        .map(|(i, c)| GeoPoint {
            id: i as u64,
            lat: 0.0,
            lon: 0.0,
            elevation: 0.0,
            grid_x: c % w,
            grid_y: c / w,
            static_attrs: vec![],
        })
        .collect();
    PointSet::new(points, w, h).expect("distinct cells")
}
