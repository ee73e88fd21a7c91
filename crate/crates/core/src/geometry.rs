//! Sparse river points on a regular lat/lon grid.
//!
//! A [`PointSet`] is the spatial axis of every tensor in the crate. Points
//! carry their static attributes, and their WGS-84 Cartesian position can be
//! appended as positional features.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// WGS-84 semi-major axis in kilometres.
pub const WGS84_A_KM: f64 = 6378.137;
/// WGS-84 semi-minor axis in kilometres.
pub const WGS84_B_KM: f64 = 6356.752;

/// Minimum median discharge (m³/s) for a cell to count as a river cell.
pub const DIAGNOSTIC_MIN_DISCHARGE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GeoPoint {
    /// Stable identifier, independent of the point's position in a set.
    pub id: u64,
    /// Degrees in [-90, 90].
    pub lat: f64,
    /// Degrees in [-180, 180).
    pub lon: f64,
    /// Metres above the ellipsoid.
    pub elevation: f64,
    pub grid_x: usize,
    pub grid_y: usize,
    pub static_attrs: Vec<f64>,
}

/// An ordered set of points with unique grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Vec<GeoPoint>,
    grid_width: usize,
    grid_height: usize,
    id_to_index: HashMap<u64, usize>,
}

impl PointSet {
    pub fn new(points: Vec<GeoPoint>, grid_width: usize, grid_height: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("a point set needs at least one point"));
        }
        let n_static = points[0].static_attrs.len();
        let mut occupied = HashMap::with_capacity(points.len());
        let mut id_to_index = HashMap::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            if p.grid_x >= grid_width || p.grid_y >= grid_height {
                return Err(Error::OutOfGrid {
                    id: p.id,
                    width: grid_width,
                    height: grid_height,
                });
            }
            if p.static_attrs.len() != n_static {
                return Err(Error::shape(format!(
                    "point {} has {} static attributes, expected {}",
                    p.id,
                    p.static_attrs.len(),
                    n_static
                )));
            }
            if occupied.insert((p.grid_x, p.grid_y), i).is_some() {
                return Err(Error::DuplicateCell {
                    x: p.grid_x,
                    y: p.grid_y,
                });
            }
            if id_to_index.insert(p.id, i).is_some() {
                return Err(Error::invalid(format!("duplicate point id {}", p.id)));
            }
        }
        Ok(Self {
            points,
            grid_width,
            grid_height,
            id_to_index,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[GeoPoint] {
        &self.points
    }

    pub fn grid_width(&self) -> usize {
        self.grid_width
    }

    pub fn grid_height(&self) -> usize {
        self.grid_height
    }

    pub fn n_static(&self) -> usize {
        self.points[0].static_attrs.len()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.id_to_index.get(&id).copied()
    }

    /// Reorders points so that position `i` of the result holds `self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::shape("permutation length differs from point count"));
        }
        let points = perm.iter().map(|&i| self.points[i].clone()).collect();
        Self::new(points, self.grid_width, self.grid_height)
    }

    /// Static attributes as a row-major `[P, V_s]` buffer.
    pub fn static_matrix(&self) -> Vec<f64> {
        self.points
            .iter()
            .flat_map(|p| p.static_attrs.iter().copied())
            .collect()
    }

    /// Static attributes with the scaled WGS-84 position appended, `[P, V_s + 3]`.
    pub fn static_with_position(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * (self.n_static() + 3));
        for p in &self.points {
            out.extend_from_slice(&p.static_attrs);
            out.extend_from_slice(&positional_features(p.lat, p.lon, p.elevation));
        }
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = ["id", "lat", "lon", "elev", "gx", "gy"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..self.n_static()).map(|i| format!("s{i}")));
        w.write_record(&header)?;
        for p in &self.points {
            let mut row = vec![
                p.id.to_string(),
                p.lat.to_string(),
                p.lon.to_string(),
                p.elevation.to_string(),
                p.grid_x.to_string(),
                p.grid_y.to_string(),
            ];
            row.extend(p.static_attrs.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV layout written by [`PointSet::write_csv`]. The grid size
    /// is not part of the CSV and must be supplied.
    pub fn read_csv<R: Read>(reader: R, grid_width: usize, grid_height: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let fixed = ["id", "lat", "lon", "elev", "gx", "gy"];
        if header.len() < fixed.len() || fixed.iter().zip(header.iter()).any(|(a, b)| *a != b) {
            return Err(Error::Format(format!("unexpected point CSV header: {header:?}")));
        }
        for (i, name) in header.iter().skip(fixed.len()).enumerate() {
            if name != format!("s{i}") {
                return Err(Error::Format(format!("unexpected static column {name}")));
            }
        }
        let mut points = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("column {}: {e}", &header[i])))
            };
            let int = |i: usize| -> Result<u64> {
                rec[i]
                    .parse::<u64>()
                    .map_err(|e| Error::Format(format!("column {}: {e}", &header[i])))
            };
            let static_attrs = (fixed.len()..rec.len())
                .map(num)
                .collect::<Result<Vec<_>>>()?;
            points.push(GeoPoint {
                id: int(0)?,
                lat: num(1)?,
                lon: num(2)?,
                elevation: num(3)?,
                grid_x: int(4)? as usize,
                grid_y: int(5)? as usize,
                static_attrs,
            });
        }
        Self::new(points, grid_width, grid_height)
    }
}

/// Cartesian position on the WGS-84 ellipsoid in kilometres.
///
/// `height_m` is the height above the ellipsoid in metres.
pub fn wgs84_cartesian(lat_deg: f64, lon_deg: f64, height_m: f64) -> [f64; 3] {
    let a = WGS84_A_KM;
    let b = WGS84_B_KM;
    let e2 = (a * a - b * b) / (a * a);
    let phi = lat_deg.to_radians();
    let lambda = lon_deg.to_radians();
    let h = height_m / 1000.0;
    let (sin_phi, cos_phi) = phi.sin_cos();
    let n = a / (1.0 - e2 * sin_phi * sin_phi).sqrt();
    [
        (n + h) * cos_phi * lambda.cos(),
        (n + h) * cos_phi * lambda.sin(),
        ((1.0 - e2) * n + h) * sin_phi,
    ]
}

/// WGS-84 position in units of the semi-major axis.
pub fn positional_features(lat_deg: f64, lon_deg: f64, height_m: f64) -> [f64; 3] {
    wgs84_cartesian(lat_deg, lon_deg, height_m).map(|v| v / WGS84_A_KM)
}

/// A regular lat/lon raster. Row 0 is the northern edge.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub north: f64,
    pub west: f64,
    pub cell_deg: f64,
}

impl GridSpec {
    /// Latitude/longitude of a cell centre.
    pub fn cell_center(&self, x: usize, y: usize) -> (f64, f64) {
        let lat = self.north - (y as f64 + 0.5) * self.cell_deg;
        let lon = self.west + (x as f64 + 0.5) * self.cell_deg;
        (lat, lon)
    }
}

/// Per-cell inputs to the diagnostic-point filter, all row-major `[height, width]`.
#[derive(Debug, Clone)]
pub struct DiagnosticGrid {
    pub width: usize,
    pub height: usize,
    pub land: Vec<bool>,
    pub median_discharge: Vec<f64>,
    pub gauged: Vec<bool>,
}

impl DiagnosticGrid {
    fn check(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.land.len() != n || self.median_discharge.len() != n || self.gauged.len() != n {
            return Err(Error::shape("diagnostic grid arrays differ from width*height"));
        }
        Ok(())
    }

    fn is_river(&self, x: usize, y: usize) -> bool {
        let i = y * self.width + x;
        self.land[i] && self.median_discharge[i] >= DIAGNOSTIC_MIN_DISCHARGE
    }
}

/// Cells `(x, y)` kept by the diagnostic filter, in row-major order.
///
/// A cell survives when it is gauged, or when it is land and lies within
/// Chebyshev distance 1 of a land cell whose median discharge reaches
/// [`DIAGNOSTIC_MIN_DISCHARGE`]. Neighbours outside the grid are absent.
pub fn filter_diagnostic_cells(grid: &DiagnosticGrid) -> Result<Vec<(usize, usize)>> {
    grid.check()?;
    let (w, h) = (grid.width, grid.height);
    let mut kept = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let near_river = grid.land[i] && {
                let xs = x.saturating_sub(1)..=(x + 1).min(w - 1);
                xs.clone().any(|nx| {
                    (y.saturating_sub(1)..=(y + 1).min(h - 1)).any(|ny| grid.is_river(nx, ny))
                })
            };
            if grid.gauged[i] || near_river {
                kept.push((x, y));
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::NoDiagnosticPoints);
    }
    Ok(kept)
}

/// Builds a [`PointSet`] from the cells surviving [`filter_diagnostic_cells`].
///
/// Point ids are the row-major cell index; `attrs` supplies static attributes
/// and elevation per kept cell.
pub fn filter_diagnostic_points(
    grid: &DiagnosticGrid,
    spec: &GridSpec,
    mut attrs: impl FnMut(usize, usize) -> (f64, Vec<f64>),
) -> Result<PointSet> {
    if spec.width != grid.width || spec.height != grid.height {
        return Err(Error::shape("grid spec does not match diagnostic grid"));
    }
    let cells = filter_diagnostic_cells(grid)?;
    let points = cells
        .into_iter()
        .map(|(x, y)| {
            let (lat, lon) = spec.cell_center(x, y);
            let (elevation, static_attrs) = attrs(x, y);
            GeoPoint {
                id: (y * grid.width + x) as u64,
                lat,
                lon,
                elevation,
                grid_x: x,
                grid_y: y,
                static_attrs,
            }
        })
        .collect();
    PointSet::new(points, grid.width, grid.height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(id: u64, x: usize, y: usize) -> GeoPoint {
        GeoPoint {
            id,
            lat: 45.0 - y as f64,
            lon: 5.0 + x as f64,
            elevation: 100.0,
            grid_x: x,
            grid_y: y,
            static_attrs: vec![1.0, 2.0],
        }
    }

    #[test]
    fn cartesian_axes() {
        let [x, y, z] = wgs84_cartesian(0.0, 0.0, 0.0);
        assert!((x - 6378.137).abs() < 1e-9 && y.abs() < 1e-9 && z.abs() < 1e-9);
        let [x, y, z] = wgs84_cartesian(0.0, 90.0, 0.0);
        assert!(x.abs() < 1e-9 && (y - 6378.137).abs() < 1e-9 && z.abs() < 1e-9);
        // z at the pole reduces to (1 - e²)·a/√(1 - e²) = a·√(1 - e²) = b.
        let [x, y, z] = wgs84_cartesian(90.0, 37.0, 0.0);
        assert!(x.abs() < 1e-9 && y.abs() < 1e-9);
        assert!((z - WGS84_B_KM).abs() < 1e-9, "{z}");
    }

    #[test]
    fn cartesian_norm_between_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let lat = rng.random_range(-90.0..=90.0);
            let lon = rng.random_range(-180.0..180.0);
            let n = wgs84_cartesian(lat, lon, 0.0).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((WGS84_B_KM - 1e-9..=WGS84_A_KM + 1e-9).contains(&n));
        }
    }

    #[test]
    fn height_is_metres() {
        let [x, _, _] = wgs84_cartesian(0.0, 0.0, 1000.0);
        assert!((x - 6379.137).abs() < 1e-9);
    }

    #[test]
    fn point_set_rejects_duplicates_and_out_of_grid() {
        assert!(matches!(
            PointSet::new(vec![pt(1, 0, 0), pt(2, 0, 0)], 3, 3),
            Err(Error::DuplicateCell { x: 0, y: 0 })
        ));
        assert!(matches!(
            PointSet::new(vec![pt(1, 3, 0)], 3, 3),
            Err(Error::OutOfGrid { .. })
        ));
        assert!(PointSet::new(vec![], 3, 3).is_err());
        let mut odd = pt(2, 1, 1);
        odd.static_attrs.push(0.0);
        assert!(PointSet::new(vec![pt(1, 0, 0), odd], 3, 3).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let mut a = pt(7, 1, 2);
        a.static_attrs = vec![0.1, -3.25e-7];
        a.lat = 47.123456789012345;
        let set = PointSet::new(vec![a, pt(9, 0, 0)], 4, 4).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,lat,lon,elev,gx,gy,s0,s1\n"));
        let back = PointSet::read_csv(buf.as_slice(), 4, 4).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.index_of(9), Some(1));
    }

    fn toy_grid(w: usize, h: usize) -> DiagnosticGrid {
        DiagnosticGrid {
            width: w,
            height: h,
            land: vec![true; w * h],
            median_discharge: vec![0.0; w * h],
            gauged: vec![false; w * h],
        }
    }

    // Independent neighbourhood check used to cross-validate the filter.
    fn brute_keep(g: &DiagnosticGrid, x: usize, y: usize) -> bool {
        let i = y * g.width + x;
        if g.gauged[i] {
            return true;
        }
        if !g.land[i] {
            return false;
        }
        for ny in 0..g.height {
            for nx in 0..g.width {
                let cheb = (nx as i64 - x as i64).abs().max((ny as i64 - y as i64).abs());
                let j = ny * g.width + nx;
                if cheb <= 1 && g.land[j] && g.median_discharge[j] >= 10.0 {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn filter_examples() {
        let mut g = toy_grid(1, 1);
        g.median_discharge[0] = 12.0;
        assert_eq!(filter_diagnostic_cells(&g).unwrap(), vec![(0, 0)]);

        let mut g = toy_grid(1, 1);
        g.median_discharge[0] = 3.0;
        assert!(matches!(filter_diagnostic_cells(&g), Err(Error::NoDiagnosticPoints)));

        // 5x5: a 15 m³/s cell at (2, 2); a 3 m³/s cell diagonally adjacent at
        // (3, 3) is kept, one at (0, 0) is not.
        let mut g = toy_grid(5, 5);
        g.median_discharge[2 * 5 + 2] = 15.0;
        g.median_discharge[3 * 5 + 3] = 3.0;
        g.median_discharge[0] = 3.0;
        let kept = filter_diagnostic_cells(&g).unwrap();
        assert!(kept.contains(&(3, 3)));
        assert!(!kept.contains(&(0, 0)));
        assert_eq!(kept.len(), 9);
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(kept.contains(&(x, y)), brute_keep(&g, x, y));
            }
        }
    }

    #[test]
    fn filter_matches_brute_force_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (w, h) = (rng.random_range(1..9), rng.random_range(1..9));
            let mut g = toy_grid(w, h);
            for i in 0..w * h {
                g.land[i] = rng.random_bool(0.8);
                g.median_discharge[i] = rng.random_range(0.0..20.0);
                g.gauged[i] = rng.random_bool(0.05);
            }
            let Ok(kept) = filter_diagnostic_cells(&g) else {
                continue;
            };
            for y in 0..h {
                for x in 0..w {
                    assert_eq!(kept.contains(&(x, y)), brute_keep(&g, x, y));
                    if g.gauged[y * w + x] {
                        assert!(kept.contains(&(x, y)));
                    }
                }
            }
            let mut again = g.clone();
            for y in 0..h {
                for x in 0..w {
                    again.land[y * w + x] = kept.contains(&(x, y));
                }
            }
            assert_eq!(filter_diagnostic_cells(&again).unwrap(), kept);
        }
    }

    #[test]
    fn filtered_point_set_ids_are_cells() {
        let mut g = toy_grid(3, 2);
        g.median_discharge[0] = 50.0;
        let spec = GridSpec {
            width: 3,
            height: 2,
            north: 10.0,
            west: 0.0,
            cell_deg: 1.0,
        };
        let set = filter_diagnostic_points(&g, &spec, |_, _| (0.0, vec![])).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.points()[0].lat, 9.5);
        assert_eq!(set.index_of(4), Some(3));
    }
}
