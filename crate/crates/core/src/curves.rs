//! Space-filling curves over the point grid and the serialization orders
//! they induce on a sparse [`PointSet`].
//!
//! Every curve covers the full `width x height` rectangle, so each grid cell
//! has a unique 64-bit code (its position along the tour). Sparse points are
//! serialized by sorting on the code of their cell.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    SweepH,
    SweepV,
    ZigzagH,
    ZigzagV,
    Gilbert,
    GilbertTransposed,
}

impl CurveKind {
    pub const ALL: [CurveKind; 6] = [
        CurveKind::SweepH,
        CurveKind::SweepV,
        CurveKind::ZigzagH,
        CurveKind::ZigzagV,
        CurveKind::Gilbert,
        CurveKind::GilbertTransposed,
    ];

    /// Curves assigned to consecutive blocks of a stack, repeated cyclically.
    pub const BLOCK_CYCLE: [CurveKind; 4] = [
        CurveKind::SweepH,
        CurveKind::SweepV,
        CurveKind::Gilbert,
        CurveKind::GilbertTransposed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CurveKind::SweepH => "sweep_h",
            CurveKind::SweepV => "sweep_v",
            CurveKind::ZigzagH => "zigzag_h",
            CurveKind::ZigzagV => "zigzag_v",
            CurveKind::Gilbert => "gilbert",
            CurveKind::GilbertTransposed => "gilbert_transposed",
        }
    }

    /// Curve for the `block`-th block of a stack.
    pub fn for_block(block: usize) -> CurveKind {
        Self::BLOCK_CYCLE[block % Self::BLOCK_CYCLE.len()]
    }
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CurveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        CurveKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .or(match norm.as_str() {
                "gilbert_trans" | "gilbert_t" => Some(CurveKind::GilbertTransposed),
                _ => None,
            })
            .ok_or_else(|| Error::invalid(format!("unknown curve kind {s:?}")))
    }
}

/// Full-rectangle tour for `kind` as a list of `(x, y)` cells.
pub fn tour(kind: CurveKind, width: usize, height: usize) -> Vec<(usize, usize)> {
    match kind {
        CurveKind::SweepH => (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .collect(),
        CurveKind::SweepV => (0..width)
            .flat_map(|x| (0..height).map(move |y| (x, y)))
            .collect(),
        CurveKind::ZigzagH => (0..height)
            .flat_map(|y| {
                (0..width).map(move |i| if y % 2 == 0 { (i, y) } else { (width - 1 - i, y) })
            })
            .collect(),
        CurveKind::ZigzagV => (0..width)
            .flat_map(|x| {
                (0..height).map(move |i| if x % 2 == 0 { (x, i) } else { (x, height - 1 - i) })
            })
            .collect(),
        CurveKind::Gilbert => gilbert_order(width, height),
        CurveKind::GilbertTransposed => transpose_order(&gilbert_order(width, height), height),
    }
}

/// Generalized Hilbert tour of an arbitrary `width x height` rectangle.
///
/// The recursion is the classic generalized Hilbert construction. The major
/// axis is chosen so the tour can end on a cell of opposite parity when the
/// cell count is even; with an odd major side against an even minor side the
/// recursion would otherwise be forced into one diagonal step.
pub fn gilbert_order(width: usize, height: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(width * height);
    if width == 0 || height == 0 {
        return out;
    }
    let (w, h) = (width as i64, height as i64);
    let major_is_width = match (w % 2, h % 2) {
        (1, 0) => false,
        (0, 1) => true,
        _ => w >= h,
    };
    if major_is_width {
        gilbert_rec(&mut out, 0, 0, w, 0, 0, h);
    } else {
        gilbert_rec(&mut out, 0, 0, 0, h, w, 0);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn gilbert_rec(out: &mut Vec<(usize, usize)>, x: i64, y: i64, ax: i64, ay: i64, bx: i64, by: i64) {
    let w = (ax + ay).abs();
    let h = (bx + by).abs();
    let (dax, day) = (ax.signum(), ay.signum());
    let (dbx, dby) = (bx.signum(), by.signum());

    if h == 1 {
        let (mut x, mut y) = (x, y);
        for _ in 0..w {
            out.push((x as usize, y as usize));
            x += dax;
            y += day;
        }
        return;
    }
    if w == 1 {
        let (mut x, mut y) = (x, y);
        for _ in 0..h {
            out.push((x as usize, y as usize));
            x += dbx;
            y += dby;
        }
        return;
    }

    // Halving truncates toward zero.
    let (mut ax2, mut ay2) = (ax / 2, ay / 2);
    let (mut bx2, mut by2) = (bx / 2, by / 2);
    let w2 = (ax2 + ay2).abs();
    let h2 = (bx2 + by2).abs();

    if 2 * w > 3 * h {
        if w2 % 2 != 0 && w > 2 {
            ax2 += dax;
            ay2 += day;
        }
        gilbert_rec(out, x, y, ax2, ay2, bx, by);
        gilbert_rec(out, x + ax2, y + ay2, ax - ax2, ay - ay2, bx, by);
    } else {
        if h2 % 2 != 0 && h > 2 {
            bx2 += dbx;
            by2 += dby;
        }
        gilbert_rec(out, x, y, bx2, by2, ax2, ay2);
        gilbert_rec(out, x + bx2, y + by2, ax, ay, bx - bx2, by - by2);
        gilbert_rec(
            out,
            x + (ax - dax) + (bx2 - dbx),
            y + (ay - day) + (by2 - dby),
            -bx2,
            -by2,
            -(ax - ax2),
            -(ay - ay2),
        );
    }
}

/// Reflects every visited cell vertically, `y -> height - 1 - y`.
pub fn transpose_order(order: &[(usize, usize)], height: usize) -> Vec<(usize, usize)> {
    order.iter().map(|&(x, y)| (x, height - 1 - y)).collect()
}

/// Code of every cell (row-major) along a full-rectangle tour.
pub fn cell_codes(kind: CurveKind, width: usize, height: usize) -> Vec<u64> {
    let mut codes = vec![0u64; width * height];
    for (step, (x, y)) in tour(kind, width, height).into_iter().enumerate() {
        codes[y * width + x] = step as u64;
    }
    codes
}

/// A bijection between point indices and curve positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializationOrder {
    kind: CurveKind,
    /// `perm[i]` is the point index at curve position `i`.
    perm: Vec<usize>,
    /// `inv[p]` is the curve position of point `p`.
    inv: Vec<usize>,
    /// Code of each point, indexed by point.
    codes: Vec<u64>,
}

impl SerializationOrder {
    /// Builds an order from per-point codes. Codes must be distinct.
    pub fn from_codes(kind: CurveKind, codes: Vec<u64>) -> Result<Self> {
        let mut perm: Vec<usize> = (0..codes.len()).collect();
        perm.sort_by_key(|&i| codes[i]);
        if perm.windows(2).any(|w| codes[w[0]] == codes[w[1]]) {
            return Err(Error::invalid("serialization codes are not distinct"));
        }
        let mut inv = vec![0; perm.len()];
        for (pos, &p) in perm.iter().enumerate() {
            inv[p] = pos;
        }
        Ok(Self {
            kind,
            perm,
            inv,
            codes,
        })
    }

    /// Order from an explicit permutation (curve position -> point index).
    pub fn from_permutation(kind: CurveKind, perm: Vec<usize>) -> Result<Self> {
        let mut inv = vec![usize::MAX; perm.len()];
        for (pos, &p) in perm.iter().enumerate() {
            if p >= perm.len() || inv[p] != usize::MAX {
                return Err(Error::invalid("not a permutation"));
            }
            inv[p] = pos;
        }
        let codes = inv.iter().map(|&pos| pos as u64).collect();
        Ok(Self {
            kind,
            perm,
            inv,
            codes,
        })
    }

    pub fn identity(kind: CurveKind, n: usize) -> Self {
        Self::from_permutation(kind, (0..n).collect()).expect("identity is a permutation")
    }

    pub fn kind(&self) -> CurveKind {
        self.kind
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv(&self) -> &[usize] {
        &self.inv
    }

    pub fn codes(&self) -> &[u64] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

/// Serializes `points` along the full-rectangle curve `kind`.
pub fn serialize(points: &PointSet, kind: CurveKind) -> Result<SerializationOrder> {
    let codes = cell_codes(kind, points.grid_width(), points.grid_height());
    serialize_with(points, kind, &codes)
}

fn serialize_with(points: &PointSet, kind: CurveKind, cell_codes: &[u64]) -> Result<SerializationOrder> {
    let w = points.grid_width();
    let codes = points
        .points()
        .iter()
        .map(|p| cell_codes[p.grid_y * w + p.grid_x])
        .collect::<Vec<_>>();
    // Distinct cells have distinct codes, so a duplicate code means a duplicate cell.
    SerializationOrder::from_codes(kind, codes).map_err(|_| {
        let mut seen = std::collections::HashSet::new();
        let dup = points
            .points()
            .iter()
            .find(|p| !seen.insert((p.grid_x, p.grid_y)))
            .map(|p| (p.grid_x, p.grid_y))
            .unwrap_or((0, 0));
        Error::DuplicateCell { x: dup.0, y: dup.1 }
    })
}

/// Memoizes full-rectangle cell codes per `(kind, width, height)`.
#[derive(Debug, Default)]
pub struct CurveCache {
    codes: Mutex<HashMap<(CurveKind, usize, usize), Arc<Vec<u64>>>>,
}

impl CurveCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cell_codes(&self, kind: CurveKind, width: usize, height: usize) -> Arc<Vec<u64>> {
        let mut map = self.codes.lock().expect("curve cache poisoned");
        map.entry((kind, width, height))
            .or_insert_with(|| Arc::new(cell_codes(kind, width, height)))
            .clone()
    }

    pub fn serialize(&self, points: &PointSet, kind: CurveKind) -> Result<SerializationOrder> {
        let codes = self.cell_codes(kind, points.grid_width(), points.grid_height());
        serialize_with(points, kind, &codes)
    }
}

fn check_points_axis(tensor: &Tensor, n: usize) -> Result<(usize, usize)> {
    if tensor.rank() != 3 || tensor.shape()[1] != n {
        return Err(Error::shape(format!(
            "expected [T, {n}, K] tensor, got {:?}",
            tensor.shape()
        )));
    }
    Ok((tensor.shape()[0], tensor.shape()[2]))
}

fn gather_points(tensor: &Tensor, index: &[usize]) -> Result<Tensor> {
    let (t, k) = check_points_axis(tensor, index.len())?;
    let p = index.len();
    let src = tensor.data();
    let mut out = Vec::with_capacity(src.len());
    for ti in 0..t {
        for &pi in index {
            let o = (ti * p + pi) * k;
            out.extend_from_slice(&src[o..o + k]);
        }
    }
    Tensor::new(vec![t, p, k], out)
}

/// Permutes the point axis of a `[T, P, K]` tensor into curve order.
pub fn apply_order(tensor: &Tensor, order: &SerializationOrder) -> Result<Tensor> {
    gather_points(tensor, order.perm())
}

/// Restores the original point order of a curve-ordered `[T, P, K]` tensor.
pub fn inverse_order(tensor: &Tensor, order: &SerializationOrder) -> Result<Tensor> {
    gather_points(tensor, order.inv())
}

/// Splits the curve into contiguous runs of at most `max_len` positions.
pub fn split_curve(order: &SerializationOrder, max_len: usize) -> Result<Vec<Range<usize>>> {
    segment_ranges(order.len(), max_len)
}

pub fn segment_ranges(n: usize, max_len: usize) -> Result<Vec<Range<usize>>> {
    if max_len == 0 {
        return Err(Error::invalid("segment length must be at least 1"));
    }
    Ok((0..n)
        .step_by(max_len)
        .map(|s| s..(s + max_len).min(n))
        .collect())
}

/// Point indices of each curve segment.
pub fn segment_points<'a>(order: &'a SerializationOrder, segments: &[Range<usize>]) -> Vec<&'a [usize]> {
    segments.iter().map(|r| &order.perm()[r.clone()]).collect()
}

/// `[T, P, K]` to `[T*P, K]`, all points of step `t` before step `t+1`.
pub fn flatten_spatial_first(tensor: &Tensor) -> Result<Tensor> {
    if tensor.rank() != 3 {
        return Err(Error::shape("flatten expects a [T, P, K] tensor"));
    }
    let (t, p, k) = (tensor.shape()[0], tensor.shape()[1], tensor.shape()[2]);
    tensor.clone().reshape(&[t * p, k])
}

pub fn unflatten_spatial_first(tensor: &Tensor, steps: usize) -> Result<Tensor> {
    if tensor.rank() != 2 || steps == 0 || !tensor.shape()[0].is_multiple_of(steps) {
        return Err(Error::shape("unflatten expects a [T*P, K] tensor"));
    }
    let (s, k) = (tensor.shape()[0], tensor.shape()[1]);
    tensor.clone().reshape(&[steps, s / steps, k])
}
