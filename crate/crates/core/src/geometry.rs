//! Rod-shaped cell geometry, neighbor graphs and target windows.
//!
//! Cells are capsules: the segment between the two endpoints dilated by half
//! the cell width. Coordinates are pixels with `y` increasing downward.

use std::collections::HashSet;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrackError};

/// Default neighbor radius in pixels.
pub const DEFAULT_RHO: f64 = 80.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    #[inline]
    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product.
    #[inline]
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    #[inline]
    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    /// Unit vector, or `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self * (1.0 / n))
    }

    #[inline]
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotated(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn midpoint(self, other: Vec2) -> Vec2 {
        (self + other) * 0.5
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(v: [f64; 2]) -> Self {
        Vec2::new(v[0], v[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    #[inline]
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    #[inline]
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    #[inline]
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl SubAssign for Vec2 {
    #[inline]
    fn sub_assign(&mut self, o: Vec2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    #[inline]
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    #[inline]
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Angle in `[0, π/2]` between the unoriented lines carrying `u` and `v`.
/// Zero when either vector vanishes.
pub fn line_angle(u: Vec2, v: Vec2) -> f64 {
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    // atan2 keeps precision near 0 and π/2 where acos does not.
    let c = u.dot(v).abs();
    let s = u.cross(v).abs();
    s.atan2(c)
}

/// Distance from `p` to segment `[a, b]`.
pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

/// Closest points between segments `[p1, q1]` and `[p2, q2]`.
///
/// Returns `(point_on_first, point_on_second)`.
pub fn segment_closest_points(p1: Vec2, q1: Vec2, p2: Vec2, q2: Vec2) -> (Vec2, Vec2) {
    const EPS: f64 = 1e-18;
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_sq();
    let e = d2.norm_sq();
    let f = d2.dot(r);

    let (s, t);
    if a <= EPS && e <= EPS {
        return (p1, p2);
    }
    if a <= EPS {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(r);
        if e <= EPS {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > EPS * a * e {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    (p1 + d1 * s, p2 + d2 * t)
}

/// Minimal distance between segments `[p1, q1]` and `[p2, q2]`.
pub fn segment_distance(p1: Vec2, q1: Vec2, p2: Vec2, q2: Vec2) -> f64 {
    let (a, b) = segment_closest_points(p1, q1, p2, q2);
    a.distance(b)
}

/// Axis-aligned rectangle in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Rect { min, max }
    }

    pub fn from_size(width: f64, height: f64) -> Self {
        Rect::new(Vec2::ZERO, Vec2::new(width, height))
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn center(&self) -> Vec2 {
        self.min.midpoint(self.max)
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    /// Smallest rectangle containing every point, padded by `margin`.
    pub fn bounding(points: impl IntoIterator<Item = Vec2>, margin: f64) -> Option<Rect> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let (mut lo, mut hi) = (first, first);
        for p in it {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        let pad = Vec2::new(margin, margin);
        Some(Rect::new(lo - pad, hi + pad))
    }
}

/// Opaque per-frame cell identifier.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(pub String);

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for CellId {
    fn from(s: &str) -> Self {
        CellId(s.to_owned())
    }
}

impl From<String> for CellId {
    fn from(s: String) -> Self {
        CellId(s)
    }
}

impl From<usize> for CellId {
    fn from(n: usize) -> Self {
        CellId(n.to_string())
    }
}

/// A rod-shaped cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub id: CellId,
    pub center: Vec2,
    /// Unit vector along the long axis; orientation carries no meaning.
    pub axis_dir: Vec2,
    /// The endpoints `e(b)` and `h(b)` of the long axis.
    pub endpoints: (Vec2, Vec2),
    pub length: f64,
    /// Rod diameter.
    pub width: f64,
}

impl Cell {
    /// Builds a cell centered between its endpoints.
    pub fn from_endpoints(id: impl Into<CellId>, e: Vec2, h: Vec2, width: f64) -> Result<Cell> {
        Cell::new(id, e.midpoint(h), e, h, width)
    }

    /// Builds a cell from an explicit center, e.g. a pixel centroid that need
    /// not coincide with the endpoint midpoint.
    pub fn new(id: impl Into<CellId>, center: Vec2, e: Vec2, h: Vec2, width: f64) -> Result<Cell> {
        let id = id.into();
        if !(center.is_finite() && e.is_finite() && h.is_finite() && width.is_finite()) {
            return Err(TrackError::DegenerateCell(format!("cell {id} has non-finite geometry")));
        }
        let axis = h - e;
        let length = axis.norm();
        let axis_dir = axis
            .normalized()
            .ok_or_else(|| TrackError::DegenerateCell(format!("cell {id} has zero length")))?;
        if width <= 0.0 {
            return Err(TrackError::DegenerateCell(format!("cell {id} has non-positive width")));
        }
        Ok(Cell { id, center, axis_dir, endpoints: (e, h), length, width })
    }

    /// Capsule cell centered at `center` with long axis at `angle` radians.
    pub fn capsule(id: impl Into<CellId>, center: Vec2, angle: f64, length: f64, width: f64) -> Result<Cell> {
        let half = Vec2::new(angle.cos(), angle.sin()) * (0.5 * length);
        Cell::new(id, center, center - half, center + half, width)
    }

    /// Long axis vector `h - e`.
    pub fn axis(&self) -> Vec2 {
        self.endpoints.1 - self.endpoints.0
    }

    pub fn tips(&self) -> [Vec2; 2] {
        [self.endpoints.0, self.endpoints.1]
    }

    /// Distance from the segment `[a, b]` to this cell's axis segment.
    pub fn axis_distance_to_segment(&self, a: Vec2, b: Vec2) -> f64 {
        segment_distance(a, b, self.endpoints.0, self.endpoints.1)
    }

    /// `true` when segment `[a, b]` enters this cell's capsule.
    pub fn capsule_hits_segment(&self, a: Vec2, b: Vec2) -> bool {
        self.axis_distance_to_segment(a, b) < 0.5 * self.width
    }

    /// Penetration depth between two capsules; positive when they overlap.
    pub fn overlap_depth(&self, other: &Cell) -> f64 {
        let d = segment_distance(self.endpoints.0, self.endpoints.1, other.endpoints.0, other.endpoints.1);
        0.5 * (self.width + other.width) - d
    }

    /// Same cell translated rigidly by `offset`.
    pub fn translated(&self, offset: Vec2) -> Cell {
        Cell {
            center: self.center + offset,
            endpoints: (self.endpoints.0 + offset, self.endpoints.1 + offset),
            ..self.clone()
        }
    }
}

/// Derives a cell from a raster mask.
///
/// The center is the pixel centroid and the axis the leading principal
/// component. Endpoints are the extreme pixel projections onto the axis line
/// through the centroid, and the width is twice the RMS distance to that line,
/// floored at one pixel.
pub fn cell_from_pixels(id: impl Into<CellId>, pixels: &[(i64, i64)]) -> Result<Cell> {
    let id = id.into();
    let n = pixels.len();
    if n < 2 {
        return Err(TrackError::DegenerateCell(format!("cell {id}: fewer than two pixels")));
    }
    let nf = n as f64;
    let (sx, sy) = pixels.iter().fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x as f64, sy + y as f64));
    let center = Vec2::new(sx / nf, sy / nf);

    let (mut cxx, mut cxy, mut cyy) = (0.0, 0.0, 0.0);
    for &(x, y) in pixels {
        let d = Vec2::new(x as f64, y as f64) - center;
        cxx += d.x * d.x;
        cxy += d.x * d.y;
        cyy += d.y * d.y;
    }
    cxx /= nf;
    cxy /= nf;
    cyy /= nf;

    // Leading eigenpair of [[cxx, cxy], [cxy, cyy]].
    let tr = cxx + cyy;
    let det = cxx * cyy - cxy * cxy;
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let lead = 0.5 * tr + disc;
    if lead <= 1e-12 {
        return Err(TrackError::DegenerateCell(format!("cell {id}: zero covariance")));
    }
    let raw = if cxy.abs() > 1e-12 * lead {
        Vec2::new(lead - cyy, cxy)
    } else if cxx >= cyy {
        Vec2::new(1.0, 0.0)
    } else {
        Vec2::new(0.0, 1.0)
    };
    let mut axis_dir = raw.normalized().expect("non-zero eigenvector");
    if axis_dir.x < 0.0 || (axis_dir.x == 0.0 && axis_dir.y < 0.0) {
        axis_dir = -axis_dir;
    }

    let (mut t_min, mut t_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut perp_sq = 0.0;
    let normal = axis_dir.perp();
    for &(x, y) in pixels {
        let d = Vec2::new(x as f64, y as f64) - center;
        let t = d.dot(axis_dir);
        t_min = t_min.min(t);
        t_max = t_max.max(t);
        let q = d.dot(normal);
        perp_sq += q * q;
    }
    let width = (2.0 * (perp_sq / nf).sqrt()).max(1.0);
    let e = center + axis_dir * t_min;
    let h = center + axis_dir * t_max;
    let mut cell = Cell::new(id, center, e, h, width)?;
    cell.axis_dir = axis_dir;
    Ok(cell)
}

/// An indexed set of fully visible cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub cells: Vec<Cell>,
    pub bounds: Rect,
}

impl Frame {
    pub fn new(index: usize, cells: Vec<Cell>, bounds: Rect) -> Result<Frame> {
        let frame = Frame { index, cells, bounds };
        frame.validate()?;
        Ok(frame)
    }

    /// Frame whose bounds are the padded bounding box of the cell centers.
    pub fn with_fitted_bounds(index: usize, cells: Vec<Cell>) -> Result<Frame> {
        let bounds = Rect::bounding(cells.iter().map(|c| c.center), 1.0)
            .unwrap_or_else(|| Rect::from_size(0.0, 0.0));
        Frame::new(index, cells, bounds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.cells.len());
        for cell in &self.cells {
            if !self.bounds.contains(cell.center) {
                return Err(TrackError::InvalidFrame {
                    frame: self.index,
                    reason: format!("cell {} center outside bounds", cell.id),
                });
            }
            if !seen.insert(&cell.id) {
                return Err(TrackError::InvalidFrame {
                    frame: self.index,
                    reason: format!("duplicate cell id {}", cell.id),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn position(&self, id: &CellId) -> Option<usize> {
        self.cells.iter().position(|c| &c.id == id)
    }

    pub fn centers(&self) -> Vec<Vec2> {
        self.cells.iter().map(|c| c.center).collect()
    }

    /// Sub-frame with only the listed cells, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Frame {
        Frame {
            index: self.index,
            cells: indices.iter().map(|&i| self.cells[i].clone()).collect(),
            bounds: self.bounds,
        }
    }

    pub fn min_length(&self) -> Option<f64> {
        self.cells.iter().map(|c| c.length).min_by(f64::total_cmp)
    }
}

/// Symmetric, irreflexive neighbor relation over a frame's cells (by index).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborGraph {
    adjacency: Vec<Vec<usize>>,
}

impl NeighborGraph {
    /// Graph from an edge list over `n` vertices; duplicates and loops are dropped.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut adjacency = vec![Vec::new(); n];
        for (a, b) in edges {
            if a != b {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        NeighborGraph { adjacency }
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    /// `|G_i|`.
    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn are_neighbors(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&j).is_ok()
    }

    /// Each edge once, as `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }
}

/// `true` when the segment between the centers of cells `i` and `j` stays
/// clear of every other cell's capsule.
fn edge_is_clear(cells: &[Cell], i: usize, j: usize) -> bool {
    let (a, b) = (cells[i].center, cells[j].center);
    let (lo_x, hi_x) = (a.x.min(b.x), a.x.max(b.x));
    let (lo_y, hi_y) = (a.y.min(b.y), a.y.max(b.y));
    cells.iter().enumerate().all(|(k, cell)| {
        if k == i || k == j {
            return true;
        }
        // Cheap bounding-box rejection before the exact test.
        let reach = 0.5 * cell.width;
        let (e, h) = cell.endpoints;
        if e.x.max(h.x) + reach < lo_x
            || e.x.min(h.x) - reach > hi_x
            || e.y.max(h.y) + reach < lo_y
            || e.y.min(h.y) - reach > hi_y
        {
            return true;
        }
        !cell.capsule_hits_segment(a, b)
    })
}

/// Delaunay triangle edges over the cell centers, or `None` when the centers
/// are fewer than three or all collinear.
pub fn delaunay_edges(centers: &[Vec2]) -> Option<Vec<(usize, usize)>> {
    if centers.len() < 3 {
        return None;
    }
    let points: Vec<delaunator::Point> =
        centers.iter().map(|c| delaunator::Point { x: c.x, y: c.y }).collect();
    let tri = delaunator::triangulate(&points);
    if tri.triangles.is_empty() {
        return None;
    }
    let mut edges: Vec<(usize, usize)> = tri
        .triangles
        .chunks_exact(3)
        .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    Some(edges)
}

/// Neighbor graph: Delaunay edges between centers that are no longer than
/// `rho` and do not cross a third cell. Frames with fewer than three cells
/// or collinear centers use all pairs within `rho` instead of Delaunay edges.
pub fn build_neighbor_graph(frame: &Frame, rho: f64) -> NeighborGraph {
    let cells = &frame.cells;
    let n = cells.len();
    let candidates = delaunay_edges(&frame.centers()).unwrap_or_else(|| {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    });
    let edges = candidates.into_iter().filter(|&(i, j)| {
        cells[i].center.distance(cells[j].center) <= rho && edge_is_clear(cells, i, j)
    });
    NeighborGraph::from_edges(n, edges)
}

/// Indices of the cells of `next` whose centers fall in the closed square of
/// side `w` centered on `cell`.
pub fn target_window(cell: &Cell, next: &Frame, w: f64) -> Vec<usize> {
    let half = 0.5 * w;
    next.cells
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let d = c.center - cell.center;
            d.x.abs() <= half && d.y.abs() <= half
        })
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame_of(cells: Vec<Cell>) -> Frame {
        Frame::new(0, cells, Rect::from_size(1000.0, 1000.0)).unwrap()
    }

    // Oracle: zero if the segments cross or touch, else the smallest
    // endpoint-to-segment distance.
    fn oracle_segment_distance(p1: Vec2, q1: Vec2, p2: Vec2, q2: Vec2) -> f64 {
        fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
            (b - a).cross(c - a)
        }
        let o1 = orient(p1, q1, p2);
        let o2 = orient(p1, q1, q2);
        let o3 = orient(p2, q2, p1);
        let o4 = orient(p2, q2, q1);
        if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
            return 0.0;
        }
        [
            point_segment_distance(p1, p2, q2),
            point_segment_distance(q1, p2, q2),
            point_segment_distance(p2, p1, q1),
            point_segment_distance(q2, p1, q1),
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min)
    }

    // Oracle: an edge is Delaunay iff some triangle through it has an empty
    // circumcircle (random points are in general position).
    fn oracle_delaunay_edges(pts: &[Vec2]) -> HashSet<(usize, usize)> {
        let n = pts.len();
        let mut edges = HashSet::new();
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let (a, b, c) = (pts[i], pts[j], pts[k]);
                    let d = 2.0 * (a.x * (b.y - c.y) + b.x * (c.y - a.y) + c.x * (a.y - b.y));
                    if d.abs() < 1e-12 {
                        continue;
                    }
                    let ux = (a.norm_sq() * (b.y - c.y) + b.norm_sq() * (c.y - a.y) + c.norm_sq() * (a.y - b.y)) / d;
                    let uy = (a.norm_sq() * (c.x - b.x) + b.norm_sq() * (a.x - c.x) + c.norm_sq() * (b.x - a.x)) / d;
                    let center = Vec2::new(ux, uy);
                    let r = center.distance(a);
                    let empty = (0..n)
                        .filter(|&m| m != i && m != j && m != k)
                        .all(|m| pts[m].distance(center) > r * (1.0 + 1e-12));
                    if empty {
                        edges.insert((i, j));
                        edges.insert((j, k));
                        edges.insert((i, k));
                    }
                }
            }
        }
        edges
    }

    fn random_cells(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Cell> {
        (0..n)
            .map(|i| {
                let c = Vec2::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent));
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                Cell::capsule(i, c, angle, rng.random_range(8.0..30.0), rng.random_range(4.0..9.0)).unwrap()
            })
            .collect()
    }

    #[test]
    fn collinear_pixels() {
        let cell = cell_from_pixels("a", &[(0, 0), (1, 0), (2, 0), (3, 0)]).unwrap();
        assert!((cell.center - Vec2::new(1.5, 0.0)).norm() < 1e-12);
        assert!((cell.axis_dir - Vec2::new(1.0, 0.0)).norm() < 1e-12);
        assert!((cell.endpoints.0 - Vec2::new(0.0, 0.0)).norm() < 1e-12);
        assert!((cell.endpoints.1 - Vec2::new(3.0, 0.0)).norm() < 1e-12);
        assert_eq!(cell.width, 1.0);
    }

    #[test]
    fn symmetric_block_pixels() {
        let pixels: Vec<_> = (0..4).flat_map(|x| (0..2).map(move |y| (x, y))).collect();
        let cell = cell_from_pixels("b", &pixels).unwrap();
        assert!((cell.center - Vec2::new(1.5, 0.5)).norm() < 1e-12);
        assert!(cell.axis_dir.y.abs() < 1e-12 && (cell.axis_dir.x.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_pixels() {
        assert!(matches!(cell_from_pixels("x", &[(3, 3)]), Err(TrackError::DegenerateCell(_))));
        assert!(matches!(cell_from_pixels("x", &[(3, 3), (3, 3)]), Err(TrackError::DegenerateCell(_))));
        assert!(cell_from_pixels("x", &[]).is_err());
    }

    fn rasterize_capsule(center: Vec2, angle: f64, length: f64, width: f64) -> Vec<(i64, i64)> {
        let dir = Vec2::new(angle.cos(), angle.sin());
        let (e, h) = (center - dir * (0.5 * length), center + dir * (0.5 * length));
        let reach = 0.5 * (length + width) + 2.0;
        let mut out = Vec::new();
        for x in (center.x - reach).floor() as i64..=(center.x + reach).ceil() as i64 {
            for y in (center.y - reach).floor() as i64..=(center.y + reach).ceil() as i64 {
                if point_segment_distance(Vec2::new(x as f64, y as f64), e, h) <= 0.5 * width {
                    out.push((x, y));
                }
            }
        }
        out
    }

    #[test]
    fn rotated_capsule_raster_recovers_axis() {
        let theta = 30f64.to_radians();
        let pixels = rasterize_capsule(Vec2::new(50.3, 40.7), theta, 20.0, 6.0);
        let cell = cell_from_pixels("r", &pixels).unwrap();
        let recovered = line_angle(cell.axis_dir, Vec2::new(theta.cos(), theta.sin()));
        assert!(recovered < 2f64.to_radians(), "axis off by {} deg", recovered.to_degrees());
        assert!(cell.center.distance(Vec2::new(50.3, 40.7)) < 0.5);
    }

    #[test]
    fn two_isolated_cells_are_neighbors() {
        let a = Cell::capsule(0, Vec2::new(100.0, 100.0), 0.0, 10.0, 5.0).unwrap();
        let b = Cell::capsule(1, Vec2::new(150.0, 100.0), 0.0, 10.0, 5.0).unwrap();
        let g = build_neighbor_graph(&frame_of(vec![a, b]), 80.0);
        assert!(g.are_neighbors(0, 1));
    }

    #[test]
    fn blocking_cell_breaks_neighborhood() {
        let a = Cell::capsule(0, Vec2::new(100.0, 100.0), 0.0, 10.0, 5.0).unwrap();
        let b = Cell::capsule(1, Vec2::new(150.0, 100.0), 0.0, 10.0, 5.0).unwrap();
        let blocker = Cell::capsule(2, Vec2::new(125.0, 100.0), std::f64::consts::FRAC_PI_2, 30.0, 5.0).unwrap();
        let g = build_neighbor_graph(&frame_of(vec![a, b, blocker]), 80.0);
        assert!(!g.are_neighbors(0, 1));
        assert!(g.are_neighbors(0, 2) && g.are_neighbors(1, 2));
    }

    #[test]
    fn rho_bound_cuts_long_edges() {
        let a = Cell::capsule(0, Vec2::new(100.0, 100.0), 0.0, 10.0, 5.0).unwrap();
        let b = Cell::capsule(1, Vec2::new(190.0, 100.0), 0.0, 10.0, 5.0).unwrap();
        assert!(!build_neighbor_graph(&frame_of(vec![a.clone(), b.clone()]), 80.0).are_neighbors(0, 1));
        assert!(build_neighbor_graph(&frame_of(vec![a, b]), 90.0).are_neighbors(0, 1));
    }

    #[test]
    fn collinear_centers_fall_back_to_all_pairs() {
        let cells: Vec<_> = (0..4)
            .map(|i| Cell::capsule(i, Vec2::new(100.0 + 30.0 * i as f64, 200.0), std::f64::consts::FRAC_PI_2, 6.0, 4.0).unwrap())
            .collect();
        let g = build_neighbor_graph(&frame_of(cells), 80.0);
        // Middle cells block the 0-2, 1-3 and 0-3 segments.
        let mut edges: Vec<_> = g.edges().collect();
        edges.sort();
        assert_eq!(edges, vec![(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn segment_distance_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20_000 {
            let mut p = || Vec2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let (a, b, c, d) = (p(), p(), p(), p());
            let fast = segment_distance(a, b, c, d);
            let slow = oracle_segment_distance(a, b, c, d);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn neighbor_graph_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let cells = random_cells(&mut rng, 20, 200.0);
            let frame = frame_of(cells.clone());
            let rho = 80.0;
            let graph = build_neighbor_graph(&frame, rho);
            let centers = frame.centers();
            let delaunay = oracle_delaunay_edges(&centers);
            for i in 0..20 {
                for j in i + 1..20 {
                    let clear = (0..20).filter(|&k| k != i && k != j).all(|k| {
                        let (e, h) = cells[k].endpoints;
                        oracle_segment_distance(centers[i], centers[j], e, h) >= 0.5 * cells[k].width
                    });
                    let expected = delaunay.contains(&(i, j)) && clear && centers[i].distance(centers[j]) <= rho;
                    assert_eq!(graph.are_neighbors(i, j), expected, "pair ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn target_window_boundaries() {
        let src = Cell::capsule("s", Vec2::new(200.0, 200.0), 0.0, 10.0, 5.0).unwrap();
        let inside = Cell::capsule("a", Vec2::new(249.0, 249.0), 0.0, 10.0, 5.0).unwrap();
        let edge = Cell::capsule("b", Vec2::new(250.0, 150.0), 0.0, 10.0, 5.0).unwrap();
        let outside = Cell::capsule("c", Vec2::new(251.0, 200.0), 0.0, 10.0, 5.0).unwrap();
        let next = frame_of(vec![inside, edge, outside]);
        assert_eq!(target_window(&src, &next, 100.0), vec![0, 1]);
        assert!(target_window(&src, &next, 10.0).is_empty());
    }

    #[test]
    fn line_angle_range() {
        let x = Vec2::new(1.0, 0.0);
        assert!((line_angle(x, Vec2::new(0.0, 3.0)) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!(line_angle(x, Vec2::new(-2.0, 0.0)).abs() < 1e-15);
        assert!((line_angle(x, Vec2::new(-1.0, 1.0)) - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
        assert_eq!(line_angle(x, Vec2::ZERO), 0.0);
    }

    #[test]
    fn frame_validation() {
        let a = Cell::capsule("a", Vec2::new(10.0, 10.0), 0.0, 4.0, 2.0).unwrap();
        let far = Cell::capsule("b", Vec2::new(110.0, 10.0), 0.0, 4.0, 2.0).unwrap();
        assert!(Frame::new(0, vec![a.clone(), a.clone()], Rect::from_size(50.0, 50.0)).is_err());
        assert!(Frame::new(0, vec![a, far], Rect::from_size(50.0, 50.0)).is_err());
    }

    proptest! {
        #[test]
        fn pixel_cells_translate_rigidly(
            pts in prop::collection::vec((0i64..30, 0i64..8), 6..40),
            dx in -500i64..500, dy in -500i64..500,
        ) {
            let Ok(base) = cell_from_pixels("p", &pts) else { return Ok(()); };
            let moved: Vec<_> = pts.iter().map(|&(x, y)| (x + dx, y + dy)).collect();
            let shifted = cell_from_pixels("p", &moved).unwrap();
            let off = Vec2::new(dx as f64, dy as f64);
            prop_assert!((shifted.center - base.center - off).norm() < 1e-9);
            prop_assert!((shifted.endpoints.0 - base.endpoints.0 - off).norm() < 1e-9);
            prop_assert!((shifted.endpoints.1 - base.endpoints.1 - off).norm() < 1e-9);
            prop_assert!((shifted.width - base.width).abs() < 1e-9);
            prop_assert!((shifted.length - base.length).abs() < 1e-9);
        }

        #[test]
        fn window_is_monotone_in_width(seed in any::<u64>(), w1 in 1.0f64..150.0, extra in 0.0f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let next = frame_of(random_cells(&mut rng, 30, 300.0));
            let src = Cell::capsule("s", Vec2::new(150.0, 150.0), 0.0, 10.0, 4.0).unwrap();
            let small = target_window(&src, &next, w1);
            let large = target_window(&src, &next, w1 + extra);
            prop_assert!(small.iter().all(|i| large.contains(i)));
        }
    }
}
