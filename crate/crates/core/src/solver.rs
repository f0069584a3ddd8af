//! Shortest paths on the realized speed field.
//!
//! Distances are computed by Dijkstra on a 16-neighbor stencil (axis,
//! diagonal and knight moves; worst-case directional overhead 2.8%). Edge
//! weights are trapezoid line integrals of the field along the edge,
//! refined to sample spacing h/2 with bilinear interpolation, and then
//! rounded up onto a 2^-33 grid. Since every weight is a dyadic rational
//! and path sums stay far below 2^20, all path sums are exact in f64:
//! metric identities (symmetry, triangle inequality, predecessor
//! optimality) hold bit-exactly rather than up to rounding.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{CoreError, Result};
use crate::field::ScalarField;
use crate::geom::{Point, Rect};

/// Weight resolution: weights are multiples of 2^-33.
const QUANT: f64 = 8589934592.0; // 2^33

/// Rounds a nonnegative weight up to the quantization grid.
#[inline]
pub(crate) fn quantize_up(w: f64) -> f64 {
    (w * QUANT).ceil() / QUANT
}

/// Base stencil directions; the full neighborhood is these and their
/// negations. Every base direction points toward the lexicographically
/// larger endpoint, so orienting an edge by its base direction fixes a
/// canonical evaluation order.
pub(crate) const STENCIL: [(i64, i64); 8] =
    [(1, 0), (0, 1), (1, 1), (1, -1), (2, 1), (1, 2), (2, -1), (1, -2)];

/// Subdivision count per direction: ceil(2 * |direction|) pieces keeps the
/// sample spacing at or below h/2.
const PIECES: [usize; 8] = [2, 2, 3, 3, 5, 5, 5, 5];

struct SamplePlan {
    /// For each sample point along the edge: the bilinear corners with
    /// nonzero weight, as (node offset dx, node offset dy, weight). Corners
    /// with zero weight are dropped so referenced nodes always stay inside
    /// the bounding box of the edge's endpoints.
    samples: Vec<Vec<(i64, i64, f64)>>,
    /// Trapezoid coefficient per sample (1/2 at the ends, 1 inside).
    coeff: Vec<f64>,
    length_cells: f64,
}

fn sample_plans() -> Vec<SamplePlan> {
    STENCIL
        .iter()
        .zip(PIECES)
        .map(|(&(dx, dy), pieces)| {
            let length_cells = ((dx * dx + dy * dy) as f64).sqrt();
            let mut samples = Vec::with_capacity(pieces + 1);
            let mut coeff = Vec::with_capacity(pieces + 1);
            for k in 0..=pieces {
                let t = k as f64 / pieces as f64;
                let fx = t * dx as f64;
                let fy = t * dy as f64;
                let cx = fx.floor() as i64;
                let cy = fy.floor() as i64;
                let tx = fx - cx as f64;
                let ty = fy - cy as f64;
                let full = [
                    (cx, cy, (1.0 - tx) * (1.0 - ty)),
                    (cx + 1, cy, tx * (1.0 - ty)),
                    (cx, cy + 1, (1.0 - tx) * ty),
                    (cx + 1, cy + 1, tx * ty),
                ];
                samples.push(full.into_iter().filter(|&(_, _, w)| w != 0.0).collect());
                coeff.push(if k == 0 || k == pieces { 0.5 } else { 1.0 });
            }
            SamplePlan { samples, coeff, length_cells }
        })
        .collect()
}

/// A rectangular window of grid nodes inside a field; the node set on which
/// one solve operates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub ix0: usize,
    pub iy0: usize,
    pub nx: usize,
    pub ny: usize,
}

impl Window {
    pub fn full(field: &ScalarField) -> Window {
        Window { ix0: 0, iy0: 0, nx: field.nx(), ny: field.ny() }
    }

    /// Nodes of `field` lying inside `rect` (closed). Errors when empty.
    pub fn from_mask(field: &ScalarField, rect: &Rect) -> Result<Window> {
        let h = field.spacing();
        let o = field.origin();
        let eps = 1e-9;
        let ix0 = (((rect.x_min - o.x) / h) - eps).ceil().max(0.0) as usize;
        let iy0 = (((rect.y_min - o.y) / h) - eps).ceil().max(0.0) as usize;
        let ix1 = ((((rect.x_max - o.x) / h) + eps).floor()).min((field.nx() - 1) as f64);
        let iy1 = ((((rect.y_max - o.y) / h) + eps).floor()).min((field.ny() - 1) as f64);
        if ix1 < ix0 as f64 || iy1 < iy0 as f64 {
            return Err(CoreError::RegionTooSmall("mask contains no grid nodes".into()));
        }
        Ok(Window { ix0, iy0, nx: ix1 as usize - ix0 + 1, ny: iy1 as usize - iy0 + 1 })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub(crate) fn local(&self, ix: usize, iy: usize) -> Option<u32> {
        if ix < self.ix0 || iy < self.iy0 {
            return None;
        }
        let lx = ix - self.ix0;
        let ly = iy - self.iy0;
        if lx < self.nx && ly < self.ny {
            Some((ly * self.nx + lx) as u32)
        } else {
            None
        }
    }

    #[inline]
    pub(crate) fn field_coords(&self, local: u32) -> (usize, usize) {
        let lx = local as usize % self.nx;
        let ly = local as usize / self.nx;
        (self.ix0 + lx, self.iy0 + ly)
    }
}

/// Precomputed quantized edge weights for one window of one field:
/// `weights[d * n + local]` is the weight of the edge from `local` along
/// base direction d (infinity when the neighbor leaves the window).
pub struct EdgeWeights {
    pub window: Window,
    weights: Vec<f64>,
}

pub fn compute_edge_weights(field: &ScalarField, window: Window) -> EdgeWeights {
    let plans = sample_plans();
    let n = window.len();
    let h = field.spacing();
    let fnx = field.nx();
    let vals = field.values();
    let mut weights = vec![f64::INFINITY; 8 * n];
    for (d, plan) in plans.iter().enumerate() {
        let (dx, dy) = STENCIL[d];
        let piece_len = plan.length_cells * h / (plan.samples.len() - 1) as f64;
        for ly in 0..window.ny {
            let to_y = ly as i64 + dy;
            if to_y < 0 || to_y >= window.ny as i64 {
                continue;
            }
            for lx in 0..window.nx {
                let to_x = lx as i64 + dx;
                if to_x < 0 || to_x >= window.nx as i64 {
                    continue;
                }
                let ix = window.ix0 + lx;
                let iy = window.iy0 + ly;
                let base = (iy * fnx + ix) as i64;
                let mut acc = 0.0;
                for (s, corners) in plan.samples.iter().enumerate() {
                    let mut v = 0.0;
                    for &(cx, cy, w) in corners {
                        v += w * vals[(base + cy * fnx as i64 + cx) as usize];
                    }
                    acc += plan.coeff[s] * v;
                }
                weights[d * n + ly * window.nx + lx] = quantize_up(acc * piece_len);
            }
        }
    }
    EdgeWeights { window, weights }
}

/// The weight of a single stencil edge, recomputed standalone (test oracle
/// for the predecessor identity; matches `compute_edge_weights` bit-exactly).
pub fn stencil_edge_weight(field: &ScalarField, a: (usize, usize), b: (usize, usize)) -> Option<f64> {
    let (dxr, dyr) = (b.0 as i64 - a.0 as i64, b.1 as i64 - a.1 as i64);
    let (from, dx, dy) = if STENCIL.contains(&(dxr, dyr)) {
        (a, dxr, dyr)
    } else if STENCIL.contains(&(-dxr, -dyr)) {
        (b, -dxr, -dyr)
    } else {
        return None;
    };
    let d = STENCIL.iter().position(|&p| p == (dx, dy)).unwrap();
    let plan = &sample_plans()[d];
    let h = field.spacing();
    let piece_len = plan.length_cells * h / (plan.samples.len() - 1) as f64;
    let fnx = field.nx();
    let vals = field.values();
    let base = (from.1 * fnx + from.0) as i64;
    let mut acc = 0.0;
    for (s, corners) in plan.samples.iter().enumerate() {
        let mut v = 0.0;
        for &(cx, cy, w) in corners {
            v += w * vals[(base + cy * fnx as i64 + cx) as usize];
        }
        acc += plan.coeff[s] * v;
    }
    Some(quantize_up(acc * piece_len))
}

const NO_PRED: u32 = u32::MAX;

#[inline]
fn heap_key(x: f64) -> u64 {
    let bits = x.to_bits();
    if bits >> 63 == 0 {
        bits | 0x8000_0000_0000_0000
    } else {
        !bits
    }
}

/// Output of one Dijkstra solve on a window.
pub struct SolveOut {
    pub dist: Vec<f64>,
    pub pred: Vec<u32>,
}

/// Multi-source Dijkstra with per-source offsets. Stops early once every
/// index in `targets` is settled (when provided). Predecessor ties are
/// resolved toward the neighbor with larger y, then smaller x, so the traced
/// path is the grid analogue of the topmost geodesic; the resolution is a
/// maximum over all tight incoming edges and does not depend on pop order.
pub fn solve(ew: &EdgeWeights, sources: &[(u32, f64)], targets: Option<&[u32]>) -> SolveOut {
    let w = &ew.window;
    let n = w.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![NO_PRED; n];
    let mut settled = vec![false; n];
    let mut heap: BinaryHeap<Reverse<(u64, u32)>> = BinaryHeap::new();
    for &(s, offset) in sources {
        if offset < dist[s as usize] {
            dist[s as usize] = offset;
            heap.push(Reverse((heap_key(offset), s)));
        }
    }
    let mut remaining = targets.map(|t| {
        let mut is_target = vec![false; n];
        let mut count = 0usize;
        for &ti in t {
            if !is_target[ti as usize] {
                is_target[ti as usize] = true;
                count += 1;
            }
        }
        (is_target, count)
    });

    // Tie preference between two candidate predecessors.
    let prefer = |cand: u32, cur: u32, nx: usize| -> bool {
        if cur == NO_PRED {
            return true;
        }
        let (cy, cx) = (cand as usize / nx, cand as usize % nx);
        let (uy, ux) = (cur as usize / nx, cur as usize % nx);
        cy > uy || (cy == uy && cx < ux)
    };

    while let Some(Reverse((key, u))) = heap.pop() {
        let ui = u as usize;
        if settled[ui] || key != heap_key(dist[ui]) {
            continue; // stale entry
        }
        settled[ui] = true;
        if let Some((is_target, count)) = remaining.as_mut() {
            if is_target[ui] {
                *count -= 1;
                if *count == 0 {
                    break;
                }
            }
        }
        let lx = ui % w.nx;
        let ly = ui / w.nx;
        let du = dist[ui];
        for d in 0..8 {
            let (dx, dy) = STENCIL[d];
            // Forward edge u -> u + dir.
            let fx = lx as i64 + dx;
            let fy = ly as i64 + dy;
            if fx >= 0 && fy >= 0 && (fx as usize) < w.nx && (fy as usize) < w.ny {
                let v = (fy as usize * w.nx + fx as usize) as u32;
                let wt = ew.weights[d * n + ui];
                let nd = du + wt;
                let vi = v as usize;
                if nd < dist[vi] {
                    dist[vi] = nd;
                    pred[vi] = u;
                    heap.push(Reverse((heap_key(nd), v)));
                } else if nd == dist[vi] && prefer(u, pred[vi], w.nx) {
                    pred[vi] = u;
                }
            }
            // Backward edge u -> u - dir, whose weight is stored at the neighbor.
            let bx = lx as i64 - dx;
            let by = ly as i64 - dy;
            if bx >= 0 && by >= 0 && (bx as usize) < w.nx && (by as usize) < w.ny {
                let v = (by as usize * w.nx + bx as usize) as u32;
                let vi = v as usize;
                let wt = ew.weights[d * n + vi];
                let nd = du + wt;
                if nd < dist[vi] {
                    dist[vi] = nd;
                    pred[vi] = u;
                    heap.push(Reverse((heap_key(nd), v)));
                } else if nd == dist[vi] && prefer(u, pred[vi], w.nx) {
                    pred[vi] = u;
                }
            }
        }
    }
    SolveOut { dist, pred }
}

/// Single-source passage times from `source` to every node of the window,
/// with predecessors for geodesic tracing.
#[derive(Debug, Clone)]
pub struct ArrivalMap {
    pub source: Point,
    pub snap_distance: f64,
    window: Window,
    origin: Point,
    spacing: f64,
    times: Vec<f64>,
    preds: Vec<u32>,
}

impl ArrivalMap {
    pub fn window(&self) -> Window {
        self.window
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    fn node_point(&self, local: u32) -> Point {
        let (ix, iy) = self.window.field_coords(local);
        Point::new(self.origin.x + ix as f64 * self.spacing, self.origin.y + iy as f64 * self.spacing)
    }

    fn local_of_point(&self, p: &Point) -> Result<(u32, f64)> {
        let fx = ((p.x - self.origin.x) / self.spacing).round();
        let fy = ((p.y - self.origin.y) / self.spacing).round();
        let ix = fx.max(0.0) as usize;
        let iy = fy.max(0.0) as usize;
        let local = self
            .window
            .local(ix, iy)
            .ok_or(CoreError::OutsideMask { x: p.x, y: p.y })?;
        let snapped = self.node_point(local);
        Ok((local, snapped.dist(p)))
    }

    /// Arrival time at the node nearest to `p`.
    pub fn time_at(&self, p: &Point) -> Result<f64> {
        let (local, _snap) = self.local_of_point(p)?;
        let t = self.times[local as usize];
        if t.is_finite() {
            Ok(t)
        } else {
            Err(CoreError::NoPath)
        }
    }
}

/// A traced minimizing polyline between stencil-adjacent grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicPath {
    pub vertices: Vec<Point>,
    pub total_weight: f64,
}

impl GeodesicPath {
    pub fn start(&self) -> Point {
        self.vertices[0]
    }

    pub fn end(&self) -> Point {
        *self.vertices.last().unwrap()
    }

    /// CSV polyline: x,y per row.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,y")?;
        for v in &self.vertices {
            writeln!(w, "{},{}", v.x, v.y)?;
        }
        Ok(())
    }
}

/// Exact shortest-path arrival map from `source`, optionally masked to a
/// rectangle. Only nodes inside the mask participate.
pub fn arrival_map(field: &ScalarField, source: &Point, mask: Option<&Rect>) -> Result<ArrivalMap> {
    if !field.region().dilate(1e-9).contains(source) {
        return Err(CoreError::OutsideRegion { x: source.x, y: source.y });
    }
    if let Some(rect) = mask {
        if !rect.contains(source) {
            return Err(CoreError::OutsideMask { x: source.x, y: source.y });
        }
    }
    let window = match mask {
        Some(rect) => Window::from_mask(field, rect)?,
        None => Window::full(field),
    };
    let ew = compute_edge_weights(field, window);
    arrival_map_on(field, &ew, source)
}

/// As `arrival_map` but against precomputed edge weights.
pub fn arrival_map_on(field: &ScalarField, ew: &EdgeWeights, source: &Point) -> Result<ArrivalMap> {
    let window = ew.window;
    let (ix, iy, snap) = field.nearest_node(source)?;
    let local = window
        .local(ix, iy)
        .ok_or(CoreError::OutsideMask { x: source.x, y: source.y })?;
    let out = solve(ew, &[(local, 0.0)], None);
    Ok(ArrivalMap {
        source: *source,
        snap_distance: snap,
        window,
        origin: field.origin(),
        spacing: field.spacing(),
        times: out.dist,
        preds: out.pred,
    })
}

/// First passage time between two points (snapped to nearest nodes). The
/// query is canonicalized to run from the lexicographically smaller
/// endpoint, so symmetry holds bit-exactly.
pub fn passage_time(field: &ScalarField, u: &Point, v: &Point) -> Result<f64> {
    let (a, b) = if (u.x, u.y) <= (v.x, v.y) { (u, v) } else { (v, u) };
    let window = Window::full(field);
    let ew = compute_edge_weights(field, window);
    passage_time_on(field, &ew, a, b)
}

/// Passage time against precomputed weights (no canonicalization; callers
/// that need exact symmetry order the endpoints first).
pub fn passage_time_on(field: &ScalarField, ew: &EdgeWeights, u: &Point, v: &Point) -> Result<f64> {
    let (uix, uiy, _) = field.nearest_node(u)?;
    let (vix, viy, _) = field.nearest_node(v)?;
    let w = ew.window;
    let su = w.local(uix, uiy).ok_or(CoreError::OutsideMask { x: u.x, y: u.y })?;
    let tv = w.local(vix, viy).ok_or(CoreError::OutsideMask { x: v.x, y: v.y })?;
    let out = solve(ew, &[(su, 0.0)], Some(&[tv]));
    let t = out.dist[tv as usize];
    if t.is_finite() {
        Ok(t)
    } else {
        Err(CoreError::NoPath)
    }
}

/// Rectangle-constrained passage time; always at least the unconstrained one.
pub fn constrained_passage_time(field: &ScalarField, u: &Point, v: &Point, rect: &Rect) -> Result<f64> {
    if !rect.contains(u) {
        return Err(CoreError::OutsideMask { x: u.x, y: u.y });
    }
    if !rect.contains(v) {
        return Err(CoreError::OutsideMask { x: v.x, y: v.y });
    }
    let (a, b) = if (u.x, u.y) <= (v.x, v.y) { (u, v) } else { (v, u) };
    let window = Window::from_mask(field, rect)?;
    let ew = compute_edge_weights(field, window);
    passage_time_on(field, &ew, a, b)
}

/// Follows predecessors from `target` back to the map's source.
pub fn trace_geodesic(map: &ArrivalMap, target: &Point) -> Result<GeodesicPath> {
    let (mut local, _snap) = map.local_of_point(target)?;
    if !map.times[local as usize].is_finite() {
        return Err(CoreError::NoPath);
    }
    let total_weight = map.times[local as usize];
    let mut vertices = vec![map.node_point(local)];
    while map.preds[local as usize] != NO_PRED {
        local = map.preds[local as usize];
        vertices.push(map.node_point(local));
    }
    vertices.reverse();
    Ok(GeodesicPath { vertices, total_weight })
}

/// Trapezoid line integral of the field along a polyline. Each segment is
/// subdivided to length at most h/2, sampled bilinearly, evaluated from its
/// lexicographically smaller endpoint, and rounded onto the weight grid, so
/// concatenation additivity and reversal invariance are exact.
pub fn path_weight(field: &ScalarField, polyline: &[Point]) -> Result<f64> {
    if polyline.len() < 2 {
        return Ok(0.0);
    }
    let region = field.region().dilate(1e-9);
    for p in polyline {
        if !region.contains(p) {
            return Err(CoreError::OutsideRegion { x: p.x, y: p.y });
        }
    }
    let h = field.spacing();
    let mut total = 0.0;
    for w in polyline.windows(2) {
        let (mut a, mut b) = (w[0], w[1]);
        if (b.x, b.y) < (a.x, a.y) {
            std::mem::swap(&mut a, &mut b);
        }
        let len = a.dist(&b);
        if len == 0.0 {
            continue;
        }
        let pieces = (len / (h / 2.0)).ceil().max(1.0) as usize;
        let mut acc = 0.0;
        for k in 0..=pieces {
            let t = k as f64 / pieces as f64;
            let p = Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
            let v = field.bilinear(&p)?;
            acc += if k == 0 || k == pieces { 0.5 * v } else { v };
        }
        total += quantize_up(acc * (len / pieces as f64));
    }
    Ok(total)
}

/// Maximum perpendicular distance from the geodesic's vertices to the
/// segment between its endpoints.
pub fn transversal_fluctuation(geo: &GeodesicPath, u: &Point, v: &Point) -> f64 {
    let mut best: f64 = 0.0;
    let (dx, dy) = (v.x - u.x, v.y - u.y);
    let len2 = dx * dx + dy * dy;
    for p in &geo.vertices {
        let d = if len2 == 0.0 {
            p.dist(u)
        } else {
            let t = (((p.x - u.x) * dx + (p.y - u.y) * dy) / len2).clamp(0.0, 1.0);
            p.dist(&Point::new(u.x + t * dx, u.y + t * dy))
        };
        best = best.max(d);
    }
    best
}
