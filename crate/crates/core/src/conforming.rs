//! Restricted distances over conforming paths.
//!
//! The plane is cut into width-n columns, each carrying its own independent
//! copy of the environment. A conforming path crosses each interior column
//! boundary once, inside a bounded strip, and its weight is the sum of
//! per-column weights evaluated in that column's own field. The restricted
//! distance is the infimum over conforming paths, realized here as a chain
//! of masked shortest-path solves over mesh nodes on the boundary lines.
//! All chained sums are exact (the solver quantizes edge weights), so the
//! chain value equals brute-force enumeration over crossing tuples bit for
//! bit, and the canonical topmost crossing selection can test optimality by
//! exact equality.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::field::{EnvironmentSpec, FieldRealization, NoiseRealization, ScalarField};
use crate::geom::{Point, Rect};
use crate::rng::{role, stream_seed};
use crate::solver::{
    self, arrival_map_on, compute_edge_weights, trace_geodesic, EdgeWeights, GeodesicPath, Window,
};

const ALIGN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnCoupling {
    /// Each column carries an independently seeded field copy.
    Independent,
    /// Every column field is the restriction of one shared base field
    /// (oracle mode: conforming and unrestricted distances live on the
    /// same randomness).
    Identical,
}

/// Per-column independent field copies over a bounded strip.
pub struct ColumnEnvironment {
    template: EnvironmentSpec,
    column_width: f64,
    strip_half_height: f64,
    num_columns: usize,
    coupling: ColumnCoupling,
    /// columns[c - 1] covers [(c-1)n - pad, cn + pad] x [-S, S].
    columns: Vec<FieldRealization>,
    /// Present under identical coupling: the shared global realization.
    shared_base: Option<FieldRealization>,
}

impl ColumnEnvironment {
    /// Builds the enlarged environment: `num_columns` columns of width `n`
    /// covering [0, n*num_columns], each field generated on the column
    /// dilated by the kernel radius so that boundary values are unbiased.
    pub fn build(
        template: &EnvironmentSpec,
        n: f64,
        num_columns: usize,
        strip_half_height: f64,
        coupling: ColumnCoupling,
        master_seed: u64,
    ) -> Result<ColumnEnvironment> {
        let h = template.grid_spacing;
        if n <= 0.0 || (n / h - (n / h).round()).abs() > ALIGN_EPS {
            return Err(CoreError::Config(format!(
                "column width {n} must be a positive multiple of grid_spacing {h}"
            )));
        }
        if num_columns == 0 {
            return Err(CoreError::Config("need at least one column".into()));
        }
        let snap_up = |v: f64| (v / h - ALIGN_EPS).ceil() * h;
        let strip = snap_up(strip_half_height.max(2.0 * h));
        let pad = snap_up(template.kernel.radius);
        let col_region = |c: usize| Rect {
            x_min: (c as f64 - 1.0) * n - pad,
            x_max: c as f64 * n + pad,
            y_min: -strip,
            y_max: strip,
        };
        let (columns, shared_base) = match coupling {
            ColumnCoupling::Independent => {
                let cols = (1..=num_columns)
                    .map(|c| {
                        let spec = template
                            .with_region(col_region(c))
                            .with_seed(stream_seed(master_seed, &[role::FIELD, c as u64]));
                        crate::field::realize_environment(&spec)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (cols, None)
            }
            ColumnCoupling::Identical => {
                let global_region = Rect {
                    x_min: -pad,
                    x_max: num_columns as f64 * n + pad,
                    y_min: -strip,
                    y_max: strip,
                };
                let spec = template
                    .with_region(global_region)
                    .with_seed(stream_seed(master_seed, &[role::FIELD, 0]));
                let shared = crate::field::realize_environment(&spec)?;
                let cols = (1..=num_columns)
                    .map(|c| restrict_realization(&shared, &col_region(c)))
                    .collect::<Result<Vec<_>>>()?;
                (cols, Some(shared))
            }
        };
        Ok(ColumnEnvironment {
            template: *template,
            column_width: n,
            strip_half_height: strip,
            num_columns,
            coupling,
            columns,
            shared_base,
        })
    }

    /// Wraps an identical-coupling environment around an existing global
    /// realization (the caller keeps the unrestricted distances on the same
    /// randomness).
    pub fn from_shared(
        shared: FieldRealization,
        n: f64,
        num_columns: usize,
        strip_half_height: f64,
    ) -> Result<ColumnEnvironment> {
        let h = shared.spec.grid_spacing;
        let snap_up = |v: f64| (v / h - ALIGN_EPS).ceil() * h;
        let strip = snap_up(strip_half_height.max(2.0 * h));
        let pad = snap_up(shared.spec.kernel.radius);
        let cols = (1..=num_columns)
            .map(|c| {
                restrict_realization(
                    &shared,
                    &Rect {
                        x_min: (c as f64 - 1.0) * n - pad,
                        x_max: c as f64 * n + pad,
                        y_min: -strip,
                        y_max: strip,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ColumnEnvironment {
            template: shared.spec,
            column_width: n,
            strip_half_height: strip,
            num_columns,
            coupling: ColumnCoupling::Identical,
            columns: cols,
            shared_base: Some(shared),
        })
    }

    pub fn template(&self) -> &EnvironmentSpec {
        &self.template
    }

    pub fn column_width(&self) -> f64 {
        self.column_width
    }

    pub fn strip_half_height(&self) -> f64 {
        self.strip_half_height
    }

    pub fn num_columns(&self) -> usize {
        self.num_columns
    }

    pub fn coupling(&self) -> ColumnCoupling {
        self.coupling
    }

    pub fn shared_base(&self) -> Option<&FieldRealization> {
        self.shared_base.as_ref()
    }

    /// The field copy of column c (1-based).
    pub fn column(&self, c: usize) -> &FieldRealization {
        &self.columns[c - 1]
    }

    /// Mask rectangle of column c: the column proper times the strip.
    pub fn column_rect(&self, c: usize) -> Rect {
        Rect {
            x_min: (c as f64 - 1.0) * self.column_width,
            x_max: c as f64 * self.column_width,
            y_min: -self.strip_half_height,
            y_max: self.strip_half_height,
        }
    }

    /// A copy of this environment with column c's realization replaced.
    pub fn with_column(&self, c: usize, real: FieldRealization) -> ColumnEnvironment {
        let mut columns = self.columns.clone();
        columns[c - 1] = real;
        ColumnEnvironment {
            template: self.template,
            column_width: self.column_width,
            strip_half_height: self.strip_half_height,
            num_columns: self.num_columns,
            coupling: self.coupling,
            columns,
            shared_base: self.shared_base.clone(),
        }
    }

    pub(crate) fn replace_columns(&self, columns: Vec<FieldRealization>) -> ColumnEnvironment {
        assert_eq!(columns.len(), self.num_columns);
        ColumnEnvironment {
            template: self.template,
            column_width: self.column_width,
            strip_half_height: self.strip_half_height,
            num_columns: self.num_columns,
            coupling: self.coupling,
            columns,
            shared_base: self.shared_base.clone(),
        }
    }
}

/// Restriction of a realization to a sub-region (noise window restricted
/// alongside), exact by construction.
pub fn restrict_realization(real: &FieldRealization, region: &Rect) -> Result<FieldRealization> {
    let spec = real.spec.with_region(*region);
    let h = spec.grid_spacing;
    let pad = (spec.kernel.radius / h).ceil() * h;
    let noise = match &real.noise {
        NoiseRealization::Gaussian(z) => NoiseRealization::Gaussian(z.restrict(&region.dilate(pad))?),
        NoiseRealization::Poisson(pts) => {
            let window = region.dilate(pad);
            NoiseRealization::Poisson(pts.iter().filter(|p| window.contains(p)).cloned().collect())
        }
    };
    Ok(FieldRealization {
        spec,
        noise,
        xi: real.xi.restrict(region)?,
        psi: real.psi.restrict(region)?,
    })
}

/// Mesh nodes discretizing the conforming crossing times on each boundary
/// line, spaced at most W/8 apart (snapped down onto the grid).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMesh {
    spacing: f64,
    y_values: Vec<f64>,
}

impl BoundaryMesh {
    /// `w` is the transversal fluctuation scale supplied by the caller.
    pub fn build(w: f64, strip_half_height: f64, grid_spacing: f64) -> Result<BoundaryMesh> {
        if !(w > 0.0) {
            return Err(CoreError::Config("mesh scale W must be positive".into()));
        }
        let cells = ((w / 8.0) / grid_spacing).floor().max(1.0);
        let spacing = cells * grid_spacing;
        if spacing > w / 8.0 + ALIGN_EPS {
            return Err(CoreError::Config(format!(
                "grid spacing {grid_spacing} too coarse to mesh W/8 = {}",
                w / 8.0
            )));
        }
        let k_max = (strip_half_height / spacing + ALIGN_EPS).floor() as i64;
        let y_values: Vec<f64> = (-k_max..=k_max).map(|k| k as f64 * spacing).collect();
        Ok(BoundaryMesh { spacing, y_values })
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn y_values(&self) -> &[f64] {
        &self.y_values
    }

    pub fn len(&self) -> usize {
        self.y_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_values.is_empty()
    }
}

/// A conforming geodesic: per-column segments chained at boundary crossings.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformingGeodesic {
    pub segments: Vec<GeodesicPath>,
    /// Interior crossings (c*n, y_c), ordered left to right.
    pub crossings: Vec<Point>,
    pub total_weight: f64,
    /// 1-based index of the leftmost column the geodesic occupies.
    pub first_column: usize,
}

impl ConformingGeodesic {
    pub fn start(&self) -> Point {
        self.segments[0].start()
    }

    pub fn end(&self) -> Point {
        self.segments.last().unwrap().end()
    }

    /// Column index (1-based) of segment s.
    pub fn column_of_segment(&self, s: usize) -> usize {
        self.first_column + s
    }

    /// CSV export: segment id, x, y.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "segment,x,y")?;
        for (s, seg) in self.segments.iter().enumerate() {
            for v in &seg.vertices {
                writeln!(w, "{},{},{}", s, v.x, v.y)?;
            }
        }
        Ok(())
    }
}

/// Floor index of a crossing height against the block scale W.
pub fn crossing_indices(geo: &ConformingGeodesic, w: f64) -> Vec<i64> {
    geo.crossings.iter().map(|p| (p.y / w).floor() as i64).collect()
}

/// Centered passage time: subtracts the horizontal span and the second-order
/// Taylor term of the Euclidean distance.
pub fn centered_passage(u: &Point, v: &Point, raw_time: f64) -> Result<f64> {
    let dx = v.x - u.x;
    if !(dx > 0.0) {
        return Err(CoreError::Domain(format!(
            "centered passage needs v strictly right of u (dx = {dx})"
        )));
    }
    let dy = u.y - v.y;
    Ok(raw_time - dx - dy * dy / (2.0 * dx))
}

/// Column assignment for a query pair; boundary points belong to both
/// adjacent columns and slide toward an ordering that works.
fn assign_columns(env: &ColumnEnvironment, u: &Point, v: &Point) -> Result<(usize, usize)> {
    let n = env.column_width();
    let s = env.strip_half_height();
    for p in [u, v] {
        if p.y.abs() > s + ALIGN_EPS
            || p.x < -ALIGN_EPS
            || p.x > env.num_columns() as f64 * n + ALIGN_EPS
        {
            return Err(CoreError::OutsideStrip { x: p.x, y: p.y });
        }
    }
    let on_boundary = |x: f64| {
        let b = (x / n).round();
        if (x - b * n).abs() < ALIGN_EPS {
            Some(b as i64)
        } else {
            None
        }
    };
    if let (Some(bu), Some(bv)) = (on_boundary(u.x), on_boundary(v.x)) {
        if bu == bv {
            return Err(CoreError::VerticalBoundaryPair { x: u.x });
        }
    }
    let m = env.num_columns() as i64;
    let mut cu = match on_boundary(u.x) {
        Some(b) => (b + 1).clamp(1, m),
        None => (u.x / n).ceil().max(1.0) as i64,
    };
    let mut cv = match on_boundary(v.x) {
        Some(b) => b.clamp(1, m),
        None => (v.x / n).ceil().max(1.0) as i64,
    };
    if cu > cv {
        if on_boundary(u.x).is_some() && cu - 1 >= 1 && cu - 1 <= cv {
            cu -= 1;
        } else if on_boundary(v.x).is_some() && cv + 1 <= m && cu <= cv + 1 {
            cv += 1;
        }
    }
    if cu > cv {
        return Err(CoreError::Precondition(format!(
            "u must lie in the same column as v or strictly left (columns {cu} vs {cv})"
        )));
    }
    Ok((cu as usize, cv as usize))
}

/// Chained solver with cached per-column masked edge weights.
pub struct ConformingSolver<'e> {
    pub env: &'e ColumnEnvironment,
    pub mesh: &'e BoundaryMesh,
    weights: Vec<EdgeWeights>,
}

impl<'e> ConformingSolver<'e> {
    pub fn new(env: &'e ColumnEnvironment, mesh: &'e BoundaryMesh) -> Result<ConformingSolver<'e>> {
        if mesh.spacing() > env.strip_half_height() {
            return Err(CoreError::Config("mesh spacing exceeds the strip".into()));
        }
        let weights = (1..=env.num_columns())
            .map(|c| {
                let rect = env.column_rect(c);
                let field = &env.column(c).psi;
                Ok(compute_edge_weights(field, Window::from_mask(field, &rect)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ConformingSolver { env, mesh, weights })
    }

    pub fn column_weights(&self, c: usize) -> &EdgeWeights {
        &self.weights[c - 1]
    }

    /// Masked edge weights for column c over a replacement field (same
    /// geometry, different realization).
    pub fn override_weights(&self, c: usize, field: &ScalarField) -> Result<EdgeWeights> {
        let rect = self.env.column_rect(c);
        Ok(compute_edge_weights(field, Window::from_mask(field, &rect)?))
    }

    fn mesh_locals(&self, c: usize, boundary: i64, ew: &EdgeWeights) -> Result<Vec<u32>> {
        let field = &self.env.column(c).psi;
        let x = boundary as f64 * self.env.column_width();
        self.mesh
            .y_values()
            .iter()
            .map(|&y| {
                let (ix, iy, snap) = field.nearest_node(&Point::new(x, y))?;
                debug_assert!(snap < ALIGN_EPS, "mesh node off grid");
                ew.window.local(ix, iy).ok_or(CoreError::OutsideMask { x, y })
            })
            .collect()
    }

    fn point_local(&self, c: usize, p: &Point, ew: &EdgeWeights) -> Result<u32> {
        let field = &self.env.column(c).psi;
        let (ix, iy, _snap) = field.nearest_node(p)?;
        ew.window.local(ix, iy).ok_or(CoreError::OutsideMask { x: p.x, y: p.y })
    }

    /// The restricted distance value. `override_col` substitutes one
    /// column's weights (the single-block resampling path).
    pub fn distance_with_override(
        &self,
        u: &Point,
        v: &Point,
        override_col: Option<(usize, &EdgeWeights)>,
    ) -> Result<f64> {
        let (cu, cv) = assign_columns(self.env, u, v)?;
        let pick = |c: usize| -> &EdgeWeights {
            match override_col {
                Some((oc, ow)) if oc == c => ow,
                _ => self.column_weights(c),
            }
        };
        if cu == cv {
            let ew = pick(cu);
            let su = self.point_local(cu, u, ew)?;
            let tv = self.point_local(cu, v, ew)?;
            let out = solver::solve(ew, &[(su, 0.0)], Some(&[tv]));
            let t = out.dist[tv as usize];
            return if t.is_finite() { Ok(t) } else { Err(CoreError::NoPath) };
        }
        let ew = pick(cu);
        let su = self.point_local(cu, u, ew)?;
        let targets = self.mesh_locals(cu, cu as i64, ew)?;
        let out = solver::solve(ew, &[(su, 0.0)], Some(&targets));
        let mut front: Vec<f64> = targets.iter().map(|&t| out.dist[t as usize]).collect();
        for c in cu + 1..cv {
            let ew = pick(c);
            let sources = self.mesh_locals(c, c as i64 - 1, ew)?;
            let targets = self.mesh_locals(c, c as i64, ew)?;
            let src: Vec<(u32, f64)> = sources
                .iter()
                .zip(&front)
                .filter(|(_, &d)| d.is_finite())
                .map(|(&s, &d)| (s, d))
                .collect();
            if src.is_empty() {
                return Err(CoreError::NoPath);
            }
            let out = solver::solve(ew, &src, Some(&targets));
            front = targets.iter().map(|&t| out.dist[t as usize]).collect();
        }
        let ew = pick(cv);
        let sources = self.mesh_locals(cv, cv as i64 - 1, ew)?;
        let tv = self.point_local(cv, v, ew)?;
        let src: Vec<(u32, f64)> = sources
            .iter()
            .zip(&front)
            .filter(|(_, &d)| d.is_finite())
            .map(|(&s, &d)| (s, d))
            .collect();
        if src.is_empty() {
            return Err(CoreError::NoPath);
        }
        let out = solver::solve(ew, &src, Some(&[tv]));
        let t = out.dist[tv as usize];
        if t.is_finite() {
            Ok(t)
        } else {
            Err(CoreError::NoPath)
        }
    }

    pub fn distance(&self, u: &Point, v: &Point) -> Result<f64> {
        self.distance_with_override(u, v, None)
    }

    /// The restricted distance plus its canonical geodesic. Among minimizing
    /// crossing sequences the topmost is selected, resolved left to right;
    /// optimality at each step is tested by exact equality, which the
    /// quantized weight arithmetic makes meaningful.
    pub fn geodesic(&self, u: &Point, v: &Point) -> Result<(f64, ConformingGeodesic)> {
        let (cu, cv) = assign_columns(self.env, u, v)?;
        if cu == cv {
            let ew = self.column_weights(cu);
            let field = &self.env.column(cu).psi;
            let map = arrival_map_on(field, ew, u)?;
            let seg = trace_geodesic(&map, v)?;
            let total = seg.total_weight;
            return Ok((
                total,
                ConformingGeodesic {
                    segments: vec![seg],
                    crossings: Vec::new(),
                    total_weight: total,
                    first_column: cu,
                },
            ));
        }
        let total = self.distance(u, v)?;
        // Backward vectors per boundary: B[bi][k] is the best completion
        // from mesh node k on boundary cu+bi to v.
        let n_bounds = cv - cu;
        let mut backward: Vec<Vec<f64>> = vec![Vec::new(); n_bounds];
        {
            let ew = self.column_weights(cv);
            let sv = self.point_local(cv, v, ew)?;
            let targets = self.mesh_locals(cv, cv as i64 - 1, ew)?;
            let out = solver::solve(ew, &[(sv, 0.0)], Some(&targets));
            backward[n_bounds - 1] = targets.iter().map(|&t| out.dist[t as usize]).collect();
        }
        for bi in (0..n_bounds - 1).rev() {
            let c = cu + bi + 1; // relax right-to-left through column c
            let ew = self.column_weights(c);
            let sources = self.mesh_locals(c, c as i64, ew)?;
            let targets = self.mesh_locals(c, c as i64 - 1, ew)?;
            let src: Vec<(u32, f64)> = sources
                .iter()
                .zip(&backward[bi + 1])
                .filter(|(_, &d)| d.is_finite())
                .map(|(&s, &d)| (s, d))
                .collect();
            if src.is_empty() {
                return Err(CoreError::NoPath);
            }
            let out = solver::solve(ew, &src, Some(&targets));
            backward[bi] = targets.iter().map(|&t| out.dist[t as usize]).collect();
        }
        // Left-to-right topmost selection with pinned prefix, then per-column
        // segment traces between the pinned endpoints.
        let mut crossings: Vec<Point> = Vec::with_capacity(n_bounds);
        let mut segments: Vec<GeodesicPath> = Vec::with_capacity(n_bounds + 1);
        let mut pinned_from = *u;
        let mut pinned_offset = 0.0;
        for bi in 0..n_bounds {
            let col = cu + bi; // column left of boundary cu+bi
            let boundary = (cu + bi) as i64;
            let ew = self.column_weights(col);
            let src = self.point_local(col, &pinned_from, ew)?;
            let targets = self.mesh_locals(col, boundary, ew)?;
            let out = solver::solve(ew, &[(src, pinned_offset)], Some(&targets));
            let mut chosen: Option<(usize, f64)> = None;
            for k in (0..targets.len()).rev() {
                let d = out.dist[targets[k] as usize];
                if d.is_finite() && backward[bi][k].is_finite() && d + backward[bi][k] == total {
                    chosen = Some((k, d));
                    break;
                }
            }
            let (k, reached) = chosen.ok_or_else(|| {
                CoreError::Domain("topmost selection found no exactly optimal crossing".into())
            })?;
            let crossing = Point::new(boundary as f64 * self.env.column_width(), self.mesh.y_values()[k]);
            let field = &self.env.column(col).psi;
            let map = arrival_map_on(field, ew, &pinned_from)?;
            let mut seg = trace_geodesic(&map, &crossing)?;
            seg.total_weight = reached - pinned_offset;
            segments.push(seg);
            crossings.push(crossing);
            pinned_from = crossing;
            pinned_offset = reached;
        }
        let ew = self.column_weights(cv);
        let field = &self.env.column(cv).psi;
        let map = arrival_map_on(field, ew, &pinned_from)?;
        let mut seg = trace_geodesic(&map, v)?;
        seg.total_weight = total - pinned_offset;
        segments.push(seg);
        Ok((total, ConformingGeodesic { segments, crossings, total_weight: total, first_column: cu }))
    }
}

/// One-shot restricted distance with geodesic.
pub fn restricted_distance(
    env: &ColumnEnvironment,
    mesh: &BoundaryMesh,
    u: &Point,
    v: &Point,
) -> Result<(f64, ConformingGeodesic)> {
    ConformingSolver::new(env, mesh)?.geodesic(u, v)
}

/// Rewrites boundary-hugging runs so every segment touches each boundary
/// line at exactly one node, at a weight increase of at most `epsilon`.
pub fn strongly_conforming_approx(
    env: &ColumnEnvironment,
    geo: &ConformingGeodesic,
    epsilon: f64,
) -> Result<ConformingGeodesic> {
    if !(epsilon > 0.0) {
        return Err(CoreError::Precondition("epsilon must be positive".into()));
    }
    let h = env.template().grid_spacing;
    let n = env.column_width();
    let on_line = |x: f64| (x - (x / n).round() * n).abs() < ALIGN_EPS;
    let mut new_segments = Vec::with_capacity(geo.segments.len());
    let mut new_total = 0.0;
    let mut changed_any = false;
    for (s, seg) in geo.segments.iter().enumerate() {
        let col = geo.column_of_segment(s);
        let col_rect = env.column_rect(col);
        let mut verts = seg.vertices.clone();
        let last = verts.len() - 1;
        let mut changed = false;
        for (i, p) in verts.iter_mut().enumerate() {
            if !on_line(p.x) {
                continue;
            }
            // The canonical crossing endpoints stay; interior vertices on a
            // boundary line move one cell into the segment's own column.
            let is_crossing_end = i == last && s < geo.crossings.len();
            let is_crossing_start = i == 0 && s > 0;
            let is_query_endpoint = (i == 0 && s == 0) || (i == last && s == geo.segments.len() - 1);
            if is_crossing_end || is_crossing_start || is_query_endpoint {
                continue;
            }
            if (p.x - col_rect.x_min).abs() < ALIGN_EPS {
                p.x += h;
            } else if (p.x - col_rect.x_max).abs() < ALIGN_EPS {
                p.x -= h;
            } else {
                continue;
            }
            changed = true;
        }
        if changed {
            verts.dedup_by(|a, b| a == b);
        }
        let field = &env.column(col).psi;
        let weight = if changed { solver::path_weight(field, &verts)? } else { seg.total_weight };
        changed_any |= changed;
        new_total += weight;
        new_segments.push(GeodesicPath { vertices: verts, total_weight: weight });
    }
    if !changed_any {
        return Ok(geo.clone());
    }
    let increase = new_total - geo.total_weight;
    if increase > epsilon {
        return Err(CoreError::Tolerance { requested: epsilon, achievable: increase.max(0.0) });
    }
    Ok(ConformingGeodesic {
        segments: new_segments,
        crossings: geo.crossings.clone(),
        total_weight: new_total,
        first_column: geo.first_column,
    })
}

/// Distribution summary of the identical-coupling proxy gap, restricted
/// minus unrestricted, between (0,0) and (Mn,0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProxyGapReport {
    pub replicates: usize,
    pub median: f64,
    pub quantile90: f64,
    pub fraction_within_q: f64,
    pub gaps: Vec<f64>,
}

/// Per replicate, draws one shared field, computes the unrestricted passage
/// time on it and the restricted distance through identically coupled
/// columns, and summarizes the nonnegative gap.
pub fn proxy_gap(
    template: &EnvironmentSpec,
    n: f64,
    num_columns: usize,
    w_n: f64,
    q_n: f64,
    replicates: usize,
    master_seed: u64,
) -> Result<ProxyGapReport> {
    use rayon::prelude::*;
    if replicates < 50 {
        return Err(CoreError::Precondition(format!(
            "proxy gap needs at least 50 replicates, got {replicates}"
        )));
    }
    let h = template.grid_spacing;
    let snap_up = |v: f64| (v / h - ALIGN_EPS).ceil() * h;
    let strip = snap_up((4.0 * w_n).max(2.0 * h));
    let pad = snap_up(template.kernel.radius);
    let region =
        Rect { x_min: -pad, x_max: num_columns as f64 * n + pad, y_min: -strip, y_max: strip };
    let u = Point::new(0.0, 0.0);
    let v = Point::new(num_columns as f64 * n, 0.0);
    let gaps: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|rep| -> Result<f64> {
            let spec = template
                .with_region(region)
                .with_seed(stream_seed(master_seed, &[role::FIELD, rep as u64]));
            let shared = crate::field::realize_environment(&spec)?;
            let x_free = solver::passage_time(&shared.psi, &u, &v)?;
            let env = ColumnEnvironment::from_shared(shared, n, num_columns, strip)?;
            let mesh = BoundaryMesh::build(w_n, env.strip_half_height(), h)?;
            let solver = ConformingSolver::new(&env, &mesh)?;
            let x_conf = solver.distance(&u, &v)?;
            Ok(x_conf - x_free)
        })
        .collect::<Result<Vec<_>>>()?;
    let sorted = crate::stats::sorted_copy(&gaps);
    let within = gaps.iter().filter(|g| g.abs() <= q_n).count();
    Ok(ProxyGapReport {
        replicates,
        median: crate::stats::quantile(&sorted, 0.5),
        quantile90: crate::stats::quantile(&sorted, 0.9),
        fraction_within_q: within as f64 / replicates as f64,
        gaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{KernelSpec, NoiseSpec, SquashSpec};

    pub(crate) fn template() -> EnvironmentSpec {
        EnvironmentSpec {
            kernel: KernelSpec::default_bump(),
            squash: SquashSpec::default_logistic(),
            noise: NoiseSpec::gaussian(0),
            grid_spacing: 0.25,
            region: Rect::new(0.0, 8.0, -4.0, 4.0).unwrap(),
        }
    }

    #[test]
    fn mesh_respects_spacing_bound() {
        let mesh = BoundaryMesh::build(4.0, 6.0, 0.25).unwrap();
        assert!(mesh.spacing() <= 4.0 / 8.0 + 1e-12);
        assert!(mesh.y_values().iter().all(|y| y.abs() <= 6.0 + 1e-12));
        assert!(mesh.y_values().contains(&0.0));
        let mut sorted = mesh.y_values().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(mesh.y_values(), &sorted[..]);
    }

    #[test]
    fn columns_overlap_by_one_unit() {
        let env =
            ColumnEnvironment::build(&template(), 4.0, 3, 6.0, ColumnCoupling::Independent, 7).unwrap();
        for c in 1..=3usize {
            let r = env.column(c).psi.region();
            assert_eq!(r.x_min, (c as f64 - 1.0) * 4.0 - 1.0);
            assert_eq!(r.x_max, c as f64 * 4.0 + 1.0);
        }
        let r1 = env.column(1).psi.region();
        let r2 = env.column(2).psi.region();
        assert_eq!(r1.x_max - r2.x_min, 2.0);
    }

    #[test]
    fn identical_coupling_restricts_shared_field() {
        let env =
            ColumnEnvironment::build(&template(), 4.0, 2, 6.0, ColumnCoupling::Identical, 11).unwrap();
        let shared = env.shared_base().unwrap();
        for c in 1..=2usize {
            let col = env.column(c);
            let sub = shared.psi.restrict(&col.psi.region()).unwrap();
            assert_eq!(col.psi.values(), sub.values());
        }
    }

    #[test]
    fn same_column_identical_matches_constrained_passage_exactly() {
        let env =
            ColumnEnvironment::build(&template(), 6.0, 2, 6.0, ColumnCoupling::Identical, 13).unwrap();
        let mesh = BoundaryMesh::build(3.0, env.strip_half_height(), 0.25).unwrap();
        let u = Point::new(1.0, -2.0);
        let v = Point::new(5.0, 1.5);
        let (t, geo) = restricted_distance(&env, &mesh, &u, &v).unwrap();
        let rect = env.column_rect(1);
        let oracle =
            solver::constrained_passage_time(&env.shared_base().unwrap().psi, &u, &v, &rect).unwrap();
        assert_eq!(t, oracle);
        assert!(geo.crossings.is_empty());
        assert_eq!(geo.total_weight, t);
    }

    #[test]
    fn identical_coupling_restricted_dominates_unrestricted() {
        let env =
            ColumnEnvironment::build(&template(), 4.0, 3, 6.0, ColumnCoupling::Identical, 17).unwrap();
        let mesh = BoundaryMesh::build(3.0, env.strip_half_height(), 0.25).unwrap();
        let u = Point::new(0.0, 0.0);
        let v = Point::new(12.0, 0.0);
        let solver_c = ConformingSolver::new(&env, &mesh).unwrap();
        let restricted = solver_c.distance(&u, &v).unwrap();
        let free = solver::passage_time(&env.shared_base().unwrap().psi, &u, &v).unwrap();
        assert!(restricted >= free, "{restricted} < {free}");
    }

    #[test]
    fn constant_field_multi_column_distance_is_linear() {
        let mut spec = template();
        spec.kernel.amplitude = 0.0; // flat field, psi = 1.25
        let env = ColumnEnvironment::build(&spec, 4.0, 3, 6.0, ColumnCoupling::Independent, 19).unwrap();
        let mesh = BoundaryMesh::build(3.0, env.strip_half_height(), 0.25).unwrap();
        let u = Point::new(0.0, 0.0);
        let v = Point::new(12.0, 0.0);
        let (t, geo) = restricted_distance(&env, &mesh, &u, &v).unwrap();
        assert!((t - 1.25 * 12.0).abs() < 1e-6, "t = {t}");
        assert_eq!(geo.crossings.len(), 2);
        for p in &geo.crossings {
            assert_eq!(p.y, 0.0);
        }
        assert_eq!(geo.segments.len(), 3);
        let seg_sum: f64 = geo.segments.iter().map(|s| s.total_weight).sum();
        assert_eq!(seg_sum, t);
    }

    #[test]
    fn dp_value_matches_bruteforce_enumeration_exactly() {
        // Coarse mesh (few nodes) and 3 columns: enumerate all crossing tuples.
        let env =
            ColumnEnvironment::build(&template(), 4.0, 3, 4.0, ColumnCoupling::Independent, 23).unwrap();
        let coarse = BoundaryMesh::build(16.0, env.strip_half_height(), 0.25).unwrap();
        assert!(coarse.len() <= 5, "mesh has {} nodes", coarse.len());
        let u = Point::new(0.5, 0.0);
        let v = Point::new(11.5, -1.0);
        let solver_c = ConformingSolver::new(&env, &coarse).unwrap();
        let dp = solver_c.distance(&u, &v).unwrap();

        let ys = coarse.y_values();
        let map1 = solver::arrival_map(&env.column(1).psi, &u, Some(&env.column_rect(1))).unwrap();
        let mut best = f64::INFINITY;
        for &y1 in ys {
            let leg1 = match map1.time_at(&Point::new(4.0, y1)) {
                Ok(t) => t,
                Err(_) => continue,
            };
            let map2 = solver::arrival_map(
                &env.column(2).psi,
                &Point::new(4.0, y1),
                Some(&env.column_rect(2)),
            )
            .unwrap();
            for &y2 in ys {
                let mid = match map2.time_at(&Point::new(8.0, y2)) {
                    Ok(t) => t,
                    Err(_) => continue,
                };
                let map3 = solver::arrival_map(
                    &env.column(3).psi,
                    &Point::new(8.0, y2),
                    Some(&env.column_rect(3)),
                )
                .unwrap();
                let last = match map3.time_at(&v) {
                    Ok(t) => t,
                    Err(_) => continue,
                };
                let tuple_sum = leg1 + mid + last;
                if tuple_sum < best {
                    best = tuple_sum;
                }
            }
        }
        assert_eq!(dp, best, "dp {dp} != brute force {best}");
    }

    #[test]
    fn geodesic_crossings_stay_in_strip_and_weights_add_up() {
        let env =
            ColumnEnvironment::build(&template(), 4.0, 4, 5.0, ColumnCoupling::Independent, 29).unwrap();
        let mesh = BoundaryMesh::build(3.0, env.strip_half_height(), 0.25).unwrap();
        let u = Point::new(0.0, 0.0);
        let v = Point::new(16.0, 0.0);
        let (t, geo) = restricted_distance(&env, &mesh, &u, &v).unwrap();
        assert_eq!(geo.crossings.len(), 3);
        for (i, p) in geo.crossings.iter().enumerate() {
            assert_eq!(p.x, 4.0 * (i as f64 + 1.0));
            assert!(p.y.abs() <= env.strip_half_height());
        }
        let sum: f64 = geo.segments.iter().map(|s| s.total_weight).sum();
        assert_eq!(sum, t);
        for (s, seg) in geo.segments.iter().enumerate() {
            if s > 0 {
                assert_eq!(seg.start(), geo.crossings[s - 1]);
            }
            if s < geo.crossings.len() {
                assert_eq!(seg.end(), geo.crossings[s]);
            }
        }
        for (s, seg) in geo.segments.iter().enumerate() {
            let col = geo.column_of_segment(s);
            let w = solver::path_weight(&env.column(col).psi, &seg.vertices).unwrap();
            assert!((w - seg.total_weight).abs() <= 1e-9 * seg.total_weight.max(1.0));
        }
    }

    #[test]
    fn vertical_boundary_pair_and_strip_violations_are_rejected() {
        let env =
            ColumnEnvironment::build(&template(), 4.0, 3, 4.0, ColumnCoupling::Independent, 31).unwrap();
        let mesh = BoundaryMesh::build(3.0, env.strip_half_height(), 0.25).unwrap();
        let err = restricted_distance(&env, &mesh, &Point::new(4.0, 0.0), &Point::new(4.0, 2.0));
        assert!(matches!(err, Err(CoreError::VerticalBoundaryPair { .. })));
        let err = restricted_distance(&env, &mesh, &Point::new(2.0, 8.0), &Point::new(6.0, 0.0));
        assert!(matches!(err, Err(CoreError::OutsideStrip { .. })));
        let err = restricted_distance(&env, &mesh, &Point::new(6.0, 0.0), &Point::new(2.0, 0.0));
        assert!(matches!(err, Err(CoreError::Precondition(_))));
    }

    #[test]
    fn crossing_indices_floor_properly() {
        let geo = ConformingGeodesic {
            segments: Vec::new(),
            crossings: vec![
                Point::new(4.0, 0.0),
                Point::new(8.0, 1.5 * 2.0),
                Point::new(12.0, -0.2 * 2.0),
            ],
            total_weight: 0.0,
            first_column: 1,
        };
        assert_eq!(crossing_indices(&geo, 2.0), vec![0, 1, -1]);
    }

    #[test]
    fn centered_passage_formula() {
        let u = Point::new(0.0, 20.0);
        let v = Point::new(100.0, 0.0);
        let t = centered_passage(&u, &v, 102.0).unwrap();
        assert!((t - 0.0).abs() < 1e-12);
        let same_y = centered_passage(&Point::new(0.0, 3.0), &Point::new(50.0, 3.0), 50.0).unwrap();
        assert_eq!(same_y, 0.0);
        assert!(centered_passage(&v, &u, 10.0).is_err());
        let neg = centered_passage(&u, &v, 90.0).unwrap();
        assert!(neg < 0.0);
    }

    #[test]
    fn strongly_conforming_fixes_boundary_runs() {
        let mut spec = template();
        spec.kernel.amplitude = 0.0; // flat field for a hand-built fixture
        let env = ColumnEnvironment::build(&spec, 4.0, 2, 4.0, ColumnCoupling::Independent, 37).unwrap();
        // Segment 1 hugs the boundary x = 4 for two extra nodes before its
        // crossing at (4, 0).
        let seg1 = vec![
            Point::new(0.0, 0.0),
            Point::new(4.0, 0.5),
            Point::new(4.0, 0.25),
            Point::new(4.0, 0.0),
        ];
        let seg2 = vec![Point::new(4.0, 0.0), Point::new(8.0, 0.0)];
        let w1 = solver::path_weight(&env.column(1).psi, &seg1).unwrap();
        let w2 = solver::path_weight(&env.column(2).psi, &seg2).unwrap();
        let geo = ConformingGeodesic {
            segments: vec![
                GeodesicPath { vertices: seg1, total_weight: w1 },
                GeodesicPath { vertices: seg2, total_weight: w2 },
            ],
            crossings: vec![Point::new(4.0, 0.0)],
            total_weight: w1 + w2,
            first_column: 1,
        };
        let fixed = strongly_conforming_approx(&env, &geo, 1.0).unwrap();
        for (s, seg) in fixed.segments.iter().enumerate() {
            let on_line = seg.vertices.iter().filter(|p| (p.x - 4.0).abs() < 1e-9).count();
            assert_eq!(on_line, 1, "segment {s} touches the boundary {on_line} times");
        }
        assert!(fixed.total_weight <= geo.total_weight + 1.0);
        let err = strongly_conforming_approx(&env, &geo, 1e-9);
        match err {
            Err(CoreError::Tolerance { achievable, .. }) => assert!(achievable > 1e-9),
            other => panic!("expected tolerance error, got {other:?}"),
        }
        // Already strongly conforming input comes back unchanged.
        let again = strongly_conforming_approx(&env, &fixed, 1e-9).unwrap();
        assert_eq!(again.total_weight, fixed.total_weight);
        assert_eq!(again.segments.len(), fixed.segments.len());
        // A very large epsilon always succeeds.
        assert!(strongly_conforming_approx(&env, &geo, 1e12).is_ok());
    }
}
