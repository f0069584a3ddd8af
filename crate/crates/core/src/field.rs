//! Random environment generation: a compactly supported radial kernel
//! convolved against Gaussian white noise or a Poisson point cloud, squashed
//! through a bounded increasing function into a positive speed field.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::{Point, Rect};
use crate::rng::{role, stream_rng};

/// Fuzz used when checking that lengths are whole multiples of the spacing.
const ALIGN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelProfile {
    SmoothBump,
}

/// The mollifier kernel. `K(x) = amplitude * exp(-1 / (1 - (|x|/radius)^2))`
/// inside the ball of `radius`, identically zero outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub radius: f64,
    pub amplitude: f64,
    pub profile: KernelProfile,
}

impl KernelSpec {
    /// Amplitude e normalizes the bump so that `K(0) = 1`.
    pub fn default_bump() -> Self {
        KernelSpec { radius: 1.0, amplitude: std::f64::consts::E, profile: KernelProfile::SmoothBump }
    }

    pub fn eval(&self, dx: f64, dy: f64) -> f64 {
        let r2 = (dx * dx + dy * dy) / (self.radius * self.radius);
        if r2 >= 1.0 {
            0.0
        } else {
            self.amplitude * (-1.0 / (1.0 - r2)).exp()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(CoreError::Config("kernel radius must be positive".into()));
        }
        if !(self.amplitude >= 0.0) {
            return Err(CoreError::Config("kernel amplitude must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SquashShape {
    Logistic,
}

/// Bounded increasing squash applied pointwise to the convolved noise,
/// followed by the calibration multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquashSpec {
    pub d_low: f64,
    pub d_high: f64,
    pub shape: SquashShape,
    pub scale_factor: f64,
}

impl SquashSpec {
    pub fn default_logistic() -> Self {
        SquashSpec { d_low: 0.5, d_high: 2.0, shape: SquashShape::Logistic, scale_factor: 1.0 }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let logistic = 1.0 / (1.0 + (-x).exp());
        self.scale_factor * (self.d_low + (self.d_high - self.d_low) * logistic)
    }

    /// Effective lower/upper speed bounds of the squashed field.
    pub fn bounds(&self) -> (f64, f64) {
        (self.scale_factor * self.d_low, self.scale_factor * self.d_high)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0 < self.d_low && self.d_low < self.d_high && self.d_high.is_finite()) {
            return Err(CoreError::Config(format!(
                "squash bounds must satisfy 0 < d_low < d_high, got ({}, {})",
                self.d_low, self.d_high
            )));
        }
        if !(self.scale_factor > 0.0) {
            return Err(CoreError::Config("scale_factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    GaussianWhite,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub poisson_rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::GaussianWhite, poisson_rate: 1.0, seed }
    }

    pub fn poisson(rate: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::Poisson, poisson_rate: rate, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.kind == NoiseKind::Poisson && !(self.poisson_rate > 0.0) {
            return Err(CoreError::Config("poisson_rate must be positive".into()));
        }
        Ok(())
    }
}

/// The full recipe for one environment realization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub kernel: KernelSpec,
    pub squash: SquashSpec,
    pub noise: NoiseSpec,
    pub grid_spacing: f64,
    pub region: Rect,
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.squash.validate()?;
        self.noise.validate()?;
        if !(self.grid_spacing > 0.0) {
            return Err(CoreError::Config("grid_spacing must be positive".into()));
        }
        if self.grid_spacing > self.kernel.radius / 4.0 + ALIGN_EPS {
            return Err(CoreError::Config(format!(
                "grid_spacing {} must be at most radius/4 = {}",
                self.grid_spacing,
                self.kernel.radius / 4.0
            )));
        }
        for (name, len) in [("width", self.region.width()), ("height", self.region.height())] {
            let cells = len / self.grid_spacing;
            if cells < 1.0 - ALIGN_EPS || (cells - cells.round()).abs() > ALIGN_EPS {
                return Err(CoreError::Config(format!(
                    "region {name} {len} is not a positive multiple of grid_spacing {}",
                    self.grid_spacing
                )));
            }
        }
        if self.region.width() < self.kernel.radius || self.region.height() < self.kernel.radius {
            return Err(CoreError::RegionTooSmall(format!(
                "region {}x{} cannot be dilated by kernel radius {}",
                self.region.width(),
                self.region.height(),
                self.kernel.radius
            )));
        }
        Ok(())
    }

    /// Same spec over a different region (the region must stay grid-aligned
    /// with integer translates of the spacing for restrictions to be exact).
    pub fn with_region(&self, region: Rect) -> EnvironmentSpec {
        EnvironmentSpec { region, ..*self }
    }

    pub fn with_seed(&self, seed: u64) -> EnvironmentSpec {
        let mut s = *self;
        s.noise.seed = seed;
        s
    }
}

/// A realized grid of samples. Row-major storage, row index along y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    origin: Point,
    spacing: f64,
    nx: usize,
    ny: usize,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(origin: Point, spacing: f64, nx: usize, ny: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), nx * ny);
        ScalarField { origin, spacing, nx, ny, values }
    }

    pub fn constant(region: Rect, spacing: f64, value: f64) -> Self {
        let nx = (region.width() / spacing).round() as usize + 1;
        let ny = (region.height() / spacing).round() as usize + 1;
        ScalarField {
            origin: Point::new(region.x_min, region.y_min),
            spacing,
            nx,
            ny,
            values: vec![value; nx * ny],
        }
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    pub fn node_point(&self, ix: usize, iy: usize) -> Point {
        Point::new(self.origin.x + ix as f64 * self.spacing, self.origin.y + iy as f64 * self.spacing)
    }

    pub fn region(&self) -> Rect {
        Rect {
            x_min: self.origin.x,
            x_max: self.origin.x + (self.nx - 1) as f64 * self.spacing,
            y_min: self.origin.y,
            y_max: self.origin.y + (self.ny - 1) as f64 * self.spacing,
        }
    }

    /// Nearest grid node to a point, with the snap distance.
    pub fn nearest_node(&self, p: &Point) -> Result<(usize, usize, f64)> {
        if !self.region().dilate(self.spacing / 2.0 + ALIGN_EPS).contains(p) {
            return Err(CoreError::OutsideRegion { x: p.x, y: p.y });
        }
        let fx = (p.x - self.origin.x) / self.spacing;
        let fy = (p.y - self.origin.y) / self.spacing;
        let ix = (fx.round().max(0.0) as usize).min(self.nx - 1);
        let iy = (fy.round().max(0.0) as usize).min(self.ny - 1);
        let snapped = self.node_point(ix, iy);
        Ok((ix, iy, snapped.dist(p)))
    }

    /// Bilinear interpolation; points on the region boundary are valid.
    pub fn bilinear(&self, p: &Point) -> Result<f64> {
        let region = self.region();
        if !region.dilate(ALIGN_EPS).contains(p) {
            return Err(CoreError::OutsideRegion { x: p.x, y: p.y });
        }
        let fx = ((p.x - self.origin.x) / self.spacing).clamp(0.0, (self.nx - 1) as f64);
        let fy = ((p.y - self.origin.y) / self.spacing).clamp(0.0, (self.ny - 1) as f64);
        let ix0 = (fx.floor() as usize).min(self.nx - 1);
        let iy0 = (fy.floor() as usize).min(self.ny - 1);
        let ix1 = (ix0 + 1).min(self.nx - 1);
        let iy1 = (iy0 + 1).min(self.ny - 1);
        let tx = fx - ix0 as f64;
        let ty = fy - iy0 as f64;
        let v00 = self.value(ix0, iy0);
        let v10 = self.value(ix1, iy0);
        let v01 = self.value(ix0, iy1);
        let v11 = self.value(ix1, iy1);
        Ok(v00 * (1.0 - tx) * (1.0 - ty) + v10 * tx * (1.0 - ty) + v01 * (1.0 - tx) * ty + v11 * tx * ty)
    }

    /// Exact sub-grid over `rect`, which must be grid aligned and contained.
    pub fn restrict(&self, rect: &Rect) -> Result<ScalarField> {
        let to_index = |v: f64, o: f64| -> Result<usize> {
            let f = (v - o) / self.spacing;
            if (f - f.round()).abs() > ALIGN_EPS || f.round() < 0.0 {
                return Err(CoreError::Config(format!("rect coordinate {v} not grid aligned")));
            }
            Ok(f.round() as usize)
        };
        let ix0 = to_index(rect.x_min, self.origin.x)?;
        let ix1 = to_index(rect.x_max, self.origin.x)?;
        let iy0 = to_index(rect.y_min, self.origin.y)?;
        let iy1 = to_index(rect.y_max, self.origin.y)?;
        if ix1 >= self.nx || iy1 >= self.ny || ix0 > ix1 || iy0 > iy1 {
            return Err(CoreError::Config("restriction rect not contained in field".into()));
        }
        let nx = ix1 - ix0 + 1;
        let ny = iy1 - iy0 + 1;
        let mut values = Vec::with_capacity(nx * ny);
        for iy in iy0..=iy1 {
            let row = &self.values[iy * self.nx + ix0..iy * self.nx + ix0 + nx];
            values.extend_from_slice(row);
        }
        Ok(ScalarField {
            origin: Point::new(rect.x_min, rect.y_min),
            spacing: self.spacing,
            nx,
            ny,
            values,
        })
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Flat binary layout: origin_x, origin_y, spacing as little-endian f64,
    /// then ny, nx as little-endian u64, then row-major values as f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&self.origin.x.to_le_bytes())?;
        w.write_all(&self.origin.y.to_le_bytes())?;
        w.write_all(&self.spacing.to_le_bytes())?;
        w.write_all(&(self.ny as u64).to_le_bytes())?;
        w.write_all(&(self.nx as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Debug CSV: one `x,y,value` row per node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,y,value")?;
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let p = self.node_point(ix, iy);
                writeln!(w, "{},{},{}", p.x, p.y, self.value(ix, iy))?;
            }
        }
        Ok(())
    }
}

/// The raw randomness behind a realization, retained so that block
/// resampling can splice noise rather than splicing speed values.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseRealization {
    /// Standard normal draws per grid cell on the dilated window.
    Gaussian(ScalarField),
    /// Point cloud on the dilated window, sorted by (y, x).
    Poisson(Vec<Point>),
}

/// A realized environment that remembers its noise, its convolved field and
/// its squashed speed field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldRealization {
    pub spec: EnvironmentSpec,
    pub noise: NoiseRealization,
    pub xi: ScalarField,
    pub psi: ScalarField,
}

fn sample_noise(spec: &EnvironmentSpec) -> NoiseRealization {
    let h = spec.grid_spacing;
    let pad_cells = (spec.kernel.radius / h).ceil() as usize;
    let window = Rect {
        x_min: spec.region.x_min - pad_cells as f64 * h,
        x_max: spec.region.x_max + pad_cells as f64 * h,
        y_min: spec.region.y_min - pad_cells as f64 * h,
        y_max: spec.region.y_max + pad_cells as f64 * h,
    };
    match spec.noise.kind {
        NoiseKind::GaussianWhite => {
            let nx = (window.width() / h).round() as usize + 1;
            let ny = (window.height() / h).round() as usize + 1;
            let mut rng = stream_rng(spec.noise.seed, &[role::FIELD]);
            let values: Vec<f64> = (0..nx * ny).map(|_| rng.sample(StandardNormal)).collect();
            NoiseRealization::Gaussian(ScalarField::new(
                Point::new(window.x_min, window.y_min),
                h,
                nx,
                ny,
                values,
            ))
        }
        NoiseKind::Poisson => {
            let mut rng = stream_rng(spec.noise.seed, &[role::POISSON]);
            let area = window.width() * window.height();
            let count = Poisson::new(spec.noise.poisson_rate * area)
                .expect("positive rate")
                .sample(&mut rng) as usize;
            let mut points: Vec<Point> = (0..count)
                .map(|_| {
                    Point::new(
                        window.x_min + rng.gen::<f64>() * window.width(),
                        window.y_min + rng.gen::<f64>() * window.height(),
                    )
                })
                .collect();
            sort_points(&mut points);
            NoiseRealization::Poisson(points)
        }
    }
}

/// Canonical point order; keeps per-node contribution order stable under
/// band splices so untouched nodes recompute to bit-identical values.
pub(crate) fn sort_points(points: &mut [Point]) {
    points.sort_by(|a, b| (a.y, a.x).partial_cmp(&(b.y, b.x)).unwrap());
}

/// Convolves a noise realization against the kernel on the spec's grid.
/// Direct summation in a fixed order: every output node is a deterministic
/// function of exactly the noise within kernel radius of it.
fn convolve(spec: &EnvironmentSpec, noise: &NoiseRealization) -> ScalarField {
    let h = spec.grid_spacing;
    let region = spec.region;
    let nx = (region.width() / h).round() as usize + 1;
    let ny = (region.height() / h).round() as usize + 1;
    let origin = Point::new(region.x_min, region.y_min);
    let mut values = vec![0.0; nx * ny];
    match noise {
        NoiseRealization::Gaussian(z) => {
            let pad = ((spec.kernel.radius / h).ceil()) as isize;
            // Tabulate kernel taps once; the quadrature weight h is folded in.
            let width = (2 * pad + 1) as usize;
            let mut taps = vec![0.0; width * width];
            for dy in -pad..=pad {
                for dx in -pad..=pad {
                    taps[((dy + pad) as usize) * width + (dx + pad) as usize] =
                        spec.kernel.eval(dx as f64 * h, dy as f64 * h) * h;
                }
            }
            // Offsets of the region grid inside the noise grid.
            let off_x = ((origin.x - z.origin().x) / h).round() as isize;
            let off_y = ((origin.y - z.origin().y) / h).round() as isize;
            for iy in 0..ny as isize {
                for ix in 0..nx as isize {
                    let mut acc = 0.0;
                    for dy in -pad..=pad {
                        let zy = iy + off_y + dy;
                        let tap_row = &taps[((dy + pad) as usize) * width..][..width];
                        let z_row = (zy as usize) * z.nx();
                        for dx in -pad..=pad {
                            let t = tap_row[(dx + pad) as usize];
                            if t != 0.0 {
                                let zx = ix + off_x + dx;
                                acc += t * z.values()[z_row + zx as usize];
                            }
                        }
                    }
                    values[(iy as usize) * nx + ix as usize] = acc;
                }
            }
        }
        NoiseRealization::Poisson(points) => {
            let r = spec.kernel.radius;
            for p in points {
                let ix_lo = (((p.x - r) - origin.x) / h).ceil().max(0.0) as usize;
                let ix_hi = ((((p.x + r) - origin.x) / h).floor()).min((nx - 1) as f64);
                let iy_lo = (((p.y - r) - origin.y) / h).ceil().max(0.0) as usize;
                let iy_hi = ((((p.y + r) - origin.y) / h).floor()).min((ny - 1) as f64);
                if ix_hi < 0.0 || iy_hi < 0.0 {
                    continue;
                }
                let (ix_hi, iy_hi) = (ix_hi as usize, iy_hi as usize);
                for iy in iy_lo..=iy_hi {
                    let yy = origin.y + iy as f64 * h - p.y;
                    for ix in ix_lo..=ix_hi {
                        let xx = origin.x + ix as f64 * h - p.x;
                        let k = spec.kernel.eval(xx, yy);
                        if k != 0.0 {
                            values[iy * nx + ix] += k;
                        }
                    }
                }
            }
        }
    }
    ScalarField::new(origin, h, nx, ny, values)
}

fn squash_field(spec: &EnvironmentSpec, xi: &ScalarField) -> ScalarField {
    let values = xi.values().iter().map(|&x| spec.squash.eval(x)).collect();
    ScalarField::new(xi.origin(), xi.spacing(), xi.nx(), xi.ny(), values)
}

/// Samples the pre-squash convolved noise on the spec's grid.
pub fn sample_convolved_noise(spec: &EnvironmentSpec) -> Result<ScalarField> {
    spec.validate()?;
    let noise = sample_noise(spec);
    Ok(convolve(spec, &noise))
}

/// Full realization retaining noise, convolved field and speed field.
pub fn realize_environment(spec: &EnvironmentSpec) -> Result<FieldRealization> {
    spec.validate()?;
    let noise = sample_noise(spec);
    let xi = convolve(spec, &noise);
    let psi = squash_field(spec, &xi);
    Ok(FieldRealization { spec: *spec, noise, xi, psi })
}

/// The speed field alone.
pub fn build_environment(spec: &EnvironmentSpec) -> Result<ScalarField> {
    Ok(realize_environment(spec)?.psi)
}

impl FieldRealization {
    /// Returns a copy whose noise inside the half-open horizontal bands
    /// `[y_lo, y_hi)` is replaced by `other`'s, with the fields recomputed.
    /// Nodes farther than the kernel radius from every replaced band keep
    /// bit-identical values because the convolution is a direct sum over the
    /// same contributions in the same order.
    pub fn splice_bands(&self, other: &FieldRealization, bands: &[(f64, f64)]) -> FieldRealization {
        let in_band = |y: f64| bands.iter().any(|&(lo, hi)| y >= lo && y < hi);
        let noise = match (&self.noise, &other.noise) {
            (NoiseRealization::Gaussian(base), NoiseRealization::Gaussian(fresh)) => {
                assert_eq!(base.origin(), fresh.origin(), "spliced noise grids must align");
                assert_eq!(base.ny(), fresh.ny());
                assert_eq!(base.nx(), fresh.nx());
                let mut values = base.values().to_vec();
                for iy in 0..base.ny() {
                    let y = base.origin().y + iy as f64 * base.spacing();
                    if in_band(y) {
                        let row = iy * base.nx();
                        values[row..row + base.nx()].copy_from_slice(&fresh.values()[row..row + base.nx()]);
                    }
                }
                NoiseRealization::Gaussian(ScalarField::new(
                    base.origin(),
                    base.spacing(),
                    base.nx(),
                    base.ny(),
                    values,
                ))
            }
            (NoiseRealization::Poisson(base), NoiseRealization::Poisson(fresh)) => {
                let mut points: Vec<Point> = base.iter().filter(|p| !in_band(p.y)).cloned().collect();
                points.extend(fresh.iter().filter(|p| in_band(p.y)).cloned());
                sort_points(&mut points);
                NoiseRealization::Poisson(points)
            }
            _ => panic!("cannot splice noise of different kinds"),
        };
        let xi = convolve(&self.spec, &noise);
        let psi = squash_field(&self.spec, &xi);
        FieldRealization { spec: self.spec, noise, xi, psi }
    }
}

/// Calibration output: the multiplier that rescales the field so the time
/// constant is one, plus the estimate it came from.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub scale_factor: f64,
    pub mu_hat: f64,
    pub standard_error: f64,
    pub replicates: usize,
    pub n_calib: f64,
}

/// Estimates the time constant by averaging `X_n / n` over replicates and
/// returns the corrected scale factor. The direct mean at a single n carries
/// a known O(Q_n/n) bias from the lower-order mean shift.
pub fn calibrate_time_constant(
    spec: &EnvironmentSpec,
    n_calib: f64,
    replicates: usize,
    master_seed: u64,
) -> Result<CalibrationReport> {
    use crate::solver;
    if replicates < 30 {
        return Err(CoreError::Precondition(format!(
            "calibration needs at least 30 replicates, got {replicates}"
        )));
    }
    if n_calib < 8.0 * spec.kernel.radius {
        return Err(CoreError::CalibrationUnreliable(format!(
            "n_calib {} is below 8 kernel radii ({})",
            n_calib,
            8.0 * spec.kernel.radius
        )));
    }
    let h = spec.grid_spacing;
    let snap = |v: f64| (v / h).ceil() * h;
    let half_height = snap((4.0 * n_calib.sqrt()).max(8.0));
    let pad = snap(1.0);
    let region = Rect {
        x_min: -pad,
        x_max: snap(n_calib) + pad,
        y_min: -half_height,
        y_max: half_height,
    };
    let base = spec.with_region(region);
    base.validate()?;
    let u = Point::new(0.0, 0.0);
    let v = Point::new(snap(n_calib), 0.0);
    let ratios: Vec<f64> = (0..replicates)
        .map(|rep| {
            let s = base.with_seed(crate::rng::stream_seed(master_seed, &[role::FIELD, rep as u64]));
            let psi = build_environment(&s)?;
            let t = solver::passage_time(&psi, &u, &v)?;
            Ok(t / (v.x - u.x))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mu_hat = crate::stats::mean(&ratios);
    Ok(CalibrationReport {
        scale_factor: spec.squash.scale_factor / mu_hat,
        mu_hat,
        standard_error: crate::stats::se_mean(&ratios),
        replicates,
        n_calib,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec(seed: u64) -> EnvironmentSpec {
        EnvironmentSpec {
            kernel: KernelSpec::default_bump(),
            squash: SquashSpec::default_logistic(),
            noise: NoiseSpec::gaussian(seed),
            grid_spacing: 0.25,
            region: Rect::new(0.0, 8.0, -4.0, 4.0).unwrap(),
        }
    }

    #[test]
    fn kernel_vanishes_outside_unit_ball() {
        let k = KernelSpec::default_bump();
        assert_eq!(k.eval(1.0, 0.0), 0.0);
        assert_eq!(k.eval(0.8, 0.8), 0.0);
        assert_eq!(k.eval(-1.5, 0.2), 0.0);
        assert!(k.eval(0.0, 0.0) > 0.0);
        assert!((k.eval(0.0, 0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_is_radial_and_nonnegative() {
        let k = KernelSpec::default_bump();
        for t in 0..32 {
            let theta = t as f64 * std::f64::consts::TAU / 32.0;
            let r = 0.7;
            let v = k.eval(r * theta.cos(), r * theta.sin());
            assert!((v - k.eval(r, 0.0)).abs() < 1e-12);
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn logistic_squash_midpoint_and_range() {
        let s = SquashSpec::default_logistic();
        assert!((s.eval(0.0) - 1.25).abs() < 1e-12);
        // Strict interior for any input magnitude the convolved noise can
        // reach at desk scale (saturation to the closed endpoints only
        // occurs beyond |x| ~ 37 where the logistic underflows).
        assert!(s.eval(-30.0) > 0.5 && s.eval(-30.0) < 2.0);
        assert!(s.eval(30.0) > 0.5 && s.eval(30.0) < 2.0);
        assert!(s.eval(1.0) > s.eval(0.5));
    }

    #[test]
    fn gaussian_noise_is_deterministic() {
        let spec = small_spec(99);
        let a = sample_convolved_noise(&spec).unwrap();
        let b = sample_convolved_noise(&spec).unwrap();
        assert_eq!(a.values(), b.values());
        let c = sample_convolved_noise(&spec.with_seed(100)).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn zero_amplitude_gives_flat_field() {
        let mut spec = small_spec(1);
        spec.kernel.amplitude = 0.0;
        let xi = sample_convolved_noise(&spec).unwrap();
        assert!(xi.values().iter().all(|&v| v == 0.0));
        let psi = build_environment(&spec).unwrap();
        assert!(psi.values().iter().all(|&v| (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn empty_poisson_cloud_gives_zero_xi() {
        let mut spec = small_spec(1);
        spec.noise = NoiseSpec::poisson(1.0, 3);
        // Drive the empty-sum path directly.
        let noise = NoiseRealization::Poisson(Vec::new());
        let xi = convolve(&spec, &noise);
        assert!(xi.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn poisson_field_is_deterministic_and_nonnegative() {
        let mut spec = small_spec(5);
        spec.noise = NoiseSpec::poisson(1.0, 5);
        let a = sample_convolved_noise(&spec).unwrap();
        let b = sample_convolved_noise(&spec).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(a.values().iter().all(|&v| v >= 0.0));
        assert!(a.max_value() > 0.0);
    }

    #[test]
    fn psi_respects_squash_bounds() {
        let spec = small_spec(7);
        let psi = build_environment(&spec).unwrap();
        let (lo, hi) = spec.squash.bounds();
        assert!(psi.min_value() > lo);
        assert!(psi.max_value() < hi);
    }

    #[test]
    fn monotone_in_noise() {
        let spec = small_spec(11);
        let real = realize_environment(&spec).unwrap();
        // Raise every noise sample and rebuild: psi rises pointwise.
        let raised_noise = match &real.noise {
            NoiseRealization::Gaussian(z) => NoiseRealization::Gaussian(ScalarField::new(
                z.origin(),
                z.spacing(),
                z.nx(),
                z.ny(),
                z.values().iter().map(|v| v + 0.5).collect(),
            )),
            _ => unreachable!(),
        };
        let xi2 = convolve(&spec, &raised_noise);
        let psi2 = squash_field(&spec, &xi2);
        for (a, b) in real.psi.values().iter().zip(psi2.values()) {
            assert!(b > a);
        }
    }

    #[test]
    fn restriction_is_exact_subgrid() {
        let spec = small_spec(13);
        let psi = build_environment(&spec).unwrap();
        let sub = psi.restrict(&Rect::new(2.0, 5.0, -1.0, 3.0).unwrap()).unwrap();
        assert_eq!(sub.nx(), 13);
        assert_eq!(sub.ny(), 17);
        for iy in 0..sub.ny() {
            for ix in 0..sub.nx() {
                let p = sub.node_point(ix, iy);
                let (gx, gy, snap) = psi.nearest_node(&p).unwrap();
                assert_eq!(snap, 0.0);
                assert_eq!(sub.value(ix, iy), psi.value(gx, gy));
            }
        }
    }

    #[test]
    fn splice_changes_only_near_band() {
        let spec = small_spec(17);
        let base = realize_environment(&spec).unwrap();
        let fresh = realize_environment(&spec.with_seed(18)).unwrap();
        let spliced = base.splice_bands(&fresh, &[(0.0, 1.0)]);
        let r = spec.kernel.radius;
        let mut changed = 0;
        for iy in 0..base.psi.ny() {
            let y = base.psi.origin().y + iy as f64 * base.psi.spacing();
            for ix in 0..base.psi.nx() {
                let a = base.psi.value(ix, iy);
                let b = spliced.psi.value(ix, iy);
                if y < 0.0 - r || y >= 1.0 + r {
                    assert_eq!(a, b, "bit change outside dilated band at y={y}");
                } else if a != b {
                    changed += 1;
                }
            }
        }
        assert!(changed > 0, "splice had no effect inside the band");
    }

    #[test]
    fn splice_full_window_equals_fresh() {
        let spec = small_spec(21);
        let base = realize_environment(&spec).unwrap();
        let fresh = realize_environment(&spec.with_seed(22)).unwrap();
        let spliced = base.splice_bands(&fresh, &[(-1e9, 1e9)]);
        assert_eq!(spliced.psi.values(), fresh.psi.values());
        let nothing = base.splice_bands(&fresh, &[]);
        assert_eq!(nothing.psi.values(), base.psi.values());
    }

    #[test]
    fn spec_validation_catches_bad_inputs() {
        let mut s = small_spec(1);
        s.grid_spacing = 0.3;
        assert!(s.validate().is_err());
        let mut s = small_spec(1);
        s.region = Rect::new(0.0, 8.1, -4.0, 4.0).unwrap();
        assert!(s.validate().is_err());
        let mut s = small_spec(1);
        s.squash.d_low = 0.0;
        assert!(s.validate().is_err());
        let mut s = small_spec(1);
        s.noise = NoiseSpec::poisson(0.0, 1);
        assert!(s.validate().is_err());
    }

    #[test]
    fn binary_export_round_trips_header() {
        let spec = small_spec(31);
        let psi = build_environment(&spec).unwrap();
        let mut buf = Vec::new();
        psi.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 3 * 8 + 2 * 8 + psi.values().len() * 8);
        let ox = f64::from_le_bytes(buf[0..8].try_into().unwrap());
        let ny = u64::from_le_bytes(buf[24..32].try_into().unwrap());
        assert_eq!(ox, 0.0);
        assert_eq!(ny as usize, psi.ny());
    }
}
