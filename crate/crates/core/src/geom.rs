use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// A point in the plane, in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    /// Perpendicular distance from `self` to the infinite line through `a`, `b`.
    pub fn dist_to_line(&self, a: &Point, b: &Point) -> f64 {
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len = (dx * dx + dy * dy).sqrt();
        if len == 0.0 {
            return self.dist(a);
        }
        ((self.x - a.x) * dy - (self.y - a.y) * dx).abs() / len
    }
}

/// Axis-aligned rectangle, closed on all sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max) || !(y_min < y_max) {
            return Err(CoreError::Config(format!(
                "degenerate rectangle [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        Ok(Rect { x_min, x_max, y_min, y_max })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    /// Rectangle grown by `pad` on every side.
    pub fn dilate(&self, pad: f64) -> Rect {
        Rect {
            x_min: self.x_min - pad,
            x_max: self.x_max + pad,
            y_min: self.y_min - pad,
            y_max: self.y_max + pad,
        }
    }

    /// Euclidean distance from a point to the rectangle (0 inside).
    pub fn dist_to_point(&self, p: &Point) -> f64 {
        let dx = (self.x_min - p.x).max(0.0).max(p.x - self.x_max);
        let dy = (self.y_min - p.y).max(0.0).max(p.y - self.y_max);
        (dx * dx + dy * dy).sqrt()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x_min <= other.x_max
            && other.x_min <= self.x_max
            && self.y_min <= other.y_max
            && other.y_min <= self.y_max
    }
}

/// Distance from a polyline to a rectangle. Vertices are checked directly;
/// an edge that straddles the rectangle's y-band (or x-band) while staying
/// inside the other band is counted as touching. Exact for stencil-scale
/// edges, whose extent is far below the block size.
pub fn polyline_rect_distance(vertices: &[Point], rect: &Rect) -> f64 {
    let mut best = f64::INFINITY;
    for v in vertices {
        best = best.min(rect.dist_to_point(v));
    }
    for w in vertices.windows(2) {
        let (a, b) = (w[0], w[1]);
        let x_lo = a.x.min(b.x);
        let x_hi = a.x.max(b.x);
        let y_lo = a.y.min(b.y);
        let y_hi = a.y.max(b.y);
        let crosses_y = a.y < rect.y_min && b.y > rect.y_max || b.y < rect.y_min && a.y > rect.y_max;
        let crosses_x = a.x < rect.x_min && b.x > rect.x_max || b.x < rect.x_min && a.x > rect.x_max;
        let in_x_band = x_lo <= rect.x_max && x_hi >= rect.x_min;
        let in_y_band = y_lo <= rect.y_max && y_hi >= rect.y_min;
        if (crosses_y && in_x_band) || (crosses_x && in_y_band) {
            return 0.0;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_distance_basics() {
        let r = Rect::new(0.0, 2.0, 0.0, 1.0).unwrap();
        assert_eq!(r.dist_to_point(&Point::new(1.0, 0.5)), 0.0);
        assert_eq!(r.dist_to_point(&Point::new(3.0, 0.5)), 1.0);
        assert!((r.dist_to_point(&Point::new(3.0, 2.0)) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_rect_rejected() {
        assert!(Rect::new(1.0, 1.0, 0.0, 1.0).is_err());
        assert!(Rect::new(0.0, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn point_line_distance() {
        let a = Point::new(0.0, 0.0);
        let b = Point::new(10.0, 0.0);
        assert_eq!(Point::new(5.0, 3.0).dist_to_line(&a, &b), 3.0);
        assert_eq!(Point::new(5.0, 0.0).dist_to_line(&a, &b), 0.0);
    }

    #[test]
    fn polyline_straddle_counts_as_touch() {
        let r = Rect::new(0.0, 10.0, 0.0, 0.5).unwrap();
        // Both endpoints are >1 away but the edge crosses the band.
        let verts = [Point::new(5.0, -2.0), Point::new(5.0, 2.5)];
        assert_eq!(polyline_rect_distance(&verts, &r), 0.0);
    }
}
