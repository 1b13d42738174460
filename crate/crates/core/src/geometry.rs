//! Planar pose algebra, oriented boxes and the ego-centric raster grid.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.sin().atan2(a.cos());
    // atan2 returns -π for the negative branch cut; the canonical range is closed at +π.
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// A point in the plane, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from(p: [f64; 2]) -> Self {
        Point::new(p[0], p[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Vehicle state `(x, y, ψ)` with the heading kept in `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { x: 0.0, y: 0.0, psi: 0.0 };

    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        Self { x, y, psi: wrap_angle(psi) }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    /// Expresses `p` (world frame) in the body frame of `self`.
    pub fn to_local(&self, p: &Pose) -> Pose {
        let q = self.point_to_local(p.position());
        Pose::new(q.x, q.y, p.psi - self.psi)
    }

    /// Inverse of [`Pose::to_local`]: lifts a body-frame pose back to the world frame.
    pub fn to_world(&self, local: &Pose) -> Pose {
        let q = self.point_to_world(local.position());
        Pose::new(q.x, q.y, local.psi + self.psi)
    }

    pub fn point_to_local(&self, p: Point) -> Point {
        let (s, c) = self.psi.sin_cos();
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        Point::new(c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn point_to_world(&self, p: Point) -> Point {
        let (s, c) = self.psi.sin_cos();
        Point::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.psi]
    }
}

/// Rectangular footprint; `length` runs along the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Pose,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(center: Pose, length: f64, width: f64) -> Result<Self> {
        if !(length > 0.0 && width > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "box extents must be positive, got length {length} width {width}"
            )));
        }
        Ok(Self { center, length, width })
    }

    /// Corners in counter-clockwise order, starting at front-right.
    pub fn corners(&self) -> [Point; 4] {
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)]
            .map(|(x, y)| self.center.point_to_world(Point::new(x, y)))
    }

    /// Radius of the circumscribed circle.
    pub fn bounding_radius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }

    /// The same box expressed in the body frame of `origin`.
    pub fn to_local(&self, origin: &Pose) -> OrientedBox {
        OrientedBox { center: origin.to_local(&self.center), ..*self }
    }
}

/// Geometry of the square ego-centric raster: `n` pixels per side at `resolution` m/px
/// covering `[-L, L]²` around the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterSpec {
    n: usize,
    resolution: f64,
    sensing_limit: f64,
}

impl Default for RasterSpec {
    fn default() -> Self {
        Self { n: 200, resolution: 0.1, sensing_limit: 10.0 }
    }
}

impl RasterSpec {
    /// Builds a spec from the sensing limit and resolution; `2L/r` must be an even integer.
    pub fn new(sensing_limit: f64, resolution: f64) -> Result<Self> {
        if !(sensing_limit > 0.0 && resolution > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "raster needs positive limit and resolution, got L={sensing_limit} r={resolution}"
            )));
        }
        let exact = 2.0 * sensing_limit / resolution;
        let n = exact.round();
        if (exact - n).abs() > 1e-9 * exact.max(1.0) || n < 2.0 || !(n as usize).is_multiple_of(2) {
            return Err(Error::InvalidGeometry(format!(
                "2L/r = {exact} must be an even integer (L={sensing_limit}, r={resolution})"
            )));
        }
        Ok(Self { n: n as usize, resolution, sensing_limit })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn sensing_limit(&self) -> f64 {
        self.sensing_limit
    }

    /// Continuous `(row, col)` coordinates of a local point. The ego origin lands on
    /// `(n/2, n/2)`, local +x grows the column and local +y shrinks the row.
    pub fn world_to_pixel(&self, p: Point) -> (f64, f64) {
        let half = (self.n / 2) as f64;
        (half - p.y / self.resolution, half + p.x / self.resolution)
    }

    /// Integer pixel containing `p`; may be outside `[0, n)`.
    pub fn pixel_index(&self, p: Point) -> (i64, i64) {
        let (r, c) = self.world_to_pixel(p);
        (r.floor() as i64, c.floor() as i64)
    }

    /// Local coordinates of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> Point {
        let half = (self.n / 2) as f64;
        Point::new(
            (col as f64 + 0.5 - half) * self.resolution,
            (half - row as f64 - 0.5) * self.resolution,
        )
    }

    /// Closed square window test in the local frame.
    pub fn contains(&self, p: Point) -> bool {
        p.x.abs() <= self.sensing_limit && p.y.abs() <= self.sensing_limit
    }
}

/// Crossing-number point-in-polygon test.
pub fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Separating-axis test between a convex polygon and the axis-aligned square `[-h, h]²`.
/// Touching counts as intersecting.
pub fn convex_intersects_square(poly: &[Point], h: f64) -> bool {
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in poly {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    if xmin > h || xmax < -h || ymin > h || ymax < -h {
        return false;
    }
    let square = [Point::new(h, -h), Point::new(h, h), Point::new(-h, h), Point::new(-h, -h)];
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let axis = Point::new(-(b.y - a.y), b.x - a.x);
        let project = |q: &Point| q.x * axis.x + q.y * axis.y;
        let (pmin, pmax) = poly
            .iter()
            .map(project)
            .fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let (smin, smax) = square
            .iter()
            .map(project)
            .fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if pmin > smax || pmax < smin {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!(close(wrap_angle(-PI), PI, 1e-12));
        assert!(close(wrap_angle(3.0 * PI), PI, 1e-12));
        assert!(close(wrap_angle(2.0 * PI + 0.5), 0.5, 1e-12));
        assert!(close(wrap_angle(-FRAC_PI_2 - 2.0 * PI), -FRAC_PI_2, 1e-12));
    }

    #[test]
    fn to_local_of_self_is_identity() {
        let o = Pose::new(3.2, -1.7, 2.4);
        let l = o.to_local(&o);
        assert_eq!((l.x, l.y, l.psi), (0.0, 0.0, 0.0));
    }

    #[test]
    fn to_local_quarter_turn() {
        // Rotation oracle: R(-π/2)·(0, 1) = (1, 0).
        let l = Pose::new(0.0, 0.0, FRAC_PI_2).to_local(&Pose::new(0.0, 1.0, FRAC_PI_2));
        assert!(close(l.x, 1.0, 1e-12) && close(l.y, 0.0, 1e-12) && close(l.psi, 0.0, 1e-12));
    }

    #[test]
    fn axis_aligned_box_corners() {
        let b = OrientedBox::new(Pose::IDENTITY, 4.0, 2.0).unwrap();
        let c = b.corners();
        let expect = [(2.0, -1.0), (2.0, 1.0), (-2.0, 1.0), (-2.0, -1.0)];
        for (p, (x, y)) in c.iter().zip(expect) {
            assert!(close(p.x, x, 1e-12) && close(p.y, y, 1e-12));
        }
        // Shoelace area positive means counter-clockwise.
        let area: f64 = (0..4).map(|i| c[i].x * c[(i + 1) % 4].y - c[(i + 1) % 4].x * c[i].y).sum();
        assert!(area > 0.0);
    }

    #[test]
    fn quarter_turn_swaps_extents() {
        let b = OrientedBox::new(Pose::new(0.0, 0.0, FRAC_PI_2), 4.0, 2.0).unwrap();
        let c = b.corners();
        let xmax = c.iter().map(|p| p.x).fold(f64::MIN, f64::max);
        let ymax = c.iter().map(|p| p.y).fold(f64::MIN, f64::max);
        assert!(close(xmax, 1.0, 1e-12) && close(ymax, 2.0, 1e-12));
    }

    #[test]
    fn rotated_box_matches_rotation_oracle() {
        let (psi, cx, cy, l, w) = (0.7_f64, 1.5, -2.0, 4.6, 1.9);
        let b = OrientedBox::new(Pose::new(cx, cy, psi), l, w).unwrap();
        let rot = |u: f64, v: f64| (cx + psi.cos() * u - psi.sin() * v, cy + psi.sin() * u + psi.cos() * v);
        let expect = [rot(l / 2.0, -w / 2.0), rot(l / 2.0, w / 2.0), rot(-l / 2.0, w / 2.0), rot(-l / 2.0, -w / 2.0)];
        for (p, (x, y)) in b.corners().iter().zip(expect) {
            assert!(close(p.x, x, 1e-12) && close(p.y, y, 1e-12));
        }
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(OrientedBox::new(Pose::IDENTITY, 0.0, 1.0).is_err());
        assert!(OrientedBox::new(Pose::IDENTITY, 1.0, -1.0).is_err());
    }

    #[test]
    fn raster_spec_validation() {
        let s = RasterSpec::new(10.0, 0.1).unwrap();
        assert_eq!(s.n(), 200);
        assert!(RasterSpec::new(10.0, 0.3).is_err());
        assert!(RasterSpec::new(0.15, 0.1).is_err());
        assert!(RasterSpec::new(-1.0, 0.1).is_err());
    }

    #[test]
    fn world_to_pixel_anchors() {
        let s = RasterSpec::default();
        assert_eq!(s.world_to_pixel(Point::ORIGIN), (100.0, 100.0));
        assert_eq!(s.pixel_index(Point::ORIGIN), (100, 100));
        let (_, col) = s.world_to_pixel(Point::new(10.0, 0.0));
        assert!(close(col, 200.0, 1e-9));
        let (row, _) = s.world_to_pixel(Point::new(0.0, 10.0));
        assert!(close(row, 0.0, 1e-9));
    }

    #[test]
    fn pixel_center_round_trip() {
        let s = RasterSpec::default();
        for (r, c) in [(0, 0), (100, 100), (199, 3), (57, 142)] {
            assert_eq!(s.pixel_index(s.pixel_center(r, c)), (r as i64, c as i64));
        }
    }

    #[test]
    fn square_intersection() {
        let b = OrientedBox::new(Pose::new(20.0, 0.0, 0.0), 4.0, 2.0).unwrap();
        assert!(!convex_intersects_square(&b.corners(), 10.0));
        let b = OrientedBox::new(Pose::new(11.0, 0.0, 0.0), 4.0, 2.0).unwrap();
        assert!(convex_intersects_square(&b.corners(), 10.0));
        // Diagonal box near a corner whose bounding box overlaps but the box itself does not.
        let b = OrientedBox::new(Pose::new(11.6, 11.6, PI / 4.0), 4.0, 0.5).unwrap();
        assert!(!convex_intersects_square(&b.corners(), 10.0));
    }

    proptest! {
        #[test]
        fn to_local_round_trip(ox in -50.0..50.0f64, oy in -50.0..50.0f64, opsi in -PI..PI,
                               px in -50.0..50.0f64, py in -50.0..50.0f64, ppsi in -PI..PI) {
            let o = Pose::new(ox, oy, opsi);
            let p = Pose::new(px, py, ppsi);
            let back = o.to_world(&o.to_local(&p));
            prop_assert!(close(back.x, p.x, 1e-9) && close(back.y, p.y, 1e-9));
            prop_assert!(close(wrap_angle(back.psi - p.psi), 0.0, 1e-9));
        }

        #[test]
        fn to_local_is_isometry(ox in -50.0..50.0f64, oy in -50.0..50.0f64, opsi in -PI..PI,
                                pts in proptest::collection::vec((-30.0..30.0f64, -30.0..30.0f64), 2..6)) {
            let o = Pose::new(ox, oy, opsi);
            let pts: Vec<Point> = pts.into_iter().map(|(x, y)| Point::new(x, y)).collect();
            let loc: Vec<Point> = pts.iter().map(|p| o.point_to_local(*p)).collect();
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    prop_assert!(close(pts[i].distance(&pts[j]), loc[i].distance(&loc[j]), 1e-9));
                }
            }
        }

        #[test]
        fn heading_stays_wrapped(a in -100.0..100.0f64, b in -100.0..100.0f64) {
            let p = Pose::new(0.0, 0.0, a).to_local(&Pose::new(1.0, 1.0, b));
            prop_assert!(p.psi > -PI && p.psi <= PI);
        }

        #[test]
        fn pixel_mapping_is_affine(x in -10.0..10.0f64, y in -10.0..10.0f64, dx in -3.0..3.0f64) {
            let s = RasterSpec::default();
            let (r0, c0) = s.world_to_pixel(Point::new(x, y));
            let (r1, c1) = s.world_to_pixel(Point::new(x + dx, y));
            prop_assert!(close(c1 - c0, dx / 0.1, 1e-9));
            prop_assert!(close(r1, r0, 1e-12));
        }
    }
}
