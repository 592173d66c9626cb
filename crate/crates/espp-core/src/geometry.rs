//! Planar points, poses and oriented-rectangle overlap tests shared across the pipeline.

use serde::{Deserialize, Serialize};

/// A point (or free vector) in the road plane, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn distance(&self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// L1 distance, used for stop-point scoring and the driving-target pull.
    pub fn manhattan(&self, other: Point2) -> f64 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    pub fn add(&self, dx: f64, dy: f64) -> Point2 {
        Point2::new(self.x + dx, self.y + dy)
    }

    /// Linear interpolation: t = 0 gives self, t = 1 gives other.
    pub fn lerp(&self, other: Point2, t: f64) -> Point2 {
        Point2::new(
            self.x + t * (other.x - self.x),
            self.y + t * (other.y - self.y),
        )
    }
}

/// Position plus heading (rad, world frame, counterclockwise from +x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, psi: f64) -> Self {
        Pose { x, y, psi }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// Express a world-frame point in this pose's local frame.
    pub fn to_local(&self, p: Point2) -> Point2 {
        let (s, c) = self.psi.sin_cos();
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        Point2::new(c * dx + s * dy, -s * dx + c * dy)
    }

    /// Express a local-frame point in the world frame.
    pub fn to_world(&self, p: Point2) -> Point2 {
        let (s, c) = self.psi.sin_cos();
        Point2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }
}

/// Rectangle footprint centered on a pose, axis-aligned with its heading.
#[derive(Debug, Clone, Copy)]
pub struct OrientedRect {
    pub center: Point2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    pub fn new(center: Point2, heading: f64, length: f64, width: f64) -> Self {
        OrientedRect {
            center,
            heading,
            length,
            width,
        }
    }

    pub fn corners(&self) -> [Point2; 4] {
        let (s, c) = self.heading.sin_cos();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        let corner = |a: f64, b: f64| {
            Point2::new(
                self.center.x + c * a - s * b,
                self.center.y + s * a + c * b,
            )
        };
        [
            corner(hl, hw),
            corner(hl, -hw),
            corner(-hl, -hw),
            corner(-hl, hw),
        ]
    }

    /// Separating-axis overlap test between two oriented rectangles.
    /// Touching edges count as overlap.
    pub fn overlaps(&self, other: &OrientedRect) -> bool {
        let ca = self.corners();
        let cb = other.corners();
        for rect in [self, other] {
            let (s, c) = rect.heading.sin_cos();
            for axis in [(c, s), (-s, c)] {
                let project = |pts: &[Point2; 4]| {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for p in pts {
                        let v = p.x * axis.0 + p.y * axis.1;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    (lo, hi)
                };
                let (a_lo, a_hi) = project(&ca);
                let (b_lo, b_hi) = project(&cb);
                if a_hi < b_lo || b_hi < a_lo {
                    return false;
                }
            }
        }
        true
    }
}

/// Wrap an angle to (-pi, pi]. Angles already in range pass through
/// unchanged, bit for bit.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -std::f64::consts::PI && a <= std::f64::consts::PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * std::f64::consts::PI);
    if r > std::f64::consts::PI {
        r -= 2.0 * std::f64::consts::PI;
    }
    r
}
