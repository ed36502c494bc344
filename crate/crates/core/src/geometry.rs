//! Small fixed-size vector helpers.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub type Point2 = [f64; 2];
pub type Point3 = [f64; 3];

#[inline]
pub fn dist2<T: Real>(a: [T; 2], b: [T; 2]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

#[inline]
pub fn dist3<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[inline]
pub fn lift<T: Real>(u: [T; 2], height: T) -> [T; 3] {
    [u[0], u[1], height]
}

#[inline]
pub fn cast3<T: Real>(p: Point3) -> [T; 3] {
    [T::of(p[0]), T::of(p[1]), T::of(p[2])]
}

/// Axis-aligned rectangle in the horizontal plane (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Point2,
    pub max: Point2,
}

impl Bounds {
    pub fn new(min: Point2, max: Point2) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: Point2) -> bool {
        (0..2).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn is_valid(&self) -> bool {
        (0..2).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.max[i] > self.min[i])
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn center(&self) -> Point2 {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    pub fn corners(&self) -> [Point2; 4] {
        [
            self.min,
            [self.max[0], self.min[1]],
            self.max,
            [self.min[0], self.max[1]],
        ]
    }

    /// Largest 3D distance from `x` to any point of the area lifted to `height`.
    pub fn max_range_from(&self, x: Point3, height: f64) -> f64 {
        // distance to a convex set is maximized at a vertex
        self.corners()
            .iter()
            .map(|c| dist3([c[0], c[1], height], x))
            .fold(0.0, f64::max)
    }
}
