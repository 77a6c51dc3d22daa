//! Capsule and oriented-box primitives for the collision checks.

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

/// A swept sphere around the segment `a`–`b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

impl Capsule {
    pub fn new(a: Vector3<f64>, b: Vector3<f64>, radius: f64) -> Self {
        Self { a, b, radius }
    }

    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.a + (self.b - self.a) * t
    }
}

/// Box with a yaw about the vertical axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrientedBox {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
}

impl OrientedBox {
    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    pub fn half_extents(&self) -> Vector3<f64> {
        Vector3::from(self.half_extents)
    }

    fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw)
    }

    /// Point expressed in the box frame.
    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().inverse() * (p - self.center())
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let l = self.to_local(p);
        let h = self.half_extents();
        l.x.abs() <= h.x && l.y.abs() <= h.y && l.z.abs() <= h.z
    }

    /// Euclidean distance from a point to the (solid) box; zero inside.
    pub fn distance_to_point(&self, p: &Vector3<f64>) -> f64 {
        local_box_distance(&self.to_local(p), &self.half_extents())
    }

    /// Smallest distance between the segment `a`–`b` and the solid box.
    pub fn distance_to_segment(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        let h = self.half_extents();
        let la = self.to_local(a);
        let lb = self.to_local(b);
        let f = |t: f64| local_box_distance(&(la + (lb - la) * t), &h);
        // Distance to a convex set along a line is convex in t, so a
        // golden-section search converges to the global minimum.
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut x1 = hi - inv_phi * (hi - lo);
        let mut x2 = lo + inv_phi * (hi - lo);
        let (mut f1, mut f2) = (f(x1), f(x2));
        for _ in 0..80 {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - inv_phi * (hi - lo);
                f1 = f(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + inv_phi * (hi - lo);
                f2 = f(x2);
            }
        }
        f(0.0).min(f(1.0)).min(f1).min(f2)
    }

    pub fn intersects_capsule(&self, c: &Capsule) -> bool {
        self.distance_to_segment(&c.a, &c.b) <= c.radius
    }
}

fn local_box_distance(l: &Vector3<f64>, h: &Vector3<f64>) -> f64 {
    let dx = (l.x.abs() - h.x).max(0.0);
    let dy = (l.y.abs() - h.y).max(0.0);
    let dz = (l.z.abs() - h.z).max(0.0);
    (dx * dx + dy * dy + dz * dz).sqrt()
}
