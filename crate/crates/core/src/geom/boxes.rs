use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Oriented box: centre, size `(l, w, h)` and yaw about the vertical axis.
/// Length runs along the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("box size must be positive, got {size:?}")));
        }
        if center.iter().chain([&yaw]).any(|x| !x.is_finite()) {
            return Err(Error::Config("box centre and yaw must be finite".into()));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_angle(yaw),
        })
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn center_vec(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    /// Box-frame coordinates `(along heading, across, up)` to the world frame.
    pub fn to_world(&self, local: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(
            self.center[0] + c * local.x - s * local.y,
            self.center[1] + s * local.x + c * local.y,
            self.center[2] + local.z,
        )
    }

    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p.x - self.center[0], p.y - self.center[1]);
        Vector3::new(c * dx + s * dy, -s * dx + c * dy, p.z - self.center[2])
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let l = self.to_local(p);
        (0..3).all(|a| l[a].abs() <= 0.5 * self.size[a])
    }

    /// Counter-clockwise footprint corners in the ground plane.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (0.5 * self.size[0], 0.5 * self.size[1]);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(x, y)| {
            let w = self.to_world(&Vector3::new(x, y, 0.0));
            [w.x, w.y]
        })
    }

    /// All eight corners.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let h = Vector3::from(self.size) * 0.5;
        std::array::from_fn(|n| {
            let sx = if n & 4 != 0 { 1.0 } else { -1.0 };
            let sy = if n & 2 != 0 { 1.0 } else { -1.0 };
            let sz = if n & 1 != 0 { 1.0 } else { -1.0 };
            self.to_world(&Vector3::new(sx * h.x, sy * h.y, sz * h.z))
        })
    }

    /// Bounds `[min, max]` of the axis-aligned box enclosing this one.
    pub fn enclosing_aabb(&self) -> ([f64; 3], [f64; 3]) {
        let fp = self.footprint();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in fp {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        lo[2] = self.center[2] - 0.5 * self.size[2];
        hi[2] = self.center[2] + 0.5 * self.size[2];
        (lo, hi)
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    0.5 * twice.abs()
}

/// Sutherland-Hodgman clip of `subject` by the convex counter-clockwise
/// polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Overlap area of the two footprints.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    polygon_area(&clip_convex(&a.footprint(), &b.footprint()))
}

/// Rotated 3-D intersection over union: footprint overlap times vertical
/// overlap, over the union volume.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let z_lo = (a.center[2] - 0.5 * a.size[2]).max(b.center[2] - 0.5 * b.size[2]);
    let z_hi = (a.center[2] + 0.5 * a.size[2]).min(b.center[2] + 0.5 * b.size[2]);
    let dz = (z_hi - z_lo).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// IoU of the axis-aligned boxes enclosing `a` and `b`.
pub fn aabb_iou(a: &Box3D, b: &Box3D) -> f64 {
    let (alo, ahi) = a.enclosing_aabb();
    let (blo, bhi) = b.enclosing_aabb();
    let mut inter = 1.0;
    for ax in 0..3 {
        inter *= (ahi[ax].min(bhi[ax]) - alo[ax].max(blo[ax])).max(0.0);
    }
    let vol = |lo: [f64; 3], hi: [f64; 3]| (0..3).map(|i| hi[i] - lo[i]).product::<f64>();
    let union = vol(alo, ahi) + vol(blo, bhi) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(x: f64, y: f64, z: f64) -> Box3D {
        Box3D::new([x, y, z], [1.0; 3], 0.0).unwrap()
    }

    /// Monte-Carlo estimate of the IoU by sampling the union's bounding box.
    fn monte_carlo_iou(a: &Box3D, b: &Box3D, n: usize, seed: u64) -> f64 {
        let (alo, ahi) = a.enclosing_aabb();
        let (blo, bhi) = b.enclosing_aabb();
        let lo: [f64; 3] = std::array::from_fn(|i| alo[i].min(blo[i]));
        let hi: [f64; 3] = std::array::from_fn(|i| ahi[i].max(bhi[i]));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut inter, mut union) = (0usize, 0usize);
        for _ in 0..n {
            let p = Vector3::from_fn(|i, _| rng.random_range(lo[i]..hi[i]));
            let (ia, ib) = (a.contains(&p), b.contains(&p));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = unit(0.0, 0.0, 0.0);
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(iou_3d(&a, &unit(3.0, 0.0, 0.0)), 0.0);
        assert_eq!(iou_3d(&a, &unit(0.0, 0.0, 1.5)), 0.0);
        let b = unit(0.5, 0.0, 0.0);
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let mc = monte_carlo_iou(&a, &b, 1_000_000, 0);
        assert!((mc - 1.0 / 3.0).abs() < 2e-3, "{mc}");
    }

    #[test]
    fn rotated_iou_matches_monte_carlo() {
        let a = Box3D::new([1.0, 2.0, -1.0], [3.9, 1.6, 1.56], 0.3).unwrap();
        let b = Box3D::new([1.6, 2.3, -0.8], [4.2, 1.7, 1.5], -0.5).unwrap();
        let exact = iou_3d(&a, &b);
        let mc = monte_carlo_iou(&a, &b, 1_000_000, 1);
        assert!((exact - mc).abs() < 2e-3, "{exact} vs {mc}");
        // A quarter turn of a square footprint is the same box.
        let sq = Box3D::new([0.0; 3], [2.0, 2.0, 1.0], 0.0).unwrap();
        let sq90 = Box3D::new([0.0; 3], [2.0, 2.0, 1.0], PI / 2.0).unwrap();
        assert!((iou_3d(&sq, &sq90) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn yaw_is_normalized() {
        let b = Box3D::new([0.0; 3], [1.0; 3], 3.0 * PI).unwrap();
        assert!((b.yaw - PI).abs() < 1e-12);
        let b = Box3D::new([0.0; 3], [1.0; 3], -PI).unwrap();
        assert!((b.yaw - PI).abs() < 1e-12);
        assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn contains_respects_rotation() {
        let b = Box3D::new([0.0; 3], [4.0, 1.0, 1.0], PI / 2.0).unwrap();
        assert!(b.contains(&Vector3::new(0.0, 1.9, 0.0)));
        assert!(!b.contains(&Vector3::new(1.9, 0.0, 0.0)));
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (
            -3.0f64..3.0, -3.0f64..3.0, -1.0f64..1.0,
            0.5f64..4.0, 0.5f64..4.0, 0.5f64..2.0, -PI..PI,
        )
            .prop_map(|(x, y, z, l, w, h, yaw)| Box3D::new([x, y, z], [l, w, h], yaw).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (ab, ba) = (iou_3d(&a, &b), iou_3d(&b, &a));
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        }
    }
}
