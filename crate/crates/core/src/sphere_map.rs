//! Equidistant fisheye mapping between the upper hemisphere and a square
//! image, plus great-arc interpolation used to lift image-space motion onto
//! the sphere.
//!
//! Image coordinates: `u` to the right, `v` downward, origin at the top-left
//! pixel corner, pixel centers at half-integers. Direction `x` follows `+u`,
//! `y` follows `+v` and `z` is the zenith.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Direction {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Direction {
    pub const ZENITH: Direction = Direction {
        x: 0.0,
        y: 0.0,
        z: 1.0,
    };

    /// Normalizes `(x, y, z)`.
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        let n = (x * x + y * y + z * z).sqrt();
        Self {
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    /// Direction from zenith angle `theta` and azimuth `phi` (radians).
    pub fn from_angles(theta: f64, phi: f64) -> Self {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        Self {
            x: st * cp,
            y: st * sp,
            z: ct,
        }
    }

    pub fn dot(&self, o: &Direction) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    fn cross(&self, o: &Direction) -> [f64; 3] {
        [
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        ]
    }

    /// Angle between two unit directions, stable for tiny and near-π angles.
    pub fn angle_to(&self, o: &Direction) -> f64 {
        let c = self.cross(o);
        let s = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        s.atan2(self.dot(o))
    }

    pub fn zenith_angle(&self) -> f64 {
        let rho = (self.x * self.x + self.y * self.y).sqrt();
        rho.atan2(self.z)
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionKind {
    #[default]
    Equidistant,
}

/// Square equidistant fisheye: pixel radius is proportional to zenith angle
/// and the horizon lies on the inscribed circle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisheyeProjection {
    pub resolution: usize,
    #[serde(default)]
    pub kind: ProjectionKind,
}

/// Pixel coordinate in continuous image space.
pub type PixelCoord = [f64; 2];

/// Relative slack on the disc radius for points produced by round-off.
const DISC_SLACK: f64 = 1e-9;

impl FisheyeProjection {
    pub fn new(resolution: usize) -> Self {
        Self {
            resolution,
            kind: ProjectionKind::Equidistant,
        }
    }

    pub fn center(&self) -> f64 {
        self.resolution as f64 / 2.0
    }

    pub fn radius(&self) -> f64 {
        self.resolution as f64 / 2.0
    }

    pub fn contains(&self, p: PixelCoord) -> bool {
        let c = self.center();
        let (dx, dy) = (p[0] - c, p[1] - c);
        (dx * dx + dy * dy).sqrt() <= self.radius() * (1.0 + DISC_SLACK)
    }

    pub fn project(&self, dir: &Direction) -> Result<PixelCoord> {
        if dir.z < 0.0 {
            return Err(Error::OutOfHemisphere { z: dir.z });
        }
        let rho = (dir.x * dir.x + dir.y * dir.y).sqrt();
        let c = self.center();
        if rho == 0.0 {
            return Ok([c, c]);
        }
        let theta = rho.atan2(dir.z);
        let r = theta / FRAC_PI_2 * self.radius();
        Ok([c + r * dir.x / rho, c + r * dir.y / rho])
    }

    pub fn unproject(&self, p: PixelCoord) -> Result<Direction> {
        if !self.contains(p) {
            return Err(Error::OutsideDisc { u: p[0], v: p[1] });
        }
        let c = self.center();
        let (dx, dy) = (p[0] - c, p[1] - c);
        let r = (dx * dx + dy * dy).sqrt();
        if r == 0.0 {
            return Ok(Direction::ZENITH);
        }
        let theta = (r / self.radius()).min(1.0) * FRAC_PI_2;
        let s = theta.sin();
        Ok(Direction {
            x: s * dx / r,
            y: s * dy / r,
            z: theta.cos(),
        })
    }

    /// Pulls a point outside the disc back onto its boundary. Returns the
    /// point and whether it was moved.
    pub fn clamp_to_disc(&self, p: PixelCoord) -> (PixelCoord, bool) {
        if self.contains(p) {
            return (p, false);
        }
        let c = self.center();
        let (dx, dy) = (p[0] - c, p[1] - c);
        let r = (dx * dx + dy * dy).sqrt();
        let k = self.radius() / r;
        ([c + dx * k, c + dy * k], true)
    }
}

/// Spherical linear interpolation: the point at fraction `s` of the angle
/// along the shorter great arc from `d0` to `d1`.
pub fn great_arc_interp(d0: &Direction, d1: &Direction, s: f64) -> Result<Direction> {
    let omega = d0.angle_to(d1);
    if std::f64::consts::PI - omega < 1e-9 {
        return Err(Error::AntipodalArc);
    }
    if omega < 1e-12 {
        return Ok(Direction::new(
            d0.x + s * (d1.x - d0.x),
            d0.y + s * (d1.y - d0.y),
            d0.z + s * (d1.z - d0.z),
        ));
    }
    let so = omega.sin();
    let a = ((1.0 - s) * omega).sin() / so;
    let b = (s * omega).sin() / so;
    Ok(Direction::new(
        a * d0.x + b * d1.x,
        a * d0.y + b * d1.y,
        a * d0.z + b * d1.z,
    ))
}

/// Result of moving a pixel along a flow vector on the sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Displacement {
    pub coord: PixelCoord,
    /// The flow endpoint fell outside the disc and was pulled onto its edge.
    pub clamped: bool,
}

/// Moves `p` by fraction `s` of the image-space vector `v`, following the
/// great arc between `p` and `p + v` on the hemisphere.
pub fn displace_on_sphere(
    p: PixelCoord,
    v: [f64; 2],
    s: f64,
    proj: &FisheyeProjection,
) -> Result<Displacement> {
    if v == [0.0, 0.0] || s == 0.0 {
        return Ok(Displacement {
            coord: p,
            clamped: false,
        });
    }
    let (target, clamped) = proj.clamp_to_disc([p[0] + v[0], p[1] + v[1]]);
    let d0 = proj.unproject(p)?;
    let d1 = proj.unproject(target)?;
    let d = great_arc_interp(&d0, &d1, s)?;
    let coord = proj.project(&Direction { z: d.z.max(0.0), ..d })?;
    Ok(Displacement { coord, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn close(a: PixelCoord, b: PixelCoord, tol: f64) -> bool {
        (a[0] - b[0]).abs() < tol && (a[1] - b[1]).abs() < tol
    }

    #[test]
    fn project_examples() {
        let proj = FisheyeProjection::new(512);
        assert_eq!(proj.project(&Direction::ZENITH).unwrap(), [256.0, 256.0]);
        let h = proj.project(&Direction::new(1.0, 0.0, 0.0)).unwrap();
        assert!(close(h, [512.0, 256.0], 1e-9));
        let q = proj.project(&Direction::from_angles(FRAC_PI_4, 0.0)).unwrap();
        assert!(close(q, [256.0 + 128.0, 256.0], 1e-9));
        assert!(matches!(
            proj.project(&Direction::new(0.0, 1.0, -0.1)),
            Err(Error::OutOfHemisphere { .. })
        ));
    }

    #[test]
    fn unproject_examples() {
        let proj = FisheyeProjection::new(512);
        assert_eq!(proj.unproject([256.0, 256.0]).unwrap(), Direction::ZENITH);
        let d = proj.unproject([512.0, 256.0]).unwrap();
        assert!((d.x - 1.0).abs() < 1e-12 && d.y.abs() < 1e-12 && d.z.abs() < 1e-12);
        assert!(matches!(proj.unproject([0.0, 0.0]), Err(Error::OutsideDisc { .. })));
    }

    #[test]
    fn arc_examples() {
        let z = Direction::ZENITH;
        let x = Direction::new(1.0, 0.0, 0.0);
        assert_eq!(great_arc_interp(&z, &x, 0.0).unwrap(), z);
        let end = great_arc_interp(&z, &x, 1.0).unwrap();
        assert!(end.angle_to(&x) < 1e-12);
        let mid = great_arc_interp(&z, &x, 0.5).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((mid.x - h).abs() < 1e-12 && mid.y.abs() < 1e-12 && (mid.z - h).abs() < 1e-12);
        let neg = Direction::new(-1.0, 0.0, 0.0);
        assert!(matches!(great_arc_interp(&x, &neg, 0.5), Err(Error::AntipodalArc)));
    }

    #[test]
    fn displace_examples() {
        let proj = FisheyeProjection::new(256);
        let p = [100.5, 80.5];
        for s in [0.0, 0.3, 1.0] {
            assert_eq!(displace_on_sphere(p, [0.0, 0.0], s, &proj).unwrap().coord, p);
        }
        let end = displace_on_sphere(p, [7.0, -3.0], 1.0, &proj).unwrap();
        assert!(close(end.coord, [107.5, 77.5], 1e-3));
        assert!(!end.clamped);

        // radial arc from the zenith: explicit arc computation
        let c = [128.0, 128.0];
        let half = displace_on_sphere(c, [10.0, 0.0], 0.5, &proj).unwrap();
        let d1 = proj.unproject([138.0, 128.0]).unwrap();
        let oracle_theta = 0.5 * Direction::ZENITH.angle_to(&d1);
        let oracle_r = oracle_theta / FRAC_PI_2 * 128.0;
        assert!((oracle_r - 5.0).abs() < 1e-9);
        assert!(close(half.coord, [133.0, 128.0], 1e-9));
    }

    #[test]
    fn displace_clamps_outside_targets() {
        let proj = FisheyeProjection::new(64);
        let r = displace_on_sphere([60.0, 32.0], [20.0, 0.0], 1.0, &proj).unwrap();
        assert!(r.clamped);
        assert!(close(r.coord, [64.0, 32.0], 1e-6));
    }

    #[test]
    fn azimuthal_equivariance() {
        let proj = FisheyeProjection::new(400);
        let c = proj.center();
        for k in 0..50 {
            let theta = 0.03 * k as f64;
            let phi = 0.37 * k as f64;
            let rot = 1.1 + 0.05 * k as f64;
            let a = proj.project(&Direction::from_angles(theta, phi)).unwrap();
            let b = proj.project(&Direction::from_angles(theta, phi + rot)).unwrap();
            let (cr, sr) = (rot.cos(), rot.sin());
            let rotated = [
                c + cr * (a[0] - c) - sr * (a[1] - c),
                c + sr * (a[0] - c) + cr * (a[1] - c),
            ];
            assert!(close(rotated, b, 1e-9));
        }
    }

    #[test]
    fn displacement_continuous_in_s() {
        let proj = FisheyeProjection::new(256);
        let p = [60.0, 190.0];
        let v = [9.0, -6.0];
        let vn = (v[0] * v[0] + v[1] * v[1]) as f64;
        let steps = 30;
        let ds = 1.0 / steps as f64;
        let mut prev = p;
        for k in 1..=steps {
            let q = displace_on_sphere(p, v, k as f64 * ds, &proj).unwrap().coord;
            let jump = ((q[0] - prev[0]).powi(2) + (q[1] - prev[1]).powi(2)).sqrt();
            assert!(jump <= vn.sqrt() * ds * 2.0);
            prev = q;
        }
    }

    proptest! {
        #[test]
        fn unproject_project_roundtrip(r in 0.0f64..1.0, phi in -PI..PI) {
            let proj = FisheyeProjection::new(1024);
            let c = proj.center();
            let p = [c + r * 512.0 * phi.cos(), c + r * 512.0 * phi.sin()];
            let q = proj.project(&proj.unproject(p).unwrap()).unwrap();
            prop_assert!(close(p, q, 1e-4));
        }

        #[test]
        fn arc_angle_additivity(t0 in 0.0f64..1.5, p0 in -PI..PI, t1 in 0.0f64..1.5, p1 in -PI..PI, s in 0.0f64..1.0) {
            let a = Direction::from_angles(t0, p0);
            let b = Direction::from_angles(t1, p1);
            let m = great_arc_interp(&a, &b, s).unwrap();
            let total = a.angle_to(&b);
            prop_assert!((a.angle_to(&m) + m.angle_to(&b) - total).abs() < 1e-9);
            prop_assert!((a.angle_to(&m) - s * total).abs() < 1e-9);
            prop_assert!((m.norm() - 1.0).abs() < 1e-12);
        }
    }
}
