//! Pinhole camera. Integer pixel coordinates are pixel centers.

use crate::error::{Error, Result};
use crate::math::{sqrt, Vec3};

/// Points closer than this to the image plane are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::param("focal length", "must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::param("principal point", "must lie inside the image"));
        }
        Ok(())
    }

    pub fn diagonal(&self) -> f64 {
        let (w, h) = (self.width as f64, self.height as f64);
        sqrt(w * w + h * h)
    }

    /// Intrinsics of the image downsampled by an integer factor, where
    /// output pixel `i` averages input pixels `f*i .. f*i + f - 1`.
    pub fn downsampled(&self, factor: usize) -> CameraIntrinsics {
        if factor <= 1 {
            return *self;
        }
        let f = factor as f64;
        let off = (f - 1.0) * 0.5;
        CameraIntrinsics {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx - off) / f,
            cy: (self.cy - off) / f,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    /// Perspective projection; `None` when the point is behind the camera.
    #[inline]
    pub fn project(&self, p: &Vec3) -> Option<[f64; 2]> {
        let z = p.z();
        if z <= MIN_DEPTH {
            return None;
        }
        Some([self.fx * p.x() / z + self.cx, self.fy * p.y() / z + self.cy])
    }

    /// Projection and its 2x3 Jacobian with respect to the point.
    #[inline]
    pub fn project_with_jacobian(&self, p: &Vec3) -> Option<([f64; 2], [Vec3; 2])> {
        let z = p.z();
        if z <= MIN_DEPTH {
            return None;
        }
        let iz = 1.0 / z;
        let (x, y) = (p.x(), p.y());
        Some((
            [self.fx * x * iz + self.cx, self.fy * y * iz + self.cy],
            [
                Vec3::new(self.fx * iz, 0.0, -self.fx * x * iz * iz),
                Vec3::new(0.0, self.fy * iz, -self.fy * y * iz * iz),
            ],
        ))
    }

    pub fn project_all(&self, points: &[Vec3]) -> alloc::vec::Vec<Option<[f64; 2]>> {
        points.iter().map(|p| self.project(p)).collect()
    }

    /// Back-projects pixel `(u, v)` at depth `z` along the optical axis.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Result<Vec3> {
        if !(z > 0.0) {
            return Err(Error::param("depth", "must be positive"));
        }
        Ok(Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(200.0, 210.0, 160.0, 120.0, 320, 240).unwrap()
    }

    #[test]
    fn principal_ray_hits_principal_point() {
        let c = cam();
        for z in [0.1, 1.0, 42.0] {
            assert_eq!(c.project(&Vec3::new(0.0, 0.0, z)), Some([c.cx, c.cy]));
        }
        assert_eq!(c.back_project(c.cx, c.cy, 3.0).unwrap(), Vec3::new(0.0, 0.0, 3.0));
    }

    #[test]
    fn unit_pixel_displacement() {
        let c = CameraIntrinsics {
            cx: 0.0,
            ..cam()
        };
        let z = 2.5;
        let uv = c.project(&Vec3::new(z / c.fx, 0.0, z)).unwrap();
        assert!((uv[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_rejected() {
        let c = cam();
        assert!(c.project(&Vec3::new(0.0, 0.0, 0.0)).is_none());
        assert!(c.project(&Vec3::new(0.0, 0.0, -1.0)).is_none());
        assert!(c.back_project(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn project_back_project_on_pixel_grid() {
        let c = cam();
        for v in (0..240).step_by(17) {
            for u in (0..320).step_by(23) {
                let p = c.back_project(u as f64, v as f64, 1.7).unwrap();
                let uv = c.project(&p).unwrap();
                assert!((uv[0] - u as f64).abs() < 1e-9 && (uv[1] - v as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_intrinsics() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 5.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn jacobian_matches_differences() {
        let c = cam();
        let p = Vec3::new(0.3, -0.4, 2.2);
        let (_, j) = c.project_with_jacobian(&p).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut a = p;
            let mut b = p;
            a.0[k] += h;
            b.0[k] -= h;
            let (pa, pb) = (c.project(&a).unwrap(), c.project(&b).unwrap());
            for r in 0..2 {
                let fd = (pa[r] - pb[r]) / (2.0 * h);
                assert!((fd - j[r].0[k]).abs() < 1e-5);
            }
        }
    }
}
