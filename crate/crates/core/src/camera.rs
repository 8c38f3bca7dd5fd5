use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot3, mat3_t_vec, mat3_vec, norm3, sub3, Mat3, Vec3};
use crate::scalar::Real;

/// Pinhole camera. Pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
    /// Row-major rigid transform.
    pub world_to_camera: [[T; 4]; 4],
    pub near: T,
    pub far: T,
}

impl<T: Real> Camera<T> {
    /// Camera at the world origin looking down +z.
    pub fn identity(width: usize, height: usize, focal: T) -> Self {
        let z = T::zero();
        let o = T::one();
        Self {
            fx: focal,
            fy: focal,
            cx: T::lit(width as f64 / 2.0),
            cy: T::lit(height as f64 / 2.0),
            width,
            height,
            world_to_camera: [[o, z, z, z], [z, o, z, z], [z, z, o, z], [z, z, z, o]],
            near: T::lit(0.01),
            far: T::lit(100.0),
        }
    }

    /// Look-at camera with vertical field of view `fov_y` in degrees; image y points down.
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>, fov_y: T, width: usize, height: usize) -> Result<Self> {
        let fwd = sub3(&target, &eye);
        let n = norm3(&fwd);
        if n <= T::zero() || !n.is_finite() {
            return Err(Error::invalid("look_at eye and target coincide"));
        }
        let f = fwd.map(|v| v / n);
        // right = f × up, camera y = f × right (points down in the image)
        let cross = |a: &Vec3<T>, b: &Vec3<T>| {
            [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        };
        let r = cross(&f, &up);
        let rn = norm3(&r);
        if rn <= T::lit(1e-12) {
            return Err(Error::invalid("look_at up vector parallel to view direction"));
        }
        let r = r.map(|v| v / rn);
        let d = cross(&f, &r);
        let rot = [r, d, f];
        let t = mat3_vec(&rot, &eye).map(|v| -v);
        let half = (fov_y.to_radians() / T::lit(2.0)).tan();
        if !(half > T::zero()) {
            return Err(Error::invalid("fov must be in (0, 180) degrees"));
        }
        let focal = T::lit(height as f64 / 2.0) / half;
        let mut cam = Self::identity(width, height, focal);
        for i in 0..3 {
            for j in 0..3 {
                cam.world_to_camera[i][j] = rot[i][j];
            }
            cam.world_to_camera[i][3] = t[i];
        }
        Ok(cam)
    }

    pub fn rotation(&self) -> Mat3<T> {
        let m = &self.world_to_camera;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> Vec3<T> {
        let m = &self.world_to_camera;
        [m[0][3], m[1][3], m[2][3]]
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vec3<T> {
        mat3_t_vec(&self.rotation(), &self.translation()).map(|v| -v)
    }

    pub fn world_to_cam(&self, p: &Vec3<T>) -> Vec3<T> {
        let r = mat3_vec(&self.rotation(), p);
        let t = self.translation();
        [r[0] + t[0], r[1] + t[1], r[2] + t[2]]
    }

    pub fn cam_to_world(&self, p: &Vec3<T>) -> Vec3<T> {
        mat3_t_vec(&self.rotation(), &sub3(p, &self.translation()))
    }

    /// Continuous pixel coordinates of a world point, plus camera-frame depth.
    pub fn project(&self, p: &Vec3<T>) -> ([T; 2], T) {
        let c = self.world_to_cam(p);
        ([self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy], c[2])
    }

    /// World point at camera-frame depth `depth` along the ray through `(u, v)`.
    pub fn backproject(&self, u: T, v: T, depth: T) -> Vec3<T> {
        let c = [(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth];
        self.cam_to_world(&c)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { T::one() } else { T::zero() };
                let d = dot3(&r[i], &r[j]) - e;
                if d.abs() > T::lit(1e-6) {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        if !(self.near > T::zero() && self.near < self.far) {
            return Err(Error::invalid("camera requires 0 < near < far"));
        }
        if self.width == 0 || self.height == 0 || !(self.fx > T::zero()) || !(self.fy > T::zero()) {
            return Err(Error::invalid("camera intrinsics must be positive"));
        }
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> Camera<S> {
        let c = |v: T| S::lit(v.as_f64());
        Camera {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            width: self.width,
            height: self.height,
            world_to_camera: self.world_to_camera.map(|row| row.map(c)),
            near: c(self.near),
            far: c(self.far),
        }
    }

    /// Same pose and field of view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = T::lit(width as f64 / self.width as f64);
        let sy = T::lit(height as f64 / self.height as f64);
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }
}
