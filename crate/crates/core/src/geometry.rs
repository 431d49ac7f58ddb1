//! Calibrated pinhole cameras and the 2D/3D transforms shared by lifting,
//! rendering and the synthetic generator.
//!
//! World frame: z up, ground plane at z = 0, meters. Camera frame follows the
//! usual computer-vision convention (x right, y down, z forward).

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};

pub type WorldPoint = Point3<f64>;

/// Result of projecting a world point into a camera.
///
/// `u`, `v` are continuous pixel coordinates; pixel `(i, j)` covers
/// `[i, i+1) x [j, j+1)`. When `depth` is (numerically) zero the
/// coordinates are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub in_frustum: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    intrinsic: Matrix3<f64>,
    intrinsic_inv: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    pub width: u32,
    pub height: u32,
    pub view_id: i64,
}

const ORTHO_TOL: f64 = 1e-6;

impl CameraModel {
    /// Builds a camera, checking that `rotation` is a proper rotation and
    /// `intrinsic` is an upper-triangular calibration matrix.
    pub fn new(
        intrinsic: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: u32,
        height: u32,
        view_id: i64,
    ) -> Result<Self> {
        check_intrinsic(&intrinsic)?;
        let ortho = orthonormality_error(&rotation);
        if ortho >= ORTHO_TOL {
            return Err(Error::InvalidCamera(format!(
                "rotation is not orthonormal (max |RR^T - I| = {ortho:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() >= ORTHO_TOL {
            return Err(Error::InvalidCamera(format!("rotation determinant {det} != 1")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("image size must be positive".into()));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidCamera("non-finite translation".into()));
        }
        let intrinsic_inv = intrinsic
            .try_inverse()
            .ok_or_else(|| Error::InvalidCamera("singular intrinsic matrix".into()))?;
        Ok(Self {
            intrinsic,
            intrinsic_inv,
            rotation,
            translation,
            width,
            height,
            view_id,
        })
    }

    /// Camera at `eye` looking at `target` with world z as the up hint.
    pub fn look_at(
        intrinsic: Matrix3<f64>,
        eye: WorldPoint,
        target: WorldPoint,
        width: u32,
        height: u32,
        view_id: i64,
    ) -> Result<Self> {
        Self::look_at_with_up(intrinsic, eye, target, Vector3::z(), width, height, view_id)
    }

    pub fn look_at_with_up(
        intrinsic: Matrix3<f64>,
        eye: WorldPoint,
        target: WorldPoint,
        up: Vector3<f64>,
        width: u32,
        height: u32,
        view_id: i64,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("viewing direction parallel to up".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye.coords);
        Self::new(intrinsic, rotation, translation, width, height, view_id)
    }

    pub fn intrinsic(&self) -> &Matrix3<f64> {
        &self.intrinsic
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center `-R^T t` in world coordinates.
    pub fn center(&self) -> WorldPoint {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    pub fn project(&self, p: &WorldPoint) -> PixelProjection {
        let cam = self.rotation * p.coords + self.translation;
        let h = self.intrinsic * cam;
        let depth = h.z;
        // points at the camera center have no defined pixel
        if depth.abs() <= 1e-12 * (1.0 + cam.norm()) {
            return PixelProjection {
                u: f64::NAN,
                v: f64::NAN,
                depth,
                in_frustum: false,
            };
        }
        let u = h.x / depth;
        let v = h.y / depth;
        let in_frustum = depth > 0.0
            && u >= 0.0
            && v >= 0.0
            && u < f64::from(self.width)
            && v < f64::from(self.height);
        PixelProjection {
            u,
            v,
            depth,
            in_frustum,
        }
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<WorldPoint> {
        if !(depth > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "back-projection depth must be positive, got {depth}"
            )));
        }
        let cam = self.intrinsic_inv * Vector3::new(u, v, 1.0) * depth;
        Ok(Point3::from(self.rotation.transpose() * (cam - self.translation)))
    }

    /// World-space ray through continuous pixel `(u, v)`: camera center and
    /// unit direction.
    pub fn ray_through_pixel(&self, u: f64, v: f64) -> (WorldPoint, Vector3<f64>) {
        let dir_cam = self.intrinsic_inv * Vector3::new(u, v, 1.0);
        let dir = (self.rotation.transpose() * dir_cam).normalize();
        (self.center(), dir)
    }
}

fn check_intrinsic(k: &Matrix3<f64>) -> Result<()> {
    if !k.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidCamera("non-finite intrinsic".into()));
    }
    if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
        return Err(Error::InvalidCamera("intrinsic matrix must be upper-triangular".into()));
    }
    if k[(2, 2)] != 1.0 {
        return Err(Error::InvalidCamera("intrinsic K[2][2] must be 1".into()));
    }
    if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
        return Err(Error::InvalidCamera("focal lengths must be positive".into()));
    }
    Ok(())
}

/// `max |R R^T - I|` entrywise.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r * r.transpose() - Matrix3::identity()).amax()
}

/// Nearest rotation in the Frobenius sense (polar factor with det +1).
pub fn nearest_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    u * fix * v_t
}
