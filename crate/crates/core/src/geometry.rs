//! Rigid-body poses, the pinhole camera and the edge warp.
//!
//! Tangent vectors are ordered `(translation, rotation)` and pose updates are
//! applied on the left: `T <- exp(delta) * T`.

use nalgebra::{Matrix2x6, Matrix3, Matrix3x6, Vector2, Vector3, Vector6, SVD};

use crate::error::{Error, Result};

/// Number of compositions after which a pose rotation is re-orthonormalized.
pub const RENORMALIZE_EVERY: u32 = 100;

/// Element of the SE(3) tangent space, `(v, omega)`.
pub type Twist = Vector6<f64>;

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    compositions: u32,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            compositions: 0,
        }
    }

    /// Builds a pose from a rotation matrix, projecting it onto SO(3) first.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: nearest_rotation(&rotation),
            translation,
            compositions: 0,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            translation,
            ..Self::identity()
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self * other`, i.e. apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let compositions = self.compositions.max(other.compositions) + 1;
        let rotation = self.rotation * other.rotation;
        let translation = self.rotation * other.translation + self.translation;
        if compositions >= RENORMALIZE_EVERY {
            Pose {
                rotation: nearest_rotation(&rotation),
                translation,
                compositions: 0,
            }
        } else {
            Pose {
                rotation,
                translation,
                compositions,
            }
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
            compositions: self.compositions,
        }
    }

    /// Exponential map of a `(v, omega)` twist.
    pub fn exp(xi: &Twist) -> Pose {
        let v = Vector3::new(xi[0], xi[1], xi[2]);
        let w = Vector3::new(xi[3], xi[4], xi[5]);
        let theta_sq = w.norm_squared();
        let theta = theta_sq.sqrt();
        let wx = skew(&w);
        let wx2 = wx * wx;
        let (a, b, c) = if theta < 1e-5 {
            // Taylor expansions of sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3.
            (
                1.0 - theta_sq / 6.0,
                0.5 - theta_sq / 24.0,
                1.0 / 6.0 - theta_sq / 120.0,
            )
        } else {
            (
                theta.sin() / theta,
                (1.0 - theta.cos()) / theta_sq,
                (theta - theta.sin()) / (theta_sq * theta),
            )
        };
        let rotation = Matrix3::identity() + wx * a + wx2 * b;
        let jac_left = Matrix3::identity() + wx * b + wx2 * c;
        Pose {
            rotation,
            translation: jac_left * v,
            compositions: 0,
        }
    }

    /// Logarithm map; exact inverse of [`Pose::exp`] for rotation angles below pi.
    pub fn log(&self) -> Twist {
        let w = rotation_log(&self.rotation);
        let theta_sq = w.norm_squared();
        let theta = theta_sq.sqrt();
        let wx = skew(&w);
        let wx2 = wx * wx;
        let d = if theta < 1e-5 {
            1.0 / 12.0 + theta_sq / 720.0
        } else {
            let half = 0.5 * theta;
            (1.0 - half * half.cos() / half.sin()) / theta_sq
        };
        let jac_left_inv = Matrix3::identity() - wx * 0.5 + wx2 * d;
        let v = jac_left_inv * self.translation;
        Vector6::new(v[0], v[1], v[2], w[0], w[1], w[2])
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        rotation_log(&self.rotation).norm()
    }

    /// Pose with the rotation part dropped.
    pub fn translation_only(&self) -> Pose {
        Pose::from_translation(self.translation)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        (rtr - Matrix3::identity()).abs().max() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|x| x.is_finite())
    }
}

fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-5 {
        // sin(t)/t ~ 1 - t^2/6
        vee * (0.5 * (1.0 + theta * theta / 6.0))
    } else if std::f64::consts::PI - theta < 1e-6 {
        // Near pi the antisymmetric part vanishes; recover the axis from R + I.
        let b = (r + Matrix3::identity()) * 0.5;
        let col = (0..3)
            .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
            .unwrap_or(0);
        let axis = b.column(col) / b[(col, col)].max(1e-300).sqrt();
        axis.normalize() * theta
    } else {
        vee * (theta / (2.0 * theta.sin()))
    }
}

/// Nearest orthonormal matrix with determinant +1.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Matrix3::identity();
    };
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Default TUM-style Kinect intrinsics at 640x480.
    pub fn tum_default() -> Self {
        Self {
            fx: 525.0,
            fy: 525.0,
            cx: 319.5,
            cy: 239.5,
            width: 640,
            height: 480,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// Intrinsics of pyramid level `level` where each level halves the
    /// resolution and pixel centers stay aligned.
    pub fn at_level(&self, level: usize) -> Self {
        let s = 0.5f64.powi(level as i32);
        let div = 1u32 << level;
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: (self.cx + 0.5) * s - 0.5,
            cy: (self.cy + 0.5) * s - 0.5,
            width: self.width.div_ceil(div),
            height: self.height.div_ceil(div),
        }
    }

    /// True when `p` lies strictly inside the image rectangle.
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x > 0.0
            && p.y > 0.0
            && p.x < (self.width - 1) as f64
            && p.y < (self.height - 1) as f64
    }
}

/// Maps a level-0 pixel coordinate to pyramid level `level`.
pub fn pixel_to_level(p: &Vector2<f64>, level: usize) -> Vector2<f64> {
    let s = 0.5f64.powi(level as i32);
    p.map(|x| (x + 0.5) * s - 0.5)
}

/// Perspective projection; `None` for points with non-positive depth.
pub fn project(point: &Vector3<f64>, intr: &CameraIntrinsics) -> Option<Vector2<f64>> {
    if !(point.z > 0.0) {
        return None;
    }
    Some(Vector2::new(
        intr.fx * point.x / point.z + intr.cx,
        intr.fy * point.y / point.z + intr.cy,
    ))
}

/// Derivative of [`project`] with respect to the camera-frame point.
pub fn project_jacobian(point: &Vector3<f64>, intr: &CameraIntrinsics) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / point.z;
    let iz2 = iz * iz;
    nalgebra::Matrix2x3::new(
        intr.fx * iz,
        0.0,
        -intr.fx * point.x * iz2,
        0.0,
        intr.fy * iz,
        -intr.fy * point.y * iz2,
    )
}

/// Lifts a pixel with inverse depth `inv_depth` to a camera-frame point.
pub fn backproject(pixel: &Vector2<f64>, inv_depth: f64, intr: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(inv_depth > 0.0) || !inv_depth.is_finite() {
        return Err(Error::InvalidDepth(inv_depth));
    }
    let z = 1.0 / inv_depth;
    Ok(Vector3::new(
        (pixel.x - intr.cx) / intr.fx * z,
        (pixel.y - intr.cy) / intr.fy * z,
        z,
    ))
}

/// Reprojects a pixel with known inverse depth through `pose` into the
/// target view. Returns [`Error::OutOfView`] when the point lands behind the
/// camera or outside the image.
pub fn warp(pixel: &Vector2<f64>, inv_depth: f64, pose: &Pose, intr: &CameraIntrinsics) -> Result<Vector2<f64>> {
    let (uv, _) = warp_point(pixel, inv_depth, pose, intr)?;
    Ok(uv)
}

/// Like [`warp`] but also returns the transformed 3D point.
pub fn warp_point(
    pixel: &Vector2<f64>,
    inv_depth: f64,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Result<(Vector2<f64>, Vector3<f64>)> {
    let x = pose.transform_point(&backproject(pixel, inv_depth, intr)?);
    match project(&x, intr) {
        Some(uv) if intr.contains(&uv) => Ok((uv, x)),
        _ => Err(Error::OutOfView),
    }
}

/// Derivative of a transformed point `x = T p` under a left perturbation
/// `exp(delta) * T`.
pub fn point_twist_jacobian(x: &Vector3<f64>) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(x)));
    j
}

/// 2x6 derivative of [`warp`] with respect to a left twist perturbation of `pose`.
pub fn warp_jacobian(
    pixel: &Vector2<f64>,
    inv_depth: f64,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Result<Matrix2x6<f64>> {
    let (_, x) = warp_point(pixel, inv_depth, pose, intr)?;
    Ok(project_jacobian(&x, intr) * point_twist_jacobian(&x))
}
