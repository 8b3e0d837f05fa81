//! Pinhole camera model and rigid-body transforms.
//!
//! Poses are world-from-camera (`T_WC`): [`Pose::transform_point`] maps
//! camera-frame points into the world. Pixels are `(u, v) = (column, row)`
//! with integer coordinates at pixel centers.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const MIN_DEPTH: f64 = 1e-6;
const LOG_PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(p.z > MIN_DEPTH) {
            return Err(Error::NonPositiveDepth(p.z));
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    pub fn backproject(&self, px: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(Error::InvalidDepth(depth));
        }
        Ok(self.backproject_unchecked(px.x, px.y, depth))
    }

    #[inline]
    pub(crate) fn backproject_unchecked(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// True when `(u, v)` lies within the pixel-center extent of the image.
    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Tangent vector of SE(3): rotation part (radians) first, then translation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist(pub [f64; 6]);

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Twist([
            rotation.x,
            rotation.y,
            rotation.z,
            translation.x,
            translation.y,
            translation.z,
        ])
    }

    pub fn rotation(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }

    pub fn scaled(&self, s: f64) -> Self {
        Twist(self.0.map(|x| x * s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

/// On-disk pose layout: quaternion `(x, y, z, w)` and translation.
#[derive(Serialize, Deserialize)]
struct PoseRepr {
    q: [f64; 4],
    t: [f64; 3],
}

impl From<PoseRepr> for Pose {
    fn from(r: PoseRepr) -> Self {
        Pose::from_parts(r.q, r.t)
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let q = p.rotation.quaternion();
        PoseRepr {
            q: [q.i, q.j, q.k, q.w],
            t: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Quaternion given as `[x, y, z, w]`; it is normalized here.
    pub fn from_parts(q: [f64; 4], t: [f64; 3]) -> Self {
        Pose {
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(q[3], q[0], q[1], q[2])),
            translation: Vector3::new(t[0], t[1], t[2]),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose::new(UnitQuaternion::identity(), t)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose::new(r, -(r * self.translation))
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut q = self.rotation * other.rotation;
        q.renormalize();
        Pose::new(q, self.rotation * other.translation + self.translation)
    }

    pub fn exp(xi: &Twist) -> Pose {
        let w = xi.rotation();
        let v = xi.translation();
        let theta = w.norm();
        let rotation = UnitQuaternion::from_scaled_axis(w);
        let wx = skew(&w);
        let (b, c) = if theta < 1e-5 {
            let t2 = theta * theta;
            (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
        } else {
            let t2 = theta * theta;
            (
                (1.0 - theta.cos()) / t2,
                (theta - theta.sin()) / (t2 * theta),
            )
        };
        let vmat = Matrix3::identity() + wx * b + wx * wx * c;
        Pose::new(rotation, vmat * v)
    }

    pub fn log(&self) -> Result<Twist> {
        let q = self.rotation.quaternion();
        let (w, vec) = if q.w < 0.0 {
            (-q.w, -q.imag())
        } else {
            (q.w, q.imag())
        };
        let s = vec.norm();
        let theta = 2.0 * s.atan2(w);
        if theta >= std::f64::consts::PI - LOG_PI_MARGIN {
            return Err(Error::LogNearPi(theta));
        }
        let omega = if s < 1e-12 {
            // theta ~ 2 s / w for tiny angles
            vec * (2.0 / w)
        } else {
            vec * (theta / s)
        };
        let wx = skew(&omega);
        let e = if theta < 1e-4 {
            1.0 / 12.0 + theta * theta / 720.0
        } else {
            (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / (theta * theta)
        };
        let vinv = Matrix3::identity() - wx * 0.5 + wx * wx * e;
        Ok(Twist::new(omega, vinv * self.translation))
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        self.rotation.angle()
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Camera-to-world rotation for a camera at `eye` looking at `target` with the
/// image y axis pointing roughly along `down`.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, down: &Vector3<f64>) -> Pose {
    let z = (target - eye).normalize();
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    let m = Matrix3::from_columns(&[x, y, z]);
    let rot = nalgebra::Rotation3::from_matrix_unchecked(m);
    Pose::new(UnitQuaternion::from_rotation_matrix(&rot), *eye)
}
