//! Rigid-body math, ray generation, pixel/world transforms, and pose
//! synthesis (spin grids, helix interpolation).
//!
//! Conventions, fixed globally: the camera looks down +z with x right and
//! y down; poses are camera-to-world; pixel (u, v) has u along x. All values
//! are immutable after construction and every operation is a pure function.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("backproject requires positive depth, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid camera intrinsics: {0}")]
    BadIntrinsics(String),
    #[error("invalid ray bounds: near {near}, far {far}")]
    BadRayBounds { near: f64, far: f64 },
}

pub fn vadd(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vsub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vscale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn vdot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn vcross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn vnorm(a: Vec3) -> f64 {
    vdot(a, a).sqrt()
}

pub fn vnormalize(a: Vec3) -> Vec3 {
    let n = vnorm(a);
    debug_assert!(n > 0.0, "normalizing zero vector");
    vscale(a, 1.0 / n)
}

pub fn vlerp(a: Vec3, b: Vec3, u: f64) -> Vec3 {
    vadd(vscale(a, 1.0 - u), vscale(b, u))
}

/// Unit quaternion (w, x, y, z). Constructors normalize, keeping the unit
/// invariant within 1e-9.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub fn identity() -> Self {
        Self {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }.normalized()
    }

    pub fn from_axis_angle(axis: Vec3, angle_rad: f64) -> Self {
        let axis = vnormalize(axis);
        let half = 0.5 * angle_rad;
        let s = half.sin();
        Self {
            w: half.cos(),
            x: axis[0] * s,
            y: axis[1] * s,
            z: axis[2] * s,
        }
        .normalized()
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        debug_assert!(n > 0.0, "normalizing zero quaternion");
        self.w /= n;
        self.x /= n;
        self.y /= n;
        self.z /= n;
        self
    }

    pub fn conjugate(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Hamilton product; `self` applied after `other`.
    pub fn mul(&self, other: &Self) -> Self {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (other.w, other.x, other.y, other.z);
        Self {
            w: aw * bw - ax * bx - ay * by - az * bz,
            x: aw * bx + ax * bw + ay * bz - az * by,
            y: aw * by - ax * bz + ay * bw + az * bx,
            z: aw * bz + ax * by - ay * bx + az * bw,
        }
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        // q v q* with t = 2 (q_vec x v).
        let qv = [self.x, self.y, self.z];
        let t = vscale(vcross(qv, v), 2.0);
        vadd(vadd(v, vscale(t, self.w)), vcross(qv, t))
    }

    /// Rotation angle in radians, in [0, pi]. atan2 keeps full precision for
    /// angles near zero, where acos(w) loses ~8 digits.
    pub fn angle(&self) -> f64 {
        let vec_norm = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * vec_norm.atan2(self.w.abs())
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }
}

/// Spherical linear interpolation along the shortest great-circle arc.
///
/// The sign of `q1` is flipped when dot(q0, q1) < 0 so the short path is
/// taken; near-parallel inputs fall back to normalized linear interpolation.
pub fn slerp(q0: &Quaternion, q1: &Quaternion, u: f64) -> Quaternion {
    let mut q1 = *q1;
    let mut d = q0.dot(&q1);
    if d < 0.0 {
        q1 = Quaternion {
            w: -q1.w,
            x: -q1.x,
            y: -q1.y,
            z: -q1.z,
        };
        d = -d;
    }
    if d > 1.0 - 1e-8 {
        return Quaternion::new(
            q0.w + u * (q1.w - q0.w),
            q0.x + u * (q1.x - q0.x),
            q0.y + u * (q1.y - q0.y),
            q0.z + u * (q1.z - q0.z),
        );
    }
    let theta = d.min(1.0).acos();
    let s = theta.sin();
    let a = ((1.0 - u) * theta).sin() / s;
    let b = (u * theta).sin() / s;
    Quaternion::new(
        a * q0.w + b * q1.w,
        a * q0.x + b * q1.x,
        a * q0.y + b * q1.y,
        a * q0.z + b * q1.z,
    )
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Quaternion::identity(),
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: Quaternion, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// a then b as matrices: (a ∘ b)(p) = a(b(p)).
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.mul(&other.rotation),
            translation: vadd(self.rotation.rotate(other.translation), self.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.conjugate();
        Pose {
            rotation: inv_rot,
            translation: vscale(inv_rot.rotate(self.translation), -1.0),
        }
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        vadd(self.rotation.rotate(p), self.translation)
    }

    /// Camera forward axis (+z) in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.rotate([0.0, 0.0, 1.0])
    }

    /// Row-major 4x4 homogeneous matrix.
    pub fn to_matrix4(&self) -> [f64; 16] {
        let r = self.rotation.to_matrix();
        let t = self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], //
            r[1][0], r[1][1], r[1][2], t[1], //
            r[2][0], r[2][1], r[2][2], t[2], //
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// Build from a row-major 4x4 with an orthonormal upper-left block.
    pub fn from_matrix4(m: &[f64; 16]) -> Self {
        // Shepperd's method, branch on the largest diagonal term.
        let (m00, m01, m02) = (m[0], m[1], m[2]);
        let (m10, m11, m12) = (m[4], m[5], m[6]);
        let (m20, m21, m22) = (m[8], m[9], m[10]);
        let trace = m00 + m11 + m22;
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion {
                w: 0.25 * s,
                x: (m21 - m12) / s,
                y: (m02 - m20) / s,
                z: (m10 - m01) / s,
            }
        } else if m00 > m11 && m00 > m22 {
            let s = (1.0 + m00 - m11 - m22).sqrt() * 2.0;
            Quaternion {
                w: (m21 - m12) / s,
                x: 0.25 * s,
                y: (m01 + m10) / s,
                z: (m02 + m20) / s,
            }
        } else if m11 > m22 {
            let s = (1.0 + m11 - m00 - m22).sqrt() * 2.0;
            Quaternion {
                w: (m02 - m20) / s,
                x: (m01 + m10) / s,
                y: 0.25 * s,
                z: (m12 + m21) / s,
            }
        } else {
            let s = (1.0 + m22 - m00 - m11).sqrt() * 2.0;
            Quaternion {
                w: (m10 - m01) / s,
                x: (m02 + m20) / s,
                y: (m12 + m21) / s,
                z: 0.25 * s,
            }
        };
        Pose {
            rotation: q.normalized(),
            translation: [m[3], m[7], m[11]],
        }
    }
}

/// Pinhole camera intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::BadIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(GeometryError::BadIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Centered intrinsics with a given horizontal field of view.
    pub fn with_fov(width: usize, height: usize, fov_x_rad: f64) -> Self {
        let fx = width as f64 * 0.5 / (fov_x_rad * 0.5).tan();
        Self {
            fx,
            fy: fx,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            width,
            height,
        }
    }
}

/// Half-line with sampling bounds in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Result<Self, GeometryError> {
        if !(0.0 < near && near < far) {
            return Err(GeometryError::BadRayBounds { near, far });
        }
        Ok(Self {
            origin,
            direction: vnormalize(direction),
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        vadd(self.origin, vscale(self.direction, t))
    }
}

/// Pixel plus depth to a camera-frame point. Depth is the z coordinate.
pub fn backproject(
    pixel: (f64, f64),
    depth: f64,
    k: &CameraIntrinsics,
) -> Result<Vec3, GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok([
        (pixel.0 - k.cx) * depth / k.fx,
        (pixel.1 - k.cy) * depth / k.fy,
        depth,
    ])
}

/// Pinhole projection of a camera-frame point; the flag is false when the
/// point is behind the camera or lands outside the image bounds.
pub fn project(point: Vec3, k: &CameraIntrinsics) -> ((f64, f64), bool) {
    if point[2] <= 1e-6 {
        return ((0.0, 0.0), false);
    }
    let u = k.fx * point[0] / point[2] + k.cx;
    let v = k.fy * point[1] / point[2] + k.cy;
    let inside = u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64;
    ((u, v), inside)
}

/// World-space camera bearing for one pixel.
pub fn pixel_direction(pose: &Pose, k: &CameraIntrinsics, u: f64, v: f64) -> Vec3 {
    let dir_cam = vnormalize([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]);
    pose.rotation.rotate(dir_cam)
}

/// Rays through the given pixels; origins all equal the camera center.
pub fn generate_rays(
    pose: &Pose,
    k: &CameraIntrinsics,
    pixels: &[(f64, f64)],
    near: f64,
    far: f64,
) -> Result<Vec<Ray>, GeometryError> {
    pixels
        .iter()
        .map(|&(u, v)| Ray::new(pose.translation, pixel_direction(pose, k, u, v), near, far))
        .collect()
}

/// The signed-angle cross product grid around a pose: for the signed set
/// A = {+a, -a : a in angles}, all |A|^3 poses from per-axis rotations
/// composed in x, y, z order about the camera center. Translation is
/// unchanged. Angles of 5, 2.5, 1.25 degrees give the 216-pose grid.
pub fn spin_pose_grid(pose: &Pose, angles_deg: &[f64]) -> Vec<Pose> {
    let mut signed: Vec<f64> = Vec::with_capacity(angles_deg.len() * 2);
    for &a in angles_deg {
        for cand in [a, -a] {
            if !signed.iter().any(|&s| s == cand) {
                signed.push(cand);
            }
        }
    }
    let mut out = Vec::with_capacity(signed.len().pow(3));
    for &ax in &signed {
        for &ay in &signed {
            for &az in &signed {
                let qx = Quaternion::from_axis_angle([1.0, 0.0, 0.0], ax.to_radians());
                let qy = Quaternion::from_axis_angle([0.0, 1.0, 0.0], ay.to_radians());
                let qz = Quaternion::from_axis_angle([0.0, 0.0, 1.0], az.to_radians());
                // x applied first, then y, then z, in the camera frame.
                let offset = qz.mul(&qy).mul(&qx);
                out.push(Pose {
                    rotation: pose.rotation.mul(&offset).normalized(),
                    translation: pose.translation,
                });
            }
        }
    }
    out
}

/// `n` poses strictly between `a` and `b`: slerp rotations and linear
/// translations at u = k/(n+1), endpoints excluded.
pub fn helix_poses(a: &Pose, b: &Pose, n: usize) -> Vec<Pose> {
    (1..=n)
        .map(|k| {
            let u = k as f64 / (n as f64 + 1.0);
            Pose {
                rotation: slerp(&a.rotation, &b.rotation, u),
                translation: vlerp(a.translation, b.translation, u),
            }
        })
        .collect()
}
