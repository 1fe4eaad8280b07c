//! Rigid poses, pinhole intrinsics and bounding-box corners.

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3};

use crate::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

/// Tolerance on `‖RᵀR − I‖_F` and `|det R − 1|`.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Depths at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-12;

/// Object-to-camera rigid motion `x_cam = R·x_obj + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    /// Validates that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        let det = rotation.determinant();
        if !(ortho < ROTATION_TOLERANCE) || !((det - 1.0).abs() < ROTATION_TOLERANCE) {
            return Err(Error::InvalidPose(format!(
                "rotation not in SO(3): orthogonality error {ortho:e}, det {det}"
            )));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Pose {
            rotation: *rot.matrix(),
            translation,
        }
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `[R | t]` as a 3×4 matrix.
    pub fn matrix3x4(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.set_column(3, &self.translation);
        m
    }

    /// `[R | t]` row-major, 12 values.
    pub fn to_row_major(&self) -> [f64; 12] {
        let m = self.matrix3x4();
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Pose> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Pose::new(rotation, Vec3::new(v[3], v[7], v[11]))
    }

    /// Geodesic angle between the two rotations, radians.
    pub fn rotation_error(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        // acos loses precision near zero; use the skew part there.
        let s = 0.5
            * Vec3::new(
                rel[(2, 1)] - rel[(1, 2)],
                rel[(0, 2)] - rel[(2, 0)],
                rel[(1, 0)] - rel[(0, 1)],
            )
            .norm();
        s.atan2(c)
    }

    pub fn translation_error(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// Pinhole intrinsics without skew or distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidIntrinsics(format!(
                "fx={fx}, fy={fy}, cx={cx}, cy={cy}"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Pixel to normalized image-plane coordinates.
    pub fn normalize(&self, p: &Vec2) -> Vec2 {
        Vec2::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy)
    }
}

/// The eight vertices of an axis-aligned object box.
///
/// Corner `i` uses bit pattern `b2 b1 b0` of `i`: bit 0 picks the sign of x,
/// bit 1 of y, bit 2 of z (0 = negative half-extent, 1 = positive). Heatmap
/// channel `i` always refers to corner `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSet {
    corners: [Vec3; 8],
    extent: [f64; 3],
}

impl CornerSet {
    pub fn corners(&self) -> &[Vec3; 8] {
        &self.corners
    }

    pub fn corner(&self, i: usize) -> Vec3 {
        self.corners[i]
    }

    pub fn extent(&self) -> [f64; 3] {
        self.extent
    }

    /// Box diagonal, the object diameter used by the ADD|I threshold.
    pub fn diameter(&self) -> f64 {
        let [dx, dy, dz] = self.extent;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Sign of axis `axis` for corner `index` (`-1` or `+1`).
pub fn corner_sign(index: usize, axis: usize) -> f64 {
    if (index >> axis) & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

pub fn corners_from_extent(dx: f64, dy: f64, dz: f64) -> Result<CornerSet> {
    if !(dx > 0.0 && dy > 0.0 && dz > 0.0) || !(dx.is_finite() && dy.is_finite() && dz.is_finite())
    {
        return Err(Error::InvalidExtent([dx, dy, dz]));
    }
    let half = [dx * 0.5, dy * 0.5, dz * 0.5];
    let corners = std::array::from_fn(|i| {
        Vec3::new(
            corner_sign(i, 0) * half[0],
            corner_sign(i, 1) * half[1],
            corner_sign(i, 2) * half[2],
        )
    });
    Ok(CornerSet {
        corners,
        extent: [dx, dy, dz],
    })
}

/// A pixel `image` paired with an object-frame point `object`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence2D3D {
    pub image: Vec2,
    pub object: Vec3,
}

impl Correspondence2D3D {
    pub fn new(image: Vec2, object: Vec3) -> Self {
        Correspondence2D3D { image, object }
    }

    pub fn is_finite(&self) -> bool {
        self.image.iter().chain(self.object.iter()).all(|x| x.is_finite())
    }
}

/// Pinhole projection of an object point under `pose`.
pub fn project(k: &CameraIntrinsics, pose: &Pose, p: &Vec3) -> Result<Vec2> {
    let c = pose.transform(p);
    if !(c.z > MIN_DEPTH) {
        return Err(Error::DegeneratePoint(c.z));
    }
    Ok(Vec2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
}

pub fn transform_points(pose: &Pose, points: &[Vec3]) -> Vec<Vec3> {
    points.iter().map(|p| pose.transform(p)).collect()
}
