//! Rigid-body geometry: SE(3) poses, twists with exp/log maps, and pinhole
//! camera projection. Poses map local/camera coordinates into the parent
//! (usually world) frame: `p_world = R * p_cam + t`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector6};

use crate::{Error, Result};

/// Minimum rotation angle (radians) below which exp/log switch to Taylor
/// expansions of the trigonometric coefficients.
const SMALL_ANGLE: f64 = 1e-4;

/// A twist in se(3), rotation part first: `[omega; v]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            omega: Vector3::zeros(),
            v: Vector3::zeros(),
        }
    }

    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Twist { omega, v }
    }

    pub fn from_vector(xi: &Vector6<f64>) -> Self {
        Twist {
            omega: Vector3::new(xi[0], xi[1], xi[2]),
            v: Vector3::new(xi[3], xi[4], xi[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Skew-symmetric cross-product matrix of `w`.
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// A rigid transform stored as unit quaternion plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
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

    /// Builds a pose from raw quaternion components in (w, x, y, z) order,
    /// normalizing so slightly denormalized inputs (e.g. parsed text) are safe.
    pub fn from_wxyz(
        qw: f64,
        qx: f64,
        qy: f64,
        qz: f64,
        translation: Vector3<f64>,
    ) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Pose::new(q, translation)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        // Renormalize so long compose chains cannot drift off the unit sphere.
        let q = UnitQuaternion::from_quaternion(
            (self.rotation.into_inner() * other.rotation.into_inner()).normalize(),
        );
        Pose {
            rotation: q,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    /// `R * p + t`.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotates a direction without translating it.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.to_rotation_matrix().into_inner());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Exponential map: twist -> pose, translation through the left Jacobian
    /// `V(omega)` so pure twists integrate screw motions exactly.
    pub fn exp(twist: &Twist) -> Pose {
        let rotation = UnitQuaternion::from_scaled_axis(twist.omega);
        let v_mat = left_jacobian(&twist.omega);
        Pose {
            rotation,
            translation: v_mat * twist.v,
        }
    }

    /// Logarithm map: pose -> twist, principal rotation angle in [0, pi].
    /// At exactly pi the axis sign is one of the two valid choices.
    pub fn log(&self) -> Twist {
        let omega = self.rotation.scaled_axis();
        let v_inv = left_jacobian_inverse(&omega);
        Twist {
            omega,
            v: v_inv * self.translation,
        }
    }

    /// Rotation angle of `self.inverse() ∘ other` in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    /// Euclidean distance between the two translations.
    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Serializes as `[tx, ty, tz, qx, qy, qz, qw]` with qw >= 0.
    pub fn to_array(&self) -> [f64; 7] {
        let q = canonical_quaternion(&self.rotation);
        [
            self.translation.x,
            self.translation.y,
            self.translation.z,
            q.i,
            q.j,
            q.k,
            q.w,
        ]
    }

    pub fn from_array(a: &[f64; 7]) -> Pose {
        Pose::from_wxyz(a[6], a[3], a[4], a[5], Vector3::new(a[0], a[1], a[2]))
    }
}

/// Flips the quaternion into the qw >= 0 hemisphere so text output is unique.
fn canonical_quaternion(q: &UnitQuaternion<f64>) -> Quaternion<f64> {
    let inner = q.into_inner();
    if inner.w < 0.0 {
        -inner
    } else {
        inner
    }
}

/// SO(3) left Jacobian `V = I + B*[w]x + C*[w]x^2` with
/// `B = (1-cos t)/t^2`, `C = (t-sin t)/t^3`.
fn left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let (b, c) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        (
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    };
    let w = skew(omega);
    Matrix3::identity() + w * b + w * w * c
}

/// Inverse left Jacobian `V^-1 = I - [w]x/2 + D*[w]x^2` with
/// `D = (1 - (t/2)*cot(t/2))/t^2`; finite for all principal angles.
fn left_jacobian_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let d = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    let w = skew(omega);
    Matrix3::identity() - w * 0.5 + w * w * d
}

/// Pinhole camera intrinsics. Pixel (u, v) has u along image columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Projects a camera-frame point; `None` when it sits on or behind the
    /// principal plane (z <= 0).
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Lifts pixel (u, v) at `depth` back into the camera frame.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }

    /// Intrinsics for an image resampled by `factor` via block averaging.
    /// The half-pixel shift keeps pixel centers aligned between levels.
    pub fn scaled(&self, factor: f64) -> Intrinsics {
        Intrinsics {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: (self.cx + 0.5) * factor - 0.5,
            cy: (self.cy + 0.5) * factor - 0.5,
            width: (self.width as f64 * factor).round() as usize,
            height: (self.height as f64 * factor).round() as usize,
        }
    }
}

/// Writes a trajectory as `timestamp tx ty tz qx qy qz qw` lines.
pub fn write_tum_trajectory(path: &Path, entries: &[(f64, Pose)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "# timestamp tx ty tz qx qy qz qw")?;
        for (ts, pose) in entries {
            let a = pose.to_array();
            writeln!(
                out,
                "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                ts, a[0], a[1], a[2], a[3], a[4], a[5], a[6]
            )?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a trajectory in the format written by [`write_tum_trajectory`].
/// Lines starting with '#' and blank lines are skipped.
pub fn read_tum_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = trimmed
            .split_whitespace()
            .map(|tok| tok.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| {
                Error::parse(
                    format!("{}:{}", path.display(), line_no + 1),
                    format!("bad number: {e}"),
                )
            })?;
        if fields.len() != 8 {
            return Err(Error::parse(
                format!("{}:{}", path.display(), line_no + 1),
                format!("expected 8 fields, got {}", fields.len()),
            ));
        }
        let pose = Pose::from_wxyz(
            fields[7],
            fields[4],
            fields[5],
            fields[6],
            Vector3::new(fields[1], fields[2], fields[3]),
        );
        entries.push((fields[0], pose));
    }
    Ok(entries)
}
