//! Poses, trajectories, rotations and the pinhole camera shared by every
//! other module.
//!
//! A pose flattens to 11 values `[x(3), r(6), s, t]`: hand position in the
//! camera frame (meters), the first two columns of its rotation matrix,
//! gripper openness (1 open, 0 closed) and the normalized timestamp.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::{cast, Scalar};

/// Values per flattened pose.
pub const POSE_DIM: usize = 11;
/// Learnable channels per pose (everything except the timestamp).
pub const ACTION_DIM: usize = 10;

/// Row-major 3x3 matrix, `m[row][col]`.
pub type Mat3<T> = [[T; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T = f32> {
    pub x: [T; 3],
    pub r: [T; 6],
    pub s: T,
    pub t: T,
}

impl<T: Scalar> Pose<T> {
    pub fn flatten(&self) -> [T; POSE_DIM] {
        let mut out = [T::zero(); POSE_DIM];
        out[..3].copy_from_slice(&self.x);
        out[3..9].copy_from_slice(&self.r);
        out[9] = self.s;
        out[10] = self.t;
        out
    }

    pub fn unflatten(v: &[T]) -> Self {
        assert_eq!(v.len(), POSE_DIM, "pose needs {POSE_DIM} values");
        let mut x = [T::zero(); 3];
        let mut r = [T::zero(); 6];
        x.copy_from_slice(&v[..3]);
        r.copy_from_slice(&v[3..9]);
        Self { x, r, s: v[9], t: v[10] }
    }

    /// Rotation matrix of the (possibly non-canonical) 6D part.
    pub fn rotation(&self) -> Result<Mat3<T>> {
        sixd_to_matrix(&self.r)
    }

    pub fn cast<U: Scalar>(&self) -> Pose<U> {
        let c = |v: T| cast::<U>(v.to_f64().unwrap_or(f64::NAN));
        Pose {
            x: self.x.map(c),
            r: self.r.map(c),
            s: c(self.s),
            t: c(self.t),
        }
    }
}

/// Fixed-length sequence of `T + 1` poses with increasing timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T = f32> {
    poses: Vec<Pose<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(poses: Vec<Pose<T>>) -> Self {
        Self { poses }
    }

    pub fn poses(&self) -> &[Pose<T>] {
        &self.poses
    }

    pub fn poses_mut(&mut self) -> &mut [Pose<T>] {
        &mut self.poses
    }

    /// Number of poses (`T + 1`).
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Number of steps `T`.
    pub fn horizon(&self) -> usize {
        self.poses.len().saturating_sub(1)
    }

    pub fn flatten(&self) -> Vec<T> {
        self.poses.iter().flat_map(|p| p.flatten()).collect()
    }

    pub fn from_flat(v: &[T]) -> Self {
        assert_eq!(v.len() % POSE_DIM, 0, "flat trajectory length must be a multiple of {POSE_DIM}");
        Self {
            poses: v.chunks(POSE_DIM).map(Pose::unflatten).collect(),
        }
    }

    pub fn positions(&self) -> impl Iterator<Item = [T; 3]> + '_ {
        self.poses.iter().map(|p| p.x)
    }

    pub fn is_finite(&self) -> bool {
        self.poses.iter().all(|p| p.flatten().iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> Trajectory<U> {
        Trajectory {
            poses: self.poses.iter().map(Pose::cast).collect(),
        }
    }

    /// Total polyline length of the positions.
    pub fn path_length(&self) -> T {
        self.poses.windows(2).map(|w| norm3(sub3(w[1].x, w[0].x))).sum()
    }

    /// Clamps every `s` into `[0, 1]`.
    pub fn clamp_gripper(&mut self) {
        for p in &mut self.poses {
            p.s = p.s.max(T::zero()).min(T::one());
        }
    }

    /// Rewrites timestamps to `k / T`.
    pub fn normalize_timestamps(&mut self) {
        let n = self.horizon().max(1);
        for (k, p) in self.poses.iter_mut().enumerate() {
            p.t = cast::<T>(k as f64 / n as f64);
        }
    }

    /// Whether length, gripper range and timestamps satisfy the invariants
    /// for a trajectory of `expected_len` poses.
    pub fn is_valid(&self, expected_len: usize) -> bool {
        self.poses.len() == expected_len
            && self.poses.iter().all(|p| p.s >= T::zero() && p.s <= T::one() && p.t >= T::zero() && p.t <= T::one())
            && self.poses.windows(2).all(|w| w[1].t > w[0].t)
    }
}

impl Serialize for Trajectory<f32> {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<[f32; POSE_DIM]> = self.poses.iter().map(Pose::flatten).collect();
        rows.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Trajectory<f32> {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<f32>> = Vec::deserialize(de)?;
        let mut poses = Vec::with_capacity(rows.len());
        for row in rows {
            if row.len() != POSE_DIM {
                return Err(D::Error::custom(format!("pose row has {} values, expected {POSE_DIM}", row.len())));
            }
            poses.push(Pose::unflatten(&row));
        }
        Ok(Trajectory { poses })
    }
}

pub(crate) fn sub3<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3<T: Scalar>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3<T: Scalar>(a: [T; 3]) -> T {
    dot3(a, a).sqrt()
}

fn cross3<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Gram-Schmidt on the two 3-vectors of `r`; the third column is their cross
/// product.
pub fn sixd_to_matrix<T: Scalar>(r: &[T; 6]) -> Result<Mat3<T>> {
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    let eps = cast::<T>(1e-8);
    let n1 = norm3(a1);
    if n1 < eps {
        return Err(Error::DegenerateRotation("first vector has zero norm"));
    }
    let b1 = a1.map(|v| v / n1);
    let proj = dot3(b1, a2);
    let u2 = [a2[0] - proj * b1[0], a2[1] - proj * b1[1], a2[2] - proj * b1[2]];
    let n2 = norm3(u2);
    // Relative test; below 1e-8 the f32 rounding of `b1` dominates.
    let rel = eps.max(T::epsilon() * cast(8.0));
    if n2 < rel * norm3(a2).max(T::one()) {
        return Err(Error::DegenerateRotation("vectors are parallel"));
    }
    let b2 = u2.map(|v| v / n2);
    let b3 = cross3(b1, b2);
    Ok([[b1[0], b2[0], b3[0]], [b1[1], b2[1], b3[1]], [b1[2], b2[2], b3[2]]])
}

/// Largest absolute entry of `M^T M - I`.
pub fn orthonormality_error<T: Scalar>(m: &Mat3<T>) -> T {
    let mut worst = T::zero();
    for i in 0..3 {
        for j in 0..3 {
            let dot: T = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

pub fn determinant<T: Scalar>(m: &Mat3<T>) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// First two columns of a rotation matrix.
pub fn matrix_to_sixd<T: Scalar>(m: &Mat3<T>) -> Result<[T; 6]> {
    let tol = cast::<T>(1e-5);
    let err = orthonormality_error(m).max((determinant(m) - T::one()).abs());
    if !(err <= tol) {
        return Err(Error::NotARotation(err.to_f64().unwrap_or(f64::NAN)));
    }
    Ok([m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]])
}

/// Re-orthonormalized copy of a 6D rotation.
pub fn canonicalize_sixd<T: Scalar>(r: &[T; 6]) -> Result<[T; 6]> {
    let m = sixd_to_matrix(r)?;
    Ok([m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]])
}

/// Rotation by `yaw` radians about the camera `z` axis, as a 6D vector.
pub fn yaw_sixd<T: Scalar>(yaw: f64) -> [T; 6] {
    let (s, c) = yaw.sin_cos();
    [c, s, 0.0, -s, c, 0.0].map(cast)
}

/// Pinhole intrinsics with identity extrinsics: the camera frame is the
/// world frame, `z` pointing into the scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f32, fy: f32, cx: f32, cy: f32, width: usize, height: usize) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f32
            && self.cy >= 0.0
            && self.cy < self.height as f32;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid camera intrinsics {self:?}")))
        }
    }

    pub fn pinhole<T: Scalar>(&self) -> ebmdmo_autograd::Pinhole<T> {
        ebmdmo_autograd::Pinhole {
            fx: cast(self.fx as f64),
            fy: cast(self.fy as f64),
            cx: cast(self.cx as f64),
            cy: cast(self.cy as f64),
        }
    }
}

/// Pixel coordinates `(u, v)` of a camera-frame point; may fall outside the
/// image.
pub fn project<T: Scalar>(x: [T; 3], cam: &Camera) -> Result<[T; 2]> {
    let z = x[2];
    if !(z > cast::<T>(1e-6)) {
        return Err(Error::BehindCamera(z.to_f64().unwrap_or(f64::NAN)));
    }
    Ok([
        cast::<T>(cam.fx as f64) * x[0] / z + cast(cam.cx as f64),
        cast::<T>(cam.fy as f64) * x[1] / z + cast(cam.cy as f64),
    ])
}

/// Resamples to `t_out + 1` poses at uniform times over the input's time
/// span. Position and gripper are interpolated linearly, rotation linearly
/// in 6D and then re-orthonormalized.
pub fn resample<T: Scalar>(traj: &Trajectory<T>, t_out: usize) -> Result<Trajectory<T>> {
    let poses = traj.poses();
    if poses.len() < 2 {
        return Err(Error::TooShort(poses.len()));
    }
    if t_out == 0 {
        return Err(Error::InvalidConfig("resample needs at least one output step".into()));
    }
    let t0 = poses[0].t;
    let t1 = poses[poses.len() - 1].t;
    let mut out = Vec::with_capacity(t_out + 1);
    let mut seg = 0;
    for j in 0..=t_out {
        let frac = cast::<T>(j as f64 / t_out as f64);
        let tau = t0 + (t1 - t0) * frac;
        while seg + 2 < poses.len() && poses[seg + 1].t <= tau {
            seg += 1;
        }
        let (a, b) = (&poses[seg], &poses[seg + 1]);
        let span = b.t - a.t;
        let w = if span > T::zero() {
            ((tau - a.t) / span).max(T::zero()).min(T::one())
        } else {
            T::zero()
        };
        let lerp = |p: T, q: T| p + (q - p) * w;
        let x = [lerp(a.x[0], b.x[0]), lerp(a.x[1], b.x[1]), lerp(a.x[2], b.x[2])];
        let mut r = [T::zero(); 6];
        for c in 0..6 {
            r[c] = lerp(a.r[c], b.r[c]);
        }
        let r = canonicalize_sixd(&r).unwrap_or(if w < cast(0.5) { a.r } else { b.r });
        out.push(Pose {
            x,
            r,
            s: lerp(a.s, b.s).max(T::zero()).min(T::one()),
            t: frac,
        });
    }
    Ok(Trajectory::new(out))
}

/// Mean over timesteps of the Euclidean distance between positions.
pub fn distance<T: Scalar>(p: &Trajectory<T>, q: &Trajectory<T>) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    if p.is_empty() {
        return Ok(T::zero());
    }
    let total: T = p.positions().zip(q.positions()).map(|(a, b)| norm3(sub3(a, b))).sum();
    Ok(total / cast(p.len() as f64))
}
