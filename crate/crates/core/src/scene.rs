//! Synthetic tabletop tasks: scene sampling, RGB-D rendering, scripted
//! expert motions and geometric success oracles.
//!
//! The camera looks straight down (+z) at a table plane `table_z` meters
//! away. Object `0` is always the task target (target disc, button, or the
//! object to pick); for PickPlace object `1` is the square drop zone. The
//! remaining objects are distractors.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{self, Camera, Pose, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    Reach,
    PickPlace,
    PushButton,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Reach, TaskId::PickPlace, TaskId::PushButton];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Reach => "reach",
            TaskId::PickPlace => "pick-place",
            TaskId::PushButton => "push-button",
        }
    }

    fn distractors(self) -> usize {
        match self {
            TaskId::Reach | TaskId::PushButton => 2,
            TaskId::PickPlace => 1,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "reach" => Ok(TaskId::Reach),
            "pick-place" | "pickplace" => Ok(TaskId::PickPlace),
            "push-button" | "pushbutton" => Ok(TaskId::PushButton),
            other => Err(Error::InvalidConfig(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    /// Axis-aligned square; `radius` is the half side length.
    Square,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// Table-plane center `(x, y)` in meters.
    pub position: [f32; 2],
    pub radius: f32,
    pub color: usize,
    pub shape: Shape,
    /// Height above the table in meters.
    pub height: f32,
}

impl ObjectSpec {
    /// Radius of the bounding circle.
    pub fn extent(&self) -> f32 {
        match self.shape {
            Shape::Disc => self.radius,
            Shape::Square => self.radius * std::f32::consts::SQRT_2,
        }
    }

    fn contains(&self, x: f32, y: f32) -> bool {
        let dx = x - self.position[0];
        let dy = y - self.position[1];
        match self.shape {
            Shape::Disc => dx * dx + dy * dy <= self.radius * self.radius,
            Shape::Square => dx.abs() <= self.radius && dy.abs() <= self.radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub task_id: TaskId,
    pub objects: Vec<ObjectSpec>,
    pub home_pose: [f32; motion::POSE_DIM],
    pub seed: u64,
}

impl SceneSpec {
    pub fn home(&self) -> Pose<f32> {
        Pose::unflatten(&self.home_pose)
    }

    pub fn target(&self) -> &ObjectSpec {
        &self.objects[0]
    }
}

/// Scene layout and oracle constants; recorded in the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Geometry {
    pub table_z: f32,
    /// Objects are sampled with centers in `[-sample_half, sample_half]^2`.
    pub sample_half: f32,
    pub bounds_half: f32,
    pub min_separation: f32,
    pub radius_min: f32,
    pub radius_max: f32,
    pub object_height: f32,
    pub button_height: f32,
    pub zone_half: f32,
    pub zone_height: f32,
    pub home: [f32; 3],
    /// Hover height above an object top.
    pub approach_height: f32,
    pub max_depth: f32,
    pub tol_radius_frac: f32,
    pub tol_abs: f32,
    pub table_color: [f32; 3],
    pub palette: Vec<[f32; 3]>,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            table_z: 1.0,
            sample_half: 0.2,
            bounds_half: 0.3,
            min_separation: 0.02,
            radius_min: 0.035,
            radius_max: 0.05,
            object_height: 0.03,
            button_height: 0.015,
            zone_half: 0.06,
            zone_height: 0.002,
            home: [0.0, 0.0, 0.55],
            approach_height: 0.12,
            max_depth: 1.2,
            tol_radius_frac: 0.1,
            tol_abs: 0.005,
            table_color: [0.45, 0.42, 0.38],
            palette: vec![
                [0.9, 0.1, 0.1],
                [0.1, 0.75, 0.2],
                [0.15, 0.3, 0.9],
                [0.95, 0.85, 0.1],
                [0.9, 0.9, 0.9],
            ],
        }
    }
}

impl Geometry {
    pub fn tolerance(&self, radius: f32) -> f32 {
        self.tol_radius_frac * radius + self.tol_abs
    }

    /// Default camera covering the sampling square from `table_z`.
    pub fn default_camera() -> Camera {
        Camera {
            fx: 120.0,
            fy: 120.0,
            cx: 31.5,
            cy: 31.5,
            width: 64,
            height: 64,
        }
    }
}

/// Row-major `H x W x 4` image: RGB in `[0, 1]` then depth in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 4;

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let o = (row * self.width + col) * Self::CHANNELS;
        &self.data[o..o + Self::CHANNELS]
    }

    pub fn depth(&self) -> Vec<f32> {
        self.data.chunks(Self::CHANNELS).map(|p| p[3]).collect()
    }

    /// Rounds RGB to the nearest 8-bit level, matching a PNG roundtrip.
    pub fn quantize_rgb(&mut self) {
        for px in self.data.chunks_mut(Self::CHANNELS) {
            for c in &mut px[..3] {
                *c = (*c * 255.0).round().clamp(0.0, 255.0) / 255.0;
            }
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 1000;

/// Samples a scene whose every random draw derives from `seed`.
pub fn sample_scene(task: TaskId, seed: u64, geom: &Geometry) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds: Vec<(Shape, f32, usize)> = Vec::new();
    let radius = |rng: &mut ChaCha8Rng| rng.random_range(geom.radius_min..=geom.radius_max);
    match task {
        TaskId::Reach => kinds.push((Shape::Disc, geom.object_height, 0)),
        TaskId::PushButton => kinds.push((Shape::Disc, geom.button_height, 1)),
        TaskId::PickPlace => {
            kinds.push((Shape::Disc, geom.object_height, 0));
            kinds.push((Shape::Square, geom.zone_height, 3));
        }
    }
    let distractor_colors: &[usize] = match task {
        TaskId::PushButton => &[2, 4],
        _ => &[1, 2, 4],
    };
    for _ in 0..task.distractors() {
        let c = distractor_colors[rng.random_range(0..distractor_colors.len())];
        kinds.push((Shape::Disc, geom.object_height, c));
    }
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(kinds.len());
    for (shape, height, color) in kinds {
        let r = match shape {
            Shape::Disc => radius(&mut rng),
            Shape::Square => geom.zone_half,
        };
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let p = [
                rng.random_range(-geom.sample_half..=geom.sample_half),
                rng.random_range(-geom.sample_half..=geom.sample_half),
            ];
            let cand = ObjectSpec { position: p, radius: r, color, shape, height };
            let ok = objects.iter().all(|o| {
                let d = ((o.position[0] - p[0]).powi(2) + (o.position[1] - p[1]).powi(2)).sqrt();
                d >= o.extent() + cand.extent() + geom.min_separation
            });
            if ok {
                objects.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::PlacementFailure(PLACEMENT_ATTEMPTS));
        }
    }
    let home = Pose {
        x: geom.home,
        r: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        s: 1.0,
        t: 0.0,
    };
    Ok(SceneSpec { task_id: task, objects, home_pose: home.flatten(), seed })
}

/// Whether the scene satisfies the bounds and separation invariants.
pub fn scene_is_valid(scene: &SceneSpec, geom: &Geometry) -> bool {
    let inside = scene
        .objects
        .iter()
        .all(|o| o.position.iter().all(|v| v.abs() <= geom.bounds_half));
    let separated = scene.objects.iter().enumerate().all(|(i, a)| {
        scene.objects[i + 1..].iter().all(|b| {
            let d = ((a.position[0] - b.position[0]).powi(2) + (a.position[1] - b.position[1]).powi(2)).sqrt();
            d >= a.radius + b.radius + geom.min_separation
        })
    });
    inside && separated
}

const SUPERSAMPLE: usize = 4;

/// Flat-shaded top view: each sub-pixel ray hits the nearest object top or
/// the table plane. Depth is the camera-frame `z` of the hit.
pub fn render(scene: &SceneSpec, cam: &Camera, geom: &Geometry) -> Image {
    let mut order: Vec<&ObjectSpec> = scene.objects.iter().collect();
    // Tallest first, so nearer tops occlude lower ones.
    order.sort_by(|a, b| b.height.total_cmp(&a.height));
    let mut data = vec![0.0f32; cam.width * cam.height * Image::CHANNELS];
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for row in 0..cam.height {
        for col in 0..cam.width {
            let mut acc = [0.0f32; 4];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    // Pixel (col, row) covers [col - 0.5, col + 0.5).
                    let u = col as f32 - 0.5 + (sx as f32 + 0.5) / SUPERSAMPLE as f32;
                    let v = row as f32 - 0.5 + (sy as f32 + 0.5) / SUPERSAMPLE as f32;
                    let rx = (u - cam.cx) / cam.fx;
                    let ry = (v - cam.cy) / cam.fy;
                    let mut color = geom.table_color;
                    let mut depth = geom.table_z;
                    for o in &order {
                        let z = geom.table_z - o.height;
                        if o.contains(rx * z, ry * z) {
                            color = geom.palette[o.color % geom.palette.len()];
                            depth = z;
                            break;
                        }
                    }
                    acc[0] += color[0];
                    acc[1] += color[1];
                    acc[2] += color[2];
                    acc[3] += depth;
                }
            }
            let o = (row * cam.width + col) * Image::CHANNELS;
            for c in 0..4 {
                data[o + c] = acc[c] * inv;
            }
        }
    }
    let mut img = Image { width: cam.width, height: cam.height, data };
    img.quantize_rgb();
    img
}

/// Camera-frame point on top of an object's center.
pub fn top_center(o: &ObjectSpec, geom: &Geometry) -> [f32; 3] {
    [o.position[0], o.position[1], geom.table_z - o.height]
}

/// A knot of the expert spline: position, yaw and gripper state, at a pose
/// index of the output trajectory.
#[derive(Clone, Copy, Debug)]
struct Knot {
    k: usize,
    x: [f64; 3],
    yaw: f64,
}

/// Dense samples per output step.
const DENSE: usize = 10;

fn hermite(knots: &[Knot], tau: f64) -> ([f64; 3], f64) {
    let times: Vec<f64> = knots.iter().map(|k| k.k as f64).collect();
    let n = knots.len();
    let seg = (0..n - 1).rev().find(|&i| times[i] <= tau).unwrap_or(0);
    let value = |i: usize| [knots[i].x[0], knots[i].x[1], knots[i].x[2], knots[i].yaw];
    // Catmull-Rom tangents for non-uniform knots; zero at the ends.
    let tangent = |i: usize| -> [f64; 4] {
        if i == 0 || i == n - 1 {
            return [0.0; 4];
        }
        let (a, b) = (value(i - 1), value(i + 1));
        let dt = times[i + 1] - times[i - 1];
        [0, 1, 2, 3].map(|c| (b[c] - a[c]) / dt)
    };
    let (t0, t1) = (times[seg], times[seg + 1]);
    let h = t1 - t0;
    let s = ((tau - t0) / h).clamp(0.0, 1.0);
    let (p0, p1, m0, m1) = (value(seg), value(seg + 1), tangent(seg), tangent(seg + 1));
    let h00 = 2.0 * s * s * s - 3.0 * s * s + 1.0;
    let h10 = s * s * s - 2.0 * s * s + s;
    let h01 = -2.0 * s * s * s + 3.0 * s * s;
    let h11 = s * s * s - s * s;
    let out = [0, 1, 2, 3].map(|c| h00 * p0[c] + h10 * h * m0[c] + h01 * p1[c] + h11 * h * m1[c]);
    ([out[0], out[1], out[2]], out[3])
}

/// Scripted demonstration: a cubic spline through task waypoints with a
/// step gripper schedule, resampled to `horizon + 1` poses. Knot indices
/// assume `horizon = 15` and are rescaled otherwise.
pub fn expert_motion(scene: &SceneSpec, horizon: usize, geom: &Geometry) -> Result<Trajectory<f32>> {
    let home = scene.home();
    let hx = home.x.map(f64::from);
    let tgt = top_center(scene.target(), geom).map(f64::from);
    let above = |p: [f64; 3]| [p[0], p[1], p[2] - geom.approach_height as f64];
    let yaw = 0.8 * tgt[0] / geom.sample_half as f64;
    let knot = |k: usize, x: [f64; 3], yaw: f64| Knot { k, x, yaw };
    // (knots, gripper close index, gripper reopen index)
    let (knots, close_at, open_at) = match scene.task_id {
        TaskId::Reach => (
            vec![knot(0, hx, 0.0), knot(5, above(tgt), yaw), knot(8, tgt, yaw), knot(11, above(tgt), yaw), knot(15, hx, 0.0)],
            8,
            usize::MAX,
        ),
        TaskId::PushButton => {
            let press = [tgt[0], tgt[1], tgt[2] + 0.005];
            (
                vec![knot(0, hx, 0.0), knot(6, above(press), yaw), knot(9, press, yaw), knot(12, above(press), yaw), knot(15, hx, 0.0)],
                3,
                usize::MAX,
            )
        }
        TaskId::PickPlace => {
            let zone = &scene.objects[1];
            let place = [
                zone.position[0] as f64,
                zone.position[1] as f64,
                (geom.table_z - zone.height - scene.target().height) as f64,
            ];
            let zyaw = 0.8 * place[0] / geom.sample_half as f64;
            (
                vec![
                    knot(0, hx, 0.0),
                    knot(3, above(tgt), yaw),
                    knot(5, tgt, yaw),
                    knot(7, above(tgt), yaw),
                    knot(10, above(place), zyaw),
                    knot(12, place, zyaw),
                    knot(15, above(place), zyaw),
                ],
                5,
                12,
            )
        }
    };
    let scale = horizon as f64 / 15.0;
    let dense_n = horizon * DENSE;
    let mut dense = Vec::with_capacity(dense_n + 1);
    for j in 0..=dense_n {
        // Position along the 15-step knot schedule.
        let tau = j as f64 / DENSE as f64 / scale;
        let (x, psi) = hermite(&knots, tau);
        let k15 = tau.round() as usize;
        let closed = k15 >= close_at && k15 < open_at;
        dense.push(Pose {
            x: x.map(|v| v as f32),
            r: motion::yaw_sixd(psi),
            s: if closed { 0.0 } else { 1.0 },
            t: (j as f64 / dense_n as f64) as f32,
        });
    }
    motion::resample(&Trajectory::new(dense), horizon)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureReason {
    None,
    MissedTarget,
    WrongGripperState,
    OutOfBounds,
    DroppedEarly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessReport {
    pub success: bool,
    pub failure_reason: FailureReason,
}

impl SuccessReport {
    fn ok() -> Self {
        Self { success: true, failure_reason: FailureReason::None }
    }

    fn fail(reason: FailureReason) -> Self {
        Self { success: false, failure_reason: reason }
    }
}

fn dist3(a: [f32; 3], b: [f32; 3]) -> f32 {
    motion::norm3(motion::sub3(a, b))
}

/// Index of the first pose that reaches `point` with a closed gripper, or
/// the failure explaining why none does.
fn first_contact(p: &Trajectory<f32>, point: [f32; 3], tol: f32) -> std::result::Result<usize, FailureReason> {
    let mut near_but_open = false;
    for (k, pose) in p.poses().iter().enumerate() {
        if dist3(pose.x, point) < tol {
            if pose.s < 0.5 {
                return Ok(k);
            }
            near_but_open = true;
        }
    }
    Err(if near_but_open { FailureReason::WrongGripperState } else { FailureReason::MissedTarget })
}

pub fn check_success(scene: &SceneSpec, p: &Trajectory<f32>, geom: &Geometry) -> SuccessReport {
    let out = p.poses().iter().any(|pose| {
        !pose.x.iter().all(|v| v.is_finite())
            || pose.x[0].abs() > geom.bounds_half + 0.1
            || pose.x[1].abs() > geom.bounds_half + 0.1
            || pose.x[2] > geom.table_z
            || pose.x[2] < 0.1
    });
    if out {
        return SuccessReport::fail(FailureReason::OutOfBounds);
    }
    let target = scene.target();
    let tol = geom.tolerance(target.radius);
    let mut point = top_center(target, geom);
    if scene.task_id == TaskId::PushButton {
        point[2] += 0.005;
    }
    let grasp = match first_contact(p, point, tol) {
        Ok(k) => k,
        Err(reason) => return SuccessReport::fail(reason),
    };
    if scene.task_id != TaskId::PickPlace {
        return SuccessReport::ok();
    }
    let zone = &scene.objects[1];
    let place_z = geom.table_z - zone.height - target.height;
    let Some(release) = p.poses()[grasp..].iter().position(|q| q.s >= 0.5).map(|k| k + grasp) else {
        return SuccessReport::fail(FailureReason::WrongGripperState);
    };
    let q = &p.poses()[release];
    let over_zone = (q.x[0] - zone.position[0]).abs() <= zone.radius
        && (q.x[1] - zone.position[1]).abs() <= zone.radius
        && q.x[2] >= place_z - 0.05;
    if over_zone {
        SuccessReport::ok()
    } else {
        SuccessReport::fail(FailureReason::DroppedEarly)
    }
}
