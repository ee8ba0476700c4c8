//! Quasistatic tabletop world: state, delta-Cartesian dynamics, a
//! painter's-algorithm renderer, ground-truth boxes and a scripted expert.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, PerturbationRegime, Projection};
use crate::rng::RandomStream;

pub const WORKSPACE_MIN: [f64; 3] = [-1.0, -1.0, 0.0];
pub const WORKSPACE_MAX: [f64; 3] = [1.0, 1.0, 0.6];

pub const MAX_TRANSLATION: f64 = 0.05;
pub const MAX_ROTATION: f64 = 0.1;
pub const MAX_TILT: f64 = PI / 4.0;

pub const GRASP_XY: f64 = 0.05;
pub const GRASP_Z: f64 = 0.08;
pub const SUCCESS_RADIUS: f64 = 0.08;

pub const OBJECT_RADIUS: f64 = 0.09;
pub const OBJECT_HEIGHT: f64 = 0.03;
pub const CONTAINER_RADIUS: f64 = 0.15;
pub const MARKER_HALF: f64 = 0.07;
pub const TICK_LENGTH: f64 = 0.12;
pub const TABLE_HALF: f64 = 0.95;
const BORDER: f64 = 0.08;

pub const ACTION_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub ee_position: [f64; 3],
    pub ee_yaw: f64,
    /// Roll and pitch only tilt the rendered marker.
    pub ee_roll: f64,
    pub ee_pitch: f64,
    pub gripper_closed: bool,
    pub object_position: [f64; 2],
    pub object_attached: bool,
    pub container_position: [f64; 2],
    pub object_color: [f64; 3],
    pub container_color: [f64; 3],
}

impl SceneState {
    pub fn ee_xy(&self) -> [f64; 2] {
        [self.ee_position[0], self.ee_position[1]]
    }

    /// Proprioceptive features fed to the policy conditioner.
    pub fn proprio(&self) -> [f64; PROPRIO_DIM] {
        let [x, y, z] = self.ee_position;
        [
            x,
            y,
            z,
            self.ee_yaw.sin(),
            self.ee_yaw.cos(),
            if self.gripper_closed { 1.0 } else { -1.0 },
        ]
    }

    /// Distance between two states over the task-relevant coordinates.
    pub fn distance(&self, other: &SceneState) -> f64 {
        let mut acc = 0.0;
        for i in 0..3 {
            acc += (self.ee_position[i] - other.ee_position[i]).powi(2);
        }
        for i in 0..2 {
            acc += (self.object_position[i] - other.object_position[i]).powi(2);
            acc += (self.container_position[i] - other.container_position[i]).powi(2);
        }
        acc.sqrt()
    }

    fn object_center(&self) -> Vector3<f64> {
        let z = if self.object_attached {
            (self.ee_position[2] - OBJECT_HEIGHT).max(OBJECT_HEIGHT)
        } else {
            OBJECT_HEIGHT
        };
        Vector3::new(self.object_position[0], self.object_position[1], z)
    }

    fn container_center(&self) -> Vector3<f64> {
        Vector3::new(self.container_position[0], self.container_position[1], 0.0)
    }
}

pub const PROPRIO_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Goal {
    PlaceInContainer,
    ReachTarget,
}

pub const GOAL_DIM: usize = 2;

impl Goal {
    pub fn id(&self) -> u8 {
        match self {
            Goal::PlaceInContainer => 0,
            Goal::ReachTarget => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Goal::PlaceInContainer),
            1 => Some(Goal::ReachTarget),
            _ => None,
        }
    }

    pub fn one_hot(&self) -> [f64; GOAL_DIM] {
        let mut v = [0.0; GOAL_DIM];
        v[self.id() as usize] = 1.0;
        v
    }

    pub fn flipped(&self) -> Self {
        match self {
            Goal::PlaceInContainer => Goal::ReachTarget,
            Goal::ReachTarget => Goal::PlaceInContainer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightingParams {
    pub intensity: f64,
    pub tint: [f64; 3],
}

pub const INTENSITY_RANGE: (f64, f64) = (0.4, 1.6);
pub const TINT_RANGE: (f64, f64) = (0.7, 1.3);

impl Default for LightingParams {
    fn default() -> Self {
        Self::nominal()
    }
}

impl LightingParams {
    pub fn new(intensity: f64, tint: [f64; 3]) -> Result<Self> {
        let within = |v: f64, (lo, hi): (f64, f64)| v.is_finite() && v >= lo && v <= hi;
        if !within(intensity, INTENSITY_RANGE) {
            return Err(Error::InvalidInput(format!("lighting intensity {intensity} out of range")));
        }
        if !tint.iter().all(|&t| within(t, TINT_RANGE)) {
            return Err(Error::InvalidInput(format!("lighting tint {tint:?} out of range")));
        }
        Ok(Self { intensity, tint })
    }

    pub fn nominal() -> Self {
        Self {
            intensity: 1.0,
            tint: [1.0; 3],
        }
    }

    pub fn sample(rng: &mut RandomStream) -> Self {
        let intensity = rng.random_range(INTENSITY_RANGE.0..=INTENSITY_RANGE.1);
        let tint = std::array::from_fn(|_| rng.random_range(TINT_RANGE.0..=TINT_RANGE.1));
        Self { intensity, tint }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub position: [f64; 2],
    pub radius: f64,
    pub color: [f64; 3],
}

pub const DISTRACTOR_RADIUS: (f64, f64) = (0.03, 0.12);
pub const DISTRACTOR_CLEARANCE: f64 = 0.15;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClutterSet(pub Vec<Distractor>);

impl ClutterSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks radius bounds and clearance from the task entities.
    pub fn validate(&self, state: &SceneState) -> Result<()> {
        for d in &self.0 {
            if d.radius < DISTRACTOR_RADIUS.0 || d.radius > DISTRACTOR_RADIUS.1 {
                return Err(Error::InvalidInput(format!("distractor radius {} out of range", d.radius)));
            }
            let clear = [state.object_position, state.container_position]
                .iter()
                .all(|c| dist2(&d.position, c) >= DISTRACTOR_CLEARANCE);
            if !clear {
                return Err(Error::InvalidInput("distractor too close to a task entity".into()));
            }
        }
        Ok(())
    }

    pub fn sample(rng: &mut RandomStream, state: &SceneState, count: usize) -> Self {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let position = [rng.random_range(-0.85..0.85), rng.random_range(-0.85..0.85)];
            if dist2(&position, &state.object_position) < DISTRACTOR_CLEARANCE
                || dist2(&position, &state.container_position) < DISTRACTOR_CLEARANCE
            {
                continue;
            }
            out.push(Distractor {
                position,
                radius: rng.random_range(DISTRACTOR_RADIUS.0..=DISTRACTOR_RADIUS.1),
                color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            });
        }
        Self(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationConfig {
    pub camera: Camera,
    pub lighting: LightingParams,
    pub clutter: ClutterSet,
}

/// Delta-Cartesian action: translation, Euler rotation, gripper command.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action(pub [f64; ACTION_DIM]);

impl Action {
    pub fn zero() -> Self {
        Self([0.0; ACTION_DIM])
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn gripper(&self) -> f64 {
        self.0[6]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Per-component bounds of the action space.
    pub fn bounds(i: usize) -> f64 {
        match i {
            0..=2 => MAX_TRANSLATION,
            3..=5 => MAX_ROTATION,
            _ => 1.0,
        }
    }

    pub fn clipped(&self) -> Self {
        Self(std::array::from_fn(|i| {
            let b = Self::bounds(i);
            self.0[i].clamp(-b, b)
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

pub const IMAGE_MAGIC: &[u8; 4] = b"QSOB";
pub const IMAGE_HEADER_LEN: usize = 9;

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; (width * height * 3) as usize],
        }
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; (width * height * 3) as usize],
        }
    }

    pub fn len_pixels(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn mean_brightness(&self) -> f64 {
        self.data.iter().map(|&b| b as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Fraction of pixels whose RGB triple differs.
    pub fn differing_fraction(&self, other: &Image) -> f64 {
        let n = self.len_pixels();
        let differ = self
            .data
            .chunks_exact(3)
            .zip(other.data.chunks_exact(3))
            .filter(|(a, b)| a != b)
            .count();
        differ as f64 / n.max(1) as f64
    }

    /// `QSOB` ++ u16 width ++ u16 height ++ u8 channels ++ pixels.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + self.data.len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.push(3);
        out.extend_from_slice(&self.data);
        out
    }

    /// Decodes a blob; the error string describes what is wrong.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < IMAGE_HEADER_LEN {
            return Err(format!("blob is {} bytes, shorter than the header", bytes.len()));
        }
        if &bytes[..4] != IMAGE_MAGIC {
            return Err("bad magic".into());
        }
        let width = u16::from_le_bytes([bytes[4], bytes[5]]) as u32;
        let height = u16::from_le_bytes([bytes[6], bytes[7]]) as u32;
        if bytes[8] != 3 {
            return Err(format!("expected 3 channels, found {}", bytes[8]));
        }
        let expected = (width * height * 3) as usize;
        let body = &bytes[IMAGE_HEADER_LEN..];
        if body.len() != expected {
            return Err(format!("expected {expected} pixel bytes, found {}", body.len()));
        }
        Ok(Self {
            width,
            height,
            data: body.to_vec(),
        })
    }
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

pub fn step(state: &SceneState, action: &Action) -> Result<SceneState> {
    if !action.is_finite() {
        return Err(Error::InvalidAction(format!("non-finite components {:?}", action.0)));
    }
    let a = action.clipped();
    let mut next = *state;
    for i in 0..3 {
        next.ee_position[i] = (state.ee_position[i] + a.0[i]).clamp(WORKSPACE_MIN[i], WORKSPACE_MAX[i]);
    }
    next.ee_roll = (state.ee_roll + a.0[3]).clamp(-MAX_TILT, MAX_TILT);
    next.ee_pitch = (state.ee_pitch + a.0[4]).clamp(-MAX_TILT, MAX_TILT);
    if a.0[5] != 0.0 {
        next.ee_yaw = wrap_angle(state.ee_yaw + a.0[5]);
    }

    if a.gripper() >= 0.0 {
        next.gripper_closed = true;
        let near = dist2(&next.ee_xy(), &next.object_position) <= GRASP_XY
            && (next.ee_position[2] - 0.0).abs() <= GRASP_Z;
        if !next.object_attached && near {
            next.object_attached = true;
        }
    } else {
        next.gripper_closed = false;
        next.object_attached = false;
    }
    if next.object_attached {
        next.object_position = next.ee_xy();
    }
    Ok(next)
}

pub fn is_success(state: &SceneState, goal: Goal) -> bool {
    match goal {
        Goal::PlaceInContainer => {
            !state.object_attached && dist2(&state.object_position, &state.container_position) <= SUCCESS_RADIUS
        }
        Goal::ReachTarget => dist2(&state.ee_xy(), &state.container_position) <= SUCCESS_RADIUS,
    }
}

const TABLE_COLOR: [f64; 3] = [0.62, 0.56, 0.48];
const BORDER_COLOR: [f64; 3] = [0.35, 0.30, 0.26];
const MARK_X_COLOR: [f64; 3] = [0.25, 0.6, 0.3];
const MARK_Y_COLOR: [f64; 3] = [0.85, 0.85, 0.85];
const FLOOR_COLOR: [f64; 3] = [0.12, 0.12, 0.16];
const MARKER_OPEN: [f64; 3] = [0.95, 0.85, 0.2];
const MARKER_CLOSED: [f64; 3] = [0.6, 0.3, 0.85];
const TICK_COLOR: [f64; 3] = [0.05, 0.05, 0.05];

/// Base color of the table plane at a world point, before lighting. The
/// +x and +y edges carry distinct stripes so the table has a readable
/// orientation from any azimuth.
fn table_color(x: f64, y: f64) -> [f64; 3] {
    if x.abs() > TABLE_HALF || y.abs() > TABLE_HALF {
        return FLOOR_COLOR;
    }
    if x > TABLE_HALF - BORDER {
        MARK_X_COLOR
    } else if y > TABLE_HALF - BORDER {
        MARK_Y_COLOR
    } else if x < -TABLE_HALF + BORDER || y < -TABLE_HALF + BORDER {
        BORDER_COLOR
    } else {
        TABLE_COLOR
    }
}

enum Shape {
    Disc { radius_px: f64 },
    Square { half_px: f64 },
    Segment { end_u: f64, end_v: f64 },
}

struct Primitive {
    center: Projection,
    shape: Shape,
    color: [f64; 3],
}

fn disc(cam: &Camera, center: &Vector3<f64>, radius: f64, color: [f64; 3]) -> Option<Primitive> {
    let p = cam.project(center).ok()?;
    Some(Primitive {
        center: p,
        shape: Shape::Disc {
            radius_px: radius * cam.focal_px() / p.depth,
        },
        color,
    })
}

/// Pixel-space circle that the renderer draws for an entity of the given
/// world radius.
fn projected_circle(cam: &Camera, center: &Vector3<f64>, radius: f64) -> Option<(f64, f64, f64)> {
    let p = cam.project(center).ok()?;
    Some((
        p.u * cam.width as f64,
        p.v * cam.height as f64,
        radius * cam.focal_px() / p.depth,
    ))
}

fn scene_primitives(state: &SceneState, config: &ObservationConfig) -> Vec<Primitive> {
    let cam = &config.camera;
    let mut prims = Vec::with_capacity(4 + config.clutter.len());
    prims.extend(disc(cam, &state.container_center(), CONTAINER_RADIUS, state.container_color));
    for d in &config.clutter.0 {
        let c = Vector3::new(d.position[0], d.position[1], d.radius * 0.5);
        prims.extend(disc(cam, &c, d.radius, d.color));
    }
    prims.extend(disc(cam, &state.object_center(), OBJECT_RADIUS, state.object_color));

    let ee = Vector3::from(state.ee_position);
    if let Ok(p) = cam.project(&ee) {
        let color = if state.gripper_closed { MARKER_CLOSED } else { MARKER_OPEN };
        prims.push(Primitive {
            center: p,
            shape: Shape::Square {
                half_px: MARKER_HALF * cam.focal_px() / p.depth,
            },
            color,
        });
        let rot = Rotation3::from_euler_angles(state.ee_roll, state.ee_pitch, state.ee_yaw);
        let tip = ee + rot * Vector3::new(TICK_LENGTH, 0.0, 0.0);
        if let Ok(t) = cam.project(&tip) {
            prims.push(Primitive {
                // drawn just in front of the marker
                center: Projection {
                    depth: p.depth - 1e-6,
                    ..p
                },
                shape: Shape::Segment { end_u: t.u, end_v: t.v },
                color: TICK_COLOR,
            });
        }
    }
    prims
}

fn paint(buf: &mut [[f64; 3]], w: usize, h: usize, prim: &Primitive) {
    let cu = prim.center.u * w as f64;
    let cv = prim.center.v * h as f64;
    match prim.shape {
        Shape::Disc { radius_px } => {
            let r = radius_px.max(0.5);
            fill_box(buf, w, h, cu, cv, r, prim.color, |px, py| {
                (px - cu).powi(2) + (py - cv).powi(2) <= r * r
            });
        }
        Shape::Square { half_px } => {
            let r = half_px.max(0.5);
            fill_box(buf, w, h, cu, cv, r, prim.color, |px, py| {
                (px - cu).abs() <= r && (py - cv).abs() <= r
            });
        }
        Shape::Segment { end_u, end_v } => {
            let (eu, ev) = (end_u * w as f64, end_v * h as f64);
            let len = ((eu - cu).powi(2) + (ev - cv).powi(2)).sqrt();
            let n = (len.ceil() as usize * 2).clamp(1, 4 * (w + h));
            for i in 0..=n {
                let t = i as f64 / n as f64;
                let (x, y) = (cu + t * (eu - cu), cv + t * (ev - cv));
                if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                    buf[y as usize * w + x as usize] = prim.color;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fill_box(
    buf: &mut [[f64; 3]],
    w: usize,
    h: usize,
    cu: f64,
    cv: f64,
    r: f64,
    color: [f64; 3],
    inside: impl Fn(f64, f64) -> bool,
) {
    let x0 = (cu - r).floor().max(0.0) as usize;
    let y0 = (cv - r).floor().max(0.0) as usize;
    let x1 = ((cu + r).ceil().min(w as f64)).max(0.0) as usize;
    let y1 = ((cv + r).ceil().min(h as f64)).max(0.0) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                buf[y * w + x] = color;
            }
        }
    }
}

pub fn render(state: &SceneState, config: &ObservationConfig) -> Result<Image> {
    let cam = &config.camera;
    cam.project(&Vector3::from(crate::geometry::WORKSPACE_CENTER))?;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let origin = cam.position();
    let mut buf = vec![FLOOR_COLOR; w * h];
    for py in 0..h {
        for px in 0..w {
            let dir = cam.ray_direction(px as f64 + 0.5, py as f64 + 0.5);
            if dir[2] < -1e-9 {
                let t = -origin[2] / dir[2];
                let hit = origin + t * dir;
                buf[py * w + px] = table_color(hit[0], hit[1]);
            }
        }
    }

    let mut prims = scene_primitives(state, config);
    // far to near
    prims.sort_by(|a, b| b.center.depth.total_cmp(&a.center.depth));
    for prim in &prims {
        paint(&mut buf, w, h, prim);
    }

    let light = &config.lighting;
    let mut img = Image::new(cam.width, cam.height);
    for (px, out) in buf.iter().zip(img.data.chunks_exact_mut(3)) {
        for c in 0..3 {
            let v = (px[c] * light.intensity * light.tint[c]).clamp(0.0, 1.0);
            out[c] = (v * 255.0).round() as u8;
        }
    }
    Ok(img)
}

/// Normalized `(cx, cy, w, h)` boxes for the task object then the
/// container, plus visibility flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub boxes: [f64; 8],
    pub visible: [bool; 2],
}

fn clipped_box(cam: &Camera, center: &Vector3<f64>, radius: f64) -> Option<[f64; 4]> {
    let (cu, cv, r) = projected_circle(cam, center, radius)?;
    let (w, h) = (cam.width as f64, cam.height as f64);
    let x0 = ((cu - r) / w).clamp(0.0, 1.0);
    let x1 = ((cu + r) / w).clamp(0.0, 1.0);
    let y0 = ((cv - r) / h).clamp(0.0, 1.0);
    let y1 = ((cv + r) / h).clamp(0.0, 1.0);
    if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
        return None;
    }
    Some([(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0])
}

pub fn ground_truth_bboxes(state: &SceneState, config: &ObservationConfig) -> BoxAnnotation {
    let cam = &config.camera;
    let mut boxes = [0.0; 8];
    let mut visible = [false; 2];
    let entities = [
        (state.object_center(), OBJECT_RADIUS),
        (state.container_center(), CONTAINER_RADIUS),
    ];
    for (i, (c, r)) in entities.iter().enumerate() {
        if let Some(b) = clipped_box(cam, c, *r) {
            boxes[i * 4..i * 4 + 4].copy_from_slice(&b);
            visible[i] = true;
        }
    }
    BoxAnnotation { boxes, visible }
}

pub const HOVER_Z: f64 = 0.25;
pub const PICK_Z: f64 = 0.03;
pub const REACH_Z: f64 = 0.15;
const ALIGN_XY: f64 = 0.02;
const PLACE_XY: f64 = 0.03;
const GAIN: f64 = 0.8;
const EXPERT_NOISE: f64 = 0.005;

/// Stateless phase controller. Reads only the task state, never the
/// observation configuration.
pub fn expert_action(state: &SceneState, goal: Goal, rng: &mut RandomStream) -> Action {
    let ee = state.ee_position;
    let (target, gripper) = match goal {
        Goal::ReachTarget => ([state.container_position[0], state.container_position[1], REACH_Z], -1.0),
        Goal::PlaceInContainer if state.object_attached => {
            let off = dist2(&state.ee_xy(), &state.container_position);
            if off > PLACE_XY {
                if ee[2] < HOVER_Z - 0.05 {
                    ([ee[0], ee[1], HOVER_Z], 1.0)
                } else {
                    ([state.container_position[0], state.container_position[1], HOVER_Z], 1.0)
                }
            } else {
                (ee, -1.0)
            }
        }
        Goal::PlaceInContainer => {
            let off = dist2(&state.ee_xy(), &state.object_position);
            let [ox, oy] = state.object_position;
            if off > ALIGN_XY {
                ([ox, oy, HOVER_Z], -1.0)
            } else if ee[2] > PICK_Z + 0.01 {
                ([ox, oy, PICK_Z], -1.0)
            } else {
                ([ox, oy, PICK_Z], 1.0)
            }
        }
    };
    let mut a = [0.0; ACTION_DIM];
    for i in 0..3 {
        let d = (GAIN * (target[i] - ee[i])).clamp(-MAX_TRANSLATION, MAX_TRANSLATION);
        a[i] = d + rng.random_range(-EXPERT_NOISE..=EXPERT_NOISE);
    }
    a[6] = gripper;
    Action(a)
}

/// A freshly sampled task: state, goal and the clutter to show with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub state: SceneState,
    pub goal: Goal,
    pub clutter: ClutterSet,
}

pub const ENTITY_RANGE: f64 = 0.7;
pub const MIN_SEPARATION: f64 = 0.3;

const OBJECT_BASE_COLOR: [f64; 3] = [0.85, 0.15, 0.15];
const CONTAINER_BASE_COLOR: [f64; 3] = [0.15, 0.3, 0.85];
const COLOR_JITTER: f64 = 0.08;

pub fn sample_scene(rng: &mut RandomStream, n_distractors: usize) -> Scene {
    let uniform = |rng: &mut RandomStream| [rng.random_range(-ENTITY_RANGE..=ENTITY_RANGE), rng.random_range(-ENTITY_RANGE..=ENTITY_RANGE)];
    let object_position = uniform(rng);
    let container_position = loop {
        let c = uniform(rng);
        if dist2(&c, &object_position) >= MIN_SEPARATION {
            break c;
        }
    };
    let jitter = |rng: &mut RandomStream, base: [f64; 3]| {
        std::array::from_fn(|i| (base[i] + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 1.0))
    };
    let state = SceneState {
        ee_position: [
            rng.random_range(-0.8..=0.8),
            rng.random_range(-0.8..=0.8),
            rng.random_range(0.15..=0.5),
        ],
        ee_yaw: rng.random_range(-PI..PI),
        ee_roll: 0.0,
        ee_pitch: 0.0,
        gripper_closed: false,
        object_position,
        object_attached: false,
        container_position,
        object_color: jitter(rng, OBJECT_BASE_COLOR),
        container_color: jitter(rng, CONTAINER_BASE_COLOR),
    };
    let goal = if rng.random::<bool>() {
        Goal::PlaceInContainer
    } else {
        Goal::ReachTarget
    };
    let clutter = ClutterSet::sample(rng, &state, n_distractors);
    Scene { state, goal, clutter }
}

/// Default demonstration camera: in front of the table, looking down.
pub fn nominal_camera(width: u32, height: u32) -> Camera {
    Camera::orbit(-PI / 2.0, 50f64.to_radians(), 2.0, 55f64.to_radians(), width, height)
        .expect("nominal camera is valid")
}

pub fn nominal_config(width: u32, height: u32) -> ObservationConfig {
    ObservationConfig {
        camera: nominal_camera(width, height),
        lighting: LightingParams::nominal(),
        clutter: ClutterSet::empty(),
    }
}

/// Samples a complete observation configuration.
pub fn sample_config(
    rng: &mut RandomStream,
    base: &Camera,
    regime: PerturbationRegime,
    randomize_lighting: bool,
    state: &SceneState,
    n_distractors: usize,
) -> ObservationConfig {
    let camera = crate::geometry::sample_camera(rng, regime, base);
    let lighting = if randomize_lighting {
        LightingParams::sample(rng)
    } else {
        LightingParams::nominal()
    };
    let clutter = ClutterSet::sample(rng, state, n_distractors);
    ObservationConfig {
        camera,
        lighting,
        clutter,
    }
}
