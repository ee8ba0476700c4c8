//! Multi-view demonstrations, static observation clusters, the
//! positive/negative pair rule, batch sampling, and the on-disk dataset
//! layout (`manifest.json` plus `blobs/obs_<id>.bin`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_target, relative_pose, rotate_azimuth, sample_camera, translation_scale, Camera, PerturbationRegime, Pose, PoseTarget};
use crate::losses::Objective;
use crate::rng::RandomStream;
use crate::world::{
    expert_action, ground_truth_bboxes, is_success, nominal_camera, render, sample_scene, step, Action, BoxAnnotation,
    ClutterSet, Distractor, Goal, Image, LightingParams, ObservationConfig, SceneState, ACTION_DIM, PROPRIO_DIM,
};

pub const MANIFEST_VERSION: u32 = 1;
pub const HORIZON: usize = 8;
pub const CHUNK_DIM: usize = HORIZON * ACTION_DIM;

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub blob: u64,
    pub config: ObservationConfig,
    pub bbox: BoxAnnotation,
    pub scene_id: u64,
    pub timestep: usize,
    pub view: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoStep {
    pub state: SceneState,
    pub action: Action,
    pub observations: Vec<ObservationRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoTrajectory {
    pub id: u64,
    pub goal: Goal,
    pub steps: Vec<DemoStep>,
    /// State after the last stored action.
    pub final_state: SceneState,
    /// Translation scale of the trajectory's camera set, when the set is
    /// not degenerate.
    pub scale: Option<f64>,
}

impl DemoTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn views(&self) -> usize {
        self.steps.first().map_or(0, |s| s.observations.len())
    }

    /// Re-simulates the stored actions from the initial state and returns
    /// the largest coordinate deviation from the stored states.
    pub fn replay_error(&self) -> Result<f64> {
        let Some(first) = self.steps.first() else {
            return Ok(0.0);
        };
        let mut s = first.state;
        let mut worst = 0.0f64;
        for (t, st) in self.steps.iter().enumerate() {
            worst = worst.max(state_deviation(&s, &st.state));
            s = step(&s, &st.action)?;
            if t + 1 == self.steps.len() {
                worst = worst.max(state_deviation(&s, &self.final_state));
            }
        }
        Ok(worst)
    }
}

fn state_deviation(a: &SceneState, b: &SceneState) -> f64 {
    if a.gripper_closed != b.gripper_closed || a.object_attached != b.object_attached {
        return f64::INFINITY;
    }
    let mut d = (a.ee_yaw - b.ee_yaw).abs().max((a.ee_roll - b.ee_roll).abs()).max((a.ee_pitch - b.ee_pitch).abs());
    for i in 0..3 {
        d = d.max((a.ee_position[i] - b.ee_position[i]).abs());
    }
    for i in 0..2 {
        d = d.max((a.object_position[i] - b.object_position[i]).abs());
        d = d.max((a.container_position[i] - b.container_position[i]).abs());
    }
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticCluster {
    pub id: u64,
    pub goal: Goal,
    pub state: SceneState,
    pub records: Vec<ObservationRecord>,
    pub scale: Option<f64>,
}

/// Demonstrations and static clusters sharing one blob namespace. A
/// dataset produced by [`collect_demos`] has no clusters and one produced
/// by [`collect_static`] has no trajectories; [`Dataset::merge`] joins them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub image_width: u32,
    pub image_height: u32,
    pub trajectories: Vec<DemoTrajectory>,
    pub static_clusters: Vec<StaticCluster>,
    pub blobs: Vec<Image>,
}

impl Dataset {
    pub fn image(&self, blob: u64) -> Result<&Image> {
        self.blobs.get(blob as usize).ok_or(Error::MissingBlob(blob))
    }

    pub fn num_records(&self) -> usize {
        self.demo_records().count() + self.static_records().count()
    }

    pub fn demo_records(&self) -> impl Iterator<Item = &ObservationRecord> {
        self.trajectories.iter().flat_map(|t| t.steps.iter().flat_map(|s| s.observations.iter()))
    }

    pub fn static_records(&self) -> impl Iterator<Item = &ObservationRecord> {
        self.static_clusters.iter().flat_map(|c| c.records.iter())
    }

    /// Appends `other`, renumbering its blobs and ids.
    pub fn merge(mut self, other: Dataset) -> Result<Dataset> {
        if self.blobs.is_empty() {
            self.image_width = other.image_width;
            self.image_height = other.image_height;
        } else if !other.blobs.is_empty() && (self.image_width, self.image_height) != (other.image_width, other.image_height) {
            return Err(Error::Shape("cannot merge datasets with different image sizes".into()));
        }
        let offset = self.blobs.len() as u64;
        let traj_offset = self.trajectories.iter().map(|t| t.id + 1).max().unwrap_or(0);
        let cluster_offset = self.static_clusters.iter().map(|c| c.id + 1).max().unwrap_or(0);
        let shift = |r: &mut ObservationRecord, id_offset: u64| {
            r.blob += offset;
            r.scene_id += id_offset;
        };
        for mut t in other.trajectories {
            t.id += traj_offset;
            for r in t.steps.iter_mut().flat_map(|s| s.observations.iter_mut()) {
                shift(r, traj_offset);
            }
            self.trajectories.push(t);
        }
        for mut c in other.static_clusters {
            c.id += cluster_offset;
            for r in c.records.iter_mut() {
                shift(r, cluster_offset);
            }
            self.static_clusters.push(c);
        }
        self.blobs.extend(other.blobs);
        Ok(self)
    }
}

/// Where demonstration or static-cluster cameras come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CameraSource {
    Regime(PerturbationRegime),
    /// `count` azimuths evenly spaced around the nominal camera, at its
    /// elevation and radius.
    Azimuths(usize),
}

impl CameraSource {
    fn sample_set(&self, rng: &mut RandomStream, base: &Camera, n: usize) -> Vec<Camera> {
        match *self {
            CameraSource::Regime(r) => (0..n).map(|_| sample_camera(rng, r, base)).collect(),
            CameraSource::Azimuths(count) => {
                let count = count.max(1);
                let mut slots: Vec<usize> = (0..count).collect();
                let mut out = Vec::with_capacity(n);
                while out.len() < n {
                    let take = (n - out.len()).min(count);
                    for &k in rand::seq::SliceRandom::partial_shuffle(&mut slots[..], rng, take).0.iter() {
                        let angle = std::f64::consts::TAU * k as f64 / count as f64;
                        out.push(rotate_azimuth(base, angle));
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub n_trajectories: usize,
    pub views_per_step: usize,
    pub camera: CameraSource,
    pub image_width: u32,
    pub image_height: u32,
    pub distractors: usize,
    pub randomize_lighting: bool,
    /// Trajectories recorded with one camera set before it is resampled.
    pub resample_every: usize,
    /// Consecutive trajectories that share an object/container layout and
    /// goal (with fresh end-effector starts).
    pub episodes_per_layout: usize,
    pub max_steps: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 20,
            views_per_step: 10,
            camera: CameraSource::Regime(PerturbationRegime::UniformHemisphere),
            image_width: 48,
            image_height: 48,
            distractors: 0,
            randomize_lighting: false,
            resample_every: 10,
            episodes_per_layout: 1,
            max_steps: 120,
        }
    }
}

struct BlobSink<'a> {
    blobs: &'a mut Vec<Image>,
}

impl BlobSink<'_> {
    fn observe(&mut self, state: &SceneState, config: &ObservationConfig, scene_id: u64, timestep: usize, view: usize) -> Result<ObservationRecord> {
        let image = render(state, config)?;
        let blob = self.blobs.len() as u64;
        self.blobs.push(image);
        Ok(ObservationRecord {
            blob,
            config: config.clone(),
            bbox: ground_truth_bboxes(state, config),
            scene_id,
            timestep,
            view,
        })
    }
}

fn camera_scale(cameras: &[Camera]) -> Option<f64> {
    let poses: Vec<Pose> = cameras.iter().map(|c| c.extrinsics).collect();
    translation_scale(&poses).ok()
}

const MAX_FAILURE_RATE: f64 = 0.2;

/// Rolls out the expert and records every timestep from
/// `views_per_step` cameras. Only successful episodes are kept.
pub fn collect_demos(rng: &mut RandomStream, cfg: &DemoConfig) -> Result<Dataset> {
    if cfg.n_trajectories == 0 || cfg.views_per_step == 0 {
        return Err(Error::InvalidInput("need at least one trajectory and one view".into()));
    }
    let base = nominal_camera(cfg.image_width, cfg.image_height);
    let mut ds = Dataset {
        image_width: cfg.image_width,
        image_height: cfg.image_height,
        ..Default::default()
    };
    let (mut attempts, mut failures) = (0usize, 0usize);
    let mut cameras: Vec<Camera> = Vec::new();
    let mut layout = None;
    while ds.trajectories.len() < cfg.n_trajectories {
        let idx = ds.trajectories.len();
        if idx % cfg.resample_every.max(1) == 0 && (cameras.is_empty() || layout_is_fresh(idx, cfg)) {
            cameras = cfg.camera.sample_set(rng, &base, cfg.views_per_step);
        }
        let mut scene = sample_scene(rng, cfg.distractors);
        if idx % cfg.episodes_per_layout.max(1) != 0 {
            if let Some((prev, goal)) = layout {
                let prev: SceneState = prev;
                scene.goal = goal;
                scene.state = SceneState {
                    ee_position: scene.state.ee_position,
                    ee_yaw: scene.state.ee_yaw,
                    ..prev
                };
            }
        }
        layout = Some((scene.state, scene.goal));

        attempts += 1;
        let Some((steps, final_state)) = expert_rollout(rng, &scene.state, scene.goal, cfg.max_steps) else {
            failures += 1;
            if attempts >= 10 && failures as f64 > MAX_FAILURE_RATE * attempts as f64 {
                return Err(Error::GenerationFailed(format!(
                    "expert failed {failures} of {attempts} episodes"
                )));
            }
            continue;
        };

        let id = idx as u64;
        let configs: Vec<ObservationConfig> = cameras
            .iter()
            .map(|cam| ObservationConfig {
                camera: *cam,
                lighting: if cfg.randomize_lighting { LightingParams::sample(rng) } else { LightingParams::nominal() },
                clutter: ClutterSet::sample(rng, &scene.state, cfg.distractors),
            })
            .collect();
        let mut sink = BlobSink { blobs: &mut ds.blobs };
        let mut demo_steps = Vec::with_capacity(steps.len());
        for (t, (state, action)) in steps.into_iter().enumerate() {
            let observations = configs
                .iter()
                .enumerate()
                .map(|(v, c)| sink.observe(&state, c, id, t, v))
                .collect::<Result<Vec<_>>>()?;
            demo_steps.push(DemoStep { state, action, observations });
        }
        ds.trajectories.push(DemoTrajectory {
            id,
            goal: scene.goal,
            steps: demo_steps,
            final_state,
            scale: camera_scale(&cameras),
        });
    }
    if failures as f64 > MAX_FAILURE_RATE * attempts as f64 {
        return Err(Error::GenerationFailed(format!("expert failed {failures} of {attempts} episodes")));
    }
    Ok(ds)
}

fn layout_is_fresh(idx: usize, cfg: &DemoConfig) -> bool {
    idx % cfg.episodes_per_layout.max(1) == 0
}

type Rollout = (Vec<(SceneState, Action)>, SceneState);

fn expert_rollout(rng: &mut RandomStream, start: &SceneState, goal: Goal, max_steps: usize) -> Option<Rollout> {
    let mut s = *start;
    let mut steps = Vec::new();
    for _ in 0..max_steps {
        let a = expert_action(&s, goal, rng);
        let next = step(&s, &a).expect("expert actions are finite");
        steps.push((s, a));
        s = next;
        if is_success(&s, goal) {
            return Some((steps, s));
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticConfig {
    pub n_scenes: usize,
    pub views_per_state: usize,
    pub camera: CameraSource,
    pub lighting_variation: bool,
    /// Distractor counts drawn uniformly per view.
    pub clutter_counts: Vec<usize>,
    pub image_width: u32,
    pub image_height: u32,
    /// Frozen states are taken after a uniform number of expert steps in
    /// `[0, max_freeze_step)`.
    pub max_freeze_step: usize,
}

impl Default for StaticConfig {
    fn default() -> Self {
        Self {
            n_scenes: 50,
            views_per_state: 10,
            camera: CameraSource::Regime(PerturbationRegime::UniformHemisphere),
            lighting_variation: true,
            clutter_counts: vec![0, 1, 3, 5],
            image_width: 48,
            image_height: 48,
            max_freeze_step: 60,
        }
    }
}

/// Freezes one state per scene and renders it under independently
/// sampled camera, lighting and clutter.
pub fn collect_static(rng: &mut RandomStream, cfg: &StaticConfig) -> Result<Dataset> {
    if cfg.n_scenes == 0 {
        return Err(Error::InvalidInput("need at least one static scene".into()));
    }
    if cfg.views_per_state < 2 {
        return Err(Error::InvalidInput(format!(
            "static clusters need at least 2 views, got {}",
            cfg.views_per_state
        )));
    }
    let counts = if cfg.clutter_counts.is_empty() { vec![0] } else { cfg.clutter_counts.clone() };
    let base = nominal_camera(cfg.image_width, cfg.image_height);
    let mut ds = Dataset {
        image_width: cfg.image_width,
        image_height: cfg.image_height,
        ..Default::default()
    };
    for id in 0..cfg.n_scenes as u64 {
        let scene = sample_scene(rng, 0);
        let freeze = rng.random_range(0..cfg.max_freeze_step.max(1));
        let mut s = scene.state;
        for _ in 0..freeze {
            if is_success(&s, scene.goal) {
                break;
            }
            s = step(&s, &expert_action(&s, scene.goal, rng))?;
        }
        let cameras = cfg.camera.sample_set(rng, &base, cfg.views_per_state);
        let mut sink = BlobSink { blobs: &mut ds.blobs };
        let mut records = Vec::with_capacity(cameras.len());
        for (v, cam) in cameras.iter().enumerate() {
            let n = *counts.choose(rng).unwrap();
            let config = ObservationConfig {
                camera: *cam,
                lighting: if cfg.lighting_variation { LightingParams::sample(rng) } else { LightingParams::nominal() },
                clutter: ClutterSet::sample(rng, &s, n),
            };
            records.push(sink.observe(&s, &config, id, 0, v)?);
        }
        ds.static_clusters.push(StaticCluster {
            id,
            goal: scene.goal,
            state: s,
            records,
            scale: camera_scale(&cameras),
        });
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetKind {
    Demo,
    Static,
}

/// Position of an observation's underlying state: trajectory (or cluster)
/// id and timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairIndex {
    pub kind: DatasetKind,
    pub id: u64,
    pub timestep: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairLabel {
    DemoPositive,
    DemoNegative,
    StaticPositive,
    StaticNegative,
}

impl PairLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, PairLabel::DemoPositive | PairLabel::StaticPositive)
    }
}

pub fn classify_pair(a: &PairIndex, b: &PairIndex, epsilon: usize) -> Result<PairLabel> {
    match (a.kind, b.kind) {
        (DatasetKind::Demo, DatasetKind::Demo) => {
            if a.id == b.id && a.timestep.abs_diff(b.timestep) < epsilon {
                Ok(PairLabel::DemoPositive)
            } else {
                Ok(PairLabel::DemoNegative)
            }
        }
        (DatasetKind::Static, DatasetKind::Static) => {
            if a.id == b.id {
                Ok(PairLabel::StaticPositive)
            } else {
                Ok(PairLabel::StaticNegative)
            }
        }
        _ => Err(Error::CrossKind),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub in_task_probability: f64,
    pub epsilon: usize,
    /// Behavior-cloning items per batch.
    pub batch_size: usize,
    /// Alignment pairs per batch, split evenly between positives and
    /// negatives.
    pub align_pairs: usize,
    pub ext_pairs: usize,
    pub bbox_items: usize,
    /// Probability that an alignment or extrinsics pair is drawn from the
    /// static clusters when both sources exist.
    pub static_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            in_task_probability: 0.5,
            epsilon: 3,
            batch_size: 32,
            align_pairs: 32,
            ext_pairs: 16,
            bbox_items: 16,
            static_fraction: 0.5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.in_task_probability) || !p_ok(self.static_fraction) {
            return Err(Error::InvalidInput("sampler probabilities must lie in [0, 1]".into()));
        }
        if self.epsilon < 1 {
            return Err(Error::InvalidInput("epsilon must be at least 1".into()));
        }
        Ok(())
    }
}

/// Identifies the stored record behind a batch slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordRef {
    pub index: PairIndex,
    pub view: usize,
    pub blob: u64,
}

/// One encoder input: an image with its goal.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub image: Image,
    pub goal: Goal,
    pub source: RecordRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcItem {
    pub slot: usize,
    pub goal: Goal,
    pub proprio: [f64; PROPRIO_DIM],
    /// `HORIZON` raw actions, row-major.
    pub chunk: [f64; CHUNK_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignPair {
    pub a: usize,
    pub b: usize,
    pub label: PairLabel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtPair {
    pub k: usize,
    pub l: usize,
    pub target: PoseTarget,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BboxItem {
    pub slot: usize,
    pub target: [f64; 8],
    pub visible: [bool; 2],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingBatch {
    pub slots: Vec<Slot>,
    pub bc: Vec<BcItem>,
    pub align: Vec<AlignPair>,
    pub ext: Vec<ExtPair>,
    pub bbox: Vec<BboxItem>,
}

/// Which terms a batch must supply. A term that is not needed is left
/// empty rather than sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needs {
    pub bc: bool,
    pub align: bool,
    pub ext: bool,
    pub bbox: bool,
}

impl Needs {
    pub fn all() -> Self {
        Self {
            bc: true,
            align: true,
            ext: true,
            bbox: true,
        }
    }

    pub fn from_objective(o: &Objective) -> Self {
        Self {
            bc: o.bc != 0.0,
            align: o.pos != 0.0 || o.neg != 0.0,
            ext: o.ext != 0.0,
            bbox: o.bbox != 0.0,
        }
    }
}

/// Pre-indexed view over a dataset for repeated batch sampling.
pub struct Sampler<'a> {
    data: &'a Dataset,
    cfg: SamplerConfig,
    /// `(trajectory, timestep)` over every demo step.
    demo_steps: Vec<(usize, usize)>,
    traj_by_goal: BTreeMap<Goal, Vec<usize>>,
    cluster_by_goal: BTreeMap<Goal, Vec<usize>>,
    /// Demo steps and clusters that can supply two calibrated views.
    ext_demo: Vec<(usize, usize)>,
    ext_static: Vec<usize>,
    num_demo_records: usize,
    num_static_records: usize,
    static_offsets: Vec<usize>,
}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a Dataset, cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut demo_steps = Vec::new();
        let mut traj_by_goal: BTreeMap<Goal, Vec<usize>> = BTreeMap::new();
        let mut ext_demo = Vec::new();
        for (ti, t) in data.trajectories.iter().enumerate() {
            traj_by_goal.entry(t.goal).or_default().push(ti);
            for si in 0..t.len() {
                demo_steps.push((ti, si));
                if t.views() >= 2 && t.scale.is_some() {
                    ext_demo.push((ti, si));
                }
            }
        }
        let mut cluster_by_goal: BTreeMap<Goal, Vec<usize>> = BTreeMap::new();
        let mut ext_static = Vec::new();
        let mut static_offsets = Vec::new();
        let mut acc = 0;
        for (ci, c) in data.static_clusters.iter().enumerate() {
            cluster_by_goal.entry(c.goal).or_default().push(ci);
            if c.records.len() >= 2 && c.scale.is_some() {
                ext_static.push(ci);
            }
            static_offsets.push(acc);
            acc += c.records.len();
        }
        let num_demo_records = data.demo_records().count();
        Ok(Self {
            data,
            cfg,
            demo_steps,
            traj_by_goal,
            cluster_by_goal,
            ext_demo,
            ext_static,
            num_demo_records,
            num_static_records: acc,
            static_offsets,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn has_static(&self) -> bool {
        !self.data.static_clusters.is_empty()
    }

    pub fn sample(&self, needs: Needs, rng: &mut RandomStream) -> Result<TrainingBatch> {
        let mut batch = TrainingBatch::default();
        if needs.bc {
            if self.demo_steps.is_empty() {
                return Err(Error::EmptySource("behavior cloning needs demonstrations".into()));
            }
            for _ in 0..self.cfg.batch_size {
                let item = self.sample_bc(&mut batch, rng)?;
                batch.bc.push(item);
            }
        }
        if needs.align {
            if self.demo_steps.is_empty() && !self.has_static() {
                return Err(Error::EmptySource("alignment pairs need demonstrations or static clusters".into()));
            }
            let n_pos = self.cfg.align_pairs / 2;
            for i in 0..self.cfg.align_pairs {
                let pair = self.sample_align(&mut batch, i < n_pos, rng)?;
                batch.align.push(pair);
            }
        }
        if needs.ext {
            if self.ext_demo.is_empty() && self.ext_static.is_empty() {
                return Err(Error::EmptySource(
                    "extrinsics pairs need a state observed from at least 2 distinct cameras".into(),
                ));
            }
            for _ in 0..self.cfg.ext_pairs {
                let pair = self.sample_ext(&mut batch, rng)?;
                batch.ext.push(pair);
            }
        }
        if needs.bbox {
            if self.num_demo_records + self.num_static_records == 0 {
                return Err(Error::EmptySource("box regression needs observations".into()));
            }
            for _ in 0..self.cfg.bbox_items {
                let item = self.sample_bbox(&mut batch, rng)?;
                batch.bbox.push(item);
            }
        }
        Ok(batch)
    }

    fn push_slot(&self, batch: &mut TrainingBatch, rec: &ObservationRecord, kind: DatasetKind, goal: Goal) -> Result<usize> {
        let image = self.data.image(rec.blob)?.clone();
        batch.slots.push(Slot {
            image,
            goal,
            source: RecordRef {
                index: PairIndex {
                    kind,
                    id: rec.scene_id,
                    timestep: rec.timestep,
                },
                view: rec.view,
                blob: rec.blob,
            },
        });
        Ok(batch.slots.len() - 1)
    }

    fn demo_slot(&self, batch: &mut TrainingBatch, ti: usize, si: usize, rng: &mut RandomStream) -> Result<usize> {
        let t = &self.data.trajectories[ti];
        let rec = t.steps[si].observations.choose(rng).ok_or_else(|| Error::EmptySource("demo step without views".into()))?;
        self.push_slot(batch, rec, DatasetKind::Demo, t.goal)
    }

    fn static_slot(&self, batch: &mut TrainingBatch, ci: usize, rng: &mut RandomStream) -> Result<usize> {
        let c = &self.data.static_clusters[ci];
        let rec = c.records.choose(rng).ok_or_else(|| Error::EmptySource("empty static cluster".into()))?;
        self.push_slot(batch, rec, DatasetKind::Static, c.goal)
    }

    fn sample_bc(&self, batch: &mut TrainingBatch, rng: &mut RandomStream) -> Result<BcItem> {
        let &(ti, si) = self.demo_steps.choose(rng).unwrap();
        let t = &self.data.trajectories[ti];
        let slot = self.demo_slot(batch, ti, si, rng)?;
        Ok(BcItem {
            slot,
            goal: t.goal,
            proprio: t.steps[si].state.proprio(),
            chunk: action_chunk(t, si),
        })
    }

    fn use_static(&self, has_demo: bool, has_static: bool, rng: &mut RandomStream) -> bool {
        match (has_demo, has_static) {
            (true, true) => rng.random_bool(self.cfg.static_fraction),
            (false, true) => true,
            _ => false,
        }
    }

    fn sample_align(&self, batch: &mut TrainingBatch, positive: bool, rng: &mut RandomStream) -> Result<AlignPair> {
        let from_static = self.use_static(!self.demo_steps.is_empty(), self.has_static(), rng);
        let eps = self.cfg.epsilon;
        let (a, b) = if from_static {
            let clusters = &self.data.static_clusters;
            let ci = rng.random_range(0..clusters.len());
            let cj = if positive {
                ci
            } else {
                self.negative_partner(&self.cluster_by_goal, clusters[ci].goal, rng, |cj| cj != ci)
                    .ok_or_else(|| Error::EmptySource("static negatives need at least 2 clusters".into()))?
            };
            (self.static_slot(batch, ci, rng)?, self.static_slot(batch, cj, rng)?)
        } else {
            let &(ti, si) = self.demo_steps.choose(rng).unwrap();
            let (tj, sj) = if positive {
                let len = self.data.trajectories[ti].len();
                let lo = si.saturating_sub(eps - 1);
                let hi = (si + eps - 1).min(len - 1);
                (ti, rng.random_range(lo..=hi))
            } else {
                let goal = self.data.trajectories[ti].goal;
                let mut found = None;
                for _ in 0..64 {
                    let Some(tj) = self.negative_partner(&self.traj_by_goal, goal, rng, |_| true) else {
                        break;
                    };
                    let sj = rng.random_range(0..self.data.trajectories[tj].len());
                    if tj != ti || si.abs_diff(sj) >= eps {
                        found = Some((tj, sj));
                        break;
                    }
                }
                found.ok_or_else(|| Error::EmptySource("could not find a demonstration negative".into()))?
            };
            (self.demo_slot(batch, ti, si, rng)?, self.demo_slot(batch, tj, sj, rng)?)
        };
        let label = classify_pair(&batch.slots[a].source.index, &batch.slots[b].source.index, eps)?;
        debug_assert_eq!(label.is_positive(), positive);
        Ok(AlignPair { a, b, label })
    }

    /// With probability `in_task_probability` picks a partner with the
    /// same goal, otherwise one with a different goal (falling back to any
    /// goal when only one exists).
    fn negative_partner(
        &self,
        by_goal: &BTreeMap<Goal, Vec<usize>>,
        goal: Goal,
        rng: &mut RandomStream,
        accept: impl Fn(usize) -> bool,
    ) -> Option<usize> {
        let in_task = rng.random_bool(self.cfg.in_task_probability);
        let pool: Vec<usize> = if in_task {
            by_goal.get(&goal).cloned().unwrap_or_default()
        } else {
            let other: Vec<usize> = by_goal.iter().filter(|(g, _)| **g != goal).flat_map(|(_, v)| v.iter().copied()).collect();
            if other.is_empty() {
                by_goal.values().flatten().copied().collect()
            } else {
                other
            }
        };
        let pool: Vec<usize> = pool.into_iter().filter(|&i| accept(i)).collect();
        if pool.is_empty() {
            let any: Vec<usize> = by_goal.values().flatten().copied().filter(|&i| accept(i)).collect();
            return any.choose(rng).copied();
        }
        pool.choose(rng).copied()
    }

    fn sample_ext(&self, batch: &mut TrainingBatch, rng: &mut RandomStream) -> Result<ExtPair> {
        let from_static = self.use_static(!self.ext_demo.is_empty(), !self.ext_static.is_empty(), rng);
        let (records, kind, goal, scale): (&[ObservationRecord], _, _, _) = if from_static {
            let c = &self.data.static_clusters[*self.ext_static.choose(rng).unwrap()];
            (&c.records, DatasetKind::Static, c.goal, c.scale.unwrap())
        } else {
            let &(ti, si) = self.ext_demo.choose(rng).unwrap();
            let t = &self.data.trajectories[ti];
            (&t.steps[si].observations, DatasetKind::Demo, t.goal, t.scale.unwrap())
        };
        let k = rng.random_range(0..records.len());
        let l = (k + rng.random_range(1..records.len())) % records.len();
        let (rk, rl) = (&records[k], &records[l]);
        let target = pose_target(&relative_pose(&rk.config.camera.extrinsics, &rl.config.camera.extrinsics), scale)?;
        let ks = self.push_slot(batch, rk, kind, goal)?;
        let ls = self.push_slot(batch, rl, kind, goal)?;
        Ok(ExtPair {
            k: ks,
            l: ls,
            target,
            scale,
        })
    }

    fn sample_bbox(&self, batch: &mut TrainingBatch, rng: &mut RandomStream) -> Result<BboxItem> {
        let total = self.num_demo_records + self.num_static_records;
        let pick = rng.random_range(0..total);
        let (rec, kind, goal) = if pick < self.num_static_records {
            let ci = self.static_offsets.partition_point(|&o| o <= pick) - 1;
            let c = &self.data.static_clusters[ci];
            (&c.records[pick - self.static_offsets[ci]], DatasetKind::Static, c.goal)
        } else {
            // demo records: choose a step proportionally, then a view
            let &(ti, si) = self.demo_steps.choose(rng).unwrap();
            let t = &self.data.trajectories[ti];
            (t.steps[si].observations.choose(rng).unwrap(), DatasetKind::Demo, t.goal)
        };
        let slot = self.push_slot(batch, rec, kind, goal)?;
        Ok(BboxItem {
            slot,
            target: rec.bbox.boxes,
            visible: rec.bbox.visible,
        })
    }
}

/// Actions `t..t+HORIZON`; steps past the end hold position with the last
/// gripper command.
pub fn action_chunk(t: &DemoTrajectory, start: usize) -> [f64; CHUNK_DIM] {
    let mut chunk = [0.0; CHUNK_DIM];
    let last = t.steps.last().map_or(Action::zero(), |s| s.action);
    for h in 0..HORIZON {
        let a = match t.steps.get(start + h) {
            Some(s) => s.action,
            None => {
                let mut hold = Action::zero();
                hold.0[6] = last.gripper();
                hold
            }
        };
        chunk[h * ACTION_DIM..(h + 1) * ACTION_DIM].copy_from_slice(&a.0);
    }
    chunk
}

pub fn sample_batch(data: &Dataset, cfg: &SamplerConfig, needs: Needs, rng: &mut RandomStream) -> Result<TrainingBatch> {
    Sampler::new(data, *cfg)?.sample(needs, rng)
}

// ---------------------------------------------------------------------------
// On-disk layout

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    image_width: u32,
    image_height: u32,
    trajectories: Vec<TrajectoryEntry>,
    static_clusters: Vec<ClusterEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryEntry {
    id: u64,
    goal: u8,
    scale: Option<f64>,
    /// One state per timestep followed by the final state.
    states: Vec<SceneState>,
    actions: Vec<[f64; ACTION_DIM]>,
    views: usize,
    records: Vec<RecordEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusterEntry {
    id: u64,
    goal: u8,
    scale: Option<f64>,
    state: SceneState,
    records: Vec<RecordEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordEntry {
    blob: u64,
    scene: u64,
    timestep: usize,
    view: usize,
    extrinsics: Pose,
    fov_rad: f64,
    width: u32,
    height: u32,
    lighting: LightingParams,
    clutter: Vec<Distractor>,
    bbox: [f64; 8],
    visible: [bool; 2],
}

impl From<&ObservationRecord> for RecordEntry {
    fn from(r: &ObservationRecord) -> Self {
        Self {
            blob: r.blob,
            scene: r.scene_id,
            timestep: r.timestep,
            view: r.view,
            extrinsics: r.config.camera.extrinsics,
            fov_rad: r.config.camera.fov_y,
            width: r.config.camera.width,
            height: r.config.camera.height,
            lighting: r.config.lighting,
            clutter: r.config.clutter.0.clone(),
            bbox: r.bbox.boxes,
            visible: r.bbox.visible,
        }
    }
}

impl RecordEntry {
    fn into_record(self) -> Result<ObservationRecord> {
        let camera = Camera::new(self.extrinsics, self.fov_rad, self.width, self.height)?;
        let lighting = LightingParams::new(self.lighting.intensity, self.lighting.tint)?;
        Ok(ObservationRecord {
            blob: self.blob,
            config: ObservationConfig {
                camera,
                lighting,
                clutter: ClutterSet(self.clutter),
            },
            bbox: BoxAnnotation {
                boxes: self.bbox,
                visible: self.visible,
            },
            scene_id: self.scene,
            timestep: self.timestep,
            view: self.view,
        })
    }
}

fn goal_from(id: u8) -> Result<Goal> {
    Goal::from_id(id).ok_or_else(|| Error::Format(format!("unknown goal id {id}")))
}

pub fn blob_path(dir: &Path, id: u64) -> std::path::PathBuf {
    dir.join("blobs").join(format!("obs_{id}.bin"))
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("blobs"))?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        image_width: ds.image_width,
        image_height: ds.image_height,
        trajectories: ds
            .trajectories
            .iter()
            .map(|t| TrajectoryEntry {
                id: t.id,
                goal: t.goal.id(),
                scale: t.scale,
                states: t.steps.iter().map(|s| s.state).chain(std::iter::once(t.final_state)).collect(),
                actions: t.steps.iter().map(|s| s.action.0).collect(),
                views: t.views(),
                records: t.steps.iter().flat_map(|s| s.observations.iter().map(RecordEntry::from)).collect(),
            })
            .collect(),
        static_clusters: ds
            .static_clusters
            .iter()
            .map(|c| ClusterEntry {
                id: c.id,
                goal: c.goal.id(),
                scale: c.scale,
                state: c.state,
                records: c.records.iter().map(RecordEntry::from).collect(),
            })
            .collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    for (id, img) in ds.blobs.iter().enumerate() {
        fs::write(blob_path(dir, id as u64), img.encode())?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let raw = fs::read(dir.join("manifest.json"))?;
    let probe: serde_json::Value = serde_json::from_slice(&raw)?;
    let version = probe.get("version").and_then(|v| v.as_u64()).ok_or_else(|| Error::Format("manifest has no version".into()))?;
    if version != MANIFEST_VERSION as u64 {
        return Err(Error::Version {
            found: version as u32,
            expected: MANIFEST_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(probe)?;

    let mut trajectories = Vec::with_capacity(manifest.trajectories.len());
    let mut max_blob: Option<u64> = None;
    let mut note = |b: u64| max_blob = Some(max_blob.map_or(b, |m: u64| m.max(b)));
    for t in manifest.trajectories {
        if t.states.len() != t.actions.len() + 1 {
            return Err(Error::Format(format!("trajectory {}: {} states for {} actions", t.id, t.states.len(), t.actions.len())));
        }
        if t.records.len() != t.actions.len() * t.views {
            return Err(Error::Format(format!("trajectory {}: record count mismatch", t.id)));
        }
        let mut records = t.records.into_iter();
        let mut steps = Vec::with_capacity(t.actions.len());
        for (state, action) in t.states.iter().zip(&t.actions) {
            let observations = records
                .by_ref()
                .take(t.views)
                .map(|r| {
                    note(r.blob);
                    r.into_record()
                })
                .collect::<Result<Vec<_>>>()?;
            steps.push(DemoStep {
                state: *state,
                action: Action(*action),
                observations,
            });
        }
        trajectories.push(DemoTrajectory {
            id: t.id,
            goal: goal_from(t.goal)?,
            steps,
            final_state: *t.states.last().unwrap(),
            scale: t.scale,
        });
    }
    let mut static_clusters = Vec::with_capacity(manifest.static_clusters.len());
    for c in manifest.static_clusters {
        let records = c
            .records
            .into_iter()
            .map(|r| {
                note(r.blob);
                r.into_record()
            })
            .collect::<Result<Vec<_>>>()?;
        static_clusters.push(StaticCluster {
            id: c.id,
            goal: goal_from(c.goal)?,
            state: c.state,
            records,
            scale: c.scale,
        });
    }

    let n_blobs = max_blob.map_or(0, |m| m + 1);
    let mut blobs = Vec::with_capacity(n_blobs as usize);
    for id in 0..n_blobs {
        let path = blob_path(dir, id);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingBlob(id),
            _ => Error::Io(e),
        })?;
        let img = Image::decode(&bytes).map_err(|reason| Error::CorruptBlob { id, reason })?;
        if (img.width, img.height) != (manifest.image_width, manifest.image_height) {
            return Err(Error::CorruptBlob {
                id,
                reason: format!("image is {}x{}, manifest says {}x{}", img.width, img.height, manifest.image_width, manifest.image_height),
            });
        }
        blobs.push(img);
    }
    Ok(Dataset {
        image_width: manifest.image_width,
        image_height: manifest.image_height,
        trajectories,
        static_clusters,
        blobs,
    })
}

/// Consistency audit of a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct InspectReport {
    pub trajectories: usize,
    pub static_clusters: usize,
    pub records: usize,
    pub blobs: usize,
    pub max_replay_error: f64,
    pub max_bbox_error: f64,
    /// Records whose stored image differs from a fresh render.
    pub render_mismatches: Vec<u64>,
    pub scales: Vec<f64>,
    pub problems: Vec<String>,
}

impl InspectReport {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

pub fn inspect(ds: &Dataset) -> InspectReport {
    let mut rep = InspectReport {
        trajectories: ds.trajectories.len(),
        static_clusters: ds.static_clusters.len(),
        records: ds.num_records(),
        blobs: ds.blobs.len(),
        ..Default::default()
    };
    let check = |state: &SceneState, rec: &ObservationRecord, rep: &mut InspectReport| {
        let fresh = ground_truth_bboxes(state, &rec.config);
        if fresh.visible != rec.bbox.visible {
            rep.max_bbox_error = f64::INFINITY;
        } else {
            let e = fresh.boxes.iter().zip(&rec.bbox.boxes).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            rep.max_bbox_error = rep.max_bbox_error.max(e);
        }
        match (ds.image(rec.blob), render(state, &rec.config)) {
            (Ok(stored), Ok(img)) if *stored == img => {}
            _ => rep.render_mismatches.push(rec.blob),
        }
    };
    for t in &ds.trajectories {
        match t.replay_error() {
            Ok(e) => rep.max_replay_error = rep.max_replay_error.max(e),
            Err(e) => rep.problems.push(format!("trajectory {}: {e}", t.id)),
        }
        for s in &t.steps {
            for r in &s.observations {
                check(&s.state, r, &mut rep);
            }
        }
        rep.scales.extend(t.scale);
    }
    for c in &ds.static_clusters {
        for r in &c.records {
            check(&c.state, r, &mut rep);
        }
        rep.scales.extend(c.scale);
    }
    if rep.max_replay_error > 1e-9 {
        rep.problems.push(format!("replay deviates by {:.3e}", rep.max_replay_error));
    }
    if rep.max_bbox_error > 1e-9 {
        rep.problems.push(format!("bounding boxes deviate by {:.3e}", rep.max_bbox_error));
    }
    for b in &rep.render_mismatches {
        rep.problems.push(format!("blob {b} does not match its stored state and config"));
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small_demos(n: usize, views: usize) -> Dataset {
        let cfg = DemoConfig {
            n_trajectories: n,
            views_per_step: views,
            image_width: 16,
            image_height: 16,
            ..Default::default()
        };
        collect_demos(&mut stream(1), &cfg).unwrap()
    }

    #[test]
    fn single_view_single_trajectory() {
        let ds = small_demos(1, 1);
        assert_eq!(ds.trajectories.len(), 1);
        assert!(ds.trajectories[0].steps.iter().all(|s| s.observations.len() == 1));
        assert_eq!(ds.trajectories[0].scale, None);
    }

    #[test]
    fn camera_sets_change_every_ten() {
        let ds = small_demos(20, 10);
        let mut sets: Vec<Vec<[f64; 16]>> = ds
            .trajectories
            .iter()
            .map(|t| t.steps[0].observations.iter().map(|r| r.config.camera.extrinsics.to_matrix16()).collect())
            .collect();
        sets.dedup();
        assert_eq!(sets.len(), 2);
    }

    #[test]
    fn replay_reproduces_final_state() {
        let ds = small_demos(3, 2);
        for t in &ds.trajectories {
            assert_eq!(t.replay_error().unwrap(), 0.0);
            assert!(is_success(&t.final_state, t.goal));
        }
    }

    #[test]
    fn static_clusters_share_state() {
        let cfg = StaticConfig {
            n_scenes: 4,
            views_per_state: 10,
            image_width: 16,
            image_height: 16,
            ..Default::default()
        };
        let ds = collect_static(&mut stream(2), &cfg).unwrap();
        for c in &ds.static_clusters {
            assert_eq!(c.records.len(), 10);
            for r in &c.records {
                assert_eq!(r.scene_id, c.id);
                assert_eq!(ground_truth_bboxes(&c.state, &r.config), r.bbox);
            }
        }
        assert!(matches!(
            collect_static(&mut stream(2), &StaticConfig { n_scenes: 0, ..cfg.clone() }),
            Err(Error::InvalidInput(_))
        ));
        assert!(collect_static(&mut stream(2), &StaticConfig { views_per_state: 1, ..cfg }).is_err());
    }

    fn di(id: u64, t: usize) -> PairIndex {
        PairIndex { kind: DatasetKind::Demo, id, timestep: t }
    }

    fn si(id: u64) -> PairIndex {
        PairIndex { kind: DatasetKind::Static, id, timestep: 0 }
    }

    #[test]
    fn pair_rule_examples() {
        assert_eq!(classify_pair(&di(0, 1), &di(0, 2), 3).unwrap(), PairLabel::DemoPositive);
        assert_eq!(classify_pair(&di(0, 0), &di(0, 4), 3).unwrap(), PairLabel::DemoNegative);
        assert_eq!(classify_pair(&di(0, 0), &di(1, 0), 3).unwrap(), PairLabel::DemoNegative);
        assert_eq!(classify_pair(&si(0), &si(0), 3).unwrap(), PairLabel::StaticPositive);
        assert_eq!(classify_pair(&si(0), &si(1), 3).unwrap(), PairLabel::StaticNegative);
        assert!(matches!(classify_pair(&di(0, 0), &si(0), 3), Err(Error::CrossKind)));
    }

    #[test]
    fn pair_rule_symmetric_and_reflexive() {
        for eps in 1..6 {
            for a in 0..3u64 {
                for i in 0..6 {
                    assert!(classify_pair(&di(a, i), &di(a, i), eps).unwrap().is_positive());
                    for b in 0..3u64 {
                        for j in 0..6 {
                            assert_eq!(
                                classify_pair(&di(a, i), &di(b, j), eps).unwrap(),
                                classify_pair(&di(b, j), &di(a, i), eps).unwrap()
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn action_chunk_pads_with_hold() {
        let ds = small_demos(1, 1);
        let t = &ds.trajectories[0];
        let n = t.len();
        let chunk = action_chunk(t, n - 2);
        assert_eq!(&chunk[..7], &t.steps[n - 2].action.0);
        assert_eq!(&chunk[7..14], &t.steps[n - 1].action.0);
        for h in 2..HORIZON {
            let a = &chunk[h * 7..(h + 1) * 7];
            assert_eq!(&a[..6], &[0.0; 6]);
            assert_eq!(a[6], t.steps[n - 1].action.gripper());
        }
    }

    #[test]
    fn missing_sources_are_reported() {
        let ds = small_demos(2, 1);
        let s = Sampler::new(&ds, SamplerConfig::default()).unwrap();
        let mut rng = stream(3);
        assert!(matches!(
            s.sample(Needs { ext: true, ..Needs { bc: false, align: false, ext: false, bbox: false } }, &mut rng),
            Err(Error::EmptySource(_))
        ));
        let empty = Dataset::default();
        let s = Sampler::new(&empty, SamplerConfig::default()).unwrap();
        assert!(matches!(s.sample(Needs::all(), &mut rng), Err(Error::EmptySource(_))));
    }
}
