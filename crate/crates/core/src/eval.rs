//! Closed-loop evaluation under viewpoint, lighting and clutter
//! perturbations, the nearest-neighbor retrieval diagnostic, and the
//! dataset scale/diversity grid.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{collect_demos, collect_static, Dataset, DemoConfig, StaticConfig};
use crate::error::{Error, Result};
use crate::geometry::{rotate_azimuth, sample_camera, Camera, PerturbationRegime};
use crate::model::diffusion::sample_chunks;
use crate::model::{HeadKind, ModelParams, NoiseSchedule};
use crate::rng::{eval_seed, stream, substream, RandomStream};
use crate::training::{train, TrainConfig, TrainOutputs};
use crate::world::{
    expert_action, is_success, nominal_camera, render, sample_scene, step, Action, ClutterSet, Goal, Image, LightingParams,
    ObservationConfig, SceneState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LightingMode {
    Nominal,
    Randomized,
}

impl LightingMode {
    pub fn name(&self) -> &'static str {
        match self {
            LightingMode::Nominal => "nominal",
            LightingMode::Randomized => "randomized",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCell {
    pub regime: PerturbationRegime,
    pub distractors: usize,
    pub lighting: LightingMode,
    pub handheld: bool,
}

impl EvalCell {
    pub fn nominal() -> Self {
        Self {
            regime: PerturbationRegime::Nominal,
            distractors: 0,
            lighting: LightingMode::Nominal,
            handheld: false,
        }
    }

    pub fn viewpoint(regime: PerturbationRegime) -> Self {
        Self { regime, ..Self::nominal() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub cells: Vec<EvalCell>,
    pub episodes: usize,
    pub max_steps: usize,
    /// Reverse chains averaged per action.
    pub samples: usize,
    pub image_width: u32,
    pub image_height: u32,
}

pub const MAX_HANDHELD_DRIFT: f64 = 10.0 * std::f64::consts::PI / 180.0;
pub const SUITES: [&str; 5] = ["default", "perspective", "distractor", "lighting", "handheld"];

impl EvalSuite {
    pub fn new(cells: Vec<EvalCell>, image_width: u32, image_height: u32) -> Self {
        Self {
            cells,
            episodes: 50,
            max_steps: 120,
            samples: 4,
            image_width,
            image_height,
        }
    }

    /// Named suites; each starts with the nominal cell.
    pub fn named(name: &str, image_width: u32, image_height: u32) -> Result<Self> {
        use PerturbationRegime::*;
        let nominal = EvalCell::nominal();
        let cells = match name {
            "default" => vec![
                nominal,
                EvalCell::viewpoint(UniformHemisphere),
                EvalCell { distractors: 3, ..nominal },
                EvalCell {
                    lighting: LightingMode::Randomized,
                    ..nominal
                },
            ],
            "perspective" => PerturbationRegime::ALL.iter().map(|&r| EvalCell::viewpoint(r)).collect(),
            "distractor" => [0, 1, 3, 5].iter().map(|&d| EvalCell { distractors: d, ..nominal }).collect(),
            "lighting" => vec![
                nominal,
                EvalCell {
                    lighting: LightingMode::Randomized,
                    ..nominal
                },
            ],
            "handheld" => vec![
                nominal,
                EvalCell { handheld: true, ..nominal },
                EvalCell {
                    handheld: true,
                    ..EvalCell::viewpoint(UniformHemisphere)
                },
            ],
            other => return Err(Error::Usage(format!("unknown suite '{other}' (expected one of {})", SUITES.join(", ")))),
        };
        Ok(Self::new(cells, image_width, image_height))
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() || self.episodes == 0 || self.max_steps == 0 || self.samples == 0 {
            return Err(Error::InvalidInput("suite needs cells, episodes, steps and samples".into()));
        }
        Ok(())
    }
}

/// What a policy sees at one control step. Learned policies use the
/// image, proprioception and goal; the expert reads the state directly.
pub struct PolicyInput<'a> {
    pub image: &'a Image,
    pub state: &'a SceneState,
    pub goal: Goal,
}

pub trait Policy {
    /// One action per input.
    fn act(&self, inputs: &[PolicyInput], rng: &mut RandomStream) -> Result<Vec<Action>>;
}

pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn act(&self, inputs: &[PolicyInput], rng: &mut RandomStream) -> Result<Vec<Action>> {
        Ok(inputs.iter().map(|i| expert_action(i.state, i.goal, rng)).collect())
    }
}

pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn act(&self, inputs: &[PolicyInput], _: &mut RandomStream) -> Result<Vec<Action>> {
        Ok(vec![Action::zero(); inputs.len()])
    }
}

/// Encoder, conditioner and diffusion head; executes the first action of
/// each sampled chunk.
pub struct LearnedPolicy<'a> {
    pub params: &'a ModelParams,
    pub schedule: NoiseSchedule,
    pub samples: usize,
}

impl<'a> LearnedPolicy<'a> {
    pub fn new(params: &'a ModelParams, samples: usize) -> Result<Self> {
        Ok(Self {
            params,
            schedule: params.config.schedule()?,
            samples,
        })
    }
}

impl Policy for LearnedPolicy<'_> {
    fn act(&self, inputs: &[PolicyInput], rng: &mut RandomStream) -> Result<Vec<Action>> {
        let imgs: Vec<(&Image, Goal)> = inputs.iter().map(|i| (i.image, i.goal)).collect();
        let emb = self.params.encode_batch(&imgs)?;
        let proprio: Vec<_> = inputs.iter().map(|i| i.state.proprio()).collect();
        let goals: Vec<Goal> = inputs.iter().map(|i| i.goal).collect();
        let cond = self.params.condition_batch(emb.view(), &proprio, &goals);
        let chunks = sample_chunks(self.params, &self.schedule, cond.view(), self.samples, rng)?;
        Ok(chunks
            .rows()
            .into_iter()
            .map(|r| {
                let mut a = [0.0; 7];
                a.copy_from_slice(&r.as_slice().unwrap()[..7]);
                Action(a).clipped()
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps: usize,
}

struct Episode {
    state: SceneState,
    goal: Goal,
    config: ObservationConfig,
    rng: RandomStream,
    done: Option<EpisodeOutcome>,
}

fn start_episode(cell: &EvalCell, suite: &EvalSuite, mut rng: RandomStream) -> Episode {
    let base = nominal_camera(suite.image_width, suite.image_height);
    let scene = sample_scene(&mut rng, cell.distractors);
    let camera: Camera = sample_camera(&mut rng, cell.regime, &base);
    let lighting = match cell.lighting {
        LightingMode::Nominal => LightingParams::nominal(),
        LightingMode::Randomized => LightingParams::sample(&mut rng),
    };
    let clutter: ClutterSet = scene.clutter.clone();
    Episode {
        state: scene.state,
        goal: scene.goal,
        config: ObservationConfig { camera, lighting, clutter },
        rng,
        done: None,
    }
}

/// Runs the given episodes of one cell in lockstep so the policy sees
/// them as a batch. Episode `i` draws its scene from its own stream;
/// policy sampling noise comes from `policy_rng`.
pub fn run_episodes(policy: &dyn Policy, cell: &EvalCell, suite: &EvalSuite, streams: Vec<RandomStream>, policy_rng: &mut RandomStream) -> Result<Vec<EpisodeOutcome>> {
    let mut eps: Vec<Episode> = streams.into_iter().map(|r| start_episode(cell, suite, r)).collect();
    for t in 0..suite.max_steps {
        let live: Vec<usize> = (0..eps.len()).filter(|&i| eps[i].done.is_none()).collect();
        if live.is_empty() {
            break;
        }
        if cell.handheld && t > 0 {
            for &i in &live {
                let e = &mut eps[i];
                let drift = e.rng.random_range(-MAX_HANDHELD_DRIFT..=MAX_HANDHELD_DRIFT);
                e.config.camera = rotate_azimuth(&e.config.camera, drift);
            }
        }
        let images = live.iter().map(|&i| render(&eps[i].state, &eps[i].config)).collect::<Result<Vec<_>>>()?;
        let inputs: Vec<PolicyInput> = live
            .iter()
            .zip(&images)
            .map(|(&i, img)| PolicyInput {
                image: img,
                state: &eps[i].state,
                goal: eps[i].goal,
            })
            .collect();
        let actions = policy.act(&inputs, policy_rng)?;
        for (&i, a) in live.iter().zip(actions) {
            let e = &mut eps[i];
            e.state = step(&e.state, &a)?;
            if is_success(&e.state, e.goal) {
                e.done = Some(EpisodeOutcome { success: true, steps: t + 1 });
            }
        }
    }
    Ok(eps
        .into_iter()
        .map(|e| {
            e.done.unwrap_or(EpisodeOutcome {
                success: false,
                steps: suite.max_steps,
            })
        })
        .collect())
}

/// A single episode of `cell`.
pub fn rollout(policy: &dyn Policy, cell: &EvalCell, suite: &EvalSuite, rng: &mut RandomStream) -> Result<EpisodeOutcome> {
    let episode_rng = substream(rng.random(), 0);
    Ok(run_episodes(policy, cell, suite, vec![episode_rng], rng)?[0])
}

/// Two-sided 95% Wilson score interval.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let denom = 1.0 + z * z / n_f;
    let center = (p + z * z / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z * z / (4.0 * n_f * n_f)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub cell: EvalCell,
    pub episodes: usize,
    pub successes: usize,
    pub success: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_len: f64,
    pub outcomes: Vec<EpisodeOutcome>,
}

impl CellResult {
    pub fn from_outcomes(cell: EvalCell, outcomes: Vec<EpisodeOutcome>) -> Self {
        let n = outcomes.len();
        let successes = outcomes.iter().filter(|o| o.success).count();
        let (ci_low, ci_high) = wilson_interval(successes, n);
        Self {
            cell,
            episodes: n,
            successes,
            success: successes as f64 / n.max(1) as f64,
            ci_low,
            ci_high,
            mean_len: outcomes.iter().map(|o| o.steps as f64).sum::<f64>() / n.max(1) as f64,
            outcomes,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.3}",
            self.cell.regime.name(),
            self.cell.distractors,
            self.cell.lighting.name(),
            self.cell.handheld,
            self.episodes,
            self.success,
            self.ci_low,
            self.ci_high,
            self.mean_len
        )
    }
}

pub const EVAL_CSV_HEADER: &str = "regime,distractors,lighting,handheld,episodes,success,ci_low,ci_high,mean_len";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub cells: Vec<CellResult>,
}

impl EvalResult {
    /// Unweighted mean of per-cell success rates.
    pub fn mean_success(&self) -> f64 {
        self.cells.iter().map(|c| c.success).sum::<f64>() / self.cells.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVAL_CSV_HEADER}\n");
        for c in &self.cells {
            let _ = writeln!(s, "{}", c.csv_row());
        }
        s
    }
}

/// Evaluates every cell of the suite. Scenes come from the odd
/// (evaluation) seed partition.
pub fn evaluate(policy: &dyn Policy, suite: &EvalSuite, seed: u64) -> Result<EvalResult> {
    suite.validate()?;
    let base = eval_seed(seed);
    let mut cells = Vec::with_capacity(suite.cells.len());
    for (ci, cell) in suite.cells.iter().enumerate() {
        let streams = (0..suite.episodes).map(|e| substream(base, (ci * 1_000_000 + e) as u64)).collect();
        let mut policy_rng = substream(base, (ci * 1_000_000 + 999_999) as u64);
        let outcomes = run_episodes(policy, cell, suite, streams, &mut policy_rng)?;
        cells.push(CellResult::from_outcomes(*cell, outcomes));
    }
    Ok(EvalResult { cells })
}

// ---------------------------------------------------------------------------
// Nearest-neighbor retrieval

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PoolResult {
    pub accuracy: f64,
    pub queries: usize,
    pub correct: usize,
    /// Queries (or clusters) without any eligible candidate.
    pub skipped: usize,
}

impl PoolResult {
    fn finish(mut self) -> Self {
        self.accuracy = if self.queries == 0 { 0.0 } else { self.correct as f64 / self.queries as f64 };
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetrievalReport {
    /// Candidates: other views of the query's own trajectory; correct when
    /// the neighbor's timestep is within `epsilon`.
    pub same_trajectory: PoolResult,
    /// Candidates: every view of every other trajectory; correct when the
    /// neighbor's state is within `state_threshold`.
    pub cross_trajectory: PoolResult,
    /// Candidates: every other static record; correct when the neighbor
    /// belongs to the query's cluster.
    pub static_clusters: PoolResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub epsilon: usize,
    pub state_threshold: f64,
    /// Use every `query_stride`-th timestep as a query.
    pub query_stride: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            epsilon: 3,
            state_threshold: 0.1,
            query_stride: 1,
        }
    }
}

/// Maps records to the space neighbors are searched in.
pub trait Embedder {
    fn embed(&self, inputs: &[(&Image, Goal)]) -> Result<Array2<f64>>;
}

/// Alignment-head outputs of the encoder.
pub struct HeadEmbedder<'a>(pub &'a ModelParams);

impl Embedder for HeadEmbedder<'_> {
    fn embed(&self, inputs: &[(&Image, Goal)]) -> Result<Array2<f64>> {
        let mut rows = Vec::new();
        for chunk in inputs.chunks(256) {
            let e = self.0.encode_batch(chunk)?;
            rows.push(self.0.apply_head_batch(HeadKind::Align, e.view())?);
        }
        let views: Vec<ArrayView2<f64>> = rows.iter().map(|r| r.view()).collect();
        Ok(ndarray::concatenate(ndarray::Axis(0), &views).unwrap_or_else(|_| Array2::zeros((0, 0))))
    }
}

/// Raw pixels scaled to `[0, 1]`.
pub struct PixelEmbedder;

impl Embedder for PixelEmbedder {
    fn embed(&self, inputs: &[(&Image, Goal)]) -> Result<Array2<f64>> {
        let d = inputs.first().map_or(0, |(i, _)| i.data.len());
        Ok(Array2::from_shape_fn((inputs.len(), d), |(r, c)| inputs[r].0.data[c] as f64 / 255.0))
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(emb: &Array2<f64>, query: usize, candidates: &[usize]) -> Option<usize> {
    let q = emb.row(query);
    candidates
        .iter()
        .copied()
        .map(|c| (c, sq_dist(q, emb.row(c))))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(c, _)| c)
}

struct DemoEntry {
    traj: usize,
    t: usize,
    view: usize,
    state: SceneState,
}

pub fn nn_diagnostic(embedder: &dyn Embedder, statics: &Dataset, demos: &Dataset, cfg: &RetrievalConfig) -> Result<RetrievalReport> {
    let mut entries = Vec::new();
    let mut inputs: Vec<(&Image, Goal)> = Vec::new();
    for (ti, t) in demos.trajectories.iter().enumerate() {
        for (si, s) in t.steps.iter().enumerate() {
            for r in &s.observations {
                entries.push(DemoEntry {
                    traj: ti,
                    t: si,
                    view: r.view,
                    state: s.state,
                });
                inputs.push((demos.image(r.blob)?, t.goal));
            }
        }
    }
    let emb = embedder.embed(&inputs)?;
    let stride = cfg.query_stride.max(1);

    let by_traj: Vec<Vec<usize>> = (0..demos.trajectories.len()).map(|ti| (0..entries.len()).filter(|&i| entries[i].traj == ti).collect()).collect();
    let outcomes: Vec<(Option<bool>, Option<bool>)> = (0..entries.len())
        .into_par_iter()
        .filter(|&qi| entries[qi].t % stride == 0)
        .map(|qi| {
            let q = &entries[qi];
            let own: Vec<usize> = by_traj[q.traj].iter().copied().filter(|&i| entries[i].view != q.view).collect();
            let same = nearest(&emb, qi, &own).map(|n| entries[n].t.abs_diff(q.t) < cfg.epsilon);
            let others: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].traj != q.traj).collect();
            let close = |i: usize| entries[i].state.distance(&q.state) < cfg.state_threshold;
            let cross = if others.iter().any(|&i| close(i)) { nearest(&emb, qi, &others).map(close) } else { None };
            (same, cross)
        })
        .collect();
    let tally = |pick: fn(&(Option<bool>, Option<bool>)) -> Option<bool>| {
        let mut r = PoolResult::default();
        for o in &outcomes {
            match pick(o) {
                Some(ok) => {
                    r.queries += 1;
                    r.correct += ok as usize;
                }
                None => r.skipped += 1,
            }
        }
        r
    };
    let same = tally(|o| o.0);
    let cross = tally(|o| o.1);

    let mut stat = PoolResult::default();
    let mut s_inputs = Vec::new();
    let mut s_cluster = Vec::new();
    for (ci, c) in statics.static_clusters.iter().enumerate() {
        if c.records.len() < 2 {
            stat.skipped += 1;
            continue;
        }
        for r in &c.records {
            s_inputs.push((statics.image(r.blob)?, c.goal));
            s_cluster.push(ci);
        }
    }
    if !s_inputs.is_empty() {
        let semb = embedder.embed(&s_inputs)?;
        for qi in 0..s_inputs.len() {
            let cands: Vec<usize> = (0..s_inputs.len()).filter(|&i| i != qi).collect();
            if let Some(n) = nearest(&semb, qi, &cands) {
                stat.queries += 1;
                if s_cluster[n] == s_cluster[qi] {
                    stat.correct += 1;
                }
            }
        }
    }
    Ok(RetrievalReport {
        same_trajectory: same.finish(),
        cross_trajectory: cross.finish(),
        static_clusters: stat.finish(),
    })
}

// ---------------------------------------------------------------------------
// Scale/diversity grid

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub scenes: Vec<usize>,
    pub views_per_state: Vec<usize>,
    pub demo: DemoConfig,
    pub statics: StaticConfig,
    pub train: TrainConfig,
    pub suite: EvalSuite,
    pub seed: u64,
}

impl AblationConfig {
    pub fn desk_scale() -> Self {
        let mut train = TrainConfig {
            steps: 3000,
            learning_rate: 1e-3,
            ..Default::default()
        };
        train.model.image_width = 32;
        train.model.image_height = 32;
        let demo = DemoConfig {
            n_trajectories: 40,
            views_per_step: 4,
            image_width: 32,
            image_height: 32,
            ..Default::default()
        };
        let statics = StaticConfig {
            image_width: 32,
            image_height: 32,
            ..Default::default()
        };
        let mut suite = EvalSuite::new(
            vec![
                EvalCell::viewpoint(PerturbationRegime::UniformHemisphere),
                EvalCell {
                    distractors: 3,
                    ..EvalCell::nominal()
                },
            ],
            32,
            32,
        );
        suite.episodes = 20;
        Self {
            scenes: vec![25, 100, 400],
            views_per_state: vec![2, 5, 10],
            demo,
            statics,
            train,
            suite,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub scenes: usize,
    pub views_per_state: usize,
    /// Records actually present in the cell's static dataset.
    pub static_records: usize,
    pub result: std::result::Result<EvalResult, String>,
}

pub const ABLATION_CSV_HEADER: &str = "scenes,views_per_state,static_records,regime,distractors,lighting,handheld,episodes,success,ci_low,ci_high,mean_len,status";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let prefix = format!("{},{},{}", r.scenes, r.views_per_state, r.static_records);
        match &r.result {
            Ok(res) => {
                for c in &res.cells {
                    let _ = writeln!(s, "{prefix},{},ok", c.csv_row());
                }
            }
            Err(e) => {
                let _ = writeln!(s, "{prefix},,,,,,,,,,error: {}", e.replace([',', '\n'], ";"));
            }
        }
    }
    s
}

/// Trains one Full model per (scenes, views) cell and evaluates it. A
/// failing cell is recorded and the grid continues.
pub fn ablation_grid(cfg: &AblationConfig, mut on_row: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let demos = collect_demos(&mut stream(crate::rng::train_seed(cfg.seed)), &cfg.demo)?;
    let mut rows = Vec::new();
    for &scenes in &cfg.scenes {
        for &views in &cfg.views_per_state {
            let cell_seed = crate::rng::train_seed(cfg.seed.wrapping_add(1 + (scenes * 1000 + views) as u64));
            let statics = StaticConfig {
                n_scenes: scenes,
                views_per_state: views,
                ..cfg.statics.clone()
            };
            let mut static_records = 0;
            let result = (|| -> Result<EvalResult> {
                let s = collect_static(&mut stream(cell_seed), &statics)?;
                static_records = s.num_records();
                let data = demos.clone().merge(s)?;
                let run = train(&data, cfg.train.clone(), &TrainOutputs::default())?;
                let policy = LearnedPolicy::new(&run.checkpoint.params, cfg.suite.samples)?;
                evaluate(&policy, &cfg.suite, cfg.seed)
            })()
            .map_err(|e| e.to_string());
            let row = AblationRow {
                scenes,
                views_per_state: views,
                static_records,
                result,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}
