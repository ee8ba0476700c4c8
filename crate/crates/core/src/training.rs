//! The co-training loop: Adam, method variants, metrics and checkpoints
//! with exact resume.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Needs, Sampler, SamplerConfig};
use crate::error::{Error, Result};
use crate::losses::{LossReport, LossWeights, Objective, CSV_HEADER};
use crate::model::{archive, forward_losses, init_params, ModelConfig, ModelParams, NoiseSchedule};
use crate::rng::{substream, train_seed, RandomStream, StreamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    BcOnly,
    NoAux,
    AuxOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::BcOnly, Variant::NoAux, Variant::AuxOnly];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::BcOnly => "bc",
            Variant::NoAux => "noaux",
            Variant::AuxOnly => "auxonly",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Term weights after masking: BcOnly drops every auxiliary term,
    /// NoAux keeps alignment only, AuxOnly drops behavior cloning.
    pub fn objective(&self, w: &LossWeights) -> Objective {
        let mut o = Objective::from_weights(w);
        match self {
            Variant::Full => {}
            Variant::BcOnly => {
                o.pos = 0.0;
                o.neg = 0.0;
                o.ext = 0.0;
                o.bbox = 0.0;
            }
            Variant::NoAux => {
                o.ext = 0.0;
                o.bbox = 0.0;
            }
            Variant::AuxOnly => o.bc = 0.0,
        }
        o
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
    pub sampler: SamplerConfig,
    pub variant: Variant,
    pub model: ModelConfig,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            steps: 5000,
            adam: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            sampler: SamplerConfig::default(),
            variant: Variant::Full,
            model: ModelConfig::default(),
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidInput("steps must be at least 1".into()));
        }
        self.weights.validate()?;
        self.sampler.validate()?;
        self.model.validate()
    }

    pub fn objective(&self) -> Objective {
        self.variant.objective(&self.weights)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of a flat parameter slice; `t` is the
/// 1-based step count.
pub fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let g = grads.tensors();
    if let Some((name, _)) = g.iter().find(|(_, t)| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::NumericFailure {
            term: format!("gradient of {name}"),
        });
    }
    state.t += 1;
    let t = state.t;
    let ps = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in ps.into_iter().zip(&g).zip(ms).zip(vs) {
        adam_update(p.1, g.1, m.1, v.1, t, lr, cfg);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    pub step: usize,
    pub config: TrainConfig,
    pub rng: StreamState,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    step: usize,
    adam_t: u64,
    config: TrainConfig,
    rng: StreamState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_value(CheckpointHeader {
            kind: "train".into(),
            step: self.step,
            adam_t: self.adam.t,
            config: self.config.clone(),
            rng: self.rng.clone(),
        })
        .expect("checkpoint header serializes");
        let shapes = self.params.shapes();
        let mut tensors = Vec::new();
        for (prefix, p) in [("", &self.params), ("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for ((name, data), (_, shape)) in p.tensors().into_iter().zip(&shapes) {
                tensors.push(archive::TensorRef {
                    name: format!("{prefix}{name}"),
                    shape: shape.clone(),
                    data,
                });
            }
        }
        archive::encode(&header, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = archive::decode(bytes)?;
        let h: CheckpointHeader = serde_json::from_value(header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if h.kind != "train" {
            return Err(Error::Format(format!("expected a training checkpoint, found '{}'", h.kind)));
        }
        let model = &h.config.model;
        let pick = |prefix: &str| {
            ModelParams::from_tensors(
                model,
                tensors
                    .iter()
                    .filter_map(move |t| t.name.strip_prefix(prefix).filter(|n| !n.starts_with("adam.")).map(|n| (n, t.shape.as_slice(), t.data.as_slice()))),
            )
        };
        Ok(Self {
            params: pick("")?,
            adam: AdamState {
                m: pick("adam.m.")?,
                v: pick("adam.v.")?,
                t: h.adam_t,
            },
            step: h.step,
            config: h.config,
            rng: h.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub const METRICS_HEADER_SUFFIX: &str = ",lr";

pub fn metrics_header() -> String {
    format!("{CSV_HEADER}{METRICS_HEADER_SUFFIX}")
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub step: usize,
    rng: RandomStream,
    sampler: Sampler<'a>,
    schedule: NoiseSchedule,
    objective: Objective,
    needs: Needs,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(train_seed(config.seed), &config.model)?;
        let rng = substream(train_seed(config.seed), 1);
        let adam = AdamState::new(&params);
        Self::assemble(data, config, params, adam, 0, rng)
    }

    /// Continues from a checkpoint. The model shape must match; every
    /// other setting may change.
    pub fn resume(data: &'a Dataset, ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.model != ckpt.config.model {
            return Err(Error::Resume("model configuration differs from the checkpoint".into()));
        }
        let rng = ckpt.rng.restore().ok_or_else(|| Error::Resume("checkpoint random state is unreadable".into()))?;
        Self::assemble(data, config, ckpt.params, ckpt.adam, ckpt.step, rng)
    }

    fn assemble(data: &'a Dataset, config: TrainConfig, params: ModelParams, adam: AdamState, step: usize, rng: RandomStream) -> Result<Self> {
        if (data.image_width, data.image_height) != (config.model.image_width, config.model.image_height) {
            return Err(Error::Shape(format!(
                "dataset images are {}x{}, model expects {}x{}",
                data.image_width, data.image_height, config.model.image_width, config.model.image_height
            )));
        }
        let objective = config.objective();
        let needs = Needs::from_objective(&objective);
        if (needs.align || needs.ext) && data.static_clusters.is_empty() {
            log::warn!("no static clusters: alignment and extrinsics pairs come from demonstrations only");
        }
        Ok(Self {
            sampler: Sampler::new(data, config.sampler)?,
            schedule: config.model.schedule()?,
            objective,
            needs,
            params,
            adam,
            step,
            rng,
            config,
        })
    }

    pub fn step_once(&mut self) -> Result<LossReport> {
        let batch = self.sampler.sample(self.needs, &mut self.rng)?;
        let (report, grads) = forward_losses(&self.params, &self.schedule, &batch, &self.objective, &mut self.rng)?;
        let mut params = self.params.clone();
        let mut adam = self.adam.clone();
        adam_step(&mut params, &grads, &mut adam, self.config.learning_rate, &self.config.adam)?;
        if !params.is_finite() {
            return Err(Error::NumericFailure { term: "parameters".into() });
        }
        self.params = params;
        self.adam = adam;
        self.step += 1;
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
            config: self.config.clone(),
            rng: StreamState::capture(&self.rng),
        }
    }
}

/// Where [`train`] writes its outputs; every field is optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// `(step, report)` for every step taken in this run.
    pub metrics: Vec<(usize, LossReport)>,
}

/// Trains until `trainer.config.steps` total steps. Checkpoints are
/// written every `checkpoint_every` steps and at the end; on a numeric
/// failure the last written checkpoint is left in place.
pub fn run(mut trainer: Trainer, outputs: &TrainOutputs) -> Result<TrainRun> {
    let mut metrics_file = match &outputs.metrics {
        Some(p) => {
            let append = trainer.step > 0 && p.exists();
            let f = std::fs::OpenOptions::new().create(true).append(append).write(true).truncate(!append).open(p)?;
            let mut w = BufWriter::new(f);
            if !append {
                writeln!(w, "{}", metrics_header())?;
            }
            Some(w)
        }
        None => None,
    };
    let mut metrics = Vec::new();
    while trainer.step < trainer.config.steps {
        let report = trainer.step_once()?;
        let step = trainer.step;
        if let Some(w) = metrics_file.as_mut() {
            writeln!(w, "{},{}", report.csv_row(step), trainer.config.learning_rate)?;
        }
        if step % 100 == 0 {
            log::info!("step {step}: l_total {:.5} (l_bc {:.5})", report.l_total, report.l_bc);
        }
        metrics.push((step, report));
        if let Some(p) = &outputs.checkpoint {
            if trainer.config.checkpoint_every > 0 && step % trainer.config.checkpoint_every == 0 {
                if let Some(w) = metrics_file.as_mut() {
                    w.flush()?;
                }
                trainer.checkpoint().save(p)?;
            }
        }
    }
    if let Some(mut w) = metrics_file {
        w.flush()?;
    }
    let checkpoint = trainer.checkpoint();
    if let Some(p) = &outputs.checkpoint {
        checkpoint.save(p)?;
    }
    Ok(TrainRun { checkpoint, metrics })
}

pub fn train(data: &Dataset, config: TrainConfig, outputs: &TrainOutputs) -> Result<TrainRun> {
    run(Trainer::new(data, config)?, outputs)
}

pub fn write_metrics(path: &Path, metrics: &[(usize, LossReport)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CSV_HEADER}")?;
    for (s, r) in metrics {
        writeln!(w, "{}", r.csv_row(*s))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = AdamConfig::default();
        let mut p = [1.0, -2.0];
        let (mut m, mut v) = ([0.5, 0.5], [0.1, 0.1]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 1e-3, &cfg);
        assert_eq!(p[0], 1.0 - 1e-3 * (0.45 / 0.1) / ((0.0999 / 0.001f64).sqrt() + 1e-8));
        let mut p = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut p, &[0.0], &mut m, &mut v, 1, 1e-3, &cfg);
        assert_eq!(p, [1.0]);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let cfg = AdamConfig::default();
        for g in [1e-3, 0.3, -50.0] {
            let mut p = [0.0];
            let (mut m, mut v) = ([0.0], [0.0]);
            adam_update(&mut p, &[g], &mut m, &mut v, 1, 1e-2, &cfg);
            assert!((p[0] + 1e-2 * g.signum()).abs() < 1e-7, "{g}: {}", p[0]);
        }
    }

    #[test]
    fn variants_mask_terms() {
        let w = LossWeights::default();
        assert_eq!(Variant::BcOnly.objective(&w).ext, 0.0);
        assert_eq!(Variant::NoAux.objective(&w).pos, 1.0);
        assert_eq!(Variant::NoAux.objective(&w).bbox, 0.0);
        assert_eq!(Variant::AuxOnly.objective(&w).bc, 0.0);
        assert_eq!(Variant::parse("noaux"), Some(Variant::NoAux));
        assert_eq!(Variant::parse("dino"), None);
    }
}
