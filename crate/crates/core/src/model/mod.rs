//! The trainable networks: a pixel encoder shared by three heads
//! (alignment, extrinsics, boxes) and by the policy, which is a
//! conditioner feeding a diffusion noise-prediction network over action
//! chunks.

pub mod archive;
pub mod diffusion;
pub mod grad;
pub mod mlp;

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{CHUNK_DIM, HORIZON};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::world::{Action, Goal, Image, ACTION_DIM, GOAL_DIM, PROPRIO_DIM};

pub use diffusion::{denoise_step, sample_actions, timestep_embedding, NoiseSchedule, StepCoefficients};
pub use grad::{evaluate, forward_losses, grad_check, loss_bc, BcNoise, GradCheckOptions, GradReport, TensorCheck};
pub use mlp::{Mlp, OutputActivation};

pub const ALIGN_DIM: usize = 32;
pub const EXT_DIM: usize = 12;
pub const BBOX_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_width: u32,
    pub image_height: u32,
    pub embed_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: usize,
    pub cond_hidden: usize,
    pub cond_dim: usize,
    pub denoiser_hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_width: 48,
            image_height: 48,
            embed_dim: 64,
            encoder_hidden: vec![128, 128],
            head_hidden: 64,
            cond_hidden: 128,
            cond_dim: 64,
            denoiser_hidden: vec![256, 256],
            time_embed_dim: 16,
            diffusion_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ModelConfig {
    /// Small enough for exhaustive finite differencing.
    pub fn tiny() -> Self {
        Self {
            image_width: 8,
            image_height: 8,
            embed_dim: 8,
            encoder_hidden: vec![16, 16],
            head_hidden: 8,
            cond_hidden: 16,
            cond_dim: 8,
            denoiser_hidden: vec![32],
            time_embed_dim: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.embed_dim, self.head_hidden, self.cond_hidden, self.cond_dim];
        if self.image_width == 0 || self.image_height == 0 || widths.contains(&0) {
            return Err(Error::InvalidInput("model widths and image size must be positive".into()));
        }
        if self.encoder_hidden.contains(&0) || self.denoiser_hidden.contains(&0) {
            return Err(Error::InvalidInput("hidden widths must be positive".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidInput("timestep embedding width must be even and at least 2".into()));
        }
        NoiseSchedule::new(self.diffusion_steps, self.beta_start, self.beta_end).map(|_| ())
    }

    pub fn pixel_dim(&self) -> usize {
        (self.image_width * self.image_height * 3) as usize
    }

    pub fn encoder_input_dim(&self) -> usize {
        self.pixel_dim() + GOAL_DIM
    }

    pub fn cond_input_dim(&self) -> usize {
        self.embed_dim + PROPRIO_DIM + GOAL_DIM
    }

    pub fn denoiser_input_dim(&self) -> usize {
        self.cond_dim + CHUNK_DIM + self.time_embed_dim
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.diffusion_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Align,
    Ext,
    Bbox,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "align" => Ok(HeadKind::Align),
            "ext" => Ok(HeadKind::Ext),
            "bbox" => Ok(HeadKind::Bbox),
            other => Err(Error::Usage(format!("unknown head '{other}' (expected align, ext or bbox)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Mlp,
    pub align_head: Mlp,
    pub ext_head: Mlp,
    pub bbox_head: Mlp,
    pub conditioner: Mlp,
    pub denoiser: Mlp,
}

pub fn init_params(seed: u64, config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = stream(seed);
    let c = config;
    let mut enc_dims = vec![c.encoder_input_dim()];
    enc_dims.extend(&c.encoder_hidden);
    enc_dims.push(c.embed_dim);
    let mut den_dims = vec![c.denoiser_input_dim()];
    den_dims.extend(&c.denoiser_hidden);
    den_dims.push(CHUNK_DIM);
    use OutputActivation::{Identity, Sigmoid};
    Ok(ModelParams {
        config: config.clone(),
        encoder: Mlp::new(&mut rng, &enc_dims, Identity),
        align_head: Mlp::new(&mut rng, &[c.embed_dim, c.head_hidden, ALIGN_DIM], Identity),
        ext_head: Mlp::new(&mut rng, &[c.embed_dim, c.head_hidden, EXT_DIM], Identity),
        bbox_head: Mlp::new(&mut rng, &[c.embed_dim, c.head_hidden, BBOX_DIM], Sigmoid),
        conditioner: Mlp::new(&mut rng, &[c.cond_input_dim(), c.cond_hidden, c.cond_dim], Identity),
        denoiser: Mlp::new(&mut rng, &den_dims, Identity),
    })
}

const NETWORKS: [&str; 6] = ["encoder", "align_head", "ext_head", "bbox_head", "conditioner", "denoiser"];

impl ModelParams {
    fn networks(&self) -> [&Mlp; 6] {
        [&self.encoder, &self.align_head, &self.ext_head, &self.bbox_head, &self.conditioner, &self.denoiser]
    }

    pub fn head(&self, kind: HeadKind) -> &Mlp {
        match kind {
            HeadKind::Align => &self.align_head,
            HeadKind::Ext => &self.ext_head,
            HeadKind::Bbox => &self.bbox_head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            align_head: self.align_head.zeros_like(),
            ext_head: self.ext_head.zeros_like(),
            bbox_head: self.bbox_head.zeros_like(),
            conditioner: self.conditioner.zeros_like(),
            denoiser: self.denoiser.zeros_like(),
        }
    }

    /// Every tensor, named `<network>.<layer>.<weight|bias>`, in a fixed
    /// order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, net) in NETWORKS.iter().zip(self.networks()) {
            net.visit_tensors(name, &mut out);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.encoder.visit_tensors_mut("encoder", &mut out);
        self.align_head.visit_tensors_mut("align_head", &mut out);
        self.ext_head.visit_tensors_mut("ext_head", &mut out);
        self.bbox_head.visit_tensors_mut("bbox_head", &mut out);
        self.conditioner.visit_tensors_mut("conditioner", &mut out);
        self.denoiser.visit_tensors_mut("denoiser", &mut out);
        out
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, net) in NETWORKS.iter().zip(self.networks()) {
            net.shapes(name, &mut out);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.networks().iter().map(|n| n.num_params()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, t)| t.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({ "kind": "model", "config": self.config });
        let shapes = self.shapes();
        let tensors: Vec<archive::TensorRef> = self
            .tensors()
            .into_iter()
            .zip(&shapes)
            .map(|((name, data), (_, shape))| archive::TensorRef { name, shape: shape.clone(), data })
            .collect();
        std::fs::write(path, archive::encode(&header, &tensors))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (header, tensors) = archive::decode(&bytes)?;
        let config: ModelConfig = serde_json::from_value(header.get("config").cloned().ok_or_else(|| Error::Format("checkpoint header lacks a model config".into()))?)?;
        Self::from_tensors(&config, tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice())))
    }

    /// Rebuilds parameters from named tensors; every tensor of the
    /// configuration must be present with its exact shape.
    pub fn from_tensors<'a>(config: &ModelConfig, tensors: impl Iterator<Item = (&'a str, &'a [usize], &'a [f64])>) -> Result<Self> {
        let mut params = init_params(0, config)?;
        let shapes = params.shapes();
        let mut found: std::collections::BTreeMap<&str, (&[usize], &[f64])> = Default::default();
        for (name, shape, data) in tensors {
            found.insert(name, (shape, data));
        }
        for ((name, slot), (_, shape)) in params.tensors_mut().into_iter().zip(&shapes) {
            let (s, d) = found.get(name.as_str()).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if *s != shape.as_slice() || d.len() != slot.len() {
                return Err(Error::Shape(format!("tensor {name} has shape {s:?}, expected {shape:?}")));
            }
            slot.copy_from_slice(d);
        }
        Ok(params)
    }

    /// Encoder input rows: pixels standardized per image and channel,
    /// followed by the goal one-hot.
    pub fn encoder_input(&self, inputs: &[(&Image, Goal)]) -> Result<Array2<f64>> {
        let c = &self.config;
        let dim = c.encoder_input_dim();
        let mut x = Array2::zeros((inputs.len(), dim));
        for (mut row, (img, goal)) in x.rows_mut().into_iter().zip(inputs) {
            if (img.width, img.height) != (c.image_width, c.image_height) || img.data.len() != c.pixel_dim() {
                return Err(Error::Shape(format!(
                    "image is {}x{}, encoder expects {}x{}",
                    img.width, img.height, c.image_width, c.image_height
                )));
            }
            let row = row.as_slice_mut().unwrap();
            standardize(&img.data, &mut row[..c.pixel_dim()]);
            row[c.pixel_dim()..].copy_from_slice(&goal.one_hot());
        }
        Ok(x)
    }

    pub fn encode_batch(&self, inputs: &[(&Image, Goal)]) -> Result<Array2<f64>> {
        Ok(self.encoder.infer(self.encoder_input(inputs)?.view()))
    }

    pub fn encode(&self, image: &Image, goal: Goal) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[(image, goal)])?.into_raw_vec_and_offset().0)
    }

    pub fn apply_head(&self, kind: HeadKind, embedding: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply_head_batch(kind, self.embedding_rows(&[embedding])?.view())?.into_raw_vec_and_offset().0)
    }

    pub fn apply_head_batch(&self, kind: HeadKind, embeddings: ArrayView2<f64>) -> Result<Array2<f64>> {
        if embeddings.ncols() != self.config.embed_dim {
            return Err(Error::Shape(format!("embedding has {} values, expected {}", embeddings.ncols(), self.config.embed_dim)));
        }
        Ok(self.head(kind).infer(embeddings))
    }

    fn embedding_rows(&self, rows: &[&[f64]]) -> Result<Array2<f64>> {
        let d = self.config.embed_dim;
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape(format!("embeddings must have {d} values")));
        }
        Ok(Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]))
    }

    /// Conditioner input rows: embedding ++ proprioception ++ goal.
    pub fn cond_input(&self, embeddings: ArrayView2<f64>, proprio: &[[f64; PROPRIO_DIM]], goals: &[Goal]) -> Array2<f64> {
        let e = self.config.embed_dim;
        let mut x = Array2::zeros((embeddings.nrows(), self.config.cond_input_dim()));
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().unwrap();
            for j in 0..e {
                row[j] = embeddings[[i, j]];
            }
            row[e..e + PROPRIO_DIM].copy_from_slice(&proprio[i]);
            row[e + PROPRIO_DIM..].copy_from_slice(&goals[i].one_hot());
        }
        x
    }

    pub fn condition_batch(&self, embeddings: ArrayView2<f64>, proprio: &[[f64; PROPRIO_DIM]], goals: &[Goal]) -> Array2<f64> {
        self.conditioner.infer(self.cond_input(embeddings, proprio, goals).view())
    }

    /// Image, proprioception and goal to a conditioning vector.
    pub fn condition(&self, image: &Image, proprio: &[f64; PROPRIO_DIM], goal: Goal) -> Result<Vec<f64>> {
        let e = self.encode_batch(&[(image, goal)])?;
        Ok(self.condition_batch(e.view(), &[*proprio], &[goal]).into_raw_vec_and_offset().0)
    }
}

/// Zero mean and unit variance per color channel of an interleaved RGB
/// buffer; a flat channel maps to zeros.
pub fn standardize(pixels: &[u8], out: &mut [f64]) {
    let n = (pixels.len() / 3) as f64;
    for ch in 0..3 {
        let vals = pixels.iter().skip(ch).step_by(3).map(|&p| p as f64);
        let mean = vals.clone().sum::<f64>() / n;
        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 1e-6 { 1.0 / var.sqrt() } else { 0.0 };
        for (dst, &p) in out.iter_mut().skip(ch).step_by(3).zip(pixels.iter().skip(ch).step_by(3)) {
            *dst = (p as f64 - mean) * inv;
        }
    }
}

/// Magnitude of a saturated action in the space the diffusion model works in.
pub const ACTION_SCALE: f64 = 0.25;

/// Raw actions to the space the diffusion model works in.
pub fn normalize_chunk(chunk: &[f64]) -> Vec<f64> {
    chunk.iter().enumerate().map(|(i, v)| ACTION_SCALE * v / Action::bounds(i % ACTION_DIM)).collect()
}

pub fn denormalize_chunk(chunk: &[f64]) -> Vec<f64> {
    chunk.iter().enumerate().map(|(i, v)| v * Action::bounds(i % ACTION_DIM) / ACTION_SCALE).collect()
}

/// Splits a raw chunk into clipped actions.
pub fn chunk_actions(chunk: &[f64]) -> Vec<Action> {
    (0..HORIZON)
        .map(|h| {
            let mut a = [0.0; ACTION_DIM];
            a.copy_from_slice(&chunk[h * ACTION_DIM..(h + 1) * ACTION_DIM]);
            Action(a).clipped()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig::tiny();
        let a = init_params(3, &cfg).unwrap();
        assert_eq!(a, init_params(3, &cfg).unwrap());
        assert_ne!(a, init_params(4, &cfg).unwrap());
        assert!(a.max_abs() <= 1.0);
        assert!(a.num_params() <= 50_000);
        assert_eq!(a.tensors().len(), a.shapes().len());
    }

    #[test]
    fn standardize_removes_gain_and_offset() {
        let a: Vec<u8> = (0..48).map(|i| (i * 5 % 200) as u8).collect();
        let b: Vec<u8> = a.iter().map(|&v| v / 2 + 20).collect();
        let (mut x, mut y) = (vec![0.0; 48], vec![0.0; 48]);
        standardize(&a, &mut x);
        standardize(&b, &mut y);
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 0.05);
        }
        let mut flat = vec![1.0; 12];
        standardize(&[7; 12], &mut flat);
        assert!(flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_rejects_wrong_size() {
        let p = init_params(1, &ModelConfig::tiny()).unwrap();
        assert!(matches!(p.encode(&Image::new(9, 8), Goal::ReachTarget), Err(Error::Shape(_))));
    }

    #[test]
    fn encoder_sees_pixels_and_goal() {
        let p = init_params(1, &ModelConfig::tiny()).unwrap();
        let black = Image::filled(8, 8, 0);
        let mut dot = black.clone();
        dot.data[30] = 255;
        let e0 = p.encode(&black, Goal::ReachTarget).unwrap();
        assert_eq!(e0, p.encode(&black, Goal::ReachTarget).unwrap());
        assert_ne!(e0, p.encode(&dot, Goal::ReachTarget).unwrap());
        assert_ne!(e0, p.encode(&black, Goal::PlaceInContainer).unwrap());
        assert_eq!(e0.len(), 8);
    }

    #[test]
    fn heads_have_documented_widths() {
        let p = init_params(1, &ModelConfig::tiny()).unwrap();
        let e = vec![1e3; 8];
        assert_eq!(p.apply_head(HeadKind::Align, &e).unwrap().len(), ALIGN_DIM);
        assert_eq!(p.apply_head(HeadKind::Ext, &e).unwrap().len(), EXT_DIM);
        let b = p.apply_head(HeadKind::Bbox, &e).unwrap();
        assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(HeadKind::parse("depth"), Err(Error::Usage(_))));
        assert!(p.apply_head(HeadKind::Ext, &[0.0; 3]).is_err());
    }

    #[test]
    fn save_load_is_bit_exact() {
        let p = init_params(9, &ModelConfig::tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qsck");
        p.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), p);
    }

    #[test]
    fn chunk_normalization_round_trips() {
        let raw: Vec<f64> = (0..CHUNK_DIM).map(|i| (i as f64 * 0.37).sin() * Action::bounds(i % 7)).collect();
        let back = denormalize_chunk(&normalize_chunk(&raw));
        for (a, b) in raw.iter().zip(back) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
