//! Noise schedule, the reverse denoising update and multi-chain action
//! sampling. Chains run on unit-scaled chunks (see
//! [`normalize_chunk`](super::normalize_chunk)).

use ndarray::{s, Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};

use super::{denormalize_chunk, ModelParams};
use crate::data::CHUNK_DIM;
use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::world::{Action, ACTION_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Coefficients of `a^{k-1} = α (a^k − γ ε̂ + σ z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: f64,
}

impl NoiseSchedule {
    /// Linear ramp of `steps` betas from `beta_start` to `beta_end`.
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidInput("diffusion needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && (beta_start < beta_end || steps == 1)) {
            return Err(Error::InvalidInput(format!("invalid beta ramp [{beta_start}, {beta_end}]")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.steps() {
            return Err(Error::Usage(format!("diffusion step {k} outside 1..={}", self.steps())));
        }
        Ok(k - 1)
    }

    pub fn beta(&self, k: usize) -> Result<f64> {
        Ok(self.betas[self.check(k)?])
    }

    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(k)?])
    }

    /// Spread of the initial chunks: the forward-process noise level at `K`.
    pub fn initial_std(&self) -> f64 {
        (1.0 - self.alpha_bars[self.steps() - 1]).sqrt()
    }

    /// `α = 1/√(1−β_k)`, `γ = β_k/√(1−ᾱ_k)`, `σ = √β_k` (zero at `k = 1`).
    pub fn coefficients(&self, k: usize) -> Result<StepCoefficients> {
        let i = self.check(k)?;
        let beta = self.betas[i];
        Ok(StepCoefficients {
            alpha: 1.0 / (1.0 - beta).sqrt(),
            gamma: beta / (1.0 - self.alpha_bars[i]).sqrt(),
            sigma: if k == 1 { 0.0 } else { beta.sqrt() },
        })
    }
}

/// Sinusoidal embedding of the diffusion step: `dim/2` sines then
/// `dim/2` cosines at geometrically spaced frequencies.
pub fn timestep_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = k as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Denoiser input rows: conditioning ++ noisy chunk ++ step embedding.
pub fn denoiser_input(params: &ModelParams, cond: ArrayView2<f64>, chunks: ArrayView2<f64>, steps: &[usize]) -> Array2<f64> {
    let c = &params.config;
    let n = cond.nrows();
    let mut x = Array2::zeros((n, c.denoiser_input_dim()));
    x.slice_mut(s![.., ..c.cond_dim]).assign(&cond);
    x.slice_mut(s![.., c.cond_dim..c.cond_dim + CHUNK_DIM]).assign(&chunks);
    for (i, &k) in steps.iter().enumerate() {
        let emb = timestep_embedding(k, c.time_embed_dim);
        for (j, v) in emb.into_iter().enumerate() {
            x[[i, c.cond_dim + CHUNK_DIM + j]] = v;
        }
    }
    x
}

pub fn predict_noise(params: &ModelParams, cond: ArrayView2<f64>, chunks: ArrayView2<f64>, steps: &[usize]) -> Array2<f64> {
    params.denoiser.infer(denoiser_input(params, cond, chunks, steps).view())
}

fn check_chunk(v: &[f64], what: &str) -> Result<()> {
    if v.len() != CHUNK_DIM {
        return Err(Error::Shape(format!("{what} has {} values, expected {CHUNK_DIM}", v.len())));
    }
    Ok(())
}

/// One reverse step on a single chunk.
pub fn denoise_step(params: &ModelParams, schedule: &NoiseSchedule, cond: &[f64], a_k: &[f64], k: usize, noise: &[f64]) -> Result<Vec<f64>> {
    let co = schedule.coefficients(k)?;
    check_chunk(a_k, "chunk")?;
    check_chunk(noise, "noise")?;
    if cond.len() != params.config.cond_dim {
        return Err(Error::Shape(format!("conditioning has {} values, expected {}", cond.len(), params.config.cond_dim)));
    }
    let c = ArrayView2::from_shape((1, cond.len()), cond).unwrap();
    let a = ArrayView2::from_shape((1, CHUNK_DIM), a_k).unwrap();
    let eps = predict_noise(params, c, a, &[k]);
    Ok(apply_update(co, a_k, eps.as_slice().unwrap(), noise))
}

pub fn apply_update(co: StepCoefficients, a_k: &[f64], eps: &[f64], noise: &[f64]) -> Vec<f64> {
    a_k.iter().zip(eps).zip(noise).map(|((a, e), z)| co.alpha * (a - co.gamma * e + co.sigma * z)).collect()
}

/// Runs `samples` reverse chains per conditioning row and returns the
/// per-row mean, in raw action units and clipped to the action bounds.
pub fn sample_chunks(params: &ModelParams, schedule: &NoiseSchedule, cond: ArrayView2<f64>, samples: usize, rng: &mut RandomStream) -> Result<Array2<f64>> {
    if samples == 0 {
        return Err(Error::InvalidInput("need at least one sample chain".into()));
    }
    let n = cond.nrows();
    let rows = n * samples;
    let mut c = Array2::zeros((rows, cond.ncols()));
    for i in 0..n {
        for m in 0..samples {
            c.row_mut(i * samples + m).assign(&cond.row(i));
        }
    }
    let spread = schedule.initial_std();
    let mut a = Array2::from_shape_simple_fn((rows, CHUNK_DIM), || {
        let z: f64 = StandardNormal.sample(rng);
        spread * z
    });
    for k in (1..=schedule.steps()).rev() {
        let co = schedule.coefficients(k)?;
        let eps = predict_noise(params, c.view(), a.view(), &vec![k; rows]);
        let z: Array2<f64> = if co.sigma > 0.0 {
            Array2::from_shape_simple_fn((rows, CHUNK_DIM), || StandardNormal.sample(rng))
        } else {
            Array2::zeros((rows, CHUNK_DIM))
        };
        ndarray::Zip::from(&mut a).and(&eps).and(&z).for_each(|a, &e, &z| *a = co.alpha * (*a - co.gamma * e + co.sigma * z));
    }
    let mut out = Array2::zeros((n, CHUNK_DIM));
    for i in 0..n {
        let mean = a.slice(s![i * samples..(i + 1) * samples, ..]).mean_axis(ndarray::Axis(0)).unwrap();
        let raw = denormalize_chunk(mean.as_slice().unwrap());
        for (j, v) in raw.into_iter().enumerate() {
            let b = Action::bounds(j % ACTION_DIM);
            out[[i, j]] = v.clamp(-b, b);
        }
    }
    Ok(out)
}

pub fn sample_actions(params: &ModelParams, schedule: &NoiseSchedule, cond: &[f64], rng: &mut RandomStream, samples: usize) -> Result<Vec<f64>> {
    if cond.len() != params.config.cond_dim {
        return Err(Error::Shape(format!("conditioning has {} values, expected {}", cond.len(), params.config.cond_dim)));
    }
    let c = ArrayView2::from_shape((1, cond.len()), cond).unwrap();
    Ok(sample_chunks(params, schedule, c, samples, rng)?.into_raw_vec_and_offset().0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::rng::stream;

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::new(50, 1e-4, 0.02).unwrap();
        for k in 2..=50 {
            assert!(s.beta(k).unwrap() > s.beta(k - 1).unwrap());
            assert!(s.alpha_bar(k).unwrap() < s.alpha_bar(k - 1).unwrap());
        }
        assert_eq!(s.coefficients(1).unwrap().sigma, 0.0);
        assert!(matches!(s.coefficients(0), Err(Error::Usage(_))));
        assert!(matches!(s.coefficients(51), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_denoiser_reduces_to_scaling() {
        let mut p = init_params(1, &ModelConfig::tiny()).unwrap();
        p.denoiser = p.denoiser.zeros_like();
        let s = p.config.schedule().unwrap();
        let a: Vec<f64> = (0..CHUNK_DIM).map(|i| i as f64 * 0.01 - 0.2).collect();
        let out = denoise_step(&p, &s, &vec![0.3; 8], &a, 1, &vec![1.0; CHUNK_DIM]).unwrap();
        let alpha = s.coefficients(1).unwrap().alpha;
        for (o, x) in out.iter().zip(&a) {
            assert_eq!(*o, alpha * x);
        }
    }

    #[test]
    fn samples_respect_bounds() {
        let p = init_params(2, &ModelConfig::tiny()).unwrap();
        let s = p.config.schedule().unwrap();
        let chunk = sample_actions(&p, &s, &vec![5.0; 8], &mut stream(3), 3).unwrap();
        for (j, v) in chunk.iter().enumerate() {
            assert!(v.abs() <= Action::bounds(j % ACTION_DIM));
        }
        assert!(sample_actions(&p, &s, &vec![0.0; 8], &mut stream(3), 0).is_err());
    }
}
