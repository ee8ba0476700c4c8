//! Loss evaluation over a training batch with reverse-mode gradients, and
//! finite-difference verification of those gradients.

use ndarray::{s, Array2, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::diffusion::{denoiser_input, predict_noise, NoiseSchedule};
use super::{normalize_chunk, HeadKind, ModelParams};
use crate::data::{TrainingBatch, CHUNK_DIM};
use crate::error::Result;
use crate::geometry::PoseTarget;
use crate::losses::{bbox_grad, ext_grad, neg_grad, noise_mse_grad, pos_grad, LossReport, Objective};
use crate::rng::{stream, RandomStream};
use crate::world::Goal;

/// Diffusion step and Gaussian noise drawn for each behavior-cloning item.
#[derive(Debug, Clone, PartialEq)]
pub struct BcNoise {
    pub steps: Vec<usize>,
    pub eps: Array2<f64>,
}

impl BcNoise {
    pub fn draw(rng: &mut RandomStream, n: usize, diffusion_steps: usize) -> Self {
        let steps = (0..n).map(|_| rng.random_range(1..=diffusion_steps)).collect();
        let eps = Array2::from_shape_simple_fn((n, CHUNK_DIM), || StandardNormal.sample(rng));
        Self { steps, eps }
    }
}

/// Noisy chunks `√ᾱ_k·a + √(1−ᾱ_k)·ε` for unit-scaled clean chunks.
pub fn corrupt(schedule: &NoiseSchedule, clean: ArrayView2<f64>, noise: &BcNoise) -> Result<Array2<f64>> {
    let mut out = clean.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let ab = schedule.alpha_bar(noise.steps[i])?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (j, v) in row.iter_mut().enumerate() {
            *v = a * *v + b * noise.eps[[i, j]];
        }
    }
    Ok(out)
}

/// Noise-prediction loss for conditioning rows and unit-scaled clean
/// chunks, drawing steps and noise from `rng`.
pub fn loss_bc(params: &ModelParams, schedule: &NoiseSchedule, cond: ArrayView2<f64>, clean: ArrayView2<f64>, rng: &mut RandomStream) -> Result<f64> {
    let noise = BcNoise::draw(rng, cond.nrows(), schedule.steps());
    let noisy = corrupt(schedule, clean, &noise)?;
    let pred = predict_noise(params, cond, noisy.view(), &noise.steps);
    Ok(noise_mse_grad(pred.view(), noise.eps.view(), 1.0, None))
}

/// Draws the diffusion noise for the batch and evaluates every loss term
/// with gradients of the weighted total.
pub fn forward_losses(
    params: &ModelParams,
    schedule: &NoiseSchedule,
    batch: &TrainingBatch,
    objective: &Objective,
    rng: &mut RandomStream,
) -> Result<(LossReport, ModelParams)> {
    let noise = BcNoise::draw(rng, batch.bc.len(), schedule.steps());
    let (report, grads) = evaluate(params, schedule, batch, &noise, objective, true)?;
    Ok((report, grads.expect("gradients requested")))
}

fn select_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(ndarray::Axis(0), rows)
}

/// Deterministic loss evaluation given the diffusion noise. Terms with a
/// zero weight are reported but contribute no gradient.
pub fn evaluate(
    params: &ModelParams,
    schedule: &NoiseSchedule,
    batch: &TrainingBatch,
    noise: &BcNoise,
    objective: &Objective,
    want_grad: bool,
) -> Result<(LossReport, Option<ModelParams>)> {
    let cfg = &params.config;
    let mut report = LossReport::default();
    let mut grads = want_grad.then(|| params.zeros_like());
    if batch.slots.is_empty() {
        report.finish(objective)?;
        return Ok((report, grads));
    }
    let inputs: Vec<(&crate::world::Image, Goal)> = batch.slots.iter().map(|s| (&s.image, s.goal)).collect();
    let x = params.encoder_input(&inputs)?;
    let enc = params.encoder.forward(x);
    let emb = &enc.output;
    let mut d_emb = Array2::<f64>::zeros(emb.raw_dim());
    let mut touched = false;

    let mut run_head = |kind: HeadKind,
                        weight: &[f64],
                        grads: &mut Option<ModelParams>,
                        d_emb: &mut Array2<f64>,
                        f: &mut dyn FnMut(ArrayView2<f64>, &[f64], Option<&mut Array2<f64>>) -> Vec<f64>|
     -> Vec<f64> {
        let head = params.head(kind);
        let cache = head.forward(emb.clone());
        let active = grads.is_some() && weight.iter().any(|w| *w != 0.0);
        let mut d_out = active.then(|| Array2::zeros(cache.output.raw_dim()));
        let values = f(cache.output.view(), weight, d_out.as_mut());
        if let (Some(d_out), Some(g)) = (d_out, grads.as_mut()) {
            let gh = match kind {
                HeadKind::Align => &mut g.align_head,
                HeadKind::Ext => &mut g.ext_head,
                HeadKind::Bbox => &mut g.bbox_head,
            };
            *d_emb += &head.backward(&cache, &d_out, gh, true).unwrap();
            touched = true;
        }
        values
    };

    if !batch.align.is_empty() {
        let pos: Vec<(usize, usize)> = batch.align.iter().filter(|p| p.label.is_positive()).map(|p| (p.a, p.b)).collect();
        let neg: Vec<(usize, usize)> = batch.align.iter().filter(|p| !p.label.is_positive()).map(|p| (p.a, p.b)).collect();
        let margin = objective.margin;
        let v = run_head(HeadKind::Align, &[objective.pos, objective.neg], &mut grads, &mut d_emb, &mut |out, w, mut g| {
            let lp = pos_grad(out, &pos, w[0], if w[0] != 0.0 { g.as_deref_mut() } else { None });
            let ln = neg_grad(out, &neg, margin, w[1], if w[1] != 0.0 { g.as_deref_mut() } else { None });
            vec![lp, ln]
        });
        report.l_pos = v[0];
        report.l_neg = v[1];
        report.n_pos = pos.len();
        report.n_neg = neg.len();
    }
    if !batch.ext.is_empty() {
        let pairs: Vec<(usize, usize, PoseTarget)> = batch.ext.iter().map(|p| (p.k, p.l, p.target)).collect();
        let v = run_head(HeadKind::Ext, &[objective.ext], &mut grads, &mut d_emb, &mut |out, w, g| vec![ext_grad(out, &pairs, w[0], g)]);
        report.l_ext = v[0];
        report.n_ext = pairs.len();
    }
    if !batch.bbox.is_empty() {
        let items: Vec<(usize, [f64; 8], [bool; 2])> = batch.bbox.iter().map(|b| (b.slot, b.target, b.visible)).collect();
        let mut count = 0;
        let v = run_head(HeadKind::Bbox, &[objective.bbox], &mut grads, &mut d_emb, &mut |out, w, g| {
            let (l, n) = bbox_grad(out, &items, w[0], g);
            count = n;
            vec![l]
        });
        report.l_bbox = v[0];
        report.n_bbox = count;
    }

    if !batch.bc.is_empty() {
        let slots: Vec<usize> = batch.bc.iter().map(|b| b.slot).collect();
        let e = select_rows(emb, &slots);
        let proprio: Vec<_> = batch.bc.iter().map(|b| b.proprio).collect();
        let goals: Vec<Goal> = batch.bc.iter().map(|b| b.goal).collect();
        let cond_cache = params.conditioner.forward(params.cond_input(e.view(), &proprio, &goals));
        let clean = Array2::from_shape_vec((slots.len(), CHUNK_DIM), batch.bc.iter().flat_map(|b| normalize_chunk(&b.chunk)).collect()).unwrap();
        let noisy = corrupt(schedule, clean.view(), noise)?;
        let den_cache = params.denoiser.forward(denoiser_input(params, cond_cache.output.view(), noisy.view(), &noise.steps));
        let active = grads.is_some() && objective.bc != 0.0;
        let mut d_pred = active.then(|| Array2::zeros(den_cache.output.raw_dim()));
        report.l_bc = noise_mse_grad(den_cache.output.view(), noise.eps.view(), objective.bc, d_pred.as_mut());
        report.n_bc = slots.len();
        if let (Some(d_pred), Some(g)) = (d_pred, grads.as_mut()) {
            let d_in = params.denoiser.backward(&den_cache, &d_pred, &mut g.denoiser, true).unwrap();
            let d_cond = d_in.slice(s![.., ..cfg.cond_dim]).to_owned();
            let d_cin = params.conditioner.backward(&cond_cache, &d_cond, &mut g.conditioner, true).unwrap();
            for (i, &slot) in slots.iter().enumerate() {
                let mut row = d_emb.row_mut(slot);
                row += &d_cin.slice(s![i, ..cfg.embed_dim]);
            }
            touched = true;
        }
    }

    report.finish(objective)?;
    if touched {
        if let Some(g) = grads.as_mut() {
            params.encoder.backward(&enc, &d_emb, &mut g.encoder, false);
        }
    }
    Ok((report, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Tensors larger than this are checked on a seeded subsample of this
    /// many coordinates.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            max_coords: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Coordinates where a piecewise-linear kink lies inside the
    /// differencing interval, so no derivative exists to compare.
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Compares analytic gradients of `objective` against central
/// differences. `mutate` scales one analytic tensor before comparison,
/// which must make the check fail.
pub fn grad_check(
    params: &ModelParams,
    schedule: &NoiseSchedule,
    batch: &TrainingBatch,
    objective: &Objective,
    opts: &GradCheckOptions,
    mutate: Option<(&str, f64)>,
) -> Result<GradReport> {
    let mut noise_rng = stream(opts.seed ^ 0x9e37_79b9);
    let noise = BcNoise::draw(&mut noise_rng, batch.bc.len(), schedule.steps());
    let (_, grads) = evaluate(params, schedule, batch, &noise, objective, true)?;
    let grads = grads.unwrap();
    let loss_at = |p: &ModelParams| -> Result<f64> { Ok(evaluate(p, schedule, batch, &noise, objective, false)?.0.l_total) };

    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| {
            let scale = mutate.filter(|(m, _)| *m == n).map_or(1.0, |(_, s)| s);
            let v = t.iter().map(|x| x * scale).collect();
            (n, v)
        })
        .collect();

    let mut pick_rng = stream(opts.seed);
    let mut work = params.clone();
    let mut report = GradReport {
        tensors: Vec::new(),
        max_rel_err: 0.0,
        tolerance: opts.tolerance,
        passed: true,
    };
    for (ti, (name, ga)) in analytic.iter().enumerate() {
        if ga.is_empty() {
            continue;
        }
        let coords: Vec<usize> = if ga.len() <= opts.max_coords {
            (0..ga.len()).collect()
        } else {
            let mut c = sample(&mut pick_rng, ga.len(), opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = TensorCheck {
            name: name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            kinks: 0,
        };
        for &i in &coords {
            let at = |work: &mut ModelParams, v: f64| -> Result<f64> {
                work.tensors_mut()[ti].1[i] = v;
                loss_at(work)
            };
            let x0 = params.tensors()[ti].1[i];
            let h = opts.step;
            let fp = at(&mut work, x0 + h)?;
            let fm = at(&mut work, x0 - h)?;
            let f0 = at(&mut work, x0)?;
            let fd = (fp - fm) / (2.0 * h);
            let mut err = rel_err(ga[i], fd);
            if err > opts.tolerance {
                let h2 = h / 10.0;
                let fp2 = at(&mut work, x0 + h2)?;
                let fm2 = at(&mut work, x0 - h2)?;
                at(&mut work, x0)?;
                let fd2 = (fp2 - fm2) / (2.0 * h2);
                let e2 = rel_err(ga[i], fd2);
                let right = (fp - f0) / h;
                let left = (f0 - fm) / h;
                let kinked = rel_err(right, left) > 1e-2;
                if e2 <= opts.tolerance {
                    err = e2;
                } else if kinked && (rel_err(ga[i], right) <= 1e-2 || rel_err(ga[i], left) <= 1e-2) {
                    check.kinks += 1;
                    continue;
                }
            }
            check.checked += 1;
            check.max_rel_err = check.max_rel_err.max(err);
        }
        if check.max_rel_err > opts.tolerance || check.kinks * 10 > coords.len() {
            report.passed = false;
        }
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.tensors.push(check);
    }
    Ok(report)
}

/// Tiny-configuration parameters and a batch with two items per term,
/// drawn from freshly generated 8×8 data. Used for gradient verification.
pub fn tiny_problem(seed: u64) -> Result<(ModelParams, NoiseSchedule, TrainingBatch)> {
    use crate::data::{collect_demos, collect_static, DemoConfig, Needs, Sampler, SamplerConfig, StaticConfig};
    use crate::model::{init_params, ModelConfig};

    let config = ModelConfig::tiny();
    let mut rng = stream(seed);
    let demos = collect_demos(
        &mut rng,
        &DemoConfig {
            n_trajectories: 2,
            views_per_step: 2,
            image_width: config.image_width,
            image_height: config.image_height,
            ..Default::default()
        },
    )?;
    let clusters = collect_static(
        &mut rng,
        &StaticConfig {
            n_scenes: 3,
            views_per_state: 3,
            image_width: config.image_width,
            image_height: config.image_height,
            ..Default::default()
        },
    )?;
    let data = demos.merge(clusters)?;
    let sampler = Sampler::new(
        &data,
        SamplerConfig {
            batch_size: 2,
            align_pairs: 4,
            ext_pairs: 2,
            bbox_items: 2,
            ..Default::default()
        },
    )?;
    let batch = sampler.sample(Needs::all(), &mut rng)?;
    let params = init_params(seed, &config)?;
    let schedule = config.schedule()?;
    Ok((params, schedule, batch))
}
