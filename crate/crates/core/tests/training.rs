use qsc_core::data::{collect_demos, collect_static, Dataset, DemoConfig, Sampler, SamplerConfig, StaticConfig, Needs};
use qsc_core::model::grad::{evaluate, BcNoise};
use qsc_core::model::ModelConfig;
use qsc_core::rng::stream;
use qsc_core::training::*;
use qsc_core::{Error, LossWeights, ModelParams};

fn tiny_data() -> Dataset {
    let size = |w| (w, w);
    let (w, h) = size(8);
    let demos = collect_demos(&mut stream(2), &DemoConfig { n_trajectories: 3, views_per_step: 2, image_width: w, image_height: h, ..Default::default() }).unwrap();
    let statics = collect_static(&mut stream(4), &StaticConfig { n_scenes: 4, views_per_state: 3, image_width: w, image_height: h, ..Default::default() }).unwrap();
    demos.merge(statics).unwrap()
}

fn tiny_config(variant: Variant, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        variant,
        learning_rate: 1e-3,
        model: ModelConfig::tiny(),
        sampler: SamplerConfig { batch_size: 4, align_pairs: 4, ext_pairs: 2, bbox_items: 2, ..Default::default() },
        seed: 6,
        ..Default::default()
    }
}

fn totals(run: &TrainRun) -> Vec<f64> {
    run.metrics.iter().map(|(_, r)| r.l_total).collect()
}

#[test]
fn resume_continues_the_metric_stream() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let straight = train(&data, tiny_config(Variant::Full, 200), &TrainOutputs::default()).unwrap();

    let ckpt = dir.path().join("half.ckpt");
    let first = train(&data, tiny_config(Variant::Full, 100), &TrainOutputs { checkpoint: Some(ckpt.clone()), metrics: None }).unwrap();
    let loaded = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded, first.checkpoint);
    let second = run(Trainer::resume(&data, loaded, tiny_config(Variant::Full, 200)).unwrap(), &TrainOutputs::default()).unwrap();

    let mut joined = totals(&first);
    joined.extend(totals(&second));
    assert_eq!(joined, totals(&straight));
    assert_eq!(second.checkpoint.params, straight.checkpoint.params);
    assert_eq!(second.checkpoint.step, 200);
}

#[test]
fn resume_rejects_changed_model_and_corruption() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    train(&data, tiny_config(Variant::Full, 3), &TrainOutputs { checkpoint: Some(path.clone()), metrics: None }).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();

    let mut other = tiny_config(Variant::Full, 6);
    other.model.embed_dim += 1;
    assert!(matches!(Trainer::resume(&data, ckpt.clone(), other), Err(Error::Resume(_))));

    let mut faster = tiny_config(Variant::Full, 6);
    faster.learning_rate = 5e-3;
    let metrics = dir.path().join("m.csv");
    run(Trainer::resume(&data, ckpt, faster).unwrap(), &TrainOutputs { metrics: Some(metrics.clone()), checkpoint: None }).unwrap();
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",0.005")));

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
}

#[test]
fn bc_only_equals_full_with_zero_weights() {
    let data = tiny_data();
    let bc = train(&data, tiny_config(Variant::BcOnly, 40), &TrainOutputs::default()).unwrap();
    let mut cfg = tiny_config(Variant::Full, 40);
    cfg.weights.lambda_align = 0.0;
    cfg.weights.lambda_ext = 0.0;
    cfg.weights.lambda_bbox = 0.0;
    let full = train(&data, cfg, &TrainOutputs::default()).unwrap();
    assert_eq!(totals(&bc), totals(&full));
    assert_eq!(bc.checkpoint.params, full.checkpoint.params);
}

fn axpy(acc: &mut ModelParams, a: f64, x: &ModelParams) {
    let xs = x.tensors();
    for ((_, dst), (_, src)) in acc.tensors_mut().into_iter().zip(xs) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += a * s;
        }
    }
}

#[test]
fn noaux_and_full_differ_by_the_auxiliary_gradients() {
    let data = tiny_data();
    let cfg = tiny_config(Variant::Full, 1);
    let params = qsc_core::model::init_params(3, &cfg.model).unwrap();
    let schedule = cfg.model.schedule().unwrap();
    let batch = Sampler::new(&data, cfg.sampler).unwrap().sample(Needs::all(), &mut stream(9)).unwrap();
    let noise = BcNoise::draw(&mut stream(10), batch.bc.len(), schedule.steps());
    let w = LossWeights::default();
    let grad_of = |o| evaluate(&params, &schedule, &batch, &noise, &o, true).unwrap();

    let (full_rep, full) = grad_of(Variant::Full.objective(&w));
    let (_, noaux) = grad_of(Variant::NoAux.objective(&w));
    let (ext_rep, ext) = grad_of(qsc_core::losses::Objective::only(qsc_core::losses::Term::Ext, w.margin));
    let (bbox_rep, bbox) = grad_of(qsc_core::losses::Objective::only(qsc_core::losses::Term::Bbox, w.margin));

    let mut rebuilt = noaux.unwrap();
    axpy(&mut rebuilt, w.lambda_ext, &ext.unwrap());
    axpy(&mut rebuilt, w.lambda_bbox, &bbox.unwrap());
    let full = full.unwrap();
    for ((name, a), (_, b)) in full.tensors().into_iter().zip(rebuilt.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()), "{name}: {x} vs {y}");
        }
    }
    assert_eq!(ext_rep.l_ext, full_rep.l_ext);
    assert_eq!(bbox_rep.l_bbox, full_rep.l_bbox);
}

#[test]
fn full_training_reduces_the_total_loss() {
    let data = tiny_data();
    let run = train(&data, tiny_config(Variant::Full, 600), &TrainOutputs::default()).unwrap();
    let t = totals(&run);
    let early: f64 = t[..100].iter().sum::<f64>() / 100.0;
    let late: f64 = t[t.len() - 100..].iter().sum::<f64>() / 100.0;
    assert!(late < 0.8 * early, "early {early} late {late}");
}

#[test]
fn datasets_must_cover_the_variant() {
    let demos = collect_demos(&mut stream(2), &DemoConfig { n_trajectories: 2, views_per_step: 1, image_width: 8, image_height: 8, ..Default::default() }).unwrap();
    let bc = train(&demos, tiny_config(Variant::BcOnly, 2), &TrainOutputs::default());
    assert!(bc.is_ok());
    assert!(matches!(train(&demos, tiny_config(Variant::Full, 2), &TrainOutputs::default()), Err(Error::EmptySource(_))));

    let sixteen = collect_demos(&mut stream(2), &DemoConfig { n_trajectories: 1, views_per_step: 2, image_width: 16, image_height: 16, ..Default::default() }).unwrap();
    assert!(matches!(Trainer::new(&sixteen, tiny_config(Variant::BcOnly, 2)), Err(Error::Shape(_))));
}

#[test]
fn adam_matches_a_scalar_hand_computation() {
    let cfg = AdamConfig::default();
    let (mut p, mut m, mut v) = ([1.0, -2.0, 0.5], [0.0; 3], [0.0; 3]);
    let lr = 0.01;
    adam_update(&mut p, &[0.3, -4.0, 0.0], &mut m, &mut v, 1, lr, &cfg);
    assert!((p[0] - (1.0 - lr)).abs() < 1e-9);
    assert!((p[1] - (-2.0 + lr)).abs() < 1e-9);
    assert_eq!(p[2], 0.5);

    // reference loop written out directly from the update definition
    let (mut q, mut mq, mut vq) = ([1.0f64, -2.0, 0.5], [0.0f64; 3], [0.0f64; 3]);
    let (mut p, mut m, mut v) = ([1.0f64, -2.0, 0.5], [0.0f64; 3], [0.0f64; 3]);
    for t in 1..=10u64 {
        let g = [q[0] * 2.0, (q[1] - 1.0).powi(3), q[2] - 0.25];
        let gp = [p[0] * 2.0, (p[1] - 1.0).powi(3), p[2] - 0.25];
        for i in 0..3 {
            mq[i] = 0.9 * mq[i] + 0.1 * g[i];
            vq[i] = 0.999 * vq[i] + 0.001 * g[i] * g[i];
            let mh = mq[i] / (1.0 - 0.9f64.powi(t as i32));
            let vh = vq[i] / (1.0 - 0.999f64.powi(t as i32));
            q[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
        adam_update(&mut p, &gp, &mut m, &mut v, t, lr, &cfg);
    }
    for i in 0..3 {
        assert!((p[i] - q[i]).abs() < 1e-12);
    }
}

#[test]
fn non_finite_gradients_abort() {
    let mut params = qsc_core::model::init_params(1, &ModelConfig::tiny()).unwrap();
    let mut grads = params.zeros_like();
    grads.tensors_mut()[0].1[0] = f64::NAN;
    let mut state = AdamState::new(&params);
    let before = params.clone();
    let err = adam_step(&mut params, &grads, &mut state, 1e-3, &AdamConfig::default()).unwrap_err();
    assert!(matches!(err, Error::NumericFailure { .. }));
    assert_eq!(params, before);

    let zero = params.zeros_like();
    adam_step(&mut params, &zero, &mut state, 1e-3, &AdamConfig::default()).unwrap();
    assert_eq!(params, before);
}
