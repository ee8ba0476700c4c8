//! `qsc`: data generation, co-training, evaluation and diagnostics.
//!
//! Exit codes: 0 success, 2 usage, 3 generation, 4 numeric, 5 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{Map, Value};

use qsc_core::data::{self, CameraSource, DemoConfig, StaticConfig};
use qsc_core::eval::{self, AblationConfig, EvalSuite, HeadEmbedder, LearnedPolicy, RetrievalConfig};
use qsc_core::model::{self, grad, GradCheckOptions, ModelParams};
use qsc_core::losses::{LossWeights, Objective, Term};
use qsc_core::rng::{stream, train_seed};
use qsc_core::training::{self, Checkpoint, TrainConfig, TrainOutputs, Trainer, Variant};
use qsc_core::{Error, PerturbationRegime};

#[derive(Parser)]
#[command(name = "qsc", version, about = "Invariance co-training for visuomotor policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate demonstrations and static multi-view clusters.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        demos: usize,
        /// Static scenes; 0 skips static data.
        #[arg(long, default_value_t = 50)]
        scenes: usize,
        /// Cameras per demo step and per static state.
        #[arg(long, default_value_t = 10)]
        views: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Distractors in demonstration views.
        #[arg(long, default_value_t = 0)]
        distractors: usize,
        #[arg(long, default_value_t = 48)]
        size: u32,
        /// Demo cameras: a regime name (nominal, rot30, rot60_translate,
        /// uniform) or `azimuths:N`.
        #[arg(long, default_value = "uniform")]
        camera: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a policy on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lr: Option<f64>,
        /// Metrics CSV; defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Closed-loop evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "default")]
        suite: String,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 120)]
        max_steps: usize,
    },
    /// Nearest-neighbor retrieval on held-out data, trained vs untrained.
    NnDiag {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        epsilon: usize,
    },
    /// Scale/diversity grid: one model per (scenes, views) cell.
    Ablate {
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate a dataset and print statistics.
    Inspect {
        #[arg(long)]
        data: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Usage(_) | Error::InvalidInput(_) | Error::Shape(_) => 2,
            Error::GenerationFailed(_) | Error::EmptySource(_) | Error::DegenerateScene(_) | Error::CrossKind => 3,
            Error::NumericFailure { .. } | Error::InvalidAction(_) | Error::BehindCamera(_) => 4,
            _ => 5,
        };
        Failure { code, message: e.to_string() }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

type CmdResult = std::result::Result<(), Failure>;

/// Overlays a JSON config file on flag-derived settings, printing where
/// each resolved value came from.
fn resolve<T: serde::Serialize + serde::de::DeserializeOwned>(from_flags: &T, config: Option<&Path>) -> std::result::Result<T, Failure> {
    let mut merged = serde_json::to_value(from_flags).map_err(|e| fail(5, e.to_string()))?;
    let overrides = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| fail(5, format!("{}: {e}", p.display())))?;
            match serde_json::from_str::<Value>(&text).map_err(|e| fail(2, format!("{}: {e}", p.display())))? {
                Value::Object(m) => m,
                _ => return Err(fail(2, "config must be a JSON object")),
            }
        }
        None => Map::new(),
    };
    let obj = merged.as_object_mut().expect("settings serialize to objects");
    for (key, value) in obj.iter_mut() {
        match overrides.get(key) {
            Some(v) => {
                println!("{key} = {v} (config file; flag value {value})");
                *value = v.clone();
            }
            None => println!("{key} = {value} (flag or default)"),
        }
    }
    for key in overrides.keys().filter(|k| !obj.contains_key(*k)) {
        return Err(fail(2, format!("unknown config key '{key}'")));
    }
    serde_json::from_value(merged).map_err(|e| fail(2, format!("invalid config: {e}")))
}

fn parse_camera(s: &str) -> std::result::Result<CameraSource, Failure> {
    if let Some(n) = s.strip_prefix("azimuths:") {
        let n: usize = n.parse().map_err(|_| fail(2, format!("bad azimuth count in '{s}'")))?;
        return Ok(CameraSource::Azimuths(n));
    }
    PerturbationRegime::parse(s)
        .map(CameraSource::Regime)
        .ok_or_else(|| fail(2, format!("unknown camera source '{s}'")))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct GenSettings {
    demos: usize,
    scenes: usize,
    views: usize,
    seed: u64,
    distractors: usize,
    size: u32,
    camera: CameraSource,
    demo: DemoConfig,
    statics: StaticConfig,
}

#[allow(clippy::too_many_arguments)]
fn gen_data(out: &Path, demos: usize, scenes: usize, views: usize, seed: u64, distractors: usize, size: u32, camera: &str, config: Option<&Path>) -> CmdResult {
    let flags = GenSettings {
        demos,
        scenes,
        views,
        seed,
        distractors,
        size,
        camera: parse_camera(camera)?,
        demo: DemoConfig::default(),
        statics: StaticConfig::default(),
    };
    let s: GenSettings = resolve(&flags, config)?;
    let demo_cfg = DemoConfig {
        n_trajectories: s.demos,
        views_per_step: s.views,
        camera: s.camera,
        image_width: s.size,
        image_height: s.size,
        distractors: s.distractors,
        ..s.demo
    };
    let mut rng = stream(train_seed(s.seed));
    let mut ds = data::collect_demos(&mut rng, &demo_cfg)?;
    if s.scenes == 0 || s.views < 2 {
        log::warn!("skipping static clusters (scenes = {}, views = {}; clusters need at least 2 views)", s.scenes, s.views);
    } else {
        let static_cfg = StaticConfig {
            n_scenes: s.scenes,
            views_per_state: s.views,
            image_width: s.size,
            image_height: s.size,
            ..s.statics
        };
        ds = ds.merge(data::collect_static(&mut rng, &static_cfg)?)?;
    }
    data::write_dataset(&ds, out)?;
    println!("trajectories: {}", ds.trajectories.len());
    println!("static clusters: {}", ds.static_clusters.len());
    println!("records: {}", ds.num_records());
    for t in &ds.trajectories {
        println!("trajectory {} steps {} Z {}", t.id, t.len(), t.scale.map_or("none".into(), |z| format!("{z:.6}")));
    }
    for c in &ds.static_clusters {
        println!("cluster {} views {} Z {}", c.id, c.records.len(), c.scale.map_or("none".into(), |z| format!("{z:.6}")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(data_dir: &Path, variant: &str, steps: usize, seed: u64, out: &Path, lr: Option<f64>, metrics: Option<PathBuf>, resume: Option<&Path>, config: Option<&Path>) -> CmdResult {
    let variant = Variant::parse(variant).ok_or_else(|| fail(2, format!("unknown variant '{variant}' (full, bc, noaux, auxonly)")))?;
    let ds = data::read_dataset(data_dir)?;
    let mut flags = match resume {
        Some(p) => Checkpoint::load(p)?.config,
        None => TrainConfig::default(),
    };
    flags.variant = variant;
    flags.steps = steps;
    flags.seed = seed;
    if let Some(lr) = lr {
        flags.learning_rate = lr;
    }
    if resume.is_none() {
        flags.model.image_width = ds.image_width;
        flags.model.image_height = ds.image_height;
    }
    let cfg: TrainConfig = resolve(&flags, config)?;
    let trainer = match resume {
        Some(p) => Trainer::resume(&ds, Checkpoint::load(p)?, cfg)?,
        None => Trainer::new(&ds, cfg)?,
    };
    let outputs = TrainOutputs {
        metrics: Some(metrics.unwrap_or_else(|| out.with_extension("metrics.csv"))),
        checkpoint: Some(out.to_path_buf()),
    };
    let run = training::run(trainer, &outputs)?;
    if let Some((step, last)) = run.metrics.last() {
        println!("step {step}: l_total {:.6} l_bc {:.6}", last.l_total, last.l_bc);
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn load_params(path: &Path) -> std::result::Result<ModelParams, Failure> {
    let as_io = |e: Error| fail(5, format!("cannot load checkpoint {}: {e}", path.display()));
    match Checkpoint::load(path) {
        Ok(c) => Ok(c.params),
        Err(Error::Format(_)) => ModelParams::load(path).map_err(as_io),
        Err(e) => Err(as_io(e)),
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(ckpt: &Path, suite: &str, episodes: usize, seed: u64, out: &Path, samples: usize, max_steps: usize) -> CmdResult {
    let params = load_params(ckpt)?;
    let mut suite = EvalSuite::named(suite, params.config.image_width, params.config.image_height)?;
    suite.episodes = episodes;
    suite.samples = samples;
    suite.max_steps = max_steps;
    let policy = LearnedPolicy::new(&params, samples)?;
    let result = eval::evaluate(&policy, &suite, seed)?;
    std::fs::write(out, result.to_csv()).map_err(|e| fail(5, format!("{}: {e}", out.display())))?;
    println!("{:<16} {:>11} {:>10} {:>8} {:>8} {:>16} {:>8}", "regime", "distractors", "lighting", "handheld", "success", "95% interval", "length");
    for c in &result.cells {
        println!(
            "{:<16} {:>11} {:>10} {:>8} {:>8.3} {:>7.3}..{:<7.3} {:>8.1}",
            c.cell.regime.name(),
            c.cell.distractors,
            c.cell.lighting.name(),
            c.cell.handheld,
            c.success,
            c.ci_low,
            c.ci_high,
            c.mean_len
        );
    }
    println!("mean success {:.3}", result.mean_success());
    Ok(())
}

fn nn_diag(ckpt: &Path, data_dir: &Path, epsilon: usize) -> CmdResult {
    let params = load_params(ckpt)?;
    let ds = data::read_dataset(data_dir)?;
    let cfg = RetrievalConfig {
        epsilon,
        ..Default::default()
    };
    let trained = eval::nn_diagnostic(&HeadEmbedder(&params), &ds, &ds, &cfg)?;
    let fresh = model::init_params(0, &params.config)?;
    let untrained = eval::nn_diagnostic(&HeadEmbedder(&fresh), &ds, &ds, &cfg)?;
    let report = serde_json::json!({ "trained": trained, "untrained": untrained });
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

fn ablate(grid: Option<&Path>, out: &Path) -> CmdResult {
    let cfg: AblationConfig = {
        let base = AblationConfig::desk_scale();
        resolve(&base, grid)?
    };
    std::fs::create_dir_all(out).map_err(|e| fail(5, format!("{}: {e}", out.display())))?;
    let rows = eval::ablation_grid(&cfg, |row| {
        let status = match &row.result {
            Ok(r) => format!("mean success {:.3}", r.mean_success()),
            Err(e) => format!("failed: {e}"),
        };
        println!("scenes {} views {}: {status}", row.scenes, row.views_per_state);
    })?;
    let path = out.join("ablation.csv");
    std::fs::write(&path, eval::ablation_csv(&rows)).map_err(|e| fail(5, format!("{}: {e}", path.display())))?;
    println!("grid written to {}", path.display());
    Ok(())
}

fn grad_check(seed: u64) -> CmdResult {
    let (params, schedule, batch) = grad::tiny_problem(seed)?;
    let opts = GradCheckOptions { seed, ..Default::default() };
    let weights = LossWeights::default();
    let mut objectives: Vec<(&str, Objective)> = Term::ALL.iter().map(|t| (t.name(), Objective::only(*t, weights.margin))).collect();
    objectives.push(("l_total", Objective::from_weights(&weights)));
    let mut ok = true;
    for (name, obj) in objectives {
        let rep = grad::grad_check(&params, &schedule, &batch, &obj, &opts, None)?;
        let kinks: usize = rep.tensors.iter().map(|t| t.kinks).sum();
        println!("{name:<8} max rel err {:.3e} ({} tensors, {kinks} kinks skipped) {}", rep.max_rel_err, rep.tensors.len(), if rep.passed { "ok" } else { "FAIL" });
        for t in rep.tensors.iter().filter(|t| t.max_rel_err > rep.tolerance) {
            println!("  {} max rel err {:.3e}", t.name, t.max_rel_err);
        }
        ok &= rep.passed;
    }
    if ok {
        Ok(())
    } else {
        Err(fail(4, "gradient check failed"))
    }
}

fn inspect_cmd(data_dir: &Path) -> CmdResult {
    let ds = data::read_dataset(data_dir)?;
    let rep = data::inspect(&ds);
    println!("trajectories {}", rep.trajectories);
    println!("static clusters {}", rep.static_clusters);
    println!("records {}", rep.records);
    println!("blobs {}", rep.blobs);
    println!("max replay error {:.3e}", rep.max_replay_error);
    println!("max bbox error {:.3e}", rep.max_bbox_error);
    if !rep.scales.is_empty() {
        let (lo, hi) = rep.scales.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &z| (l.min(z), h.max(z)));
        println!("Z range {lo:.4}..{hi:.4} over {} camera sets", rep.scales.len());
    }
    if rep.ok() {
        println!("dataset ok");
        Ok(())
    } else {
        for p in &rep.problems {
            eprintln!("{p}");
        }
        Err(fail(5, format!("dataset has {} problems", rep.problems.len())))
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("QSC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData {
            out,
            demos,
            scenes,
            views,
            seed,
            distractors,
            size,
            camera,
            config,
        } => gen_data(&out, demos, scenes, views, seed, distractors, size, &camera, config.as_deref()),
        Command::Train {
            data,
            variant,
            steps,
            seed,
            out,
            lr,
            metrics,
            resume,
            config,
        } => train_cmd(&data, &variant, steps, seed, &out, lr, metrics, resume.as_deref(), config.as_deref()),
        Command::Eval {
            ckpt,
            suite,
            episodes,
            seed,
            out,
            samples,
            max_steps,
        } => eval_cmd(&ckpt, &suite, episodes, seed, &out, samples, max_steps),
        Command::NnDiag { ckpt, data, epsilon } => nn_diag(&ckpt, &data, epsilon),
        Command::Ablate { grid, out } => ablate(grid.as_deref(), &out),
        Command::GradCheck { seed } => grad_check(seed),
        Command::Inspect { data } => inspect_cmd(&data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
