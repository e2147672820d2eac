use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use mvparts::eval::{improvement_histogram, pcp_curve};
use mvparts::learn::{tune_alpha_beta, Sidecar};
use mvparts::model::{load_model, save_model, KinematicModel, Pose2D};
use mvparts::pipeline::{
    evaluate, gt_segments, infer_frames, paired_errors_2d, pose_file_name, pose_files, InferMode, MultiParams,
    PoseFile,
};
use mvparts::synth::{dataset_maps, gen_model_from_scene, gen_scene, CorruptionSpec, Dataset, ModelGenOptions, SceneConfig, SynthError};
use mvparts::geometry::CameraRig;
use serde::Serialize;
use serde_json::json;

use crate::{svg, Cli, Command, EvalArgs, InferArgs, Metric, Mode, ModelInputs, SynthArgs, TrainArgs, TuneArgs};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_BETA: f64 = 1.0;
pub const COUPLING_FILE: &str = "coupling.json";
pub const MODEL_FILE: &str = "model.json";

#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub error: anyhow::Error,
}

type Result<T> = std::result::Result<T, Failure>;

trait Kind<T> {
    fn kind(self, kind: &'static str) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> Kind<T> for std::result::Result<T, E> {
    fn kind(self, kind: &'static str) -> Result<T> {
        self.map_err(|e| Failure { kind, error: e.into() })
    }
}

fn fail(kind: &'static str, message: String) -> Failure {
    Failure {
        kind,
        error: anyhow!(message),
    }
}

fn need(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(fail("config", format!("{what} not found: {}", path.display())))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).kind("io")?;
    }
    let mut text = serde_json::to_string_pretty(value).kind("io")?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display())).kind("io")
}

fn check_weight(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(fail("config", format!("{name} must be finite and non-negative, got {v}")))
    }
}

fn check_gammas(gammas: &[f64]) -> Result<()> {
    match gammas.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
        Some(g) => Err(fail("config", format!("--gamma values must be finite and non-negative, got {g}"))),
        None if gammas.is_empty() => Err(fail("config", "--gamma needs at least one value".into())),
        None => Ok(()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = match cli.threads {
        Some(0) => return Err(fail("config", "--threads must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .kind("config")?;
    match cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Train(a) => train(a, cli.seed),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Tune(a) => tune(a),
    }
}

fn synth_kind(e: &SynthError) -> &'static str {
    match e {
        SynthError::ConfigInvalid(_) | SynthError::Placement(_) => "config",
        SynthError::Io { .. } => "io",
        _ => "compute",
    }
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            need(p, "scene configuration")?;
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).kind("io")?;
            serde_json::from_str::<SceneConfig>(&text)
                .with_context(|| format!("parsing {}", p.display()))
                .kind("config")?
        }
        None => SceneConfig::default(),
    };
    cfg.seed = seed;
    if let Some(n) = a.frames {
        cfg.frames = n;
    }
    if let Some(n) = a.cameras {
        cfg.cameras = n;
    }
    if let Some(fraction) = a.corrupt_fraction {
        cfg.corruptions.push(CorruptionSpec {
            fraction,
            views: a.corrupt_views,
            mode: a.corrupt_mode.into(),
            magnitude: a.corrupt_magnitude,
            limbs: Vec::new(),
        });
    }
    let dataset = gen_scene(&cfg).map_err(|e| Failure {
        kind: synth_kind(&e),
        error: e.into(),
    })?;
    let manifest = dataset.save(&a.out).map_err(|e| Failure {
        kind: synth_kind(&e),
        error: e.into(),
    })?;
    log::info!("wrote {} frames to {}", dataset.frames.len(), a.out.display());
    println!("{}", json!({ "manifest": manifest, "frames": dataset.frames.len(), "cameras": cfg.cameras }));
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    need(path, "dataset")?;
    Dataset::load(path).kind("data")
}

fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let opts = ModelGenOptions {
        types: a.types,
        levels: a.levels,
        seed,
        ..ModelGenOptions::default()
    };
    let g = gen_model_from_scene(&dataset, &opts).map_err(|e| Failure {
        kind: synth_kind(&e),
        error: e.into(),
    })?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display())).kind("io")?;
    save_model(&g.model, &a.out.join(MODEL_FILE)).kind("io")?;
    Sidecar {
        lambda: g.lambda.table.tables.clone(),
        taus: g.taus.clone(),
        alpha: None,
        beta: None,
    }
    .save(&a.out.join(COUPLING_FILE))
    .kind("io")?;
    let part_means: Vec<f64> = g
        .train_errors
        .iter()
        .map(|e| e.iter().sum::<f64>() / e.len().max(1) as f64)
        .collect();
    let mean = part_means.iter().sum::<f64>() / part_means.len().max(1) as f64;
    let report = json!({
        "taus": g.taus,
        "lambda_eligible": g.lambda.eligible,
        "lambda_fallback_parts": g.lambda.fallback_parts,
        "train_part_error_px": part_means,
        "train_mean_error_px": mean,
        "cell_size_px": opts.cell_size,
    });
    write_json(&a.out.join("train_report.json"), &report)?;
    println!("{}", json!({ "model": a.out.join(MODEL_FILE), "coupling": a.out.join(COUPLING_FILE), "train_mean_error_px": mean }));
    Ok(())
}

struct Inputs {
    dataset: Dataset,
    rig: CameraRig,
    model: KinematicModel,
    coupling: Option<Sidecar>,
}

fn load_inputs(i: &ModelInputs, coupling_required: bool) -> Result<Inputs> {
    need(&i.model, "model")?;
    let model = load_model(&i.model).kind("model")?;
    let coupling_path = i.coupling.clone().unwrap_or_else(|| {
        i.model.parent().map_or_else(|| PathBuf::from(COUPLING_FILE), |d| d.join(COUPLING_FILE))
    });
    let coupling = if coupling_required || i.coupling.is_some() {
        need(&coupling_path, "coupling file")?;
        let s = Sidecar::load(&coupling_path).kind("model")?;
        if s.taus.len() != model.num_parts || s.lambda.len() != model.num_parts {
            return Err(fail(
                "model",
                format!("{} does not match the model's {} parts", coupling_path.display(), model.num_parts),
            ));
        }
        Some(s)
    } else {
        None
    };
    let dataset = load_dataset(&i.data)?;
    let rig = match &i.calib {
        Some(p) => {
            need(p, "calibration")?;
            CameraRig::load(p).kind("config")?
        }
        None => dataset.rig.clone(),
    };
    if rig.len() != dataset.config.cameras {
        return Err(fail(
            "config",
            format!("calibration has {} cameras, dataset has {} views", rig.len(), dataset.config.cameras),
        ));
    }
    Ok(Inputs {
        dataset,
        rig,
        model,
        coupling,
    })
}

fn ground_truth_2d(d: &Dataset) -> Vec<Vec<Vec<[f64; 2]>>> {
    d.frames.iter().map(|f| f.gt2d.clone()).collect()
}

fn infer(a: InferArgs) -> Result<()> {
    let inp = load_inputs(&a.inputs, a.mode == Mode::Multi)?;
    let maps = dataset_maps(&inp.dataset, &inp.model).kind("compute")?;
    let gt = ground_truth_2d(&inp.dataset);
    let table;
    let mode = match (&a.mode, &inp.coupling) {
        (Mode::Multi, Some(c)) => {
            table = c.table().kind("model")?;
            let alpha = check_weight("--alpha", a.alpha.or(c.alpha).unwrap_or(DEFAULT_ALPHA))?;
            let beta = check_weight("--beta", a.beta.or(c.beta).unwrap_or(DEFAULT_BETA))?;
            let mut params = MultiParams::new(alpha, beta, a.estimator.into());
            params.options.max_iters = a.max_iters;
            log::info!("multi-view inference with alpha {alpha}, beta {beta}, estimator {:?}", a.estimator);
            InferMode::Multi {
                lambda: &table,
                taus: &c.taus,
                params,
            }
        }
        _ => InferMode::Single,
    };
    let frames = infer_frames(&maps, &inp.model, &inp.rig, &mode, Some(&gt)).kind("compute")?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display())).kind("io")?;
    for (f, fp) in frames.iter().enumerate() {
        for (v, pf) in pose_files(fp).iter().enumerate() {
            write_json(&a.out.join(pose_file_name(f, v)), pf)?;
        }
    }
    if let InferMode::Multi { .. } = mode {
        let traces: Vec<_> = frames
            .iter()
            .enumerate()
            .map(|(f, fp)| json!({ "frame": f, "pairs": fp.pairs }))
            .collect();
        write_json(&a.out.join("traces.json"), &traces)?;
    }
    println!("{}", json!({ "frames": frames.len(), "views": inp.rig.len(), "out": a.out }));
    Ok(())
}

fn read_poses(dir: &Path, frames: usize, views: usize) -> Result<Vec<Vec<Option<Pose2D>>>> {
    need(dir, "pose directory")?;
    (0..frames)
        .map(|f| {
            (0..views)
                .map(|v| {
                    let path = dir.join(pose_file_name(f, v));
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading pose file {}", path.display()))
                        .kind("data")?;
                    let pf: PoseFile = serde_json::from_str(&text)
                        .with_context(|| format!("parsing pose file {}", path.display()))
                        .kind("data")?;
                    if pf.view != v {
                        return Err(fail("data", format!("{} holds view {}, expected {v}", path.display(), pf.view)));
                    }
                    Ok(pf.pose())
                })
                .collect()
        })
        .collect()
}

/// The requested thresholds plus a regular sweep for the curve.
fn curve_gammas(gammas: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).chain(gammas.iter().copied()).collect();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

fn eval(a: EvalArgs) -> Result<()> {
    check_gammas(&a.gamma)?;
    let dataset = load_dataset(&a.data)?;
    let rig = match &a.calib {
        Some(p) => {
            need(p, "calibration")?;
            CameraRig::load(p).kind("config")?
        }
        None => dataset.rig.clone(),
    };
    let views = dataset.config.cameras;
    let poses = read_poses(&a.poses, dataset.frames.len(), views)?;
    let segments = dataset.skeleton.segments();
    let joints: Vec<Vec<[f64; 3]>> = dataset.frames.iter().map(|f| f.joints.clone()).collect();
    let ev = evaluate(&poses, &rig, &joints, &segments, &a.gamma).kind("compute")?;
    let gt3: Vec<_> = joints.iter().map(|j| gt_segments(j, &segments)).collect();
    let curve = pcp_curve(&ev.lifted, &gt3, &curve_gammas(&a.gamma)).kind("compute")?;
    let gt2 = ground_truth_2d(&dataset);
    let names: Vec<String> = segments.iter().map(|&(_, c)| dataset.skeleton.names[c].clone()).collect();
    let (_, own) = paired_errors_2d(&poses, &poses, &gt2);
    let mean_2d = own.iter().sum::<f64>() / own.len().max(1) as f64;
    let histogram = match &a.baseline {
        Some(dir) => {
            let base = read_poses(dir, dataset.frames.len(), views)?;
            let (b, o) = paired_errors_2d(&base, &poses, &gt2);
            Some(improvement_histogram(&b, &o).kind("compute")?)
        }
        None => None,
    };
    let report = json!({
        "frames": dataset.frames.len(),
        "segments": names,
        "pcp": ev.pcp,
        "mean_error_3d": ev.mean_error,
        "segment_errors_3d": ev.segment_errors,
        "mean_error_2d_px": mean_2d,
        "curve": curve,
        "histogram": histogram,
    });
    write_json(&a.out, &report)?;
    if a.plots {
        let stem = a.out.with_extension("");
        let bars = svg::bar_chart(&format!("PCP3D per segment (gamma = {})", a.gamma[0]), &names, &ev.pcp[0].rates, 100.0);
        let line = svg::line_chart("PCP3D versus gamma", "gamma", "PCP3D (%)", &curve, 100.0);
        for (suffix, body) in [("parts", bars), ("curve", line)] {
            let path = PathBuf::from(format!("{}_{suffix}.svg", stem.display()));
            std::fs::write(&path, body).with_context(|| format!("writing {}", path.display())).kind("io")?;
        }
    }
    println!("{}", json!({ "overall": ev.pcp.iter().map(|r| (r.gamma, r.overall)).collect::<Vec<_>>(), "mean_error_3d": ev.mean_error }));
    Ok(())
}

fn tune(a: TuneArgs) -> Result<()> {
    check_gammas(&a.gamma)?;
    for v in a.grid_alpha.iter().chain(&a.grid_beta) {
        check_weight("grid values", *v)?;
    }
    let inp = load_inputs(&a.inputs, true)?;
    let coupling = inp.coupling.as_ref().expect("coupling is required");
    let table = coupling.table().kind("model")?;
    let maps = dataset_maps(&inp.dataset, &inp.model).kind("compute")?;
    let gt = ground_truth_2d(&inp.dataset);
    let joints: Vec<Vec<[f64; 3]>> = inp.dataset.frames.iter().map(|f| f.joints.clone()).collect();
    let segments = inp.dataset.skeleton.segments();
    let metric = |alpha: f64, beta: f64| -> anyhow::Result<f64> {
        let mut params = MultiParams::new(alpha, beta, a.estimator.into());
        params.options.max_iters = a.max_iters;
        let mode = InferMode::Multi {
            lambda: &table,
            taus: &coupling.taus,
            params,
        };
        let frames = infer_frames(&maps, &inp.model, &inp.rig, &mode, Some(&gt))?;
        let poses: Vec<_> = frames.into_iter().map(|f| f.poses).collect();
        let ev = evaluate(&poses, &inp.rig, &joints, &segments, &a.gamma)?;
        Ok(match a.metric {
            Metric::Error => -ev.mean_error,
            Metric::Pcp => ev.pcp[0].overall,
        })
    };
    let result = tune_alpha_beta(&a.grid_alpha, &a.grid_beta, metric).kind("compute")?;
    write_json(
        &a.out,
        &json!({
            "alpha": result.alpha,
            "beta": result.beta,
            "score": result.score,
            "metric": format!("{:?}", a.metric).to_lowercase(),
            "surface": result.surface,
        }),
    )?;
    if a.write_coupling {
        let path = a.inputs.coupling.clone().unwrap_or_else(|| {
            a.inputs.model.parent().map_or_else(|| PathBuf::from(COUPLING_FILE), |d| d.join(COUPLING_FILE))
        });
        let mut s = coupling.clone();
        s.alpha = Some(result.alpha);
        s.beta = Some(result.beta);
        s.save(&path).kind("io")?;
    }
    println!("{}", json!({ "alpha": result.alpha, "beta": result.beta, "score": result.score }));
    Ok(())
}
