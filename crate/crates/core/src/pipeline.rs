//! Per-frame orchestration shared by the command line and end-to-end tests:
//! single-view or pairwise joint inference over all views, fusion of the
//! per-arrangement candidates, lifting to 3D and error bookkeeping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{fuse_views, lift_to_3d, pcp_report, segment_errors, EvalError, PcpReport};
use crate::features::ScoreMaps;
use crate::geometry::CameraRig;
use crate::infer::{best_pose, InferError};
use crate::joint::{
    joint_infer, ConstantZeroEstimator, CooccurrenceTable, Coupling, ErrorEstimator, JointError, JointOptions,
    OracleEstimator, ScoreHeuristicEstimator, TraceEntry,
};
use crate::model::{single_view_energy, KinematicModel, ModelError, Pose2D, Pose3D};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("the oracle estimator needs ground-truth positions")]
    OracleWithoutGroundTruth,
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Joint(#[from] JointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorChoice {
    Oracle,
    Heuristic,
    Off,
}

#[derive(Debug, Clone, Copy)]
pub struct MultiParams {
    pub alpha: f64,
    pub beta: f64,
    pub estimator: EstimatorChoice,
    pub heuristic: ScoreHeuristicEstimator,
    pub options: JointOptions,
}

impl MultiParams {
    pub fn new(alpha: f64, beta: f64, estimator: EstimatorChoice) -> Self {
        Self {
            alpha,
            beta,
            estimator,
            heuristic: ScoreHeuristicEstimator::default(),
            options: JointOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSummary {
    pub view_a: usize,
    pub view_b: usize,
    pub rounds: usize,
    pub converged: bool,
    pub initial_energy: f64,
    pub trace: Vec<TraceEntry>,
}

/// Final per-view poses of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePoses {
    pub poses: Vec<Option<Pose2D>>,
    /// Single-view energy of the highest-scoring candidate of each view.
    pub energies: Vec<Option<f64>>,
    pub pairs: Vec<PairSummary>,
}

fn energies(model: &KinematicModel, maps: &[ScoreMaps], best: &[Option<Pose2D>]) -> Result<Vec<Option<f64>>> {
    best.iter()
        .zip(maps)
        .map(|(p, m)| p.as_ref().map(|p| single_view_energy(model, p, m)).transpose().map_err(Into::into))
        .collect()
}

/// Independent single-view inference in every view.
pub fn infer_frame_single(maps: &[ScoreMaps], model: &KinematicModel) -> Result<FramePoses> {
    let poses: Vec<Option<Pose2D>> = maps
        .iter()
        .map(|m| Ok(best_pose(m, model, None)?.map(|c| c.pose)))
        .collect::<Result<_>>()?;
    Ok(FramePoses {
        energies: energies(model, maps, &poses)?,
        poses,
        pairs: Vec::new(),
    })
}

/// Joint inference on every view pair, then per-view averaging of the
/// candidates each view received. A view without a detection contributes
/// nothing; its partner keeps its single-view pose for that pair.
pub fn infer_frame_multi(
    maps: &[ScoreMaps],
    model: &KinematicModel,
    rig: &CameraRig,
    lambda: &CooccurrenceTable,
    taus: &[f64],
    params: &MultiParams,
    ground_truth: Option<&[Vec<[f64; 2]>]>,
) -> Result<FramePoses> {
    let oracle;
    let estimator: &dyn ErrorEstimator = match params.estimator {
        EstimatorChoice::Oracle => {
            oracle = OracleEstimator {
                ground_truth: ground_truth.ok_or(PipelineError::OracleWithoutGroundTruth)?.to_vec(),
            };
            &oracle
        }
        EstimatorChoice::Heuristic => &params.heuristic,
        EstimatorChoice::Off => &ConstantZeroEstimator,
    };
    let n = maps.len();
    let single: Vec<Option<Pose2D>> = maps
        .iter()
        .map(|m| Ok(best_pose(m, model, None)?.map(|c| c.pose)))
        .collect::<Result<_>>()?;
    let mut candidates: Vec<Vec<Pose2D>> = vec![Vec::new(); n];
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let coupling = Coupling {
                rig,
                lambda,
                view_a: a,
                view_b: b,
                alpha: params.alpha,
                beta: params.beta,
            };
            match joint_infer(&maps[a], &maps[b], model, &coupling, estimator, taus, &params.options) {
                Ok(r) => {
                    candidates[a].push(r.pose_a);
                    candidates[b].push(r.pose_b);
                    pairs.push(PairSummary {
                        view_a: a,
                        view_b: b,
                        rounds: r.rounds,
                        converged: r.converged,
                        initial_energy: r.initial_energy,
                        trace: r.trace,
                    });
                }
                Err(JointError::NoDetection(v)) => {
                    log::warn!("views ({a}, {b}): no detection in view {v}, keeping single-view results");
                    for u in [a, b] {
                        if let Some(p) = &single[u] {
                            candidates[u].push(p.clone());
                        }
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    let mut poses = Vec::with_capacity(n);
    let mut best = Vec::with_capacity(n);
    for (v, c) in candidates.iter().enumerate() {
        if c.is_empty() {
            poses.push(None);
            best.push(None);
            continue;
        }
        let top = c.iter().fold(&c[0], |b, p| if p.score > b.score { p } else { b });
        best.push(Some(top.clone()));
        poses.push(Some(fuse_views(v, c)?));
    }
    Ok(FramePoses {
        energies: energies(model, maps, &best)?,
        poses,
        pairs,
    })
}

/// Triangulated joints and segments from every view with a pose.
pub fn lift_frame(poses: &[Option<Pose2D>], rig: &CameraRig, segments: &[(usize, usize)]) -> Result<(Vec<Option<[f64; 3]>>, Pose3D)> {
    let views: Vec<(usize, &Pose2D)> = poses.iter().enumerate().filter_map(|(v, p)| p.as_ref().map(|p| (v, p))).collect();
    if views.is_empty() {
        let k = segments.iter().map(|s| s.0.max(s.1) + 1).max().unwrap_or(0);
        return Ok((vec![None; k], Pose3D { segments: vec![None; segments.len()] }));
    }
    Ok(lift_to_3d(&views, rig, segments)?)
}

/// Ground-truth segments from 3D joints.
pub fn gt_segments(joints: &[[f64; 3]], segments: &[(usize, usize)]) -> Pose3D {
    Pose3D {
        segments: segments.iter().map(|&(s, e)| Some((joints[s], joints[e]))).collect(),
    }
}

/// Pixel error per `[view][part]`; `None` where the view has no pose.
pub fn part_errors_2d(poses: &[Option<Pose2D>], gt: &[Vec<[f64; 2]>]) -> Vec<Option<Vec<f64>>> {
    poses
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            p.as_ref().map(|p| {
                p.positions
                    .iter()
                    .zip(g)
                    .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
                    .collect()
            })
        })
        .collect()
}

/// Mean endpoint errors per segment of a lifted frame.
pub fn frame_segment_errors(est: &Pose3D, gt: &Pose3D) -> Vec<Option<f64>> {
    segment_errors(est, gt)
}

#[derive(Debug, Clone, Copy)]
pub enum InferMode<'a> {
    Single,
    Multi {
        lambda: &'a CooccurrenceTable,
        taus: &'a [f64],
        params: MultiParams,
    },
}

/// Frame-parallel inference over `maps[frame][view]`. Results keep frame order.
/// `ground_truth[frame][view][part]` feeds the oracle estimator.
pub fn infer_frames(
    maps: &[Vec<ScoreMaps>],
    model: &KinematicModel,
    rig: &CameraRig,
    mode: &InferMode,
    ground_truth: Option<&[Vec<Vec<[f64; 2]>>]>,
) -> Result<Vec<FramePoses>> {
    maps.par_iter()
        .enumerate()
        .map(|(f, m)| match mode {
            InferMode::Single => infer_frame_single(m, model),
            InferMode::Multi { lambda, taus, params } => {
                let gt = ground_truth.map(|g| g[f].as_slice());
                infer_frame_multi(m, model, rig, lambda, taus, params, gt)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub pcp: Vec<PcpReport>,
    /// Mean endpoint error over all estimated segments, world units.
    pub mean_error: f64,
    /// Mean endpoint error per segment.
    pub segment_errors: Vec<f64>,
    #[serde(skip)]
    pub lifted: Vec<Pose3D>,
}

/// Lifts per-frame view poses to 3D and scores them against ground-truth
/// joints `joints[frame][part]` at every threshold in `gammas`.
pub fn evaluate(
    poses: &[Vec<Option<Pose2D>>],
    rig: &CameraRig,
    joints: &[Vec<[f64; 3]>],
    segments: &[(usize, usize)],
    gammas: &[f64],
) -> Result<Evaluation> {
    if poses.len() != joints.len() {
        return Err(EvalError::LengthMismatch(format!("{} pose frames, {} ground-truth frames", poses.len(), joints.len())).into());
    }
    let lifted: Vec<Pose3D> = poses
        .par_iter()
        .map(|p| Ok(lift_frame(p, rig, segments)?.1))
        .collect::<Result<_>>()?;
    let gt: Vec<Pose3D> = joints.iter().map(|j| gt_segments(j, segments)).collect();
    let pcp = gammas
        .iter()
        .map(|&g| pcp_report(&lifted, &gt, g))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut sums = vec![(0.0, 0usize); segments.len()];
    for (e, g) in lifted.iter().zip(&gt) {
        for (s, err) in segment_errors(e, g).into_iter().enumerate() {
            if let Some(err) = err {
                sums[s].0 += err;
                sums[s].1 += 1;
            }
        }
    }
    let (total, count) = sums.iter().fold((0.0, 0), |a, s| (a.0 + s.0, a.1 + s.1));
    Ok(Evaluation {
        pcp,
        mean_error: if count == 0 { f64::NAN } else { total / count as f64 },
        segment_errors: sums.iter().map(|s| if s.1 == 0 { f64::NAN } else { s.0 / s.1 as f64 }).collect(),
        lifted,
    })
}

/// Per-part 2D errors of two runs over `[frame][view]` poses, flattened and
/// restricted to entries where both runs have a pose.
pub fn paired_errors_2d(
    baseline: &[Vec<Option<Pose2D>>],
    ours: &[Vec<Option<Pose2D>>],
    gt: &[Vec<Vec<[f64; 2]>>],
) -> (Vec<f64>, Vec<f64>) {
    let mut out = (Vec::new(), Vec::new());
    for ((b, o), g) in baseline.iter().zip(ours).zip(gt) {
        let eb = part_errors_2d(b, g);
        let eo = part_errors_2d(o, g);
        for (x, y) in eb.into_iter().zip(eo) {
            if let (Some(x), Some(y)) = (x, y) {
                out.0.extend(x);
                out.1.extend(y);
            }
        }
    }
    out
}

/// One part of a pose file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartRecord {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "type")]
    pub part_type: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// On-disk pose of one view of one frame. A view without a detection has no
/// parts and null level and energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub view: usize,
    pub level: Option<usize>,
    pub parts: Vec<PartRecord>,
    pub energy: Option<f64>,
}

impl PoseFile {
    pub fn new(view: usize, pose: Option<&Pose2D>, energy: Option<f64>) -> Self {
        match pose {
            None => Self {
                view,
                level: None,
                parts: Vec::new(),
                energy: None,
            },
            Some(p) => Self {
                view,
                level: Some(p.level),
                parts: p
                    .positions
                    .iter()
                    .zip(&p.types)
                    .map(|(q, &t)| PartRecord {
                        x: q[0],
                        y: q[1],
                        part_type: t,
                        score: None,
                    })
                    .collect(),
                energy,
            },
        }
    }

    /// The stored pose; its score is the stored energy.
    pub fn pose(&self) -> Option<Pose2D> {
        let level = self.level?;
        Some(Pose2D {
            positions: self.parts.iter().map(|p| [p.x, p.y]).collect(),
            types: self.parts.iter().map(|p| p.part_type).collect(),
            score: self.energy.unwrap_or(f64::NAN),
            level,
        })
    }
}

/// Pose files of one frame, in view order.
pub fn pose_files(poses: &FramePoses) -> Vec<PoseFile> {
    poses
        .poses
        .iter()
        .zip(&poses.energies)
        .enumerate()
        .map(|(v, (p, e))| PoseFile::new(v, p.as_ref(), *e))
        .collect()
}

/// File name of a frame's view pose.
pub fn pose_file_name(frame: usize, view: usize) -> String {
    format!("frame{frame:04}_view{view}.json")
}
