//! 3D evaluation: view fusion, triangulation to segments, PCP3D and error
//! difference histograms.

use std::collections::BTreeMap;

use nalgebra::Point2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{triangulate, CameraRig, GeometryError};
use crate::model::{Pose2D, Pose3D};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ground-truth segment {0} has zero length")]
    ZeroLengthGT(usize),
    #[error("no candidates for view {0}")]
    NoCandidates(usize),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const DEFAULT_GAMMA: f64 = 0.5;

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean endpoint error of a segment, endpoints paired start-to-start.
pub fn segment_error(est: &([f64; 3], [f64; 3]), gt: &([f64; 3], [f64; 3])) -> f64 {
    (dist3(&gt.0, &est.0) + dist3(&gt.1, &est.1)) / 2.0
}

/// A segment is correct when its mean endpoint error is at most `gamma`
/// times the ground-truth length.
pub fn pcp3d_part(est: &([f64; 3], [f64; 3]), gt: &([f64; 3], [f64; 3]), gamma: f64) -> Result<bool> {
    let len = dist3(&gt.0, &gt.1);
    if len <= 0.0 {
        return Err(EvalError::ZeroLengthGT(0));
    }
    Ok(segment_error(est, gt) <= gamma * len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcpReport {
    pub gamma: f64,
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
    /// Per-segment percentage.
    pub rates: Vec<f64>,
    /// Mean of the per-segment percentages.
    pub overall: f64,
}

/// PCP3D over aligned frames. Missing estimated segments count as incorrect.
pub fn pcp_report(est: &[Pose3D], gt: &[Pose3D], gamma: f64) -> Result<PcpReport> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(format!("{} estimates, {} ground truths", est.len(), gt.len())));
    }
    let n = gt.first().map_or(0, |g| g.segments.len());
    let mut correct = vec![0; n];
    let mut total = vec![0; n];
    for (e, g) in est.iter().zip(gt) {
        if e.segments.len() != n || g.segments.len() != n {
            return Err(EvalError::LengthMismatch("segment counts differ between frames".into()));
        }
        for s in 0..n {
            let Some(gs) = &g.segments[s] else { continue };
            total[s] += 1;
            if let Some(es) = &e.segments[s] {
                if pcp3d_part(es, gs, gamma).map_err(|_| EvalError::ZeroLengthGT(s))? {
                    correct[s] += 1;
                }
            }
        }
    }
    let rates: Vec<f64> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { 100.0 * c as f64 / t as f64 })
        .collect();
    let overall = if n == 0 { 0.0 } else { rates.iter().sum::<f64>() / n as f64 };
    Ok(PcpReport {
        gamma,
        correct,
        total,
        rates,
        overall,
    })
}

/// Overall PCP3D for each threshold.
pub fn pcp_curve(est: &[Pose3D], gt: &[Pose3D], gammas: &[f64]) -> Result<Vec<(f64, f64)>> {
    gammas.iter().map(|&g| Ok((g, pcp_report(est, gt, g)?.overall))).collect()
}

/// Per-segment mean endpoint errors; `None` where the estimate is missing.
pub fn segment_errors(est: &Pose3D, gt: &Pose3D) -> Vec<Option<f64>> {
    est.segments
        .iter()
        .zip(&gt.segments)
        .map(|(e, g)| match (e, g) {
            (Some(e), Some(g)) => Some(segment_error(e, g)),
            _ => None,
        })
        .collect()
}

/// Averages one view's candidate poses from several pair arrangements.
/// Types, score and level come from the highest-scoring candidate (first on ties).
pub fn fuse_views(view: usize, candidates: &[Pose2D]) -> Result<Pose2D> {
    let first = candidates.first().ok_or(EvalError::NoCandidates(view))?;
    let k = first.num_parts();
    if candidates.iter().any(|c| c.num_parts() != k) {
        return Err(EvalError::LengthMismatch(format!("candidates for view {view} differ in part count")));
    }
    let best = candidates
        .iter()
        .fold(first, |b, c| if c.score > b.score { c } else { b });
    let n = candidates.len() as f64;
    // Accumulate offsets from the first candidate so identical inputs fuse exactly.
    let positions = (0..k)
        .map(|i| {
            let p0 = first.positions[i];
            let mut d = [0.0, 0.0];
            for c in &candidates[1..] {
                d[0] += c.positions[i][0] - p0[0];
                d[1] += c.positions[i][1] - p0[1];
            }
            [p0[0] + d[0] / n, p0[1] + d[1] / n]
        })
        .collect();
    Ok(Pose2D {
        positions,
        types: best.types.clone(),
        score: best.score,
        level: best.level,
    })
}

/// Triangulates every joint from the views that observe it, then assembles
/// `(start, end)` segments. Views are `(camera index, pose)`; non-finite
/// positions mark a missing observation. Joints seen in fewer than two views,
/// or whose triangulation fails, leave their segments missing.
pub fn lift_to_3d(views: &[(usize, &Pose2D)], rig: &CameraRig, segments: &[(usize, usize)]) -> Result<(Vec<Option<[f64; 3]>>, Pose3D)> {
    let k = views.first().map_or(0, |v| v.1.num_parts());
    let mut joints = Vec::with_capacity(k);
    for i in 0..k {
        let mut obs = Vec::new();
        for &(view, pose) in views {
            let p = pose.positions[i];
            if p[0].is_finite() && p[1].is_finite() {
                obs.push((rig.camera(view)?, Point2::new(p[0], p[1])));
            }
        }
        joints.push(match triangulate(&obs) {
            Ok(t) => Some([t.point.x, t.point.y, t.point.z]),
            Err(e) => {
                log::debug!("joint {i}: {e}");
                None
            }
        });
    }
    let segs = segments
        .iter()
        .map(|&(s, e)| match (joints.get(s).copied().flatten(), joints.get(e).copied().flatten()) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        })
        .collect();
    Ok((joints, Pose3D { segments: segs }))
}

/// Signed per-part error differences, baseline minus ours: positive entries
/// are improvements. Bins are 1px wide, centered on integers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementHistogram {
    pub bins: BTreeMap<i64, usize>,
    /// Entries that got worse by more than 1px.
    pub deteriorated: usize,
    /// Entries that got better by more than 1px.
    pub improved: usize,
    /// Sum of positive differences.
    pub improvement_mass: f64,
    /// Sum of magnitudes of negative differences.
    pub deterioration_mass: f64,
}

pub fn improvement_histogram(baseline: &[f64], ours: &[f64]) -> Result<ImprovementHistogram> {
    if baseline.len() != ours.len() {
        return Err(EvalError::LengthMismatch(format!("{} baseline vs {} errors", baseline.len(), ours.len())));
    }
    let mut h = ImprovementHistogram {
        bins: BTreeMap::new(),
        deteriorated: 0,
        improved: 0,
        improvement_mass: 0.0,
        deterioration_mass: 0.0,
    };
    for (b, o) in baseline.iter().zip(ours) {
        let d = b - o;
        *h.bins.entry(d.round() as i64).or_default() += 1;
        if d > 0.0 {
            h.improvement_mass += d;
        } else {
            h.deterioration_mass -= d;
        }
        if d > 1.0 {
            h.improved += 1;
        } else if d < -1.0 {
            h.deteriorated += 1;
        }
    }
    Ok(h)
}
