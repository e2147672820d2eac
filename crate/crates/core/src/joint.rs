//! Two-view joint estimation.
//!
//! One view is held fixed as the support while the other is re-solved
//! exactly with the support's epipolar and type co-occurrence terms folded
//! into its unary maps and type biases; the roles then swap. Each half-step
//! is an exact conditional maximization of the joint energy, so the energy
//! never decreases along the trace.

use nalgebra::Point2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dt::Map2;
use crate::features::ScoreMaps;
use crate::geometry::{CameraRig, GeometryError};
use crate::infer::{best_pose, infer_argmax, InferError, SupportAugment};
use crate::model::{single_view_energy, KinematicModel, ModelError, Pose2D};

#[derive(Debug, Error)]
pub enum JointError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("no detection above threshold in view {0}")]
    NoDetection(usize),
    #[error("invalid co-occurrence table: {0}")]
    InvalidTable(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, JointError>;

/// Per-part joint distribution over type pairs, `[part][t_first][t_second]`,
/// where "first" is the lower-indexed view of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceTable {
    pub tables: Vec<Vec<Vec<f64>>>,
}

impl CooccurrenceTable {
    pub fn uniform(parts: usize, types: usize) -> Self {
        let p = 1.0 / (types * types) as f64;
        Self {
            tables: vec![vec![vec![p; types]; types]; parts],
        }
    }

    pub fn new(tables: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let t = Self { tables };
        t.validate()?;
        Ok(t)
    }

    pub fn num_parts(&self) -> usize {
        self.tables.len()
    }

    pub fn num_types(&self) -> usize {
        self.tables.first().map_or(0, |t| t.len())
    }

    pub fn get(&self, part: usize, t_first: usize, t_second: usize) -> f64 {
        self.tables[part][t_first][t_second]
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.num_types();
        for (i, m) in self.tables.iter().enumerate() {
            if m.len() != t || m.iter().any(|r| r.len() != t) {
                return Err(JointError::InvalidTable(format!("part {i} is not {t}x{t}")));
            }
            if m.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(JointError::InvalidTable(format!("part {i} has a negative or non-finite entry")));
            }
            let sum: f64 = m.iter().flatten().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(JointError::InvalidTable(format!("part {i} sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Expected per-part pixel error of a single-view pose.
pub trait ErrorEstimator: Sync {
    fn estimate(&self, view: usize, maps: &ScoreMaps, pose: &Pose2D) -> Vec<f64>;
}

/// Distances to known ground truth, indexed by view. Test and tuning use only.
#[derive(Debug, Clone)]
pub struct OracleEstimator {
    pub ground_truth: Vec<Vec<[f64; 2]>>,
}

impl ErrorEstimator for OracleEstimator {
    fn estimate(&self, view: usize, _maps: &ScoreMaps, pose: &Pose2D) -> Vec<f64> {
        pose.positions
            .iter()
            .zip(&self.ground_truth[view])
            .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
            .collect()
    }
}

/// Weak unary responses predict large errors: `scale * exp(-(r - offset) / softness)`
/// where `r` is the part's filter response at its estimated position.
#[derive(Debug, Clone, Copy)]
pub struct ScoreHeuristicEstimator {
    pub scale: f64,
    pub offset: f64,
    pub softness: f64,
}

impl Default for ScoreHeuristicEstimator {
    fn default() -> Self {
        Self {
            scale: 4.0,
            offset: 0.0,
            softness: 1.0,
        }
    }
}

impl ErrorEstimator for ScoreHeuristicEstimator {
    fn estimate(&self, _view: usize, maps: &ScoreMaps, pose: &Pose2D) -> Vec<f64> {
        let Some(level) = maps.levels.get(pose.level) else {
            return vec![f64::INFINITY; pose.num_parts()];
        };
        pose.positions
            .iter()
            .zip(&pose.types)
            .enumerate()
            .map(|(i, (p, &t))| {
                let [x, y] = level.frame.to_grid(*p);
                match level.maps[i][t].at(x, y) {
                    Some(r) => self.scale * (-(r - self.offset) / self.softness).exp(),
                    None => f64::INFINITY,
                }
            })
            .collect()
    }
}

/// Always zero: every part stays coupled.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantZeroEstimator;

impl ErrorEstimator for ConstantZeroEstimator {
    fn estimate(&self, _view: usize, _maps: &ScoreMaps, pose: &Pose2D) -> Vec<f64> {
        vec![0.0; pose.num_parts()]
    }
}

/// A part stays coupled unless either view's estimated error exceeds its threshold.
pub fn adaptive_indicators(est_a: &[f64], est_b: &[f64], taus: &[f64]) -> Result<Vec<bool>> {
    if est_a.len() != taus.len() || est_b.len() != taus.len() {
        return Err(JointError::LengthMismatch(format!(
            "estimates {} and {}, thresholds {}",
            est_a.len(),
            est_b.len(),
            taus.len()
        )));
    }
    Ok(taus
        .iter()
        .zip(est_a.iter().zip(est_b))
        .map(|(tau, (a, b))| !(a > tau || b > tau))
        .collect())
}

/// The view pair and coupling parameters of a joint problem.
#[derive(Debug, Clone, Copy)]
pub struct Coupling<'a> {
    pub rig: &'a CameraRig,
    pub lambda: &'a CooccurrenceTable,
    pub view_a: usize,
    pub view_b: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Coupling<'_> {
    fn lambda(&self, part: usize, first: usize, second: usize) -> f64 {
        if self.view_a < self.view_b {
            self.lambda.get(part, first, second)
        } else {
            self.lambda.get(part, second, first)
        }
    }

    /// Consistency contribution of one part for positions/types given in
    /// (view_a, view_b) order.
    fn part_term(&self, part: usize, p_a: [f64; 2], t_a: usize, p_b: [f64; 2], t_b: usize) -> Result<f64> {
        let xi = self.rig.xi(self.view_a, &Point2::from(p_a), self.view_b, &Point2::from(p_b))?;
        Ok(self.alpha * xi + self.beta * self.lambda(part, t_a, t_b))
    }
}

/// Terms that a fixed support pose contributes to the free view's inference.
/// `free_is_a` selects which view of the coupling is being optimized; `grid`
/// is the free view's score maps.
pub fn build_augment(
    support: &Pose2D,
    free_is_a: bool,
    coupling: &Coupling,
    indicators: &[bool],
    grid: &ScoreMaps,
) -> Result<SupportAugment> {
    let k = support.num_parts();
    if indicators.len() != k || coupling.lambda.num_parts() != k {
        return Err(JointError::LengthMismatch(format!(
            "support has {k} parts, indicators {}, table {}",
            indicators.len(),
            coupling.lambda.num_parts()
        )));
    }
    let t_count = coupling.lambda.num_types();
    let (free_view, support_view) = if free_is_a {
        (coupling.view_a, coupling.view_b)
    } else {
        (coupling.view_b, coupling.view_a)
    };
    let mut unary_add = Vec::with_capacity(grid.levels.len());
    for level in &grid.levels {
        let mut maps = Vec::with_capacity(k);
        for i in 0..k {
            let mut m = Map2::filled(level.width, level.height, 0.0);
            if indicators[i] && coupling.alpha != 0.0 {
                let ps = Point2::from(support.positions[i]);
                for y in 0..level.height {
                    for x in 0..level.width {
                        let pf = Point2::from(level.frame.to_pixel(x as i64, y as i64));
                        let xi = coupling.rig.xi(free_view, &pf, support_view, &ps)?;
                        m.set(x, y, coupling.alpha * xi);
                    }
                }
            }
            maps.push(m);
        }
        unary_add.push(maps);
    }
    let type_bias_add = (0..k)
        .map(|i| {
            let ts = support.types[i];
            (0..t_count)
                .map(|t| {
                    if !indicators[i] || coupling.beta == 0.0 {
                        0.0
                    } else if free_is_a {
                        coupling.beta * coupling.lambda(i, t, ts)
                    } else {
                        coupling.beta * coupling.lambda(i, ts, t)
                    }
                })
                .collect()
        })
        .collect();
    Ok(SupportAugment {
        unary_add,
        type_bias_add,
        indicators: indicators.to_vec(),
    })
}

/// Joint energy of a pose pair: both single-view energies plus the gated
/// epipolar and co-occurrence terms.
pub fn global_energy(
    maps_a: &ScoreMaps,
    maps_b: &ScoreMaps,
    model: &KinematicModel,
    pose_a: &Pose2D,
    pose_b: &Pose2D,
    coupling: &Coupling,
    indicators: &[bool],
) -> Result<f64> {
    let mut total = single_view_energy(model, pose_a, maps_a)? + single_view_energy(model, pose_b, maps_b)?;
    for (i, on) in indicators.iter().enumerate() {
        if *on {
            total += coupling.part_term(i, pose_a.positions[i], pose_a.types[i], pose_b.positions[i], pose_b.types[i])?;
        }
    }
    Ok(total)
}

/// Initial support choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SupportRule {
    /// Lower mean estimated part error; ties go to view A.
    #[default]
    LowestError,
    /// Higher single-view score; ties go to view A.
    HighestScore,
}

#[derive(Debug, Clone, Copy)]
pub struct JointOptions {
    /// Maximum number of full rounds (two half-steps each).
    pub max_iters: usize,
    pub support_rule: SupportRule,
}

impl Default for JointOptions {
    fn default() -> Self {
        Self {
            max_iters: 20,
            support_rule: SupportRule::LowestError,
        }
    }
}

/// One half-step: which view was the support, and the joint energy after it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub support: usize,
    pub energy: f64,
    pub indicators: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointResult {
    pub pose_a: Pose2D,
    pub pose_b: Pose2D,
    /// Joint energy of the single-view starting pair.
    pub initial_energy: f64,
    pub trace: Vec<TraceEntry>,
    /// Full rounds performed.
    pub rounds: usize,
    pub converged: bool,
}

fn same_configuration(a: &Pose2D, b: &Pose2D) -> bool {
    a.positions == b.positions && a.types == b.types
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Alternating exact maximization of the joint energy over the two views.
///
/// Both views start from their single-view best pose. Gates are computed once
/// from those starting poses. Iteration stops when a full round leaves both
/// poses' positions and types unchanged, or after `max_iters` rounds.
pub fn joint_infer(
    maps_a: &ScoreMaps,
    maps_b: &ScoreMaps,
    model: &KinematicModel,
    coupling: &Coupling,
    estimator: &dyn ErrorEstimator,
    taus: &[f64],
    opts: &JointOptions,
) -> Result<JointResult> {
    let mut pose_a = best_pose(maps_a, model, None)?
        .ok_or(JointError::NoDetection(coupling.view_a))?
        .pose;
    let mut pose_b = best_pose(maps_b, model, None)?
        .ok_or(JointError::NoDetection(coupling.view_b))?
        .pose;
    let est_a = estimator.estimate(coupling.view_a, maps_a, &pose_a);
    let est_b = estimator.estimate(coupling.view_b, maps_b, &pose_b);
    let indicators = adaptive_indicators(&est_a, &est_b, taus)?;
    let mut support_is_a = match opts.support_rule {
        SupportRule::LowestError => mean(&est_a) <= mean(&est_b),
        SupportRule::HighestScore => pose_a.score >= pose_b.score,
    };
    let initial_energy = global_energy(maps_a, maps_b, model, &pose_a, &pose_b, coupling, &indicators)?;

    let mut trace = Vec::new();
    let mut rounds = 0;
    let mut converged = false;
    while rounds < opts.max_iters {
        rounds += 1;
        let (prev_a, prev_b) = (pose_a.clone(), pose_b.clone());
        for _ in 0..2 {
            let (support, free_maps, free_view) = if support_is_a {
                (&pose_a, maps_b, coupling.view_b)
            } else {
                (&pose_b, maps_a, coupling.view_a)
            };
            let aug = build_augment(support, !support_is_a, coupling, &indicators, free_maps)?;
            let cand = infer_argmax(free_maps, model, Some(&aug))?.ok_or(JointError::NoDetection(free_view))?;
            let support_view = if support_is_a { coupling.view_a } else { coupling.view_b };
            if support_is_a {
                pose_b = cand.pose;
            } else {
                pose_a = cand.pose;
            }
            let energy = global_energy(maps_a, maps_b, model, &pose_a, &pose_b, coupling, &indicators)?;
            trace.push(TraceEntry {
                support: support_view,
                energy,
                indicators: indicators.clone(),
            });
            support_is_a = !support_is_a;
        }
        if same_configuration(&prev_a, &pose_a) && same_configuration(&prev_b, &pose_b) {
            converged = true;
            break;
        }
    }
    log::debug!(
        "joint views ({}, {}): {rounds} rounds, converged {converged}",
        coupling.view_a,
        coupling.view_b
    );
    Ok(JointResult {
        pose_a,
        pose_b,
        initial_energy,
        trace,
        rounds,
        converged,
    })
}
