//! Exact single-view MAP inference over the kinematic tree.
//!
//! Messages flow leaf to root; each child-to-parent message is a generalized
//! distance transform of the child's score map, maximized over the child's
//! type. Every pyramid level is solved independently. An optional
//! [`SupportAugment`] adds the terms a fixed support view contributes, which
//! turns the conditional two-view problem into this single-view form.

use rayon::prelude::*;
use thiserror::Error;

use crate::dt::{gdt_2d_shifted, DtError, Map2};
use crate::features::{LevelMaps, ScoreMaps};
use crate::model::{KinematicModel, ModelError, Pose2D};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("model has no parts")]
    EmptyModel,
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Dt(#[from] DtError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, InferError>;

/// Terms contributed by a fixed support view, as seen by the free view.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportAugment {
    /// `[level][part]` additive unary maps on the free view's grids.
    pub unary_add: Vec<Vec<Map2>>,
    /// `[part][type]` additive type biases.
    pub type_bias_add: Vec<Vec<f64>>,
    /// Per-part gate; gated-off parts receive nothing.
    pub indicators: Vec<bool>,
}

impl SupportAugment {
    /// Augment contribution of a pose given in grid cells of `level`.
    pub fn score_at(&self, level: usize, cells: &[[i64; 2]], types: &[usize]) -> f64 {
        let mut total = 0.0;
        for (i, on) in self.indicators.iter().enumerate() {
            if !on {
                continue;
            }
            let [x, y] = cells[i];
            total += self.unary_add[level][i].at(x, y).unwrap_or(0.0) + self.type_bias_add[i][types[i]];
        }
        total
    }

    fn check(&self, maps: &ScoreMaps, model: &KinematicModel) -> Result<()> {
        if self.unary_add.len() != maps.levels.len() {
            return Err(InferError::GridMismatch(format!(
                "augment has {} levels, score maps have {}",
                self.unary_add.len(),
                maps.levels.len()
            )));
        }
        if self.indicators.len() != model.num_parts || self.type_bias_add.len() != model.num_parts {
            return Err(InferError::GridMismatch("augment part count differs from model".into()));
        }
        for (l, (aug, level)) in self.unary_add.iter().zip(&maps.levels).enumerate() {
            if aug.len() != model.num_parts
                || aug.iter().any(|m| m.width != level.width || m.height != level.height)
            {
                return Err(InferError::GridMismatch(format!("augment grid differs at level {l}")));
            }
        }
        if self.type_bias_add.iter().any(|b| b.len() != model.num_types) {
            return Err(InferError::GridMismatch("augment type biases must have T entries".into()));
        }
        Ok(())
    }
}

/// A detection: full pose plus root box `[x0, y0, x1, y1]` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub pose: Pose2D,
    pub root_score: f64,
    pub root_box: [f64; 4],
}

/// Per part and parent type, the best child `(type, x, y)` for each parent cell.
type BackPointers = Vec<Vec<(u16, u32, u32)>>;

struct LevelSolution {
    /// Root score per cell, maximized over root type.
    root: Map2,
    root_type: Vec<u16>,
    backs: Vec<Option<BackPointers>>,
}

fn solve_level(
    model: &KinematicModel,
    level: &LevelMaps,
    level_index: usize,
    augment: Option<&SupportAugment>,
) -> Result<LevelSolution> {
    let (w, h) = (level.width, level.height);
    let n = w * h;
    let t_count = model.num_types;
    let order = model.topological_order();
    // messages[part][parent type] from `part` to its parent.
    let mut messages: Vec<Option<Vec<Map2>>> = vec![None; model.num_parts];
    let mut backs: Vec<Option<BackPointers>> = vec![None; model.num_parts];
    let mut root = None;

    for &i in order.iter().rev() {
        let gated = augment.filter(|a| a.indicators[i]);
        let scores: Vec<Map2> = (0..t_count)
            .map(|t| {
                let unary = &level.maps[i][t];
                let bias = model.unary_bias[i][t];
                let mut data: Vec<f64> = unary.data.iter().map(|v| v + bias).collect();
                if let Some(aug) = gated {
                    let add = &aug.unary_add[level_index][i];
                    let tb = aug.type_bias_add[i][t];
                    for (d, a) in data.iter_mut().zip(&add.data) {
                        *d += a + tb;
                    }
                }
                for k in model.children(i) {
                    let msg = &messages[k].as_ref().expect("children are solved first")[t];
                    for (d, m) in data.iter_mut().zip(&msg.data) {
                        *d += m;
                    }
                }
                Map2::new(w, h, data)
            })
            .collect();
        for k in model.children(i) {
            messages[k] = None;
        }

        let Some(edge) = model.edge_to(i) else {
            root = Some(scores);
            continue;
        };
        let mut msgs = Vec::with_capacity(t_count);
        let mut part_backs = Vec::with_capacity(t_count);
        for tp in 0..t_count {
            let mut best = vec![f64::NEG_INFINITY; n];
            let mut back = vec![(0u16, 0u32, 0u32); n];
            for (ti, score) in scores.iter().enumerate() {
                let d = edge.deform[ti][tp];
                // Spring on (p_child - anchor) - p_parent, expressed on the
                // transform's (target - source) displacement.
                let anchor = edge.anchors[ti];
                let dt = gdt_2d_shifted(score, &[-d[0], d[1], -d[2], d[3]], (anchor[0], anchor[1]))?;
                let pb = edge.pair_bias[ti][tp];
                for c in 0..n {
                    let v = dt.values.data[c] + pb;
                    if v > best[c] {
                        best[c] = v;
                        back[c] = (ti as u16, dt.argx[c] as u32, dt.argy[c] as u32);
                    }
                }
            }
            msgs.push(Map2::new(w, h, best));
            part_backs.push(back);
        }
        messages[i] = Some(msgs);
        backs[i] = Some(part_backs);
    }

    let root_scores = root.expect("tree has a root");
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut root_type = vec![0u16; n];
    for (t, s) in root_scores.iter().enumerate() {
        for c in 0..n {
            if s.data[c] > best[c] {
                best[c] = s.data[c];
                root_type[c] = t as u16;
            }
        }
    }
    Ok(LevelSolution {
        root: Map2::new(w, h, best),
        root_type,
        backs,
    })
}

fn backtrack(model: &KinematicModel, sol: &LevelSolution, width: usize, x: usize, y: usize) -> (Vec<[i64; 2]>, Vec<usize>) {
    let k = model.num_parts;
    let mut cells = vec![[0i64; 2]; k];
    let mut types = vec![0usize; k];
    let root = model.root();
    cells[root] = [x as i64, y as i64];
    types[root] = sol.root_type[y * width + x] as usize;
    for i in model.topological_order() {
        if i == root {
            continue;
        }
        let parent = model.parents[i].expect("non-root has a parent");
        let [px, py] = cells[parent];
        let back = &sol.backs[i].as_ref().expect("non-root has back pointers")[types[parent]];
        let (t, sx, sy) = back[py as usize * width + px as usize];
        cells[i] = [sx as i64, sy as i64];
        types[i] = t as usize;
    }
    (cells, types)
}

fn make_candidate(
    model: &KinematicModel,
    level: &LevelMaps,
    level_index: usize,
    cells: &[[i64; 2]],
    types: Vec<usize>,
    score: f64,
) -> Candidate {
    let positions: Vec<[f64; 2]> = cells.iter().map(|c| level.frame.to_pixel(c[0], c[1])).collect();
    let (fw, fh) = model.filter_extent();
    let half_w = level.frame.cells_to_pixels(fw as f64) / 2.0;
    let half_h = level.frame.cells_to_pixels(fh as f64) / 2.0;
    let [rx, ry] = positions[model.root()];
    Candidate {
        pose: Pose2D {
            positions,
            types,
            score,
            level: level_index,
        },
        root_score: score,
        root_box: [rx - half_w, ry - half_h, rx + half_w, ry + half_h],
    }
}

fn check_inputs(maps: &ScoreMaps, model: &KinematicModel, augment: Option<&SupportAugment>) -> Result<()> {
    if model.num_parts == 0 {
        return Err(InferError::EmptyModel);
    }
    for (l, level) in maps.levels.iter().enumerate() {
        if level.maps.len() != model.num_parts
            || level.maps.iter().any(|ms| {
                ms.len() != model.num_types || ms.iter().any(|m| m.width != level.width || m.height != level.height)
            })
        {
            return Err(InferError::GridMismatch(format!("score maps at level {l} do not match the model")));
        }
    }
    if let Some(aug) = augment {
        aug.check(maps, model)?;
    }
    Ok(())
}

fn solve_all(model: &KinematicModel, maps: &ScoreMaps, augment: Option<&SupportAugment>) -> Result<Vec<LevelSolution>> {
    check_inputs(maps, model, augment)?;
    maps.levels
        .par_iter()
        .enumerate()
        .map(|(l, level)| solve_level(model, level, l, augment))
        .collect()
}

/// Orders by descending score, then level, row, column.
fn rank(a: &(f64, usize, usize, usize), b: &(f64, usize, usize, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
        .then(a.3.cmp(&b.3))
}

/// All root placements scoring at least the model's detection threshold,
/// backtracked to full poses and sorted by descending score.
pub fn infer(maps: &ScoreMaps, model: &KinematicModel, augment: Option<&SupportAugment>) -> Result<Vec<Candidate>> {
    let solutions = solve_all(model, maps, augment)?;
    let mut hits = Vec::new();
    for (l, sol) in solutions.iter().enumerate() {
        let w = maps.levels[l].width;
        for (c, &s) in sol.root.data.iter().enumerate() {
            if s >= model.detection_threshold {
                hits.push((s, l, c / w, c % w));
            }
        }
    }
    hits.sort_by(rank);
    Ok(hits
        .into_iter()
        .map(|(s, l, y, x)| {
            let (cells, types) = backtrack(model, &solutions[l], maps.levels[l].width, x, y);
            make_candidate(model, &maps.levels[l], l, &cells, types, s)
        })
        .collect())
}

/// The maximizing pose over all levels regardless of the detection threshold.
/// `None` only when there is no grid position at all.
pub fn infer_argmax(maps: &ScoreMaps, model: &KinematicModel, augment: Option<&SupportAugment>) -> Result<Option<Candidate>> {
    let solutions = solve_all(model, maps, augment)?;
    let mut best: Option<(f64, usize, usize, usize)> = None;
    for (l, sol) in solutions.iter().enumerate() {
        let w = maps.levels[l].width;
        for (c, &s) in sol.root.data.iter().enumerate() {
            let hit = (s, l, c / w, c % w);
            if best.is_none_or(|b| rank(&hit, &b).is_lt()) {
                best = Some(hit);
            }
        }
    }
    Ok(best.map(|(s, l, y, x)| {
        let (cells, types) = backtrack(model, &solutions[l], maps.levels[l].width, x, y);
        make_candidate(model, &maps.levels[l], l, &cells, types, s)
    }))
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy suppression over score-sorted candidates: a candidate is dropped
/// when its root box overlaps an already kept one by more than `overlap`.
pub fn nms(candidates: Vec<Candidate>, overlap: f64) -> Vec<Candidate> {
    let mut kept: Vec<Candidate> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| iou(&k.root_box, &c.root_box) <= overlap) {
            kept.push(c);
        }
    }
    kept
}

pub const DEFAULT_NMS_OVERLAP: f64 = 0.3;

/// Top candidate after thresholding and suppression.
pub fn best_pose(maps: &ScoreMaps, model: &KinematicModel, augment: Option<&SupportAugment>) -> Result<Option<Candidate>> {
    Ok(nms(infer(maps, model, augment)?, DEFAULT_NMS_OVERLAP).into_iter().next())
}
