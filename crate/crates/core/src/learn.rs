//! Training: type clustering, template filters, the co-occurrence prior,
//! gating thresholds and the coupling weight search.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::ScoreMaps;
use crate::infer::{best_pose, InferError};
use crate::joint::{CooccurrenceTable, JointError};
use crate::model::{Filter, KinematicModel};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("no training pairs")]
    NoPairs,
    #[error("error tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("part {0} has no error samples")]
    EmptyErrors(usize),
    #[error("part {part} has {have} samples, needs at least {need}")]
    InsufficientSamples { part: usize, have: usize, need: usize },
    #[error("no patches for part {part} type {t}")]
    EmptyGroup { part: usize, t: usize },
    #[error("patch shapes differ")]
    PatchShape,
    #[error("empty search grid")]
    EmptyGrid,
    #[error("sidecar {path}: {message}")]
    Sidecar { path: String, message: String },
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Joint(#[from] JointError),
}

pub type Result<T> = std::result::Result<T, LearnError>;

/// One synchronized frame seen by two views, with ground-truth part positions.
#[derive(Debug, Clone)]
pub struct TrainFramePair {
    pub view_a: usize,
    pub view_b: usize,
    pub maps_a: ScoreMaps,
    pub maps_b: ScoreMaps,
    pub gt_a: Vec<[f64; 2]>,
    pub gt_b: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaFit {
    pub table: CooccurrenceTable,
    /// Per part, the number of eligible type pairs.
    pub eligible: Vec<usize>,
    /// Parts without eligible pairs; their tables are uniform.
    pub fallback_parts: Vec<usize>,
}

fn within(p: &[f64; 2], g: &[f64; 2], tol: f64) -> bool {
    (p[0] - g[0]).hypot(p[1] - g[1]) <= tol
}

/// Histograms of `(t_first, t_second)` samples per part, additively smoothed
/// and normalized. Parts without samples fall back to uniform.
pub fn lambda_from_samples(samples: &[Vec<(usize, usize)>], types: usize, smoothing: f64) -> LambdaFit {
    let mut tables = Vec::with_capacity(samples.len());
    let mut fallback_parts = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.is_empty() {
            log::warn!("part {i}: no eligible type pairs, using a uniform co-occurrence table");
            fallback_parts.push(i);
            tables.push(vec![vec![1.0 / (types * types) as f64; types]; types]);
            continue;
        }
        let mut h = vec![vec![smoothing; types]; types];
        for &(a, b) in s {
            h[a][b] += 1.0;
        }
        let total: f64 = h.iter().flatten().sum();
        tables.push(h.into_iter().map(|r| r.into_iter().map(|v| v / total).collect()).collect());
    }
    LambdaFit {
        table: CooccurrenceTable { tables },
        eligible: samples.iter().map(|s| s.len()).collect(),
        fallback_parts,
    }
}

/// Runs single-view inference on both views of every pair; a part's inferred
/// type pair is counted when both estimated positions lie within `error_tol`
/// pixels of ground truth. Pairs are oriented lower view index first.
pub fn learn_lambda(pairs: &[TrainFramePair], model: &KinematicModel, error_tol: f64, smoothing: f64) -> Result<LambdaFit> {
    if pairs.is_empty() {
        return Err(LearnError::NoPairs);
    }
    if error_tol.is_nan() || error_tol <= 0.0 {
        return Err(LearnError::BadTolerance(error_tol));
    }
    let per_pair: Vec<Vec<Option<(usize, usize)>>> = pairs
        .par_iter()
        .map(|p| {
            let a = best_pose(&p.maps_a, model, None)?;
            let b = best_pose(&p.maps_b, model, None)?;
            let (Some(a), Some(b)) = (a, b) else {
                return Ok(vec![None; model.num_parts]);
            };
            Ok((0..model.num_parts)
                .map(|i| {
                    let ok = within(&a.pose.positions[i], &p.gt_a[i], error_tol)
                        && within(&b.pose.positions[i], &p.gt_b[i], error_tol);
                    ok.then(|| {
                        let (ta, tb) = (a.pose.types[i], b.pose.types[i]);
                        if p.view_a <= p.view_b {
                            (ta, tb)
                        } else {
                            (tb, ta)
                        }
                    })
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut samples = vec![Vec::new(); model.num_parts];
    for frame in per_pair {
        for (i, s) in frame.into_iter().enumerate() {
            if let Some(s) = s {
                samples[i].push(s);
            }
        }
    }
    Ok(lambda_from_samples(&samples, model.num_types, smoothing))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Per-part gating thresholds: the median of that part's single-view errors.
pub fn learn_taus(errors: &[Vec<f64>]) -> Result<Vec<f64>> {
    errors
        .iter()
        .enumerate()
        .map(|(i, e)| median(e).ok_or(LearnError::EmptyErrors(i)))
        .collect()
}

/// Logarithmic default grid: zero and `10^k` for `k = -4..=1`.
pub fn default_grid() -> Vec<f64> {
    std::iter::once(0.0).chain((-4..=1).map(|k| 10f64.powi(k))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub alpha: f64,
    pub beta: f64,
    pub score: f64,
    /// `(alpha, beta, metric)` for every grid cell; failed cells score `-inf`.
    pub surface: Vec<(f64, f64, f64)>,
}

fn with_zero(grid: &[f64]) -> Vec<f64> {
    let mut g = grid.to_vec();
    if !g.contains(&0.0) {
        g.push(0.0);
    }
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Exhaustive search over `grid_alpha x grid_beta`, maximizing `metric`.
/// Zero is always added to both grids. Ties prefer smaller alpha, then smaller beta.
pub fn tune_alpha_beta<F, E>(grid_alpha: &[f64], grid_beta: &[f64], metric: F) -> Result<TuneResult>
where
    F: Fn(f64, f64) -> std::result::Result<f64, E> + Sync,
    E: std::fmt::Display,
{
    if grid_alpha.is_empty() || grid_beta.is_empty() {
        return Err(LearnError::EmptyGrid);
    }
    let ga = with_zero(grid_alpha);
    let gb = with_zero(grid_beta);
    let cells: Vec<(f64, f64)> = ga.iter().flat_map(|&a| gb.iter().map(move |&b| (a, b))).collect();
    let surface: Vec<(f64, f64, f64)> = cells
        .par_iter()
        .map(|&(a, b)| {
            let m = match metric(a, b) {
                Ok(v) if !v.is_nan() => v,
                Ok(_) => f64::NEG_INFINITY,
                Err(e) => {
                    log::warn!("alpha {a}, beta {b}: {e}");
                    f64::NEG_INFINITY
                }
            };
            (a, b, m)
        })
        .collect();
    // Cells are in ascending (alpha, beta) order; strict improvement keeps ties early.
    let best = surface
        .iter()
        .fold(surface[0], |best, c| if c.2 > best.2 { *c } else { best });
    Ok(TuneResult {
        alpha: best.0,
        beta: best.1,
        score: best.2,
        surface,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
}

impl Clustering {
    /// Centroids rounded to whole grid cells.
    pub fn anchors(&self, cell_size: f64) -> Vec<[i64; 2]> {
        self.centroids
            .iter()
            .map(|c| [(c[0] / cell_size).round() as i64, (c[1] / cell_size).round() as i64])
            .collect()
    }
}

fn sq(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: &[f64; 2], centroids: &[[f64; 2]]) -> usize {
    let mut best = 0;
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        if sq(p, centroid) < sq(p, &centroids[best]) {
            best = c;
        }
    }
    best
}

/// k-means with k-means++ seeding on 2D offsets. Distance ties go to the
/// lower cluster index.
pub fn kmeans(points: &[[f64; 2]], k: usize, seed: u64, max_iters: usize) -> Clustering {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    while centroids.len() < k {
        let d: Vec<f64> = points.iter().map(|p| sq(p, &centroids[nearest(p, &centroids)])).collect();
        let total: f64 = d.iter().sum();
        let next = if total <= 0.0 {
            points[rng.random_range(0..points.len())]
        } else {
            let mut r = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if r < *di {
                    pick = i;
                    break;
                }
                r -= di;
            }
            points[pick]
        };
        centroids.push(next);
    }
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..max_iters {
        let mut sums = vec![[0.0, 0.0, 0.0]; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            sums[l][2] += 1.0;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    Clustering { labels, centroids }
}

/// Clusters each part's offsets (relative to its parent) into `types` types.
pub fn cluster_types(offsets: &[Vec<[f64; 2]>], types: usize, seed: u64) -> Result<Vec<Clustering>> {
    offsets
        .iter()
        .enumerate()
        .map(|(i, pts)| {
            if pts.len() < types || types == 0 {
                return Err(LearnError::InsufficientSamples {
                    part: i,
                    have: pts.len(),
                    need: types.max(1),
                });
            }
            Ok(kmeans(pts, types, seed.wrapping_add(i as u64), 100))
        })
        .collect()
}

/// Template filters: the mean patch of each `(part, type)` group minus the
/// per-channel mean feature over all patches of all groups.
pub fn estimate_filters(groups: &[Vec<Vec<Filter>>]) -> Result<Vec<Vec<Filter>>> {
    let mut shape = None;
    let mut channel_sum: Vec<f64> = Vec::new();
    let mut cells = 0usize;
    for (i, part) in groups.iter().enumerate() {
        for (t, patches) in part.iter().enumerate() {
            if patches.is_empty() {
                return Err(LearnError::EmptyGroup { part: i, t });
            }
            for p in patches {
                let s = (p.channels, p.height, p.width);
                if *shape.get_or_insert(s) != s {
                    return Err(LearnError::PatchShape);
                }
                if channel_sum.is_empty() {
                    channel_sum = vec![0.0; p.channels];
                }
                for cell in p.data.chunks(p.channels) {
                    for (acc, v) in channel_sum.iter_mut().zip(cell) {
                        *acc += *v as f64;
                    }
                }
                cells += p.height * p.width;
            }
        }
    }
    let global: Vec<f64> = channel_sum.iter().map(|s| s / cells.max(1) as f64).collect();
    Ok(groups
        .iter()
        .map(|part| {
            part.iter()
                .map(|patches| {
                    let first = &patches[0];
                    let mut acc = vec![0.0f64; first.data.len()];
                    for p in patches {
                        for (a, v) in acc.iter_mut().zip(&p.data) {
                            *a += *v as f64;
                        }
                    }
                    let n = patches.len() as f64;
                    let data = acc
                        .iter()
                        .enumerate()
                        .map(|(j, a)| (a / n - global[j % first.channels]) as f32)
                        .collect();
                    Filter {
                        channels: first.channels,
                        height: first.height,
                        width: first.width,
                        data,
                    }
                })
                .collect()
        })
        .collect())
}

/// Learned coupling parameters stored next to a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub lambda: Vec<Vec<Vec<f64>>>,
    pub taus: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl Sidecar {
    pub fn table(&self) -> Result<CooccurrenceTable> {
        Ok(CooccurrenceTable::new(self.lambda.clone())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let err = |message: String| LearnError::Sidecar {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let s: Sidecar = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        s.table()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let err = |message: String| LearnError::Sidecar {
            path: path.display().to_string(),
            message,
        };
        let text = serde_json::to_string_pretty(self).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| err(e.to_string()))
    }
}
