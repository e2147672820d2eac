//! HoG feature pyramids and per-part-type filter response maps.
//!
//! The descriptor is the 31-channel variant common in part-based detectors:
//! 18 contrast-sensitive orientation bins, 9 contrast-insensitive bins and 4
//! gradient-energy (texture) channels, each cell normalized against its four
//! surrounding 2x2 blocks and truncated at 0.2.

use rayon::prelude::*;
use thiserror::Error;

use crate::dt::Map2;
use crate::model::{Filter, KinematicModel};

pub const HOG_CHANNELS: usize = 31;
const SIGNED_BINS: usize = 18;
const UNSIGNED_BINS: usize = 9;
const TRUNCATION: f32 = 0.2;
const NORM_EPS: f32 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("image {width}x{height} is smaller than 2x2 cells of {cell_size} px")]
    TooSmall {
        width: usize,
        height: usize,
        cell_size: usize,
    },
    #[error("filter has {filter} channels but features have {features}")]
    ChannelMismatch { filter: usize, features: usize },
    #[error("invalid pyramid parameters: {0}")]
    BadParams(String),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Interleaved grayscale or RGB image with float intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * channels, "image data does not match extent");
        assert!(channels == 1 || channels == 3, "images are grayscale or RGB");
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn gray(width: usize, height: usize, data: Vec<f32>) -> Self {
        Self::new(width, height, 1, data)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Bilinear resize to `(width, height)`, pixel centers aligned.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        let mut data = Vec::with_capacity(width * height * self.channels);
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                for c in 0..self.channels {
                    let top = self.get(x0, y0, c) * (1.0 - wx) + self.get(x1, y0, c) * wx;
                    let bottom = self.get(x0, y1, c) * (1.0 - wx) + self.get(x1, y1, c) * wx;
                    data.push(top * (1.0 - wy) + bottom * wy);
                }
            }
        }
        Image::new(width, height, self.channels, data)
    }
}

/// Cell-grid features, channel-fastest layout `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Features {
    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Copies the `width x height` window at `(x, y)` into a filter-shaped block.
    pub fn window(&self, x: usize, y: usize, width: usize, height: usize) -> Filter {
        let mut data = Vec::with_capacity(width * height * self.channels);
        for wy in 0..height {
            let start = ((y + wy) * self.width + x) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Filter {
            channels: self.channels,
            height,
            width,
            data,
        }
    }
}

fn orientation_basis() -> [(f32, f32); UNSIGNED_BINS] {
    let mut basis = [(0.0, 0.0); UNSIGNED_BINS];
    for (o, b) in basis.iter_mut().enumerate() {
        let theta = o as f64 * std::f64::consts::PI / UNSIGNED_BINS as f64;
        *b = (theta.cos() as f32, theta.sin() as f32);
    }
    basis
}

/// Strongest-channel gradient at an interior pixel snapped to one of the 18
/// signed orientations: `(bin, magnitude)`.
#[inline]
fn pixel_gradient(img: &Image, x: usize, y: usize, basis: &[(f32, f32); UNSIGNED_BINS]) -> (usize, f32) {
    let mut best = (0.0f32, 0.0f32, 0.0f32);
    for c in 0..img.channels {
        let dx = img.get(x + 1, y, c) - img.get(x - 1, y, c);
        let dy = img.get(x, y + 1, c) - img.get(x, y - 1, c);
        let m = dx * dx + dy * dy;
        if c == 0 || m > best.0 {
            best = (m, dx, dy);
        }
    }
    let (m2, dx, dy) = best;
    let mut bin = 0;
    let mut best_dot = 0.0f32;
    for (o, &(u, v)) in basis.iter().enumerate() {
        let dot = u * dx + v * dy;
        if dot > best_dot {
            best_dot = dot;
            bin = o;
        } else if -dot > best_dot {
            best_dot = -dot;
            bin = o + UNSIGNED_BINS;
        }
    }
    (bin, m2.sqrt())
}

/// Normalizes and truncates signed cell histograms into the 31-channel
/// descriptor. Block energies at the grid border replicate the edge cells.
fn normalize_cells(hist: &[f32], cw: usize, ch: usize) -> Vec<f32> {
    let energy: Vec<f32> = hist
        .chunks_exact(SIGNED_BINS)
        .map(|h| (0..UNSIGNED_BINS).map(|o| (h[o] + h[o + UNSIGNED_BINS]).powi(2)).sum())
        .collect();
    let e = |x: isize, y: isize| {
        let xc = x.clamp(0, cw as isize - 1) as usize;
        let yc = y.clamp(0, ch as isize - 1) as usize;
        energy[yc * cw + xc]
    };
    let block = |x: isize, y: isize| 1.0 / (e(x, y) + e(x + 1, y) + e(x, y + 1) + e(x + 1, y + 1) + NORM_EPS).sqrt();

    let mut out = vec![0.0f32; cw * ch * HOG_CHANNELS];
    for y in 0..ch {
        for x in 0..cw {
            let (xi, yi) = (x as isize, y as isize);
            let norms = [block(xi, yi), block(xi - 1, yi), block(xi, yi - 1), block(xi - 1, yi - 1)];
            let h = &hist[(y * cw + x) * SIGNED_BINS..(y * cw + x + 1) * SIGNED_BINS];
            let dst = &mut out[(y * cw + x) * HOG_CHANNELS..(y * cw + x + 1) * HOG_CHANNELS];
            let mut texture = [0.0f32; 4];
            for o in 0..SIGNED_BINS {
                let mut sum = 0.0;
                for (k, n) in norms.iter().enumerate() {
                    let v = (h[o] * n).min(TRUNCATION);
                    sum += v;
                    texture[k] += v;
                }
                dst[o] = 0.5 * sum;
            }
            for o in 0..UNSIGNED_BINS {
                let s = h[o] + h[o + UNSIGNED_BINS];
                let sum: f32 = norms.iter().map(|n| (s * n).min(TRUNCATION)).sum();
                dst[SIGNED_BINS + o] = 0.5 * sum;
            }
            for k in 0..4 {
                dst[SIGNED_BINS + UNSIGNED_BINS + k] = 0.2357 * texture[k];
            }
        }
    }
    out
}

/// HoG descriptor over `floor(width / cell_size) x floor(height / cell_size)`
/// cells. Gradients are taken at interior pixels and bilinearly spread over
/// the four nearest cell centers.
pub fn hog(img: &Image, cell_size: usize) -> Result<Features> {
    if cell_size == 0 {
        return Err(FeatureError::BadParams("cell size must be positive".into()));
    }
    let (cw, ch) = (img.width / cell_size, img.height / cell_size);
    if cw < 2 || ch < 2 {
        return Err(FeatureError::TooSmall {
            width: img.width,
            height: img.height,
            cell_size,
        });
    }
    let basis = orientation_basis();
    let cs = cell_size as f32;
    let mut hist = vec![0.0f32; cw * ch * SIGNED_BINS];
    for y in 1..img.height - 1 {
        let yp = (y as f32 + 0.5) / cs - 0.5;
        let iy = yp.floor() as isize;
        let vy0 = yp - iy as f32;
        for x in 1..img.width - 1 {
            let (bin, mag) = pixel_gradient(img, x, y, &basis);
            if mag == 0.0 {
                continue;
            }
            let xp = (x as f32 + 0.5) / cs - 0.5;
            let ix = xp.floor() as isize;
            let vx0 = xp - ix as f32;
            for (dy, wy) in [(0isize, 1.0 - vy0), (1, vy0)] {
                let cy = iy + dy;
                if cy < 0 || cy >= ch as isize {
                    continue;
                }
                for (dx, wx) in [(0isize, 1.0 - vx0), (1, vx0)] {
                    let cx = ix + dx;
                    if cx < 0 || cx >= cw as isize {
                        continue;
                    }
                    hist[(cy as usize * cw + cx as usize) * SIGNED_BINS + bin] += wx * wy * mag;
                }
            }
        }
    }
    Ok(Features {
        width: cw,
        height: ch,
        channels: HOG_CHANNELS,
        data: normalize_cells(&hist, cw, ch),
    })
}

/// Maps grid positions of one pyramid level to original-image pixels: a
/// filter window anchored at cell `g` is centered at
/// `(g + offset) * cell_size / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridFrame {
    pub scale: f64,
    pub cell_size: usize,
    pub offset: [f64; 2],
}

impl GridFrame {
    /// Grid cells coincide with pixels.
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            cell_size: 1,
            offset: [0.0, 0.0],
        }
    }

    #[inline]
    pub fn to_pixel(&self, gx: i64, gy: i64) -> [f64; 2] {
        let f = self.cell_size as f64 / self.scale;
        [(gx as f64 + self.offset[0]) * f, (gy as f64 + self.offset[1]) * f]
    }

    /// Nearest grid position of a pixel location.
    #[inline]
    pub fn to_grid(&self, p: [f64; 2]) -> [i64; 2] {
        let f = self.scale / self.cell_size as f64;
        [
            (p[0] * f - self.offset[0]).round() as i64,
            (p[1] * f - self.offset[1]).round() as i64,
        ]
    }

    /// Pixel extent of `cells` grid cells.
    pub fn cells_to_pixels(&self, cells: f64) -> f64 {
        cells * self.cell_size as f64 / self.scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub features: Features,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
    pub cell_size: usize,
}

/// Level `l` is computed on the image resized by `scale_step^l`. Levels too
/// small for a HoG grid end the pyramid; only a failing level 0 is an error.
pub fn build_pyramid(img: &Image, levels: usize, scale_step: f64, cell_size: usize) -> Result<FeaturePyramid> {
    if levels == 0 || !(scale_step > 0.0 && scale_step < 1.0) {
        return Err(FeatureError::BadParams(format!(
            "levels={levels}, scale_step={scale_step}"
        )));
    }
    let scales: Vec<f64> = (0..levels).map(|l| scale_step.powi(l as i32)).collect();
    let computed: Vec<Result<PyramidLevel>> = scales
        .par_iter()
        .map(|&scale| {
            let w = (img.width as f64 * scale).round() as usize;
            let h = (img.height as f64 * scale).round() as usize;
            let features = if scale == 1.0 {
                hog(img, cell_size)?
            } else {
                if w < 2 * cell_size || h < 2 * cell_size {
                    return Err(FeatureError::TooSmall {
                        width: w,
                        height: h,
                        cell_size,
                    });
                }
                hog(&img.resize(w, h), cell_size)?
            };
            Ok(PyramidLevel { features, scale })
        })
        .collect();
    let mut out = Vec::new();
    for (l, level) in computed.into_iter().enumerate() {
        match level {
            Ok(level) => out.push(level),
            Err(e) if l == 0 => return Err(e),
            Err(_) => break,
        }
    }
    Ok(FeaturePyramid {
        levels: out,
        cell_size,
    })
}

#[inline]
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            acc[l] += a[i * 8 + l] * b[i * 8 + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().sum::<f32>() + tail
}

/// Valid cross-correlation: output `(x, y)` is the response of the window
/// whose top-left cell is `(x, y)`.
pub fn correlate(features: &Features, filter: &Filter) -> Result<Map2> {
    if filter.channels != features.channels {
        return Err(FeatureError::ChannelMismatch {
            filter: filter.channels,
            features: features.channels,
        });
    }
    if filter.width > features.width || filter.height > features.height {
        return Ok(Map2::new(0, 0, Vec::new()));
    }
    let ow = features.width - filter.width + 1;
    let oh = features.height - filter.height + 1;
    let row_len = filter.width * filter.channels;
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut sum = 0.0f32;
            for fy in 0..filter.height {
                let start = ((y + fy) * features.width + x) * features.channels;
                sum += dot_f32(
                    &features.data[start..start + row_len],
                    &filter.data[fy * row_len..(fy + 1) * row_len],
                );
            }
            out[y * ow + x] = sum as f64;
        }
    }
    Ok(Map2::new(ow, oh, out))
}

/// Response maps of every `(part, type)` filter on one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMaps {
    pub frame: GridFrame,
    pub width: usize,
    pub height: usize,
    /// `[part][type]`.
    pub maps: Vec<Vec<Map2>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMaps {
    pub levels: Vec<LevelMaps>,
}

impl ScoreMaps {
    /// Single-level maps in the identity frame, for injected test inputs.
    pub fn single_level(maps: Vec<Vec<Map2>>) -> Self {
        let (width, height) = maps
            .first()
            .and_then(|m| m.first())
            .map(|m| (m.width, m.height))
            .unwrap_or((0, 0));
        Self {
            levels: vec![LevelMaps {
                frame: GridFrame::identity(),
                width,
                height,
                maps,
            }],
        }
    }
}

/// Filter responses over all pyramid levels; levels smaller than the filter
/// extent are dropped.
pub fn score_maps(pyramid: &FeaturePyramid, model: &KinematicModel) -> Result<ScoreMaps> {
    let (fw, fh) = model.filter_extent();
    let jobs: Vec<(usize, usize, usize)> = (0..pyramid.levels.len())
        .flat_map(|l| (0..model.num_parts).flat_map(move |i| (0..model.num_types).map(move |t| (l, i, t))))
        .collect();
    let responses: Vec<Map2> = jobs
        .par_iter()
        .map(|&(l, i, t)| correlate(&pyramid.levels[l].features, &model.filters[i][t]))
        .collect::<Result<_>>()?;
    let mut it = responses.into_iter();
    let mut levels = Vec::new();
    for level in &pyramid.levels {
        let maps: Vec<Vec<Map2>> = (0..model.num_parts)
            .map(|_| (0..model.num_types).map(|_| it.next().expect("one map per job")).collect())
            .collect();
        let (w, h) = (maps[0][0].width, maps[0][0].height);
        if w == 0 || h == 0 {
            continue;
        }
        levels.push(LevelMaps {
            frame: GridFrame {
                scale: level.scale,
                cell_size: pyramid.cell_size,
                offset: [fw as f64 / 2.0, fh as f64 / 2.0],
            },
            width: w,
            height: h,
            maps,
        });
    }
    Ok(ScoreMaps { levels })
}

/// Source of unary score maps for inference: image features or injected maps.
pub trait ScoreMapProvider: Sync {
    fn score_maps(&self, model: &KinematicModel) -> Result<ScoreMaps>;
}

impl ScoreMapProvider for ScoreMaps {
    fn score_maps(&self, _model: &KinematicModel) -> Result<ScoreMaps> {
        Ok(self.clone())
    }
}

impl ScoreMapProvider for Image {
    fn score_maps(&self, model: &KinematicModel) -> Result<ScoreMaps> {
        let p = model.features;
        let pyramid = build_pyramid(self, p.levels, p.scale_step, p.cell_size)?;
        score_maps(&pyramid, model)
    }
}
