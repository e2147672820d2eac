//! Kinematic-tree part model: filters, springs, biases, and its JSON file
//! format.
//!
//! Part types are 0-based. Deformation weights of the edge `(parent, child)`
//! are indexed `[child type][parent type]` and apply to the displacement
//! `psi((p_child - anchor[child type]) - p_parent)`, with positions measured
//! in grid cells of the detection level.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dt::{Map2, MAX_QUADRATIC};
use crate::features::ScoreMaps;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("invariant violated ({0}): {1}")]
    InvariantViolation(&'static str, String),
    #[error("position of part {part} ({x}, {y}) is outside the {width}x{height} map")]
    OutOfBounds {
        part: usize,
        x: i64,
        y: i64,
        width: usize,
        height: usize,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ModelError {
    /// Name of the failed invariant, if this is a validation error.
    pub fn invariant(&self) -> Option<&'static str> {
        match self {
            ModelError::InvariantViolation(name, _) => Some(name),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// A linear template over `channels x height x width` features, stored
/// channel-fastest: index `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Filter {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Deformation feature `[dx, dx^2, dy, dy^2]`.
#[inline]
pub fn psi(dx: f64, dy: f64) -> [f64; 4] {
    [dx, dx * dx, dy, dy * dy]
}

#[inline]
pub fn dot4(w: &[f64; 4], v: &[f64; 4]) -> f64 {
    w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + w[3] * v[3]
}

/// Spring between a part and its parent.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub parent: usize,
    pub child: usize,
    /// Expected child offset from the parent, grid cells, per child type.
    pub anchors: Vec<[i64; 2]>,
    /// `[child type][parent type]` deformation weights.
    pub deform: Vec<Vec<[f64; 4]>>,
    /// `[child type][parent type]` pairwise type bias.
    pub pair_bias: Vec<Vec<f64>>,
}

/// Feature pyramid parameters the model was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub cell_size: usize,
    pub levels: usize,
    pub scale_step: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            cell_size: 4,
            levels: 32,
            scale_step: 2f64.powf(-1.0 / 8.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicModel {
    pub num_parts: usize,
    pub num_types: usize,
    /// Parent of each part; `None` for the root.
    pub parents: Vec<Option<usize>>,
    /// `[part][type]`.
    pub filters: Vec<Vec<Filter>>,
    /// `[part][type]`.
    pub unary_bias: Vec<Vec<f64>>,
    /// One per non-root part.
    pub edges: Vec<Edge>,
    pub detection_threshold: f64,
    pub features: FeatureParams,
}

impl KinematicModel {
    pub fn root(&self) -> usize {
        self.parents.iter().position(Option::is_none).unwrap_or(0)
    }

    /// Edge whose child is `part`.
    pub fn edge_to(&self, part: usize) -> Option<&Edge> {
        self.edges.iter().find(|e| e.child == part)
    }

    pub fn children(&self, part: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(part))
            .map(|(i, _)| i)
    }

    /// Parts ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut order = vec![self.root()];
        let mut head = 0;
        while head < order.len() {
            let p = order[head];
            head += 1;
            order.extend(self.children(p));
        }
        order
    }

    /// Filter extent `(width, height)` in cells; uniform across the model.
    pub fn filter_extent(&self) -> (usize, usize) {
        self.filters
            .first()
            .and_then(|f| f.first())
            .map(|f| (f.width, f.height))
            .unwrap_or((1, 1))
    }

    pub fn channels(&self) -> usize {
        self.filters
            .first()
            .and_then(|f| f.first())
            .map(|f| f.channels)
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_parts;
        let t = self.num_types;
        let bad = |name: &'static str, msg: String| Err(ModelError::InvariantViolation(name, msg));
        if k == 0 || t == 0 {
            return bad("shape", format!("K={k}, T={t} must be positive"));
        }
        if self.parents.len() != k || self.filters.len() != k || self.unary_bias.len() != k {
            return bad("shape", "per-part arrays must have K entries".into());
        }
        let roots = self.parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return bad("tree", format!("expected exactly one root, found {roots}"));
        }
        if self.parents.iter().enumerate().any(|(i, p)| p.is_some_and(|p| p >= k || p == i)) {
            return bad("tree", "parent index out of range or self-loop".into());
        }
        if self.topological_order().len() != k {
            return bad("tree", "parent links contain a cycle".into());
        }
        if self.edges.len() != k - 1 {
            return bad("tree", format!("expected {} edges, found {}", k - 1, self.edges.len()));
        }
        for e in &self.edges {
            if e.child >= k || self.parents[e.child] != Some(e.parent) {
                return bad("tree", format!("edge {}->{} does not match parent links", e.parent, e.child));
            }
            if e.anchors.len() != t || e.deform.len() != t || e.pair_bias.len() != t {
                return bad("shape", format!("edge {}->{} must have T entries", e.parent, e.child));
            }
            for (ct, row) in e.deform.iter().enumerate() {
                if row.len() != t || e.pair_bias[ct].len() != t {
                    return bad("shape", format!("edge {}->{} must be TxT", e.parent, e.child));
                }
                for w in row {
                    if !(w[1] <= MAX_QUADRATIC && w[3] <= MAX_QUADRATIC) {
                        return bad(
                            "concavity",
                            format!("edge {}->{} deformation {w:?} is not strictly concave", e.parent, e.child),
                        );
                    }
                    if w.iter().any(|v| !v.is_finite()) {
                        return bad("finite", format!("edge {}->{} has non-finite weights", e.parent, e.child));
                    }
                }
            }
        }
        let Some(first) = self.filters[0].first() else {
            return bad("filter_shape", "part 0 has no filters".into());
        };
        for (i, fs) in self.filters.iter().enumerate() {
            if fs.len() != t || self.unary_bias[i].len() != t {
                return bad("shape", format!("part {i} must have T filters and biases"));
            }
            for f in fs {
                if (f.channels, f.height, f.width) != (first.channels, first.height, first.width) {
                    return bad("filter_shape", format!("part {i} filter extent differs from the model's"));
                }
                if f.data.len() != f.channels * f.height * f.width || f.height == 0 || f.width == 0 {
                    return bad("filter_shape", format!("part {i} filter data has wrong length"));
                }
            }
        }
        if !self.detection_threshold.is_finite() && self.detection_threshold != f64::NEG_INFINITY {
            return bad("finite", "detection threshold".into());
        }
        Ok(())
    }
}

/// 2D pose: per-part pixel positions (original image frame) and types.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose2D {
    pub positions: Vec<[f64; 2]>,
    pub types: Vec<usize>,
    pub score: f64,
    pub level: usize,
}

impl Pose2D {
    pub fn num_parts(&self) -> usize {
        self.positions.len()
    }
}

/// A 3D segment `(start, end)` per skeleton limb, world units.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    /// `None` where an endpoint could not be triangulated.
    pub segments: Vec<Option<([f64; 3], [f64; 3])>>,
}

/// Grid-level evaluation of the single-view energy: unary responses, type
/// biases, springs and pairwise type biases for a pose given in grid cells.
/// `unary[part][type]` are the filter response maps of one level.
pub fn energy_at_grid(
    model: &KinematicModel,
    unary: &[Vec<Map2>],
    cells: &[[i64; 2]],
    types: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..model.num_parts {
        let map = &unary[i][types[i]];
        let [x, y] = cells[i];
        let v = map.at(x, y).ok_or(ModelError::OutOfBounds {
            part: i,
            x,
            y,
            width: map.width,
            height: map.height,
        })?;
        total += v + model.unary_bias[i][types[i]];
    }
    for e in &model.edges {
        let (ct, pt) = (types[e.child], types[e.parent]);
        let anchor = e.anchors[ct];
        let dx = (cells[e.child][0] - anchor[0] - cells[e.parent][0]) as f64;
        let dy = (cells[e.child][1] - anchor[1] - cells[e.parent][1]) as f64;
        total += dot4(&e.deform[ct][pt], &psi(dx, dy)) + e.pair_bias[ct][pt];
    }
    Ok(total)
}

/// Single-view energy of a pose on its detection level. Pixel positions are
/// snapped to the level grid.
pub fn single_view_energy(model: &KinematicModel, pose: &Pose2D, maps: &ScoreMaps) -> Result<f64> {
    let level = maps.levels.get(pose.level).ok_or(ModelError::InvariantViolation(
        "level",
        format!("pose level {} not in score maps", pose.level),
    ))?;
    let cells: Vec<[i64; 2]> = pose.positions.iter().map(|p| level.frame.to_grid(*p)).collect();
    energy_at_grid(model, &level.maps, &cells, &pose.types)
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct FilterFile {
    channels: usize,
    height: usize,
    width: usize,
    /// Little-endian f32, base64.
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PartFile {
    filters: Vec<FilterFile>,
    unary_bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeFile {
    parent: usize,
    child: usize,
    anchors: Vec<[i64; 2]>,
    deform: Vec<Vec<[f64; 4]>>,
    pair_bias: Vec<Vec<f64>>,
}

mod threshold {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::NEG_INFINITY {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "T")]
    t: usize,
    tree: Vec<Option<usize>>,
    /// `null` stands for no threshold.
    #[serde(with = "threshold")]
    detection_threshold: f64,
    #[serde(default)]
    features: Option<FeatureParams>,
    parts: Vec<PartFile>,
    edges: Vec<EdgeFile>,
}

fn encode_f32(data: &[f32]) -> String {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f32(text: &str, expected: usize, location: &str) -> Result<Vec<f32>> {
    let bytes = B64.decode(text).map_err(|e| ModelError::Parse {
        location: location.into(),
        message: format!("base64: {e}"),
    })?;
    if bytes.len() != expected * 4 {
        return Err(ModelError::Parse {
            location: location.into(),
            message: format!("expected {expected} f32 values, found {} bytes", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl KinematicModel {
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            k: self.num_parts,
            t: self.num_types,
            tree: self.parents.clone(),
            detection_threshold: self.detection_threshold,
            features: Some(self.features),
            parts: self
                .filters
                .iter()
                .zip(&self.unary_bias)
                .map(|(fs, b)| PartFile {
                    filters: fs
                        .iter()
                        .map(|f| FilterFile {
                            channels: f.channels,
                            height: f.height,
                            width: f.width,
                            data: encode_f32(&f.data),
                        })
                        .collect(),
                    unary_bias: b.clone(),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeFile {
                    parent: e.parent,
                    child: e.child,
                    anchors: e.anchors.clone(),
                    deform: e.deform.clone(),
                    pair_bias: e.pair_bias.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| ModelError::Parse {
            location: format!("line {}, column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        let mut filters = Vec::with_capacity(file.parts.len());
        let mut unary_bias = Vec::with_capacity(file.parts.len());
        for (i, part) in file.parts.into_iter().enumerate() {
            let fs = part
                .filters
                .into_iter()
                .enumerate()
                .map(|(t, f)| {
                    let n = f.channels * f.height * f.width;
                    let data = decode_f32(&f.data, n, &format!("parts[{i}].filters[{t}].data"))?;
                    Ok(Filter {
                        channels: f.channels,
                        height: f.height,
                        width: f.width,
                        data,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            filters.push(fs);
            unary_bias.push(part.unary_bias);
        }
        let model = KinematicModel {
            num_parts: file.k,
            num_types: file.t,
            parents: file.tree,
            filters,
            unary_bias,
            edges: file
                .edges
                .into_iter()
                .map(|e| Edge {
                    parent: e.parent,
                    child: e.child,
                    anchors: e.anchors,
                    deform: e.deform,
                    pair_bias: e.pair_bias,
                })
                .collect(),
            detection_threshold: file.detection_threshold,
            features: file.features.unwrap_or_default(),
        };
        model.validate()?;
        Ok(model)
    }
}

pub fn load_model(path: &Path) -> Result<KinematicModel> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    KinematicModel::from_json(&text)
}

pub fn save_model(model: &KinematicModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_json()).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}
