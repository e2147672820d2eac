//! Calibrated camera math: projection, fundamental matrices, epipolar lines
//! and multi-view triangulation.
//!
//! Conventions: pixel coordinates are `(u, v)` with `v` growing downwards,
//! fundamental matrices `F_ab` satisfy `x_b^T F_ab x_a = 0`, i.e. they map a
//! point of view `a` to its epipolar line in view `b`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Point2, Point3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point projects to infinity (|w| = {0:e})")]
    PointAtInfinity(f64),
    #[error("camera centers coincide: no epipolar geometry")]
    DegenerateBaseline,
    #[error("point is the epipole: epipolar line undefined")]
    NullLine,
    #[error("triangulation needs at least 2 views, got {0}")]
    InsufficientViews(usize),
    #[error("triangulation system is ill-conditioned (condition {0:e})")]
    IllConditioned(f64),
    #[error("projection matrix is rank deficient")]
    RankDeficient,
    #[error("unknown view {0}")]
    UnknownView(usize),
    #[error("calibration file: {0}")]
    Calibration(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

const W_EPS: f64 = 1e-12;
const BASELINE_EPS: f64 = 1e-9;
const MAX_CONDITION: f64 = 1e12;

/// A calibrated pinhole camera given by its 3x4 projection matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: String,
    pub p: Matrix3x4<f64>,
}

impl Camera {
    pub fn new(id: impl Into<String>, p: Matrix3x4<f64>) -> Result<Self> {
        let cam = Self { id: id.into(), p };
        if cam.center_homogeneous().norm() < 1e-300 {
            return Err(GeometryError::RankDeficient);
        }
        Ok(cam)
    }

    /// Builds `P = K [R | -R c]` from intrinsics and a camera pose.
    pub fn from_intrinsics(
        id: impl Into<String>,
        k: Matrix3<f64>,
        rotation: Matrix3<f64>,
        center: Point3<f64>,
    ) -> Result<Self> {
        let t = -(rotation * center.coords);
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        rt.set_column(3, &t);
        Self::new(id, k * rt)
    }

    /// Camera looking from `center` towards `target` with the image `v` axis
    /// aligned with world `-up`.
    pub fn look_at(
        id: impl Into<String>,
        focal: f64,
        principal: Point2<f64>,
        center: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let z = (target - center).normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(GeometryError::RankDeficient);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let k = Matrix3::new(focal, 0.0, principal.x, 0.0, focal, principal.y, 0.0, 0.0, 1.0);
        Self::from_intrinsics(id, k, rotation, center)
    }

    /// Null vector of `P`, from the signed 3x3 minors.
    pub fn center_homogeneous(&self) -> Vector4<f64> {
        let minor = |skip: usize| {
            let cols: Vec<usize> = (0..4).filter(|&c| c != skip).collect();
            Matrix3::from_fn(|r, c| self.p[(r, cols[c])]).determinant()
        };
        Vector4::new(minor(0), -minor(1), minor(2), -minor(3))
    }

    pub fn center(&self) -> Option<Point3<f64>> {
        let c = self.center_homogeneous();
        if c.w.abs() < W_EPS * c.xyz().norm().max(1.0) {
            None
        } else {
            Some(Point3::from(c.xyz() / c.w))
        }
    }

    pub fn project(&self, x: &Point3<f64>) -> Result<Point2<f64>> {
        project(self, x)
    }
}

pub fn project(cam: &Camera, x: &Point3<f64>) -> Result<Point2<f64>> {
    let h = cam.p * x.to_homogeneous();
    if h.z.abs() < W_EPS {
        return Err(GeometryError::PointAtInfinity(h.z));
    }
    Ok(Point2::new(h.x / h.z, h.y / h.z))
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `F` with `x_b^T F x_a = 0`, built as `[e_b]_x P_b P_a^+`, scaled to unit
/// Frobenius norm.
pub fn fundamental_from_cameras(cam_a: &Camera, cam_b: &Camera) -> Result<Matrix3<f64>> {
    let ca = cam_a.center_homogeneous();
    let cb = cam_b.center_homogeneous();
    // Homogeneous centers are parallel iff the cameras share a center.
    let (na, nb) = (ca.normalize(), cb.normalize());
    let parallel = (na - nb).norm().min((na + nb).norm());
    let degenerate = match (cam_a.center(), cam_b.center()) {
        (Some(a), Some(b)) => (a - b).norm() <= BASELINE_EPS,
        _ => parallel <= BASELINE_EPS,
    };
    if degenerate {
        return Err(GeometryError::DegenerateBaseline);
    }
    let epipole_b = cam_b.p * ca;
    let pa = cam_a.p;
    let pa_pinv = pa.transpose()
        * (pa * pa.transpose())
            .try_inverse()
            .ok_or(GeometryError::RankDeficient)?;
    let f = skew(&epipole_b) * cam_b.p * pa_pinv;
    let norm = f.norm();
    if norm < 1e-300 {
        return Err(GeometryError::DegenerateBaseline);
    }
    Ok(f / norm)
}

/// A line `a x + b y + c = 0` with `a^2 + b^2 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl EpipolarLine {
    pub fn from_coefficients(a: f64, b: f64, c: f64) -> Result<Self> {
        let n = a.hypot(b);
        if !(n > 0.0) || !n.is_finite() {
            return Err(GeometryError::NullLine);
        }
        Ok(Self {
            a: a / n,
            b: b / n,
            c: c / n,
        })
    }
}

/// Epipolar line `F [p; 1]` in the target view of `F`.
pub fn epipolar_line(f: &Matrix3<f64>, p: &Point2<f64>) -> Result<EpipolarLine> {
    let l = f * Vector3::new(p.x, p.y, 1.0);
    let scale = f.norm() * (p.coords.norm() + 1.0);
    if l.x.hypot(l.y) <= 1e-12 * scale {
        return Err(GeometryError::NullLine);
    }
    EpipolarLine::from_coefficients(l.x, l.y, l.z)
}

pub fn point_line_dist_sq(p: &Point2<f64>, l: &EpipolarLine) -> f64 {
    let r = l.a * p.x + l.b * p.y + l.c;
    r * r
}

/// Geometric consistency of a correspondence: minus the summed squared
/// distances of each point to the epipolar line induced by the other.
/// `f_ab` maps view-A points to view-B lines, `f_ba` the reverse.
pub fn xi(
    p_a: &Point2<f64>,
    p_b: &Point2<f64>,
    f_ab: &Matrix3<f64>,
    f_ba: &Matrix3<f64>,
) -> Result<f64> {
    let in_a = epipolar_line(f_ba, p_b)?;
    let in_b = epipolar_line(f_ab, p_a)?;
    Ok(-point_line_dist_sq(p_a, &in_a) - point_line_dist_sq(p_b, &in_b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulated {
    pub point: Point3<f64>,
    /// RMS reprojection error over the observations, pixels.
    pub rms: f64,
}

const GN_MAX_ITERS: usize = 20;
const GN_MIN_STEP: f64 = 1e-10;

fn rms_error(obs: &[(&Camera, Point2<f64>)], x: &Point3<f64>) -> f64 {
    let sum: f64 = obs
        .iter()
        .map(|(cam, p)| match project(cam, x) {
            Ok(q) => (q - p).norm_squared(),
            Err(_) => f64::INFINITY,
        })
        .sum();
    (sum / obs.len() as f64).sqrt()
}

/// Linear (DLT) triangulation. The condition number is taken over the
/// three leading singular values: the fourth vanishes for exact data.
fn triangulate_dlt(obs: &[(&Camera, Point2<f64>)]) -> Result<Point3<f64>> {
    // Each observation contributes u*P3 - P1 and v*P3 - P2; rows are
    // normalized so pixel magnitude does not dominate the conditioning.
    let mut a = DMatrix::<f64>::zeros(2 * obs.len(), 4);
    for (k, (cam, p)) in obs.iter().enumerate() {
        let p1 = cam.p.row(0);
        let p2 = cam.p.row(1);
        let p3 = cam.p.row(2);
        for (j, row) in [p3 * p.x - p1, p3 * p.y - p2].into_iter().enumerate() {
            let n = row.norm();
            if n > 0.0 {
                a.row_mut(2 * k + j).copy_from(&(row / n));
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::IllConditioned(f64::INFINITY))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = |i: usize| svd.singular_values[order[i]];
    let condition = s(0) / s(2);
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(GeometryError::IllConditioned(condition));
    }
    let v = v_t.row(order[3]);
    if v[3].abs() < W_EPS * v.norm() {
        return Err(GeometryError::IllConditioned(f64::INFINITY));
    }
    Ok(Point3::new(v[0] / v[3], v[1] / v[3], v[2] / v[3]))
}

/// DLT initialization refined by Gauss-Newton on reprojection residuals.
pub fn triangulate(observations: &[(&Camera, Point2<f64>)]) -> Result<Triangulated> {
    if observations.len() < 2 {
        return Err(GeometryError::InsufficientViews(observations.len()));
    }
    let mut x = triangulate_dlt(observations)?;
    let mut err = rms_error(observations, &x);
    for _ in 0..GN_MAX_ITERS {
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for (cam, p) in observations {
            let h = cam.p * x.to_homogeneous();
            let w = h.z;
            if w.abs() < W_EPS {
                continue;
            }
            let (u, v) = (h.x / w, h.y / w);
            let r = [u - p.x, v - p.y];
            for (k, rk) in r.iter().enumerate() {
                let prow = cam.p.row(k);
                let p3 = cam.p.row(2);
                let proj = if k == 0 { u } else { v };
                let j = Vector3::from_fn(|c, _| (prow[c] - proj * p3[c]) / w);
                jtj += j * j.transpose();
                jtr += j * *rk;
            }
        }
        let Some(step) = jtj.try_inverse().map(|inv| -(inv * jtr)) else {
            break;
        };
        let candidate = x + step;
        let cand_err = rms_error(observations, &candidate);
        if !(cand_err <= err) {
            break;
        }
        x = candidate;
        err = cand_err;
        if step.norm() < GN_MIN_STEP {
            break;
        }
    }
    Ok(Triangulated { point: x, rms: err })
}

/// Calibrated cameras plus the fundamental matrix of every ordered pair.
#[derive(Debug, Clone)]
pub struct CameraRig {
    cameras: Vec<Camera>,
    fundamentals: BTreeMap<(usize, usize), Matrix3<f64>>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        let mut fundamentals = BTreeMap::new();
        for a in 0..cameras.len() {
            for b in 0..cameras.len() {
                if a != b {
                    fundamentals.insert((a, b), fundamental_from_cameras(&cameras[a], &cameras[b])?);
                }
            }
        }
        Ok(Self {
            cameras,
            fundamentals,
        })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn camera(&self, view: usize) -> Result<&Camera> {
        self.cameras.get(view).ok_or(GeometryError::UnknownView(view))
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// `F` mapping points of `from` to epipolar lines in `to`.
    pub fn fundamental(&self, from: usize, to: usize) -> Result<&Matrix3<f64>> {
        self.fundamentals
            .get(&(from, to))
            .ok_or(GeometryError::UnknownView(if from < self.len() { to } else { from }))
    }

    /// `xi` for a point of view `a` and a point of view `b`.
    pub fn xi(&self, a: usize, p_a: &Point2<f64>, b: usize, p_b: &Point2<f64>) -> Result<f64> {
        xi(p_a, p_b, self.fundamental(a, b)?, self.fundamental(b, a)?)
    }

    pub fn to_calibration(&self) -> CalibrationFile {
        CalibrationFile {
            cameras: self
                .cameras
                .iter()
                .map(|c| CameraEntry {
                    id: c.id.clone(),
                    p: (0..3).flat_map(|r| (0..4).map(move |col| (r, col))).map(|(r, col)| c.p[(r, col)]).collect(),
                })
                .collect(),
        }
    }

    pub fn from_calibration(file: &CalibrationFile) -> Result<Self> {
        let cameras = file
            .cameras
            .iter()
            .map(|e| {
                if e.p.len() != 12 {
                    return Err(GeometryError::Calibration(format!(
                        "camera {}: expected 12 projection entries, got {}",
                        e.id,
                        e.p.len()
                    )));
                }
                Camera::new(e.id.clone(), Matrix3x4::from_row_slice(&e.p))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cameras)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GeometryError::Calibration(format!("{}: {e}", path.display())))?;
        let file: CalibrationFile = serde_json::from_str(&text)
            .map_err(|e| GeometryError::Calibration(format!("{}: {e}", path.display())))?;
        Self::from_calibration(&file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_calibration())
            .map_err(|e| GeometryError::Calibration(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| GeometryError::Calibration(format!("{}: {e}", path.display())))
    }
}

/// On-disk calibration: cameras as `{id, P}` with `P` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub cameras: Vec<CameraEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub id: String,
    #[serde(rename = "P")]
    pub p: Vec<f64>,
}
