//! Generalized distance transform, max-of-scores formulation.
//!
//! For a concave quadratic `a*d + b*d^2` (`b < 0`) the transform computes
//! `out[x] = max_{x'} f[x'] + a*(x - x') + b*(x - x')^2` in linear time with
//! the lower-envelope-of-parabolas method. The literature states the same
//! algorithm as a min-convolution of costs; negate scores to convert.

use thiserror::Error;

/// Largest admissible quadratic coefficient.
pub const MAX_QUADRATIC: f64 = -1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DtError {
    #[error("quadratic coefficient {0} is not concave (must be <= -1e-8)")]
    NonConcave(f64),
    #[error("weight vector {0:?} must have 4 entries [wx, wx2, wy, wy2]")]
    BadWeights(Vec<f64>),
}

/// A dense row-major map of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Map2 {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "map data does not match extent");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Value at signed coordinates, `None` outside the map.
    #[inline]
    pub fn at(&self, x: i64, y: i64) -> Option<f64> {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            None
        } else {
            Some(self.get(x as usize, y as usize))
        }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtResult {
    pub values: Map2,
    pub argx: Vec<usize>,
    pub argy: Vec<usize>,
}

impl DtResult {
    #[inline]
    pub fn arg(&self, x: usize, y: usize) -> (usize, usize) {
        let i = y * self.values.width + x;
        (self.argx[i], self.argy[i])
    }
}

#[inline]
fn quad(a: f64, b: f64, d: f64) -> f64 {
    a * d + b * d * d
}

fn check_concave(b: f64) -> Result<(), DtError> {
    if b <= MAX_QUADRATIC {
        Ok(())
    } else {
        Err(DtError::NonConcave(b))
    }
}

/// 1D transform evaluated at targets `shift, shift + 1, ..., shift + out_len - 1`
/// (targets may lie outside the source range). Scratch buffers are reused.
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Self {
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }

    fn run(&mut self, f: &[f64], a: f64, b: f64, shift: i64, out: &mut [f64], args: &mut [usize]) {
        let n = f.len();
        let c = -b;
        // Parabola of source q as a function of target x is
        // c(x - q)^2 - a(x - q) - f(q); intersections are taken on that form.
        let intersect = |q: usize, r: usize| -> f64 {
            let (qf, rf) = (q as f64, r as f64);
            ((f[q] - f[r]) + a * (rf - qf)) / (2.0 * c * (rf - qf)) + (rf + qf) / 2.0
        };
        let v = &mut self.v;
        let z = &mut self.z;
        let mut k = 0usize;
        v[0] = 0;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in 1..n {
            let mut s = intersect(v[k], q);
            // z[0] = -inf stops the scan for any finite intersection.
            while k > 0 && s <= z[k] {
                k -= 1;
                s = intersect(v[k], q);
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        let mut j = 0usize;
        for (i, (o, arg)) in out.iter_mut().zip(args.iter_mut()).enumerate() {
            let x = (shift + i as i64) as f64;
            while z[j + 1] < x {
                j += 1;
            }
            let src = v[j];
            *arg = src;
            *o = f[src] + quad(a, b, x - src as f64);
        }
    }
}

/// `out[x] = max_{x'} f[x'] + a (x - x') + b (x - x')^2` with the maximizing
/// source index; ties go to the smaller source index.
pub fn gdt_1d(f: &[f64], a: f64, b: f64) -> Result<(Vec<f64>, Vec<usize>), DtError> {
    check_concave(b)?;
    let mut values = vec![0.0; f.len()];
    let mut args = vec![0; f.len()];
    if !f.is_empty() {
        Envelope::new(f.len()).run(f, a, b, 0, &mut values, &mut args);
    }
    Ok((values, args))
}

/// 2D transform with weights `[wx, wx2, wy, wy2]`:
/// `values[p] = max_{p'} score[p'] + wx dx + wx2 dx^2 + wy dy + wy2 dy^2`,
/// `(dx, dy) = p - p'`. Rows are transformed first, then columns.
pub fn gdt_2d(score: &Map2, w: &[f64]) -> Result<DtResult, DtError> {
    gdt_2d_shifted(score, w, (0, 0))
}

/// As [`gdt_2d`] with the output grid translated: output cell `(x, y)` holds
/// the transform evaluated at target `(x + shift.0, y + shift.1)`, which may
/// fall outside the source map.
pub fn gdt_2d_shifted(score: &Map2, w: &[f64], shift: (i64, i64)) -> Result<DtResult, DtError> {
    let [wx, wx2, wy, wy2] = <[f64; 4]>::try_from(w).map_err(|_| DtError::BadWeights(w.to_vec()))?;
    check_concave(wx2)?;
    check_concave(wy2)?;
    let (width, height) = (score.width, score.height);
    if width == 0 || height == 0 {
        return Ok(DtResult {
            values: Map2::new(width, height, Vec::new()),
            argx: Vec::new(),
            argy: Vec::new(),
        });
    }

    let mut rows = vec![0.0; width * height];
    let mut row_args = vec![0usize; width * height];
    let mut env = Envelope::new(width);
    for y in 0..height {
        let src = &score.data[y * width..(y + 1) * width];
        env.run(
            src,
            wx,
            wx2,
            shift.0,
            &mut rows[y * width..(y + 1) * width],
            &mut row_args[y * width..(y + 1) * width],
        );
    }

    let mut values = vec![0.0; width * height];
    let mut argx = vec![0usize; width * height];
    let mut argy = vec![0usize; width * height];
    let mut env = Envelope::new(height);
    let mut col = vec![0.0; height];
    let mut col_out = vec![0.0; height];
    let mut col_arg = vec![0usize; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = rows[y * width + x];
        }
        env.run(&col, wy, wy2, shift.1, &mut col_out, &mut col_arg);
        for y in 0..height {
            let sy = col_arg[y];
            let sx = row_args[sy * width + x];
            let i = y * width + x;
            argx[i] = sx;
            argy[i] = sy;
            // Recompute from the source so args reproduce values exactly.
            let dx = (x as i64 + shift.0 - sx as i64) as f64;
            let dy = (y as i64 + shift.1 - sy as i64) as f64;
            values[i] = score.get(sx, sy) + quad(wx, wx2, dx) + quad(wy, wy2, dy);
        }
    }
    Ok(DtResult {
        values: Map2::new(width, height, values),
        argx,
        argy,
    })
}
