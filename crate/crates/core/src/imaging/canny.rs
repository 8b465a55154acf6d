//! Canny edge detection and the subject-position baseline points compared
//! by the Canny regularizer.

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    /// Weak-edge threshold as a fraction of the maximum gradient magnitude.
    pub low: f64,
    /// Strong-edge threshold as a fraction of the maximum gradient magnitude.
    pub high: f64,
    pub sigma: f64,
    /// Odd Gaussian kernel width.
    pub kernel: usize,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            low: 0.8,
            high: 0.9,
            sigma: 1.0,
            kernel: 5,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.low && self.low < self.high && self.high <= 1.0) {
            return Err(Error::invalid(format!(
                "canny thresholds need 0 < low < high <= 1, got {} and {}",
                self.low, self.high
            )));
        }
        if self.kernel.is_multiple_of(2) || self.sigma <= 0.0 {
            return Err(Error::invalid("gaussian kernel must be odd with sigma > 0"));
        }
        Ok(())
    }
}

/// A pixel position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BaselinePoint {
    pub row: usize,
    pub col: usize,
}

impl BaselinePoint {
    pub fn sq_dist(&self, other: &BaselinePoint) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        dr * dr + dc * dc
    }
}

/// Unweighted channel mean of a `[C, H, W]` image.
pub fn grayscale(image: &Array) -> Result<(Vec<f64>, usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(Error::InvalidShape {
            op: "grayscale",
            shape: s.to_vec(),
            reason: "expects [C, H, W]".into(),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut gray = vec![0.0; h * w];
    for plane in image.data().chunks(h * w) {
        for (g, v) in gray.iter_mut().zip(plane) {
            *g += v;
        }
    }
    gray.iter_mut().for_each(|g| *g /= c as f64);
    Ok((gray, h, w))
}

pub(crate) fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable blur with replicated borders.
pub(crate) fn blur(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * img[i * w + clamp_idx(j as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp_idx(i as isize + k as isize - r, h) * w + j])
                .sum();
        }
    }
    out
}

/// Sobel responses `(d/dcol, d/drow)` with replicated borders.
fn sobel(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |i: isize, j: isize| img[clamp_idx(i, h) * w + clamp_idx(j, w)];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let idx = i as usize * w + j as usize;
            gx[idx] = (at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i, j - 1) + at(i + 1, j - 1));
            gy[idx] = (at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i - 1, j) + at(i - 1, j + 1));
        }
    }
    (gx, gy)
}

/// Edge pixels of a `[C, H, W]` image in row-major order: channel-mean
/// grayscale, Gaussian blur, Sobel, non-maximum suppression, then
/// hysteresis with thresholds relative to the maximum gradient magnitude.
pub fn canny_edges(image: &Array, params: &CannyParams) -> Result<Vec<BaselinePoint>> {
    params.validate()?;
    if !image.is_finite() {
        return Err(Error::NonFinite { op: "canny_edges" });
    }
    let (gray, h, w) = grayscale(image)?;
    let smooth = blur(&gray, h, w, &gaussian_kernel(params.kernel, params.sigma));
    let (gx, gy) = sobel(&smooth, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Ok(Vec::new());
    }

    // Quantized direction; the neighbour "ahead" lies along the gradient
    // (towards brighter pixels). Ties go to the brighter side so a step edge
    // yields a single-pixel line on its bright side.
    let mut thin = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            let m = mag[idx];
            if m == 0.0 {
                continue;
            }
            let angle = gy[idx].atan2(gx[idx]).to_degrees();
            let a = if angle < 0.0 { angle + 180.0 } else { angle };
            let (dr, dc): (isize, isize) = if !(22.5..157.5).contains(&a) {
                (0, 1)
            } else if a < 67.5 {
                (1, 1)
            } else if a < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            // Flip so (dr, dc) points along the actual gradient vector.
            let along = gx[idx] * dc as f64 + gy[idx] * dr as f64;
            let (dr, dc) = if along < 0.0 { (-dr, -dc) } else { (dr, dc) };
            let sample = |sr: isize, sc: isize| {
                let (r, c) = (i as isize + sr, j as isize + sc);
                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                    0.0
                } else {
                    mag[r as usize * w + c as usize]
                }
            };
            if m > sample(dr, dc) && m >= sample(-dr, -dc) {
                thin[idx] = m;
            }
        }
    }

    let (lo, hi) = (params.low * peak, params.high * peak);
    let mut keep = vec![false; h * w];
    let mut stack: Vec<usize> = (0..h * w).filter(|&i| thin[i] >= hi).collect();
    for &s in &stack {
        keep[s] = true;
    }
    while let Some(idx) = stack.pop() {
        let (i, j) = ((idx / w) as isize, (idx % w) as isize);
        for di in -1..=1 {
            for dj in -1..=1 {
                let (r, c) = (i + di, j + dj);
                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                    continue;
                }
                let n = r as usize * w + c as usize;
                if !keep[n] && thin[n] >= lo {
                    keep[n] = true;
                    stack.push(n);
                }
            }
        }
    }
    Ok((0..h * w)
        .filter(|&i| keep[i])
        .map(|i| BaselinePoint {
            row: i / w,
            col: i % w,
        })
        .collect())
}

/// How the strong-gradient threshold is derived from the column-sum vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinMode {
    /// `(max - min) * 0.6`
    #[default]
    MaxMin,
    /// `(max - mean) * 0.6`
    MaxMean,
}

pub fn fin_threshold(g1: &[f64], mode: FinMode) -> f64 {
    let max = g1.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lower = match mode {
        FinMode::MaxMin => g1.iter().copied().fold(f64::INFINITY, f64::min),
        FinMode::MaxMean => g1.iter().sum::<f64>() / g1.len() as f64,
    };
    (max - lower) * 0.6
}

/// Baseline point of the ground truth, read off the column-sum vector `g1`.
///
/// `g1` is laid out row-major on a square grid of side `ceil(sqrt(N))`
/// (unused cells never qualify). Cells above the threshold are scaled to
/// pixel coordinates by `floor(i * rows / side)` and the element at index
/// `len / 2` of that row-major list is returned. With no qualifying cell
/// the image centre is used.
pub fn gt_baseline_point(
    g1: &[f64],
    img_rows: usize,
    img_cols: usize,
    mode: FinMode,
) -> Result<BaselinePoint> {
    if g1.is_empty() {
        return Err(Error::invalid("baseline point from an empty gradient"));
    }
    let side = (g1.len() as f64).sqrt().ceil() as usize;
    let fin = fin_threshold(g1, mode);
    let scaled: Vec<BaselinePoint> = g1
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > fin)
        .map(|(k, _)| BaselinePoint {
            row: (k / side) * img_rows / side,
            col: (k % side) * img_cols / side,
        })
        .collect();
    Ok(match scaled.get(scaled.len() / 2) {
        Some(p) => *p,
        None => BaselinePoint {
            row: img_rows / 2,
            col: img_cols / 2,
        },
    })
}

/// `1×n×n` image: a `size`×`size` square of brightness `level` with its
/// top-left corner at (`top`, `left`) on a black background.
pub fn square_image(n: usize, top: usize, left: usize, size: usize, level: f64) -> Array {
    Array::from_fn(&[1, n, n], |k| {
        let (i, j) = (k / n, k % n);
        if (top..top + size).contains(&i) && (left..left + size).contains(&j) {
            level
        } else {
            0.0
        }
    })
}

/// Pixels inside the square that touch its boundary.
pub fn perimeter_ring(top: usize, left: usize, size: usize) -> Vec<BaselinePoint> {
    let mut ring = Vec::new();
    for i in top..top + size {
        for j in left..left + size {
            if i == top || j == left || i == top + size - 1 || j == left + size - 1 {
                ring.push(BaselinePoint { row: i, col: j });
            }
        }
    }
    ring
}

/// Intersection over union of two pixel sets.
pub fn jaccard(a: &[BaselinePoint], b: &[BaselinePoint]) -> f64 {
    use std::collections::HashSet;
    let a: HashSet<_> = a.iter().collect();
    let b: HashSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}
