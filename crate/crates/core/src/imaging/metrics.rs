//! Reconstruction fidelity metrics for images with values in `[0, 1]`.

use crate::autodiff::Array;
use crate::error::{Error, Result};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(op: &'static str, x: &Array, y: &Array) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if x.is_empty() {
        return Err(Error::invalid(format!("{op} of empty images")));
    }
    Ok(())
}

pub fn mse(x: &Array, y: &Array) -> Result<f64> {
    check_pair("mse", x, y)?;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64)
}

/// PSNR in dB for peak value 1.0; `f64::INFINITY` when the images match.
pub fn psnr(x: &Array, y: &Array) -> Result<f64> {
    let m = mse(x, y)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// SSIM with an 11×11 Gaussian window (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`,
/// dynamic range 1, averaged over all fully contained windows and over every
/// plane of the two trailing axes. Planes smaller than 11 pixels use the
/// largest odd window that fits.
pub fn ssim(x: &Array, y: &Array) -> Result<f64> {
    check_pair("ssim", x, y)?;
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::InvalidShape {
            op: "ssim",
            shape: s.to_vec(),
            reason: "needs at least two axes".into(),
        });
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = gaussian_window(size);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let (oh, ow) = (h - size + 1, w - size + 1);

    let mut total = 0.0;
    let mut count = 0usize;
    for (px, py) in x.data().chunks(h * w).zip(y.data().chunks(h * w)) {
        for i in 0..oh {
            for j in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..size {
                    for b in 0..size {
                        let wv = win[a * size + b];
                        let (u, v) = (px[(i + a) * w + j + b], py[(i + a) * w + j + b]);
                        mx += wv * u;
                        my += wv * v;
                        sxx += wv * u * u;
                        syy += wv * v * v;
                        sxy += wv * u * v;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
