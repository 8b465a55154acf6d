//! Image priors added to the gradient-matching objective. All take images
//! shaped `[..., C, H, W]` (a batch or a single image).

use serde::{Deserialize, Serialize};

use super::canny::{canny_edges, BaselinePoint, CannyParams};
use crate::autodiff::{no_grad, Array, Tensor};
use crate::error::{Error, Result};

/// Per-channel mean intensities of a reference image population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMeans(pub Vec<f64>);

impl ChannelMeans {
    pub fn new(means: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("channel means must be finite and non-empty"));
        }
        Ok(ChannelMeans(means))
    }
}

fn as_batch(op: &'static str, image: &Tensor) -> Result<Tensor> {
    match image.shape().len() {
        3 => {
            let s = image.shape();
            image.reshape(&[1, s[0], s[1], s[2]])
        }
        4 => Ok(image.clone()),
        _ => Err(Error::InvalidShape {
            op,
            shape: image.shape().to_vec(),
            reason: "expects [C, H, W] or [K, C, H, W]".into(),
        }),
    }
}

/// Smooth anisotropic total variation: squared vertical and horizontal
/// neighbour differences, summed and divided by the element count.
pub fn r_tv(image: &Tensor) -> Result<Tensor> {
    let x = as_batch("r_tv", image)?;
    let s = x.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    if h < 2 || w < 2 {
        return Err(Error::InvalidShape {
            op: "r_tv",
            shape: s,
            reason: "needs H, W >= 2".into(),
        });
    }
    let dv = x
        .slice_axis(2, 1, h - 1)?
        .sub(&x.slice_axis(2, 0, h - 1)?)?;
    let dh = x
        .slice_axis(3, 1, w - 1)?
        .sub(&x.slice_axis(3, 0, w - 1)?)?;
    dv.square()?
        .sum()?
        .add(&dh.square()?.sum()?)?
        .scale(1.0 / x.numel() as f64)
}

/// Squared distance between each image's channel means and `reference`,
/// averaged over the batch.
pub fn r_mean(image: &Tensor, reference: &ChannelMeans) -> Result<Tensor> {
    let x = as_batch("r_mean", image)?;
    let s = x.shape().to_vec();
    let (k, c) = (s[0], s[1]);
    if c != reference.0.len() {
        return Err(Error::ShapeMismatch {
            op: "r_mean",
            lhs: s,
            rhs: vec![reference.0.len()],
        });
    }
    let means = x
        .reduce_to(&[k, c, 1, 1])?
        .reshape(&[k, c])?
        .scale(1.0 / (s[2] * s[3]) as f64)?;
    let target = Tensor::from_vec(&[1, c], reference.0.clone())?.expand_to(&[k, c])?;
    means.sub(&target)?.square()?.sum()?.scale(1.0 / k as f64)
}

/// Squared pixel distance between `baseline` and the middle Canny edge pixel
/// of each image, averaged over the batch. An image without edges adds
/// nothing. Edge extraction is not differentiable, so the result is a plain
/// number.
pub fn r_canny(image: &Array, baseline: BaselinePoint, params: &CannyParams) -> Result<f64> {
    let s = image.shape();
    let images: Vec<Array> = match s.len() {
        3 => vec![image.clone()],
        4 => (0..s[0])
            .map(|i| image.index_outer(i))
            .collect::<Result<_>>()?,
        _ => {
            return Err(Error::InvalidShape {
                op: "r_canny",
                shape: s.to_vec(),
                reason: "expects [C, H, W] or [K, C, H, W]".into(),
            })
        }
    };
    let mut total = 0.0;
    for img in &images {
        let edges = canny_edges(img, params)?;
        if let Some(mid) = edges.get(edges.len() / 2) {
            total += mid.sq_dist(&baseline);
        }
    }
    Ok(total / images.len() as f64)
}

const SOFT_EDGE_EPS: f64 = 1e-12;

/// Differentiable stand-in for [`r_canny`]: squared distance between
/// `baseline` and the Sobel-magnitude-weighted centroid of each image,
/// averaged over the batch.
pub fn r_soft_edge(image: &Tensor, baseline: BaselinePoint) -> Result<Tensor> {
    let x = as_batch("r_soft_edge", image)?;
    let s = x.shape().to_vec();
    let (k, c, h, w) = (s[0], s[1], s[2], s[3]);
    let gray_w = Tensor::constant(Array::full(&[1, c, 1, 1], 1.0 / c as f64));
    let gray = x.conv2d(&gray_w, 1, 0)?;
    let sobel_x = Tensor::from_vec(
        &[1, 1, 3, 3],
        vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
    )?;
    let sobel_y = Tensor::from_vec(
        &[1, 1, 3, 3],
        vec![-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
    )?;
    let gx = gray.conv2d(&sobel_x, 1, 1)?;
    let gy = gray.conv2d(&sobel_y, 1, 1)?;
    let mag = gx
        .square()?
        .add(&gy.square()?)?
        .add_scalar(SOFT_EDGE_EPS)?
        .sqrt()?;
    let rows = Tensor::constant(Array::from_fn(&[k, 1, h, w], |i| ((i / w) % h) as f64));
    let cols = Tensor::constant(Array::from_fn(&[k, 1, h, w], |i| (i % w) as f64));
    let per_image = |t: &Tensor| -> Result<Tensor> { t.reduce_to(&[k, 1, 1, 1])?.reshape(&[k]) };
    let total = per_image(&mag)?;
    let r = per_image(&mag.mul(&rows)?)?.div(&total)?;
    let cc = per_image(&mag.mul(&cols)?)?.div(&total)?;
    let r0 = Tensor::constant(Array::full(&[k], baseline.row as f64));
    let c0 = Tensor::constant(Array::full(&[k], baseline.col as f64));
    r.sub(&r0)?
        .square()?
        .add(&cc.sub(&c0)?.square()?)?
        .sum()?
        .scale(1.0 / k as f64)
}

/// Convenience for evaluating a tensor regularizer on plain values.
pub fn eval(f: impl FnOnce(&Tensor) -> Result<Tensor>, image: &Array) -> Result<f64> {
    let _g = no_grad();
    Ok(f(&Tensor::constant(image.clone()))?.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tv_of_constant_is_zero() {
        assert_eq!(eval(r_tv, &Array::full(&[3, 5, 4], 0.3)).unwrap(), 0.0);
    }

    #[test]
    fn tv_checkerboard_2x2() {
        let img = arr(&[1, 2, 2], &[0.0, 1.0, 1.0, 0.0]);
        assert!((eval(r_tv, &img).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tv_needs_two_pixels_per_axis() {
        assert!(eval(r_tv, &Array::zeros(&[1, 1, 4])).is_err());
    }

    #[test]
    fn mean_matches_reference() {
        let img = Array::full(&[1, 4, 4], 0.7);
        let zero = ChannelMeans::new(vec![0.7]).unwrap();
        assert!(eval(|t| r_mean(t, &zero), &img).unwrap() < 1e-30);
        let half = ChannelMeans::new(vec![0.5]).unwrap();
        assert!((eval(|t| r_mean(t, &half), &img).unwrap() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn mean_channel_mismatch() {
        let refm = ChannelMeans::new(vec![0.5, 0.5]).unwrap();
        assert!(eval(|t| r_mean(t, &refm), &Array::zeros(&[3, 2, 2])).is_err());
    }

    #[test]
    fn canny_penalty_distances() {
        let p = CannyParams::default();
        assert_eq!(
            r_canny(
                &Array::full(&[1, 8, 8], 0.5),
                BaselinePoint { row: 3, col: 4 },
                &p
            )
            .unwrap(),
            0.0
        );
        let a = BaselinePoint { row: 0, col: 0 };
        let b = BaselinePoint { row: 3, col: 4 };
        assert_eq!(a.sq_dist(&b), 25.0);
    }

    #[test]
    fn canny_penalty_is_zero_at_own_middle_edge() {
        let img = crate::imaging::canny::square_image(24, 6, 6, 10, 1.0);
        let p = CannyParams::default();
        let edges = canny_edges(&img, &p).unwrap();
        let mid = edges[edges.len() / 2];
        assert_eq!(r_canny(&img, mid, &p).unwrap(), 0.0);
    }

    #[test]
    fn canny_penalty_falls_as_square_moves_to_baseline() {
        let p = CannyParams::default();
        let target = BaselinePoint { row: 20, col: 20 };
        let penalties: Vec<f64> = [2usize, 5, 8, 11]
            .iter()
            .map(|&off| {
                let img = crate::imaging::canny::square_image(32, off, off, 12, 1.0);
                r_canny(&img, target, &p).unwrap()
            })
            .collect();
        for w in penalties.windows(2) {
            assert!(w[1] < w[0], "{penalties:?}");
        }
    }

    #[test]
    fn soft_edge_centroid_of_centred_square() {
        let img = crate::imaging::canny::square_image(16, 4, 4, 8, 1.0);
        // Symmetric square: the edge centroid sits at (7.5, 7.5).
        let v = eval(|t| r_soft_edge(t, BaselinePoint { row: 7, col: 7 }), &img).unwrap();
        assert!((v - 0.5).abs() < 1e-6, "{v}");
    }
}
