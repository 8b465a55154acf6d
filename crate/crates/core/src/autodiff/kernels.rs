//! Raw numeric kernels over row-major buffers. No graph bookkeeping here;
//! `ops.rs` wraps these into differentiable tensor operations.

use super::array::numel;

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Strides of `small` as seen from an iteration over `big`, with broadcast
/// (size-1) axes collapsed to stride 0.
fn broadcast_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let strides = row_major_strides(small);
    small
        .iter()
        .zip(big)
        .zip(strides)
        .map(|((&s, &b), st)| if s == 1 && b != 1 { 0 } else { st })
        .collect()
}

/// Visits every multi-index of `big` in row-major order, passing the flat
/// index into `big` and the matching flat index into the broadcast `small`.
fn for_each_broadcast(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(big);
    if n == 0 {
        return;
    }
    let bstr = broadcast_strides(small, big);
    let rank = big.len();
    let mut idx = vec![0usize; rank];
    let mut small_off = 0usize;
    for flat in 0..n {
        f(flat, small_off);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            small_off += bstr[axis];
            if idx[axis] < big[axis] {
                break;
            }
            small_off -= bstr[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn expand(src: &[f64], src_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; numel(shape)];
    for_each_broadcast(src_shape, shape, |o, s| out[o] = src[s]);
    out
}

pub(crate) fn reduce(src: &[f64], src_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; numel(shape)];
    for_each_broadcast(shape, src_shape, |i, o| out[o] += src[i]);
    out
}

/// `(outer, axis_len, inner)` split used by the axis slicing kernels.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub(crate) fn slice_axis(
    src: &[f64],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner;
        out.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
    }
    out
}

pub(crate) fn pad_axis(
    src: &[f64],
    shape: &[usize],
    axis: usize,
    start: usize,
    total: usize,
) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; outer * total * inner];
    for o in 0..outer {
        let dst = o * total * inner + start * inner;
        out[dst..dst + n * inner].copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
    }
    out
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry shared by the three convolution kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Input row/col for output position `o` and kernel tap `k`, if in bounds.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub(crate) fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_c * g.out_h * g.out_w];
    for b in 0..g.batch {
        for o in 0..g.out_c {
            let obase = (b * g.out_c + o) * g.out_h * g.out_w;
            for c in 0..g.in_c {
                let xbase = (b * g.in_c + c) * g.in_h * g.in_w;
                let wbase = (o * g.in_c + c) * g.k_h * g.k_w;
                for kh in 0..g.k_h {
                    for kw in 0..g.k_w {
                        let wv = w[wbase + kh * g.k_w + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for oh in 0..g.out_h {
                            let Some(ih) = g.src(oh, kh, g.in_h) else {
                                continue;
                            };
                            for ow in 0..g.out_w {
                                if let Some(iw) = g.src(ow, kw, g.in_w) {
                                    out[obase + oh * g.out_w + ow] +=
                                        wv * x[xbase + ih * g.in_w + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_input_grad(grad: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.in_c * g.in_h * g.in_w];
    for b in 0..g.batch {
        for o in 0..g.out_c {
            let gbase = (b * g.out_c + o) * g.out_h * g.out_w;
            for c in 0..g.in_c {
                let xbase = (b * g.in_c + c) * g.in_h * g.in_w;
                let wbase = (o * g.in_c + c) * g.k_h * g.k_w;
                for kh in 0..g.k_h {
                    for kw in 0..g.k_w {
                        let wv = w[wbase + kh * g.k_w + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for oh in 0..g.out_h {
                            let Some(ih) = g.src(oh, kh, g.in_h) else {
                                continue;
                            };
                            for ow in 0..g.out_w {
                                if let Some(iw) = g.src(ow, kw, g.in_w) {
                                    out[xbase + ih * g.in_w + iw] +=
                                        wv * grad[gbase + oh * g.out_w + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_weight_grad(x: &[f64], grad: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.out_c * g.in_c * g.k_h * g.k_w];
    for b in 0..g.batch {
        for o in 0..g.out_c {
            let gbase = (b * g.out_c + o) * g.out_h * g.out_w;
            for c in 0..g.in_c {
                let xbase = (b * g.in_c + c) * g.in_h * g.in_w;
                let wbase = (o * g.in_c + c) * g.k_h * g.k_w;
                for kh in 0..g.k_h {
                    for kw in 0..g.k_w {
                        let mut acc = 0.0;
                        for oh in 0..g.out_h {
                            let Some(ih) = g.src(oh, kh, g.in_h) else {
                                continue;
                            };
                            for ow in 0..g.out_w {
                                if let Some(iw) = g.src(ow, kw, g.in_w) {
                                    acc += grad[gbase + oh * g.out_w + ow]
                                        * x[xbase + ih * g.in_w + iw];
                                }
                            }
                        }
                        out[wbase + kh * g.k_w + kw] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Non-overlapping `k`×`k` average pooling over the two trailing axes.
pub(crate) fn avg_pool(x: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                out[p * oh * ow + (i / k) * ow + j / k] += x[p * h * w + i * w + j] * scale;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool`]: spreads each pooled value back over its window.
pub(crate) fn avg_pool_adjoint(g: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                out[p * h * w + i * w + j] = g[p * oh * ow + (i / k) * ow + j / k] * scale;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expand_then_reduce_counts_copies() {
        let src = [1.0, 2.0];
        let big = expand(&src, &[2, 1], &[2, 3]);
        assert_eq!(big, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(reduce(&big, &[2, 3], &[2, 1]), vec![3.0, 6.0]);
        assert_eq!(reduce(&big, &[2, 3], &[1, 3]), vec![3.0, 3.0, 3.0]);
        assert_eq!(reduce(&big, &[2, 3], &[1, 1]), vec![9.0]);
    }

    #[test]
    fn slice_and_pad_are_adjoint_shapes() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let s = slice_axis(&x, &[2, 3, 2], 1, 1, 2);
        assert_eq!(s, vec![2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
        let p = pad_axis(&s, &[2, 2, 2], 1, 1, 3);
        assert_eq!(
            p,
            vec![0.0, 0.0, 2.0, 3.0, 4.0, 5.0, 0.0, 0.0, 8.0, 9.0, 10.0, 11.0]
        );
    }

    #[test]
    fn conv_identity_kernel() {
        let g = ConvGeom {
            batch: 1,
            in_c: 1,
            in_h: 3,
            in_w: 3,
            out_c: 1,
            k_h: 3,
            k_w: 3,
            out_h: 3,
            out_w: 3,
            stride: 1,
            pad: 1,
        };
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        assert_eq!(conv2d(&x, &w, &g), x);
        assert_eq!(conv2d_input_grad(&x, &w, &g), x);
    }
}
