//! Label recovery from the last fully connected layer's gradient.
//!
//! Three estimators share the same input:
//! * [`baseline_min_k`]: per-class minimum over the feature axis, K smallest;
//! * [`idlg_smallest_k`]: the K smallest entries of the column sum `G1`;
//! * [`recover_labels`]: certain labels from negative `G1` entries, topped up
//!   with duplicates scored by the [`AcbHead`].

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::fl::GradientCapture;
use crate::victim::AcbHead;

pub const G2_SCALE: f64 = 1e17;
pub const PRO_SCALE: f64 = 1e10;
pub const DEFAULT_GAP_THRESHOLD: f64 = 0.3;

/// Recovered labels with their origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEstimate {
    /// Labels known to be present, by ascending `G1` value.
    pub l_k: Vec<usize>,
    /// Duplicates inferred from the head, in scan order, then padding.
    pub l_acb: Vec<usize>,
    /// `l_k ++ l_acb`, sorted ascending.
    pub combined: Vec<usize>,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcbIntermediates {
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub pro_acb: Vec<f64>,
    /// `(label, pro_acb[label] / 1e10)`, descending by score, ties by label.
    pub pro_prime: Vec<(usize, f64)>,
}

fn check_fc(fc_grad: &Array) -> Result<(usize, usize)> {
    match *fc_grad.shape() {
        [m, n] if m > 0 && n > 0 => Ok((m, n)),
        _ => Err(Error::InvalidShape {
            op: "fc gradient",
            shape: fc_grad.shape().to_vec(),
            reason: "expects a non-empty [M, N] matrix".into(),
        }),
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "batch size {k} must be in 1..={n} for this estimator"
        )));
    }
    Ok(())
}

/// Indices sorted by `(value, index)` ascending.
fn argsort_ascending(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

/// Column-wise sum of the `M × N` fc gradient: one entry per class.
pub fn column_sums(fc_grad: &Array) -> Result<Vec<f64>> {
    let (_, n) = check_fc(fc_grad)?;
    let mut g1 = vec![0.0; n];
    for row in fc_grad.data().chunks(n) {
        for (s, v) in g1.iter_mut().zip(row) {
            *s += v;
        }
    }
    Ok(g1)
}

/// Per-class minimum over the feature axis.
pub fn column_mins(fc_grad: &Array) -> Result<Vec<f64>> {
    let (_, n) = check_fc(fc_grad)?;
    let mut mins = vec![f64::INFINITY; n];
    for row in fc_grad.data().chunks(n) {
        for (s, &v) in mins.iter_mut().zip(row) {
            *s = s.min(v);
        }
    }
    Ok(mins)
}

/// The `k` classes with the smallest per-class minimum. Always distinct.
pub fn baseline_min_k(fc_grad: &Array, k: usize) -> Result<Vec<usize>> {
    let mins = column_mins(fc_grad)?;
    check_k(k, mins.len())?;
    let mut out = argsort_ascending(&mins);
    out.truncate(k);
    Ok(out)
}

/// The `k` classes with the smallest column sum.
pub fn idlg_smallest_k(fc_grad: &Array, k: usize) -> Result<Vec<usize>> {
    let g1 = column_sums(fc_grad)?;
    check_k(k, g1.len())?;
    let mut out = argsort_ascending(&g1);
    out.truncate(k);
    Ok(out)
}

/// Classes with a negative column sum, most negative first.
pub fn extract_certain(g1: &[f64]) -> Vec<usize> {
    argsort_ascending(g1)
        .into_iter()
        .filter(|&i| g1[i] < 0.0)
        .collect()
}

/// Scales `G1`, runs it through the head and ranks the scores.
pub fn acb_intermediates(head: &AcbHead, g1: &[f64]) -> Result<AcbIntermediates> {
    if g1.len() != head.config().classes {
        return Err(Error::ShapeMismatch {
            op: "acb intermediates",
            lhs: vec![g1.len()],
            rhs: vec![head.config().classes],
        });
    }
    let g2: Vec<f64> = g1.iter().map(|v| v * G2_SCALE).collect();
    if g2.iter().any(|v| !v.is_finite()) {
        return Err(Error::Overflow(format!(
            "G1 scaled by {G2_SCALE:e} is not finite"
        )));
    }
    let pro_acb = head.scores(&g2)?;
    let scaled: Vec<f64> = pro_acb.iter().map(|v| v / PRO_SCALE).collect();
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|&a, &b| {
        scaled[b]
            .partial_cmp(&scaled[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let pro_prime = order.into_iter().map(|i| (i, scaled[i])).collect();
    Ok(AcbIntermediates {
        g1: g1.to_vec(),
        g2,
        pro_acb,
        pro_prime,
    })
}

/// Labels picked by the gap rule alone, before padding, capped at `need`.
pub fn gap_qualified(
    pro_prime: &[(usize, f64)],
    l_k: &[usize],
    need: usize,
    threshold: f64,
) -> Vec<usize> {
    let mut out = Vec::new();
    for w in pro_prime.windows(2) {
        if out.len() >= need {
            break;
        }
        let ((label, score), (_, next)) = (w[0], w[1]);
        if l_k.contains(&label) && score - next >= threshold {
            out.push(label);
        }
    }
    out
}

/// Duplicate labels: gap-qualified members of `l_k` in descending score
/// order, padded by cycling through `l_k` from its start.
pub fn recover_duplicates(
    inter: &AcbIntermediates,
    l_k: &[usize],
    batch_size: usize,
    threshold: f64,
) -> Result<Vec<usize>> {
    let k = l_k.len();
    if k >= batch_size {
        return Err(Error::invalid(format!(
            "{k} certain labels already cover a batch of {batch_size}"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("no certain labels to duplicate"));
    }
    let need = batch_size - k;
    let mut out = gap_qualified(&inter.pro_prime, l_k, need, threshold);
    let mut m = 0;
    while out.len() < need {
        out.push(l_k[m % k]);
        m += 1;
    }
    Ok(out)
}

/// Full pipeline on a captured gradient.
///
/// More negative entries than the batch size can only come from numerical
/// noise; the most negative `K` are kept. With none at all the estimate
/// falls back to the smallest column sum.
pub fn recover_labels(
    capture: &GradientCapture,
    head: &AcbHead,
    threshold: f64,
) -> Result<(LabelEstimate, AcbIntermediates)> {
    let batch_size = capture.batch_size;
    let g1 = column_sums(capture.fc_grad())?;
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut l_k = extract_certain(&g1);
    l_k.truncate(batch_size);
    if l_k.is_empty() {
        l_k.push(argsort_ascending(&g1)[0]);
    }
    let inter = acb_intermediates(head, &g1)?;
    let l_acb = if l_k.len() < batch_size {
        recover_duplicates(&inter, &l_k, batch_size, threshold)?
    } else {
        Vec::new()
    };
    let mut combined: Vec<usize> = l_k.iter().chain(&l_acb).copied().collect();
    combined.sort_unstable();
    Ok((
        LabelEstimate {
            k: l_k.len(),
            l_k,
            l_acb,
            combined,
        },
        inter,
    ))
}

/// Sorted copy, for multiset comparison.
pub fn multiset(labels: &[usize]) -> Vec<usize> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v
}
