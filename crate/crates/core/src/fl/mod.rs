//! Honest-but-curious federated-learning simulation: a client computes the
//! mean cross-entropy on a private batch and exposes only parameter
//! gradients. The attacker additionally knows the model and its weights.

pub mod dataset;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Array, Tensor};
use crate::error::{Error, Result};
use crate::victim::VictimNet;

pub use dataset::{channel_means, Dataset, DirDataset, TemplateDataset};

/// A client's private training batch. Only the simulator and the explicit
/// evaluation path ever read it.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivateBatch {
    images: Array,
    labels: Vec<usize>,
    indices: Vec<usize>,
}

impl PrivateBatch {
    pub fn new(images: Array, labels: Vec<usize>, indices: Vec<usize>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() || labels.is_empty() {
            return Err(Error::InvalidShape {
                op: "private batch",
                shape: s.to_vec(),
                reason: format!("expects [{}, C, H, W] with K >= 1", labels.len()),
            });
        }
        Ok(PrivateBatch {
            images,
            labels,
            indices,
        })
    }

    pub fn from_dataset(dataset: &dyn Dataset, indices: &[usize]) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (img, label) = dataset.get(i)?;
            images.push(img);
            labels.push(label);
        }
        Self::new(Array::stack(&images)?, labels, indices.to_vec())
    }

    pub fn images(&self) -> &Array {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn has_duplicate_labels(&self) -> bool {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.windows(2).any(|w| w[0] == w[1])
    }
}

/// What the server sees after one local step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCapture {
    pub names: Vec<String>,
    pub grads: Vec<Array>,
    /// Batch size, known to the attacker.
    pub batch_size: usize,
    pub classes: usize,
}

impl GradientCapture {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.grads[i])
    }

    /// Gradient of the last fully connected weight, `M × N`.
    pub fn fc_grad(&self) -> &Array {
        self.get("fc.weight")
            .expect("capture always holds the fc weight gradient")
    }
}

/// Gradients of the mean cross-entropy of `batch` with respect to every
/// victim parameter.
pub fn expose_gradients(net: &VictimNet, batch: &PrivateBatch) -> Result<GradientCapture> {
    let classes = net.config().classes;
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let w = net.weights(true);
    let loss = net
        .forward_with(&w, &Tensor::constant(batch.images.clone()))?
        .cross_entropy(&batch.labels)?;
    let grads = grad(&loss, &w.tensors, false)?;
    Ok(GradientCapture {
        names: net.param_names(),
        grads: grads.iter().map(Tensor::to_array).collect(),
        batch_size: batch.len(),
        classes,
    })
}

/// Index sampling: the first index is uniform in `[1, D/2]`, each next one
/// adds a uniform increment in `[1, ceil(D/100)]`. Indices are 1-based in
/// that description and returned 0-based. Past the end either wraps or
/// fails.
pub fn sample_indices(
    dataset_len: usize,
    k: usize,
    rng: &mut impl Rng,
    wraparound: bool,
) -> Result<Vec<usize>> {
    if dataset_len == 0 {
        return Err(Error::invalid("cannot sample from an empty dataset"));
    }
    if k == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if k > dataset_len && !wraparound {
        return Err(Error::invalid(format!(
            "batch of {k} exceeds dataset of {dataset_len} without wraparound"
        )));
    }
    let start_hi = (dataset_len / 2).max(1);
    let step_hi = dataset_len.div_ceil(100).max(1);
    let mut idx = rng.random_range(1..=start_hi);
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        if i > 0 {
            idx += rng.random_range(1..=step_hi);
        }
        if idx > dataset_len {
            if !wraparound {
                return Err(Error::invalid(format!(
                    "index {idx} ran past dataset of {dataset_len}"
                )));
            }
            idx = (idx - 1) % dataset_len + 1;
        }
        out.push(idx - 1);
    }
    Ok(out)
}

pub fn sample_batch(
    dataset: &dyn Dataset,
    k: usize,
    rng: &mut impl Rng,
    wraparound: bool,
) -> Result<PrivateBatch> {
    let idx = sample_indices(dataset.len(), k, rng, wraparound)?;
    PrivateBatch::from_dataset(dataset, &idx)
}

/// Everything needed to rebuild one attack scenario exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub victim_seed: u64,
    pub dataset: TemplateDataset,
    pub batch_indices: Vec<usize>,
}

impl Scenario {
    pub fn batch(&self) -> Result<PrivateBatch> {
        PrivateBatch::from_dataset(&self.dataset, &self.batch_indices)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
