use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Array, Tensor};
use crate::error::{Error, Result};
use crate::imaging::{
    r_canny, r_mean, r_soft_edge, r_tv, BaselinePoint, CannyParams, ChannelMeans,
};
use crate::victim::VictimNet;

/// Distance between the observed and the candidate parameter gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostFn {
    /// `1 - cos` over all selected gradients taken as one flat vector.
    #[default]
    Cosine,
    /// Sum of squared differences.
    L2,
}

/// How the edge-position prior enters the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgePrior {
    /// Canny middle-edge distance. Counted in the loss value and in best
    /// iterate selection, contributes no gradient.
    #[default]
    Canny,
    /// Differentiable edge-centroid distance.
    SoftEdge,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub cost: CostFn,
    /// Leave bias gradients out of the comparison.
    pub exclude_bias: bool,
    /// Average per-parameter cosine distances instead of one global cosine.
    pub per_layer: bool,
}

/// The observed gradients, restricted to the compared parameters.
#[derive(Clone, Debug)]
pub struct MatchTarget {
    indices: Vec<usize>,
    grads: Vec<Tensor>,
    norm: f64,
}

impl MatchTarget {
    pub fn new(names: &[String], grads: &[Array], exclude_bias: bool) -> Result<Self> {
        if names.len() != grads.len() {
            return Err(Error::invalid("gradient names and values differ in length"));
        }
        let indices: Vec<usize> = (0..names.len())
            .filter(|&i| !(exclude_bias && names[i].ends_with(".bias")))
            .collect();
        if indices.is_empty() {
            return Err(Error::invalid("no gradients selected for matching"));
        }
        let grads: Vec<Tensor> = indices
            .iter()
            .map(|&i| Tensor::constant(grads[i].clone()))
            .collect();
        let norm = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        Ok(MatchTarget {
            indices,
            grads,
            norm,
        })
    }
}

/// Gradient-matching loss of candidate images `x` with labels `labels`,
/// differentiable in `x`.
pub fn grad_matching_loss(
    net: &VictimNet,
    x: &Tensor,
    labels: &[usize],
    target: &MatchTarget,
    opts: MatchOptions,
) -> Result<Tensor> {
    let w = net.weights(true);
    let loss = net.forward_with(&w, x)?.cross_entropy(labels)?;
    let wrt: Vec<Tensor> = target
        .indices
        .iter()
        .map(|&i| w.tensors[i].clone())
        .collect();
    let cand = grad(&loss, &wrt, true)?;
    match opts.cost {
        CostFn::L2 => {
            let mut total = Tensor::scalar(0.0);
            for (c, t) in cand.iter().zip(&target.grads) {
                total = total.add(&c.sub(t)?.square()?.sum()?)?;
            }
            Ok(total)
        }
        CostFn::Cosine if opts.per_layer => {
            let mut total = Tensor::scalar(0.0);
            let mut layers = 0usize;
            for (c, t) in cand.iter().zip(&target.grads) {
                let tn = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                if tn == 0.0 {
                    continue;
                }
                let cn = c.norm()?;
                if cn.item() == 0.0 {
                    return Err(Error::DegenerateGradient);
                }
                let cos = c.dot(t)?.div(&cn)?.scale(1.0 / tn)?;
                total = total.add(&cos.neg()?.add_scalar(1.0)?)?;
                layers += 1;
            }
            if layers == 0 {
                return Err(Error::DegenerateGradient);
            }
            total.scale(1.0 / layers as f64)
        }
        CostFn::Cosine => {
            if target.norm == 0.0 {
                return Err(Error::DegenerateGradient);
            }
            let mut dot = Tensor::scalar(0.0);
            let mut sq = Tensor::scalar(0.0);
            for (c, t) in cand.iter().zip(&target.grads) {
                dot = dot.add(&c.dot(t)?)?;
                sq = sq.add(&c.square()?.sum()?)?;
            }
            if sq.item() == 0.0 {
                return Err(Error::DegenerateGradient);
            }
            dot.div(&sq.sqrt()?)?
                .scale(1.0 / target.norm)?
                .neg()?
                .add_scalar(1.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub tv: f64,
    pub mean: f64,
    pub edge: f64,
}

/// Everything the objective needs besides the candidate images.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    pub net: &'a VictimNet,
    pub labels: &'a [usize],
    pub target: &'a MatchTarget,
    pub options: MatchOptions,
    pub weights: Weights,
    pub means: &'a ChannelMeans,
    pub baseline: BaselinePoint,
    pub edge_prior: EdgePrior,
    pub canny: CannyParams,
}

/// Unweighted term values and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub matching: f64,
    pub tv: f64,
    pub mean: f64,
    pub edge: f64,
    pub total: f64,
}

impl Objective<'_> {
    /// The differentiable part of the objective plus the term breakdown.
    /// With the Canny prior `total` exceeds the tensor value by
    /// `weights.edge * edge`.
    pub fn evaluate(&self, x: &Tensor) -> Result<(Tensor, ObjectiveTerms)> {
        let matching = grad_matching_loss(self.net, x, self.labels, self.target, self.options)?;
        let mut obj = matching.clone();
        let mut terms = ObjectiveTerms {
            matching: matching.item(),
            ..Default::default()
        };
        if self.weights.tv != 0.0 {
            let t = r_tv(x)?;
            terms.tv = t.item();
            obj = obj.add(&t.scale(self.weights.tv)?)?;
        }
        if self.weights.mean != 0.0 {
            let t = r_mean(x, self.means)?;
            terms.mean = t.item();
            obj = obj.add(&t.scale(self.weights.mean)?)?;
        }
        let mut detached = 0.0;
        if self.weights.edge != 0.0 {
            match self.edge_prior {
                EdgePrior::Canny => {
                    terms.edge = r_canny(x.value(), self.baseline, &self.canny)?;
                    detached = self.weights.edge * terms.edge;
                }
                EdgePrior::SoftEdge => {
                    let t = r_soft_edge(x, self.baseline)?;
                    terms.edge = t.item();
                    obj = obj.add(&t.scale(self.weights.edge)?)?;
                }
            }
        }
        terms.total = obj.item() + detached;
        Ok((obj, terms))
    }
}
