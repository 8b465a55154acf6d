//! Regularized gradient-matching reconstruction: start from a flat gray
//! image, descend the matching loss plus image priors with Adam, keep the
//! iterate with the lowest objective.

pub mod adam;
pub mod objective;

use std::time::Instant;

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Array, Tensor};
use crate::error::{Error, Result};
use crate::fl::{GradientCapture, PrivateBatch};
use crate::imaging::{
    gt_baseline_point, mse, psnr, ssim, BaselinePoint, CannyParams, ChannelMeans, FinMode,
};
use crate::labels::column_sums;
use crate::victim::VictimNet;

pub use adam::Adam;
pub use objective::{
    grad_matching_loss, CostFn, EdgePrior, MatchOptions, MatchTarget, Objective, ObjectiveTerms,
    Weights,
};

pub const GRAY_LEVEL: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Every pixel at 0.5.
    #[default]
    Gray,
    /// Uniform in `[0, 1]`.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub alpha_tv: f64,
    pub alpha_mean: f64,
    pub alpha_ca: f64,
    pub lr: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub cost: CostFn,
    pub init: InitMode,
    /// Multiply the learning rate by 0.2 once 2/7 of the iterations are done.
    pub lr_decay: bool,
    pub exclude_bias: bool,
    pub per_layer: bool,
    pub edge_prior: EdgePrior,
    pub fin_mode: FinMode,
    /// Trajectory and progress sampling period.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            alpha_tv: 1e-1,
            alpha_mean: 1e-3,
            alpha_ca: 1e-4,
            lr: 3e-3,
            max_iters: 10_000,
            restarts: 1,
            cost: CostFn::Cosine,
            init: InitMode::Gray,
            lr_decay: false,
            exclude_bias: false,
            per_layer: false,
            edge_prior: EdgePrior::Canny,
            fin_mode: FinMode::MaxMin,
            log_every: 100,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("alpha_tv", self.alpha_tv),
            ("alpha_mean", self.alpha_mean),
            ("alpha_ca", self.alpha_ca),
        ] {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {a}"
                )));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.max_iters == 0 || self.restarts == 0 || self.log_every == 0 {
            return Err(Error::invalid(
                "max_iters, restarts and log_every must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if self.lr_decay && iteration >= 2 * self.max_iters / 7 {
            self.lr * 0.2
        } else {
            self.lr
        }
    }

    pub fn weights(&self) -> Weights {
        Weights {
            tv: self.alpha_tv,
            mean: self.alpha_mean,
            edge: self.alpha_ca,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub restart: usize,
    pub iteration: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub terms: ObjectiveTerms,
}

/// Pushed to the progress callback every `log_every` iterations.
#[derive(Clone, Copy, Debug)]
pub struct Progress {
    pub restart: usize,
    pub iteration: usize,
    pub terms: ObjectiveTerms,
    pub best_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackReport {
    pub best_x: Array,
    pub best_loss: f64,
    pub best_terms: ObjectiveTerms,
    pub best_restart: usize,
    pub best_iteration: usize,
    /// Terms at the last evaluated iterate of the last restart.
    pub final_terms: ObjectiveTerms,
    pub labels: Vec<usize>,
    pub baseline: BaselinePoint,
    /// Every `log_every`-th iteration, the last one, and every new best.
    pub trajectory: Vec<TrajectoryPoint>,
    pub config: AttackConfig,
    pub wall_clock_secs: f64,
}

/// Inputs known to the attacker.
#[derive(Clone, Debug)]
pub struct AttackInputs<'a> {
    pub net: &'a VictimNet,
    pub capture: &'a GradientCapture,
    /// Recovered labels, one per image, in the order images are
    /// reconstructed.
    pub labels: &'a [usize],
    pub means: &'a ChannelMeans,
}

fn initial_images(config: &AttackConfig, shape: &[usize], restart: usize) -> Array {
    match config.init {
        InitMode::Gray => Array::full(shape, GRAY_LEVEL),
        InitMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(restart as u64);
            Array::from_fn(shape, |_| rng.random::<f64>())
        }
    }
}

pub fn run_attack(
    inputs: &AttackInputs,
    config: &AttackConfig,
    progress: Option<&mut dyn FnMut(&Progress)>,
) -> Result<AttackReport> {
    run_attack_from(inputs, config, None, progress)
}

/// As [`run_attack`], optionally starting every restart from `init`
/// instead of the configured initialization.
pub fn run_attack_from(
    inputs: &AttackInputs,
    config: &AttackConfig,
    init: Option<&Array>,
    mut progress: Option<&mut dyn FnMut(&Progress)>,
) -> Result<AttackReport> {
    config.validate()?;
    let started = Instant::now();
    let net_cfg = inputs.net.config();
    let k = inputs.labels.len();
    if k == 0 || k != inputs.capture.batch_size {
        return Err(Error::invalid(format!(
            "{k} labels for a batch of {}",
            inputs.capture.batch_size
        )));
    }
    let [c, h, w] = net_cfg.image_shape();
    let shape = [k, c, h, w];
    if let Some(x0) = init {
        if x0.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "attack init",
                lhs: x0.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
    }
    let g1 = column_sums(inputs.capture.fc_grad())?;
    let baseline = gt_baseline_point(&g1, h, w, config.fin_mode)?;
    let target = MatchTarget::new(
        &inputs.capture.names,
        &inputs.capture.grads,
        config.exclude_bias,
    )?;
    let objective = Objective {
        net: inputs.net,
        labels: inputs.labels,
        target: &target,
        options: MatchOptions {
            cost: config.cost,
            exclude_bias: config.exclude_bias,
            per_layer: config.per_layer,
        },
        weights: config.weights(),
        means: inputs.means,
        baseline,
        edge_prior: config.edge_prior,
        canny: CannyParams::default(),
    };

    let mut trajectory = Vec::new();
    let mut best: Option<(f64, Array, ObjectiveTerms, usize, usize)> = None;
    let mut final_terms = ObjectiveTerms::default();
    for restart in 0..config.restarts {
        let mut x = init
            .cloned()
            .unwrap_or_else(|| initial_images(config, &shape, restart));
        let mut adam = Adam::new(x.len());
        for it in 0..config.max_iters {
            let diverged = |detail: String| Error::Diverged {
                restart,
                iteration: it,
                detail,
            };
            let xt = Tensor::param(x.clone());
            let (obj, terms) = objective.evaluate(&xt).map_err(|e| match e {
                Error::NonFinite { op } => diverged(format!("{op} produced a non-finite value")),
                other => other,
            })?;
            if !terms.total.is_finite() {
                return Err(diverged(format!("{terms:?}")));
            }
            let lr = config.lr_at(it);
            let point = TrajectoryPoint {
                restart,
                iteration: it,
                lr,
                terms,
            };
            let improved = best.as_ref().is_none_or(|b| terms.total < b.0);
            if improved {
                best = Some((terms.total, x.clone(), terms, restart, it));
            }
            if improved || it % config.log_every == 0 || it + 1 == config.max_iters {
                trajectory.push(point);
            }
            if it % config.log_every == 0 {
                if let Some(cb) = progress.as_mut() {
                    cb(&Progress {
                        restart,
                        iteration: it,
                        terms,
                        best_loss: best.as_ref().map_or(f64::INFINITY, |b| b.0),
                    });
                }
            }
            final_terms = terms;
            let g = grad(&obj, std::slice::from_ref(&xt), false)?;
            let gd = g[0].data();
            if gd.iter().any(|v| !v.is_finite()) {
                return Err(diverged("non-finite image gradient".into()));
            }
            adam.step(x.data_mut(), gd, lr);
            for v in x.data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
    let (best_loss, best_x, best_terms, best_restart, best_iteration) =
        best.expect("at least one iteration ran");
    Ok(AttackReport {
        best_x,
        best_loss,
        best_terms,
        best_restart,
        best_iteration,
        final_terms,
        labels: inputs.labels.to_vec(),
        baseline,
        trajectory,
        config: config.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Fidelity of a reconstruction against the private batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// `reconstruction[pairing[i]]` was scored against ground-truth image `i`.
    pub pairing: Vec<usize>,
}

const EXHAUSTIVE_PAIRING_MAX: usize = 8;

/// Pairs reconstructed and true images to minimize the summed MSE (all
/// permutations up to 8 images, greedy beyond), then averages per-image
/// MSE, PSNR and SSIM.
pub fn evaluate(reconstruction: &Array, truth: &PrivateBatch) -> Result<Evaluation> {
    let x = truth.images();
    if reconstruction.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: reconstruction.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let k = truth.len();
    let rec: Vec<Array> = (0..k)
        .map(|i| reconstruction.index_outer(i))
        .collect::<Result<_>>()?;
    let gt: Vec<Array> = (0..k).map(|i| x.index_outer(i)).collect::<Result<_>>()?;
    let mut cost = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            cost[i * k + j] = mse(&gt[i], &rec[j])?;
        }
    }
    let pairing: Vec<usize> = if k <= EXHAUSTIVE_PAIRING_MAX {
        (0..k)
            .permutations(k)
            .min_by(|a, b| {
                let ca: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * k + j]).sum();
                let cb: f64 = b.iter().enumerate().map(|(i, &j)| cost[i * k + j]).sum();
                ca.total_cmp(&cb)
            })
            .expect("k >= 1")
    } else {
        let mut used = vec![false; k];
        (0..k)
            .map(|i| {
                let j = (0..k)
                    .filter(|&j| !used[j])
                    .min_by(|&a, &b| cost[i * k + a].total_cmp(&cost[i * k + b]))
                    .expect("one unused per row");
                used[j] = true;
                j
            })
            .collect()
    };
    let (mut m, mut p, mut s) = (0.0, 0.0, 0.0);
    for (i, &j) in pairing.iter().enumerate() {
        m += mse(&gt[i], &rec[j])?;
        p += psnr(&gt[i], &rec[j])?;
        s += ssim(&gt[i], &rec[j])?;
    }
    let n = k as f64;
    Ok(Evaluation {
        mse: m / n,
        psnr: p / n,
        ssim: s / n,
        pairing,
    })
}
