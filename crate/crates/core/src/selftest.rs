//! Finite-difference gradient oracles and the built-in self-test.
//!
//! Every check compares analytic gradients with central differences,
//! `|analytic - numeric| <= atol + rtol * |numeric|`, entry by entry.
//! Non-scalar op outputs are reduced with a fixed random weighting first.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad, no_grad, Array, Tensor};
use crate::error::{Error, Result};
use crate::fl::{expose_gradients, PrivateBatch, TemplateDataset};
use crate::imaging::canny::{jaccard, perimeter_ring, square_image};
use crate::imaging::{canny_edges, psnr, r_mean, r_tv, ssim, CannyParams, ChannelMeans};
use crate::tea::{grad_matching_loss, CostFn, MatchOptions, MatchTarget};
use crate::victim::{VictimConfig, VictimNet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerance {
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            h: 1e-4,
            rtol: 1e-3,
            atol: 1e-6,
        }
    }
}

/// Worst entry of one gradient comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GradCheck {
    /// `|analytic - numeric| / (atol + rtol * |numeric|)`; passes at or below 1.
    pub worst_ratio: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

pub type ScalarFn = dyn Fn(&[Tensor]) -> Result<Tensor>;

/// `d root / d x`, zeros when `root` does not depend on `x`.
fn grad_or_zero(root: &Tensor, x: &Tensor, create_graph: bool) -> Result<Tensor> {
    match grad(root, std::slice::from_ref(x), create_graph) {
        Ok(mut g) => Ok(g.remove(0)),
        Err(Error::Unreachable(_)) => Ok(Tensor::constant(Array::zeros(x.shape()))),
        Err(e) => Err(e),
    }
}

fn value_at(f: &ScalarFn, inputs: &[Array]) -> Result<f64> {
    // Inputs stay differentiable: second-order checks take gradients inside `f`.
    let t: Vec<Tensor> = inputs.iter().cloned().map(Tensor::param).collect();
    Ok(f(&t)?.item())
}

/// Compares the analytic gradient of scalar `f` with respect to every input
/// against central differences.
pub fn check_gradient(f: &ScalarFn, inputs: &[Array], tol: Tolerance) -> Result<GradCheck> {
    let params: Vec<Tensor> = inputs.iter().cloned().map(Tensor::param).collect();
    let root = f(&params)?;
    if root.numel() != 1 {
        return Err(Error::NotScalar(root.shape().to_vec()));
    }
    let mut check = GradCheck::default();
    let mut probe = inputs.to_vec();
    for (k, p) in params.iter().enumerate() {
        let analytic = grad_or_zero(&root, p, false)?;
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + tol.h;
            let up = value_at(f, &probe)?;
            probe[k].data_mut()[i] = x0 - tol.h;
            let down = value_at(f, &probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * tol.h);
            let a = analytic.data()[i];
            let ratio = (a - numeric).abs() / (tol.atol + tol.rtol * numeric.abs());
            let ratio = if ratio.is_nan() { f64::INFINITY } else { ratio };
            if ratio > check.worst_ratio || check.entries == 0 {
                check.worst_ratio = ratio;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
            check.entries += 1;
        }
    }
    Ok(check)
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    Array::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[lo, hi)` and random sign, for ops with a kink
/// or a pole at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    Array::from_fn(shape, |_| {
        let v = rng.random_range(lo..hi);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// One gradient check: a named scalar function and the point it is
/// checked at.
#[derive(Clone)]
pub struct OpCase {
    pub name: String,
    pub inputs: Vec<Array>,
    pub f: Rc<ScalarFn>,
}

impl OpCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Array>,
        f: impl Fn(&[Tensor]) -> Result<Tensor> + 'static,
    ) -> Self {
        OpCase {
            name: name.into(),
            inputs,
            f: Rc::new(f),
        }
    }

    /// Wraps a possibly non-scalar op, reducing its output with fixed
    /// random weights.
    fn weighted(
        name: &str,
        inputs: Vec<Array>,
        rng: &mut ChaCha8Rng,
        f: impl Fn(&[Tensor]) -> Result<Tensor> + 'static,
    ) -> Result<Self> {
        let shape = {
            let _g = no_grad();
            let t: Vec<Tensor> = inputs.iter().cloned().map(Tensor::constant).collect();
            f(&t)?.shape().to_vec()
        };
        let weights = Tensor::constant(random_array(rng, &shape, -1.0, 1.0));
        Ok(OpCase::new(name, inputs, move |t: &[Tensor]| {
            f(t)?.mul(&weights)?.sum()
        }))
    }

    /// `sum_k <d f / d x_k, v_k>` for fixed random `v`. Its gradient is a
    /// Hessian-vector product, so checking it exercises double backward.
    pub fn second_order(&self, seed: u64) -> OpCase {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dirs: Vec<Tensor> = self
            .inputs
            .iter()
            .map(|a| Tensor::constant(random_array(&mut rng, a.shape(), -1.0, 1.0)))
            .collect();
        let f = Rc::clone(&self.f);
        OpCase::new(
            format!("{} (second order)", self.name),
            self.inputs.clone(),
            move |t: &[Tensor]| {
                let root = f(t)?;
                let mut total = Tensor::scalar(0.0);
                for (x, v) in t.iter().zip(&dirs) {
                    let g = grad_or_zero(&root, x, true)?;
                    total = total.add(&g.dot(v)?)?;
                }
                Ok(total)
            },
        )
    }

    pub fn check(&self, tol: Tolerance) -> Result<GradCheck> {
        check_gradient(self.f.as_ref(), &self.inputs, tol)
    }
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// One randomized case for each differentiable op, drawn from `rng`.
fn op_round(rng: &mut ChaCha8Rng) -> Result<Vec<OpCase>> {
    let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let m = &[a, b];
    let u = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| random_array(rng, m, lo, hi);
    let x = u(-2.0, 2.0, rng);
    let y = u(-2.0, 2.0, rng);
    let pos = u(0.2, 3.0, rng);
    let c = rng.random_range(-2.0..2.0);
    let mut cases = vec![
        OpCase::weighted("add", vec![x.clone(), y.clone()], rng, |t| t[0].add(&t[1]))?,
        OpCase::weighted("sub", vec![x.clone(), y.clone()], rng, |t| t[0].sub(&t[1]))?,
        OpCase::weighted("mul", vec![x.clone(), y.clone()], rng, |t| t[0].mul(&t[1]))?,
        OpCase::weighted(
            "div",
            vec![x.clone(), away_from_zero(rng, m, 0.5, 2.0)],
            rng,
            |t| t[0].div(&t[1]),
        )?,
        OpCase::weighted("neg", vec![x.clone()], rng, |t| t[0].neg())?,
        OpCase::weighted("scale", vec![x.clone()], rng, move |t| t[0].scale(c))?,
        OpCase::weighted("add_scalar", vec![x.clone()], rng, move |t| {
            t[0].add_scalar(c)
        })?,
        OpCase::weighted("exp", vec![x.clone()], rng, |t| t[0].exp())?,
        OpCase::weighted("ln", vec![pos.clone()], rng, |t| t[0].ln())?,
        OpCase::weighted("sqrt", vec![pos.clone()], rng, |t| t[0].sqrt())?,
        OpCase::weighted("sigmoid", vec![x.clone()], rng, |t| t[0].sigmoid())?,
        OpCase::weighted("softplus", vec![x.clone()], rng, |t| t[0].softplus())?,
        OpCase::weighted("square", vec![x.clone()], rng, |t| t[0].square())?,
        OpCase::weighted("relu", vec![away_from_zero(rng, m, 0.05, 2.0)], rng, |t| {
            t[0].relu()
        })?,
        OpCase::weighted("t", vec![x.clone()], rng, |t| t[0].t())?,
        OpCase::weighted("reshape", vec![x.clone()], rng, move |t| {
            t[0].reshape(&[b, a])
        })?,
        OpCase::weighted("sum", vec![x.clone()], rng, |t| t[0].sum())?,
        OpCase::weighted("mean", vec![x.clone()], rng, |t| t[0].mean())?,
        OpCase::weighted("dot", vec![x.clone(), y.clone()], rng, |t| t[0].dot(&t[1]))?,
        OpCase::weighted("norm", vec![away_from_zero(rng, m, 0.2, 2.0)], rng, |t| {
            t[0].norm()
        })?,
    ];

    let k = dim(rng, 1, 4);
    cases.push(OpCase::weighted(
        "matmul",
        vec![u(-1.0, 1.0, rng), random_array(rng, &[b, k], -1.0, 1.0)],
        rng,
        |t| t[0].matmul(&t[1]),
    )?);
    cases.push(OpCase::weighted(
        "expand_to",
        vec![random_array(rng, &[a, 1], -1.0, 1.0)],
        rng,
        move |t| t[0].expand_to(&[a, k]),
    )?);
    cases.push(OpCase::weighted(
        "reduce_to",
        vec![x.clone()],
        rng,
        move |t| t[0].reduce_to(&[a, 1]),
    )?);
    let len = dim(rng, 1, b);
    let start = rng.random_range(0..=b - len);
    cases.push(OpCase::weighted(
        "slice_axis",
        vec![x.clone()],
        rng,
        move |t| t[0].slice_axis(1, start, len),
    )?);
    let total = b + dim(rng, 0, 3);
    let at = rng.random_range(0..=total - b);
    cases.push(OpCase::weighted(
        "pad_axis",
        vec![x.clone()],
        rng,
        move |t| t[0].pad_axis(1, at, total),
    )?);

    let (batch, ch, oc) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
    let side = 2 * dim(rng, 2, 3);
    let img = random_array(rng, &[batch, ch, side, side], -1.0, 1.0);
    let stride = dim(rng, 1, 2);
    let pad = dim(rng, 0, 1);
    cases.push(OpCase::weighted(
        "conv2d",
        vec![img.clone(), random_array(rng, &[oc, ch, 3, 3], -1.0, 1.0)],
        rng,
        move |t| t[0].conv2d(&t[1], stride, pad),
    )?);
    cases.push(OpCase::weighted(
        "avg_pool2d",
        vec![img.clone()],
        rng,
        |t| t[0].avg_pool2d(2),
    )?);
    cases.push(OpCase::weighted(
        "global_avg_pool",
        vec![img.clone()],
        rng,
        |t| t[0].global_avg_pool(),
    )?);
    cases.push(OpCase::weighted(
        "add_channel_bias",
        vec![img, random_array(rng, &[ch], -1.0, 1.0)],
        rng,
        |t| t[0].add_channel_bias(&t[1]),
    )?);

    let logits = random_array(rng, &[a, b + 1], -3.0, 3.0);
    let labels: Vec<usize> = (0..a).map(|_| rng.random_range(0..=b)).collect();
    cases.push(OpCase::weighted(
        "log_softmax",
        vec![logits.clone()],
        rng,
        |t| t[0].log_softmax(),
    )?);
    cases.push(OpCase::weighted(
        "softmax",
        vec![logits.clone()],
        rng,
        |t| t[0].softmax(),
    )?);
    cases.push(OpCase::weighted(
        "cross_entropy",
        vec![logits],
        rng,
        move |t| t[0].cross_entropy(&labels),
    )?);
    Ok(cases)
}

/// `rounds` randomized cases for every autodiff op.
pub fn op_cases(seed: u64, rounds: usize) -> Result<Vec<OpCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..rounds {
        out.extend(op_round(&mut rng)?);
    }
    Ok(out)
}

/// A deliberately wrong gradient: `x * detach(x)` looks like `x²` but
/// backpropagates only `x`. The self-test must flag it.
pub fn corrupted_case(seed: u64) -> OpCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = away_from_zero(&mut rng, &[3, 3], 0.2, 2.0);
    OpCase::new("square (detached factor)", vec![x], |t| {
        t[0].mul(&t[0].detach())?.sum()
    })
}

/// Gradient-matching losses with respect to the candidate image on a
/// small victim, one case per cost variant. These differentiate through a
/// backward pass.
pub fn matching_cases(seed: u64) -> Result<Vec<OpCase>> {
    let cfg = VictimConfig::tiny();
    let net = VictimNet::random(cfg, seed)?;
    let ds = TemplateDataset {
        height: cfg.height,
        width: cfg.width,
        channels: cfg.in_channels,
        ..Default::default()
    };
    let truth = PrivateBatch::from_dataset(&ds, &[3])?;
    let capture = expose_gradients(&net, &truth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = random_array(&mut rng, truth.images().shape(), 0.05, 0.95);
    let variants = [
        ("cosine", CostFn::Cosine, false, false),
        ("l2", CostFn::L2, false, false),
        ("cosine per-layer", CostFn::Cosine, false, true),
        ("cosine without bias", CostFn::Cosine, true, false),
    ];
    let mut out = Vec::new();
    for (name, cost, exclude_bias, per_layer) in variants {
        let target = MatchTarget::new(&capture.names, &capture.grads, exclude_bias)?;
        let opts = MatchOptions {
            cost,
            exclude_bias,
            per_layer,
        };
        let net = net.clone();
        let labels = truth.labels().to_vec();
        out.push(OpCase::new(
            format!("matching loss: {name}"),
            vec![x0.clone()],
            move |t| grad_matching_loss(&net, &t[0], &labels, &target, opts),
        ));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub group: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, group: &'static str, name: impl Into<String>, passed: bool, detail: String) {
        self.checks.push(CheckOutcome {
            group,
            name: name.into(),
            passed,
            detail,
        });
    }
}

/// Runs gradient checks; an error inside a case counts as a failure.
pub fn run_cases(group: &'static str, cases: &[OpCase], tol: Tolerance) -> Vec<CheckOutcome> {
    cases
        .iter()
        .map(|c| {
            let (passed, detail) = match c.check(tol) {
                Ok(g) => (
                    g.passed(),
                    format!(
                        "worst ratio {:.3e} (analytic {:.6e}, numeric {:.6e}) over {} entries",
                        g.worst_ratio, g.worst_analytic, g.worst_numeric, g.entries
                    ),
                ),
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome {
                group,
                name: c.name.clone(),
                passed,
                detail,
            }
        })
        .collect()
}

fn unit(report: &mut SelftestReport, name: &str, value: f64, expect: f64, tol: f64) {
    let passed = (value - expect).abs() <= tol;
    report.push(
        "units",
        name,
        passed,
        format!("got {value:e}, expected {expect:e} within {tol:e}"),
    );
}

fn units(report: &mut SelftestReport) -> Result<()> {
    let _g = no_grad();
    let flat = Tensor::constant(Array::full(&[3, 6, 6], 0.37));
    unit(
        report,
        "r_tv of a constant image",
        r_tv(&flat)?.item(),
        0.0,
        0.0,
    );
    let means = ChannelMeans::new(vec![0.37; 3])?;
    unit(
        report,
        "r_mean at matching means",
        r_mean(&flat, &means)?.item(),
        0.0,
        1e-30,
    );
    let zeros = Array::zeros(&[1, 4, 4]);
    let tenth = Array::full(&[1, 4, 4], 0.1);
    unit(
        report,
        "psnr at mse 0.01",
        psnr(&zeros, &tenth)?,
        20.0,
        1e-9,
    );
    let img = square_image(16, 4, 4, 8, 0.8);
    unit(
        report,
        "ssim of an image with itself",
        ssim(&img, &img)?,
        1.0,
        1e-12,
    );

    let params = CannyParams::default();
    let big = square_image(32, 8, 8, 16, 1.0);
    let edges = canny_edges(&big, &params)?;
    let j = jaccard(&edges, &perimeter_ring(8, 8, 16));
    report.push(
        "canny",
        "square perimeter jaccard",
        j >= 0.5,
        format!(
            "jaccard {j:.3} over {} edge pixels, need >= 0.5",
            edges.len()
        ),
    );
    let doubled = canny_edges(&big.map(|v| v * 2.0), &params)?;
    report.push(
        "canny",
        "invariance to 2x contrast",
        doubled == edges,
        format!("{} vs {} edge pixels", doubled.len(), edges.len()),
    );
    Ok(())
}

fn closed_loop(report: &mut SelftestReport, seed: u64) -> Result<()> {
    let cfg = VictimConfig::tiny();
    let net = VictimNet::random(cfg, seed)?;
    let ds = TemplateDataset {
        height: cfg.height,
        width: cfg.width,
        channels: cfg.in_channels,
        ..Default::default()
    };
    let truth = PrivateBatch::from_dataset(&ds, &[5])?;
    let capture = expose_gradients(&net, &truth)?;
    let target = MatchTarget::new(&capture.names, &capture.grads, false)?;
    let x = Tensor::param(truth.images().clone());
    for (name, cost, tol) in [
        ("cosine loss at the ground truth", CostFn::Cosine, 1e-10),
        ("l2 loss at the ground truth", CostFn::L2, 1e-12),
    ] {
        let opts = MatchOptions {
            cost,
            ..Default::default()
        };
        let v = grad_matching_loss(&net, &x, truth.labels(), &target, opts)?.item();
        unit(report, name, v.abs(), 0.0, tol);
    }
    Ok(())
}

/// Every built-in oracle: randomized first- and second-order gradient checks
/// of each op, double-backward checks of the matching losses, regularizer
/// and metric units and the Canny geometry checks.
pub fn run_selftest(seed: u64) -> Result<SelftestReport> {
    let tol = Tolerance::default();
    let mut report = SelftestReport::default();
    let ops = op_cases(seed, 4)?;
    report.checks.extend(run_cases("gradient", &ops, tol));
    let second: Vec<OpCase> = ops
        .iter()
        .enumerate()
        .map(|(i, c)| c.second_order(seed ^ (i as u64 + 1)))
        .collect();
    report
        .checks
        .extend(run_cases("second order", &second, tol));
    report
        .checks
        .extend(run_cases("double backward", &matching_cases(seed)?, tol));
    units(&mut report)?;
    closed_loop(&mut report, seed)?;
    Ok(report)
}
