//! The small convolutional classifier under attack, and the ACB head that
//! reuses its last stage.
//!
//! Layout: `(x - mean) / std → conv1 → act → avgpool2 → [conv2 → act →
//! avgpool2] → global avgpool → fc`, where `act` is relu, softplus or
//! sigmoid. The bracketed stage is the "final block". The fc weight is
//! stored features × classes (`M × N`), so logits are `features · W + b`.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tensor};
use crate::error::{Error, Result};

const KERNEL: usize = 3;
const POOL: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    #[default]
    Softplus,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Activation::Relu, Activation::Softplus, Activation::Sigmoid]
            .into_iter()
            .find(|a| a.name() == s)
    }

    fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Softplus => x.softplus(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VictimConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv1_channels: usize,
    /// Also the embedded feature count `M` seen by the fc layer.
    pub conv2_channels: usize,
    pub classes: usize,
    pub activation: Activation,
    /// Input standardization applied before conv1.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for VictimConfig {
    fn default() -> Self {
        VictimConfig {
            in_channels: 1,
            height: 16,
            width: 16,
            conv1_channels: 8,
            conv2_channels: 16,
            classes: 10,
            activation: Activation::default(),
            input_mean: 0.5,
            input_std: 0.125,
        }
    }
}

impl VictimConfig {
    /// A victim under 1e3 parameters, used by the finite-difference oracles.
    pub fn tiny() -> Self {
        VictimConfig {
            in_channels: 1,
            height: 8,
            width: 8,
            conv1_channels: 4,
            conv2_channels: 8,
            classes: 10,
            ..Default::default()
        }
    }

    pub fn features(&self) -> usize {
        self.conv2_channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }

    /// `[C, H, W]` expected by the final block.
    pub fn block_input_shape(&self) -> [usize; 3] {
        [self.conv1_channels, self.height / POOL, self.width / POOL]
    }

    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            (
                "conv1.weight",
                vec![self.conv1_channels, self.in_channels, KERNEL, KERNEL],
            ),
            ("conv1.bias", vec![self.conv1_channels]),
            (
                "conv2.weight",
                vec![self.conv2_channels, self.conv1_channels, KERNEL, KERNEL],
            ),
            ("conv2.bias", vec![self.conv2_channels]),
            ("fc.weight", vec![self.conv2_channels, self.classes]),
            ("fc.bias", vec![self.classes]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.conv1_channels,
            self.conv2_channels,
            self.classes,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("victim dimensions must be positive"));
        }
        if !self.height.is_multiple_of(POOL * POOL)
            || !self.width.is_multiple_of(POOL * POOL)
            || self.height == 0
            || self.width == 0
        {
            return Err(Error::invalid(format!(
                "image {}x{} must be a positive multiple of {}",
                self.height,
                self.width,
                POOL * POOL
            )));
        }
        if !self.input_mean.is_finite() || !(self.input_std > 0.0 && self.input_std.is_finite()) {
            return Err(Error::invalid(
                "input standardization needs a finite mean and positive std",
            ));
        }
        Ok(())
    }
}

/// Named parameter values in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    entries: Vec<(String, Array)>,
}

impl Params {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }
}

/// Parameter tensors for one forward pass, in [`VictimConfig::param_shapes`]
/// order.
#[derive(Clone, Debug)]
pub struct Weights {
    pub tensors: Vec<Tensor>,
}

impl Weights {
    fn conv1(&self) -> (&Tensor, &Tensor) {
        (&self.tensors[0], &self.tensors[1])
    }
    fn conv2(&self) -> (&Tensor, &Tensor) {
        (&self.tensors[2], &self.tensors[3])
    }
    fn fc(&self) -> (&Tensor, &Tensor) {
        (&self.tensors[4], &self.tensors[5])
    }
}

fn snapshot(params: &Params, requires_grad: bool) -> Weights {
    let tensors = params
        .entries
        .iter()
        .map(|(_, a)| {
            if requires_grad {
                Tensor::param(a.clone())
            } else {
                Tensor::constant(a.clone())
            }
        })
        .collect();
    Weights { tensors }
}

fn conv_stage(act: Activation, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    act.apply(&x.conv2d(weight, 1, KERNEL / 2)?.add_channel_bias(bias)?)?
        .avg_pool2d(POOL)
}

fn final_block(act: Activation, w: &Weights, x: &Tensor) -> Result<Tensor> {
    let (k, b) = w.conv2();
    conv_stage(act, x, k, b)
}

fn classifier(w: &Weights, block_out: &Tensor) -> Result<Tensor> {
    let (k, b) = w.fc();
    let features = block_out.global_avg_pool()?;
    let logits = features.matmul(k)?;
    let n = logits.shape()[0];
    logits.add(&b.reshape(&[1, b.numel()])?.expand_to(&[n, b.numel()])?)
}

fn check_input(op: &'static str, x: &Tensor, expect: [usize; 3]) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != expect {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, expect[0], expect[1], expect[2]],
        });
    }
    Ok(())
}

/// The victim classifier. Parameters live behind a shared lock so that the
/// [`AcbHead`] observes any later update.
#[derive(Clone, Debug)]
pub struct VictimNet {
    config: VictimConfig,
    params: Arc<RwLock<Params>>,
}

impl VictimNet {
    pub fn from_params(config: VictimConfig, params: Vec<(String, Array)>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, arr), (want_name, want_shape)) in params.iter().zip(&shapes) {
            if name != want_name || arr.shape() != want_shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {name} {:?} does not match {want_name} {want_shape:?}",
                    arr.shape()
                )));
            }
        }
        Ok(VictimNet {
            config,
            params: Arc::new(RwLock::new(Params { entries: params })),
        })
    }

    pub fn zeros(config: VictimConfig) -> Result<Self> {
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(n, s)| (n.to_string(), Array::zeros(&s)))
            .collect();
        Self::from_params(config, params)
    }

    /// Kaiming-normal weights (std `sqrt(2 / fan_in)`), biases uniform in
    /// `±1/sqrt(fan_in)`.
    pub fn random(config: VictimConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut fan_in = 1;
        for (name, shape) in config.param_shapes() {
            let arr = if name.ends_with("weight") {
                fan_in = if shape.len() == 4 {
                    shape[1] * shape[2] * shape[3]
                } else {
                    shape[0]
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .map_err(|e| Error::invalid(e.to_string()))?;
                Array::from_fn(&shape, |_| normal.sample(&mut rng))
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Array::from_fn(&shape, |_| rng.random_range(-bound..bound))
            };
            params.push((name.to_string(), arr));
        }
        Self::from_params(config, params)
    }

    pub fn config(&self) -> &VictimConfig {
        &self.config
    }

    pub fn param_names(&self) -> Vec<String> {
        self.read().entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn params(&self) -> Params {
        self.read().clone()
    }

    pub fn param(&self, name: &str) -> Option<Array> {
        self.read().get(name).cloned()
    }

    /// Replaces one parameter in place; the ACB head sees the change.
    pub fn set_param(&self, name: &str, value: Array) -> Result<()> {
        let mut guard = self.params.write().expect("victim parameter lock poisoned");
        let slot = guard
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: slot.1.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.1 = value;
        Ok(())
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Params> {
        self.params.read().expect("victim parameter lock poisoned")
    }

    pub fn weights(&self, requires_grad: bool) -> Weights {
        snapshot(&self.read(), requires_grad)
    }

    /// Logits `[B, N]` for images `[B, C, H, W]` with frozen weights.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        self.forward_with(&self.weights(false), images)
    }

    pub fn forward_with(&self, w: &Weights, images: &Tensor) -> Result<Tensor> {
        check_input("victim forward", images, self.config.image_shape())?;
        let (k, b) = w.conv1();
        let c = &self.config;
        let h = if c.input_mean == 0.0 && c.input_std == 1.0 {
            conv_stage(c.activation, images, k, b)?
        } else {
            let x = images.add_scalar(-c.input_mean)?.scale(1.0 / c.input_std)?;
            conv_stage(c.activation, &x, k, b)?
        };
        classifier(w, &final_block(self.config.activation, w, &h)?)
    }

    /// A view of the final block, pooling and fc layer sharing this net's
    /// parameters.
    pub fn acb_head(&self) -> AcbHead {
        AcbHead {
            config: self.config,
            params: Arc::clone(&self.params),
        }
    }

    /// Plain-SGD warmup on labelled samples, for experiments that want a
    /// victim that is not at random initialization.
    pub fn train_briefly(
        &self,
        samples: &[(Array, usize)],
        steps: usize,
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> Result<()> {
        if samples.is_empty() || batch == 0 {
            return Err(Error::invalid("training needs samples and a batch size"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..steps {
            let picks: Vec<usize> = (0..batch)
                .map(|_| rng.random_range(0..samples.len()))
                .collect();
            let images = Array::stack(
                &picks
                    .iter()
                    .map(|&i| samples[i].0.clone())
                    .collect::<Vec<_>>(),
            )?;
            let labels: Vec<usize> = picks.iter().map(|&i| samples[i].1).collect();
            let w = self.weights(true);
            let loss = self
                .forward_with(&w, &Tensor::constant(images))?
                .cross_entropy(&labels)?;
            let grads = crate::autodiff::grad(&loss, &w.tensors, false)?;
            let mut guard = self.params.write().expect("victim parameter lock poisoned");
            for ((_, p), g) in guard.entries.iter_mut().zip(&grads) {
                for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *v -= lr * d;
                }
            }
        }
        Ok(())
    }

    /// Writes the text weight format described in the README.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("gilab-victim v1\n");
        let c = &self.config;
        writeln!(
            out,
            "config {} {} {} {} {} {} {} {:?} {:?}",
            c.in_channels,
            c.height,
            c.width,
            c.conv1_channels,
            c.conv2_channels,
            c.classes,
            c.activation.name(),
            c.input_mean,
            c.input_std
        )
        .expect("write to String");
        for (name, arr) in self.read().iter() {
            let dims: Vec<String> = arr.shape().iter().map(ToString::to_string).collect();
            writeln!(out, "param {name} {} {}", arr.shape().len(), dims.join(" "))
                .expect("write to String");
            for v in arr.data() {
                writeln!(out, "{v:?}").expect("write to String");
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let bad = |what: &str| Error::Parse(format!("victim weights: {what}"));
        if lines.next() != Some("gilab-victim v1") {
            return Err(bad("missing header"));
        }
        let nums = |line: Option<&str>, tag: &str| -> Result<Vec<String>> {
            let line = line.ok_or_else(|| bad("truncated file"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(tag) {
                return Err(bad(&format!("expected `{tag}` line, got `{line}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(&format!("bad integer `{s}`")))
        };
        let cfg_words = nums(lines.next(), "config")?;
        if cfg_words.len() != 9 {
            return Err(bad(
                "config line needs six integers, an activation, a mean and a std",
            ));
        }
        let activation = Activation::parse(&cfg_words[6])
            .ok_or_else(|| bad(&format!("unknown activation `{}`", cfg_words[6])))?;
        let parse_f64 = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(&format!("bad number `{s}`")))
        };
        let input_mean = parse_f64(&cfg_words[7])?;
        let input_std = parse_f64(&cfg_words[8])?;
        let cfg: Vec<usize> = cfg_words[..6]
            .iter()
            .map(|s| parse_usize(s))
            .collect::<Result<_>>()?;
        let [in_channels, height, width, conv1_channels, conv2_channels, classes] = cfg[..] else {
            unreachable!("length checked above");
        };
        let config = VictimConfig {
            in_channels,
            height,
            width,
            conv1_channels,
            conv2_channels,
            classes,
            activation,
            input_mean,
            input_std,
        };
        let mut params = Vec::new();
        for _ in 0..config.param_shapes().len() {
            let head = nums(lines.next(), "param")?;
            let (name, rest) = head.split_first().ok_or_else(|| bad("param line"))?;
            let (rank, dims) = rest.split_first().ok_or_else(|| bad("param rank"))?;
            let shape: Vec<usize> = dims.iter().map(|s| parse_usize(s)).collect::<Result<_>>()?;
            if parse_usize(rank)? != shape.len() {
                return Err(bad("rank does not match dimensions"));
            }
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let l = lines.next().ok_or_else(|| bad("truncated values"))?;
                    l.trim()
                        .parse::<f64>()
                        .map_err(|_| bad(&format!("bad value `{l}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            params.push((name.clone(), Array::new(shape, data)?));
        }
        Self::from_params(config, params)
    }
}

/// Final block, global average pooling and fc layer of a [`VictimNet`],
/// sharing its parameters by reference.
#[derive(Clone, Debug)]
pub struct AcbHead {
    config: VictimConfig,
    params: Arc<RwLock<Params>>,
}

impl AcbHead {
    pub fn config(&self) -> &VictimConfig {
        &self.config
    }

    /// Runs the head on an input shaped like the final block's input,
    /// `[B, conv1_channels, H/2, W/2]`, returning `[B, N]` scores.
    pub fn forward(&self, block_input: &Tensor) -> Result<Tensor> {
        check_input("acb forward", block_input, self.config.block_input_shape())?;
        let w = snapshot(
            &self.params.read().expect("victim parameter lock poisoned"),
            false,
        );
        classifier(&w, &final_block(self.config.activation, &w, block_input)?)
    }

    /// Score vector over classes for a length-`N` class signal: the signal is
    /// laid out by [`tile_to_block_input`], pushed through the head, and the
    /// output rows are summed per class.
    pub fn scores(&self, signal: &[f64]) -> Result<Vec<f64>> {
        let input = tile_to_block_input(signal, self.config.block_input_shape())?;
        let out = self.forward(&Tensor::constant(input))?;
        let n = self.config.classes;
        let mut sums = vec![0.0; n];
        for row in out.data().chunks(n) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        Ok(sums)
    }
}

/// Lays a class-indexed vector out as a final-block input `[1, C, H, W]`:
/// spatial position `p` (row-major) holds `signal[p % N]`, broadcast across
/// every channel.
pub fn tile_to_block_input(signal: &[f64], block_shape: [usize; 3]) -> Result<Array> {
    if signal.is_empty() {
        return Err(Error::invalid("cannot tile an empty signal"));
    }
    let [c, h, w] = block_shape;
    let plane = h * w;
    Array::new(
        vec![1, c, h, w],
        (0..c * plane)
            .map(|i| signal[(i % plane) % signal.len()])
            .collect(),
    )
}
