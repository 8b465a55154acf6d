use std::path::Path;

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use gilab_core::experiment::AttackSetup;
use gilab_core::imaging::FinMode;
use gilab_core::tea::{AttackConfig, CostFn, InitMode};
use serde::{Deserialize, Serialize};

use crate::Usage;

pub const OUT_ROOT_ENV: &str = "GILAB_OUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Labels,
    Attack,
    Ablation,
    Selftest,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Labels => "labels",
            Mode::Attack => "attack",
            Mode::Ablation => "ablation",
            Mode::Selftest => "selftest",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CostArg {
    Cosine,
    L2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InitArg {
    Gray,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FinArg {
    MaxMin,
    MaxMean,
}

/// Experiment flags. Each one overrides the replayed config, or the
/// defaults when there is none.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Option<Vec<usize>>,
    /// Label trials per batch size, or seeds per ablation variant.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha_tv: Option<f64>,
    #[arg(long)]
    pub alpha_mean: Option<f64>,
    #[arg(long)]
    pub alpha_ca: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, value_enum)]
    pub cost: Option<CostArg>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// ACB gap threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub use_true_labels: bool,
    #[arg(long)]
    pub lr_decay: bool,
    #[arg(long, value_enum)]
    pub fin_mode: Option<FinArg>,
    /// Only sample batches with a repeated label (labels mode).
    #[arg(long)]
    pub duplicates_only: bool,
    /// Trajectory sampling period in iterations.
    #[arg(long)]
    pub log_every: Option<usize>,
}

/// Everything a run needs. Written to `config.toml` in the run directory
/// and accepted back by `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub mode: Mode,
    pub seed: u64,
    pub batch_sizes: Vec<usize>,
    pub trials: usize,
    pub duplicates_only: bool,
    pub setup: AttackSetup,
    pub attack: AttackConfig,
}

impl ExperimentSpec {
    fn defaults(mode: Mode) -> Self {
        ExperimentSpec {
            mode,
            seed: 0,
            batch_sizes: match mode {
                Mode::Labels => vec![1, 2, 4],
                _ => vec![1],
            },
            trials: match mode {
                Mode::Labels => 200,
                _ => 10,
            },
            duplicates_only: false,
            setup: AttackSetup::default(),
            attack: AttackConfig::default(),
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn build(base: Option<ExperimentSpec>, o: &Overrides) -> anyhow::Result<Self> {
        let mut s = match (base, o.mode) {
            (Some(mut b), Some(m)) => {
                b.mode = m;
                b
            }
            (Some(b), None) => b,
            (None, Some(m)) => Self::defaults(m),
            (None, None) => bail!(Usage("either --mode or --config is required".into())),
        };
        if let Some(v) = &o.batch_sizes {
            s.batch_sizes = v.clone();
        }
        if let Some(v) = o.trials {
            s.trials = v;
        }
        if let Some(v) = o.seed {
            s.seed = v;
        }
        let a = &mut s.attack;
        if let Some(v) = o.alpha_tv {
            a.alpha_tv = v;
        }
        if let Some(v) = o.alpha_mean {
            a.alpha_mean = v;
        }
        if let Some(v) = o.alpha_ca {
            a.alpha_ca = v;
        }
        if let Some(v) = o.lr {
            a.lr = v;
        }
        if let Some(v) = o.iters {
            a.max_iters = v;
        }
        if let Some(v) = o.log_every {
            a.log_every = v;
        }
        if let Some(v) = o.cost {
            a.cost = match v {
                CostArg::Cosine => CostFn::Cosine,
                CostArg::L2 => CostFn::L2,
            };
        }
        if let Some(v) = o.init {
            a.init = match v {
                InitArg::Gray => InitMode::Gray,
                InitArg::Random => InitMode::Random,
            };
        }
        if let Some(v) = o.fin_mode {
            a.fin_mode = match v {
                FinArg::MaxMin => FinMode::MaxMin,
                FinArg::MaxMean => FinMode::MaxMean,
            };
        }
        a.lr_decay |= o.lr_decay;
        a.seed = s.seed;
        if let Some(v) = o.threshold {
            s.setup.threshold = v;
        }
        s.setup.use_true_labels |= o.use_true_labels;
        s.duplicates_only |= o.duplicates_only;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let usage = |m: String| -> anyhow::Result<()> { Err(Usage(m).into()) };
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return usage("batch sizes must be a non-empty list of positive integers".into());
        }
        if self.trials == 0 {
            return usage("--trials must be at least 1".into());
        }
        if !(self.setup.threshold.is_finite() && self.setup.threshold >= 0.0) {
            return usage(format!(
                "--threshold must be finite and >= 0, got {}",
                self.setup.threshold
            ));
        }
        if let Err(e) = self.attack.validate() {
            return usage(e.to_string());
        }
        if let Err(e) = self.setup.victim.validate() {
            return usage(e.to_string());
        }
        let ds = &self.setup.dataset;
        let v = &self.setup.victim;
        if [ds.channels, ds.height, ds.width] != v.image_shape() || ds.classes != v.classes {
            return usage(format!(
                "dataset images {:?} with {} classes do not fit victim input {:?} with {} classes",
                [ds.channels, ds.height, ds.width],
                ds.classes,
                v.image_shape(),
                v.classes
            ));
        }
        Ok(())
    }

    pub fn default_dir_name(&self) -> String {
        format!("{}-seed{}", self.mode.name(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_is_lossless() {
        let o = Overrides {
            mode: Some(Mode::Attack),
            lr: Some(0.0123456789),
            alpha_ca: Some(3e-7),
            seed: Some(42),
            ..Default::default()
        };
        let s = ExperimentSpec::build(None, &o).unwrap();
        let back: ExperimentSpec = toml::from_str(&s.to_toml().unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.attack.seed, 42);
    }

    #[test]
    fn flags_override_a_replayed_config() {
        let base = ExperimentSpec::defaults(Mode::Attack);
        let o = Overrides {
            iters: Some(7),
            ..Default::default()
        };
        let s = ExperimentSpec::build(Some(base), &o).unwrap();
        assert_eq!(s.attack.max_iters, 7);
        assert_eq!(s.mode, Mode::Attack);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        for o in [
            Overrides::default(),
            Overrides {
                mode: Some(Mode::Labels),
                batch_sizes: Some(vec![0]),
                ..Default::default()
            },
            Overrides {
                mode: Some(Mode::Attack),
                lr: Some(-1.0),
                ..Default::default()
            },
        ] {
            let e = ExperimentSpec::build(None, &o).unwrap_err();
            assert!(e.downcast_ref::<Usage>().is_some(), "{e}");
        }
    }
}
