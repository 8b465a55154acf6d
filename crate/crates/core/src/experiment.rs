//! Seeded end-to-end scenarios shared by the command-line runner and the
//! acceptance suite: one victim, one sampled batch, label recovery, attack,
//! evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::Result;
use crate::fl::{
    channel_means, expose_gradients, sample_batch, GradientCapture, PrivateBatch, TemplateDataset,
};
use crate::imaging::ChannelMeans;
use crate::labels::{multiset, recover_labels, LabelEstimate};
use crate::tea::{
    evaluate, run_attack, AttackConfig, AttackInputs, AttackReport, CostFn, Evaluation, InitMode,
    Progress, GRAY_LEVEL,
};
use crate::victim::{VictimConfig, VictimNet};

/// Images rendered to estimate the reference channel means.
pub const MEANS_SAMPLE: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSetup {
    pub victim: VictimConfig,
    pub dataset: TemplateDataset,
    pub batch_size: usize,
    /// ACB gap threshold.
    pub threshold: f64,
    /// Attack with the private labels instead of the recovered ones.
    pub use_true_labels: bool,
}

impl Default for AttackSetup {
    fn default() -> Self {
        AttackSetup {
            victim: VictimConfig::default(),
            dataset: TemplateDataset::default(),
            batch_size: 1,
            threshold: 0.3,
            use_true_labels: false,
        }
    }
}

/// What the server sees plus the private batch kept for scoring.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub net: VictimNet,
    pub batch: PrivateBatch,
    pub capture: GradientCapture,
    pub means: ChannelMeans,
    pub estimate: LabelEstimate,
    /// Labels handed to the attack.
    pub labels: Vec<usize>,
}

/// The seed fixes the victim weights and the batch draw.
pub fn prepare(setup: &AttackSetup, seed: u64) -> Result<Scenario> {
    let net = VictimNet::random(setup.victim, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = sample_batch(&setup.dataset, setup.batch_size, &mut rng, false)?;
    let capture = expose_gradients(&net, &batch)?;
    let means = ChannelMeans::new(channel_means(&setup.dataset, Some(MEANS_SAMPLE))?)?;
    let (estimate, _) = recover_labels(&capture, &net.acb_head(), setup.threshold)?;
    let labels = if setup.use_true_labels {
        batch.labels().to_vec()
    } else {
        estimate.combined.clone()
    };
    Ok(Scenario {
        net,
        batch,
        capture,
        means,
        estimate,
        labels,
    })
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub report: AttackReport,
    /// Scores of the best iterate.
    pub eval: Evaluation,
    /// Scores of the flat gray image, for reference.
    pub gray: Evaluation,
    pub labels_exact: bool,
}

impl Outcome {
    /// Matching term at the best iterate.
    pub fn matching_loss(&self) -> f64 {
        self.report.best_terms.matching
    }

    pub fn psnr_gain(&self) -> f64 {
        self.eval.psnr - self.gray.psnr
    }
}

pub fn attack_scenario(
    scenario: &Scenario,
    config: &AttackConfig,
    progress: Option<&mut dyn FnMut(&Progress)>,
) -> Result<Outcome> {
    let inputs = AttackInputs {
        net: &scenario.net,
        capture: &scenario.capture,
        labels: &scenario.labels,
        means: &scenario.means,
    };
    let report = run_attack(&inputs, config, progress)?;
    let eval = evaluate(&report.best_x, &scenario.batch)?;
    let gray = evaluate(
        &Array::full(scenario.batch.images().shape(), GRAY_LEVEL),
        &scenario.batch,
    )?;
    Ok(Outcome {
        report,
        eval,
        gray,
        labels_exact: multiset(&scenario.labels) == multiset(scenario.batch.labels()),
    })
}

/// `prepare` then `attack_scenario` with `config.seed` as the scenario seed.
pub fn run_seeded(setup: &AttackSetup, config: &AttackConfig) -> Result<(Scenario, Outcome)> {
    let scenario = prepare(setup, config.seed)?;
    let outcome = attack_scenario(&scenario, config, None)?;
    Ok((scenario, outcome))
}

/// Named attack configurations compared by the ablation runs.
pub fn ablation_variants(base: &AttackConfig) -> Vec<(&'static str, AttackConfig)> {
    let none = AttackConfig {
        alpha_tv: 0.0,
        alpha_mean: 0.0,
        alpha_ca: 0.0,
        ..base.clone()
    };
    vec![
        ("no-reg", none.clone()),
        (
            "tv",
            AttackConfig {
                alpha_tv: base.alpha_tv,
                ..none.clone()
            },
        ),
        (
            "tv-mean",
            AttackConfig {
                alpha_tv: base.alpha_tv,
                alpha_mean: base.alpha_mean,
                ..none
            },
        ),
        ("full", base.clone()),
        (
            "l2",
            AttackConfig {
                cost: CostFn::L2,
                ..base.clone()
            },
        ),
        (
            "random-init",
            AttackConfig {
                init: InitMode::Random,
                ..base.clone()
            },
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub matching: f64,
    pub total: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub gray_psnr: f64,
}

/// Every variant on every seed. Scenarios are shared across variants so
/// the comparisons are paired. Rows come back ordered by variant, then seed.
pub fn run_ablation(
    setup: &AttackSetup,
    variants: &[(&'static str, AttackConfig)],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let scenarios: Vec<Scenario> = seeds
        .par_iter()
        .map(|&s| prepare(setup, s))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..seeds.len()).map(move |s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|&(v, s)| {
            let (name, cfg) = &variants[v];
            let cfg = AttackConfig {
                seed: seeds[s],
                ..cfg.clone()
            };
            let out = attack_scenario(&scenarios[s], &cfg, None)?;
            Ok(AblationRow {
                variant: (*name).to_string(),
                seed: seeds[s],
                matching: out.matching_loss(),
                total: out.report.best_loss,
                mse: out.eval.mse,
                psnr: out.eval.psnr,
                ssim: out.eval.ssim,
                gray_psnr: out.gray.psnr,
            })
        })
        .collect()
}

/// Median of a non-empty slice; the mean of the middle pair for even
/// lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-variant medians of PSNR and SSIM, in variant order.
pub fn ablation_medians(rows: &[AblationRow]) -> Vec<(String, f64, f64)> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let of = |f: fn(&AblationRow) -> f64| {
                median(
                    &rows
                        .iter()
                        .filter(|r| r.variant == n)
                        .map(f)
                        .collect::<Vec<_>>(),
                )
            };
            (n.to_string(), of(|r| r.psnr), of(|r| r.ssim))
        })
        .collect()
}
