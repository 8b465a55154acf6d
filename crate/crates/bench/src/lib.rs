//! Shared fixtures for the benchmarks: a default-size victim, one captured
//! batch and the attack objective built from it.

use gilab_core::experiment::{prepare, AttackSetup, Scenario};
use gilab_core::fl::TemplateDataset;
use gilab_core::imaging::{gt_baseline_point, CannyParams};
use gilab_core::labels::column_sums;
use gilab_core::tea::{AttackConfig, MatchOptions, MatchTarget, Objective};
use gilab_core::victim::VictimConfig;
use gilab_core::Array;

pub struct Fixture {
    pub scenario: Scenario,
    pub target: MatchTarget,
    pub config: AttackConfig,
}

impl Fixture {
    pub fn new(victim: VictimConfig, batch_size: usize) -> Self {
        let [c, h, w] = victim.image_shape();
        let setup = AttackSetup {
            victim,
            dataset: TemplateDataset {
                channels: c,
                height: h,
                width: w,
                classes: victim.classes,
                ..Default::default()
            },
            batch_size,
            ..Default::default()
        };
        let scenario = prepare(&setup, 1).expect("fixture scenario");
        let cap = &scenario.capture;
        let target = MatchTarget::new(&cap.names, &cap.grads, false).expect("fixture target");
        Fixture {
            scenario,
            target,
            config: AttackConfig::default(),
        }
    }

    pub fn objective(&self) -> Objective<'_> {
        let [_, h, w] = self.scenario.net.config().image_shape();
        let g1 = column_sums(self.scenario.capture.fc_grad()).expect("fc gradient");
        Objective {
            net: &self.scenario.net,
            labels: &self.scenario.labels,
            target: &self.target,
            options: MatchOptions::default(),
            weights: self.config.weights(),
            means: &self.scenario.means,
            baseline: gt_baseline_point(&g1, h, w, self.config.fin_mode).expect("baseline"),
            edge_prior: self.config.edge_prior,
            canny: CannyParams::default(),
        }
    }

    pub fn gray(&self) -> Array {
        Array::full(self.scenario.batch.images().shape(), 0.5)
    }
}
