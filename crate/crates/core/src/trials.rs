//! Seeded label-recovery trials: one fresh random victim and one sampled
//! batch per trial, scored by every estimator.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fl::{expose_gradients, sample_batch, Dataset, PrivateBatch};
use crate::labels::{baseline_min_k, idlg_smallest_k, multiset, recover_labels};
use crate::victim::{VictimConfig, VictimNet};

/// Which batches a trial accepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchFilter {
    Any,
    /// Resample until at least one label repeats.
    WithDuplicate,
}

#[derive(Clone, Debug)]
pub struct TrialSpec {
    pub victim: VictimConfig,
    pub batch_size: usize,
    pub threshold: f64,
    pub filter: BatchFilter,
    /// Resampling budget for [`BatchFilter::WithDuplicate`].
    pub max_draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelTrial {
    pub seed: u64,
    pub k: usize,
    pub truth: Vec<usize>,
    pub baseline: Vec<usize>,
    pub idlg: Vec<usize>,
    pub acb: Vec<usize>,
}

impl LabelTrial {
    pub fn baseline_exact(&self) -> bool {
        self.baseline == self.truth
    }

    pub fn idlg_exact(&self) -> bool {
        self.idlg == self.truth
    }

    pub fn acb_exact(&self) -> bool {
        self.acb == self.truth
    }
}

fn draw_batch(
    dataset: &dyn Dataset,
    spec: &TrialSpec,
    rng: &mut ChaCha8Rng,
) -> Result<PrivateBatch> {
    for _ in 0..spec.max_draws.max(1) {
        let b = sample_batch(dataset, spec.batch_size, rng, false)?;
        if spec.filter == BatchFilter::Any || b.has_duplicate_labels() {
            return Ok(b);
        }
    }
    Err(Error::invalid(format!(
        "no duplicate-label batch of size {} in {} draws",
        spec.batch_size, spec.max_draws
    )))
}

/// Runs one trial. The seed fixes both the victim weights and the batch.
pub fn run_trial(dataset: &dyn Dataset, spec: &TrialSpec, seed: u64) -> Result<LabelTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = VictimNet::random(spec.victim, seed)?;
    let batch = draw_batch(dataset, spec, &mut rng)?;
    let capture = expose_gradients(&net, &batch)?;
    let k = batch.len();
    let fc = capture.fc_grad();
    let n = spec.victim.classes;
    let (est, _) = recover_labels(&capture, &net.acb_head(), spec.threshold)?;
    Ok(LabelTrial {
        seed,
        k,
        truth: multiset(batch.labels()),
        baseline: multiset(&baseline_min_k(fc, k.min(n))?),
        idlg: multiset(&idlg_smallest_k(fc, k.min(n))?),
        acb: est.combined,
    })
}

/// Trials for seeds `base_seed .. base_seed + count`, run in parallel and
/// returned in seed order.
pub fn run_trials(
    dataset: &dyn Dataset,
    spec: &TrialSpec,
    base_seed: u64,
    count: usize,
) -> Result<Vec<LabelTrial>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| run_trial(dataset, spec, base_seed + i))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Accuracy {
    pub batch_size: usize,
    pub trials: usize,
    pub baseline: f64,
    pub idlg: f64,
    pub acb: f64,
}

pub fn accuracy(trials: &[LabelTrial]) -> Accuracy {
    let n = trials.len().max(1) as f64;
    let rate = |f: fn(&LabelTrial) -> bool| trials.iter().filter(|t| f(t)).count() as f64 / n;
    Accuracy {
        batch_size: trials.first().map_or(0, |t| t.k),
        trials: trials.len(),
        baseline: rate(LabelTrial::baseline_exact),
        idlg: rate(LabelTrial::idlg_exact),
        acb: rate(LabelTrial::acb_exact),
    }
}

fn join(labels: &[usize]) -> String {
    labels
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// CSV with header
/// `seed,k,truth,baseline,idlg,acb,baseline_exact,idlg_exact,acb_exact`.
/// Multisets are space-separated ascending label lists.
pub fn write_trials_csv<W: Write>(out: W, trials: &[LabelTrial]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "seed",
        "k",
        "truth",
        "baseline",
        "idlg",
        "acb",
        "baseline_exact",
        "idlg_exact",
        "acb_exact",
    ])?;
    for t in trials {
        w.write_record([
            t.seed.to_string(),
            t.k.to_string(),
            join(&t.truth),
            join(&t.baseline),
            join(&t.idlg),
            join(&t.acb),
            t.baseline_exact().to_string(),
            t.idlg_exact().to_string(),
            t.acb_exact().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::TemplateDataset;

    fn spec(k: usize, filter: BatchFilter) -> TrialSpec {
        TrialSpec {
            victim: VictimConfig::default(),
            batch_size: k,
            threshold: 0.3,
            filter,
            max_draws: 10_000,
        }
    }

    #[test]
    fn trials_are_reproducible_and_ordered() {
        let ds = TemplateDataset::default();
        let s = spec(2, BatchFilter::Any);
        let a = run_trials(&ds, &s, 10, 4).unwrap();
        let b = run_trials(&ds, &s, 10, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.iter().map(|t| t.seed).collect::<Vec<_>>(),
            vec![10, 11, 12, 13]
        );
    }

    #[test]
    fn duplicate_filter_only_yields_duplicates() {
        let ds = TemplateDataset::default();
        for t in run_trials(&ds, &spec(2, BatchFilter::WithDuplicate), 0, 5).unwrap() {
            assert_eq!(t.truth[0], t.truth[1]);
        }
    }

    #[test]
    fn csv_layout() {
        let t = LabelTrial {
            seed: 3,
            k: 2,
            truth: vec![5, 5],
            baseline: vec![2, 5],
            idlg: vec![2, 5],
            acb: vec![5, 5],
        };
        let mut buf = Vec::new();
        write_trials_csv(&mut buf, &[t]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "seed,k,truth,baseline,idlg,acb,baseline_exact,idlg_exact,acb_exact\n\
             3,2,5 5,2 5,2 5,5 5,false,false,true\n"
        );
    }
}
