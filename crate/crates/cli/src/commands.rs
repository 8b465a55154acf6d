use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use gilab_core::experiment::{
    ablation_medians, ablation_variants, attack_scenario, prepare, run_ablation, AttackSetup,
    Outcome, Scenario,
};
use gilab_core::imaging::io::write_image;
use gilab_core::selftest::run_selftest;
use gilab_core::tea::Progress;
use gilab_core::trials::{accuracy, run_trials, write_trials_csv, BatchFilter, TrialSpec};

use crate::spec::ExperimentSpec;
use crate::OracleFailure;

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn join(labels: &[usize]) -> String {
    labels
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn write_timing(dir: &Path, started: Instant) -> anyhow::Result<()> {
    fs::write(
        dir.join("timing.txt"),
        format!("wall_clock_secs = {}\n", started.elapsed().as_secs_f64()),
    )?;
    Ok(())
}

pub fn begin_run(spec: &ExperimentSpec, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    fs::write(dir.join("config.toml"), spec.to_toml()?)?;
    Ok(())
}

pub fn cmd_labels(spec: &ExperimentSpec, dir: &Path) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut table = csv_writer(&dir.join("accuracy.csv"))?;
    table.write_record(["batch_size", "trials", "baseline", "idlg", "acb"])?;
    println!(
        "{:>6} {:>7} {:>9} {:>9} {:>9}",
        "batch", "trials", "baseline", "idlg", "acb"
    );
    for &k in &spec.batch_sizes {
        let trial_spec = TrialSpec {
            victim: spec.setup.victim,
            batch_size: k,
            threshold: spec.setup.threshold,
            // A single image cannot repeat a label.
            filter: if spec.duplicates_only && k > 1 {
                BatchFilter::WithDuplicate
            } else {
                BatchFilter::Any
            },
            max_draws: 10_000,
        };
        let trials = run_trials(&spec.setup.dataset, &trial_spec, spec.seed, spec.trials)
            .with_context(|| format!("label trials at batch size {k}"))?;
        write_trials_csv(
            fs::File::create(dir.join(format!("trials_k{k}.csv")))?,
            &trials,
        )?;
        let acc = accuracy(&trials);
        table.write_record([
            k.to_string(),
            acc.trials.to_string(),
            acc.baseline.to_string(),
            acc.idlg.to_string(),
            acc.acb.to_string(),
        ])?;
        println!(
            "{:>6} {:>7} {:>8.2}% {:>8.2}% {:>8.2}%",
            k,
            acc.trials,
            100.0 * acc.baseline,
            100.0 * acc.idlg,
            100.0 * acc.acb
        );
    }
    table.flush()?;
    write_timing(dir, started)
}

fn write_attack_outputs(dir: &Path, scenario: &Scenario, out: &Outcome) -> anyhow::Result<()> {
    let r = &out.report;
    let mut traj = csv_writer(&dir.join("trajectory.csv"))?;
    traj.write_record([
        "restart",
        "iteration",
        "lr",
        "matching",
        "tv",
        "mean",
        "edge",
        "total",
    ])?;
    for p in &r.trajectory {
        let t = &p.terms;
        traj.write_record([
            p.restart.to_string(),
            p.iteration.to_string(),
            p.lr.to_string(),
            t.matching.to_string(),
            t.tv.to_string(),
            t.mean.to_string(),
            t.edge.to_string(),
            t.total.to_string(),
        ])?;
    }
    traj.flush()?;

    let mut m = csv_writer(&dir.join("metrics.csv"))?;
    m.write_record([
        "batch_size",
        "seed",
        "best_restart",
        "best_iteration",
        "best_total",
        "best_matching",
        "final_matching",
        "mse",
        "psnr",
        "ssim",
        "gray_psnr",
        "labels_exact",
        "pairing",
    ])?;
    m.write_record([
        scenario.batch.len().to_string(),
        r.config.seed.to_string(),
        r.best_restart.to_string(),
        r.best_iteration.to_string(),
        r.best_loss.to_string(),
        r.best_terms.matching.to_string(),
        r.final_terms.matching.to_string(),
        out.eval.mse.to_string(),
        out.eval.psnr.to_string(),
        out.eval.ssim.to_string(),
        out.gray.psnr.to_string(),
        out.labels_exact.to_string(),
        join(&out.eval.pairing),
    ])?;
    m.flush()?;

    let mut l = csv_writer(&dir.join("labels.csv"))?;
    l.write_record(["truth", "l_k", "l_acb", "recovered", "attacked_with"])?;
    l.write_record([
        join(scenario.batch.labels()),
        join(&scenario.estimate.l_k),
        join(&scenario.estimate.l_acb),
        join(&scenario.estimate.combined),
        join(&scenario.labels),
    ])?;
    l.flush()?;

    for i in 0..scenario.batch.len() {
        write_image(
            &dir.join(format!("best_{i}.png")),
            &r.best_x.index_outer(i)?,
        )?;
        write_image(
            &dir.join(format!("truth_{i}.png")),
            &scenario.batch.images().index_outer(i)?,
        )?;
    }
    scenario.net.save(&dir.join("victim.txt"))?;
    Ok(())
}

pub fn cmd_attack(spec: &ExperimentSpec, dir: &Path, quiet: bool) -> anyhow::Result<()> {
    for &k in &spec.batch_sizes {
        let started = Instant::now();
        let sub = dir.join(format!("k{k}"));
        fs::create_dir_all(&sub)?;
        let setup = AttackSetup {
            batch_size: k,
            ..spec.setup.clone()
        };
        let scenario =
            prepare(&setup, spec.seed).with_context(|| format!("scenario for batch size {k}"))?;
        let mut report = |p: &Progress| {
            eprintln!(
                "k={k} restart {} iter {:>6}  matching {:.3e}  total {:.3e}  best {:.3e}",
                p.restart, p.iteration, p.terms.matching, p.terms.total, p.best_loss
            );
        };
        let progress: Option<&mut dyn FnMut(&Progress)> =
            if quiet { None } else { Some(&mut report) };
        let out = attack_scenario(&scenario, &spec.attack, progress).with_context(|| {
            format!("attack at batch size {k}, run directory {}", sub.display())
        })?;
        write_attack_outputs(&sub, &scenario, &out)?;
        write_timing(&sub, started)?;
        println!(
            "k={k}  labels {}  psnr {:.2} dB (gray {:.2})  ssim {:.4}  matching {:.3e}",
            join(&scenario.labels),
            out.eval.psnr,
            out.gray.psnr,
            out.eval.ssim,
            out.matching_loss()
        );
    }
    Ok(())
}

pub fn cmd_ablation(spec: &ExperimentSpec, dir: &Path) -> anyhow::Result<()> {
    let seeds: Vec<u64> = (0..spec.trials as u64).map(|i| spec.seed + i).collect();
    let variants = ablation_variants(&spec.attack);
    for &k in &spec.batch_sizes {
        let started = Instant::now();
        let sub = dir.join(format!("k{k}"));
        fs::create_dir_all(&sub)?;
        let setup = AttackSetup {
            batch_size: k,
            ..spec.setup.clone()
        };
        let rows = run_ablation(&setup, &variants, &seeds)
            .with_context(|| format!("ablation at batch size {k}"))?;
        let mut w = csv_writer(&sub.join("ablation.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut s = csv_writer(&sub.join("summary.csv"))?;
        s.write_record(["variant", "median_psnr", "median_ssim"])?;
        println!("k={k}");
        for (name, p, ss) in ablation_medians(&rows) {
            s.write_record([name.clone(), p.to_string(), ss.to_string()])?;
            println!("  {name:<12} psnr {p:>7.2} dB  ssim {ss:.4}");
        }
        s.flush()?;
        write_timing(&sub, started)?;
    }
    Ok(())
}

pub fn cmd_selftest(seed: u64) -> anyhow::Result<()> {
    let started = Instant::now();
    let report = run_selftest(seed)?;
    let mut out = std::io::stdout().lock();
    for c in &report.checks {
        writeln!(
            out,
            "{} {:<16} {}  {}",
            if c.passed { "ok  " } else { "FAIL" },
            c.group,
            c.name,
            c.detail
        )?;
    }
    let failed = report.failures().count();
    writeln!(
        out,
        "{} checks, {} failed, {:.1}s",
        report.checks.len(),
        failed,
        started.elapsed().as_secs_f64()
    )?;
    if failed > 0 {
        let names: Vec<String> = report.failures().map(|c| c.name.clone()).collect();
        return Err(OracleFailure(names.join(", ")).into());
    }
    Ok(())
}
