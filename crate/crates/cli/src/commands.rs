use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wilson::checkpoint::Checkpoint;
use wilson::config::RunConfig;
use wilson::image::Mask;
use wilson::manifest::{load_dataset, Manifest, ManifestEntry};
use wilson::metrics::MetricReport;
use wilson::synth::{synthesize, SynthConfig};
use wilson::taxonomy::{filter_step, IncrementalSchedule, SampleRecord};
use wilson::trainer::{evaluate, pseudo_supervision, train_base, train_step, TrainOutcome};
use wilson::Error;

use crate::sweep::{Sweep, SweepRun, ALPHAS, FILE_NAME};
use crate::{ConfigArgs, Failure};

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn synth(cfg: &SynthConfig, out: &Path) -> Result<(), Failure> {
    let samples = synthesize(cfg)?;
    create_dir(&out.join("images"))?;
    create_dir(&out.join("masks"))?;
    let mut manifest = Manifest::default();
    for (i, s) in samples.iter().enumerate() {
        let image = PathBuf::from(format!("images/{i:04}.png"));
        let mask = PathBuf::from(format!("masks/{i:04}.png"));
        s.image.save(&out.join(&image))?;
        s.mask.save(&out.join(&mask))?;
        manifest.entries.push(ManifestEntry {
            image,
            mask: Some(mask),
            labels: Some(s.classes.clone()),
        });
    }
    manifest.save(&out.join("manifest.tsv"))?;
    println!("{} images in {}", samples.len(), out.display());
    Ok(())
}

pub fn split(manifest_path: &Path, val: usize, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let manifest = Manifest::load(manifest_path)?;
    let n = manifest.entries.len();
    if val > n {
        return Err(Failure::Usage(format!("cannot hold out {val} of {n} records")));
    }
    let src = manifest_path.parent().unwrap_or(Path::new(""));
    let out = out.unwrap_or(src);
    let moved = out != src;
    let relocate = |p: &PathBuf| -> Result<PathBuf, Error> {
        if !moved || p.is_absolute() {
            return Ok(p.clone());
        }
        let joined = src.join(p);
        std::path::absolute(&joined).map_err(|e| Error::io(joined, e))
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val_idx, train_idx) = order.split_at(val);
    create_dir(out)?;
    for (name, idx) in [("train.tsv", train_idx), ("val.tsv", val_idx)] {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        let mut part = Manifest::default();
        for i in idx {
            let e = &manifest.entries[i];
            part.entries.push(ManifestEntry {
                image: relocate(&e.image)?,
                mask: e.mask.as_ref().map(relocate).transpose()?,
                labels: e.labels.clone(),
            });
        }
        part.save(&out.join(name))?;
    }
    println!("train {} / val {} in {}", n - val, val, out.display());
    Ok(())
}

/// Writes checkpoint, log, resolved config and, given a validation set,
/// the metric report of one trained step.
fn write_run(
    dir: &Path,
    cfg: &RunConfig,
    outcome: &TrainOutcome,
    val: Option<&[SampleRecord]>,
    schedule: &IncrementalSchedule,
) -> Result<Option<MetricReport>, Error> {
    create_dir(dir)?;
    let echo = cfg.to_toml();
    write(&dir.join("config.toml"), &echo)?;
    outcome.checkpoint(echo)?.save(&dir.join("checkpoint.bin"))?;
    outcome.log.save(&dir.join("train_log.csv"))?;
    let Some(val) = val else {
        return Ok(None);
    };
    let report = evaluate(&outcome.model, val, schedule, outcome.step)?;
    write(&dir.join("metrics.toml"), &report.to_toml())?;
    let table = report.to_table(schedule.names());
    write(&dir.join("metrics.txt"), &table)?;
    println!("{}\n{table}", dir.display());
    Ok(Some(report))
}

pub fn train(
    args: &ConfigArgs,
    root: Option<PathBuf>,
    step: usize,
    prev: Option<PathBuf>,
    alpha_sweep: bool,
) -> Result<(), Failure> {
    let mut cfg = RunConfig::resolve(args.config.as_deref(), &args.overrides)?;
    if let Some(root) = root {
        cfg.output = root;
    }
    let schedule = cfg.schedule.build()?;
    schedule.seen_classes(step)?;
    let train_path = cfg
        .data
        .train_manifest
        .clone()
        .ok_or_else(|| Failure::Usage("data.train_manifest is not set".into()))?;
    let dataset = load_dataset(&train_path)?;
    let view = filter_step(&dataset, &schedule, step, cfg.schedule.protocol)?;
    let val = cfg.data.val_manifest.as_deref().map(load_dataset).transpose()?;
    let dir = cfg.output.join(format!("step_{step}"));
    println!("step {step}: {} of {} training records", view.len(), dataset.len());

    if step == 0 {
        if alpha_sweep {
            return Err(Failure::Usage("the alpha sweep applies to incremental steps only".into()));
        }
        let outcome = train_base(&view, &schedule, &cfg.base)?;
        write_run(&dir, &cfg, &outcome, val.as_deref(), &schedule)?;
        return Ok(());
    }
    let prev_path = prev.unwrap_or_else(|| cfg.output.join(format!("step_{}", step - 1)).join("checkpoint.bin"));
    let prev = Checkpoint::load(&prev_path)?;
    if !alpha_sweep {
        let outcome = train_step(&view, &schedule, step, &cfg.train, &prev)?;
        write_run(&dir, &cfg, &outcome, val.as_deref(), &schedule)?;
        return Ok(());
    }
    let mut sweep = Sweep::default();
    for alpha in ALPHAS {
        let mut run_cfg = cfg.clone();
        run_cfg.train.alpha = alpha;
        let outcome = train_step(&view, &schedule, step, &run_cfg.train, &prev)?;
        let report = write_run(&dir.join(format!("alpha_{alpha}")), &run_cfg, &outcome, val.as_deref(), &schedule)?;
        sweep.run.push(SweepRun {
            protocol: cfg.schedule.protocol.to_string(),
            alpha,
            old: report.as_ref().and_then(|r| r.old),
            new: report.as_ref().and_then(|r| r.new),
            all: report.as_ref().and_then(|r| r.all),
        });
    }
    sweep.save(&dir.join(FILE_NAME))?;
    Ok(())
}

fn check_classes(ck: &Checkpoint, schedule: &IncrementalSchedule, t: usize) -> Result<(), Error> {
    let expected = schedule.seen_classes(t)?;
    if ck.header.classes != expected {
        return Err(Error::Schema(format!(
            "checkpoint covers classes {:?}, the schedule expects {:?} at step {t}",
            ck.header.classes, expected
        )));
    }
    Ok(())
}

pub fn eval(args: &ConfigArgs, checkpoint: &Path, manifest: &Path, report_path: Option<&Path>) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(args.config.as_deref(), &args.overrides)?;
    let schedule = cfg.schedule.build()?;
    let ck = Checkpoint::load(checkpoint)?;
    let t = ck.header.step;
    check_classes(&ck, &schedule, t)?;
    let records = load_dataset(manifest)?;
    let report = evaluate(&ck.model()?, &records, &schedule, t)?;
    print!("{}", report.to_table(schedule.names()));
    if let Some(path) = report_path {
        write(path, &report.to_toml())?;
    }
    Ok(())
}

pub fn pseudo_dump(
    args: &ConfigArgs,
    checkpoint: &Path,
    prev: &Path,
    manifest: &Path,
    out: &Path,
    limit: Option<usize>,
) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(args.config.as_deref(), &args.overrides)?;
    let schedule = cfg.schedule.build()?;
    let ck = Checkpoint::load(checkpoint)?;
    let t = ck.header.step;
    if t == 0 {
        return Err(Failure::Usage("pseudo-labels exist only for incremental steps".into()));
    }
    check_classes(&ck, &schedule, t)?;
    let prev = Checkpoint::load(prev)?;
    check_classes(&prev, &schedule, t - 1)?;
    let mut records = load_dataset(manifest)?;
    records.truncate(limit.unwrap_or(usize::MAX));
    let frozen = prev.model()?.snapshot()?;
    let grids = pseudo_supervision(&ck.model()?, &frozen, &records, &schedule, t, &cfg.train)?;

    create_dir(out)?;
    let classes = schedule.seen_classes(t)?;
    for (i, g) in grids.iter().enumerate() {
        let plane = g.height * g.width;
        let labels = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..g.channels {
                    if g.data[c * plane + p] > g.data[best * plane + p] {
                        best = c;
                    }
                }
                classes[best]
            })
            .collect();
        Mask::new(g.height, g.width, labels)?.save_indexed(&out.join(format!("{i:04}_qhat.png")))?;
        g.save(&out.join(format!("{i:04}_qhat.grid")))?;
    }
    let ids = classes.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
    // Grid channel k holds class id k of this list.
    write(&out.join("channels.txt"), &format!("{ids}\n"))?;
    println!("{} pseudo-label maps over classes {ids} in {}", grids.len(), out.display());
    Ok(())
}
