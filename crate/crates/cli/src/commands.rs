//! `generate`, `sample`, `train`, `infer` and `eval`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use swipe_core::data::{generate_corpus, rasterize, sample_corpus_points, Corpus, Item, Split};
use swipe_core::inference::{
    agreement, dice_metric, predict, save_prediction, Decoded, PredictionSidecar, ReconstructionSpec, Refinement,
};
use swipe_core::model::{Checkpoint, SwipeModel};
use swipe_core::raster::{GrayImage, LabelMask};
use swipe_core::trainer::{write_metrics_csv, TrainConfig, TrainData, TrainOutcome};

use crate::config::{ReconstructionConfig, RunConfig};
use crate::{CliError, CliResult, ConfigArgs, EvalArgs, GenerateArgs, InferArgs, ReconstructionArgs, SampleArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LAST_CHECKPOINT_FILE: &str = "last.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const VAL_FILE: &str = "val.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn resolve(args: &ConfigArgs) -> CliResult<RunConfig> {
    RunConfig::resolve(args.config.as_deref(), args.preset)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::user(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::internal(e.to_string()))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn is_non_empty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn generate(a: &GenerateArgs) -> CliResult<()> {
    let mut cfg = resolve(&a.cfg)?;
    if let Some(out) = &a.out {
        cfg.corpus_dir = out.clone();
    }
    let spec = &mut cfg.generate;
    spec.n_images = a.n.unwrap_or(spec.n_images);
    spec.size = a.size.unwrap_or(spec.size);
    spec.classes = a.classes.unwrap_or(spec.classes);
    spec.seed = a.seed.unwrap_or(spec.seed);
    spec.noise = a.noise.unwrap_or(spec.noise);
    spec.validate()?;
    let out = cfg.corpus_dir.clone();
    if out.is_file() {
        return Err(CliError::user(format!("{} is a file", out.display())));
    }
    if is_non_empty_dir(&out) && !a.force {
        return Err(CliError::user(format!(
            "{} is not empty; pass --force to write into it",
            out.display()
        )));
    }
    let manifest = generate_corpus(&cfg.generate, &out)?;
    echo(&cfg, &out.join("generate.toml"))?;
    let count = |s| manifest.split(s).len();
    println!(
        "wrote {} images of {}x{} to {} (train {}, val {}, test {})",
        manifest.entries.len(),
        manifest.height,
        manifest.width,
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

pub fn sample(a: &SampleArgs) -> CliResult<()> {
    let mut cfg = resolve(&a.cfg)?;
    if let Some(c) = &a.corpus {
        cfg.corpus_dir = c.clone();
    }
    let s = &mut cfg.sampling;
    s.seed = a.seed.unwrap_or(s.seed);
    s.n_background = a.n_background.unwrap_or(s.n_background);
    s.n_foreground_per_class = a.n_foreground.unwrap_or(s.n_foreground_per_class);
    s.boundary_fraction = a.boundary_fraction.unwrap_or(s.boundary_fraction);
    s.boundary_band = a.boundary_band.unwrap_or(s.boundary_band);
    s.jitter = a.jitter.unwrap_or(s.jitter);
    s.validate()?;
    let manifest = sample_corpus_points(&cfg.corpus_dir, &cfg.sampling)?;
    echo(&cfg, &cfg.corpus_dir.join("sample.toml"))?;
    println!("sampled points for {} images in {}", manifest.entries.len(), cfg.corpus_dir.display());
    Ok(())
}

/// Writes the resolved configuration to `path` and reports where.
pub fn echo(cfg: &RunConfig, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, cfg.to_toml()).map_err(|e| io_err(path, e))?;
    log::info!("resolved configuration written to {}", path.display());
    Ok(())
}

/// Applies training flags to a resolved configuration.
pub fn apply_train_flags(cfg: &mut RunConfig, a: &TrainArgs) -> CliResult<()> {
    if let Some(c) = &a.corpus {
        cfg.corpus_dir = c.clone();
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    let t = &mut cfg.train;
    t.iterations = a.iterations.unwrap_or(t.iterations);
    t.seed = a.seed.unwrap_or(t.seed);
    t.batch_images = a.batch_images.unwrap_or(t.batch_images);
    t.points_per_image = a.points_per_image.unwrap_or(t.points_per_image);
    t.optimizer.lr = a.lr.unwrap_or(t.optimizer.lr);
    t.annotation_fraction = a.annotation_fraction.unwrap_or(t.annotation_fraction);
    t.val_every = a.val_every.unwrap_or(t.val_every);
    t.deterministic |= a.deterministic;
    t.dry_run |= a.dry_run;
    for s in &a.ablate {
        t.ablation.set(s)?;
    }
    Ok(())
}

/// What a finished training run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub param_count: usize,
    pub ablation: String,
    pub annotation_fraction: f64,
    pub train_images: Vec<usize>,
    pub skipped_images: Vec<usize>,
    pub steps: usize,
    pub best_step: usize,
    pub best_val_dice: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Model of a run: the configured architecture with the ablation applied.
pub fn build_model(cfg: &RunConfig) -> CliResult<SwipeModel> {
    let mut model_cfg = cfg.model.clone();
    cfg.train.ablation.apply(&mut model_cfg);
    Ok(SwipeModel::new(model_cfg)?)
}

fn checkpoint(model: &SwipeModel, params: Vec<f32>, train: &TrainConfig, steps: usize, val: Option<f64>) -> CliResult<Checkpoint> {
    let mut ck = Checkpoint::new(model, params, train.seed, steps, train.loss);
    ck.meta.train = serde_json::to_value(train).map_err(|e| CliError::internal(e.to_string()))?;
    ck.meta.val_dice = val;
    Ok(ck)
}

/// Trains on a loaded corpus and writes checkpoints, logs and the summary
/// into `dir`.
pub fn run_training(cfg: &RunConfig, corpus: &Corpus, dir: &Path) -> CliResult<(TrainSummary, TrainOutcome, SwipeModel)> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let data = TrainData::from_corpus(corpus, &cfg.train)?;
    let train_images: Vec<usize> = data.train.iter().map(|t| t.id).collect();
    log::info!(
        "training on {} of {} train images (annotation fraction {}), {} parameters, {}",
        train_images.len(),
        corpus.manifest.split(Split::Train).len(),
        cfg.train.annotation_fraction,
        model.param_count(),
        cfg.train.ablation.label()
    );
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    echo(cfg, &dir.join(crate::config::RESOLVED_FILE))?;
    let outcome = swipe_core::trainer::train(&model, &data, &cfg.train)?;
    write_metrics_csv(&dir.join(METRICS_FILE), &outcome.log)?;
    write_val_csv(&dir.join(VAL_FILE), &outcome.val_log)?;
    checkpoint(&model, outcome.best_params.clone(), &cfg.train, outcome.best_step, outcome.best_val_dice)?
        .save(&dir.join(CHECKPOINT_FILE))?;
    let last_val = outcome.val_log.last().filter(|(s, _)| *s == outcome.steps).map(|(_, d)| *d);
    checkpoint(&model, outcome.final_params.clone(), &cfg.train, outcome.steps, last_val)?
        .save(&dir.join(LAST_CHECKPOINT_FILE))?;
    let summary = TrainSummary {
        param_count: model.param_count(),
        ablation: cfg.train.ablation.label(),
        annotation_fraction: cfg.train.annotation_fraction,
        train_images,
        skipped_images: data.skipped.clone(),
        steps: outcome.steps,
        best_step: outcome.best_step,
        best_val_dice: outcome.best_val_dice,
        final_loss: outcome.log.last().map(|r| r.total),
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok((summary, outcome, model))
}

fn write_val_csv(path: &Path, rows: &[(usize, f64)]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["iteration", "val_dice"]).map_err(|e| io_err(path, e))?;
    for (step, dice) in rows {
        w.write_record([step.to_string(), dice.to_string()]).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_corpus(dir: &Path) -> CliResult<Corpus> {
    let corpus = Corpus::load(dir)?;
    corpus.manifest.validate()?;
    Ok(corpus)
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = resolve(&a.cfg)?;
    apply_train_flags(&mut cfg, a)?;
    cfg.validate()?;
    let corpus = load_corpus(&cfg.corpus_dir)?;
    if corpus.items.iter().all(|i| i.points.is_none()) {
        return Err(CliError::user(format!(
            "{} has no point files; run `swipe sample` first",
            cfg.corpus_dir.display()
        )));
    }
    let (summary, _, _) = run_training(&cfg, &corpus, &cfg.out_dir.clone())?;
    println!(
        "trained {} steps on {} images; best validation Dice {} at step {}; checkpoint {}",
        summary.steps,
        summary.train_images.len(),
        summary.best_val_dice.map_or("n/a".into(), |d| format!("{d:.4}")),
        summary.best_step,
        cfg.out_dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn apply_recon(recon: &mut ReconstructionConfig, a: &ReconstructionArgs) {
    recon.mode = a.mode.unwrap_or(recon.mode);
    recon.initial_stride = a.initial_stride.unwrap_or(recon.initial_stride);
    recon.threshold = a.threshold.unwrap_or(recon.threshold);
}

pub fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, SwipeModel)> {
    if !path.is_file() {
        return Err(CliError::user(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    let model = ck.model()?;
    Ok((ck, model))
}

pub fn infer(a: &InferArgs) -> CliResult<()> {
    let mut cfg = resolve(&a.cfg)?;
    apply_recon(&mut cfg.reconstruction, &a.recon);
    let (ck, model) = load_checkpoint(&a.checkpoint)?;
    let image = GrayImage::load_png(&a.image)?;
    let (h, w) = a.out_size.unwrap_or((image.height, image.width));
    let spec = cfg.reconstruction.spec(h, w);
    spec.validate()?;
    let fmap = image.to_fmap::<f32>();
    let decoded = predict(&model, &ck.params, &fmap, &spec)?;
    let dense_agreement = if a.compare_dense && spec.refinement != Refinement::Dense {
        let dense = predict(&model, &ck.params, &fmap, &ReconstructionSpec { refinement: Refinement::Dense, ..spec })?;
        Some(agreement(&decoded.mask, &dense.mask))
    } else if a.compare_dense {
        Some(1.0)
    } else {
        None
    };
    let dice = match &a.truth {
        Some(path) => Some(dice_metric(&decoded.mask, &LabelMask::load_png(path)?, model.classes())?),
        None => None,
    };
    let sidecar = PredictionSidecar {
        target_height: h,
        target_width: w,
        threshold: spec.threshold,
        refinement: spec.refinement,
        initial_stride: spec.initial_stride,
        checkpoint: a.checkpoint.display().to_string(),
        evaluations: decoded.evaluations,
        dense_agreement,
        dice,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    save_prediction(&decoded.mask, &sidecar, &a.out)?;
    println!(
        "wrote {}x{} mask to {} ({} decoder evaluations{})",
        h,
        w,
        a.out.display(),
        decoded.evaluations,
        dense_agreement.map_or(String::new(), |g| format!(", dense agreement {g:.5}"))
    );
    Ok(())
}

/// One CSV row of `eval`; the summary row has `image_id = "mean"`, the mean
/// Dice and the mean evaluation count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub image_id: String,
    pub split: String,
    pub height: usize,
    pub width: usize,
    pub dice: f64,
    pub evaluations: f64,
}

/// Scores `predict` on `items`. At native size the truth is the stored mask;
/// at any other size it is rasterized from the manifest shapes.
pub fn evaluate_items<P>(
    items: &[&Item],
    split: Split,
    classes: usize,
    size: Option<(usize, usize)>,
    recon: &ReconstructionConfig,
    mut predict: P,
) -> CliResult<Vec<EvalRow>>
where
    P: FnMut(&Item, &ReconstructionSpec) -> CliResult<Decoded>,
{
    if items.is_empty() {
        return Err(CliError::user(format!("split {} is empty", split.name())));
    }
    let mut rows = Vec::with_capacity(items.len() + 1);
    for item in items {
        let native = (item.mask.height, item.mask.width);
        let (h, w) = size.unwrap_or(native);
        let truth = if (h, w) == native {
            item.mask.clone()
        } else if item.shapes.is_empty() {
            return Err(CliError::user(format!(
                "image {} has no shapes to rasterize truth at {h}x{w}",
                item.id
            )));
        } else {
            rasterize(&item.shapes, h, w)
        };
        let spec = recon.spec(h, w);
        let decoded = predict(item, &spec)?;
        rows.push(EvalRow {
            image_id: item.id.to_string(),
            split: split.name().into(),
            height: h,
            width: w,
            dice: dice_metric(&decoded.mask, &truth, classes)?.mean,
            evaluations: decoded.evaluations as f64,
        });
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let summary = EvalRow {
        image_id: "mean".into(),
        split: split.name().into(),
        height: rows[0].height,
        width: rows[0].width,
        dice: mean(|r| r.dice),
        evaluations: mean(|r| r.evaluations),
    };
    rows.push(summary);
    Ok(rows)
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let mut cfg = resolve(&a.cfg)?;
    if let Some(c) = &a.corpus {
        cfg.corpus_dir = c.clone();
    }
    apply_recon(&mut cfg.reconstruction, &a.recon);
    cfg.reconstruction.spec(1, 1).validate()?;
    let split = Split::parse(&a.split)?;
    let (ck, model) = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&cfg.corpus_dir)?;
    let items = corpus.split(split);
    let rows = evaluate_items(&items, split, model.classes(), a.out_size, &cfg.reconstruction, |item, spec| {
        Ok(predict(&model, &ck.params, &item.image.to_fmap(), spec)?)
    })?;
    write_eval_csv(&a.out, &rows)?;
    echo(&cfg, &a.out.with_extension("toml"))?;
    let summary = rows.last().expect("summary row");
    println!(
        "mean Dice {:.4} over {} {} images; wrote {}",
        summary.dice,
        rows.len() - 1,
        split.name(),
        a.out.display()
    );
    Ok(())
}

/// Mean Dice of `params` on `items` at native size.
pub fn split_dice(model: &SwipeModel, params: &[f32], items: &[&Item], split: Split, recon: &ReconstructionConfig) -> CliResult<f64> {
    let rows = evaluate_items(items, split, model.classes(), None, recon, |item, spec| {
        Ok(predict(model, params, &item.image.to_fmap(), spec)?)
    })?;
    Ok(rows.last().expect("summary row").dice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use swipe_core::data::{Corpus, SyntheticCorpusSpec};
    use swipe_core::inference::reconstruct;
    use swipe_core::sampling::SamplingConfig;

    fn oracle(item: &Item, spec: &ReconstructionSpec, classes: usize) -> Decoded {
        let shapes = item.shapes.clone();
        let field = (classes, move |p: &swipe_core::geometry::NormalizedCoordinate| {
            let label = shapes.iter().rev().find(|s| s.contains(p.0)).map_or(0, |s| s.class) as usize;
            let mut probs = vec![0.0; classes];
            probs[label] = 1.0;
            probs
        });
        reconstruct(&field, spec).unwrap()
    }

    fn corpus() -> Corpus {
        let spec = SyntheticCorpusSpec {
            n_images: 10,
            size: 64,
            ..Default::default()
        };
        Corpus::synthesize(&spec, &SamplingConfig::default()).unwrap()
    }

    #[test]
    fn oracle_scores_one_with_summary_row() {
        let corpus = corpus();
        let items = corpus.split(Split::Test);
        for recon in [
            ReconstructionConfig {
                mode: Refinement::Dense,
                ..Default::default()
            },
            ReconstructionConfig::default(),
        ] {
            for size in [None, Some((128, 128))] {
                let rows = evaluate_items(&items, Split::Test, 2, size, &recon, |item, spec| Ok(oracle(item, spec, 2))).unwrap();
                assert_eq!(rows.len(), items.len() + 1);
                assert_eq!(rows.last().unwrap().image_id, "mean");
                let mean = rows.last().unwrap().dice;
                if recon.mode == Refinement::Dense {
                    assert_eq!(mean, 1.0);
                } else {
                    assert!(mean > 0.99, "{mean}");
                }
            }
        }
    }

    #[test]
    fn empty_split_is_user_error() {
        let err = evaluate_items(&[], Split::Test, 2, None, &ReconstructionConfig::default(), |_, _| unreachable!()).unwrap_err();
        assert_eq!(err.code, crate::EXIT_USER);
    }
}
