//! Optimization loop, ablation switches and annotation subsampling.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Split};
use crate::decoder::{draw_neighbors, SpoConfig};
use crate::encoder::Fusion;
use crate::error::{Error, Result};
use crate::geometry::{Coord, NormalizedCoordinate};
use crate::inference::{dice_metric, predict, ReconstructionSpec};
use crate::loss::{LossBreakdown, LossConfig};
use crate::model::{ModelConfig, SpoDraw, SwipeModel};
use crate::nn::{AdamW, AdamWConfig, Fmap};
use crate::raster::LabelMask;
use crate::rng::{derive_seed, item_seed, stream};
use crate::sampling::OccupancySample;

/// Component switches. The default is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub fusion: Fusion,
    pub spo: bool,
    pub global_cond: bool,
    pub source_coord: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            fusion: Fusion::Mea,
            spo: true,
            global_cond: true,
            source_coord: false,
        }
    }
}

impl Ablation {
    /// Applies the architecture-level switches.
    pub fn apply(&self, model: &mut ModelConfig) {
        model.encoder.fusion = self.fusion;
        model.decoder.global_cond = self.global_cond;
        model.decoder.source_coord = self.source_coord;
    }

    /// Parses `key=value` with keys `mea` (on|add|concat), `spo`,
    /// `global_cond`, `source_coord` (on|off).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("ablation {assignment:?} is not key=value")))?;
        let switch = |v: &str| match v {
            "on" | "true" => Ok(true),
            "off" | "false" => Ok(false),
            _ => Err(Error::Config(format!("{key}: expected on or off, got {v:?}"))),
        };
        match key.trim() {
            "mea" | "fusion" => {
                self.fusion = match value.trim() {
                    "on" | "mea" => Fusion::Mea,
                    "add" => Fusion::Add,
                    "concat" => Fusion::Concat,
                    v => return Err(Error::Config(format!("mea: expected on, add or concat, got {v:?}"))),
                }
            }
            "spo" => self.spo = switch(value.trim())?,
            "global_cond" => self.global_cond = switch(value.trim())?,
            "source_coord" => self.source_coord = switch(value.trim())?,
            k => return Err(Error::Config(format!("unknown ablation switch {k:?}"))),
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let fusion = match self.fusion {
            Fusion::Mea => "mea",
            Fusion::Add => "add",
            Fusion::Concat => "concat",
        };
        let on = |b: bool| if b { "on" } else { "off" };
        format!(
            "fusion={fusion},spo={},global_cond={},source_coord={}",
            on(self.spo),
            on(self.global_cond),
            on(self.source_coord)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_images: usize,
    pub points_per_image: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Fraction of the training split used, in `(0, 1]`.
    pub annotation_fraction: f64,
    pub ablation: Ablation,
    pub spo: SpoConfig,
    pub loss: LossConfig,
    /// Validation cadence in steps; 0 validates only at the end.
    pub val_every: usize,
    /// Serial execution with a fixed reduction order.
    pub deterministic: bool,
    /// Initialize and return without updates.
    pub dry_run: bool,
    /// Random flips and transposition of each sampled image and its points.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_images: 8,
            points_per_image: 512,
            optimizer: AdamWConfig::default(),
            seed: 0,
            annotation_fraction: 1.0,
            ablation: Ablation::default(),
            spo: SpoConfig::default(),
            loss: LossConfig::default(),
            val_every: 250,
            deterministic: true,
            dry_run: false,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1 (use dry_run for no updates)".into()));
        }
        if self.batch_images == 0 || self.points_per_image == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.annotation_fraction > 0.0 && self.annotation_fraction <= 1.0) {
            return Err(Error::Config(format!("annotation fraction {} outside (0, 1]", self.annotation_fraction)));
        }
        self.loss.validate()
    }
}

/// Image-level subset of `train_ids`: the first `round(fraction * n)` ids in a
/// seeded hash order, so smaller fractions are prefixes of larger ones.
pub fn subsample_annotations(train_ids: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("annotation fraction {fraction} outside (0, 1]")));
    }
    let keep = (fraction * train_ids.len() as f64).round() as usize;
    if keep == 0 {
        return Err(Error::Config(format!(
            "annotation fraction {fraction} of {} images keeps none",
            train_ids.len()
        )));
    }
    let key = derive_seed(seed, "annotations");
    let mut ranked = train_ids.to_vec();
    ranked.sort_by_key(|&id| (item_seed(key, id as u64), id));
    ranked.truncate(keep);
    ranked.sort_unstable();
    Ok(ranked)
}

/// A symmetry of the square: optional transpose, then optional row and
/// column flips. Index bits are `transpose | flip_rows << 1 | flip_cols << 2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Dihedral {
    pub transpose: bool,
    pub flip_rows: bool,
    pub flip_cols: bool,
}

impl Dihedral {
    pub fn from_index(i: u8) -> Self {
        Self {
            transpose: i & 1 != 0,
            flip_rows: i & 2 != 0,
            flip_cols: i & 4 != 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn point(&self, p: NormalizedCoordinate) -> NormalizedCoordinate {
        let [mut r, mut c] = p.0;
        if self.transpose {
            std::mem::swap(&mut r, &mut c);
        }
        if self.flip_rows {
            r = -r;
        }
        if self.flip_cols {
            c = -c;
        }
        Coord([r, c])
    }

    pub fn sample(&self, s: &OccupancySample) -> OccupancySample {
        OccupancySample {
            p_s: self.point(s.p_s),
            p_i: self.point(s.p_i),
            class: s.class,
        }
    }

    /// The image whose pixel at `point(p)` equals the input's pixel at `p`.
    pub fn image<T: Copy>(&self, f: &Fmap<T>) -> Fmap<T> {
        let (h, w) = if self.transpose { (f.width, f.height) } else { (f.height, f.width) };
        let mut data = Vec::with_capacity(f.data.len());
        for ch in 0..f.channels {
            for r in 0..h {
                for c in 0..w {
                    let r0 = if self.flip_rows { h - 1 - r } else { r };
                    let c0 = if self.flip_cols { w - 1 - c } else { c };
                    let (sr, sc) = if self.transpose { (c0, r0) } else { (r0, c0) };
                    data.push(f.data[(ch * f.height + sr) * f.width + sc]);
                }
            }
        }
        Fmap {
            channels: f.channels,
            height: h,
            width: w,
            data,
        }
    }
}

pub struct TrainImage {
    pub id: usize,
    pub image: Fmap<f32>,
    pub points: Vec<OccupancySample>,
}

pub struct EvalImage {
    pub id: usize,
    pub image: Fmap<f32>,
    pub mask: LabelMask,
}

impl EvalImage {
    pub fn from_items<'a>(items: impl IntoIterator<Item = &'a crate::data::Item>) -> Vec<Self> {
        items
            .into_iter()
            .map(|it| EvalImage {
                id: it.id,
                image: it.image.to_fmap(),
                mask: it.mask.clone(),
            })
            .collect()
    }
}

pub struct TrainData {
    pub train: Vec<TrainImage>,
    pub val: Vec<EvalImage>,
    /// Training ids skipped for lack of a point file.
    pub skipped: Vec<usize>,
}

impl TrainData {
    /// Training subset (annotation fraction applied) and validation split.
    pub fn from_corpus(corpus: &Corpus, cfg: &TrainConfig) -> Result<Self> {
        let ids = subsample_annotations(corpus.manifest.split(Split::Train), cfg.annotation_fraction, cfg.seed)?;
        let mut train = Vec::with_capacity(ids.len());
        let mut skipped = Vec::new();
        for id in ids {
            let item = corpus
                .item(id)
                .ok_or_else(|| Error::Validation(format!("train id {id} has no item")))?;
            match &item.points {
                Some(points) if !points.is_empty() => train.push(TrainImage {
                    id,
                    image: item.image.to_fmap(),
                    points: points.clone(),
                }),
                _ => {
                    log::warn!("skipping image {id}: no point file");
                    skipped.push(id);
                }
            }
        }
        if train.is_empty() {
            return Err(Error::Empty("no training images with points".into()));
        }
        Ok(Self {
            train,
            val: EvalImage::from_items(corpus.split(Split::Val)),
            skipped,
        })
    }
}

/// One CSV row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    #[serde(rename = "L_total")]
    pub total: f64,
    #[serde(rename = "L_PI_patch")]
    pub pi_patch: f64,
    #[serde(rename = "L_PI_image")]
    pub pi_image: f64,
    #[serde(rename = "L_SPO")]
    pub spo: f64,
    pub reg: f64,
}

impl LogRow {
    fn new(iteration: usize, b: &LossBreakdown) -> Self {
        Self {
            iteration,
            total: b.total,
            pi_patch: b.pi_patch,
            pi_image: b.pi_image,
            spo: b.spo,
            reg: b.reg,
        }
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub final_params: Vec<f32>,
    /// Parameters at the best validation Dice (final parameters when no
    /// validation set is given).
    pub best_params: Vec<f32>,
    pub best_step: usize,
    pub best_val_dice: Option<f64>,
    pub log: Vec<LogRow>,
    /// `(step, mean validation Dice)`.
    pub val_log: Vec<(usize, f64)>,
    pub steps: usize,
}

/// Mean foreground Dice of native-resolution dense reconstructions.
pub fn mean_dice(model: &SwipeModel, params: &[f32], images: &[EvalImage]) -> Result<f64> {
    let scores = per_image_dice(model, params, images)?;
    Ok(scores.iter().map(|(_, d)| d).sum::<f64>() / scores.len().max(1) as f64)
}

pub fn per_image_dice(model: &SwipeModel, params: &[f32], images: &[EvalImage]) -> Result<Vec<(usize, f64)>> {
    images
        .iter()
        .map(|e| {
            let spec = ReconstructionSpec::dense(e.mask.height, e.mask.width);
            let pred = predict(model, params, &e.image, &spec)?;
            Ok((e.id, dice_metric(&pred.mask, &e.mask, model.classes())?.mean))
        })
        .collect()
}

/// Runs `cfg.iterations` steps from a seeded initialization.
pub fn train(model: &SwipeModel, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let params = model.init_params::<f32>(cfg.seed);
    train_from(model, data, cfg, params)
}

pub fn train_from(model: &SwipeModel, data: &TrainData, cfg: &TrainConfig, mut params: Vec<f32>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.len() != model.param_count() {
        return Err(Error::Shape(format!("{} parameters for a model of {}", params.len(), model.param_count())));
    }
    if data.train.is_empty() {
        return Err(Error::Empty("no training images".into()));
    }
    if cfg.dry_run {
        return Ok(TrainOutcome {
            best_params: params.clone(),
            final_params: params,
            best_step: 0,
            best_val_dice: None,
            log: Vec::new(),
            val_log: Vec::new(),
            steps: 0,
        });
    }
    let mut batch_rng = stream(cfg.seed, "batches");
    let mut point_rng = stream(cfg.seed, "points");
    let mut spo_rng = stream(cfg.seed, "spo");
    let mut augment_rng = stream(cfg.seed, "augment");
    let mut opt = AdamW::new(cfg.optimizer, params.len());
    let mut grads = vec![0f32; params.len()];
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.batch_images.min(data.train.len());
    let scale = 1.0 / batch as f32;
    let spo_on = cfg.ablation.spo && cfg.spo.occurrence > 0;
    let loss_cfg = LossConfig {
        beta: if spo_on { cfg.loss.beta } else { 0.0 },
        ..cfg.loss
    };

    let mut log = Vec::with_capacity(cfg.iterations);
    let mut val_log = Vec::new();
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    for step in 0..cfg.iterations {
        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut parts = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            let item = &data.train[order[cursor]];
            cursor += 1;
            let k = cfg.points_per_image.min(item.points.len());
            let mut picked: Vec<OccupancySample> = index::sample(&mut point_rng, item.points.len(), k)
                .into_iter()
                .map(|i| item.points[i])
                .collect();
            let sym = if cfg.augment {
                Dihedral::from_index(augment_rng.random_range(0..8))
            } else {
                Dihedral::default()
            };
            let flipped;
            let image = if sym.is_identity() {
                &item.image
            } else {
                picked.iter_mut().for_each(|s| *s = sym.sample(s));
                flipped = sym.image(&item.image);
                &flipped
            };
            let mut draws = Vec::new();
            if spo_on {
                let grid = model.grid_for(image.height, image.width)?;
                for (i, s) in picked.iter().enumerate() {
                    let own = grid.patch_of(&s.p_i);
                    for neighbor in draw_neighbors(&own, &grid, &cfg.spo, &mut spo_rng) {
                        draws.push(SpoDraw { point: i, neighbor });
                    }
                }
            }
            parts.push(model.loss_and_grad(&params, image, &picked, &draws, &loss_cfg, scale, &mut grads)?);
        }
        let b = LossBreakdown::mean(&parts);
        if !b.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step,
                breakdown: format!("{b:?}"),
            });
        }
        log.push(LogRow::new(step, &b));
        opt.update(&mut params, &grads, cfg.optimizer.lr_at(step, cfg.iterations));

        let done = step + 1;
        let validate = !data.val.is_empty() && ((cfg.val_every > 0 && done % cfg.val_every == 0) || done == cfg.iterations);
        if validate {
            let dice = mean_dice(model, &params, &data.val)?;
            log::info!("step {done}: loss {:.4}, validation Dice {dice:.4}", b.total);
            val_log.push((done, dice));
            if best.as_ref().is_none_or(|(d, _, _)| dice > *d) {
                best = Some((dice, done, params.clone()));
            }
        }
    }
    let (best_val_dice, best_step, best_params) = match best {
        Some((d, s, p)) => (Some(d), s, p),
        None => (None, cfg.iterations, params.clone()),
    };
    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_step,
        best_val_dice,
        log,
        val_log,
        steps: cfg.iterations,
    })
}
