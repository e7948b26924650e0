//! Mask reconstruction at arbitrary output resolution and Dice evaluation.
//!
//! The patch decoder is the final predictor. Pixels of the target raster are
//! decoded at their normalized centers, so the output size is independent of
//! the input size.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::argmax;
use crate::encoder::Encoded;
use crate::error::{Error, Result};
use crate::geometry::{pixel_to_normalized, NormalizedCoordinate};
use crate::model::SwipeModel;
use crate::nn::Fmap;
use crate::raster::LabelMask;

/// Probability margin around the threshold that forces refinement.
pub const MISE_MARGIN: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Refinement {
    Mise,
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSpec {
    pub target_height: usize,
    pub target_width: usize,
    /// Coarse lattice spacing in pixels; a power of two.
    pub initial_stride: usize,
    pub threshold: f64,
    pub refinement: Refinement,
}

impl ReconstructionSpec {
    pub fn dense(height: usize, width: usize) -> Self {
        Self {
            target_height: height,
            target_width: width,
            initial_stride: 4,
            threshold: 0.5,
            refinement: Refinement::Dense,
        }
    }

    pub fn mise(height: usize, width: usize) -> Self {
        Self {
            refinement: Refinement::Mise,
            ..Self::dense(height, width)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_height == 0 || self.target_width == 0 {
            return Err(Error::Config("target size must be at least 1x1".into()));
        }
        if !self.initial_stride.is_power_of_two() {
            return Err(Error::Config(format!("initial stride {} is not a power of two", self.initial_stride)));
        }
        Ok(())
    }
}

/// Class label per target pixel.
pub type PredictionMask = LabelMask;

/// A map from normalized coordinates to class probabilities.
pub trait OccupancyField {
    fn classes(&self) -> usize;
    /// Row-major `points x classes` probabilities.
    fn probabilities(&self, points: &[NormalizedCoordinate]) -> Vec<f64>;
}

impl<F: Fn(&NormalizedCoordinate) -> Vec<f64>> OccupancyField for (usize, F) {
    fn classes(&self) -> usize {
        self.0
    }

    fn probabilities(&self, points: &[NormalizedCoordinate]) -> Vec<f64> {
        points.iter().flat_map(|p| (self.1)(p)).collect()
    }
}

/// The patch decoder of a model conditioned on one encoded image.
pub struct ModelField<'a> {
    pub model: &'a SwipeModel,
    pub params: &'a [f32],
    pub encoded: Encoded<f32>,
}

const CHUNK: usize = 4096;

impl<'a> ModelField<'a> {
    pub fn new(model: &'a SwipeModel, params: &'a [f32], image: &Fmap<f32>) -> Result<Self> {
        Ok(Self {
            model,
            params,
            encoded: model.encode(params, image)?,
        })
    }
}

impl OccupancyField for ModelField<'_> {
    fn classes(&self) -> usize {
        self.model.classes()
    }

    fn probabilities(&self, points: &[NormalizedCoordinate]) -> Vec<f64> {
        let mut out = Vec::with_capacity(points.len() * self.classes());
        for chunk in points.chunks(CHUNK) {
            out.extend(self.model.predict_patch(self.params, &self.encoded, chunk).iter().map(|&v| v as f64));
        }
        out
    }
}

/// Reconstruction result with the number of decoder evaluations spent.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub mask: PredictionMask,
    pub evaluations: usize,
}

fn centers(pixels: &[(usize, usize)], h: usize, w: usize) -> Vec<NormalizedCoordinate> {
    pixels
        .iter()
        .map(|&(r, c)| pixel_to_normalized([r, c], h, w).expect("pixel inside target"))
        .collect()
}

/// Decodes every target pixel.
pub fn decode_grid<F: OccupancyField + ?Sized>(field: &F, height: usize, width: usize) -> Decoded {
    let pixels: Vec<(usize, usize)> = (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).collect();
    let probs = field.probabilities(&centers(&pixels, height, width));
    let c = field.classes();
    let data = probs.chunks(c).map(|row| argmax(row) as u8).collect();
    Decoded {
        mask: LabelMask::from_vec(height, width, data).expect("one label per pixel"),
        evaluations: height * width,
    }
}

/// Lattice positions `0, s, 2s, ..` along an axis, plus the last index.
fn lattice(n: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).step_by(stride).collect();
    if *v.last().unwrap() != n - 1 {
        v.push(n - 1);
    }
    v
}

#[derive(Clone, Copy)]
struct Cell {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
}

/// Coarse-to-fine reconstruction.
///
/// Labels are evaluated on a lattice of spacing `initial_stride`. A cell is
/// refined when its corner labels disagree or a corner's top probability lies
/// within [`MISE_MARGIN`] of the threshold; refinement splits the cell at its
/// midpoints and evaluates the new lattice points, level by level. Cells that
/// are never refined take their corners' common label.
pub fn decode_mise<F: OccupancyField + ?Sized>(field: &F, spec: &ReconstructionSpec) -> Result<Decoded> {
    spec.validate()?;
    let (h, w) = (spec.target_height, spec.target_width);
    let classes = field.classes();
    let mut label: Vec<Option<u8>> = vec![None; h * w];
    let mut uncertain = vec![false; h * w];
    let mut evaluations = 0;
    let mut evaluate = |pixels: Vec<(usize, usize)>, label: &mut Vec<Option<u8>>, uncertain: &mut Vec<bool>| {
        let fresh: Vec<(usize, usize)> = pixels.into_iter().filter(|&(r, c)| label[r * w + c].is_none()).collect();
        if fresh.is_empty() {
            return;
        }
        let probs = field.probabilities(&centers(&fresh, h, w));
        for (&(r, c), row) in fresh.iter().zip(probs.chunks(classes)) {
            let k = argmax(row);
            label[r * w + c] = Some(k as u8);
            uncertain[r * w + c] = (row[k] - spec.threshold).abs() < MISE_MARGIN;
        }
        evaluations += fresh.len();
    };

    let rows = lattice(h, spec.initial_stride);
    let cols = lattice(w, spec.initial_stride);
    let mut coarse = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            coarse.push((r, c));
        }
    }
    evaluate(coarse, &mut label, &mut uncertain);

    let mut level: Vec<Cell> = Vec::new();
    for rw in rows.windows(2).map(|p| (p[0], p[1])).chain((rows.len() == 1).then_some((0, 0))) {
        for cw in cols.windows(2).map(|p| (p[0], p[1])).chain((cols.len() == 1).then_some((0, 0))) {
            level.push(Cell { r0: rw.0, r1: rw.1, c0: cw.0, c1: cw.1 });
        }
    }
    let mut fill = vec![0u8; h * w];
    while !level.is_empty() {
        let mut next = Vec::new();
        let mut wanted = Vec::new();
        for cell in level {
            let corners = [(cell.r0, cell.c0), (cell.r0, cell.c1), (cell.r1, cell.c0), (cell.r1, cell.c1)];
            let first = label[cell.r0 * w + cell.c0].expect("corner evaluated");
            let mixed = corners.iter().any(|&(r, c)| label[r * w + c] != Some(first) || uncertain[r * w + c]);
            let splittable = cell.r1 - cell.r0 >= 2 || cell.c1 - cell.c0 >= 2;
            if mixed && splittable {
                let rs = split(cell.r0, cell.r1);
                let cs = split(cell.c0, cell.c1);
                for &r in &rs {
                    for &c in &cs {
                        wanted.push((r, c));
                    }
                }
                for rp in rs.windows(2).map(|p| (p[0], p[1])).chain((rs.len() == 1).then_some((rs[0], rs[0]))) {
                    for cp in cs.windows(2).map(|p| (p[0], p[1])).chain((cs.len() == 1).then_some((cs[0], cs[0]))) {
                        next.push(Cell { r0: rp.0, r1: rp.1, c0: cp.0, c1: cp.1 });
                    }
                }
            } else if !mixed {
                for r in cell.r0..=cell.r1 {
                    for c in cell.c0..=cell.c1 {
                        fill[r * w + c] = first;
                    }
                }
            }
            // Mixed cells that cannot split have every pixel on a corner.
        }
        evaluate(wanted, &mut label, &mut uncertain);
        level = next;
    }
    let data = (0..h * w).map(|i| label[i].unwrap_or(fill[i])).collect();
    Ok(Decoded {
        mask: LabelMask::from_vec(h, w, data)?,
        evaluations,
    })
}

/// `[a, mid, b]`, or `[a, b]` when the span is too short to split.
fn split(a: usize, b: usize) -> Vec<usize> {
    if b - a >= 2 {
        vec![a, (a + b) / 2, b]
    } else if a == b {
        vec![a]
    } else {
        vec![a, b]
    }
}

pub fn reconstruct<F: OccupancyField + ?Sized>(field: &F, spec: &ReconstructionSpec) -> Result<Decoded> {
    spec.validate()?;
    match spec.refinement {
        Refinement::Dense => Ok(decode_grid(field, spec.target_height, spec.target_width)),
        Refinement::Mise => decode_mise(field, spec),
    }
}

/// Encodes `image` and reconstructs a mask of the requested size.
pub fn predict(model: &SwipeModel, params: &[f32], image: &Fmap<f32>, spec: &ReconstructionSpec) -> Result<Decoded> {
    let field = ModelField::new(model, params, image)?;
    reconstruct(&field, spec)
}

/// Per-class and foreground-mean Dice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// Indexed by foreground class minus one; `None` when absent from both.
    pub per_class: Vec<Option<f64>>,
    /// Mean over scored classes; 1 when no class is present in either mask.
    pub mean: f64,
}

pub fn dice_metric(pred: &LabelMask, truth: &LabelMask, classes: usize) -> Result<DiceReport> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    let mut inter = vec![0usize; classes];
    let mut np = vec![0usize; classes];
    let mut nt = vec![0usize; classes];
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        let (p, t) = (p as usize, t as usize);
        if p < classes {
            np[p] += 1;
        }
        if t < classes {
            nt[t] += 1;
        }
        if p == t && p < classes {
            inter[p] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (1..classes)
        .map(|c| (np[c] + nt[c] > 0).then(|| 2.0 * inter[c] as f64 / (np[c] + nt[c]) as f64))
        .collect();
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if scored.is_empty() {
        1.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(DiceReport { per_class, mean })
}

/// Sidecar written next to a predicted mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSidecar {
    pub target_height: usize,
    pub target_width: usize,
    pub threshold: f64,
    pub refinement: Refinement,
    pub initial_stride: usize,
    pub checkpoint: String,
    pub evaluations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_agreement: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice: Option<DiceReport>,
}

/// Writes the mask PNG and its JSON sidecar (same stem, `.json`).
pub fn save_prediction(mask: &LabelMask, sidecar: &PredictionSidecar, path: &Path) -> Result<()> {
    mask.save_png(path)?;
    let side = path.with_extension("json");
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

/// Fraction of pixels with equal labels.
pub fn agreement(a: &LabelMask, b: &LabelMask) -> f64 {
    let same = a.data.iter().zip(&b.data).filter(|(x, y)| x == y).count();
    same as f64 / a.data.len().max(1) as f64
}
