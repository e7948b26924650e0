//! Occupancy decoders and stochastic patch overreach.
//!
//! The patch decoder input is the plain concatenation, in this order, of
//!
//! | field | width | present |
//! |-------|-------|---------|
//! | `p_P` | coord | always |
//! | `z_P` | `d`   | always |
//! | `p_I` | coord | global conditioning on |
//! | `z_I` | `d`   | global conditioning on |
//! | `p_S` | coord | source coordinate on |
//!
//! where "coord" is 2 for raw coordinates, or `2 + 4L` with `L` frequency
//! bands. The image decoder sees `[p_I, z_I]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoded;
use crate::error::{Error, Result};
use crate::geometry::{to_patch_local, to_patch_local_scaled, Connectivity, NormalizedCoordinate, PatchGridSpec, PatchIndex};
use crate::nn::{ops, Mlp, MlpCache, ParamBuilder, Scalar};
use crate::sampling::OccupancySample;

/// Output nonlinearity of a decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// One logit per class, softmax over classes.
    Softmax,
    /// Binary only: one logit, reported as `[1 - p, p]`.
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Classes including background.
    pub classes: usize,
    pub head: Head,
    pub patch_hidden: Vec<usize>,
    pub image_hidden: Vec<usize>,
    /// Condition the patch decoder on `p_I` and `z_I`.
    pub global_cond: bool,
    /// Feed the source coordinate `p_S` to the patch decoder.
    pub source_coord: bool,
    /// Scale patch-local coordinates so a full cell spans `[-1, 1]`.
    pub rescale_local: bool,
    /// Sinusoidal frequency bands per coordinate; 0 feeds raw coordinates.
    pub frequency_bands: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            head: Head::Softmax,
            patch_hidden: vec![256, 256, 256],
            image_hidden: vec![256, 128],
            global_cond: true,
            source_coord: false,
            rescale_local: false,
            frequency_bands: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("decoders need at least 2 classes (background included)".into()));
        }
        if self.head == Head::Sigmoid && self.classes != 2 {
            return Err(Error::Config("sigmoid head is binary only".into()));
        }
        if self.patch_hidden.contains(&0) || self.image_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn coord_width(&self) -> usize {
        2 + 4 * self.frequency_bands
    }

    fn logits(&self) -> usize {
        match self.head {
            Head::Softmax => self.classes,
            Head::Sigmoid => 1,
        }
    }
}

fn push_coord<T: Scalar>(out: &mut Vec<T>, p: &NormalizedCoordinate, bands: usize) {
    for &v in &p.0 {
        out.push(T::from_f64_lossy(v));
    }
    for k in 0..bands {
        let f = std::f64::consts::PI * (1u64 << k) as f64;
        for &v in &p.0 {
            out.push(T::from_f64_lossy((f * v).sin()));
            out.push(T::from_f64_lossy((f * v).cos()));
        }
    }
}

/// MLP plus output head shared by both decoders.
#[derive(Clone, Debug)]
pub struct OccupancyMlp {
    pub mlp: Mlp,
    pub head: Head,
    pub classes: usize,
}

impl OccupancyMlp {
    fn new(b: &mut ParamBuilder, input: usize, hidden: &[usize], cfg: &DecoderConfig) -> Self {
        Self {
            mlp: Mlp::new(b, input, hidden, cfg.logits()),
            head: cfg.head,
            classes: cfg.classes,
        }
    }

    pub fn probabilities<T: Scalar>(&self, logits: &[T]) -> Vec<T> {
        match self.head {
            Head::Softmax => ops::softmax_rows(logits, self.classes),
            Head::Sigmoid => logits
                .iter()
                .flat_map(|&z| {
                    let p = ops::sigmoid(z);
                    [T::one() - p, p]
                })
                .collect(),
        }
    }

    /// Gradient w.r.t. logits from the gradient w.r.t. probabilities.
    pub fn probabilities_backward<T: Scalar>(&self, probs: &[T], dprobs: &[T]) -> Vec<T> {
        match self.head {
            Head::Softmax => ops::softmax_backward(probs, dprobs, self.classes),
            Head::Sigmoid => probs
                .chunks(2)
                .zip(dprobs.chunks(2))
                .map(|(p, g)| (g[1] - g[0]) * p[1] * p[0])
                .collect(),
        }
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: Vec<T>, rows: usize) -> (Vec<T>, MlpCache<T>) {
        let (logits, cache) = self.mlp.forward(params, x, rows);
        (self.probabilities(&logits), cache)
    }

    pub fn infer<T: Scalar>(&self, params: &[T], x: &[T], rows: usize) -> Vec<T> {
        self.probabilities(&self.mlp.infer(params, x, rows))
    }

    /// Backward from probability gradients; returns the input gradient.
    pub fn backward<T: Scalar>(&self, params: &[T], cache: &MlpCache<T>, probs: &[T], dprobs: &[T], grads: &mut [T]) -> Vec<T> {
        let dlogits = self.probabilities_backward(probs, dprobs);
        self.mlp
            .backward(params, cache, dlogits, grads, true)
            .expect("input grad requested")
    }
}

/// Class probabilities for one coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyScores(pub Vec<f64>);

impl OccupancyScores {
    /// Most likely class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One fully assembled patch-decoder query.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDecoderInput<T> {
    pub p_p: NormalizedCoordinate,
    pub z_p: Vec<T>,
    pub p_i: NormalizedCoordinate,
    pub z_i: Vec<T>,
    pub p_s: NormalizedCoordinate,
}

/// A patch-decoder query that refers to a cell of an [`Encoded`] grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchQuery {
    pub p_p: NormalizedCoordinate,
    /// Row-major cell index into `Z^P`.
    pub patch: usize,
    pub p_i: NormalizedCoordinate,
    pub p_s: NormalizedCoordinate,
}

#[derive(Clone, Debug)]
pub struct PatchDecoder {
    pub net: OccupancyMlp,
    embed_dim: usize,
    coord_width: usize,
    bands: usize,
    global_cond: bool,
    source_coord: bool,
    rescale_local: bool,
}

impl PatchDecoder {
    pub fn new(b: &mut ParamBuilder, cfg: &DecoderConfig, embed_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let cw = cfg.coord_width();
        let mut width = cw + embed_dim;
        if cfg.global_cond {
            width += cw + embed_dim;
        }
        if cfg.source_coord {
            width += cw;
        }
        Ok(Self {
            net: OccupancyMlp::new(b, width, &cfg.patch_hidden, cfg),
            embed_dim,
            coord_width: cw,
            bands: cfg.frequency_bands,
            global_cond: cfg.global_cond,
            source_coord: cfg.source_coord,
            rescale_local: cfg.rescale_local,
        })
    }

    pub fn input_width(&self) -> usize {
        self.net.mlp.input_width()
    }

    pub fn uses_global(&self) -> bool {
        self.global_cond
    }

    /// Patch-local coordinate of `p_i` relative to cell `index`.
    pub fn local(&self, p_i: &NormalizedCoordinate, index: &PatchIndex<2>, grid: &PatchGridSpec) -> NormalizedCoordinate {
        let c = grid.center_of(index).expect("index from this grid");
        if self.rescale_local {
            to_patch_local_scaled(p_i, &c, grid)
        } else {
            to_patch_local(p_i, &c)
        }
    }

    /// Query for a point decoded by the cell containing it.
    pub fn query(&self, p_i: NormalizedCoordinate, p_s: NormalizedCoordinate, grid: &PatchGridSpec) -> PatchQuery {
        let index = grid.patch_of(&p_i);
        self.query_cell(p_i, p_s, index, grid)
    }

    /// Query for a point decoded by an arbitrary cell.
    pub fn query_cell(&self, p_i: NormalizedCoordinate, p_s: NormalizedCoordinate, index: PatchIndex<2>, grid: &PatchGridSpec) -> PatchQuery {
        PatchQuery {
            p_p: self.local(&p_i, &index, grid),
            patch: grid.linear(&index),
            p_i,
            p_s,
        }
    }

    fn push_row<T: Scalar>(&self, out: &mut Vec<T>, p_p: &NormalizedCoordinate, z_p: &[T], p_i: &NormalizedCoordinate, z_i: &[T], p_s: &NormalizedCoordinate) {
        push_coord(out, p_p, self.bands);
        out.extend_from_slice(z_p);
        if self.global_cond {
            push_coord(out, p_i, self.bands);
            out.extend_from_slice(z_i);
        }
        if self.source_coord {
            push_coord(out, p_s, self.bands);
        }
    }

    pub fn assemble<T: Scalar>(&self, queries: &[PatchQuery], enc: &Encoded<T>) -> Vec<T> {
        let mut x = Vec::with_capacity(queries.len() * self.input_width());
        for q in queries {
            self.push_row(&mut x, &q.p_p, enc.patch(q.patch), &q.p_i, &enc.z_i, &q.p_s);
        }
        x
    }

    pub fn assemble_inputs<T: Scalar>(&self, inputs: &[PatchDecoderInput<T>]) -> Result<Vec<T>> {
        let mut x = Vec::with_capacity(inputs.len() * self.input_width());
        for inp in inputs {
            if inp.z_p.len() != self.embed_dim || inp.z_i.len() != self.embed_dim {
                return Err(Error::Shape(format!(
                    "embeddings of {}/{} for decoder width {}",
                    inp.z_p.len(),
                    inp.z_i.len(),
                    self.embed_dim
                )));
            }
            self.push_row(&mut x, &inp.p_p, &inp.z_p, &inp.p_i, &inp.z_i, &inp.p_s);
        }
        Ok(x)
    }

    /// Class probabilities for a single assembled input.
    pub fn decode<T: Scalar>(&self, params: &[T], input: &PatchDecoderInput<T>) -> Result<OccupancyScores> {
        let x = self.assemble_inputs(std::slice::from_ref(input))?;
        let p = self.net.infer(params, &x, 1);
        Ok(OccupancyScores(p.iter().map(|v| v.as_f64()).collect()))
    }

    /// Adds the embedding parts of input-row gradients into `dz_p` (cells x d)
    /// and `dz_i`.
    pub fn scatter_embedding_grads<T: Scalar>(&self, dx: &[T], queries: &[PatchQuery], dz_p: &mut [T], dz_i: &mut [T]) {
        let w = self.input_width();
        let d = self.embed_dim;
        let cw = self.coord_width;
        for (row, q) in dx.chunks(w).zip(queries) {
            let dst = &mut dz_p[q.patch * d..(q.patch + 1) * d];
            for (a, &b) in dst.iter_mut().zip(&row[cw..cw + d]) {
                *a += b;
            }
            if self.global_cond {
                let off = 2 * cw + d;
                for (a, &b) in dz_i.iter_mut().zip(&row[off..off + d]) {
                    *a += b;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImageDecoder {
    pub net: OccupancyMlp,
    embed_dim: usize,
    coord_width: usize,
    bands: usize,
}

impl ImageDecoder {
    pub fn new(b: &mut ParamBuilder, cfg: &DecoderConfig, embed_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let cw = cfg.coord_width();
        Ok(Self {
            net: OccupancyMlp::new(b, cw + embed_dim, &cfg.image_hidden, cfg),
            embed_dim,
            coord_width: cw,
            bands: cfg.frequency_bands,
        })
    }

    pub fn input_width(&self) -> usize {
        self.coord_width + self.embed_dim
    }

    pub fn assemble<T: Scalar>(&self, points: &[NormalizedCoordinate], z_i: &[T]) -> Vec<T> {
        let mut x = Vec::with_capacity(points.len() * self.input_width());
        for p in points {
            push_coord(&mut x, p, self.bands);
            x.extend_from_slice(z_i);
        }
        x
    }

    pub fn decode<T: Scalar>(&self, params: &[T], p_i: &NormalizedCoordinate, z_i: &[T]) -> Result<OccupancyScores> {
        if z_i.len() != self.embed_dim {
            return Err(Error::Shape(format!("z_I of {} for width {}", z_i.len(), self.embed_dim)));
        }
        let x = self.assemble(std::slice::from_ref(p_i), z_i);
        let p = self.net.infer(params, &x, 1);
        Ok(OccupancyScores(p.iter().map(|v| v.as_f64()).collect()))
    }

    pub fn scatter_embedding_grads<T: Scalar>(&self, dx: &[T], dz_i: &mut [T]) {
        let cw = self.coord_width;
        for row in dx.chunks(self.input_width()) {
            for (a, &b) in dz_i.iter_mut().zip(&row[cw..]) {
                *a += b;
            }
        }
    }
}

/// Stochastic patch overreach settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpoConfig {
    pub connectivity: Connectivity,
    /// Perturbed copies per training point; 0 disables overreach.
    pub occurrence: usize,
}

impl Default for SpoConfig {
    fn default() -> Self {
        Self {
            connectivity: Connectivity::Eight,
            occurrence: 1,
        }
    }
}

/// Neighbor cells drawn uniformly (with replacement) for one point.
pub fn draw_neighbors<R: Rng + ?Sized>(index: &PatchIndex<2>, grid: &PatchGridSpec, cfg: &SpoConfig, rng: &mut R) -> Vec<PatchIndex<2>> {
    let candidates = grid.neighbors(index, cfg.connectivity);
    if candidates.is_empty() {
        return Vec::new();
    }
    (0..cfg.occurrence)
        .map(|_| candidates[rng.random_range(0..candidates.len())])
        .collect()
}

/// Perturbed inputs of one sample plus a warning when overreach is inert.
#[derive(Clone, Debug, PartialEq)]
pub struct SpoOutcome<T> {
    pub inputs: Vec<PatchDecoderInput<T>>,
    /// Supervision target, identical for every perturbed input.
    pub class: u8,
    pub warning: Option<String>,
}

/// Re-expresses `sample` relative to `occurrence` random neighboring cells.
pub fn spo_perturb<T: Scalar, R: Rng + ?Sized>(
    decoder: &PatchDecoder,
    sample: &OccupancySample,
    enc: &Encoded<T>,
    cfg: &SpoConfig,
    rng: &mut R,
) -> SpoOutcome<T> {
    let grid = &enc.grid;
    let own = grid.patch_of(&sample.p_i);
    let picks = draw_neighbors(&own, grid, cfg, rng);
    let warning = (picks.is_empty() && cfg.occurrence > 0)
        .then(|| format!("cell {:?} has no neighbors; patch overreach is inert", own.0));
    let inputs = picks
        .into_iter()
        .map(|n| PatchDecoderInput {
            p_p: decoder.local(&sample.p_i, &n, grid),
            z_p: enc.patch(grid.linear(&n)).to_vec(),
            p_i: sample.p_i,
            z_i: enc.z_i.clone(),
            p_s: sample.p_s,
        })
        .collect();
    SpoOutcome {
        inputs,
        class: sample.class,
        warning,
    }
}
