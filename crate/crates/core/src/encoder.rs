//! Image encoder: backbone, context blocks, cascaded aggregation and
//! multi-stage embedding fusion.
//!
//! The backbone has five stride-2 stages; stages 2 to 5 (strides 4 to 32) feed
//! the neck. Each of those maps passes through an RFB-Lite context block, then
//! a top-down cascade produces four stride-32 embeddings of width `d`:
//!
//! ```text
//! F'_5 = conv3x3(relu(proj_5(F_5)))
//! F'_n = conv3x3(relu(proj_n(pool(F_n)) + F'_{n+1}))     n = 4, 3, 2
//! ```
//!
//! so `F'_n` depends on stages `n..=5` only. The four embeddings are resized
//! to the patch grid and fused per grid position into `z^P`; `z^I` is the
//! spatial mean of `F'_5`.
//!
//! The RFB-Lite block is a stand-in: branch count, dilations and widths are
//! our choice (four branches, dilations 1 to 3, `C/4` channels each).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PatchGridSpec;
use crate::nn::{ops, Conv2d, ConvCache, ConvSpec, Fmap, Linear, ParamBuilder, Scalar};

pub const STAGES: usize = 5;
/// Stages whose outputs feed the neck (strides 4, 8, 16, 32).
pub const NECK_STAGES: usize = 4;
pub const OUTPUT_STRIDE: usize = 32;

/// How the four resized stage embeddings become one patch embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Multi-stage embedding attention.
    Mea,
    /// `MLP_2(e_2 + e_3 + e_4 + e_5)`.
    Add,
    /// Linear projection of `cat(e_2, .., e_5)`.
    Concat,
}

/// What to do with inputs whose sides are not multiples of 32.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputPolicy {
    Reject,
    /// Bilinear resize up to the next multiple of 32.
    Resize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Channel width of each of the five backbone stages.
    pub widths: [usize; STAGES],
    pub blocks_per_stage: usize,
    /// Embedding width `d`.
    pub embed_dim: usize,
    pub fusion: Fusion,
    pub input_policy: InputPolicy,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: [16, 24, 32, 48, 64],
            blocks_per_stage: 2,
            embed_dim: 128,
            fusion: Fusion::Mea,
            input_policy: InputPolicy::Reject,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embedding width must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

#[derive(Clone, Debug)]
struct ResBlockCache<T> {
    a: ConvCache<T>,
    hidden: Vec<T>,
    b: ConvCache<T>,
    out: Vec<T>,
}

impl ResBlock {
    fn new(b: &mut ParamBuilder, ch: usize) -> Self {
        Self {
            a: ConvSpec::square(ch, ch, 3).build(b),
            b: ConvSpec::square(ch, ch, 3).build(b),
        }
    }

    fn forward<T: Scalar>(&self, params: &[T], x: &Fmap<T>) -> (Fmap<T>, ResBlockCache<T>) {
        let (mut h, ca) = self.a.forward(params, x);
        ops::relu_inplace(&mut h.data);
        let (mut y, cb) = self.b.forward(params, &h);
        y.add_assign(x);
        ops::relu_inplace(&mut y.data);
        let cache = ResBlockCache {
            a: ca,
            hidden: h.data,
            b: cb,
            out: y.data.clone(),
        };
        (y, cache)
    }

    fn backward<T: Scalar>(&self, params: &[T], cache: &ResBlockCache<T>, mut dy: Fmap<T>, grads: &mut [T]) -> Fmap<T> {
        ops::relu_backward_inplace(&mut dy.data, &cache.out);
        let mut dh = self.b.backward(params, &cache.b, &dy, grads, true).expect("input grad");
        ops::relu_backward_inplace(&mut dh.data, &cache.hidden);
        let mut dx = self.a.backward(params, &cache.a, &dh, grads, true).expect("input grad");
        dx.add_assign(&dy);
        dx
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct StageCache<T> {
    down: ConvCache<T>,
    down_out: Vec<T>,
    blocks: Vec<ResBlockCache<T>>,
}

/// Five-stage residual CNN; each stage halves the resolution.
#[derive(Clone, Debug)]
pub struct Backbone {
    stages: Vec<Stage>,
}

/// Backbone state kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BackboneCache<T> {
    stages: Vec<StageCache<T>>,
}

/// Stage outputs at strides 4, 8, 16 and 32.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures<T> {
    pub maps: [Fmap<T>; NECK_STAGES],
}

impl Backbone {
    pub fn new(b: &mut ParamBuilder, cfg: &EncoderConfig) -> Self {
        let mut stages = Vec::with_capacity(STAGES);
        let mut ch = cfg.in_channels;
        for &w in &cfg.widths {
            let down = ConvSpec::square(ch, w, 3).stride(2).build(b);
            let blocks = (0..cfg.blocks_per_stage).map(|_| ResBlock::new(b, w)).collect();
            stages.push(Stage { down, blocks });
            ch = w;
        }
        Self { stages }
    }

    pub fn forward<T: Scalar>(&self, params: &[T], image: &Fmap<T>) -> (MultiScaleFeatures<T>, BackboneCache<T>) {
        let mut caches = Vec::with_capacity(STAGES);
        let mut outs = Vec::with_capacity(STAGES);
        let mut x = image.clone();
        for stage in &self.stages {
            let (mut y, down) = stage.down.forward(params, &x);
            ops::relu_inplace(&mut y.data);
            let down_out = y.data.clone();
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (z, c) = block.forward(params, &y);
                blocks.push(c);
                y = z;
            }
            caches.push(StageCache { down, down_out, blocks });
            outs.push(y.clone());
            x = y;
        }
        let mut it = outs.into_iter().skip(1);
        let maps = std::array::from_fn(|_| it.next().expect("four neck stages"));
        (MultiScaleFeatures { maps }, BackboneCache { stages: caches })
    }

    /// Backpropagates gradients w.r.t. the four neck maps. Returns the input
    /// gradient when `want_input_grad` is set.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &BackboneCache<T>,
        d_maps: [Fmap<T>; NECK_STAGES],
        grads: &mut [T],
        want_input_grad: bool,
    ) -> Option<Fmap<T>> {
        let mut pending: Vec<Option<Fmap<T>>> = std::iter::once(None).chain(d_maps.into_iter().map(Some)).collect();
        let mut carry: Option<Fmap<T>> = None;
        for (s, stage) in self.stages.iter().enumerate().rev() {
            let mut dy = match (carry.take(), pending[s].take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    a
                }
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => unreachable!("every stage receives a gradient"),
            };
            let sc = &cache.stages[s];
            for (block, bc) in stage.blocks.iter().zip(&sc.blocks).rev() {
                dy = block.backward(params, bc, dy, grads);
            }
            ops::relu_backward_inplace(&mut dy.data, &sc.down_out);
            let need = s > 0 || want_input_grad;
            carry = stage.down.backward(params, &sc.down, &dy, grads, need);
        }
        carry
    }
}

/// Context block with parallel asymmetric-convolution branches.
#[derive(Clone, Debug)]
pub struct RfbLite {
    /// Each branch is a chain of convolutions with ReLU between links.
    branches: Vec<Vec<Conv2d>>,
    branch_width: usize,
    project: Conv2d,
}

#[derive(Clone, Debug)]
pub struct RfbCache<T> {
    /// Per branch, per link: conv cache and the link output (post-ReLU for
    /// all but the last link).
    branches: Vec<Vec<(ConvCache<T>, Vec<T>)>>,
    project: ConvCache<T>,
    out: Vec<T>,
}

impl RfbLite {
    pub fn new(b: &mut ParamBuilder, ch: usize) -> Self {
        let cb = ch.div_ceil(4).max(1);
        let mut branches = vec![vec![ConvSpec::new(ch, cb, (1, 1)).build(b)]];
        for dil in 1..=3 {
            branches.push(vec![
                ConvSpec::new(ch, cb, (1, 1)).build(b),
                ConvSpec::new(cb, cb, (3, 1)).padding((dil, 0)).dilation((dil, 1)).build(b),
                ConvSpec::new(cb, cb, (1, 3)).padding((0, dil)).dilation((1, dil)).build(b),
            ]);
        }
        let project = ConvSpec::new(4 * cb, ch, (1, 1)).build(b);
        Self {
            branches,
            branch_width: cb,
            project,
        }
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Fmap<T>) -> (Fmap<T>, RfbCache<T>) {
        let cb = self.branch_width;
        let plane = x.plane();
        let mut cat = Fmap::zeros(4 * cb, x.height, x.width);
        let mut caches = Vec::with_capacity(self.branches.len());
        for (bi, chain) in self.branches.iter().enumerate() {
            let mut h = x.clone();
            let mut links = Vec::with_capacity(chain.len());
            for (li, conv) in chain.iter().enumerate() {
                let (mut y, c) = conv.forward(params, &h);
                if li + 1 < chain.len() {
                    ops::relu_inplace(&mut y.data);
                }
                links.push((c, y.data.clone()));
                h = y;
            }
            cat.data[bi * cb * plane..(bi + 1) * cb * plane].copy_from_slice(&h.data);
            caches.push(links);
        }
        let (mut y, project) = self.project.forward(params, &cat);
        y.add_assign(x);
        ops::relu_inplace(&mut y.data);
        let cache = RfbCache {
            branches: caches,
            project,
            out: y.data.clone(),
        };
        (y, cache)
    }

    pub fn backward<T: Scalar>(&self, params: &[T], cache: &RfbCache<T>, mut dy: Fmap<T>, grads: &mut [T]) -> Fmap<T> {
        ops::relu_backward_inplace(&mut dy.data, &cache.out);
        let dcat = self.project.backward(params, &cache.project, &dy, grads, true).expect("input grad");
        let cb = self.branch_width;
        let plane = dy.plane();
        let mut dx = dy;
        for (bi, chain) in self.branches.iter().enumerate() {
            let slice = dcat.data[bi * cb * plane..(bi + 1) * cb * plane].to_vec();
            let mut g = Fmap::from_vec(cb, dx.height, dx.width, slice);
            for (li, conv) in chain.iter().enumerate().rev() {
                if li + 1 < chain.len() {
                    ops::relu_backward_inplace(&mut g.data, &cache.branches[bi][li].1);
                }
                g = conv
                    .backward(params, &cache.branches[bi][li].0, &g, grads, true)
                    .expect("input grad");
            }
            dx.add_assign(&g);
        }
        dx
    }

    /// Weights in one `3x1` + `1x3` pair versus a `3x3` kernel at the same width.
    pub fn asymmetric_pair_weights(&self) -> (usize, usize) {
        let pair = self.branches[1][1].spec.weight_count() + self.branches[1][2].spec.weight_count();
        let square = self.branch_width * self.branch_width * 9;
        (pair, square)
    }
}

/// The four stride-32 embeddings `F'_2 .. F'_5`, each `d x H/32 x W/32`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntermediateEmbeddings<T> {
    pub maps: [Fmap<T>; NECK_STAGES],
}

#[derive(Clone, Debug)]
pub struct Cascade {
    project: Vec<Conv2d>,
    fuse: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct CascadeCache<T> {
    pool_in: Vec<(usize, usize)>,
    project: Vec<ConvCache<T>>,
    fuse_in: Vec<Vec<T>>,
    fuse: Vec<ConvCache<T>>,
}

impl Cascade {
    pub fn new(b: &mut ParamBuilder, cfg: &EncoderConfig) -> Self {
        let d = cfg.embed_dim;
        let project = cfg.widths[1..]
            .iter()
            .map(|&c| ConvSpec::new(c, d, (1, 1)).build(b))
            .collect();
        let fuse = (0..NECK_STAGES).map(|_| ConvSpec::square(d, d, 3).build(b)).collect();
        Self { project, fuse }
    }

    fn pool_factor(i: usize) -> usize {
        1 << (NECK_STAGES - 1 - i)
    }

    pub fn forward<T: Scalar>(&self, params: &[T], enriched: &MultiScaleFeatures<T>) -> (IntermediateEmbeddings<T>, CascadeCache<T>) {
        let mut outs: Vec<Option<Fmap<T>>> = vec![None; NECK_STAGES];
        let mut project = Vec::with_capacity(NECK_STAGES);
        let mut fuse_in = vec![Vec::new(); NECK_STAGES];
        let mut fuse = Vec::with_capacity(NECK_STAGES);
        let mut pool_in = Vec::with_capacity(NECK_STAGES);
        for i in (0..NECK_STAGES).rev() {
            let src = &enriched.maps[i];
            pool_in.push((src.height, src.width));
            let pooled = ops::avg_pool(src, Self::pool_factor(i));
            let (mut g, pc) = self.project[i].forward(params, &pooled);
            project.push(pc);
            if let Some(up) = outs.get(i + 1).and_then(Option::as_ref) {
                g.add_assign(up);
            }
            ops::relu_inplace(&mut g.data);
            let (y, fc) = self.fuse[i].forward(params, &g);
            fuse_in[i] = g.data;
            fuse.push(fc);
            outs[i] = Some(y);
        }
        // Caches were pushed deepest-first.
        project.reverse();
        fuse.reverse();
        pool_in.reverse();
        let mut it = outs.into_iter().map(|m| m.expect("every stage fused"));
        let maps = std::array::from_fn(|_| it.next().unwrap());
        (
            IntermediateEmbeddings { maps },
            CascadeCache {
                pool_in,
                project,
                fuse_in,
                fuse,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &CascadeCache<T>,
        d_out: [Fmap<T>; NECK_STAGES],
        grads: &mut [T],
    ) -> [Fmap<T>; NECK_STAGES] {
        let mut d_out: Vec<Fmap<T>> = d_out.into_iter().collect();
        let mut d_in: Vec<Option<Fmap<T>>> = vec![None; NECK_STAGES];
        for i in 0..NECK_STAGES {
            let mut dg = self.fuse[i]
                .backward(params, &cache.fuse[i], &d_out[i], grads, true)
                .expect("input grad");
            ops::relu_backward_inplace(&mut dg.data, &cache.fuse_in[i]);
            if i + 1 < NECK_STAGES {
                d_out[i + 1].add_assign(&dg);
            }
            let dpooled = self.project[i]
                .backward(params, &cache.project[i], &dg, grads, true)
                .expect("input grad");
            let (h, w) = cache.pool_in[i];
            d_in[i] = Some(ops::avg_pool_backward(&dpooled, Self::pool_factor(i), h, w));
        }
        let mut it = d_in.into_iter().map(|m| m.expect("all stages"));
        std::array::from_fn(|_| it.next().unwrap())
    }
}

/// Bilinear resize of each intermediate embedding onto the patch grid.
pub fn resize_to_grid<T: Scalar>(emb: &IntermediateEmbeddings<T>, grid: &PatchGridSpec) -> [Fmap<T>; NECK_STAGES] {
    let [rows, cols] = grid.shape();
    std::array::from_fn(|i| ops::resize_bilinear(&emb.maps[i], rows, cols))
}

/// Spatial mean of `F'_5`.
pub fn pool_image_embedding<T: Scalar>(f5: &Fmap<T>) -> Vec<T> {
    ops::global_mean(f5)
}

/// Fusion of the four stage embeddings at each grid position.
#[derive(Clone, Debug)]
pub enum FusionHead {
    Mea { mlp0: Linear, mlp1: Linear, mlp2: Linear },
    Add { mlp2: Linear },
    Concat { proj: Linear },
}

#[derive(Clone, Debug)]
pub struct FusionCache<T> {
    rows: usize,
    /// Stage embeddings, each `rows x d`.
    e: Vec<Vec<T>>,
    /// MEA only: hidden activations of `MLP_0` per stage, concatenated `rows x 2d`.
    cat: Vec<T>,
    /// MEA only: attention weights `rows x 4`.
    weights: Vec<T>,
    /// Input to the final projection.
    mixed: Vec<T>,
}

impl FusionHead {
    pub fn new(b: &mut ParamBuilder, fusion: Fusion, d: usize) -> Self {
        match fusion {
            Fusion::Mea => FusionHead::Mea {
                mlp0: Linear::new(b, d, d / 2),
                mlp1: Linear::new(b, NECK_STAGES * (d / 2), NECK_STAGES),
                mlp2: Linear::new(b, d, d),
            },
            Fusion::Add => FusionHead::Add {
                mlp2: Linear::new(b, d, d),
            },
            Fusion::Concat => FusionHead::Concat {
                proj: Linear::new(b, NECK_STAGES * d, d),
            },
        }
    }

    pub fn kind(&self) -> Fusion {
        match self {
            FusionHead::Mea { .. } => Fusion::Mea,
            FusionHead::Add { .. } => Fusion::Add,
            FusionHead::Concat { .. } => Fusion::Concat,
        }
    }

    /// Fuses `e[n]` (each `rows x d`). Returns `z^P` rows and, for MEA, the
    /// attention weights (`rows x 4`).
    pub fn forward<T: Scalar>(&self, params: &[T], e: Vec<Vec<T>>, rows: usize) -> (Vec<T>, FusionCache<T>) {
        assert_eq!(e.len(), NECK_STAGES);
        let d = e[0].len() / rows.max(1);
        match self {
            FusionHead::Mea { mlp0, mlp1, mlp2 } => {
                let half = mlp0.output;
                let mut cat = vec![T::zero(); rows * NECK_STAGES * half];
                for (n, en) in e.iter().enumerate() {
                    let mut h = mlp0.forward(params, en, rows);
                    ops::relu_inplace(&mut h);
                    for r in 0..rows {
                        let dst = (r * NECK_STAGES + n) * half;
                        cat[dst..dst + half].copy_from_slice(&h[r * half..(r + 1) * half]);
                    }
                }
                let logits = mlp1.forward(params, &cat, rows);
                let weights = ops::softmax_rows(&logits, NECK_STAGES);
                let mut mixed = vec![T::zero(); rows * d];
                for r in 0..rows {
                    for (n, en) in e.iter().enumerate() {
                        let scale = T::one() + weights[r * NECK_STAGES + n];
                        for k in 0..d {
                            mixed[r * d + k] += scale * en[r * d + k];
                        }
                    }
                }
                let z = mlp2.forward(params, &mixed, rows);
                (
                    z,
                    FusionCache {
                        rows,
                        e,
                        cat,
                        weights,
                        mixed,
                    },
                )
            }
            FusionHead::Add { mlp2 } => {
                let mut mixed = vec![T::zero(); rows * d];
                for en in &e {
                    for (m, &v) in mixed.iter_mut().zip(en) {
                        *m += v;
                    }
                }
                let z = mlp2.forward(params, &mixed, rows);
                (
                    z,
                    FusionCache {
                        rows,
                        e,
                        cat: Vec::new(),
                        weights: Vec::new(),
                        mixed,
                    },
                )
            }
            FusionHead::Concat { proj } => {
                let mut mixed = vec![T::zero(); rows * NECK_STAGES * d];
                for (n, en) in e.iter().enumerate() {
                    for r in 0..rows {
                        let dst = (r * NECK_STAGES + n) * d;
                        mixed[dst..dst + d].copy_from_slice(&en[r * d..(r + 1) * d]);
                    }
                }
                let z = proj.forward(params, &mixed, rows);
                (
                    z,
                    FusionCache {
                        rows,
                        e,
                        cat: Vec::new(),
                        weights: Vec::new(),
                        mixed,
                    },
                )
            }
        }
    }

    pub fn attention_weights<'a, T>(&self, cache: &'a FusionCache<T>) -> Option<&'a [T]> {
        matches!(self, FusionHead::Mea { .. }).then_some(cache.weights.as_slice())
    }

    /// Returns gradients w.r.t. each stage embedding.
    pub fn backward<T: Scalar>(&self, params: &[T], cache: &FusionCache<T>, dz: &[T], grads: &mut [T]) -> Vec<Vec<T>> {
        let rows = cache.rows;
        let d = cache.e[0].len() / rows.max(1);
        match self {
            FusionHead::Mea { mlp0, mlp1, mlp2 } => {
                let dmixed = mlp2
                    .backward(params, &cache.mixed, dz, rows, grads, true)
                    .expect("input grad");
                let mut de: Vec<Vec<T>> = vec![vec![T::zero(); rows * d]; NECK_STAGES];
                let mut dw = vec![T::zero(); rows * NECK_STAGES];
                for r in 0..rows {
                    for n in 0..NECK_STAGES {
                        let scale = T::one() + cache.weights[r * NECK_STAGES + n];
                        let mut dot = T::zero();
                        for k in 0..d {
                            let g = dmixed[r * d + k];
                            de[n][r * d + k] = scale * g;
                            dot += g * cache.e[n][r * d + k];
                        }
                        dw[r * NECK_STAGES + n] = dot;
                    }
                }
                let dlogits = ops::softmax_backward(&cache.weights, &dw, NECK_STAGES);
                let mut dcat = mlp1
                    .backward(params, &cache.cat, &dlogits, rows, grads, true)
                    .expect("input grad");
                ops::relu_backward_inplace(&mut dcat, &cache.cat);
                let half = mlp0.output;
                for n in 0..NECK_STAGES {
                    let mut dh = vec![T::zero(); rows * half];
                    for r in 0..rows {
                        let src = (r * NECK_STAGES + n) * half;
                        dh[r * half..(r + 1) * half].copy_from_slice(&dcat[src..src + half]);
                    }
                    let dx = mlp0
                        .backward(params, &cache.e[n], &dh, rows, grads, true)
                        .expect("input grad");
                    for (a, b) in de[n].iter_mut().zip(dx) {
                        *a += b;
                    }
                }
                de
            }
            FusionHead::Add { mlp2 } => {
                let dmixed = mlp2
                    .backward(params, &cache.mixed, dz, rows, grads, true)
                    .expect("input grad");
                vec![dmixed; NECK_STAGES]
            }
            FusionHead::Concat { proj } => {
                let dmixed = proj
                    .backward(params, &cache.mixed, dz, rows, grads, true)
                    .expect("input grad");
                (0..NECK_STAGES)
                    .map(|n| {
                        let mut out = vec![T::zero(); rows * d];
                        for r in 0..rows {
                            let src = (r * NECK_STAGES + n) * d;
                            out[r * d..(r + 1) * d].copy_from_slice(&dmixed[src..src + d]);
                        }
                        out
                    })
                    .collect()
            }
        }
    }
}

/// Output of one encoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded<T> {
    pub grid: PatchGridSpec,
    /// Patch embeddings, one row of `d` per grid cell in row-major order.
    pub z_p: Vec<T>,
    pub z_i: Vec<T>,
    /// MEA attention weights per grid cell (`cells x 4`), empty for other fusions.
    pub weights: Vec<T>,
}

impl<T: Scalar> Encoded<T> {
    pub fn embed_dim(&self) -> usize {
        self.z_i.len()
    }

    pub fn patch(&self, linear: usize) -> &[T] {
        let d = self.embed_dim();
        &self.z_p[linear * d..(linear + 1) * d]
    }
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    backbone: BackboneCache<T>,
    rfb: Vec<RfbCache<T>>,
    cascade: CascadeCache<T>,
    stride32: (usize, usize),
    fusion: FusionCache<T>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub backbone: Backbone,
    pub rfb: Vec<RfbLite>,
    pub cascade: Cascade,
    pub fusion: FusionHead,
}

impl Encoder {
    /// Allocates parameters under the groups `backbone`, `rfb`, `cascade` and `fusion`.
    pub fn new(b: &mut ParamBuilder, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let backbone = b.group("backbone", |b| Backbone::new(b, &config));
        let rfb = b.group("rfb", |b| config.widths[1..].iter().map(|&c| RfbLite::new(b, c)).collect());
        let cascade = b.group("cascade", |b| Cascade::new(b, &config));
        let fusion = b.group("fusion", |b| FusionHead::new(b, config.fusion, config.embed_dim));
        Ok(Self {
            config,
            backbone,
            rfb,
            cascade,
            fusion,
        })
    }

    /// Applies the input policy: passes through multiples of 32, otherwise
    /// resizes or rejects.
    pub fn prepare_input<T: Scalar>(&self, image: &Fmap<T>) -> Result<Fmap<T>> {
        if image.channels != self.config.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} channels, got {}",
                self.config.in_channels, image.channels
            )));
        }
        let fits = |n: usize| n >= OUTPUT_STRIDE && n % OUTPUT_STRIDE == 0;
        if fits(image.height) && fits(image.width) {
            return Ok(image.clone());
        }
        match self.config.input_policy {
            InputPolicy::Reject => Err(Error::Shape(format!(
                "input {}x{} is not a multiple of {OUTPUT_STRIDE}",
                image.height, image.width
            ))),
            InputPolicy::Resize => {
                let up = |n: usize| n.div_ceil(OUTPUT_STRIDE).max(1) * OUTPUT_STRIDE;
                Ok(ops::resize_bilinear(image, up(image.height), up(image.width)))
            }
        }
    }

    pub fn enrich<T: Scalar>(&self, params: &[T], features: &MultiScaleFeatures<T>) -> (MultiScaleFeatures<T>, Vec<RfbCache<T>>) {
        let mut caches = Vec::with_capacity(NECK_STAGES);
        let mut outs = Vec::with_capacity(NECK_STAGES);
        for (block, f) in self.rfb.iter().zip(&features.maps) {
            let (y, c) = block.forward(params, f);
            outs.push(y);
            caches.push(c);
        }
        let mut it = outs.into_iter();
        (
            MultiScaleFeatures {
                maps: std::array::from_fn(|_| it.next().unwrap()),
            },
            caches,
        )
    }

    /// Full encoding of one image onto `grid`.
    pub fn forward<T: Scalar>(&self, params: &[T], image: &Fmap<T>, grid: &PatchGridSpec) -> Result<(Encoded<T>, EncoderCache<T>)> {
        let x = self.prepare_input(image)?;
        let (features, backbone) = self.backbone.forward(params, &x);
        let (enriched, rfb) = self.enrich(params, &features);
        let (emb, cascade) = self.cascade.forward(params, &enriched);
        let f5 = &emb.maps[NECK_STAGES - 1];
        let stride32 = (f5.height, f5.width);
        let z_i = pool_image_embedding(f5);
        let resized = resize_to_grid(&emb, grid);
        let cells = grid.patch_count();
        let e: Vec<Vec<T>> = resized.iter().map(Fmap::to_rows).collect();
        let (z_p, fusion) = self.fusion.forward(params, e, cells);
        let weights = self.fusion.attention_weights(&fusion).map(<[T]>::to_vec).unwrap_or_default();
        Ok((
            Encoded {
                grid: *grid,
                z_p,
                z_i,
                weights,
            },
            EncoderCache {
                backbone,
                rfb,
                cascade,
                stride32,
                fusion,
            },
        ))
    }

    pub fn backward<T: Scalar>(&self, params: &[T], cache: &EncoderCache<T>, grid: &PatchGridSpec, dz_p: &[T], dz_i: &[T], grads: &mut [T]) {
        let d = self.config.embed_dim;
        let [rows, cols] = grid.shape();
        let de = self.fusion.backward(params, &cache.fusion, dz_p, grads);
        let (h32, w32) = cache.stride32;
        let mut d_emb: Vec<Fmap<T>> = de
            .iter()
            .map(|g| ops::resize_bilinear_backward(&Fmap::from_rows(d, rows, cols, g), h32, w32))
            .collect();
        d_emb[NECK_STAGES - 1].add_assign(&ops::global_mean_backward(dz_i, h32, w32));
        let mut it = d_emb.into_iter();
        let d_emb = std::array::from_fn(|_| it.next().unwrap());
        let d_enriched = self.cascade.backward(params, &cache.cascade, d_emb, grads);
        let mut d_features = Vec::with_capacity(NECK_STAGES);
        for ((block, c), g) in self.rfb.iter().zip(&cache.rfb).zip(d_enriched) {
            d_features.push(block.backward(params, c, g, grads));
        }
        let mut it = d_features.into_iter();
        let d_features = std::array::from_fn(|_| it.next().unwrap());
        self.backbone.backward(params, &cache.backbone, d_features, grads, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamLayout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(fusion: Fusion) -> EncoderConfig {
        EncoderConfig {
            widths: [4, 4, 6, 6, 8],
            blocks_per_stage: 1,
            embed_dim: 8,
            fusion,
            ..EncoderConfig::default()
        }
    }

    fn build(cfg: EncoderConfig, seed: u64) -> (Encoder, ParamLayout, Vec<f64>) {
        let mut b = ParamBuilder::new();
        let enc = Encoder::new(&mut b, cfg).unwrap();
        let layout = b.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<f64> = layout.initialize(&mut rng);
        // Nonzero biases so every path carries signal.
        for v in &mut params {
            if *v == 0.0 {
                *v = rng.random_range(-0.05..0.05);
            }
        }
        (enc, layout, params)
    }

    fn image(h: usize, w: usize, seed: u64) -> Fmap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Fmap::from_vec(1, h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn stage_shapes_at_96() {
        let (enc, _, params) = build(small_config(Fusion::Mea), 1);
        let x = image(96, 96, 2);
        let (f, _) = enc.backbone.forward(&params, &x);
        let sides: Vec<_> = f.maps.iter().map(|m| (m.height, m.width)).collect();
        assert_eq!(sides, vec![(24, 24), (12, 12), (6, 6), (3, 3)]);
        let (emb, _) = enc.cascade.forward(&params, &f);
        for m in &emb.maps {
            assert_eq!(m.shape(), (8, 3, 3));
        }
    }

    #[test]
    fn grid_embeddings_at_384() {
        let mut cfg = small_config(Fusion::Mea);
        cfg.widths = [2, 2, 2, 2, 2];
        let (enc, _, params) = build(cfg, 3);
        let x = image(384, 384, 4);
        let grid = PatchGridSpec::new([384, 384], 32).unwrap();
        let (out, _) = enc.forward(&params, &x, &grid).unwrap();
        assert_eq!(out.z_p.len(), 144 * 8);
        assert_eq!(out.z_i.len(), 8);
        assert_eq!(out.weights.len(), 144 * 4);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let (enc, layout, _) = build(small_config(Fusion::Mea), 5);
        let params = vec![0.0f64; layout.len()];
        let x = image(64, 64, 6);
        let grid = PatchGridSpec::new([64, 64], 16).unwrap();
        let (out, _) = enc.forward(&params, &x, &grid).unwrap();
        assert!(out.z_p.iter().chain(&out.z_i).all(|&v| v == 0.0));
    }

    #[test]
    fn input_policy() {
        let (enc, _, params) = build(small_config(Fusion::Add), 7);
        let grid = PatchGridSpec::new([70, 70], 16).unwrap();
        assert!(matches!(enc.forward(&params, &image(70, 70, 1), &grid), Err(Error::Shape(_))));
        let mut cfg = small_config(Fusion::Add);
        cfg.input_policy = InputPolicy::Resize;
        let (enc, _, params) = build(cfg, 7);
        let (out, _) = enc.forward(&params, &image(70, 70, 1), &grid).unwrap();
        assert_eq!(out.z_p.len(), 25 * 8);
    }

    #[test]
    fn rfb_preserves_size_and_pairs_are_cheaper() {
        let mut b = ParamBuilder::new();
        let rfb = RfbLite::new(&mut b, 16);
        let params: Vec<f64> = b.finish().initialize(&mut ChaCha8Rng::seed_from_u64(8));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Fmap::from_vec(16, 7, 5, (0..16 * 35).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (y, _) = rfb.forward(&params, &x);
        assert_eq!(y.shape(), x.shape());
        let (pair, square) = rfb.asymmetric_pair_weights();
        assert_eq!((pair, square), (6 * 16, 9 * 16));
        assert!(pair < square);
    }

    #[test]
    fn rfb_input_gradient_matches_finite_difference() {
        let mut b = ParamBuilder::new();
        let rfb = RfbLite::new(&mut b, 8);
        let layout = b.finish();
        let params: Vec<f64> = layout.initialize(&mut ChaCha8Rng::seed_from_u64(10));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Fmap::from_vec(8, 6, 6, (0..8 * 36).map(|_| rng.random_range(-1.0..1.0)).collect());
        let r: Vec<f64> = (0..8 * 36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |x: &Fmap<f64>| rfb.forward(&params, x).0.data.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = rfb.forward(&params, &x);
        let mut grads = vec![0.0; layout.len()];
        let dx = rfb.backward(&params, &cache, Fmap::from_vec(8, 6, 6, r.clone()), &mut grads);
        for &i in &[0usize, 37, 100, 200, 287] {
            let mut xp = x.clone();
            xp.data[i] += 1e-6;
            let mut xm = x.clone();
            xm.data[i] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((fd - dx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}: {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn cascade_is_top_down() {
        let (enc, _, params) = build(small_config(Fusion::Mea), 12);
        let x = image(64, 64, 13);
        let (f, _) = enc.backbone.forward(&params, &x);
        let (base, _) = enc.cascade.forward(&params, &f);
        let mut zeroed = f.clone();
        zeroed.maps[0].data.iter_mut().for_each(|v| *v = 0.0);
        let (ablated, _) = enc.cascade.forward(&params, &zeroed);
        assert_ne!(ablated.maps[0], base.maps[0]);
        assert_eq!(ablated.maps[3], base.maps[3]);
        assert_eq!(ablated.maps[2], base.maps[2]);
    }

    #[test]
    fn mea_weights_lie_on_simplex() {
        let (enc, _, params) = build(small_config(Fusion::Mea), 14);
        let grid = PatchGridSpec::new([64, 64], 8).unwrap();
        let (out, _) = enc.forward(&params, &image(64, 64, 15), &grid).unwrap();
        for w in out.weights.chunks(4) {
            assert!(w.iter().all(|&v| v > 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mea_with_forced_one_hot_weight() {
        // Zero MLP_1 weights, one large bias: attention collapses onto stage 3
        // and z = MLP_2(sum e + e_3).
        let d = 4;
        let mut b = ParamBuilder::new();
        let head = FusionHead::new(&mut b, Fusion::Mea, d);
        let layout = b.finish();
        let mut params: Vec<f64> = layout.initialize(&mut ChaCha8Rng::seed_from_u64(16));
        let FusionHead::Mea { mlp1, mlp2, .. } = &head else { unreachable!() };
        params[mlp1.weight.range()].iter_mut().for_each(|v| *v = 0.0);
        let bias = mlp1.bias.of_mut(&mut params);
        bias.copy_from_slice(&[0.0, 0.0, 60.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let e: Vec<Vec<f64>> = (0..4).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let (z, cache) = head.forward(&params, e.clone(), 1);
        let w = head.attention_weights(&cache).unwrap();
        assert!((w[2] - 1.0).abs() < 1e-12);
        let mixed: Vec<f64> = (0..d).map(|k| e.iter().map(|en| en[k]).sum::<f64>() + e[2][k]).collect();
        let expect = mlp2.forward(&params, &mixed, 1);
        for (a, b) in z.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn fusion_gradients_match_finite_difference() {
        for fusion in [Fusion::Mea, Fusion::Add, Fusion::Concat] {
            let d = 6;
            let rows = 3;
            let mut b = ParamBuilder::new();
            let head = FusionHead::new(&mut b, fusion, d);
            let layout = b.finish();
            let params: Vec<f64> = layout.initialize(&mut ChaCha8Rng::seed_from_u64(18));
            let mut rng = ChaCha8Rng::seed_from_u64(19);
            let e: Vec<Vec<f64>> = (0..4).map(|_| (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let r: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |p: &[f64], e: &Vec<Vec<f64>>| head.forward(p, e.clone(), rows).0.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
            let (_, cache) = head.forward(&params, e.clone(), rows);
            let mut grads = vec![0.0; layout.len()];
            let de = head.backward(&params, &cache, &r, &mut grads);
            let h = 1e-6;
            for i in 0..layout.len() {
                let mut pp = params.clone();
                pp[i] += h;
                let mut pm = params.clone();
                pm[i] -= h;
                let fd = (loss(&pp, &e) - loss(&pm, &e)) / (2.0 * h);
                assert!((fd - grads[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fusion:?} param {i}: {fd} vs {}", grads[i]);
            }
            for n in 0..4 {
                for k in [0, 7, 17] {
                    let mut ep = e.clone();
                    ep[n][k] += h;
                    let mut em = e.clone();
                    em[n][k] -= h;
                    let fd = (loss(&params, &ep) - loss(&params, &em)) / (2.0 * h);
                    assert!((fd - de[n][k]).abs() < 1e-6 * (1.0 + fd.abs()), "{fusion:?} e[{n}][{k}]");
                }
            }
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_difference() {
        let (enc, layout, params) = build(small_config(Fusion::Mea), 20);
        let x = image(64, 64, 21);
        let grid = PatchGridSpec::new([64, 64], 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let rp: Vec<f64> = (0..16 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ri: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &[f64]| {
            let (out, _) = enc.forward(p, &x, &grid).unwrap();
            out.z_p.iter().zip(&rp).map(|(a, b)| a * b).sum::<f64>() + out.z_i.iter().zip(&ri).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = enc.forward(&params, &x, &grid).unwrap();
        let mut grads = vec![0.0; layout.len()];
        enc.backward(&params, &cache, &grid, &rp, &ri, &mut grads);
        let h = 1e-6;
        for group in layout.groups() {
            let range = group.range.clone();
            // Random coordinates within each group plus a random direction over it.
            for _ in 0..6 {
                let i = rng.random_range(range.clone());
                let mut pp = params.clone();
                pp[i] += h;
                let mut pm = params.clone();
                pm[i] -= h;
                let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
                assert!((fd - grads[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{} param {i}: {fd} vs {}", group.name, grads[i]);
            }
            let dir: Vec<f64> = range.clone().map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut pp = params.clone();
            let mut pm = params.clone();
            for (k, i) in range.clone().enumerate() {
                pp[i] += h * dir[k];
                pm[i] -= h * dir[k];
            }
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
            let an: f64 = range.clone().enumerate().map(|(k, i)| grads[i] * dir[k]).sum();
            assert!((fd - an).abs() < 1e-5 * (1.0 + fd.abs()), "{} direction: {fd} vs {an}", group.name);
        }
    }

    #[test]
    fn image_embedding_is_spatial_mean() {
        let f = Fmap::from_vec(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, -1.0, -1.0, 1.0, 1.0]);
        assert_eq!(pool_image_embedding(&f), vec![2.5, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let (enc, _, params) = build(small_config(Fusion::Mea), 23);
        let x = image(64, 64, 24);
        let grid = PatchGridSpec::new([64, 64], 16).unwrap();
        let a = enc.forward(&params, &x, &grid).unwrap().0;
        let b = enc.forward(&params, &x, &grid).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn groups_are_registered() {
        let (_, layout, _) = build(small_config(Fusion::Concat), 25);
        let names: Vec<_> = layout.groups().iter().map(|g| g.name.as_str()).collect();
        assert_eq!(names, ["backbone", "rfb", "cascade", "fusion"]);
    }
}
