//! The full network: encoder plus patch and image decoders over one flat
//! parameter vector, the per-image training objective, and checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, ImageDecoder, PatchDecoder, PatchQuery};
use crate::encoder::{Encoded, Encoder, EncoderConfig, Fusion};
use crate::error::{Error, Result};
use crate::geometry::{NormalizedCoordinate, PatchGridSpec, PatchIndex};
use crate::loss::{embedding_reg, embedding_reg_backward, occ_with_grad, total_loss, LossBreakdown, LossConfig};
use crate::nn::{Fmap, ParamBuilder, ParamLayout, Scalar};
use crate::rng::{derive_seed, Rng};
use crate::sampling::OccupancySample;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Patch side `S` in pixels.
    pub patch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            patch_size: 32,
        }
    }
}

impl ModelConfig {
    /// Reduced widths that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                widths: [8, 16, 24, 32, 48],
                blocks_per_stage: 1,
                embed_dim: 32,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                patch_hidden: vec![64, 64, 64],
                image_hidden: vec![64, 32],
                ..DecoderConfig::default()
            },
            patch_size: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.patch_size == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        Ok(())
    }
}

/// Description of the initialization, recorded with checkpoints.
pub const INIT_SCHEME: &str = "uniform(+-sqrt(6/fan_in)) weights, zero biases";

#[derive(Clone, Debug)]
pub struct SwipeModel {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub encoder: Encoder,
    pub patch_decoder: PatchDecoder,
    pub image_decoder: ImageDecoder,
}

/// One point's decode through a neighboring cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpoDraw {
    /// Index into the image's point batch.
    pub point: usize,
    pub neighbor: PatchIndex<2>,
}

impl SwipeModel {
    /// Parameter groups: `backbone`, `rfb`, `cascade`, `fusion`,
    /// `patch_decoder`, `image_decoder`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.embed_dim;
        let mut b = ParamBuilder::new();
        let encoder = Encoder::new(&mut b, config.encoder.clone())?;
        let patch_decoder = b.group("patch_decoder", |b| PatchDecoder::new(b, &config.decoder, d))?;
        let image_decoder = b.group("image_decoder", |b| ImageDecoder::new(b, &config.decoder, d))?;
        Ok(Self {
            layout: b.finish(),
            config,
            encoder,
            patch_decoder,
            image_decoder,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    pub fn classes(&self) -> usize {
        self.config.decoder.classes
    }

    pub fn embed_dim(&self) -> usize {
        self.config.encoder.embed_dim
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut rng = Rng::seed_from_u64(derive_seed(seed, "init"));
        self.layout.initialize(&mut rng)
    }

    pub fn grid_for(&self, height: usize, width: usize) -> Result<PatchGridSpec> {
        PatchGridSpec::new([height, width], self.config.patch_size)
    }

    pub fn encode<T: Scalar>(&self, params: &[T], image: &Fmap<T>) -> Result<Encoded<T>> {
        let grid = self.grid_for(image.height, image.width)?;
        Ok(self.encoder.forward(params, image, &grid)?.0)
    }

    /// `D^P` probabilities (`points x C`) for image-space coordinates, each
    /// decoded by the cell that contains it.
    pub fn predict_patch<T: Scalar>(&self, params: &[T], enc: &Encoded<T>, points: &[NormalizedCoordinate]) -> Vec<T> {
        let queries: Vec<PatchQuery> = points
            .iter()
            .map(|&p| self.patch_decoder.query(p, p, &enc.grid))
            .collect();
        let x = self.patch_decoder.assemble(&queries, enc);
        self.patch_decoder.net.infer(params, &x, queries.len())
    }

    /// `D^I` probabilities (`points x C`).
    pub fn predict_image<T: Scalar>(&self, params: &[T], enc: &Encoded<T>, points: &[NormalizedCoordinate]) -> Vec<T> {
        let x = self.image_decoder.assemble(points, &enc.z_i);
        self.image_decoder.net.infer(params, &x, points.len())
    }

    /// Objective for one image and the gradient of `scale * total` added into
    /// `grads`.
    pub fn loss_and_grad<T: Scalar>(
        &self,
        params: &[T],
        image: &Fmap<T>,
        points: &[OccupancySample],
        spo: &[SpoDraw],
        cfg: &LossConfig,
        scale: T,
        grads: &mut [T],
    ) -> Result<LossBreakdown> {
        if points.is_empty() {
            return Err(Error::Empty("no points for image".into()));
        }
        let grid = self.grid_for(image.height, image.width)?;
        let (enc, cache) = self.encoder.forward(params, image, &grid)?;
        let d = self.embed_dim();
        let classes = self.classes();
        let pd = &self.patch_decoder;

        // D^P rows: own-cell queries first, then overreach queries.
        let mut queries: Vec<PatchQuery> = points.iter().map(|s| pd.query(s.p_i, s.p_s, &grid)).collect();
        let own = queries.len();
        queries.extend(spo.iter().map(|draw| {
            let s = &points[draw.point];
            pd.query_cell(s.p_i, s.p_s, draw.neighbor, &grid)
        }));
        let targets: Vec<u8> = points.iter().map(|s| s.class).collect();
        let spo_targets: Vec<u8> = spo.iter().map(|draw| points[draw.point].class).collect();

        let alpha = T::from_f64_lossy(cfg.alpha);
        let beta = T::from_f64_lossy(cfg.beta);
        let x = pd.assemble(&queries, &enc);
        let (probs, pcache) = pd.net.forward(params, x, queries.len());
        let (own_probs, spo_probs) = probs.split_at(own * classes);
        let (l_patch, mut dprobs) = occ_with_grad(&targets, own_probs, classes, scale * alpha);
        let (l_spo, d_spo) = occ_with_grad(&spo_targets, spo_probs, classes, scale * beta);
        dprobs.extend(d_spo);

        let p_i: Vec<NormalizedCoordinate> = points.iter().map(|s| s.p_i).collect();
        let xi = self.image_decoder.assemble(&p_i, &enc.z_i);
        let (iprobs, icache) = self.image_decoder.net.forward(params, xi, own);
        let (l_image, diprobs) = occ_with_grad(&targets, &iprobs, classes, scale * (T::one() - alpha));

        let own_patches: Vec<usize> = queries[..own].iter().map(|q| q.patch).collect();
        let reg = embedding_reg(&enc.z_p, d, &own_patches, &enc.z_i);
        let breakdown = total_loss(l_patch.as_f64(), l_image.as_f64(), l_spo.as_f64(), reg, cfg);

        let mut dz_p = vec![T::zero(); enc.z_p.len()];
        let mut dz_i = vec![T::zero(); d];
        let dx = pd.net.backward(params, &pcache, &probs, &dprobs, grads);
        pd.scatter_embedding_grads(&dx, &queries, &mut dz_p, &mut dz_i);
        let dxi = self.image_decoder.net.backward(params, &icache, &iprobs, &diprobs, grads);
        self.image_decoder.scatter_embedding_grads(&dxi, &mut dz_i);
        let lambda = T::from_f64_lossy(cfg.lambda);
        embedding_reg_backward(&enc.z_p, d, &own_patches, &enc.z_i, scale * lambda, &mut dz_p, &mut dz_i);
        self.encoder.backward(params, &cache, &grid, &dz_p, &dz_i, grads);
        Ok(breakdown)
    }

    /// Objective only, no gradient.
    pub fn loss<T: Scalar>(&self, params: &[T], image: &Fmap<T>, points: &[OccupancySample], spo: &[SpoDraw], cfg: &LossConfig) -> Result<LossBreakdown> {
        let mut scratch = vec![T::zero(); params.len()];
        self.loss_and_grad(params, image, points, spo, cfg, T::zero(), &mut scratch)
    }
}

/// Metadata stored beside the parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub model: ModelConfig,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub fusion: Fusion,
    pub param_count: usize,
    pub seed: u64,
    pub iterations: usize,
    pub loss: LossConfig,
    pub init: String,
    /// Trainer settings, opaque to this module.
    #[serde(default)]
    pub train: serde_json::Value,
    #[serde(default)]
    pub val_dice: Option<f64>,
}

const MAGIC: &[u8; 4] = b"SWPE";
const FORMAT: u32 = 1;

/// Sidecar path: the checkpoint path with its extension replaced by `json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn new(model: &SwipeModel, params: Vec<f32>, seed: u64, iterations: usize, loss: LossConfig) -> Self {
        Self {
            meta: CheckpointMeta {
                format: FORMAT,
                model: model.config.clone(),
                embed_dim: model.embed_dim(),
                patch_size: model.config.patch_size,
                fusion: model.config.encoder.fusion,
                param_count: params.len(),
                seed,
                iterations,
                loss,
                init: INIT_SCHEME.into(),
                train: serde_json::Value::Null,
                val_dice: None,
            },
            params,
        }
    }

    /// Writes the little-endian parameter container and the JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut buf = Vec::with_capacity(16 + 4 * self.params.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta).expect("metadata serializes");
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Validation(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a parameter container"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT {
            return Err(bad(&format!("unsupported format {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() != 16 + 4 * n || n != meta.param_count {
            return Err(bad("parameter count does not match metadata"));
        }
        let params = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { meta, params })
    }

    /// Rebuilds the model and checks the parameter count.
    pub fn model(&self) -> Result<SwipeModel> {
        let model = SwipeModel::new(self.meta.model.clone())?;
        if model.param_count() != self.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {} parameters, architecture needs {}",
                self.params.len(),
                model.param_count()
            )));
        }
        Ok(model)
    }
}
