//! Synthetic corpus generation, manifests and splits.
//!
//! Corpus layout on disk:
//!
//! ```text
//! <root>/manifest.json
//! <root>/images/NNNN.png
//! <root>/masks/NNNN.png
//! <root>/points/NNNN.txt      (written by `sample_corpus_points`)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::axis_to_normalized;
use crate::raster::{GrayImage, LabelMask};
use crate::rng::{derive_seed, item_seed, Rng};
use crate::sampling::{read_points, sample_points, write_points, OccupancySample, PointSetMeta, SamplingConfig};

/// Smallest accepted foreground area per image, in pixels.
pub const MIN_FOREGROUND: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusSpec {
    pub n_images: usize,
    /// Square side in pixels.
    pub size: usize,
    /// Foreground classes (1 or 2).
    pub classes: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            n_images: 200,
            size: 96,
            classes: 1,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images < 5 {
            return Err(Error::Config("a corpus needs at least 5 images to fill three splits".into()));
        }
        if self.size < 32 {
            return Err(Error::Config("image size must be at least 32".into()));
        }
        if !(1..=2).contains(&self.classes) {
            return Err(Error::Config("foreground classes must be 1 or 2".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ellipse with a sinusoidal radial perturbation, in normalized coordinates.
///
/// A point is inside when `rho <= 1 + amplitude * sin(lobes * psi + phase)`,
/// where `(rho, psi)` are polar coordinates in the ellipse's unit frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub class: u8,
    /// `(row, col)` center.
    pub center: [f64; 2],
    /// Semi-axes along the rotated row and column directions.
    pub axes: [f64; 2],
    pub angle: f64,
    pub amplitude: f64,
    pub lobes: u32,
    pub phase: f64,
}

impl Shape {
    /// Signed level: negative inside, zero on the outline, in units of the
    /// shorter semi-axis.
    pub fn level(&self, p: [f64; 2]) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dr = p[0] - self.center[0];
        let dc = p[1] - self.center[1];
        let u = (c * dr + s * dc) / self.axes[0];
        let v = (-s * dr + c * dc) / self.axes[1];
        let rho = u.hypot(v);
        let psi = v.atan2(u);
        let bound = 1.0 + self.amplitude * (self.lobes as f64 * psi + self.phase).sin();
        (rho - bound) * self.axes[0].min(self.axes[1])
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.level(p) <= 0.0
    }
}

/// Labels of pixel centers at the given resolution; later shapes paint over
/// earlier ones.
pub fn rasterize(shapes: &[Shape], height: usize, width: usize) -> LabelMask {
    let rows: Vec<f64> = (0..height).map(|r| axis_to_normalized(r, height).unwrap()).collect();
    let cols: Vec<f64> = (0..width).map(|c| axis_to_normalized(c, width).unwrap()).collect();
    LabelMask::from_fn(height, width, |r, c| {
        shapes
            .iter()
            .rev()
            .find(|s| s.contains([rows[r], cols[c]]))
            .map_or(0, |s| s.class)
    })
}

fn random_shape(rng: &mut Rng, class: u8, size: usize) -> Shape {
    let px = 2.0 / size as f64;
    Shape {
        class,
        center: [rng.random_range(-0.45..0.45), rng.random_range(-0.45..0.45)],
        axes: [rng.random_range(10.0..28.0) * px, rng.random_range(10.0..28.0) * px],
        angle: rng.random_range(0.0..std::f64::consts::PI),
        amplitude: rng.random_range(0.05..0.25),
        lobes: rng.random_range(2..=4),
        phase: rng.random_range(0.0..std::f64::consts::TAU),
    }
}

/// Sum of three random plane waves, roughly in `[-1, 1]`.
struct Texture {
    waves: [(f64, f64, f64); 3],
}

impl Texture {
    fn new(rng: &mut Rng, freq: std::ops::Range<f64>) -> Self {
        Self {
            waves: std::array::from_fn(|_| {
                let f = rng.random_range(freq.clone());
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                (f * a.cos(), f * a.sin(), rng.random_range(0.0..std::f64::consts::TAU))
            }),
        }
    }

    fn at(&self, p: [f64; 2]) -> f64 {
        self.waves.iter().map(|(fr, fc, ph)| (fr * p[0] + fc * p[1] + ph).sin()).sum::<f64>() / 3.0
    }
}

/// One generated image with its exact mask and generating shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub image: GrayImage,
    pub mask: LabelMask,
    pub shapes: Vec<Shape>,
}

/// Deterministic generation of image `id`; regenerates until every class
/// covers at least [`MIN_FOREGROUND`] pixels.
pub fn synthesize(spec: &SyntheticCorpusSpec, id: usize) -> SyntheticImage {
    let mut rng = Rng::seed_from_u64(item_seed(derive_seed(spec.seed, "corpus"), id as u64));
    let n = spec.size;
    loop {
        let shapes: Vec<Shape> = (1..=spec.classes as u8).map(|c| random_shape(&mut rng, c, n)).collect();
        let mask = rasterize(&shapes, n, n);
        if (1..=spec.classes as u8).any(|c| mask.count(c) < MIN_FOREGROUND) {
            continue;
        }
        let background = rng.random_range(0.15..0.35);
        let contrast: Vec<f64> = (0..spec.classes).map(|k| rng.random_range(0.25..0.4) * (1.0 + 0.5 * k as f64)).collect();
        let bg_tex = Texture::new(&mut rng, 2.0..5.0);
        let fg_tex = Texture::new(&mut rng, 8.0..14.0);
        let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite noise");
        // Edge softness in pixels.
        let edge = 0.6 * 2.0 / n as f64;
        let mut data = Vec::with_capacity(n * n);
        for r in 0..n {
            let pr = axis_to_normalized(r, n).unwrap();
            for c in 0..n {
                let p = [pr, axis_to_normalized(c, n).unwrap()];
                let mut v = background + 0.06 * bg_tex.at(p);
                for s in &shapes {
                    let w = 1.0 / (1.0 + (s.level(p) / edge).exp());
                    let fg = contrast[s.class as usize - 1] + 0.06 * fg_tex.at(p);
                    v += w * fg;
                }
                if spec.noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        let image = GrayImage::from_vec(n, n, data).expect("square image").quantized();
        return SyntheticImage { image, mask, shapes };
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (train, val, test)")))
    }
}

/// Ids ranked by a seeded hash, cut 60:20:20 (rounded; test takes the rest).
pub fn assign_splits(ids: &[usize], seed: u64) -> BTreeMap<Split, Vec<usize>> {
    let key = derive_seed(seed, "split");
    let mut ranked: Vec<usize> = ids.to_vec();
    ranked.sort_by_key(|&id| (item_seed(key, id as u64), id));
    let n = ranked.len();
    let train = (0.6 * n as f64).round() as usize;
    let val = ((0.2 * n as f64).round() as usize).min(n - train);
    let mut out = BTreeMap::new();
    let mut test = ranked.split_off(train + val);
    let mut val_ids = ranked.split_off(train);
    ranked.sort_unstable();
    val_ids.sort_unstable();
    test.sort_unstable();
    out.insert(Split::Train, ranked);
    out.insert(Split::Val, val_ids);
    out.insert(Split::Test, test);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    /// Paths relative to the corpus root.
    pub image: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<String>,
    /// Generating shapes, for rasterizing ground truth at other resolutions.
    #[serde(default)]
    pub shapes: Vec<Shape>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Classes including background.
    pub classes: usize,
    pub entries: Vec<ManifestEntry>,
    pub splits: BTreeMap<Split, Vec<usize>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    /// Structural checks: splits disjoint, exhaustive and non-empty.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<usize, Split> = BTreeMap::new();
        let known: BTreeMap<usize, ()> = self.entries.iter().map(|e| (e.id, ())).collect();
        if known.len() != self.entries.len() {
            return Err(Error::Validation("duplicate entry ids".into()));
        }
        for split in Split::ALL {
            let ids = self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[]);
            if ids.is_empty() {
                return Err(Error::Validation(format!("split {} is empty", split.name())));
            }
            for &id in ids {
                if !known.contains_key(&id) {
                    return Err(Error::Validation(format!("split {} names unknown id {id}", split.name())));
                }
                if let Some(prev) = seen.insert(id, split) {
                    return Err(Error::Validation(format!(
                        "id {id} appears in both {} and {}",
                        prev.name(),
                        split.name()
                    )));
                }
            }
        }
        let missing: Vec<usize> = known.keys().filter(|id| !seen.contains_key(id)).copied().collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!("ids without a split: {missing:?}")));
        }
        Ok(())
    }

    /// Lists every referenced file that does not exist under `root`.
    pub fn validate_files(&self, root: &Path) -> Result<()> {
        let mut missing = Vec::new();
        for e in &self.entries {
            for rel in [Some(&e.image), Some(&e.mask), e.points.as_ref()].into_iter().flatten() {
                let p = root.join(rel);
                if !p.is_file() {
                    missing.push(p.display().to_string());
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!("missing files:\n  {}", missing.join("\n  "))))
        }
    }

    pub fn entry(&self, id: usize) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn split(&self, split: Split) -> &[usize] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// Parses and structurally validates a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }
}

fn stem(id: usize) -> String {
    format!("{id:04}")
}

/// Writes the corpus under `root` and returns its manifest.
pub fn generate_corpus(spec: &SyntheticCorpusSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    for sub in ["images", "masks", "points"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::with_capacity(spec.n_images);
    for id in 0..spec.n_images {
        let item = synthesize(spec, id);
        let image = format!("images/{}.png", stem(id));
        let mask = format!("masks/{}.png", stem(id));
        item.image.save_png(&root.join(&image))?;
        item.mask.save_png(&root.join(&mask))?;
        entries.push(ManifestEntry {
            id,
            image,
            mask,
            points: None,
            shapes: item.shapes,
        });
    }
    let ids: Vec<usize> = (0..spec.n_images).collect();
    let manifest = DatasetManifest {
        seed: spec.seed,
        height: spec.size,
        width: spec.size,
        classes: spec.classes + 1,
        entries,
        splits: assign_splits(&ids, spec.seed),
    };
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Samples point files for every image and records them in the manifest.
pub fn sample_corpus_points(root: &Path, cfg: &SamplingConfig) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let mut manifest = DatasetManifest::load(&path)?;
    let dir = root.join("points");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut cfg = cfg.clone();
    cfg.classes = manifest.classes;
    for e in &mut manifest.entries {
        let mask = LabelMask::load_png(&root.join(&e.mask))?;
        let item_cfg = cfg.for_image(e.id as u64);
        let (points, report) = sample_points(&mask, &item_cfg)?;
        for w in &report.warnings {
            log::warn!("image {}: {w}", e.id);
        }
        let rel = format!("points/{}.txt", stem(e.id));
        let meta = PointSetMeta {
            config: item_cfg,
            count: points.len(),
            report,
        };
        write_points(&root.join(&rel), &points, &meta)?;
        e.points = Some(rel);
    }
    manifest.save(&path)?;
    Ok(manifest)
}

/// One loaded corpus item.
#[derive(Clone, Debug)]
pub struct Item {
    pub id: usize,
    pub image: GrayImage,
    pub mask: LabelMask,
    pub shapes: Vec<Shape>,
    /// `None` when the point file is absent.
    pub points: Option<Vec<OccupancySample>>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub items: Vec<Item>,
}

impl Corpus {
    /// Loads every image, mask and (when present) point file.
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&root.join(MANIFEST_FILE))?;
        let mut items = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let points = match &e.points {
                Some(rel) if root.join(rel).is_file() => Some(read_points(&root.join(rel))?),
                Some(rel) => {
                    log::warn!("image {}: point file {rel} is missing", e.id);
                    None
                }
                None => None,
            };
            items.push(Item {
                id: e.id,
                image: GrayImage::load_png(&root.join(&e.image))?,
                mask: LabelMask::load_png(&root.join(&e.mask))?,
                shapes: e.shapes.clone(),
                points,
            });
        }
        Ok(Self { manifest, items })
    }

    /// Generates the corpus in memory, sampling points with `sampling`.
    pub fn synthesize(spec: &SyntheticCorpusSpec, sampling: &SamplingConfig) -> Result<Self> {
        spec.validate()?;
        let mut sampling = sampling.clone();
        sampling.classes = spec.classes + 1;
        let mut items = Vec::with_capacity(spec.n_images);
        let mut entries = Vec::with_capacity(spec.n_images);
        for id in 0..spec.n_images {
            let s = synthesize(spec, id);
            let (points, _) = sample_points(&s.mask, &sampling.for_image(id as u64))?;
            entries.push(ManifestEntry {
                id,
                image: format!("images/{}.png", stem(id)),
                mask: format!("masks/{}.png", stem(id)),
                points: Some(format!("points/{}.txt", stem(id))),
                shapes: s.shapes.clone(),
            });
            items.push(Item {
                id,
                image: s.image,
                mask: s.mask,
                shapes: s.shapes,
                points: Some(points),
            });
        }
        let ids: Vec<usize> = (0..spec.n_images).collect();
        let manifest = DatasetManifest {
            seed: spec.seed,
            height: spec.size,
            width: spec.size,
            classes: spec.classes + 1,
            entries,
            splits: assign_splits(&ids, spec.seed),
        };
        Ok(Self { manifest, items })
    }

    pub fn item(&self, id: usize) -> Option<&Item> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn split(&self, split: Split) -> Vec<&Item> {
        self.manifest.split(split).iter().filter_map(|&id| self.item(id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            n_images: n,
            seed: 9,
            ..SyntheticCorpusSpec::default()
        }
    }

    #[test]
    fn split_sizes() {
        let count = |n: usize| {
            let s = assign_splits(&(0..n).collect::<Vec<_>>(), 1);
            Split::ALL.map(|k| s[&k].len())
        };
        assert_eq!(count(200), [120, 40, 40]);
        assert_eq!(count(10), [6, 2, 2]);
        assert_eq!(count(5), [3, 1, 1]);
    }

    #[test]
    fn split_assignment_ignores_input_order() {
        let a = assign_splits(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9], 4);
        let b = assign_splits(&[9, 3, 1, 7, 0, 2, 8, 4, 6, 5], 4);
        assert_eq!(a, b);
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let s = spec(6);
        for id in 0..6 {
            let a = synthesize(&s, id);
            assert_eq!(a, synthesize(&s, id));
            assert!(a.mask.count(1) >= MIN_FOREGROUND);
            assert!(a.mask.max_label() <= 1);
            assert_eq!(rasterize(&a.shapes, 96, 96), a.mask);
        }
        let two = SyntheticCorpusSpec { classes: 2, ..spec(4) };
        for id in 0..4 {
            let a = synthesize(&two, id);
            assert!(a.mask.count(2) >= MIN_FOREGROUND && a.mask.count(1) >= MIN_FOREGROUND);
            assert!(a.mask.max_label() <= 2);
        }
    }

    #[test]
    fn image_intensity_tracks_mask() {
        let a = synthesize(&spec(1), 0);
        let mean = |class: u8| {
            let v: Vec<f32> = a.image.data.iter().zip(&a.mask.data).filter(|(_, &m)| m == class).map(|(&v, _)| v).collect();
            v.iter().sum::<f32>() / v.len() as f32
        };
        assert!(mean(1) > mean(0) + 0.15);
    }

    #[test]
    fn disk_rasterizes_symmetrically() {
        let disk = Shape {
            class: 1,
            center: [0.0, 0.0],
            axes: [0.5, 0.5],
            angle: 0.0,
            amplitude: 0.0,
            lobes: 2,
            phase: 0.0,
        };
        let m = rasterize(&[disk], 40, 40);
        for r in 0..40 {
            for c in 0..40 {
                assert_eq!(m.get(r, c), m.get(39 - r, c));
                assert_eq!(m.get(r, c), m.get(c, r));
            }
        }
        let area = m.count(1) as f64;
        assert!((area - std::f64::consts::PI * 100.0).abs() < 20.0);
    }

    #[test]
    fn corpus_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let s = SyntheticCorpusSpec { n_images: 5, size: 64, ..spec(5) };
        let m = generate_corpus(&s, dir.path()).unwrap();
        assert_eq!(DatasetManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
        m.validate_files(dir.path()).unwrap();
        let cfg = SamplingConfig {
            n_background: 50,
            n_foreground_per_class: 30,
            ..SamplingConfig::default()
        };
        let m = sample_corpus_points(dir.path(), &cfg).unwrap();
        m.validate_files(dir.path()).unwrap();
        let corpus = Corpus::load(dir.path()).unwrap();
        assert_eq!(corpus.items.len(), 5);
        let item = corpus.item(3).unwrap();
        assert_eq!(item.points.as_ref().unwrap().len(), 80);
        assert_eq!(item.image, synthesize(&s, 3).image);

        fs::remove_file(dir.path().join("masks/0002.png")).unwrap();
        fs::remove_file(dir.path().join("points/0004.txt")).unwrap();
        let Err(Error::Validation(msg)) = m.validate_files(dir.path()) else { panic!() };
        assert!(msg.contains("0002.png") && msg.contains("0004.txt"));
    }

    #[test]
    fn manifest_validation() {
        let c = Corpus::synthesize(
            &SyntheticCorpusSpec { n_images: 5, size: 32, ..spec(5) },
            &SamplingConfig { n_background: 10, n_foreground_per_class: 10, ..SamplingConfig::default() },
        )
        .unwrap();
        c.manifest.validate().unwrap();
        let mut overlap = c.manifest.clone();
        let first = overlap.splits[&Split::Train][0];
        overlap.splits.get_mut(&Split::Test).unwrap().push(first);
        assert!(matches!(overlap.validate(), Err(Error::Validation(m)) if m.contains("both")));
        let mut empty = c.manifest.clone();
        empty.splits.insert(Split::Val, vec![]);
        assert!(matches!(empty.validate(), Err(Error::Validation(m)) if m.contains("val")));
    }

    #[test]
    fn malformed_manifest_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        fs::write(&path, "{\n  \"seed\": 1,\n  \"height\": oops\n}").unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Parse { line: 3, .. })));
    }
}
