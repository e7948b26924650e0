//! Training point sets: stratified, boundary-biased samples from a label mask.
//!
//! Latin Hypercube stratification is applied over the flattened list of
//! eligible pixels, so every sample lands on an eligible pixel center while
//! samples stay spread across the candidate set. Only foreground classes are
//! boundary-biased; background points are stratified over all background
//! pixels.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pixel_to_normalized, Coord, NormalizedCoordinate};
use crate::raster::LabelMask;

/// One supervised point: source and input-frame coordinates plus its class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancySample {
    pub p_s: NormalizedCoordinate,
    pub p_i: NormalizedCoordinate,
    pub class: u8,
}

impl OccupancySample {
    /// One-hot occupancy over `classes` entries.
    pub fn one_hot(&self, classes: usize) -> Vec<f64> {
        let mut o = vec![0.0; classes];
        o[self.class as usize] = 1.0;
        o
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub n_background: usize,
    pub n_foreground_per_class: usize,
    pub boundary_fraction: f64,
    /// Band radius in pixels.
    pub boundary_band: f64,
    /// Total classes including background; foreground classes are `1..classes`.
    pub classes: usize,
    /// Uniform sub-pixel jitter instead of exact pixel centers.
    pub jitter: bool,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_background: 4000,
            n_foreground_per_class: 2000,
            boundary_fraction: 0.5,
            boundary_band: 10.0,
            classes: 2,
            jitter: false,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.boundary_fraction) {
            return Err(Error::Config(format!(
                "boundary_fraction {} outside [0, 1]",
                self.boundary_fraction
            )));
        }
        if !(self.boundary_band >= 0.0) {
            return Err(Error::Config("boundary_band must be non-negative".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("sampling needs at least background plus one class".into()));
        }
        Ok(())
    }

    /// Config for one image of a corpus, seeded `seed ^ image_id`.
    pub fn for_image(&self, image_id: u64) -> Self {
        Self {
            seed: self.seed ^ image_id,
            ..self.clone()
        }
    }

    pub fn boundary_count(&self) -> usize {
        (self.boundary_fraction * self.n_foreground_per_class as f64).floor() as usize
    }
}

/// What [`sample_points`] could not do as asked.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub skipped_classes: Vec<u8>,
    pub warnings: Vec<String>,
}

/// Squared Euclidean distance from each pixel to the nearest `feature` pixel.
///
/// Exact two-pass lower-envelope transform; pixels with no feature anywhere
/// get `f64::INFINITY`.
pub fn squared_distance_transform(feature: &[bool], height: usize, width: usize) -> Vec<f64> {
    assert_eq!(feature.len(), height * width);
    let mut d: Vec<f64> = feature.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let mut column = vec![0.0; height];
    for c in 0..width {
        for r in 0..height {
            column[r] = d[r * width + c];
        }
        let out = lower_envelope(&column);
        for r in 0..height {
            d[r * width + c] = out[r];
        }
    }
    for r in 0..height {
        let out = lower_envelope(&d[r * width..(r + 1) * width]);
        d[r * width..(r + 1) * width].copy_from_slice(&out);
    }
    d
}

/// 1D squared distance transform of a sampled function.
fn lower_envelope(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![f64::INFINITY; n];
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return out;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let intersect = |p: usize, q: usize| -> f64 {
        let (pf, qf) = (p as f64, q as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
    };
    for &q in &sites {
        while let Some(&p) = v.last() {
            let s = intersect(p, q);
            if s <= z[z.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            z.clear();
            z.push(f64::NEG_INFINITY);
        } else {
            z.push(intersect(*v.last().unwrap(), q));
        }
        v.push(q);
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *o = dq * dq + f[v[k]];
    }
    out
}

/// Pixels of one class lying near that class's boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryBand {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
    /// Set when the class does not occur in the mask; `data` is then all false.
    pub class_absent: bool,
}

impl BoundaryBand {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Class pixels within `radius` pixels (Euclidean) of the class's complement.
///
/// The complement includes everything outside the raster, so a class touching
/// the image edge has a boundary there. Boundary pixels (4-adjacent to the
/// complement) are at distance 1 and are always part of the band, so
/// `radius = 0` yields exactly the boundary.
pub fn boundary_band(mask: &LabelMask, class: u8, radius: f64) -> BoundaryBand {
    let (h, w) = (mask.height, mask.width);
    if mask.count(class) == 0 {
        return BoundaryBand {
            height: h,
            width: w,
            data: vec![false; h * w],
            class_absent: true,
        };
    }
    // One-pixel frame of complement around the raster.
    let (ph, pw) = (h + 2, w + 2);
    let mut outside = vec![true; ph * pw];
    for r in 0..h {
        for c in 0..w {
            outside[(r + 1) * pw + c + 1] = mask.get(r, c) != class;
        }
    }
    let d2 = squared_distance_transform(&outside, ph, pw);
    let limit = radius.max(1.0);
    let limit2 = limit * limit;
    let mut data = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            data[r * w + c] = mask.get(r, c) == class && d2[(r + 1) * pw + c + 1] <= limit2;
        }
    }
    BoundaryBand {
        height: h,
        width: w,
        data,
        class_absent: false,
    }
}

fn below_one(v: f64) -> f64 {
    if v < 1.0 {
        v
    } else {
        f64::from_bits(1.0f64.to_bits() - 1)
    }
}

/// `n` points in `[0, 1)^dims` with exactly one point per stratum on every axis.
pub fn latin_hypercube<R: Rng + ?Sized>(n: usize, dims: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; dims]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for k in 0..dims {
        strata.shuffle(rng);
        for (point, &s) in points.iter_mut().zip(&strata) {
            let u: f64 = rng.random();
            point[k] = below_one((s as f64 + u) / n as f64);
        }
    }
    points
}

/// Picks `n` entries of `candidates` by 1D Latin Hypercube over their index.
fn stratified_pick<R: Rng + ?Sized>(candidates: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    if n == 0 || candidates.is_empty() {
        return Vec::new();
    }
    latin_hypercube(n, 1, rng)
        .into_iter()
        .map(|u| candidates[((u[0] * candidates.len() as f64) as usize).min(candidates.len() - 1)])
        .collect()
}

fn sample_at<R: Rng + ?Sized>(mask: &LabelMask, flat: usize, jitter: bool, rng: &mut R) -> OccupancySample {
    let (r, c) = (flat / mask.width, flat % mask.width);
    let mut p = pixel_to_normalized([r, c], mask.height, mask.width).expect("pixel in bounds");
    if jitter {
        // Stay strictly inside the pixel so the label stays exact.
        let jr: f64 = rng.random_range(-0.499..0.499);
        let jc: f64 = rng.random_range(-0.499..0.499);
        p = Coord([
            p.0[0] + 2.0 * jr / mask.height as f64,
            p.0[1] + 2.0 * jc / mask.width as f64,
        ]);
    }
    OccupancySample {
        p_s: p,
        p_i: p,
        class: mask.get(r, c),
    }
}

/// Builds the point/occupancy training set for one mask.
///
/// Emits `n_background` background points, then for every present foreground
/// class `n_foreground_per_class` points of which `floor(boundary_fraction * n)`
/// come from the class's boundary band and the rest from its interior.
pub fn sample_points(mask: &LabelMask, config: &SamplingConfig) -> Result<(Vec<OccupancySample>, SamplingReport)> {
    config.validate()?;
    if mask.data.is_empty() {
        return Err(Error::Empty("mask has no pixels".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = SamplingReport::default();
    let mut out = Vec::with_capacity(config.n_background + config.n_foreground_per_class * (config.classes - 1));

    let background: Vec<usize> = (0..mask.data.len()).filter(|&i| mask.data[i] == 0).collect();
    if background.is_empty() && config.n_background > 0 {
        report.warnings.push("no background pixels; background points skipped".into());
    }
    for idx in stratified_pick(&background, config.n_background, &mut rng) {
        out.push(sample_at(mask, idx, config.jitter, &mut rng));
    }

    let n = config.n_foreground_per_class;
    for class in 1..config.classes {
        let class = u8::try_from(class).map_err(|_| Error::Config("more than 255 classes".into()))?;
        let band = boundary_band(mask, class, config.boundary_band);
        if band.class_absent {
            report.skipped_classes.push(class);
            continue;
        }
        let mut in_band = Vec::new();
        let mut interior = Vec::new();
        for (i, &v) in mask.data.iter().enumerate() {
            if v == class {
                if band.data[i] {
                    in_band.push(i);
                } else {
                    interior.push(i);
                }
            }
        }
        let n_band = config.boundary_count();
        let n_inner = n - n_band;
        let mut picks = stratified_pick(&in_band, n_band, &mut rng);
        if interior.is_empty() && n_inner > 0 {
            report.warnings.push(format!(
                "class {class} has no pixels beyond its boundary band; interior points drawn from the band"
            ));
            picks.extend(stratified_pick(&in_band, n_inner, &mut rng));
        } else {
            picks.extend(stratified_pick(&interior, n_inner, &mut rng));
        }
        for idx in picks {
            out.push(sample_at(mask, idx, config.jitter, &mut rng));
        }
    }
    Ok((out, report))
}

/// JSON sidecar stored next to a point file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSetMeta {
    pub config: SamplingConfig,
    pub count: usize,
    pub report: SamplingReport,
}

const POINTS_HEADER: &str = "# p_s_row p_s_col p_i_row p_i_col class";

/// Writes one sample per line: `p_s` components, `p_i` components, class id.
pub fn write_points(path: &Path, samples: &[OccupancySample], meta: &PointSetMeta) -> Result<()> {
    let mut text = String::with_capacity(samples.len() * 64);
    text.push_str(POINTS_HEADER);
    text.push('\n');
    for s in samples {
        let _ = writeln!(text, "{} {} {} {} {}", s.p_s.0[0], s.p_s.0[1], s.p_i.0[0], s.p_i.0[1], s.class);
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let sidecar = path.with_extension("json");
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::json(&sidecar, e))?;
    fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
}

pub fn read_points(path: &Path) -> Result<Vec<OccupancySample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, found {}", fields.len())));
        }
        let mut v = [0.0; 4];
        for k in 0..4 {
            v[k] = fields[k]
                .parse()
                .map_err(|e| parse_err(format!("field {}: {e}", k + 1)))?;
        }
        let class = fields[4].parse().map_err(|e| parse_err(format!("class: {e}")))?;
        out.push(OccupancySample {
            p_s: Coord([v[0], v[1]]),
            p_i: Coord([v[2], v[3]]),
            class,
        });
    }
    Ok(out)
}

pub fn read_points_meta(path: &Path) -> Result<PointSetMeta> {
    let sidecar = path.with_extension("json");
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&sidecar, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::containing_pixel;
    use proptest::prelude::*;

    fn brute_force_d2(feature: &[bool], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; h * w];
        for r in 0..h {
            for c in 0..w {
                for fr in 0..h {
                    for fc in 0..w {
                        if feature[fr * w + fc] {
                            let d = (r as f64 - fr as f64).powi(2) + (c as f64 - fc as f64).powi(2);
                            out[r * w + c] = out[r * w + c].min(d);
                        }
                    }
                }
            }
        }
        out
    }

    fn disk(n: usize, radius: f64) -> LabelMask {
        let center = n as f64 / 2.0;
        LabelMask::from_fn(n, n, |r, c| {
            let (y, x) = (r as f64 + 0.5 - center, c as f64 + 0.5 - center);
            u8::from(y * y + x * x <= radius * radius)
        })
    }

    #[test]
    fn zero_radius_band_is_the_boundary() {
        let mask = disk(40, 12.0);
        let band = boundary_band(&mask, 1, 0.0);
        for r in 0..40 {
            for c in 0..40 {
                let inside = |rr: isize, cc: isize| {
                    rr >= 0 && cc >= 0 && rr < 40 && cc < 40 && mask.get(rr as usize, cc as usize) == 1
                };
                let (ri, ci) = (r as isize, c as isize);
                let is_boundary = mask.get(r, c) == 1
                    && !(inside(ri - 1, ci) && inside(ri + 1, ci) && inside(ri, ci - 1) && inside(ri, ci + 1));
                assert_eq!(band.get(r, c), is_boundary, "pixel {r},{c}");
            }
        }
    }

    #[test]
    fn full_foreground_band_is_a_frame() {
        let mask = LabelMask::from_fn(48, 48, |_, _| 1);
        let band = boundary_band(&mask, 1, 10.0);
        for r in 0..48 {
            for c in 0..48 {
                let edge = r.min(c).min(47 - r).min(47 - c);
                assert_eq!(band.get(r, c), edge < 10, "pixel {r},{c}");
            }
        }
    }

    #[test]
    fn disk_band_is_an_annulus() {
        let band = boundary_band(&disk(96, 30.0), 1, 10.0);
        let area = std::f64::consts::PI * (30.0f64.powi(2) - 20.0f64.powi(2));
        let rel = (band.count() as f64 - area).abs() / area;
        assert!(rel < 0.03, "band {} vs {area}", band.count());
    }

    #[test]
    fn absent_class_gives_flagged_empty_band() {
        let band = boundary_band(&disk(16, 4.0), 2, 3.0);
        assert!(band.class_absent);
        assert_eq!(band.count(), 0);
    }

    #[test]
    fn lhs_examples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pts = latin_hypercube(4, 1, &mut rng);
        let mut bins: Vec<usize> = pts.iter().map(|p| (p[0] * 4.0) as usize).collect();
        bins.sort();
        assert_eq!(bins, vec![0, 1, 2, 3]);
        let one = latin_hypercube(1, 3, &mut rng);
        assert!(one[0].iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn sessile_counts_and_boundary_share() {
        let mask = disk(96, 25.0);
        let cfg = SamplingConfig {
            seed: 11,
            ..Default::default()
        };
        assert_eq!((cfg.n_background, cfg.n_foreground_per_class), (4000, 2000));
        let (pts, report) = sample_points(&mask, &cfg).unwrap();
        assert!(report.skipped_classes.is_empty());
        assert_eq!(pts.iter().filter(|s| s.class == 0).count(), 4000);
        let fg: Vec<_> = pts.iter().filter(|s| s.class == 1).collect();
        assert_eq!(fg.len(), 2000);
        let band = boundary_band(&mask, 1, 10.0);
        let in_band = fg
            .iter()
            .filter(|s| {
                let [r, c] = containing_pixel(&s.p_s, 96, 96);
                band.get(r, c)
            })
            .count();
        assert_eq!(in_band, 1000);
    }

    #[test]
    fn determinism_and_seed_sensitivity() {
        let mask = disk(64, 15.0);
        let cfg = SamplingConfig {
            n_background: 300,
            n_foreground_per_class: 200,
            seed: 3,
            ..Default::default()
        };
        let a = sample_points(&mask, &cfg).unwrap().0;
        assert_eq!(a, sample_points(&mask, &cfg).unwrap().0);
        let b = sample_points(&mask, &SamplingConfig { seed: 4, ..cfg }).unwrap().0;
        assert_ne!(a, b);
    }

    #[test]
    fn absent_class_is_reported_and_empty_mask_rejected() {
        let mask = disk(32, 8.0);
        let cfg = SamplingConfig {
            n_background: 10,
            n_foreground_per_class: 10,
            classes: 3,
            ..Default::default()
        };
        let (pts, report) = sample_points(&mask, &cfg).unwrap();
        assert_eq!(report.skipped_classes, vec![2]);
        assert_eq!(pts.len(), 20);
        assert!(sample_points(&LabelMask::new(0, 0), &cfg).is_err());
    }

    #[test]
    fn point_file_round_trip_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mask = disk(32, 8.0);
        let cfg = SamplingConfig {
            n_background: 20,
            n_foreground_per_class: 10,
            jitter: true,
            ..Default::default()
        };
        let (pts, report) = sample_points(&mask, &cfg).unwrap();
        let path = dir.path().join("0000.txt");
        let meta = PointSetMeta {
            config: cfg,
            count: pts.len(),
            report,
        };
        write_points(&path, &pts, &meta).unwrap();
        assert_eq!(read_points(&path).unwrap(), pts);
        assert_eq!(read_points_meta(&path).unwrap(), meta);

        fs::write(&path, "# header\n0.1 0.2 0.1 0.2 1\n0.1 x 0.1 0.2 1\n").unwrap();
        match read_points(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn distance_transform_matches_brute_force(h in 1usize..12, w in 1usize..12, bits in proptest::collection::vec(any::<bool>(), 144)) {
            let feature: Vec<bool> = bits[..h * w].to_vec();
            prop_assert_eq!(squared_distance_transform(&feature, h, w), brute_force_d2(&feature, h, w));
        }

        #[test]
        fn lhs_is_stratified(n in 1usize..200, dims in 1usize..4, seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pts = latin_hypercube(n, dims, &mut rng);
            for k in 0..dims {
                let mut hits = vec![0; n];
                for p in &pts {
                    hits[(p[k] * n as f64) as usize] += 1;
                }
                prop_assert!(hits.iter().all(|&h| h == 1));
            }
        }

        #[test]
        fn samples_carry_their_pixel_label(seed in any::<u64>(), radius in 4.0f64..14.0, jitter in any::<bool>()) {
            let mut mask = disk(32, radius);
            for c in 0..6 { mask.set(2, c, 2); }
            let cfg = SamplingConfig { n_background: 50, n_foreground_per_class: 30, classes: 3, jitter, seed, ..Default::default() };
            let (pts, _) = sample_points(&mask, &cfg).unwrap();
            for s in &pts {
                let [r, c] = containing_pixel(&s.p_s, 32, 32);
                prop_assert_eq!(mask.get(r, c), s.class);
            }
            prop_assert_eq!(pts.iter().filter(|s| s.class == 1).count(), 30);
            prop_assert_eq!(pts.iter().filter(|s| s.class == 2).count(), 30);
        }
    }
}
