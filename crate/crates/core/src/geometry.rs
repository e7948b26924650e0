//! Normalized coordinates and patch-grid arithmetic.
//!
//! Coordinates live in `[-1, 1]` per axis with components ordered like raster
//! axes (row, column[, depth]). Pixel `i` of an axis with `n` pixels maps to
//! its center, `-1 + 2 (i + 0.5) / n`. The patch grid tiles the raster with
//! `S`-pixel cells; a cell truncated by the raster edge keeps the center of
//! its truncated extent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the normalized `[-1, 1]^D` frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coord<const D: usize>(#[serde(with = "serde_arrays")] pub [f64; D]);

pub type NormalizedCoordinate = Coord<2>;

mod serde_arrays {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, const D: usize>(v: &[f64; D], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, De: Deserializer<'de>, const D: usize>(d: De) -> Result<[f64; D], De::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into()
            .map_err(|v: Vec<f64>| serde::de::Error::invalid_length(v.len(), &"coordinate dimension"))
    }
}

impl<const D: usize> Coord<D> {
    pub const ORIGIN: Self = Coord([0.0; D]);

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = [0.0; D];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.0[k] - other.0[k];
        }
        Coord(out)
    }

    pub fn in_unit_box(&self) -> bool {
        self.0.iter().all(|v| (-1.0..=1.0).contains(v))
    }
}

/// Center of pixel `index` on an axis of `extent` pixels.
pub fn axis_to_normalized(index: usize, extent: usize) -> Result<f64> {
    if index >= extent {
        return Err(Error::OutOfBounds { index, extent });
    }
    Ok(-1.0 + 2.0 * (index as f64 + 0.5) / extent as f64)
}

/// Continuous pixel-space position of a normalized value (0 at the raster edge).
pub fn normalized_to_axis_position(c: f64, extent: usize) -> f64 {
    (c + 1.0) * 0.5 * extent as f64
}

pub fn pixel_to_normalized(pixel: [usize; 2], height: usize, width: usize) -> Result<NormalizedCoordinate> {
    Ok(Coord([
        axis_to_normalized(pixel[0], height)?,
        axis_to_normalized(pixel[1], width)?,
    ]))
}

/// Pixel whose center is nearest to `p`; exact inverse of [`pixel_to_normalized`].
pub fn normalized_to_pixel(p: &NormalizedCoordinate, height: usize, width: usize) -> [usize; 2] {
    let axis = |c: f64, n: usize| -> usize {
        let i = (normalized_to_axis_position(c, n) - 0.5).round();
        (i.max(0.0) as usize).min(n - 1)
    };
    [axis(p.0[0], height), axis(p.0[1], width)]
}

/// Pixel containing `p` (floor of its pixel-space position, clamped).
pub fn containing_pixel(p: &NormalizedCoordinate, height: usize, width: usize) -> [usize; 2] {
    let axis = |c: f64, n: usize| -> usize {
        let u = normalized_to_axis_position(c, n).floor();
        (u.max(0.0) as usize).min(n - 1)
    };
    [axis(p.0[0], height), axis(p.0[1], width)]
}

/// Neighbor set for patch overreach.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Connectivity {
    /// Edge-adjacent cells in 2D.
    #[serde(rename = "4")]
    Four,
    /// Edge- and corner-adjacent cells in 2D.
    #[serde(rename = "8")]
    Eight,
    /// Face-adjacent cells in 3D.
    #[serde(rename = "6")]
    Six,
}

impl Connectivity {
    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            6 => Ok(Connectivity::Six),
            _ => Err(Error::Config(format!("connectivity must be 4, 6 or 8, got {n}"))),
        }
    }

    pub fn count(self) -> usize {
        match self {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
            Connectivity::Six => 6,
        }
    }

    fn includes_corners(self) -> bool {
        matches!(self, Connectivity::Eight)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchIndex<const D: usize>(#[serde(with = "index_arrays")] pub [usize; D]);

mod index_arrays {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, const D: usize>(v: &[usize; D], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, De: Deserializer<'de>, const D: usize>(d: De) -> Result<[usize; D], De::Error> {
        let v = Vec::<usize>::deserialize(d)?;
        v.try_into()
            .map_err(|v: Vec<usize>| serde::de::Error::invalid_length(v.len(), &"index dimension"))
    }
}

impl PatchIndex<2> {
    pub fn new(row: usize, col: usize) -> Self {
        PatchIndex([row, col])
    }

    pub fn row(&self) -> usize {
        self.0[0]
    }

    pub fn col(&self) -> usize {
        self.0[1]
    }
}

/// Isotropic, non-overlapping grid of `patch_size` cells over a raster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid<const D: usize> {
    #[serde(with = "index_arrays")]
    extent: [usize; D],
    patch_size: usize,
}

pub type PatchGridSpec = PatchGrid<2>;

impl<const D: usize> PatchGrid<D> {
    pub fn new(extent: [usize; D], patch_size: usize) -> Result<Self> {
        let min = extent.iter().copied().min().unwrap_or(0);
        if patch_size == 0 || patch_size > min {
            return Err(Error::Config(format!(
                "patch size {patch_size} must be in [1, {min}] for extent {extent:?}"
            )));
        }
        Ok(Self { extent, patch_size })
    }

    pub fn extent(&self) -> [usize; D] {
        self.extent
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Cells per axis, `ceil(extent / S)`.
    pub fn shape(&self) -> [usize; D] {
        self.extent.map(|n| n.div_ceil(self.patch_size))
    }

    pub fn patch_count(&self) -> usize {
        self.shape().iter().product()
    }

    /// Half of a full cell's extent per axis in normalized units, `S / N`.
    pub fn half_extent(&self) -> [f64; D] {
        self.extent.map(|n| self.patch_size as f64 / n as f64)
    }

    pub fn contains(&self, index: &PatchIndex<D>) -> bool {
        index.0.iter().zip(self.shape()).all(|(&i, n)| i < n)
    }

    /// Row-major position of `index` in the flattened grid.
    pub fn linear(&self, index: &PatchIndex<D>) -> usize {
        let shape = self.shape();
        index.0.iter().zip(shape).fold(0, |acc, (&i, n)| acc * n + i)
    }

    pub fn from_linear(&self, mut linear: usize) -> PatchIndex<D> {
        let shape = self.shape();
        let mut out = [0; D];
        for k in (0..D).rev() {
            out[k] = linear % shape[k];
            linear /= shape[k];
        }
        PatchIndex(out)
    }

    pub fn indices(&self) -> impl Iterator<Item = PatchIndex<D>> + '_ {
        (0..self.patch_count()).map(|l| self.from_linear(l))
    }

    /// Cell whose pixel extent contains `p`. Interior boundaries go to the
    /// higher-index cell; `+1` clamps into the last cell.
    pub fn patch_of(&self, p: &Coord<D>) -> PatchIndex<D> {
        let shape = self.shape();
        let mut out = [0; D];
        for k in 0..D {
            let u = normalized_to_axis_position(p.0[k], self.extent[k]);
            let q = u / self.patch_size as f64;
            // Snap values within rounding noise of a cell boundary onto it so
            // boundary points land in the higher cell.
            let nearest = q.round();
            let cell = if (q - nearest).abs() < 1e-9 { nearest } else { q.floor() };
            out[k] = (cell.max(0.0) as usize).min(shape[k] - 1);
        }
        PatchIndex(out)
    }

    /// Pixel-space `[start, end)` of a cell along each axis.
    pub fn cell_bounds(&self, index: &PatchIndex<D>) -> [(usize, usize); D] {
        let mut out = [(0, 0); D];
        for k in 0..D {
            let start = index.0[k] * self.patch_size;
            out[k] = (start, (start + self.patch_size).min(self.extent[k]));
        }
        out
    }

    pub fn center_of(&self, index: &PatchIndex<D>) -> Result<Coord<D>> {
        let shape = self.shape();
        for k in 0..D {
            if index.0[k] >= shape[k] {
                return Err(Error::OutOfBounds {
                    index: index.0[k],
                    extent: shape[k],
                });
            }
        }
        let bounds = self.cell_bounds(index);
        let mut out = [0.0; D];
        for k in 0..D {
            let mid = 0.5 * (bounds[k].0 + bounds[k].1) as f64;
            out[k] = -1.0 + 2.0 * mid / self.extent[k] as f64;
        }
        Ok(Coord(out))
    }

    /// In-bound neighbors of `index`, in lexicographic offset order.
    pub fn neighbors(&self, index: &PatchIndex<D>, con: Connectivity) -> Vec<PatchIndex<D>> {
        let shape = self.shape();
        let mut out = Vec::new();
        let total = 3usize.pow(D as u32);
        for code in 0..total {
            let mut offset = [0isize; D];
            let mut c = code;
            for k in (0..D).rev() {
                offset[k] = (c % 3) as isize - 1;
                c /= 3;
            }
            let nonzero = offset.iter().filter(|&&o| o != 0).count();
            if nonzero == 0 || (!con.includes_corners() && nonzero > 1) {
                continue;
            }
            let mut cand = [0usize; D];
            let mut inside = true;
            for k in 0..D {
                let v = index.0[k] as isize + offset[k];
                if v < 0 || v >= shape[k] as isize {
                    inside = false;
                    break;
                }
                cand[k] = v as usize;
            }
            if inside {
                out.push(PatchIndex(cand));
            }
        }
        out
    }
}

/// Patch-local coordinate `p_I - c`.
pub fn to_patch_local<const D: usize>(p_image: &Coord<D>, center: &Coord<D>) -> Coord<D> {
    p_image.sub(center)
}

/// Patch-local coordinate rescaled so a full cell spans `[-1, 1]` (`x N / S` per axis).
pub fn to_patch_local_scaled<const D: usize>(p_image: &Coord<D>, center: &Coord<D>, grid: &PatchGrid<D>) -> Coord<D> {
    let mut local = to_patch_local(p_image, center);
    for (v, h) in local.0.iter_mut().zip(grid.half_extent()) {
        *v /= h;
    }
    local
}
