use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Scalar;

/// A contiguous slice of the flat parameter vector owned by one tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRange {
    pub offset: usize,
    pub len: usize,
}

impl ParamRange {
    pub fn of<'a, T>(&self, flat: &'a [T]) -> &'a [T] {
        &flat[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a, T>(&self, flat: &'a mut [T]) -> &'a mut [T] {
        &mut flat[self.offset..self.offset + self.len]
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    /// Uniform in `[-bound, bound]`.
    Uniform { bound: f64 },
}

impl Init {
    /// He-style fan-in scaled uniform bound, `sqrt(6 / fan_in)`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform {
            bound: (6.0 / fan_in.max(1) as f64).sqrt(),
        }
    }
}

/// Named parameter group, e.g. `backbone` or `patch_decoder`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub range: Range<usize>,
}

/// Allocates parameter ranges while a model is being built.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    total: usize,
    groups: Vec<ParamGroup>,
    inits: Vec<(ParamRange, Init)>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, len: usize, init: Init) -> ParamRange {
        let r = ParamRange {
            offset: self.total,
            len,
        };
        self.total += len;
        self.inits.push((r, init));
        r
    }

    /// Runs `f` and records everything it allocates under `name`.
    pub fn group<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let start = self.total;
        let out = f(self);
        self.groups.push(ParamGroup {
            name: name.to_string(),
            range: start..self.total,
        });
        out
    }

    pub fn finish(self) -> ParamLayout {
        ParamLayout {
            total: self.total,
            groups: self.groups,
            inits: self.inits,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamLayout {
    total: usize,
    groups: Vec<ParamGroup>,
    inits: Vec<(ParamRange, Init)>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_len(&self, name: &str) -> usize {
        self.group(name).map_or(0, |g| g.range.len())
    }

    pub fn initialize<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let mut values = vec![T::zero(); self.total];
        for (range, init) in &self.inits {
            let dst = range.of_mut(&mut values);
            match *init {
                Init::Zeros => {}
                Init::Uniform { bound } => {
                    for v in dst.iter_mut() {
                        *v = T::from_f64_lossy(rng.random_range(-bound..=bound));
                    }
                }
            }
        }
        values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn groups_cover_their_allocations() {
        let mut b = ParamBuilder::new();
        let w = b.group("a", |b| b.alloc(6, Init::fan_in(3)));
        let bias = b.group("b", |b| b.alloc(2, Init::Zeros));
        let layout = b.finish();
        assert_eq!(layout.len(), 8);
        assert_eq!(layout.group("a").unwrap().range, 0..6);
        assert_eq!(layout.group("b").unwrap().range, 6..8);
        let v: Vec<f64> = layout.initialize(&mut ChaCha8Rng::seed_from_u64(1));
        let bound = (6.0f64 / 3.0).sqrt();
        assert!(w.of(&v).iter().all(|x| x.abs() <= bound));
        assert!(bias.of(&v).iter().all(|&x| x == 0.0));
    }
}
