use super::Scalar;

/// A single-image feature raster in channel-major (`C x H x W`) layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Fmap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Fmap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "fmap data length");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self::from_vec(channels, height, width, vec![value; channels * height * width])
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn add_assign(&mut self, other: &Fmap<T>) {
        assert_eq!(self.shape(), other.shape(), "fmap shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Position-major `(H*W) x C` copy, one row per spatial position.
    pub fn to_rows(&self) -> Vec<T> {
        let p = self.plane();
        let mut out = vec![T::zero(); p * self.channels];
        for c in 0..self.channels {
            for (i, &v) in self.channel(c).iter().enumerate() {
                out[i * self.channels + c] = v;
            }
        }
        out
    }

    /// Inverse of [`Fmap::to_rows`].
    pub fn from_rows(channels: usize, height: usize, width: usize, rows: &[T]) -> Self {
        let p = height * width;
        assert_eq!(rows.len(), p * channels);
        let mut out = Self::zeros(channels, height, width);
        for i in 0..p {
            for c in 0..channels {
                out.data[c * p + i] = rows[i * channels + c];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let f = Fmap::<f64>::from_vec(2, 2, 3, (0..12).map(f64::from).collect());
        let rows = f.to_rows();
        assert_eq!(&rows[..2], &[0.0, 6.0]);
        assert_eq!(Fmap::from_rows(2, 2, 3, &rows), f);
    }
}
