use serde::{Deserialize, Serialize};

use super::{Fmap, Init, ParamBuilder, ParamRange, Scalar};

/// Geometry of a 2D convolution, before parameters are allocated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }

    /// Square `k x k` kernel with "same" padding at stride 1.
    pub fn square(in_ch: usize, out_ch: usize, k: usize) -> Self {
        Self::new(in_ch, out_ch, (k, k)).padding((k / 2, k / 2))
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: (usize, usize)) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: (usize, usize)) -> Self {
        self.dilation = d;
        self
    }

    pub fn weight_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel.0 * self.kernel.1
    }

    pub fn build(self, b: &mut ParamBuilder) -> Conv2d {
        let fan_in = self.in_ch * self.kernel.0 * self.kernel.1;
        let weight = b.alloc(self.weight_count(), Init::fan_in(fan_in));
        let bias = b.alloc(self.out_ch, Init::Zeros);
        Conv2d {
            spec: self,
            weight,
            bias,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamRange,
    pub bias: ParamRange,
}

/// Saved im2col matrix for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let s = &self.spec;
        let eff_h = s.dilation.0 * (s.kernel.0 - 1) + 1;
        let eff_w = s.dilation.1 * (s.kernel.1 - 1) + 1;
        assert!(
            h + 2 * s.padding.0 >= eff_h && w + 2 * s.padding.1 >= eff_w,
            "input {h}x{w} smaller than effective kernel {eff_h}x{eff_w}"
        );
        (
            (h + 2 * s.padding.0 - eff_h) / s.stride.0 + 1,
            (w + 2 * s.padding.1 - eff_w) / s.stride.1 + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        let s = &self.spec;
        s.kernel == (1, 1) && s.stride == (1, 1) && s.padding == (0, 0)
    }

    fn im2col<T: Scalar>(&self, x: &Fmap<T>, out_h: usize, out_w: usize) -> Vec<T> {
        let s = &self.spec;
        let (kh, kw) = s.kernel;
        let p = out_h * out_w;
        let mut cols = vec![T::zero(); s.in_ch * kh * kw * p];
        for ci in 0..s.in_ch {
            let plane = x.channel(ci);
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..out_h {
                        let iy = (oy * s.stride.0 + ki * s.dilation.0) as isize - s.padding.0 as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        for ox in 0..out_w {
                            let ix =
                                (ox * s.stride.1 + kj * s.dilation.1) as isize - s.padding.1 as isize;
                            if ix >= 0 && ix < x.width as isize {
                                dst[oy * out_w + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut Fmap<T>, out_h: usize, out_w: usize) {
        let s = &self.spec;
        let (kh, kw) = s.kernel;
        let p = out_h * out_w;
        let (h, w) = (dx.height, dx.width);
        for ci in 0..s.in_ch {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..out_h {
                        let iy = (oy * s.stride.0 + ki * s.dilation.0) as isize - s.padding.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..out_w {
                            let ix =
                                (ox * s.stride.1 + kj * s.dilation.1) as isize - s.padding.1 as isize;
                            if ix >= 0 && ix < w as isize {
                                dx.data[base + ix as usize] += src[oy * out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Fmap<T>) -> (Fmap<T>, ConvCache<T>) {
        assert_eq!(x.channels, self.spec.in_ch, "conv input channels");
        let (out_h, out_w) = self.output_size(x.height, x.width);
        let p = out_h * out_w;
        let cols = if self.is_pointwise() {
            x.data.clone()
        } else {
            self.im2col(x, out_h, out_w)
        };
        let co = self.spec.out_ch;
        let bias = self.bias.of(params);
        let mut out = Fmap::zeros(co, out_h, out_w);
        for (c, chunk) in out.data.chunks_mut(p).enumerate() {
            chunk.fill(bias[c]);
        }
        let k = cols.len() / p;
        T::gemm(
            co,
            k,
            p,
            T::one(),
            self.weight.of(params),
            (k as isize, 1),
            &cols,
            (p as isize, 1),
            T::one(),
            &mut out.data,
            (p as isize, 1),
        );
        let cache = ConvCache {
            cols,
            in_h: x.height,
            in_w: x.width,
            out_h,
            out_w,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients and returns the input gradient when requested.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &ConvCache<T>,
        dy: &Fmap<T>,
        grads: &mut [T],
        want_input_grad: bool,
    ) -> Option<Fmap<T>> {
        let co = self.spec.out_ch;
        let p = cache.out_h * cache.out_w;
        assert_eq!(dy.data.len(), co * p, "conv output gradient shape");
        let k = cache.cols.len() / p;

        T::gemm(
            co,
            p,
            k,
            T::one(),
            &dy.data,
            (p as isize, 1),
            &cache.cols,
            (1, p as isize),
            T::one(),
            self.weight.of_mut(grads),
            (k as isize, 1),
        );
        let db = self.bias.of_mut(grads);
        for (c, chunk) in dy.data.chunks(p).enumerate() {
            db[c] += chunk.iter().copied().sum();
        }
        if !want_input_grad {
            return None;
        }

        let mut dcols = vec![T::zero(); k * p];
        T::gemm(
            k,
            co,
            p,
            T::one(),
            self.weight.of(params),
            (1, k as isize),
            &dy.data,
            (p as isize, 1),
            T::zero(),
            &mut dcols,
            (p as isize, 1),
        );
        if self.is_pointwise() {
            return Some(Fmap::from_vec(self.spec.in_ch, cache.in_h, cache.in_w, dcols));
        }
        let mut dx = Fmap::zeros(self.spec.in_ch, cache.in_h, cache.in_w);
        self.col2im(&dcols, &mut dx, cache.out_h, cache.out_w);
        Some(dx)
    }
}
