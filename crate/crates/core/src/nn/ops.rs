//! Parameter-free tensor operations with their adjoints.

use super::{Fmap, Scalar};

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `grad` by `output > 0`, where `output` is the ReLU result.
pub fn relu_backward_inplace<T: Scalar>(grad: &mut [T], output: &[T]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Row-wise softmax of an `rows x width` matrix.
pub fn softmax_rows<T: Scalar>(logits: &[T], width: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Gradient w.r.t. logits given probabilities `p` and gradient w.r.t. `p`.
pub fn softmax_backward<T: Scalar>(p: &[T], dp: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p.len()];
    for ((o, pr), gr) in out.chunks_mut(width).zip(p.chunks(width)).zip(dp.chunks(width)) {
        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for i in 0..width {
            o[i] = pr[i] * (gr[i] - dot);
        }
    }
    out
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Non-overlapping `k x k` average pooling. `k == 1` is the identity.
pub fn avg_pool<T: Scalar>(x: &Fmap<T>, k: usize) -> Fmap<T> {
    if k == 1 {
        return x.clone();
    }
    let (oh, ow) = (x.height / k, x.width / k);
    let scale = T::one() / T::from_f64_lossy((k * k) as f64);
    let mut out = Fmap::zeros(x.channels, oh, ow);
    for c in 0..x.channels {
        for y in 0..oh * k {
            for xx in 0..ow * k {
                *out.at_mut(c, y / k, xx / k) += x.at(c, y, xx) * scale;
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(dy: &Fmap<T>, k: usize, in_h: usize, in_w: usize) -> Fmap<T> {
    if k == 1 {
        return dy.clone();
    }
    let scale = T::one() / T::from_f64_lossy((k * k) as f64);
    let mut dx = Fmap::zeros(dy.channels, in_h, in_w);
    for c in 0..dy.channels {
        for y in 0..dy.height * k {
            for xx in 0..dy.width * k {
                *dx.at_mut(c, y, xx) = dy.at(c, y / k, xx / k) * scale;
            }
        }
    }
    dx
}

/// Per-channel spatial mean.
pub fn global_mean<T: Scalar>(x: &Fmap<T>) -> Vec<T> {
    let n = T::from_f64_lossy(x.plane() as f64);
    (0..x.channels).map(|c| x.channel(c).iter().copied().sum::<T>() / n).collect()
}

pub fn global_mean_backward<T: Scalar>(dz: &[T], h: usize, w: usize) -> Fmap<T> {
    let n = T::from_f64_lossy((h * w) as f64);
    let mut out = Fmap::zeros(dz.len(), h, w);
    for (c, chunk) in out.data.chunks_mut(h * w).enumerate() {
        chunk.fill(dz[c] / n);
    }
    out
}

/// Two-tap linear interpolation weights along one axis.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    (0..n_out)
        .map(|i| {
            // Corner-aligned: first and last output samples sit on the first
            // and last input pixel centers.
            let src = if n_out == 1 {
                (n_in as f64 - 1.0) / 2.0
            } else {
                i as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
            };
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of every channel to `out_h x out_w`.
pub fn resize_bilinear<T: Scalar>(x: &Fmap<T>, out_h: usize, out_w: usize) -> Fmap<T> {
    if (x.height, x.width) == (out_h, out_w) {
        return x.clone();
    }
    let rows = axis_taps(x.height, out_h);
    let cols = axis_taps(x.width, out_w);
    let mut out = Fmap::zeros(x.channels, out_h, out_w);
    for c in 0..x.channels {
        for (oy, ry) in rows.iter().enumerate() {
            let fy = T::from_f64_lossy(ry.frac);
            for (ox, rx) in cols.iter().enumerate() {
                let fx = T::from_f64_lossy(rx.frac);
                let top = x.at(c, ry.lo, rx.lo) * (T::one() - fx) + x.at(c, ry.lo, rx.hi) * fx;
                let bot = x.at(c, ry.hi, rx.lo) * (T::one() - fx) + x.at(c, ry.hi, rx.hi) * fx;
                *out.at_mut(c, oy, ox) = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Scalar>(dy: &Fmap<T>, in_h: usize, in_w: usize) -> Fmap<T> {
    if (dy.height, dy.width) == (in_h, in_w) {
        return dy.clone();
    }
    let rows = axis_taps(in_h, dy.height);
    let cols = axis_taps(in_w, dy.width);
    let mut dx = Fmap::zeros(dy.channels, in_h, in_w);
    for c in 0..dy.channels {
        for (oy, ry) in rows.iter().enumerate() {
            let fy = T::from_f64_lossy(ry.frac);
            for (ox, rx) in cols.iter().enumerate() {
                let fx = T::from_f64_lossy(rx.frac);
                let g = dy.at(c, oy, ox);
                *dx.at_mut(c, ry.lo, rx.lo) += g * (T::one() - fy) * (T::one() - fx);
                *dx.at_mut(c, ry.lo, rx.hi) += g * (T::one() - fy) * fx;
                *dx.at_mut(c, ry.hi, rx.lo) += g * fy * (T::one() - fx);
                *dx.at_mut(c, ry.hi, rx.hi) += g * fy * fx;
            }
        }
    }
    dx
}
