//! Occupancy objectives over a batch of points from one image.
//!
//! Probabilities are row-major `points x classes`; targets are class ids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Lower clamp applied to probabilities before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Patch versus image decoder weight.
    pub alpha: f64,
    /// Overreach loss weight.
    pub beta: f64,
    /// Embedding L2 weight.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.1,
            lambda: 1e-4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("beta and lambda must be non-negative".into()));
        }
        Ok(())
    }
}

fn check(targets: &[u8], probs_len: usize, classes: usize) {
    assert_eq!(targets.len() * classes, probs_len, "probability rows do not match targets");
    debug_assert!(targets.iter().all(|&t| (t as usize) < classes));
}

/// Mean of `-ln max(p_target, 1e-12)`.
pub fn ce_loss<T: Scalar>(targets: &[u8], probs: &[T], classes: usize) -> T {
    check(targets, probs.len(), classes);
    let floor = T::from_f64_lossy(PROB_FLOOR);
    let mut sum = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        sum += -probs[i * classes + t as usize].max(floor).ln();
    }
    sum / T::from_usize(targets.len().max(1)).unwrap()
}

/// Adds `scale * dCE/dp` into `dprobs`.
pub fn ce_backward<T: Scalar>(targets: &[u8], probs: &[T], classes: usize, scale: T, dprobs: &mut [T]) {
    let floor = T::from_f64_lossy(PROB_FLOOR);
    let k = scale / T::from_usize(targets.len().max(1)).unwrap();
    for (i, &t) in targets.iter().enumerate() {
        let j = i * classes + t as usize;
        if probs[j] > floor {
            dprobs[j] -= k / probs[j];
        }
    }
}

struct DiceSums<T> {
    inter: Vec<T>,
    target_sq: Vec<T>,
    pred_sq: Vec<T>,
}

fn dice_sums<T: Scalar>(targets: &[u8], probs: &[T], classes: usize) -> DiceSums<T> {
    let mut s = DiceSums {
        inter: vec![T::zero(); classes],
        target_sq: vec![T::zero(); classes],
        pred_sq: vec![T::zero(); classes],
    };
    for (i, &t) in targets.iter().enumerate() {
        let row = &probs[i * classes..(i + 1) * classes];
        for (c, &p) in row.iter().enumerate() {
            s.pred_sq[c] += p * p;
        }
        s.inter[t as usize] += row[t as usize];
        s.target_sq[t as usize] += T::one();
    }
    s
}

/// `1 - mean_c (2 sum o p + 1) / (sum o^2 + sum p^2 + 1)`.
pub fn dice_loss<T: Scalar>(targets: &[u8], probs: &[T], classes: usize) -> T {
    check(targets, probs.len(), classes);
    let s = dice_sums(targets, probs, classes);
    let two = T::from_f64_lossy(2.0);
    let mut acc = T::zero();
    for c in 0..classes {
        acc += (two * s.inter[c] + T::one()) / (s.target_sq[c] + s.pred_sq[c] + T::one());
    }
    // Non-negative in exact arithmetic; rounding can dip below zero.
    (T::one() - acc / T::from_usize(classes).unwrap()).max(T::zero())
}

/// Adds `scale * dDice/dp` into `dprobs`.
pub fn dice_backward<T: Scalar>(targets: &[u8], probs: &[T], classes: usize, scale: T, dprobs: &mut [T]) {
    let s = dice_sums(targets, probs, classes);
    let two = T::from_f64_lossy(2.0);
    let k = scale / T::from_usize(classes).unwrap();
    let num: Vec<T> = (0..classes).map(|c| two * s.inter[c] + T::one()).collect();
    let den: Vec<T> = (0..classes).map(|c| s.target_sq[c] + s.pred_sq[c] + T::one()).collect();
    for (i, &t) in targets.iter().enumerate() {
        for c in 0..classes {
            let j = i * classes + c;
            let o = if t as usize == c { T::one() } else { T::zero() };
            let d = (two * o * den[c] - num[c] * two * probs[j]) / (den[c] * den[c]);
            dprobs[j] -= k * d;
        }
    }
}

/// Equal blend of cross entropy and Dice.
pub fn occ_loss<T: Scalar>(targets: &[u8], probs: &[T], classes: usize) -> T {
    let half = T::from_f64_lossy(0.5);
    half * ce_loss(targets, probs, classes) + half * dice_loss(targets, probs, classes)
}

pub fn occ_backward<T: Scalar>(targets: &[u8], probs: &[T], classes: usize, scale: T, dprobs: &mut [T]) {
    let half = scale * T::from_f64_lossy(0.5);
    ce_backward(targets, probs, classes, half, dprobs);
    dice_backward(targets, probs, classes, half, dprobs);
}

/// Occupancy loss and its probability gradient scaled by `scale`.
pub fn occ_with_grad<T: Scalar>(targets: &[u8], probs: &[T], classes: usize, scale: T) -> (T, Vec<T>) {
    let mut d = vec![T::zero(); probs.len()];
    if targets.is_empty() {
        return (T::zero(), d);
    }
    occ_backward(targets, probs, classes, scale, &mut d);
    (occ_loss(targets, probs, classes), d)
}

pub fn patch_image_loss(patch: f64, image: f64, alpha: f64) -> f64 {
    alpha * patch + (1.0 - alpha) * image
}

/// Per-term values of the total objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub pi_patch: f64,
    pub pi_image: f64,
    /// Blended patch/image term.
    pub pi: f64,
    pub spo: f64,
    /// Unweighted squared embedding norm.
    pub reg: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.pi_patch, self.pi_image, self.spo, self.reg].iter().all(|v| v.is_finite())
    }

    /// Elementwise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.total += b.total / n;
            m.pi_patch += b.pi_patch / n;
            m.pi_image += b.pi_image / n;
            m.pi += b.pi / n;
            m.spo += b.spo / n;
            m.reg += b.reg / n;
        }
        m
    }
}

/// `L_PI + beta L_SPO + lambda reg`.
pub fn total_loss(pi_patch: f64, pi_image: f64, spo: f64, reg: f64, cfg: &LossConfig) -> LossBreakdown {
    let pi = patch_image_loss(pi_patch, pi_image, cfg.alpha);
    LossBreakdown {
        total: pi + cfg.beta * spo + cfg.lambda * reg,
        pi_patch,
        pi_image,
        pi,
        spo,
        reg,
    }
}

/// Mean squared norm of the patch embeddings indexed by the batch, plus the
/// squared norm of the image embedding.
pub fn embedding_reg<T: Scalar>(z_p: &[T], d: usize, patches: &[usize], z_i: &[T]) -> f64 {
    let sq = |v: &[T]| v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
    let per_point = if patches.is_empty() {
        0.0
    } else {
        patches.iter().map(|&p| sq(&z_p[p * d..(p + 1) * d])).sum::<f64>() / patches.len() as f64
    };
    per_point + sq(z_i)
}

/// Adds `scale * d reg` into the embedding gradients.
pub fn embedding_reg_backward<T: Scalar>(z_p: &[T], d: usize, patches: &[usize], z_i: &[T], scale: T, dz_p: &mut [T], dz_i: &mut [T]) {
    let two = T::from_f64_lossy(2.0);
    if !patches.is_empty() {
        let k = two * scale / T::from_usize(patches.len()).unwrap();
        for &p in patches {
            for j in p * d..(p + 1) * d {
                dz_p[j] += k * z_p[j];
            }
        }
    }
    for (g, &z) in dz_i.iter_mut().zip(z_i) {
        *g += two * scale * z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct per-class evaluation of the printed Dice formula.
    fn dice_oracle(targets: &[u8], probs: &[f64], classes: usize) -> f64 {
        let mut acc = 0.0;
        for c in 0..classes {
            let (mut n, mut o2, mut p2) = (0.0, 0.0, 0.0);
            for (i, &t) in targets.iter().enumerate() {
                let o = if t as usize == c { 1.0 } else { 0.0 };
                let p = probs[i * classes + c];
                n += o * p;
                o2 += o * o;
                p2 += p * p;
            }
            acc += (2.0 * n + 1.0) / (o2 + p2 + 1.0);
        }
        1.0 - acc / classes as f64
    }

    #[test]
    fn hand_values() {
        assert_eq!(ce_loss(&[1], &[0.0, 1.0], 2), 0.0);
        assert!((ce_loss(&[0], &[(-1f64).exp(), 1.0 - (-1f64).exp()], 2) - 1.0).abs() < 1e-15);
        assert_eq!(ce_loss(&[0], &[0.5, 0.5], 2), std::f64::consts::LN_2);
        assert_eq!(dice_loss(&[0], &[1.0], 1), 0.0);
        assert_eq!(dice_loss(&[0], &[0.0], 1), 0.5);
        let occ: f64 = occ_loss(&[0], &[0.0], 1);
        assert!((occ - 14.0655).abs() < 1e-4, "{occ}");
        assert!((occ - (0.5 * -(1e-12f64).ln() + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn blends() {
        assert_eq!(patch_image_loss(0.2, 0.4, 1.0), 0.2);
        assert_eq!(patch_image_loss(0.2, 0.4, 0.0), 0.4);
        assert!((patch_image_loss(0.2, 0.4, 0.5) - 0.3).abs() < 1e-15);
        let b = total_loss(0.3, 0.3, 0.2, 10.0, &LossConfig::default());
        assert!((b.total - 0.321).abs() < 1e-12);
        let b = total_loss(0.2, 0.4, 5.0, 7.0, &LossConfig { alpha: 0.5, beta: 0.0, lambda: 0.0 });
        assert_eq!(b.total, patch_image_loss(0.2, 0.4, 0.5));
        assert_eq!(embedding_reg(&[0.0f64; 8], 4, &[0, 1], &[0.0; 4]), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { beta: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn ce_is_monotone_and_finite() {
        let mut last = f64::INFINITY;
        for k in 0..=20 {
            let p = k as f64 / 20.0;
            let l = ce_loss(&[1], &[1.0 - p, p], 2);
            assert!(l.is_finite() && l <= last);
            last = l;
        }
    }

    fn batch() -> impl Strategy<Value = (usize, Vec<u8>, Vec<f64>)> {
        (1usize..5, 1usize..40).prop_flat_map(|(c, n)| {
            (
                Just(c),
                proptest::collection::vec(0..c as u8, n),
                proptest::collection::vec(0.0f64..1.0, n * c),
            )
        })
    }

    proptest! {
        #[test]
        fn dice_matches_oracle((c, t, raw) in batch()) {
            let probs: Vec<f64> = raw.chunks(c).flat_map(|r| {
                let s: f64 = r.iter().sum::<f64>() + 1e-9;
                r.iter().map(move |v| v / s).collect::<Vec<_>>()
            }).collect();
            prop_assert!((dice_loss(&t, &probs, c) - dice_oracle(&t, &probs, c)).abs() <= 1e-12);
            prop_assert!(dice_loss(&t, &probs, c) >= 0.0);
            prop_assert!(ce_loss(&t, &probs, c) >= 0.0);
        }

        #[test]
        fn perfect_prediction_is_zero((c, t, _r) in batch()) {
            let probs: Vec<f64> = t.iter().flat_map(|&k| (0..c).map(move |j| if j == k as usize { 1.0 } else { 0.0 })).collect();
            prop_assert_eq!(occ_loss(&t, &probs, c), 0.0);
        }

        #[test]
        fn occ_gradient_matches_finite_difference((c, t, raw) in batch()) {
            let probs: Vec<f64> = raw.iter().map(|v| 0.05 + 0.9 * v).collect();
            let (_, g) = occ_with_grad(&t, &probs, c, 1.0);
            for j in 0..probs.len() {
                let mut p = probs.clone();
                p[j] += 1e-6;
                let up = occ_loss(&t, &p, c);
                p[j] -= 2e-6;
                let down = occ_loss(&t, &p, c);
                let fd = (up - down) / 2e-6;
                prop_assert!((fd - g[j]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn reg_gradient() {
        let z_p = [1.0f64, 2.0, 3.0, 4.0];
        let z_i = [0.5, -0.5];
        assert!((embedding_reg(&z_p, 2, &[1, 1, 0], &z_i) - ((25.0 + 25.0 + 5.0) / 3.0 + 0.5)).abs() < 1e-12);
        let mut dz_p = [0.0f64; 4];
        let mut dz_i = [0.0; 2];
        embedding_reg_backward(&z_p, 2, &[1, 1, 0], &z_i, 1.0, &mut dz_p, &mut dz_i);
        assert_eq!(dz_i, [1.0, -1.0]);
        assert!((dz_p[2] - 2.0 * 2.0 * 3.0 / 3.0).abs() < 1e-12);
    }
}
