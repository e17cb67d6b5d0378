//! Learnable binary masks over anchors and offset slots.
//!
//! The forward value is a hard 0/1 decision `sigmoid(logit) > threshold`;
//! gradients pass straight through to the logit as `sigmoid'(logit)`.

use crate::anchor::{AnchorCloud, AttributeGroup};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Initial logit for fresh masks, comfortably inside the "keep" region.
pub const INITIAL_LOGIT: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskParams<T> {
    /// One logit per anchor.
    pub anchor_logits: Vec<T>,
    /// One logit per offset slot, `N x k` anchor-major.
    pub offset_logits: Vec<T>,
    pub threshold: T,
}

impl<T: Real> MaskParams<T> {
    pub fn new(n: usize, k: usize) -> Self {
        Self {
            anchor_logits: vec![T::lit(INITIAL_LOGIT); n],
            offset_logits: vec![T::lit(INITIAL_LOGIT); n * k],
            threshold: T::lit(DEFAULT_THRESHOLD),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > T::zero() && self.threshold < T::one()) {
            return Err(Error::validation("mask threshold must lie in (0, 1)"));
        }
        if !self.anchor_logits.iter().chain(&self.offset_logits).all(|v| v.is_finite()) {
            return Err(Error::validation("mask logits must be finite"));
        }
        Ok(())
    }

    pub fn hard(&self) -> (Vec<bool>, Vec<bool>) {
        let f = |v: &T| mask_forward(*v, self.threshold) == T::one();
        (self.anchor_logits.iter().map(f).collect(), self.offset_logits.iter().map(f).collect())
    }

    /// Mean over every slot, anchors and offsets together.
    pub fn loss(&self) -> T {
        let n = self.anchor_logits.len() + self.offset_logits.len();
        if n == 0 {
            return T::zero();
        }
        let s: T = self.anchor_logits.iter().chain(&self.offset_logits).map(|v| v.sigmoid()).sum();
        s / T::lit(n as f64)
    }

    /// Gradients of [`Self::loss`] w.r.t. the anchor and offset logits.
    pub fn loss_grad(&self) -> (Vec<T>, Vec<T>) {
        let n = T::lit((self.anchor_logits.len() + self.offset_logits.len()).max(1) as f64);
        let g = |v: &T| sigmoid_grad(*v) / n;
        (self.anchor_logits.iter().map(g).collect(), self.offset_logits.iter().map(g).collect())
    }
}

/// Hard mask value, exactly 0 or 1.
#[inline]
pub fn mask_forward<T: Real>(logit: T, threshold: T) -> T {
    if logit.sigmoid() > threshold {
        T::one()
    } else {
        T::zero()
    }
}

/// `d sigmoid / d logit`, the straight-through gradient of [`mask_forward`].
#[inline]
pub fn sigmoid_grad<T: Real>(logit: T) -> T {
    let s = logit.sigmoid();
    s * (T::one() - s)
}

/// Mean of `sigmoid(logits)`.
pub fn mask_loss<T: Real>(logits: &[T]) -> T {
    if logits.is_empty() {
        return T::zero();
    }
    logits.iter().map(|v| v.sigmoid()).sum::<T>() / T::lit(logits.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrunedCloud<T> {
    pub cloud: AnchorCloud<T>,
    /// Kept offset slots of the survivors, `N' x k`.
    pub offset_mask: Vec<bool>,
    /// Original index of each survivor.
    pub index_map: Vec<usize>,
}

/// Drop masked anchors and zero masked offset slots.
pub fn apply_masks<T: Real>(cloud: &AnchorCloud<T>, anchor_mask: &[bool], offset_mask: &[bool]) -> Result<PrunedCloud<T>> {
    let (n, k) = (cloud.len(), cloud.k);
    if anchor_mask.len() != n || offset_mask.len() != n * k {
        return Err(Error::validation(format!(
            "mask shapes ({}, {}) do not match cloud ({n} anchors, {} slots)",
            anchor_mask.len(),
            offset_mask.len(),
            n * k
        )));
    }
    let index_map: Vec<usize> = (0..n).filter(|&i| anchor_mask[i]).collect();
    if index_map.is_empty() {
        return Err(Error::validation("every anchor is masked out"));
    }
    let mut out = AnchorCloud::zeros(index_map.len(), k);
    let mut kept = Vec::with_capacity(index_map.len() * k);
    for (dst, &src) in index_map.iter().enumerate() {
        out.positions[dst] = cloud.positions[src];
        for g in [AttributeGroup::Feature, AttributeGroup::Scaling] {
            let d = g.dim(k);
            out.group_mut(g)[dst * d..(dst + 1) * d].copy_from_slice(cloud.attr(g, src));
        }
        for j in 0..k {
            let keep = offset_mask[src * k + j];
            kept.push(keep);
            if keep {
                let (a, b) = ((dst * k + j) * 3, (src * k + j) * 3);
                out.offsets[a..a + 3].copy_from_slice(&cloud.offsets[b..b + 3]);
            }
        }
    }
    Ok(PrunedCloud { cloud: out, offset_mask: kept, index_map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::synth_correlated_cloud;

    #[test]
    fn forward_examples() {
        assert_eq!(mask_forward(4.0f64, 0.5), 1.0);
        assert_eq!(mask_forward(-4.0f64, 0.5), 0.0);
        assert_eq!(mask_forward(0.0f64, 0.5), 0.0);
        // straight-through: d(m x)/dl = x sigmoid'(l)
        let (l, x) = (0.7f64, 3.0);
        let s = 1.0 / (1.0 + (-l).exp());
        assert!((x * sigmoid_grad(l) - x * s * (1.0 - s)).abs() < 1e-15);
    }

    #[test]
    fn loss_examples_and_gradient() {
        assert_eq!(mask_loss(&[0.0f64; 7]), 0.5);
        assert!(mask_loss(&[-800.0f64; 3]) < 1e-300);
        let p = MaskParams { anchor_logits: vec![0.3, -1.2, 2.5], offset_logits: vec![0.0, 4.0, -3.0, 1.1, 0.2, -0.7], threshold: 0.5 };
        let (ga, go) = p.loss_grad();
        let all: Vec<f64> = ga.into_iter().chain(go).collect();
        for idx in 0..9 {
            let h = 1e-6;
            let bump = |d: f64| {
                let mut q = p.clone();
                if idx < 3 {
                    q.anchor_logits[idx] += d;
                } else {
                    q.offset_logits[idx - 3] += d;
                }
                q.loss()
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            assert!((fd - all[idx]).abs() / fd.abs().max(all[idx].abs()) < 1e-6);
        }
    }

    #[test]
    fn apply_masks_examples() {
        let cloud = synth_correlated_cloud(1, 3, 0.5).unwrap();
        let all = apply_masks(&cloud, &[true; 3], &[true; 12]).unwrap();
        assert_eq!(all.cloud, cloud);
        assert_eq!(all.index_map, vec![0, 1, 2]);

        let mut om = vec![true; 12];
        om[9] = false;
        let one = apply_masks(&cloud, &[true, false, true], &om).unwrap();
        assert_eq!(one.cloud.len(), 2);
        assert_eq!(one.index_map, vec![0, 2]);
        assert_eq!(one.cloud.positions[1], cloud.positions[2]);
        assert_eq!(&one.cloud.offsets[(4 + 1) * 3..(4 + 2) * 3], &[0.0; 3]);
        assert_eq!(one.cloud.attr(AttributeGroup::Feature, 1), cloud.attr(AttributeGroup::Feature, 2));
        assert!(!one.offset_mask[5]);

        assert!(apply_masks(&cloud, &[false; 3], &[true; 12]).is_err());
        assert!(apply_masks(&cloud, &[true; 2], &[true; 12]).is_err());
    }

    #[test]
    fn hard_masks_are_binary() {
        let mut p = MaskParams::<f64>::new(4, 2);
        p.offset_logits[3] = -0.1;
        let (a, o) = p.hard();
        assert!(a.iter().all(|&b| b));
        assert_eq!(o.iter().filter(|&&b| !b).count(), 1);
        assert!(p.validate().is_ok());
        p.threshold = 1.0;
        assert!(p.validate().is_err());
    }
}
