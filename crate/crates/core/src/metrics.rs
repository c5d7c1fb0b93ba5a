//! Dice, IoU and MAE for binary segmentation, per image and averaged.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities at or above this count as foreground.
pub const THRESHOLD: f64 = 0.5;

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("{} vs {} pixels", a.len(), b.len())));
    }
    Ok(())
}

/// `(|P∩G|, |P|, |G|)` of two masks, each pixel counted as foreground when `≥ THRESHOLD`.
fn counts(pred: &[f64], gt: &[f64]) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p >= THRESHOLD, g >= THRESHOLD);
        c.0 += (p && g) as usize;
        c.1 += p as usize;
        c.2 += g as usize;
    }
    c
}

/// `2|P∩G| / (|P| + |G|)`, 1 for two empty masks.
pub fn dice(pred: &[f64], gt: &[f64]) -> Result<f64> {
    same_len("dice", pred, gt)?;
    let (i, p, g) = counts(pred, gt);
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// `|P∩G| / |P∪G|`, 1 for two empty masks.
pub fn iou(pred: &[f64], gt: &[f64]) -> Result<f64> {
    same_len("iou", pred, gt)?;
    let (i, p, g) = counts(pred, gt);
    let u = p + g - i;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Mean absolute difference between a probability map and the ground truth.
pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    same_len("mae", pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub dice: f64,
    pub iou: f64,
    pub mae: f64,
}

impl ImageMetrics {
    pub fn compute(pred: &[f64], gt: &[f64]) -> Result<Self> {
        Ok(Self { dice: dice(pred, gt)?, iou: iou(pred, gt)?, mae: mae(pred, gt)? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub threshold: f64,
}

impl MetricReport {
    /// Metrics for every image of `B×1×H×W` prediction and ground-truth batches.
    pub fn from_batch(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::shape("metrics", format!("{:?} vs {:?}", pred.shape(), gt.shape())));
        }
        let b = pred.shape()[0];
        let per = pred.len() / b;
        let per_image = (0..b)
            .map(|i| {
                let r = i * per..(i + 1) * per;
                ImageMetrics::compute(&pred.data()[r.clone()], &gt.data()[r])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { per_image, threshold: THRESHOLD })
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.per_image.extend(other.per_image);
    }

    fn mean_of(&self, f: impl Fn(&ImageMetrics) -> f64) -> f64 {
        if self.per_image.is_empty() {
            return 0.0;
        }
        self.per_image.iter().map(f).sum::<f64>() / self.per_image.len() as f64
    }

    pub fn mean_dice(&self) -> f64 {
        self.mean_of(|m| m.dice)
    }

    pub fn mean_iou(&self) -> f64 {
        self.mean_of(|m| m.iou)
    }

    pub fn mean_mae(&self) -> f64 {
        self.mean_of(|m| m.mae)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint() {
        let a = [1.0, 0.0, 1.0, 0.0];
        let b = [0.0, 1.0, 0.0, 1.0];
        assert_eq!(ImageMetrics::compute(&a, &a).unwrap(), ImageMetrics { dice: 1.0, iou: 1.0, mae: 0.0 });
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn overlap_two_of_three() {
        let p = [1., 1., 1., 0., 0.];
        let g = [0., 1., 1., 1., 0.];
        assert!((dice(&p, &g).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(iou(&p, &g).unwrap(), 0.5);
    }

    #[test]
    fn empty_masks_score_one() {
        let z = [0.0; 9];
        assert_eq!(dice(&z, &z).unwrap(), 1.0);
        assert_eq!(iou(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn mismatched_lengths_error() {
        assert!(dice(&[1.0], &[1.0, 0.0]).is_err());
        assert!(mae(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn dataset_means_are_per_image_means() {
        let pred = Tensor::new(&[2, 1, 1, 2], alloc::vec![1., 1., 1., 0.]).unwrap();
        let gt = Tensor::new(&[2, 1, 1, 2], alloc::vec![1., 1., 0., 1.]).unwrap();
        let r = MetricReport::from_batch(&pred, &gt).unwrap();
        assert_eq!(r.mean_dice(), 0.5);
        assert_eq!(r.mean_iou(), 0.5);
        assert_eq!(r.mean_mae(), 0.5);
    }
}
