//! Multi-view cooperation: per-view loss, entropy-regularized view weights and
//! the weighted comprehensive decision.
//!
//! With view losses `l_k` and temperature `λ`, the weights minimize
//! `Σ w_k·l_k + λ·Σ w_k·ln w_k` over the probability simplex, whose unique
//! minimizer is the softmax `w_k ∝ exp(−l_k/λ)`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::model::VIEWS;
use crate::tape::seg_loss_value;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewWeights {
    pub w: [f64; VIEWS],
    pub lambda: f64,
}

impl ViewWeights {
    pub fn uniform(lambda: f64) -> Self {
        Self { w: [1.0 / VIEWS as f64; VIEWS], lambda }
    }

    /// Vertex `k` of the simplex.
    pub fn vertex(k: usize, lambda: f64) -> Self {
        let mut w = [0.0; VIEWS];
        w[k] = 1.0;
        Self { w, lambda }
    }

    pub fn sum(&self) -> f64 {
        self.w.iter().sum()
    }

    /// `[w_1, w_2, w_3, λ]`
    pub fn to_tensor(&self) -> Tensor {
        let mut v = self.w.to_vec();
        v.push(self.lambda);
        Tensor::new(&[VIEWS + 1], v).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let d = t.data();
        let mut w = [0.0; VIEWS];
        w.copy_from_slice(&d[..VIEWS]);
        Self { w, lambda: d[VIEWS] }
    }
}

/// Soft-IoU plus pixel-mean BCE of a `B×1×H×W` probability map against a
/// binary ground truth, averaged over images.
pub fn view_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("view_loss", format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    if gt.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Contract("view_loss: ground truth must be strictly binary".into()));
    }
    Ok(seg_loss_value(pred, gt, None))
}

/// Closed-form minimizer of the entropy-regularized objective, computed with
/// a max shift.
pub fn solve_weights(losses: &[f64; VIEWS], lambda: f64) -> Result<ViewWeights> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("lambda must be positive and finite, got {lambda}")));
    }
    if let Some(k) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("loss of view {}", k + 1)));
    }
    let logits = losses.map(|l| -l / lambda);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|z| libm::exp(z - max));
    let s: f64 = e.iter().sum();
    Ok(ViewWeights { w: e.map(|v| v / s), lambda })
}

/// `Σ w_k·l_k + λ·Σ w_k·ln w_k` with `0·ln 0 = 0`.
pub fn total_objective(w: &ViewWeights, losses: &[f64; VIEWS]) -> f64 {
    let data: f64 = w.w.iter().zip(losses).map(|(w, l)| w * l).sum();
    let neg_entropy: f64 = w.w.iter().map(|&w| if w > 0.0 { w * libm::log(w) } else { 0.0 }).sum();
    data + w.lambda * neg_entropy
}

/// `Out = Σ w_k·Pre_k`.
pub fn fuse_decision(w: &ViewWeights, views: &[Tensor; VIEWS]) -> Result<Tensor> {
    let shape = views[0].shape();
    for v in &views[1..] {
        if v.shape() != shape {
            return Err(Error::shape("fuse_decision", format!("{:?} vs {shape:?}", v.shape())));
        }
    }
    let data: Vec<f64> = (0..views[0].len())
        .map(|i| {
            let mut acc = 0.0;
            for k in 0..VIEWS {
                if w.w[k] != 0.0 {
                    acc += w.w[k] * views[k].data()[i];
                }
            }
            acc
        })
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let y = Tensor::new(&[1, 1, 2, 2], alloc::vec![1., 0., 0., 1.]).unwrap();
        let l = view_loss(&y, &y).unwrap();
        assert!((0.0..1e-6).contains(&l), "{l}");
    }

    #[test]
    fn constant_half_prediction_golden() {
        let y = Tensor::new(&[1, 1, 2, 2], alloc::vec![1., 1., 0., 0.]).unwrap();
        let p = Tensor::full(&[1, 1, 2, 2], 0.5);
        let l = view_loss(&p, &y).unwrap();
        let expect = 2.0 / 3.0 + core::f64::consts::LN_2;
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 1.359814).abs() < 1e-6);
    }

    #[test]
    fn view_loss_rejects_bad_inputs() {
        let p = Tensor::full(&[1, 1, 2, 2], 0.5);
        let soft = Tensor::full(&[1, 1, 2, 2], 0.3);
        assert!(matches!(view_loss(&p, &soft), Err(Error::Contract(_))));
        let other = Tensor::zeros(&[1, 1, 2, 3]);
        assert!(matches!(view_loss(&p, &other), Err(Error::Shape { .. })));
    }

    #[test]
    fn equal_losses_give_uniform_weights() {
        for lambda in [0.01, 1.0, 100.0] {
            let w = solve_weights(&[0.7; 3], lambda).unwrap();
            for v in w.w {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nonpositive_lambda_is_a_domain_error() {
        assert!(matches!(solve_weights(&[1., 2., 3.], 0.0), Err(Error::Domain(_))));
        assert!(matches!(solve_weights(&[1., 2., 3.], -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn temperature_limits() {
        let hot = solve_weights(&[0.2, 0.5, 0.9], 1e6).unwrap();
        assert!(hot.w.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-6));
        let cold = solve_weights(&[0.2, 0.5, 0.9], 1e-6).unwrap();
        assert!((cold.w[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn objective_closed_forms() {
        let u = ViewWeights::uniform(1.0);
        let v = total_objective(&u, &[1.0; 3]);
        assert!((v - (1.0 + libm::log(1.0 / 3.0))).abs() < 1e-15);
        assert!((v + 0.098612).abs() < 1e-6);
        let e1 = ViewWeights::vertex(0, 1.0);
        assert_eq!(total_objective(&e1, &[0.4, 2.0, 3.0]), 0.4);
    }

    #[test]
    fn decision_vertex_and_fixed_point() {
        let mut rng = SeededRng::new(3);
        let views = [0, 1, 2].map(|_| rng.uniform_tensor(&[1, 1, 4, 4], 0.0, 1.0));
        for k in 0..3 {
            let out = fuse_decision(&ViewWeights::vertex(k, 1.0), &views).unwrap();
            assert_eq!(out, views[k]);
        }
        let same = [views[0].clone(), views[0].clone(), views[0].clone()];
        let w = ViewWeights { w: [0.2, 0.3, 0.5], lambda: 1.0 };
        assert!(fuse_decision(&w, &same).unwrap().max_abs_diff(&views[0]) < 1e-15);
    }
}
