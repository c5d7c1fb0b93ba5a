//! Parameterized building blocks shared by the branches and the fusion module.

use alloc::vec::Vec;

use libm::sqrt;

use super::params::{Forward, Init, Mode, ParamId};
use crate::error::Result;
use crate::tape::{BinaryOp, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Token-wise affine map `x·W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, in_dim: usize, out_dim: usize, std: f64, bias: bool) -> Self {
        let weight = init.normal("weight", &[in_dim, out_dim], std);
        let bias = bias.then(|| init.constant("bias", &[out_dim], 0.0));
        Self { weight, bias, out_dim }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let y = f.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let rank = f.tape.value(y).rank();
                let mut shape = alloc::vec![1; rank];
                shape[rank - 1] = self.out_dim;
                let b = f.param(b);
                let b = f.tape.reshape(b, &shape)?;
                f.tape.broadcast(y, b, BinaryOp::Add)
            }
            None => Ok(y),
        }
    }
}

/// Square-kernel convolution with "same" padding for stride 1.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// He-normal initialized kernel, zero bias.
    pub fn new(
        init: &mut Init<'_>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let std = sqrt(2.0 / (cin * kernel * kernel) as f64);
        let weight = init.normal("weight", &[cout, cin, kernel, kernel], std);
        let bias = bias.then(|| init.constant("bias", &[cout], 0.0));
        Self { weight, bias, out_channels: cout, stride, padding: kernel / 2 }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let y = f.tape.conv2d(x, w, self.stride, self.padding)?;
        match self.bias {
            Some(b) => {
                let b = f.param(b);
                let b = f.tape.reshape(b, &[1, self.out_channels, 1, 1])?;
                f.tape.broadcast(y, b, BinaryOp::Add)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(init: &mut Init<'_>, channels: usize) -> Self {
        Self {
            gamma: init.constant("gamma", &[channels], 1.0),
            beta: init.constant("beta", &[channels], 0.0),
            running_mean: init.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: init.buffer("running_var", Tensor::ones(&[channels])),
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        match f.mode() {
            Mode::Train => {
                let (y, stats) = f.tape.batch_norm_train(x, g, b, BN_EPS)?;
                let store = f.store_mut();
                blend(store.get_mut(self.running_mean).data_mut(), &stats.mean);
                blend(store.get_mut(self.running_var).data_mut(), &stats.var);
                Ok(y)
            }
            Mode::Eval => {
                let mean: Vec<f64> = f.store().get(self.running_mean).data().to_vec();
                let var: Vec<f64> = f.store().get(self.running_var).data().to_vec();
                f.tape.batch_norm_eval(x, g, b, &mean, &var, BN_EPS)
            }
        }
    }
}

fn blend(running: &mut [f64], batch: &[f64]) {
    for (r, b) in running.iter_mut().zip(batch) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, dim: usize) -> Self {
        Self { gamma: init.constant("gamma", &[dim], 1.0), beta: init.constant("beta", &[dim], 0.0) }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        f.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// 3×3 convolution, batch norm, ReLU.
///
/// With `stride` 2 the input is first halved by 2×2 average pooling: an odd
/// kernel at stride 2 cannot map an even size to an integral one.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub pool: bool,
}

impl ConvUnit {
    pub fn new(init: &mut Init<'_>, cin: usize, cout: usize, stride: usize) -> Self {
        assert!(stride == 1 || stride == 2, "ConvUnit stride must be 1 or 2");
        let conv = Conv::new(&mut init.scope("conv"), cin, cout, 3, 1, false);
        let bn = BatchNorm::new(&mut init.scope("bn"), cout);
        Self { conv, bn, pool: stride == 2 }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let x = if self.pool { f.tape.avg_pool2x2(x)? } else { x };
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        Ok(f.tape.relu(y))
    }
}

/// How view heads bring their quarter-resolution logits up to input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadUpsample {
    /// Two nearest-neighbour 2× steps.
    Nearest,
    /// One bilinear 4× step.
    Bilinear,
}

/// Quarter-resolution logits to a full-resolution probability map.
pub fn logits_to_probability(f: &mut Forward<'_>, logits: Var, mode: HeadUpsample) -> Result<Var> {
    let up = match mode {
        HeadUpsample::Nearest => {
            let u = f.tape.upsample2x_nearest(logits)?;
            f.tape.upsample2x_nearest(u)?
        }
        HeadUpsample::Bilinear => f.tape.upsample_bilinear(logits, 4)?,
    };
    Ok(f.tape.sigmoid(up))
}
