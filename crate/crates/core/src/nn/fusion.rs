//! Fusion module: per-scale global-local feature fusion (GLFF) with CBAM
//! gating, followed by dense top-down fusion of the three scales (DFM).

use alloc::format;

use super::layers::{logits_to_probability, Conv, ConvUnit, HeadUpsample, Linear};
use super::params::{Forward, Init};
use crate::error::{Error, Result};
use crate::tape::{BinaryOp, Var};

pub const CBAM_REDUCTION: usize = 16;
pub const CBAM_SPATIAL_KERNEL: usize = 7;

/// Channel attention followed by spatial attention.
#[derive(Debug, Clone)]
pub struct Cbam {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv,
    pub channels: usize,
}

impl Cbam {
    /// `reduction` is clamped so the hidden width is at least one.
    pub fn new(init: &mut Init<'_>, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        let std = libm::sqrt(2.0 / channels as f64);
        let fc1 = Linear::new(&mut init.scope("fc1"), channels, hidden, std, true);
        let fc2 = Linear::new(&mut init.scope("fc2"), hidden, channels, libm::sqrt(2.0 / hidden as f64), true);
        let spatial = Conv::new(&mut init.scope("spatial"), 2, 1, CBAM_SPATIAL_KERNEL, 1, true);
        Self { fc1, fc2, spatial, channels }
    }

    fn shared_mlp(&self, f: &mut Forward<'_>, pooled: Var, batch: usize) -> Result<Var> {
        let v = f.tape.reshape(pooled, &[batch, self.channels])?;
        let h = self.fc1.forward(f, v)?;
        let h = f.tape.relu(h);
        self.fc2.forward(f, h)
    }

    /// Channel gate `B×C×1×1`.
    pub fn channel_gate(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let batch = f.tape.value(x).shape()[0];
        let avg = f.tape.spatial_mean(x)?;
        let max = f.tape.spatial_max(x)?;
        let a = self.shared_mlp(f, avg, batch)?;
        let m = self.shared_mlp(f, max, batch)?;
        let s = f.tape.add(a, m)?;
        let s = f.tape.sigmoid(s);
        f.tape.reshape(s, &[batch, self.channels, 1, 1])
    }

    /// Spatial gate `B×1×H×W`.
    pub fn spatial_gate(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let avg = f.tape.channel_mean(x)?;
        let max = f.tape.channel_max(x)?;
        let cat = f.tape.concat_channels(&[avg, max])?;
        let s = self.spatial.forward(f, cat)?;
        Ok(f.tape.sigmoid(s))
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let mc = self.channel_gate(f, x)?;
        let x1 = f.tape.broadcast(x, mc, BinaryOp::Mul)?;
        let ms = self.spatial_gate(f, x1)?;
        f.tape.broadcast(x1, ms, BinaryOp::Mul)
    }
}

#[derive(Debug, Clone)]
pub enum Glff {
    /// Project both inputs to the fused width, concatenate, fuse with a conv
    /// unit and gate with CBAM.
    Full { proj_t: Conv, proj_c: Conv, fuse: ConvUnit, cbam: Cbam },
    /// Ablation: a single 1×1 conv over the concatenated inputs.
    Plain { conv: Conv },
}

impl Glff {
    pub fn new(
        init: &mut Init<'_>,
        t_channels: usize,
        c_channels: usize,
        out: usize,
        reduction: usize,
        enabled: bool,
    ) -> Self {
        if enabled {
            Glff::Full {
                proj_t: Conv::new(&mut init.scope("proj_t"), t_channels, out, 1, 1, true),
                proj_c: Conv::new(&mut init.scope("proj_c"), c_channels, out, 1, 1, true),
                fuse: ConvUnit::new(&mut init.scope("fuse"), 2 * out, out, 1),
                cbam: Cbam::new(&mut init.scope("cbam"), out, reduction),
            }
        } else {
            Glff::Plain { conv: Conv::new(&mut init.scope("plain"), t_channels + c_channels, out, 1, 1, true) }
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, t: Var, c: Var) -> Result<Var> {
        let st = f.tape.value(t).shape();
        let sc = f.tape.value(c).shape();
        if st[0] != sc[0] || st[2..] != sc[2..] {
            return Err(Error::shape("glff", format!("branch maps {st:?} and {sc:?} differ in scale")));
        }
        match self {
            Glff::Full { proj_t, proj_c, fuse, cbam } => {
                let pt = proj_t.forward(f, t)?;
                let pc = proj_c.forward(f, c)?;
                let cat = f.tape.concat_channels(&[pt, pc])?;
                let fused = fuse.forward(f, cat)?;
                cbam.forward(f, fused)
            }
            Glff::Plain { conv } => {
                let cat = f.tape.concat_channels(&[t, c])?;
                conv.forward(f, cat)
            }
        }
    }
}

/// Intermediate maps of the dense fusion, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct DfmTrace {
    pub f0_1: Var,
    pub f1_1: Var,
    pub f1_2: Var,
    pub lifted: Var,
    pub f2_1: Var,
    pub f2_2: Var,
}

#[derive(Debug, Clone)]
pub struct Dfm {
    pub unit0: ConvUnit,
    pub adapt1: Conv,
    pub unit1: ConvUnit,
    pub lift: Conv,
    pub unit2: ConvUnit,
    pub out1: ConvUnit,
    pub out2: ConvUnit,
    pub head: Conv,
}

impl Dfm {
    pub fn new(init: &mut Init<'_>, channels: [usize; 3]) -> Self {
        let [c0, c1, c2] = channels;
        Self {
            unit0: ConvUnit::new(&mut init.scope("unit0"), c0, c1, 1),
            adapt1: Conv::new(&mut init.scope("adapt1"), c1, c1, 1, 1, true),
            unit1: ConvUnit::new(&mut init.scope("unit1"), 2 * c1, c1, 1),
            lift: Conv::new(&mut init.scope("lift"), c1, c2, 1, 1, true),
            unit2: ConvUnit::new(&mut init.scope("unit2"), 2 * c2, c2, 1),
            out1: ConvUnit::new(&mut init.scope("out1"), c2, c2, 1),
            out2: ConvUnit::new(&mut init.scope("out2"), c2, c2, 1),
            head: Conv::new(&mut init.scope("head"), c2, 1, 1, 1, true),
        }
    }

    /// Returns the 1/4-scale logits and the intermediate maps.
    pub fn forward(&self, f: &mut Forward<'_>, fused: [Var; 3]) -> Result<(Var, DfmTrace)> {
        let [f0, f1, f2] = fused;
        let stage = |e: Error, name: &str| match e {
            Error::Shape { detail, .. } => Error::Shape { op: "dfm", detail: format!("{name}: {detail}") },
            other => other,
        };
        let u0 = self.unit0.forward(f, f0)?;
        let f0_1 = f.tape.upsample2x_nearest(u0)?;
        let a1 = self.adapt1.forward(f, f0_1).map_err(|e| stage(e, "F1-1 adapter"))?;
        let f1_1 = f.tape.add(a1, f1).map_err(|e| stage(e, "F1-1 sum"))?;
        let cat1 = f.tape.concat_channels(&[f0_1, f1_1]).map_err(|e| stage(e, "F1-2 concat"))?;
        let f1_2 = self.unit1.forward(f, cat1).map_err(|e| stage(e, "F1-2 unit"))?;
        let up = f.tape.upsample2x_nearest(f1_2)?;
        let lifted = self.lift.forward(f, up).map_err(|e| stage(e, "lift"))?;
        let f2_1 = f.tape.add(lifted, f2).map_err(|e| stage(e, "F2-1 sum"))?;
        let cat2 = f.tape.concat_channels(&[lifted, f2_1]).map_err(|e| stage(e, "F2-2 concat"))?;
        let f2_2 = self.unit2.forward(f, cat2).map_err(|e| stage(e, "F2-2 unit"))?;
        let o = self.out1.forward(f, f2_2)?;
        let o = self.out2.forward(f, o)?;
        let logits = self.head.forward(f, o)?;
        Ok((logits, DfmTrace { f0_1, f1_1, f1_2, lifted, f2_1, f2_2 }))
    }
}

#[derive(Debug, Clone)]
pub enum FusionDecoder {
    Dense(Dfm),
    /// Ablation: 1×1 conv head on the 1/4-scale fused map only.
    Plain(Conv),
}

#[derive(Debug, Clone)]
pub struct FusionModule {
    pub glff: [Glff; 3],
    pub decoder: FusionDecoder,
    pub head_upsample: HeadUpsample,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// `F_0, F_1, F_2`
    pub fused: [Var; 3],
    pub trace: Option<DfmTrace>,
    pub prediction: Var,
}

impl FusionModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init<'_>,
        t_channels: [usize; 3],
        c_channels: [usize; 3],
        fused_channels: [usize; 3],
        reduction: usize,
        glff_on: bool,
        dfm_on: bool,
        head_upsample: HeadUpsample,
    ) -> Self {
        let glff = [0, 1, 2].map(|i| {
            Glff::new(
                &mut init.scope(&format!("glff{i}")),
                t_channels[i],
                c_channels[i],
                fused_channels[i],
                reduction,
                glff_on,
            )
        });
        let decoder = if dfm_on {
            FusionDecoder::Dense(Dfm::new(&mut init.scope("dfm"), fused_channels))
        } else {
            FusionDecoder::Plain(Conv::new(&mut init.scope("plain_head"), fused_channels[2], 1, 1, 1, true))
        };
        Self { glff, decoder, head_upsample }
    }

    pub fn forward(&self, f: &mut Forward<'_>, t: [Var; 3], c: [Var; 3]) -> Result<FusionOutput> {
        let mut fused = [t[0]; 3];
        for i in 0..3 {
            fused[i] = self.glff[i].forward(f, t[i], c[i])?;
        }
        let (logits, trace) = match &self.decoder {
            FusionDecoder::Dense(dfm) => {
                let (l, tr) = dfm.forward(f, fused)?;
                (l, Some(tr))
            }
            FusionDecoder::Plain(head) => (head.forward(f, fused[2])?, None),
        };
        let prediction = logits_to_probability(f, logits, self.head_upsample)?;
        Ok(FusionOutput { fused, trace, prediction })
    }
}
