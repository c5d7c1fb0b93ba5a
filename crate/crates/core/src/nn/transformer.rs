//! Global-feature branch: patch embedding, a pre-norm encoder stack and
//! progressive upsampling to three feature scales.

use alloc::format;
use alloc::vec::Vec;

use libm::sqrt;

use super::layers::{logits_to_probability, Conv, ConvUnit, HeadUpsample, LayerNorm, Linear};
use super::params::{Forward, Init, ParamId};
use crate::error::{Error, Result};
use crate::tape::{BinaryOp, Var};

/// Std of the normal used for every transformer projection and the
/// positional embedding.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
}

impl Default for EncoderConfig {
    /// DeiT-small dimensions.
    fn default() -> Self {
        Self { depth: 12, d_model: 384, heads: 6, mlp_ratio: 4.0, patch_size: 16 }
    }
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self { depth: 2, d_model: 64, heads: 4, ..Self::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        libm::round(self.d_model as f64 * self.mlp_ratio) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be ≥ 1".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.patch_size == 0 || self.mlp_dim() == 0 {
            return Err(Error::Config("patch size and MLP width must be positive".into()));
        }
        Ok(())
    }
}

/// Patch tokens with the grid they were cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSequence {
    /// `B×N×d_model`
    pub tokens: Var,
    pub rows: usize,
    pub cols: usize,
}

/// Per-head projections `W^Q_i`, `W^K_i`, `W^V_i` (each `d_model×d_head`)
/// and the output projection `W^o` (`h·d_head×d_model`).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!("d_model {d_model} is not divisible by {heads} heads")));
        }
        let dh = d_model / heads;
        let mut proj = |kind: &str| -> Vec<ParamId> {
            (0..heads)
                .map(|i| init.normal(&format!("{kind}{i}"), &[d_model, dh], INIT_STD))
                .collect()
        };
        let query = proj("wq");
        let key = proj("wk");
        let value = proj("wv");
        let output = init.normal("wo", &[heads * dh, d_model], INIT_STD);
        Ok(Self { query, key, value, output, head_dim: dh })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(f, x)?.0)
    }

    /// Also returns each head's `B×N×N` attention matrix.
    pub fn forward_with_weights(&self, f: &mut Forward<'_>, x: Var) -> Result<(Var, Vec<Var>)> {
        let scale = 1.0 / sqrt(self.head_dim as f64);
        let mut heads = Vec::with_capacity(self.query.len());
        let mut attn = Vec::with_capacity(self.query.len());
        for i in 0..self.query.len() {
            let (wq, wk, wv) = (f.param(self.query[i]), f.param(self.key[i]), f.param(self.value[i]));
            let q = f.tape.matmul(x, wq)?;
            let k = f.tape.matmul(x, wk)?;
            let v = f.tape.matmul(x, wv)?;
            let kt = f.tape.transpose_last2(k)?;
            let logits = f.tape.batch_matmul(q, kt)?;
            let logits = f.tape.scale(logits, scale);
            let a = f.tape.softmax_lastdim(logits);
            heads.push(f.tape.batch_matmul(a, v)?);
            attn.push(a);
        }
        let cat = f.tape.concat_lastdim(&heads)?;
        let wo = f.param(self.output);
        Ok((f.tape.matmul(cat, wo)?, attn))
    }
}

/// `X' = X + MSA(LN(X))`, `T = X' + MLP(LN(X'))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderBlock {
    pub fn new(init: &mut Init<'_>, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut init.scope("norm1"), cfg.d_model),
            attn: MultiHeadAttention::new(&mut init.scope("attn"), cfg.d_model, cfg.heads)?,
            norm2: LayerNorm::new(&mut init.scope("norm2"), cfg.d_model),
            fc1: Linear::new(&mut init.scope("fc1"), cfg.d_model, cfg.mlp_dim(), INIT_STD, true),
            fc2: Linear::new(&mut init.scope("fc2"), cfg.mlp_dim(), cfg.d_model, INIT_STD, true),
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let n = self.norm1.forward(f, x)?;
        let a = self.attn.forward(f, n)?;
        let x1 = f.tape.add(x, a)?;
        let n2 = self.norm2.forward(f, x1)?;
        let h = self.fc1.forward(f, n2)?;
        let h = f.tape.gelu(h);
        let m = self.fc2.forward(f, h)?;
        f.tape.add(x1, m)
    }
}

/// Output of the branch before its view head.
#[derive(Debug, Clone, Copy)]
pub struct BranchFeatures {
    /// Scales 1/16, 1/8, 1/4 of the input, each `B×C×h×w`.
    pub maps: [Var; 3],
}

#[derive(Debug, Clone)]
pub struct TransformerBranch {
    pub cfg: EncoderConfig,
    pub patch_proj: Linear,
    pub pos_embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub up1: ConvUnit,
    pub up2: ConvUnit,
    pub head: Conv,
    pub head_upsample: HeadUpsample,
    grid: (usize, usize),
}

impl TransformerBranch {
    /// `channels` are the widths of the 1/8 and 1/4 maps.
    pub fn new(
        init: &mut Init<'_>,
        cfg: &EncoderConfig,
        in_channels: usize,
        image_size: (usize, usize),
        channels: [usize; 2],
        head_upsample: HeadUpsample,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        if !image_size.0.is_multiple_of(p) || !image_size.1.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "patch size {p} does not divide image {}×{}",
                image_size.0, image_size.1
            )));
        }
        let grid = (image_size.0 / p, image_size.1 / p);
        let patch_proj =
            Linear::new(&mut init.scope("patch_embed"), in_channels * p * p, cfg.d_model, INIT_STD, true);
        let pos_embed = init.normal("pos_embed", &[1, grid.0 * grid.1, cfg.d_model], INIT_STD);
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(&mut init.scope(&format!("block{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        let up1 = ConvUnit::new(&mut init.scope("up1"), cfg.d_model, channels[0], 1);
        let up2 = ConvUnit::new(&mut init.scope("up2"), channels[0], channels[1], 1);
        let head = Conv::new(&mut init.scope("head"), channels[1], 1, 1, 1, true);
        Ok(Self { cfg: cfg.clone(), patch_proj, pos_embed, blocks, up1, up2, head, head_upsample, grid })
    }

    pub fn patch_embed(&self, f: &mut Forward<'_>, image: Var) -> Result<TokenSequence> {
        let (_, _, h, w) = f.tape.value(image).dims4("patch_embed")?;
        let p = self.cfg.patch_size;
        if h % p != 0 || w % p != 0 || (h / p, w / p) != self.grid {
            return Err(Error::shape(
                "patch_embed",
                format!("image {h}×{w} does not give the {:?} patch grid of size {p}", self.grid),
            ));
        }
        let patches = f.tape.patchify(image, p)?;
        let tokens = self.patch_proj.forward(f, patches)?;
        let pos = f.param(self.pos_embed);
        let tokens = f.tape.broadcast(tokens, pos, BinaryOp::Add)?;
        Ok(TokenSequence { tokens, rows: self.grid.0, cols: self.grid.1 })
    }

    pub fn encode(&self, f: &mut Forward<'_>, seq: TokenSequence) -> Result<TokenSequence> {
        let mut x = seq.tokens;
        for b in &self.blocks {
            x = b.forward(f, x)?;
        }
        Ok(TokenSequence { tokens: x, ..seq })
    }

    /// `T0` reshaped from tokens, then two rounds of conv unit + 2× upsample.
    pub fn postprocess(&self, f: &mut Forward<'_>, seq: TokenSequence) -> Result<BranchFeatures> {
        let t0 = f.tape.tokens_to_map(seq.tokens, seq.rows, seq.cols)?;
        let t1 = self.up1.forward(f, t0)?;
        let t1 = f.tape.upsample2x_nearest(t1)?;
        let t2 = self.up2.forward(f, t1)?;
        let t2 = f.tape.upsample2x_nearest(t2)?;
        Ok(BranchFeatures { maps: [t0, t1, t2] })
    }

    pub fn features(&self, f: &mut Forward<'_>, image: Var) -> Result<BranchFeatures> {
        let seq = self.patch_embed(f, image)?;
        let seq = self.encode(f, seq)?;
        self.postprocess(f, seq)
    }

    /// View prediction from the 1/4-scale map.
    pub fn view_head(&self, f: &mut Forward<'_>, t2: Var) -> Result<Var> {
        let logits = self.head.forward(f, t2)?;
        logits_to_probability(f, logits, self.head_upsample)
    }
}
