//! The assembled three-view segmenter.

use alloc::format;

use super::cnn::{CnnBranch, CnnConfig};
use super::fusion::{FusionModule, FusionOutput, CBAM_REDUCTION};
use super::layers::HeadUpsample;
use super::params::{Forward, Init, ParamId, ParamStore};
use super::transformer::{BranchFeatures, EncoderConfig, TransformerBranch};
use crate::coop::ViewWeights;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Number of views combined by the comprehensive decision.
pub const VIEWS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub encoder: EncoderConfig,
    /// Transformer map widths at 1/8 and 1/4.
    pub transformer_channels: [usize; 2],
    pub cnn: CnnConfig,
    /// GLFF output widths at 1/16, 1/8, 1/4.
    pub fusion_channels: [usize; 3],
    pub cbam_reduction: usize,
    pub glff: bool,
    pub dfm: bool,
    pub head_upsample: HeadUpsample,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 352,
            in_channels: 3,
            encoder: EncoderConfig::default(),
            transformer_channels: [128, 64],
            cnn: CnnConfig::default(),
            fusion_channels: [256, 128, 64],
            cbam_reduction: CBAM_REDUCTION,
            glff: true,
            dfm: true,
            head_upsample: HeadUpsample::Bilinear,
        }
    }
}

impl ModelConfig {
    /// Small configuration for 64×64 desk-scale experiments.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            encoder: EncoderConfig::toy(),
            transformer_channels: [32, 16],
            cnn: CnnConfig { stem_channels: 16, tap_channels: [16, 32, 64], units_per_stage: 2 },
            fusion_channels: [64, 32, 16],
            cbam_reduction: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(Error::Config(format!("image size {} is not divisible by 16", self.image_size)));
        }
        self.encoder.validate()?;
        self.cnn.validate()?;
        if self.transformer_channels.contains(&0) || self.fusion_channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn transformer_widths(&self) -> [usize; 3] {
        [self.encoder.d_model, self.transformer_channels[0], self.transformer_channels[1]]
    }

    /// CNN tap widths in fusion order (1/16, 1/8, 1/4).
    pub fn cnn_widths(&self) -> [usize; 3] {
        let [c4, c8, c16] = self.cnn.tap_channels;
        [c16, c8, c4]
    }
}

/// Everything one forward pass produces, as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutputs {
    /// `T0, T1, T2`
    pub transformer: BranchFeatures,
    /// `C0, C1, C2`
    pub cnn: BranchFeatures,
    pub fusion: FusionOutput,
    /// `Pre_1` (transformer), `Pre_2` (CNN), `Pre_3` (fusion), each `B×1×H×W`.
    pub views: [Var; VIEWS],
}

#[derive(Debug, Clone)]
pub struct HybridSegNet {
    pub config: ModelConfig,
    pub transformer: TransformerBranch,
    pub cnn: CnnBranch,
    pub fusion: FusionModule,
    /// Current view weights, stored with the parameters so checkpoints carry
    /// the decision rule.
    pub view_weights: ParamId,
}

impl HybridSegNet {
    /// Builds the model and its seeded initial parameters.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let size = (config.image_size, config.image_size);
        let transformer = TransformerBranch::new(
            &mut init.scope("transformer"),
            &config.encoder,
            config.in_channels,
            size,
            config.transformer_channels,
            config.head_upsample,
        )?;
        let cnn = CnnBranch::new(&mut init.scope("cnn"), &config.cnn, config.in_channels, config.head_upsample)?;
        let fusion = FusionModule::new(
            &mut init.scope("fusion"),
            config.transformer_widths(),
            config.cnn_widths(),
            config.fusion_channels,
            config.cbam_reduction,
            config.glff,
            config.dfm,
            config.head_upsample,
        );
        let view_weights = init.buffer("view_weights", ViewWeights::uniform(1.0).to_tensor());
        Ok((Self { config: config.clone(), transformer, cnn, fusion, view_weights }, store))
    }

    /// Records one full forward pass of `image` (`B×C×H×W`) on `f`.
    pub fn forward(&self, f: &mut Forward<'_>, image: Var) -> Result<ModelOutputs> {
        let (_, c, h, w) = f.tape.value(image).dims4("model")?;
        let s = self.config.image_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::shape(
                "model",
                format!("expected {}×{s}×{s} input, got {c}×{h}×{w}", self.config.in_channels),
            ));
        }
        let transformer = self.transformer.features(f, image)?;
        let cnn = self.cnn.features(f, image)?;
        let pre1 = self.transformer.view_head(f, transformer.maps[2])?;
        let pre2 = self.cnn.view_head(f, &cnn)?;
        let fusion = self.fusion.forward(f, transformer.maps, cnn.maps)?;
        Ok(ModelOutputs { transformer, cnn, fusion, views: [pre1, pre2, fusion.prediction] })
    }

    pub fn weights(&self, store: &ParamStore) -> ViewWeights {
        ViewWeights::from_tensor(store.get(self.view_weights))
    }

    pub fn set_weights(&self, store: &mut ParamStore, w: &ViewWeights) {
        *store.get_mut(self.view_weights) = w.to_tensor();
    }

    /// Eval-mode view predictions and their weighted decision for a batch.
    pub fn predict(&self, store: &mut ParamStore, images: &Tensor) -> Result<Prediction> {
        let weights = self.weights(store);
        let mut f = Forward::new(store, super::params::Mode::Eval);
        let x = f.tape.constant(images.clone());
        let out = self.forward(&mut f, x)?;
        let views = out.views.map(|v| f.tape.value(v).clone());
        let fused = crate::coop::fuse_decision(&weights, &views)?;
        Ok(Prediction { views, fused, weights })
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub views: [Tensor; VIEWS],
    pub fused: Tensor,
    pub weights: ViewWeights,
}
