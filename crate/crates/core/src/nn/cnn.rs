//! Local-feature branch: a compact densely connected convolutional encoder
//! with taps at 1/4, 1/8 and 1/16 of the input.

use alloc::format;
use alloc::vec::Vec;

use super::layers::{logits_to_probability, Conv, ConvUnit, HeadUpsample};
use super::params::{Forward, Init};
use super::transformer::BranchFeatures;
use crate::error::{Error, Result};
use crate::tape::Var;

#[derive(Debug, Clone, PartialEq)]
pub struct CnnConfig {
    pub stem_channels: usize,
    /// Tap widths at scales 1/4, 1/8, 1/16.
    pub tap_channels: [usize; 3],
    /// Conv units after the downsampling unit of every stage.
    pub units_per_stage: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self { stem_channels: 32, tap_channels: [64, 128, 256], units_per_stage: 2 }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.tap_channels.contains(&0) {
            return Err(Error::Config("CNN channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// One resolution level: a stride-2 unit followed by densely connected units
/// whose input is the concatenation of every map produced in the stage so far.
#[derive(Debug, Clone)]
pub struct DenseStage {
    pub down: ConvUnit,
    pub units: Vec<ConvUnit>,
}

impl DenseStage {
    fn new(init: &mut Init<'_>, cin: usize, cout: usize, units: usize) -> Self {
        let down = ConvUnit::new(&mut init.scope("down"), cin, cout, 2);
        let units = (0..units)
            .map(|j| ConvUnit::new(&mut init.scope(&format!("unit{j}")), cout * (j + 1), cout, 1))
            .collect();
        Self { down, units }
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let mut produced = alloc::vec![self.down.forward(f, x)?];
        for u in &self.units {
            let input = if produced.len() == 1 { produced[0] } else { f.tape.concat_channels(&produced)? };
            produced.push(u.forward(f, input)?);
        }
        Ok(*produced.last().unwrap())
    }
}

#[derive(Debug, Clone)]
pub struct CnnBranch {
    pub cfg: CnnConfig,
    pub stem: ConvUnit,
    pub stages: [DenseStage; 3],
    pub lateral: [Conv; 3],
    pub head: Conv,
    pub head_upsample: HeadUpsample,
}

impl CnnBranch {
    pub fn new(init: &mut Init<'_>, cfg: &CnnConfig, in_channels: usize, head_upsample: HeadUpsample) -> Result<Self> {
        cfg.validate()?;
        let [c4, c8, c16] = cfg.tap_channels;
        let k = cfg.units_per_stage;
        let stem = ConvUnit::new(&mut init.scope("stem"), in_channels, cfg.stem_channels, 2);
        let stages = [
            DenseStage::new(&mut init.scope("stage4"), cfg.stem_channels, c4, k),
            DenseStage::new(&mut init.scope("stage8"), c4, c8, k),
            DenseStage::new(&mut init.scope("stage16"), c8, c16, k),
        ];
        // top-down decoder width is the 1/4 tap width
        let lateral = [
            Conv::new(&mut init.scope("lateral16"), c16, c4, 1, 1, true),
            Conv::new(&mut init.scope("lateral8"), c8, c4, 1, 1, true),
            Conv::new(&mut init.scope("lateral4"), c4, c4, 1, 1, true),
        ];
        let head = Conv::new(&mut init.scope("head"), c4, 1, 1, 1, true);
        Ok(Self { cfg: cfg.clone(), stem, stages, lateral, head, head_upsample })
    }

    /// Taps ordered like the transformer branch: `[C0 (1/16), C1 (1/8), C2 (1/4)]`.
    pub fn features(&self, f: &mut Forward<'_>, image: Var) -> Result<BranchFeatures> {
        let (_, _, h, w) = f.tape.value(image).dims4("cnn_forward")?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape("cnn_forward", format!("image {h}×{w} is not divisible by 16")));
        }
        let x = self.stem.forward(f, image)?;
        let c2 = self.stages[0].forward(f, x)?;
        let c1 = self.stages[1].forward(f, c2)?;
        let c0 = self.stages[2].forward(f, c1)?;
        Ok(BranchFeatures { maps: [c0, c1, c2] })
    }

    /// Top-down merge of the three taps into the CNN view prediction.
    pub fn view_head(&self, f: &mut Forward<'_>, taps: &BranchFeatures) -> Result<Var> {
        let [c0, c1, c2] = taps.maps;
        let p = self.lateral[0].forward(f, c0)?;
        let p = f.tape.upsample2x_nearest(p)?;
        let l1 = self.lateral[1].forward(f, c1)?;
        let p = f.tape.add(p, l1)?;
        let p = f.tape.upsample2x_nearest(p)?;
        let l2 = self.lateral[2].forward(f, c2)?;
        let p = f.tape.add(p, l2)?;
        let logits = self.head.forward(f, p)?;
        logits_to_probability(f, logits, self.head_upsample)
    }
}
