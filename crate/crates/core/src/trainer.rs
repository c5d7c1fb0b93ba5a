//! Alternating optimization of view weights and model parameters.
//!
//! Every step runs the three views on a batch, solves the view weights in
//! closed form with the parameters fixed, then takes one Adam step on
//! `Σ w_k·loss_k` with the weights held constant.

use alloc::format;
use alloc::vec::Vec;

use crate::coop::{solve_weights, total_objective, ViewWeights};
use crate::error::{Error, Result};
use crate::nn::model::{HybridSegNet, VIEWS};
use crate::nn::params::{Forward, Mode, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Batch {
    /// `B×C×H×W` in [0, 1]
    pub images: Tensor,
    /// `B×1×H×W` binary
    pub masks: Tensor,
    /// Optional per-pixel loss weights, same shape as `masks`.
    pub pixel_weights: Option<Tensor>,
}

impl Batch {
    pub fn new(images: Tensor, masks: Tensor) -> Self {
        Self { images, masks, pixel_weights: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub losses: [f64; VIEWS],
    pub weights: ViewWeights,
    /// Cooperative objective at the solved weights, before the parameter step.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub steps: Vec<StepReport>,
}

impl EpochReport {
    pub fn mean_losses(&self) -> [f64; VIEWS] {
        let n = self.steps.len() as f64;
        let mut m = [0.0; VIEWS];
        for s in &self.steps {
            for k in 0..VIEWS {
                m[k] += s.losses[k] / n;
            }
        }
        m
    }

    pub fn mean_objective(&self) -> f64 {
        self.steps.iter().map(|s| s.objective).sum::<f64>() / self.steps.len() as f64
    }

    pub fn last_weights(&self) -> ViewWeights {
        self.steps.last().expect("non-empty epoch").weights
    }
}

/// Stop when the epoch objective has not improved by more than `min_delta`
/// for `patience` consecutive epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
}

#[derive(Debug, Clone)]
pub struct CoopTrainer {
    pub model: HybridSegNet,
    pub store: ParamStore,
    pub adam: Adam,
    pub lambda: f64,
}

impl CoopTrainer {
    pub fn new(model: HybridSegNet, mut store: ParamStore, adam: AdamConfig, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
        }
        model.set_weights(&mut store, &ViewWeights::uniform(lambda));
        let adam = Adam::new(adam, &store);
        Ok(Self { model, store, adam, lambda })
    }

    fn forward_losses<'a>(store: &'a mut ParamStore, model: &HybridSegNet, batch: &Batch) -> Result<(Forward<'a>, [Var; VIEWS], [f64; VIEWS])> {
        let mut f = Forward::new(store, Mode::Train);
        let x = f.tape.constant(batch.images.clone());
        let out = model.forward(&mut f, x)?;
        let mut vars = [x; VIEWS];
        let mut values = [0.0; VIEWS];
        for k in 0..VIEWS {
            vars[k] = f
                .tape
                .seg_loss(out.views[k], &batch.masks, batch.pixel_weights.as_ref())
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::NonFinite(format!("loss of view {}", k + 1)),
                    other => other,
                })?;
            values[k] = f.tape.value(vars[k]).item()?;
        }
        Ok((f, vars, values))
    }

    /// Per-view losses on a batch with the current parameters (batch-statistics
    /// mode, no update).
    pub fn view_losses(&mut self, batch: &Batch) -> Result<[f64; VIEWS]> {
        Ok(Self::forward_losses(&mut self.store, &self.model, batch)?.2)
    }

    pub fn step(&mut self, batch: &Batch) -> Result<StepReport> {
        let (mut f, vars, losses) = Self::forward_losses(&mut self.store, &self.model, batch)?;
        let weights = solve_weights(&losses, self.lambda)?;
        let objective = total_objective(&weights, &losses);

        let mut total = f.tape.scale(vars[0], weights.w[0]);
        for k in 1..VIEWS {
            let term = f.tape.scale(vars[k], weights.w[k]);
            total = f.tape.add(total, term)?;
        }
        let grads = f.tape.backward(total)?;
        let param_grads = f.param_grads(&grads);
        drop(f);
        self.adam.update(&mut self.store, &param_grads);
        self.model.set_weights(&mut self.store, &weights);
        Ok(StepReport { losses, weights, objective })
    }

    pub fn train_epoch(&mut self, batches: &[Batch]) -> Result<EpochReport> {
        if batches.is_empty() {
            return Err(Error::Contract("train_epoch needs at least one batch".into()));
        }
        let steps = batches.iter().map(|b| self.step(b)).collect::<Result<Vec<_>>>()?;
        Ok(EpochReport { steps })
    }

    /// Runs up to `epochs` epochs, calling `on_epoch(index, report)` after
    /// each. Returns the number of epochs run.
    pub fn fit<E>(
        &mut self,
        batches: &[Batch],
        epochs: usize,
        early_stop: Option<EarlyStop>,
        mut on_epoch: impl FnMut(&Self, usize, &EpochReport) -> core::result::Result<(), E>,
    ) -> core::result::Result<usize, E>
    where
        E: From<Error>,
    {
        let mut best = f64::INFINITY;
        let mut stale = 0;
        for epoch in 0..epochs {
            let report = self.train_epoch(batches)?;
            on_epoch(self, epoch, &report)?;
            let obj = report.mean_objective();
            if let Some(es) = early_stop {
                if obj < best - es.min_delta {
                    best = obj;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= es.patience {
                        return Ok(epoch + 1);
                    }
                }
            }
        }
        Ok(epochs)
    }
}
