//! The train / eval / predict / gradcheck workflows behind the CLI.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use transhnet_core::gradcheck::{self, GradCheckReport, SuiteEntry, TOLERANCE};
use transhnet_core::metrics::MetricReport;
use transhnet_core::nn::{HybridSegNet, ModelConfig, ParamStore, VIEWS};
use transhnet_core::trainer::{CoopTrainer, EpochReport};
use transhnet_core::Tensor;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{batches, load_dataset, load_images, SegmentationSample};
use crate::error::{Error, Result};
use crate::raster::{write_pnm, Raster};
use crate::synth::synth_dataset;

pub const CONFIG_FILE: &str = "config.cfg";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const PREDICTION_DIR: &str = "predictions";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Which prediction eval scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scored {
    /// The weighted decision over all views.
    Fused,
    /// One view, 0-based (transformer, CNN, fusion).
    View(usize),
}

/// Samples from `data_dir`, or the synthetic set when none is configured.
pub fn samples(cfg: &RunConfig) -> Result<Vec<SegmentationSample>> {
    let size = cfg.model.image_size;
    match &cfg.data_dir {
        Some(dir) => {
            let s = load_dataset(dir, size)?;
            if s.is_empty() {
                return Err(Error::format(dir, "no images found under images/"));
            }
            Ok(s)
        }
        None => Ok(synth_dataset(cfg.synth_samples, size, cfg.seed)),
    }
}

/// The model of `cfg`, initialized from its seed or loaded from `checkpoint`.
pub fn build_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(HybridSegNet, ParamStore)> {
    let (model, mut store) = HybridSegNet::new(&cfg.model, cfg.seed)?;
    if let Some(path) = checkpoint {
        checkpoint::load_into(path, &mut store)?;
    }
    Ok((model, store))
}

pub const LOG_HEADER: &str = "epoch,loss_1,loss_2,loss_3,w_1,w_2,w_3,objective";

/// One training-log row: epoch-mean losses and objective, the epoch's final weights.
pub fn log_row(epoch: usize, report: &EpochReport) -> String {
    let l = report.mean_losses();
    let w = report.last_weights().w;
    format!("{epoch},{},{},{},{},{},{},{}", l[0], l[1], l[2], w[0], w[1], w[2], report.mean_objective())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains on [`samples`] and writes into `cfg.out_dir`: the resolved config,
/// the training log, periodic and final checkpoints.
pub fn train(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = samples(cfg)?;
    let batches = batches(&data, cfg.batch_size)?;
    let out = &cfg.out_dir;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    create_dir(&ckpt_dir)?;
    write_file(&out.join(CONFIG_FILE), &cfg.render())?;

    let (model, store) = build_model(cfg, None)?;
    let mut trainer = CoopTrainer::new(model, store, cfg.adam(), cfg.lambda)?;
    let mut log = format!("{LOG_HEADER}\n");
    let log_path = out.join(TRAIN_LOG);
    let epochs = trainer.fit(&batches, cfg.epochs, cfg.early_stop, |t, index, report| -> Result<()> {
        let epoch = index + 1;
        let row = log_row(epoch, report);
        progress(&row);
        log.push_str(&row);
        log.push('\n');
        write_file(&log_path, &log)?;
        if epoch % cfg.checkpoint_every == 0 {
            checkpoint::save(&ckpt_dir.join(format!("epoch_{epoch:04}.ckpt")), &t.store)?;
        }
        Ok(())
    })?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    checkpoint::save(&final_checkpoint, &trainer.store)?;
    Ok(TrainSummary { epochs, final_checkpoint, log: log_path })
}

/// `B×1×H×W` predictions of `images` in eval mode, batch by batch.
fn predict_all(
    cfg: &RunConfig,
    model: &HybridSegNet,
    store: &mut ParamStore,
    images: &[Tensor],
    scored: Scored,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(cfg.batch_size) {
        let lifted = chunk
            .iter()
            .map(|t| {
                let mut shape = vec![1];
                shape.extend_from_slice(t.shape());
                t.reshape(&shape)
            })
            .collect::<transhnet_core::Result<Vec<_>>>()?;
        let batch = Tensor::stack_batch(&lifted)?;
        let p = model.predict(store, &batch)?;
        let chosen = match scored {
            Scored::Fused => p.fused,
            Scored::View(k) => p.views[k].clone(),
        };
        out.extend((0..chunk.len()).map(|i| chosen.batch_item(i)));
    }
    Ok(out)
}

/// `id,dice,iou,mae` rows plus a final `mean` row.
pub fn metrics_csv(ids: &[String], report: &MetricReport) -> String {
    let mut s = String::from("id,dice,iou,mae\n");
    for (id, m) in ids.iter().zip(&report.per_image) {
        writeln!(s, "{id},{},{},{}", m.dice, m.iou, m.mae).expect("write to String");
    }
    writeln!(s, "mean,{},{},{}", report.mean_dice(), report.mean_iou(), report.mean_mae()).expect("write to String");
    s
}

/// Scores `checkpoint` on [`samples`] and writes `metrics.csv` into `cfg.out_dir`.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, scored: Scored) -> Result<(Vec<String>, MetricReport)> {
    cfg.validate()?;
    if let Scored::View(k) = scored {
        if k >= VIEWS {
            return Err(Error::Config(format!("view {} does not exist, expected 1 to {VIEWS}", k + 1)));
        }
    }
    let data = samples(cfg)?;
    let (model, mut store) = build_model(cfg, Some(checkpoint))?;
    let images: Vec<Tensor> = data.iter().map(|s| s.image.clone()).collect();
    let preds = predict_all(cfg, &model, &mut store, &images, scored)?;
    let mut report = MetricReport { per_image: Vec::new(), threshold: transhnet_core::metrics::THRESHOLD };
    for (p, s) in preds.iter().zip(&data) {
        let gt = s.mask.reshape(p.shape())?;
        report.extend(MetricReport::from_batch(p, &gt)?);
    }
    let ids: Vec<String> = data.iter().map(|s| s.id.clone()).collect();
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(METRICS_FILE), &metrics_csv(&ids, &report))?;
    Ok((ids, report))
}

/// Probability map `1×1×H×W` to 8-bit gray, `round(255·p)`.
pub fn mask_raster(prob: &Tensor) -> Result<Raster> {
    let (_, _, h, w) = prob.dims4("mask_raster")?;
    let data = prob.data().iter().map(|p| (255.0 * p.clamp(0.0, 1.0)).round() as u8).collect();
    Ok(Raster::gray(w, h, data))
}

/// Writes one `predictions/<id>.pgm` per input image into `cfg.out_dir`.
/// Inputs come from `data_dir` (masks not needed) or the synthetic set.
pub fn predict(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let inputs: Vec<(String, Tensor)> = match &cfg.data_dir {
        Some(dir) => load_images(dir, cfg.model.image_size)?,
        None => samples(cfg)?.into_iter().map(|s| (s.id, s.image)).collect(),
    };
    let (model, mut store) = build_model(cfg, Some(checkpoint))?;
    let images: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let preds = predict_all(cfg, &model, &mut store, &images, Scored::Fused)?;
    let dir = cfg.out_dir.join(PREDICTION_DIR);
    create_dir(&dir)?;
    inputs
        .iter()
        .zip(&preds)
        .map(|((id, _), p)| {
            let path = dir.join(format!("{id}.pgm"));
            write_pnm(&path, &mask_raster(p)?)?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSummary {
    pub ops: Vec<(u64, SuiteEntry)>,
    pub model: GradCheckReport,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|(_, e)| e.report.passed(TOLERANCE)) && self.model.passed(TOLERANCE)
    }
}

/// Per-op checks on every seed in `seeds`, then an end-to-end check of
/// `model` probing `params` parameters.
pub fn run_gradcheck(model: &ModelConfig, seeds: &[u64], params: usize) -> Result<GradcheckSummary> {
    let mut ops = Vec::new();
    for &seed in seeds {
        ops.extend(gradcheck::op_suite(seed)?.into_iter().map(|e| (seed, e)));
    }
    let check = gradcheck::ModelCheck { params, ..Default::default() };
    let model = gradcheck::model_check(model, seeds.first().copied().unwrap_or(0), check)?;
    Ok(GradcheckSummary { ops, model })
}
