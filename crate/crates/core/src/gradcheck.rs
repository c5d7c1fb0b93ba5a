//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::error::Result;
use crate::nn::model::{HybridSegNet, ModelConfig, VIEWS};
use crate::nn::params::{Forward, Mode, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{BinaryOp, Tape, Var};
use crate::tensor::Tensor;

/// Default perturbation for central differences in `f64`.
pub const STEP: f64 = 1e-5;
/// Default pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Magnitudes below this are compared absolutely; a pair of gradients that
/// are both ~0 is not a relative mismatch.
pub const ABS_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, ABS_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Probes dropped because the loss is not smooth within ±h around them.
    pub skipped: usize,
    pub max_rel_err: f64,
    /// The entry with the largest relative error.
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self
    }

    pub fn empty() -> Self {
        Self { checked: 0, skipped: 0, max_rel_err: 0.0, worst: None }
    }
}

/// Compares `analytic[i]` against `(f(+h) − f(−h)) / 2h`, where
/// `eval(i, delta)` evaluates the loss with entry `i` shifted by `delta` (and
/// must leave everything restored afterwards).
pub fn compare(
    analytic: &[f64],
    step: f64,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::empty();
    for (i, &a) in analytic.iter().enumerate() {
        let plus = eval(i, step)?;
        let minus = eval(i, -step)?;
        let numeric = (plus - minus) / (2.0 * step);
        let rel_err = relative_error(a, numeric);
        report.checked += 1;
        if rel_err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel_err);
            report.worst = Some(Mismatch { entry: i, analytic: a, numeric, rel_err });
        }
    }
    Ok(report)
}

/// Entries to probe in a tensor of `len` values: all of them when `limit`
/// allows, otherwise `limit` distinct seeded picks in ascending order.
pub fn sample_indices(len: usize, limit: usize, rng: &mut SeededRng) -> Vec<usize> {
    if len <= limit {
        return (0..len).collect();
    }
    let mut picked: Vec<usize> = Vec::with_capacity(limit);
    while picked.len() < limit {
        let i = rng.below(len);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

/// Gradient check of a graph over free input tensors. `build` records the
/// graph on a fresh tape from one leaf per input and returns a scalar.
/// At most `per_input` entries of each input are probed.
pub fn check_graph<F>(
    inputs: &[Tensor],
    build: F,
    per_input: usize,
    rng: &mut SeededRng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = run(inputs)?;
    let grads = tape.backward(out)?;

    let mut probes: Vec<(usize, usize)> = Vec::new();
    let mut analytic = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        for idx in sample_indices(t.len(), per_input, rng) {
            probes.push((k, idx));
            analytic.push(grads.get(vars[k]).map_or(0.0, |g| g.data()[idx]));
        }
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    compare(&analytic, STEP, |i, delta| {
        let (k, idx) = probes[i];
        let orig = work[k].data()[idx];
        work[k].data_mut()[idx] = orig + delta;
        let result = run(&work).and_then(|(tape, _, out)| tape.value(out).item());
        work[k].data_mut()[idx] = orig;
        result
    })
}

/// Sum of `x ⊙ r` for a fixed random `r`, so every output entry carries a
/// distinct sensitivity (a plain sum would hide errors, e.g. in softmax).
fn project(tape: &mut Tape, x: Var) -> Result<Var> {
    let r = SeededRng::new(0x5EED).normal_tensor(tape.value(x).shape(), 1.0);
    let r = tape.constant(r);
    let y = tape.mul(x, r)?;
    Ok(tape.sum(y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One graph per differentiable op, each ending in a random projection.
fn op_cases(rng: &mut SeededRng) -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut n = |shape: &[usize]| rng.normal_tensor(shape, 1.0);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Build)> = Vec::new();
    cases.push(("matmul", alloc::vec![n(&[2, 3, 4]), n(&[4, 5])], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y)
    }));
    cases.push(("batch_matmul", alloc::vec![n(&[2, 3, 4]), n(&[2, 4, 3])], |t, v| {
        let y = t.batch_matmul(v[0], v[1])?;
        project(t, y)
    }));
    cases.push(("transpose_last2", alloc::vec![n(&[2, 3, 4])], |t, v| {
        let y = t.transpose_last2(v[0])?;
        project(t, y)
    }));
    cases.push(("add", alloc::vec![n(&[3, 4]), n(&[3, 4])], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y)
    }));
    cases.push(("mul", alloc::vec![n(&[3, 4]), n(&[3, 4])], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y)
    }));
    cases.push(("broadcast_add", alloc::vec![n(&[2, 3, 2, 2]), n(&[1, 3, 1, 1])], |t, v| {
        let y = t.broadcast(v[0], v[1], BinaryOp::Add)?;
        project(t, y)
    }));
    cases.push(("broadcast_mul", alloc::vec![n(&[2, 3, 2, 2]), n(&[2, 1, 2, 2])], |t, v| {
        let y = t.broadcast(v[0], v[1], BinaryOp::Mul)?;
        project(t, y)
    }));
    cases.push(("scale", alloc::vec![n(&[5])], |t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y)
    }));
    cases.push(("sum", alloc::vec![n(&[3, 3])], |t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.sum(y))
    }));
    cases.push(("mean", alloc::vec![n(&[3, 3])], |t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.mean(y))
    }));
    cases.push(("relu", alloc::vec![n(&[4, 5])], |t, v| {
        let y = t.relu(v[0]);
        project(t, y)
    }));
    cases.push(("gelu", alloc::vec![n(&[4, 5])], |t, v| {
        let y = t.gelu(v[0]);
        project(t, y)
    }));
    cases.push(("sigmoid", alloc::vec![n(&[4, 5])], |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y)
    }));
    cases.push(("softmax_lastdim", alloc::vec![n(&[3, 5])], |t, v| {
        let y = t.softmax_lastdim(v[0]);
        project(t, y)
    }));
    cases.push(("layer_norm", alloc::vec![n(&[2, 3, 6]), n(&[6]), n(&[6])], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(t, y)
    }));
    cases.push(("batch_norm_train", alloc::vec![n(&[2, 3, 3, 3]), n(&[3]), n(&[3])], |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        project(t, y)
    }));
    cases.push(("batch_norm_eval", alloc::vec![n(&[2, 3, 2, 2]), n(&[3]), n(&[3])], |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
        project(t, y)
    }));
    cases.push(("conv2d_3x3", alloc::vec![n(&[2, 2, 5, 5]), n(&[3, 2, 3, 3])], |t, v| {
        let y = t.conv2d(v[0], v[1], 1, 1)?;
        project(t, y)
    }));
    cases.push(("conv2d_stride2", alloc::vec![n(&[1, 2, 5, 5]), n(&[2, 2, 3, 3])], |t, v| {
        let y = t.conv2d(v[0], v[1], 2, 1)?;
        project(t, y)
    }));
    cases.push(("conv2d_1x1", alloc::vec![n(&[2, 3, 3, 3]), n(&[2, 3, 1, 1])], |t, v| {
        let y = t.conv2d(v[0], v[1], 1, 0)?;
        project(t, y)
    }));
    cases.push(("upsample2x_nearest", alloc::vec![n(&[1, 2, 3, 3])], |t, v| {
        let y = t.upsample2x_nearest(v[0])?;
        project(t, y)
    }));
    cases.push(("upsample_bilinear", alloc::vec![n(&[1, 2, 3, 3])], |t, v| {
        let y = t.upsample_bilinear(v[0], 4)?;
        project(t, y)
    }));
    cases.push(("avg_pool2x2", alloc::vec![n(&[1, 2, 4, 4])], |t, v| {
        let y = t.avg_pool2x2(v[0])?;
        project(t, y)
    }));
    cases.push(("spatial_mean", alloc::vec![n(&[2, 3, 3, 3])], |t, v| {
        let y = t.spatial_mean(v[0])?;
        project(t, y)
    }));
    cases.push(("spatial_max", alloc::vec![n(&[2, 3, 3, 3])], |t, v| {
        let y = t.spatial_max(v[0])?;
        project(t, y)
    }));
    cases.push(("channel_mean", alloc::vec![n(&[2, 3, 3, 3])], |t, v| {
        let y = t.channel_mean(v[0])?;
        project(t, y)
    }));
    cases.push(("channel_max", alloc::vec![n(&[2, 3, 3, 3])], |t, v| {
        let y = t.channel_max(v[0])?;
        project(t, y)
    }));
    cases.push(("concat_channels", alloc::vec![n(&[2, 1, 2, 2]), n(&[2, 3, 2, 2])], |t, v| {
        let y = t.concat_channels(&[v[0], v[1]])?;
        project(t, y)
    }));
    cases.push(("concat_lastdim", alloc::vec![n(&[2, 3, 2]), n(&[2, 3, 4])], |t, v| {
        let y = t.concat_lastdim(&[v[0], v[1]])?;
        project(t, y)
    }));
    cases.push(("slice_channels", alloc::vec![n(&[2, 4, 2, 2])], |t, v| {
        let y = t.slice_channels(v[0], 1, 2)?;
        project(t, y)
    }));
    cases.push(("reshape", alloc::vec![n(&[2, 6])], |t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        project(t, y)
    }));
    cases.push(("tokens_to_map", alloc::vec![n(&[2, 6, 3])], |t, v| {
        let y = t.tokens_to_map(v[0], 2, 3)?;
        project(t, y)
    }));
    cases.push(("map_to_tokens", alloc::vec![n(&[2, 3, 2, 3])], |t, v| {
        let y = t.map_to_tokens(v[0])?;
        project(t, y)
    }));
    cases.push(("patchify", alloc::vec![n(&[2, 2, 4, 4])], |t, v| {
        let y = t.patchify(v[0], 2)?;
        project(t, y)
    }));
    cases.push(("seg_loss", alloc::vec![n(&[2, 1, 4, 4])], |t, v| {
        let prob = t.sigmoid(v[0]);
        let mask = SeededRng::new(0xA5).uniform_tensor(&[2, 1, 4, 4], 0.0, 1.0).map(|u| if u < 0.4 { 1.0 } else { 0.0 });
        t.seg_loss(prob, &mask, None)
    }));
    cases.push(("seg_loss_weighted", alloc::vec![n(&[2, 1, 4, 4])], |t, v| {
        let prob = t.sigmoid(v[0]);
        let mut rng = SeededRng::new(0xA6);
        let mask = rng.uniform_tensor(&[2, 1, 4, 4], 0.0, 1.0).map(|u| if u < 0.4 { 1.0 } else { 0.0 });
        let weight = rng.uniform_tensor(&[2, 1, 4, 4], 0.5, 2.0);
        t.seg_loss(prob, &mask, Some(&weight))
    }));
    cases
}

/// Gradient check of every differentiable tape op on inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = SeededRng::new(seed);
    let cases = op_cases(&mut rng);
    cases
        .into_iter()
        .map(|(name, inputs, build)| {
            let report = check_graph(&inputs, build, 24, &mut rng)?;
            Ok(SuiteEntry { name, report })
        })
        .collect()
}

/// Scalar whose parameter gradient [`model_check`] verifies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// `Σ_k w_k·loss_k` with fixed weights, as in a training step.
    TrainingLoss,
    /// Sum of all pixels of view `k` (0-based).
    ViewSum(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelCheck<'a> {
    pub batch: usize,
    /// Number of parameter entries to probe.
    pub params: usize,
    pub objective: Objective,
    /// Only parameters whose name starts with this are probed.
    pub prefix: &'a str,
}

impl Default for ModelCheck<'_> {
    fn default() -> Self {
        Self { batch: 2, params: 60, objective: Objective::TrainingLoss, prefix: "" }
    }
}

/// End-to-end check of `check.objective` for a freshly initialized model
/// with respect to sampled trainable entries.
///
/// With hundreds of thousands of ReLUs, a ±h nudge occasionally moves some
/// activation across its kink, where no finite difference is meaningful. A
/// probe whose central differences at `h` and `h/10` disagree beyond
/// `TOLERANCE` is skipped (and counted) and another entry is drawn in its
/// place; the screen never looks at the analytic gradient.
pub fn model_check(config: &ModelConfig, seed: u64, check: ModelCheck<'_>) -> Result<GradCheckReport> {
    let (model, mut store) = HybridSegNet::new(config, seed)?;
    let mut rng = SeededRng::new(seed ^ 0xC0FFEE);
    let s = config.image_size;
    let images = rng.uniform_tensor(&[check.batch, config.in_channels, s, s], 0.0, 1.0);
    let masks = rng.uniform_tensor(&[check.batch, 1, s, s], 0.0, 1.0).map(|u| if u < 0.3 { 1.0 } else { 0.0 });
    let w = [0.5, 0.3, 0.2];

    let record = |f: &mut Forward<'_>| -> Result<Var> {
        let x = f.tape.constant(images.clone());
        let out = model.forward(f, x)?;
        match check.objective {
            Objective::ViewSum(k) => Ok(f.tape.sum(out.views[k])),
            Objective::TrainingLoss => {
                let mut total = f.tape.seg_loss(out.views[0], &masks, None)?;
                total = f.tape.scale(total, w[0]);
                for k in 1..VIEWS {
                    let l = f.tape.seg_loss(out.views[k], &masks, None)?;
                    let l = f.tape.scale(l, w[k]);
                    total = f.tape.add(total, l)?;
                }
                Ok(total)
            }
        }
    };
    let value = |store: &ParamStore| -> Result<f64> {
        let mut scratch = store.clone();
        let mut f = Forward::new(&mut scratch, Mode::Train);
        let out = record(&mut f)?;
        f.tape.value(out).item()
    };

    let grads = {
        let mut scratch = store.clone();
        let mut f = Forward::new(&mut scratch, Mode::Train);
        let out = record(&mut f)?;
        let g = f.tape.backward(out)?;
        f.param_grads(&g)
    };
    let trainable: Vec<_> = store.trainable_ids().filter(|&id| store.entry(id).name.starts_with(check.prefix)).collect();
    let sizes: Vec<usize> = trainable.iter().map(|&id| store.get(id).len()).collect();
    let total: usize = sizes.iter().sum();
    let locate = |mut off: usize| {
        let mut k = 0;
        while off >= sizes[k] {
            off -= sizes[k];
            k += 1;
        }
        (trainable[k], off)
    };
    let mut central = |id, off, h: f64| -> Result<f64> {
        let orig = store.get(id).data()[off];
        store.get_mut(id).data_mut()[off] = orig + h;
        let plus = value(&store);
        store.get_mut(id).data_mut()[off] = orig - h;
        let minus = value(&store);
        store.get_mut(id).data_mut()[off] = orig;
        Ok((plus? - minus?) / (2.0 * h))
    };

    let params = check.params;
    let mut report = GradCheckReport::empty();
    let candidates = sample_indices(total, (4 * params).min(total), &mut rng);
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
    for &c in &order {
        if report.checked == params {
            break;
        }
        let (id, off) = locate(candidates[c]);
        let numeric = central(id, off, STEP)?;
        if relative_error(numeric, central(id, off, STEP / 10.0)?) > TOLERANCE {
            report.skipped += 1;
            continue;
        }
        let analytic = grads.iter().find(|(g, _)| *g == id).map_or(0.0, |(_, g)| g.data()[off]);
        let rel_err = relative_error(analytic, numeric);
        if report.worst.is_none() || rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst = Some(Mismatch { entry: candidates[c], analytic, numeric, rel_err });
        }
        report.checked += 1;
    }
    Ok(report)
}
