//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Runs without the libtest harness so the lines are always printed and the
//! criteria execute one after another (runtime budgets are measured alone).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use transhnet::checkpoint::{decode, encode, store_tensors};
use transhnet::config::RunConfig;
use transhnet::dataset::batches;
use transhnet::pipeline;
use transhnet::synth::synth_dataset;
use transhnet_core::coop::{fuse_decision, solve_weights, total_objective, view_loss, ViewWeights};
use transhnet_core::gradcheck::{self, ModelCheck, TOLERANCE};
use transhnet_core::metrics::{dice, iou, mae, MetricReport};
use transhnet_core::nn::{Forward, HybridSegNet, Mode, ModelConfig};
use transhnet_core::rng::SeededRng;
use transhnet_core::tape::PROB_CLAMP;
use transhnet_core::trainer::CoopTrainer;
use transhnet_core::Tensor;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// 1 ------------------------------------------------------------------------

const GRADIENT_BUDGET: Duration = Duration::from_secs(120);

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for seed in 1..=5 {
        for e in gradcheck::op_suite(seed).map_err(|e| e.to_string())? {
            check(e.report.passed(TOLERANCE), format!("{} seed {seed}: {:.3e}", e.name, e.report.max_rel_err))?;
            worst = worst.max(e.report.max_rel_err);
            probes += e.report.checked;
        }
    }
    let cfg = ModelConfig::toy();
    check(cfg.image_size == 64 && cfg.encoder.depth == 2, "toy model is not 64×64 / depth 2")?;
    let m = gradcheck::model_check(&cfg, 11, ModelCheck { params: 60, ..Default::default() })
        .map_err(|e| e.to_string())?;
    check(m.checked >= 50, format!("only {} parameters checked", m.checked))?;
    check(m.passed(TOLERANCE), format!("model: max rel err {:.3e}", m.max_rel_err))?;
    let elapsed = start.elapsed();
    check(elapsed < GRADIENT_BUDGET, format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "ops max rel err {worst:.2e} over {probes} probes on 5 seeds; model {} params max rel err {:.2e}; {elapsed:.1?}",
        m.checked, m.max_rel_err
    ))
}

// 2 ------------------------------------------------------------------------

fn brute_force_argmin(l: &[f64; 3], lambda: f64) -> [f64; 3] {
    let obj = |w: [f64; 3]| total_objective(&ViewWeights { w, lambda }, l);
    let mut best = ([1.0 / 3.0; 3], f64::INFINITY);
    let n = 1000;
    for i in 0..=n {
        for j in 0..=(n - i) {
            let w = [i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64];
            let v = obj(w);
            if v < best.1 {
                best = (w, v);
            }
        }
    }
    let c = best.0;
    let (m, step) = (200, 1e-5);
    for i in 0..=2 * m {
        for j in 0..=2 * m {
            let w0 = c[0] + (i as f64 - m as f64) * step;
            let w1 = c[1] + (j as f64 - m as f64) * step;
            let w = [w0, w1, 1.0 - w0 - w1];
            if w.iter().all(|&x| x >= 0.0) {
                let v = obj(w);
                if v < best.1 {
                    best = (w, v);
                }
            }
        }
    }
    best.0
}

fn weight_solver() -> Outcome {
    let mut rng = SeededRng::new(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let l = [0, 1, 2].map(|_| rng.uniform(0.0, 2.0));
        for lambda in [0.1, 1.0, 10.0] {
            let w = solve_weights(&l, lambda).map_err(|e| e.to_string())?;
            let b = brute_force_argmin(&l, lambda);
            for k in 0..3 {
                worst = worst.max((w.w[k] - b[k]).abs());
            }
            check((w.sum() - 1.0).abs() <= 1e-9, format!("sum {} for {l:?}", w.sum()))?;
            let c = rng.uniform(-10.0, 10.0);
            let s = solve_weights(&l.map(|x| x + c), lambda).map_err(|e| e.to_string())?;
            for k in 0..3 {
                check((w.w[k] - s.w[k]).abs() <= 1e-12, format!("shift {c} moved w{} for {l:?}", k + 1))?;
            }
        }
    }
    check(worst <= 1e-3, format!("max deviation from brute force {worst:.3e}"))?;
    Ok(format!("60 cases, max deviation from brute-force minimizer {worst:.2e}"))
}

// 3 ------------------------------------------------------------------------

fn loss_oracle(p: &[f64], y: &[f64]) -> f64 {
    let (mut inter, mut union, mut bce) = (0.0, 0.0, 0.0);
    for n in 0..p.len() {
        let pc = p[n].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        inter += y[n] * p[n];
        union += y[n] + p[n] - y[n] * p[n];
        bce -= if y[n] == 1.0 { pc.ln() } else { (1.0 - pc).ln() };
    }
    1.0 - inter / union + bce / p.len() as f64
}

fn loss_golden() -> Outcome {
    let y = Tensor::new(&[1, 1, 2, 2], vec![1., 1., 0., 0.]).unwrap();
    let p = Tensor::full(&[1, 1, 2, 2], 0.5);
    let total = view_loss(&p, &y).map_err(|e| e.to_string())?;
    let expect = 2.0 / 3.0 + std::f64::consts::LN_2;
    check((total - expect).abs() <= 1e-9, format!("golden total {total}"))?;
    check((total - 1.359814).abs() <= 1e-6, format!("golden total {total} vs 1.359814"))?;
    let mut rng = SeededRng::new(33);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p = rng.uniform_tensor(&[1, 1, 8, 8], 0.0, 1.0);
        let y = rng.uniform_tensor(&[1, 1, 8, 8], 0.0, 1.0).map(|u| (u < 0.4) as u8 as f64);
        let got = view_loss(&p, &y).map_err(|e| e.to_string())?;
        worst = worst.max((got - loss_oracle(p.data(), y.data())).abs());
    }
    check(worst <= 1e-10, format!("oracle deviation {worst:.3e}"))?;
    Ok(format!("golden {total:.9}; 100 random 8×8 pairs max deviation {worst:.2e}"))
}

// 4 ------------------------------------------------------------------------

fn shape_contract() -> Outcome {
    let cfg = ModelConfig::default();
    let (model, mut store) = HybridSegNet::new(&cfg, 4).map_err(|e| e.to_string())?;
    let image = SeededRng::new(4).uniform_tensor(&[1, 3, 352, 352], 0.0, 1.0);
    let mut f = Forward::new(&mut store, Mode::Eval);
    let x = f.tape.constant(image);
    let out = model.forward(&mut f, x).map_err(|e| e.to_string())?;
    let expect = [[1, 384, 22, 22], [1, 128, 44, 44], [1, 64, 88, 88]];
    for (k, (map, e)) in out.transformer.maps.iter().zip(expect).enumerate() {
        let s = f.tape.value(*map).shape();
        check(s == e, format!("T{k} is {s:?}"))?;
    }
    for (k, v) in out.views.iter().enumerate() {
        let t = f.tape.value(*v);
        check(t.shape() == [1, 1, 352, 352], format!("Pre_{} is {:?}", k + 1, t.shape()))?;
        check(t.data().iter().all(|p| (0.0..=1.0).contains(p)), format!("Pre_{} leaves [0, 1]", k + 1))?;
    }
    Ok("T0 22×22×384, T1 44×44×128, T2 88×88×64; three 352×352×1 views in [0, 1]".into())
}

// 5 ------------------------------------------------------------------------

const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const OVERFIT_SEED: u64 = 7;

fn toy_overfit() -> Outcome {
    let start = Instant::now();
    let mut cfg = RunConfig::toy();
    cfg.seed = OVERFIT_SEED;
    check(cfg.synth_samples == 8 && cfg.model.image_size == 64 && cfg.model.encoder.depth == 2, "toy preset drifted")?;
    let data = synth_dataset(cfg.synth_samples, cfg.model.image_size, cfg.seed);
    let batches = batches(&data, cfg.batch_size).map_err(|e| e.to_string())?;
    let (model, store) = HybridSegNet::new(&cfg.model, cfg.seed).map_err(|e| e.to_string())?;
    let mut trainer = CoopTrainer::new(model, store, cfg.adam(), cfg.lambda).map_err(|e| e.to_string())?;
    let mut steps = 0;
    let mut off_simplex = None;
    let epochs = 300 / batches.len();
    trainer
        .fit(&batches, epochs, None, |_, _, report| -> transhnet_core::Result<()> {
            for s in &report.steps {
                steps += 1;
                let ok = (s.weights.sum() - 1.0).abs() <= 1e-9 && s.weights.w.iter().all(|&w| w > 0.0);
                if !ok && off_simplex.is_none() {
                    off_simplex = Some((steps, s.weights.w));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    check(steps == 300, format!("{steps} steps"))?;
    if let Some((step, w)) = off_simplex {
        return Err(format!("weights {w:?} off the simplex at step {step}"));
    }
    let mut report = MetricReport { per_image: Vec::new(), threshold: 0.5 };
    for b in &batches {
        let p = trainer.model.predict(&mut trainer.store, &b.images).map_err(|e| e.to_string())?;
        report.extend(MetricReport::from_batch(&p.fused, &b.masks).map_err(|e| e.to_string())?);
    }
    let elapsed = start.elapsed();
    let md = report.mean_dice();
    check(md >= 0.95, format!("fused mDice {md:.4}"))?;
    check(elapsed < OVERFIT_BUDGET, format!("took {elapsed:.1?}"))?;
    let w = trainer.model.weights(&trainer.store).w;
    Ok(format!(
        "300 steps at lr {}, fused mDice {md:.4}, final weights [{:.3}, {:.3}, {:.3}]; {elapsed:.1?}",
        cfg.lr, w[0], w[1], w[2]
    ))
}

// 6 ------------------------------------------------------------------------

fn ablations() -> Outcome {
    let image = SeededRng::new(6).uniform_tensor(&[2, 3, 64, 64], 0.0, 1.0);
    let data = synth_dataset(2, 64, 6);
    let batch = batches(&data, 2).map_err(|e| e.to_string())?.remove(0);
    let mut outputs = Vec::new();
    for (glff, dfm) in [(true, true), (true, false), (false, true), (false, false)] {
        let cfg = ModelConfig { glff, dfm, ..ModelConfig::toy() };
        let (model, mut store) = HybridSegNet::new(&cfg, 6).map_err(|e| e.to_string())?;
        let p = model.predict(&mut store, &image).map_err(|e| e.to_string())?;
        for v in p.views.iter().chain([&p.fused]) {
            check(v.shape() == [2, 1, 64, 64], format!("glff {glff} dfm {dfm}: shape {:?}", v.shape()))?;
            check(v.data().iter().all(|x| (0.0..=1.0).contains(x)), format!("glff {glff} dfm {dfm}: range"))?;
        }
        let mut trainer = CoopTrainer::new(model, store, RunConfig::toy().adam(), 1.0).map_err(|e| e.to_string())?;
        let step = trainer.step(&batch).map_err(|e| e.to_string())?;
        check(step.losses.iter().all(|l| l.is_finite()), format!("glff {glff} dfm {dfm}: training step"))?;
        outputs.push(((glff, dfm), p.views[2].clone()));
    }
    let mut min_diff = f64::INFINITY;
    for i in 0..4 {
        for j in i + 1..4 {
            let d = outputs[i].1.max_abs_diff(&outputs[j].1);
            check(d > 1e-6, format!("{:?} and {:?} agree to {d:.3e}", outputs[i].0, outputs[j].0))?;
            min_diff = min_diff.min(d);
        }
    }
    Ok(format!("4 switch combinations run and train; min pairwise fusion-view diff {min_diff:.3e}"))
}

// 7 ------------------------------------------------------------------------

fn metrics_oracle() -> Outcome {
    let mut rng = SeededRng::new(7);
    for n in 0..100 {
        let fg = 0.02 + 0.009 * n as f64;
        let p: Vec<f64> = (0..256).map(|_| rng.uniform(0.0, 1.0)).map(|u| if u < fg { 1.0 } else { 0.0 }).collect();
        let g: Vec<f64> = (0..256).map(|_| (rng.uniform(0.0, 1.0) < fg) as u8 as f64).collect();
        let (mut i, mut a, mut b, mut abs) = (0u32, 0u32, 0u32, 0.0);
        for k in 0..256 {
            i += (p[k] == 1.0 && g[k] == 1.0) as u32;
            a += (p[k] == 1.0) as u32;
            b += (g[k] == 1.0) as u32;
            abs += (p[k] - g[k]).abs();
        }
        let u = a + b - i;
        let (d, j, m) = (dice(&p, &g).unwrap(), iou(&p, &g).unwrap(), mae(&p, &g).unwrap());
        let d_expect = if a + b == 0 { 1.0 } else { (2 * i) as f64 / (a + b) as f64 };
        let j_expect = if u == 0 { 1.0 } else { i as f64 / u as f64 };
        check(d == d_expect && j == j_expect && m == abs / 256.0, format!("pair {n} differs from pixel counts"))?;
        // dice = 2·iou/(1+iou) evaluated exactly on the counts: 2(i/u)/(1 + i/u) = 2i/(u + i), u + i = a + b
        check(u + i == a + b && (u == 0 || d == (2 * i) as f64 / (u + i) as f64), format!("identity fails on pair {n}"))?;
        check((d - 2.0 * j / (1.0 + j)).abs() <= 2.0 * f64::EPSILON, format!("float identity off on pair {n}"))?;
    }
    Ok("100 random 16×16 pairs match pixel counts exactly; identity exact in counts".into())
}

// 8 ------------------------------------------------------------------------

fn decision_properties() -> Outcome {
    let mut rng = SeededRng::new(8);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    for case in 0..20 {
        let views = [0, 1, 2].map(|_| rng.uniform_tensor(&[2, 1, 8, 8], 0.0, 1.0));
        for k in 0..3 {
            let out = fuse_decision(&ViewWeights::vertex(k, 1.0), &views).map_err(|e| e.to_string())?;
            check(bits(&out) == bits(&views[k]), format!("vertex {k} not bitwise on case {case}"))?;
        }
        let w = solve_weights(&[0, 1, 2].map(|_| rng.uniform(0.0, 2.0)), rng.uniform(0.1, 10.0)).unwrap();
        let out = fuse_decision(&w, &views).map_err(|e| e.to_string())?;
        for i in 0..out.len() {
            let v = [0, 1, 2].map(|k| views[k].data()[i]);
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            check(out.data()[i] >= lo && out.data()[i] <= hi, format!("pixel {i} of case {case} outside the views"))?;
        }
    }
    Ok("vertex weights bitwise; 20 random cases inside [min_k, max_k]".into())
}

// 9 ------------------------------------------------------------------------

fn determinism_and_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = RunConfig::toy();
        cfg.seed = 9;
        cfg.epochs = 3;
        cfg.synth_samples = 4;
        cfg.batch_size = 2;
        cfg.out_dir = dir.path().join(run);
        let summary = pipeline::train(&cfg, |_| {}).map_err(|e| e.to_string())?;
        bytes.push(std::fs::read(&summary.final_checkpoint).map_err(|e| e.to_string())?);
    }
    check(bytes[0] == bytes[1], "two identical runs wrote different checkpoints")?;

    let tensors = decode(&bytes[0]).map_err(|e| e.to_string())?;
    check(encode(&tensors).map_err(|e| e.to_string())? == bytes[0], "re-encoding changed bytes")?;
    let mut cfg = RunConfig::toy();
    cfg.seed = 9;
    let (_, mut store) = HybridSegNet::new(&cfg.model, 1).map_err(|e| e.to_string())?;
    store.load_values(&tensors).map_err(|e| e.to_string())?;
    let back = store_tensors(&store);
    for ((na, a), (nb, b)) in tensors.iter().zip(&back) {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        check(na == nb && a.shape() == b.shape() && same, format!("{na} changed in the round trip"))?;
    }

    let n = bytes[0].len();
    let positions: Vec<usize> = (0..64).chain((0..512).map(|k| 64 + k * (n - 68) / 512)).chain(n - 4..n).collect();
    for &pos in &positions {
        let mut bad = bytes[0].clone();
        bad[pos] ^= 0x10;
        check(decode(&bad).is_err(), format!("corruption at byte {pos} undetected"))?;
    }
    Ok(format!(
        "identical {n}-byte checkpoints from two runs; bitwise round trip of {} tensors; {} single-byte corruptions detected",
        tensors.len(),
        positions.len()
    ))
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradient_suite),
        ("weight-solver oracle", weight_solver),
        ("loss golden values", loss_golden),
        ("shape contract at 352", shape_contract),
        ("toy overfit", toy_overfit),
        ("ablation structure", ablations),
        ("metrics oracle", metrics_oracle),
        ("decision properties", decision_properties),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let label = format!("{} {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(panic_message(p.as_ref()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {label}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {label}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
