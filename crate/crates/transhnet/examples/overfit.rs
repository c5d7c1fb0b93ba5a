//! Overfits the toy model on eight synthetic images and reports mDice.
//!
//! `cargo run --release -p transhnet --example overfit -- [steps] [lr] [seed]`

use std::time::Instant;

use transhnet::dataset::batches;
use transhnet::synth::synth_dataset;
use transhnet_core::metrics::MetricReport;
use transhnet_core::nn::{HybridSegNet, ModelConfig};
use transhnet_core::optim::AdamConfig;
use transhnet_core::trainer::CoopTrainer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map_or(Ok(300), |s| s.parse())?;
    let lr: f64 = args.get(2).map_or(Ok(2e-3), |s| s.parse())?;
    let seed: u64 = args.get(3).map_or(Ok(7), |s| s.parse())?;

    let mut config = ModelConfig::toy();
    if args.get(4).is_some_and(|s| s == "nearest") {
        config.head_upsample = transhnet_core::nn::layers::HeadUpsample::Nearest;
    }
    let data = synth_dataset(8, config.image_size, seed);
    let batch = batches(&data, data.len())?.remove(0);
    let (model, store) = HybridSegNet::new(&config, seed)?;
    println!("{} trainable parameters", store.trainable_count());
    let mut trainer = CoopTrainer::new(model, store, AdamConfig { lr, ..AdamConfig::default() }, 1.0)?;

    let start = Instant::now();
    for step in 0..steps {
        let r = trainer.step(&batch)?;
        if step % 25 == 0 || step + 1 == steps {
            let p = trainer.model.predict(&mut trainer.store, &batch.images)?;
            let m = MetricReport::from_batch(&p.fused, &batch.masks)?;
            println!(
                "step {step:4} losses {:.4} {:.4} {:.4} w {:.3} {:.3} {:.3} mDice {:.4} ({:.1}s)",
                r.losses[0], r.losses[1], r.losses[2], r.weights.w[0], r.weights.w[1], r.weights.w[2],
                m.mean_dice(), start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
