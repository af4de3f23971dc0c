//! Train a single learned key-scaling gate at one layer with the backbone
//! frozen, and show how the sink-group score separates by task over the
//! training trajectory.
//!
//! Usage: `cargo run --example gate_training [checkpoint_dir] [layer]`

#[path = "shared/mod.rs"]
mod shared;

use sinkgate::backbone::KeyScalePlan;
use sinkgate::lsg::{
    gated_accuracy, train_gate, GateModule, GateSignalSpec, GateStack, GateTrainHyper, GroupMode,
};
use sinkgate::numerics::rng::Rng;
use sinkgate::sinkid::partition_tokens;

fn main() -> sinkgate::Result<()> {
    let (bb, eval) = shared::trained_backbone(128)?;
    let layer: usize =
        std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(bb.config.read_layer);

    let train = sinkgate::scenes::generate_dataset(
        202,
        &sinkgate::scenes::SceneConfig::default(),
        512,
    )?;
    let mut partitions = Vec::new();
    for ex in &eval {
        let trace = bb.forward(ex, &KeyScalePlan::none(), false)?;
        partitions.push(partition_tokens(&trace, &bb.config)?);
    }

    let mut rng = Rng::from_parts(0, "gate_init", layer as u64);
    let mut gate = GateModule::new(
        bb.config.d,
        layer,
        GroupMode::VsinkVsRest,
        GateSignalSpec::LastToken,
        &mut rng,
    );

    let hyper = GateTrainHyper::default();
    let t0 = std::time::Instant::now();
    let traj = train_gate(&bb, &train, &mut gate, &hyper, Some((&eval, &partitions)))?;
    println!(
        "trained gate at layer {layer} in {:.1}s, loss {:.3} -> {:.3}",
        t0.elapsed().as_secs_f64(),
        traj.losses.first().unwrap(),
        traj.losses.last().unwrap(),
    );

    println!("\nsink-group score (mean +/- std over eval) per task:");
    for point in &traj.checkpoints {
        print!("  step {:>4}:", point.step);
        for r in &point.rho {
            print!(" {}={:.3}+/-{:.3}", r.task.as_str(), r.mean_rho0, r.std_rho0);
        }
        println!();
    }

    let acc = gated_accuracy(&bb, &eval, &partitions, &GateStack::single(gate))?;
    println!("\ngated accuracy:");
    for (task, a) in acc {
        println!("  {:<16} {a:.3}", task.as_str());
    }
    Ok(())
}
