//! Train independent single-layer gates at several layers, rank them by
//! overall accuracy, and stack them greedily without retraining, printing
//! the Added/Active table with per-task deltas at every step.
//!
//! Usage: `cargo run --example greedy_stacking [checkpoint_dir]`

#[path = "shared/mod.rs"]
mod shared;

use sinkgate::backbone::KeyScalePlan;
use sinkgate::lsg::{
    greedy_stack, train_gate, GateModule, GateSignalSpec, GateTrainHyper, GroupMode,
};
use sinkgate::numerics::rng::Rng;
use sinkgate::scenes::{generate_dataset, SceneConfig};
use sinkgate::sinkid::partition_tokens;

fn main() -> sinkgate::Result<()> {
    let (bb, eval) = shared::trained_backbone(128)?;
    let train = generate_dataset(202, &SceneConfig::default(), 512)?;

    let mut partitions = Vec::new();
    for ex in &eval {
        let trace = bb.forward(ex, &KeyScalePlan::none(), false)?;
        partitions.push(partition_tokens(&trace, &bb.config)?);
    }

    let layers = [1usize, 2, 3, 4, 5];
    let hyper = GateTrainHyper::default();
    let mut candidates = Vec::new();
    for &layer in &layers {
        let mut rng = Rng::from_parts(0, "gate_init", layer as u64);
        let mut gate = GateModule::new(
            bb.config.d,
            layer,
            GroupMode::VsinkVsRest,
            GateSignalSpec::LastToken,
            &mut rng,
        );
        let t0 = std::time::Instant::now();
        train_gate(&bb, &train, &mut gate, &hyper, None)?;
        println!("trained candidate at layer {layer} in {:.1}s", t0.elapsed().as_secs_f64());
        candidates.push(gate);
    }

    let report = greedy_stack(&bb, &eval, &partitions, candidates, layers.len())?;

    print!("\nbaseline (no gates):");
    for (task, a) in &report.baseline {
        print!(" {}={a:.3}", task.as_str());
    }
    println!("\n\nstep  added  active           per-task delta vs baseline");
    for step in &report.steps {
        print!("{:>4}  {:>5}  {:<16}", step.step, step.added_layer, format!("{:?}", step.active_layers));
        for (task, d) in &step.delta_vs_baseline {
            print!(" {}={d:+.3}", task.as_str());
        }
        println!();
    }
    println!(
        "\nfinal-step deltas: {} nonnegative, {} negative",
        report.nonnegative_deltas, report.negative_deltas,
    );
    Ok(())
}
