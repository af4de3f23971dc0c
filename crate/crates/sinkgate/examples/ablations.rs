//! Design-choice ablation for the learned gate: train one gate per
//! (signal, group-mode) variant at the same layer under identical seeds and
//! print the accuracy table. The (last_token, vsink_vs_rest) row is the
//! default configuration.
//!
//! Usage: `cargo run --example ablations [checkpoint_dir] [layer]`

#[path = "shared/mod.rs"]
mod shared;

use sinkgate::backbone::KeyScalePlan;
use sinkgate::lsg::{ablate, GateTrainHyper};
use sinkgate::sinkid::partition_tokens;

fn main() -> sinkgate::Result<()> {
    let (bb, eval) = shared::trained_backbone(96)?;
    let layer: usize =
        std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(bb.config.read_layer);

    let train = sinkgate::scenes::generate_dataset(
        202,
        &sinkgate::scenes::SceneConfig::default(),
        384,
    )?;
    let mut partitions = Vec::new();
    for ex in &eval {
        let trace = bb.forward(ex, &KeyScalePlan::none(), false)?;
        partitions.push(partition_tokens(&trace, &bb.config)?);
    }

    let t0 = std::time::Instant::now();
    let rows = ablate(&bb, &train, &eval, &partitions, layer, &GateTrainHyper::default())?;
    println!("trained {} gate variants at layer {layer} in {:.1}s\n", rows.len(), t0.elapsed().as_secs_f64());

    println!("{:<18} {:<16} accuracy (delta vs un-gated baseline)", "signal", "group mode");
    for row in &rows {
        print!("{:<18} {:<16}", format!("{:?}", row.signal), format!("{:?}", row.group_mode));
        for (task, a) in &row.accuracy {
            print!(" {}={a:.3}({:+.3})", task.as_str(), row.delta_vs_baseline[task]);
        }
        println!();
    }
    Ok(())
}
