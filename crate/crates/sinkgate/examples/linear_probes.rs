//! Train linear probes for global scene properties (count, largest size,
//! color/shape presence) on pooled hidden states of each token group at
//! every depth, and print accuracy curves with chance levels.
//!
//! Usage: `cargo run --example linear_probes [checkpoint_dir]`

#[path = "shared/mod.rs"]
mod shared;

use sinkgate::backbone::KeyScalePlan;
use sinkgate::probes::{
    chance_level, curve_of, probe_curves, PoolGroup, ProbeHyper, ProbeTargets, ProbeTask,
};
use sinkgate::sinkid::partition_tokens;

fn main() -> sinkgate::Result<()> {
    let (bb, eval) = shared::trained_backbone(192)?;

    let mut traces = Vec::new();
    let mut partitions = Vec::new();
    for ex in &eval {
        let trace = bb.forward(ex, &KeyScalePlan::none(), false)?;
        partitions.push(partition_tokens(&trace, &bb.config)?);
        traces.push(trace);
    }

    let t0 = std::time::Instant::now();
    let rows = probe_curves(
        &eval,
        &traces,
        &partitions,
        &ProbeTask::ALL,
        &PoolGroup::ALL,
        7,
        &ProbeHyper::default(),
    )?;
    println!("fit {} probes in {:.1}s", rows.len(), t0.elapsed().as_secs_f64());

    for task in ProbeTask::ALL {
        let chance = chance_level(&ProbeTargets::from_examples(task, &eval));
        println!("\ntask {} (chance {:.3}):", task.as_str(), chance);
        for group in PoolGroup::ALL {
            let curve = curve_of(&rows, task, group);
            print!("  {:<10}", group.as_str());
            for (_state, acc) in &curve {
                print!(" {acc:.2}");
            }
            println!();
        }
    }
    println!("\n(columns are residual-stream states 0..=L, left to right)");
    Ok(())
}
