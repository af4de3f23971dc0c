//! Identify encoder- and decoder-emerged sink tokens and print the
//! layer-wise salience profile: per-group hidden norms, attention mass from
//! the final prompt position, and group sizes.
//!
//! Usage: `cargo run --example sink_analysis [checkpoint_dir]`

#[path = "shared/mod.rs"]
mod shared;

use sinkgate::backbone::KeyScalePlan;
use sinkgate::sinkid::{partition_tokens, salience_profile, Group};

fn main() -> sinkgate::Result<()> {
    let (bb, eval) = shared::trained_backbone(64)?;

    let mut traces = Vec::new();
    let mut partitions = Vec::new();
    for ex in &eval {
        let trace = bb.forward(ex, &KeyScalePlan::none(), true)?;
        let part = partition_tokens(&trace, &bb.config)?;
        part.check_invariants()?;
        traces.push(trace);
        partitions.push(part);
    }

    let profile = salience_profile(&traces, &partitions)?;

    println!("\nmean group sizes per state (sum = n = {}):", bb.config.n);
    for (s, counts) in profile.group_counts.iter().enumerate() {
        print!("  state {s:>2}:");
        for g in Group::ALL {
            print!(" {}={:.2}", g.as_str(), counts[&g]);
        }
        println!();
    }

    println!("\nmean hidden-row l2 norm per group:");
    for (s, row) in profile.norms.iter().enumerate() {
        print!("  state {s:>2}:");
        for g in Group::ALL {
            match row[&g] {
                Some(v) => print!(" {}={:8.3}", g.as_str(), v),
                None => print!(" {}=   --  ", g.as_str()),
            }
        }
        println!();
    }

    println!("\nmean per-token attention from the final prompt position:");
    for (l, row) in profile.attn_from_last.iter().enumerate() {
        print!("  layer {l:>2}:");
        for g in Group::ALL {
            match row[&g] {
                Some(v) => print!(" {}={:.4}", g.as_str(), v),
                None => print!(" {}=  --  ", g.as_str()),
            }
        }
        println!();
    }
    Ok(())
}
