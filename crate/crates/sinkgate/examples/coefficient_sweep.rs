//! Sweep key-scaling coefficient pairs over every decoder layer: stage 1
//! scales (encoder-sink, rest) on the 11-point grid, then stage 2 pins the
//! encoder-sink coefficient at its stage-1 optimum and sweeps
//! (decoder-sink, ordinary). Prints per-block best cells, top-1 vs top-2
//! gap statistics, and the stage-2 additional gain.
//!
//! Usage: `cargo run --example coefficient_sweep [checkpoint_dir]`

#[path = "shared/mod.rs"]
mod shared;

use sinkgate::intervene::{
    additional_gain, broad_optimum_stats, report_blocks, sweep_layers, sweep_stage2, SweepMeta,
};

fn main() -> sinkgate::Result<()> {
    let (bb, eval) = shared::trained_backbone(128)?;

    let layers: Vec<usize> = (0..bb.config.l).collect();
    let meta = SweepMeta { seed: 201, dataset_id: "eval".into(), n_examples: eval.len() };
    let t0 = std::time::Instant::now();
    let stage1 = sweep_layers(&bb, &eval, &layers, meta.clone())?;
    println!("stage-1 sweep of {} layers took {:.1}s", layers.len(), t0.elapsed().as_secs_f64());

    println!("\nbest cell per 3-layer block and task:");
    for best in report_blocks(&stage1, 3)? {
        println!(
            "  {:<16} block {} -> layer {} ({:.1}, {:.1}) acc {:.3} ({:+.3} vs baseline)",
            best.task.as_str(),
            best.block,
            best.layer,
            best.coeffs.vsink,
            best.coeffs.ordinary,
            best.accuracy,
            best.delta_vs_baseline,
        );
    }

    let gaps = broad_optimum_stats(&stage1)?;
    println!(
        "\ntop-1 vs top-2 gaps: {:.0}% below 0.5pp, {:.0}% below 0.2pp",
        100.0 * gaps.frac_below_half_pp,
        100.0 * gaps.frac_below_fifth_pp,
    );

    // stage 2 at the layer right after decoder-sink emergence, encoder-sink
    // coefficient pinned at its stage-1 overall optimum for that layer
    let focus = bb.config.read_layer;
    let mut best_pair = (1.0, f64::NEG_INFINITY);
    for cell in stage1.cells.iter().filter(|c| c.layer == focus) {
        let overall: f64 = cell.accuracy.values().sum();
        if overall > best_pair.1 {
            best_pair = (cell.coeffs.vsink, overall);
        }
    }
    let stage2 = sweep_stage2(&bb, &eval, focus, best_pair.0, meta)?;
    println!("\nstage 2 at layer {focus}, encoder-sink coefficient pinned at {:.1}:", best_pair.0);
    for (task, gain) in additional_gain(&stage1, &stage2) {
        println!("  {:<16} additional gain over stage 1: {:+.3}", task.as_str(), gain);
    }
    Ok(())
}
