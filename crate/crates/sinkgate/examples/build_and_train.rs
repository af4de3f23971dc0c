//! Build the desk-scale backbone with planted sinks, train it on the scene
//! tasks, and report accuracy plus a quick two-group key sweep at the layers
//! around sink emergence.
//!
//! Usage: `cargo run --example build_and_train [steps] [train_n]`

use sinkgate::backbone::{
    build_backbone, evaluate, BackboneTrainHyper, KeyScalePlan, ModelConfig,
};
use sinkgate::intervene::{sweep_layers, SweepMeta};
use sinkgate::numerics::rng::Rng;
use sinkgate::scenes::{generate_dataset, SceneConfig};

fn main() -> sinkgate::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1200);
    let train_n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(512);

    let config = ModelConfig::toy_default();
    let mut bb = build_backbone(&config, &Rng::from_seed(100))?;
    println!("built backbone, digest {}", &bb.digest()?[..12]);

    let scene_cfg = SceneConfig::default();
    let train = generate_dataset(200, &scene_cfg, train_n)?;
    let eval = generate_dataset(201, &scene_cfg, 256)?;

    let hyper = BackboneTrainHyper { steps, ..Default::default() };
    let t0 = std::time::Instant::now();
    let log = sinkgate::backbone::train_backbone(&mut bb, &train, &hyper)?;
    println!(
        "trained {} steps in {:.1}s, loss {:.3} -> {:.3}",
        steps,
        t0.elapsed().as_secs_f64(),
        log.losses.first().unwrap_or(&f64::NAN),
        log.losses.last().unwrap_or(&f64::NAN),
    );
    // loss curve at 10% checkpoints
    for i in 0..10 {
        let at = (log.losses.len() * (i + 1) / 10).saturating_sub(1);
        print!(" {:.3}", log.losses[at]);
    }
    println!();

    for (name, data) in [("train", &train[..256.min(train.len())]), ("eval", &eval[..])] {
        let acc = evaluate(&bb, data, &KeyScalePlan::none())?;
        print!("{name}: ");
        for (task, (c, n)) in &acc {
            print!("{}={:.3} ", task.as_str(), *c as f64 / *n as f64);
        }
        println!();
    }

    // quick sweep around the emergence layer on a slice of eval data
    let meta = SweepMeta { seed: 201, dataset_id: "eval".into(), n_examples: 128 };
    let layers = [2usize, 3, 4];
    let t1 = std::time::Instant::now();
    let sweep = sweep_layers(&bb, &eval[..128], &layers, meta)?;
    println!("sweep of layers {layers:?} took {:.1}s", t1.elapsed().as_secs_f64());
    for task in sweep.tasks() {
        println!("task {}: baseline {:.3}", task.as_str(), sweep.baseline[&task]);
        for &layer in &layers {
            print!("  layer {layer}: ");
            for cell in sweep.cells.iter().filter(|c| c.layer == layer) {
                print!("{:.2}/{:.2}={:.3} ", cell.coeffs.vsink, cell.coeffs.ordinary, cell.accuracy[&task]);
            }
            println!();
        }
    }
    Ok(())
}
