//! Shared setup for the runnable examples: obtain a trained backbone either
//! from a checkpoint directory (first CLI argument) or by a quick in-process
//! training run, plus the evaluation data the analyses consume.

use sinkgate::backbone::{build_backbone, train_backbone, Backbone, BackboneTrainHyper, ModelConfig};
use sinkgate::numerics::rng::Rng;
use sinkgate::scenes::{generate_dataset, Example, SceneConfig};

/// Returns a trained backbone and an evaluation dataset.
///
/// With a CLI argument, the backbone is loaded from that checkpoint
/// directory (as written by `sinkgate backbone train`). Without one, a
/// fresh backbone is built and trained briefly — enough for the planted
/// structure and the count/relation tasks, though the cell-attribute task
/// wants the full training budget (see `build_and_train`).
pub fn trained_backbone(eval_n: usize) -> sinkgate::Result<(Backbone, Vec<Example>)> {
    let eval = generate_dataset(201, &SceneConfig::default(), eval_n)?;
    if let Some(dir) = std::env::args().nth(1) {
        let bb = Backbone::load_checkpoint(std::path::Path::new(&dir))?;
        println!("loaded checkpoint {dir}, digest {}", &bb.digest()?[..12]);
        return Ok((bb, eval));
    }

    let config = ModelConfig::toy_default();
    let mut bb = build_backbone(&config, &Rng::from_seed(100))?;
    let train = generate_dataset(200, &SceneConfig::default(), 1024)?;
    let hyper = BackboneTrainHyper { steps: 400, ..Default::default() };
    println!("no checkpoint argument; training {} quick steps ...", hyper.steps);
    let t0 = std::time::Instant::now();
    train_backbone(&mut bb, &train, &hyper)?;
    println!("trained in {:.1}s, digest {}", t0.elapsed().as_secs_f64(), &bb.digest()?[..12]);
    Ok((bb, eval))
}
