//! Scratch diagnostic for the cell-attribute task (not part of the suite).

use sinkgate::backbone::{
    build_backbone, evaluate, train_backbone, BackboneTrainHyper, KeyScalePlan, ModelConfig,
};
use sinkgate::numerics::rng::Rng;
use sinkgate::scenes::{generate_dataset, SceneConfig, TaskTag};

fn main() -> sinkgate::Result<()> {
    let config = ModelConfig::toy_default();
    let bb = build_backbone(&config, &Rng::from_seed(100))?;
    let eval = generate_dataset(201, &SceneConfig::default(), 512)?;

    // --- attention of every head at the read layer, from the final prompt
    // position, at init: does the planted head point at the queried cell?
    let mut shown = 0;
    for ex in &eval {
        if ex.task_tag != TaskTag::LocalAttribute {
            continue;
        }
        let trace = bb.forward(ex, &KeyScalePlan::none(), true)?;
        let t = trace.spans.t();
        let cell_token = ex.prompt_tokens[4];
        let cell = (cell_token - sinkgate::scenes::TOK_CELL0) as usize;
        let target = trace.spans.vis.start + cell;
        println!("queried cell {cell}, target column {target}");
        for (h, attn) in trace.layers[config.read_layer].attn.iter().enumerate() {
            let row: Vec<f64> = (0..t).map(|j| attn.get2(t - 1, j)).collect();
            let on_target = row[target];
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let argmax = row.iter().position(|&v| v == max).unwrap();
            println!(
                "  head {h}: attn[target]={on_target:.3} max={max:.3} at col {argmax} (vis {})",
                argmax >= trace.spans.vis.start && argmax < trace.spans.vis.end
            );
        }
        // layernormed? print raw residual address dims of the query row and key rows
        let hs = &trace.h[config.read_layer];
        let qrow = hs.row(t - 1);
        println!(
            "  final-pos raw row: addr dim {cell} = {:.3}, row std = {:.3}",
            qrow[cell],
            stddev(qrow)
        );
        let krow = hs.row(target);
        println!(
            "  target cell raw row: addr dim {cell} = {:.3}, row std = {:.3}",
            krow[cell],
            stddev(krow)
        );
        shown += 1;
        if shown >= 3 {
            break;
        }
    }

    // --- init accuracy of the planted chain
    let acc = evaluate(&bb, &eval, &KeyScalePlan::none())?;
    for (task, (c, n)) in acc {
        println!("init eval accuracy {}: {:.3}", task.as_str(), c as f64 / n as f64);
    }
    // top logits at the answer position for one local example at init
    if let Some(ex) = eval.iter().find(|e| e.task_tag == TaskTag::LocalAttribute) {
        let trace = bb.forward(ex, &KeyScalePlan::none(), false)?;
        let t = trace.spans.t();
        let row = trace.logits.row(t - 1);
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        print!("init top logits (answer {}):", ex.answer_tokens[0]);
        for &i in idx.iter().take(5) {
            print!(" tok{}={:.2}", i, row[i]);
        }
        println!();
    }

    // --- chain breakdown for one local example at init
    if let Some(ex) = eval.iter().find(|e| e.task_tag == TaskTag::LocalAttribute) {
        let trace = bb.forward(ex, &KeyScalePlan::none(), true)?;
        let t = trace.spans.t();
        let cell = (ex.prompt_tokens[4] - sinkgate::scenes::TOK_CELL0) as usize;
        let attn = &trace.layers[config.read_layer].attn[0];
        println!("breakdown: queried cell {cell}, answer token {}", ex.answer_tokens[0]);
        print!("  head0 attn over visual cells:");
        for j in 0..config.n {
            let a = attn.get2(t - 1, trace.spans.vis.start + j);
            if a > 0.02 {
                print!(" cell{j}={a:.2}");
            }
        }
        let text_mass: f64 = (0..t)
            .filter(|&j| j < trace.spans.vis.start || j >= trace.spans.vis.end)
            .map(|j| attn.get2(t - 1, j))
            .sum();
        println!(" text={text_mass:.2}");
        let pre = trace.h[config.read_layer].row(t - 1);
        let post = trace.h[config.read_layer + 1].row(t - 1);
        let last = trace.h[config.l].row(t - 1);
        print!("  answer dims 54..62 pre/post/last:");
        for c2 in 0..8 {
            print!(" {:.1}/{:.1}/{:.1}", pre[54 + c2], post[54 + c2], last[54 + c2]);
        }
        println!();
        let row = trace.logits.row(t - 1);
        print!("  color logits 13..21:");
        for tok in 13..21 {
            print!(" {:.2}", row[tok]);
        }
        println!();
    }

    // --- does the pointer survive mixed training?
    let steps: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let train_all = generate_dataset(200, &SceneConfig::default(), 2048)?;
    println!("\nmixed training: {} examples, {steps} steps", train_all.len());
    let mut bb2 = build_backbone(&config, &Rng::from_seed(100))?;
    let hyper = BackboneTrainHyper { steps, ..Default::default() };
    let log = train_backbone(&mut bb2, &train_all, &hyper)?;
    println!("loss {:.3} -> {:.3}", log.losses[0], log.losses.last().unwrap());
    let acc = evaluate(&bb2, &eval, &KeyScalePlan::none())?;
    for (task, (c, n)) in acc {
        println!("eval accuracy {}: {:.3}", task.as_str(), c as f64 / n as f64);
    }
    // attention of head 0 at the read layer on local eval examples
    let mut sum = [0.0f64; 4];
    let mut n_loc = 0usize;
    for ex in eval.iter().filter(|e| e.task_tag == TaskTag::LocalAttribute).take(64) {
        let trace = bb2.forward(ex, &KeyScalePlan::none(), true)?;
        let t = trace.spans.t();
        let cell = (ex.prompt_tokens[4] - sinkgate::scenes::TOK_CELL0) as usize;
        let target = trace.spans.vis.start + cell;
        for (h, attn) in trace.layers[config.read_layer].attn.iter().enumerate() {
            sum[h] += attn.get2(t - 1, target);
        }
        n_loc += 1;
    }
    println!("mean attn[target] at read layer over {n_loc} local eval examples:");
    for (h, s) in sum.iter().enumerate() {
        println!("  head {h}: {:.3}", s / n_loc as f64);
    }
    Ok(())
}

fn stddev(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}
