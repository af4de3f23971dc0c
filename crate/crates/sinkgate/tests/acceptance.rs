//! Acceptance gate: every release-blocking behavior of the library checked
//! end to end at its stated tolerance. Each test prints one pass/fail line
//! in the harness output; run with `cargo test --test acceptance`.
//!
//! The heavyweight criteria share one fully trained backbone built lazily on
//! first use, so the gate trains the model exactly once per process.

use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::OnceLock;
use std::time::Instant;

use sinkgate::backbone::{
    build_backbone, train_backbone, Backbone, BackboneTrainHyper, ForwardCtx, KeyScalePlan,
    ModelConfig,
};
use sinkgate::intervene::{
    baseline_partitions, broad_optimum_stats, coefficient_grid, evaluate_cell, sweep_layers,
    GateCoefficients, SweepCell, SweepMeta, SweepMode, SweepResult,
};
use sinkgate::lsg::{
    gated_accuracy, gated_forward, mean_loss, mean_rho_by_task, train_gate, GateCoeffSource,
    GateModule, GateSignalSpec, GateStack, GateTrainHyper, GroupMode,
};
use sinkgate::numerics::rng::Rng;
use sinkgate::numerics::tape::Tape;
use sinkgate::numerics::tensor::Tensor;
use sinkgate::probes::{
    accuracy_sigma, chance_level, curve_of, pool_group, probe_curves, train_probe, PoolGroup,
    ProbeHyper, ProbeTargets, ProbeTask,
};
use sinkgate::scenes::{generate_dataset, Example, SceneConfig, TaskTag};
use sinkgate::sinkid::{identify_sinks, partition_tokens, TokenPartition};

// ----- shared fixtures --------------------------------------------------------

struct Fixture {
    bb: Backbone,
    eval: Vec<Example>,
    partitions: Vec<TokenPartition>,
    sweep: SweepResult,
    sweep_secs: f64,
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let config = ModelConfig::toy_default();
        let mut bb = build_backbone(&config, &Rng::from_seed(100)).expect("build");
        let train = generate_dataset(200, &SceneConfig::default(), 2048).expect("train data");
        let hyper = BackboneTrainHyper { steps: 1500, ..Default::default() };
        train_backbone(&mut bb, &train, &hyper).expect("training");

        let eval = generate_dataset(201, &SceneConfig::default(), 500).expect("eval data");
        let partitions = baseline_partitions(&bb, &eval).expect("partitions");

        let layers: Vec<usize> = (0..config.l).collect();
        let meta = SweepMeta { seed: 201, dataset_id: "eval".into(), n_examples: eval.len() };
        let t0 = Instant::now();
        let sweep = sweep_layers(&bb, &eval, &layers, meta).expect("sweep");
        let sweep_secs = t0.elapsed().as_secs_f64();
        Fixture { bb, eval, partitions, sweep, sweep_secs }
    })
}

/// Untrained planted backbone plus a few examples, for the cheap identities.
fn untrained() -> (Backbone, Vec<Example>) {
    let bb = build_backbone(&ModelConfig::toy_default(), &Rng::from_seed(100)).expect("build");
    let data = generate_dataset(301, &SceneConfig::default(), 16).expect("data");
    (bb, data)
}

/// Task-frequency-weighted overall accuracy, matching the stacking ranking.
fn overall(acc: &BTreeMap<TaskTag, f64>, data: &[Example]) -> f64 {
    let mut per: BTreeMap<TaskTag, usize> = BTreeMap::new();
    for ex in data {
        *per.entry(ex.task_tag).or_insert(0) += 1;
    }
    let total: usize = per.values().sum();
    acc.iter()
        .map(|(t, a)| a * per.get(t).copied().unwrap_or(0) as f64)
        .sum::<f64>()
        / total as f64
}

fn short_gate_hyper() -> GateTrainHyper {
    GateTrainHyper { epochs: 1, batch: 16, lr: 1e-3, seed: 0 }
}

// ----- criterion 1: sink identification vs an independent oracle --------------

#[test]
fn criterion_01_identify_sinks_matches_oracle_on_1000_matrices() {
    let t0 = Instant::now();
    let mut rng = Rng::from_seed(4242);
    for case in 0..1000u64 {
        let rows = 3 + rng.below(28);
        let cols = 8 + rng.below(24);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(3.0 * rng.normal());
        }
        // plant a few guaranteed-extreme rows so positives occur often
        let tau = 0.5 + 4.0 * rng.uniform();
        let n_dims = 1 + rng.below(3.min(cols));
        let dims: Vec<usize> = rng.sample_distinct(cols, n_dims);
        for _ in 0..rng.below(4) {
            let r = rng.below(rows);
            let d = dims[rng.below(dims.len())];
            data[r * cols + d] = if rng.uniform() < 0.5 { tau + 1.0 } else { -(tau + 1.0) };
        }
        let m = Tensor::new(vec![rows, cols], data.clone()).unwrap();

        // independent oracle: plain loops over the raw buffer
        let mut expect = Vec::new();
        for r in 0..rows {
            let hit = dims.iter().any(|&d| data[r * cols + d].abs() >= tau);
            if hit {
                expect.push(r);
            }
        }
        let got = identify_sinks(&m, &dims, tau).expect("identify");
        assert_eq!(got, expect, "case {case}: rows {rows} cols {cols} tau {tau}");
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 10.0, "1000 oracle comparisons took {secs:.2}s (budget 10s)");
    println!("criterion 01: identification matches oracle on 1000 matrices in {secs:.2}s — pass");
}

// ----- criterion 2: partition invariants over 300 traces -----------------------

#[test]
fn criterion_02_partitions_are_disjoint_and_cover_on_300_traces() {
    let (bb, _) = untrained();
    let data = generate_dataset(303, &SceneConfig::default(), 300).expect("data");
    for ex in &data {
        let trace = bb.forward(ex, &KeyScalePlan::none(), false).expect("forward");
        let part = partition_tokens(&trace, &bb.config).expect("partition");
        part.check_invariants().expect("builtin invariant check");
        // independent disjoint/cover check per state
        for s in 0..part.states() {
            let mut seen = vec![false; part.n];
            for &j in part
                .vsink
                .iter()
                .chain(&part.lsink_per_state[s])
                .chain(&part.ordinary_per_state[s])
            {
                assert!(!seen[j], "cell {j} in two groups at state {s}");
                seen[j] = true;
            }
            assert!(seen.iter().all(|&v| v), "state {s} does not cover all cells");
        }
        // the encoder-sink set never changes across states by construction;
        // decoder sinks may appear only at or after the emergence layer
        for s in 0..=bb.config.plant.emergence_layer {
            assert!(part.lsink_per_state[s].is_empty(), "decoder sink before emergence");
        }
    }
    println!("criterion 02: partition invariants hold on 300 traces — pass");
}

// ----- criterion 3: key-scaling identities -------------------------------------

#[test]
fn criterion_03_key_scaling_identities() {
    let (bb, data) = untrained();
    let ex = &data[0];
    let base = bb.forward(ex, &KeyScalePlan::none(), true).expect("base");
    let t = base.spans.t();

    // (a) the all-ones plan is a bitwise no-op
    let mut ones = KeyScalePlan::none();
    for l in 0..bb.config.l {
        for tok in 0..t {
            ones.set(l, tok, 1.0);
        }
    }
    let same = bb.forward(ex, &ones, true).expect("ones");
    for (a, b) in base.logits.data().iter().zip(same.logits.data()) {
        assert_eq!(a.to_bits(), b.to_bits(), "all-ones plan changed a logit bit");
    }

    // (b) scaling token j's key by c scales exactly column j of the
    // pre-softmax logits by c
    let layer = bb.config.read_layer;
    let token = base.spans.vis.start + 5;
    let c = 0.37;
    let mut plan = KeyScalePlan::none();
    plan.set(layer, token, c);
    let gated = bb.forward(ex, &plan, true).expect("gated");
    for hd in 0..bb.config.h {
        for qi in 0..t {
            for j in 0..t {
                let b = base.layers[layer].attn_logits[hd].get2(qi, j);
                let g = gated.layers[layer].attn_logits[hd].get2(qi, j);
                let want = if j == token { c * b } else { b };
                let denom = want.abs().max(1e-12);
                assert!(
                    (g - want).abs() / denom < 1e-6,
                    "head {hd} ({qi},{j}): {g} vs {want}"
                );
            }
        }
    }

    // (c) d(logit)/d(coefficient) by central differences equals the
    // unscaled logit (the logit is linear in the coefficient)
    let c0 = 0.7;
    let h = 1e-3;
    let logits_at = |cv: f64| {
        let mut p = KeyScalePlan::none();
        p.set(layer, token, cv);
        bb.forward(ex, &p, true).expect("fd forward")
    };
    let plus = logits_at(c0 + h);
    let minus = logits_at(c0 - h);
    for hd in 0..bb.config.h {
        for qi in 0..t {
            let analytic = base.layers[layer].attn_logits[hd].get2(qi, token);
            let fd = (plus.layers[layer].attn_logits[hd].get2(qi, token)
                - minus.layers[layer].attn_logits[hd].get2(qi, token))
                / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-9);
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "head {hd} q {qi}: d(logit)/dc {fd} vs {analytic}"
            );
        }
    }
    println!("criterion 03: key-scaling identities (no-op, column scaling, derivative) — pass");
}

// ----- criterion 4: untrained gate equals the explicit uniform-0.5 plan --------

#[test]
fn criterion_04_untrained_gate_is_bitwise_uniform_half_scaling() {
    let (bb, data) = untrained();
    let layer = bb.config.read_layer;
    let gate = GateModule::new(
        bb.config.d,
        layer,
        GroupMode::VsinkVsRest,
        GateSignalSpec::LastToken,
        &mut Rng::from_seed(5),
    );
    let stack = GateStack::single(gate);
    for ex in &data[..8] {
        let part = baseline_partitions(&bb, std::slice::from_ref(ex)).expect("part");
        let gated = gated_forward(&bb, ex, &stack, &part[0], false).expect("gated");
        let mut plan = KeyScalePlan::none();
        for tok in bb.config.spans(0).vis {
            plan.set(layer, tok, 0.5);
        }
        let planned = bb.forward(ex, &plan, false).expect("planned");
        for (a, b) in gated.logits.data().iter().zip(planned.logits.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "untrained gate deviates from the 0.5 plan");
        }
        assert_eq!(gated.coeffs[layer], planned.coeffs[layer]);
    }
    println!("criterion 04: untrained gate is bitwise the uniform-0.5 visual scaling — pass");
}

// ----- criterion 5: gate gradients vs finite differences -----------------------

#[test]
fn criterion_05_gate_gradient_matches_finite_differences() {
    let t0 = Instant::now();
    let config = ModelConfig::tiny_gradcheck();
    assert_eq!((config.d, config.l, config.t_max()), (16, 3, 14));
    let bb = Backbone::random_raw(&config, &mut Rng::from_seed(11)).expect("raw backbone");

    // fixed 12-token sequence: 2 prefix + 5 visual + 5 suffix
    let tokens_pre = [0usize, 1];
    let tokens_post = [3usize, 4, 5, 6, 7];
    let mut vrng = Rng::from_seed(42);
    let n = config.n;
    let vis_t = Tensor::new(
        vec![n, config.d],
        (0..n * config.d).map(|_| vrng.normal()).collect(),
    )
    .unwrap();
    let enc = Tensor::zeros(vec![n, config.d_v]);
    let target = 2usize;
    let spans = config.spans(tokens_post.len());
    assert_eq!(spans.t(), 12);

    // synthetic partition: cell 0 encoder sink, cell 1 decoder sink late
    let states = config.l + 1;
    let lsink: Vec<Vec<usize>> = (0..states)
        .map(|s| if s >= 2 { vec![1] } else { vec![] })
        .collect();
    let ordinary: Vec<Vec<usize>> = lsink
        .iter()
        .map(|l| (1..n).filter(|c| !l.contains(c)).collect())
        .collect();
    let part = TokenPartition {
        n,
        vsink: vec![0],
        lsink_per_state: lsink,
        ordinary_per_state: ordinary,
    };

    let mut rng = Rng::from_seed(21);
    let mut gate = GateModule::new(
        config.d,
        1,
        GroupMode::ThreeGroup,
        GateSignalSpec::LastToken,
        &mut rng,
    );
    // randomize the zero-initialized head so every parameter gets gradient
    for name in ["w2", "b2", "b1"] {
        for v in gate.params.get_mut(name).unwrap().data_mut() {
            *v = 0.3 * rng.normal();
        }
    }

    let loss_of = |g: &GateModule| -> f64 {
        let stack = GateStack::single(g.clone());
        let mut tape = Tape::eval();
        let pv = bb.param_vars(&mut tape, false);
        let vis = tape.leaf(vis_t.clone());
        let ctx = ForwardCtx { spans: spans.clone(), config: &config, encoder_out: &enc };
        let mut src = GateCoeffSource::new(&stack, &part, false);
        let out = bb
            .build_graph(&mut tape, &pv, &tokens_pre, vis, &tokens_post, &mut src, &ctx, false)
            .expect("graph");
        let loss = tape
            .cross_entropy_rows(out.logits, Rc::new(vec![(spans.t() - 1, target)]))
            .expect("loss");
        tape.value(loss).scalar_value()
    };

    // analytic gradients
    let stack = GateStack::single(gate.clone());
    let mut tape = Tape::new();
    let pv = bb.param_vars(&mut tape, false);
    let vis = tape.leaf(vis_t.clone());
    let ctx = ForwardCtx { spans: spans.clone(), config: &config, encoder_out: &enc };
    let mut src = GateCoeffSource::new(&stack, &part, true);
    let out = bb
        .build_graph(&mut tape, &pv, &tokens_pre, vis, &tokens_post, &mut src, &ctx, false)
        .expect("graph");
    let loss = tape
        .cross_entropy_rows(out.logits, Rc::new(vec![(spans.t() - 1, target)]))
        .expect("loss");
    let grads = tape.backward(loss).expect("backward");

    let h = 1e-5;
    let mut checked = 0usize;
    for name in ["ln_g", "ln_b", "w1", "b1", "w2", "b2"] {
        let analytic = grads
            .get(src.vars[&1][name])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(gate.params[name].shape().to_vec()));
        for i in 0..gate.params[name].numel() {
            let mut plus = gate.clone();
            plus.params.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = gate.clone();
            minus.params.get_mut(name).unwrap().data_mut()[i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                (a - fd).abs() / denom <= 1e-4,
                "{name}[{i}]: analytic {a} vs finite difference {fd}"
            );
            checked += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient check took {secs:.1}s (budget 60s)");
    println!(
        "criterion 05: {checked} gate gradient entries match finite differences in {secs:.1}s — pass"
    );
}

// ----- criterion 6: backbone frozen through gate training ----------------------

#[test]
fn criterion_06_backbone_bytes_frozen_through_gate_training() {
    let fix = fixture();
    let before = fix.bb.digest().expect("digest");
    let mut gate = GateModule::new(
        fix.bb.config.d,
        fix.bb.config.read_layer,
        GroupMode::VsinkVsRest,
        GateSignalSpec::LastToken,
        &mut Rng::from_parts(0, "gate_init", 9),
    );
    let train = &fix.eval[..64];
    train_gate(&fix.bb, train, &mut gate, &short_gate_hyper(), None).expect("train gate");
    assert!(
        gate.params["w2"].data().iter().any(|&v| v != 0.0),
        "gate parameters never moved"
    );
    assert_eq!(fix.bb.digest().expect("digest"), before, "backbone bytes changed");
    println!("criterion 06: backbone serialization is bitwise unchanged by gate training — pass");
}

// ----- criterion 7: the task-dependent sweep signature --------------------------

#[test]
fn criterion_07_sweep_signature_at_the_read_layer() {
    let fix = fixture();
    assert!(
        fix.sweep_secs < 600.0,
        "full-grid sweep took {:.0}s (budget 600s)",
        fix.sweep_secs
    );
    let layer = fix.bb.config.read_layer;
    let cells: Vec<&SweepCell> =
        fix.sweep.cells.iter().filter(|c| c.layer == layer).collect();
    assert_eq!(cells.len(), 11);

    let acc = |c: &SweepCell, t: TaskTag| c.accuracy[&t];
    let best = |t: TaskTag, keep: &dyn Fn(&SweepCell) -> bool| {
        cells
            .iter()
            .filter(|c| keep(c))
            .map(|c| acc(c, t))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let at = |t: TaskTag, v: f64| {
        cells
            .iter()
            .find(|c| (c.coeffs.vsink - v).abs() < 1e-12)
            .map(|c| acc(c, t))
            .expect("grid point")
    };

    // global aggregation: a best grid point favors the encoder-sink keys,
    // and suppressing them costs at least 5 accuracy points
    let g = TaskTag::GlobalCount;
    let g_best_all = best(g, &|_| true);
    let g_best_sink = best(g, &|c| c.coeffs.vsink >= c.coeffs.ordinary);
    assert!(
        g_best_sink >= g_best_all - 1e-12,
        "global: no optimum with sink keys favored (best {g_best_all:.3} vs {g_best_sink:.3})"
    );
    let g_gap = g_best_all - at(g, 0.0);
    assert!(
        g_gap >= 0.05,
        "global: suppressing sink keys only costs {:.1}pp (need >= 5pp)",
        g_gap * 100.0
    );

    // local readout: the preference is reversed
    let l = TaskTag::LocalAttribute;
    let l_best_all = best(l, &|_| true);
    let l_best_ord = best(l, &|c| c.coeffs.vsink <= c.coeffs.ordinary);
    assert!(
        l_best_ord >= l_best_all - 1e-12,
        "local: no optimum with ordinary keys favored"
    );
    let l_gap = l_best_all - at(l, 1.0);
    assert!(
        l_gap >= 0.05,
        "local: suppressing ordinary keys only costs {:.1}pp (need >= 5pp)",
        l_gap * 100.0
    );
    println!(
        "criterion 07: read-layer sweep reverses between tasks \
         (global gap {:.1}pp, local gap {:.1}pp, {:.0}s for the 11x{} grid) — pass",
        g_gap * 100.0,
        l_gap * 100.0,
        fix.sweep_secs,
        fix.bb.config.l
    );
}

// ----- criterion 8: stage-2 cells collapse to stage 1 ---------------------------

#[test]
fn criterion_08_stage2_equal_coefficients_collapse_exactly() {
    let fix = fixture();
    let data = &fix.eval[..60];
    let partitions = &fix.partitions[..60];
    let layer = fix.bb.config.read_layer;
    for fixed_v in [0.0, 0.3, 1.0] {
        for (c, _) in coefficient_grid() {
            let three = evaluate_cell(
                &fix.bb,
                data,
                partitions,
                layer,
                &GateCoefficients::three_group(fixed_v, c, c),
            )
            .expect("three-group cell");
            let two = evaluate_cell(
                &fix.bb,
                data,
                partitions,
                layer,
                &GateCoefficients::two_group(fixed_v, c),
            )
            .expect("two-group cell");
            assert_eq!(
                three.accuracy, two.accuracy,
                "stage-2 cell (v={fixed_v}, l=o={c}) differs from stage 1"
            );
        }
    }
    println!("criterion 08: equal-coefficient stage-2 cells collapse to stage 1 exactly — pass");
}

// ----- criterion 9: greedy stacking reuses checkpoints --------------------------

#[test]
fn criterion_09_greedy_stacking_reuses_best_single_checkpoint() {
    let fix = fixture();
    let gate_train = generate_dataset(202, &SceneConfig::default(), 256).expect("gate data");
    let mut candidates = Vec::new();
    for layer in [1usize, 2, 3, 4] {
        let mut g = GateModule::new(
            fix.bb.config.d,
            layer,
            GroupMode::VsinkVsRest,
            GateSignalSpec::LastToken,
            &mut Rng::from_parts(0, "gate_init", layer as u64),
        );
        train_gate(&fix.bb, &gate_train, &mut g, &short_gate_hyper(), None).expect("train");
        candidates.push(g);
    }
    let digests: BTreeMap<usize, String> = candidates
        .iter()
        .map(|g| (g.meta.scaled_layer, g.digest().expect("digest")))
        .collect();

    let data = &fix.eval[..200];
    let partitions = &fix.partitions[..200];
    // independent ranking of the single-gate candidates
    let mut singles: Vec<(usize, f64, BTreeMap<TaskTag, f64>)> = Vec::new();
    for g in &candidates {
        let acc = gated_accuracy(&fix.bb, data, partitions, &GateStack::single(g.clone()))
            .expect("single accuracy");
        singles.push((g.meta.scaled_layer, overall(&acc, data), acc));
    }
    let best = singles
        .iter()
        .cloned()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
        .unwrap();

    let report = sinkgate::lsg::greedy_stack(&fix.bb, data, partitions, candidates, 3)
        .expect("greedy stack");

    // step 1 is exactly the best single checkpoint
    assert_eq!(report.steps[0].added_layer, best.0, "step 1 added a different gate");
    assert_eq!(report.steps[0].single_accuracy, best.2);
    assert_eq!(report.steps[0].stack_accuracy, best.2);
    assert_eq!(report.steps[0].active_layers, vec![best.0]);

    // Added/Active/Delta are reported at every step, and the active set grows
    for (i, step) in report.steps.iter().enumerate() {
        assert_eq!(step.step, i + 1);
        assert_eq!(step.active_layers.len(), i + 1);
        assert!(step.active_layers.contains(&step.added_layer));
        assert_eq!(step.delta_vs_baseline.len(), step.stack_accuracy.len());
    }
    assert_eq!(
        report.nonnegative_deltas + report.negative_deltas,
        report.steps.last().unwrap().delta_vs_baseline.len()
    );

    // no retraining: the stacked gates are byte-identical to the candidates
    for g in &report.stack.gates {
        assert_eq!(
            g.digest().expect("digest"),
            digests[&g.meta.scaled_layer],
            "gate at layer {} was modified during stacking",
            g.meta.scaled_layer
        );
    }
    println!("criterion 09: greedy stacking starts from the best single gate and reuses checkpoints byte-identically — pass");
}

// ----- criterion 10: what the sink tokens aggregate -----------------------------

#[test]
fn criterion_10_sink_pool_carries_the_global_count() {
    let fix = fixture();
    let t0 = Instant::now();
    let n_probe = 300;
    let data = &fix.eval[..n_probe];
    let partitions = &fix.partitions[..n_probe];
    let traces: Vec<_> = data
        .iter()
        .map(|ex| fix.bb.forward(ex, &KeyScalePlan::none(), false).expect("trace"))
        .collect();
    let seed = 7u64;
    let rows = probe_curves(
        data,
        &traces,
        partitions,
        &[ProbeTask::Count],
        &[PoolGroup::VSink, PoolGroup::Ordinary5],
        seed,
        &ProbeHyper::default(),
    )
    .expect("probe curves");
    let sink = curve_of(&rows, ProbeTask::Count, PoolGroup::VSink);
    let ordinary = curve_of(&rows, ProbeTask::Count, PoolGroup::Ordinary5);

    let first_state = fix.bb.config.plant.emergence_layer + 1;
    for state in first_state..=fix.bb.config.l {
        let s = sink[&state];
        let o = ordinary[&state];
        assert!(s >= 0.95, "state {state}: sink count probe {s:.3} < 0.95");
        assert!(
            s - o >= 0.2,
            "state {state}: sink probe {s:.3} not >= ordinary {o:.3} + 0.2"
        );
    }

    // permuted-label control: accuracy within 3 sigma of the chance level
    for state in [first_state, fix.bb.config.l] {
        let mut feats = Vec::new();
        let mut kept = Vec::new();
        for (i, (trace, part)) in traces.iter().zip(partitions).enumerate() {
            if let Some(f) =
                pool_group(trace, part, PoolGroup::VSink, state, seed, i as u64).expect("pool")
            {
                feats.push(f);
                kept.push(i);
            }
        }
        let sel: Vec<Example> = kept.iter().map(|&i| data[i].clone()).collect();
        let targets = ProbeTargets::from_examples(ProbeTask::Count, &sel)
            .permuted(&mut Rng::from_parts(seed, "permute", state as u64));
        let split = ((feats.len() as f64) * 0.7).round() as usize;
        let probe = train_probe(
            &feats[..split],
            &targets.slice(0..split),
            &ProbeHyper::default(),
        )
        .expect("permuted probe");
        let acc = probe
            .accuracy(&feats[split..], &targets.slice(split..feats.len()))
            .expect("accuracy");
        let chance = chance_level(&targets.slice(split..feats.len()));
        let sigma = accuracy_sigma(chance, feats.len() - split);
        assert!(
            (acc - chance).abs() <= 3.0 * sigma,
            "state {state}: permuted probe {acc:.3} vs chance {chance:.3} (3 sigma = {:.3})",
            3.0 * sigma
        );
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 300.0, "probe battery took {secs:.0}s (budget 300s)");
    println!(
        "criterion 10: sink pool decodes the count (>= 0.95, >= ordinary + 0.2, permuted at chance) in {secs:.0}s — pass"
    );
}

// ----- criterion 11: the trained gate separates the tasks -----------------------

#[test]
fn criterion_11_trained_gate_scores_separate_tasks() {
    let fix = fixture();
    let layer = fix.bb.config.read_layer;
    let gate_train = generate_dataset(204, &SceneConfig::default(), 512).expect("gate data");
    let mut gate = GateModule::new(
        fix.bb.config.d,
        layer,
        GroupMode::VsinkVsRest,
        GateSignalSpec::LastToken,
        &mut Rng::from_parts(0, "gate_init", layer as u64),
    );
    train_gate(&fix.bb, &gate_train, &mut gate, &GateTrainHyper::default(), None)
        .expect("train gate");
    let stack = GateStack::single(gate);

    let data = &fix.eval[..200];
    let partitions = &fix.partitions[..200];
    let rho = mean_rho_by_task(&fix.bb, data, partitions, &stack, layer).expect("rho");
    let global = rho[&TaskTag::GlobalCount][0];
    let local = rho[&TaskTag::LocalAttribute][0];
    assert!(
        global - local >= 0.1,
        "sink score separation {:.3} (global {global:.3}, local {local:.3}) below 0.1",
        global - local
    );
    // the gated model keeps working
    let acc = gated_accuracy(&fix.bb, data, partitions, &stack).expect("gated accuracy");
    let loss = mean_loss(&fix.bb, data, partitions, &stack).expect("gated loss");
    assert!(loss.is_finite());
    for (task, a) in &acc {
        assert!(*a > 0.5, "gated accuracy collapsed on {}: {a:.3}", task.as_str());
    }
    println!(
        "criterion 11: gate sink score separates tasks (global {global:.3} vs local {local:.3}) — pass"
    );
}

// ----- criterion 12: broad-optimum statistics -----------------------------------

#[test]
fn criterion_12_broad_optimum_stats_exact_and_populated() {
    // hand-built two-layer sweep with known top1-top2 gaps
    let grid = coefficient_grid();
    let mut cells = Vec::new();
    let mut push = |layer: usize, accs: [f64; 11]| {
        for (i, &(v, r)) in grid.iter().enumerate() {
            let mut m = BTreeMap::new();
            m.insert(TaskTag::GlobalCount, accs[i]);
            cells.push(SweepCell {
                layer,
                coeffs: GateCoefficients::two_group(v, r),
                accuracy: m,
            });
        }
    };
    // layer 0: top two 0.50 and 0.48 -> gap 0.02; layer 1: 0.401 vs 0.40 -> 0.001
    let mut a0 = [0.40; 11];
    a0[3] = 0.50;
    a0[8] = 0.48;
    let mut a1 = [0.40; 11];
    a1[0] = 0.401;
    push(0, a0);
    push(1, a1);
    let mut baseline = BTreeMap::new();
    baseline.insert(TaskTag::GlobalCount, 0.5);
    let fixture_sweep = SweepResult {
        schema_version: 1,
        mode: SweepMode::TwoGroup,
        baseline,
        cells,
        meta: SweepMeta { seed: 0, dataset_id: "fixture".into(), n_examples: 0 },
    };
    let stats = broad_optimum_stats(&fixture_sweep).expect("stats");
    assert_eq!(stats.gaps.len(), 2);
    assert!((stats.gaps[0].2 - 0.02).abs() < 1e-12, "layer 0 gap {}", stats.gaps[0].2);
    assert!((stats.gaps[1].2 - 0.001).abs() < 1e-12, "layer 1 gap {}", stats.gaps[1].2);
    assert_eq!(stats.frac_below_half_pp, 0.5);
    assert_eq!(stats.frac_below_fifth_pp, 0.5);
    assert_eq!(stats.histogram[0], 1);
    assert_eq!(stats.histogram[2], 1);
    assert_eq!(stats.histogram.iter().sum::<usize>(), 2);

    // and on the real sweep the histogram is populated
    let fix = fixture();
    let real = broad_optimum_stats(&fix.sweep).expect("real stats");
    assert_eq!(
        real.histogram.iter().sum::<usize>(),
        real.gaps.len(),
        "histogram entries do not account for every (layer, task) gap"
    );
    assert!(!real.gaps.is_empty());
    println!("criterion 12: broad-optimum gap statistics exact on the fixture and populated on the real sweep — pass");
}

// ----- criterion 13: byte-identical reruns --------------------------------------

#[test]
fn criterion_13_pipeline_rerun_is_byte_identical() {
    let bin = env!("CARGO_BIN_EXE_sinkgate");
    let tmp = tempfile::tempdir().expect("tempdir");
    let config_path = tmp.path().join("config.json");
    std::fs::write(
        &config_path,
        r#"{
  "schema_version": 1,
  "data": { "train_n": 64, "eval_n": 48,
            "scene": { "grid_side": 4, "max_objects": 9, "noise_sigma": 0.05 },
            "train_seed": 200, "eval_seed": 201 },
  "backbone": { "build_seed": 100,
                "train": { "steps": 12, "batch": 8, "lr": 0.002, "seed": 0, "augment": true } },
  "analyze": { "n_examples": 12 },
  "sweep": { "layers": [3], "n_examples": 24, "block": 3 }
}"#,
    )
    .expect("write config");

    let run_all = |out: &std::path::Path| {
        for args in [
            vec!["data", "gen"],
            vec!["backbone", "train"],
            vec!["backbone", "eval"],
            vec!["analyze"],
            vec!["sweep", "--layer", "3"],
        ] {
            let status = std::process::Command::new(bin)
                .args(&args)
                .args(["--config", config_path.to_str().unwrap()])
                .args(["--out", out.to_str().unwrap()])
                .args(["--precision", "f64"])
                .status()
                .expect("spawn");
            assert!(status.success(), "{args:?} failed");
        }
    };
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    run_all(&out_a);
    run_all(&out_b);

    // every numeric artifact byte-identical; manifests carry wall-clock
    // timestamps and are the only exclusion
    fn walk(dir: &std::path::Path, root: &std::path::Path, out: &mut Vec<std::path::PathBuf>) {
        for entry in std::fs::read_dir(dir).expect("read_dir") {
            let p = entry.expect("entry").path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut files_a = Vec::new();
    walk(&out_a, &out_a, &mut files_a);
    files_a.sort();
    let mut files_b = Vec::new();
    walk(&out_b, &out_b, &mut files_b);
    files_b.sort();
    assert_eq!(files_a, files_b, "the two runs produced different artifact sets");

    let mut compared = 0usize;
    for rel in &files_a {
        if rel.starts_with("manifests") {
            continue;
        }
        let a = std::fs::read(out_a.join(rel)).expect("read a");
        let b = std::fs::read(out_b.join(rel)).expect("read b");
        assert_eq!(a, b, "artifact {} differs between reruns", rel.display());
        compared += 1;
    }
    assert!(compared >= 10, "only {compared} artifacts compared");
    println!("criterion 13: {compared} pipeline artifacts byte-identical across reruns — pass");
}
