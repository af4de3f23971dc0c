//! Learned per-layer key gates.
//!
//! A gate is a small MLP (layernorm -> D x h -> relu -> h x G -> softmax)
//! that reads a pooled hidden-state signal from its layer's input and emits
//! one coefficient per token group. The final linear layer is zero-initialized
//! so an untrained gate outputs the exactly-uniform split (0.5, 0.5) for two
//! groups, making "untrained gate == uniform plan" an exact identity rather
//! than an approximation. The backbone is frozen during gate training: its
//! parameters enter the tape as non-trainable leaves and never receive
//! gradients.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    hex_digest, Backbone, CoeffSource, ForwardCtx, KeyScalePlan, RunTrace, Spans,
};
use crate::error::{Error, Result};
use crate::intervene::baseline_partitions;
use crate::numerics::adam::{Adam, AdamConfig};
use crate::numerics::rng::Rng;
use crate::numerics::sgt1::{self, Precision};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::scenes::{Example, TaskTag};
use crate::sinkid::{Group, TokenPartition};

/// Hidden width of the gate MLP.
pub const GATE_HIDDEN: usize = 16;

/// Which token groups the gate scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    /// Two groups: encoder-emerged sinks vs everything else visual.
    VsinkVsRest,
    /// Two groups: decoder-emerged sinks vs everything else visual.
    LsinkVsRest,
    /// Three groups: vsink / lsink / ordinary.
    ThreeGroup,
}

impl GroupMode {
    pub fn n_groups(self) -> usize {
        match self {
            GroupMode::VsinkVsRest | GroupMode::LsinkVsRest => 2,
            GroupMode::ThreeGroup => 3,
        }
    }

    pub fn group_index(self, g: Group) -> usize {
        match (self, g) {
            (GroupMode::VsinkVsRest, Group::VSink) => 0,
            (GroupMode::VsinkVsRest, _) => 1,
            (GroupMode::LsinkVsRest, Group::LSink) => 0,
            (GroupMode::LsinkVsRest, _) => 1,
            (GroupMode::ThreeGroup, Group::VSink) => 0,
            (GroupMode::ThreeGroup, Group::LSink) => 1,
            (GroupMode::ThreeGroup, Group::Ordinary) => 2,
        }
    }
}

/// Where the gate's input signal comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSignalSpec {
    /// Hidden state of the final prompt position (the default).
    LastToken,
    MeanPoolAll,
    MeanPoolVisual,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateMeta {
    pub scaled_layer: usize,
    pub group_mode: GroupMode,
    pub signal: GateSignalSpec,
    pub d: usize,
    pub hidden: usize,
}

/// One per-layer gate. Parameter names: `ln_g`, `ln_b`, `w1`, `b1`, `w2`,
/// `b2`; the map's name order is the canonical serialization order.
#[derive(Debug, Clone)]
pub struct GateModule {
    pub meta: GateMeta,
    pub params: BTreeMap<String, Tensor>,
}

const GATE_EPS: f64 = 1e-6;

impl GateModule {
    pub fn new(
        d: usize,
        scaled_layer: usize,
        group_mode: GroupMode,
        signal: GateSignalSpec,
        rng: &mut Rng,
    ) -> Self {
        Self::with_hidden(d, GATE_HIDDEN, scaled_layer, group_mode, signal, rng)
    }

    pub fn with_hidden(
        d: usize,
        hidden: usize,
        scaled_layer: usize,
        group_mode: GroupMode,
        signal: GateSignalSpec,
        rng: &mut Rng,
    ) -> Self {
        let g = group_mode.n_groups();
        let sigma = (1.0 / d as f64).sqrt();
        let mut params = BTreeMap::new();
        params.insert("ln_g".into(), Tensor::new(vec![d], vec![1.0; d]).unwrap());
        params.insert("ln_b".into(), Tensor::zeros(vec![d]));
        params.insert(
            "w1".into(),
            Tensor::new(vec![d, hidden], (0..d * hidden).map(|_| sigma * rng.normal()).collect())
                .unwrap(),
        );
        params.insert("b1".into(), Tensor::zeros(vec![hidden]));
        // zero-initialized head: untrained output is exactly uniform
        params.insert("w2".into(), Tensor::zeros(vec![hidden, g]));
        params.insert("b2".into(), Tensor::zeros(vec![g]));
        GateModule {
            meta: GateMeta { scaled_layer, group_mode, signal, d, hidden },
            params,
        }
    }

    /// Insert the gate parameters on a tape (trainable when `train`).
    pub fn param_vars(&self, tape: &mut Tape, train: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, t)| {
                let v = if train {
                    tape.trainable_leaf(t.clone())
                } else {
                    tape.leaf(t.clone())
                };
                (name.clone(), v)
            })
            .collect()
    }

    /// Group scores rho (a `1 x G` node) from the layer-input state node.
    pub fn rho_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        h_prev: Var,
        spans: &Spans,
    ) -> Result<Var> {
        let t = tape.value(h_prev).rows();
        let sig = match self.meta.signal {
            GateSignalSpec::LastToken => tape.slice_rows(h_prev, t - 1, 1)?,
            GateSignalSpec::MeanPoolAll => tape.mean_rows(h_prev),
            GateSignalSpec::MeanPoolVisual => {
                let v = tape.slice_rows(h_prev, spans.vis.start, spans.vis.len())?;
                tape.mean_rows(v)
            }
        };
        let x = tape.layernorm(sig, vars["ln_g"], vars["ln_b"], GATE_EPS)?;
        let z1 = tape.matmul(x, vars["w1"])?;
        let z1 = tape.add_row_broadcast(z1, vars["b1"])?;
        let z1 = tape.relu(z1);
        let z2 = tape.matmul(z1, vars["w2"])?;
        let z2 = tape.add_row_broadcast(z2, vars["b2"])?;
        tape.softmax_rows(z2)
    }

    /// Length-T coefficient vector: each visual token gets its group's rho,
    /// non-visual tokens get exactly 1.
    pub fn coeffs_on_tape(
        &self,
        tape: &mut Tape,
        rho: Var,
        partition: &TokenPartition,
        spans: &Spans,
    ) -> Result<Var> {
        if self.meta.scaled_layer >= partition.states() {
            return Err(Error::Config("gate layer beyond partition states".into()));
        }
        let t = spans.t();
        let g = self.meta.group_mode.n_groups();
        let mut masks = vec![vec![0.0; t]; g];
        let mut nonvis = vec![1.0; t];
        for tok in spans.vis.clone() {
            nonvis[tok] = 0.0;
        }
        for cell in 0..partition.n {
            let gi = self
                .meta
                .group_mode
                .group_index(partition.group_of(self.meta.scaled_layer, cell));
            masks[gi][spans.vis.start + cell] = 1.0;
        }
        let mut coeff = tape.leaf(Tensor::new(vec![t], nonvis)?);
        for (gi, mask) in masks.into_iter().enumerate() {
            let rho_g = tape.slice_cols(rho, gi, 1)?;
            let scaled = tape.mask_scale(Rc::new(mask), rho_g)?;
            coeff = tape.add(coeff, scaled)?;
        }
        Ok(coeff)
    }

    pub fn serialized_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let meta = serde_json::to_vec(&self.meta)?;
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        for (name, t) in &self.params {
            buf.extend_from_slice(name.as_bytes());
            sgt1::write_tensor_to(&mut buf, t, Precision::F64)?;
        }
        Ok(buf)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex_digest(&self.serialized_bytes()?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gate_meta.json"), serde_json::to_vec_pretty(&self.meta)?)?;
        for (name, t) in &self.params {
            sgt1::write_tensor(&dir.join(format!("{name}.sgt1")), t, Precision::F64)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: GateMeta = serde_json::from_slice(&fs::read(dir.join("gate_meta.json"))?)?;
        let mut params = BTreeMap::new();
        for name in ["ln_g", "ln_b", "w1", "b1", "w2", "b2"] {
            params.insert(name.to_string(), sgt1::read_tensor(&dir.join(format!("{name}.sgt1")))?);
        }
        Ok(GateModule { meta, params })
    }
}

/// A set of gates on distinct layers.
#[derive(Debug, Clone, Default)]
pub struct GateStack {
    pub gates: Vec<GateModule>,
}

impl GateStack {
    pub fn single(gate: GateModule) -> Self {
        GateStack { gates: vec![gate] }
    }

    pub fn validate(&self, l: usize) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for g in &self.gates {
            if g.meta.scaled_layer >= l {
                return Err(Error::Config(format!(
                    "gate layer {} out of {} layers",
                    g.meta.scaled_layer, l
                )));
            }
            if !seen.insert(g.meta.scaled_layer) {
                return Err(Error::Config(format!(
                    "two gates on layer {}",
                    g.meta.scaled_layer
                )));
            }
        }
        Ok(())
    }

    pub fn gate_at(&self, layer: usize) -> Option<&GateModule> {
        self.gates.iter().find(|g| g.meta.scaled_layer == layer)
    }

    pub fn serialized_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        for g in &self.gates {
            buf.extend_from_slice(&g.serialized_bytes()?);
        }
        Ok(buf)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex_digest(&self.serialized_bytes()?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("stack.json"), serde_json::to_vec_pretty(&self.gates.len())?)?;
        for (i, g) in self.gates.iter().enumerate() {
            g.save(&dir.join(format!("gate{i:02}")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let n: usize = serde_json::from_slice(&fs::read(dir.join("stack.json"))?)?;
        let gates = (0..n)
            .map(|i| GateModule::load(&dir.join(format!("gate{i:02}"))))
            .collect::<Result<_>>()?;
        Ok(GateStack { gates })
    }
}

/// Coefficient source that runs the gates of a stack on their layers and
/// returns exact unit coefficients everywhere else. Group membership comes
/// from a partition identified on the un-gated forward pass of the same
/// example; gate scores are recorded per layer for inspection and training.
pub struct GateCoeffSource<'a> {
    stack: &'a GateStack,
    partition: &'a TokenPartition,
    train: bool,
    /// Tape nodes of each gate's parameters, keyed by layer (training path).
    pub vars: BTreeMap<usize, BTreeMap<String, Var>>,
    /// Gate score values per layer, copied out of the tape.
    pub rho_values: BTreeMap<usize, Vec<f64>>,
}

impl<'a> GateCoeffSource<'a> {
    pub fn new(stack: &'a GateStack, partition: &'a TokenPartition, train: bool) -> Self {
        GateCoeffSource { stack, partition, train, vars: BTreeMap::new(), rho_values: BTreeMap::new() }
    }
}

impl CoeffSource for GateCoeffSource<'_> {
    fn layer_coeffs(
        &mut self,
        tape: &mut Tape,
        layer: usize,
        h_prev: Var,
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        match self.stack.gate_at(layer) {
            None => {
                let t = ctx.spans.t();
                Ok(tape.leaf(Tensor::new(vec![t], vec![1.0; t])?))
            }
            Some(gate) => {
                let vars = gate.param_vars(tape, self.train);
                let rho = gate.rho_on_tape(tape, &vars, h_prev, &ctx.spans)?;
                self.rho_values.insert(layer, tape.value(rho).data().to_vec());
                self.vars.insert(layer, vars);
                gate.coeffs_on_tape(tape, rho, self.partition, &ctx.spans)
            }
        }
    }
}

/// Forward pass with a gate stack applied; partition from the caller.
pub fn gated_forward(
    bb: &Backbone,
    example: &Example,
    stack: &GateStack,
    partition: &TokenPartition,
    capture: bool,
) -> Result<RunTrace> {
    stack.validate(bb.config.l)?;
    let mut src = GateCoeffSource::new(stack, partition, false);
    bb.forward_with(example, &mut src, capture)
}

/// Gate scores per layer for one example.
pub fn gated_rho(
    bb: &Backbone,
    example: &Example,
    stack: &GateStack,
    partition: &TokenPartition,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    stack.validate(bb.config.l)?;
    let mut src = GateCoeffSource::new(stack, partition, false);
    bb.forward_with(example, &mut src, false)?;
    Ok(src.rho_values)
}

/// Whether the gated greedy answer matches; single-token answers mean the
/// one forward pass is exactly the prefill where gate scores are fixed.
pub fn gated_answers_correctly(
    bb: &Backbone,
    example: &Example,
    stack: &GateStack,
    partition: &TokenPartition,
) -> Result<bool> {
    let trace = gated_forward(bb, example, stack, partition, false)?;
    let last = trace.logits.rows() - 1;
    let tok = crate::backbone::argmax_lowest(trace.logits.row(last));
    Ok(tok == example.answer_tokens[0])
}

/// Exact-match accuracy per task under a gate stack.
pub fn gated_accuracy(
    bb: &Backbone,
    data: &[Example],
    partitions: &[TokenPartition],
    stack: &GateStack,
) -> Result<BTreeMap<TaskTag, f64>> {
    let mut counts: BTreeMap<TaskTag, (usize, usize)> = BTreeMap::new();
    for (ex, part) in data.iter().zip(partitions) {
        let e = counts.entry(ex.task_tag).or_insert((0, 0));
        e.1 += 1;
        if gated_answers_correctly(bb, ex, stack, part)? {
            e.0 += 1;
        }
    }
    Ok(counts.into_iter().map(|(t, (c, n))| (t, c as f64 / n as f64)).collect())
}

fn overall(acc_counts: &BTreeMap<TaskTag, f64>, data: &[Example]) -> f64 {
    // weighted by task frequency
    let mut per_task: BTreeMap<TaskTag, usize> = BTreeMap::new();
    for ex in data {
        *per_task.entry(ex.task_tag).or_insert(0) += 1;
    }
    let total: usize = per_task.values().sum();
    acc_counts
        .iter()
        .map(|(t, a)| a * per_task.get(t).copied().unwrap_or(0) as f64)
        .sum::<f64>()
        / total as f64
}

/// Mean gate scores per task at one layer.
pub fn mean_rho_by_task(
    bb: &Backbone,
    data: &[Example],
    partitions: &[TokenPartition],
    stack: &GateStack,
    layer: usize,
) -> Result<BTreeMap<TaskTag, Vec<f64>>> {
    let mut sums: BTreeMap<TaskTag, (Vec<f64>, usize)> = BTreeMap::new();
    for (ex, part) in data.iter().zip(partitions) {
        let rho = gated_rho(bb, ex, stack, part)?;
        let r = rho
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("no gate on layer {layer}")))?;
        let e = sums.entry(ex.task_tag).or_insert_with(|| (vec![0.0; r.len()], 0));
        for (s, v) in e.0.iter_mut().zip(r) {
            *s += v;
        }
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(t, (s, n))| (t, s.iter().map(|v| v / n as f64).collect()))
        .collect())
}

/// Mean next-token loss of the answer position under a gate stack.
pub fn mean_loss(
    bb: &Backbone,
    data: &[Example],
    partitions: &[TokenPartition],
    stack: &GateStack,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for (ex, part) in data.iter().zip(partitions) {
        let trace = gated_forward(bb, ex, stack, part, false)?;
        let last = trace.logits.rows() - 1;
        let row = trace.logits.row(last);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logz = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += logz - row[ex.answer_tokens[0]];
    }
    Ok(total / data.len() as f64)
}

// ----- training --------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateTrainHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GateTrainHyper {
    fn default() -> Self {
        GateTrainHyper { epochs: 2, batch: 16, lr: 1e-3, seed: 0 }
    }
}

/// Gate-score statistics of one (layer, task) cell at a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RhoStat {
    pub layer: usize,
    pub task: TaskTag,
    /// Mean of the first gate component (the sink-group score) over the
    /// evaluation samples of this task.
    pub mean_rho0: f64,
    pub std_rho0: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainPoint {
    pub step: usize,
    /// Mean batch loss since the previous checkpoint.
    pub loss: f64,
    /// Per (layer, task) gate-score statistics on the evaluation samples
    /// (empty when no evaluation set was given).
    pub rho: Vec<RhoStat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    /// Per-step batch losses.
    pub losses: Vec<f64>,
    /// Checkpoints every 10% of training.
    pub checkpoints: Vec<TrainPoint>,
}

/// Per (layer, task) gate-score statistics of a stack on evaluation data.
pub fn rho_stats(
    bb: &Backbone,
    data: &[Example],
    partitions: &[TokenPartition],
    stack: &GateStack,
) -> Result<Vec<RhoStat>> {
    let mut per: BTreeMap<(usize, TaskTag), Vec<f64>> = BTreeMap::new();
    for (ex, part) in data.iter().zip(partitions) {
        for (layer, rho) in gated_rho(bb, ex, stack, part)? {
            per.entry((layer, ex.task_tag)).or_default().push(rho[0]);
        }
    }
    Ok(per
        .into_iter()
        .map(|((layer, task), vals)| {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            RhoStat { layer, task, mean_rho0: mean, std_rho0: var.sqrt(), n }
        })
        .collect())
}

/// Trajectory checkpoints as CSV: one row per checkpoint, layer, and task.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let mut out = String::from("checkpoint_step,loss,layer,task,mean_rho0,std_rho0,n\n");
    for p in &traj.checkpoints {
        if p.rho.is_empty() {
            out.push_str(&format!("{},{},,,,,\n", p.step, p.loss));
        }
        for r in &p.rho {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.step,
                p.loss,
                r.layer,
                r.task.as_str(),
                r.mean_rho0,
                r.std_rho0,
                r.n
            ));
        }
    }
    out
}

/// Train one gate against next-token loss with the backbone frozen. When an
/// evaluation set is given, checkpoint gate-score statistics are recorded
/// on it per task.
pub fn train_gate(
    bb: &Backbone,
    data: &[Example],
    gate: &mut GateModule,
    hyper: &GateTrainHyper,
    eval: Option<(&[Example], &[TokenPartition])>,
) -> Result<Trajectory> {
    let mut stack = GateStack::single(gate.clone());
    let traj = train_joint(bb, data, &mut stack, hyper, eval)?;
    *gate = stack.gates.pop().unwrap();
    Ok(traj)
}

/// Train all gates of a stack jointly. The backbone enters every tape as
/// frozen leaves, so only gate parameters move.
pub fn train_joint(
    bb: &Backbone,
    data: &[Example],
    stack: &mut GateStack,
    hyper: &GateTrainHyper,
    eval: Option<(&[Example], &[TokenPartition])>,
) -> Result<Trajectory> {
    stack.validate(bb.config.l)?;
    if data.is_empty() {
        return Err(Error::Config("empty gate training set".into()));
    }
    if hyper.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let steps = hyper.epochs * data.len().div_ceil(hyper.batch);

    // frozen vision path and un-gated partitions, computed once
    let encoded: Vec<(Tensor, Tensor)> = data
        .iter()
        .map(|ex| bb.encode_visual(&ex.patch_features))
        .collect::<Result<_>>()?;
    let partitions = baseline_partitions(bb, data)?;

    // stable parameter ordering across gates for the optimizer
    let keys: Vec<(usize, String)> = stack
        .gates
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| g.params.keys().map(move |n| (gi, n.clone())))
        .collect();
    let shapes: Vec<Vec<usize>> = keys
        .iter()
        .map(|(gi, n)| stack.gates[*gi].params[n].shape().to_vec())
        .collect();
    let mut opt = Adam::new(AdamConfig { lr: hyper.lr, ..Default::default() }, &shapes);
    let root = Rng::from_parts(hyper.seed, "gate_train", 0);
    let mut losses = Vec::with_capacity(steps);
    let mut checkpoints = Vec::new();
    let every = (steps / 10).max(1);

    for step in 0..steps {
        let mut brng = root.split("batch", step as u64);
        let mut grad_sum: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        let mut loss_sum = 0.0;
        for _ in 0..hyper.batch {
            let idx = brng.below(data.len());
            let ex = &data[idx];
            let (enc, proj) = &encoded[idx];

            let mut tape = Tape::new();
            let pv = bb.param_vars(&mut tape, false);
            let vis = tape.leaf(proj.clone());
            let spans = bb.config.spans(ex.prompt_tokens.len() - 2);
            let ctx = ForwardCtx { spans: spans.clone(), config: &bb.config, encoder_out: enc };
            let mut src = GateCoeffSource::new(stack, &partitions[idx], true);
            let g = bb.build_graph(
                &mut tape,
                &pv,
                &ex.prompt_tokens[..2],
                vis,
                &ex.prompt_tokens[2..],
                &mut src,
                &ctx,
                false,
            )?;
            let pairs = Rc::new(vec![(spans.t() - 1, ex.answer_tokens[0])]);
            let loss = tape.cross_entropy_rows(g.logits, pairs)?;
            loss_sum += tape.value(loss).scalar_value();
            let grads = tape.backward(loss)?;
            for ((gi, name), gs) in keys.iter().zip(grad_sum.iter_mut()) {
                let layer = stack.gates[*gi].meta.scaled_layer;
                let var = src.vars[&layer][name];
                if let Some(gt) = grads.get(var) {
                    for (a, b) in gs.data_mut().iter_mut().zip(gt.data()) {
                        *a += b;
                    }
                }
            }
        }
        let inv = 1.0 / hyper.batch as f64;
        for g in &mut grad_sum {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        losses.push(loss_sum * inv);

        let mut values: Vec<Tensor> = keys
            .iter()
            .map(|(gi, n)| stack.gates[*gi].params[n].clone())
            .collect();
        {
            let mut refs: Vec<&mut Tensor> = values.iter_mut().collect();
            opt.step(&mut refs, &grad_sum)?;
        }
        for ((gi, n), v) in keys.iter().zip(values) {
            *stack.gates[*gi].params.get_mut(n).unwrap() = v;
        }

        if (step + 1) % every == 0 || step + 1 == steps {
            let start = losses.len().saturating_sub(every);
            let mean = losses[start..].iter().sum::<f64>() / (losses.len() - start) as f64;
            let rho = match eval {
                Some((ed, ep)) if !ed.is_empty() => rho_stats(bb, ed, ep, stack)?,
                _ => Vec::new(),
            };
            checkpoints.push(TrainPoint { step: step + 1, loss: mean, rho });
        }
    }
    Ok(Trajectory { losses, checkpoints })
}

// ----- greedy stacking and ablation -----------------------------------------

/// One greedy-stacking step: which gate was added and how the accumulated
/// set performs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackStep {
    pub step: usize,
    /// Layer of the gate appended at this step (the Added column).
    pub added_layer: usize,
    /// Layers active after this step (the Active column).
    pub active_layers: Vec<usize>,
    pub single_accuracy: BTreeMap<TaskTag, f64>,
    pub stack_accuracy: BTreeMap<TaskTag, f64>,
    /// Per-task accuracy delta of the accumulated set vs the un-gated
    /// baseline.
    pub delta_vs_baseline: BTreeMap<TaskTag, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StackReport {
    pub baseline: BTreeMap<TaskTag, f64>,
    pub steps: Vec<StackStep>,
    /// (count of per-task deltas >= 0, count < 0) at the final step.
    pub nonnegative_deltas: usize,
    pub negative_deltas: usize,
    #[serde(skip)]
    pub stack: GateStack,
}

fn delta_map(
    acc: &BTreeMap<TaskTag, f64>,
    base: &BTreeMap<TaskTag, f64>,
) -> BTreeMap<TaskTag, f64> {
    acc.iter()
        .map(|(t, a)| (*t, a - base.get(t).copied().unwrap_or(0.0)))
        .collect()
}

/// Greedy stacking: rank trained single-layer gate checkpoints by overall
/// single-gate accuracy (ties to the lower layer) and append them in that
/// order up to `steps` gates, evaluating the accumulated set at each step.
/// Gates are used as-is — no retraining — and every step is reported even
/// when accuracy dips.
pub fn greedy_stack(
    bb: &Backbone,
    data: &[Example],
    partitions: &[TokenPartition],
    candidates: Vec<GateModule>,
    steps: usize,
) -> Result<StackReport> {
    if candidates.is_empty() {
        return Err(Error::Config("greedy stacking needs candidates".into()));
    }
    if steps == 0 || steps > candidates.len() {
        return Err(Error::Config(format!(
            "step budget {steps} outside 1..={}",
            candidates.len()
        )));
    }
    let baseline: BTreeMap<TaskTag, f64> =
        crate::backbone::evaluate(bb, data, &KeyScalePlan::none())?
            .into_iter()
            .map(|(t, (c, n))| (t, c as f64 / n as f64))
            .collect();

    let mut ranked: Vec<(f64, BTreeMap<TaskTag, f64>, GateModule)> = Vec::new();
    for g in candidates {
        let acc = gated_accuracy(bb, data, partitions, &GateStack::single(g.clone()))?;
        ranked.push((overall(&acc, data), acc, g));
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.2.meta.scaled_layer.cmp(&b.2.meta.scaled_layer))
    });

    let mut stack = GateStack::default();
    let mut report_steps = Vec::new();
    for (i, (_, single_acc, gate)) in ranked.into_iter().take(steps).enumerate() {
        let added_layer = gate.meta.scaled_layer;
        stack.gates.push(gate);
        stack.validate(bb.config.l)?;
        let acc = gated_accuracy(bb, data, partitions, &stack)?;
        let mut active: Vec<usize> = stack.gates.iter().map(|g| g.meta.scaled_layer).collect();
        active.sort_unstable();
        report_steps.push(StackStep {
            step: i + 1,
            added_layer,
            active_layers: active,
            single_accuracy: single_acc,
            stack_accuracy: acc.clone(),
            delta_vs_baseline: delta_map(&acc, &baseline),
        });
    }
    let last = report_steps.last().unwrap();
    let nonneg = last.delta_vs_baseline.values().filter(|d| **d >= 0.0).count();
    let neg = last.delta_vs_baseline.len() - nonneg;
    Ok(StackReport {
        baseline,
        steps: report_steps,
        nonnegative_deltas: nonneg,
        negative_deltas: neg,
        stack,
    })
}

/// One design-variant row of the ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub signal: GateSignalSpec,
    pub group_mode: GroupMode,
    pub accuracy: BTreeMap<TaskTag, f64>,
    pub delta_vs_baseline: BTreeMap<TaskTag, f64>,
}

/// Design-choice ablation: train one gate per (signal, group-mode) variant
/// at the given layer under identical seeds and compare on evaluation data.
/// The (last_token, vsink_vs_rest) row is the default configuration.
pub fn ablate(
    bb: &Backbone,
    train_data: &[Example],
    eval_data: &[Example],
    eval_partitions: &[TokenPartition],
    layer: usize,
    hyper: &GateTrainHyper,
) -> Result<Vec<AblationRow>> {
    let baseline: BTreeMap<TaskTag, f64> =
        crate::backbone::evaluate(bb, eval_data, &KeyScalePlan::none())?
            .into_iter()
            .map(|(t, (c, n))| (t, c as f64 / n as f64))
            .collect();
    let signals = [
        GateSignalSpec::LastToken,
        GateSignalSpec::MeanPoolAll,
        GateSignalSpec::MeanPoolVisual,
    ];
    let modes = [GroupMode::VsinkVsRest, GroupMode::LsinkVsRest, GroupMode::ThreeGroup];
    let mut rows = Vec::new();
    for &signal in &signals {
        for &mode in &modes {
            let mut gate = GateModule::new(
                bb.config.d,
                layer,
                mode,
                signal,
                &mut Rng::from_parts(hyper.seed, "ablate_init", 0),
            );
            train_gate(bb, train_data, &mut gate, hyper, None)?;
            let acc =
                gated_accuracy(bb, eval_data, eval_partitions, &GateStack::single(gate))?;
            rows.push(AblationRow {
                signal,
                group_mode: mode,
                delta_vs_baseline: delta_map(&acc, &baseline),
                accuracy: acc,
            });
        }
    }
    Ok(rows)
}
