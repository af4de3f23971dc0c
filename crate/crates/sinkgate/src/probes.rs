//! Linear probes over pooled hidden states.
//!
//! A probe asks what a token group "knows" at a given depth: hidden rows of
//! the group's members are mean-pooled per image, then a linear classifier
//! is fit by full-batch gradient descent (features z-scored with training
//! statistics, L2 on the weights). Count probes are multi-class softmax;
//! attribute-presence probes are independent per-bit logistic classifiers.
//!
//! The ordinary-token control pools a fixed set of five cells per image,
//! drawn with a per-image seeded stream from the cells that belong to no
//! sink group at any depth, so the same cells are compared across layers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::RunTrace;
use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;
use crate::scenes::{Example, NUM_COLORS, NUM_COUNT_CLASSES, NUM_SHAPES, NUM_SIZES};
use crate::sinkid::TokenPartition;

/// How many ordinary cells the control group pools.
pub const ORDINARY_POOL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolGroup {
    /// Encoder-emerged sink cells (fixed across depth).
    VSink,
    /// Decoder-emerged sink cells at the probed state.
    LSink,
    /// Fixed per-image sample of `ORDINARY_POOL` never-sink cells.
    Ordinary5,
    AllVisual,
}

impl PoolGroup {
    pub const ALL: [PoolGroup; 4] =
        [PoolGroup::VSink, PoolGroup::LSink, PoolGroup::Ordinary5, PoolGroup::AllVisual];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolGroup::VSink => "vsink",
            PoolGroup::LSink => "lsink",
            PoolGroup::Ordinary5 => "ordinary5",
            PoolGroup::AllVisual => "all_visual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    /// Object count, `NUM_COUNT_CLASSES` classes.
    Count,
    /// Size bin of the largest object; empty scenes form an extra class.
    SizeMax,
    /// Per-color presence bits.
    ColorPresence,
    /// Per-shape presence bits.
    ShapePresence,
}

impl ProbeTask {
    pub const ALL: [ProbeTask; 4] = [
        ProbeTask::Count,
        ProbeTask::SizeMax,
        ProbeTask::ColorPresence,
        ProbeTask::ShapePresence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeTask::Count => "count",
            ProbeTask::SizeMax => "size_max",
            ProbeTask::ColorPresence => "color_presence",
            ProbeTask::ShapePresence => "shape_presence",
        }
    }
}

/// Probe targets for a set of examples.
#[derive(Debug, Clone)]
pub enum ProbeTargets {
    /// (label per example, class count); exact-match accuracy.
    Classes(Vec<usize>, usize),
    /// Presence bits per example; mean per-bit accuracy.
    Bits(Vec<Vec<bool>>),
}

impl ProbeTargets {
    pub fn from_examples(task: ProbeTask, data: &[Example]) -> Self {
        match task {
            ProbeTask::Count => ProbeTargets::Classes(
                data.iter().map(|e| e.labels.count).collect(),
                NUM_COUNT_CLASSES,
            ),
            // empty scenes have no largest object; they get class NUM_SIZES
            ProbeTask::SizeMax => ProbeTargets::Classes(
                data.iter().map(|e| e.labels.size.unwrap_or(NUM_SIZES)).collect(),
                NUM_SIZES + 1,
            ),
            ProbeTask::ColorPresence => {
                debug_assert!(data.iter().all(|e| e.labels.color.len() == NUM_COLORS));
                ProbeTargets::Bits(data.iter().map(|e| e.labels.color.clone()).collect())
            }
            ProbeTask::ShapePresence => {
                debug_assert!(data.iter().all(|e| e.labels.shape.len() == NUM_SHAPES));
                ProbeTargets::Bits(data.iter().map(|e| e.labels.shape.clone()).collect())
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ProbeTargets::Classes(v, _) => v.len(),
            ProbeTargets::Bits(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        match self {
            ProbeTargets::Classes(v, c) => ProbeTargets::Classes(v[range].to_vec(), *c),
            ProbeTargets::Bits(v) => ProbeTargets::Bits(v[range].to_vec()),
        }
    }

    /// Labels permuted with a seeded stream (for the chance-level control).
    pub fn permuted(&self, rng: &mut Rng) -> Self {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.below(i + 1);
            order.swap(i, j);
        }
        match self {
            ProbeTargets::Classes(v, c) => {
                ProbeTargets::Classes(order.iter().map(|&i| v[i]).collect(), *c)
            }
            ProbeTargets::Bits(v) => {
                ProbeTargets::Bits(order.iter().map(|&i| v[i].clone()).collect())
            }
        }
    }
}

/// Cells that belong to no sink group at any state.
fn never_sink_cells(partition: &TokenPartition) -> Vec<usize> {
    (0..partition.n)
        .filter(|c| {
            !partition.vsink.contains(c)
                && partition.lsink_per_state.iter().all(|l| !l.contains(c))
        })
        .collect()
}

/// The fixed ordinary control cells of one image (at most `ORDINARY_POOL`,
/// drawn without replacement from the never-sink cells).
pub fn ordinary5_cells(partition: &TokenPartition, seed: u64, image_index: u64) -> Vec<usize> {
    let pool = never_sink_cells(partition);
    if pool.len() <= ORDINARY_POOL {
        return pool;
    }
    let mut rng = Rng::from_parts(seed, "ordinary5", image_index);
    let mut picks = rng.sample_distinct(pool.len(), ORDINARY_POOL);
    picks.sort_unstable();
    picks.into_iter().map(|i| pool[i]).collect()
}

/// Mean-pool the hidden rows of a group's members at one state. `None` when
/// the group has no members there.
pub fn pool_group(
    trace: &RunTrace,
    partition: &TokenPartition,
    group: PoolGroup,
    state: usize,
    seed: u64,
    image_index: u64,
) -> Result<Option<Vec<f64>>> {
    if state >= trace.h.len() {
        return Err(Error::Config(format!("state {state} out of trace")));
    }
    let cells: Vec<usize> = match group {
        PoolGroup::VSink => partition.vsink.clone(),
        PoolGroup::LSink => partition.lsink_per_state[state].clone(),
        PoolGroup::Ordinary5 => ordinary5_cells(partition, seed, image_index),
        PoolGroup::AllVisual => (0..partition.n).collect(),
    };
    if cells.is_empty() {
        return Ok(None);
    }
    let h = &trace.h[state];
    let vis0 = trace.spans.vis.start;
    let d = h.cols();
    let mut pooled = vec![0.0; d];
    for &c in &cells {
        for (p, v) in pooled.iter_mut().zip(h.row(vis0 + c)) {
            *p += v;
        }
    }
    for p in &mut pooled {
        *p /= cells.len() as f64;
    }
    Ok(Some(pooled))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        ProbeHyper { steps: 500, lr: 0.1, l2: 1e-4 }
    }
}

/// A fit linear probe, including the training-set feature statistics used
/// to z-score inputs.
#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub w: Tensor,
    pub b: Vec<f64>,
    pub multiclass: bool,
    /// A constant training label column (single observed class, or a bit
    /// that never flips); accuracy on such targets is not informative.
    pub degenerate: bool,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

fn standardize_stats(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let m = x.len() as f64;
    let d = x[0].len();
    let mut mu = vec![0.0; d];
    for row in x {
        for (s, v) in mu.iter_mut().zip(row) {
            *s += v / m;
        }
    }
    let mut sigma = vec![0.0; d];
    for row in x {
        for ((s, v), u) in sigma.iter_mut().zip(row).zip(&mu) {
            *s += (v - u) * (v - u) / m;
        }
    }
    for s in &mut sigma {
        *s = s.sqrt().max(1e-8);
    }
    (mu, sigma)
}

fn one_hot_rows(targets: &ProbeTargets) -> (Tensor, usize) {
    match targets {
        ProbeTargets::Classes(v, c) => {
            let mut y = Tensor::zeros(vec![v.len(), *c]);
            for (i, &cls) in v.iter().enumerate() {
                y.set2(i, cls, 1.0);
            }
            (y, *c)
        }
        ProbeTargets::Bits(v) => {
            let c = v[0].len();
            let mut y = Tensor::zeros(vec![v.len(), c]);
            for (i, bits) in v.iter().enumerate() {
                for (j, &b) in bits.iter().enumerate() {
                    if b {
                        y.set2(i, j, 1.0);
                    }
                }
            }
            (y, c)
        }
    }
}

fn targets_degenerate(targets: &ProbeTargets) -> bool {
    match targets {
        ProbeTargets::Classes(v, _) => v.windows(2).all(|w| w[0] == w[1]),
        ProbeTargets::Bits(v) => {
            let c = v[0].len();
            (0..c).any(|j| v.windows(2).all(|w| w[0][j] == w[1][j]))
        }
    }
}

/// Fit a linear probe by full-batch gradient descent.
pub fn train_probe(
    x: &[Vec<f64>],
    targets: &ProbeTargets,
    hyper: &ProbeHyper,
) -> Result<TrainedProbe> {
    if x.is_empty() || x.len() != targets.len() {
        return Err(Error::Config("probe features/targets length mismatch".into()));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Config("ragged probe features".into()));
    }
    let multiclass = matches!(targets, ProbeTargets::Classes(..));
    let (mu, sigma) = standardize_stats(x);
    let m = x.len();
    let mut xs = Tensor::zeros(vec![m, d]);
    for (i, row) in x.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            xs.set2(i, j, (v - mu[j]) / sigma[j]);
        }
    }
    let (y, c) = one_hot_rows(targets);

    let mut w = Tensor::zeros(vec![d, c]);
    let mut b = vec![0.0; c];
    let inv_m = 1.0 / m as f64;
    for _ in 0..hyper.steps {
        // logits -> probabilities
        let mut p = xs.matmul(&w)?;
        for i in 0..m {
            for (v, bj) in p.row_mut(i).iter_mut().zip(&b) {
                *v += bj;
            }
            if multiclass {
                let row = p.row_mut(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            } else {
                for v in p.row_mut(i).iter_mut() {
                    *v = 1.0 / (1.0 + (-*v).exp());
                }
            }
        }
        // residual
        for (pv, yv) in p.data_mut().iter_mut().zip(y.data()) {
            *pv -= yv;
        }
        let grad_w = xs.transpose().matmul(&p)?;
        for j in 0..d {
            for k in 0..c {
                let g = grad_w.get2(j, k) * inv_m + hyper.l2 * w.get2(j, k);
                let cur = w.get2(j, k);
                w.set2(j, k, cur - hyper.lr * g);
            }
        }
        for k in 0..c {
            let g: f64 = (0..m).map(|i| p.get2(i, k)).sum::<f64>() * inv_m;
            b[k] -= hyper.lr * g;
        }
    }
    w.check_finite("probe weights")?;
    Ok(TrainedProbe {
        w,
        b,
        multiclass,
        degenerate: targets_degenerate(targets),
        mu,
        sigma,
    })
}

impl TrainedProbe {
    fn logits(&self, row: &[f64]) -> Vec<f64> {
        let d = self.mu.len();
        let c = self.b.len();
        let mut out = self.b.clone();
        for j in 0..d {
            let x = (row[j] - self.mu[j]) / self.sigma[j];
            if x == 0.0 {
                continue;
            }
            for (o, k) in out.iter_mut().zip(0..c) {
                *o += x * self.w.get2(j, k);
            }
        }
        out
    }

    pub fn predict_class(&self, row: &[f64]) -> usize {
        crate::backbone::argmax_lowest(&self.logits(row))
    }

    pub fn predict_bits(&self, row: &[f64]) -> Vec<bool> {
        self.logits(row).iter().map(|&z| z > 0.0).collect()
    }

    /// Exact-match accuracy for classes, mean per-bit accuracy for bits.
    pub fn accuracy(&self, x: &[Vec<f64>], targets: &ProbeTargets) -> Result<f64> {
        if x.len() != targets.len() || x.is_empty() {
            return Err(Error::Config("probe eval shape mismatch".into()));
        }
        match targets {
            ProbeTargets::Classes(v, _) => {
                let correct = x
                    .iter()
                    .zip(v)
                    .filter(|(row, &cls)| self.predict_class(row) == cls)
                    .count();
                Ok(correct as f64 / v.len() as f64)
            }
            ProbeTargets::Bits(v) => {
                let c = v[0].len();
                let mut correct = 0usize;
                for (row, bits) in x.iter().zip(v) {
                    let pred = self.predict_bits(row);
                    correct += pred.iter().zip(bits).filter(|(a, b)| a == b).count();
                }
                Ok(correct as f64 / (v.len() * c) as f64)
            }
        }
    }
}

/// One probe measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRow {
    pub task: ProbeTask,
    pub group: PoolGroup,
    pub state: usize,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    /// Images that had the group populated at this state.
    pub n_used: usize,
    pub degenerate: bool,
}

/// Fraction of examples used to fit each probe; the rest evaluates it.
pub const PROBE_TRAIN_FRACTION: f64 = 0.7;

/// Fit and evaluate probes for every (task, group, state) combination.
/// Traces and partitions are positional with `data`; `seed` fixes the
/// ordinary-control cells.
pub fn probe_curves(
    data: &[Example],
    traces: &[RunTrace],
    partitions: &[TokenPartition],
    tasks: &[ProbeTask],
    groups: &[PoolGroup],
    seed: u64,
    hyper: &ProbeHyper,
) -> Result<Vec<ProbeRow>> {
    if data.len() != traces.len() || data.len() != partitions.len() {
        return Err(Error::Config("probe inputs must be positional".into()));
    }
    if data.is_empty() {
        return Err(Error::Config("probe needs data".into()));
    }
    let states = traces[0].h.len();
    let mut rows = Vec::new();
    for &group in groups {
        for state in 0..states {
            // features first: shared across tasks
            let mut feats = Vec::new();
            let mut kept = Vec::new();
            for (i, (trace, part)) in traces.iter().zip(partitions).enumerate() {
                if let Some(f) = pool_group(trace, part, group, state, seed, i as u64)? {
                    feats.push(f);
                    kept.push(i);
                }
            }
            if feats.len() < 10 {
                continue;
            }
            let split = ((feats.len() as f64) * PROBE_TRAIN_FRACTION).round() as usize;
            if split == 0 || split == feats.len() {
                continue;
            }
            for &task in tasks {
                let sel: Vec<Example> = kept.iter().map(|&i| data[i].clone()).collect();
                let targets = ProbeTargets::from_examples(task, &sel);
                let probe = train_probe(&feats[..split], &targets.slice(0..split), hyper)?;
                let train_acc = probe.accuracy(&feats[..split], &targets.slice(0..split))?;
                let eval_acc = probe
                    .accuracy(&feats[split..], &targets.slice(split..feats.len()))?;
                rows.push(ProbeRow {
                    task,
                    group,
                    state,
                    train_accuracy: train_acc,
                    eval_accuracy: eval_acc,
                    n_used: feats.len(),
                    degenerate: probe.degenerate,
                });
            }
        }
    }
    Ok(rows)
}

/// Majority-class (or per-bit majority) rate of targets: the chance level a
/// permuted-label probe should match.
pub fn chance_level(targets: &ProbeTargets) -> f64 {
    match targets {
        ProbeTargets::Classes(v, c) => {
            let mut counts = vec![0usize; *c];
            for &cls in v {
                counts[cls] += 1;
            }
            *counts.iter().max().unwrap() as f64 / v.len() as f64
        }
        ProbeTargets::Bits(v) => {
            let c = v[0].len();
            let mut acc = 0.0;
            for j in 0..c {
                let ones = v.iter().filter(|b| b[j]).count();
                acc += (ones.max(v.len() - ones)) as f64 / v.len() as f64;
            }
            acc / c as f64
        }
    }
}

/// Binomial 1-sigma of an accuracy estimate at the given chance level.
pub fn accuracy_sigma(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Probe results as CSV (stable column order).
pub fn curves_to_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("task,group,state,train_accuracy,eval_accuracy,n_used,degenerate\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.task.as_str(),
            r.group.as_str(),
            r.state,
            r.train_accuracy,
            r.eval_accuracy,
            r.n_used,
            r.degenerate
        ));
    }
    out
}

/// Probe accuracies per state for one (task, group), keyed by state.
pub fn curve_of(rows: &[ProbeRow], task: ProbeTask, group: PoolGroup) -> BTreeMap<usize, f64> {
    rows.iter()
        .filter(|r| r.task == task && r.group == group)
        .map(|r| (r.state, r.eval_accuracy))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, KeyScalePlan, ModelConfig};
    use crate::intervene::baseline_partitions;
    use crate::scenes::{self, SceneConfig};

    fn blob_features(n_per: usize, d: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = Rng::from_seed(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for cls in 0..2usize {
            let center = if cls == 0 { -sep } else { sep };
            for _ in 0..n_per {
                x.push((0..d).map(|_| center + 0.3 * rng.normal()).collect());
                y.push(cls);
            }
        }
        (x, y)
    }

    #[test]
    fn separable_blobs_reach_perfect_accuracy() {
        let (x, y) = blob_features(40, 6, 2.0, 1);
        let targets = ProbeTargets::Classes(y, 2);
        let probe = train_probe(&x, &targets, &ProbeHyper::default()).unwrap();
        assert_eq!(probe.accuracy(&x, &targets).unwrap(), 1.0);
        assert!(!probe.degenerate);
    }

    #[test]
    fn permuted_labels_stay_within_three_sigma_of_chance() {
        let (x, y) = blob_features(100, 6, 2.0, 2);
        let targets = ProbeTargets::Classes(y, 2);
        let mut rng = Rng::from_seed(3);
        let permuted = targets.permuted(&mut rng);
        // train on one half of the permuted labels, evaluate on the other
        let probe = train_probe(&x[..100], &permuted.slice(0..100), &ProbeHyper::default()).unwrap();
        let acc = probe.accuracy(&x[100..], &permuted.slice(100..200)).unwrap();
        let chance = chance_level(&permuted.slice(100..200));
        let sigma = accuracy_sigma(chance, 100);
        assert!(
            (acc - chance).abs() <= 3.0 * sigma,
            "permuted probe at {acc} vs chance {chance} (sigma {sigma})"
        );
    }

    #[test]
    fn all_zero_bits_give_perfect_accuracy_and_degenerate_flag() {
        let (x, _) = blob_features(20, 4, 1.0, 4);
        let targets = ProbeTargets::Bits(vec![vec![false, false]; 40]);
        let probe = train_probe(&x, &targets, &ProbeHyper::default()).unwrap();
        assert!(probe.degenerate);
        assert_eq!(probe.accuracy(&x, &targets).unwrap(), 1.0);
    }

    #[test]
    fn constant_feature_dimensions_do_not_break_training() {
        let (mut x, y) = blob_features(20, 4, 2.0, 5);
        for row in &mut x {
            row.push(7.0); // constant column
        }
        let targets = ProbeTargets::Classes(y, 2);
        let probe = train_probe(&x, &targets, &ProbeHyper::default()).unwrap();
        assert!(probe.accuracy(&x, &targets).unwrap() > 0.9);
    }

    fn toy_traces() -> (Vec<Example>, Vec<RunTrace>, Vec<TokenPartition>) {
        let bb = build_backbone(&ModelConfig::toy_default(), &Rng::from_seed(100)).unwrap();
        let data = scenes::generate_dataset(400, &SceneConfig::default(), 60).unwrap();
        let partitions = baseline_partitions(&bb, &data).unwrap();
        let traces: Vec<RunTrace> = data
            .iter()
            .map(|ex| bb.forward(ex, &KeyScalePlan::none(), false).unwrap())
            .collect();
        (data, traces, partitions)
    }

    #[test]
    fn ordinary_control_is_fixed_per_image_and_never_a_sink() {
        let (_, _, partitions) = toy_traces();
        for (i, part) in partitions.iter().enumerate() {
            let a = ordinary5_cells(part, 9, i as u64);
            let b = ordinary5_cells(part, 9, i as u64);
            assert_eq!(a, b);
            assert!(a.len() <= ORDINARY_POOL);
            for c in &a {
                assert!(!part.vsink.contains(c));
                assert!(part.lsink_per_state.iter().all(|l| !l.contains(c)));
            }
            // a different image index draws an independent sample
            let other = ordinary5_cells(part, 9, (i + 1) as u64);
            assert_eq!(other.len(), a.len());
        }
    }

    #[test]
    fn planted_sink_features_expose_the_count() {
        let (data, traces, partitions) = toy_traces();
        let mut feats = Vec::new();
        for (i, (trace, part)) in traces.iter().zip(&partitions).enumerate() {
            feats.push(pool_group(trace, part, PoolGroup::VSink, 1, 9, i as u64).unwrap().unwrap());
        }
        let targets = ProbeTargets::from_examples(ProbeTask::Count, &data);
        let split = 42;
        let probe = train_probe(&feats[..split], &targets.slice(0..split), &ProbeHyper::default())
            .unwrap();
        let acc = probe.accuracy(&feats[split..], &targets.slice(split..feats.len())).unwrap();
        assert!(acc >= 0.9, "vsink count probe at {acc}");
    }

    #[test]
    fn probe_curve_rows_cover_requested_grid() {
        let (data, traces, partitions) = toy_traces();
        let hyper = ProbeHyper { steps: 60, ..Default::default() };
        let rows = probe_curves(
            &data,
            &traces,
            &partitions,
            &[ProbeTask::Count],
            &[PoolGroup::VSink, PoolGroup::Ordinary5],
            9,
            &hyper,
        )
        .unwrap();
        let states = traces[0].h.len();
        assert_eq!(rows.len(), 2 * states);
        let csv = curves_to_csv(&rows);
        assert!(csv.lines().count() == rows.len() + 1);
        let curve = curve_of(&rows, ProbeTask::Count, PoolGroup::VSink);
        assert_eq!(curve.len(), states);
    }
}
