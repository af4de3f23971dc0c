//! Oracle key-gating interventions: per-layer coefficient sweeps over the
//! 11-point grid, stage-2 three-group sweeps with the encoder-sink
//! coefficient pinned, block-of-four reporting, and broad-optimum gap
//! statistics.
//!
//! Sweep pairs sum to 1 while the baseline is unit scaling; the baseline is
//! deliberately NOT a grid point and is always evaluated separately, so
//! reported deltas are against the un-intervened model. Sink groups are
//! identified on the un-intervened forward pass of each example and reused
//! for every grid cell.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{evaluate, Backbone, KeyScalePlan};
use crate::error::{Error, Result};
use crate::scenes::{Example, TaskTag};
use crate::sinkid::{partition_tokens, Group, TokenPartition};

/// Per-group key coefficients; two-group mode sets lsink == ordinary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateCoefficients {
    pub vsink: f64,
    pub lsink: f64,
    pub ordinary: f64,
}

impl GateCoefficients {
    pub fn two_group(vsink: f64, rest: f64) -> Self {
        GateCoefficients { vsink, lsink: rest, ordinary: rest }
    }

    pub fn three_group(vsink: f64, lsink: f64, ordinary: f64) -> Self {
        GateCoefficients { vsink, lsink, ordinary }
    }

    pub fn get(&self, group: Group) -> f64 {
        match group {
            Group::VSink => self.vsink,
            Group::LSink => self.lsink,
            Group::Ordinary => self.ordinary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in [self.vsink, self.lsink, self.ordinary] {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::Config("coefficients must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

/// The 11 sweep pairs `(k/10, 1-k/10)` for k = 0..=10. The unit baseline
/// (1, 1) is intentionally absent.
pub fn coefficient_grid() -> Vec<(f64, f64)> {
    (0..=10)
        .map(|k| (k as f64 / 10.0, 1.0 - k as f64 / 10.0))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    TwoGroup,
    ThreeGroup,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub layer: usize,
    pub coeffs: GateCoefficients,
    /// Exact-match accuracy per task tag.
    pub accuracy: BTreeMap<TaskTag, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepMeta {
    pub seed: u64,
    pub dataset_id: String,
    pub n_examples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub schema_version: u32,
    pub mode: SweepMode,
    /// Un-intervened accuracy per task, evaluated separately from the grid.
    pub baseline: BTreeMap<TaskTag, f64>,
    pub cells: Vec<SweepCell>,
    pub meta: SweepMeta,
}

impl SweepResult {
    pub fn tasks(&self) -> Vec<TaskTag> {
        self.baseline.keys().copied().collect()
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut ls: Vec<usize> = self.cells.iter().map(|c| c.layer).collect();
        ls.sort_unstable();
        ls.dedup();
        ls
    }
}

/// Translate per-group coefficients into a concrete key-scale plan for one
/// layer, using group membership at that layer's input state. Every visual
/// token gets its group's coefficient; non-visual tokens stay at 1.
pub fn apply_coefficients(
    partition: &TokenPartition,
    coeffs: &GateCoefficients,
    layer: usize,
    vis_start: usize,
) -> Result<KeyScalePlan> {
    coeffs.validate()?;
    if layer >= partition.states() {
        return Err(Error::Config(format!("layer {layer} beyond partition states")));
    }
    let mut plan = KeyScalePlan::none();
    for cell in 0..partition.n {
        let g = partition.group_of(layer, cell);
        plan.set(layer, vis_start + cell, coeffs.get(g));
    }
    Ok(plan)
}

/// Per-example partitions from un-intervened forward passes; the sweep
/// reuses them for every grid cell.
pub fn baseline_partitions(bb: &Backbone, data: &[Example]) -> Result<Vec<TokenPartition>> {
    data.iter()
        .map(|ex| {
            let trace = bb.forward(ex, &KeyScalePlan::none(), false)?;
            partition_tokens(&trace, &bb.config)
        })
        .collect()
}

fn accuracy_under(
    bb: &Backbone,
    data: &[Example],
    partitions: &[TokenPartition],
    coeffs: &GateCoefficients,
    layer: usize,
) -> Result<BTreeMap<TaskTag, f64>> {
    let mut counts: BTreeMap<TaskTag, (usize, usize)> = BTreeMap::new();
    let vis_start = bb.config.spans(0).vis.start;
    for (ex, part) in data.iter().zip(partitions) {
        let plan = apply_coefficients(part, coeffs, layer, vis_start)?;
        let e = counts.entry(ex.task_tag).or_insert((0, 0));
        e.1 += 1;
        if bb.answers_correctly(ex, &plan)? {
            e.0 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(t, (c, n))| (t, c as f64 / n as f64))
        .collect())
}

/// Accuracy of one explicit (layer, coefficients) configuration; the same
/// entry point the sweeps use, exposed for spot re-evaluation.
pub fn evaluate_cell(
    bb: &Backbone,
    data: &[Example],
    partitions: &[TokenPartition],
    layer: usize,
    coeffs: &GateCoefficients,
) -> Result<SweepCell> {
    Ok(SweepCell {
        layer,
        coeffs: *coeffs,
        accuracy: accuracy_under(bb, data, partitions, coeffs, layer)?,
    })
}

fn baseline_accuracy(bb: &Backbone, data: &[Example]) -> Result<BTreeMap<TaskTag, f64>> {
    Ok(evaluate(bb, data, &KeyScalePlan::none())?
        .into_iter()
        .map(|(t, (c, n))| (t, c as f64 / n as f64))
        .collect())
}

/// Two-group sweep of one layer over the 11-point grid.
pub fn sweep_layer(
    bb: &Backbone,
    data: &[Example],
    layer: usize,
    meta: SweepMeta,
) -> Result<SweepResult> {
    sweep_layers(bb, data, &[layer], meta)
}

/// Two-group sweep over several layers, sharing baseline partitions.
pub fn sweep_layers(
    bb: &Backbone,
    data: &[Example],
    layers: &[usize],
    meta: SweepMeta,
) -> Result<SweepResult> {
    if data.is_empty() {
        return Err(Error::Config("sweep needs a non-empty dataset".into()));
    }
    let partitions = baseline_partitions(bb, data)?;
    let mut cells = Vec::new();
    for &layer in layers {
        for (v, rest) in coefficient_grid() {
            let coeffs = GateCoefficients::two_group(v, rest);
            cells.push(evaluate_cell(bb, data, &partitions, layer, &coeffs)?);
        }
    }
    Ok(SweepResult {
        schema_version: 1,
        mode: SweepMode::TwoGroup,
        baseline: baseline_accuracy(bb, data)?,
        cells,
        meta,
    })
}

/// Stage-2 sweep: encoder-sink coefficient pinned at its stage-1 optimum,
/// the 11-point grid swept over (lsink, ordinary).
pub fn sweep_stage2(
    bb: &Backbone,
    data: &[Example],
    layer: usize,
    fixed_vsink: f64,
    meta: SweepMeta,
) -> Result<SweepResult> {
    if data.is_empty() {
        return Err(Error::Config("sweep needs a non-empty dataset".into()));
    }
    let partitions = baseline_partitions(bb, data)?;
    let mut cells = Vec::new();
    for (l, o) in coefficient_grid() {
        let coeffs = GateCoefficients::three_group(fixed_vsink, l, o);
        cells.push(evaluate_cell(bb, data, &partitions, layer, &coeffs)?);
    }
    Ok(SweepResult {
        schema_version: 1,
        mode: SweepMode::ThreeGroup,
        baseline: baseline_accuracy(bb, data)?,
        cells,
        meta,
    })
}

/// Additional gain of stage 2 over stage 1 per task:
/// best(stage2) - best(stage1).
pub fn additional_gain(stage1: &SweepResult, stage2: &SweepResult) -> BTreeMap<TaskTag, f64> {
    let best = |r: &SweepResult, task: TaskTag| -> f64 {
        r.cells
            .iter()
            .filter_map(|c| c.accuracy.get(&task).copied())
            .fold(f64::NEG_INFINITY, f64::max)
    };
    stage1
        .tasks()
        .into_iter()
        .map(|t| (t, best(stage2, t) - best(stage1, t)))
        .collect()
}

/// Best configuration of one layer block for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockBest {
    pub task: TaskTag,
    pub block: usize,
    pub layer: usize,
    pub coeffs: GateCoefficients,
    pub accuracy: f64,
    pub delta_vs_baseline: f64,
}

/// Group layers into blocks of `block` and report the best-performing
/// (layer, pair) per block and task. Ties break to the lowest layer, then
/// the lowest vsink coefficient.
pub fn report_blocks(results: &SweepResult, block: usize) -> Result<Vec<BlockBest>> {
    if block == 0 {
        return Err(Error::Config("block size must be positive".into()));
    }
    let layers = results.layers();
    if layers.is_empty() {
        return Err(Error::Config("sweep result has no cells".into()));
    }
    let max_layer = *layers.last().unwrap();
    let n_blocks = max_layer / block + 1;
    let mut out = Vec::new();
    for task in results.tasks() {
        for b in 0..n_blocks {
            let lo = b * block;
            let hi = lo + block;
            let mut best: Option<&SweepCell> = None;
            for cell in &results.cells {
                if cell.layer < lo || cell.layer >= hi {
                    continue;
                }
                let acc = match cell.accuracy.get(&task) {
                    Some(&a) => a,
                    None => continue,
                };
                let better = match best {
                    None => true,
                    Some(cur) => {
                        let cur_acc = cur.accuracy[&task];
                        acc > cur_acc
                            || (acc == cur_acc
                                && (cell.layer < cur.layer
                                    || (cell.layer == cur.layer
                                        && cell.coeffs.vsink < cur.coeffs.vsink)))
                    }
                };
                if better {
                    best = Some(cell);
                }
            }
            if let Some(cell) = best {
                let acc = cell.accuracy[&task];
                out.push(BlockBest {
                    task,
                    block: b,
                    layer: cell.layer,
                    coeffs: cell.coeffs,
                    accuracy: acc,
                    delta_vs_baseline: acc - results.baseline.get(&task).copied().unwrap_or(0.0),
                });
            }
        }
    }
    Ok(out)
}

/// Top-1 to top-2 accuracy gap per (layer, task), with aggregate fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub gaps: Vec<(usize, TaskTag, f64)>,
    pub frac_below_half_pp: f64,
    pub frac_below_fifth_pp: f64,
    /// 1-percentage-point bins 0..10pp, last bin catches the remainder.
    pub histogram: Vec<usize>,
}

pub fn broad_optimum_stats(results: &SweepResult) -> Result<GapStats> {
    let mut gaps = Vec::new();
    for layer in results.layers() {
        for task in results.tasks() {
            let mut accs: Vec<f64> = results
                .cells
                .iter()
                .filter(|c| c.layer == layer)
                .filter_map(|c| c.accuracy.get(&task).copied())
                .collect();
            if accs.len() < 2 {
                return Err(Error::Config(format!(
                    "layer {layer}/{}: need at least 2 grid entries",
                    task.as_str()
                )));
            }
            accs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            gaps.push((layer, task, accs[0] - accs[1]));
        }
    }
    let total = gaps.len() as f64;
    let below = |t: f64| gaps.iter().filter(|(_, _, g)| *g < t).count() as f64 / total;
    let mut histogram = vec![0usize; 11];
    for (_, _, g) in &gaps {
        let bin = ((g * 100.0).floor() as usize).min(10);
        histogram[bin] += 1;
    }
    let frac_below_half_pp = below(0.005);
    let frac_below_fifth_pp = below(0.002);
    Ok(GapStats { gaps, frac_below_half_pp, frac_below_fifth_pp, histogram })
}
