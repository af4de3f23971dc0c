//! Sink identification and token grouping.
//!
//! A token is a sink when the absolute activation on any designated sink
//! dimension reaches the threshold. Visual tokens are partitioned into three
//! groups: encoder-emerged sinks (fixed set, identified once at the encoder
//! output), decoder-emerged sinks (identified layer-wise in the decoder's
//! residual stream), and ordinary tokens (the exact complement). Salience
//! statistics (per-group norms and attention mass from the final prompt
//! token) follow the same grouping.
//!
//! Raw absolute activation magnitudes are used throughout — no normalization
//! by layer statistics. Statistics over empty groups are flagged missing,
//! never imputed as zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, RunTrace};
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    VSink,
    LSink,
    Ordinary,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::VSink, Group::LSink, Group::Ordinary];

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::VSink => "vsink",
            Group::LSink => "lsink",
            Group::Ordinary => "ordinary",
        }
    }
}

/// Three-way grouping of the visual tokens. Indices are cell indices
/// relative to the visual block (0..n); the encoder-sink set is fixed across
/// all layers, the decoder-sink set is per residual-stream state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPartition {
    pub n: usize,
    /// Fixed encoder-emerged sink cells.
    pub vsink: Vec<usize>,
    /// Entry `s` holds decoder-emerged sinks identified in the residual
    /// stream after `s` layers (entry 0 = embedding state). The per-layer
    /// view "sinks at layer l" reads entry `l + 1`.
    pub lsink_per_state: Vec<Vec<usize>>,
    /// Exact complement per state.
    pub ordinary_per_state: Vec<Vec<usize>>,
}

impl TokenPartition {
    pub fn states(&self) -> usize {
        self.lsink_per_state.len()
    }

    /// Group membership of cell `j` at a given state.
    pub fn group_of(&self, state: usize, j: usize) -> Group {
        if self.vsink.contains(&j) {
            Group::VSink
        } else if self.lsink_per_state[state].contains(&j) {
            Group::LSink
        } else {
            Group::Ordinary
        }
    }

    pub fn members(&self, state: usize, group: Group) -> &[usize] {
        match group {
            Group::VSink => &self.vsink,
            Group::LSink => &self.lsink_per_state[state],
            Group::Ordinary => &self.ordinary_per_state[state],
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        for s in 0..self.states() {
            let mut seen = vec![0usize; self.n];
            for &j in &self.vsink {
                seen[j] += 1;
            }
            for &j in &self.lsink_per_state[s] {
                seen[j] += 1;
            }
            for &j in &self.ordinary_per_state[s] {
                seen[j] += 1;
            }
            if seen.iter().any(|&c| c != 1) {
                return Err(Error::Invariant(format!(
                    "state {s}: groups are not a partition of the visual tokens"
                )));
            }
        }
        Ok(())
    }
}

/// Sink indices of a hidden-state matrix: rows whose absolute activation on
/// any of `sink_dims` reaches `tau`. Returned sorted ascending.
pub fn identify_sinks(hidden: &Tensor, sink_dims: &[usize], tau: f64) -> Result<Vec<usize>> {
    if sink_dims.is_empty() {
        return Err(Error::Config("sink_dims must be non-empty".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Config("tau must be positive".into()));
    }
    let width = hidden.cols();
    if let Some(&bad) = sink_dims.iter().find(|&&d| d >= width) {
        return Err(Error::Config(format!("sink dim {bad} out of width {width}")));
    }
    let mut out = Vec::new();
    for j in 0..hidden.rows() {
        let max = sink_dims
            .iter()
            .map(|&d| hidden.get2(j, d).abs())
            .fold(0.0_f64, f64::max);
        if max >= tau {
            out.push(j);
        }
    }
    Ok(out)
}

/// Build the three-way partition from a trace: encoder sinks from the
/// encoder output, decoder sinks per residual-stream state restricted to the
/// visual block (minus the fixed encoder-sink set), ordinary as complement.
pub fn partition_tokens(trace: &RunTrace, config: &ModelConfig) -> Result<TokenPartition> {
    let n = config.n;
    let vis0 = trace.spans.vis.start;
    let vsink = identify_sinks(&trace.encoder_out, &[config.sink_dim_vit], config.tau_vit)?;

    let mut lsink_per_state = Vec::with_capacity(trace.h.len());
    let mut ordinary_per_state = Vec::with_capacity(trace.h.len());
    for state in &trace.h {
        let all = identify_sinks(state, &config.sink_dims_llm, config.tau_llm)?;
        let lsink: Vec<usize> = all
            .into_iter()
            .filter(|&tok| tok >= vis0 && tok < vis0 + n)
            .map(|tok| tok - vis0)
            .filter(|cell| !vsink.contains(cell))
            .collect();
        let ordinary: Vec<usize> = (0..n)
            .filter(|cell| !vsink.contains(cell) && !lsink.contains(cell))
            .collect();
        lsink_per_state.push(lsink);
        ordinary_per_state.push(ordinary);
    }
    let p = TokenPartition { n, vsink, lsink_per_state, ordinary_per_state };
    p.check_invariants()?;
    Ok(p)
}

/// Layer-wise per-group statistics, averaged head-wise then sample-wise.
/// Missing entries mean the group was empty in every sample at that point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SalienceProfile {
    /// Per residual-stream state: mean l2 norm of each group's hidden rows.
    pub norms: Vec<BTreeMap<Group, Option<f64>>>,
    /// Per decoder layer: mean per-token attention weight from the final
    /// prompt position to each group (averaged over heads, then samples).
    pub attn_from_last: Vec<BTreeMap<Group, Option<f64>>>,
    /// Per state: mean group sizes (they sum to n for every sample).
    pub group_counts: Vec<BTreeMap<Group, f64>>,
}

pub fn salience_profile(
    traces: &[RunTrace],
    partitions: &[TokenPartition],
) -> Result<SalienceProfile> {
    if traces.is_empty() || traces.len() != partitions.len() {
        return Err(Error::Config("need one partition per trace, at least one".into()));
    }
    if traces[0].layers.is_empty() {
        return Err(Error::Config("salience profile requires captured attention".into()));
    }
    let states = traces[0].h.len();
    let layers = traces[0].layers.len();

    let mut norms = vec![BTreeMap::new(); states];
    let mut counts = vec![BTreeMap::new(); states];
    for s in 0..states {
        for group in Group::ALL {
            // per-sample group means, skipping samples with an empty group
            let mut acc = Vec::new();
            let mut count_acc = 0.0;
            for (trace, part) in traces.iter().zip(partitions) {
                let members = part.members(s, group);
                count_acc += members.len() as f64;
                if members.is_empty() {
                    continue;
                }
                let vis0 = trace.spans.vis.start;
                let mean = members
                    .iter()
                    .map(|&j| trace.h[s].row_l2_norm(vis0 + j))
                    .sum::<f64>()
                    / members.len() as f64;
                acc.push(mean);
            }
            let mean = if acc.is_empty() {
                None
            } else {
                Some(acc.iter().sum::<f64>() / acc.len() as f64)
            };
            norms[s].insert(group, mean);
            counts[s].insert(group, count_acc / traces.len() as f64);
        }
    }

    let mut attn = vec![BTreeMap::new(); layers];
    for l in 0..layers {
        for group in Group::ALL {
            let mut acc = Vec::new();
            for (trace, part) in traces.iter().zip(partitions) {
                // membership at the layer's input state
                let members = part.members(l, group);
                if members.is_empty() {
                    continue;
                }
                let vis0 = trace.spans.vis.start;
                let last = trace.spans.t() - 1;
                let heads = &trace.layers[l].attn;
                let mut sum = 0.0;
                for a in heads {
                    for &j in members {
                        sum += a.get2(last, vis0 + j);
                    }
                }
                acc.push(sum / (heads.len() * members.len()) as f64);
            }
            let mean = if acc.is_empty() {
                None
            } else {
                Some(acc.iter().sum::<f64>() / acc.len() as f64)
            };
            attn[l].insert(group, mean);
        }
    }

    Ok(SalienceProfile { norms, attn_from_last: attn, group_counts: counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, KeyScalePlan, Spans};
    use crate::numerics::rng::Rng;
    use crate::scenes::{self, SceneConfig};
    use proptest::prelude::*;

    #[test]
    fn threshold_boundary_is_inclusive() {
        let mut h = Tensor::zeros(vec![2, 4]);
        h.set2(0, 2, 25.0);
        h.set2(1, 2, 19.9);
        assert_eq!(identify_sinks(&h, &[2], 20.0).unwrap(), vec![0]);
    }

    #[test]
    fn all_zero_states_give_empty_set() {
        let h = Tensor::zeros(vec![8, 16]);
        assert!(identify_sinks(&h, &[3, 5], 1.0).unwrap().is_empty());
    }

    #[test]
    fn negative_magnitudes_count_via_absolute_value() {
        let mut h = Tensor::zeros(vec![1, 4]);
        h.set2(0, 1, -30.0);
        assert_eq!(identify_sinks(&h, &[1], 20.0).unwrap(), vec![0]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let h = Tensor::zeros(vec![2, 4]);
        assert!(identify_sinks(&h, &[], 1.0).is_err());
        assert!(identify_sinks(&h, &[1], 0.0).is_err());
        assert!(identify_sinks(&h, &[9], 1.0).is_err());
    }

    #[test]
    fn matches_brute_force_oracle_on_random_matrices() {
        for i in 0..50 {
            let mut rng = Rng::from_parts(31, "sinkid_oracle", i);
            let d = 16;
            let rows = 100;
            let data: Vec<f64> = (0..rows * d).map(|_| 25.0 * rng.normal()).collect();
            let h = Tensor::new(vec![rows, d], data).unwrap();
            let dims = [2usize, 7, 11];
            let tau = 20.0;
            let got = identify_sinks(&h, &dims, tau).unwrap();
            // naive double loop
            let mut expect = Vec::new();
            for j in 0..rows {
                let mut hit = false;
                for &dim in &dims {
                    if h.get2(j, dim).abs() >= tau {
                        hit = true;
                    }
                }
                if hit {
                    expect.push(j);
                }
            }
            assert_eq!(got, expect);
        }
    }

    proptest! {
        /// Raising tau can only shrink the sink set.
        #[test]
        fn monotone_in_tau(vals in proptest::collection::vec(-50.0f64..50.0, 40), bump in 0.1f64..30.0) {
            let h = Tensor::new(vec![10, 4], vals).unwrap();
            let lo = identify_sinks(&h, &[1, 3], 5.0).unwrap();
            let hi = identify_sinks(&h, &[1, 3], 5.0 + bump).unwrap();
            prop_assert!(hi.iter().all(|j| lo.contains(j)));
        }
    }

    fn toy_setup() -> (crate::backbone::Backbone, Vec<crate::scenes::Example>) {
        let bb = build_backbone(&ModelConfig::toy_default(), &Rng::from_seed(100)).unwrap();
        let data = scenes::generate_dataset(201, &SceneConfig::default(), 12).unwrap();
        (bb, data)
    }

    #[test]
    fn planted_partition_matches_construction() {
        let (bb, data) = toy_setup();
        let l0 = bb.config.plant.emergence_layer;
        for ex in &data {
            let trace = bb.forward(ex, &KeyScalePlan::none(), false).unwrap();
            let part = partition_tokens(&trace, &bb.config).unwrap();
            let (vcells, lcells) = ex.scene.sink_cells();
            assert_eq!(part.vsink, vcells);
            // decoder sinks appear exactly after the emergence layer
            for s in 0..=l0 {
                assert!(part.lsink_per_state[s].is_empty(), "state {s} should have no decoder sinks");
            }
            for s in l0 + 1..part.states() {
                for cell in &lcells {
                    assert!(part.lsink_per_state[s].contains(cell), "planted sink missing at state {s}");
                }
            }
            part.check_invariants().unwrap();
        }
    }

    #[test]
    fn partition_membership_matches_rescan_oracle() {
        let (bb, data) = toy_setup();
        let ex = &data[0];
        let trace = bb.forward(ex, &KeyScalePlan::none(), false).unwrap();
        let part = partition_tokens(&trace, &bb.config).unwrap();
        let c = &bb.config;
        let vis0 = trace.spans.vis.start;
        for (s, state) in trace.h.iter().enumerate() {
            for cell in 0..c.n {
                let is_v = trace.encoder_out.get2(cell, c.sink_dim_vit).abs() >= c.tau_vit;
                let is_l = !is_v
                    && c.sink_dims_llm
                        .iter()
                        .any(|&d| state.get2(vis0 + cell, d).abs() >= c.tau_llm);
                let expect = if is_v {
                    Group::VSink
                } else if is_l {
                    Group::LSink
                } else {
                    Group::Ordinary
                };
                assert_eq!(part.group_of(s, cell), expect);
            }
        }
    }

    #[test]
    fn planted_vsink_norms_exceed_ordinary_at_entry() {
        let (bb, data) = toy_setup();
        let traces: Vec<RunTrace> = data
            .iter()
            .map(|ex| bb.forward(ex, &KeyScalePlan::none(), true).unwrap())
            .collect();
        let parts: Vec<TokenPartition> = traces
            .iter()
            .map(|t| partition_tokens(t, &bb.config).unwrap())
            .collect();
        let prof = salience_profile(&traces, &parts).unwrap();
        let v = prof.norms[0][&Group::VSink].unwrap();
        let o = prof.norms[0][&Group::Ordinary].unwrap();
        assert!(v > o, "sink norm {v} should exceed ordinary norm {o} at entry");
        // group counts sum to n on average
        let total: f64 = prof.group_counts[0].values().sum();
        assert!((total - bb.config.n as f64).abs() < 1e-9);
    }

    /// Hand-sized fixture: T=4 (1 system, 2 visual, 1 text), single layer,
    /// single head, hand-computed means.
    #[test]
    fn salience_matches_hand_computation() {
        let spans = Spans { sys: 0..1, vis: 1..3, txt: 3..4 };
        let h0 = Tensor::from_rows(vec![
            vec![1.0, 0.0],
            vec![3.0, 4.0], // visual cell 0, norm 5
            vec![0.0, 2.0], // visual cell 1, norm 2
            vec![1.0, 1.0],
        ]);
        let attn = Tensor::from_rows(vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.2, 0.3, 0.5, 0.0],
            vec![0.1, 0.6, 0.2, 0.1], // final prompt row
        ]);
        let trace = RunTrace {
            encoder_out: Tensor::zeros(vec![2, 2]),
            h: vec![h0.clone(), h0.clone()],
            layers: vec![crate::backbone::LayerTrace {
                attn: vec![attn],
                attn_logits: vec![Tensor::zeros(vec![4, 4])],
                q: Tensor::zeros(vec![4, 2]),
                k_scaled: Tensor::zeros(vec![4, 2]),
                attn_out: Tensor::zeros(vec![4, 2]),
                ffn_out: Tensor::zeros(vec![4, 2]),
            }],
            logits: Tensor::zeros(vec![4, 4]),
            spans,
            coeffs: vec![Tensor::new(vec![4], vec![1.0; 4]).unwrap()],
        };
        let part = TokenPartition {
            n: 2,
            vsink: vec![0],
            lsink_per_state: vec![vec![], vec![]],
            ordinary_per_state: vec![vec![1], vec![1]],
        };
        let prof = salience_profile(&[trace], &[part]).unwrap();
        // norms: vsink = |(3,4)| = 5; ordinary = |(0,2)| = 2; lsink missing
        assert_eq!(prof.norms[0][&Group::VSink], Some(5.0));
        assert_eq!(prof.norms[0][&Group::Ordinary], Some(2.0));
        assert_eq!(prof.norms[0][&Group::LSink], None);
        // attention from the final row: vsink token (col 1) gets 0.6,
        // ordinary token (col 2) gets 0.2
        assert_eq!(prof.attn_from_last[0][&Group::VSink], Some(0.6));
        assert_eq!(prof.attn_from_last[0][&Group::Ordinary], Some(0.2));
        assert_eq!(prof.attn_from_last[0][&Group::LSink], None);
    }

    #[test]
    fn uniform_attention_rows_give_one_over_t() {
        let spans = Spans { sys: 0..1, vis: 1..3, txt: 3..4 };
        let t = 4;
        let uniform = Tensor::new(vec![t, t], vec![1.0 / t as f64; t * t]).unwrap();
        let trace = RunTrace {
            encoder_out: Tensor::zeros(vec![2, 2]),
            h: vec![Tensor::zeros(vec![t, 2]); 2],
            layers: vec![crate::backbone::LayerTrace {
                attn: vec![uniform],
                attn_logits: vec![Tensor::zeros(vec![t, t])],
                q: Tensor::zeros(vec![t, 2]),
                k_scaled: Tensor::zeros(vec![t, 2]),
                attn_out: Tensor::zeros(vec![t, 2]),
                ffn_out: Tensor::zeros(vec![t, 2]),
            }],
            logits: Tensor::zeros(vec![t, 4]),
            spans,
            coeffs: vec![Tensor::new(vec![t], vec![1.0; t]).unwrap()],
        };
        let part = TokenPartition {
            n: 2,
            vsink: vec![0],
            lsink_per_state: vec![vec![1], vec![1]],
            ordinary_per_state: vec![vec![], vec![]],
        };
        let prof = salience_profile(&[trace], &[part]).unwrap();
        for group in [Group::VSink, Group::LSink] {
            assert!((prof.attn_from_last[0][&group].unwrap() - 0.25).abs() < 1e-12);
        }
    }
}
