//! The toy vision-language backbone: a synthetic vision encoder, a
//! two-layer non-residual projector, and a decoder-only pre-norm transformer
//! with causal multi-head attention — with sink behavior *planted* by
//! construction, per-layer key-scaling hooks, and full trace capture.
//!
//! Planted structure (all planted weights are frozen):
//! - the vision encoder writes `magnitude_vit` on `sink_dim_vit` for the
//!   scene's encoder-sink cells (flag channel -> spike), so those tokens are
//!   sinks right at the encoder output;
//! - the projector spreads that spike into a uniformly elevated token norm
//!   (verified post-build: >= 2x the median ordinary norm), carries the
//!   decoder-sink flag into a hidden carry dimension, and copies the global
//!   count summary into dedicated hidden dimensions;
//! - the FFN of the emergence layer contains an additive pathway that reads
//!   the carry dimension of the raw residual stream and writes
//!   `magnitude_llm` onto the decoder sink dimensions; residual connections
//!   maintain it through all later layers.
//!
//! A documentation-only preset mirroring activation statistics reported for
//! open 7B-scale vision-language models is in [`REAL_MODEL_PRESET`]; it is
//! not runnable at desk scale.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::adam::{Adam, AdamConfig};
use crate::numerics::rng::Rng;
use crate::numerics::sgt1::{self, Precision};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::scenes::{self, Example, Scene, TaskTag};

/// Magnitude of the frozen cell-address codes shared between visual
/// positions and the question tokens that name grid cells.
pub const ADDR_SCALE: f64 = 4.0;

/// First hidden dim of the projector's exact attribute passthrough.
pub const ATTR_PASS_DIM0: usize = 24;
/// Scale of the attribute passthrough in hidden space.
pub const ATTR_PASS_SCALE: f64 = 3.0;

/// Initialization scale of the read layer's retrieval head: head 0's query
/// and key maps start as an identity over the cell-address dims.
pub const QK_PLANT_SCALE: f64 = 2.5;

/// First hidden dim of the retrieved-answer subspace the read layer's
/// output projection writes into.
pub const ANSWER_DIM0: usize = 54;

/// Initialization scale of the retrieval head's value and output blocks.
pub const VO_PLANT_SCALE: f64 = 2.0;

/// Initialization scale of the unembedding block mapping the answer
/// subspace onto the color tokens.
pub const UNEMB_PLANT_SCALE: f64 = 1.5;

/// Query bias driving the read layer's second head onto the encoder-sink
/// carriers regardless of prompt content.
pub const SINK_BQ_SCALE: f64 = 2.0;

/// Key scale of the second head's match against the sink spread direction.
pub const K_SPREAD_SCALE: f64 = 0.15;

/// Number of read-layer heads that may attend to visual tokens (the planted
/// pointer head and the planted sink-reader head). The remaining heads are
/// text-only even at the read layer, so cross-modal information flows
/// exclusively through the planted value chains.
pub const N_READ_HEADS: usize = 2;

/// Frozen bias toward the first count class on the summary dims. The count
/// copy arriving from the sink carriers must exceed this floor to win the
/// readout, so attenuating carrier attention below the augmentation range
/// actually flips answers instead of merely shrinking a scale-invariant
/// one-hot.
pub const COUNT_PRIOR_SCALE: f64 = 2.0;

/// Hidden dims carrying the sink spread signature: away from the address
/// codes (0..16), the color channels the retrieval value chain reads
/// (24..32), the sink/carry/summary/answer dims (40+).
pub const SPREAD_DIMS: [usize; 16] = [16, 17, 18, 19, 20, 21, 22, 23, 32, 33, 34, 35, 36, 37, 38, 39];

/// Reference values observed in open 7B-scale vision-language models, kept
/// as documentation only: hidden width 4096 with sink dimensions
/// {650, 1415, 2533}, encoder threshold 60, decoder threshold 20. The toy
/// model uses planted magnitudes with thresholds at half the plant instead.
pub const REAL_MODEL_PRESET: &str =
    r#"{"d":4096,"sink_dims_llm":[650,1415,2533],"tau_vit":60.0,"tau_llm":20.0}"#;

/// Planted-sink construction parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    /// Activation written by the encoder on `sink_dim_vit` for sink cells.
    pub magnitude_vit: f64,
    /// Activation written by the emergence-layer FFN on `sink_dims_llm`.
    pub magnitude_llm: f64,
    /// Decoder layer whose FFN creates decoder-emerged sinks.
    pub emergence_layer: usize,
    /// Hidden dimension carrying the decoder-sink trigger flag.
    pub carry_dim: usize,
    /// Value the projector writes on `carry_dim` for flagged tokens.
    pub carry_strength: f64,
    /// First of `NUM_COUNT_CLASSES` hidden dims holding the count summary.
    pub summary_dim0: usize,
    /// Scale of the planted count one-hot in hidden space.
    pub summary_scale: f64,
    /// Target l2 norm of the projector's spread of the encoder spike.
    pub spread_norm: f64,
    /// Build retries before reporting a planting failure.
    pub max_build_retries: usize,
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec {
            magnitude_vit: 60.0,
            magnitude_llm: 40.0,
            emergence_layer: 2,
            carry_dim: 42,
            carry_strength: 20.0,
            summary_dim0: 44,
            summary_scale: 4.0,
            spread_norm: 16.0,
            max_build_retries: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Decoder hidden width.
    pub d: usize,
    /// Vision feature width (encoder operates in this space).
    pub d_v: usize,
    /// Decoder layer count.
    pub l: usize,
    /// Attention head count.
    pub h: usize,
    pub vocab: usize,
    /// Visual token count (grid cells).
    pub n: usize,
    /// Decoder-side sink indicator dimensions.
    pub sink_dims_llm: Vec<usize>,
    /// Encoder-side sink indicator dimension (< d_v).
    pub sink_dim_vit: usize,
    pub tau_vit: f64,
    pub tau_llm: f64,
    /// The only decoder layer whose attention can read visual keys: a fixed
    /// architectural mask zeroes visual-token keys at every other layer, so
    /// all cross-modal readout is concentrated where interventions and
    /// gates act.
    pub read_layer: usize,
    pub plant: PlantSpec,
}

impl ModelConfig {
    /// Desk-scale default: the smallest model with an early/mid/late layer
    /// split and planted sinks emerging at layer 2.
    pub fn toy_default() -> Self {
        ModelConfig {
            d: 64,
            d_v: scenes::D_V,
            l: 8,
            h: 4,
            vocab: scenes::VOCAB,
            n: 16,
            sink_dims_llm: vec![40, 41],
            sink_dim_vit: 31,
            tau_vit: 30.0,
            tau_llm: 20.0,
            read_layer: 3,
            plant: PlantSpec::default(),
        }
    }

    /// Minimal config for gradient checks (d=16, l=3, 5 visual tokens gives
    /// T=12 with the fixed 2-token prefix and 5-token prompt suffix).
    pub fn tiny_gradcheck() -> Self {
        ModelConfig {
            d: 16,
            d_v: 8,
            l: 3,
            h: 2,
            vocab: 16,
            n: 5,
            sink_dims_llm: vec![10, 11],
            sink_dim_vit: 7,
            tau_vit: 30.0,
            tau_llm: 20.0,
            read_layer: 2,
            plant: PlantSpec {
                emergence_layer: 1,
                carry_dim: 12,
                summary_dim0: 13,
                ..PlantSpec::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 || self.l == 0 || self.vocab == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        if self.d % self.h != 0 {
            return Err(Error::Config(format!(
                "hidden width {} not divisible by {} heads",
                self.d, self.h
            )));
        }
        if self.sink_dims_llm.is_empty() {
            return Err(Error::Config("sink_dims_llm must be non-empty".into()));
        }
        if self.sink_dims_llm.iter().any(|&d| d >= self.d) {
            return Err(Error::Config("sink_dims_llm out of hidden width".into()));
        }
        if self.sink_dim_vit >= self.d_v {
            return Err(Error::Config("sink_dim_vit out of vision width".into()));
        }
        if self.tau_vit <= 0.0 || self.tau_llm <= 0.0 {
            return Err(Error::Config("thresholds must be positive".into()));
        }
        if self.plant.magnitude_vit <= self.tau_vit || self.plant.magnitude_llm <= self.tau_llm {
            return Err(Error::Config("planted magnitudes must exceed thresholds".into()));
        }
        if self.plant.emergence_layer >= self.l {
            return Err(Error::Config("emergence layer out of range".into()));
        }
        if self.read_layer >= self.l {
            return Err(Error::Config("read_layer out of range".into()));
        }
        if self.plant.carry_dim >= self.d {
            return Err(Error::Config("carry_dim out of hidden width".into()));
        }
        if self.sink_dims_llm.contains(&self.plant.carry_dim) {
            return Err(Error::Config("carry_dim overlaps sink_dims_llm".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.h
    }

    /// Maximum sequence length the position table supports.
    pub fn t_max(&self) -> usize {
        2 + self.n + 3 + 4
    }

    /// Token-span layout for a prompt with `n_post` text tokens after the
    /// visual block: `[BOS, SYS][n visual][question..task]`.
    pub fn spans(&self, n_post: usize) -> Spans {
        Spans {
            sys: 0..2,
            vis: 2..2 + self.n,
            txt: 2 + self.n..2 + self.n + n_post,
        }
    }
}

/// System / visual / text index ranges of one sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spans {
    pub sys: Range<usize>,
    pub vis: Range<usize>,
    pub txt: Range<usize>,
}

impl Spans {
    pub fn t(&self) -> usize {
        self.txt.end
    }
}

/// Per-layer key coefficients: `layer -> token index -> scalar`. Unspecified
/// tokens scale by exactly 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyScalePlan {
    pub layers: BTreeMap<usize, BTreeMap<usize, f64>>,
}

impl KeyScalePlan {
    pub fn none() -> Self {
        KeyScalePlan::default()
    }

    pub fn set(&mut self, layer: usize, token: usize, coeff: f64) {
        self.layers.entry(layer).or_default().insert(token, coeff);
    }

    pub fn validate(&self, l: usize) -> Result<()> {
        for (&layer, m) in &self.layers {
            if layer >= l {
                return Err(Error::Config(format!("plan layer {layer} >= {l}")));
            }
            for &c in m.values() {
                if !c.is_finite() || c < 0.0 {
                    return Err(Error::Config("plan coefficients must be finite and >= 0".into()));
                }
            }
        }
        Ok(())
    }

    /// Dense coefficient vector for one layer over a length-`t` sequence.
    pub fn coeff_vector(&self, layer: usize, t: usize) -> Vec<f64> {
        let mut v = vec![1.0; t];
        if let Some(m) = self.layers.get(&layer) {
            for (&tok, &c) in m {
                if tok < t {
                    v[tok] = c;
                }
            }
        }
        v
    }
}

/// Context handed to a coefficient source during the forward pass.
pub struct ForwardCtx<'a> {
    pub spans: Spans,
    pub config: &'a ModelConfig,
    /// Encoder output (n x d_v), available before any decoder layer runs.
    pub encoder_out: &'a Tensor,
}

/// Produces the per-token key coefficient vector for each decoder layer
/// while the forward graph is being built. `h_prev` is the node holding the
/// layer's input state H^{layer-1} (the embedding state for layer 0), so
/// learned gates can read their signal from it on the tape.
pub trait CoeffSource {
    fn layer_coeffs(
        &mut self,
        tape: &mut Tape,
        layer: usize,
        h_prev: Var,
        ctx: &ForwardCtx,
    ) -> Result<Var>;
}

/// Coefficient source backed by a static plan.
pub struct PlanCoeffs<'a> {
    pub plan: &'a KeyScalePlan,
}

impl CoeffSource for PlanCoeffs<'_> {
    fn layer_coeffs(
        &mut self,
        tape: &mut Tape,
        layer: usize,
        _h_prev: Var,
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        let t = ctx.spans.t();
        let v = self.plan.coeff_vector(layer, t);
        Ok(tape.leaf(Tensor::new(vec![t], v)?))
    }
}

/// One named parameter tensor; frozen parameters never receive updates.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Per-layer capture of attention internals (only filled when requested).
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Post-softmax attention, one `T x T` map per head.
    pub attn: Vec<Tensor>,
    /// Pre-softmax scaled logits, one `T x T` map per head (un-masked values
    /// included; the mask is applied inside the softmax).
    pub attn_logits: Vec<Tensor>,
    /// Query matrix (T x D, heads concatenated).
    pub q: Tensor,
    /// Key matrix after coefficient scaling (T x D).
    pub k_scaled: Tensor,
    /// Attention-sublayer residual contribution (T x D).
    pub attn_out: Tensor,
    /// FFN-sublayer residual contribution, including the planted pathway.
    pub ffn_out: Tensor,
}

/// Everything observable about one forward pass.
#[derive(Debug, Clone)]
pub struct RunTrace {
    /// Encoder output in vision space (n x d_v).
    pub encoder_out: Tensor,
    /// Hidden states: `h[0]` is the embedding state, `h[l+1]` the output of
    /// layer `l`; each is T x D.
    pub h: Vec<Tensor>,
    /// Per-layer attention details; empty when capture was off.
    pub layers: Vec<LayerTrace>,
    /// Final logits (T x vocab).
    pub logits: Tensor,
    pub spans: Spans,
    /// The key coefficient vector actually applied at each layer.
    pub coeffs: Vec<Tensor>,
}

impl RunTrace {
    /// Gating signal h_last at a given state index (0 = embeddings,
    /// `l+1` = output of layer l): the final prompt position's hidden row.
    pub fn h_last(&self, state: usize) -> &[f64] {
        self.h[state].row(self.spans.t() - 1)
    }
}

/// Nodes of the forward graph a caller may need after building it.
pub struct GraphOutput {
    /// `h[0]` embedding state node, `h[l+1]` output of layer l.
    pub h: Vec<Var>,
    pub logits: Var,
    pub coeffs: Vec<Var>,
    /// Capture-only attention internals, parallel to layers.
    pub details: Vec<GraphLayerDetail>,
}

pub struct GraphLayerDetail {
    pub attn: Vec<Var>,
    pub attn_logits: Vec<Var>,
    pub q: Var,
    pub k_scaled: Var,
    pub attn_out: Var,
    pub ffn_out: Var,
}

/// Tape nodes of all parameters, keyed by name.
pub struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }
}

fn lname(layer: usize, part: &str) -> String {
    format!("layer{layer:02}_{part}")
}

pub struct Backbone {
    pub config: ModelConfig,
    params: BTreeMap<String, Param>,
}

impl Backbone {
    // ----- construction -------------------------------------------------

    /// Random weights plus the planted sink structure, without post-build
    /// verification. Test configs with non-standard widths skip the
    /// encoder/projector planting (their vision path is fed directly).
    pub fn random_raw(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut params = BTreeMap::new();
        let mut put = |name: &str, value: Tensor, trainable: bool| {
            params.insert(name.to_string(), Param { value, trainable });
        };
        let normal = |rng: &mut Rng, shape: Vec<usize>, sigma: f64| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| sigma * rng.normal()).collect()).unwrap()
        };

        // vision encoder + projector (frozen)
        let mut enc_rng = rng.split("encoder", 0);
        put("enc_w", build_encoder(c, &mut enc_rng), false);
        let (p_w1, p_b1, p_w2, p_b2) = build_projector(c, &mut enc_rng);
        put("proj_w1", p_w1, false);
        put("proj_b1", p_b1, false);
        put("proj_w2", p_w2, false);
        put("proj_b2", p_b2, false);

        // embeddings
        let mut w_rng = rng.split("weights", 0);
        let mut tok_emb = normal(&mut w_rng, vec![c.vocab, c.d], 0.4);
        let mut pos_emb = normal(&mut w_rng, vec![c.t_max(), c.d], 0.4);
        // both address subspaces (visual codes and question-token codes)
        // start clean of embedding noise so the retrieval match below is
        // unambiguous from the first step; training may repopulate them
        let addr_end = (2 * c.head_dim()).min(c.d);
        for o in 0..addr_end {
            for r in 0..c.vocab {
                tok_emb.set2(r, o, 0.0);
            }
            for r in 0..c.t_max() {
                pos_emb.set2(r, o, 0.0);
            }
        }
        put("tok_emb", tok_emb, true);
        put("pos_emb", pos_emb, true);

        // frozen cell-address codes: visual token j and the question token
        // naming cell j receive the same orthogonal code, so a single
        // attention head can resolve "which patch is cell j" by a subspace
        // match instead of memorizing one association per cell
        let sys_len = 2;
        let mut addr_vis = Tensor::zeros(vec![c.t_max(), c.d]);
        let mut addr_tok = Tensor::zeros(vec![c.vocab, c.d]);
        for j in 0..c.n {
            if j < c.d {
                addr_vis.set2(sys_len + j, j, ADDR_SCALE);
            }
            let tok = scenes::TOK_CELL0 + j;
            // token codes live one head-width above the visual codes so a
            // question token's key never matches its own query
            if tok < c.vocab && c.head_dim() + j < c.d {
                addr_tok.set2(tok, c.head_dim() + j, ADDR_SCALE);
            }
        }
        put("addr_vis", addr_vis, false);
        put("addr_tok", addr_tok, false);

        // decoder layers
        let f = 2 * c.d;
        for l in 0..c.l {
            let mut lr = w_rng.split("layer", l as u64);
            let ones = Tensor::new(vec![c.d], vec![1.0; c.d]).unwrap();
            // the read layer's attention is a planted, frozen retrieval
            // apparatus (like the encoder and projector): head 0 resolves
            // "which patch is cell j" from the address codes and copies the
            // attended cell's color channels into a reserved answer
            // subspace; head 1 locks onto the encoder-sink carriers through
            // their spread signature and copies the count summary to the
            // answer position. Left trainable, early gradients silence
            // these pathways before the downstream readout learns to use
            // them, and the cell task never rises above chance.
            let att_train = l != c.read_layer;
            put(&lname(l, "ln1_g"), ones.clone(), att_train);
            put(&lname(l, "ln1_b"), Tensor::zeros(vec![c.d]), att_train);
            let mut wq = normal(&mut lr, vec![c.d, c.d], 0.08);
            let mut wk = normal(&mut lr, vec![c.d, c.d], 0.08);
            let mut bq = Tensor::zeros(vec![c.d]);
            let mut wv = normal(&mut lr, vec![c.d, c.d], 0.08);
            let mut wo = normal(&mut lr, vec![c.d, c.d], 0.08);
            if l == c.read_layer {
                // the planted heads are pure: random init is cleared from
                // their query/key/value columns and output rows so nothing
                // but the constructed match and copy paths remains (the
                // layer is frozen, so the noise could never train away)
                let planted_cols = (2 * c.head_dim()).min(c.d);
                for i in 0..c.d {
                    for jc in 0..planted_cols {
                        wq.set2(i, jc, 0.0);
                        wk.set2(i, jc, 0.0);
                        wv.set2(i, jc, 0.0);
                    }
                }
                for i in 0..planted_cols {
                    for jc in 0..c.d {
                        wo.set2(i, jc, 0.0);
                    }
                }
                // head 0: pointer. Question-token codes (one head-width up)
                // map onto head 0's query dims; visual codes onto its keys.
                let planted = c.n.min(c.head_dim());
                for j in 0..planted {
                    if c.head_dim() + j < c.d {
                        let q0 = wq.get2(c.head_dim() + j, j);
                        wq.set2(c.head_dim() + j, j, q0 + QK_PLANT_SCALE);
                    }
                    wk.set2(j, j, wk.get2(j, j) + QK_PLANT_SCALE);
                }
                // head 0: value chain, color channels -> answer subspace
                for ch in 0..scenes::NUM_COLORS {
                    let src = ATTR_PASS_DIM0 + ch;
                    let dst = ANSWER_DIM0 + ch;
                    if src < c.d && ch < c.head_dim() && dst < c.d {
                        wv.set2(src, ch, wv.get2(src, ch) + VO_PLANT_SCALE);
                        wo.set2(ch, dst, wo.get2(ch, dst) + VO_PLANT_SCALE);
                    }
                }
                // head 1: constant query bias against a key that measures
                // the sink spread signature, plus a count-summary copy
                let h1 = c.head_dim();
                if 2 * h1 <= c.d && c.d_v == scenes::D_V {
                    bq.data_mut()[h1] = SINK_BQ_SCALE;
                    for (k, &o) in SPREAD_DIMS.iter().enumerate() {
                        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                        if o < c.d {
                            wk.set2(o, h1, wk.get2(o, h1) + sign * K_SPREAD_SCALE);
                        }
                    }
                    for k in 0..scenes::NUM_COUNT_CLASSES {
                        let src = c.plant.summary_dim0 + k;
                        let slot = h1 + k;
                        if src < c.d && slot < 2 * h1 {
                            wv.set2(src, slot, wv.get2(src, slot) + VO_PLANT_SCALE);
                            wo.set2(slot, src, wo.get2(slot, src) + VO_PLANT_SCALE);
                        }
                    }
                }
            }
            put(&lname(l, "wq"), wq, att_train);
            put(&lname(l, "bq"), bq, att_train);
            put(&lname(l, "wk"), wk, att_train);
            put(&lname(l, "bk"), Tensor::zeros(vec![c.d]), att_train);
            put(&lname(l, "wv"), wv, att_train);
            put(&lname(l, "bv"), Tensor::zeros(vec![c.d]), att_train);
            put(&lname(l, "wo"), wo, att_train);
            let mut bo = Tensor::zeros(vec![c.d]);
            if l == c.read_layer
                && 2 * c.head_dim() <= c.d
                && c.d_v == scenes::D_V
                && c.plant.summary_dim0 < c.d
            {
                bo.data_mut()[c.plant.summary_dim0] = COUNT_PRIOR_SCALE;
            }
            put(&lname(l, "bo"), bo, att_train);
            put(&lname(l, "ln2_g"), ones.clone(), true);
            put(&lname(l, "ln2_b"), Tensor::zeros(vec![c.d]), true);
            put(&lname(l, "ffn_w1"), normal(&mut lr, vec![c.d, f], 0.08), true);
            put(&lname(l, "ffn_b1"), Tensor::zeros(vec![f]), true);
            put(&lname(l, "ffn_w2"), normal(&mut lr, vec![f, c.d], 0.08), true);
            put(&lname(l, "ffn_b2"), Tensor::zeros(vec![c.d]), true);
        }

        // planted emergence-layer FFN pathway (frozen): reads the carry
        // dimension of the raw residual stream, thresholded well below the
        // carry strength, and writes magnitude_llm onto each sink dim
        let mut w1p = Tensor::zeros(vec![c.d, 1]);
        w1p.set2(c.plant.carry_dim, 0, 1.0);
        let b1p = Tensor::new(vec![1], vec![-c.plant.carry_strength / 2.0]).unwrap();
        let mut w2p = Tensor::zeros(vec![1, c.d]);
        let gain = c.plant.magnitude_llm / (c.plant.carry_strength / 2.0);
        for &d in &c.sink_dims_llm {
            w2p.set2(0, d, gain);
        }
        put("plant_w1", w1p, false);
        put("plant_b1", b1p, false);
        put("plant_w2", w2p, false);

        // final norm + unembedding
        put(
            "lnf_g",
            Tensor::new(vec![c.d], vec![1.0; c.d]).unwrap(),
            true,
        );
        put("lnf_b", Tensor::zeros(vec![c.d]), true);
        let mut unemb_w = normal(&mut w_rng, vec![c.d, c.vocab], 0.1);
        for ch in 0..scenes::NUM_COLORS {
            let src = ANSWER_DIM0 + ch;
            let tok = scenes::TOK_COLOR0 + ch;
            if src < c.d && tok < c.vocab {
                unemb_w.set2(src, tok, unemb_w.get2(src, tok) + UNEMB_PLANT_SCALE);
            }
        }
        put("unemb_w", unemb_w, true);
        put("unemb_b", Tensor::zeros(vec![c.vocab]), true);

        Ok(Backbone { config: config.clone(), params })
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name].value
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.params.get_mut(name).unwrap().value
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Insert every parameter on a tape; trainable ones become trainable
    /// leaves only when `train` is set (frozen weights never do).
    pub fn param_vars(&self, tape: &mut Tape, train: bool) -> ParamVars {
        let mut map = BTreeMap::new();
        for (name, p) in &self.params {
            let var = if train && p.trainable {
                tape.trainable_leaf(p.value.clone())
            } else {
                tape.leaf(p.value.clone())
            };
            map.insert(name.clone(), var);
        }
        ParamVars { map }
    }

    // ----- vision path (frozen; computed off-tape) ----------------------

    /// Encoder output (n x d_v) and projected visual embeddings (n x d).
    pub fn encode_visual(&self, patches: &Tensor) -> Result<(Tensor, Tensor)> {
        if patches.cols() != self.config.d_v {
            return Err(Error::ShapeMismatch(format!(
                "patches width {} != d_v {}",
                patches.cols(),
                self.config.d_v
            )));
        }
        let enc = patches.matmul(self.param("enc_w"))?;
        let mut h = enc.matmul(self.param("proj_w1"))?;
        for i in 0..h.rows() {
            for (x, b) in h.row_mut(i).iter_mut().zip(self.param("proj_b1").data()) {
                *x += b;
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
        }
        let mut out = h.matmul(self.param("proj_w2"))?;
        for i in 0..out.rows() {
            for (x, b) in out.row_mut(i).iter_mut().zip(self.param("proj_b2").data()) {
                *x += b;
            }
        }
        Ok((enc, out))
    }

    // ----- forward graph -------------------------------------------------

    /// Build the full forward graph on `tape`. `tokens_pre` is the system
    /// prefix, `vis` the projected visual embeddings (rows x d), and
    /// `tokens_post` the question/answer tokens. One code path serves
    /// evaluation, backbone training, and gate training.
    pub fn build_graph(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        tokens_pre: &[usize],
        vis: Var,
        tokens_post: &[usize],
        src: &mut dyn CoeffSource,
        ctx: &ForwardCtx,
        capture: bool,
    ) -> Result<GraphOutput> {
        let c = &self.config;
        let n_vis = tape.value(vis).rows();
        let t = tokens_pre.len() + n_vis + tokens_post.len();
        if t > c.t_max() {
            return Err(Error::Config(format!("sequence length {t} exceeds t_max")));
        }
        for &tok in tokens_pre.iter().chain(tokens_post) {
            if tok >= c.vocab {
                return Err(Error::Config(format!("token id {tok} out of vocab")));
            }
        }

        let tok_emb = tape.add(pv.get("tok_emb"), pv.get("addr_tok"))?;
        let pre = tape.gather(tok_emb, Rc::new(tokens_pre.to_vec()))?;
        let post = tape.gather(tok_emb, Rc::new(tokens_post.to_vec()))?;
        let content = tape.concat_rows(&[pre, vis, post])?;
        let pos_emb = pv.get("pos_emb");
        let pos = tape.slice_rows(pos_emb, 0, t)?;
        let addr = tape.slice_rows(pv.get("addr_vis"), 0, t)?;
        let x0 = tape.add(content, pos)?;
        let mut x = tape.add(x0, addr)?;

        let mask = causal_mask(t);
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let eps = 1e-6;

        // architectural read mask: visual tokens can only be attended by the
        // first `N_READ_HEADS` heads of `read_layer`, concentrating ALL
        // cross-modal readout there. Exclusion (not key zeroing) matters: a
        // zeroed key still yields a neutral logit and therefore leaks visual
        // values into every position.
        let blind_mask = blind_causal_mask(t, ctx.spans.vis.clone());

        let mut h_states = vec![x];
        let mut coeff_vars = Vec::with_capacity(c.l);
        let mut details = Vec::new();

        for l in 0..c.l {
            let coeff = src.layer_coeffs(tape, l, x, ctx)?;
            if tape.value(coeff).numel() != t {
                return Err(Error::ShapeMismatch("coefficient vector length != T".into()));
            }
            tape.value(coeff).check_finite("key coefficients")?;
            coeff_vars.push(coeff);

            // attention sublayer
            let ln1 = tape.layernorm(x, pv.get(&lname(l, "ln1_g")), pv.get(&lname(l, "ln1_b")), eps)?;
            let q0 = tape.matmul(ln1, pv.get(&lname(l, "wq")))?;
            let q = tape.add_row_broadcast(q0, pv.get(&lname(l, "bq")))?;
            let k0 = tape.matmul(ln1, pv.get(&lname(l, "wk")))?;
            let k = tape.add_row_broadcast(k0, pv.get(&lname(l, "bk")))?;
            let v0 = tape.matmul(ln1, pv.get(&lname(l, "wv")))?;
            let v = tape.add_row_broadcast(v0, pv.get(&lname(l, "bv")))?;
            let k_scaled = tape.row_scale(k, coeff)?;

            let mut head_out = Vec::with_capacity(c.h);
            let mut head_attn = Vec::with_capacity(c.h);
            let mut head_logits = Vec::with_capacity(c.h);
            for hd in 0..c.h {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k_scaled, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let kt = tape.transpose(kh);
                let raw = tape.matmul(qh, kt)?;
                let logits = tape.scale_const(raw, scale);
                let visual_ok = l == c.read_layer && hd < N_READ_HEADS;
                let head_mask = if visual_ok { mask.clone() } else { blind_mask.clone() };
                let attn = tape.masked_softmax_rows(logits, head_mask)?;
                let ctxh = tape.matmul(attn, vh)?;
                head_out.push(ctxh);
                head_attn.push(attn);
                head_logits.push(logits);
            }
            let cat = tape.concat_cols(&head_out)?;
            let proj = tape.matmul(cat, pv.get(&lname(l, "wo")))?;
            let attn_out = tape.add_row_broadcast(proj, pv.get(&lname(l, "bo")))?;
            let x_mid = tape.add(x, attn_out)?;

            // FFN sublayer
            let ln2 = tape.layernorm(
                x_mid,
                pv.get(&lname(l, "ln2_g")),
                pv.get(&lname(l, "ln2_b")),
                eps,
            )?;
            let f0 = tape.matmul(ln2, pv.get(&lname(l, "ffn_w1")))?;
            let f1 = tape.add_row_broadcast(f0, pv.get(&lname(l, "ffn_b1")))?;
            let f2 = tape.relu(f1);
            let f3 = tape.matmul(f2, pv.get(&lname(l, "ffn_w2")))?;
            let mut ffn_out = tape.add_row_broadcast(f3, pv.get(&lname(l, "ffn_b2")))?;

            if l == c.plant.emergence_layer {
                // planted additive pathway: reads the raw residual stream's
                // carry dimension so its output is exact regardless of the
                // trained norm statistics
                let p0 = tape.matmul(x_mid, pv.get("plant_w1"))?;
                let p1 = tape.add_row_broadcast(p0, pv.get("plant_b1"))?;
                let p2 = tape.relu(p1);
                let p3 = tape.matmul(p2, pv.get("plant_w2"))?;
                ffn_out = tape.add(ffn_out, p3)?;
            }

            x = tape.add(x_mid, ffn_out)?;
            h_states.push(x);
            if capture {
                details.push(GraphLayerDetail {
                    attn: head_attn,
                    attn_logits: head_logits,
                    q,
                    k_scaled,
                    attn_out,
                    ffn_out,
                });
            }
        }

        let lnf = tape.layernorm(x, pv.get("lnf_g"), pv.get("lnf_b"), eps)?;
        let logits0 = tape.matmul(lnf, pv.get("unemb_w"))?;
        let logits = tape.add_row_broadcast(logits0, pv.get("unemb_b"))?;

        Ok(GraphOutput { h: h_states, logits, coeffs: coeff_vars, details })
    }

    /// Forward pass for an example under a coefficient source.
    pub fn forward_with(
        &self,
        example: &Example,
        src: &mut dyn CoeffSource,
        capture: bool,
    ) -> Result<RunTrace> {
        let (enc, proj) = self.encode_visual(&example.patch_features)?;
        self.forward_parts(
            &example.prompt_tokens[..2],
            &enc,
            &proj,
            &example.prompt_tokens[2..],
            src,
            capture,
        )
    }

    /// Forward pass from pre-encoded parts (used by generation, which
    /// appends tokens without re-encoding the image).
    pub fn forward_parts(
        &self,
        tokens_pre: &[usize],
        enc: &Tensor,
        proj: &Tensor,
        tokens_post: &[usize],
        src: &mut dyn CoeffSource,
        capture: bool,
    ) -> Result<RunTrace> {
        let mut tape = Tape::eval();
        let pv = self.param_vars(&mut tape, false);
        let vis = tape.leaf(proj.clone());
        let spans = Spans {
            sys: 0..tokens_pre.len(),
            vis: tokens_pre.len()..tokens_pre.len() + proj.rows(),
            txt: tokens_pre.len() + proj.rows()
                ..tokens_pre.len() + proj.rows() + tokens_post.len(),
        };
        let ctx = ForwardCtx { spans: spans.clone(), config: &self.config, encoder_out: enc };
        let g = self.build_graph(&mut tape, &pv, tokens_pre, vis, tokens_post, src, &ctx, capture)?;
        Ok(extract_trace(&tape, &g, enc.clone(), spans))
    }

    /// Forward pass under a static key-scale plan.
    pub fn forward(&self, example: &Example, plan: &KeyScalePlan, capture: bool) -> Result<RunTrace> {
        plan.validate(self.config.l)?;
        let mut src = PlanCoeffs { plan };
        self.forward_with(example, &mut src, capture)
    }

    /// Greedy argmax decoding (lowest token id wins ties); deterministic.
    pub fn generate(&self, example: &Example, plan: &KeyScalePlan, max_new: usize) -> Result<Vec<usize>> {
        assert!(max_new >= 1);
        plan.validate(self.config.l)?;
        let (enc, proj) = self.encode_visual(&example.patch_features)?;
        let mut post = example.prompt_tokens[2..].to_vec();
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let mut src = PlanCoeffs { plan };
            let trace =
                self.forward_parts(&example.prompt_tokens[..2], &enc, &proj, &post, &mut src, false)?;
            let last = trace.logits.rows() - 1;
            let tok = argmax_lowest(trace.logits.row(last));
            out.push(tok);
            post.push(tok);
        }
        Ok(out)
    }

    /// Whether greedy decoding reproduces the example's single-token answer.
    pub fn answers_correctly(&self, example: &Example, plan: &KeyScalePlan) -> Result<bool> {
        let got = self.generate(example, plan, 1)?;
        Ok(got[0] == example.answer_tokens[0])
    }

    // ----- persistence ---------------------------------------------------

    /// Deterministic byte serialization (config JSON + all parameters in
    /// name order at f64); basis for checkpoints and freeze-contract checks.
    pub fn serialized_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let cfg = serde_json::to_vec(&self.config)?;
        buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        buf.extend_from_slice(&cfg);
        for (name, p) in &self.params {
            buf.extend_from_slice(name.as_bytes());
            buf.push(if p.trainable { 1 } else { 0 });
            sgt1::write_tensor_to(&mut buf, &p.value, Precision::F64)?;
        }
        Ok(buf)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex_digest(&self.serialized_bytes()?))
    }

    /// Checkpoint: directory with `config.json` plus one SGT1 per parameter.
    pub fn save_checkpoint(&self, dir: &Path, prec: Precision) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&self.config)?)?;
        for (name, p) in &self.params {
            sgt1::write_tensor(&dir.join(format!("{name}.sgt1")), &p.value, prec)?;
        }
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let config: ModelConfig = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
        // rebuild the parameter skeleton (names + freeze flags) from the
        // config, then overwrite values from disk
        let mut bb = Backbone::random_raw(&config, &mut Rng::from_parts(0, "checkpoint", 0))?;
        let names: Vec<String> = bb.params.keys().cloned().collect();
        for name in names {
            let t = sgt1::read_tensor(&dir.join(format!("{name}.sgt1")))?;
            let p = bb.params.get_mut(&name).unwrap();
            if t.shape() != p.value.shape() {
                return Err(Error::BadTensorFile(format!("{name}: shape mismatch in checkpoint")));
            }
            p.value = t;
        }
        Ok(bb)
    }
}

fn extract_trace(tape: &Tape, g: &GraphOutput, encoder_out: Tensor, spans: Spans) -> RunTrace {
    RunTrace {
        encoder_out,
        h: g.h.iter().map(|&v| tape.value(v).clone()).collect(),
        layers: g
            .details
            .iter()
            .map(|d| LayerTrace {
                attn: d.attn.iter().map(|&v| tape.value(v).clone()).collect(),
                attn_logits: d.attn_logits.iter().map(|&v| tape.value(v).clone()).collect(),
                q: tape.value(d.q).clone(),
                k_scaled: tape.value(d.k_scaled).clone(),
                attn_out: tape.value(d.attn_out).clone(),
                ffn_out: tape.value(d.ffn_out).clone(),
            })
            .collect(),
        logits: tape.value(g.logits).clone(),
        spans,
        coeffs: g.coeffs.iter().map(|&v| tape.value(v).clone()).collect(),
    }
}

pub fn causal_mask(t: usize) -> Rc<Vec<bool>> {
    let mut mask = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            mask[i * t + j] = true;
        }
    }
    Rc::new(mask)
}

/// Causal mask with the visual block additionally excluded as keys; every
/// row keeps at least the system prefix, so no row is fully masked.
pub fn blind_causal_mask(t: usize, vis: Range<usize>) -> Rc<Vec<bool>> {
    let mut mask = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            mask[i * t + j] = !vis.contains(&j);
        }
    }
    Rc::new(mask)
}

/// Argmax with lowest-index tie-break.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

// ----- planted encoder / projector ---------------------------------------

/// Linear encoder (d_v x d_v): random mixing on the attribute channels,
/// spike of `magnitude_vit` on the sink dimension for flagged cells, and
/// identity carries for the decoder-sink flag and the count summary.
fn build_encoder(c: &ModelConfig, rng: &mut Rng) -> Tensor {
    let mut w = Tensor::zeros(vec![c.d_v, c.d_v]);
    if c.d_v != scenes::D_V {
        // non-standard widths (test configs) bypass the vision path
        return w;
    }
    // attribute channels pass through near-identity with mild mixing: the
    // channels stay linearly decodable downstream while remaining entangled
    // enough that probes have something nontrivial to separate
    for i in 0..scenes::ATTR_CHANNELS {
        for j in 0..scenes::ATTR_CHANNELS {
            w.set2(i, j, 0.1 * rng.normal());
        }
        w.set2(i, i, w.get2(i, i) + 1.0);
    }
    w.set2(scenes::CH_FLAG_V, c.sink_dim_vit, c.plant.magnitude_vit);
    w.set2(scenes::CH_FLAG_L, scenes::CH_FLAG_L, 1.0);
    for k in 0..scenes::NUM_COUNT_CLASSES {
        w.set2(scenes::CH_COUNT + k, scenes::CH_COUNT + k, 1.0);
    }
    w
}

/// Two-layer MLP projector (no residual): a random content path over the
/// attribute channels plus exact planted paths (spike -> spread vector,
/// decoder flag -> carry dim, count one-hot -> summary dims). Planted relu
/// inputs are non-negative by construction, so the planted outputs are exact.
fn build_projector(c: &ModelConfig, rng: &mut Rng) -> (Tensor, Tensor, Tensor, Tensor) {
    let hid = c.d;
    let mut w1 = Tensor::zeros(vec![c.d_v, hid]);
    let b1 = Tensor::zeros(vec![hid]);
    let mut w2 = Tensor::zeros(vec![hid, c.d]);
    let b2 = Tensor::zeros(vec![c.d]);
    if c.d_v != scenes::D_V {
        return (w1, b1, w2, b2);
    }
    let n_planted = 2 + scenes::NUM_COUNT_CLASSES + scenes::ATTR_CHANNELS;
    let content_units = hid - n_planted;
    let j_spread = content_units;
    let j_carry = content_units + 1;
    let j_count0 = content_units + 2;
    let j_attr0 = content_units + 2 + scenes::NUM_COUNT_CLASSES;

    // content path: attribute channels -> random units -> hidden dims < 40
    for i in 0..scenes::ATTR_CHANNELS {
        for j in 0..content_units {
            w1.set2(i, j, 0.3 * rng.normal());
        }
    }
    // content stays out of the visual address subspace (dims < 16)
    for j in 0..content_units {
        for o in 16..40.min(c.d) {
            w2.set2(j, o, 0.3 * rng.normal());
        }
    }

    // spike spread: relu passes magnitude_vit, scaled onto a fixed-norm
    // direction over general dims (away from carry/summary/sink dims)
    w1.set2(c.sink_dim_vit, j_spread, 1.0);
    let per = (c.plant.spread_norm / c.plant.magnitude_vit) / (SPREAD_DIMS.len() as f64).sqrt();
    for (k, &o) in SPREAD_DIMS.iter().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        if o < c.d {
            w2.set2(j_spread, o, sign * per);
        }
    }

    // decoder-sink flag carry
    w1.set2(scenes::CH_FLAG_L, j_carry, 1.0);
    w2.set2(j_carry, c.plant.carry_dim, c.plant.carry_strength);

    // global count summary
    for k in 0..scenes::NUM_COUNT_CLASSES {
        w1.set2(scenes::CH_COUNT + k, j_count0 + k, 1.0);
        w2.set2(j_count0 + k, c.plant.summary_dim0 + k, c.plant.summary_scale);
    }

    // exact attribute passthrough: each attribute channel gets its own relu
    // unit (channel values are non-negative one-hots up to clipped noise)
    // writing onto a dedicated hidden dim; the target range overlaps the
    // spread direction, which only ever fires on empty sink-carrier cells
    for ch in 0..scenes::ATTR_CHANNELS {
        w1.set2(ch, j_attr0 + ch, 1.0);
        w2.set2(j_attr0 + ch, ATTR_PASS_DIM0 + ch, ATTR_PASS_SCALE);
    }
    (w1, b1, w2, b2)
}

// ----- build with verification -------------------------------------------

/// Build a backbone and verify the planted structure by measurement,
/// retrying with a derived seed on failure.
pub fn build_backbone(config: &ModelConfig, rng: &Rng) -> Result<Backbone> {
    config.validate()?;
    let mut last_reason = String::new();
    for attempt in 0..config.plant.max_build_retries {
        let mut r = rng.split("build", attempt as u64);
        let bb = Backbone::random_raw(config, &mut r)?;
        match verify_planting(&bb) {
            Ok(()) => return Ok(bb),
            Err(e) => last_reason = e.to_string(),
        }
    }
    Err(Error::PlantingFailed {
        retries: config.plant.max_build_retries,
        reason: last_reason,
    })
}

/// Measure the planted guarantees on probe scenes.
pub fn verify_planting(bb: &Backbone) -> Result<()> {
    let c = &bb.config;
    if c.d_v != scenes::D_V || c.n != 16 || c.vocab != scenes::VOCAB {
        return Err(Error::Config("planting verification requires the standard data shape".into()));
    }
    let codebook = scenes::make_codebook();
    let grid_side = (c.n as f64).sqrt() as usize;

    // (a) all-background scene: exactly the sink cells spike at the encoder
    let empty = Scene { objects: vec![], grid_side };
    let mut rng = Rng::from_parts(1, "verify", 0);
    let patches = scenes::encode_patches(&empty, &codebook, &mut rng, 0.05);
    let (enc, _) = bb.encode_visual(&patches)?;
    let over: Vec<usize> = (0..c.n)
        .filter(|&j| enc.get2(j, c.sink_dim_vit).abs() >= c.tau_vit)
        .collect();
    let (vcells, _) = empty.sink_cells();
    if over != vcells {
        return Err(Error::Invariant(format!(
            "encoder sink set {over:?} != planted cells {vcells:?}"
        )));
    }

    // (b) projected sink norm >= 2x median ordinary norm over probe scenes
    for i in 0..4 {
        let mut srng = Rng::from_parts(2, "verify_scene", i);
        let scene = scenes::generate_scene(&mut srng, grid_side, 9);
        let patches = scenes::encode_patches(&scene, &codebook, &mut srng, 0.05);
        let (_, proj) = bb.encode_visual(&patches)?;
        let (vcells, lcells) = scene.sink_cells();
        let mut ord: Vec<f64> = (0..c.n)
            .filter(|j| !vcells.contains(j) && !lcells.contains(j))
            .map(|j| proj.row_l2_norm(j))
            .collect();
        ord.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ord[ord.len() / 2];
        for &j in &vcells {
            if proj.row_l2_norm(j) < 2.0 * median {
                return Err(Error::Invariant(format!(
                    "projected sink norm {} below 2x median ordinary {}",
                    proj.row_l2_norm(j),
                    median
                )));
            }
        }
    }

    // (c) decoder-sink activation jumps at the emergence layer and persists
    let examples = scenes::generate_dataset(3, &scenes::SceneConfig::default(), 6)?;
    let plan = KeyScalePlan::none();
    for ex in &examples {
        let trace = bb.forward(ex, &plan, false)?;
        let (vcells, lcells) = ex.scene.sink_cells();
        let l0 = c.plant.emergence_layer;
        let vis0 = trace.spans.vis.start;
        let max_sink = |h: &Tensor, tok: usize| -> f64 {
            c.sink_dims_llm
                .iter()
                .map(|&d| h.get2(tok, d).abs())
                .fold(0.0, f64::max)
        };
        for &cell in &lcells {
            let tok = vis0 + cell;
            let before = max_sink(&trace.h[l0], tok);
            let after = max_sink(&trace.h[l0 + 1], tok);
            let last = max_sink(&trace.h[c.l], tok);
            if before >= c.tau_llm {
                return Err(Error::Invariant(format!(
                    "decoder sink active before emergence layer ({before})"
                )));
            }
            if after < c.tau_llm + 5.0 {
                return Err(Error::Invariant(format!(
                    "decoder sink activation {after} lacks margin over the identification threshold"
                )));
            }
            if last < c.tau_llm {
                return Err(Error::Invariant(format!(
                    "decoder sink activation {last} not maintained to the last layer"
                )));
            }
        }
        // no spurious decoder sinks among ordinary visual tokens
        for cell in 0..c.n {
            if vcells.contains(&cell) || lcells.contains(&cell) {
                continue;
            }
            let tok = vis0 + cell;
            for state in trace.h.iter() {
                if max_sink(state, tok) >= c.tau_llm {
                    return Err(Error::Invariant(format!(
                        "spurious decoder sink at cell {cell}"
                    )));
                }
            }
        }
    }
    Ok(())
}

// ----- training ------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneTrainHyper {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Randomly scale the visual keys the read layer sees, independently
    /// for sink and non-sink cells, so gated inference (coefficients around
    /// 0.5) stays in-distribution.
    pub augment: bool,
}

impl Default for BackboneTrainHyper {
    fn default() -> Self {
        BackboneTrainHyper {
            steps: 1200,
            batch: 16,
            lr: 2e-3,
            seed: 0,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    pub losses: Vec<f64>,
}

/// Supervised next-token training of the decoder (frozen planted pathways
/// excluded from trainable leaves, so the sinks survive training).
pub fn train_backbone(
    bb: &mut Backbone,
    data: &[Example],
    hyper: &BackboneTrainHyper,
) -> Result<TrainingLog> {
    if hyper.steps == 0 {
        return Ok(TrainingLog { losses: vec![] });
    }
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let names = bb.trainable_names();
    let shapes: Vec<Vec<usize>> = names.iter().map(|n| bb.param(n).shape().to_vec()).collect();
    let mut opt = Adam::new(AdamConfig { lr: hyper.lr, ..Default::default() }, &shapes);
    let root = Rng::from_parts(hyper.seed, "backbone_train", 0);
    let mut losses = Vec::with_capacity(hyper.steps);

    // pre-encode the visual path once (it is frozen)
    let encoded: Vec<(Tensor, Tensor)> = data
        .iter()
        .map(|ex| bb.encode_visual(&ex.patch_features))
        .collect::<Result<_>>()?;

    for step in 0..hyper.steps {
        let mut brng = root.split("batch", step as u64);
        let mut grad_sum: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        let mut loss_sum = 0.0;
        for bi in 0..hyper.batch {
            let idx = brng.below(data.len());
            let ex = &data[idx];
            let (enc, proj) = &encoded[idx];

            let plan = if hyper.augment {
                let mut arng = root.split("augment", (step * hyper.batch + bi) as u64);
                augmentation_plan(&bb.config, bb.config.read_layer, ex, &mut arng)
            } else {
                KeyScalePlan::none()
            };

            let mut tape = Tape::new();
            let pv = bb.param_vars(&mut tape, true);
            let vis = tape.leaf(proj.clone());
            let spans = bb.config.spans(ex.prompt_tokens.len() - 2);
            let ctx = ForwardCtx { spans: spans.clone(), config: &bb.config, encoder_out: enc };
            let mut src = PlanCoeffs { plan: &plan };
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
            for (name, gs) in names.iter().zip(grad_sum.iter_mut()) {
                if let Some(gt) = grads.get(pv.get(name)) {
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

        let mut values: Vec<Tensor> = names.iter().map(|n| bb.param(n).clone()).collect();
        {
            let mut refs: Vec<&mut Tensor> = values.iter_mut().collect();
            opt.step(&mut refs, &grad_sum)?;
        }
        for (name, v) in names.iter().zip(values) {
            *bb.param_mut(name) = v;
        }
    }
    Ok(TrainingLog { losses })
}

/// Training-time augmentation: at the read layer (the only layer whose
/// attention sees visual keys), the encoder-sink cells and the remaining
/// cells get independent mild scalings, so the model stays robust to the
/// group-wise key interventions applied at analysis time. A fraction of
/// examples trains completely unscaled to keep the plain forward pass
/// in-distribution.
fn augmentation_plan(
    config: &ModelConfig,
    read_layer: usize,
    example: &Example,
    rng: &mut Rng,
) -> KeyScalePlan {
    let mut plan = KeyScalePlan::none();
    if rng.uniform() < 0.2 {
        return plan;
    }
    let spans = config.spans(3);
    let (vcells, _) = example.scene.sink_cells();
    let cv = 0.5 + 0.5 * rng.uniform();
    for (cell, tok) in spans.vis.clone().enumerate() {
        // sink carriers share one coefficient; every other cell draws its
        // own, so aggregates over ordinary cells are unreliable under
        // augmentation while single-cell retrieval stays easy
        let co = 0.5 + 0.5 * rng.uniform();
        plan.set(read_layer, tok, if vcells.contains(&cell) { cv } else { co });
    }
    plan
}

/// Exact-match accuracy per task tag under a plan.
pub fn evaluate(
    bb: &Backbone,
    data: &[Example],
    plan: &KeyScalePlan,
) -> Result<BTreeMap<TaskTag, (usize, usize)>> {
    let mut out: BTreeMap<TaskTag, (usize, usize)> = BTreeMap::new();
    for ex in data {
        let e = out.entry(ex.task_tag).or_insert((0, 0));
        e.1 += 1;
        if bb.answers_correctly(ex, plan)? {
            e.0 += 1;
        }
    }
    Ok(out)
}
