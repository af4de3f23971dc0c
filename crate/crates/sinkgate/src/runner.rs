//! Experiment orchestration: schema-versioned JSON configs, run manifests,
//! and the batch command-line pipelines built from the library modules.
//!
//! Every pipeline is a pure function of `(config, seed)`: numeric artifacts
//! are byte-identical across reruns; only the manifest timestamp differs.
//! Commands compose through the output directory — `data gen` writes the
//! datasets that `backbone train` reads, whose checkpoint the analysis
//! commands load — and each command records what it wrote in a manifest
//! under `manifests/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{
    build_backbone, evaluate, train_backbone, Backbone, BackboneTrainHyper, KeyScalePlan,
    ModelConfig, RunTrace,
};
use crate::error::{Error, Result};
use crate::intervene::{
    additional_gain, broad_optimum_stats, report_blocks, sweep_layers,
    sweep_stage2, SweepMeta, SweepResult,
};
use crate::lsg::{
    ablate, greedy_stack, train_gate, trajectory_to_csv, GateModule, GateSignalSpec,
    GateTrainHyper, GroupMode, Trajectory,
};
use crate::numerics::rng::Rng;
use crate::numerics::sgt1::Precision;
use crate::probes::{curves_to_csv, probe_curves, PoolGroup, ProbeHyper, ProbeRow, ProbeTask};
use crate::scenes::{generate_dataset, read_dataset, write_dataset, Example, SceneConfig};
use crate::sinkid::{partition_tokens, salience_profile, Group, TokenPartition};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

// ----- configuration ---------------------------------------------------------

/// Dataset generation spec: two disjoint splits from independent seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub train_n: usize,
    pub eval_n: usize,
    pub scene: SceneConfig,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            train_n: 2048,
            eval_n: 512,
            scene: SceneConfig::default(),
            train_seed: 200,
            eval_seed: 201,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    /// Seed for the planted random initialization.
    pub build_seed: u64,
    pub train: BackboneTrainHyper,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec { build_seed: 100, train: BackboneTrainHyper::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSpec {
    /// Evaluation examples traced for the salience profile.
    pub n_examples: usize,
}

impl Default for AnalyzeSpec {
    fn default() -> Self {
        AnalyzeSpec { n_examples: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Layers to sweep; `None` sweeps every decoder layer.
    pub layers: Option<Vec<usize>>,
    /// Evaluation examples per sweep cell.
    pub n_examples: usize,
    /// Layer-block size for the best-per-block report.
    pub block: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { layers: None, n_examples: 500, block: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub tasks: Vec<ProbeTask>,
    pub groups: Vec<PoolGroup>,
    /// Evaluation examples pooled for probe fitting.
    pub n_examples: usize,
    /// Seed of the fixed per-image ordinary-cell sample.
    pub sample_seed: u64,
    pub hyper: ProbeHyper,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            tasks: ProbeTask::ALL.to_vec(),
            groups: PoolGroup::ALL.to_vec(),
            n_examples: 256,
            sample_seed: 7,
            hyper: ProbeHyper::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    /// Layer whose keys the gate scales.
    pub layer: usize,
    pub group_mode: GroupMode,
    pub signal: GateSignalSpec,
    pub hyper: GateTrainHyper,
    /// Evaluation examples used for trajectories and gate evaluation.
    pub n_eval: usize,
}

impl Default for GateSpec {
    fn default() -> Self {
        GateSpec {
            layer: 3,
            group_mode: GroupMode::VsinkVsRest,
            signal: GateSignalSpec::LastToken,
            hyper: GateTrainHyper::default(),
            n_eval: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSpec {
    /// Greedy budget: how many gates are appended.
    pub steps: usize,
    /// Candidate layers; each needs a trained checkpoint under `gates/`.
    pub layers: Vec<usize>,
}

impl Default for StackSpec {
    fn default() -> Self {
        StackSpec { steps: 5, layers: vec![1, 2, 3, 4, 5] }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// The experiment file: one JSON document configures every pipeline, and
/// unknown keys are rejected so typos fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "ModelConfig::toy_default")]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub analyze: AnalyzeSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub probe: ProbeSpec,
    #[serde(default)]
    pub gate: GateSpec,
    #[serde(default)]
    pub stack: StackSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            model: ModelConfig::toy_default(),
            data: DataSpec::default(),
            backbone: BackboneSpec::default(),
            analyze: AnalyzeSpec::default(),
            sweep: SweepSpec::default(),
            probe: ProbeSpec::default(),
            gate: GateSpec::default(),
            stack: StackSpec::default(),
            seed: 0,
            out_dir: default_out_dir(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} unsupported (expected {})",
                self.schema_version, CONFIG_SCHEMA_VERSION
            )));
        }
        self.model.validate()?;
        self.data.scene.validate()?;
        if self.data.train_n == 0 || self.data.eval_n == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if self.gate.layer >= self.model.l {
            return Err(Error::Config("gate.layer out of range".into()));
        }
        if self.stack.layers.iter().any(|&l| l >= self.model.l) {
            return Err(Error::Config("stack.layers out of range".into()));
        }
        if self.sweep.block == 0 {
            return Err(Error::Config("sweep.block must be positive".into()));
        }
        Ok(())
    }

    /// Hash of the canonical JSON serialization. The output directory is a
    /// storage location, not an experiment parameter, so it is excluded:
    /// the same experiment written to two places hashes identically.
    pub fn sha256(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.out_dir = default_out_dir();
        let bytes = serde_json::to_vec(&canonical)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        Ok(hex::encode(hasher.finalize()))
    }
}

mod hex {
    pub fn encode(bytes: impl AsRef<[u8]>) -> String {
        bytes.as_ref().iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ----- manifests -------------------------------------------------------------

/// What one command run produced. Artifact paths are relative to the output
/// directory; the timestamp is informational and excluded from determinism
/// guarantees.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub created_unix_secs: u64,
}

fn write_manifest(
    config: &ExperimentConfig,
    command: &str,
    artifacts: Vec<String>,
) -> Result<RunManifest> {
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        command: command.to_string(),
        config_sha256: config.sha256()?,
        seed: config.seed,
        artifacts,
        created_unix_secs: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let dir = config.out_dir.join("manifests");
    fs::create_dir_all(&dir)?;
    write_json(&dir.join(format!("{command}.json")), &manifest)?;
    Ok(manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

// ----- CLI -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Precision {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Encoder-sink coefficient vs one shared coefficient for the rest.
    #[value(name = "2group")]
    TwoGroup,
    /// Stage-2 refinement: encoder-sink coefficient pinned at its stage-1
    /// optimum, the grid swept over (decoder-sink, ordinary).
    #[value(name = "3group")]
    ThreeGroup,
}

#[derive(Debug, Parser)]
#[command(
    name = "sinkgate",
    version,
    about = "Desk-scale laboratory for attention-sink analysis and gating"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config JSON; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker budget for independent jobs (validated; this build runs
    /// sequentially, results are identical for any value).
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Storage precision of emitted tensor files.
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::F64)]
    pub precision: PrecisionArg,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset generation.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Backbone lifecycle.
    Backbone {
        #[command(subcommand)]
        cmd: BackboneCmd,
    },
    /// Trace the model and emit the group salience profile.
    Analyze,
    /// Grid sweep of group-wise key coefficients.
    Sweep {
        /// Layer index or "all".
        #[arg(long, default_value = "all")]
        layer: String,
        #[arg(long, value_enum, default_value_t = ModeArg::TwoGroup)]
        mode: ModeArg,
        /// Dataset manifest overriding the default evaluation split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Layer-wise linear probes of pooled hidden states.
    Probe {
        /// Comma-separated tasks: count,size,color,shape.
        #[arg(long)]
        tasks: Option<String>,
        /// Dataset manifest overriding the default evaluation split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Learned per-layer gates.
    Gate {
        #[command(subcommand)]
        cmd: GateCmd,
    },
    /// Consolidate artifacts into report tables.
    Report,
}

#[derive(Debug, Subcommand)]
pub enum DataCmd {
    /// Generate the train/eval dataset splits.
    Gen,
}

#[derive(Debug, Subcommand)]
pub enum BackboneCmd {
    /// Build the planted initialization and save it untrained.
    Build,
    /// Build and train the backbone on the train split.
    Train,
    /// Evaluate the trained backbone on the eval split.
    Eval,
}

#[derive(Debug, Subcommand)]
pub enum GateCmd {
    /// Train one gate at a layer.
    Train {
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Greedy-stack trained gate checkpoints.
    Stack {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train every (signal, grouping) design variant and compare.
    Ablate,
}

/// Exit code for an error, per the interface contract: 2 config/usage,
/// 3 invariant violation, 4 numeric failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Io(_) | Error::BadTensorFile(_) => 2,
        Error::Invariant(_) | Error::ShapeMismatch(_) | Error::PlantingFailed { .. } => 3,
        Error::NonFinite(_) => 4,
    }
}

/// Entry point behind the thin binary: resolve the config, apply flag
/// overrides, dispatch the pipeline, and record a manifest.
pub fn run(cli: &Cli) -> Result<RunManifest> {
    if cli.workers == 0 {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    let precision: Precision = cli.precision.into();

    match &cli.command {
        Command::Data { cmd: DataCmd::Gen } => data_gen(&config, precision),
        Command::Backbone { cmd } => match cmd {
            BackboneCmd::Build => backbone_build(&config, precision),
            BackboneCmd::Train => backbone_train(&config, precision),
            BackboneCmd::Eval => backbone_eval(&config),
        },
        Command::Analyze => analyze(&config),
        Command::Sweep { layer, mode, data } => {
            sweep(&config, layer, *mode, data.as_deref())
        }
        Command::Probe { tasks, data } => probe(&config, tasks.as_deref(), data.as_deref()),
        Command::Gate { cmd } => match cmd {
            GateCmd::Train { layer } => gate_train(&config, *layer),
            GateCmd::Stack { steps } => gate_stack(&config, *steps),
            GateCmd::Ablate => gate_ablate(&config),
        },
        Command::Report => report(&config),
    }
}

// ----- artifact locations ----------------------------------------------------

fn train_manifest_path(config: &ExperimentConfig) -> PathBuf {
    config.out_dir.join("data/train/manifest.jsonl")
}

fn eval_manifest_path(config: &ExperimentConfig) -> PathBuf {
    config.out_dir.join("data/eval/manifest.jsonl")
}

fn backbone_dir(config: &ExperimentConfig) -> PathBuf {
    config.out_dir.join("backbone")
}

fn gate_dir(config: &ExperimentConfig, layer: usize) -> PathBuf {
    config.out_dir.join(format!("gates/layer{layer}"))
}

fn load_split(path: &Path, what: &str) -> Result<Vec<Example>> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing {what} dataset at {}; run `sinkgate data gen` first",
            path.display()
        )));
    }
    read_dataset(path)
}

fn load_backbone(config: &ExperimentConfig) -> Result<Backbone> {
    let dir = backbone_dir(config);
    if !dir.join("config.json").exists() {
        return Err(Error::Config(format!(
            "missing backbone checkpoint at {}; run `sinkgate backbone train` first",
            dir.display()
        )));
    }
    Backbone::load_checkpoint(&dir)
}

fn rel(config: &ExperimentConfig, path: &Path) -> String {
    path.strip_prefix(&config.out_dir)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

/// Trace the first `n` eval examples with capture and partition them.
fn traced_eval(
    config: &ExperimentConfig,
    bb: &Backbone,
    n: usize,
) -> Result<(Vec<Example>, Vec<RunTrace>, Vec<TokenPartition>)> {
    let eval = load_split(&eval_manifest_path(config), "eval")?;
    let take = n.min(eval.len());
    let data: Vec<Example> = eval.into_iter().take(take).collect();
    let mut traces = Vec::with_capacity(data.len());
    let mut partitions = Vec::with_capacity(data.len());
    for ex in &data {
        let trace = bb.forward(ex, &KeyScalePlan::none(), true)?;
        partitions.push(partition_tokens(&trace, &bb.config)?);
        traces.push(trace);
    }
    Ok((data, traces, partitions))
}

// ----- pipelines -------------------------------------------------------------

fn data_gen(config: &ExperimentConfig, precision: Precision) -> Result<RunManifest> {
    let train = generate_dataset(config.data.train_seed, &config.data.scene, config.data.train_n)?;
    let eval = generate_dataset(config.data.eval_seed, &config.data.scene, config.data.eval_n)?;
    let train_path = write_dataset(&config.out_dir.join("data/train"), &train, precision)?;
    let eval_path = write_dataset(&config.out_dir.join("data/eval"), &eval, precision)?;
    write_manifest(
        config,
        "data_gen",
        vec![rel(config, &train_path), rel(config, &eval_path)],
    )
}

fn backbone_build(config: &ExperimentConfig, precision: Precision) -> Result<RunManifest> {
    let bb = build_backbone(&config.model, &Rng::from_seed(config.backbone.build_seed))?;
    let dir = config.out_dir.join("backbone_init");
    bb.save_checkpoint(&dir, precision)?;
    let digest_path = dir.join("digest.txt");
    fs::write(&digest_path, format!("{}\n", bb.digest()?))?;
    write_manifest(
        config,
        "backbone_build",
        vec![rel(config, &dir), rel(config, &digest_path)],
    )
}

fn backbone_train(config: &ExperimentConfig, precision: Precision) -> Result<RunManifest> {
    let train = load_split(&train_manifest_path(config), "train")?;
    let mut bb = build_backbone(&config.model, &Rng::from_seed(config.backbone.build_seed))?;
    let log = train_backbone(&mut bb, &train, &config.backbone.train)?;
    let dir = backbone_dir(config);
    bb.save_checkpoint(&dir, precision)?;
    let log_path = config.out_dir.join("backbone/training_log.json");
    write_json(&log_path, &log)?;
    let digest_path = dir.join("digest.txt");
    fs::write(&digest_path, format!("{}\n", bb.digest()?))?;
    write_manifest(
        config,
        "backbone_train",
        vec![rel(config, &dir), rel(config, &log_path), rel(config, &digest_path)],
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalReport {
    /// task -> (correct, total, accuracy)
    accuracy: BTreeMap<String, (usize, usize, f64)>,
}

fn backbone_eval(config: &ExperimentConfig) -> Result<RunManifest> {
    let bb = load_backbone(config)?;
    let eval = load_split(&eval_manifest_path(config), "eval")?;
    let by_task = evaluate(&bb, &eval, &KeyScalePlan::none())?;
    let accuracy = by_task
        .into_iter()
        .map(|(t, (c, n))| (t.as_str().to_string(), (c, n, c as f64 / n as f64)))
        .collect();
    let path = config.out_dir.join("eval.json");
    write_json(&path, &EvalReport { accuracy })?;
    write_manifest(config, "backbone_eval", vec![rel(config, &path)])
}

fn salience_csv(profile: &crate::sinkid::SalienceProfile) -> String {
    let mut out = String::from("section,index,group,value\n");
    let fmt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (s, row) in profile.norms.iter().enumerate() {
        for g in Group::ALL {
            out.push_str(&format!("norm,{s},{},{}\n", g.as_str(), fmt(&row[&g])));
        }
    }
    for (l, row) in profile.attn_from_last.iter().enumerate() {
        for g in Group::ALL {
            out.push_str(&format!("attn_from_last,{l},{},{}\n", g.as_str(), fmt(&row[&g])));
        }
    }
    for (s, row) in profile.group_counts.iter().enumerate() {
        for g in Group::ALL {
            out.push_str(&format!("group_count,{s},{},{}\n", g.as_str(), row[&g]));
        }
    }
    out
}

fn analyze(config: &ExperimentConfig) -> Result<RunManifest> {
    let bb = load_backbone(config)?;
    let (_, traces, partitions) = traced_eval(config, &bb, config.analyze.n_examples)?;
    let profile = salience_profile(&traces, &partitions)?;
    let json_path = config.out_dir.join("analyze/profile.json");
    write_json(&json_path, &profile)?;
    let csv_path = config.out_dir.join("analyze/salience.csv");
    fs::create_dir_all(csv_path.parent().unwrap())?;
    fs::write(&csv_path, salience_csv(&profile))?;
    write_manifest(
        config,
        "analyze",
        vec![rel(config, &json_path), rel(config, &csv_path)],
    )
}

fn heatmap_csv(result: &SweepResult) -> String {
    let mut out = String::from("layer,vsink,lsink,ordinary,task,accuracy,delta_vs_baseline\n");
    for cell in &result.cells {
        for (task, acc) in &cell.accuracy {
            let base = result.baseline.get(task).copied().unwrap_or(0.0);
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                cell.layer,
                cell.coeffs.vsink,
                cell.coeffs.lsink,
                cell.coeffs.ordinary,
                task.as_str(),
                acc,
                acc - base
            ));
        }
    }
    out
}

/// Frequency-weighted overall accuracy of one sweep cell.
fn overall_accuracy(
    accuracy: &BTreeMap<crate::scenes::TaskTag, f64>,
    weights: &BTreeMap<crate::scenes::TaskTag, usize>,
) -> f64 {
    let total: usize = weights.values().sum();
    if total == 0 {
        return 0.0;
    }
    accuracy
        .iter()
        .map(|(t, a)| a * weights.get(t).copied().unwrap_or(0) as f64)
        .sum::<f64>()
        / total as f64
}

fn sweep(
    config: &ExperimentConfig,
    layer_arg: &str,
    mode: ModeArg,
    data_override: Option<&Path>,
) -> Result<RunManifest> {
    let bb = load_backbone(config)?;
    let layers: Vec<usize> = if layer_arg == "all" {
        match &config.sweep.layers {
            Some(ls) => ls.clone(),
            None => (0..config.model.l).collect(),
        }
    } else {
        let l: usize = layer_arg
            .parse()
            .map_err(|_| Error::Config(format!("--layer must be an index or \"all\", got {layer_arg}")))?;
        if l >= config.model.l {
            return Err(Error::Config(format!("--layer {l} out of range")));
        }
        vec![l]
    };

    let source = data_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| eval_manifest_path(config));
    let all = load_split(&source, "sweep")?;
    let take = config.sweep.n_examples.min(all.len());
    let data: Vec<Example> = all.into_iter().take(take).collect();
    let weights: BTreeMap<crate::scenes::TaskTag, usize> =
        data.iter().fold(BTreeMap::new(), |mut m, ex| {
            *m.entry(ex.task_tag).or_insert(0) += 1;
            m
        });
    let meta = SweepMeta {
        seed: config.seed,
        dataset_id: format!("{}#{}", source.display(), take),
        n_examples: take,
    };

    let stage1 = sweep_layers(&bb, &data, &layers, meta.clone())?;
    let json_path = config.out_dir.join("sweep/sweep.json");
    write_json(&json_path, &stage1)?;
    let heatmap_path = config.out_dir.join("sweep/heatmap.csv");
    fs::create_dir_all(heatmap_path.parent().unwrap())?;
    fs::write(&heatmap_path, heatmap_csv(&stage1))?;
    let blocks_path = config.out_dir.join("sweep/blocks.json");
    write_json(&blocks_path, &report_blocks(&stage1, config.sweep.block)?)?;
    let gaps_path = config.out_dir.join("sweep/gaps.json");
    write_json(&gaps_path, &broad_optimum_stats(&stage1)?)?;
    let mut artifacts = vec![
        rel(config, &json_path),
        rel(config, &heatmap_path),
        rel(config, &blocks_path),
        rel(config, &gaps_path),
    ];

    if mode == ModeArg::ThreeGroup {
        if layers.len() != 1 {
            return Err(Error::Config(
                "--mode 3group needs a single --layer to refine".into(),
            ));
        }
        // pin the encoder-sink coefficient at its stage-1 overall optimum
        let best = stage1
            .cells
            .iter()
            .max_by(|a, b| {
                overall_accuracy(&a.accuracy, &weights)
                    .total_cmp(&overall_accuracy(&b.accuracy, &weights))
            })
            .ok_or_else(|| Error::Invariant("stage-1 sweep produced no cells".into()))?;
        let stage2 = sweep_stage2(&bb, &data, layers[0], best.coeffs.vsink, meta)?;
        let s2_json = config.out_dir.join("sweep/stage2.json");
        write_json(&s2_json, &stage2)?;
        let s2_heatmap = config.out_dir.join("sweep/stage2_heatmap.csv");
        fs::write(&s2_heatmap, heatmap_csv(&stage2))?;
        let gain_path = config.out_dir.join("sweep/stage2_gain.json");
        let gain: BTreeMap<String, f64> = additional_gain(&stage1, &stage2)
            .into_iter()
            .map(|(t, g)| (t.as_str().to_string(), g))
            .collect();
        write_json(&gain_path, &gain)?;
        artifacts.push(rel(config, &s2_json));
        artifacts.push(rel(config, &s2_heatmap));
        artifacts.push(rel(config, &gain_path));
    }

    write_manifest(config, "sweep", artifacts)
}

fn parse_probe_tasks(arg: &str) -> Result<Vec<ProbeTask>> {
    arg.split(',')
        .map(|raw| match raw.trim() {
            "count" => Ok(ProbeTask::Count),
            "size" | "size_max" => Ok(ProbeTask::SizeMax),
            "color" | "color_presence" => Ok(ProbeTask::ColorPresence),
            "shape" | "shape_presence" => Ok(ProbeTask::ShapePresence),
            other => Err(Error::Config(format!("unknown probe task {other:?}"))),
        })
        .collect()
}

/// The contract CSV: one row per fitted probe with split sizes.
fn probe_contract_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("task,group,layer,n_train,n_test,accuracy\n");
    for r in rows {
        let n_train = (r.n_used as f64 * crate::probes::PROBE_TRAIN_FRACTION).floor() as usize;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.task.as_str(),
            r.group.as_str(),
            r.state,
            n_train,
            r.n_used - n_train,
            r.eval_accuracy
        ));
    }
    out
}

fn probe(
    config: &ExperimentConfig,
    tasks_arg: Option<&str>,
    data_override: Option<&Path>,
) -> Result<RunManifest> {
    let bb = load_backbone(config)?;
    let tasks = match tasks_arg {
        Some(arg) => parse_probe_tasks(arg)?,
        None => config.probe.tasks.clone(),
    };
    let (data, traces, partitions) = match data_override {
        Some(path) => {
            let all = load_split(path, "probe")?;
            let take = config.probe.n_examples.min(all.len());
            let data: Vec<Example> = all.into_iter().take(take).collect();
            let mut traces = Vec::new();
            let mut partitions = Vec::new();
            for ex in &data {
                let trace = bb.forward(ex, &KeyScalePlan::none(), true)?;
                partitions.push(partition_tokens(&trace, &bb.config)?);
                traces.push(trace);
            }
            (data, traces, partitions)
        }
        None => traced_eval(config, &bb, config.probe.n_examples)?,
    };
    let rows = probe_curves(
        &data,
        &traces,
        &partitions,
        &tasks,
        &config.probe.groups,
        config.probe.sample_seed,
        &config.probe.hyper,
    )?;
    let curves_path = config.out_dir.join("probe/curves.csv");
    fs::create_dir_all(curves_path.parent().unwrap())?;
    fs::write(&curves_path, probe_contract_csv(&rows))?;
    let detail_path = config.out_dir.join("probe/curves_detail.csv");
    fs::write(&detail_path, curves_to_csv(&rows))?;
    write_manifest(
        config,
        "probe",
        vec![rel(config, &curves_path), rel(config, &detail_path)],
    )
}

fn gate_train(config: &ExperimentConfig, layer_arg: Option<usize>) -> Result<RunManifest> {
    let bb = load_backbone(config)?;
    let layer = layer_arg.unwrap_or(config.gate.layer);
    if layer >= config.model.l {
        return Err(Error::Config(format!("gate layer {layer} out of range")));
    }
    let train = load_split(&train_manifest_path(config), "train")?;
    let (eval, _, partitions) = traced_eval(config, &bb, config.gate.n_eval)?;

    let mut gate = GateModule::new(
        config.model.d,
        layer,
        config.gate.group_mode,
        config.gate.signal,
        &mut Rng::from_parts(config.seed, "gate_init", layer as u64),
    );
    let trajectory = train_gate(
        &bb,
        &train,
        &mut gate,
        &config.gate.hyper,
        Some((&eval, &partitions)),
    )?;

    let dir = gate_dir(config, layer);
    gate.save(&dir)?;
    let traj_json = dir.join("trajectory.json");
    write_json(&traj_json, &trajectory)?;
    let traj_csv = dir.join("trajectory.csv");
    fs::write(&traj_csv, trajectory_to_csv(&trajectory))?;
    write_manifest(
        config,
        &format!("gate_train_layer{layer}"),
        vec![rel(config, &dir), rel(config, &traj_json), rel(config, &traj_csv)],
    )
}

fn stack_csv(report: &crate::lsg::StackReport) -> String {
    let mut out =
        String::from("step,added_layer,active_layers,task,single_accuracy,stack_accuracy,delta_vs_baseline\n");
    for step in &report.steps {
        let active = step
            .active_layers
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(" ");
        for (task, single) in &step.single_accuracy {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                step.step,
                step.added_layer,
                active,
                task.as_str(),
                single,
                step.stack_accuracy.get(task).copied().unwrap_or(0.0),
                step.delta_vs_baseline.get(task).copied().unwrap_or(0.0)
            ));
        }
    }
    out
}

fn gate_stack(config: &ExperimentConfig, steps_arg: Option<usize>) -> Result<RunManifest> {
    let bb = load_backbone(config)?;
    let steps = steps_arg.unwrap_or(config.stack.steps);
    let mut candidates = Vec::new();
    for &layer in &config.stack.layers {
        let dir = gate_dir(config, layer);
        if !dir.join("meta.json").exists() && !dir.exists() {
            return Err(Error::Config(format!(
                "missing gate checkpoint for layer {layer} at {}; run `sinkgate gate train --layer {layer}` first",
                dir.display()
            )));
        }
        candidates.push(GateModule::load(&dir)?);
    }
    let (eval, _, partitions) = traced_eval(config, &bb, config.gate.n_eval)?;
    let report = greedy_stack(&bb, &eval, &partitions, candidates, steps)?;

    let json_path = config.out_dir.join("stack/report.json");
    write_json(&json_path, &report)?;
    let csv_path = config.out_dir.join("stack/steps.csv");
    fs::create_dir_all(csv_path.parent().unwrap())?;
    fs::write(&csv_path, stack_csv(&report))?;
    write_manifest(
        config,
        "gate_stack",
        vec![rel(config, &json_path), rel(config, &csv_path)],
    )
}

fn ablate_csv(rows: &[crate::lsg::AblationRow]) -> String {
    let mut out = String::from("signal,group_mode,task,accuracy,delta_vs_baseline\n");
    for row in rows {
        let signal = serde_variant(&row.signal);
        let mode = serde_variant(&row.group_mode);
        for (task, acc) in &row.accuracy {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                signal,
                mode,
                task.as_str(),
                acc,
                row.delta_vs_baseline.get(task).copied().unwrap_or(0.0)
            ));
        }
    }
    out
}

/// Snake-case variant name of a unit enum via its serde serialization.
fn serde_variant<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value)
        .unwrap_or_default()
        .trim_matches('"')
        .to_string()
}

fn gate_ablate(config: &ExperimentConfig) -> Result<RunManifest> {
    let bb = load_backbone(config)?;
    let train = load_split(&train_manifest_path(config), "train")?;
    let (eval, _, partitions) = traced_eval(config, &bb, config.gate.n_eval)?;
    let rows = ablate(&bb, &train, &eval, &partitions, config.gate.layer, &config.gate.hyper)?;
    let json_path = config.out_dir.join("ablate/table.json");
    write_json(&json_path, &rows)?;
    let csv_path = config.out_dir.join("ablate/table.csv");
    fs::create_dir_all(csv_path.parent().unwrap())?;
    fs::write(&csv_path, ablate_csv(&rows))?;
    write_manifest(
        config,
        "gate_ablate",
        vec![rel(config, &json_path), rel(config, &csv_path)],
    )
}

#[derive(Debug, Serialize)]
struct ReportSummary {
    consolidated: Vec<String>,
}

fn report(config: &ExperimentConfig) -> Result<RunManifest> {
    let out = &config.out_dir;
    let report_dir = out.join("report");
    fs::create_dir_all(&report_dir)?;
    let mut artifacts = Vec::new();
    let mut consolidated = Vec::new();

    let sweep_json = out.join("sweep/sweep.json");
    if sweep_json.exists() {
        let result: SweepResult = read_json(&sweep_json)?;
        let heatmap_path = report_dir.join("heatmap.csv");
        fs::write(&heatmap_path, heatmap_csv(&result))?;
        artifacts.push(rel(config, &heatmap_path));
        let blocks_path = report_dir.join("block_best.csv");
        let mut blocks_csv =
            String::from("task,block,layer,vsink,lsink,ordinary,accuracy,delta_vs_baseline\n");
        for b in report_blocks(&result, config.sweep.block)? {
            blocks_csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                b.task.as_str(),
                b.block,
                b.layer,
                b.coeffs.vsink,
                b.coeffs.lsink,
                b.coeffs.ordinary,
                b.accuracy,
                b.delta_vs_baseline
            ));
        }
        fs::write(&blocks_path, blocks_csv)?;
        artifacts.push(rel(config, &blocks_path));
        consolidated.push("sweep".to_string());
    }

    let stack_json = out.join("stack/report.json");
    if stack_json.exists() {
        // the stored report is the serializable subset of the stack run
        let value: serde_json::Value = read_json(&stack_json)?;
        let table_path = report_dir.join("stack_table.csv");
        let mut counters = BTreeMap::new();
        if let (Some(nn), Some(neg)) = (
            value.get("nonnegative_deltas").and_then(|v| v.as_u64()),
            value.get("negative_deltas").and_then(|v| v.as_u64()),
        ) {
            counters.insert("tasks_with_nonnegative_delta".to_string(), nn);
            counters.insert("tasks_with_negative_delta".to_string(), neg);
        }
        let counters_path = report_dir.join("counters.json");
        write_json(&counters_path, &counters)?;
        artifacts.push(rel(config, &counters_path));
        // re-emit the per-step table from the stored steps
        let steps: Vec<crate::lsg::StackStep> =
            serde_json::from_value(value.get("steps").cloned().unwrap_or_default())?;
        let baseline: BTreeMap<crate::scenes::TaskTag, f64> =
            serde_json::from_value(value.get("baseline").cloned().unwrap_or_default())?;
        let mut csv = String::from(
            "step,added_layer,active_layers,task,single_accuracy,stack_accuracy,delta_vs_baseline\n",
        );
        for step in &steps {
            let active = step
                .active_layers
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(" ");
            for (task, single) in &step.single_accuracy {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    step.step,
                    step.added_layer,
                    active,
                    task.as_str(),
                    single,
                    step.stack_accuracy.get(task).copied().unwrap_or(0.0),
                    step.delta_vs_baseline.get(task).copied().unwrap_or(0.0)
                ));
            }
        }
        let _ = baseline;
        fs::write(&table_path, csv)?;
        artifacts.push(rel(config, &table_path));
        consolidated.push("stack".to_string());
    }

    let gates_root = out.join("gates");
    if gates_root.exists() {
        let mut merged =
            String::from("layer_dir,checkpoint_step,loss,layer,task,mean_rho0,std_rho0,n\n");
        let mut dirs: Vec<PathBuf> = fs::read_dir(&gates_root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut any = false;
        for dir in dirs {
            let traj_path = dir.join("trajectory.json");
            if !traj_path.exists() {
                continue;
            }
            let traj: Trajectory = read_json(&traj_path)?;
            let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            for line in trajectory_to_csv(&traj).lines().skip(1) {
                merged.push_str(&format!("{name},{line}\n"));
            }
            any = true;
        }
        if any {
            let traj_path = report_dir.join("trajectories.csv");
            fs::write(&traj_path, merged)?;
            artifacts.push(rel(config, &traj_path));
            consolidated.push("trajectories".to_string());
        }
    }

    if consolidated.is_empty() {
        return Err(Error::Config(
            "nothing to report: run sweep, gate train, or gate stack first".into(),
        ));
    }
    let summary_path = report_dir.join("summary.json");
    write_json(&summary_path, &ReportSummary { consolidated })?;
    artifacts.push(rel(config, &summary_path));
    write_manifest(config, "report", artifacts)
}
