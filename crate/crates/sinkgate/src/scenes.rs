//! Deterministic synthetic multimodal data: toy grid scenes, their
//! patch-feature encodings, question/answer token sequences, and probing
//! labels.
//!
//! A scene is a `grid_side x grid_side` grid with at most one object per
//! cell; objects carry color/shape/size attribute ids. Patch features encode
//! each cell with a codebook row plus small noise. A deterministic subset of
//! empty cells is marked sink-eligible: the backbone's planted pathways turn
//! those patches into high-norm sink tokens, and the encoder writes a global
//! count summary into them. That construction makes the global/local
//! trade-off provable: the scene count is readable from sink tokens, while
//! per-cell attributes are readable only from ordinary patches.

use std::fs;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::sgt1::{self, Precision};
use crate::numerics::tensor::Tensor;

/// Attribute cardinalities (fixed label spaces).
pub const NUM_COLORS: usize = 8;
pub const NUM_SHAPES: usize = 3;
pub const NUM_SIZES: usize = 5;

/// Patch-feature channel layout (`D_v = 32`).
pub const D_V: usize = 32;
pub const CH_COLOR: usize = 0; // 8 channels, one-hot
pub const CH_SHAPE: usize = 8; // 3 channels, one-hot
pub const CH_SIZE: usize = 11; // 5 channels, one-hot
pub const ATTR_CHANNELS: usize = 16; // channels [0,16) carry cell content
pub const CH_FLAG_V: usize = 16; // marks encoder-emerged sink cells
pub const CH_FLAG_L: usize = 17; // marks decoder-emerged sink cells
pub const CH_COUNT: usize = 18; // 10 channels, global count one-hot
pub const NUM_COUNT_CLASSES: usize = 10;

/// Empty cells reserved as sink carriers, in row-major order of empty cells.
pub const NUM_VSINK_CELLS: usize = 2;
pub const NUM_LSINK_CELLS: usize = 2;

/// Token vocabulary layout (`vocab = 64`).
pub const VOCAB: usize = 64;
pub const TOK_BOS: usize = 0;
pub const TOK_SYS: usize = 1;
pub const TOK_PAD: usize = 2;
pub const TOK_DIGIT0: usize = 3; // 10 tokens
pub const TOK_COLOR0: usize = 13; // 8 tokens
pub const TOK_SHAPE0: usize = 21; // 3 tokens
pub const TOK_SIZE0: usize = 24; // 5 tokens
pub const TOK_CELL0: usize = 29; // 16 tokens
pub const TOK_TASK_COUNT: usize = 45;
pub const TOK_TASK_ATTR: usize = 46;
pub const TOK_TASK_REL: usize = 47;
pub const TOK_REL_LEFT: usize = 48;
pub const TOK_REL_RIGHT: usize = 49;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: usize,
    pub shape: usize,
    pub size: usize,
    pub cell: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub grid_side: usize,
}

impl Scene {
    pub fn n_cells(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn object_at(&self, cell: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    /// Empty cells in row-major order.
    pub fn empty_cells(&self) -> Vec<usize> {
        (0..self.n_cells())
            .filter(|c| self.object_at(*c).is_none())
            .collect()
    }

    /// Deterministic sink-eligible cells: the first empty cells (row-major)
    /// become encoder-side sink carriers, the next ones decoder-side.
    pub fn sink_cells(&self) -> (Vec<usize>, Vec<usize>) {
        let empty = self.empty_cells();
        assert!(
            empty.len() >= NUM_VSINK_CELLS + NUM_LSINK_CELLS,
            "scene must keep enough empty cells for sink carriers"
        );
        let v = empty[..NUM_VSINK_CELLS].to_vec();
        let l = empty[NUM_VSINK_CELLS..NUM_VSINK_CELLS + NUM_LSINK_CELLS].to_vec();
        (v, l)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.n_cells()];
        for o in &self.objects {
            if o.cell >= self.n_cells() {
                return Err(Error::Invariant(format!("object cell {} out of grid", o.cell)));
            }
            if seen[o.cell] {
                return Err(Error::Invariant(format!("two objects in cell {}", o.cell)));
            }
            seen[o.cell] = true;
            if o.color >= NUM_COLORS || o.shape >= NUM_SHAPES || o.size >= NUM_SIZES {
                return Err(Error::Invariant("attribute id out of range".into()));
            }
        }
        Ok(())
    }
}

/// Scene-level labels for the linear-probe study. Count and size are
/// multi-class; color and shape are multi-label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeLabels {
    pub count: usize,
    /// Size bin of the largest single object; undefined for empty scenes.
    pub size: Option<usize>,
    pub color: Vec<bool>,
    pub shape: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    GlobalCount,
    LocalAttribute,
    Relation,
}

impl TaskTag {
    pub const ALL: [TaskTag; 3] = [TaskTag::GlobalCount, TaskTag::LocalAttribute, TaskTag::Relation];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskTag::GlobalCount => "global_count",
            TaskTag::LocalAttribute => "local_attribute",
            TaskTag::Relation => "relation",
        }
    }
}

impl std::str::FromStr for TaskTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global_count" => Ok(TaskTag::GlobalCount),
            "local_attribute" => Ok(TaskTag::LocalAttribute),
            "relation" => Ok(TaskTag::Relation),
            other => Err(Error::Config(format!("unknown task tag {other:?}"))),
        }
    }
}

/// One model input: a scene, its patch features, and a tokenized
/// question/answer pair. Answers are single tokens so accuracy is exact
/// next-token match.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub scene: Scene,
    pub patch_features: Tensor,
    /// `[BOS, SYS, arg1, arg2, task]`; visual tokens are spliced in after
    /// the system prefix by the backbone.
    pub prompt_tokens: Vec<usize>,
    pub answer_tokens: Vec<usize>,
    pub task_tag: TaskTag,
    pub labels: ProbeLabels,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid_side: usize,
    pub max_objects: usize,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { grid_side: 4, max_objects: 9, noise_sigma: 0.05 }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.grid_side * self.grid_side;
        if self.max_objects > n {
            return Err(Error::Config(format!(
                "max_objects {} exceeds {} cells",
                self.max_objects, n
            )));
        }
        if self.max_objects + NUM_VSINK_CELLS + NUM_LSINK_CELLS > n {
            return Err(Error::Config(
                "max_objects leaves no room for sink carrier cells".into(),
            ));
        }
        if self.max_objects >= NUM_COUNT_CLASSES {
            return Err(Error::Config(format!(
                "max_objects {} exceeds count label space {}",
                self.max_objects,
                NUM_COUNT_CLASSES - 1
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Uniform object count in `[0, max_objects]`, uniform attributes, distinct
/// cells. Deterministic under the rng stream.
pub fn generate_scene(rng: &mut Rng, grid_side: usize, max_objects: usize) -> Scene {
    let n = grid_side * grid_side;
    assert!(max_objects <= n, "max_objects must fit in the grid");
    let count = rng.below(max_objects + 1);
    let cells = rng.sample_distinct(n, count);
    let objects = cells
        .into_iter()
        .map(|cell| SceneObject {
            color: rng.below(NUM_COLORS),
            shape: rng.below(NUM_SHAPES),
            size: rng.below(NUM_SIZES),
            cell,
        })
        .collect();
    Scene { objects, grid_side }
}

/// Derive probe labels from a scene. Size is the bin of the object with the
/// largest size id and is flagged undefined (not silently 0) on empty scenes.
pub fn labels_of(scene: &Scene) -> ProbeLabels {
    let mut color = vec![false; NUM_COLORS];
    let mut shape = vec![false; NUM_SHAPES];
    let mut size: Option<usize> = None;
    for o in &scene.objects {
        color[o.color] = true;
        shape[o.shape] = true;
        size = Some(size.map_or(o.size, |s: usize| s.max(o.size)));
    }
    ProbeLabels { count: scene.objects.len(), size, color, shape }
}

/// Codebook of patch attribute codes: row 0 is background (all-zero), then
/// one row per (color, shape, size) combination with three one-hot blocks.
/// Rows are full `D_v` vectors; channels outside the attribute block are 0.
pub fn make_codebook() -> Tensor {
    let rows = 1 + NUM_COLORS * NUM_SHAPES * NUM_SIZES;
    let mut cb = Tensor::zeros(vec![rows, D_V]);
    for color in 0..NUM_COLORS {
        for shape in 0..NUM_SHAPES {
            for size in 0..NUM_SIZES {
                let r = codebook_row(color, shape, size);
                let row = cb.row_mut(r);
                row[CH_COLOR + color] = 1.0;
                row[CH_SHAPE + shape] = 1.0;
                row[CH_SIZE + size] = 1.0;
            }
        }
    }
    cb
}

pub fn codebook_row(color: usize, shape: usize, size: usize) -> usize {
    1 + (color * NUM_SHAPES + shape) * NUM_SIZES + size
}

/// Encode a scene as an `n x D_v` patch grid: each cell gets its codebook
/// row plus Gaussian noise on the attribute channels; sink-eligible empty
/// cells get flag channels and the global count one-hot (the planted global
/// summary that the backbone turns into sink tokens).
pub fn encode_patches(scene: &Scene, codebook: &Tensor, rng: &mut Rng, noise_sigma: f64) -> Tensor {
    let n = scene.n_cells();
    let mut patches = Tensor::zeros(vec![n, D_V]);
    let (vsink, lsink) = scene.sink_cells();
    let count = scene.objects.len().min(NUM_COUNT_CLASSES - 1);
    for cell in 0..n {
        let row_id = match scene.object_at(cell) {
            Some(o) => codebook_row(o.color, o.shape, o.size),
            None => 0,
        };
        let dst = patches.row_mut(cell);
        dst.copy_from_slice(codebook.row(row_id));
        for ch in dst.iter_mut().take(ATTR_CHANNELS) {
            *ch += noise_sigma * rng.normal();
        }
        if vsink.contains(&cell) {
            dst[CH_FLAG_V] = 1.0;
        }
        if lsink.contains(&cell) {
            dst[CH_FLAG_L] = 1.0;
        }
        // the global count summary rides exclusively on the encoder-sink
        // cells, so suppressing their keys removes the aggregated global
        // signal without touching per-cell content
        if vsink.contains(&cell) {
            dst[CH_COUNT + count] = 1.0;
        }
    }
    patches
}

/// Token for an answer digit.
pub fn digit_token(d: usize) -> usize {
    assert!(d < 10);
    TOK_DIGIT0 + d
}

pub fn color_token(c: usize) -> usize {
    assert!(c < NUM_COLORS);
    TOK_COLOR0 + c
}

pub fn cell_token(cell: usize) -> usize {
    assert!(cell < 16);
    TOK_CELL0 + cell
}

fn column_of(cell: usize, grid_side: usize) -> usize {
    cell % grid_side
}

/// Whether a scene can host the task at all (query regeneration happens
/// inside `make_example`; scene regeneration is the caller's job).
pub fn scene_supports(scene: &Scene, task: TaskTag) -> bool {
    match task {
        TaskTag::GlobalCount => true,
        TaskTag::LocalAttribute => !scene.objects.is_empty(),
        TaskTag::Relation => {
            let cols: Vec<usize> = scene
                .objects
                .iter()
                .map(|o| column_of(o.cell, scene.grid_side))
                .collect();
            cols.iter().any(|&a| cols.iter().any(|&b| a != b))
        }
    }
}

/// Build a tokenized example for one task. The prompt is
/// `[BOS, SYS, task-token, arg1, arg2]` with the task token right after the
/// system prefix and the most information-bearing argument last, so the
/// final prompt position (where the answer is predicted) natively carries
/// the query; answers are one token.
///
/// - global_count: args unused; answer = digit token of the object count.
/// - local_attribute: arg2 = occupied-cell token (final position); answer =
///   that object's color token. An empty queried cell is regenerated,
///   never emitted.
/// - relation: args = two occupied cells in distinct columns; answer =
///   left/right token for the first object relative to the second.
pub fn make_example(scene: &Scene, codebook: &Tensor, task: TaskTag, rng: &mut Rng, noise_sigma: f64) -> Result<Example> {
    scene.validate()?;
    if !scene_supports(scene, task) {
        return Err(Error::Invariant(format!(
            "scene cannot host task {}",
            task.as_str()
        )));
    }
    let (arg1, arg2, answer) = match task {
        TaskTag::GlobalCount => (TOK_PAD, TOK_PAD, digit_token(scene.objects.len())),
        TaskTag::LocalAttribute => {
            // resample until the queried cell has an object
            let cell = loop {
                let c = rng.below(scene.n_cells());
                if scene.object_at(c).is_some() {
                    break c;
                }
            };
            let obj = scene.object_at(cell).expect("queried cell is occupied");
            (TOK_PAD, cell_token(cell), color_token(obj.color))
        }
        TaskTag::Relation => {
            // resample until the two queried objects sit in distinct columns
            let (a, b) = loop {
                let i = rng.below(scene.objects.len());
                let j = rng.below(scene.objects.len());
                let (ca, cb) = (
                    column_of(scene.objects[i].cell, scene.grid_side),
                    column_of(scene.objects[j].cell, scene.grid_side),
                );
                if ca != cb {
                    break (&scene.objects[i], &scene.objects[j]);
                }
            };
            let answer = if column_of(a.cell, scene.grid_side) < column_of(b.cell, scene.grid_side)
            {
                TOK_REL_LEFT
            } else {
                TOK_REL_RIGHT
            };
            (cell_token(a.cell), cell_token(b.cell), answer)
        }
    };
    let task_token = match task {
        TaskTag::GlobalCount => TOK_TASK_COUNT,
        TaskTag::LocalAttribute => TOK_TASK_ATTR,
        TaskTag::Relation => TOK_TASK_REL,
    };
    let patch_features = encode_patches(scene, codebook, rng, noise_sigma);
    Ok(Example {
        labels: labels_of(scene),
        scene: scene.clone(),
        patch_features,
        prompt_tokens: vec![TOK_BOS, TOK_SYS, task_token, arg1, arg2],
        answer_tokens: vec![answer],
        task_tag: task,
    })
}

/// Recompute the answer from the scene by the task rule; used as the
/// ground-truth oracle for every generated example.
pub fn answer_by_rule(example: &Example) -> Result<usize> {
    let scene = &example.scene;
    match example.task_tag {
        TaskTag::GlobalCount => Ok(digit_token(scene.objects.len())),
        TaskTag::LocalAttribute => {
            let cell = example.prompt_tokens[4] - TOK_CELL0;
            let obj = scene
                .object_at(cell)
                .ok_or_else(|| Error::Invariant("queried cell is empty".into()))?;
            Ok(color_token(obj.color))
        }
        TaskTag::Relation => {
            let ca = column_of(example.prompt_tokens[3] - TOK_CELL0, scene.grid_side);
            let cb = column_of(example.prompt_tokens[4] - TOK_CELL0, scene.grid_side);
            if ca == cb {
                return Err(Error::Invariant("relation query has equal columns".into()));
            }
            Ok(if ca < cb { TOK_REL_LEFT } else { TOK_REL_RIGHT })
        }
    }
}

/// Generate `n` examples with an equal task mix (counts differ by at most
/// one across tags). Each example derives its own rng sub-stream, so the
/// manifest is a pure function of `(seed, config, n)`.
pub fn generate_dataset(seed: u64, config: &SceneConfig, n: usize) -> Result<Vec<Example>> {
    config.validate()?;
    let codebook = make_codebook();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let task = TaskTag::ALL[i % TaskTag::ALL.len()];
        let mut rng = Rng::from_parts(seed, "example", i as u64);
        // redraw scenes that cannot host the task (e.g. empty scene for a
        // local question)
        let scene = loop {
            let s = generate_scene(&mut rng, config.grid_side, config.max_objects);
            if scene_supports(&s, task) {
                break s;
            }
        };
        out.push(make_example(&scene, &codebook, task, &mut rng, config.noise_sigma)?);
    }
    Ok(out)
}

/// One manifest line of the on-disk dataset.
#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    scene: Scene,
    prompt_tokens: Vec<usize>,
    answer_tokens: Vec<usize>,
    task_tag: TaskTag,
    labels: ProbeLabels,
    patch_file: String,
}

/// Write a dataset as a JSON-lines manifest plus SGT1 patch sidecars.
pub fn write_dataset(dir: &Path, examples: &[Example], prec: Precision) -> Result<PathBuf> {
    let patch_dir = dir.join("patches");
    fs::create_dir_all(&patch_dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = std::io::BufWriter::new(fs::File::create(&manifest_path)?);
    for (i, ex) in examples.iter().enumerate() {
        let rel = format!("patches/ex{i:06}.sgt1");
        sgt1::write_tensor(&dir.join(&rel), &ex.patch_features, prec)?;
        let line = ManifestLine {
            scene: ex.scene.clone(),
            prompt_tokens: ex.prompt_tokens.clone(),
            answer_tokens: ex.answer_tokens.clone(),
            task_tag: ex.task_tag,
            labels: ex.labels.clone(),
            patch_file: rel,
        };
        serde_json::to_writer(&mut manifest, &line)?;
        manifest.write_all(b"\n")?;
    }
    Ok(manifest_path)
}

/// Load a dataset written by `write_dataset`.
pub fn read_dataset(manifest_path: &Path) -> Result<Vec<Example>> {
    let dir = manifest_path
        .parent()
        .ok_or_else(|| Error::Config("manifest path has no parent".into()))?;
    let reader = BufReader::new(fs::File::open(manifest_path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line)?;
        let patch_features = sgt1::read_tensor(&dir.join(&m.patch_file))?;
        out.push(Example {
            scene: m.scene,
            patch_features,
            prompt_tokens: m.prompt_tokens,
            answer_tokens: m.answer_tokens,
            task_tag: m.task_tag,
            labels: m.labels,
        });
    }
    Ok(out)
}
