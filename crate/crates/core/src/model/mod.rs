//! The address-graph network: a text encoder feeding a graph encoder whose
//! self-attention is biased by node-distance and route-type encodings, a
//! realignment encoder that redistributes graph context back over the token
//! sequence, and four classification heads (masked tokens, grid-cell
//! characters, hierarchical regions, entity labels).
//!
//! Everything is 64-bit and tape-differentiated; `train::gradient_check`
//! verifies every parameter tensor against central finite differences.

mod net;
mod train;

pub use net::{
    decode_htc, encode_text, graph_encode, heads, htc_mask_row, node_repr, realign, HeadLogits,
    TextEncoding, NEG_MASK,
};
pub use train::{
    adam_step, argmax_row, backward, evaluate_corpus, forward, gradient_check, pretrain,
    train_step, AdamState, Batch, CorpusEval, ForwardResult, GradCheckReport, Gradients,
    LossBreakdown, NodeBatch, TrainConfig,
};

use crate::address::{AdminTree, ADMIN_LEVELS};
use crate::io::{push_f64s, read_bytes, read_f64s, write_bytes, IoError};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("numerical error: non-finite value in {tensor}")]
    NumericalError { tensor: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Network dimensions. The same code runs the desk-scale default and
/// paper-scale settings; only the numbers change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads_text: usize,
    pub n_heads_graph: usize,
    pub n_layers_text: usize,
    pub n_layers_graph: usize,
    pub n_layers_pre: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Degrees are clamped to this value before the embedding lookup.
    pub max_degree: usize,
    pub max_nodes: usize,
    /// Largest representable hop distance; the unreachable sentinel gets its
    /// own embedding row one past this.
    pub max_dist: usize,
    pub ffn_hidden: usize,
    pub entity_labels: usize,
    pub geo_chars: usize,
    pub geo_alphabet: usize,
    /// Classifier widths per administrative level.
    pub htc_level_sizes: Vec<usize>,
}

impl ModelConfig {
    /// Desk-scale defaults: d=32, 4 heads, 2+2+1 layers.
    pub fn desk(vocab_size: usize, htc_level_sizes: Vec<usize>) -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_heads_text: 4,
            n_heads_graph: 4,
            n_layers_text: 2,
            n_layers_graph: 2,
            n_layers_pre: 1,
            max_seq_len: 64,
            vocab_size,
            max_degree: 32,
            max_nodes: 16,
            max_dist: 15,
            ffn_hidden: 128,
            entity_labels: crate::address::EntityLabel::COUNT,
            geo_chars: 27,
            geo_alphabet: 3,
            htc_level_sizes,
        }
    }

    /// Tiny configuration for gradient checking: d=8, 2 heads.
    pub fn tiny(vocab_size: usize, htc_level_sizes: Vec<usize>) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads_text: 2,
            n_heads_graph: 2,
            n_layers_text: 1,
            n_layers_graph: 2,
            n_layers_pre: 1,
            max_seq_len: 16,
            vocab_size,
            max_degree: 8,
            max_nodes: 8,
            max_dist: 7,
            ffn_hidden: 16,
            entity_labels: crate::address::EntityLabel::COUNT,
            geo_chars: 27,
            geo_alphabet: 3,
            htc_level_sizes,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, heads) in [("n_heads_text", self.n_heads_text), ("n_heads_graph", self.n_heads_graph)] {
            if heads == 0 || self.d_model % heads != 0 {
                return Err(ModelError::DomainError(format!(
                    "d_model {} not divisible by {name} {heads}",
                    self.d_model
                )));
            }
        }
        if self.htc_level_sizes.len() != ADMIN_LEVELS {
            return Err(ModelError::DomainError(format!(
                "htc_level_sizes has {} levels, expected {ADMIN_LEVELS}",
                self.htc_level_sizes.len()
            )));
        }
        Ok(())
    }

    /// Every parameter tensor's name and shape; the single source of truth
    /// for initialization and checkpoint validation.
    pub fn tensor_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let d = self.d_model;
        let mut shapes = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            shapes.insert(name, shape);
        };
        put("token_table".into(), vec![self.vocab_size, d]);
        put("token_pos_table".into(), vec![self.max_seq_len, d]);
        put("degree_table".into(), vec![self.max_degree + 1, d]);
        put("position_table".into(), vec![self.max_nodes + 1, d]);
        put("dist_table".into(), vec![self.max_dist + 2, self.n_heads_graph]);
        put("route_table".into(), vec![8, self.n_heads_graph]);
        let stacks = [
            ("text", self.n_layers_text),
            ("graph", self.n_layers_graph),
            ("pre", self.n_layers_pre),
        ];
        for (stack, layers) in stacks {
            for l in 0..layers {
                let p = format!("{stack}.{l}");
                put(format!("{p}.ln1.gain"), vec![1, d]);
                put(format!("{p}.ln1.bias"), vec![1, d]);
                put(format!("{p}.wq"), vec![d, d]);
                put(format!("{p}.wk"), vec![d, d]);
                put(format!("{p}.wv"), vec![d, d]);
                put(format!("{p}.ln2.gain"), vec![1, d]);
                put(format!("{p}.ln2.bias"), vec![1, d]);
                put(format!("{p}.fc1.w"), vec![d, self.ffn_hidden]);
                put(format!("{p}.fc1.b"), vec![self.ffn_hidden]);
                put(format!("{p}.fc2.w"), vec![self.ffn_hidden, d]);
                put(format!("{p}.fc2.b"), vec![d]);
            }
        }
        put("head.mlm.w".into(), vec![d, self.vocab_size]);
        put("head.mlm.b".into(), vec![self.vocab_size]);
        put(
            "head.geo.w".into(),
            vec![d, self.geo_chars * self.geo_alphabet],
        );
        put("head.geo.b".into(), vec![self.geo_chars * self.geo_alphabet]);
        for (l, &size) in self.htc_level_sizes.iter().enumerate() {
            put(format!("head.htc.{l}.w"), vec![d, size]);
            put(format!("head.htc.{l}.b"), vec![size]);
        }
        put("head.aet.w".into(), vec![d, self.entity_labels]);
        put("head.aet.b".into(), vec![self.entity_labels]);
        shapes
    }
}

/// All learnable weights, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Initialize: Xavier-uniform matrices, small uniform embedding tables,
    /// unit layer-norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.tensor_shapes() {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("ln1.gain") || name.ends_with("ln2.gain") {
                vec![1.0; numel]
            } else if name.ends_with(".bias") || name.ends_with(".b") {
                vec![0.0; numel]
            } else if name.ends_with("_table") {
                let a = if name == "dist_table" || name == "route_table" {
                    0.02
                } else {
                    0.05
                };
                (0..numel).map(|_| rng.gen_range(-a..a)).collect()
            } else {
                let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel).map(|_| rng.gen_range(-a..a)).collect()
            };
            tensors.insert(name, Tensor::from_vec(&shape, data));
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Write a checkpoint: `manifest.json` plus one flat little-endian f64
    /// file per tensor under `tensors/`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        let mut entries = Vec::new();
        for (name, tensor) in &self.tensors {
            let file = format!("tensors/{name}.bin");
            let mut bytes = Vec::with_capacity(tensor.len() * 8);
            push_f64s(&mut bytes, &tensor.data);
            write_bytes(&dir.join(&file), &bytes)?;
            entries.push(ManifestTensor {
                name: name.clone(),
                shape: tensor.shape.clone(),
                file,
            });
        }
        let manifest = Manifest {
            config: self.config.clone(),
            tensors: entries,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| IoError::format(&path, 0, e.to_string()))?;
        write_bytes(&path, text.as_bytes())?;
        Ok(())
    }

    /// Load and validate a checkpoint: every tensor present with exactly the
    /// shape the config dictates.
    pub fn load(dir: &Path) -> Result<ModelParams, ModelError> {
        let path = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_slice(&read_bytes(&path)?)
            .map_err(|e| IoError::format(&path, 0, e.to_string()))?;
        manifest.config.validate()?;
        let expected = manifest.config.tensor_shapes();
        if manifest.tensors.len() != expected.len() {
            return Err(ModelError::Checkpoint(format!(
                "manifest lists {} tensors, config requires {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        let mut tensors = BTreeMap::new();
        for entry in &manifest.tensors {
            let want = expected.get(&entry.name).ok_or_else(|| {
                ModelError::Checkpoint(format!("unexpected tensor {}", entry.name))
            })?;
            if want != &entry.shape {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} has shape {:?}, config requires {:?}",
                    entry.name, entry.shape, want
                )));
            }
            let data = read_f64s(&read_bytes(&dir.join(&entry.file))?);
            if data.len() != entry.shape.iter().product::<usize>() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor file {} holds {} values, shape {:?} requires {}",
                    entry.file,
                    data.len(),
                    entry.shape,
                    entry.shape.iter().product::<usize>()
                )));
            }
            tensors.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data));
        }
        Ok(ModelParams {
            config: manifest.config,
            tensors,
        })
    }
}

/// Clone a trained model with a fresh grid head of a different width
/// (e.g. 33 characters for deeper-grid fine-tuning). Every other tensor is
/// copied; the new head is randomly initialized.
pub fn with_geo_head(
    params: &ModelParams,
    geo_chars: usize,
    seed: u64,
) -> Result<ModelParams, ModelError> {
    let mut config = params.config.clone();
    config.geo_chars = geo_chars;
    let mut fresh = ModelParams::init(config, seed)?;
    let names: Vec<String> = fresh.names().cloned().collect();
    for name in names {
        if !name.starts_with("head.geo.") {
            *fresh.get_mut(&name) = params.get(&name).clone();
        }
    }
    Ok(fresh)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<ManifestTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
    file: String,
}

/// Per-task loss weights; the total is the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub mlm: f64,
    pub geo: f64,
    pub htc: f64,
    pub aet: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights {
            mlm: 1.0,
            geo: 1.0,
            htc: 1.0,
            aet: 1.0,
        }
    }
}

/// The hierarchical classification space: per-level class indices and the
/// child sets used to constrain level l+1 to descendants of level l.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HtcSpace {
    pub level_sizes: Vec<usize>,
    /// `children[l][class]` = child class indices at level l+1.
    pub children: Vec<Vec<Vec<usize>>>,
    /// `region_ids[l][class]` = region id, for decoding back to names.
    pub region_ids: Vec<Vec<String>>,
    #[serde(skip)]
    index: BTreeMap<String, (usize, usize)>,
}

impl HtcSpace {
    pub fn from_tree(tree: &AdminTree) -> HtcSpace {
        let mut level_sizes = Vec::with_capacity(ADMIN_LEVELS);
        let mut region_ids = Vec::with_capacity(ADMIN_LEVELS);
        let mut index = BTreeMap::new();
        for level in 1..=ADMIN_LEVELS as u8 {
            let ids: Vec<String> = tree.level_regions(level).to_vec();
            for (class, id) in ids.iter().enumerate() {
                index.insert(id.clone(), (level as usize - 1, class));
            }
            level_sizes.push(ids.len());
            region_ids.push(ids);
        }
        let mut children = vec![Vec::new(); ADMIN_LEVELS];
        for (l, sizes) in level_sizes.iter().enumerate().take(ADMIN_LEVELS - 1) {
            children[l] = vec![Vec::new(); *sizes];
            for (class, id) in region_ids[l].iter().enumerate() {
                for child in tree.children(id) {
                    let (cl, cc) = index[child];
                    debug_assert_eq!(cl, l + 1);
                    children[l][class].push(cc);
                }
            }
        }
        HtcSpace {
            level_sizes,
            children,
            region_ids,
            index,
        }
    }

    /// (level, class) of a region id; level is 0-based.
    pub fn class_of(&self, region_id: &str) -> Option<(usize, usize)> {
        self.index.get(region_id).copied()
    }

    /// Region-id path to per-level class indices.
    pub fn path_to_classes(&self, path: &[String]) -> Option<Vec<usize>> {
        path.iter()
            .enumerate()
            .map(|(l, id)| match self.class_of(id) {
                Some((level, class)) if level == l => Some(class),
                _ => None,
            })
            .collect()
    }
}
