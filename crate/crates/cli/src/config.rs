//! Resolved pipeline configuration: one TOML file (or defaults) plus flag
//! overrides. The resolved config's hash is stamped into every report for
//! provenance.

use addrgraph::model::{ModelConfig, TaskWeights};
use addrgraph::synth::{LatLonBox, WorldConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub sample: SampleSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            world: default_world(),
            sample: SampleSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn default_world() -> WorldConfig {
    WorldConfig {
        seed: 42,
        n_provinces: 2,
        cities_per_province: 2,
        districts_per_city: 2,
        towns_per_district: 2,
        roads_per_town: 2,
        pois_per_aoi: (2, 5),
        n_aois: 24,
        alias_fraction: 0.1,
        n_couriers: 10,
        deliveries_per_courier: 40,
        bbox: LatLonBox {
            lat_min: 30.0,
            lat_max: 30.2,
            lon_min: 120.0,
            lon_max: 120.2,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSection {
    pub k: usize,
    pub p: f64,
    pub n_samples: usize,
    pub shard_size: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            k: 6,
            p: 0.8,
            n_samples: 200,
            shard_size: 1000,
        }
    }
}

/// Network dimensions; vocabulary and hierarchy widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads_text: usize,
    pub n_heads_graph: usize,
    pub n_layers_text: usize,
    pub n_layers_graph: usize,
    pub n_layers_pre: usize,
    pub max_seq_len: usize,
    pub max_degree: usize,
    pub max_nodes: usize,
    pub max_dist: usize,
    pub ffn_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 32,
            n_heads_text: 4,
            n_heads_graph: 4,
            n_layers_text: 2,
            n_layers_graph: 2,
            n_layers_pre: 1,
            max_seq_len: 64,
            max_degree: 32,
            max_nodes: 16,
            max_dist: 15,
            ffn_hidden: 128,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(
        &self,
        vocab_size: usize,
        htc_level_sizes: Vec<usize>,
        geo_chars: usize,
    ) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads_text: self.n_heads_text,
            n_heads_graph: self.n_heads_graph,
            n_layers_text: self.n_layers_text,
            n_layers_graph: self.n_layers_graph,
            n_layers_pre: self.n_layers_pre,
            max_seq_len: self.max_seq_len,
            vocab_size,
            max_degree: self.max_degree,
            max_nodes: self.max_nodes,
            max_dist: self.max_dist,
            ffn_hidden: self.ffn_hidden,
            entity_labels: addrgraph::address::EntityLabel::COUNT,
            geo_chars,
            geo_alphabet: 3,
            htc_level_sizes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub log_every: usize,
    pub weights: TaskWeights,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 1000,
            lr: 2e-3,
            log_every: 50,
            weights: TaskWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    pub steps: usize,
    pub lr: f64,
    /// Grid level of the downstream geocoding labels.
    pub level: u8,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            steps: 500,
            lr: 1e-3,
            level: 22,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub n_km: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n_km: vec![1.0] }
    }
}

impl PipelineConfig {
    /// Load from TOML, or defaults when no file is given; then apply the
    /// seed override (which also reseeds the world).
    pub fn resolve(
        path: Option<&std::path::Path>,
        seed_override: Option<u64>,
    ) -> Result<PipelineConfig, String> {
        let mut config = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
                toml::from_str(&text)
                    .map_err(|e| format!("cannot parse config {}: {e}", path.display()))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(seed) = seed_override {
            config.seed = seed;
            config.world.seed = seed;
        }
        Ok(config)
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// SHA-256 of a file's bytes, or "missing" when it does not exist.
pub fn file_digest(path: &std::path::Path) -> String {
    match std::fs::read(path) {
        Ok(bytes) => hex_digest(&bytes),
        Err(_) => "missing".to_string(),
    }
}
