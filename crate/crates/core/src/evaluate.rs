//! Downstream evaluation harness: geocoding accuracy at a distance
//! threshold, masked-region prediction through the hierarchy head, entity
//! tokenization scored per entity, and embedding cluster quality.

use crate::address::{AdminTree, EntityLabel, NormalizedAddress, ADMIN_LEVELS};
use crate::features::SampleFeatures;
use crate::geocode::{cell_center, decode_2lt3c, haversine_km, label_len, GeoError, LabelChars};
use crate::model::{
    decode_htc, forward, Batch, HtcSpace, ModelError, ModelParams, NodeBatch, TaskWeights,
};
use crate::pretask::{tokenize, Vocab, MASK};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("need at least two clusters")]
    NeedTwoClusters,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

// ---------------------------------------------------------------------------
// geocoding
// ---------------------------------------------------------------------------

/// Accuracy at each distance threshold plus the mean error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeoEvalResult {
    /// (N km, fraction of predictions within N km), ascending in N.
    pub acc_at_km: Vec<(f64, f64)>,
    pub mean_km_error: f64,
    pub n_examples: usize,
}

/// Score predicted cell labels against ground-truth coordinates: decode each
/// label to its cell center and measure the great-circle distance.
pub fn eval_geocoding_labels(
    predictions: &[(LabelChars, u8)],
    truth: &[(f64, f64)],
    n_kms: &[f64],
) -> Result<GeoEvalResult, EvalError> {
    if predictions.is_empty() || predictions.len() != truth.len() {
        return Err(EvalError::EmptyEvalSet);
    }
    let mut errors = Vec::with_capacity(predictions.len());
    for ((label, face), &target) in predictions.iter().zip(truth) {
        let cell = decode_2lt3c(label, *face)?;
        errors.push(haversine_km(cell_center(&cell), target));
    }
    let mut n_kms: Vec<f64> = n_kms.to_vec();
    n_kms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let acc_at_km = n_kms
        .iter()
        .map(|&n| {
            let hits = errors.iter().filter(|&&e| e < n).count();
            (n, hits as f64 / errors.len() as f64)
        })
        .collect();
    Ok(GeoEvalResult {
        acc_at_km,
        mean_km_error: errors.iter().sum::<f64>() / errors.len() as f64,
        n_examples: errors.len(),
    })
}

/// One downstream geocoding example: an address's tokens, its graph degree
/// (zero when the address is off-graph), target label classes, and truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeoExample {
    pub tokens: Vec<u32>,
    pub degree: u32,
    pub label_classes: Vec<usize>,
    pub face: u8,
    pub lat: f64,
    pub lon: f64,
}

/// Features of a single isolated node (downstream tasks score one address
/// at a time).
pub fn single_node_features(degree: u32) -> SampleFeatures {
    SampleFeatures {
        n: 1,
        degrees: vec![degree],
        positions: vec![1],
        dist: vec![0],
        route_types: vec![],
    }
}

fn geo_batch(example: &GeoExample, geo_chars: usize) -> Batch {
    Batch {
        features: single_node_features(example.degree),
        nodes: vec![NodeBatch {
            input_tokens: example.tokens.clone(),
            mlm_targets: vec![None; example.tokens.len()],
            geo_targets: (example.label_classes.len() == geo_chars)
                .then(|| example.label_classes.clone()),
            htc_classes: Vec::new(),
            aet_targets: vec![None; example.tokens.len()],
        }],
    }
}

/// Predict each example's cell label with the geo head (argmax per
/// character) and score against ground truth.
pub fn eval_geocoding_model(
    params: &ModelParams,
    space: &HtcSpace,
    examples: &[GeoExample],
    level: u8,
    n_kms: &[f64],
) -> Result<GeoEvalResult, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let chars = label_len(level);
    if params.config.geo_chars != chars {
        return Err(EvalError::Model(ModelError::DomainError(format!(
            "geo head has {} characters, level {level} needs {chars}",
            params.config.geo_chars
        ))));
    }
    let mut predictions = Vec::with_capacity(examples.len());
    let mut truth = Vec::with_capacity(examples.len());
    for example in examples {
        let batch = geo_batch(example, params.config.geo_chars);
        let out = forward(params, space, &batch, &TaskWeights::default())?;
        let logits = &out.logits.geo[0];
        let chars: Vec<u8> = (0..params.config.geo_chars)
            .map(|c| crate::model::argmax_row(logits, c) as u8)
            .collect();
        predictions.push((LabelChars { level, chars }, example.face));
        truth.push((example.lat, example.lon));
    }
    eval_geocoding_labels(&predictions, &truth, n_kms)
}

// ---------------------------------------------------------------------------
// address entity prediction (masked region through the hierarchy head)
// ---------------------------------------------------------------------------

/// An address with one administrative region hidden from the input.
#[derive(Debug, Clone)]
pub struct MaskedAddress {
    pub addr: NormalizedAddress,
    /// 1-based administrative level that was masked.
    pub masked_level: u8,
    /// Token sequence with the masked region's tokens replaced by `[MASK]`.
    pub tokens: Vec<u32>,
}

/// Anything that can fill in a masked administrative region.
pub trait AepPredictor {
    /// Predicted region id at `masked.masked_level`.
    fn predict_region(&self, masked: &MaskedAddress) -> Option<String>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AepResult {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

/// Mask one random non-empty admin region per address and ask the predictor
/// to restore it. Accuracy is exact region-id match.
pub fn eval_aep(
    predictor: &dyn AepPredictor,
    addresses: &[NormalizedAddress],
    tree: &AdminTree,
    vocab: &Vocab,
    max_seq_len: usize,
    seed: u64,
) -> Result<AepResult, EvalError> {
    if addresses.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    let mut total = 0usize;
    for addr in addresses {
        let candidates: Vec<u8> = (1..=ADMIN_LEVELS as u8)
            .filter(|&l| !addr.admin_field(l).is_empty())
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let masked_level = candidates[rng.gen_range(0..candidates.len())];
        let gold = tree
            .region_by_name(addr.admin_field(masked_level))
            .map(|r| r.region_id.clone());
        let tokenized = tokenize(addr, vocab, max_seq_len);
        let mut tokens = tokenized.tokens.clone();
        let label = match masked_level {
            1 => EntityLabel::Province,
            2 => EntityLabel::City,
            3 => EntityLabel::District,
            4 => EntityLabel::Town,
            _ => EntityLabel::Road,
        };
        if let Some(&(_, start, end)) = tokenized.spans.iter().find(|(l, _, _)| *l == label) {
            for t in tokens.iter_mut().take(end).skip(start) {
                *t = MASK;
            }
        }
        let masked = MaskedAddress {
            addr: addr.clone(),
            masked_level,
            tokens,
        };
        total += 1;
        if predictor.predict_region(&masked) == gold {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::EmptyEvalSet);
    }
    Ok(AepResult {
        accuracy: correct as f64 / total as f64,
        correct,
        total,
    })
}

/// The model as an AEP predictor: forward the masked address as a single
/// isolated node and read the constrained hierarchy decode at the masked
/// level.
pub struct ModelAepPredictor<'a> {
    pub params: &'a ModelParams,
    pub space: &'a HtcSpace,
}

impl AepPredictor for ModelAepPredictor<'_> {
    fn predict_region(&self, masked: &MaskedAddress) -> Option<String> {
        let batch = Batch {
            features: single_node_features(0),
            nodes: vec![NodeBatch {
                input_tokens: masked.tokens.clone(),
                mlm_targets: vec![None; masked.tokens.len()],
                geo_targets: None,
                htc_classes: Vec::new(),
                aet_targets: vec![None; masked.tokens.len()],
            }],
        };
        let out = forward(self.params, self.space, &batch, &TaskWeights::default()).ok()?;
        let depth = masked.masked_level as usize;
        let path = decode_htc(&out.logits.htc, 0, depth, self.space);
        let class = *path.last()?;
        Some(self.space.region_ids[depth - 1][class].clone())
    }
}

// ---------------------------------------------------------------------------
// address entity tokenization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AetResult {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

/// Score predicted per-token labels in units of entities: an entity counts
/// correct iff every token of its span carries the span's label.
pub fn eval_aet_predictions(
    predicted: &[Vec<usize>],
    spans: &[Vec<(EntityLabel, usize, usize)>],
) -> Result<AetResult, EvalError> {
    if predicted.is_empty() || predicted.len() != spans.len() {
        return Err(EvalError::EmptyEvalSet);
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (labels, spans) in predicted.iter().zip(spans) {
        for &(label, start, end) in spans {
            total += 1;
            if (start..end).all(|pos| labels[pos] == label.index()) {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(EvalError::EmptyEvalSet);
    }
    Ok(AetResult {
        accuracy: correct as f64 / total as f64,
        correct,
        total,
    })
}

/// Per-token argmax labels from the entity head for a batch of addresses.
pub fn predict_aet(
    params: &ModelParams,
    space: &HtcSpace,
    addresses: &[NormalizedAddress],
    vocab: &Vocab,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<(EntityLabel, usize, usize)>>), EvalError> {
    let mut predicted = Vec::with_capacity(addresses.len());
    let mut spans = Vec::with_capacity(addresses.len());
    for addr in addresses {
        let tokenized = tokenize(addr, vocab, params.config.max_seq_len);
        let batch = Batch {
            features: single_node_features(0),
            nodes: vec![NodeBatch {
                input_tokens: tokenized.tokens.clone(),
                mlm_targets: vec![None; tokenized.tokens.len()],
                geo_targets: None,
                htc_classes: Vec::new(),
                aet_targets: vec![None; tokenized.tokens.len()],
            }],
        };
        let out = forward(params, space, &batch, &TaskWeights::default())?;
        let logits = &out.logits.aet[0];
        let labels: Vec<usize> = (0..tokenized.tokens.len())
            .map(|pos| crate::model::argmax_row(logits, pos))
            .collect();
        predicted.push(labels);
        spans.push(tokenized.spans.clone());
    }
    Ok((predicted, spans))
}

// ---------------------------------------------------------------------------
// embedding cluster quality
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterResult {
    pub silhouette: f64,
    pub ch_index: f64,
    pub n_points: usize,
    pub n_clusters: usize,
}

/// Silhouette score and Calinski-Harabasz index under Euclidean distance.
pub fn cluster_metrics(embeddings: &Tensor, labels: &[usize]) -> Result<ClusterResult, EvalError> {
    let m = embeddings.nrows();
    if m == 0 || labels.len() != m {
        return Err(EvalError::EmptyEvalSet);
    }
    let d = embeddings.ncols();
    let mut clusters: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &label) in labels.iter().enumerate() {
        clusters.entry(label).or_default().push(i);
    }
    let k = clusters.len();
    if k < 2 {
        return Err(EvalError::NeedTwoClusters);
    }

    let dist = |a: usize, b: usize| -> f64 {
        let (ra, rb) = (&embeddings.data[a * d..(a + 1) * d], &embeddings.data[b * d..(b + 1) * d]);
        ra.iter()
            .zip(rb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };

    // silhouette: s(i) = (b - a) / max(a, b); singleton clusters score 0
    let mut total_s = 0.0;
    for i in 0..m {
        let own = &clusters[&labels[i]];
        if own.len() == 1 {
            continue; // s = 0
        }
        let a = own
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| dist(i, j))
            .sum::<f64>()
            / (own.len() - 1) as f64;
        let b = clusters
            .iter()
            .filter(|(&label, _)| label != labels[i])
            .map(|(_, members)| {
                members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total_s += (b - a) / denom;
        } else {
            total_s += 1.0; // identical points in and out is degenerate
        }
    }
    let silhouette = total_s / m as f64;

    // Calinski-Harabasz: between/within scatter ratio
    let mut global = vec![0.0; d];
    for i in 0..m {
        for j in 0..d {
            global[j] += embeddings.data[i * d + j];
        }
    }
    for g in &mut global {
        *g /= m as f64;
    }
    let mut between = 0.0;
    let mut within = 0.0;
    for members in clusters.values() {
        let mut centroid = vec![0.0; d];
        for &i in members {
            for j in 0..d {
                centroid[j] += embeddings.data[i * d + j];
            }
        }
        for c in &mut centroid {
            *c /= members.len() as f64;
        }
        between += members.len() as f64
            * centroid
                .iter()
                .zip(&global)
                .map(|(c, g)| (c - g) * (c - g))
                .sum::<f64>();
        for &i in members {
            within += centroid
                .iter()
                .enumerate()
                .map(|(j, c)| (embeddings.data[i * d + j] - c) * (embeddings.data[i * d + j] - c))
                .sum::<f64>();
        }
    }
    let ch_index = if within == 0.0 {
        f64::INFINITY
    } else {
        (between / (k - 1) as f64) / (within / (m - k) as f64)
    };

    Ok(ClusterResult {
        silhouette,
        ch_index,
        n_points: m,
        n_clusters: k,
    })
}

/// Text-encoder CLS embeddings for a list of addresses, one row each.
pub fn embed_addresses(
    params: &ModelParams,
    addresses: &[NormalizedAddress],
    vocab: &Vocab,
) -> Result<Tensor, EvalError> {
    if addresses.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let d = params.config.d_model;
    let mut data = Vec::with_capacity(addresses.len() * d);
    for addr in addresses {
        let tokenized = tokenize(addr, vocab, params.config.max_seq_len);
        let enc = crate::model::encode_text(params, &[tokenized.tokens])?;
        data.extend_from_slice(&enc.h_cls.data);
    }
    Ok(Tensor::from_vec(&[addresses.len(), d], data))
}
