//! Supervised targets for the three pretraining tasks: whole-word masking
//! over administrative regions, grid-cell label classification, and
//! hierarchical region-path classification. Entity labels for token
//! classification ride along since the synthetic corpus knows its gold
//! segmentation.
//!
//! Masking follows the region-unit scheme: each administrative field is one
//! maskable unit selected with probability 0.15; a selected unit is fully
//! masked with probability 0.8, swapped for a same-level region name with
//! probability 0.1, and left unchanged with probability 0.1. POI-name words
//! are selected and corrupted per token with the same probabilities.

use crate::address::{AdminTree, EntityLabel, NormalizedAddress, ADMIN_LEVELS};
use crate::geocode::{cell_from_latlon, encode_2lt3c, GeoError, LabelChars};
use crate::io::{read_bytes, write_bytes, IoError};
use crate::sampler::SampledSubgraph;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const MASK: u32 = 2;
pub const UNK: u32 = 3;

/// Grid level used for geocoding labels during pretraining.
pub const GEO_LEVEL: u8 = 18;

#[derive(Debug, Error)]
pub enum PretaskError {
    #[error(transparent)]
    Address(#[from] crate::address::AddressError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Token vocabulary: whitespace words plus single characters for fallback.
/// Ids 0..=3 are the special tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocab {
    pub const SPECIALS: [&'static str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];

    /// Build from a text corpus: every whitespace token, plus every single
    /// character seen (so unknown words can fall back to characters).
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>) -> Vocab {
        let mut words = BTreeSet::new();
        let mut chars = BTreeSet::new();
        for text in texts {
            for word in text.split_whitespace() {
                words.insert(word.to_string());
                for c in word.chars() {
                    chars.insert(c.to_string());
                }
            }
        }
        let mut tokens: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().cloned());
        tokens.extend(chars.into_iter().filter(|c| !words.contains(c)));
        let mut vocab = Vocab {
            tokens,
            index: BTreeMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Word to token ids: the word itself if known, otherwise its characters,
    /// otherwise `[UNK]`.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        if let Some(id) = self.id(word) {
            return vec![id];
        }
        word.chars()
            .map(|c| self.id(&c.to_string()).unwrap_or(UNK))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| IoError::format(path, 0, e.to_string()))?;
        write_bytes(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Vocab, IoError> {
        let mut vocab: Vocab = serde_json::from_slice(&read_bytes(path)?)
            .map_err(|e| IoError::format(path, 0, e.to_string()))?;
        vocab.rebuild_index();
        Ok(vocab)
    }
}

/// A tokenized address: `[CLS]` followed by the field tokens, with the token
/// range of every non-empty field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedNode {
    pub tokens: Vec<u32>,
    /// (label, start, end) token ranges, end exclusive; `[CLS]` is outside
    /// every span.
    pub spans: Vec<(EntityLabel, usize, usize)>,
    pub raw: NormalizedAddress,
}

impl TokenizedNode {
    /// Per-token entity labels: `Other` for `[CLS]` and anything outside a
    /// field span.
    pub fn token_labels(&self) -> Vec<EntityLabel> {
        let mut labels = vec![EntityLabel::Other; self.tokens.len()];
        for &(label, start, end) in &self.spans {
            for slot in labels.iter_mut().take(end).skip(start) {
                *slot = label;
            }
        }
        labels
    }
}

/// Tokenize a normalized address, truncating to `max_seq_len` tokens.
pub fn tokenize(addr: &NormalizedAddress, vocab: &Vocab, max_seq_len: usize) -> TokenizedNode {
    let mut tokens = vec![CLS];
    let mut spans = Vec::new();
    for (label, field) in addr.labeled_fields() {
        if field.is_empty() {
            continue;
        }
        let start = tokens.len();
        for word in field.split_whitespace() {
            tokens.extend(vocab.encode_word(word));
        }
        spans.push((label, start, tokens.len()));
    }
    if tokens.len() > max_seq_len {
        tokens.truncate(max_seq_len);
        spans.retain_mut(|(_, start, end)| {
            *end = (*end).min(max_seq_len);
            *start < *end
        });
    }
    TokenizedNode {
        tokens,
        spans,
        raw: addr.clone(),
    }
}

/// Inverse of [`tokenize`] up to `[UNK]`: joins word tokens with spaces,
/// skipping specials.
pub fn detokenize(tokens: &[u32], vocab: &Vocab) -> String {
    tokens
        .iter()
        .filter(|&&t| t as usize >= Vocab::SPECIALS.len())
        .map(|&t| vocab.token(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// What happened to a selected mask unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionAction {
    MaskAll,
    ReplaceSameLevel,
    Keep,
}

/// One masked-language-model example. Targets carry the original token id at
/// corrupted or kept-selected positions and `None` elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmExample {
    pub input_tokens: Vec<u32>,
    pub target_tokens: Vec<Option<u32>>,
    /// Actions for the units that were selected, in paradigm order.
    pub corruption_log: Vec<(EntityLabel, RegionAction)>,
}

/// Same-level replacement candidates, harvested from the world.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReplacementPools {
    /// Region names per administrative level (index 0 = provinces).
    pub per_level: Vec<Vec<String>>,
    pub road_numbers: Vec<String>,
    pub poi_words: Vec<String>,
}

impl ReplacementPools {
    pub fn from_world(tree: &AdminTree, pois: &crate::address::PoiTable) -> Self {
        let mut per_level = Vec::with_capacity(ADMIN_LEVELS);
        for level in 1..=ADMIN_LEVELS as u8 {
            per_level.push(
                tree.level_regions(level)
                    .iter()
                    .map(|id| tree.region(id).unwrap().name.clone())
                    .collect(),
            );
        }
        let mut road_numbers = BTreeSet::new();
        let mut poi_words = BTreeSet::new();
        for poi in pois.iter() {
            for addr in &poi.addresses {
                if !addr.road_number.is_empty() {
                    road_numbers.insert(addr.road_number.clone());
                }
            }
            for word in poi.name.split_whitespace() {
                poi_words.insert(word.to_string());
            }
        }
        ReplacementPools {
            per_level,
            road_numbers: road_numbers.into_iter().collect(),
            poi_words: poi_words.into_iter().collect(),
        }
    }

    fn pool_for(&self, label: EntityLabel) -> &[String] {
        match label {
            EntityLabel::Province => &self.per_level[0],
            EntityLabel::City => &self.per_level[1],
            EntityLabel::District => &self.per_level[2],
            EntityLabel::Town => &self.per_level[3],
            EntityLabel::Road => &self.per_level[4],
            EntityLabel::RoadNumber => &self.road_numbers,
            _ => &self.poi_words,
        }
    }
}

const SELECT_P: f64 = 0.15;
const MASK_P: f64 = 0.8;
const REPLACE_P: f64 = 0.1;

fn draw_action(rng: &mut ChaCha8Rng) -> RegionAction {
    let u = rng.gen_range(0.0f64..1.0);
    if u < MASK_P {
        RegionAction::MaskAll
    } else if u < MASK_P + REPLACE_P {
        RegionAction::ReplaceSameLevel
    } else {
        RegionAction::Keep
    }
}

/// Draw one MLM example. Administrative fields (including the road number)
/// are whole-word units; POI-name words are per-token units. A replacement
/// that does not tokenize to the unit's exact width is discarded, and an
/// empty candidate pool falls back to full masking.
pub fn make_mlm(
    t: &TokenizedNode,
    vocab: &Vocab,
    pools: &ReplacementPools,
    rng: &mut ChaCha8Rng,
) -> MlmExample {
    let mut input = t.tokens.clone();
    let mut targets: Vec<Option<u32>> = vec![None; t.tokens.len()];
    let mut log = Vec::new();

    let corrupt_unit = |label: EntityLabel,
                            start: usize,
                            end: usize,
                            original_text: &str,
                            input: &mut Vec<u32>,
                            targets: &mut Vec<Option<u32>>,
                            rng: &mut ChaCha8Rng| {
        if rng.gen_range(0.0f64..1.0) >= SELECT_P {
            return None;
        }
        let mut action = draw_action(rng);
        if action == RegionAction::ReplaceSameLevel {
            let width = end - start;
            let candidates: Vec<&String> = pools
                .pool_for(label)
                .iter()
                .filter(|name| name.as_str() != original_text)
                .filter(|name| {
                    let ids: Vec<u32> = name
                        .split_whitespace()
                        .flat_map(|w| vocab.encode_word(w))
                        .collect();
                    ids.len() == width
                })
                .collect();
            if candidates.is_empty() {
                action = RegionAction::MaskAll;
            } else {
                let pick = candidates[rng.gen_range(0..candidates.len())];
                let ids: Vec<u32> = pick
                    .split_whitespace()
                    .flat_map(|w| vocab.encode_word(w))
                    .collect();
                for (offset, id) in ids.into_iter().enumerate() {
                    targets[start + offset] = Some(input[start + offset]);
                    input[start + offset] = id;
                }
            }
        }
        match action {
            RegionAction::MaskAll => {
                for i in start..end {
                    targets[i] = Some(input[i]);
                    input[i] = MASK;
                }
            }
            RegionAction::Keep => {
                for i in start..end {
                    targets[i] = Some(input[i]);
                }
            }
            RegionAction::ReplaceSameLevel => {}
        }
        Some(action)
    };

    for &(label, start, end) in &t.spans {
        if label == EntityLabel::PoiName {
            // per-word units inside the POI name
            for i in start..end {
                let word = vocab.token(t.tokens[i]).to_string();
                if let Some(action) =
                    corrupt_unit(label, i, i + 1, &word, &mut input, &mut targets, rng)
                {
                    log.push((label, action));
                }
            }
        } else {
            let text = match label {
                EntityLabel::RoadNumber => t.raw.road_number.clone(),
                _ => t.raw.admin_field(label.index() as u8 + 1).to_string(),
            };
            if let Some(action) =
                corrupt_unit(label, start, end, &text, &mut input, &mut targets, rng)
            {
                log.push((label, action));
            }
        }
    }

    MlmExample {
        input_tokens: input,
        target_tokens: targets,
        corruption_log: log,
    }
}

/// Grid-cell classification target for one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoExample {
    pub label: LabelChars,
    pub face: u8,
}

pub fn make_geo(lat: f64, lon: f64) -> Result<GeoExample, PretaskError> {
    make_geo_level(lat, lon, GEO_LEVEL)
}

/// Grid-cell target at an explicit level (downstream geocoding uses a
/// deeper grid than pretraining).
pub fn make_geo_level(lat: f64, lon: f64, level: u8) -> Result<GeoExample, PretaskError> {
    let cell = cell_from_latlon(lat, lon, level)?;
    Ok(GeoExample {
        face: cell.face,
        label: encode_2lt3c(&cell),
    })
}

/// Hierarchical-classification target: the root-descending region path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HtcExample {
    pub region_path: Vec<String>,
}

pub fn make_htc(addr: &NormalizedAddress, tree: &AdminTree) -> Result<HtcExample, PretaskError> {
    let mut region_path = crate::address::admin_path(addr, tree)?;
    region_path.truncate(ADMIN_LEVELS);
    Ok(HtcExample { region_path })
}

/// All targets for one node of a pretraining sample. The MLM example stored
/// here is the epoch-0 draw; the trainer re-draws masking every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTargets {
    pub poi_id: String,
    pub address: NormalizedAddress,
    pub tokens: Vec<u32>,
    pub spans: Vec<(EntityLabel, usize, usize)>,
    pub mlm: MlmExample,
    pub geo_label: String,
    pub geo_face: u8,
    pub htc_path: Vec<String>,
    /// Per-token entity label indices (the gold segmentation).
    pub aet_labels: Vec<u8>,
}

/// One pretraining sample: the subgraph, a reference to its features record,
/// and per-node targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSample {
    pub sample: SampledSubgraph,
    pub features_part: usize,
    pub features_index: usize,
    pub nodes: Vec<NodeTargets>,
}

/// Assemble the pretraining example for one sampled subgraph.
#[allow(clippy::too_many_arguments)]
pub fn build_pretrain_sample(
    g: &crate::graph::HeteroGraph,
    s: &SampledSubgraph,
    features_part: usize,
    features_index: usize,
    tree: &AdminTree,
    vocab: &Vocab,
    pools: &ReplacementPools,
    max_seq_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PretrainSample, PretaskError> {
    let mut nodes = Vec::with_capacity(s.node_ids.len());
    for &v in &s.node_ids {
        let node = g.node(v).expect("sample node exists");
        let tokenized = tokenize(&node.address, vocab, max_seq_len);
        let mlm = make_mlm(&tokenized, vocab, pools, rng);
        let geo = make_geo(node.lat, node.lon)?;
        let htc = make_htc(&node.address, tree)?;
        let aet_labels = tokenized
            .token_labels()
            .iter()
            .map(|l| l.index() as u8)
            .collect();
        nodes.push(NodeTargets {
            poi_id: node.poi_id.clone(),
            address: node.address.clone(),
            tokens: tokenized.tokens,
            spans: tokenized.spans,
            mlm,
            geo_label: geo.label.to_string_label(),
            geo_face: geo.face,
            htc_path: htc.region_path,
            aet_labels,
        });
    }
    Ok(PretrainSample {
        sample: s.clone(),
        features_part,
        features_index,
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address::segment;
    use crate::synth::{generate_world, WorldConfig};
    use rand::SeedableRng;

    fn world_vocab() -> (crate::synth::World, Vocab, ReplacementPools) {
        let world = generate_world(&WorldConfig::tiny(101)).unwrap();
        let texts: Vec<String> = world
            .pois
            .iter()
            .flat_map(|p| p.addresses.iter().map(|a| a.full_text.clone()))
            .collect();
        let vocab = Vocab::build(texts.iter().map(|s| s.as_str()));
        let pools = ReplacementPools::from_world(&world.tree, &world.pois);
        (world, vocab, pools)
    }

    #[test]
    fn tokenize_roundtrips_in_vocab_text() {
        let (world, vocab, _) = world_vocab();
        for poi in world.pois.iter().take(50) {
            let addr = poi.canonical();
            let t = tokenize(addr, &vocab, 64);
            assert_eq!(t.tokens[0], CLS);
            assert_eq!(detokenize(&t.tokens, &vocab), addr.full_text);
        }
    }

    #[test]
    fn spans_align_with_segmentation() {
        let (world, vocab, _) = world_vocab();
        for poi in world.pois.iter().take(30) {
            let addr = poi.canonical();
            let t = tokenize(addr, &vocab, 64);
            let char_spans = segment(&addr.full_text, &world.tree);
            // every labeled field present in the char segmentation appears as
            // a token span whose decoded text matches
            for span in &char_spans {
                if span.label == EntityLabel::Other {
                    continue;
                }
                let (label, start, end) = *t
                    .spans
                    .iter()
                    .find(|(l, _, _)| *l == span.label)
                    .expect("span present");
                assert_eq!(label, span.label);
                let text = detokenize(&t.tokens[start..end], &vocab);
                assert_eq!(text, addr.full_text[span.start..span.end]);
            }
        }
    }

    #[test]
    fn empty_poi_name_has_no_span() {
        let (_, vocab, _) = world_vocab();
        let addr = NormalizedAddress::from_fields(
            ["Province00", "City000", "", "", ""],
            "",
            "",
        );
        let t = tokenize(&addr, &vocab, 64);
        assert!(t.spans.iter().all(|(l, _, _)| *l != EntityLabel::PoiName));
    }

    #[test]
    fn mlm_never_touches_cls_and_keeps_alignment() {
        let (world, vocab, pools) = world_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for poi in world.pois.iter().take(100) {
            let t = tokenize(poi.canonical(), &vocab, 64);
            let ex = make_mlm(&t, &vocab, &pools, &mut rng);
            assert_eq!(ex.input_tokens.len(), t.tokens.len());
            assert_eq!(ex.input_tokens[0], CLS);
            assert_eq!(ex.target_tokens[0], None);
            for (i, target) in ex.target_tokens.iter().enumerate() {
                if ex.input_tokens[i] != t.tokens[i] {
                    // corrupted positions always carry the original id
                    assert_eq!(*target, Some(t.tokens[i]));
                }
                if let Some(orig) = target {
                    assert_eq!(*orig, t.tokens[i]);
                }
            }
        }
    }

    #[test]
    fn forced_mask_all_masks_whole_region() {
        let (world, vocab, pools) = world_vocab();
        let poi = world.pois.iter().next().unwrap();
        let t = tokenize(poi.canonical(), &vocab, 64);
        let city_span = *t
            .spans
            .iter()
            .find(|(l, _, _)| *l == EntityLabel::City)
            .unwrap();
        let mut found = false;
        for seed in 0..5000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex = make_mlm(&t, &vocab, &pools, &mut rng);
            let city_selected = ex
                .corruption_log
                .iter()
                .any(|&(l, a)| l == EntityLabel::City && a == RegionAction::MaskAll);
            if city_selected {
                found = true;
                let (_, start, end) = city_span;
                for i in start..end {
                    assert_eq!(ex.input_tokens[i], MASK);
                    assert_eq!(ex.target_tokens[i], Some(t.tokens[i]));
                }
                break;
            }
        }
        assert!(found, "no seed selected the city with MaskAll");
    }

    #[test]
    fn nothing_selected_means_identity() {
        let (world, vocab, pools) = world_vocab();
        let poi = world.pois.iter().next().unwrap();
        let t = tokenize(poi.canonical(), &vocab, 64);
        let mut found = false;
        for seed in 0..5000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex = make_mlm(&t, &vocab, &pools, &mut rng);
            if ex.corruption_log.is_empty() {
                found = true;
                assert_eq!(ex.input_tokens, t.tokens);
                assert!(ex.target_tokens.iter().all(|t| t.is_none()));
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn replacement_draws_same_level_regions() {
        let (world, vocab, pools) = world_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut seen_replace = 0;
        let entries: Vec<_> = world.pois.iter().collect();
        for poi in entries.iter().cycle().take(3000) {
            let t = tokenize(poi.canonical(), &vocab, 64);
            let ex = make_mlm(&t, &vocab, &pools, &mut rng);
            for &(label, action) in &ex.corruption_log {
                if action != RegionAction::ReplaceSameLevel || label == EntityLabel::PoiName {
                    continue;
                }
                seen_replace += 1;
                // the replaced span now holds a different name from the same pool
                let (_, start, end) = *t.spans.iter().find(|(l, _, _)| *l == label).unwrap();
                let new_text = detokenize(&ex.input_tokens[start..end], &vocab);
                let old_text = detokenize(&t.tokens[start..end], &vocab);
                assert_ne!(new_text, old_text);
                assert!(
                    pools.pool_for(label).iter().any(|n| n == &new_text),
                    "{new_text} not in pool for {label:?}"
                );
            }
        }
        assert!(seen_replace > 20, "saw only {seen_replace} replacements");
    }

    #[test]
    fn masking_statistics_match_configured_rates() {
        let (world, vocab, pools) = world_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let mut units = 0usize;
        let mut selected = 0usize;
        let mut actions = [0usize; 3];
        let entries: Vec<_> = world.pois.iter().collect();
        for poi in entries.iter().cycle() {
            let t = tokenize(poi.canonical(), &vocab, 64);
            let n_units = t
                .spans
                .iter()
                .map(|&(l, s, e)| if l == EntityLabel::PoiName { e - s } else { 1 })
                .sum::<usize>();
            let ex = make_mlm(&t, &vocab, &pools, &mut rng);
            units += n_units;
            selected += ex.corruption_log.len();
            for &(_, a) in &ex.corruption_log {
                actions[match a {
                    RegionAction::MaskAll => 0,
                    RegionAction::ReplaceSameLevel => 1,
                    RegionAction::Keep => 2,
                }] += 1;
            }
            if units >= 30_000 {
                break;
            }
        }
        let rate = selected as f64 / units as f64;
        assert!((rate - 0.15).abs() < 0.02, "selection rate {rate}");
        let total = actions.iter().sum::<usize>() as f64;
        assert!((actions[0] as f64 / total - 0.8).abs() < 0.02);
        assert!((actions[1] as f64 / total - 0.1).abs() < 0.02);
        assert!((actions[2] as f64 / total - 0.1).abs() < 0.02);
    }

    #[test]
    fn geo_label_is_composition_stable() {
        use crate::geocode::{cell_center, decode_2lt3c};
        let (world, _, _) = world_vocab();
        for poi in world.pois.iter().take(50) {
            let ex = make_geo(poi.lat, poi.lon).unwrap();
            assert_eq!(ex.label.chars.len(), 27);
            // decode -> center -> re-encode reproduces the label
            let cell = decode_2lt3c(&ex.label, ex.face).unwrap();
            let (clat, clon) = cell_center(&cell);
            let again = make_geo(clat, clon).unwrap();
            assert_eq!(again.label, ex.label);
            // the center is within the level-18 cell size of the source
            let err_m = crate::geocode::haversine_km((poi.lat, poi.lon), (clat, clon)) * 1000.0;
            assert!(err_m < 49.0, "{err_m} m");
        }
    }

    #[test]
    fn htc_paths_are_root_descending_chains() {
        let (world, _, _) = world_vocab();
        for poi in world.pois.iter().take(50) {
            let ex = make_htc(poi.canonical(), &world.tree).unwrap();
            assert_eq!(ex.region_path.len(), 5);
            for pair in ex.region_path.windows(2) {
                assert!(world.tree.children(&pair[0]).contains(&pair[1]));
            }
        }
        let short = NormalizedAddress::from_fields(["Province00", "", "", "", ""], "", "");
        assert_eq!(
            make_htc(&short, &world.tree).unwrap().region_path.len(),
            1
        );
    }

    #[test]
    fn vocab_save_load_preserves_ids() {
        let (_, vocab, _) = world_vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        vocab.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.len(), vocab.len());
        for id in 0..vocab.len() as u32 {
            assert_eq!(loaded.token(id), vocab.token(id));
            assert_eq!(loaded.id(vocab.token(id)), Some(id));
        }
    }
}
