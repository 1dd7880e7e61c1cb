//! The address paradigm: administrative tree, normalized addresses, entity
//! segmentation, and the POI library.
//!
//! A normalized address is the concatenation of up to six administrative
//! fields (province through road number) followed by the POI name, joined by
//! single spaces. The administrative fields name regions that must lie on one
//! root-to-leaf path of a five-level [`AdminTree`]; the road number is matched
//! by pattern (`No.<digits>`) rather than by the tree.

use crate::io::{read_jsonl, write_jsonl, IoError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

/// Administrative hierarchy depth: province, city, district, town, road.
pub const ADMIN_LEVELS: usize = 5;

pub type RegionId = String;

#[derive(Debug, Error)]
pub enum AddressError {
    #[error("no recognizable region in address: {0:?}")]
    NormalizationFailed(String),
    #[error("inconsistent hierarchy: {0}")]
    InconsistentHierarchy(String),
    #[error("invalid admin tree: {0}")]
    InvalidTree(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// One administrative region. Level-1 regions (provinces) have no parent;
/// they hang off a synthetic root that is not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdminRegion {
    pub region_id: RegionId,
    pub name: String,
    pub level: u8,
    pub parent_id: Option<RegionId>,
}

/// Immutable five-level administrative tree with name and level indexes.
#[derive(Debug, Clone)]
pub struct AdminTree {
    regions: BTreeMap<RegionId, AdminRegion>,
    children: BTreeMap<RegionId, Vec<RegionId>>,
    /// Region ids by level (index 0 = level 1), in insertion order.
    levels: Vec<Vec<RegionId>>,
    name_index: BTreeMap<String, RegionId>,
    /// Position of each region within its level list.
    level_rank: BTreeMap<RegionId, usize>,
}

impl AdminTree {
    /// Build and validate a tree from a region list. Checks level bounds,
    /// parent levels, acyclicity, and reachability from the synthetic root.
    pub fn from_regions(list: Vec<AdminRegion>) -> Result<AdminTree, AddressError> {
        let mut regions = BTreeMap::new();
        let mut children: BTreeMap<RegionId, Vec<RegionId>> = BTreeMap::new();
        let mut levels = vec![Vec::new(); ADMIN_LEVELS];
        let mut name_index = BTreeMap::new();
        let mut level_rank = BTreeMap::new();

        for region in &list {
            if region.level < 1 || region.level > ADMIN_LEVELS as u8 {
                return Err(AddressError::InvalidTree(format!(
                    "region {} has level {} outside 1..=5",
                    region.region_id, region.level
                )));
            }
            if (region.level == 1) != region.parent_id.is_none() {
                return Err(AddressError::InvalidTree(format!(
                    "region {} at level {} has parent {:?}",
                    region.region_id, region.level, region.parent_id
                )));
            }
            if regions
                .insert(region.region_id.clone(), region.clone())
                .is_some()
            {
                return Err(AddressError::InvalidTree(format!(
                    "duplicate region id {}",
                    region.region_id
                )));
            }
        }
        for region in &list {
            if let Some(parent_id) = &region.parent_id {
                let parent = regions.get(parent_id).ok_or_else(|| {
                    AddressError::InvalidTree(format!(
                        "region {} references missing parent {parent_id}",
                        region.region_id
                    ))
                })?;
                if parent.level != region.level - 1 {
                    return Err(AddressError::InvalidTree(format!(
                        "region {} (level {}) has parent {} at level {}",
                        region.region_id, region.level, parent_id, parent.level
                    )));
                }
                children
                    .entry(parent_id.clone())
                    .or_default()
                    .push(region.region_id.clone());
            }
            let rank = levels[region.level as usize - 1].len();
            levels[region.level as usize - 1].push(region.region_id.clone());
            level_rank.insert(region.region_id.clone(), rank);
            name_index.insert(region.name.clone(), region.region_id.clone());
        }
        // parent level = level - 1 everywhere makes cycles impossible, and
        // every region reaches a level-1 root by walking parents
        Ok(AdminTree {
            regions,
            children,
            levels,
            name_index,
            level_rank,
        })
    }

    pub fn region(&self, id: &str) -> Option<&AdminRegion> {
        self.regions.get(id)
    }

    pub fn children(&self, id: &str) -> &[RegionId] {
        self.children.get(id).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Region ids at a 1-based level, in insertion order.
    pub fn level_regions(&self, level: u8) -> &[RegionId] {
        &self.levels[level as usize - 1]
    }

    /// Position of a region within its level list (classifier class index).
    pub fn rank_in_level(&self, id: &str) -> Option<usize> {
        self.level_rank.get(id).copied()
    }

    pub fn region_by_name(&self, name: &str) -> Option<&AdminRegion> {
        self.name_index.get(name).and_then(|id| self.regions.get(id))
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Ancestor of `id` at the given level (level ≤ region's own level).
    pub fn ancestor_at_level(&self, id: &str, level: u8) -> Option<&AdminRegion> {
        let mut current = self.regions.get(id)?;
        while current.level > level {
            current = self.regions.get(current.parent_id.as_ref()?)?;
        }
        (current.level == level).then_some(current)
    }

    pub fn save(&self, path: &Path) -> Result<(), AddressError> {
        // level order keeps parents before children in the file
        let mut list: Vec<&AdminRegion> = Vec::new();
        for level in &self.levels {
            for id in level {
                list.push(&self.regions[id]);
            }
        }
        write_jsonl(path, &list)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<AdminTree, AddressError> {
        AdminTree::from_regions(read_jsonl(path)?)
    }
}

/// Paradigm-form address: six administrative fields plus the POI name.
/// `full_text` is the single-space join of the non-empty fields.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormalizedAddress {
    pub province: String,
    pub city: String,
    pub district: String,
    pub town: String,
    pub road: String,
    pub road_number: String,
    pub poi_name: String,
    pub full_text: String,
}

impl NormalizedAddress {
    pub fn from_fields(
        admin: [&str; ADMIN_LEVELS],
        road_number: &str,
        poi_name: &str,
    ) -> NormalizedAddress {
        let mut addr = NormalizedAddress {
            province: admin[0].to_string(),
            city: admin[1].to_string(),
            district: admin[2].to_string(),
            town: admin[3].to_string(),
            road: admin[4].to_string(),
            road_number: road_number.to_string(),
            poi_name: poi_name.to_string(),
            full_text: String::new(),
        };
        addr.full_text = addr.render_full_text();
        addr
    }

    /// Admin field by 1-based level.
    pub fn admin_field(&self, level: u8) -> &str {
        match level {
            1 => &self.province,
            2 => &self.city,
            3 => &self.district,
            4 => &self.town,
            5 => &self.road,
            _ => panic!("admin level {level} outside 1..=5"),
        }
    }

    /// All fields in paradigm order, paired with their entity labels.
    pub fn labeled_fields(&self) -> [(EntityLabel, &str); 7] {
        [
            (EntityLabel::Province, self.province.as_str()),
            (EntityLabel::City, self.city.as_str()),
            (EntityLabel::District, self.district.as_str()),
            (EntityLabel::Town, self.town.as_str()),
            (EntityLabel::Road, self.road.as_str()),
            (EntityLabel::RoadNumber, self.road_number.as_str()),
            (EntityLabel::PoiName, self.poi_name.as_str()),
        ]
    }

    pub fn render_full_text(&self) -> String {
        self.labeled_fields()
            .iter()
            .map(|(_, f)| *f)
            .filter(|f| !f.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Geographic entity labels for address segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntityLabel {
    Province,
    City,
    District,
    Town,
    Road,
    RoadNumber,
    PoiName,
    Other,
}

impl EntityLabel {
    pub const COUNT: usize = 8;

    pub fn index(self) -> usize {
        match self {
            EntityLabel::Province => 0,
            EntityLabel::City => 1,
            EntityLabel::District => 2,
            EntityLabel::Town => 3,
            EntityLabel::Road => 4,
            EntityLabel::RoadNumber => 5,
            EntityLabel::PoiName => 6,
            EntityLabel::Other => 7,
        }
    }

    fn for_level(level: u8) -> EntityLabel {
        match level {
            1 => EntityLabel::Province,
            2 => EntityLabel::City,
            3 => EntityLabel::District,
            4 => EntityLabel::Town,
            _ => EntityLabel::Road,
        }
    }
}

/// Character span of one geographic entity within a `full_text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: EntityLabel,
}

/// One POI with its names, coordinates, and administrative addresses
/// (index 0 is canonical). Alias twins reference their base POI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiEntry {
    pub poi_id: String,
    pub name: String,
    pub aoi_id: String,
    pub lat: f64,
    pub lon: f64,
    pub addresses: Vec<NormalizedAddress>,
    pub alias_of: Option<String>,
}

impl PoiEntry {
    pub fn canonical(&self) -> &NormalizedAddress {
        &self.addresses[0]
    }
}

/// The POI library: entries indexed by id, name, and AOI.
#[derive(Debug, Clone, Default)]
pub struct PoiTable {
    entries: BTreeMap<String, PoiEntry>,
    name_index: BTreeMap<String, String>,
    aoi_index: BTreeMap<String, Vec<String>>,
}

impl PoiTable {
    pub fn from_entries(entries: Vec<PoiEntry>) -> PoiTable {
        let mut table = PoiTable::default();
        for entry in entries {
            table.name_index.insert(entry.name.clone(), entry.poi_id.clone());
            table
                .aoi_index
                .entry(entry.aoi_id.clone())
                .or_default()
                .push(entry.poi_id.clone());
            table.entries.insert(entry.poi_id.clone(), entry);
        }
        table
    }

    pub fn get(&self, poi_id: &str) -> Option<&PoiEntry> {
        self.entries.get(poi_id)
    }

    pub fn by_name(&self, name: &str) -> Option<&PoiEntry> {
        self.name_index.get(name).and_then(|id| self.entries.get(id))
    }

    pub fn pois_in_aoi(&self, aoi_id: &str) -> &[String] {
        self.aoi_index.get(aoi_id).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn aoi_ids(&self) -> impl Iterator<Item = &String> {
        self.aoi_index.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PoiEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let list: Vec<&PoiEntry> = self.entries.values().collect();
        write_jsonl(path, &list)
    }

    pub fn load(path: &Path) -> Result<PoiTable, IoError> {
        Ok(PoiTable::from_entries(read_jsonl(path)?))
    }
}

fn is_road_number(token: &str) -> bool {
    token
        .strip_prefix("No.")
        .map(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
        .unwrap_or(false)
}

/// Normalize a raw delivery address into paradigm form.
///
/// Tokens naming administrative regions fill their level's field, a
/// `No.<digits>` token fills the road number, and the longest token window
/// matching a known POI name becomes the POI name. House numbers and remark
/// text ("leave at door") match nothing and are stripped. Fields that cannot
/// be resolved stay empty; an address with no recognizable region at any
/// level is rejected.
pub fn normalize(
    raw_address: &str,
    tree: &AdminTree,
    pois: &PoiTable,
) -> Result<NormalizedAddress, AddressError> {
    let tokens: Vec<&str> = raw_address
        .split_whitespace()
        .map(|t| t.trim_end_matches([',', ';']))
        .filter(|t| !t.is_empty())
        .collect();

    let mut admin = [""; ADMIN_LEVELS];
    let mut road_number = "";
    let mut used = vec![false; tokens.len()];
    for (i, token) in tokens.iter().enumerate() {
        if let Some(region) = tree.region_by_name(token) {
            let slot = &mut admin[region.level as usize - 1];
            if slot.is_empty() {
                *slot = &tree.region(&region.region_id).unwrap().name;
                used[i] = true;
            }
        } else if is_road_number(token) && road_number.is_empty() {
            road_number = token;
            used[i] = true;
        }
    }

    if admin.iter().all(|f| f.is_empty()) {
        return Err(AddressError::NormalizationFailed(raw_address.to_string()));
    }

    // longest unused token window naming a known POI, scanned from the right
    // since the paradigm puts the POI name last
    let mut poi_name = String::new();
    'outer: for width in (1..=4.min(tokens.len())).rev() {
        for start in (0..=tokens.len() - width).rev() {
            if used[start..start + width].iter().any(|&u| u) {
                continue;
            }
            let candidate = tokens[start..start + width].join(" ");
            if pois.by_name(&candidate).is_some() {
                poi_name = candidate;
                break 'outer;
            }
        }
    }

    Ok(NormalizedAddress::from_fields(admin, road_number, &poi_name))
}

/// Segment a paradigm-form text into entity spans: one span per field,
/// with unmatched stretches labeled `Other`. Spans cover every
/// non-separator character, sorted and non-overlapping.
pub fn segment(full_text: &str, tree: &AdminTree) -> Vec<EntitySpan> {
    // tokens with byte offsets (paradigm text is ASCII)
    let mut tokens: Vec<(usize, usize, &str)> = Vec::new();
    let mut pos = 0;
    for part in full_text.split(' ') {
        if !part.is_empty() {
            tokens.push((pos, pos + part.len(), part));
        }
        pos += part.len() + 1;
    }

    let mut labels: Vec<EntityLabel> = Vec::with_capacity(tokens.len());
    let mut last_admin = None;
    for (i, (_, _, token)) in tokens.iter().enumerate() {
        let label = if let Some(region) = tree.region_by_name(token) {
            last_admin = Some(i);
            EntityLabel::for_level(region.level)
        } else if is_road_number(token) {
            last_admin = Some(i);
            EntityLabel::RoadNumber
        } else {
            EntityLabel::Other
        };
        labels.push(label);
    }
    // everything after the last administrative token is the POI name
    if let Some(last) = last_admin {
        for label in labels.iter_mut().skip(last + 1) {
            *label = EntityLabel::PoiName;
        }
    } else if !labels.is_empty() {
        for label in labels.iter_mut() {
            *label = EntityLabel::PoiName;
        }
    }

    // merge adjacent tokens with the same label into one span
    let mut spans: Vec<EntitySpan> = Vec::new();
    for ((start, end, _), label) in tokens.into_iter().zip(labels) {
        match spans.last_mut() {
            Some(prev) if prev.label == label => prev.end = end,
            _ => spans.push(EntitySpan { start, end, label }),
        }
    }
    spans
}

/// Root-to-leaf chain of region ids for the non-empty admin fields.
/// Every matched region must be an ancestor-consistent refinement of the
/// previous one; otherwise the chain is inconsistent.
pub fn admin_path(
    addr: &NormalizedAddress,
    tree: &AdminTree,
) -> Result<Vec<RegionId>, AddressError> {
    let mut path = Vec::new();
    let mut prev: Option<&AdminRegion> = None;
    for level in 1..=ADMIN_LEVELS as u8 {
        let field = addr.admin_field(level);
        if field.is_empty() {
            continue;
        }
        let region = tree.region_by_name(field).ok_or_else(|| {
            AddressError::InconsistentHierarchy(format!("unknown region name {field:?}"))
        })?;
        if region.level != level {
            return Err(AddressError::InconsistentHierarchy(format!(
                "{field:?} is a level-{} region used in the level-{level} field",
                region.level
            )));
        }
        if let Some(prev) = prev {
            let ancestor = tree.ancestor_at_level(&region.region_id, prev.level);
            if ancestor.map(|a| a.region_id.as_str()) != Some(prev.region_id.as_str()) {
                return Err(AddressError::InconsistentHierarchy(format!(
                    "{} is not under {}",
                    region.region_id, prev.region_id
                )));
            }
        }
        path.push(region.region_id.clone());
        prev = Some(region);
    }
    Ok(path)
}
