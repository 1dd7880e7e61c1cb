//! Deterministic synthetic delivery world: an administrative tree, AOIs with
//! spatially clustered POIs, alias pairs, and courier delivery sequences.
//!
//! The generator stands in for production delivery logs so every downstream
//! stage can be tested end to end. Regeneration with the same seed is
//! bit-identical.

use crate::address::{AdminRegion, AdminTree, NormalizedAddress, PoiEntry, PoiTable, ADMIN_LEVELS};
use crate::io::{write_jsonl, IoError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config field {field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error(transparent)]
    Io(#[from] IoError),
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

/// Geographic bounding box in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLonBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl LatLonBox {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.lat_min && lat <= self.lat_max && lon >= self.lon_min && lon <= self.lon_max
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.lat_min + self.lat_max),
            0.5 * (self.lon_min + self.lon_max),
        )
    }
}

/// Size and shape of the generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_provinces: usize,
    pub cities_per_province: usize,
    pub districts_per_city: usize,
    pub towns_per_district: usize,
    pub roads_per_town: usize,
    /// Inclusive range of POIs placed in each AOI.
    pub pois_per_aoi: (usize, usize),
    pub n_aois: usize,
    /// Probability that a POI gets an alias twin.
    pub alias_fraction: f64,
    pub n_couriers: usize,
    /// Records per delivery sequence (one sequence per courier).
    pub deliveries_per_courier: usize,
    pub bbox: LatLonBox,
}

impl WorldConfig {
    /// A small world for unit tests: 2 provinces, 12 AOIs, 6 couriers.
    pub fn tiny(seed: u64) -> WorldConfig {
        WorldConfig {
            seed,
            n_provinces: 2,
            cities_per_province: 2,
            districts_per_city: 2,
            towns_per_district: 2,
            roads_per_town: 2,
            pois_per_aoi: (2, 5),
            n_aois: 12,
            alias_fraction: 0.15,
            n_couriers: 6,
            deliveries_per_courier: 30,
            bbox: LatLonBox {
                lat_min: 30.0,
                lat_max: 30.2,
                lon_min: 120.0,
                lon_max: 120.2,
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let counts: [(&'static str, usize); 8] = [
            ("n_provinces", self.n_provinces),
            ("cities_per_province", self.cities_per_province),
            ("districts_per_city", self.districts_per_city),
            ("towns_per_district", self.towns_per_district),
            ("roads_per_town", self.roads_per_town),
            ("n_aois", self.n_aois),
            ("n_couriers", self.n_couriers),
            ("deliveries_per_courier", self.deliveries_per_courier),
        ];
        for (field, value) in counts {
            if value < 1 {
                return Err(invalid(field, format!("{value} must be >= 1")));
            }
        }
        if self.pois_per_aoi.0 < 1 || self.pois_per_aoi.0 > self.pois_per_aoi.1 {
            return Err(invalid(
                "pois_per_aoi",
                format!("range {:?} must be a nonempty range from >= 1", self.pois_per_aoi),
            ));
        }
        if !(0.0..=1.0).contains(&self.alias_fraction) {
            return Err(invalid(
                "alias_fraction",
                format!("{} outside [0, 1]", self.alias_fraction),
            ));
        }
        let b = self.bbox;
        if !(-90.0..=90.0).contains(&b.lat_min)
            || !(-90.0..=90.0).contains(&b.lat_max)
            || b.lat_min >= b.lat_max
        {
            return Err(invalid("bbox", format!("bad latitude range {}..{}", b.lat_min, b.lat_max)));
        }
        if !(-180.0..=180.0).contains(&b.lon_min)
            || !(-180.0..=180.0).contains(&b.lon_max)
            || b.lon_min >= b.lon_max
        {
            return Err(invalid("bbox", format!("bad longitude range {}..{}", b.lon_min, b.lon_max)));
        }
        Ok(())
    }
}

/// One step of a courier's delivery sequence, with ground-truth location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub courier_id: String,
    pub sequence_id: String,
    pub step_index: u32,
    pub raw_address: String,
    pub lat: f64,
    pub lon: f64,
    pub aoi_id: String,
    pub poi_id: String,
}

/// A generated world: tree, POI library, and delivery log.
#[derive(Debug, Clone)]
pub struct World {
    pub tree: AdminTree,
    pub pois: PoiTable,
    pub deliveries: Vec<DeliveryRecord>,
}

impl World {
    /// Write `admin_tree.jsonl`, `pois.jsonl`, and `deliveries.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<(), ConfigError> {
        self.tree
            .save(&dir.join("admin_tree.jsonl"))
            .map_err(|e| invalid("out_dir", e.to_string()))?;
        self.pois.save(&dir.join("pois.jsonl"))?;
        write_jsonl(&dir.join("deliveries.jsonl"), &self.deliveries)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<World, ConfigError> {
        let tree = AdminTree::load(&dir.join("admin_tree.jsonl"))
            .map_err(|e| invalid("out_dir", e.to_string()))?;
        let pois = PoiTable::load(&dir.join("pois.jsonl"))?;
        let deliveries = crate::io::read_jsonl(&dir.join("deliveries.jsonl"))?;
        Ok(World {
            tree,
            pois,
            deliveries,
        })
    }
}

const POI_ADJECTIVES: [&str; 10] = [
    "Sunny", "Green", "Grand", "Little", "Golden", "Silver", "Old", "New", "Royal", "Lucky",
];
const POI_NOUNS: [&str; 10] = [
    "Tower", "Mall", "Court", "Villa", "Garden", "Plaza", "House", "Center", "Market", "Studio",
];
const REMARKS: [&str; 4] = [
    "leave at door,",
    "put in cabinet,",
    "call on arrival,",
    "hand to recipient,",
];

/// Radius of the disc POIs are scattered in around their AOI center, meters.
const AOI_RADIUS_M: f64 = 35.0;
/// Probability that a delivery walk stays inside the current AOI.
const STAY_IN_AOI: f64 = 0.7;
/// Number of nearest AOIs a walk may hop to.
const NEARBY_AOIS: usize = 3;

struct AoiSite {
    aoi_id: String,
    lat: f64,
    lon: f64,
    road_chain: [String; ADMIN_LEVELS],
    neighbor_order: Vec<usize>,
}

fn build_admin_tree(cfg: &WorldConfig) -> (AdminTree, Vec<[String; ADMIN_LEVELS]>) {
    let mut regions = Vec::new();
    let mut road_chains = Vec::new();
    let (mut nc, mut nd, mut nt, mut nr) = (0usize, 0usize, 0usize, 0usize);
    for p in 0..cfg.n_provinces {
        let province = format!("Province{p:02}");
        regions.push(AdminRegion {
            region_id: province.clone(),
            name: province.clone(),
            level: 1,
            parent_id: None,
        });
        for _ in 0..cfg.cities_per_province {
            let city = format!("City{nc:03}");
            nc += 1;
            regions.push(AdminRegion {
                region_id: city.clone(),
                name: city.clone(),
                level: 2,
                parent_id: Some(province.clone()),
            });
            for _ in 0..cfg.districts_per_city {
                let district = format!("District{nd:03}");
                nd += 1;
                regions.push(AdminRegion {
                    region_id: district.clone(),
                    name: district.clone(),
                    level: 3,
                    parent_id: Some(city.clone()),
                });
                for _ in 0..cfg.towns_per_district {
                    let town = format!("Town{nt:04}");
                    nt += 1;
                    regions.push(AdminRegion {
                        region_id: town.clone(),
                        name: town.clone(),
                        level: 4,
                        parent_id: Some(district.clone()),
                    });
                    for _ in 0..cfg.roads_per_town {
                        let road = format!("Road{nr:04}");
                        nr += 1;
                        regions.push(AdminRegion {
                            region_id: road.clone(),
                            name: road.clone(),
                            level: 5,
                            parent_id: Some(town.clone()),
                        });
                        road_chains.push([
                            province.clone(),
                            city.clone(),
                            district.clone(),
                            town.clone(),
                            road.clone(),
                        ]);
                    }
                }
            }
        }
    }
    let tree = AdminTree::from_regions(regions).expect("generated tree is valid");
    (tree, road_chains)
}

fn meters_to_lat_deg(m: f64) -> f64 {
    m / 111_320.0
}

fn meters_to_lon_deg(m: f64, lat: f64) -> f64 {
    m / (111_320.0 * lat.to_radians().cos())
}

/// Generate a complete world from a config. Deterministic for a fixed seed.
///
/// Every POI gets 1–4 administrative addresses (index 0 canonical, on its
/// AOI's road); with probability `alias_fraction` a POI gains an alias twin
/// at the same coordinates with a distinct name and the same address list.
/// Each courier walks one delivery sequence that prefers staying inside the
/// current AOI before hopping to one of the nearest AOIs.
pub fn generate_world(cfg: &WorldConfig) -> Result<World, ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (tree, road_chains) = build_admin_tree(cfg);

    // AOI centers jittered on a grid covering the bbox
    let grid = (cfg.n_aois as f64).sqrt().ceil() as usize;
    let lat_step = (cfg.bbox.lat_max - cfg.bbox.lat_min) / grid as f64;
    let lon_step = (cfg.bbox.lon_max - cfg.bbox.lon_min) / grid as f64;
    let mut sites: Vec<AoiSite> = Vec::with_capacity(cfg.n_aois);
    for k in 0..cfg.n_aois {
        let (gi, gj) = (k % grid, k / grid);
        let lat = cfg.bbox.lat_min
            + lat_step * (gi as f64 + 0.5 + rng.gen_range(-0.25..0.25));
        let lon = cfg.bbox.lon_min
            + lon_step * (gj as f64 + 0.5 + rng.gen_range(-0.25..0.25));
        let chain = road_chains[rng.gen_range(0..road_chains.len())].clone();
        sites.push(AoiSite {
            aoi_id: format!("Aoi{k:04}"),
            lat,
            lon,
            road_chain: chain,
            neighbor_order: Vec::new(),
        });
    }
    for i in 0..sites.len() {
        let mut order: Vec<usize> = (0..sites.len()).filter(|&j| j != i).collect();
        let (lat, lon) = (sites[i].lat, sites[i].lon);
        order.sort_by(|&a, &b| {
            let da = (sites[a].lat - lat).powi(2) + (sites[a].lon - lon).powi(2);
            let db = (sites[b].lat - lat).powi(2) + (sites[b].lon - lon).powi(2);
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        order.truncate(NEARBY_AOIS);
        sites[i].neighbor_order = order;
    }

    // POIs: unique names, per-road road numbers, spatially clustered per AOI
    let mut entries: Vec<PoiEntry> = Vec::new();
    let mut aoi_members: Vec<Vec<usize>> = vec![Vec::new(); sites.len()];
    let mut road_counters: std::collections::BTreeMap<String, usize> =
        std::collections::BTreeMap::new();
    let mut poi_counter = 0usize;
    let mut name_counter = 0usize;

    let next_name = |counter: &mut usize, rng: &mut ChaCha8Rng| {
        let adj = POI_ADJECTIVES[rng.gen_range(0..POI_ADJECTIVES.len())];
        let noun = POI_NOUNS[rng.gen_range(0..POI_NOUNS.len())];
        let name = format!("{adj} {noun}{:04}", *counter);
        *counter += 1;
        name
    };
    let next_road_number = |road: &str,
                                counters: &mut std::collections::BTreeMap<String, usize>| {
        let c = counters.entry(road.to_string()).or_insert(0);
        *c += 1;
        format!("No.{c}")
    };

    for (site_idx, site) in sites.iter().enumerate() {
        let n_pois = rng.gen_range(cfg.pois_per_aoi.0..=cfg.pois_per_aoi.1);
        for _ in 0..n_pois {
            let r = AOI_RADIUS_M * rng.gen_range(0.0f64..1.0).sqrt();
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let lat = site.lat + meters_to_lat_deg(r * theta.sin());
            let lon = site.lon + meters_to_lon_deg(r * theta.cos(), site.lat);

            let name = next_name(&mut name_counter, &mut rng);
            let chain_refs: [&str; ADMIN_LEVELS] = [
                &site.road_chain[0],
                &site.road_chain[1],
                &site.road_chain[2],
                &site.road_chain[3],
                &site.road_chain[4],
            ];
            let number = next_road_number(&site.road_chain[4], &mut road_counters);
            let mut addresses =
                vec![NormalizedAddress::from_fields(chain_refs, &number, &name)];
            // up to three extra paradigm addresses on sibling roads
            for _ in 0..rng.gen_range(0..=3usize) {
                let alt_chain = &road_chains[rng.gen_range(0..road_chains.len())];
                let alt_refs: [&str; ADMIN_LEVELS] = [
                    &alt_chain[0],
                    &alt_chain[1],
                    &alt_chain[2],
                    &alt_chain[3],
                    &alt_chain[4],
                ];
                let alt_number = next_road_number(&alt_chain[4], &mut road_counters);
                addresses.push(NormalizedAddress::from_fields(alt_refs, &alt_number, &name));
            }

            let poi_id = format!("Poi{poi_counter:05}");
            poi_counter += 1;
            aoi_members[site_idx].push(entries.len());
            entries.push(PoiEntry {
                poi_id,
                name,
                aoi_id: site.aoi_id.clone(),
                lat,
                lon,
                addresses,
                alias_of: None,
            });

            // alias twin: same place and addresses, different name
            if rng.gen_range(0.0f64..1.0) < cfg.alias_fraction {
                let base = entries.last().unwrap().clone();
                let twin_name = next_name(&mut name_counter, &mut rng);
                let mut twin_addresses = base.addresses.clone();
                for addr in &mut twin_addresses {
                    addr.poi_name = twin_name.clone();
                    addr.full_text = addr.render_full_text();
                }
                let poi_id = format!("Poi{poi_counter:05}");
                poi_counter += 1;
                aoi_members[site_idx].push(entries.len());
                entries.push(PoiEntry {
                    poi_id,
                    name: twin_name,
                    aoi_id: base.aoi_id.clone(),
                    lat: base.lat,
                    lon: base.lon,
                    addresses: twin_addresses,
                    alias_of: Some(base.poi_id.clone()),
                });
            }
        }
    }

    // courier walks
    let mut deliveries = Vec::with_capacity(cfg.n_couriers * cfg.deliveries_per_courier);
    for c in 0..cfg.n_couriers {
        let courier_id = format!("K{c:03}");
        let sequence_id = format!("{courier_id}-S0");
        let mut site_idx = rng.gen_range(0..sites.len());
        let mut poi_idx = *aoi_members[site_idx].choose(&mut rng).unwrap();
        for step in 0..cfg.deliveries_per_courier {
            let entry = &entries[poi_idx];
            deliveries.push(DeliveryRecord {
                courier_id: courier_id.clone(),
                sequence_id: sequence_id.clone(),
                step_index: step as u32,
                raw_address: render_raw_address(entry, &mut rng),
                lat: entry.lat,
                lon: entry.lon,
                aoi_id: entry.aoi_id.clone(),
                poi_id: entry.poi_id.clone(),
            });
            let stay = rng.gen_range(0.0f64..1.0) < STAY_IN_AOI;
            if stay && aoi_members[site_idx].len() > 1 {
                poi_idx = *aoi_members[site_idx].choose(&mut rng).unwrap();
            } else {
                site_idx = sites[site_idx].neighbor_order
                    [rng.gen_range(0..sites[site_idx].neighbor_order.len())];
                poi_idx = *aoi_members[site_idx].choose(&mut rng).unwrap();
            }
        }
    }

    Ok(World {
        tree,
        pois: PoiTable::from_entries(entries),
        deliveries,
    })
}

/// Raw address text as a user might type it: an administrative address plus
/// optional house number and remark noise, ending with the POI name.
fn render_raw_address(entry: &PoiEntry, rng: &mut ChaCha8Rng) -> String {
    let addr = if entry.addresses.len() > 1 && rng.gen_range(0.0f64..1.0) < 0.2 {
        &entry.addresses[rng.gen_range(1..entry.addresses.len())]
    } else {
        &entry.addresses[0]
    };
    let mut parts: Vec<String> = [
        &addr.province,
        &addr.city,
        &addr.district,
        &addr.town,
        &addr.road,
        &addr.road_number,
    ]
    .iter()
    .filter(|f| !f.is_empty())
    .map(|f| f.to_string())
    .collect();
    if rng.gen_range(0.0f64..1.0) < 0.3 {
        parts.push(format!("Room {},", rng.gen_range(101..999)));
    }
    if rng.gen_range(0.0f64..1.0) < 0.3 {
        parts.push(REMARKS[rng.gen_range(0..REMARKS.len())].to_string());
    }
    parts.push(entry.name.clone());
    parts.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address::{admin_path, normalize};

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = WorldConfig::tiny(7);
        let a = generate_world(&cfg).unwrap();
        let b = generate_world(&cfg).unwrap();
        assert_eq!(a.deliveries, b.deliveries);
        let pa: Vec<_> = a.pois.iter().collect();
        let pb: Vec<_> = b.pois.iter().collect();
        assert_eq!(pa, pb);
        let sa = serde_json::to_string(&a.deliveries).unwrap();
        let sb = serde_json::to_string(&b.deliveries).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn different_seed_differs() {
        let a = generate_world(&WorldConfig::tiny(7)).unwrap();
        let b = generate_world(&WorldConfig::tiny(8)).unwrap();
        assert_ne!(a.deliveries, b.deliveries);
    }

    #[test]
    fn alias_fraction_zero_means_no_aliases() {
        let mut cfg = WorldConfig::tiny(3);
        cfg.alias_fraction = 0.0;
        let world = generate_world(&cfg).unwrap();
        assert!(world.pois.iter().all(|p| p.alias_of.is_none()));
    }

    #[test]
    fn alias_pairs_share_coords_and_addresses_with_distinct_names() {
        let mut cfg = WorldConfig::tiny(11);
        cfg.alias_fraction = 0.5;
        let world = generate_world(&cfg).unwrap();
        let mut found = 0;
        for poi in world.pois.iter() {
            if let Some(base_id) = &poi.alias_of {
                let base = world.pois.get(base_id).unwrap();
                assert_eq!((poi.lat, poi.lon), (base.lat, base.lon));
                assert_ne!(poi.name, base.name);
                // administrative fields match exactly; only the POI name differs
                for (a, b) in poi.addresses.iter().zip(&base.addresses) {
                    assert_eq!(
                        (a.province.as_str(), a.city.as_str(), a.district.as_str(),
                         a.town.as_str(), a.road.as_str(), a.road_number.as_str()),
                        (b.province.as_str(), b.city.as_str(), b.district.as_str(),
                         b.town.as_str(), b.road.as_str(), b.road_number.as_str())
                    );
                }
                found += 1;
            }
        }
        assert!(found > 0);
    }

    #[test]
    fn fixed_length_sequences() {
        let mut cfg = WorldConfig::tiny(5);
        cfg.n_couriers = 10;
        cfg.deliveries_per_courier = 40;
        let world = generate_world(&cfg).unwrap();
        let mut lengths: std::collections::BTreeMap<&str, usize> = Default::default();
        for r in &world.deliveries {
            *lengths.entry(r.sequence_id.as_str()).or_default() += 1;
        }
        assert_eq!(lengths.len(), 10);
        assert!(lengths.values().all(|&n| n == 40));
    }

    #[test]
    fn records_reference_known_pois_and_stay_in_bbox() {
        let cfg = WorldConfig::tiny(9);
        let world = generate_world(&cfg).unwrap();
        let mut last_step: std::collections::BTreeMap<&str, u32> = Default::default();
        for r in &world.deliveries {
            let poi = world.pois.get(&r.poi_id).expect("poi exists");
            assert_eq!(poi.aoi_id, r.aoi_id);
            assert!(cfg.bbox.contains(r.lat, r.lon), "({}, {})", r.lat, r.lon);
            if let Some(prev) = last_step.get(r.sequence_id.as_str()) {
                assert!(r.step_index > *prev, "step_index strictly increasing");
            }
            last_step.insert(&r.sequence_id, r.step_index);
        }
        for aoi in world.pois.aoi_ids() {
            assert!(!world.pois.pois_in_aoi(aoi).is_empty());
        }
    }

    #[test]
    fn every_poi_has_one_to_four_addresses_and_consistent_paths() {
        let world = generate_world(&WorldConfig::tiny(13)).unwrap();
        for poi in world.pois.iter() {
            assert!((1..=4).contains(&poi.addresses.len()));
            for addr in &poi.addresses {
                let path = admin_path(addr, &world.tree).unwrap();
                let non_empty = (1..=5)
                    .filter(|&l| !addr.admin_field(l).is_empty())
                    .count();
                assert_eq!(path.len(), non_empty);
                assert_eq!(path.len(), 5, "generator emits full chains");
            }
        }
    }

    #[test]
    fn raw_addresses_normalize_to_ground_truth() {
        let world = generate_world(&WorldConfig::tiny(21)).unwrap();
        for r in world.deliveries.iter().take(200) {
            let addr = normalize(&r.raw_address, &world.tree, &world.pois).unwrap();
            let poi = world.pois.get(&r.poi_id).unwrap();
            assert_eq!(addr.poi_name, poi.name, "raw: {}", r.raw_address);
            // the raw text was rendered from one of the POI's addresses
            assert!(
                poi.addresses.iter().any(|a| a.full_text == addr.full_text),
                "normalized {:?} not among {:?}",
                addr.full_text,
                poi.addresses.iter().map(|a| &a.full_text).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = WorldConfig::tiny(1);
        cfg.alias_fraction = 1.5;
        match generate_world(&cfg) {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "alias_fraction"),
            other => panic!("expected Invalid, got {other:?}"),
        }
        let mut cfg = WorldConfig::tiny(1);
        cfg.n_couriers = 0;
        match generate_world(&cfg) {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "n_couriers"),
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn world_save_load_roundtrip() {
        let world = generate_world(&WorldConfig::tiny(17)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        world.save(dir.path()).unwrap();
        let loaded = World::load(dir.path()).unwrap();
        assert_eq!(loaded.deliveries, world.deliveries);
        assert_eq!(loaded.pois.len(), world.pois.len());
        assert_eq!(loaded.tree.len(), world.tree.len());
    }
}
