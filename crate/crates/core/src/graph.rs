//! The heterogeneous address graph: one node per POI (canonical paradigm
//! address), undirected edges carrying a 3-bit type code.
//!
//! Bit 0 marks a Delivery Route edge (the pair appeared consecutively in a
//! courier's sequence), bit 1 an AOI Co-locate edge (the pair shares an AOI),
//! bit 2 an Alias edge (two names of the same place). A pair related in more
//! than one way ORs its bits: a Delivery Route plus Alias pair is coded
//! binary 101 = 5.

use crate::address::{AdminTree, NormalizedAddress, PoiTable};
use crate::io::{read_jsonl, write_jsonl, IoError};
use crate::synth::DeliveryRecord;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("ingest error at {locator}: {message}")]
    IngestError { locator: String, message: String },
    #[error("node {0:?} not found")]
    NodeNotFound(NodeId),
    #[error("format error in {path} line {line}: {message}")]
    FormatError {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Dense node index, contiguous from 0 and stable for a built graph.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct NodeId(pub u32);

/// Edge-type bit positions.
pub const EDGE_ROUTE: u8 = 1 << 0;
pub const EDGE_COLOCATE: u8 = 1 << 1;
pub const EDGE_ALIAS: u8 = 1 << 2;

/// 3-bit edge type code; 0 is reserved for "no edge / padding" and never
/// stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCode(pub u8);

impl EdgeCode {
    pub fn has_route(self) -> bool {
        self.0 & EDGE_ROUTE != 0
    }
    pub fn has_colocate(self) -> bool {
        self.0 & EDGE_COLOCATE != 0
    }
    pub fn has_alias(self) -> bool {
        self.0 & EDGE_ALIAS != 0
    }
}

/// A graph node: the POI's canonical normalized address plus location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddressNode {
    pub node_id: NodeId,
    pub address: NormalizedAddress,
    pub poi_id: String,
    pub aoi_id: String,
    pub lat: f64,
    pub lon: f64,
}

/// Undirected heterogeneous address graph with typed edges.
#[derive(Debug, Clone, Default)]
pub struct HeteroGraph {
    pub nodes: Vec<AddressNode>,
    adjacency: Vec<BTreeMap<NodeId, EdgeCode>>,
}

impl HeteroGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: NodeId) -> Result<&AddressNode, GraphError> {
        self.nodes
            .get(v.0 as usize)
            .ok_or(GraphError::NodeNotFound(v))
    }

    /// First-order neighbors of `v` with their edge codes, ascending by id.
    pub fn neighbors(&self, v: NodeId) -> Result<Vec<(NodeId, EdgeCode)>, GraphError> {
        self.adjacency
            .get(v.0 as usize)
            .map(|m| m.iter().map(|(&n, &c)| (n, c)).collect())
            .ok_or(GraphError::NodeNotFound(v))
    }

    pub fn degree(&self, v: NodeId) -> Result<usize, GraphError> {
        self.adjacency
            .get(v.0 as usize)
            .map(|m| m.len())
            .ok_or(GraphError::NodeNotFound(v))
    }

    pub fn edge(&self, a: NodeId, b: NodeId) -> Option<EdgeCode> {
        self.adjacency.get(a.0 as usize)?.get(&b).copied()
    }

    fn or_edge(&mut self, a: NodeId, b: NodeId, bits: u8) {
        if a == b {
            return;
        }
        let entry = self.adjacency[a.0 as usize]
            .entry(b)
            .or_insert(EdgeCode(0));
        entry.0 |= bits;
        let entry = self.adjacency[b.0 as usize]
            .entry(a)
            .or_insert(EdgeCode(0));
        entry.0 |= bits;
    }

    /// All edges as (a, b, code) with a < b, ascending.
    pub fn edges(&self) -> Vec<(NodeId, NodeId, EdgeCode)> {
        let mut out = Vec::new();
        for (a, nbrs) in self.adjacency.iter().enumerate() {
            for (&b, &code) in nbrs {
                if (a as u32) < b.0 {
                    out.push((NodeId(a as u32), b, code));
                }
            }
        }
        out
    }

    /// Write `nodes.jsonl` and `edges.tsv` (`a\tb\tbits` with a < b).
    pub fn save(&self, dir: &Path) -> Result<(), GraphError> {
        write_jsonl(&dir.join("nodes.jsonl"), &self.nodes)?;
        let path = dir.join("edges.tsv");
        let file = std::fs::File::create(&path).map_err(|e| IoError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for (a, b, code) in self.edges() {
            writeln!(w, "{}\t{}\t{}", a.0, b.0, code.0).map_err(|e| IoError::io(&path, e))?;
        }
        w.flush().map_err(|e| IoError::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<HeteroGraph, GraphError> {
        let nodes: Vec<AddressNode> = read_jsonl(&dir.join("nodes.jsonl"))?;
        for (i, node) in nodes.iter().enumerate() {
            if node.node_id.0 as usize != i {
                return Err(GraphError::FormatError {
                    path: dir.join("nodes.jsonl").display().to_string(),
                    line: i + 1,
                    message: format!("node_id {} at line {}", node.node_id.0, i + 1),
                });
            }
        }
        let mut graph = HeteroGraph {
            adjacency: vec![BTreeMap::new(); nodes.len()],
            nodes,
        };
        let path = dir.join("edges.tsv");
        let file = std::fs::File::open(&path).map_err(|e| IoError::io(&path, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| IoError::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| GraphError::FormatError {
                path: path.display().to_string(),
                line: i + 1,
                message,
            };
            let mut fields = line.split('\t');
            let mut next_num = |name: &str| {
                fields
                    .next()
                    .ok_or_else(|| bad(format!("missing field {name}")))?
                    .parse::<u32>()
                    .map_err(|e| bad(format!("bad {name}: {e}")))
            };
            let a = next_num("node_a")?;
            let b = next_num("node_b")?;
            let bits = next_num("bits")?;
            if a as usize >= graph.len() || b as usize >= graph.len() {
                return Err(bad(format!("edge ({a}, {b}) references unknown node")));
            }
            if bits == 0 || bits > 7 {
                return Err(bad(format!("edge bits {bits} outside 1..=7")));
            }
            graph.or_edge(NodeId(a), NodeId(b), bits as u8);
        }
        Ok(graph)
    }
}

/// Build the heterogeneous graph from a delivery log and the POI library.
///
/// One node per POI, carrying its canonical administrative address.
/// Delivery Route edges join consecutive distinct POIs of each sequence;
/// AOI Co-locate edges join every POI pair sharing an AOI; Alias edges join
/// POIs whose administrative addresses match exactly (all six fields of the
/// canonical address), which is how alias pairs are identified.
pub fn build_graph(
    deliveries: &[DeliveryRecord],
    pois: &PoiTable,
    _tree: &AdminTree,
) -> Result<HeteroGraph, GraphError> {
    let mut graph = HeteroGraph::default();
    let mut by_poi: BTreeMap<&str, NodeId> = BTreeMap::new();
    for entry in pois.iter() {
        let id = NodeId(graph.nodes.len() as u32);
        by_poi.insert(&entry.poi_id, id);
        graph.nodes.push(AddressNode {
            node_id: id,
            address: entry.canonical().clone(),
            poi_id: entry.poi_id.clone(),
            aoi_id: entry.aoi_id.clone(),
            lat: entry.lat,
            lon: entry.lon,
        });
    }
    graph.adjacency = vec![BTreeMap::new(); graph.nodes.len()];

    // Delivery Route: consecutive distinct
    // POIs within one (courier, sequence)
    let mut prev: Option<(&str, &str, NodeId)> = None;
    for (i, record) in deliveries.iter().enumerate() {
        let node = *by_poi
            .get(record.poi_id.as_str())
            .ok_or_else(|| GraphError::IngestError {
                locator: format!(
                    "record {i} ({}/{} step {})",
                    record.courier_id, record.sequence_id, record.step_index
                ),
                message: format!("unknown poi_id {}", record.poi_id),
            })?;
        if let Some((courier, sequence, prev_node)) = prev {
            if courier == record.courier_id && sequence == record.sequence_id {
                graph.or_edge(prev_node, node, EDGE_ROUTE);
            }
        }
        prev = Some((&record.courier_id, &record.sequence_id, node));
    }

    // AOI Co-locate: all pairs inside each AOI
    let mut by_aoi: BTreeMap<&str, Vec<NodeId>> = BTreeMap::new();
    for node in &graph.nodes {
        by_aoi.entry(node.aoi_id.as_str()).or_default().push(node.node_id);
    }
    let colocate_pairs = clique_pairs(by_aoi.values());

    // Alias: exact match of all six administrative fields of the canonical
    // address (POI name excluded)
    let mut by_admin: BTreeMap<(&str, &str, &str, &str, &str, &str), Vec<NodeId>> =
        BTreeMap::new();
    for node in &graph.nodes {
        let a = &node.address;
        by_admin
            .entry((
                a.province.as_str(),
                a.city.as_str(),
                a.district.as_str(),
                a.town.as_str(),
                a.road.as_str(),
                a.road_number.as_str(),
            ))
            .or_default()
            .push(node.node_id);
    }
    let alias_pairs = clique_pairs(by_admin.values());

    for (a, b) in colocate_pairs {
        graph.or_edge(a, b, EDGE_COLOCATE);
    }
    for (a, b) in alias_pairs {
        graph.or_edge(a, b, EDGE_ALIAS);
    }

    Ok(graph)
}

fn clique_pairs<'a>(groups: impl Iterator<Item = &'a Vec<NodeId>>) -> Vec<(NodeId, NodeId)> {
    let mut pairs = Vec::new();
    for members in groups {
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address::{NormalizedAddress, PoiEntry};
    use crate::synth::{generate_world, WorldConfig};

    fn record(courier: &str, step: u32, poi: &PoiEntry) -> DeliveryRecord {
        DeliveryRecord {
            courier_id: courier.to_string(),
            sequence_id: format!("{courier}-S0"),
            step_index: step,
            raw_address: poi.canonical().full_text.clone(),
            lat: poi.lat,
            lon: poi.lon,
            aoi_id: poi.aoi_id.clone(),
            poi_id: poi.poi_id.clone(),
        }
    }

    fn poi(id: &str, name: &str, aoi: &str, number: &str) -> PoiEntry {
        PoiEntry {
            poi_id: id.to_string(),
            name: name.to_string(),
            aoi_id: aoi.to_string(),
            lat: 30.0,
            lon: 120.0,
            addresses: vec![NormalizedAddress::from_fields(
                ["Province03", "City12", "District5", "TownQ", "RoadA7"],
                number,
                name,
            )],
            alias_of: None,
        }
    }

    fn toy_tree() -> AdminTree {
        use crate::address::AdminRegion;
        let mut regions = Vec::new();
        let chain = [
            ("Province03", 1, None),
            ("City12", 2, Some("Province03")),
            ("District5", 3, Some("City12")),
            ("TownQ", 4, Some("District5")),
            ("RoadA7", 5, Some("TownQ")),
        ];
        for (id, level, parent) in chain {
            regions.push(AdminRegion {
                region_id: id.to_string(),
                name: id.to_string(),
                level,
                parent_id: parent.map(String::from),
            });
        }
        AdminTree::from_regions(regions).unwrap()
    }

    #[test]
    fn route_plus_alias_codes_as_five() {
        // alias pair (same administrative address, different names) placed in
        // different AOIs so the co-locate bit stays clear, visited
        // consecutively by one courier
        let a = poi("PoiA", "MallX", "Aoi0", "No.1");
        let mut b = poi("PoiB", "MallY", "Aoi1", "No.1");
        b.alias_of = Some("PoiA".into());
        let pois = PoiTable::from_entries(vec![a.clone(), b.clone()]);
        let records = vec![record("K0", 0, &a), record("K0", 1, &b)];
        let graph = build_graph(&records, &pois, &toy_tree()).unwrap();
        let code = graph.edge(NodeId(0), NodeId(1)).unwrap();
        assert_eq!(code.0, 5);
        assert_eq!(format!("{:03b}", code.0), "101");
        assert!(code.has_route() && code.has_alias() && !code.has_colocate());
    }

    #[test]
    fn single_record_sequence_has_no_route_edges() {
        let a = poi("PoiA", "MallX", "Aoi0", "No.1");
        let b = poi("PoiB", "MallY", "Aoi1", "No.2");
        let pois = PoiTable::from_entries(vec![a.clone(), b]);
        let records = vec![record("K0", 0, &a)];
        let graph = build_graph(&records, &pois, &toy_tree()).unwrap();
        assert!(graph.edges().iter().all(|(_, _, c)| !c.has_route()));
    }

    #[test]
    fn same_poi_twice_makes_no_self_loop() {
        let a = poi("PoiA", "MallX", "Aoi0", "No.1");
        let pois = PoiTable::from_entries(vec![a.clone()]);
        let records = vec![record("K0", 0, &a), record("K0", 1, &a)];
        let graph = build_graph(&records, &pois, &toy_tree()).unwrap();
        assert!(graph.edges().is_empty());
        assert_eq!(graph.degree(NodeId(0)).unwrap(), 0);
    }

    #[test]
    fn sequence_boundaries_break_routes() {
        let a = poi("PoiA", "MallX", "Aoi0", "No.1");
        let b = poi("PoiB", "MallY", "Aoi1", "No.2");
        let pois = PoiTable::from_entries(vec![a.clone(), b.clone()]);
        // last stop of courier K0 and first stop of K1: no route edge
        let records = vec![record("K0", 0, &a), record("K1", 0, &b)];
        let graph = build_graph(&records, &pois, &toy_tree()).unwrap();
        assert!(graph.edge(NodeId(0), NodeId(1)).is_none());
    }

    #[test]
    fn colocate_pairs_form_cliques() {
        let entries: Vec<PoiEntry> = (0..5)
            .map(|i| poi(&format!("Poi{i}"), &format!("Mall{i}"), "Aoi0", &format!("No.{i}")))
            .collect();
        let pois = PoiTable::from_entries(entries.clone());
        let records = vec![record("K0", 0, &entries[0])];
        let graph = build_graph(&records, &pois, &toy_tree()).unwrap();
        let colocate = graph
            .edges()
            .iter()
            .filter(|(_, _, c)| c.has_colocate())
            .count();
        assert_eq!(colocate, 5 * 4 / 2);
        assert_eq!(graph.degree(NodeId(0)).unwrap(), 4);
    }

    #[test]
    fn unknown_poi_reports_locator() {
        let a = poi("PoiA", "MallX", "Aoi0", "No.1");
        let pois = PoiTable::from_entries(vec![a.clone()]);
        let mut bad = record("K7", 3, &a);
        bad.poi_id = "PoiMissing".into();
        let err = build_graph(&[bad], &pois, &toy_tree()).unwrap_err();
        match err {
            GraphError::IngestError { locator, .. } => {
                assert!(locator.contains("K7"), "{locator}");
                assert!(locator.contains("step 3"), "{locator}");
            }
            other => panic!("expected IngestError, got {other:?}"),
        }
    }

    #[test]
    fn generator_graph_is_symmetric_with_sorted_neighbors() {
        let world = generate_world(&WorldConfig::tiny(23)).unwrap();
        let graph = build_graph(&world.deliveries, &world.pois, &world.tree).unwrap();
        assert!(graph.len() > 10);
        for node in &graph.nodes {
            let nbrs = graph.neighbors(node.node_id).unwrap();
            for pair in nbrs.windows(2) {
                assert!(pair[0].0 < pair[1].0, "ascending order");
            }
            for (other, code) in nbrs {
                assert_eq!(graph.edge(other, node.node_id), Some(code), "symmetry");
            }
            assert_eq!(
                graph.degree(node.node_id).unwrap(),
                graph.neighbors(node.node_id).unwrap().len()
            );
        }
    }

    #[test]
    fn generator_alias_edges_connect_equal_coordinates() {
        let mut cfg = WorldConfig::tiny(31);
        cfg.alias_fraction = 0.5;
        let world = generate_world(&cfg).unwrap();
        let graph = build_graph(&world.deliveries, &world.pois, &world.tree).unwrap();
        let mut alias_edges = 0;
        for (a, b, code) in graph.edges() {
            if code.has_alias() {
                let (na, nb) = (graph.node(a).unwrap(), graph.node(b).unwrap());
                assert_eq!((na.lat, na.lon), (nb.lat, nb.lon));
                alias_edges += 1;
            }
        }
        let alias_pois = world.pois.iter().filter(|p| p.alias_of.is_some()).count();
        assert_eq!(alias_edges, alias_pois);
    }

    #[test]
    fn route_bit_matches_record_stream() {
        let world = generate_world(&WorldConfig::tiny(37)).unwrap();
        let graph = build_graph(&world.deliveries, &world.pois, &world.tree).unwrap();
        // collect consecutive pairs straight from the stream
        let mut expected: std::collections::BTreeSet<(String, String)> = Default::default();
        for pair in world.deliveries.windows(2) {
            if pair[0].sequence_id == pair[1].sequence_id && pair[0].poi_id != pair[1].poi_id {
                let (a, b) = (pair[0].poi_id.clone(), pair[1].poi_id.clone());
                expected.insert(if a < b { (a, b) } else { (b, a) });
            }
        }
        let mut actual: std::collections::BTreeSet<(String, String)> = Default::default();
        for (a, b, code) in graph.edges() {
            if code.has_route() {
                let (pa, pb) = (
                    graph.node(a).unwrap().poi_id.clone(),
                    graph.node(b).unwrap().poi_id.clone(),
                );
                actual.insert(if pa < pb { (pa, pb) } else { (pb, pa) });
            }
        }
        assert_eq!(expected, actual);
    }

    #[test]
    fn save_load_roundtrip_structural_equality() {
        let world = generate_world(&WorldConfig::tiny(41)).unwrap();
        let graph = build_graph(&world.deliveries, &world.pois, &world.tree).unwrap();
        let dir = tempfile::tempdir().unwrap();
        graph.save(dir.path()).unwrap();
        let loaded = HeteroGraph::load(dir.path()).unwrap();
        assert_eq!(loaded.nodes, graph.nodes);
        assert_eq!(loaded.edges(), graph.edges());
    }

    #[test]
    fn empty_graph_roundtrip() {
        let graph = HeteroGraph::default();
        let dir = tempfile::tempdir().unwrap();
        graph.save(dir.path()).unwrap();
        let loaded = HeteroGraph::load(dir.path()).unwrap();
        assert!(loaded.is_empty());
        assert!(loaded.edges().is_empty());
    }

    #[test]
    fn truncated_edge_file_is_a_format_error() {
        let world = generate_world(&WorldConfig::tiny(43)).unwrap();
        let graph = build_graph(&world.deliveries, &world.pois, &world.tree).unwrap();
        let dir = tempfile::tempdir().unwrap();
        graph.save(dir.path()).unwrap();
        let edges = std::fs::read_to_string(dir.path().join("edges.tsv")).unwrap();
        // cut the second line in half so it loses its bits field
        let first_newline = edges.find('\n').unwrap();
        let second = edges[first_newline + 1..].split('\t').next().unwrap();
        let truncated = format!("{}\n{}", &edges[..first_newline], second);
        std::fs::write(dir.path().join("edges.tsv"), truncated).unwrap();
        match HeteroGraph::load(dir.path()) {
            Err(GraphError::FormatError { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected FormatError, got {other:?}"),
        }
    }

    #[test]
    fn neighbors_match_edge_table_scan() {
        let world = generate_world(&WorldConfig::tiny(47)).unwrap();
        let graph = build_graph(&world.deliveries, &world.pois, &world.tree).unwrap();
        let edges = graph.edges();
        for probe in [0u32, 5, 17] {
            let v = NodeId(probe);
            let mut expected: Vec<(NodeId, EdgeCode)> = edges
                .iter()
                .filter_map(|&(a, b, c)| {
                    if a == v {
                        Some((b, c))
                    } else if b == v {
                        Some((a, c))
                    } else {
                        None
                    }
                })
                .collect();
            expected.sort_by_key(|(n, _)| *n);
            assert_eq!(graph.neighbors(v).unwrap(), expected);
        }
        assert!(matches!(
            graph.neighbors(NodeId(99999)),
            Err(GraphError::NodeNotFound(_))
        ));
    }
}
