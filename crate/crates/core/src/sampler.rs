//! Training-subgraph sampling by probabilistic frontier expansion.
//!
//! Starting from a base node, the sampler repeatedly draws a node uniformly
//! from the current frontier (the base node's first-order neighbors), adds it
//! if unseen, and removes it from the frontier. After each addition it
//! re-roots with probability `p` at a uniformly random node already in the
//! sample, resetting the frontier to that node's neighbors; when the frontier
//! runs dry it re-roots unconditionally. Sampling stops at `k` nodes, or
//! earlier with the whole connected component when the component has fewer
//! than `k` nodes (the bare expansion loop would otherwise never terminate
//! on small components).

use crate::graph::{EdgeCode, HeteroGraph, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("node {0:?} not found")]
    NodeNotFound(NodeId),
    #[error("cannot sample from an empty graph")]
    EmptyGraph,
}

/// Sampling parameters: sample size `k`, re-root probability `p`, seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub k: usize,
    pub p: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            k: 6,
            p: 0.8,
            seed: 0,
        }
    }
}

/// A sampled subgraph: nodes in insertion order plus every edge of the full
/// graph between them, keyed by local index pairs (i < j).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSubgraph {
    pub node_ids: Vec<NodeId>,
    pub induced_edges: Vec<(usize, usize, EdgeCode)>,
}

impl SampledSubgraph {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    /// Edge code between two local indices, if present.
    pub fn edge(&self, i: usize, j: usize) -> Option<EdgeCode> {
        let key = (i.min(j), i.max(j));
        self.induced_edges
            .iter()
            .find(|&&(a, b, _)| (a, b) == key)
            .map(|&(_, _, c)| c)
    }
}

/// Mix a corpus seed with a sample index so each sample is independently
/// reproducible regardless of generation order (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sample a subgraph of up to `cfg.k` nodes around `base`. Deterministic
/// given `(graph, base, cfg)`; the first node is always `base`.
pub fn sample(
    g: &HeteroGraph,
    base: NodeId,
    cfg: &SampleConfig,
) -> Result<SampledSubgraph, SamplerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_with_rng(g, base, cfg, &mut rng)
}

fn sample_with_rng(
    g: &HeteroGraph,
    base: NodeId,
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SampledSubgraph, SamplerError> {
    if (base.0 as usize) >= g.len() {
        return Err(SamplerError::NodeNotFound(base));
    }
    let mut nodes = vec![base];
    let mut in_sample: std::collections::BTreeSet<NodeId> = [base].into();
    let mut frontier: Vec<NodeId> = g
        .neighbors(base)
        .map_err(|_| SamplerError::NodeNotFound(base))?
        .into_iter()
        .map(|(n, _)| n)
        .collect();

    while nodes.len() < cfg.k {
        if !frontier.is_empty() {
            let pick = rng.gen_range(0..frontier.len());
            let v = frontier.swap_remove(pick);
            if in_sample.insert(v) {
                nodes.push(v);
                // re-root only after a successful addition
                if rng.gen_range(0.0f64..1.0) < cfg.p {
                    reroot(g, &nodes, &mut frontier, rng);
                }
            }
        } else {
            // the sample has swallowed its whole component once no member
            // has an unvisited neighbor; stop instead of re-rooting forever
            let expandable = nodes.iter().any(|&v| {
                g.neighbors(v)
                    .map(|ns| ns.iter().any(|(n, _)| !in_sample.contains(n)))
                    .unwrap_or(false)
            });
            if !expandable {
                break;
            }
            reroot(g, &nodes, &mut frontier, rng);
        }
    }

    // induced edges: every graph edge among the sampled nodes
    let mut induced_edges = Vec::new();
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            if let Some(code) = g.edge(nodes[i], nodes[j]) {
                induced_edges.push((i, j, code));
            }
        }
    }
    Ok(SampledSubgraph {
        node_ids: nodes,
        induced_edges,
    })
}

fn reroot(g: &HeteroGraph, nodes: &[NodeId], frontier: &mut Vec<NodeId>, rng: &mut ChaCha8Rng) {
    let root = nodes[rng.gen_range(0..nodes.len())];
    *frontier = g
        .neighbors(root)
        .expect("sampled node exists")
        .into_iter()
        .map(|(n, _)| n)
        .collect();
}

/// Sample `n_samples` subgraphs with uniformly random base nodes. Per-sample
/// seeds come from `derive_seed(cfg.seed, index)`, so any sample can be
/// regenerated independently.
pub fn sample_corpus(
    g: &HeteroGraph,
    n_samples: usize,
    cfg: &SampleConfig,
) -> Result<Vec<SampledSubgraph>, SamplerError> {
    if g.is_empty() {
        return Err(SamplerError::EmptyGraph);
    }
    let mut out = Vec::with_capacity(n_samples);
    for index in 0..n_samples {
        out.push(sample_one_of_corpus(g, index as u64, cfg)?);
    }
    Ok(out)
}

/// Regenerate the corpus sample at `index` without touching the others.
pub fn sample_one_of_corpus(
    g: &HeteroGraph,
    index: u64,
    cfg: &SampleConfig,
) -> Result<SampledSubgraph, SamplerError> {
    if g.is_empty() {
        return Err(SamplerError::EmptyGraph);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index));
    let base = NodeId(rng.gen_range(0..g.len() as u32));
    sample_with_rng(g, base, cfg, &mut rng)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::address::{NormalizedAddress, PoiEntry, PoiTable};
    use crate::graph::build_graph;
    use crate::synth::{generate_world, WorldConfig};
    use std::collections::BTreeSet;

    /// Graph from an explicit edge list over n nodes (isolated by default).
    pub(crate) fn graph_from_edges(n: usize, edges: &[(u32, u32)]) -> HeteroGraph {
        // route edges between consecutive records realize the wanted topology
        let entries: Vec<PoiEntry> = (0..n)
            .map(|i| PoiEntry {
                poi_id: format!("Poi{i:05}"),
                name: format!("Mall{i}"),
                aoi_id: format!("Aoi{i:04}"), // one POI per AOI: no co-locate edges
                lat: 30.0,
                lon: 120.0,
                addresses: vec![NormalizedAddress::from_fields(
                    ["P", "", "", "", ""],
                    &format!("No.{i}"),
                    &format!("Mall{i}"),
                )],
                alias_of: None,
            })
            .collect();
        let pois = PoiTable::from_entries(entries.clone());
        let tree = crate::address::AdminTree::from_regions(vec![crate::address::AdminRegion {
            region_id: "P".into(),
            name: "P".into(),
            level: 1,
            parent_id: None,
        }])
        .unwrap();
        let mut records = Vec::new();
        for (s, &(a, b)) in edges.iter().enumerate() {
            for (step, node) in [(0u32, a), (1, b)] {
                let e = &entries[node as usize];
                records.push(crate::synth::DeliveryRecord {
                    courier_id: format!("K{s:03}"),
                    sequence_id: format!("K{s:03}-S0"),
                    step_index: step,
                    raw_address: e.canonical().full_text.clone(),
                    lat: e.lat,
                    lon: e.lon,
                    aoi_id: e.aoi_id.clone(),
                    poi_id: e.poi_id.clone(),
                });
            }
        }
        build_graph(&records, &pois, &tree).unwrap()
    }

    fn component_of(g: &HeteroGraph, start: NodeId) -> BTreeSet<NodeId> {
        let mut seen: BTreeSet<NodeId> = [start].into();
        let mut queue = vec![start];
        while let Some(v) = queue.pop() {
            for (n, _) in g.neighbors(v).unwrap() {
                if seen.insert(n) {
                    queue.push(n);
                }
            }
        }
        seen
    }

    #[test]
    fn k_one_returns_only_base() {
        let g = graph_from_edges(4, &[(0, 1), (1, 2), (2, 3)]);
        let s = sample(&g, NodeId(2), &SampleConfig { k: 1, p: 0.8, seed: 9 }).unwrap();
        assert_eq!(s.node_ids, vec![NodeId(2)]);
        assert!(s.induced_edges.is_empty());
    }

    #[test]
    fn small_component_terminates_with_full_component() {
        // component {0,1,2} plus a separate pair {3,4}
        let g = graph_from_edges(5, &[(0, 1), (1, 2), (3, 4)]);
        for seed in 0..50 {
            let s = sample(&g, NodeId(0), &SampleConfig { k: 6, p: 0.8, seed }).unwrap();
            let got: BTreeSet<NodeId> = s.node_ids.iter().copied().collect();
            assert_eq!(got, component_of(&g, NodeId(0)));
            assert_eq!(s.node_ids.len(), 3);
        }
    }

    #[test]
    fn path_graph_p_zero_walks_the_path() {
        // A-B-C-D from A with k=3: only C is ever reachable as the third node
        let g = graph_from_edges(4, &[(0, 1), (1, 2), (2, 3)]);
        for seed in 0..20 {
            let s = sample(&g, NodeId(0), &SampleConfig { k: 3, p: 0.0, seed }).unwrap();
            assert_eq!(s.node_ids, vec![NodeId(0), NodeId(1), NodeId(2)]);
        }
    }

    #[test]
    fn unknown_base_errors() {
        let g = graph_from_edges(3, &[(0, 1)]);
        assert!(matches!(
            sample(&g, NodeId(17), &SampleConfig::default()),
            Err(SamplerError::NodeNotFound(_))
        ));
    }

    #[test]
    fn determinism_and_base_first() {
        let world = generate_world(&WorldConfig::tiny(3)).unwrap();
        let g = build_graph(&world.deliveries, &world.pois, &world.tree).unwrap();
        let cfg = SampleConfig { k: 6, p: 0.8, seed: 123 };
        let a = sample(&g, NodeId(5), &cfg).unwrap();
        let b = sample(&g, NodeId(5), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.node_ids[0], NodeId(5));
        let distinct: BTreeSet<_> = a.node_ids.iter().collect();
        assert_eq!(distinct.len(), a.node_ids.len());
    }

    #[test]
    fn induced_edges_match_direct_lookup() {
        let world = generate_world(&WorldConfig::tiny(5)).unwrap();
        let g = build_graph(&world.deliveries, &world.pois, &world.tree).unwrap();
        let corpus = sample_corpus(&g, 50, &SampleConfig { k: 6, p: 0.8, seed: 7 }).unwrap();
        for s in &corpus {
            for i in 0..s.len() {
                for j in i + 1..s.len() {
                    assert_eq!(
                        s.edge(i, j),
                        g.edge(s.node_ids[i], s.node_ids[j]),
                        "pair ({i}, {j})"
                    );
                }
            }
        }
    }

    #[test]
    fn sampled_nodes_stay_connected_to_base() {
        let world = generate_world(&WorldConfig::tiny(19)).unwrap();
        let g = build_graph(&world.deliveries, &world.pois, &world.tree).unwrap();
        for index in 0..30 {
            let s =
                sample_one_of_corpus(&g, index, &SampleConfig { k: 6, p: 0.8, seed: 11 }).unwrap();
            let comp = component_of(&g, s.node_ids[0]);
            assert!(s.node_ids.iter().all(|n| comp.contains(n)));
        }
    }

    #[test]
    fn corpus_is_reproducible_per_sample() {
        let world = generate_world(&WorldConfig::tiny(29)).unwrap();
        let g = build_graph(&world.deliveries, &world.pois, &world.tree).unwrap();
        let cfg = SampleConfig { k: 6, p: 0.8, seed: 99 };
        let corpus = sample_corpus(&g, 20, &cfg).unwrap();
        assert_eq!(corpus.len(), 20);
        for (i, s) in corpus.iter().enumerate() {
            assert_eq!(&sample_one_of_corpus(&g, i as u64, &cfg).unwrap(), s);
        }
        assert_eq!(sample_corpus(&g, 0, &cfg).unwrap().len(), 0);
    }

    #[test]
    fn empty_graph_is_an_error() {
        let g = HeteroGraph::default();
        assert!(matches!(
            sample_corpus(&g, 5, &SampleConfig::default()),
            Err(SamplerError::EmptyGraph)
        ));
    }

    #[test]
    fn star_graph_leaves_picked_uniformly() {
        // star with 4 leaves, base = center, k = 3, p = 0: two of the four
        // leaves get picked; by symmetry each leaf appears with frequency 1/2
        let g = graph_from_edges(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        let mut counts = [0usize; 4];
        let trials = 10_000;
        for seed in 0..trials {
            let s = sample(&g, NodeId(0), &SampleConfig { k: 3, p: 0.0, seed }).unwrap();
            assert_eq!(s.node_ids.len(), 3);
            for n in &s.node_ids[1..] {
                counts[n.0 as usize - 1] += 1;
            }
        }
        for (leaf, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!(
                (freq - 0.5).abs() < 0.05,
                "leaf {leaf} frequency {freq} not within 0.5 +/- 0.05"
            );
        }
    }
}
