//! Structural features of a sampled subgraph: node degrees, insertion-order
//! positions, the all-pairs hop-distance matrix, and the path-type tensor
//! listing the edge codes along one shortest path per node pair.
//!
//! Distances are computed on the induced subgraph with unit edge weights.
//! Shortest-path ties are broken canonically: the predecessor of each node is
//! the smallest local index among valid predecessors, which pins down one
//! deterministic path per pair. Unreachable pairs store the sentinel value
//! `n` (one beyond the largest possible hop count) and an all-zero path row.

use crate::graph::HeteroGraph;
use crate::io::{push_u32s, read_bytes, read_u32s, write_bytes, IoError};
use crate::sampler::SampledSubgraph;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("inconsistent sample: {0}")]
    InconsistentSample(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Which graph the degree feature counts neighbors in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeaturizeOptions {
    /// Degrees from the full graph (default) or the induced subgraph.
    pub degrees_in_full_graph: bool,
}

impl Default for FeaturizeOptions {
    fn default() -> Self {
        FeaturizeOptions {
            degrees_in_full_graph: true,
        }
    }
}

/// Model-ready structural features of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFeatures {
    pub n: usize,
    /// Node degree, by default in the full graph.
    pub degrees: Vec<u32>,
    /// Insertion-order positions 1..=n.
    pub positions: Vec<u32>,
    /// Row-major n x n hop distances; the value n marks an unreachable pair.
    pub dist: Vec<u32>,
    /// Row-major n x n x (n-1) edge codes along the canonical shortest path,
    /// zero-padded after the first dist(i, j) entries.
    pub route_types: Vec<u8>,
}

impl SampleFeatures {
    /// Sentinel distance marking an unreachable pair.
    pub fn unreachable(&self) -> u32 {
        self.n as u32
    }

    pub fn dist_at(&self, i: usize, j: usize) -> u32 {
        self.dist[i * self.n + j]
    }

    /// Edge codes along the canonical shortest path i -> j (padded row).
    pub fn routes_at(&self, i: usize, j: usize) -> &[u8] {
        let w = self.n - 1;
        let base = (i * self.n + j) * w;
        &self.route_types[base..base + w]
    }
}

/// Turn a sampled subgraph into model features.
pub fn featurize(
    g: &HeteroGraph,
    s: &SampledSubgraph,
    options: &FeaturizeOptions,
) -> Result<SampleFeatures, FeatureError> {
    let n = s.node_ids.len();
    for &v in &s.node_ids {
        if (v.0 as usize) >= g.len() {
            return Err(FeatureError::InconsistentSample(format!(
                "sample node {} missing from graph of {} nodes",
                v.0,
                g.len()
            )));
        }
    }

    // induced adjacency over local indices, neighbors ascending
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut codes: Vec<Vec<u8>> = vec![vec![0; n]; n];
    for &(i, j, code) in &s.induced_edges {
        adj[i].push(j);
        adj[j].push(i);
        codes[i][j] = code.0;
        codes[j][i] = code.0;
    }
    for nbrs in &mut adj {
        nbrs.sort_unstable();
    }

    let degrees: Vec<u32> = if options.degrees_in_full_graph {
        s.node_ids
            .iter()
            .map(|&v| g.degree(v).expect("checked above") as u32)
            .collect()
    } else {
        adj.iter().map(|nbrs| nbrs.len() as u32).collect()
    };
    let positions: Vec<u32> = (1..=n as u32).collect();

    let sentinel = n as u32;
    let mut dist = vec![sentinel; n * n];
    let path_width = n.saturating_sub(1);
    let mut route_types = vec![0u8; n * n * path_width];

    for src in 0..n {
        // BFS distances from src
        let mut d = vec![u32::MAX; n];
        d[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if d[v] == u32::MAX {
                    d[v] = d[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        // canonical predecessor: smallest local index one hop closer to src
        let mut parent = vec![usize::MAX; n];
        for v in 0..n {
            if v == src || d[v] == u32::MAX {
                continue;
            }
            parent[v] = *adj[v]
                .iter()
                .find(|&&u| d[u] + 1 == d[v])
                .expect("reachable node has a predecessor");
        }
        for v in 0..n {
            if d[v] == u32::MAX {
                continue;
            }
            dist[src * n + v] = d[v];
            if v == src {
                continue;
            }
            // replay the parent chain v -> src, then record codes forward
            let mut chain = vec![v];
            let mut cur = v;
            while cur != src {
                cur = parent[cur];
                chain.push(cur);
            }
            chain.reverse();
            let base = (src * n + v) * path_width;
            for (t, pair) in chain.windows(2).enumerate() {
                route_types[base + t] = codes[pair[0]][pair[1]];
            }
        }
    }

    Ok(SampleFeatures {
        n,
        degrees,
        positions,
        dist,
        route_types,
    })
}

/// Shard metadata: per-record sizes and byte offsets into the `.bin` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureShardMeta {
    pub layout: String,
    pub records: Vec<FeatureRecordMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRecordMeta {
    pub index: usize,
    pub n: usize,
    pub byte_offset: usize,
}

const LAYOUT: &str = "le: degrees u32[n] | positions u32[n] | dist u32[n*n] | route_types u8[n*n*(n-1)]";

/// Write features as a flat little-endian `.bin` plus a `.meta.json` header.
pub fn write_feature_shard(
    dir: &Path,
    part: usize,
    features: &[SampleFeatures],
) -> Result<(), FeatureError> {
    let mut bin = Vec::new();
    let mut records = Vec::with_capacity(features.len());
    for (index, f) in features.iter().enumerate() {
        records.push(FeatureRecordMeta {
            index,
            n: f.n,
            byte_offset: bin.len(),
        });
        push_u32s(&mut bin, &f.degrees);
        push_u32s(&mut bin, &f.positions);
        push_u32s(&mut bin, &f.dist);
        bin.extend_from_slice(&f.route_types);
    }
    let meta = FeatureShardMeta {
        layout: LAYOUT.to_string(),
        records,
    };
    write_bytes(&dir.join(format!("part-{part:04}.bin")), &bin)?;
    let meta_path = dir.join(format!("part-{part:04}.meta.json"));
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| IoError::format(&meta_path, 0, e.to_string()))?;
    write_bytes(&meta_path, text.as_bytes())?;
    Ok(())
}

pub fn read_feature_shard(dir: &Path, part: usize) -> Result<Vec<SampleFeatures>, FeatureError> {
    let meta_path = dir.join(format!("part-{part:04}.meta.json"));
    let meta: FeatureShardMeta = serde_json::from_slice(&read_bytes(&meta_path)?)
        .map_err(|e| IoError::format(&meta_path, 0, e.to_string()))?;
    let bin = read_bytes(&dir.join(format!("part-{part:04}.bin")))?;
    let mut out = Vec::with_capacity(meta.records.len());
    for record in &meta.records {
        let n = record.n;
        let mut at = record.byte_offset;
        let mut take_u32s = |count: usize| -> Vec<u32> {
            let v = read_u32s(&bin[at..at + 4 * count]);
            at += 4 * count;
            v
        };
        let degrees = take_u32s(n);
        let positions = take_u32s(n);
        let dist = take_u32s(n * n);
        let w = n * n * n.saturating_sub(1);
        let route_types = bin[at..at + w].to_vec();
        out.push(SampleFeatures {
            n,
            degrees,
            positions,
            dist,
            route_types,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, EdgeCode, NodeId};
    use crate::sampler::{sample_corpus, tests::graph_from_edges, SampleConfig};
    use crate::synth::{generate_world, WorldConfig};

    /// Floyd-Warshall distances plus min-predecessor path replay; independent
    /// of the BFS in `featurize`.
    fn floyd_warshall_oracle(n: usize, edges: &[(usize, usize, u8)]) -> (Vec<u32>, Vec<Vec<u8>>) {
        const INF: u32 = u32::MAX / 4;
        let mut d = vec![INF; n * n];
        let mut code = vec![0u8; n * n];
        for i in 0..n {
            d[i * n + i] = 0;
        }
        for &(i, j, c) in edges {
            d[i * n + j] = 1;
            d[j * n + i] = 1;
            code[i * n + j] = c;
            code[j * n + i] = c;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = d[i * n + k].saturating_add(d[k * n + j]);
                    if via < d[i * n + j] {
                        d[i * n + j] = via;
                    }
                }
            }
        }
        // canonical path by min-index predecessor, recursively
        let mut paths = vec![Vec::new(); n * n];
        for src in 0..n {
            for v in 0..n {
                if src == v || d[src * n + v] >= INF {
                    continue;
                }
                let mut chain = vec![v];
                let mut cur = v;
                while cur != src {
                    let prev = (0..n)
                        .find(|&u| {
                            code[u * n + cur] != 0 && d[src * n + u] + 1 == d[src * n + cur]
                        })
                        .expect("predecessor exists");
                    chain.push(prev);
                    cur = prev;
                }
                chain.reverse();
                paths[src * n + v] = chain
                    .windows(2)
                    .map(|p| code[p[0] * n + p[1]])
                    .collect();
            }
        }
        let dist = d
            .iter()
            .map(|&x| if x >= INF { n as u32 } else { x })
            .collect();
        (dist, paths)
    }

    fn sample_of(node_ids: &[u32], edges: &[(usize, usize, u8)]) -> SampledSubgraph {
        SampledSubgraph {
            node_ids: node_ids.iter().map(|&i| NodeId(i)).collect(),
            induced_edges: edges
                .iter()
                .map(|&(i, j, c)| (i, j, EdgeCode(c)))
                .collect(),
        }
    }

    #[test]
    fn two_nodes_one_edge() {
        let g = graph_from_edges(2, &[(0, 1)]);
        let s = sample_of(&[0, 1], &[(0, 1, 5)]);
        let f = featurize(&g, &s, &FeaturizeOptions::default()).unwrap();
        assert_eq!(f.dist, vec![0, 1, 1, 0]);
        assert_eq!(f.routes_at(0, 1), &[5]);
        assert_eq!(f.routes_at(1, 0), &[5]);
        assert_eq!(f.positions, vec![1, 2]);
    }

    #[test]
    fn disconnected_pair_uses_sentinel() {
        let g = graph_from_edges(2, &[]);
        let s = sample_of(&[0, 1], &[]);
        let f = featurize(&g, &s, &FeaturizeOptions::default()).unwrap();
        assert_eq!(f.dist_at(0, 1), f.unreachable());
        assert_eq!(f.dist_at(0, 0), 0);
        assert!(f.routes_at(0, 1).iter().all(|&c| c == 0));
    }

    #[test]
    fn single_node_sample() {
        let g = graph_from_edges(1, &[]);
        let s = sample_of(&[0], &[]);
        let f = featurize(&g, &s, &FeaturizeOptions::default()).unwrap();
        assert_eq!(f.n, 1);
        assert_eq!(f.dist, vec![0]);
        assert!(f.route_types.is_empty());
    }

    #[test]
    fn missing_node_is_inconsistent() {
        let g = graph_from_edges(2, &[(0, 1)]);
        let s = sample_of(&[0, 7], &[]);
        assert!(matches!(
            featurize(&g, &s, &FeaturizeOptions::default()),
            Err(FeatureError::InconsistentSample(_))
        ));
    }

    #[test]
    fn degrees_come_from_full_graph_by_default() {
        // path 0-1-2-3; sample only {0, 1}: node 1 has full-graph degree 2
        let g = graph_from_edges(4, &[(0, 1), (1, 2), (2, 3)]);
        let s = sample_of(&[0, 1], &[(0, 1, 1)]);
        let f = featurize(&g, &s, &FeaturizeOptions::default()).unwrap();
        assert_eq!(f.degrees, vec![1, 2]);
        let f = featurize(
            &g,
            &s,
            &FeaturizeOptions {
                degrees_in_full_graph: false,
            },
        )
        .unwrap();
        assert_eq!(f.degrees, vec![1, 1]);
    }

    #[test]
    fn matches_floyd_warshall_on_generator_samples() {
        let world = generate_world(&WorldConfig::tiny(61)).unwrap();
        let g = build_graph(&world.deliveries, &world.pois, &world.tree).unwrap();
        let corpus = sample_corpus(&g, 120, &SampleConfig { k: 7, p: 0.8, seed: 3 }).unwrap();
        for s in &corpus {
            let f = featurize(&g, s, &FeaturizeOptions::default()).unwrap();
            let edges: Vec<(usize, usize, u8)> = s
                .induced_edges
                .iter()
                .map(|&(i, j, c)| (i, j, c.0))
                .collect();
            let (dist, paths) = floyd_warshall_oracle(s.len(), &edges);
            assert_eq!(f.dist, dist);
            for i in 0..s.len() {
                for j in 0..s.len() {
                    let expected = &paths[i * s.len() + j];
                    let got = if s.len() > 1 { f.routes_at(i, j) } else { &[][..] };
                    assert_eq!(&got[..expected.len()], expected.as_slice());
                    assert!(got[expected.len()..].iter().all(|&c| c == 0));
                }
            }
        }
    }

    #[test]
    fn route_prefix_length_equals_distance() {
        let world = generate_world(&WorldConfig::tiny(67)).unwrap();
        let g = build_graph(&world.deliveries, &world.pois, &world.tree).unwrap();
        let corpus = sample_corpus(&g, 60, &SampleConfig { k: 6, p: 0.8, seed: 4 }).unwrap();
        for s in &corpus {
            let f = featurize(&g, s, &FeaturizeOptions::default()).unwrap();
            for i in 0..f.n {
                assert_eq!(f.dist_at(i, i), 0, "diagonal");
                for j in 0..f.n {
                    assert_eq!(f.dist_at(i, j), f.dist_at(j, i), "symmetry");
                    if f.n > 1 {
                        let routes = f.routes_at(i, j);
                        let nonzero = routes.iter().filter(|&&c| c != 0).count();
                        let d = f.dist_at(i, j);
                        let expected = if d == f.unreachable() { 0 } else { d as usize };
                        assert_eq!(nonzero, expected);
                        // nonzero entries form a prefix
                        assert!(routes[..nonzero].iter().all(|&c| c != 0));
                        assert!(routes[nonzero..].iter().all(|&c| c == 0));
                    }
                }
            }
            // triangle inequality over reachable triples
            for a in 0..f.n {
                for b in 0..f.n {
                    for c in 0..f.n {
                        let (ab, bc, ac) = (f.dist_at(a, b), f.dist_at(b, c), f.dist_at(a, c));
                        let u = f.unreachable();
                        if ab != u && bc != u && ac != u {
                            assert!(ac <= ab + bc);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn permutation_consistency_when_paths_unique() {
        // fixed path graph: shortest paths are unique, so route rows must
        // map exactly under relabeling
        let g = graph_from_edges(4, &[(0, 1), (1, 2), (2, 3)]);
        let s = sample_of(&[0, 1, 2, 3], &[(0, 1, 1), (1, 2, 2), (2, 3, 4)]);
        let f = featurize(&g, &s, &FeaturizeOptions::default()).unwrap();
        // permute local order: new order [2, 0, 3, 1] of old indices
        let perm = [2usize, 0, 3, 1]; // new position -> old index
        let s2 = sample_of(
            &[2, 0, 3, 1],
            &[(1, 3, 1), (3, 0, 2), (0, 2, 4)], // same edges in new indices
        );
        let f2 = featurize(&g, &s2, &FeaturizeOptions::default()).unwrap();
        for ni in 0..4 {
            assert_eq!(f2.degrees[ni], f.degrees[perm[ni]]);
            for nj in 0..4 {
                assert_eq!(f2.dist_at(ni, nj), f.dist_at(perm[ni], perm[nj]));
                assert_eq!(f2.routes_at(ni, nj), f.routes_at(perm[ni], perm[nj]));
            }
        }
        // positions always read 1..=n in insertion order
        assert_eq!(f2.positions, vec![1, 2, 3, 4]);
    }

    #[test]
    fn shard_roundtrip() {
        let world = generate_world(&WorldConfig::tiny(71)).unwrap();
        let g = build_graph(&world.deliveries, &world.pois, &world.tree).unwrap();
        let corpus = sample_corpus(&g, 10, &SampleConfig::default()).unwrap();
        let features: Vec<SampleFeatures> = corpus
            .iter()
            .map(|s| featurize(&g, s, &FeaturizeOptions::default()).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        write_feature_shard(dir.path(), 0, &features).unwrap();
        let loaded = read_feature_shard(dir.path(), 0).unwrap();
        assert_eq!(loaded, features);
    }
}
