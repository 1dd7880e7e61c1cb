//! Self-contained property suite behind `addrgraph verify`: oracle checks
//! for the sampler and shortest paths, geocode bijections, masking
//! statistics, the finite-difference gradient check, and checkpoint
//! roundtrips. Prints one line per check and exits nonzero on any failure.

use crate::config::PipelineConfig;
use addrgraph::features::featurize;
use addrgraph::geocode::{
    cell_center, cell_from_latlon, decode_2lt3c, encode_2lt3c, haversine_km, label_len, CellId,
};
use addrgraph::graph::{build_graph, HeteroGraph, NodeId};
use addrgraph::model::{
    gradient_check, Batch, HtcSpace, ModelConfig, ModelParams, TaskWeights,
};
use addrgraph::pretask::{
    build_pretrain_sample, make_mlm, tokenize, RegionAction, ReplacementPools, Vocab,
};
use addrgraph::sampler::{sample, sample_corpus, SampleConfig};
use addrgraph::synth::{generate_world, World, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

type CheckResult = Result<String, String>;

struct Fixture {
    world: World,
    graph: HeteroGraph,
    vocab: Vocab,
    pools: ReplacementPools,
    space: HtcSpace,
}

fn fixture(seed: u64) -> Result<Fixture, String> {
    let world = generate_world(&WorldConfig::tiny(seed)).map_err(|e| e.to_string())?;
    let graph =
        build_graph(&world.deliveries, &world.pois, &world.tree).map_err(|e| e.to_string())?;
    let texts = crate::commands::vocab_texts_for(&world);
    let vocab = Vocab::build(texts.iter().map(|s| s.as_str()));
    let pools = ReplacementPools::from_world(&world.tree, &world.pois);
    let space = HtcSpace::from_tree(&world.tree);
    Ok(Fixture {
        world,
        graph,
        vocab,
        pools,
        space,
    })
}

fn check_geocode_bijection() -> CheckResult {
    // exhaustive at shallow levels
    for level in 1u8..=3 {
        for face in 0u8..6 {
            for code in 0..4usize.pow(level as u32) {
                let mut path = Vec::new();
                let mut c = code;
                for _ in 0..level {
                    path.push((c % 4) as u8);
                    c /= 4;
                }
                path.reverse();
                let cell = CellId { face, level, path };
                let label = encode_2lt3c(&cell);
                if decode_2lt3c(&label, face).map_err(|e| e.to_string())? != cell {
                    return Err(format!("roundtrip failed at level {level} face {face}"));
                }
            }
        }
    }
    // random deep cells
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..2000 {
        for level in [18u8, 22] {
            let face = rng.gen_range(0..6);
            let path: Vec<u8> = (0..level).map(|_| rng.gen_range(0..4)).collect();
            let cell = CellId { face, level, path };
            let label = encode_2lt3c(&cell);
            let expected = if level == 18 { 27 } else { 33 };
            if label.chars.len() != expected {
                return Err(format!("level {level} label length {}", label.chars.len()));
            }
            if decode_2lt3c(&label, face).map_err(|e| e.to_string())? != cell {
                return Err(format!("roundtrip failed at level {level}"));
            }
        }
    }
    Ok("exhaustive <=3 plus 2000 random level-18/22 roundtrips".into())
}

fn check_geocode_centers() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut max_err = 0.0f64;
    for _ in 0..1000 {
        let lat = rng.gen_range(30.0..30.2);
        let lon = rng.gen_range(120.0..120.2);
        let cell = cell_from_latlon(lat, lon, 18).map_err(|e| e.to_string())?;
        let center = cell_center(&cell);
        if cell_from_latlon(center.0, center.1, 18).map_err(|e| e.to_string())? != cell {
            return Err("center left its own cell".into());
        }
        max_err = max_err.max(haversine_km((lat, lon), center) * 1000.0);
    }
    if max_err >= 49.0 {
        return Err(format!("level-18 center error {max_err:.1} m exceeds 49 m"));
    }
    Ok(format!("1000 centers contained, max error {max_err:.1} m"))
}

fn check_sampler_oracle(fx: &Fixture) -> CheckResult {
    let cfg = SampleConfig {
        k: 6,
        p: 0.8,
        seed: 17,
    };
    let corpus = sample_corpus(&fx.graph, 300, &cfg).map_err(|e| e.to_string())?;
    for s in &corpus {
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                if s.edge(i, j) != fx.graph.edge(s.node_ids[i], s.node_ids[j]) {
                    return Err(format!("induced edge ({i},{j}) mismatch"));
                }
            }
        }
    }
    // k beyond the component returns the whole component
    let base = NodeId(0);
    let mut component = std::collections::BTreeSet::from([base]);
    let mut queue = vec![base];
    while let Some(v) = queue.pop() {
        for (n, _) in fx.graph.neighbors(v).map_err(|e| e.to_string())? {
            if component.insert(n) {
                queue.push(n);
            }
        }
    }
    let big_k = SampleConfig {
        k: fx.graph.len() + 10,
        p: 0.8,
        seed: 3,
    };
    let s = sample(&fx.graph, base, &big_k).map_err(|e| e.to_string())?;
    let got: std::collections::BTreeSet<NodeId> = s.node_ids.iter().copied().collect();
    if got != component {
        return Err("oversized k did not return the full component".into());
    }
    Ok(format!(
        "300 samples match adjacency; component of {} nodes returned intact",
        component.len()
    ))
}

fn check_shortest_paths(fx: &Fixture) -> CheckResult {
    let cfg = SampleConfig {
        k: 7,
        p: 0.8,
        seed: 29,
    };
    let corpus = sample_corpus(&fx.graph, 100, &cfg).map_err(|e| e.to_string())?;
    for s in &corpus {
        let f = featurize(&fx.graph, s, &Default::default()).map_err(|e| e.to_string())?;
        let n = f.n;
        // Floyd-Warshall distances
        const INF: u32 = u32::MAX / 4;
        let mut d = vec![INF; n * n];
        for i in 0..n {
            d[i * n + i] = 0;
        }
        for &(i, j, _) in &s.induced_edges {
            d[i * n + j] = 1;
            d[j * n + i] = 1;
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
        for i in 0..n {
            for j in 0..n {
                let expected = if d[i * n + j] >= INF { n as u32 } else { d[i * n + j] };
                if f.dist_at(i, j) != expected {
                    return Err(format!("dist({i},{j}) = {} vs {expected}", f.dist_at(i, j)));
                }
                if n > 1 {
                    let nonzero = f.routes_at(i, j).iter().filter(|&&c| c != 0).count() as u32;
                    let want = if expected == n as u32 { 0 } else { expected };
                    if nonzero != want {
                        return Err(format!("route prefix ({i},{j}) length {nonzero} vs {want}"));
                    }
                }
            }
        }
    }
    Ok("100 samples match Floyd-Warshall with exact route prefix lengths".into())
}

fn check_masking_statistics(fx: &Fixture) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let entries: Vec<_> = fx.world.pois.iter().collect();
    let mut units = 0usize;
    let mut selected = 0usize;
    let mut actions = [0usize; 3];
    for poi in entries.iter().cycle() {
        let t = tokenize(poi.canonical(), &fx.vocab, 64);
        units += t
            .spans
            .iter()
            .map(|&(l, s, e)| {
                if l == addrgraph::address::EntityLabel::PoiName {
                    e - s
                } else {
                    1
                }
            })
            .sum::<usize>();
        let ex = make_mlm(&t, &fx.vocab, &fx.pools, &mut rng);
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
    if (rate - 0.15).abs() >= 0.02 {
        return Err(format!("selection rate {rate:.4} not within 0.15 +/- 0.02"));
    }
    let total = actions.iter().sum::<usize>() as f64;
    let split = [
        actions[0] as f64 / total,
        actions[1] as f64 / total,
        actions[2] as f64 / total,
    ];
    for (got, want) in split.iter().zip([0.8, 0.1, 0.1]) {
        if (got - want).abs() >= 0.02 {
            return Err(format!("action split {split:?} not within 0.8/0.1/0.1 +/- 0.02"));
        }
    }
    Ok(format!(
        "selection {rate:.3}, split {:.3}/{:.3}/{:.3} over {units} units",
        split[0], split[1], split[2]
    ))
}

fn check_gradients(fx: &Fixture) -> CheckResult {
    let cfg = SampleConfig {
        k: 2,
        p: 0.8,
        seed: 53,
    };
    let corpus = sample_corpus(&fx.graph, 10, &cfg).map_err(|e| e.to_string())?;
    let s = corpus
        .iter()
        .find(|s| s.len() == 2)
        .ok_or("no 2-node sample found")?;
    let feats = featurize(&fx.graph, s, &Default::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ps = build_pretrain_sample(
        &fx.graph,
        s,
        0,
        0,
        &fx.world.tree,
        &fx.vocab,
        &fx.pools,
        16,
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    let config = ModelConfig::tiny(fx.vocab.len(), fx.space.level_sizes.clone());
    let params = ModelParams::init(config, 5).map_err(|e| e.to_string())?;
    let batch = Batch::from_pretrain(&ps, &feats, &fx.space).map_err(|e| e.to_string())?;
    let report = gradient_check(&params, &fx.space, &batch, &TaskWeights::default(), 1e-5, 1e-3)
        .map_err(|e| e.to_string())?;
    if report.max_rel_err >= 1e-6 {
        return Err(format!(
            "max relative gradient error {:.3e} over {} elements",
            report.max_rel_err, report.elements_checked
        ));
    }
    Ok(format!(
        "max relative error {:.3e} over {} elements",
        report.max_rel_err, report.elements_checked
    ))
}

fn check_checkpoint_roundtrip(fx: &Fixture) -> CheckResult {
    let config = ModelConfig::tiny(fx.vocab.len(), fx.space.level_sizes.clone());
    let params = ModelParams::init(config, 9).map_err(|e| e.to_string())?;
    let dir = std::env::temp_dir().join(format!("addrgraph-verify-{}", std::process::id()));
    let result = (|| -> CheckResult {
        params.save(&dir).map_err(|e| e.to_string())?;
        let loaded = ModelParams::load(&dir).map_err(|e| e.to_string())?;
        for (name, tensor) in params.iter() {
            let other = loaded.get(name);
            for (a, b) in tensor.data.iter().zip(&other.data) {
                if a.to_bits() != b.to_bits() {
                    return Err(format!("tensor {name} not bit-exact"));
                }
            }
        }
        Ok(format!("{} tensors bit-exact", params.names().count()))
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}

fn check_graph_structure(fx: &Fixture) -> CheckResult {
    for node in &fx.graph.nodes {
        for (other, code) in fx.graph.neighbors(node.node_id).map_err(|e| e.to_string())? {
            if fx.graph.edge(other, node.node_id) != Some(code) {
                return Err(format!("asymmetric edge {:?} - {:?}", node.node_id, other));
            }
            if code.0 == 0 || code.0 > 7 {
                return Err(format!("edge code {} out of range", code.0));
            }
        }
    }
    Ok(format!(
        "{} nodes, {} edges symmetric with valid codes",
        fx.graph.len(),
        fx.graph.edges().len()
    ))
}

fn check_label_lengths() -> CheckResult {
    if label_len(18) != 27 || label_len(22) != 33 {
        return Err(format!(
            "label lengths 18->{} 22->{}",
            label_len(18),
            label_len(22)
        ));
    }
    Ok("level 18 -> 27 chars, level 22 -> 33 chars".into())
}

pub fn run_verify(_out_dir: &Path, config: &PipelineConfig) -> i32 {
    let fx = match fixture(config.seed) {
        Ok(fx) => fx,
        Err(e) => {
            eprintln!("verify fixture failed: {e}");
            return 1;
        }
    };
    let checks: Vec<(&str, Box<dyn Fn() -> CheckResult + '_>)> = vec![
        ("geocode-bijection", Box::new(check_geocode_bijection)),
        ("geocode-centers", Box::new(check_geocode_centers)),
        ("label-lengths", Box::new(check_label_lengths)),
        ("graph-structure", Box::new(|| check_graph_structure(&fx))),
        ("sampler-oracle", Box::new(|| check_sampler_oracle(&fx))),
        ("shortest-paths", Box::new(|| check_shortest_paths(&fx))),
        ("masking-statistics", Box::new(|| check_masking_statistics(&fx))),
        ("gradient-check", Box::new(|| check_gradients(&fx))),
        ("checkpoint-roundtrip", Box::new(|| check_checkpoint_roundtrip(&fx))),
    ];
    let mut failures = 0;
    for (name, check) in &checks {
        match check() {
            Ok(detail) => println!("verify {name}: ok ({detail})"),
            Err(message) => {
                println!("verify {name}: FAIL ({message})");
                failures += 1;
            }
        }
    }
    let line = serde_json::json!({
        "status": if failures == 0 { "ok" } else { "failed" },
        "command": "verify",
        "checks": checks.len(),
        "failures": failures,
        "config_hash": config.hash(),
    });
    println!("{line}");
    if failures == 0 {
        0
    } else {
        1
    }
}
