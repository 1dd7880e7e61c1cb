//! Implementations of the pipeline subcommands.

use crate::config::{file_digest, PipelineConfig};
use crate::{CliError, Command};
use addrgraph::address::NormalizedAddress;
use addrgraph::evaluate::{
    eval_aep, eval_aet_predictions, eval_geocoding_model, embed_addresses, predict_aet,
    cluster_metrics, GeoExample, ModelAepPredictor,
};
use addrgraph::features::{featurize, read_feature_shard, write_feature_shard, SampleFeatures};
use addrgraph::geocode::label_len;
use addrgraph::graph::{build_graph, HeteroGraph};
use addrgraph::io::{push_f64s, read_bytes, read_f64s, read_jsonl, write_bytes, write_jsonl};
use addrgraph::model::{
    evaluate_corpus, pretrain, train_step, with_geo_head, AdamState, Batch, HtcSpace, ModelParams,
    NodeBatch, TaskWeights, TrainConfig,
};
use addrgraph::pretask::{
    build_pretrain_sample, make_geo_level, tokenize, PretrainSample, ReplacementPools, Vocab,
};
use addrgraph::sampler::{derive_seed, sample_corpus, SampleConfig, SampledSubgraph};
use addrgraph::synth::{generate_world, World};
use addrgraph::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};

pub fn dispatch(command: &Command, out_dir: &Path, config: &PipelineConfig) -> Result<(), CliError> {
    match command {
        Command::GenWorld => gen_world(out_dir, config),
        Command::BuildGraph => build_graph_cmd(out_dir, config),
        Command::Sample { n_samples } => sample_cmd(out_dir, config, *n_samples),
        Command::Featurize => featurize_cmd(out_dir, config),
        Command::MakePretrain => make_pretrain(out_dir, config),
        Command::Pretrain { steps, lr } => pretrain_cmd(out_dir, config, *steps, *lr),
        Command::FinetuneGeo { steps, lr } => finetune_geo(out_dir, config, *steps, *lr),
        Command::EvalGeo => eval_geo(out_dir, config),
        Command::EvalAep => eval_aep_cmd(out_dir, config),
        Command::EvalAet => eval_aet_cmd(out_dir, config),
        Command::Embed => embed_cmd(out_dir, config),
        Command::ClusterMetrics => cluster_metrics_cmd(out_dir, config),
        Command::Verify => unreachable!("verify dispatches separately"),
    }
}

fn status(command: &str, out_dir: &Path, config: &PipelineConfig, extra: serde_json::Value) {
    let mut line = json!({
        "status": "ok",
        "command": command,
        "out_dir": out_dir.display().to_string(),
        "config_hash": config.hash(),
    });
    if let (Some(obj), Some(add)) = (line.as_object_mut(), extra.as_object()) {
        for (k, v) in add {
            obj.insert(k.clone(), v.clone());
        }
    }
    println!("{line}");
}

fn world_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("world")
}

fn load_world(out_dir: &Path) -> Result<World, CliError> {
    World::load(&world_dir(out_dir)).map_err(|e| {
        CliError::Data(format!(
            "cannot load world from {} (run gen-world first): {e}",
            world_dir(out_dir).display()
        ))
    })
}

fn load_graph(out_dir: &Path) -> Result<HeteroGraph, CliError> {
    HeteroGraph::load(&out_dir.join("graph")).map_err(|e| {
        CliError::Data(format!(
            "cannot load graph from {} (run build-graph first): {e}",
            out_dir.join("graph").display()
        ))
    })
}

fn gen_world(out_dir: &Path, config: &PipelineConfig) -> Result<(), CliError> {
    let world = generate_world(&config.world)?;
    world.save(&world_dir(out_dir))?;
    status(
        "gen-world",
        out_dir,
        config,
        json!({"pois": world.pois.len(), "deliveries": world.deliveries.len()}),
    );
    Ok(())
}

fn build_graph_cmd(out_dir: &Path, config: &PipelineConfig) -> Result<(), CliError> {
    let world = load_world(out_dir)?;
    let graph = build_graph(&world.deliveries, &world.pois, &world.tree)?;
    graph.save(&out_dir.join("graph"))?;
    status(
        "build-graph",
        out_dir,
        config,
        json!({"nodes": graph.len(), "edges": graph.edges().len()}),
    );
    Ok(())
}

fn shard_paths(dir: &Path, extension: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut paths = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::Data(e.to_string()))?
            .path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("part-") && name.ends_with(extension) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

fn sample_cmd(
    out_dir: &Path,
    config: &PipelineConfig,
    n_samples: Option<usize>,
) -> Result<(), CliError> {
    let graph = load_graph(out_dir)?;
    let n = n_samples.unwrap_or(config.sample.n_samples);
    let cfg = SampleConfig {
        k: config.sample.k,
        p: config.sample.p,
        seed: config.seed,
    };
    let samples = sample_corpus(&graph, n, &cfg)?;
    let dir = out_dir.join("samples");
    let mut shards = 0;
    for (part, chunk) in samples.chunks(config.sample.shard_size.max(1)).enumerate() {
        write_jsonl(&dir.join(format!("part-{part:04}.jsonl")), chunk)?;
        shards += 1;
    }
    if samples.is_empty() {
        write_jsonl::<SampledSubgraph>(&dir.join("part-0000.jsonl"), &[])?;
        shards = 1;
    }
    status(
        "sample",
        out_dir,
        config,
        json!({"samples": samples.len(), "shards": shards}),
    );
    Ok(())
}

fn read_sample_shards(out_dir: &Path) -> Result<Vec<Vec<SampledSubgraph>>, CliError> {
    let paths = shard_paths(&out_dir.join("samples"), ".jsonl")?;
    if paths.is_empty() {
        return Err(CliError::Data(format!(
            "no sample shards under {} (run sample first)",
            out_dir.join("samples").display()
        )));
    }
    let mut shards = Vec::with_capacity(paths.len());
    for path in paths {
        shards.push(read_jsonl(&path)?);
    }
    Ok(shards)
}

fn featurize_cmd(out_dir: &Path, config: &PipelineConfig) -> Result<(), CliError> {
    let graph = load_graph(out_dir)?;
    let shards = read_sample_shards(out_dir)?;
    let dir = out_dir.join("features");
    let mut total = 0;
    for (part, shard) in shards.iter().enumerate() {
        let features: Result<Vec<SampleFeatures>, _> = shard
            .iter()
            .map(|s| featurize(&graph, s, &Default::default()))
            .collect();
        let features = features?;
        total += features.len();
        write_feature_shard(&dir, part, &features)?;
    }
    status(
        "featurize",
        out_dir,
        config,
        json!({"features": total, "shards": shards.len()}),
    );
    Ok(())
}

/// Texts the vocabulary is built from: every administrative address, every
/// region name, and every road number, so masking replacements stay
/// in-vocabulary.
fn vocab_texts(world: &World) -> Vec<String> {
    let mut texts: Vec<String> = world
        .pois
        .iter()
        .flat_map(|p| p.addresses.iter().map(|a| a.full_text.clone()))
        .collect();
    for level in 1..=5u8 {
        for id in world.tree.level_regions(level) {
            texts.push(world.tree.region(id).unwrap().name.clone());
        }
    }
    texts
}

fn make_pretrain(out_dir: &Path, config: &PipelineConfig) -> Result<(), CliError> {
    let world = load_world(out_dir)?;
    let graph = load_graph(out_dir)?;
    let shards = read_sample_shards(out_dir)?;
    let texts = vocab_texts(&world);
    let vocab = Vocab::build(texts.iter().map(|s| s.as_str()));
    vocab.save(&out_dir.join("vocab.json"))?;
    let pools = ReplacementPools::from_world(&world.tree, &world.pois);

    let dir = out_dir.join("pretrain");
    let mut global_index = 0u64;
    let mut total = 0;
    for (part, shard) in shards.iter().enumerate() {
        let mut lines: Vec<PretrainSample> = Vec::with_capacity(shard.len());
        for (index, sample) in shard.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, global_index));
            global_index += 1;
            lines.push(build_pretrain_sample(
                &graph,
                sample,
                part,
                index,
                &world.tree,
                &vocab,
                &pools,
                config.model.max_seq_len,
                &mut rng,
            )?);
        }
        total += lines.len();
        write_jsonl(&dir.join(format!("part-{part:04}.jsonl")), &lines)?;
    }
    status(
        "make-pretrain",
        out_dir,
        config,
        json!({"samples": total, "vocab": vocab.len()}),
    );
    Ok(())
}

fn load_pretrain_corpus(
    out_dir: &Path,
) -> Result<Vec<(PretrainSample, SampleFeatures)>, CliError> {
    let paths = shard_paths(&out_dir.join("pretrain"), ".jsonl")?;
    if paths.is_empty() {
        return Err(CliError::Data(format!(
            "no pretrain shards under {} (run make-pretrain first)",
            out_dir.join("pretrain").display()
        )));
    }
    let mut corpus = Vec::new();
    for (part, path) in paths.iter().enumerate() {
        let samples: Vec<PretrainSample> = read_jsonl(path)?;
        let features = read_feature_shard(&out_dir.join("features"), part)?;
        if features.len() != samples.len() {
            return Err(CliError::Data(format!(
                "feature shard {part} holds {} records, pretrain shard {} samples",
                features.len(),
                samples.len()
            )));
        }
        for (sample, feats) in samples.into_iter().zip(features) {
            corpus.push((sample, feats));
        }
    }
    Ok(corpus)
}

fn load_vocab(out_dir: &Path) -> Result<Vocab, CliError> {
    Vocab::load(&out_dir.join("vocab.json")).map_err(|e| {
        CliError::Data(format!(
            "cannot load vocabulary (run make-pretrain first): {e}"
        ))
    })
}

fn pretrain_cmd(
    out_dir: &Path,
    config: &PipelineConfig,
    steps: Option<usize>,
    lr: Option<f64>,
) -> Result<(), CliError> {
    let world = load_world(out_dir)?;
    let vocab = load_vocab(out_dir)?;
    let corpus = load_pretrain_corpus(out_dir)?;
    let pools = ReplacementPools::from_world(&world.tree, &world.pois);
    let space = HtcSpace::from_tree(&world.tree);
    let model_config =
        config
            .model
            .to_model_config(vocab.len(), space.level_sizes.clone(), label_len(18));
    let mut params = ModelParams::init(model_config, config.seed)
        .map_err(CliError::from)?;
    let tc = TrainConfig {
        steps: steps.unwrap_or(config.train.steps),
        lr: lr.unwrap_or(config.train.lr),
        seed: config.seed,
        weights: config.train.weights,
        log_every: config.train.log_every,
    };
    let log = pretrain(&mut params, &space, &corpus, &vocab, &pools, &tc)?;
    let eval = evaluate_corpus(&params, &space, &corpus, &vocab, &pools, config.seed ^ 0x5eed)?;
    params.save(&out_dir.join("ckpt"))?;
    let final_loss = log.last().map(|(_, l)| l.total);
    status(
        "pretrain",
        out_dir,
        config,
        json!({
            "steps": tc.steps,
            "final_loss": final_loss,
            "mlm_token_accuracy": eval.mlm_token_accuracy,
            "geo_exact_match": eval.geo_exact_match,
            "htc_path_exact_match": eval.htc_path_exact_match,
        }),
    );
    Ok(())
}

/// Downstream geocoding examples: one per POI, canonical address tokens,
/// graph degree, and the deep-grid label.
fn geo_examples(
    world: &World,
    graph: &HeteroGraph,
    vocab: &Vocab,
    max_seq_len: usize,
    level: u8,
) -> Result<Vec<GeoExample>, CliError> {
    let mut degree_by_poi = std::collections::BTreeMap::new();
    for node in &graph.nodes {
        degree_by_poi.insert(
            node.poi_id.clone(),
            graph.degree(node.node_id).unwrap_or(0) as u32,
        );
    }
    let mut examples = Vec::with_capacity(world.pois.len());
    for poi in world.pois.iter() {
        let tokenized = tokenize(poi.canonical(), vocab, max_seq_len);
        let geo = make_geo_level(poi.lat, poi.lon, level)?;
        examples.push(GeoExample {
            tokens: tokenized.tokens,
            degree: degree_by_poi.get(&poi.poi_id).copied().unwrap_or(0),
            label_classes: geo.label.chars.iter().map(|&c| c as usize).collect(),
            face: geo.face,
            lat: poi.lat,
            lon: poi.lon,
        });
    }
    Ok(examples)
}

fn finetune_geo(
    out_dir: &Path,
    config: &PipelineConfig,
    steps: Option<usize>,
    lr: Option<f64>,
) -> Result<(), CliError> {
    let world = load_world(out_dir)?;
    let graph = load_graph(out_dir)?;
    let vocab = load_vocab(out_dir)?;
    let pretrained = ModelParams::load(&out_dir.join("ckpt"))
        .map_err(|e| CliError::Data(format!("cannot load checkpoint (run pretrain first): {e}")))?;
    let level = config.finetune.level;
    let mut params = with_geo_head(&pretrained, label_len(level), config.seed ^ 0xf17e)?;
    let space = HtcSpace::from_tree(&world.tree);
    let examples = geo_examples(&world, &graph, &vocab, params.config.max_seq_len, level)?;
    if examples.is_empty() {
        return Err(CliError::Data("no geocoding examples".into()));
    }

    let steps = steps.unwrap_or(config.finetune.steps);
    let lr = lr.unwrap_or(config.finetune.lr);
    let weights = TaskWeights {
        mlm: 0.0,
        geo: 1.0,
        htc: 0.0,
        aet: 0.0,
    };
    let mut adam = AdamState::new(&params);
    let mut final_loss = None;
    for step in 0..steps {
        let example = &examples[step % examples.len()];
        let batch = Batch {
            features: addrgraph::evaluate::single_node_features(example.degree),
            nodes: vec![NodeBatch {
                input_tokens: example.tokens.clone(),
                mlm_targets: vec![None; example.tokens.len()],
                geo_targets: Some(example.label_classes.clone()),
                htc_classes: Vec::new(),
                aet_targets: vec![None; example.tokens.len()],
            }],
        };
        let result = train_step(&mut params, &space, &batch, lr, &weights, &mut adam)?;
        final_loss = Some(result.loss.geo);
    }
    params.save(&out_dir.join("ckpt-geo"))?;
    status(
        "finetune-geo",
        out_dir,
        config,
        json!({"steps": steps, "level": level, "final_geo_loss": final_loss}),
    );
    Ok(())
}

fn checkpoint_digest(dir: &Path) -> String {
    file_digest(&dir.join("manifest.json"))
}

fn write_report(
    out_dir: &Path,
    config: &PipelineConfig,
    task: &str,
    metrics: serde_json::Value,
    checkpoint: &Path,
    dataset: &Path,
) -> Result<(), CliError> {
    let report = json!({
        "task": task,
        "metrics": metrics,
        "config_hash": config.hash(),
        "checkpoint_hash": checkpoint_digest(checkpoint),
        "dataset_hash": file_digest(dataset),
    });
    let path = out_dir.join("reports").join(format!("{task}.json"));
    write_bytes(&path, serde_json::to_string_pretty(&report).unwrap().as_bytes())?;
    Ok(())
}

fn eval_geo(out_dir: &Path, config: &PipelineConfig) -> Result<(), CliError> {
    let world = load_world(out_dir)?;
    let graph = load_graph(out_dir)?;
    let vocab = load_vocab(out_dir)?;
    let ckpt = out_dir.join("ckpt-geo");
    let params = ModelParams::load(&ckpt)
        .map_err(|e| CliError::Data(format!("cannot load ckpt-geo (run finetune-geo first): {e}")))?;
    let space = HtcSpace::from_tree(&world.tree);
    let level = config.finetune.level;
    let examples = geo_examples(&world, &graph, &vocab, params.config.max_seq_len, level)?;
    let result = eval_geocoding_model(&params, &space, &examples, level, &config.eval.n_km)?;
    write_report(
        out_dir,
        config,
        "geocoding",
        serde_json::to_value(&result).unwrap(),
        &ckpt,
        &world_dir(out_dir).join("pois.jsonl"),
    )?;
    let acc1 = result
        .acc_at_km
        .iter()
        .find(|(n, _)| (*n - 1.0).abs() < 1e-9)
        .map(|(_, a)| *a);
    status(
        "eval-geo",
        out_dir,
        config,
        json!({"acc_at_1km": acc1, "mean_km_error": result.mean_km_error, "examples": result.n_examples}),
    );
    Ok(())
}

fn canonical_addresses(world: &World) -> Vec<NormalizedAddress> {
    world.pois.iter().map(|p| p.canonical().clone()).collect()
}

fn eval_aep_cmd(out_dir: &Path, config: &PipelineConfig) -> Result<(), CliError> {
    let world = load_world(out_dir)?;
    let vocab = load_vocab(out_dir)?;
    let ckpt = out_dir.join("ckpt");
    let params = ModelParams::load(&ckpt)
        .map_err(|e| CliError::Data(format!("cannot load checkpoint (run pretrain first): {e}")))?;
    let space = HtcSpace::from_tree(&world.tree);
    let predictor = ModelAepPredictor {
        params: &params,
        space: &space,
    };
    let addresses = canonical_addresses(&world);
    let result = eval_aep(
        &predictor,
        &addresses,
        &world.tree,
        &vocab,
        params.config.max_seq_len,
        config.seed ^ 0xae9,
    )?;
    write_report(
        out_dir,
        config,
        "aep",
        serde_json::to_value(&result).unwrap(),
        &ckpt,
        &world_dir(out_dir).join("pois.jsonl"),
    )?;
    status(
        "eval-aep",
        out_dir,
        config,
        json!({"accuracy": result.accuracy, "total": result.total}),
    );
    Ok(())
}

fn eval_aet_cmd(out_dir: &Path, config: &PipelineConfig) -> Result<(), CliError> {
    let world = load_world(out_dir)?;
    let vocab = load_vocab(out_dir)?;
    let ckpt = out_dir.join("ckpt");
    let params = ModelParams::load(&ckpt)
        .map_err(|e| CliError::Data(format!("cannot load checkpoint (run pretrain first): {e}")))?;
    let space = HtcSpace::from_tree(&world.tree);
    let addresses = canonical_addresses(&world);
    let (predicted, spans) = predict_aet(&params, &space, &addresses, &vocab)?;
    let result = eval_aet_predictions(&predicted, &spans)?;
    write_report(
        out_dir,
        config,
        "aet",
        serde_json::to_value(&result).unwrap(),
        &ckpt,
        &world_dir(out_dir).join("pois.jsonl"),
    )?;
    status(
        "eval-aet",
        out_dir,
        config,
        json!({"accuracy": result.accuracy, "entities": result.total}),
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingMeta {
    rows: usize,
    cols: usize,
    poi_ids: Vec<String>,
    district_ids: Vec<String>,
}

fn embed_cmd(out_dir: &Path, config: &PipelineConfig) -> Result<(), CliError> {
    let world = load_world(out_dir)?;
    let vocab = load_vocab(out_dir)?;
    let params = ModelParams::load(&out_dir.join("ckpt"))
        .map_err(|e| CliError::Data(format!("cannot load checkpoint (run pretrain first): {e}")))?;
    let addresses = canonical_addresses(&world);
    let embeddings = embed_addresses(&params, &addresses, &vocab)?;
    let mut bytes = Vec::with_capacity(embeddings.len() * 8);
    push_f64s(&mut bytes, &embeddings.data);
    write_bytes(&out_dir.join("embeddings.bin"), &bytes)?;
    let meta = EmbeddingMeta {
        rows: embeddings.nrows(),
        cols: embeddings.ncols(),
        poi_ids: world.pois.iter().map(|p| p.poi_id.clone()).collect(),
        district_ids: addresses.iter().map(|a| a.district.clone()).collect(),
    };
    write_bytes(
        &out_dir.join("embeddings.meta.json"),
        serde_json::to_string_pretty(&meta).unwrap().as_bytes(),
    )?;
    status(
        "embed",
        out_dir,
        config,
        json!({"rows": meta.rows, "cols": meta.cols}),
    );
    Ok(())
}

fn cluster_metrics_cmd(out_dir: &Path, config: &PipelineConfig) -> Result<(), CliError> {
    let meta_path = out_dir.join("embeddings.meta.json");
    let meta: EmbeddingMeta = serde_json::from_slice(&read_bytes(&meta_path)?)
        .map_err(|e| CliError::Data(format!("bad embeddings meta (run embed first): {e}")))?;
    let data = read_f64s(&read_bytes(&out_dir.join("embeddings.bin"))?);
    if data.len() != meta.rows * meta.cols {
        return Err(CliError::Data(format!(
            "embeddings.bin holds {} values, meta promises {}",
            data.len(),
            meta.rows * meta.cols
        )));
    }
    let embeddings = Tensor::from_vec(&[meta.rows, meta.cols], data);
    // district ids -> dense class labels
    let mut classes = std::collections::BTreeMap::new();
    let labels: Vec<usize> = meta
        .district_ids
        .iter()
        .map(|d| {
            let next = classes.len();
            *classes.entry(d.clone()).or_insert(next)
        })
        .collect();
    let result = cluster_metrics(&embeddings, &labels)?;
    write_report(
        out_dir,
        config,
        "cluster",
        serde_json::to_value(&result).unwrap(),
        &out_dir.join("ckpt"),
        &out_dir.join("embeddings.bin"),
    )?;
    status(
        "cluster-metrics",
        out_dir,
        config,
        json!({"silhouette": result.silhouette, "ch_index": result.ch_index, "clusters": result.n_clusters}),
    );
    Ok(())
}

/// Re-exported for the verify suite.
pub(crate) fn vocab_texts_for(world: &World) -> Vec<String> {
    vocab_texts(world)
}
