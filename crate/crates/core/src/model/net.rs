//! Tape construction for the network: encoder layers, the distance/route
//! attention biases, the realignment encoder, and the task heads.
//!
//! Layers are pre-norm. One encoder layer computes, per the architecture's
//! update rule, `X' = X + Attn(LN(X))` and `X~ = X' + FC(LN(X'))`, where
//! `Attn` is multi-head self-attention (queries, keys, values only; heads
//! concatenate straight back to the model width) and `FC` is two fully
//! connected maps with a GELU between. The graph encoder adds per-head
//! scalar biases to the attention scores: a distance bias looked up from the
//! hop-distance matrix and a route bias averaged over the edge-type
//! embeddings along the canonical shortest path. The biases are built once
//! and shared by every graph layer.

use super::{ModelConfig, ModelError, ModelParams};
use crate::features::SampleFeatures;
use crate::tensor::{Tape, Tensor, VarId};
use std::collections::BTreeMap;

/// Additive mask value that zeroes a softmax slot exactly in f64.
pub const NEG_MASK: f64 = -1e30;

pub(crate) struct Bound {
    pub ids: BTreeMap<String, VarId>,
}

pub(crate) fn bind(tape: &mut Tape, params: &ModelParams) -> Bound {
    let mut ids = BTreeMap::new();
    for (name, tensor) in params.iter() {
        ids.insert(name.clone(), tape.leaf(tensor.clone()));
    }
    Bound { ids }
}

impl Bound {
    pub fn id(&self, name: &str) -> VarId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound tensor {name}"))
    }
}

pub(crate) enum AttnBias {
    /// Constant additive mask, e.g. padding columns set to `NEG_MASK`.
    Mask(Tensor),
    /// One learnable (rows x rows) bias per head.
    PerHead(Vec<VarId>),
}

/// One pre-norm encoder layer on the tape.
pub(crate) fn encoder_layer(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: VarId,
    n_heads: usize,
    bias: &AttnBias,
) -> VarId {
    let d = tape.value(x).ncols();
    let d_head = d / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let ln1 = tape.layer_norm_rows(
        x,
        bound.id(&format!("{prefix}.ln1.gain")),
        bound.id(&format!("{prefix}.ln1.bias")),
    );
    let q = tape.matmul(ln1, bound.id(&format!("{prefix}.wq")));
    let k = tape.matmul(ln1, bound.id(&format!("{prefix}.wk")));
    let v = tape.matmul(ln1, bound.id(&format!("{prefix}.wv")));

    let mut head_outputs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * d_head, d_head);
        let kh = tape.slice_cols(k, h * d_head, d_head);
        let vh = tape.slice_cols(v, h * d_head, d_head);
        let scores = tape.matmul_nt(qh, kh);
        let mut scores = tape.scale(scores, scale);
        match bias {
            AttnBias::Mask(mask) => scores = tape.add_const(scores, mask),
            AttnBias::PerHead(per_head) => scores = tape.add(scores, per_head[h]),
        }
        let probs = tape.softmax_rows(scores);
        head_outputs.push(tape.matmul(probs, vh));
    }
    let attn = tape.concat_cols(&head_outputs);
    let x1 = tape.add(x, attn);

    let ln2 = tape.layer_norm_rows(
        x1,
        bound.id(&format!("{prefix}.ln2.gain")),
        bound.id(&format!("{prefix}.ln2.bias")),
    );
    let f1 = tape.matmul(ln2, bound.id(&format!("{prefix}.fc1.w")));
    let f1 = tape.add_bias(f1, bound.id(&format!("{prefix}.fc1.b")));
    let g = tape.gelu(f1);
    let f2 = tape.matmul(g, bound.id(&format!("{prefix}.fc2.w")));
    let f2 = tape.add_bias(f2, bound.id(&format!("{prefix}.fc2.b")));
    tape.add(x1, f2)
}

/// Padding mask: rows x rows, `NEG_MASK` in every column at or past `len`.
fn padding_mask(rows: usize, len: usize) -> Tensor {
    let mut mask = Tensor::zeros(&[rows, rows]);
    for i in 0..rows {
        for j in len..rows {
            mask.data[i * rows + j] = NEG_MASK;
        }
    }
    mask
}

pub(crate) struct TextVars {
    /// Per-node padded hidden states (padded_len x d).
    pub h_text: Vec<VarId>,
    /// Stacked `[CLS]` vectors (n x d).
    pub h_cls: VarId,
    pub lengths: Vec<usize>,
    pub padded_len: usize,
}

/// Embed and encode every node's token sequence. Sequences are padded to a
/// common length and masked so padding never influences real positions.
pub(crate) fn build_text_encoding(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    token_seqs: &[Vec<u32>],
) -> Result<TextVars, ModelError> {
    let mut padded_len = 0;
    for seq in token_seqs {
        if seq.len() > cfg.max_seq_len {
            return Err(ModelError::DomainError(format!(
                "sequence length {} exceeds max_seq_len {}",
                seq.len(),
                cfg.max_seq_len
            )));
        }
        for &t in seq {
            if t as usize >= cfg.vocab_size {
                return Err(ModelError::DomainError(format!(
                    "token id {t} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
        }
        padded_len = padded_len.max(seq.len());
    }

    let pos_idx: Vec<usize> = (0..padded_len).collect();
    let mut h_text = Vec::with_capacity(token_seqs.len());
    let mut cls_rows = Vec::with_capacity(token_seqs.len());
    let mut lengths = Vec::with_capacity(token_seqs.len());
    for seq in token_seqs {
        lengths.push(seq.len());
        let mut ids: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
        ids.resize(padded_len, crate::pretask::PAD as usize);
        let tok = tape.gather_rows(bound.id("token_table"), &ids);
        let pos = tape.gather_rows(bound.id("token_pos_table"), &pos_idx);
        let mut x = tape.add(tok, pos);
        let bias = AttnBias::Mask(padding_mask(padded_len, seq.len()));
        for l in 0..cfg.n_layers_text {
            x = encoder_layer(tape, bound, &format!("text.{l}"), x, cfg.n_heads_text, &bias);
        }
        cls_rows.push(tape.slice_rows(x, 0, 1));
        h_text.push(x);
    }
    let h_cls = tape.concat_rows(&cls_rows);
    Ok(TextVars {
        h_text,
        h_cls,
        lengths,
        padded_len,
    })
}

/// Node representation: CLS vector plus degree and position embeddings.
pub(crate) fn build_node_repr(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    h_cls: VarId,
    degrees: &[u32],
    positions: &[u32],
) -> VarId {
    let deg_idx: Vec<usize> = degrees
        .iter()
        .map(|&d| (d as usize).min(cfg.max_degree))
        .collect();
    let pos_idx: Vec<usize> = positions
        .iter()
        .map(|&p| (p as usize).min(cfg.max_nodes))
        .collect();
    let deg = tape.gather_rows(bound.id("degree_table"), &deg_idx);
    let pos = tape.gather_rows(bound.id("position_table"), &pos_idx);
    let sum = tape.add(h_cls, deg);
    tape.add(sum, pos)
}

/// Per-head attention biases from the distance and route-type matrices.
/// The unreachable sentinel (dist == n) maps to its own embedding row.
pub(crate) fn build_graph_bias(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    feats: &SampleFeatures,
) -> Result<Vec<VarId>, ModelError> {
    let n = feats.n;
    let mut dist_idx = Vec::with_capacity(n * n);
    for &d in &feats.dist {
        let d = d as usize;
        if d == n {
            dist_idx.push(cfg.max_dist + 1);
        } else if d <= cfg.max_dist {
            dist_idx.push(d);
        } else {
            return Err(ModelError::DomainError(format!(
                "distance {d} exceeds max_dist {} and is not the sentinel",
                cfg.max_dist
            )));
        }
    }
    let dist_emb = tape.gather_rows(bound.id("dist_table"), &dist_idx);

    let mut groups = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let group: Vec<usize> = if n > 1 {
                feats
                    .routes_at(i, j)
                    .iter()
                    .take_while(|&&c| c != 0)
                    .map(|&c| c as usize)
                    .collect()
            } else {
                Vec::new()
            };
            groups.push(group);
        }
    }
    let route_emb = tape.gather_rows_mean(bound.id("route_table"), &groups);

    let mut per_head = Vec::with_capacity(cfg.n_heads_graph);
    for h in 0..cfg.n_heads_graph {
        let e = tape.slice_cols(dist_emb, h, 1);
        let e = tape.reshape(e, &[n, n]);
        let r = tape.slice_cols(route_emb, h, 1);
        let r = tape.reshape(r, &[n, n]);
        per_head.push(tape.add(e, r));
    }
    Ok(per_head)
}

/// Stack the graph encoder layers over node representations, with the
/// distance/route biases shared (fixed) across layers.
pub(crate) fn build_graph_encode(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    h: VarId,
    feats: &SampleFeatures,
) -> Result<VarId, ModelError> {
    let bias = AttnBias::PerHead(build_graph_bias(tape, bound, cfg, feats)?);
    let mut x = h;
    for l in 0..cfg.n_layers_graph {
        x = encoder_layer(tape, bound, &format!("graph.{l}"), x, cfg.n_heads_graph, &bias);
    }
    Ok(x)
}

pub(crate) struct RealignVars {
    pub node: VarId,
    pub text: Vec<VarId>,
}

/// Per node, run the realignment encoder over `[graph-aware node row; token
/// rows]` and split the result back apart.
pub(crate) fn build_realign(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    h_graph: VarId,
    text: &TextVars,
) -> RealignVars {
    let mut node_rows = Vec::with_capacity(text.h_text.len());
    let mut text_out = Vec::with_capacity(text.h_text.len());
    for (i, &h_text) in text.h_text.iter().enumerate() {
        let node_row = tape.slice_rows(h_graph, i, 1);
        let mut x = tape.concat_rows(&[node_row, h_text]);
        let rows = 1 + text.padded_len;
        let bias = AttnBias::Mask(padding_mask(rows, 1 + text.lengths[i]));
        for l in 0..cfg.n_layers_pre {
            x = encoder_layer(tape, bound, &format!("pre.{l}"), x, cfg.n_heads_text, &bias);
        }
        node_rows.push(tape.slice_rows(x, 0, 1));
        text_out.push(tape.slice_rows(x, 1, text.padded_len));
    }
    RealignVars {
        node: tape.concat_rows(&node_rows),
        text: text_out,
    }
}

pub(crate) struct HeadVars {
    /// Per node: (padded_len x vocab).
    pub mlm: Vec<VarId>,
    /// Per node: (padded_len x entity_labels).
    pub aet: Vec<VarId>,
    /// (n*geo_chars x geo_alphabet).
    pub geo: VarId,
    /// Per level: (n x level_size), unmasked.
    pub htc: Vec<VarId>,
}

pub(crate) fn build_heads(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    realigned: &RealignVars,
) -> HeadVars {
    let mut mlm = Vec::with_capacity(realigned.text.len());
    let mut aet = Vec::with_capacity(realigned.text.len());
    for &t in &realigned.text {
        let logits = tape.matmul(t, bound.id("head.mlm.w"));
        mlm.push(tape.add_bias(logits, bound.id("head.mlm.b")));
        let logits = tape.matmul(t, bound.id("head.aet.w"));
        aet.push(tape.add_bias(logits, bound.id("head.aet.b")));
    }
    let geo = tape.matmul(realigned.node, bound.id("head.geo.w"));
    let geo = tape.add_bias(geo, bound.id("head.geo.b"));
    let n = tape.value(realigned.node).nrows();
    let geo = tape.reshape(geo, &[n * cfg.geo_chars, cfg.geo_alphabet]);
    let mut htc = Vec::with_capacity(cfg.htc_level_sizes.len());
    for l in 0..cfg.htc_level_sizes.len() {
        let logits = tape.matmul(realigned.node, bound.id(&format!("head.htc.{l}.w")));
        htc.push(tape.add_bias(logits, bound.id(&format!("head.htc.{l}.b"))));
    }
    HeadVars { mlm, aet, geo, htc }
}

// ---------------------------------------------------------------------------
// forward-only public api
// ---------------------------------------------------------------------------

/// Text-encoder output for a batch of token sequences.
#[derive(Debug, Clone)]
pub struct TextEncoding {
    /// (n x d) stack of `[CLS]` vectors.
    pub h_cls: Tensor,
    /// Per node, the (padded_len x d) token states.
    pub h_text: Vec<Tensor>,
    pub lengths: Vec<usize>,
}

/// Encode token sequences; row 0 of each sequence must be `[CLS]`.
pub fn encode_text(
    params: &ModelParams,
    token_seqs: &[Vec<u32>],
) -> Result<TextEncoding, ModelError> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let vars = build_text_encoding(&mut tape, &bound, &params.config, token_seqs)?;
    Ok(TextEncoding {
        h_cls: tape.value(vars.h_cls).clone(),
        h_text: vars
            .h_text
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
        lengths: vars.lengths,
    })
}

/// Sum of CLS vector, degree embedding, and insertion-position embedding.
/// Degrees clamp to `max_degree`, positions to `max_nodes`.
pub fn node_repr(
    params: &ModelParams,
    h_cls: &Tensor,
    degrees: &[u32],
    positions: &[u32],
) -> Tensor {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let h = tape.leaf(h_cls.clone());
    let out = build_node_repr(&mut tape, &bound, &params.config, h, degrees, positions);
    tape.value(out).clone()
}

/// Run the graph encoder over node representations.
pub fn graph_encode(
    params: &ModelParams,
    h: &Tensor,
    feats: &SampleFeatures,
) -> Result<Tensor, ModelError> {
    if feats.n != h.nrows() {
        return Err(ModelError::DomainError(format!(
            "feature count {} does not match {} node rows",
            feats.n,
            h.nrows()
        )));
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let x = tape.leaf(h.clone());
    let out = build_graph_encode(&mut tape, &bound, &params.config, x, feats)?;
    Ok(tape.value(out).clone())
}

/// Realign graph-aware node rows with their token states.
pub fn realign(
    params: &ModelParams,
    h_graph: &Tensor,
    text: &TextEncoding,
) -> (Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let g = tape.leaf(h_graph.clone());
    let padded_len = text.h_text.first().map(|t| t.nrows()).unwrap_or(0);
    let vars = TextVars {
        h_text: text.h_text.iter().map(|t| tape.leaf(t.clone())).collect(),
        h_cls: g, // unused by realign
        lengths: text.lengths.clone(),
        padded_len,
    };
    let out = build_realign(&mut tape, &bound, &params.config, g, &vars);
    (
        tape.value(out.node).clone(),
        out.text.iter().map(|&v| tape.value(v).clone()).collect(),
    )
}

/// Raw head logits (HTC unmasked; apply [`htc_mask_row`] or [`decode_htc`]).
#[derive(Debug, Clone)]
pub struct HeadLogits {
    pub mlm: Vec<Tensor>,
    pub aet: Vec<Tensor>,
    /// Per node: (geo_chars x geo_alphabet).
    pub geo: Vec<Tensor>,
    /// Per level: (n x level_size).
    pub htc: Vec<Tensor>,
}

pub fn heads(params: &ModelParams, node: &Tensor, text: &[Tensor]) -> HeadLogits {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let node_var = tape.leaf(node.clone());
    let vars = RealignVars {
        node: node_var,
        text: text.iter().map(|t| tape.leaf(t.clone())).collect(),
    };
    let cfg = &params.config;
    let head_vars = build_heads(&mut tape, &bound, cfg, &vars);
    let geo_all = tape.value(head_vars.geo).clone();
    let n = node.nrows();
    let mut geo = Vec::with_capacity(n);
    for i in 0..n {
        let rows = cfg.geo_chars;
        let data = geo_all.data[i * rows * cfg.geo_alphabet..(i + 1) * rows * cfg.geo_alphabet]
            .to_vec();
        geo.push(Tensor::from_vec(&[rows, cfg.geo_alphabet], data));
    }
    HeadLogits {
        mlm: head_vars.mlm.iter().map(|&v| tape.value(v).clone()).collect(),
        aet: head_vars.aet.iter().map(|&v| tape.value(v).clone()).collect(),
        geo,
        htc: head_vars.htc.iter().map(|&v| tape.value(v).clone()).collect(),
    }
}

/// Additive mask row for one HTC level: zero over the candidate classes and
/// `NEG_MASK` elsewhere. `parent = None` admits every class (level 1).
pub fn htc_mask_row(space: &super::HtcSpace, level: usize, parent: Option<usize>) -> Vec<f64> {
    let size = space.level_sizes[level];
    match parent {
        None => vec![0.0; size],
        Some(p) => {
            let mut row = vec![NEG_MASK; size];
            for &c in &space.children[level - 1][p] {
                row[c] = 0.0;
            }
            row
        }
    }
}

/// Sequential constrained decode: argmax at level 1, then at each deeper
/// level argmax over the children of the previous prediction. Stops at the
/// requested depth.
pub fn decode_htc(
    htc_logits: &[Tensor],
    node: usize,
    depth: usize,
    space: &super::HtcSpace,
) -> Vec<usize> {
    let mut path = Vec::with_capacity(depth);
    let mut parent: Option<usize> = None;
    for (level, logits) in htc_logits.iter().enumerate().take(depth) {
        let size = space.level_sizes[level];
        let row = &logits.data[node * size..(node + 1) * size];
        let mask = htc_mask_row(space, level, parent);
        let mut best = usize::MAX;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..size {
            let score = row[c] + mask[c];
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        path.push(best);
        parent = Some(best);
    }
    path
}
