//! Geography-graph pretraining for delivery addresses.
//!
//! This crate builds a desk-scale representation-learning pipeline for
//! delivery addresses: a deterministic synthetic world generator, a
//! heterogeneous address graph with bit-coded edge types, probabilistic
//! subgraph sampling, shortest-path structural features, discrete-global-grid
//! geocoding labels, three pretraining tasks (whole-word masking, grid-cell
//! classification, hierarchical region classification), a from-scratch f64
//! transformer with distance/route attention biases and reverse-mode
//! gradients, and the downstream evaluation harness.
//!
//! The pipeline stages connect through plain files (JSONL, TSV, flat
//! little-endian tensors), so each stage can be run, inspected, and re-run
//! independently. Everything is deterministic given a seed.
//!
//! ```ignore
//! use addrgraph::synth::{WorldConfig, generate_world};
//! use addrgraph::graph::build_graph;
//! use addrgraph::sampler::{SampleConfig, sample};
//!
//! let cfg = WorldConfig::tiny(7);
//! let world = generate_world(&cfg).unwrap();
//! let g = build_graph(&world.deliveries, &world.pois, &world.tree).unwrap();
//! let sub = sample(&g, addrgraph::graph::NodeId(0), &SampleConfig { k: 4, p: 0.8, seed: 1 }).unwrap();
//! assert!(sub.node_ids.len() <= 4);
//! ```ignore

pub mod address;
pub mod evaluate;
pub mod features;
pub mod geocode;
pub mod graph;
pub mod io;
pub mod model;
pub mod pretask;
pub mod sampler;
pub mod synth;
pub mod tensor;
