#![allow(dead_code)]

use rand::Rng;
use rvae::graph::{AttributedGraph, ChannelSplit, Edge, GraphPartition, NodeMask};
use rvae::graphnet::{Aggregator, GlobalFlow, GraphDims};
use rvae::rvae::{Architecture, NetSpec, ObservationNoise, PriorKind, ReconScope, RvaeConfig};

/// Node `(y, x)`, edge `exp(-c d²)` for pairs closer than `cutoff`, no global.
pub fn point_graph<R: Rng>(rng: &mut R, n: usize, cutoff: f64) -> AttributedGraph {
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let nodes: Vec<Vec<f64>> = xs.iter().map(|&x| vec![(6.0 * x).sin() + rng.random_range(-0.1..0.1), x]).collect();
    let c = 100f64.ln() / (cutoff * cutoff);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let d = (xs[i] - xs[j]).abs();
            if i != j && d < cutoff {
                edges.push(Edge { sender: i, receiver: j, attrs: vec![(-c * d * d).exp()] });
            }
        }
    }
    AttributedGraph::from_rows(2, &nodes, 1, &edges, vec![]).unwrap()
}

pub fn point_partition() -> GraphPartition {
    GraphPartition {
        node: ChannelSplit::leading_state(1, 1),
        edge: ChannelSplit::leading_state(0, 1),
        global: ChannelSplit::leading_state(0, 0),
        mask_channel: None,
    }
}

pub fn net(steps: usize) -> NetSpec {
    NetSpec {
        hidden: 8,
        width: 6,
        steps,
        aggregator: Aggregator::Mean,
        global_flow: GlobalFlow::Full,
    }
}

pub fn graph_config(steps: usize, latent: GraphDims, prior: PriorKind, recon: ReconScope) -> RvaeConfig {
    RvaeConfig {
        partition: point_partition(),
        latent,
        architecture: Architecture::Graph { encoder: net(steps), decoder: net(steps) },
        prior,
        recon,
        noise: ObservationNoise::Learned,
        zero_init_heads: false,
    }
}

pub fn random_mask<R: Rng>(rng: &mut R, n: usize, targets: usize) -> NodeMask {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..targets.min(n) {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut m = vec![false; n];
    for &i in &idx[..targets.min(n)] {
        m[i] = true;
    }
    NodeMask(m)
}
