use std::collections::VecDeque;

use rand::Rng;
use rvae_autodiff::{ParameterStore, Tensor};

use crate::graph::{AttributedGraph, Edge};

/// Random graph without self-edges; each ordered pair is an edge with
/// probability `p`.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, p: f64, dv: usize, de: usize, du: usize) -> AttributedGraph {
    let mut vals = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let nodes: Vec<Vec<f64>> = (0..n).map(|_| vals(dv)).collect();
    let globals = vals(du);
    let mut edges = Vec::new();
    for s in 0..n {
        for r in 0..n {
            if s != r && rng.random_bool(p) {
                let attrs = (0..de).map(|_| rng.random_range(-1.0..1.0)).collect();
                edges.push(Edge { sender: s, receiver: r, attrs });
            }
        }
    }
    AttributedGraph::from_rows(dv, &nodes, de, &edges, globals).unwrap()
}

/// Sets every parameter whose name starts with `prefix` to zero.
pub fn zero_params(store: &mut ParameterStore, prefix: &str) {
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    assert!(!names.is_empty(), "no parameters under {prefix}");
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.set(&n, Tensor::zeros(&shape)).unwrap();
    }
}

/// Directed hop count from every node to `target`.
pub fn hop_distances(g: &AttributedGraph, target: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; g.num_nodes];
    dist[target] = Some(0);
    let mut queue = VecDeque::from([target]);
    while let Some(r) = queue.pop_front() {
        let d = dist[r].unwrap();
        for (&s, _) in g.senders.iter().zip(&g.receivers).filter(|(_, &rr)| rr == r) {
            if dist[s].is_none() {
                dist[s] = Some(d + 1);
                queue.push_back(s);
            }
        }
    }
    dist
}
