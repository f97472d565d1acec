use rvae_autodiff::Tensor;

use super::AttributedGraph;
use crate::error::{Error, Result};

/// Disjoint union of graphs sharing attribute widths.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub nodes: Tensor,
    pub edges: Tensor,
    /// `[B × dᵘ]`
    pub globals: Tensor,
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
    /// Graph index of every node.
    pub node_graph: Vec<usize>,
    /// Graph index of every edge.
    pub edge_graph: Vec<usize>,
    pub node_counts: Vec<usize>,
    pub edge_counts: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[AttributedGraph]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::Precondition("cannot batch an empty list of graphs".into()))?;
        let (dv, de, du) = (first.node_dim, first.edge_dim, first.global_dim());
        for (i, g) in graphs.iter().enumerate() {
            if (g.node_dim, g.edge_dim, g.global_dim()) != (dv, de, du) {
                return Err(Error::Dimension(format!(
                    "graph {i} has dims ({}, {}, {}), expected ({dv}, {de}, {du})",
                    g.node_dim,
                    g.edge_dim,
                    g.global_dim()
                )));
            }
            g.validate().map_err(Error::InvalidGraph)?;
        }
        let total_nodes: usize = graphs.iter().map(|g| g.num_nodes).sum();
        let total_edges: usize = graphs.iter().map(|g| g.num_edges()).sum();
        let mut nodes = Vec::with_capacity(total_nodes * dv);
        let mut edges = Vec::with_capacity(total_edges * de);
        let mut globals = Vec::with_capacity(graphs.len() * du);
        let mut senders = Vec::with_capacity(total_edges);
        let mut receivers = Vec::with_capacity(total_edges);
        let mut node_graph = Vec::with_capacity(total_nodes);
        let mut edge_graph = Vec::with_capacity(total_edges);
        let mut offset = 0;
        for (b, g) in graphs.iter().enumerate() {
            nodes.extend_from_slice(&g.nodes);
            edges.extend_from_slice(&g.edges);
            globals.extend_from_slice(&g.globals);
            senders.extend(g.senders.iter().map(|s| s + offset));
            receivers.extend(g.receivers.iter().map(|r| r + offset));
            node_graph.extend(std::iter::repeat_n(b, g.num_nodes));
            edge_graph.extend(std::iter::repeat_n(b, g.num_edges()));
            offset += g.num_nodes;
        }
        Ok(Self {
            nodes: Tensor::new(vec![total_nodes, dv], nodes)?,
            edges: Tensor::new(vec![total_edges, de], edges)?,
            globals: Tensor::new(vec![graphs.len(), du], globals)?,
            senders,
            receivers,
            node_graph,
            edge_graph,
            node_counts: graphs.iter().map(|g| g.num_nodes).collect(),
            edge_counts: graphs.iter().map(|g| g.num_edges()).collect(),
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.node_counts.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_graph.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_graph.len()
    }

    /// First node index of every graph.
    pub fn node_offsets(&self) -> Vec<usize> {
        offsets(&self.node_counts)
    }

    pub fn edge_offsets(&self) -> Vec<usize> {
        offsets(&self.edge_counts)
    }

    /// Splits the batch back into its graphs.
    pub fn unbatch(&self) -> Vec<AttributedGraph> {
        let dv = self.nodes.cols();
        let de = self.edges.cols();
        let du = self.globals.cols();
        let node_off = self.node_offsets();
        let edge_off = self.edge_offsets();
        (0..self.num_graphs())
            .map(|b| {
                let (n0, n) = (node_off[b], self.node_counts[b]);
                let (e0, e) = (edge_off[b], self.edge_counts[b]);
                AttributedGraph {
                    num_nodes: n,
                    node_dim: dv,
                    nodes: self.nodes.data()[n0 * dv..(n0 + n) * dv].to_vec(),
                    edge_dim: de,
                    edges: self.edges.data()[e0 * de..(e0 + e) * de].to_vec(),
                    senders: self.senders[e0..e0 + e].iter().map(|s| s - n0).collect(),
                    receivers: self.receivers[e0..e0 + e].iter().map(|r| r - n0).collect(),
                    globals: self.globals.data()[b * du..(b + 1) * du].to_vec(),
                }
            })
            .collect()
    }

    /// Splits per-node rows `[Nᵛ × d]` of the batch into per-graph blocks.
    pub fn split_node_rows<'a>(&self, data: &'a [f64], width: usize) -> Vec<&'a [f64]> {
        split_rows(data, width, &self.node_counts)
    }
}

fn offsets(counts: &[usize]) -> Vec<usize> {
    counts
        .iter()
        .scan(0, |acc, &c| {
            let start = *acc;
            *acc += c;
            Some(start)
        })
        .collect()
}

fn split_rows<'a>(data: &'a [f64], width: usize, counts: &[usize]) -> Vec<&'a [f64]> {
    let mut rest = data;
    counts
        .iter()
        .map(|&c| {
            let (head, tail) = rest.split_at(c * width);
            rest = tail;
            head
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;

    fn chain(n: usize, offset: f64) -> AttributedGraph {
        let nodes: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 + offset, -(i as f64)]).collect();
        let edges: Vec<Edge> = (1..n)
            .map(|i| Edge {
                sender: i - 1,
                receiver: i,
                attrs: vec![offset * i as f64],
            })
            .collect();
        AttributedGraph::from_rows(2, &nodes, 1, &edges, vec![offset]).unwrap()
    }

    #[test]
    fn single_graph_batch_is_identity() {
        let g = chain(3, 0.5);
        let b = GraphBatch::new(std::slice::from_ref(&g)).unwrap();
        assert_eq!(b.senders, g.senders);
        assert_eq!(b.nodes.data(), g.nodes.as_slice());
        assert_eq!(b.unbatch(), vec![g]);
    }

    #[test]
    fn second_graph_is_offset() {
        let b = GraphBatch::new(&[chain(2, 1.0), chain(3, 2.0)]).unwrap();
        assert_eq!(b.senders, vec![0, 2, 3]);
        assert_eq!(b.receivers, vec![1, 3, 4]);
        assert_eq!(b.node_graph, vec![0, 0, 1, 1, 1]);
        assert_eq!(b.edge_graph, vec![0, 1, 1]);
        assert_eq!(b.globals.shape(), &[2, 1]);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let g = chain(2, 1.0);
        let mut h = chain(2, 1.0);
        h.globals.push(0.0);
        assert!(matches!(GraphBatch::new(&[g, h]), Err(Error::Dimension(_))));
    }

    #[test]
    fn edgeless_graphs_batch() {
        let g = AttributedGraph::from_rows(1, &[vec![1.0]], 3, &[], vec![]).unwrap();
        let b = GraphBatch::new(&[g.clone(), g.clone()]).unwrap();
        assert_eq!(b.edges.shape(), &[0, 3]);
        assert_eq!(b.unbatch(), vec![g.clone(), g]);
    }

    proptest::proptest! {
        #[test]
        fn unbatch_inverts_batch(sizes in proptest::collection::vec(1usize..6, 1..5)) {
            let graphs: Vec<_> = sizes.iter().enumerate().map(|(i, &n)| chain(n, i as f64 * 0.37)).collect();
            let b = GraphBatch::new(&graphs).unwrap();
            for (k, (&s, &r)) in b.senders.iter().zip(&b.receivers).enumerate() {
                proptest::prop_assert_eq!(b.node_graph[s], b.edge_graph[k]);
                proptest::prop_assert_eq!(b.node_graph[r], b.edge_graph[k]);
            }
            proptest::prop_assert_eq!(b.unbatch(), graphs);
        }
    }
}
