//! Attributed directed graphs `G = (V, E, u)`, their state/conditioning
//! channel split, node masks, and disjoint-union batching.

mod batch;
pub mod jsonl;

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::GraphBatch;

/// A directed edge with its attribute vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub sender: usize,
    pub receiver: usize,
    pub attrs: Vec<f64>,
}

/// Graph with real-valued node, edge and global attributes.
///
/// Attributes are stored row-major. Values are never mutated in place:
/// every transformation returns a new graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedGraph {
    pub num_nodes: usize,
    pub node_dim: usize,
    pub nodes: Vec<f64>,
    pub edge_dim: usize,
    pub edges: Vec<f64>,
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
    pub globals: Vec<f64>,
}

/// A single invariant violation reported by [`AttributedGraph::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum GraphIssue {
    EdgeIndexOutOfRange { edge: usize, index: usize, num_nodes: usize },
    NodeDimension { expected: usize, len: usize },
    EdgeDimension { expected: usize, len: usize },
    EndpointCount { senders: usize, receivers: usize },
    NonFinite { level: &'static str, index: usize },
}

impl fmt::Display for GraphIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EdgeIndexOutOfRange { edge, index, num_nodes } => {
                write!(f, "edge index out of range: edge {edge} references node {index} of {num_nodes}")
            }
            Self::NodeDimension { expected, len } => {
                write!(f, "dimension mismatch: node storage of {len} values for {expected} expected")
            }
            Self::EdgeDimension { expected, len } => {
                write!(f, "dimension mismatch: edge storage of {len} values for {expected} expected")
            }
            Self::EndpointCount { senders, receivers } => {
                write!(f, "dimension mismatch: {senders} senders vs {receivers} receivers")
            }
            Self::NonFinite { level, index } => write!(f, "non-finite attribute in {level} {index}"),
        }
    }
}

impl AttributedGraph {
    /// Builds a graph from node rows and edges. `node_dim` and `edge_dim`
    /// fix the widths when the corresponding lists are empty.
    pub fn from_rows(node_dim: usize, nodes: &[Vec<f64>], edge_dim: usize, edges: &[Edge], globals: Vec<f64>) -> Result<Self> {
        if let Some(r) = nodes.iter().find(|r| r.len() != node_dim) {
            return Err(Error::Dimension(format!("node row of width {} for node_dim {node_dim}", r.len())));
        }
        if let Some(e) = edges.iter().find(|e| e.attrs.len() != edge_dim) {
            return Err(Error::Dimension(format!("edge attrs of width {} for edge_dim {edge_dim}", e.attrs.len())));
        }
        Ok(Self {
            num_nodes: nodes.len(),
            node_dim,
            nodes: nodes.concat(),
            edge_dim,
            edges: edges.iter().flat_map(|e| e.attrs.iter().copied()).collect(),
            senders: edges.iter().map(|e| e.sender).collect(),
            receivers: edges.iter().map(|e| e.receiver).collect(),
            globals,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.senders.len()
    }

    pub fn global_dim(&self) -> usize {
        self.globals.len()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.node_dim..(i + 1) * self.node_dim]
    }

    pub fn edge(&self, k: usize) -> &[f64] {
        &self.edges[k * self.edge_dim..(k + 1) * self.edge_dim]
    }

    pub fn edge_list(&self) -> Vec<Edge> {
        (0..self.num_edges())
            .map(|k| Edge {
                sender: self.senders[k],
                receiver: self.receivers[k],
                attrs: self.edge(k).to_vec(),
            })
            .collect()
    }

    /// Every invariant violation, or `Ok` for a well-formed graph.
    pub fn validate(&self) -> std::result::Result<(), Vec<GraphIssue>> {
        let mut issues = Vec::new();
        if self.nodes.len() != self.num_nodes * self.node_dim {
            issues.push(GraphIssue::NodeDimension {
                expected: self.num_nodes * self.node_dim,
                len: self.nodes.len(),
            });
        }
        if self.senders.len() != self.receivers.len() {
            issues.push(GraphIssue::EndpointCount {
                senders: self.senders.len(),
                receivers: self.receivers.len(),
            });
        }
        if self.edges.len() != self.senders.len() * self.edge_dim {
            issues.push(GraphIssue::EdgeDimension {
                expected: self.senders.len() * self.edge_dim,
                len: self.edges.len(),
            });
        }
        for (k, (&s, &r)) in self.senders.iter().zip(&self.receivers).enumerate() {
            for index in [s, r] {
                if index >= self.num_nodes {
                    issues.push(GraphIssue::EdgeIndexOutOfRange {
                        edge: k,
                        index,
                        num_nodes: self.num_nodes,
                    });
                }
            }
        }
        let scan = |level: &'static str, data: &[f64], width: usize, issues: &mut Vec<GraphIssue>| {
            if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                issues.push(GraphIssue::NonFinite {
                    level,
                    index: pos.checked_div(width).unwrap_or(0),
                });
            }
        };
        scan("node", &self.nodes, self.node_dim, &mut issues);
        scan("edge", &self.edges, self.edge_dim, &mut issues);
        scan("global", &self.globals, 1, &mut issues);
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }

    /// Relabels nodes so that old node `i` becomes node `perm[i]`; senders
    /// and receivers are remapped accordingly. Edge order is unchanged.
    pub fn permute_nodes(&self, perm: &[usize]) -> Self {
        let mut nodes = vec![0.0; self.nodes.len()];
        let d = self.node_dim;
        for (old, &new) in perm.iter().enumerate() {
            nodes[new * d..(new + 1) * d].copy_from_slice(self.node(old));
        }
        Self {
            nodes,
            senders: self.senders.iter().map(|&s| perm[s]).collect(),
            receivers: self.receivers.iter().map(|&r| perm[r]).collect(),
            ..self.clone()
        }
    }

    /// Column range of node attributes, as a new row-major buffer.
    pub fn node_columns(&self, range: Range<usize>) -> Vec<f64> {
        (0..self.num_nodes)
            .flat_map(|i| self.node(i)[range.clone()].iter().copied())
            .collect()
    }
}

/// Split of one attribute level into state channels (`G_x`) and
/// conditioning channels (`G_h`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSplit {
    pub state: Range<usize>,
    pub conditioning: Range<usize>,
}

impl ChannelSplit {
    /// State channels `0..state` followed by conditioning channels.
    pub fn leading_state(state: usize, conditioning: usize) -> Self {
        Self {
            state: 0..state,
            conditioning: state..state + conditioning,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state.len()
    }

    pub fn conditioning_dim(&self) -> usize {
        self.conditioning.len()
    }

    fn check(&self, level: &str, dim: usize) -> Result<()> {
        let disjoint = self.state.end <= self.conditioning.start || self.conditioning.end <= self.state.start;
        let covers = self.state.len() + self.conditioning.len() == dim
            && self.state.end.max(self.conditioning.end) == dim
            && self.state.start.min(self.conditioning.start) == 0;
        if !disjoint || !covers {
            return Err(Error::Config(format!(
                "{level} channel split {:?}/{:?} does not partition {dim} channels",
                self.state, self.conditioning
            )));
        }
        Ok(())
    }
}

/// State/conditioning channel layout of a graph, plus the position of the
/// appended mask bit once [`apply_mask`] has run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphPartition {
    pub node: ChannelSplit,
    pub edge: ChannelSplit,
    pub global: ChannelSplit,
    #[serde(default)]
    pub mask_channel: Option<usize>,
}

impl GraphPartition {
    /// Checks that the splits partition the attribute widths of `g`.
    pub fn check(&self, g: &AttributedGraph) -> Result<()> {
        let node_dim = g.node_dim - usize::from(self.mask_channel.is_some());
        if let Some(c) = self.mask_channel {
            if c != node_dim {
                return Err(Error::Config(format!("mask channel {c} is not the last node channel")));
            }
        }
        self.node.check("node", node_dim)?;
        self.edge.check("edge", g.edge_dim)?;
        self.global.check("global", g.global_dim())
    }
}

/// Per-node flags: `true` marks a target (state withheld), `false` context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMask(pub Vec<bool>);

impl NodeMask {
    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_targets(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_target(&self, i: usize) -> bool {
        self.0[i]
    }
}

/// Zeroes the state channels of masked nodes and writes the mask bit `b`
/// (1 = masked) into a trailing node channel. Applying the returned
/// partition again overwrites that channel instead of appending another.
pub fn apply_mask(g: &AttributedGraph, mask: &NodeMask, part: &GraphPartition) -> Result<(AttributedGraph, GraphPartition)> {
    if mask.len() != g.num_nodes {
        return Err(Error::MaskLength {
            mask: mask.len(),
            nodes: g.num_nodes,
        });
    }
    part.check(g)?;
    let (out_dim, bit) = match part.mask_channel {
        Some(c) => (g.node_dim, c),
        None => (g.node_dim + 1, g.node_dim),
    };
    let mut nodes = Vec::with_capacity(g.num_nodes * out_dim);
    for i in 0..g.num_nodes {
        let start = nodes.len();
        nodes.extend_from_slice(g.node(i));
        if part.mask_channel.is_none() {
            nodes.push(0.0);
        }
        let row = &mut nodes[start..start + out_dim];
        if mask.is_target(i) {
            row[part.node.state.clone()].iter_mut().for_each(|v| *v = 0.0);
            row[bit] = 1.0;
        } else {
            row[bit] = 0.0;
        }
    }
    let masked = AttributedGraph {
        node_dim: out_dim,
        nodes,
        ..g.clone()
    };
    let part = GraphPartition {
        mask_channel: Some(bit),
        ..part.clone()
    };
    Ok((masked, part))
}

/// Context indices `C` (unmasked) and target indices `T` (masked).
pub fn split_context_target(mask: &NodeMask) -> (Vec<usize>, Vec<usize>) {
    let (t, c): (Vec<usize>, Vec<usize>) = (0..mask.len()).partition(|&i| mask.is_target(i));
    (c, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_graph() -> (AttributedGraph, GraphPartition) {
        // node attrs: (y, x)
        let nodes = vec![vec![0.7, 0.0], vec![-1.2, 0.5], vec![2.0, 1.0]];
        let edges = vec![
            Edge {
                sender: 0,
                receiver: 1,
                attrs: vec![0.3],
            },
            Edge {
                sender: 1,
                receiver: 2,
                attrs: vec![0.4],
            },
        ];
        let g = AttributedGraph::from_rows(2, &nodes, 1, &edges, vec![]).unwrap();
        let part = GraphPartition {
            node: ChannelSplit::leading_state(1, 1),
            edge: ChannelSplit::leading_state(0, 1),
            global: ChannelSplit::leading_state(0, 0),
            mask_channel: None,
        };
        (g, part)
    }

    #[test]
    fn validate_accepts_edgeless_graph() {
        let g = AttributedGraph::from_rows(1, &[vec![1.0], vec![2.0], vec![3.0]], 2, &[], vec![0.5]).unwrap();
        assert!(g.validate().is_ok());
    }

    #[test]
    fn validate_reports_out_of_range_sender() {
        let (mut g, _) = line_graph();
        g.senders[0] = g.num_nodes;
        let issues = g.validate().unwrap_err();
        assert_eq!(issues.len(), 1);
        assert!(issues[0].to_string().contains("edge index out of range"));
    }

    #[test]
    fn validate_reports_nan() {
        let (mut g, _) = line_graph();
        g.nodes[3] = f64::NAN;
        let issues = g.validate().unwrap_err();
        assert!(issues.iter().any(|i| i.to_string().contains("non-finite attribute")));
    }

    #[test]
    fn validate_collects_every_issue() {
        let (mut g, _) = line_graph();
        g.receivers[1] = 9;
        g.edges[0] = f64::INFINITY;
        g.globals = vec![f64::NAN];
        assert_eq!(g.validate().unwrap_err().len(), 3);
    }

    #[test]
    fn empty_mask_keeps_state_and_appends_zero_bit() {
        let (g, part) = line_graph();
        let (m, mpart) = apply_mask(&g, &NodeMask::none(3), &part).unwrap();
        assert_eq!(m.node_dim, 3);
        assert_eq!(mpart.mask_channel, Some(2));
        for i in 0..3 {
            assert_eq!(&m.node(i)[..2], g.node(i));
            assert_eq!(m.node(i)[2], 0.0);
        }
    }

    #[test]
    fn masked_node_has_zero_state_and_bit_one() {
        let (g, part) = line_graph();
        let (m, _) = apply_mask(&g, &NodeMask(vec![true, false, false]), &part).unwrap();
        assert_eq!(m.node(0), &[0.0, 0.0, 1.0]);
        assert_eq!(m.node(1), &[-1.2, 0.5, 0.0]);
        assert_eq!(m.edges, g.edges);
        assert_eq!(m.senders, g.senders);
    }

    #[test]
    fn masking_is_idempotent() {
        let (g, part) = line_graph();
        let mask = NodeMask(vec![false, true, true]);
        let (once, p1) = apply_mask(&g, &mask, &part).unwrap();
        let (twice, p2) = apply_mask(&once, &mask, &p1).unwrap();
        assert_eq!(once, twice);
        assert_eq!(p1, p2);
    }

    #[test]
    fn mask_length_mismatch() {
        let (g, part) = line_graph();
        assert!(matches!(
            apply_mask(&g, &NodeMask(vec![true]), &part),
            Err(Error::MaskLength { mask: 1, nodes: 3 })
        ));
    }

    #[test]
    fn context_target_split() {
        let (c, t) = split_context_target(&NodeMask(vec![false, true, false]));
        assert_eq!(c, vec![0, 2]);
        assert_eq!(t, vec![1]);
        let (c, t) = split_context_target(&NodeMask::none(4));
        assert_eq!(c.len(), 4);
        assert!(t.is_empty());
    }

    #[test]
    fn partition_must_cover_channels() {
        let (g, mut part) = line_graph();
        part.node = ChannelSplit::leading_state(1, 0);
        assert!(part.check(&g).is_err());
    }

    proptest::proptest! {
        #[test]
        fn split_is_a_partition(bits in proptest::collection::vec(proptest::bool::ANY, 0..40)) {
            let n = bits.len();
            let (c, t) = split_context_target(&NodeMask(bits));
            proptest::prop_assert_eq!(c.len() + t.len(), n);
            let mut all: Vec<usize> = c.iter().chain(&t).copied().collect();
            all.sort_unstable();
            proptest::prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn masking_never_touches_conditioning(bits in proptest::collection::vec(proptest::bool::ANY, 3)) {
            let (g, part) = line_graph();
            let (m, _) = apply_mask(&g, &NodeMask(bits), &part).unwrap();
            for i in 0..3 {
                proptest::prop_assert_eq!(m.node(i)[1], g.node(i)[1]);
            }
            proptest::prop_assert_eq!(&m.edges, &g.edges);
            proptest::prop_assert_eq!(&m.receivers, &g.receivers);
            proptest::prop_assert_eq!(&m.globals, &g.globals);
        }
    }
}
