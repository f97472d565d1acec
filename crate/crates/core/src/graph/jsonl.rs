//! JSON Lines graph datasets: one graph per line with `nodes`, `edges`,
//! `global` and an optional `mask`.
//!
//! Floats are written with the shortest decimal that parses back to the
//! same bits, so a write/read cycle is exact. Writers also emit
//! `node_dim` and `edge_dim` so that graphs without edges (or nodes) keep
//! their widths; readers treat both as optional.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttributedGraph, Edge, NodeMask};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct WireEdge {
    sender: usize,
    receiver: usize,
    attrs: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireGraph {
    nodes: Vec<Vec<f64>>,
    edges: Vec<WireEdge>,
    global: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_dim: Option<usize>,
}

/// A dataset entry: a graph and, optionally, its node mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphRecord {
    pub graph: AttributedGraph,
    pub mask: Option<NodeMask>,
}

impl From<AttributedGraph> for GraphRecord {
    fn from(graph: AttributedGraph) -> Self {
        Self { graph, mask: None }
    }
}

/// Serializes one record as a single JSON line (without newline).
pub fn to_line(record: &GraphRecord) -> Result<String> {
    let g = &record.graph;
    let wire = WireGraph {
        nodes: (0..g.num_nodes).map(|i| g.node(i).to_vec()).collect(),
        edges: g
            .edge_list()
            .into_iter()
            .map(|e| WireEdge {
                sender: e.sender,
                receiver: e.receiver,
                attrs: e.attrs,
            })
            .collect(),
        global: g.globals.clone(),
        mask: record.mask.as_ref().map(|m| m.0.clone()),
        node_dim: Some(g.node_dim),
        edge_dim: Some(g.edge_dim),
    };
    Ok(serde_json::to_string(&wire)?)
}

/// Parses one JSON line; `line` is the 1-based position used in errors.
pub fn from_line(text: &str, line: usize) -> Result<GraphRecord> {
    let parse = |msg: String| Error::Parse { line, msg };
    let wire: WireGraph = serde_json::from_str(text).map_err(|e| parse(e.to_string()))?;
    let node_dim = wire
        .node_dim
        .or_else(|| wire.nodes.first().map(Vec::len))
        .unwrap_or(0);
    let edge_dim = wire
        .edge_dim
        .or_else(|| wire.edges.first().map(|e| e.attrs.len()))
        .unwrap_or(0);
    let edges: Vec<Edge> = wire
        .edges
        .into_iter()
        .map(|e| Edge {
            sender: e.sender,
            receiver: e.receiver,
            attrs: e.attrs,
        })
        .collect();
    let graph = AttributedGraph::from_rows(node_dim, &wire.nodes, edge_dim, &edges, wire.global)
        .map_err(|e| parse(e.to_string()))?;
    graph
        .validate()
        .map_err(|issues| parse(Error::InvalidGraph(issues).to_string()))?;
    let mask = wire.mask.map(NodeMask);
    if let Some(m) = &mask {
        if m.len() != graph.num_nodes {
            return Err(parse(
                Error::MaskLength {
                    mask: m.len(),
                    nodes: graph.num_nodes,
                }
                .to_string(),
            ));
        }
    }
    Ok(GraphRecord { graph, mask })
}

pub fn write_jsonl(path: &Path, records: &[GraphRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(out, "{}", to_line(r)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads every non-blank line of a dataset file.
pub fn read_jsonl(path: &Path) -> Result<Vec<GraphRecord>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound("dataset", path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(from_line(&line, i + 1)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn awkward_floats_round_trip_exactly() {
        let vals = [0.1 + 0.2, 1.0 / 3.0, -2.2250738585072014e-308, 1e300, 5e-324, -0.0];
        let nodes: Vec<Vec<f64>> = vals.iter().map(|&v| vec![v, v * 0.5]).collect();
        let edges = vec![Edge {
            sender: 0,
            receiver: 5,
            attrs: vec![std::f64::consts::PI, f64::MIN_POSITIVE],
        }];
        let g = AttributedGraph::from_rows(2, &nodes, 2, &edges, vec![f64::EPSILON]).unwrap();
        let rec = GraphRecord {
            graph: g,
            mask: Some(NodeMask(vec![true, false, false, true, false, false])),
        };
        let back = from_line(&to_line(&rec).unwrap(), 1).unwrap();
        for (a, b) in back.graph.nodes.iter().zip(&rec.graph.nodes) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, rec);
    }

    #[test]
    fn edgeless_graph_keeps_edge_dim() {
        let g = AttributedGraph::from_rows(1, &[vec![1.0]], 3, &[], vec![]).unwrap();
        let back = from_line(&to_line(&g.clone().into()).unwrap(), 1).unwrap();
        assert_eq!(back.graph, g);
    }

    #[test]
    fn minimal_line_without_hints() {
        let rec = from_line(r#"{"nodes":[[1.0],[2.0]],"edges":[{"sender":0,"receiver":1,"attrs":[0.5]}],"global":[]}"#, 1).unwrap();
        assert_eq!(rec.graph.num_nodes, 2);
        assert_eq!(rec.graph.edge_dim, 1);
        assert!(rec.mask.is_none());
    }

    #[test]
    fn invalid_index_is_a_parse_error() {
        let err = from_line(r#"{"nodes":[[1.0]],"edges":[{"sender":0,"receiver":4,"attrs":[]}],"global":[]}"#, 7).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 7") && msg.contains("edge index out of range"), "{msg}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        let recs: Vec<GraphRecord> = (0..3)
            .map(|i| AttributedGraph::from_rows(1, &vec![vec![i as f64 / 7.0]; i + 1], 0, &[], vec![1.0]).unwrap().into())
            .collect();
        write_jsonl(&path, &recs).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), recs);
        assert!(matches!(read_jsonl(&dir.path().join("nope")), Err(Error::NotFound(..))));
    }
}
