//! Imputation, gradient sensitivity maps and wake-deficit summaries of
//! trained models.

mod wake;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rvae_autodiff::{ParameterStore, Tape};
use serde::{Deserialize, Serialize};

use crate::datasets::Standardization;
use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, NodeMask};
use crate::graphnet::GraphVars;
use crate::rvae::{Prepared, RvaeModel};
use crate::training::mape;

pub use wake::{
    polar_deficits, probe_graph, probe_grid, simulator_field, wake_polar, wind_sectors, DeficitField, GridSpec, PolarBin, PolarRow,
    PolarSpec, ProbeSpec,
};

fn physical(scale: Option<&Standardization>, channel: usize, v: f64) -> f64 {
    scale.map_or(v, |s| s.node_value(channel, v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedNode {
    pub node: usize,
    pub truth: Vec<f64>,
    pub predicted: Vec<f64>,
}

/// Decoder means at the masked nodes, in physical units when a scale is
/// given, with the percentage error of every state channel (`None` when
/// all its truths are zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputation {
    pub nodes: Vec<ImputedNode>,
    pub mape: Vec<Option<f64>>,
}

/// Predicts the masked node states of `graph` (in model space) from the
/// rest. Latents are sampled with `rng`, or taken at their means.
pub fn impute<R: Rng + ?Sized>(
    model: &RvaeModel,
    store: &ParameterStore,
    graph: &AttributedGraph,
    mask: &NodeMask,
    scale: Option<&Standardization>,
    rng: Option<&mut R>,
) -> Result<Imputation> {
    if mask.num_targets() == 0 {
        return Err(Error::Precondition("imputation needs at least one masked node".into()));
    }
    let part = &model.config.partition;
    let prep = Prepared::new(std::slice::from_ref(graph), std::slice::from_ref(mask), part)?;
    let mut tape = Tape::new();
    let g = GraphVars::constants(&mut tape, &prep.masked);
    let lik = model.predict(&mut tape, store, &prep.masked, g, rng)?;
    let mu = tape.value(lik.node.ok_or_else(|| Error::Config("model has no node likelihood".into()))?.mu);
    let state = part.node.state.clone();
    let nodes: Vec<ImputedNode> = (0..graph.num_nodes)
        .filter(|&i| mask.is_target(i))
        .map(|i| ImputedNode {
            node: i,
            truth: graph.node(i)[state.clone()].iter().enumerate().map(|(c, &v)| physical(scale, c, v)).collect(),
            predicted: mu.row(i).iter().enumerate().map(|(c, &v)| physical(scale, c, v)).collect(),
        })
        .collect();
    let mape = (0..state.len())
        .map(|c| {
            let truth: Vec<f64> = nodes.iter().map(|n| n.truth[c]).collect();
            let pred: Vec<f64> = nodes.iter().map(|n| n.predicted[c]).collect();
            mape(&truth, &pred).ok().map(|(m, _)| m)
        })
        .collect();
    Ok(Imputation { nodes, mape })
}

/// `|∂ μ_target,channel / ∂ input|` for every attribute of the masked graph
/// the model reads, with latents at their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    pub target: usize,
    pub channel: usize,
    /// Per node, per input channel (including the mask bit).
    pub nodes: Vec<Vec<f64>>,
    /// Per edge, per attribute channel.
    pub edges: Vec<Vec<f64>>,
    pub globals: Vec<f64>,
}

impl SensitivityMap {
    /// Scores summed over the channels of each node.
    pub fn node_scores(&self) -> Vec<f64> {
        self.nodes.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn edge_scores(&self) -> Vec<f64> {
        self.edges.iter().map(|r| r.iter().sum()).collect()
    }
}

pub fn sensitivity(
    model: &RvaeModel,
    store: &ParameterStore,
    graph: &AttributedGraph,
    mask: &NodeMask,
    target: usize,
    channel: usize,
) -> Result<SensitivityMap> {
    if target >= graph.num_nodes || !mask.is_target(target) {
        return Err(Error::Precondition(format!("node {target} is not a masked node")));
    }
    let part = &model.config.partition;
    if channel >= part.node.state_dim() {
        return Err(Error::Config(format!("no node state channel {channel}")));
    }
    let prep = Prepared::new(std::slice::from_ref(graph), std::slice::from_ref(mask), part)?;
    let mut tape = Tape::new();
    let g = GraphVars::variables(&mut tape, &prep.masked);
    let lik = model.predict(&mut tape, store, &prep.masked, g, None::<&mut ChaCha8Rng>)?;
    let mu = lik.node.ok_or_else(|| Error::Config("model has no node likelihood".into()))?.mu;
    let row = tape.gather_rows(mu, &[target])?;
    let out = tape.columns(row, channel..channel + 1)?;
    let out = tape.sum(out)?;
    let grads = tape.backward(out)?;
    // Inputs the model never reads get no gradient entry.
    let rows = |v| -> Vec<Vec<f64>> {
        let t = tape.value(v);
        (0..t.rows())
            .map(|r| match grads.wrt(v) {
                Some(g) => g.row(r).iter().map(|x| x.abs()).collect(),
                None => vec![0.0; t.cols()],
            })
            .collect()
    };
    let globals = rows(g.globals).into_iter().next().unwrap_or_default();
    Ok(SensitivityMap {
        target,
        channel,
        nodes: rows(g.nodes),
        edges: rows(g.edges),
        globals,
    })
}
