use rand::Rng;
use rvae_autodiff::{ParameterStore, Tape, Var};
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpInput};
use super::{Aggregator, GraphDims, GraphVars};
use crate::error::Result;
use crate::graph::GraphBatch;

/// Inputs of the edge update `φᵉ(eₖ, v_{sₖ}, v_{rₖ}, u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeInputs {
    pub edge: bool,
    pub sender: bool,
    pub receiver: bool,
    pub global: bool,
}

/// Inputs of the node update `φᵛ(ρ^{e→v}(E→i), vᵢ, u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeInputs {
    pub edges: bool,
    pub node: bool,
    pub global: bool,
}

/// Inputs of the global update `φᵘ(ρ^{e→u}(E), ρ^{v→u}(V), u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalInputs {
    pub edges: bool,
    pub nodes: bool,
    pub global: bool,
}

impl EdgeInputs {
    pub const ALL: Self = Self { edge: true, sender: true, receiver: true, global: true };
    pub const OWN: Self = Self { edge: true, sender: false, receiver: false, global: false };
}

impl NodeInputs {
    pub const ALL: Self = Self { edges: true, node: true, global: true };
    pub const OWN: Self = Self { edges: false, node: true, global: false };
}

impl GlobalInputs {
    pub const ALL: Self = Self { edges: true, nodes: true, global: true };
    pub const OWN: Self = Self { edges: false, nodes: false, global: true };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateSpec<I> {
    pub inputs: I,
    pub out: usize,
}

/// Which updates a block performs, what each consumes, and how messages
/// are aggregated. A disabled update passes its level through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub hidden: usize,
    pub edge: Option<UpdateSpec<EdgeInputs>>,
    pub node: Option<UpdateSpec<NodeInputs>>,
    pub global: Option<UpdateSpec<GlobalInputs>>,
    pub edge_to_node: Aggregator,
    pub edge_to_global: Aggregator,
    pub node_to_global: Aggregator,
}

impl BlockConfig {
    /// A block that updates nothing.
    pub fn identity(hidden: usize) -> Self {
        Self {
            hidden,
            edge: None,
            node: None,
            global: None,
            edge_to_node: Aggregator::Mean,
            edge_to_global: Aggregator::Mean,
            node_to_global: Aggregator::Mean,
        }
    }

    /// Full GN block; levels with zero output width are not updated.
    pub fn full(hidden: usize, out: GraphDims, agg: Aggregator) -> Self {
        Self {
            edge: (out.edge > 0).then_some(UpdateSpec { inputs: EdgeInputs::ALL, out: out.edge }),
            node: (out.node > 0).then_some(UpdateSpec { inputs: NodeInputs::ALL, out: out.node }),
            global: (out.global > 0).then_some(UpdateSpec { inputs: GlobalInputs::ALL, out: out.global }),
            edge_to_node: agg,
            edge_to_global: agg,
            node_to_global: agg,
            hidden,
        }
    }

    /// Graph Independent layer: each level mapped by its own MLP with no
    /// message passing. Levels with zero output width are not updated.
    pub fn independent(hidden: usize, out: GraphDims) -> Self {
        Self {
            edge: (out.edge > 0).then_some(UpdateSpec { inputs: EdgeInputs::OWN, out: out.edge }),
            node: (out.node > 0).then_some(UpdateSpec { inputs: NodeInputs::OWN, out: out.node }),
            global: (out.global > 0).then_some(UpdateSpec { inputs: GlobalInputs::OWN, out: out.global }),
            ..Self::identity(hidden)
        }
    }
}

/// A GraphNet block bound to its input widths and parameter prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct GnBlock {
    pub prefix: String,
    pub config: BlockConfig,
    pub input: GraphDims,
    edge_mlp: Option<Mlp>,
    node_mlp: Option<Mlp>,
    global_mlp: Option<Mlp>,
}

fn widths(groups: &[(bool, usize)]) -> Vec<usize> {
    groups.iter().filter(|g| g.0).map(|g| g.1).collect()
}

impl GnBlock {
    pub fn new(prefix: impl Into<String>, config: BlockConfig, input: GraphDims) -> Self {
        let prefix = prefix.into();
        let h = config.hidden;
        let edge_mlp = config.edge.map(|s| {
            let i = s.inputs;
            let groups = [(i.edge, input.edge), (i.sender, input.node), (i.receiver, input.node), (i.global, input.global)];
            Mlp::new(format!("{prefix}/edge"), widths(&groups), h, s.out)
        });
        let edge_out = config.edge.map_or(input.edge, |s| s.out);
        let node_mlp = config.node.map(|s| {
            let i = s.inputs;
            let groups = [
                (i.edges, config.edge_to_node.out_dim(edge_out)),
                (i.node, input.node),
                (i.global, input.global),
            ];
            Mlp::new(format!("{prefix}/node"), widths(&groups), h, s.out)
        });
        let node_out = config.node.map_or(input.node, |s| s.out);
        let global_mlp = config.global.map(|s| {
            let i = s.inputs;
            let groups = [
                (i.edges, config.edge_to_global.out_dim(edge_out)),
                (i.nodes, config.node_to_global.out_dim(node_out)),
                (i.global, input.global),
            ];
            Mlp::new(format!("{prefix}/global"), widths(&groups), h, s.out)
        });
        Self {
            prefix,
            config,
            input,
            edge_mlp,
            node_mlp,
            global_mlp,
        }
    }

    pub fn output_dims(&self) -> GraphDims {
        GraphDims {
            node: self.config.node.map_or(self.input.node, |s| s.out),
            edge: self.config.edge.map_or(self.input.edge, |s| s.out),
            global: self.config.global.map_or(self.input.global, |s| s.out),
        }
    }

    pub fn mlps(&self) -> impl Iterator<Item = &Mlp> {
        [&self.edge_mlp, &self.node_mlp, &self.global_mlp].into_iter().flatten()
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R, zero_last: bool) {
        for m in self.mlps() {
            m.init(store, rng, zero_last);
        }
    }

    /// `e′ₖ = φᵉ(eₖ, v_{sₖ}, v_{rₖ}, u)`, or the input edges when disabled.
    pub fn edge_update(&self, tape: &mut Tape, store: &ParameterStore, batch: &GraphBatch, g: GraphVars) -> Result<Var> {
        let (Some(spec), Some(mlp)) = (self.config.edge, &self.edge_mlp) else {
            return Ok(g.edges);
        };
        let i = spec.inputs;
        let mut inputs = Vec::new();
        if i.edge {
            inputs.push(MlpInput::rows(g.edges));
        }
        if i.sender {
            inputs.push(MlpInput::gathered(g.nodes, &batch.senders));
        }
        if i.receiver {
            inputs.push(MlpInput::gathered(g.nodes, &batch.receivers));
        }
        if i.global {
            inputs.push(MlpInput::gathered(g.globals, &batch.edge_graph));
        }
        mlp.forward(tape, store, &inputs, batch.num_edges())
    }

    /// `v′ᵢ = φᵛ(ρ^{e→v}(E→i), vᵢ, u)` with incoming edges grouped by receiver.
    pub fn node_update(&self, tape: &mut Tape, store: &ParameterStore, batch: &GraphBatch, g: GraphVars, edges: Var) -> Result<Var> {
        let (Some(spec), Some(mlp)) = (self.config.node, &self.node_mlp) else {
            return Ok(g.nodes);
        };
        let i = spec.inputs;
        let mut inputs = Vec::new();
        if i.edges {
            let agg = self.config.edge_to_node.apply(tape, edges, &batch.receivers, batch.num_nodes())?;
            inputs.push(MlpInput::rows(agg));
        }
        if i.node {
            inputs.push(MlpInput::rows(g.nodes));
        }
        if i.global {
            inputs.push(MlpInput::gathered(g.globals, &batch.node_graph));
        }
        mlp.forward(tape, store, &inputs, batch.num_nodes())
    }

    /// `u′ = φᵘ(ρ^{e→u}(E), ρ^{v→u}(V), u)` per graph of the batch.
    pub fn global_update(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        batch: &GraphBatch,
        edges: Var,
        nodes: Var,
        globals: Var,
    ) -> Result<Var> {
        let (Some(spec), Some(mlp)) = (self.config.global, &self.global_mlp) else {
            return Ok(globals);
        };
        let i = spec.inputs;
        let b = batch.num_graphs();
        let mut inputs = Vec::new();
        if i.edges {
            inputs.push(MlpInput::rows(self.config.edge_to_global.apply(tape, edges, &batch.edge_graph, b)?));
        }
        if i.nodes {
            inputs.push(MlpInput::rows(self.config.node_to_global.apply(tape, nodes, &batch.node_graph, b)?));
        }
        if i.global {
            inputs.push(MlpInput::rows(globals));
        }
        mlp.forward(tape, store, &inputs, b)
    }

    /// Edge, then node, then global update. Topology is unchanged.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, batch: &GraphBatch, g: GraphVars) -> Result<GraphVars> {
        let edges = self.edge_update(tape, store, batch, g)?;
        let nodes = self.node_update(tape, store, batch, g, edges)?;
        let globals = self.global_update(tape, store, batch, edges, nodes, g.globals)?;
        Ok(GraphVars { nodes, edges, globals })
    }
}
