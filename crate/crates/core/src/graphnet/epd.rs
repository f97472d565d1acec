use rand::Rng;
use rvae_autodiff::{ParameterStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::block::{BlockConfig, GnBlock};
use super::{Aggregator, GraphDims, GraphVars};
use crate::error::{Error, Result};
use crate::graph::GraphBatch;

/// How the global level takes part in the core blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalFlow {
    /// Updated from aggregated edges and nodes, and read by edge and node
    /// updates. Gives every node a path to every other node in two steps.
    #[default]
    Full,
    /// Read by edge and node updates but never updated, so it only
    /// broadcasts the encoded global input.
    ReadOnly,
    /// Updated from aggregations but not read by edges or nodes.
    Isolated,
}

/// Declarative architecture of an encode-process-decode stack.
///
/// A level with `latent` width 0 carries nothing through the stack; a
/// level with `output` width 0 produces an empty matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpdConfig {
    /// Width of every MLP hidden layer.
    pub hidden: usize,
    pub latent: GraphDims,
    /// Message-passing steps M (core applications).
    pub steps: usize,
    pub aggregator: Aggregator,
    pub output: GraphDims,
    #[serde(default)]
    pub global_flow: GlobalFlow,
    /// Start the decoder's final layer at zero.
    #[serde(default)]
    pub zero_init_output: bool,
}

/// Graph Independent encoder, M unshared GN core blocks with residual
/// additions, Graph Independent decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeProcessDecode {
    pub config: EpdConfig,
    pub encoder: GnBlock,
    pub core: Vec<GnBlock>,
    pub decoder: GnBlock,
}

impl EncodeProcessDecode {
    pub fn new(prefix: &str, config: EpdConfig, input: GraphDims) -> Result<Self> {
        if config.hidden == 0 {
            return Err(Error::Config("mlp width must be positive".into()));
        }
        let latent = config.latent;
        let encoder = GnBlock::new(format!("{prefix}/enc"), BlockConfig::independent(config.hidden, latent), input);
        let mut core_cfg = BlockConfig::full(config.hidden, latent, config.aggregator);
        match config.global_flow {
            GlobalFlow::Full => {}
            GlobalFlow::ReadOnly => core_cfg.global = None,
            GlobalFlow::Isolated => {
                if let Some(e) = core_cfg.edge.as_mut() {
                    e.inputs.global = false;
                }
                if let Some(n) = core_cfg.node.as_mut() {
                    n.inputs.global = false;
                }
            }
        }
        let core = (0..config.steps)
            .map(|m| GnBlock::new(format!("{prefix}/core{m}"), core_cfg.clone(), latent))
            .collect();
        let decoder = GnBlock::new(format!("{prefix}/dec"), BlockConfig::independent(config.hidden, config.output), latent);
        Ok(Self {
            config,
            encoder,
            core,
            decoder,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        self.encoder.init(store, rng, false);
        for block in &self.core {
            block.init(store, rng, false);
        }
        self.decoder.init(store, rng, self.config.zero_init_output);
    }

    pub fn blocks(&self) -> impl Iterator<Item = &GnBlock> {
        std::iter::once(&self.encoder).chain(&self.core).chain(std::iter::once(&self.decoder))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, batch: &GraphBatch, g: GraphVars) -> Result<GraphVars> {
        let input = g.dims(tape);
        if input != self.encoder.input {
            return Err(Error::Dimension(format!(
                "{}: input dims {input:?}, expected {:?}",
                self.encoder.prefix, self.encoder.input
            )));
        }
        let h = self.encoder.forward(tape, store, batch, g)?;
        let mut h = restrict(tape, batch, h, self.config.latent);
        for block in &self.core {
            let out = block.forward(tape, store, batch, h)?;
            let c = &block.config;
            h = GraphVars {
                nodes: residual(tape, c.node.is_some(), h.nodes, out.nodes)?,
                edges: residual(tape, c.edge.is_some(), h.edges, out.edges)?,
                globals: residual(tape, c.global.is_some(), h.globals, out.globals)?,
            };
        }
        let out = self.decoder.forward(tape, store, batch, h)?;
        Ok(restrict(tape, batch, out, self.config.output))
    }
}

fn residual(tape: &mut Tape, updated: bool, input: Var, output: Var) -> Result<Var> {
    if updated {
        Ok(tape.add(input, output)?)
    } else {
        Ok(input)
    }
}

/// Replaces levels of zero target width with empty matrices.
fn restrict(tape: &mut Tape, batch: &GraphBatch, g: GraphVars, dims: GraphDims) -> GraphVars {
    let mut blank = |rows: usize| tape.constant(Tensor::zeros(&[rows, 0]));
    GraphVars {
        nodes: if dims.node == 0 { blank(batch.num_nodes()) } else { g.nodes },
        edges: if dims.edge == 0 { blank(batch.num_edges()) } else { g.edges },
        globals: if dims.global == 0 { blank(batch.num_graphs()) } else { g.globals },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::AttributedGraph;
    use crate::test_support::{hop_distances, random_graph, zero_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(steps: usize, global_flow: GlobalFlow) -> EpdConfig {
        EpdConfig {
            hidden: 16,
            latent: GraphDims::new(8, 6, 4),
            steps,
            aggregator: Aggregator::Composite,
            output: GraphDims::new(2, 0, 1),
            global_flow,
            zero_init_output: false,
        }
    }

    fn node_outputs(model: &EncodeProcessDecode, store: &ParameterStore, g: &AttributedGraph) -> Tensor {
        let batch = GraphBatch::new(std::slice::from_ref(g)).unwrap();
        let mut tape = Tape::new();
        let vars = GraphVars::constants(&mut tape, &batch);
        let out = model.forward(&mut tape, store, &batch, vars).unwrap();
        tape.value(out.nodes).clone()
    }

    fn build(steps: usize, flow: GlobalFlow, seed: u64) -> (EncodeProcessDecode, ParameterStore) {
        let model = EncodeProcessDecode::new("m", config(steps, flow), GraphDims::new(3, 2, 1)).unwrap();
        let mut store = ParameterStore::new();
        model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (model, store)
    }

    #[test]
    fn output_levels_follow_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_graph(&mut rng, 5, 0.4, 3, 2, 1);
        let (model, store) = build(2, GlobalFlow::Full, 1);
        let batch = GraphBatch::new(std::slice::from_ref(&g)).unwrap();
        let mut tape = Tape::new();
        let vars = GraphVars::constants(&mut tape, &batch);
        let out = model.forward(&mut tape, &store, &batch, vars).unwrap();
        assert_eq!(tape.value(out.nodes).shape(), &[5, 2]);
        assert_eq!(tape.value(out.edges).shape(), &[g.num_edges(), 0]);
        assert_eq!(tape.value(out.globals).shape(), &[1, 1]);
    }

    #[test]
    fn zero_steps_has_no_cross_node_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_graph(&mut rng, 6, 0.6, 3, 2, 1);
        let (model, store) = build(0, GlobalFlow::Full, 5);
        let base = node_outputs(&model, &store, &g);
        let mut h = g.clone();
        h.nodes[3 * 2..3 * 3].copy_from_slice(&[9.0, -9.0, 4.0]);
        let moved = node_outputs(&model, &store, &h);
        for i in 0..6 {
            let same = base.row(i) == moved.row(i);
            assert_eq!(same, i != 2, "node {i}");
        }
    }

    #[test]
    fn receptive_field_is_m_hops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (steps, flow) in [(1, GlobalFlow::Isolated), (2, GlobalFlow::Isolated), (2, GlobalFlow::ReadOnly)] {
            let g = random_graph(&mut rng, 9, 0.15, 3, 2, 1);
            let (model, store) = build(steps, flow, 11 + steps as u64);
            let batch = GraphBatch::new(std::slice::from_ref(&g)).unwrap();
            for i in 0..g.num_nodes {
                let mut tape = Tape::new();
                let vars = GraphVars::variables(&mut tape, &batch);
                let out = model.forward(&mut tape, &store, &batch, vars).unwrap();
                let row = tape.gather_rows(out.nodes, &[i]).unwrap();
                let loss = tape.sum(row).unwrap();
                let grads = tape.backward(loss).unwrap();
                let gv = grads.wrt(vars.nodes).unwrap();
                let dist = hop_distances(&g, i);
                for j in 0..g.num_nodes {
                    let touched = gv.row(j).iter().any(|&x| x != 0.0);
                    let reach = dist[j].is_some_and(|d| d <= steps);
                    assert_eq!(touched, reach, "M={steps} i={i} j={j} dist={:?}", dist[j]);
                }
            }
        }
    }

    #[test]
    fn full_global_flow_reaches_every_node_in_two_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_graph(&mut rng, 6, 0.0, 3, 2, 1);
        let (model, store) = build(2, GlobalFlow::Full, 3);
        let base = node_outputs(&model, &store, &g);
        let mut h = g.clone();
        h.nodes[0] += 1.0;
        let moved = node_outputs(&model, &store, &h);
        assert!((1..6).all(|i| base.row(i) != moved.row(i)));
    }

    #[test]
    fn zeroed_core_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_graph(&mut rng, 5, 0.5, 3, 2, 1);
        let (deep, mut store) = build(3, GlobalFlow::Full, 4);
        for m in 0..3 {
            for level in ["edge", "node", "global"] {
                zero_params(&mut store, &format!("m/core{m}/{level}/l2"));
            }
        }
        let shallow = EncodeProcessDecode::new("m", config(0, GlobalFlow::Full), GraphDims::new(3, 2, 1)).unwrap();
        let a = node_outputs(&deep, &store, &g);
        let b = node_outputs(&shallow, &store, &g);
        assert_eq!(a, b);
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = config(2, GlobalFlow::ReadOnly);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<EpdConfig>(&text).unwrap(), c);
        let minimal = r#"{"hidden":8,"latent":{"node":4,"edge":4,"global":0},"steps":1,"aggregator":"mean","output":{"node":2,"edge":0,"global":0}}"#;
        let parsed: EpdConfig = serde_json::from_str(minimal).unwrap();
        assert_eq!(parsed.global_flow, GlobalFlow::Full);
        assert!(!parsed.zero_init_output);
    }
}
