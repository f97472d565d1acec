//! Relational VAE: GraphNet encoders that parameterize factorized Gaussian
//! latents over nodes, edges and globals, a GraphNet decoder for the state
//! channels, and the β-weighted ELBO.

mod checkpoint;
mod gaussian;
mod objective;
pub mod toy;

use std::ops::Range;

use rand::Rng;
use rvae_autodiff::{ParameterStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphBatch, GraphPartition};
use crate::graphnet::{
    Aggregator, BlockConfig, EncodeProcessDecode, EpdConfig, GlobalFlow, GlobalInputs, GnBlock, GraphDims, GraphVars,
    NodeInputs, UpdateSpec,
};

pub use checkpoint::Checkpoint;
pub use gaussian::{
    kl_diag, kl_rows, log_normal, log_normal_rows, means, reparameterize, reparameterize_with, standard_normal, Gaussian,
    GaussianGraph, GaussianValues, GaussianVars, LatentVars, LATENT_SIGMA_FLOOR, NOISE_SIGMA_FLOOR,
};
pub use objective::{ElboTerms, ElboValues, Prepared};

fn mean_aggregator() -> Aggregator {
    Aggregator::Mean
}

/// Size of one GraphNet stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    /// MLP hidden width.
    pub hidden: usize,
    /// Width of the processed node/edge/global attributes.
    pub width: usize,
    /// Message-passing steps.
    pub steps: usize,
    #[serde(default = "mean_aggregator")]
    pub aggregator: Aggregator,
    #[serde(default)]
    pub global_flow: GlobalFlow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Encode-process-decode encoder and decoder.
    Graph { encoder: NetSpec, decoder: NetSpec },
    /// Neural-process form: per-node MLP, mean over nodes and an MLP head
    /// for a global latent; the decoder is a node update reading the node
    /// conditioning and the global latent.
    DeepSet { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// `N(0, I)` at every level.
    Standard,
    /// Graph Independent network over the conditioning channels; levels
    /// without conditioning channels fall back to `N(0, I)`.
    Conditional,
    /// The encoder applied to the masked graph (arbitrary conditioning).
    MaskedEncoder,
}

/// Which state elements enter the reconstruction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconScope {
    All,
    /// Masked nodes only; edge and global states are ignored.
    Targets,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationNoise {
    /// Per-channel σ from the decoder, floored at 1e-3.
    Learned,
    Fixed { sigma: f64 },
}

/// Full architecture description; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvaeConfig {
    /// Channel layout of the unmasked graphs.
    pub partition: GraphPartition,
    /// Latent width per level; 0 disables the level.
    pub latent: GraphDims,
    pub architecture: Architecture,
    pub prior: PriorKind,
    pub recon: ReconScope,
    pub noise: ObservationNoise,
    /// Start the encoder and prior heads at zero (μ = 0, σ = softplus(0) + floor).
    #[serde(default)]
    pub zero_init_heads: bool,
}

/// β weights of the three KL terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboWeights {
    pub beta_v: f64,
    pub beta_e: f64,
    pub beta_u: f64,
}

impl Default for ElboWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl ElboWeights {
    pub fn uniform(beta: f64) -> Self {
        Self {
            beta_v: beta,
            beta_e: beta,
            beta_u: beta,
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self {
            beta_v: self.beta_v * factor,
            beta_e: self.beta_e * factor,
            beta_u: self.beta_u * factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Encoder {
    Graph(EncodeProcessDecode),
    DeepSet(GnBlock),
}

#[derive(Debug, Clone, PartialEq)]
enum Decoder {
    Graph(EncodeProcessDecode),
    NodeBlock(GnBlock),
}

/// An RVAE bound to its configuration. Parameters live in a separate
/// [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct RvaeModel {
    pub config: RvaeConfig,
    encoder: Encoder,
    decoder: Decoder,
    prior_net: Option<EncodeProcessDecode>,
}

fn split(part: &GraphPartition) -> (GraphDims, GraphDims) {
    (
        GraphDims::new(part.node.state_dim(), part.edge.state_dim(), part.global.state_dim()),
        GraphDims::new(part.node.conditioning_dim(), part.edge.conditioning_dim(), part.global.conditioning_dim()),
    )
}

/// Processed widths: `width` for every level with inputs or outputs, and
/// for the edge level whenever messages are passed, attributes or not.
fn widths(width: usize, steps: usize, a: GraphDims, b: GraphDims) -> GraphDims {
    let w = |x: usize, y: usize| if x + y > 0 { width } else { 0 };
    let edge = if steps > 0 { width } else { w(a.edge, b.edge) };
    GraphDims::new(w(a.node, b.node), edge, w(a.global, b.global))
}

fn epd(spec: &NetSpec, input: GraphDims, output: GraphDims, zero_init_output: bool, prefix: &str) -> Result<EncodeProcessDecode> {
    let config = EpdConfig {
        hidden: spec.hidden,
        latent: widths(spec.width, spec.steps, input, output),
        steps: spec.steps,
        aggregator: spec.aggregator,
        output,
        global_flow: spec.global_flow,
        zero_init_output,
    };
    EncodeProcessDecode::new(prefix, config, input)
}

fn double(d: GraphDims) -> GraphDims {
    GraphDims::new(2 * d.node, 2 * d.edge, 2 * d.global)
}

impl RvaeModel {
    pub fn new(config: RvaeConfig) -> Result<Self> {
        if config.partition.mask_channel.is_some() {
            return Err(Error::Config("partition must describe unmasked graphs".into()));
        }
        if let ObservationNoise::Fixed { sigma } = config.noise {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::Config(format!("fixed observation sigma {sigma} must be positive")));
            }
        }
        let (state, cond) = split(&config.partition);
        let z = config.latent;
        let input = GraphDims::new(state.node + cond.node + 1, state.edge + cond.edge, state.global + cond.global);
        let dec_input = GraphDims::new(z.node + cond.node, z.edge + cond.edge, z.global + cond.global);
        let k = match config.noise {
            ObservationNoise::Learned => 2,
            ObservationNoise::Fixed { .. } => 1,
        };
        let dec_output = GraphDims::new(k * state.node, k * state.edge, k * state.global);
        let (encoder, decoder) = match &config.architecture {
            Architecture::Graph { encoder, decoder } => (
                Encoder::Graph(epd(encoder, input, double(z), config.zero_init_heads, "enc")?),
                Decoder::Graph(epd(decoder, dec_input, dec_output, false, "dec")?),
            ),
            &Architecture::DeepSet { hidden } => {
                if z.node + z.edge > 0 || z.global == 0 {
                    return Err(Error::Config("deep-set encoder needs a global latent only".into()));
                }
                if state.edge + state.global > 0 {
                    return Err(Error::Config("node-block decoder reconstructs node states only".into()));
                }
                let enc = BlockConfig {
                    node: Some(UpdateSpec {
                        inputs: NodeInputs::OWN,
                        out: hidden,
                    }),
                    global: Some(UpdateSpec {
                        inputs: GlobalInputs {
                            edges: false,
                            nodes: true,
                            global: false,
                        },
                        out: 2 * z.global,
                    }),
                    node_to_global: Aggregator::Mean,
                    ..BlockConfig::identity(hidden)
                };
                let dec = BlockConfig {
                    node: Some(UpdateSpec {
                        inputs: NodeInputs {
                            edges: false,
                            node: true,
                            global: true,
                        },
                        out: dec_output.node,
                    }),
                    ..BlockConfig::identity(hidden)
                };
                (
                    Encoder::DeepSet(GnBlock::new("enc", enc, input)),
                    Decoder::NodeBlock(GnBlock::new("dec", dec, dec_input)),
                )
            }
        };
        let prior_net = match (config.prior, &config.architecture) {
            (PriorKind::Conditional, arch) => {
                let spec = match arch {
                    Architecture::Graph { encoder, .. } => NetSpec { steps: 0, ..encoder.clone() },
                    &Architecture::DeepSet { hidden } => NetSpec {
                        hidden,
                        width: hidden,
                        steps: 0,
                        aggregator: Aggregator::Mean,
                        global_flow: GlobalFlow::Full,
                    },
                };
                let gate = |c: usize, d: usize| if c > 0 { 2 * d } else { 0 };
                let out = GraphDims::new(gate(cond.node, z.node), gate(cond.edge, z.edge), gate(cond.global, z.global));
                Some(epd(&spec, cond, out, config.zero_init_heads, "prior")?)
            }
            _ => None,
        };
        Ok(Self {
            config,
            encoder,
            decoder,
            prior_net,
        })
    }

    /// Draws initial parameters into `store`.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        let zero_heads = self.config.zero_init_heads;
        match &self.encoder {
            Encoder::Graph(e) => e.init(store, rng),
            Encoder::DeepSet(b) => {
                for m in b.mlps() {
                    m.init(store, rng, zero_heads && m.prefix.ends_with("/global"));
                }
            }
        }
        match &self.decoder {
            Decoder::Graph(d) => d.init(store, rng),
            Decoder::NodeBlock(b) => b.init(store, rng, false),
        }
        if let Some(p) = &self.prior_net {
            p.init(store, rng);
        }
    }

    pub fn state_dims(&self) -> GraphDims {
        split(&self.config.partition).0
    }

    pub fn conditioning_dims(&self) -> GraphDims {
        split(&self.config.partition).1
    }

    /// Encoder input widths: the partition's channels plus the mask bit.
    pub fn input_dims(&self) -> GraphDims {
        match &self.encoder {
            Encoder::Graph(e) => e.encoder.input,
            Encoder::DeepSet(b) => b.input,
        }
    }

    pub fn is_deepset(&self) -> bool {
        matches!(self.encoder, Encoder::DeepSet(_))
    }

    /// Message-passing steps of encoder plus decoder.
    pub fn receptive_steps(&self) -> usize {
        let e = match &self.encoder {
            Encoder::Graph(e) => e.config.steps,
            Encoder::DeepSet(_) => 0,
        };
        let d = match &self.decoder {
            Decoder::Graph(d) => d.config.steps,
            Decoder::NodeBlock(_) => 0,
        };
        e + d
    }

    /// `q(G_z | ·)` for an encoder-input graph (state, conditioning, mask bit).
    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, batch: &GraphBatch, g: GraphVars) -> Result<GaussianVars> {
        let z = self.config.latent;
        let out = match &self.encoder {
            Encoder::Graph(e) => e.forward(tape, store, batch, g)?,
            Encoder::DeepSet(b) => b.forward(tape, store, batch, g)?,
        };
        let head = |tape: &mut Tape, v: Var, d: usize| -> Result<Option<Gaussian>> {
            (d > 0).then(|| Gaussian::from_head(tape, v, d, LATENT_SIGMA_FLOOR)).transpose()
        };
        Ok(GaussianVars {
            node: if self.is_deepset() { None } else { head(tape, out.nodes, z.node)? },
            edge: if self.is_deepset() { None } else { head(tape, out.edges, z.edge)? },
            global: head(tape, out.globals, z.global)?,
        })
    }

    /// `p(G_z; G_h)` for the standard and conditional priors. The masked
    /// encoder prior is produced by [`RvaeModel::encode`] instead.
    pub fn fixed_prior(&self, tape: &mut Tape, store: &ParameterStore, batch: &GraphBatch, cond: GraphVars) -> Result<GaussianVars> {
        let z = self.config.latent;
        let c = self.conditioning_dims();
        let rows = [batch.num_nodes(), batch.num_edges(), batch.num_graphs()];
        let learned = match &self.prior_net {
            Some(net) => Some(net.forward(tape, store, batch, cond)?),
            None => None,
        };
        let level = |tape: &mut Tape, i: usize, d: usize, cd: usize, out: Option<Var>| -> Result<Option<Gaussian>> {
            if d == 0 {
                return Ok(None);
            }
            match out {
                Some(v) if cd > 0 => Ok(Some(Gaussian::from_head(tape, v, d, LATENT_SIGMA_FLOOR)?)),
                _ => Ok(Some(Gaussian::standard(tape, rows[i], d))),
            }
        };
        let deepset = self.is_deepset();
        Ok(GaussianVars {
            node: if deepset { None } else { level(tape, 0, z.node, c.node, learned.map(|o| o.nodes))? },
            edge: if deepset { None } else { level(tape, 1, z.edge, c.edge, learned.map(|o| o.edges))? },
            global: level(tape, 2, z.global, c.global, learned.map(|o| o.globals))?,
        })
    }

    /// Decoder output: per-level `(μ_x, σ_x)` over the state channels.
    pub fn decode(&self, tape: &mut Tape, store: &ParameterStore, batch: &GraphBatch, z: LatentVars, cond: GraphVars) -> Result<GaussianVars> {
        let rows = [batch.num_nodes(), batch.num_edges(), batch.num_graphs()];
        let mut joined = [z.node, z.edge, z.global]
            .into_iter()
            .zip([cond.nodes, cond.edges, cond.globals])
            .zip(rows)
            .map(|((z, c), r)| concat_nonempty(tape, &[z, Some(c)], r));
        let input = GraphVars {
            nodes: joined.next().unwrap()?,
            edges: joined.next().unwrap()?,
            globals: joined.next().unwrap()?,
        };
        let out = match &self.decoder {
            Decoder::Graph(d) => d.forward(tape, store, batch, input)?,
            Decoder::NodeBlock(b) => {
                let nodes = b.node_update(tape, store, batch, input, input.edges)?;
                GraphVars { nodes, ..input }
            }
        };
        let s = self.state_dims();
        let head = |tape: &mut Tape, v: Var, d: usize| -> Result<Option<Gaussian>> {
            if d == 0 {
                return Ok(None);
            }
            Ok(Some(match self.config.noise {
                ObservationNoise::Learned => Gaussian::from_head(tape, v, d, NOISE_SIGMA_FLOOR)?,
                ObservationNoise::Fixed { sigma } => {
                    let n = tape.value(v).rows();
                    Gaussian {
                        mu: v,
                        sigma: tape.constant(Tensor::full(&[n, d], sigma)),
                    }
                }
            }))
        };
        Ok(GaussianVars {
            node: head(tape, out.nodes, s.node)?,
            edge: head(tape, out.edges, s.edge)?,
            global: head(tape, out.globals, s.global)?,
        })
    }

    /// Conditioning columns of an encoder-input graph.
    pub fn conditioning(&self, tape: &mut Tape, batch: &GraphBatch, g: GraphVars) -> Result<GraphVars> {
        let p = &self.config.partition;
        Ok(GraphVars {
            nodes: columns(tape, g.nodes, p.node.conditioning.clone(), batch.num_nodes())?,
            edges: columns(tape, g.edges, p.edge.conditioning.clone(), batch.num_edges())?,
            globals: columns(tape, g.globals, p.global.conditioning.clone(), batch.num_graphs())?,
        })
    }
}

fn columns(tape: &mut Tape, v: Var, range: Range<usize>, rows: usize) -> Result<Var> {
    if range.is_empty() {
        Ok(tape.constant(Tensor::zeros(&[rows, 0])))
    } else {
        Ok(tape.columns(v, range)?)
    }
}

fn concat_nonempty(tape: &mut Tape, parts: &[Option<Var>], rows: usize) -> Result<Var> {
    let present: Vec<Var> = parts
        .iter()
        .flatten()
        .copied()
        .filter(|&v| tape.value(v).cols() > 0)
        .collect();
    Ok(match present.as_slice() {
        [] => tape.constant(Tensor::zeros(&[rows, 0])),
        [one] => *one,
        many => tape.concat(many)?,
    })
}
