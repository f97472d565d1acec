use rand::Rng;
use rvae_autodiff::{ParameterStore, SegmentMode, Tape, Tensor, Var};

use super::gaussian::{kl_rows, log_normal_rows, means, reparameterize, Gaussian, GaussianGraph, GaussianVars};
use super::{ElboWeights, PriorKind, ReconScope, RvaeModel};
use crate::error::{Error, Result};
use crate::graph::{apply_mask, AttributedGraph, GraphBatch, GraphPartition, NodeMask};
use crate::graphnet::GraphVars;

/// A batch in the two views the objective needs: fully observed (mask bit
/// 0 everywhere) and masked.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub full: GraphBatch,
    pub masked: GraphBatch,
    /// Target flag of every node of the batch.
    pub targets: Vec<bool>,
    pub num_targets: Vec<usize>,
}

impl Prepared {
    pub fn new(graphs: &[AttributedGraph], masks: &[NodeMask], part: &GraphPartition) -> Result<Self> {
        if graphs.len() != masks.len() {
            return Err(Error::Precondition(format!("{} graphs but {} masks", graphs.len(), masks.len())));
        }
        let mut full = Vec::with_capacity(graphs.len());
        let mut masked = Vec::with_capacity(graphs.len());
        for (g, m) in graphs.iter().zip(masks) {
            full.push(apply_mask(g, &NodeMask::none(g.num_nodes), part)?.0);
            masked.push(apply_mask(g, m, part)?.0);
        }
        Ok(Self {
            full: GraphBatch::new(&full)?,
            masked: GraphBatch::new(&masked)?,
            targets: masks.iter().flat_map(|m| m.0.iter().copied()).collect(),
            num_targets: masks.iter().map(NodeMask::num_targets).collect(),
        })
    }

    /// Every graph fully observed.
    pub fn unmasked(graphs: &[AttributedGraph], part: &GraphPartition) -> Result<Self> {
        let masks: Vec<NodeMask> = graphs.iter().map(|g| NodeMask::none(g.num_nodes)).collect();
        Self::new(graphs, &masks, part)
    }

    pub fn num_graphs(&self) -> usize {
        self.full.num_graphs()
    }
}

/// Per-graph ELBO terms on the tape, each `[B × 1]`, plus the summed
/// objective and the training loss `−Σ ELBO / B`.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    pub recon: Var,
    pub kl_node: Var,
    pub kl_edge: Var,
    pub kl_global: Var,
    pub per_graph: Var,
    pub total: Var,
    pub loss: Var,
}

/// Plain values of [`ElboTerms`], one entry per graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboValues {
    pub recon: Vec<f64>,
    pub kl_node: Vec<f64>,
    pub kl_edge: Vec<f64>,
    pub kl_global: Vec<f64>,
    pub elbo: Vec<f64>,
}

impl ElboTerms {
    pub fn values(&self, tape: &Tape) -> ElboValues {
        let v = |x: Var| tape.value(x).data().to_vec();
        ElboValues {
            recon: v(self.recon),
            kl_node: v(self.kl_node),
            kl_edge: v(self.kl_edge),
            kl_global: v(self.kl_global),
            elbo: v(self.per_graph),
        }
    }
}

fn per_graph(tape: &mut Tape, rows: Var, ids: &[usize], b: usize) -> Result<Var> {
    Ok(tape.segment_aggregate(rows, ids, b, SegmentMode::Sum)?)
}

fn zeros(tape: &mut Tape, b: usize) -> Var {
    tape.constant(Tensor::zeros(&[b, 1]))
}

impl RvaeModel {
    /// Per-graph `KL(q ‖ p)` at each level, `[B × 1]` (zeros where absent).
    pub fn kl_factorized(&self, tape: &mut Tape, batch: &GraphBatch, q: &GaussianVars, p: &GaussianVars) -> Result<[Var; 3]> {
        let b = batch.num_graphs();
        let ids: [&[usize]; 3] = [&batch.node_graph, &batch.edge_graph, &[]];
        let mut out = [zeros(tape, b); 3];
        for (i, (ql, pl)) in q.levels().into_iter().zip(p.levels()).enumerate() {
            match (ql, pl) {
                (None, None) => {}
                (Some(ql), Some(pl)) => {
                    let rows = kl_rows(tape, ql, pl)?;
                    out[i] = if i == 2 { rows } else { per_graph(tape, rows, ids[i], b)? };
                }
                _ => return Err(Error::Precondition("posterior and prior disagree on latent levels".into())),
            }
        }
        Ok(out)
    }

    /// Per-graph reconstruction log-likelihood `[B × 1]` of the state
    /// channels of `observed` under the decoder output `lik`.
    pub fn reconstruction(&self, tape: &mut Tape, prep: &Prepared, observed: GraphVars, lik: &GaussianVars) -> Result<Var> {
        let batch = &prep.full;
        let b = batch.num_graphs();
        let part = &self.config.partition;
        let mut total = None;
        let mut push = |tape: &mut Tape, v: Var| -> Result<()> {
            total = Some(match total {
                None => v,
                Some(t) => tape.add(t, v)?,
            });
            Ok(())
        };
        if let Some(g) = lik.node {
            let x = tape.columns(observed.nodes, part.node.state.clone())?;
            let mut rows = log_normal_rows(tape, x, g.mu, g.sigma)?;
            if self.config.recon == ReconScope::Targets {
                let flags: Vec<f64> = prep.targets.iter().map(|&t| f64::from(u8::from(t))).collect();
                let w = tape.constant(Tensor::new(vec![flags.len(), 1], flags)?);
                rows = tape.mul(rows, w)?;
            }
            let v = per_graph(tape, rows, &batch.node_graph, b)?;
            push(tape, v)?;
        }
        if self.config.recon == ReconScope::All {
            if let Some(g) = lik.edge {
                let x = tape.columns(observed.edges, part.edge.state.clone())?;
                let rows = log_normal_rows(tape, x, g.mu, g.sigma)?;
                let v = per_graph(tape, rows, &batch.edge_graph, b)?;
                push(tape, v)?;
            }
            if let Some(g) = lik.global {
                let x = tape.columns(observed.globals, part.global.state.clone())?;
                let v = log_normal_rows(tape, x, g.mu, g.sigma)?;
                push(tape, v)?;
            }
        }
        Ok(match total {
            Some(t) => t,
            None => zeros(tape, b),
        })
    }

    /// Posterior and prior distributions used by the objective.
    pub fn posterior_and_prior(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        prep: &Prepared,
        full: GraphVars,
        masked: GraphVars,
    ) -> Result<(GaussianVars, GaussianVars)> {
        match self.config.prior {
            PriorKind::MaskedEncoder => {
                let q = self.encode(tape, store, &prep.full, full)?;
                let p = self.encode(tape, store, &prep.masked, masked)?;
                Ok((q, p))
            }
            PriorKind::Standard | PriorKind::Conditional => {
                let q = self.encode(tape, store, &prep.masked, masked)?;
                let cond = self.conditioning(tape, &prep.full, full)?;
                let p = self.fixed_prior(tape, store, &prep.full, cond)?;
                Ok((q, p))
            }
        }
    }

    /// β-weighted ELBO with `mc_samples` reparameterized draws for the
    /// reconstruction expectation; KL terms are closed form.
    pub fn elbo<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        prep: &Prepared,
        weights: ElboWeights,
        mc_samples: usize,
        rng: &mut R,
    ) -> Result<ElboTerms> {
        if mc_samples == 0 {
            return Err(Error::Precondition("mc_samples must be at least 1".into()));
        }
        let full = GraphVars::constants(tape, &prep.full);
        let masked = GraphVars::constants(tape, &prep.masked);
        let (q, p) = self.posterior_and_prior(tape, store, prep, full, masked)?;
        let [kl_node, kl_edge, kl_global] = self.kl_factorized(tape, &prep.full, &q, &p)?;
        let cond = self.conditioning(tape, &prep.full, full)?;
        let mut recon = None;
        for _ in 0..mc_samples {
            let z = reparameterize(tape, &q, rng)?;
            let lik = self.decode(tape, store, &prep.full, z, cond)?;
            let r = self.reconstruction(tape, prep, full, &lik)?;
            recon = Some(match recon {
                None => r,
                Some(acc) => tape.add(acc, r)?,
            });
        }
        let recon = tape.scale(recon.expect("at least one sample"), 1.0 / mc_samples as f64)?;
        let mut per_graph = recon;
        for (kl, beta) in [(kl_node, weights.beta_v), (kl_edge, weights.beta_e), (kl_global, weights.beta_u)] {
            let weighted = tape.scale(kl, beta)?;
            per_graph = tape.sub(per_graph, weighted)?;
        }
        if self.config.recon == ReconScope::Targets && prep.num_targets.contains(&0) {
            // Graphs without targets carry no objective; the explicit zero
            // also keeps their KL rounding noise out of the gradient.
            let keep: Vec<f64> = prep.num_targets.iter().map(|&t| f64::from(u8::from(t > 0))).collect();
            let keep = tape.constant(Tensor::new(vec![keep.len(), 1], keep)?);
            per_graph = tape.mul(per_graph, keep)?;
        }
        let total = tape.sum(per_graph)?;
        let loss = tape.scale(total, -1.0 / prep.num_graphs() as f64)?;
        Ok(ElboTerms {
            recon,
            kl_node,
            kl_edge,
            kl_global,
            per_graph,
            total,
            loss,
        })
    }

    /// Arbitrary-conditioning objective: target reconstruction under the
    /// full-data posterior minus `KL(q(z | full) ‖ q(z | masked))`.
    pub fn np_elbo<R: Rng + ?Sized>(&self, tape: &mut Tape, store: &ParameterStore, prep: &Prepared, rng: &mut R) -> Result<ElboTerms> {
        if self.config.prior != PriorKind::MaskedEncoder || self.config.recon != ReconScope::Targets {
            return Err(Error::Config("np_elbo needs the masked-encoder prior and target reconstruction".into()));
        }
        self.elbo(tape, store, prep, ElboWeights::default(), 1, rng)
    }

    /// Global latent of the deep-set encoder.
    pub fn deepset_np_encode(&self, tape: &mut Tape, store: &ParameterStore, batch: &GraphBatch, g: GraphVars) -> Result<Gaussian> {
        if !self.is_deepset() {
            return Err(Error::Config("model does not use a deep-set encoder".into()));
        }
        let q = self.encode(tape, store, batch, g)?;
        q.global.ok_or_else(|| Error::Config("deep-set encoder without a global latent".into()))
    }

    /// Encoder distribution of masked graphs, as plain values.
    pub fn encode_posterior(&self, store: &ParameterStore, graphs: &[AttributedGraph], masks: &[NodeMask]) -> Result<GaussianGraph> {
        let prep = Prepared::new(graphs, masks, &self.config.partition)?;
        let mut tape = Tape::new();
        let masked = GraphVars::constants(&mut tape, &prep.masked);
        let q = self.encode(&mut tape, store, &prep.masked, masked)?;
        Ok(q.values(&tape))
    }

    /// Decoder distribution given only the context: latents from the
    /// encoder on the masked graph `g`, taken at their means or sampled.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        masked_batch: &GraphBatch,
        g: GraphVars,
        rng: Option<&mut R>,
    ) -> Result<GaussianVars> {
        let q = self.encode(tape, store, masked_batch, g)?;
        let z = match rng {
            Some(rng) => reparameterize(tape, &q, rng)?,
            None => means(&q),
        };
        let cond = self.conditioning(tape, masked_batch, g)?;
        self.decode(tape, store, masked_batch, z, cond)
    }
}
