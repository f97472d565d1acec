use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvae_autodiff::{ParameterStore, Tape};
use serde::{Deserialize, Serialize};

use crate::datasets::Standardization;
use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, GraphPartition, NodeMask};
use crate::graphnet::GraphVars;
use crate::rvae::{log_normal, reparameterize, ElboWeights, Prepared, RvaeModel};

/// A fixed test set: graphs in model space, their masks, and the
/// statistics that map node states back to physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub graphs: Vec<AttributedGraph>,
    pub masks: Vec<NodeMask>,
    pub part: GraphPartition,
    pub scale: Option<Standardization>,
    pub batch_size: usize,
}

impl EvalSet {
    pub fn new(graphs: Vec<AttributedGraph>, masks: Vec<NodeMask>, part: GraphPartition) -> Result<Self> {
        if graphs.len() != masks.len() || graphs.is_empty() {
            return Err(Error::Precondition(format!("{} graphs with {} masks", graphs.len(), masks.len())));
        }
        Ok(Self {
            graphs,
            masks,
            part,
            scale: None,
            batch_size: 16,
        })
    }

    /// Every graph with `fraction` of its nodes masked at random, masks
    /// drawn from `seed`.
    pub fn masked(graphs: Vec<AttributedGraph>, part: GraphPartition, fraction: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = graphs.iter().map(|g| super::random_mask(&mut rng, g.num_nodes, fraction)).collect();
        Self::new(graphs, masks, part)
    }

    pub fn with_scale(mut self, scale: Standardization) -> Self {
        self.scale = Some(scale);
        self
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    fn batches(&self) -> Result<Vec<Prepared>> {
        self.graphs
            .chunks(self.batch_size.max(1))
            .zip(self.masks.chunks(self.batch_size.max(1)))
            .map(|(g, m)| Prepared::new(g, m, &self.part))
            .collect()
    }

    fn physical(&self, channel: usize, v: f64) -> f64 {
        match &self.scale {
            Some(s) => s.node_value(channel, v),
            None => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalMode {
    /// ELBO per graph divided by its node count.
    Elbo,
    /// Log-likelihood of the target states per target node, with latents
    /// drawn from the encoder of the masked graph.
    TargetNll,
    /// Mean absolute percentage error of one node state channel over the
    /// masked nodes, decoder mean at `z = μ`, in physical units.
    Mape { channel: usize },
}

impl EvalMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Elbo => "elbo",
            Self::TargetNll => "target_ll",
            Self::Mape { .. } => "mape",
        }
    }

    /// Whether larger values are better.
    pub fn maximize(&self) -> bool {
        !matches!(self, Self::Mape { .. })
    }
}

/// Overall mean over items, standard deviation of the per-batch means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    /// Items left out: graphs without targets, or zero-valued truths.
    pub excluded: usize,
}

fn summarize(batches: &[(f64, usize)], excluded: usize) -> Result<EvalResult> {
    let count: usize = batches.iter().map(|b| b.1).sum();
    if count == 0 {
        return Err(Error::Precondition("no items to evaluate".into()));
    }
    let mean = batches.iter().map(|(s, _)| s).sum::<f64>() / count as f64;
    let means: Vec<f64> = batches.iter().filter(|b| b.1 > 0).map(|(s, n)| s / *n as f64).collect();
    let std = if means.len() > 1 {
        let m = means.iter().sum::<f64>() / means.len() as f64;
        (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(EvalResult {
        mean,
        std,
        count,
        excluded,
    })
}

/// Truths closer to zero than this are left out of percentage errors.
const ZERO_TRUTH: f64 = 1e-12;

fn ape(truth: f64, pred: f64) -> Option<f64> {
    (truth.abs() >= ZERO_TRUTH).then(|| ((truth - pred) / truth).abs())
}

/// Mean absolute percentage error `Σ|t − p| / |t| / N` over pairs with a
/// nonzero truth, and the number of pairs left out.
pub fn mape(truth: &[f64], pred: &[f64]) -> Result<(f64, usize)> {
    if truth.len() != pred.len() {
        return Err(Error::Dimension(format!("{} truths for {} predictions", truth.len(), pred.len())));
    }
    let errs: Vec<f64> = truth.iter().zip(pred).filter_map(|(&t, &p)| ape(t, p)).collect();
    if errs.is_empty() {
        return Err(Error::Precondition("no nonzero truth to score".into()));
    }
    Ok((errs.iter().sum::<f64>() / errs.len() as f64, truth.len() - errs.len()))
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Per graph: `log (1/S) Σ_s exp(Σ_{i∈T} log p(x_i | z_s)) / |T|` with
/// `z_s` from the encoder of the masked graph; `None` without targets.
pub fn target_log_likelihood<R: Rng + ?Sized>(
    model: &RvaeModel,
    store: &ParameterStore,
    prep: &Prepared,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<Option<f64>>> {
    let b = prep.num_graphs();
    let state = model.config.partition.node.state.clone();
    let mut per_sample = vec![Vec::with_capacity(samples); b];
    // The encoder is deterministic, so one pass serves every sample.
    let mut tape = Tape::new();
    let masked = GraphVars::constants(&mut tape, &prep.masked);
    let q = model.encode(&mut tape, store, &prep.masked, masked)?;
    let cond = model.conditioning(&mut tape, &prep.masked, masked)?;
    let base = tape.len();
    for _ in 0..samples {
        tape.truncate(base);
        let z = reparameterize(&mut tape, &q, rng)?;
        let lik = model.decode(&mut tape, store, &prep.masked, z, cond)?;
        let lik = lik.node.ok_or_else(|| Error::Config("model has no node likelihood".into()))?;
        let (mu, sigma) = (tape.value(lik.mu), tape.value(lik.sigma));
        let mut sums = vec![0.0; b];
        for i in (0..prep.full.num_nodes()).filter(|&i| prep.targets[i]) {
            let truth = &prep.full.nodes.row(i)[state.clone()];
            sums[prep.full.node_graph[i]] += truth
                .iter()
                .enumerate()
                .map(|(c, &x)| log_normal(x, mu.get(i, c), sigma.get(i, c)))
                .sum::<f64>();
        }
        for (g, s) in sums.into_iter().enumerate() {
            per_sample[g].push(s);
        }
    }
    Ok(per_sample
        .iter()
        .zip(&prep.num_targets)
        .map(|(ls, &t)| (t > 0).then(|| log_mean_exp(ls) / t as f64))
        .collect())
}

/// Scores a model on a test set. `seed` fixes the sampling noise so repeated
/// calls agree exactly.
pub fn evaluate(
    model: &RvaeModel,
    store: &ParameterStore,
    set: &EvalSet,
    mode: EvalMode,
    mc_samples: usize,
    seed: u64,
) -> Result<EvalResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    let mut excluded = 0;
    for prep in set.batches()? {
        match mode {
            EvalMode::Elbo => {
                let mut tape = Tape::new();
                let terms = model.elbo(&mut tape, store, &prep, ElboWeights::default(), mc_samples, &mut rng)?;
                let v = terms.values(&tape);
                let s: f64 = v.elbo.iter().zip(&prep.full.node_counts).map(|(e, &n)| e / n.max(1) as f64).sum();
                batches.push((s, v.elbo.len()));
            }
            EvalMode::TargetNll => {
                let ll = target_log_likelihood(model, store, &prep, mc_samples, &mut rng)?;
                excluded += ll.iter().filter(|v| v.is_none()).count();
                let kept: Vec<f64> = ll.into_iter().flatten().collect();
                batches.push((kept.iter().sum(), kept.len()));
            }
            EvalMode::Mape { channel } => {
                if channel >= set.part.node.state_dim() {
                    return Err(Error::Config(format!("no node state channel {channel}")));
                }
                let mut tape = Tape::new();
                let masked = GraphVars::constants(&mut tape, &prep.masked);
                let lik = model.predict(&mut tape, store, &prep.masked, masked, None::<&mut ChaCha8Rng>)?;
                let mu = tape.value(lik.node.ok_or_else(|| Error::Config("model has no node likelihood".into()))?.mu);
                let col = set.part.node.state.start + channel;
                let (mut s, mut n) = (0.0, 0);
                for i in (0..prep.full.num_nodes()).filter(|&i| prep.targets[i]) {
                    let truth = set.physical(channel, prep.full.nodes.get(i, col));
                    match ape(truth, set.physical(channel, mu.get(i, channel))) {
                        Some(e) => {
                            s += e;
                            n += 1;
                        }
                        None => excluded += 1,
                    }
                }
                batches.push((s, n));
            }
        }
    }
    summarize(&batches, excluded)
}
