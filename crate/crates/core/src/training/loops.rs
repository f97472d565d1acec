use std::ops::Range;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvae_autodiff::{Adam, ParameterStore, Tape, TensorError};
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalMode, EvalSet};
use super::record::{EvalPoint, RunRecord};
use super::{kl_anneal, random_mask, TrainConfig};
use crate::datasets::farm::augment;
use crate::datasets::gp::{build_gp_graph, sample_gp, GpFeatures, GpTask, Kernel};
use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, NodeMask};
use crate::rvae::{Prepared, RvaeModel};

/// Parameters of `model` initialized from `seed`.
pub fn init_store(model: &RvaeModel, seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut store = ParameterStore::new();
    model.init(&mut store, &mut rng);
    store
}

/// Numerical blow-ups that end a run instead of failing it.
fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::Tensor(TensorError::NonFinite(_) | TensorError::NonFiniteGradient(_) | TensorError::Domain { .. })
    )
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// Parameters at the best evaluation (the last good ones if training
    /// diverged before any evaluation).
    pub params: ParameterStore,
}

#[derive(Clone, Copy)]
enum Objective {
    Elbo,
    Np,
}

fn fit(
    model: &RvaeModel,
    mut store: ParameterStore,
    cfg: &TrainConfig,
    test: &EvalSet,
    objective: Objective,
    eval_mode: EvalMode,
    draw: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<Prepared>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let adam = Adam::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut record = RunRecord::default();
    let mut best: Option<(f64, ParameterStore)> = None;
    for step in 0..cfg.max_steps {
        let prep = draw(&mut rng)?;
        let mut tape = Tape::new();
        let terms = match objective {
            Objective::Elbo => {
                let w = kl_anneal(step, cfg.weights, cfg.schedule);
                model.elbo(&mut tape, &store, &prep, w, cfg.mc_samples, &mut rng)
            }
            Objective::Np => model.np_elbo(&mut tape, &store, &prep, &mut rng),
        };
        let terms = match terms {
            Err(e) if is_divergence(&e) => {
                record.diverged_at = Some(step);
                break;
            }
            t => t?,
        };
        let loss = tape.value(terms.loss).item();
        if !loss.is_finite() {
            record.diverged_at = Some(step);
            break;
        }
        let grads = match tape.backward(terms.loss) {
            Err(e) if is_divergence(&Error::Tensor(e.clone())) => {
                record.diverged_at = Some(step);
                break;
            }
            g => g?.for_store(&store),
        };
        adam.step(&mut store, &grads)?;
        record.steps_run = step + 1;

        let done = step + 1 == cfg.max_steps;
        if (step + 1) % cfg.eval_interval == 0 || done {
            let r = evaluate(model, &store, test, eval_mode, cfg.eval_mc_samples, cfg.eval_seed())?;
            let v = terms.values(&tape);
            let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
            record.evals.push(EvalPoint {
                step: step + 1,
                train_loss: loss,
                recon: mean(&v.recon),
                kl_node: mean(&v.kl_node),
                kl_edge: mean(&v.kl_edge),
                kl_global: mean(&v.kl_global),
                metric: eval_mode.name().into(),
                mean: r.mean,
                std: r.std,
            });
            let score = if eval_mode.maximize() { r.mean } else { -r.mean };
            if r.mean.is_finite() && best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, store.clone()));
                record.best_step = Some(step + 1);
                record.best_value = Some(r.mean);
            }
            if let Some(b) = record.best_step {
                if step + 1 - b >= cfg.patience && !done {
                    record.stopped_early = true;
                    break;
                }
            }
        }
    }
    record.wall_clock = started.elapsed();
    let params = best.map(|(_, s)| s).unwrap_or(store);
    Ok(TrainOutcome { record, params })
}

/// Masked-node training on a fixed set of graphs: every step draws
/// `batch_size` graphs with replacement, masks `mask_fraction` of each
/// graph's nodes afresh, optionally rotates them, and takes an Adam step
/// on the β-weighted ELBO. Evaluates the test ELBO every `eval_interval`
/// steps and stops after `patience` steps without improvement.
pub fn train_farm(model: &RvaeModel, store: ParameterStore, train: &[AttributedGraph], test: &EvalSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    let part = test.part.clone();
    let mut draw = |rng: &mut ChaCha8Rng| {
        let mut graphs = Vec::with_capacity(cfg.batch_size);
        let mut masks = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let g = &train[rng.random_range(0..train.len())];
            let g = if cfg.augment_rotation { augment(rng, g) } else { g.clone() };
            masks.push(random_mask(rng, g.num_nodes, cfg.mask_fraction));
            graphs.push(g);
        }
        Prepared::new(&graphs, &masks, &part)
    };
    fit(model, store, cfg, test, Objective::Elbo, EvalMode::Elbo, &mut draw)
}

/// Fresh GP regression tasks as graphs, targets after the context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpStream {
    pub kernel: Kernel,
    pub x_range: Range<f64>,
    pub cutoff: f64,
    pub features: GpFeatures,
}

impl GpStream {
    pub fn graph(&self, task: &GpTask, mask: &NodeMask) -> Result<(AttributedGraph, NodeMask)> {
        let (g, _) = build_gp_graph(task, self.cutoff, self.features)?;
        Ok((g, mask.clone()))
    }

    /// One task with `|C|, |T|` drawn uniformly from `counts`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, counts: (usize, usize)) -> Result<(AttributedGraph, NodeMask)> {
        let c = rng.random_range(counts.0..=counts.1);
        let t = rng.random_range(counts.0..=counts.1);
        let task = sample_gp(rng, c + t, self.kernel, self.x_range.clone())?;
        self.graph(&task, &NodeMask((0..c + t).map(|i| i >= c).collect()))
    }

    pub fn eval_set(&self, tasks: &[(GpTask, NodeMask)]) -> Result<EvalSet> {
        let (graphs, masks) = tasks.iter().map(|(t, m)| self.graph(t, m)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
        EvalSet::new(graphs, masks, self.features.partition())
    }
}

/// Neural-process training on a stream of fresh tasks with the
/// arbitrary-conditioning objective; held-out target log-likelihood
/// selects the returned parameters.
pub fn train_np(model: &RvaeModel, store: ParameterStore, stream: &GpStream, test: &EvalSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let part = stream.features.partition();
    let mut draw = |rng: &mut ChaCha8Rng| {
        let (graphs, masks): (Vec<_>, Vec<_>) = (0..cfg.batch_size)
            .map(|_| stream.draw(rng, cfg.context_range))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Prepared::new(&graphs, &masks, &part)
    };
    fit(model, store, cfg, test, Objective::Np, EvalMode::TargetNll, &mut draw)
}
