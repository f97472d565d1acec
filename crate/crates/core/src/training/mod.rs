//! Optimization loops, KL schedules, masking and evaluation metrics.

mod eval;
mod loops;
mod record;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeMask;
use crate::rvae::ElboWeights;

pub use eval::{evaluate, mape, target_log_likelihood, EvalMode, EvalResult, EvalSet};
pub use loops::{init_store, train_farm, train_np, GpStream, TrainOutcome};
pub use record::{write_summary_csv, EvalPoint, RunRecord, SummaryRow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSchedule {
    Constant,
    /// Ramp every β from 0 to its configured value over `steps`.
    Linear { steps: usize },
}

/// Effective β weights at `step`.
pub fn kl_anneal(step: usize, weights: ElboWeights, schedule: BetaSchedule) -> ElboWeights {
    match schedule {
        BetaSchedule::Constant => weights,
        BetaSchedule::Linear { steps } if step >= steps => weights,
        BetaSchedule::Linear { steps } => weights.scaled(step as f64 / steps as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    /// Fraction of nodes masked per graph in the farm regime.
    pub mask_fraction: f64,
    /// Inclusive bounds on the context and target counts in the GP regime.
    pub context_range: (usize, usize),
    pub patience: usize,
    pub eval_interval: usize,
    pub weights: ElboWeights,
    pub schedule: BetaSchedule,
    pub mc_samples: usize,
    pub eval_mc_samples: usize,
    pub seed: u64,
    /// Random rotation of farm graphs at every step.
    #[serde(default)]
    pub augment_rotation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            max_steps: 40_000,
            batch_size: 16,
            mask_fraction: 0.2,
            context_range: (3, 50),
            patience: 2500,
            eval_interval: 500,
            weights: ElboWeights::default(),
            schedule: BetaSchedule::Constant,
            mc_samples: 1,
            eval_mc_samples: 16,
            seed: 0,
            augment_rotation: false,
        }
    }
}

impl TrainConfig {
    /// Settings of the GP meta-learning regime.
    pub fn neural_process() -> Self {
        Self {
            lr: 1e-4,
            patience: 40_000,
            ..Self::default()
        }
    }

    /// Seed of the evaluation noise; offset so that it never shares a
    /// stream with training.
    pub fn eval_seed(&self) -> u64 {
        self.seed ^ 0x5eed_e7a1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.eval_interval == 0 || self.patience % self.eval_interval != 0 {
            return bad(format!(
                "patience {} is not a multiple of the eval interval {}",
                self.patience, self.eval_interval
            ));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return bad(format!("mask fraction {} outside (0, 1)", self.mask_fraction));
        }
        if self.batch_size == 0 || self.mc_samples == 0 || self.eval_mc_samples == 0 {
            return bad("batch size and sample counts must be positive".into());
        }
        let (lo, hi) = self.context_range;
        if lo > hi {
            return bad(format!("empty context range {lo}..={hi}"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if let BetaSchedule::Linear { steps: 0 } = self.schedule {
            return bad("linear schedule over 0 steps".into());
        }
        Ok(())
    }
}

/// Masks `round(fraction · n)` nodes chosen uniformly, keeping at least one
/// target and, when `n ≥ 2`, at least one context node.
pub fn random_mask<R: Rng + ?Sized>(rng: &mut R, n: usize, fraction: f64) -> NodeMask {
    if n == 0 {
        return NodeMask(vec![]);
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut m = vec![false; n];
    for i in sample(rng, n, k) {
        m[i] = true;
    }
    NodeMask(m)
}
