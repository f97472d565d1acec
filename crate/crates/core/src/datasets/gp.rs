//! Zero-mean 1D Gaussian-process regression tasks and their graphs.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::jsonl::GraphRecord;
use crate::graph::{AttributedGraph, ChannelSplit, Edge, GraphPartition, NodeMask};

/// Squared-exponential kernel with additive observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Kernel {
    pub variance: f64,
    pub lengthscale: f64,
    pub noise_variance: f64,
}

impl Default for Kernel {
    fn default() -> Self {
        Self {
            variance: 1.0,
            lengthscale: 0.2,
            noise_variance: 0.02 * 0.02,
        }
    }
}

impl Kernel {
    pub fn k(&self, a: f64, b: f64) -> f64 {
        let d = a - b;
        self.variance * (-d * d / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }

    /// `K + σ_n² I` at the given inputs.
    pub fn covariance(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        DMatrix::from_fn(n, n, |i, j| self.k(x[i], x[j]) + if i == j { self.noise_variance } else { 0.0 })
    }

    fn check(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.lengthscale > 0.0 && self.noise_variance >= 0.0) {
            return Err(Error::Precondition(format!("invalid kernel {self:?}")));
        }
        Ok(())
    }
}

/// One function draw observed at `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpTask {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub kernel: Kernel,
}

const JITTER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Draws `y ~ N(0, K + σ_n² I)` at fixed inputs. Adds increasing diagonal
/// jitter when the factorization fails.
pub fn sample_gp_at<R: Rng + ?Sized>(rng: &mut R, x: Vec<f64>, kernel: Kernel) -> Result<GpTask> {
    kernel.check()?;
    if x.is_empty() {
        return Err(Error::Precondition("a GP task needs at least one input".into()));
    }
    let cov = kernel.covariance(&x);
    let n = x.len();
    let chol = JITTER
        .iter()
        .find_map(|&j| (cov.clone() + DMatrix::identity(n, n) * (j * kernel.variance)).cholesky())
        .ok_or_else(|| Error::Factorization(format!("covariance of {n} points is not positive definite")))?;
    let eps = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let y = chol.l() * eps;
    Ok(GpTask {
        x,
        y: y.iter().copied().collect(),
        kernel,
    })
}

/// Draws `n` inputs uniformly from `x_range` and a function at them.
pub fn sample_gp<R: Rng + ?Sized>(rng: &mut R, n: usize, kernel: Kernel, x_range: Range<f64>) -> Result<GpTask> {
    if n == 0 || x_range.is_empty() {
        return Err(Error::Precondition(format!("need n >= 1 and a nonempty range, got {n} and {x_range:?}")));
    }
    let x = (0..n).map(|_| rng.random_range(x_range.clone())).collect();
    sample_gp_at(rng, x, kernel)
}

/// Which attributes a GP graph exposes to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpFeatures {
    /// Node `(y)`, edge `(w)`: relative positions only.
    Relative,
    /// Node `(y, x)`, edges without attributes.
    NodeOnly,
    /// Node `(y, x)`, edge `(w)`.
    Full,
}

impl GpFeatures {
    pub fn partition(self) -> GraphPartition {
        let (node_cond, edge_cond) = match self {
            Self::Relative => (0, 1),
            Self::NodeOnly => (1, 0),
            Self::Full => (1, 1),
        };
        GraphPartition {
            node: ChannelSplit::leading_state(1, node_cond),
            edge: ChannelSplit::leading_state(0, edge_cond),
            global: ChannelSplit::leading_state(0, 0),
            mask_channel: None,
        }
    }
}

/// `c` such that the edge attribute `exp(−c d²)` is 0.01 at the cutoff.
pub fn edge_scale(cutoff: f64) -> f64 {
    100f64.ln() / (cutoff * cutoff)
}

/// Points as nodes, directed edges both ways between points closer than
/// `cutoff`.
pub fn build_gp_graph(task: &GpTask, cutoff: f64, features: GpFeatures) -> Result<(AttributedGraph, GraphPartition)> {
    if !(cutoff > 0.0) {
        return Err(Error::Precondition(format!("cutoff must be positive, got {cutoff}")));
    }
    if task.x.len() != task.y.len() {
        return Err(Error::Dimension(format!("{} inputs but {} outputs", task.x.len(), task.y.len())));
    }
    let c = edge_scale(cutoff);
    let with_x = features != GpFeatures::Relative;
    let with_w = features != GpFeatures::NodeOnly;
    let nodes: Vec<Vec<f64>> = task
        .x
        .iter()
        .zip(&task.y)
        .map(|(&x, &y)| if with_x { vec![y, x] } else { vec![y] })
        .collect();
    let mut edges = Vec::new();
    for (i, &xi) in task.x.iter().enumerate() {
        for (j, &xj) in task.x.iter().enumerate() {
            let d = (xi - xj).abs();
            if i != j && d < cutoff {
                let attrs = if with_w { vec![(-c * d * d).exp()] } else { vec![] };
                edges.push(Edge { sender: i, receiver: j, attrs });
            }
        }
    }
    let g = AttributedGraph::from_rows(1 + usize::from(with_x), &nodes, usize::from(with_w), &edges, vec![])?;
    Ok((g, features.partition()))
}

/// Recovers the task from a graph built with [`GpFeatures::Full`] or
/// [`GpFeatures::NodeOnly`].
pub fn task_from_graph(g: &AttributedGraph, kernel: Kernel) -> Result<GpTask> {
    if g.node_dim < 2 {
        return Err(Error::Dimension(format!("GP graph needs (y, x) nodes, got width {}", g.node_dim)));
    }
    Ok(GpTask {
        x: g.node_columns(1..2),
        y: g.node_columns(0..1),
        kernel,
    })
}

/// Settings of a stored GP evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpDatasetSpec {
    pub tasks: usize,
    pub context: usize,
    pub targets: usize,
    pub kernel: Kernel,
    pub x_range: Range<f64>,
    pub cutoff: f64,
}

impl Default for GpDatasetSpec {
    fn default() -> Self {
        Self {
            tasks: 1000,
            context: 50,
            targets: 50,
            kernel: Kernel::default(),
            x_range: 0.0..1.0,
            cutoff: 0.1,
        }
    }
}

/// Random stream of item `index` under `seed`.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Tasks with `context` leading context points and `targets` trailing
/// target points; each task uses its own random stream.
pub fn generate_gp_tasks(seed: u64, spec: &GpDatasetSpec) -> Result<Vec<(GpTask, NodeMask)>> {
    let n = spec.context + spec.targets;
    (0..spec.tasks)
        .map(|i| {
            let task = sample_gp(&mut item_rng(seed, i as u64), n, spec.kernel, spec.x_range.clone())?;
            let mask = NodeMask((0..n).map(|k| k >= spec.context).collect());
            Ok((task, mask))
        })
        .collect()
}

/// The tasks as full-feature graph records carrying their masks.
pub fn gp_records(tasks: &[(GpTask, NodeMask)], cutoff: f64) -> Result<Vec<GraphRecord>> {
    tasks
        .iter()
        .map(|(t, m)| {
            let (graph, _) = build_gp_graph(t, cutoff, GpFeatures::Full)?;
            Ok(GraphRecord {
                graph,
                mask: Some(m.clone()),
            })
        })
        .collect()
}
