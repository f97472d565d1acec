//! Synthetic tasks: GP regression draws and a simulated wind farm.

pub mod farm;
pub mod gp;
pub mod wake;

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::jsonl::write_jsonl;
use crate::graph::{AttributedGraph, GraphPartition};

pub use farm::{build_farm_graph, farm_partition, rotate_graph, FarmDataset, FarmDatasetSpec, LayoutSpec};
pub use gp::{build_gp_graph, sample_gp, GpDatasetSpec, GpFeatures, GpTask, Kernel};
pub use wake::{rotate, rotate_augment, simulate_wake, FarmLayout, FarmSnapshot, InflowSpec, TurbineSpec, WakeParams};

/// Per-channel mean and standard deviation of the node and edge state
/// channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub node_mean: Vec<f64>,
    pub node_std: Vec<f64>,
    pub edge_mean: Vec<f64>,
    pub edge_std: Vec<f64>,
}

fn moments(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut sum = vec![0.0; width];
    let mut sq = vec![0.0; width];
    for r in rows {
        n += 1;
        for (c, v) in r.iter().enumerate() {
            sum[c] += v;
            sq[c] += v * v;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let s = (q / n - m * m).max(0.0).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn transform(values: &mut [f64], width: usize, range: &Range<usize>, f: impl Fn(usize, f64) -> f64) {
    if width == 0 {
        return;
    }
    for row in values.chunks_mut(width) {
        for (c, v) in row[range.clone()].iter_mut().enumerate() {
            *v = f(c, *v);
        }
    }
}

impl Standardization {
    pub fn fit(graphs: &[AttributedGraph], part: &GraphPartition) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Precondition("cannot standardize an empty set".into()));
        }
        let node_rows = graphs
            .iter()
            .flat_map(|g| (0..g.num_nodes).map(move |i| g.node(i)[part.node.state.clone()].to_vec()));
        let (node_mean, node_std) = moments(node_rows, part.node.state_dim());
        let edge_rows = graphs
            .iter()
            .flat_map(|g| (0..g.num_edges()).map(move |k| g.edge(k)[part.edge.state.clone()].to_vec()));
        let (edge_mean, edge_std) = moments(edge_rows, part.edge.state_dim());
        Ok(Self {
            node_mean,
            node_std,
            edge_mean,
            edge_std,
        })
    }

    fn check(&self, part: &GraphPartition) -> Result<()> {
        if self.node_mean.len() != part.node.state_dim() || self.edge_mean.len() != part.edge.state_dim() {
            return Err(Error::Dimension("standardization does not match the state channels".into()));
        }
        Ok(())
    }

    pub fn apply(&self, g: &AttributedGraph, part: &GraphPartition) -> Result<AttributedGraph> {
        self.check(part)?;
        let mut out = g.clone();
        transform(&mut out.nodes, g.node_dim, &part.node.state, |c, v| (v - self.node_mean[c]) / self.node_std[c]);
        transform(&mut out.edges, g.edge_dim, &part.edge.state, |c, v| (v - self.edge_mean[c]) / self.edge_std[c]);
        Ok(out)
    }

    /// Maps a standardized node state value back to physical units.
    pub fn node_value(&self, channel: usize, z: f64) -> f64 {
        z * self.node_std[channel] + self.node_mean[channel]
    }
}

/// Description of a generated dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: String,
    pub seed: u64,
    pub count: usize,
    pub params: serde_json::Value,
    #[serde(default)]
    pub standardization: Option<Standardization>,
    #[serde(default)]
    pub layout: Option<FarmLayout>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound("dataset", path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub const GP_GENERATOR: &str = "gp-se";

/// Writes a GP evaluation set as `graphs.jsonl` (full features, masks
/// marking targets) plus `manifest.json`.
pub fn save_gp_dataset(dir: &Path, seed: u64, spec: &GpDatasetSpec) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tasks = gp::generate_gp_tasks(seed, spec)?;
    write_jsonl(&dir.join("graphs.jsonl"), &gp::gp_records(&tasks, spec.cutoff)?)?;
    DatasetManifest {
        generator: GP_GENERATOR.into(),
        seed,
        count: tasks.len(),
        params: serde_json::to_value(spec)?,
        standardization: None,
        layout: None,
    }
    .save(&dir.join("manifest.json"))
}

/// Reads a directory written by [`save_gp_dataset`].
pub fn load_gp_dataset(dir: &Path) -> Result<(GpDatasetSpec, Vec<(GpTask, crate::graph::NodeMask)>)> {
    let manifest = DatasetManifest::load(&dir.join("manifest.json"))?;
    if manifest.generator != GP_GENERATOR {
        return Err(Error::Config(format!("{} is not a GP dataset", dir.display())));
    }
    let spec: GpDatasetSpec = serde_json::from_value(manifest.params)?;
    let records = crate::graph::jsonl::read_jsonl(&dir.join("graphs.jsonl"))?;
    let tasks = records
        .into_iter()
        .map(|r| {
            let n = r.graph.num_nodes;
            let task = gp::task_from_graph(&r.graph, spec.kernel)?;
            Ok((task, r.mask.unwrap_or_else(|| crate::graph::NodeMask::none(n))))
        })
        .collect::<Result<_>>()?;
    Ok((spec, tasks))
}
