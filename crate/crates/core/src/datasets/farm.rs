//! Wind-farm graphs, rotation augmentation, and stored farm datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gp::item_rng;
use super::wake::{bearing, distance, random_layout, simulate_wake, FarmLayout, FarmSnapshot, InflowSpec, TurbineSpec, WakeParams};
use super::{DatasetManifest, Standardization};
use crate::error::{Error, Result};
use crate::graph::jsonl::{write_jsonl, GraphRecord};
use crate::graph::{AttributedGraph, ChannelSplit, Edge, GraphPartition};

/// Node state channels: effective wind mean, wind spread, power.
pub const NODE_STATE: usize = 3;
pub const WIND_CHANNEL: usize = 0;
pub const POWER_CHANNEL: usize = 2;
/// Node `(cos θ, sin θ)` of the yaw.
const NODE_ANGLE: usize = 3;
/// Edge `(cos φ, sin φ)` of the sender-to-receiver bearing.
const EDGE_ANGLE: usize = 0;
/// Global `(cos, sin)` of the wind direction when globals are kept.
const GLOBAL_ANGLE: usize = 1;

pub fn farm_partition(global_conditioning: bool) -> GraphPartition {
    GraphPartition {
        node: ChannelSplit::leading_state(NODE_STATE, 2),
        edge: ChannelSplit::leading_state(0, 3),
        global: ChannelSplit::leading_state(0, if global_conditioning { 3 } else { 0 }),
        mask_channel: None,
    }
}

fn unit(deg: f64) -> [f64; 2] {
    let r = deg.to_radians();
    [r.cos(), r.sin()]
}

/// Turbines as nodes with directed edges between pairs closer than
/// `cutoff_multiplier` rotor diameters. Node: `(wind mean, wind std, power,
/// cos θ, sin θ)`; edge: `(cos φ, sin φ, distance / d)`; global:
/// `(U∞, cos, sin)` of the inflow, or nothing.
pub fn build_farm_graph(
    layout: &FarmLayout,
    snapshot: &FarmSnapshot,
    cutoff_multiplier: f64,
    global_conditioning: bool,
) -> Result<(AttributedGraph, GraphPartition)> {
    if !(cutoff_multiplier > 0.0) {
        return Err(Error::Precondition(format!("cutoff multiplier must be positive, got {cutoff_multiplier}")));
    }
    let n = layout.len();
    if [snapshot.yaws.len(), snapshot.speed_mean.len(), snapshot.speed_std.len(), snapshot.power.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::Dimension(format!("snapshot does not cover {n} turbines")));
    }
    let d = layout.turbine.rotor_diameter;
    let nodes: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let [c, s] = unit(snapshot.yaws[i]);
            vec![snapshot.speed_mean[i], snapshot.speed_std[i], snapshot.power[i], c, s]
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (layout.positions[i], layout.positions[j]);
            let dist = distance(a, b);
            if i != j && dist < cutoff_multiplier * d {
                let [c, s] = unit(bearing(a, b));
                edges.push(Edge {
                    sender: i,
                    receiver: j,
                    attrs: vec![c, s, dist / d],
                });
            }
        }
    }
    let globals = if global_conditioning {
        let [c, s] = unit(snapshot.wind_direction);
        vec![snapshot.wind_speed, c, s]
    } else {
        vec![]
    };
    let g = AttributedGraph::from_rows(5, &nodes, 3, &edges, globals)?;
    Ok((g, farm_partition(global_conditioning)))
}

fn rotate_pair(values: &mut [f64], at: usize, alpha: [f64; 2]) {
    let (c, s) = (values[at], values[at + 1]);
    values[at] = c * alpha[0] - s * alpha[1];
    values[at + 1] = s * alpha[0] + c * alpha[1];
}

/// Adds `alpha` degrees to every bearing encoded in a farm graph: what
/// [`super::wake::rotate`] does to the layout, applied to the attributes.
pub fn rotate_graph(g: &AttributedGraph, alpha: f64) -> AttributedGraph {
    let a = unit(alpha);
    let mut out = g.clone();
    for row in out.nodes.chunks_mut(g.node_dim) {
        rotate_pair(row, NODE_ANGLE, a);
    }
    for row in out.edges.chunks_mut(g.edge_dim.max(1)).take(g.num_edges()) {
        rotate_pair(row, EDGE_ANGLE, a);
    }
    if g.global_dim() == 3 {
        rotate_pair(&mut out.globals, GLOBAL_ANGLE, a);
    }
    out
}

/// Seeded pseudo-random layout with sizes in rotor diameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub seed: u64,
    pub turbines: usize,
    pub min_spacing: f64,
    pub extent: f64,
}

impl LayoutSpec {
    /// 30 turbines at least 3 d apart in a 20 d square.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            turbines: 30,
            min_spacing: 3.0,
            extent: 20.0,
        }
    }

    pub fn build(&self, turbine: TurbineSpec) -> Result<FarmLayout> {
        let d = turbine.rotor_diameter;
        random_layout(&mut item_rng(self.seed, 0), self.turbines, self.min_spacing * d, self.extent * d, turbine)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FarmDatasetSpec {
    pub snapshots: usize,
    pub inflow: InflowSpec,
    pub wake: WakeParams,
    pub cutoff_multiplier: f64,
    pub global_conditioning: bool,
    pub train_fraction: f64,
}

impl Default for FarmDatasetSpec {
    fn default() -> Self {
        Self {
            snapshots: 4462,
            inflow: InflowSpec::default(),
            wake: WakeParams::default(),
            cutoff_multiplier: 100.0,
            global_conditioning: false,
            train_fraction: 0.8,
        }
    }
}

/// Snapshots of one layout; the leading `train_fraction` form the training
/// split.
#[derive(Debug, Clone, PartialEq)]
pub struct FarmDataset {
    pub layout: FarmLayout,
    pub spec: FarmDatasetSpec,
    pub seed: u64,
    pub snapshots: Vec<FarmSnapshot>,
}

pub const GENERATOR: &str = "jensen-farm";

impl FarmDataset {
    /// Snapshot `i` is drawn from the random stream `(seed, i)`.
    pub fn generate(seed: u64, layout: FarmLayout, spec: FarmDatasetSpec) -> Result<Self> {
        if spec.snapshots == 0 {
            return Err(Error::Precondition("a farm dataset needs at least one snapshot".into()));
        }
        if !(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0) {
            return Err(Error::Config(format!("train fraction {} outside (0, 1]", spec.train_fraction)));
        }
        layout.validate()?;
        let snapshots = (0..spec.snapshots)
            .map(|i| {
                let mut rng = item_rng(seed, i as u64);
                let (speed, direction, yaws) = spec.inflow.draw(&mut rng, layout.len());
                simulate_wake(&layout, speed, direction, &yaws, &spec.wake)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layout,
            spec,
            seed,
            snapshots,
        })
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn partition(&self) -> GraphPartition {
        farm_partition(self.spec.global_conditioning)
    }

    pub fn graph(&self, i: usize) -> Result<AttributedGraph> {
        let (g, _) = build_farm_graph(&self.layout, &self.snapshots[i], self.spec.cutoff_multiplier, self.spec.global_conditioning)?;
        Ok(g)
    }

    /// Raw (unstandardized) graphs of every snapshot.
    pub fn graphs(&self) -> Result<Vec<AttributedGraph>> {
        (0..self.len()).map(|i| self.graph(i)).collect()
    }

    /// Graphs of `range` mapped through `scale`.
    pub fn scaled_graphs(&self, range: std::ops::Range<usize>, scale: &Standardization) -> Result<Vec<AttributedGraph>> {
        let part = self.partition();
        range.map(|i| scale.apply(&self.graph(i)?, &part)).collect()
    }

    pub fn train_len(&self) -> usize {
        ((self.len() as f64 * self.spec.train_fraction).round() as usize).clamp(1, self.len())
    }

    /// Statistics of the node state channels over the training split.
    pub fn standardization(&self) -> Result<Standardization> {
        let train: Vec<AttributedGraph> = (0..self.train_len()).map(|i| self.graph(i)).collect::<Result<_>>()?;
        Standardization::fit(&train, &self.partition())
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        Ok(DatasetManifest {
            generator: GENERATOR.into(),
            seed: self.seed,
            count: self.len(),
            params: serde_json::to_value(&self.spec)?,
            standardization: Some(self.standardization()?),
            layout: Some(self.layout.clone()),
        })
    }

    /// Writes `manifest.json`, `graphs.jsonl` (raw attributes) and
    /// `snapshots.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.manifest()?.save(&dir.join("manifest.json"))?;
        let records: Vec<GraphRecord> = self.graphs()?.into_iter().map(GraphRecord::from).collect();
        write_jsonl(&dir.join("graphs.jsonl"), &records)?;
        self.write_csv(&dir.join("snapshots.csv"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&dir.join("manifest.json"))?;
        if manifest.generator != GENERATOR {
            return Err(Error::Config(format!("{} is not a farm dataset", dir.display())));
        }
        let spec: FarmDatasetSpec = serde_json::from_value(manifest.params)?;
        let layout = manifest
            .layout
            .ok_or_else(|| Error::Config("farm manifest without a layout".into()))?;
        let snapshots = read_csv(&dir.join("snapshots.csv"), layout.len())?;
        if snapshots.len() != manifest.count {
            return Err(Error::Config(format!("manifest lists {} snapshots, csv has {}", manifest.count, snapshots.len())));
        }
        Ok(Self {
            layout,
            spec,
            seed: manifest.seed,
            snapshots,
        })
    }

    fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (s, snap) in self.snapshots.iter().enumerate() {
            for (t, p) in self.layout.positions.iter().enumerate() {
                w.serialize(CsvRow {
                    snapshot: s,
                    turbine: t,
                    x: p[0],
                    y: p[1],
                    wind_speed: snap.wind_speed,
                    wind_direction: snap.wind_direction,
                    yaw: snap.yaws[t],
                    speed_mean: snap.speed_mean[t],
                    speed_std: snap.speed_std[t],
                    power: snap.power[t],
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    snapshot: usize,
    turbine: usize,
    x: f64,
    y: f64,
    wind_speed: f64,
    wind_direction: f64,
    yaw: f64,
    speed_mean: f64,
    speed_std: f64,
    power: f64,
}

fn read_csv(path: &Path, turbines: usize) -> Result<Vec<FarmSnapshot>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::NotFound("dataset", path.to_path_buf()),
        _ => Error::Csv(e),
    })?;
    let mut by_snapshot: BTreeMap<usize, Vec<CsvRow>> = BTreeMap::new();
    for row in reader.deserialize() {
        let row: CsvRow = row?;
        by_snapshot.entry(row.snapshot).or_default().push(row);
    }
    by_snapshot
        .into_iter()
        .map(|(s, mut rows)| {
            rows.sort_by_key(|r| r.turbine);
            if rows.len() != turbines || rows.iter().enumerate().any(|(i, r)| r.turbine != i) {
                return Err(Error::Config(format!("snapshot {s} does not list turbines 0..{turbines}")));
            }
            Ok(FarmSnapshot {
                wind_speed: rows[0].wind_speed,
                wind_direction: rows[0].wind_direction,
                yaws: rows.iter().map(|r| r.yaw).collect(),
                speed_mean: rows.iter().map(|r| r.speed_mean).collect(),
                speed_std: rows.iter().map(|r| r.speed_std).collect(),
                power: rows.iter().map(|r| r.power).collect(),
            })
        })
        .collect()
}

/// Uniform random rotation of a farm graph's bearings.
pub fn augment<R: Rng + ?Sized>(rng: &mut R, g: &AttributedGraph) -> AttributedGraph {
    rotate_graph(g, rng.random_range(0.0..360.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_spec_is_deterministic_and_spaced() {
        let t = TurbineSpec::default();
        let a = LayoutSpec::with_seed(3).build(t).unwrap();
        assert_eq!(a, LayoutSpec::with_seed(3).build(t).unwrap());
        assert_ne!(a, LayoutSpec::with_seed(4).build(t).unwrap());
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert!(distance(a.positions[i], a.positions[j]) >= 3.0 * 126.0);
            }
        }
    }

    #[test]
    fn rotating_a_graph_by_zero_is_identity() {
        let layout = LayoutSpec::with_seed(1).build(TurbineSpec::default()).unwrap();
        let spec = FarmDatasetSpec {
            snapshots: 1,
            global_conditioning: true,
            ..FarmDatasetSpec::default()
        };
        let ds = FarmDataset::generate(0, layout, spec).unwrap();
        let g = ds.graph(0).unwrap();
        assert_eq!(rotate_graph(&g, 0.0), g);
    }
}
