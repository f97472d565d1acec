use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rvae_autodiff::{ParameterStore, Tape};
use serde::{Deserialize, Serialize};

use super::physical;
use crate::datasets::farm::{build_farm_graph, farm_partition, FarmDataset, POWER_CHANNEL, WIND_CHANNEL};
use crate::datasets::wake::{angle_difference, bearing, distance, FarmLayout, FarmSnapshot, TurbineSpec, WakeParams};
use crate::datasets::Standardization;
use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, NodeMask};
use crate::graphnet::GraphVars;
use crate::rvae::{Prepared, RvaeModel};

const BATCH: usize = 64;

/// Decoder means at `z = μ` of node state `channels`, in physical units,
/// one row per node of every graph.
fn predict_nodes(
    model: &RvaeModel,
    store: &ParameterStore,
    graphs: &[AttributedGraph],
    masks: &[NodeMask],
    scale: Option<&Standardization>,
    channels: &[usize],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(graphs.len());
    for (g, m) in graphs.chunks(BATCH).zip(masks.chunks(BATCH)) {
        let prep = Prepared::new(g, m, &model.config.partition)?;
        let mut tape = Tape::new();
        let vars = GraphVars::constants(&mut tape, &prep.masked);
        let lik = model.predict(&mut tape, store, &prep.masked, vars, None::<&mut ChaCha8Rng>)?;
        let mu = tape.value(lik.node.ok_or_else(|| Error::Config("model has no node likelihood".into()))?.mu);
        let mut row = 0;
        for graph in g {
            out.push(
                (row..row + graph.num_nodes)
                    .map(|i| channels.iter().map(|&c| physical(scale, c, mu.get(i, c))).collect())
                    .collect(),
            );
            row += graph.num_nodes;
        }
    }
    Ok(out)
}

/// Wind-direction binning of per-turbine quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolarSpec {
    pub bins: usize,
    /// Bins with fewer samples are reported as missing.
    pub min_samples: usize,
    /// Masking folds used to predict every turbine of a snapshot.
    pub folds: usize,
}

impl Default for PolarSpec {
    fn default() -> Self {
        Self {
            bins: 36,
            min_samples: 20,
            folds: 5,
        }
    }
}

impl PolarSpec {
    fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.folds == 0 {
            return Err(Error::Config("polar binning needs at least one bin and one fold".into()));
        }
        Ok(())
    }

    pub fn bin(&self, direction: f64) -> usize {
        let width = 360.0 / self.bins as f64;
        ((direction.rem_euclid(360.0) / width) as usize).min(self.bins - 1)
    }

    pub fn center(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) * 360.0 / self.bins as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarBin {
    pub samples: usize,
    pub mean: f64,
    /// Largest reported bin mean of the turbine minus this bin's mean.
    pub deficit: f64,
}

/// Bins `values[snapshot][turbine]` by the snapshot's wind direction.
/// Returns `[turbine][bin]`, `None` for bins below the sample minimum.
pub fn polar_deficits(directions: &[f64], values: &[Vec<f64>], spec: &PolarSpec) -> Result<Vec<Vec<Option<PolarBin>>>> {
    spec.validate()?;
    if directions.len() != values.len() {
        return Err(Error::Dimension(format!("{} directions for {} snapshots", directions.len(), values.len())));
    }
    let turbines = values.first().map_or(0, Vec::len);
    if values.iter().any(|v| v.len() != turbines) {
        return Err(Error::Dimension("snapshots list different turbine counts".into()));
    }
    let mut sums = vec![vec![(0usize, 0.0); spec.bins]; turbines];
    for (dir, row) in directions.iter().zip(values) {
        let b = spec.bin(*dir);
        for (t, v) in row.iter().enumerate() {
            sums[t][b].0 += 1;
            sums[t][b].1 += v;
        }
    }
    Ok(sums
        .into_iter()
        .map(|bins| {
            let means: Vec<Option<(usize, f64)>> = bins
                .into_iter()
                .map(|(n, s)| (n >= spec.min_samples.max(1)).then(|| (n, s / n as f64)))
                .collect();
            let top = means.iter().flatten().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
            means
                .into_iter()
                .map(|m| {
                    m.map(|(samples, mean)| PolarBin {
                        samples,
                        mean,
                        deficit: top - mean,
                    })
                })
                .collect()
        })
        .collect())
}

/// One turbine and direction bin: simulator truth and model prediction of
/// wind speed and power with their `max − v` deficits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarRow {
    pub turbine: usize,
    pub bin: usize,
    pub direction: f64,
    pub samples: usize,
    pub wind_true: f64,
    pub wind_model: f64,
    pub wind_deficit_true: f64,
    pub wind_deficit_model: f64,
    pub power_true: f64,
    pub power_model: f64,
    pub power_deficit_true: f64,
    pub power_deficit_model: f64,
}

/// Polar deficit table over the `snapshots` of `dataset`. Every turbine is
/// predicted while masked: turbine `i` is hidden in fold `i % folds`
/// together with the rest of its fold. Bins below the sample minimum are
/// left out.
pub fn wake_polar(
    model: &RvaeModel,
    store: &ParameterStore,
    dataset: &FarmDataset,
    snapshots: std::ops::Range<usize>,
    scale: Option<&Standardization>,
    spec: &PolarSpec,
) -> Result<Vec<PolarRow>> {
    spec.validate()?;
    if snapshots.is_empty() || snapshots.end > dataset.len() {
        return Err(Error::Precondition(format!("snapshot range {snapshots:?} outside 0..{}", dataset.len())));
    }
    let n = dataset.layout.len();
    let part = dataset.partition();
    let graphs = snapshots
        .clone()
        .map(|i| {
            let g = dataset.graph(i)?;
            scale.map_or(Ok(g.clone()), |s| s.apply(&g, &part))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut wind = vec![vec![0.0; n]; graphs.len()];
    let mut power = vec![vec![0.0; n]; graphs.len()];
    for fold in 0..spec.folds.min(n) {
        let mask = NodeMask((0..n).map(|i| i % spec.folds == fold).collect());
        let masks = vec![mask.clone(); graphs.len()];
        let pred = predict_nodes(model, store, &graphs, &masks, scale, &[WIND_CHANNEL, POWER_CHANNEL])?;
        for (s, nodes) in pred.iter().enumerate() {
            for i in (0..n).filter(|&i| mask.is_target(i)) {
                wind[s][i] = nodes[i][0];
                power[s][i] = nodes[i][1];
            }
        }
    }
    let snaps = &dataset.snapshots[snapshots];
    let dirs: Vec<f64> = snaps.iter().map(|s| s.wind_direction).collect();
    let true_wind: Vec<Vec<f64>> = snaps.iter().map(|s| s.speed_mean.clone()).collect();
    let true_power: Vec<Vec<f64>> = snaps.iter().map(|s| s.power.clone()).collect();
    let tables = [
        polar_deficits(&dirs, &true_wind, spec)?,
        polar_deficits(&dirs, &wind, spec)?,
        polar_deficits(&dirs, &true_power, spec)?,
        polar_deficits(&dirs, &power, spec)?,
    ];
    let mut rows = Vec::new();
    for t in 0..n {
        for b in 0..spec.bins {
            let [Some(tw), Some(mw), Some(tp), Some(mp)] = [tables[0][t][b], tables[1][t][b], tables[2][t][b], tables[3][t][b]] else {
                continue;
            };
            rows.push(PolarRow {
                turbine: t,
                bin: b,
                direction: spec.center(b),
                samples: tw.samples,
                wind_true: tw.mean,
                wind_model: mw.mean,
                wind_deficit_true: tw.deficit,
                wind_deficit_model: mw.deficit,
                power_true: tp.mean,
                power_model: mp.mean,
                power_deficit_true: tp.deficit,
                power_deficit_model: mp.deficit,
            });
        }
    }
    Ok(rows)
}

/// Cell-centered regular grid in the wind frame: `x` downstream of the
/// source, `y` across the wind, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub spacing: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_min: -500.0,
            x_max: 2000.0,
            y_min: -750.0,
            y_max: 750.0,
            spacing: 50.0,
        }
    }
}

fn axis(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && hi > lo && (hi - lo) / step < 1e6) {
        return Err(Error::Config(format!("bad grid axis [{lo}, {hi}] step {step}")));
    }
    let n = ((hi - lo) / step).round().max(1.0) as usize;
    Ok((0..n).map(|k| lo + (k as f64 + 0.5) * step).collect())
}

impl GridSpec {
    pub fn xs(&self) -> Result<Vec<f64>> {
        axis(self.x_min, self.x_max, self.spacing)
    }

    pub fn ys(&self) -> Result<Vec<f64>> {
        axis(self.y_min, self.y_max, self.spacing)
    }
}

/// A source turbine at the origin facing the wind and a passive probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSpec {
    pub grid: GridSpec,
    pub wind_speed: f64,
    pub wind_direction: f64,
    pub turbine: TurbineSpec,
    pub wake: WakeParams,
    pub cutoff_multiplier: f64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            wind_speed: 8.0,
            wind_direction: 270.0,
            turbine: TurbineSpec::default(),
            wake: WakeParams::default(),
            cutoff_multiplier: 100.0,
        }
    }
}

impl ProbeSpec {
    /// East/north position of wind-frame point `(x, y)`.
    pub fn position(&self, x: f64, y: f64) -> [f64; 2] {
        let t = self.wind_direction.to_radians();
        let d = [-t.sin(), -t.cos()];
        let c = [-d[1], d[0]];
        [x * d[0] + y * c[0], x * d[1] + y * c[1]]
    }

    /// Simulator deficit `w(0,0) − w(x,y)` at the probe. The probe sheds
    /// no wake, so the source sees the free stream.
    pub fn simulator_deficit(&self, x: f64, y: f64) -> f64 {
        self.wind_speed * self.wake.deficit(self.turbine.rotor_radius(), x, y)
    }
}

/// Source and probe as a 2-node farm graph in physical units, probe masked.
pub fn probe_graph(spec: &ProbeSpec, x: f64, y: f64, global_conditioning: bool) -> Result<(AttributedGraph, NodeMask)> {
    if x.hypot(y) < 1e-9 {
        return Err(Error::Precondition(format!("grid point ({x}, {y}) coincides with the source")));
    }
    let layout = FarmLayout::new(vec![[0.0, 0.0], spec.position(x, y)], spec.turbine)?;
    let u = spec.wind_speed;
    let w = u - spec.simulator_deficit(x, y);
    let snap = FarmSnapshot {
        wind_speed: u,
        wind_direction: spec.wind_direction,
        yaws: vec![spec.wind_direction; 2],
        speed_mean: vec![u, w],
        speed_std: vec![0.0; 2],
        power: vec![spec.turbine.power(u), spec.turbine.power(w)],
    };
    let (g, _) = build_farm_graph(&layout, &snap, spec.cutoff_multiplier, global_conditioning)?;
    Ok((g, NodeMask(vec![false, true])))
}

/// Deficits on the grid, row-major with `y` outer and `x` inner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeficitField {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub model: Vec<f64>,
    pub simulator: Vec<f64>,
}

impl DeficitField {
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.xs.len() + ix
    }

    /// `x, y, model, simulator, error` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "model", "simulator", "error"])?;
        for (iy, y) in self.ys.iter().enumerate() {
            for (ix, x) in self.xs.iter().enumerate() {
                let k = self.index(ix, iy);
                let (m, s) = (self.model[k], self.simulator[k]);
                w.write_record([x, y, &m, &s, &(m - s)].map(|v| v.to_string()))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Simulator deficits on the grid.
pub fn simulator_field(spec: &ProbeSpec) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (xs, ys) = (spec.grid.xs()?, spec.grid.ys()?);
    let values = ys.iter().flat_map(|&y| xs.iter().map(move |&x| spec.simulator_deficit(x, y))).collect();
    Ok((xs, ys, values))
}

/// Model deficit field: the probe's wind speed predicted at `z = μ` from
/// the observed source, subtracted from the source's.
pub fn probe_grid(model: &RvaeModel, store: &ParameterStore, scale: Option<&Standardization>, spec: &ProbeSpec) -> Result<DeficitField> {
    let conditioned = model.config.partition.global.conditioning_dim() > 0;
    let part = farm_partition(conditioned);
    if model.config.partition != part {
        return Err(Error::Config("probe grid needs a farm model".into()));
    }
    let (xs, ys, simulator) = simulator_field(spec)?;
    let mut graphs = Vec::with_capacity(simulator.len());
    let mut masks = Vec::with_capacity(simulator.len());
    for &y in &ys {
        for &x in &xs {
            let (g, m) = probe_graph(spec, x, y, conditioned)?;
            graphs.push(scale.map_or(Ok(g.clone()), |s| s.apply(&g, &part))?);
            masks.push(m);
        }
    }
    let pred = predict_nodes(model, store, &graphs, &masks, scale, &[WIND_CHANNEL])?;
    let model_field = pred.iter().map(|nodes| spec.wind_speed - nodes[1][0]).collect::<Vec<f64>>();
    if model_field.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe-grid deficit".into()));
    }
    Ok(DeficitField {
        xs,
        ys,
        model: model_field,
        simulator,
    })
}

/// Neighbours of `target` within `radius` meters whose bearing from it is
/// within `half_angle` degrees of the wind's from-bearing (upstream) or of
/// the opposite bearing (downstream).
pub fn wind_sectors(layout: &FarmLayout, direction: f64, target: usize, half_angle: f64, radius: f64) -> (Vec<usize>, Vec<usize>) {
    let p = layout.positions[target];
    let mut up = Vec::new();
    let mut down = Vec::new();
    for (j, &q) in layout.positions.iter().enumerate() {
        if j == target || distance(p, q) > radius {
            continue;
        }
        let b = bearing(p, q);
        if angle_difference(b, direction).abs() <= half_angle {
            up.push(j);
        } else if angle_difference(b, direction + 180.0).abs() <= half_angle {
            down.push(j);
        }
    }
    (up, down)
}
