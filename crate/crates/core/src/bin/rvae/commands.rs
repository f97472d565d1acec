use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rvae::analysis::{impute, probe_grid, sensitivity, wake_polar};
use rvae::datasets::gp::{build_gp_graph, GpFeatures};
use rvae::datasets::{load_gp_dataset, save_gp_dataset, FarmDataset, Standardization};
use rvae::rvae::{Checkpoint, RvaeModel};
use rvae::training::{evaluate, init_store, mape, train_farm, train_np, EvalMode, EvalSet, TrainOutcome};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{self, Analysis, DataSpec, GenerateFarm, GenerateGp, Loaded, TrainJob};
use crate::{Command, Common, Mode, WithCheckpoint};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("cannot write {}", path.display()))
}

/// Everything needed to rerun the command, and nothing that varies between
/// identical reruns.
fn manifest<T: Serialize>(out: &Path, command: &str, seed: u64, config: &T, extra: Value) -> Result<()> {
    let mut m = json!({
        "tool": "rvae",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "config": serde_json::to_value(config)?,
    });
    if let (Value::Object(m), Value::Object(extra)) = (&mut m, extra) {
        m.extend(extra);
    }
    write_json(&out.join("run_manifest.json"), &m)
}

fn prepare(common: &Common) -> Result<()> {
    fs::create_dir_all(&common.out).with_context(|| format!("cannot create {}", common.out.display()))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenerateGp(c) => generate_gp(&c),
        Command::GenerateFarm(c) => generate_farm(&c),
        Command::Train(c) => train(&c),
        Command::Evaluate { args, mode } => evaluate_cmd(&args, mode),
        Command::Impute(a) => impute_cmd(&a),
        Command::Sensitivity(a) => sensitivity_cmd(&a),
        Command::WakePolar(a) => wake_polar_cmd(&a),
        Command::ProbeGrid(a) => probe_grid_cmd(&a),
    }
}

fn generate_gp(c: &Common) -> Result<()> {
    let mut cfg: Loaded<GenerateGp> = config::load(c.config.as_deref())?;
    cfg.value.seed = c.seed.unwrap_or(cfg.value.seed);
    prepare(c)?;
    save_gp_dataset(&c.out, cfg.value.seed, &cfg.value.dataset)?;
    manifest(&c.out, "generate-gp", cfg.value.seed, &cfg.value, json!({}))
}

fn generate_farm(c: &Common) -> Result<()> {
    let mut cfg: Loaded<GenerateFarm> = config::load(c.config.as_deref())?;
    cfg.value.seed = c.seed.unwrap_or(cfg.value.seed);
    let g = &cfg.value;
    let layout = g.layout.build(g.turbine)?;
    let ds = FarmDataset::generate(g.seed, layout, g.dataset.clone())?;
    prepare(c)?;
    ds.save(&c.out)?;
    manifest(&c.out, "generate-farm", g.seed, g, json!({}))
}

fn save_run(out: &Path, model: &RvaeModel, cfg_seed: u64, weights: rvae::rvae::ElboWeights, outcome: &TrainOutcome, scale: Option<Standardization>) -> Result<()> {
    Checkpoint {
        config: model.config.clone(),
        weights,
        seed: cfg_seed,
        params: outcome.params.clone(),
        scale,
    }
    .save(&out.join("checkpoint.json"))?;
    fs::write(out.join("record.jsonl"), outcome.record.to_jsonl()?)?;
    write_json(&out.join("summary.json"), &outcome.record)
}

fn train(c: &Common) -> Result<()> {
    let mut cfg: Loaded<TrainJob> = config::load_required(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.value.train_mut().seed = s;
    }
    match &cfg.value {
        TrainJob::Farm { dataset, model, train } => {
            let ds = FarmDataset::load(&cfg.path(dataset))?;
            let model = RvaeModel::new(model.resolve(ds.spec.global_conditioning))?;
            if model.config.partition != ds.partition() {
                bail!("model channels do not match the farm dataset");
            }
            let scale = ds.standardization()?;
            let split = ds.train_len();
            let train_graphs = ds.scaled_graphs(0..split, &scale)?;
            if split == ds.len() {
                bail!("farm dataset has no test split");
            }
            let test = EvalSet::masked(ds.scaled_graphs(split..ds.len(), &scale)?, ds.partition(), train.mask_fraction, train.eval_seed())?
                .with_scale(scale.clone());
            let outcome = train_farm(&model, init_store(&model, train.seed), &train_graphs, &test, train)?;
            prepare(c)?;
            save_run(&c.out, &model, train.seed, train.weights, &outcome, Some(scale))?;
            manifest(&c.out, "train", train.seed, &cfg.value, json!({}))
        }
        TrainJob::Gp { model, train, stream, test } => {
            let model = RvaeModel::new(model.resolve(false))?;
            if model.config.partition != stream.features.partition() {
                bail!("model channels do not match the stream features");
            }
            let (_, tasks) = load_gp_dataset(&cfg.path(test))?;
            let test = stream.eval_set(&tasks)?;
            let outcome = train_np(&model, init_store(&model, train.seed), stream, &test, train)?;
            prepare(c)?;
            save_run(&c.out, &model, train.seed, train.weights, &outcome, None)?;
            manifest(&c.out, "train", train.seed, &cfg.value, json!({}))
        }
    }
}

struct Session {
    cfg: Loaded<Analysis>,
    checkpoint: Checkpoint,
    model: RvaeModel,
}

fn open(a: &WithCheckpoint) -> Result<Session> {
    let mut cfg: Loaded<Analysis> = config::load(a.common.config.as_deref())?;
    cfg.value.seed = a.common.seed.unwrap_or(cfg.value.seed);
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let model = checkpoint.model()?;
    prepare(&a.common)?;
    Ok(Session { cfg, checkpoint, model })
}

fn gp_features(model: &RvaeModel) -> Result<GpFeatures> {
    [GpFeatures::Relative, GpFeatures::NodeOnly, GpFeatures::Full]
        .into_iter()
        .find(|f| f.partition() == model.config.partition)
        .context("checkpoint is not a GP model")
}

/// Held-out graphs in model space with their masks.
fn held_out(ctx: &Session) -> Result<EvalSet> {
    let a = &ctx.cfg.value;
    match a.data.as_ref().context("config has no data section")? {
        DataSpec::Farm { dataset } => {
            let ds = FarmDataset::load(&ctx.cfg.path(dataset))?;
            if ctx.model.config.partition != ds.partition() {
                bail!("checkpoint does not match the farm dataset");
            }
            let scale = match &ctx.checkpoint.scale {
                Some(s) => s.clone(),
                None => ds.standardization()?,
            };
            let graphs = ds.scaled_graphs(ds.train_len()..ds.len(), &scale)?;
            if graphs.is_empty() {
                bail!("farm dataset has no test split");
            }
            Ok(EvalSet::masked(graphs, ds.partition(), a.mask_fraction, a.seed)?.with_scale(scale))
        }
        DataSpec::Gp { dataset, cutoff } => {
            let features = gp_features(&ctx.model)?;
            let (spec, tasks) = load_gp_dataset(&ctx.cfg.path(dataset))?;
            let cutoff = cutoff.unwrap_or(spec.cutoff);
            let (graphs, masks) = tasks
                .iter()
                .map(|(t, m)| Ok((build_gp_graph(t, cutoff, features)?.0, m.clone())))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            Ok(EvalSet::new(graphs, masks, features.partition())?)
        }
    }
}

fn evaluate_cmd(a: &WithCheckpoint, mode: Mode) -> Result<()> {
    let ctx = open(a)?;
    let set = held_out(&ctx)?;
    let eval_mode = match mode {
        Mode::Elbo => EvalMode::Elbo,
        Mode::Nll => EvalMode::TargetNll,
        Mode::Mape => EvalMode::Mape {
            channel: ctx.cfg.value.channel,
        },
    };
    let r = evaluate(&ctx.model, &ctx.checkpoint.params, &set, eval_mode, ctx.cfg.value.mc_samples, ctx.cfg.value.seed)?;
    write_json(
        &a.common.out.join("evaluation.json"),
        &json!({ "metric": eval_mode.name(), "mean": r.mean, "std": r.std, "count": r.count, "excluded": r.excluded }),
    )?;
    manifest(&a.common.out, "evaluate", ctx.cfg.value.seed, &ctx.cfg.value, json!({ "mode": eval_mode.name() }))
}

#[derive(Serialize)]
struct ImputedRow {
    graph: usize,
    node: usize,
    channel: usize,
    truth: f64,
    predicted: f64,
}

fn impute_cmd(a: &WithCheckpoint) -> Result<()> {
    let ctx = open(a)?;
    let set = held_out(&ctx)?;
    let cfg = &ctx.cfg.value;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let count = cfg.limit.unwrap_or(set.len()).min(set.len());
    let mut w = csv::Writer::from_path(a.common.out.join("imputation.csv"))?;
    let channels = ctx.model.config.partition.node.state_dim();
    let mut pairs = vec![(Vec::new(), Vec::new()); channels];
    for k in 0..count {
        let rng = cfg.sample.then_some(&mut rng);
        let r = impute(&ctx.model, &ctx.checkpoint.params, &set.graphs[k], &set.masks[k], set.scale.as_ref(), rng)?;
        for n in &r.nodes {
            for c in 0..channels {
                w.serialize(ImputedRow {
                    graph: k,
                    node: n.node,
                    channel: c,
                    truth: n.truth[c],
                    predicted: n.predicted[c],
                })?;
                pairs[c].0.push(n.truth[c]);
                pairs[c].1.push(n.predicted[c]);
            }
        }
    }
    w.flush()?;
    let summary: Vec<Value> = pairs
        .iter()
        .enumerate()
        .map(|(c, (t, p))| match mape(t, p) {
            Ok((m, excluded)) => json!({ "channel": c, "mape": m, "excluded": excluded }),
            Err(_) => json!({ "channel": c, "mape": null, "excluded": t.len() }),
        })
        .collect();
    write_json(&a.common.out.join("imputation.json"), &json!({ "graphs": count, "channels": summary }))?;
    manifest(&a.common.out, "impute", cfg.seed, cfg, json!({}))
}

fn sensitivity_cmd(a: &WithCheckpoint) -> Result<()> {
    let ctx = open(a)?;
    let set = held_out(&ctx)?;
    let cfg = &ctx.cfg.value;
    let (g, mask) = (
        set.graphs.get(cfg.graph).with_context(|| format!("held-out set has no graph {}", cfg.graph))?,
        &set.masks[cfg.graph],
    );
    let target = match cfg.target {
        Some(t) => t,
        None => mask.0.iter().position(|&m| m).context("graph has no masked node")?,
    };
    let map = sensitivity(&ctx.model, &ctx.checkpoint.params, g, mask, target, cfg.channel)?;
    write_json(&a.common.out.join("sensitivity.json"), &map)?;
    let mut w = csv::Writer::from_path(a.common.out.join("sensitivity_nodes.csv"))?;
    w.write_record(["node", "masked", "score"])?;
    for (i, s) in map.node_scores().iter().enumerate() {
        w.write_record([i.to_string(), mask.is_target(i).to_string(), s.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(a.common.out.join("sensitivity_edges.csv"))?;
    w.write_record(["edge", "sender", "receiver", "score"])?;
    for (k, s) in map.edge_scores().iter().enumerate() {
        w.write_record([k.to_string(), g.senders[k].to_string(), g.receivers[k].to_string(), s.to_string()])?;
    }
    w.flush()?;
    manifest(&a.common.out, "sensitivity", cfg.seed, cfg, json!({ "target": target }))
}

fn wake_polar_cmd(a: &WithCheckpoint) -> Result<()> {
    let ctx = open(a)?;
    let cfg = &ctx.cfg.value;
    let Some(DataSpec::Farm { dataset }) = &cfg.data else {
        bail!("wake-polar needs a farm data section");
    };
    let ds = FarmDataset::load(&ctx.cfg.path(dataset))?;
    let rows = wake_polar(
        &ctx.model,
        &ctx.checkpoint.params,
        &ds,
        ds.train_len()..ds.len(),
        ctx.checkpoint.scale.as_ref(),
        &cfg.polar,
    )?;
    let mut w = csv::Writer::from_path(a.common.out.join("wake_polar.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    manifest(&a.common.out, "wake-polar", cfg.seed, cfg, json!({}))
}

fn probe_grid_cmd(a: &WithCheckpoint) -> Result<()> {
    let ctx = open(a)?;
    let cfg = &ctx.cfg.value;
    let field = probe_grid(&ctx.model, &ctx.checkpoint.params, ctx.checkpoint.scale.as_ref(), &cfg.probe)?;
    field.write_csv(&a.common.out.join("probe_grid.csv"))?;
    manifest(&a.common.out, "probe-grid", cfg.seed, cfg, json!({}))
}
