use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvae::datasets::farm::{FarmDataset, FarmDatasetSpec, LayoutSpec};
use rvae::datasets::gp::{GpFeatures, GpTask, Kernel};
use rvae::datasets::TurbineSpec;
use rvae::graph::{AttributedGraph, ChannelSplit, GraphPartition, NodeMask};
use rvae::presets::{farm_config, GpModel};
use rvae::rvae::{ElboWeights, ObservationNoise, Prepared, RvaeConfig, RvaeModel};
use rvae::training::*;
use rvae_autodiff::{Adam, ParameterStore, Tape, Tensor};

fn small_farm(seed: u64) -> (Vec<AttributedGraph>, GraphPartition) {
    let layout = LayoutSpec {
        seed,
        turbines: 6,
        min_spacing: 3.0,
        extent: 12.0,
    }
    .build(TurbineSpec::default())
    .unwrap();
    let spec = FarmDatasetSpec {
        snapshots: 40,
        ..FarmDatasetSpec::default()
    };
    let ds = FarmDataset::generate(seed, layout, spec).unwrap();
    let part = ds.partition();
    let scale = ds.standardization().unwrap();
    let graphs = ds.graphs().unwrap().iter().map(|g| scale.apply(g, &part).unwrap()).collect();
    (graphs, part)
}

fn farm_test_set(graphs: &[AttributedGraph], part: &GraphPartition, seed: u64) -> EvalSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = graphs.iter().map(|g| random_mask(&mut rng, g.num_nodes, 0.2)).collect();
    EvalSet::new(graphs.to_vec(), masks, part.clone()).unwrap()
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        max_steps: 20,
        batch_size: 4,
        patience: 10,
        eval_interval: 5,
        eval_mc_samples: 2,
        seed,
        ..TrainConfig::default()
    }
}

fn stream(cutoff: f64) -> GpStream {
    GpStream {
        kernel: Kernel::default(),
        x_range: 0.0..1.0,
        cutoff,
        features: GpFeatures::Relative,
    }
}

fn gp_tasks(seed: u64, count: usize, n: usize) -> Vec<(GpTask, NodeMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let task = rvae::datasets::sample_gp(&mut rng, 2 * n, Kernel::default(), 0.0..1.0).unwrap();
            (task, NodeMask((0..2 * n).map(|i| i >= n).collect()))
        })
        .collect()
}

fn same_params(a: &ParameterStore, b: &ParameterStore) -> bool {
    a.iter().all(|(n, t)| b.get(n).is_some_and(|u| u.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits())))
}

#[test]
fn zero_learning_rate_keeps_parameters_bit_identical() {
    let (graphs, part) = small_farm(1);
    let model = RvaeModel::new(farm_config(1, 8, 4, false)).unwrap();
    let store = init_store(&model, 3);
    let test = farm_test_set(&graphs[32..], &part, 9);
    let cfg = TrainConfig {
        lr: 0.0,
        patience: 20,
        ..quick_cfg(4)
    };
    let out = train_farm(&model, store.clone(), &graphs[..32], &test, &cfg).unwrap();
    assert_eq!(out.record.steps_run, 20);
    assert!(same_params(&out.params, &store));

    let gp = GpModel::EdgeConditioned { steps: 1 };
    let model = RvaeModel::new(gp.config(8, 4)).unwrap();
    let store = init_store(&model, 3);
    let s = stream(0.2);
    let test = s.eval_set(&gp_tasks(5, 4, 10)).unwrap();
    let cfg = TrainConfig {
        context_range: (3, 10),
        ..cfg
    };
    let out = train_np(&model, store.clone(), &s, &test, &cfg).unwrap();
    assert!(same_params(&out.params, &store));
}

#[test]
fn one_step_lowers_the_training_loss_on_most_seeds() {
    let (graphs, part) = small_farm(2);
    let model = RvaeModel::new(farm_config(1, 16, 4, false)).unwrap();
    let adam = Adam::with_lr(1e-3);
    let mut improved = 0;
    for seed in 0..5u64 {
        let mut store = init_store(&model, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(&mut rng, graphs[0].num_nodes, 0.2);
        let prep = Prepared::new(&graphs[..1], &[mask], &part).unwrap();
        let loss = |store: &ParameterStore| {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let t = model.elbo(&mut tape, store, &prep, ElboWeights::default(), 1, &mut rng).unwrap();
            let grads = tape.backward(t.loss).unwrap().for_store(store);
            (tape.value(t.loss).item(), grads)
        };
        let (before, grads) = loss(&store);
        adam.step(&mut store, &grads).unwrap();
        let (after, _) = loss(&store);
        improved += usize::from(after < before);
    }
    assert!(improved >= 3, "{improved} of 5 seeds improved");
}

#[test]
fn identical_seeds_replay_identically() {
    let (graphs, part) = small_farm(3);
    let model = RvaeModel::new(farm_config(1, 8, 4, false)).unwrap();
    let test = farm_test_set(&graphs[32..], &part, 9);
    let cfg = TrainConfig {
        augment_rotation: true,
        ..quick_cfg(11)
    };
    let run = || train_farm(&model, init_store(&model, 5), &graphs[..32], &test, &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.record.to_jsonl().unwrap(), b.record.to_jsonl().unwrap());
    assert_eq!(a.params.to_json(), b.params.to_json());

    let gp = GpModel::EdgeConditioned { steps: 1 };
    let model = RvaeModel::new(gp.config(8, 4)).unwrap();
    let s = stream(0.2);
    let test = s.eval_set(&gp_tasks(6, 4, 10)).unwrap();
    let cfg = TrainConfig {
        context_range: (3, 10),
        ..quick_cfg(12)
    };
    let run = || train_np(&model, init_store(&model, 5), &s, &test, &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.record, b.record);
    assert_eq!(a.params.to_json(), b.params.to_json());
}

#[test]
fn empty_target_set_contributes_nothing() {
    let gp = GpModel::EdgeConditioned { steps: 1 };
    let model = RvaeModel::new(gp.config(8, 4)).unwrap();
    let mut store = init_store(&model, 7);
    let before = store.clone();
    let s = stream(0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (g, _) = s.draw(&mut rng, (5, 10)).unwrap();
    let prep = Prepared::new(&[g.clone()], &[NodeMask::none(g.num_nodes)], &gp.features().partition()).unwrap();
    let mut tape = Tape::new();
    let t = model.np_elbo(&mut tape, &store, &prep, &mut rng).unwrap();
    assert_eq!(tape.value(t.loss).item(), 0.0);
    let grads = tape.backward(t.loss).unwrap().for_store(&store);
    assert!(grads.values().all(|g| g.data().iter().all(|&v| v == 0.0)));
    Adam::with_lr(1e-3).step(&mut store, &grads).unwrap();
    assert!(same_params(&store, &before));
}

#[test]
fn short_np_run_improves_held_out_likelihood() {
    let gp = GpModel::EdgeConditioned { steps: 1 };
    let model = RvaeModel::new(gp.config(16, 8)).unwrap();
    let s = stream(0.1);
    let test = s.eval_set(&gp_tasks(99, 32, 15)).unwrap();
    let mut improved = 0;
    for seed in 0..5u64 {
        let store = init_store(&model, seed);
        let cfg = TrainConfig {
            lr: 1e-3,
            max_steps: 500,
            eval_interval: 500,
            patience: 500,
            context_range: (3, 20),
            eval_mc_samples: 4,
            seed,
            ..TrainConfig::neural_process()
        };
        let init = evaluate(&model, &store, &test, EvalMode::TargetNll, 4, cfg.eval_seed()).unwrap();
        let out = train_np(&model, store, &s, &test, &cfg).unwrap();
        let trained = evaluate(&model, &out.params, &test, EvalMode::TargetNll, 4, cfg.eval_seed()).unwrap();
        improved += usize::from(trained.mean > init.mean);
    }
    assert!(improved >= 4, "{improved} of 5 seeds improved");
}

#[test]
fn early_stopping_returns_the_best_evaluation() {
    let (graphs, part) = small_farm(4);
    let model = RvaeModel::new(farm_config(1, 8, 4, false)).unwrap();
    let test = farm_test_set(&graphs[32..], &part, 9);
    let cfg = TrainConfig {
        lr: 3e-2,
        max_steps: 200,
        ..quick_cfg(13)
    };
    let out = train_farm(&model, init_store(&model, 6), &graphs[..32], &test, &cfg).unwrap();
    let r = &out.record;
    let best = r.evals.iter().map(|e| e.mean).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.best_value, Some(best));
    let best_step = r.best_step.unwrap();
    assert_eq!(r.evals.iter().find(|e| e.mean == best).unwrap().step, best_step);
    if r.stopped_early {
        assert_eq!(r.evals.last().unwrap().step - best_step, cfg.patience);
    }
    let again = evaluate(&model, &out.params, &test, EvalMode::Elbo, cfg.eval_mc_samples, cfg.eval_seed()).unwrap();
    assert_eq!(again.mean, best);
}

#[test]
fn divergence_ends_the_run_with_the_last_good_parameters() {
    let (graphs, part) = small_farm(5);
    let model = RvaeModel::new(farm_config(1, 8, 4, false)).unwrap();
    let test = farm_test_set(&graphs[32..], &part, 9);
    let mut store = init_store(&model, 6);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let t = store.get(&n).unwrap();
        let huge = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * 1e150 + 1e150).collect()).unwrap();
        store.insert(n, huge);
    }
    let out = train_farm(&model, store.clone(), &graphs[..32], &test, &quick_cfg(1)).unwrap();
    assert_eq!(out.record.diverged_at, Some(0));
    assert_eq!(out.record.steps_run, 0);
    assert!(same_params(&out.params, &store));
}

/// A model whose every parameter is zero predicts μ = 0 in model space.
fn zero_model(config: RvaeConfig) -> (RvaeModel, ParameterStore) {
    let model = RvaeModel::new(config).unwrap();
    let mut store = init_store(&model, 0);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.insert(n, Tensor::zeros(&shape));
    }
    (model, store)
}

#[test]
fn mape_formula_examples() {
    let v = [2.0, -4.0, 0.5];
    assert_eq!(mape(&v, &v).unwrap(), (0.0, 0));
    let doubled: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
    assert_eq!(mape(&v, &doubled).unwrap(), (1.0, 0));
    assert_eq!(mape(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), (0.5, 1));
    assert!(mape(&[0.0], &[1.0]).is_err());
    assert!(mape(&[1.0], &[]).is_err());
}

#[test]
fn mape_through_the_evaluation_harness() {
    // Decoder mean 0 in model space maps back to the stored channel mean,
    // so truths equal to that mean are predicted exactly.
    let (graphs, part) = small_farm(6);
    let (model, store) = zero_model(farm_config(1, 8, 4, false));
    let mut scale = rvae::datasets::Standardization::fit(&graphs, &part).unwrap();
    scale.node_mean[0] = 8.0;
    scale.node_std[0] = 2.0;
    let with_truth = |v: f64| -> Vec<AttributedGraph> {
        graphs[..8]
            .iter()
            .map(|g| {
                let mut g = g.clone();
                for i in 0..g.num_nodes {
                    g.nodes[i * g.node_dim] = v;
                }
                g
            })
            .collect()
    };
    let masks: Vec<NodeMask> = graphs[..8].iter().map(|g| NodeMask((0..g.num_nodes).map(|i| i % 2 == 0).collect())).collect();
    let exact = EvalSet::new(with_truth(0.0), masks.clone(), part.clone()).unwrap().with_scale(scale.clone());
    let r = evaluate(&model, &store, &exact, EvalMode::Mape { channel: 0 }, 1, 0).unwrap();
    assert_eq!((r.mean, r.excluded), (0.0, 0));
    // truth 4 in physical units is -2 in model space; the prediction 8 is twice it
    let half = EvalSet::new(with_truth(-2.0), masks, part).unwrap().with_scale(scale);
    let r = evaluate(&model, &store, &half, EvalMode::Mape { channel: 0 }, 1, 0).unwrap();
    assert!((r.mean - 1.0).abs() < 1e-12);
    assert!(evaluate(&model, &store, &half, EvalMode::Mape { channel: 7 }, 1, 0).is_err());
}

#[test]
fn unit_gaussian_predictor_scores_the_analytic_log_likelihood() {
    // one state channel, no conditioning, no edges: μ = 0 and σ = 1 exactly
    let part = GraphPartition {
        node: ChannelSplit::leading_state(1, 0),
        edge: ChannelSplit::leading_state(0, 0),
        global: ChannelSplit::leading_state(0, 0),
        mask_channel: None,
    };
    let mut config = GpModel::EdgeConditioned { steps: 1 }.config(4, 2);
    config.partition = part.clone();
    config.noise = ObservationNoise::Fixed { sigma: 1.0 };
    let (model, store) = zero_model(config);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (per_graph, n) = (100, 1000);
    let mut graphs = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * per_graph);
    for _ in 0..n {
        let ys: Vec<Vec<f64>> = (0..per_graph).map(|_| vec![rng.sample::<f64, _>(rand_distr::StandardNormal)]).collect();
        values.extend(ys.iter().map(|y| y[0]));
        graphs.push(AttributedGraph::from_rows(1, &ys, 0, &[], vec![]).unwrap());
    }
    let masks = vec![NodeMask(vec![true; per_graph]); n];
    let set = EvalSet::new(graphs, masks, part).unwrap();
    let r = evaluate(&model, &store, &set, EvalMode::TargetNll, 1, 0).unwrap();
    let lls: Vec<f64> = values.iter().map(|y| rvae::rvae::log_normal(*y, 0.0, 1.0)).collect();
    let m = lls.iter().sum::<f64>() / lls.len() as f64;
    let se = (lls.iter().map(|l| (l - m).powi(2)).sum::<f64>() / (lls.len() - 1) as f64).sqrt() / (lls.len() as f64).sqrt();
    let analytic = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5;
    assert!((r.mean - m).abs() < 1e-9, "harness {} vs direct {m}", r.mean);
    assert!((r.mean - analytic).abs() < 3.0 * se, "{} vs {analytic} (se {se})", r.mean);
}

#[test]
fn run_records_serialize_one_line_per_evaluation() {
    let (graphs, part) = small_farm(7);
    let model = RvaeModel::new(farm_config(1, 8, 4, false)).unwrap();
    let test = farm_test_set(&graphs[32..], &part, 9);
    let out = train_farm(&model, init_store(&model, 1), &graphs[..32], &test, &quick_cfg(2)).unwrap();
    let text = out.record.to_jsonl().unwrap();
    assert_eq!(text.lines().count(), out.record.evals.len());
    let first: EvalPoint = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first, out.record.evals[0]);
    assert_eq!(first.metric, "elbo");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("record.jsonl");
    out.record.append_jsonl(&path).unwrap();
    out.record.append_jsonl(&path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), text.repeat(2));

    let rows = vec![SummaryRow {
        model: "crvae".into(),
        size: "8/4/1".into(),
        setting: "x in [0,1]".into(),
        metric: "target_ll".into(),
        mean: 0.5,
        std: 0.25,
    }];
    let csv = dir.path().join("summary.csv");
    write_summary_csv(&csv, &rows).unwrap();
    assert_eq!(
        std::fs::read_to_string(&csv).unwrap(),
        "model,size,setting,metric,mean,std\ncrvae,8/4/1,\"x in [0,1]\",target_ll,0.5,0.25\n"
    );
}

#[test]
fn masks_keep_context_and_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in 2..40 {
        let m = random_mask(&mut rng, n, 0.2);
        assert!(m.num_targets() >= 1 && m.num_targets() < n);
    }
}
