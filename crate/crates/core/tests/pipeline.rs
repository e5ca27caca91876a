use csibert_core::channel::{generate_dataset, read_dataset, write_dataset, Dataset, DatasetConfig, ScenarioId};
use csibert_core::experiments::{
    check_anchors, emit_report, load_report, partition_gap, EvalSettings, Experiment, ExperimentReport, Suite,
};
use csibert_core::model::{Encoder, ModelConfig};
use csibert_core::preprocess::pad_and_attention_mask;
use csibert_core::training::{features, split_indices, train, Reconstructor, TrainConfig};
use csibert_core::Tensor;

fn dataset() -> Dataset {
    generate_dataset(&DatasetConfig {
        cells: 1,
        ues_per_cell: 6,
        n_subcarriers: 12,
        n_tx: 2,
        n_rx: 1,
        seed: 9,
        ..DatasetConfig::desk()
    })
    .unwrap()
}

fn model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 12,
        max_len: 14,
        feature_dim: 4,
        plain_head: false,
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 4,
        learning_rate: 1e-2,
        ..TrainConfig::desk(3)
    }
}

fn settings() -> EvalSettings {
    EvalSettings {
        group_size: 4,
        n_bins: 8,
        mlp_hidden: 8,
        ..EvalSettings::new(3)
    }
}

fn trained_on(ds: &Dataset, indices: &[usize]) -> Encoder {
    let cfg = train_config();
    let mut model = Encoder::new(model_config(), 3).unwrap();
    let samples: Vec<Tensor> = features(ds, indices, cfg.norm_mode)
        .unwrap()
        .into_iter()
        .map(|f| f.data)
        .collect();
    train(&mut model, &samples, &cfg).unwrap();
    model
}

fn value(report: &ExperimentReport, metric: &str, labels: &[(&str, &str)]) -> f64 {
    report
        .rows_with(metric)
        .find(|r| labels.iter().all(|(k, v)| r.labels.get(*k).map(String::as_str) == Some(*v)))
        .unwrap_or_else(|| panic!("no {metric} row with {labels:?} in {}", report.experiment))
        .value
}

#[test]
fn dataset_survives_disk_round_trip() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.tensors.iter().zip(&back.tensors) {
        assert_eq!(a.scenario, b.scenario);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).norm() <= 1e-6 * x.norm().max(1e-30), "{x} vs {y}");
        }
    }
}

#[test]
fn experiment_identities_hold_on_a_small_run() {
    let ds = dataset();
    let split = split_indices(&ds, settings().holdout_fraction, settings().split_seed);
    let model = trained_on(&ds, &split.train);
    let suite = Suite::new(&ds, &model, train_config(), settings()).unwrap();
    let reports = suite.run_all().unwrap();
    assert_eq!(reports.len(), Experiment::ALL.len());
    let by_name = |e: Experiment| reports.iter().find(|r| r.experiment == e.name()).unwrap();

    for r in &reports {
        r.validate().unwrap();
        assert!(check_anchors(r, 1e-9).unwrap() > 0, "{}", r.experiment);
    }

    let (mut sse, mut n) = (0.0, 0);
    for f in features(&ds, &split.holdout, train_config().norm_mode).unwrap() {
        let (rows, cols) = f.data.dims2().unwrap();
        let (padded, attn) = pad_and_attention_mask(&f.data, model.max_len()).unwrap();
        let y = model.reconstruct(&padded, &attn).unwrap();
        for i in 0..rows {
            for j in 0..cols {
                sse += (y.at(i, j) - f.data.at(i, j)).powi(2);
            }
        }
        n += rows * cols;
    }
    let unmasked = sse / n as f64;
    let sweep = by_name(Experiment::MaskSweep);
    let at_zero = value(sweep, "mse", &[("predictor", "model"), ("gamma", "0")]);
    assert!((at_zero - unmasked).abs() <= 1e-12 * unmasked, "{at_zero} vs {unmasked}");

    let groups = by_name(Experiment::Subcarrier);
    assert!(partition_gap(groups).unwrap() < 1e-12);

    // The cross-scenario diagonal is a per-scenario evaluation of a model
    // trained only on that scenario.
    let cross = by_name(Experiment::CrossScenario);
    let s = ScenarioId::HighSpeed;
    let only = trained_on(&ds, &suite.split.train_for(&ds, s));
    let own = Suite::new(&ds, &only, train_config(), settings()).unwrap();
    let own_scen = own.run(Experiment::Scenario).unwrap();
    let name = s.name();
    assert_eq!(
        value(cross, "mse", &[("predictor", "model"), ("train", name), ("test", name)]),
        value(&own_scen, "mse", &[("predictor", "model"), ("scenario", name)]),
    );

    let dir = tempfile::tempdir().unwrap();
    for r in &reports {
        let [json, _, _] = emit_report(r, dir.path()).unwrap();
        assert_eq!(&load_report(&json).unwrap(), r);
    }
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let ds = dataset();
    let split = split_indices(&ds, settings().holdout_fraction, settings().split_seed);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let model = trained_on(&ds, &split.train);
            let suite = Suite::new(&ds, &model, train_config(), settings()).unwrap();
            (model.params.clone(), suite.run(Experiment::ErrorDist).unwrap().to_json().unwrap())
        })
    };
    assert_eq!(run(1), run(3));
}
