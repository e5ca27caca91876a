use crate::args::{resolve_seed, CheckArgs, EvalArgs, GenArgs, Preset, ScopeArg, TrainArgs};
use csibert_core::channel::{read_dataset, write_generated_dataset, DatasetConfig, ScenarioId, DATA_FILE, MANIFEST_FILE};
use csibert_core::check::{run_checks, CheckOptions};
use csibert_core::experiments::{emit_report, EvalSettings, Experiment, Suite};
use csibert_core::model::{Encoder, ModelConfig};
use csibert_core::preprocess::{MaskScheme, MaskSpec};
use csibert_core::tensor::OpKind;
use csibert_core::training::{
    features, resume, split_indices, write_loss_csv, LossScope, Optimizer, TrainConfig, TrainState, HOLDOUT_FRACTION,
};
use csibert_core::archive::TensorArchive;
use serde::Serialize;
use std::fmt;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const RUN_MANIFEST_FILE: &str = "run.json";

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad or missing flags: exit 2.
    Usage { subcommand: &'static str, message: String },
    /// Filesystem or artifact format problem: exit 3.
    Io(String),
    /// The check suite found a violation, or a run could not finish: exit 1.
    Failed(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage { .. } => 2,
            Failure::Io(_) => 3,
            Failure::Failed(_) => 1,
        }
    }

    fn usage(subcommand: &'static str, message: impl Into<String>) -> Self {
        Failure::Usage {
            subcommand,
            message: message.into(),
        }
    }

    fn from_core(subcommand: &'static str, e: csibert_core::Error) -> Self {
        use csibert_core::Error as E;
        match e {
            E::Config(_) | E::Domain(_) => Failure::usage(subcommand, e.to_string()),
            e if e.is_io() => Failure::Io(e.to_string()),
            e => Failure::Failed(e.to_string()),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage { message, .. } | Failure::Io(message) | Failure::Failed(message) => f.write_str(message),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

trait Context<T> {
    fn ctx(self, subcommand: &'static str) -> Outcome<T>;
}

impl<T> Context<T> for csibert_core::Result<T> {
    fn ctx(self, subcommand: &'static str) -> Outcome<T> {
        self.map_err(|e| Failure::from_core(subcommand, e))
    }
}

fn required<T>(v: Option<T>, subcommand: &'static str, flag: &str) -> Outcome<T> {
    v.ok_or_else(|| Failure::usage(subcommand, format!("missing required --{flag}")))
}

/// Everything needed to repeat a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: usize,
    pub artifacts: Vec<PathBuf>,
    pub toolkit_version: String,
}

impl RunManifest {
    fn new(subcommand: &str, config: impl Serialize, seed: u64, artifacts: Vec<PathBuf>) -> Self {
        Self {
            command: std::env::args().collect(),
            subcommand: subcommand.to_owned(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            threads: rayon::current_num_threads(),
            artifacts,
            toolkit_version: env!("CARGO_PKG_VERSION").to_owned(),
        }
    }

    fn write(&self, dir: &Path) -> Outcome<PathBuf> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| Failure::Failed(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

pub fn gen(args: GenArgs, file_seed: Option<u64>) -> Outcome {
    const CMD: &str = "gen";
    let out = required(args.out.clone(), CMD, "out")?;
    let seed = resolve_seed(args.seed, file_seed).map_err(|m| Failure::usage(CMD, m))?;
    let mut cfg = match args.preset.unwrap_or(Preset::Desk) {
        Preset::Desk => DatasetConfig::desk(),
        Preset::Paper => DatasetConfig::paper(),
    };
    cfg.seed = seed;
    if let Some(v) = args.cells {
        cfg.cells = v;
    }
    if let Some(v) = args.ues {
        cfg.ues_per_cell = v;
    }
    if let Some(v) = args.snr_db {
        cfg.snr_db = v;
    }
    if let Some(v) = args.subcarriers {
        cfg.n_subcarriers = v;
    }
    if let Some(v) = args.tx {
        cfg.n_tx = v;
    }
    if let Some(v) = args.rx {
        cfg.n_rx = v;
    }
    cfg.validate().ctx(CMD)?;

    let manifest = write_generated_dataset(&out, &cfg).ctx(CMD)?;
    let per: Vec<String> = ScenarioId::ALL
        .iter()
        .map(|&sc| {
            let n = manifest.records.iter().filter(|r| r.scenario == sc).count();
            format!("{sc} {n}")
        })
        .collect();
    let run = RunManifest::new(CMD, &cfg, seed, vec![out.join(DATA_FILE), out.join(MANIFEST_FILE)]);
    run.write(&out)?;
    println!(
        "wrote {} matrices ({}) to {}",
        manifest.records.len(),
        per.join(", "),
        out.display()
    );
    Ok(())
}

pub fn train(args: TrainArgs, file_seed: Option<u64>) -> Outcome {
    const CMD: &str = "train";
    let data = required(args.data.clone(), CMD, "data")?;
    let out = required(args.out.clone(), CMD, "out")?;
    let seed = resolve_seed(args.seed, file_seed).map_err(|m| Failure::usage(CMD, m))?;
    let defaults = TrainConfig::desk(seed);
    let scheme: MaskScheme = match &args.mask {
        Some(m) => m.parse().ctx(CMD)?,
        None => defaults.mask.scheme,
    };
    let optimizer: Optimizer = match &args.optimizer {
        Some(o) => o.parse().ctx(CMD)?,
        None => defaults.optimizer,
    };
    let cfg = TrainConfig {
        learning_rate: args.lr.unwrap_or(defaults.learning_rate),
        batch_size: args.batch.unwrap_or(defaults.batch_size),
        epochs: args.epochs.unwrap_or(defaults.epochs),
        optimizer,
        mask: MaskSpec::new(scheme, seed),
        fixed_mask: args.fixed_mask.unwrap_or(defaults.fixed_mask),
        seed,
        loss_scope: match args.loss_scope {
            Some(ScopeArg::Masked) => LossScope::MaskedOnly,
            Some(ScopeArg::All) | None => LossScope::AllPositions,
        },
        norm_mode: defaults.norm_mode,
    };
    cfg.validate().ctx(CMD)?;

    let dataset = read_dataset(&data).ctx(CMD)?;
    let split = split_indices(&dataset, HOLDOUT_FRACTION, seed);
    let samples: Vec<_> = features(&dataset, &split.train, cfg.norm_mode)
        .ctx(CMD)?
        .into_iter()
        .map(|f| f.data)
        .collect();
    let dims = dataset.config.dims();
    let model_cfg = match args.model_preset.unwrap_or(Preset::Desk) {
        Preset::Desk => ModelConfig::desk(dims.feature_dim(), dims.n_subcarriers),
        Preset::Paper => ModelConfig::paper(dims.feature_dim(), dims.n_subcarriers),
    };

    let (mut model, state) = match &args.resume {
        Some(dir) => {
            let (m, _) = Encoder::load(&dir.join(CHECKPOINT_FILE)).ctx(CMD)?;
            let s = TrainState::from_archive(&TensorArchive::read(&dir.join(OPTIMIZER_FILE)).ctx(CMD)?).ctx(CMD)?;
            (m, s)
        }
        None => (Encoder::new(model_cfg, seed).ctx(CMD)?, TrainState::fresh()),
    };
    let outcome = resume(&mut model, &samples, &cfg, state).ctx(CMD)?;

    std::fs::create_dir_all(&out).map_err(|e| Failure::Io(format!("cannot create {}: {e}", out.display())))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let extra = serde_json::json!({
        "training": cfg,
        "split_seed": seed,
        "holdout_fraction": HOLDOUT_FRACTION,
        "dataset_seed": dataset.config.seed,
        "epochs_done": outcome.state.epochs_done,
    });
    model.save(&ckpt, extra).ctx(CMD)?;
    let opt = out.join(OPTIMIZER_FILE);
    outcome.state.to_archive().write(&opt).ctx(CMD)?;
    let loss = out.join(LOSS_FILE);
    write_loss_csv(&loss, &outcome.history).ctx(CMD)?;

    let resolved = serde_json::json!({
        "data": data,
        "model": model.config,
        "training": cfg,
        "resume": args.resume,
    });
    RunManifest::new(CMD, resolved, seed, vec![ckpt.clone(), opt, loss]).write(&out)?;
    match (outcome.history.first(), outcome.history.last()) {
        (Some(a), Some(b)) => println!(
            "trained {} steps on {} samples: loss {:.6} -> {:.6}; checkpoint {}",
            outcome.history.len(),
            samples.len(),
            a.loss,
            b.loss,
            ckpt.display()
        ),
        _ => println!("nothing to train; checkpoint {}", ckpt.display()),
    }
    Ok(())
}

pub fn parse_experiments(name: &str) -> csibert_core::Result<Vec<Experiment>> {
    if name == "all" {
        Ok(Experiment::ALL.to_vec())
    } else {
        Ok(vec![name.parse()?])
    }
}

pub fn eval(args: EvalArgs, file_seed: Option<u64>) -> Outcome {
    const CMD: &str = "eval";
    let data = required(args.data.clone(), CMD, "data")?;
    let ckpt = required(args.ckpt.clone(), CMD, "ckpt")?;
    let out = required(args.out.clone(), CMD, "out")?;
    let seed = resolve_seed(args.seed, file_seed).map_err(|m| Failure::usage(CMD, m))?;
    let experiments = parse_experiments(args.experiment.as_deref().unwrap_or("all")).ctx(CMD)?;

    let dataset = read_dataset(&data).ctx(CMD)?;
    let (model, extra) = Encoder::load(&ckpt).ctx(CMD)?;
    let bad_ckpt = |what: &str| Failure::Io(format!("{} lacks {what}; was it written by `train`?", ckpt.display()));
    let training: TrainConfig =
        serde_json::from_value(extra["training"].clone()).map_err(|_| bad_ckpt("a training config"))?;
    let mut settings = EvalSettings::new(seed);
    settings.split_seed = extra["split_seed"].as_u64().ok_or_else(|| bad_ckpt("a split seed"))?;
    settings.holdout_fraction = extra["holdout_fraction"].as_f64().unwrap_or(HOLDOUT_FRACTION);

    let suite = Suite::new(&dataset, &model, training, settings.clone()).ctx(CMD)?;
    std::fs::create_dir_all(&out).map_err(|e| Failure::Io(format!("cannot create {}: {e}", out.display())))?;
    let mut artifacts = Vec::new();
    for exp in &experiments {
        let report = suite.run(*exp).ctx(CMD)?;
        let files = emit_report(&report, &out).ctx(CMD)?;
        println!("{exp}: {}", files[0].display());
        artifacts.extend(files);
    }
    let resolved = serde_json::json!({
        "data": data,
        "ckpt": ckpt,
        "experiments": experiments.iter().map(|e| e.name()).collect::<Vec<_>>(),
        "settings": settings,
    });
    RunManifest::new(CMD, resolved, seed, artifacts).write(&out)?;
    Ok(())
}

pub fn check(args: CheckArgs, file_seed: Option<u64>) -> Outcome {
    const CMD: &str = "check";
    let seed = resolve_seed(args.seed, file_seed).map_err(|m| Failure::usage(CMD, m))?;
    let fault = match &args.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let valid: Vec<&str> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
            Failure::usage(CMD, format!("unknown op {name:?}; valid: {}", valid.join("|")))
        })?),
        None => None,
    };
    let opts = CheckOptions {
        seed,
        trials_per_op: args.trials.unwrap_or(CheckOptions::default().trials_per_op),
        fault,
        ..Default::default()
    };
    let summary = run_checks(&opts);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Failure::Failed(e.to_string()))?;
    if args.json.unwrap_or(false) {
        println!("{json}");
    } else {
        print!("{}", summary.table());
        println!(
            "{} checks, {} failed, {} gradient trials, {:.1}s",
            summary.results.len(),
            summary.failures().count(),
            summary.gradient_trials,
            summary.elapsed_secs
        );
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join("check.json");
        std::fs::write(&path, &json).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))?;
        let resolved = serde_json::json!({ "trials_per_op": opts.trials_per_op, "fault": args.inject_fault });
        RunManifest::new(CMD, resolved, seed, vec![path]).write(dir)?;
    }
    if summary.passed {
        Ok(())
    } else {
        let names: Vec<&str> = summary.failures().map(|r| r.name.as_str()).collect();
        Err(Failure::Failed(format!("failing checks: {}", names.join(", "))))
    }
}
