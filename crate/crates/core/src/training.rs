//! Masked-reconstruction training: losses, optimizers, the split and the
//! minibatch loop shared by the encoder and the MLP baseline.

use crate::channel::{Dataset, ScenarioId};
use crate::error::{Error, Result};
use crate::model::Encoder;
use crate::preprocess::{
    apply_mask, make_mask, pad_and_attention_mask, AttentionMask, FeatureMatrix, MaskMatrix,
    MaskScheme, MaskSpec, NormMode,
};
use crate::seed::derive_seed;
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam { .. } => "adam",
        }
    }
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::adam()),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (sgd|adam)"))),
        }
    }
}

/// Which elements contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    #[default]
    AllPositions,
    MaskedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub mask: MaskSpec,
    /// Reuse one mask per sample across epochs instead of drawing a fresh one.
    #[serde(default)]
    pub fixed_mask: bool,
    pub seed: u64,
    #[serde(default)]
    pub loss_scope: LossScope,
    #[serde(default)]
    pub norm_mode: NormMode,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 4,
            epochs: 20,
            optimizer: Optimizer::adam(),
            mask: MaskSpec::new(MaskScheme::EveryKth { k: 10 }, seed),
            fixed_mask: false,
            seed,
            loss_scope: LossScope::AllPositions,
            norm_mode: NormMode::Global,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be at least 1".into()));
        }
        self.mask.scheme.validate()
    }

    /// Mask realized for training sample `i` on its visit in `epoch`.
    pub fn mask_for(&self, i: usize, epoch: usize, rows: usize, cols: usize) -> Result<MaskMatrix> {
        let seed = if self.fixed_mask {
            derive_seed(self.mask.seed, &[i as u64])
        } else {
            derive_seed(self.mask.seed, &[i as u64, epoch as u64])
        };
        make_mask(&MaskSpec::new(self.mask.scheme, seed), rows, cols)
    }
}

/// Anything that maps a padded masked input to a padded reconstruction.
pub trait Reconstructor: Sync {
    fn max_len(&self) -> usize;

    fn reconstruct(&self, input: &Tensor, attn: &AttentionMask) -> Result<Tensor>;
}

/// A reconstructor whose parameters can be fitted by gradient descent.
pub trait Trainable: Reconstructor {
    fn parameters(&self) -> Vec<&Tensor>;

    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Records the forward pass with `params` bound in [`Trainable::parameters`] order.
    fn record(&self, tape: &mut Tape, params: &[Var], input: Var, attn: &AttentionMask) -> Result<Var>;

    /// Per-example losses and the gradient of their sum.
    ///
    /// The default runs examples in parallel and reduces in slice order.
    fn batch_gradient(&self, examples: &[Example]) -> Result<(Vec<f64>, Vec<Tensor>)>
    where
        Self: Sized,
    {
        let results: Vec<(f64, Vec<Tensor>)> = examples
            .par_iter()
            .map(|ex| sample_gradient(self, ex))
            .collect::<Result<_>>()?;
        let mut iter = results.into_iter();
        let (first_loss, mut grads) = iter
            .next()
            .ok_or_else(|| Error::Degenerate("empty batch".into()))?;
        let mut losses = vec![first_loss];
        for (l, g) in iter {
            losses.push(l);
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.add_assign(gi)?;
            }
        }
        Ok((losses, grads))
    }
}

impl Reconstructor for Encoder {
    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn reconstruct(&self, input: &Tensor, attn: &AttentionMask) -> Result<Tensor> {
        self.forward(input, attn)
    }
}

impl Trainable for Encoder {
    fn parameters(&self) -> Vec<&Tensor> {
        self.params.named().into_iter().map(|(_, t)| t).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.values_mut()
    }

    fn record(&self, tape: &mut Tape, params: &[Var], input: Var, attn: &AttentionMask) -> Result<Var> {
        let expected = self.params.named().len();
        if params.len() != expected {
            return Err(Error::shape(
                "encoder.record",
                format!("{} vars for {expected} parameters", params.len()),
            ));
        }
        let mut it = params.iter().copied();
        let w = self.params.map(|_, _| it.next().expect("length checked"));
        crate::model::forward_on_tape(tape, &w, input, attn)
    }
}

/// One padded training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub target: Tensor,
    pub attn: AttentionMask,
    /// 1 where the residual counts toward the loss.
    pub scope: Tensor,
}

impl Example {
    pub fn new(x: &Tensor, mask: &MaskMatrix, max_len: usize, scope: LossScope) -> Result<Self> {
        let masked = apply_mask(x, mask)?;
        let (input, attn) = pad_and_attention_mask(&masked, max_len)?;
        let (target, _) = pad_and_attention_mask(x, max_len)?;
        let scope = match scope {
            LossScope::AllPositions => MaskMatrix::ones(mask.shape().0, mask.shape().1).to_tensor(),
            LossScope::MaskedOnly => mask.inverted().to_tensor(),
        };
        let (scope, _) = pad_and_attention_mask(&scope, max_len)?;
        Ok(Self {
            input,
            target,
            attn,
            scope,
        })
    }

    pub fn in_scope(&self) -> usize {
        self.scope.data().iter().filter(|&&v| v != 0.0).count()
    }
}

/// Sum of squared residuals over in-scope elements and the in-scope count.
pub fn squared_error(x: &Tensor, x_hat: &Tensor, scope: Option<&Tensor>) -> Result<(f64, usize)> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", x.shape(), x_hat.shape()),
        ));
    }
    match scope {
        None => Ok((x.sub(x_hat)?.sum_squares(), x.len())),
        Some(s) => {
            if s.shape() != x.shape() {
                return Err(Error::shape("mse_loss", format!("scope {:?}", s.shape())));
            }
            let mut sse = 0.0;
            let mut n = 0;
            for ((a, b), &m) in x.data().iter().zip(x_hat.data()).zip(s.data()) {
                if m != 0.0 {
                    sse += (a - b) * (a - b);
                    n += 1;
                }
            }
            Ok((sse, n))
        }
    }
}

/// Per-element mean squared residual.
pub fn mse_loss(x: &Tensor, x_hat: &Tensor, scope: Option<&Tensor>) -> Result<f64> {
    let (sse, n) = squared_error(x, x_hat, scope)?;
    Ok(if n == 0 { 0.0 } else { sse / n as f64 })
}

/// Training objective: mean over samples of each sample's sum of squared residuals.
pub fn batch_objective(pairs: &[(&Tensor, &Tensor)], scopes: Option<&[&Tensor]>) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let mut total = 0.0;
    for (i, (x, x_hat)) in pairs.iter().enumerate() {
        total += squared_error(x, x_hat, scopes.map(|s| s[i]))?.0;
    }
    Ok(total / pairs.len() as f64)
}

/// Records the scoped squared-error sum of `model` on `ex`.
pub fn record_loss<M: Trainable + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: &[Var],
    ex: &Example,
) -> Result<Var> {
    let input = tape.leaf(ex.input.clone());
    let out = model.record(tape, params, input, &ex.attn)?;
    let target = tape.leaf(ex.target.clone());
    let scope = tape.leaf(ex.scope.clone());
    let diff = tape.sub(out, target)?;
    let diff = tape.mul(diff, scope)?;
    let sq = tape.square(diff);
    Ok(tape.sum_all(sq))
}

/// Loss and parameter gradients for one example.
pub fn sample_gradient<M: Trainable + ?Sized>(model: &M, ex: &Example) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.parameters();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf((*p).clone())).collect();
    let loss = record_loss(model, &mut tape, &vars, ex)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(&params)
        .map(|(&v, p)| grads.take_or_zeros(v, p))
        .collect();
    Ok((value, g))
}

/// `theta <- theta - lr * g`.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (a, b) in p.data_mut().iter_mut().zip(g.data()) {
            *a -= lr * b;
        }
    }
    Ok(())
}

fn check_grads(params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "optimizer",
            format!("{} parameters, {} gradients", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "optimizer",
                format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    Ok(())
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    (beta1, beta2, eps): (f64, f64, f64),
) -> Result<()> {
    check_grads(params, grads)?;
    if state.m.len() != params.len() {
        return Err(Error::shape("adam", "state does not match parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
            v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Where a (possibly resumed) run stands.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub steps_done: usize,
    pub adam: Option<AdamState>,
}

impl TrainState {
    pub fn fresh() -> Self {
        Self {
            epochs_done: 0,
            steps_done: 0,
            adam: None,
        }
    }

    pub fn to_archive(&self) -> crate::archive::TensorArchive {
        let mut tensors = Vec::new();
        if let Some(a) = &self.adam {
            for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
                tensors.push((format!("m.{i}"), m.clone()));
                tensors.push((format!("v.{i}"), v.clone()));
            }
        }
        crate::archive::TensorArchive {
            kind: "optimizer".into(),
            metadata: serde_json::json!({
                "epochs_done": self.epochs_done,
                "steps_done": self.steps_done,
                "adam_step": self.adam.as_ref().map(|a| a.step),
            }),
            tensors,
        }
    }

    pub fn from_archive(a: &crate::archive::TensorArchive) -> Result<Self> {
        let bad = |d: &str| Error::format("optimizer state", d.to_owned());
        if a.kind != "optimizer" {
            return Err(bad(&format!("unexpected kind {:?}", a.kind)));
        }
        let get = |k: &str| a.metadata[k].as_u64().ok_or_else(|| bad(&format!("missing {k}")));
        let adam = match a.metadata["adam_step"].as_u64() {
            None => None,
            Some(step) => {
                let n = a.tensors.len() / 2;
                let mut m = Vec::with_capacity(n);
                let mut v = Vec::with_capacity(n);
                for i in 0..n {
                    m.push(a.get(&format!("m.{i}")).ok_or_else(|| bad("missing moment"))?.clone());
                    v.push(a.get(&format!("v.{i}")).ok_or_else(|| bad("missing moment"))?.clone());
                }
                Some(AdamState { step, m, v })
            }
        };
        Ok(Self {
            epochs_done: get("epochs_done")? as usize,
            steps_done: get("steps_done")? as usize,
            adam,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<LossRecord>,
    pub state: TrainState,
}

/// Trains from scratch on normalized `[N_s, d]` samples.
pub fn train<M: Trainable>(model: &mut M, samples: &[Tensor], cfg: &TrainConfig) -> Result<TrainOutcome> {
    resume(model, samples, cfg, TrainState::fresh())
}

/// Continues training from `state` until `cfg.epochs` epochs are done.
///
/// Within a batch, samples are visited in ascending index order and their
/// gradients summed in that order, so a step does not depend on the shuffle
/// or on the number of worker threads.
pub fn resume<M: Trainable>(
    model: &mut M,
    samples: &[Tensor],
    cfg: &TrainConfig,
    mut state: TrainState,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Degenerate("no training samples".into()));
    }
    let (rows, cols) = samples[0].dims2()?;
    if let Some(bad) = samples.iter().find(|s| s.shape() != [rows, cols]) {
        return Err(Error::shape(
            "train",
            format!("sample {:?} differs from {:?}", bad.shape(), [rows, cols]),
        ));
    }
    if let (Optimizer::Adam { .. }, None) = (cfg.optimizer, &state.adam) {
        state.adam = Some(AdamState::new(&model.parameters()));
    }
    let max_len = model.max_len();
    let mut history = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64])));
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let examples: Vec<Example> = batch
                .iter()
                .map(|&i| {
                    let mask = cfg.mask_for(i, epoch, rows, cols)?;
                    Example::new(&samples[i], &mask, max_len, cfg.loss_scope)
                })
                .collect::<Result<_>>()?;
            let (losses, grads) = model.batch_gradient(&examples)?;
            let scale = 1.0 / batch.len() as f64;
            let loss = losses.iter().sum::<f64>() * scale;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: state.steps_done,
                    loss,
                });
            }
            let grads: Vec<Tensor> = grads.into_iter().map(|g| g.scale(scale)).collect();
            let mut params = model.parameters_mut();
            match cfg.optimizer {
                Optimizer::Sgd => sgd_step(&mut params, &grads, cfg.learning_rate)?,
                Optimizer::Adam { beta1, beta2, eps } => adam_step(
                    &mut params,
                    &grads,
                    state.adam.as_mut().expect("initialized above"),
                    cfg.learning_rate,
                    (beta1, beta2, eps),
                )?,
            }
            history.push(LossRecord {
                step: state.steps_done,
                epoch,
                loss,
            });
            state.steps_done += 1;
        }
        state.epochs_done = epoch + 1;
    }
    Ok(TrainOutcome { history, state })
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,epoch,loss").expect("in-memory write");
    for r in history {
        writeln!(out, "{},{},{:e}", r.step, r.epoch, r.loss).expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Held-out and training dataset indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

impl Split {
    pub fn train_for(&self, dataset: &Dataset, scenario: ScenarioId) -> Vec<usize> {
        filter_scenario(&self.train, dataset, scenario)
    }

    pub fn holdout_for(&self, dataset: &Dataset, scenario: ScenarioId) -> Vec<usize> {
        filter_scenario(&self.holdout, dataset, scenario)
    }
}

fn filter_scenario(idx: &[usize], dataset: &Dataset, scenario: ScenarioId) -> Vec<usize> {
    idx.iter()
        .copied()
        .filter(|&i| dataset.tensors[i].scenario == scenario)
        .collect()
}

pub const HOLDOUT_FRACTION: f64 = 0.1;

/// Per-scenario shuffled split holding out `fraction` of each scenario (at least one
/// matrix when the scenario has two or more).
pub fn split_indices(dataset: &Dataset, fraction: f64, seed: u64) -> Split {
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for (k, &sc) in ScenarioId::ALL.iter().enumerate() {
        let mut idx = dataset.indices_for(sc);
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[k as u64])));
        let mut n_hold = (fraction * idx.len() as f64).round() as usize;
        if idx.len() >= 2 {
            n_hold = n_hold.clamp(1, idx.len() - 1);
        } else {
            n_hold = 0;
        }
        holdout.extend_from_slice(&idx[..n_hold]);
        train.extend_from_slice(&idx[n_hold..]);
    }
    train.sort_unstable();
    holdout.sort_unstable();
    Split { train, holdout }
}

/// Normalized feature matrices for `indices` of `dataset`.
pub fn features(dataset: &Dataset, indices: &[usize], mode: NormMode) -> Result<Vec<FeatureMatrix>> {
    indices
        .par_iter()
        .map(|&i| FeatureMatrix::from_csi(&dataset.tensors[i], mode))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand_distr::{Distribution, StandardNormal};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    fn tiny() -> Encoder {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            max_len: 6,
            feature_dim: 4,
            plain_head: false,
        };
        Encoder::new(cfg, 3).unwrap()
    }

    #[test]
    fn loss_examples() {
        let x = random(&[3, 4], 1);
        assert_eq!(mse_loss(&x, &x, None).unwrap(), 0.0);
        let shifted = x.map(|v| v + 0.1);
        assert!((mse_loss(&x, &shifted, None).unwrap() - 0.01).abs() < 1e-15);

        // Two samples, hand arithmetic.
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0]]).unwrap();
        let a_hat = Tensor::from_rows(&[vec![1.5, 2.0], vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let b_hat = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 2.0]]).unwrap();
        // sample sums: 0.25 + 1 = 1.25 and 4 + 1 = 5.
        let obj = batch_objective(&[(&a, &a_hat), (&b, &b_hat)], None).unwrap();
        assert!((obj - 3.125).abs() < 1e-15);
        let scope = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((mse_loss(&a, &a_hat, Some(&scope)).unwrap() - 0.625).abs() < 1e-15);
        assert!(mse_loss(&a, &x, None).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = Tensor::full(&[2], 1.0);
        sgd_step(&mut [&mut p], &[Tensor::full(&[2], 2.0)], 0.1).unwrap();
        assert_eq!(p.data(), &[0.8, 0.8]);
        let before = p.clone();
        sgd_step(&mut [&mut p], &[Tensor::zeros(&[2])], 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = Tensor::zeros(&[5]);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::ones(&[5])], &mut st, 0.01, (0.9, 0.999, 1e-8)).unwrap();
        for v in p.data() {
            assert!((v + 0.01).abs() < 1e-9);
        }
        let mut q = Tensor::full(&[3], 2.0);
        let mut st = AdamState::new(&[&q]);
        adam_step(&mut [&mut q], &[Tensor::zeros(&[3])], &mut st, 0.01, (0.9, 0.999, 1e-8)).unwrap();
        assert_eq!(q.data(), &[2.0; 3]);
    }

    fn samples(n: usize, seed: u64) -> Vec<Tensor> {
        (0..n).map(|i| random(&[5, 4], seed + i as u64)).collect()
    }

    fn cfg(opt: Optimizer, lr: f64, batch: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            batch_size: batch,
            epochs: 2,
            optimizer: opt,
            mask: MaskSpec::new(MaskScheme::Bernoulli { keep_prob: 0.8 }, 9),
            fixed_mask: false,
            seed: 4,
            loss_scope: LossScope::AllPositions,
            norm_mode: NormMode::Global,
        }
    }

    #[test]
    fn zero_lr_leaves_params() {
        for opt in [Optimizer::Sgd, Optimizer::adam()] {
            let mut m = tiny();
            let before = m.params.clone();
            let out = train(&mut m, &samples(7, 1), &cfg(opt, 0.0, 3)).unwrap();
            assert_eq!(out.history.len(), 2 * 3);
            assert_eq!(m.params, before);
            assert!(out.history.iter().all(|r| r.loss >= 0.0));
        }
    }

    #[test]
    fn deterministic_and_resumable() {
        let data = samples(6, 2);
        let c = cfg(Optimizer::adam(), 1e-2, 4);
        let mut a = tiny();
        let mut b = tiny();
        let ha = train(&mut a, &data, &c).unwrap();
        let hb = train(&mut b, &data, &c).unwrap();
        assert_eq!(ha.history, hb.history);
        assert_eq!(a.params, b.params);

        let mut r = tiny();
        let half = TrainConfig { epochs: 1, ..c.clone() };
        let first = train(&mut r, &data, &half).unwrap();
        let state = TrainState::from_archive(&first.state.to_archive()).unwrap();
        let second = resume(&mut r, &data, &c, state).unwrap();
        let joined: Vec<_> = first.history.iter().chain(&second.history).copied().collect();
        assert_eq!(joined, ha.history);
        assert_eq!(r.params, a.params);
    }

    #[test]
    fn full_batch_ignores_shuffle_seed() {
        let data = samples(5, 3);
        let mut c = cfg(Optimizer::Sgd, 0.05, 5);
        c.epochs = 1;
        let mut a = tiny();
        train(&mut a, &data, &c).unwrap();
        c.seed = 999;
        let mut b = tiny();
        train(&mut b, &data, &c).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = tiny();
        let mut c = cfg(Optimizer::Sgd, 1e300, 2);
        c.epochs = 5;
        let err = train(&mut m, &samples(4, 5), &c).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn sgd_step_matches_gradient() {
        let m = tiny();
        let x = random(&[5, 4], 11);
        let mask = make_mask(&MaskSpec::new(MaskScheme::EveryKth { k: 2 }, 0), 5, 4).unwrap();
        let ex = Example::new(&x, &mask, 6, LossScope::AllPositions).unwrap();
        let params: Vec<Tensor> = m.parameters().into_iter().cloned().collect();
        let report = grad_check(
            |tape, vars| record_loss(&m, tape, vars, &ex),
            &params,
            &GradCheckOptions {
                max_coords_per_param: Some(4),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");

        let (_, g) = sample_gradient(&m, &ex).unwrap();
        let mut stepped = m.clone();
        train(&mut stepped, &[x], &TrainConfig {
            epochs: 1,
            batch_size: 1,
            fixed_mask: true,
            mask: MaskSpec::new(MaskScheme::EveryKth { k: 2 }, 0),
            ..cfg(Optimizer::Sgd, 0.1, 1)
        })
        .unwrap();
        for ((p0, p1), gi) in m.parameters().iter().zip(stepped.parameters()).zip(&g) {
            for ((a, b), c) in p0.data().iter().zip(p1.data()).zip(gi.data()) {
                assert_eq!(*b, a - 0.1 * c);
            }
        }
    }

    #[test]
    fn masked_only_scope_counts_masked_elements() {
        let x = random(&[4, 3], 2);
        let mask = make_mask(&MaskSpec::new(MaskScheme::EveryKth { k: 2 }, 0), 4, 3).unwrap();
        let ex = Example::new(&x, &mask, 6, LossScope::MaskedOnly).unwrap();
        assert_eq!(ex.in_scope(), 6);
        let ex = Example::new(&x, &mask, 6, LossScope::AllPositions).unwrap();
        assert_eq!(ex.in_scope(), 12);
        assert_eq!(ex.input.row(0), &[0.0; 3]);
        assert_eq!(ex.input.row(1), x.row(1));
    }
}
