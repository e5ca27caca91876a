//! The fast invariant suite: per-op and end-to-end gradient checks, channel
//! model cases, softmax and layer-norm properties, mask statistics and file
//! format round trips.

use crate::archive::TensorArchive;
use crate::channel::{
    add_awgn, apply_doppler_rotation, csi_from_paths, doppler_shift, generate_dataset, path_loss, read_dataset,
    rms_delay_spread, sample_paths, steering_vector, write_generated_dataset, CsiDims, DatasetConfig, DopplerParams,
    MultipathComponent, PathLossParams, ScenarioConfig, ScenarioId,
};
use crate::error::Result;
use crate::model::{Encoder, ModelConfig};
use crate::preprocess::{make_mask, MaskScheme, MaskSpec};
use crate::seed::derive_seed;
use crate::tensor::{grad_check, layer_norm, softmax_rows, GradCheckOptions, OpKind, Tape, Tensor, Var};
use crate::training::{record_loss, Example, LossScope, Trainable};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::time::Instant;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckGroup {
    Gradient,
    Channel,
    Kernels,
    Masks,
    Formats,
}

impl CheckGroup {
    pub const ALL: [CheckGroup; 5] = [
        CheckGroup::Gradient,
        CheckGroup::Channel,
        CheckGroup::Kernels,
        CheckGroup::Masks,
        CheckGroup::Formats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckGroup::Gradient => "gradient",
            CheckGroup::Channel => "channel",
            CheckGroup::Kernels => "kernels",
            CheckGroup::Masks => "masks",
            CheckGroup::Formats => "formats",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub seed: u64,
    /// Random shapes tried per differentiable op.
    pub trials_per_op: usize,
    /// Corrupts one op's backward rule; the gradient checks should catch it.
    pub fault: Option<OpKind>,
    pub groups: Vec<CheckGroup>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials_per_op: 7,
            fault: None,
            groups: CheckGroup::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub group: CheckGroup,
    pub name: String,
    pub passed: bool,
    /// The measured quantity compared against `threshold`.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn within(group: CheckGroup, name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            group,
            name: name.into(),
            passed: value.is_finite() && value <= threshold,
            value,
            threshold,
            detail: String::new(),
        }
    }

    fn holds(group: CheckGroup, name: impl Into<String>, ok: bool) -> Self {
        Self {
            group,
            name: name.into(),
            passed: ok,
            value: if ok { 0.0 } else { 1.0 },
            threshold: 0.0,
            detail: String::new(),
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    fn errored(group: CheckGroup, name: impl Into<String>, err: crate::Error) -> Self {
        Self::holds(group, name, false).with_detail(err.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub passed: bool,
    pub results: Vec<CheckResult>,
    /// Randomized gradient trials run (per-op plus end-to-end).
    pub gradient_trials: usize,
    pub elapsed_secs: f64,
}

impl CheckSummary {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn group_passed(&self, group: CheckGroup) -> bool {
        self.results.iter().filter(|r| r.group == group).all(|r| r.passed)
    }

    /// One line per check.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let status = if r.passed { "ok  " } else { "FAIL" };
            out.push_str(&format!(
                "{status} {:<9} {:<36} {:.3e} (limit {:.1e}) {}\n",
                r.group.name(),
                r.name,
                r.value,
                r.threshold,
                r.detail
            ));
        }
        out
    }
}

pub fn run_checks(opts: &CheckOptions) -> CheckSummary {
    let start = Instant::now();
    let mut results = Vec::new();
    let mut trials = 0;
    for &g in &opts.groups {
        match g {
            CheckGroup::Gradient => {
                let (r, n) = gradient_checks(opts);
                results.extend(r);
                trials += n;
            }
            CheckGroup::Channel => results.extend(channel_checks(opts.seed)),
            CheckGroup::Kernels => results.extend(kernel_checks(opts.seed)),
            CheckGroup::Masks => results.extend(mask_checks(opts.seed)),
            CheckGroup::Formats => results.extend(format_checks(opts.seed)),
        }
    }
    CheckSummary {
        passed: results.iter().all(|r| r.passed),
        results,
        gradient_trials: trials,
        elapsed_secs: start.elapsed().as_secs_f64(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Values bounded away from zero so the ReLU kink is never straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0).map(|v| v.signum() * (0.1 + v.abs()))
}

/// One randomized gradient trial: random operands for `kind`, reduced to a
/// scalar through a fixed random weighting.
fn op_trial(kind: OpKind, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=4);
    let n = rng.random_range(2..=5);
    let k = rng.random_range(1..=4);
    let params: Vec<Tensor> = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => vec![uniform(&mut rng, &[m, n], -2.0, 2.0), uniform(&mut rng, &[m, n], -2.0, 2.0)],
        OpKind::AddRowBias => vec![uniform(&mut rng, &[m, n], -2.0, 2.0), uniform(&mut rng, &[n], -1.0, 1.0)],
        OpKind::MatMul => vec![uniform(&mut rng, &[m, k], -1.0, 1.0), uniform(&mut rng, &[k, n], -1.0, 1.0)],
        OpKind::Relu => vec![off_zero(&mut rng, &[m, n])],
        OpKind::LayerNorm => vec![
            uniform(&mut rng, &[m, n], -2.0, 2.0),
            uniform(&mut rng, &[n], 0.5, 1.5),
            uniform(&mut rng, &[n], -0.5, 0.5),
        ],
        OpKind::ConcatCols => vec![uniform(&mut rng, &[m, n], -1.0, 1.0), uniform(&mut rng, &[m, k], -1.0, 1.0)],
        _ => vec![uniform(&mut rng, &[m, n], -2.0, 2.0)],
    };
    let scale: f64 = rng.random_range(-2.0..2.0);
    let valid: Option<Vec<bool>> = if rng.random_bool(0.5) {
        let mut v: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        v[0] = true;
        Some(v)
    } else {
        None
    };
    let out_shape: Vec<usize> = match kind {
        OpKind::MatMul => vec![m, n],
        OpKind::Transpose => vec![n, m],
        OpKind::Reshape => vec![n, m],
        OpKind::ConcatCols => vec![m, n + k],
        _ => vec![m, n],
    };
    let weights = uniform(&mut rng, &out_shape, -1.0, 1.0);

    let f = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let y = match kind {
            OpKind::Add => tape.add(v[0], v[1])?,
            OpKind::Sub => tape.sub(v[0], v[1])?,
            OpKind::Mul => tape.mul(v[0], v[1])?,
            OpKind::Scale => tape.scale(v[0], scale),
            OpKind::AddRowBias => tape.add_row_bias(v[0], v[1])?,
            OpKind::MatMul => tape.matmul(v[0], v[1])?,
            OpKind::Transpose => tape.transpose(v[0])?,
            OpKind::Relu => tape.relu(v[0]),
            OpKind::Gelu => tape.gelu(v[0]),
            OpKind::SoftmaxRows => tape.softmax_rows(v[0], valid.as_deref())?,
            OpKind::LayerNorm => tape.layer_norm(v[0], v[1], v[2], 1e-5)?,
            OpKind::Square => tape.square(v[0]),
            OpKind::SumAll => return Ok(tape.sum_all(v[0])),
            OpKind::ConcatCols => tape.concat_cols(&[v[0], v[1]])?,
            OpKind::Reshape => tape.reshape(v[0], &[n, m])?,
            OpKind::Leaf => v[0],
        };
        let w = tape.leaf(weights.clone());
        let yw = tape.mul(y, w)?;
        Ok(tape.sum_all(yw))
    };
    let opts = GradCheckOptions {
        fault,
        seed,
        ..Default::default()
    };
    Ok(grad_check(f, &params, &opts)?.max_rel_error)
}

/// Per-op checks over random shapes, then the end-to-end desk model.
/// Returns the results and the number of trials run.
pub fn gradient_checks(opts: &CheckOptions) -> (Vec<CheckResult>, usize) {
    let g = CheckGroup::Gradient;
    let mut results = Vec::new();
    let mut trials = 0;
    for (oi, kind) in OpKind::DIFFERENTIABLE.into_iter().enumerate() {
        let mut worst = 0.0_f64;
        let mut error = None;
        for t in 0..opts.trials_per_op {
            trials += 1;
            match op_trial(kind, derive_seed(opts.seed, &[oi as u64, t as u64]), opts.fault) {
                Ok(e) => worst = worst.max(e),
                Err(e) => error = Some(e),
            }
        }
        let name = format!("op {}", kind.name());
        results.push(match error {
            Some(e) => CheckResult::errored(g, name, e),
            None => CheckResult::within(g, name, worst, OP_TOLERANCE)
                .with_detail(format!("{} trials", opts.trials_per_op)),
        });
    }
    trials += 1;
    results.push(match model_gradient_error(opts.seed, opts.fault) {
        Ok(e) => CheckResult::within(g, "desk model end-to-end", e, MODEL_TOLERANCE),
        Err(e) => CheckResult::errored(g, "desk model end-to-end", e),
    });
    (results, trials)
}

/// Largest relative gradient error of the masked reconstruction loss of a
/// desk-size encoder, sampled at a few coordinates of every parameter.
pub fn model_gradient_error(seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let model = Encoder::new(ModelConfig::desk(32, 16), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[99]));
    let x = uniform(&mut rng, &[16, 32], -1.5, 1.5);
    let mask = make_mask(&MaskSpec::new(MaskScheme::EveryKth { k: 10 }, seed), 16, 32)?;
    let ex = Example::new(&x, &mask, 16, LossScope::AllPositions)?;
    let params: Vec<Tensor> = model.parameters().into_iter().cloned().collect();
    let report = grad_check(
        |tape, vars| record_loss(&model, tape, vars, &ex),
        &params,
        &GradCheckOptions {
            max_coords_per_param: Some(3),
            seed,
            fault,
            ..Default::default()
        },
    )?;
    Ok(report.max_rel_error)
}

fn max_abs_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).norm()))
}

pub fn channel_checks(seed: u64) -> Vec<CheckResult> {
    let g = CheckGroup::Channel;
    let mut out = Vec::new();
    let mut run = |name: &str, f: &dyn Fn() -> Result<(f64, f64)>| {
        out.push(match f() {
            Ok((v, tol)) => CheckResult::within(g, name, v, tol),
            Err(e) => CheckResult::errored(g, name, e),
        })
    };

    run("doppler at zero speed", &|| {
        Ok((doppler_shift(&DopplerParams::new(0.0, 3.5e9)?).abs(), 0.0))
    });
    run("doppler 120 km/h at 3.5 GHz", &|| {
        let d = doppler_shift(&DopplerParams::new(33.333, 3.5e9)?);
        Ok(((d - 389.14443).abs(), 1e-4))
    });
    run("doppler 30 m/s at 1 GHz", &|| {
        let p = DopplerParams {
            speed: 30.0,
            carrier_frequency: 1e9,
            light_speed: 3e8,
        };
        Ok(((doppler_shift(&p) - 100.0).abs(), 1e-9))
    });
    run("path loss reference point", &|| {
        let p = PathLossParams {
            exponent: 3.7,
            ..Default::default()
        };
        Ok(((path_loss(1.0, p.ref_frequency, &p)? - 1.0).abs(), 1e-15))
    });
    run("path loss d=10 beta=2", &|| {
        let p = PathLossParams {
            exponent: 2.0,
            ..Default::default()
        };
        Ok(((path_loss(10.0, p.ref_frequency, &p)? - 0.01).abs(), 1e-15))
    });
    run("path loss d=2 f=2f0 beta=4 gamma=1", &|| {
        let p = PathLossParams {
            exponent: 4.0,
            ref_frequency: 1e9,
            freq_scaling: 1.0,
        };
        Ok(((path_loss(2.0, 2e9, &p)? - 0.125).abs(), 1e-15))
    });
    run("path loss rejects d=0", &|| {
        Ok((path_loss(0.0, 1e9, &PathLossParams::default()).is_ok() as u8 as f64, 0.0))
    });
    run("steering broadside", &|| {
        Ok((max_abs_diff(&steering_vector(4, 0.0), &[Complex64::new(1.0, 0.0); 4]), 1e-15))
    });
    run("steering endfire", &|| {
        let want = [Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)];
        Ok((max_abs_diff(&steering_vector(2, PI / 2.0), &want), 1e-12))
    });
    run("steering unit modulus", &|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0_f64;
        for _ in 0..100 {
            let a = steering_vector(rng.random_range(1..65), rng.random_range(-PI..PI));
            worst = a.iter().fold(worst, |w, z| w.max((z.norm() - 1.0).abs()));
        }
        Ok((worst, 1e-12))
    });
    run("single LOS path gives all ones", &|| {
        let p = MultipathComponent {
            gain: Complex64::new(1.0, 0.0),
            aod: 0.0,
            aoa: 0.0,
            delay: 0.0,
        };
        let h = csi_from_paths(&[p], CsiDims::new(4, 3, 2)?, 30e3, ScenarioId::Stationary)?;
        let ones = vec![Complex64::new(1.0, 0.0); 24];
        Ok((max_abs_diff(h.data(), &ones) + (h.data().len() != 24) as u8 as f64, 1e-15))
    });
    run("multipath sum is linear", &|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let paths = sample_paths(&ScenarioConfig::preset(ScenarioId::UrbanMacro), &mut rng)?;
        let dims = CsiDims::new(8, 4, 2)?;
        let (a, b) = paths.split_at(paths.len() / 2);
        let ha = csi_from_paths(a, dims, 30e3, ScenarioId::UrbanMacro)?;
        let hb = csi_from_paths(b, dims, 30e3, ScenarioId::UrbanMacro)?;
        let h = csi_from_paths(&paths, dims, 30e3, ScenarioId::UrbanMacro)?;
        let sum: Vec<Complex64> = ha.data().iter().zip(hb.data()).map(|(x, y)| x + y).collect();
        Ok((max_abs_diff(h.data(), &sum), 1e-12))
    });
    run("path powers sum to one", &|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0_f64;
        for sc in ScenarioConfig::presets() {
            for _ in 0..100 {
                let total: f64 = sample_paths(&sc, &mut rng)?.iter().map(|p| p.gain.norm_sqr()).sum();
                worst = worst.max((total - 1.0).abs());
            }
        }
        Ok((worst, 1e-9))
    });
    run("stationary RMS delay spread", &|| {
        let sc = ScenarioConfig {
            path_count: 32,
            ..ScenarioConfig::preset(ScenarioId::Stationary)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = 0.0;
        for _ in 0..1000 {
            acc += rms_delay_spread(&sample_paths(&sc, &mut rng)?);
        }
        Ok(((acc / 1000.0 / 100e-9 - 1.0).abs(), 0.2))
    });
    run("AWGN realized SNR at 20 dB", &|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sc = ScenarioConfig::preset(ScenarioId::HighSpeed);
        let h = crate::channel::generate_csi(&sc, CsiDims::new(64, 64, 32)?, 30e3, &mut rng)?;
        let noisy = add_awgn(&h, 20.0, &mut rng)?;
        let noise: f64 = noisy
            .data()
            .iter()
            .zip(h.data())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            / h.data().len() as f64;
        Ok(((10.0 * (h.mean_power() / noise).log10() - 20.0).abs(), 0.5))
    });
    run("AWGN at 0 dB matches signal power", &|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sc = ScenarioConfig::preset(ScenarioId::Stationary);
        let h = crate::channel::generate_csi(&sc, CsiDims::new(64, 64, 4)?, 30e3, &mut rng)?;
        let noisy = add_awgn(&h, 0.0, &mut rng)?;
        let noise: f64 = noisy
            .data()
            .iter()
            .zip(h.data())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            / h.data().len() as f64;
        Ok(((noise / h.mean_power() - 1.0).abs(), 0.05))
    });
    run("Doppler half-turn negates", &|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = crate::channel::generate_csi(
            &ScenarioConfig::preset(ScenarioId::Stationary),
            CsiDims::new(4, 4, 2)?,
            30e3,
            &mut rng,
        )?;
        let r = apply_doppler_rotation(&h, 500.0, 1e-3);
        let neg: Vec<Complex64> = h.data().iter().map(|z| -z).collect();
        Ok((max_abs_diff(r.data(), &neg), 1e-12))
    });
    out
}

pub fn kernel_checks(seed: u64) -> Vec<CheckResult> {
    let g = CheckGroup::Kernels;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[7]));
    let x = uniform(&mut rng, &[6, 9], -20.0, 20.0);
    let mut out = Vec::new();

    match softmax_rows(&x, None) {
        Ok(s) => {
            let worst = (0..6).fold(0.0_f64, |w, i| w.max((s.row(i).iter().sum::<f64>() - 1.0).abs()));
            out.push(CheckResult::within(g, "softmax rows sum to one", worst, 1e-12));
            let shifted = softmax_rows(&x.map(|v| v + 1000.0), None).expect("same shape");
            out.push(CheckResult::within(
                g,
                "softmax shift invariance",
                shifted.sub(&s).expect("same shape").max_abs(),
                1e-12,
            ));
        }
        Err(e) => out.push(CheckResult::errored(g, "softmax", e)),
    }
    let valid: Vec<bool> = (0..9).map(|j| j % 3 != 2).collect();
    match softmax_rows(&x, Some(&valid)) {
        Ok(s) => {
            let leaked = (0..6)
                .flat_map(|i| (0..9).map(move |j| (i, j)))
                .filter(|&(_, j)| !valid[j])
                .fold(0.0_f64, |w, (i, j)| w.max(s.at(i, j).abs()));
            out.push(CheckResult::within(g, "softmax masked columns are zero", leaked, 0.0));
        }
        Err(e) => out.push(CheckResult::errored(g, "softmax masked", e)),
    }

    let ones = Tensor::ones(&[9]);
    let zeros = Tensor::zeros(&[9]);
    match layer_norm(&x, &ones, &zeros, 1e-12) {
        Ok((y, _)) => {
            let mut worst = 0.0_f64;
            for i in 0..6 {
                let r = y.row(i);
                let mean = r.iter().sum::<f64>() / 9.0;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
                worst = worst.max(mean.abs()).max((var - 1.0).abs());
            }
            out.push(CheckResult::within(g, "layer norm zero mean unit variance", worst, 1e-9));
            let affine = x.map(|v| 3.0 * v - 7.0);
            let (ya, _) = layer_norm(&affine, &ones, &zeros, 1e-12).expect("same shape");
            out.push(CheckResult::within(
                g,
                "layer norm affine invariance",
                ya.sub(&y).expect("same shape").max_abs(),
                1e-9,
            ));
        }
        Err(e) => out.push(CheckResult::errored(g, "layer norm", e)),
    }
    out
}

/// `|observed - expected|` in units of the binomial standard deviation.
fn binomial_z(count: usize, trials: usize, p: f64) -> f64 {
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    let dev = (count as f64 - trials as f64 * p).abs();
    if sd == 0.0 {
        if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        dev / sd
    }
}

pub fn mask_checks(seed: u64) -> Vec<CheckResult> {
    let g = CheckGroup::Masks;
    let mut out = Vec::new();
    let draws = 100;
    let (rows, cols) = (64, 32);

    for keep_prob in [0.5, 0.85] {
        let name = format!("bernoulli keep rate p={keep_prob}");
        let mut kept = 0;
        let mut err = None;
        for t in 0..draws {
            let spec = MaskSpec::new(MaskScheme::Bernoulli { keep_prob }, derive_seed(seed, &[1, t]));
            match make_mask(&spec, rows, cols) {
                Ok(m) => kept += m.kept_count(),
                Err(e) => err = Some(e),
            }
        }
        out.push(match err {
            Some(e) => CheckResult::errored(g, name, e),
            None => CheckResult::within(g, name, binomial_z(kept, draws as usize * rows * cols, keep_prob), 3.0),
        });
    }

    match make_mask(&MaskSpec::new(MaskScheme::EveryKth { k: 10 }, seed), 64, cols) {
        Ok(m) => {
            let want: Vec<usize> = (0..64).step_by(10).collect();
            let got = m.masked_rows();
            out.push(
                CheckResult::holds(g, "every-10th masks rows 0,10,..,60", got == want)
                    .with_detail(format!("{got:?}")),
            );
        }
        Err(e) => out.push(CheckResult::errored(g, "every-10th", e)),
    }

    for (k, gamma) in [0.0, 0.1, 0.2, 0.3, 0.4, 0.5].into_iter().enumerate() {
        let name = format!("ratio sweep gamma={gamma}");
        let mut masked = 0;
        let mut err = None;
        for t in 0..draws {
            let spec = MaskSpec::new(
                MaskScheme::RatioSweep { masked_fraction: gamma },
                derive_seed(seed, &[2, k as u64, t]),
            );
            match make_mask(&spec, rows, cols) {
                Ok(m) => masked += m.masked_rows().len(),
                Err(e) => err = Some(e),
            }
        }
        out.push(match err {
            Some(e) => CheckResult::errored(g, name, e),
            None => CheckResult::within(g, name, binomial_z(masked, draws as usize * rows, gamma), 3.0),
        });
    }
    out
}

pub fn format_checks(seed: u64) -> Vec<CheckResult> {
    let g = CheckGroup::Formats;
    let mut out = Vec::new();

    let archive = || -> Result<bool> {
        let model = Encoder::new(ModelConfig::desk(8, 4), seed)?;
        let a = model.to_archive(serde_json::json!({ "note": "check" }));
        let bytes = a.to_bytes()?;
        let back = TensorArchive::from_bytes(&bytes)?;
        let restored = Encoder::from_archive(&back)?;
        Ok(back == a && back.to_bytes()? == bytes && restored.params == model.params)
    };
    out.push(match archive() {
        Ok(ok) => CheckResult::holds(g, "checkpoint archive round trip", ok),
        Err(e) => CheckResult::errored(g, "checkpoint archive round trip", e),
    });

    let truncated = || -> Result<bool> {
        let a = Encoder::new(ModelConfig::desk(8, 4), seed)?.to_archive(serde_json::Value::Null);
        let bytes = a.to_bytes()?;
        Ok(TensorArchive::from_bytes(&bytes[..bytes.len() - 3]).is_err()
            && TensorArchive::from_bytes(b"NOPE").is_err())
    };
    out.push(match truncated() {
        Ok(ok) => CheckResult::holds(g, "archive rejects corrupt input", ok),
        Err(e) => CheckResult::errored(g, "archive rejects corrupt input", e),
    });

    let dataset = || -> Result<bool> {
        let dir = std::env::temp_dir().join(format!("csibert-check-{}-{seed}", std::process::id()));
        let config = DatasetConfig {
            cells: 1,
            ues_per_cell: 2,
            n_subcarriers: 4,
            n_tx: 2,
            n_rx: 2,
            seed,
            ..DatasetConfig::desk()
        };
        let result = (|| {
            write_generated_dataset(&dir, &config)?;
            let read = read_dataset(&dir)?;
            let fresh = generate_dataset(&config)?;
            Ok(read.tensors.len() == fresh.tensors.len()
                && read.tensors.iter().zip(&fresh.tensors).all(|(a, b)| {
                    a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.re as f32 == y.re as f32 && x.im as f32 == y.im as f32)
                }))
        })();
        let _ = std::fs::remove_dir_all(&dir);
        result
    };
    out.push(match dataset() {
        Ok(ok) => CheckResult::holds(g, "dataset write/read round trip", ok),
        Err(e) => CheckResult::errored(g, "dataset write/read round trip", e),
    });
    out
}
