//! The evaluation protocols: reconstruction, per-scenario, masking ratio,
//! subcarrier groups, cross-scenario transfer, error histograms, Doppler
//! robustness and the baseline comparison.
//!
//! Every MSE row is reported for the model under test and for two anchors,
//! a perfect predictor (`x_hat = x`) and a zero predictor (`x_hat = 0`).

mod report;

pub use report::{
    emit_report, load_report, ExperimentReport, Fingerprint, ReportRow, CSV_COLUMNS, REPORT_VERSION,
};

use crate::baselines::{LinRegModel, MlpConfig, MlpModel, PaddedLinReg, RidgeForm, DEFAULT_HIDDEN, DEFAULT_RIDGE};
use crate::channel::{apply_doppler_rotation, Dataset, ScenarioId};
use crate::error::{Error, Result};
use crate::model::Encoder;
use crate::preprocess::{apply_mask, make_mask, FeatureMatrix, MaskMatrix, MaskScheme, MaskSpec};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::training::{
    features, split_indices, train, Example, LossScope, Reconstructor, Split, TrainConfig, HOLDOUT_FRACTION,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Experiment {
    Reconstruction,
    Scenario,
    MaskSweep,
    Subcarrier,
    CrossScenario,
    ErrorDist,
    Doppler,
    Baselines,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::Reconstruction,
        Experiment::Scenario,
        Experiment::MaskSweep,
        Experiment::Subcarrier,
        Experiment::CrossScenario,
        Experiment::ErrorDist,
        Experiment::Doppler,
        Experiment::Baselines,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Reconstruction => "reconstruction",
            Experiment::Scenario => "scenario",
            Experiment::MaskSweep => "mask-sweep",
            Experiment::Subcarrier => "subcarrier",
            Experiment::CrossScenario => "cross-scenario",
            Experiment::ErrorDist => "error-dist",
            Experiment::Doppler => "doppler",
            Experiment::Baselines => "baselines",
        }
    }

    pub fn valid_names() -> String {
        let mut names: Vec<&str> = vec!["all"];
        names.extend(Self::ALL.iter().map(|e| e.name()));
        names.join("|")
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}; valid: {}", Self::valid_names())))
    }
}

/// Knobs shared by all protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub every_k: usize,
    pub group_size: usize,
    pub n_bins: usize,
    pub gamma_grid: Vec<f64>,
    pub doppler_grid: Vec<f64>,
    pub mask_seed: u64,
    pub holdout_fraction: f64,
    pub split_seed: u64,
    pub mlp_hidden: usize,
    pub ridge_lambda: f64,
}

impl EvalSettings {
    pub fn new(seed: u64) -> Self {
        Self {
            every_k: 10,
            group_size: 8,
            n_bins: 50,
            gamma_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            doppler_grid: vec![0.0, 100.0, 200.0, 300.0, 400.0],
            mask_seed: seed,
            holdout_fraction: HOLDOUT_FRACTION,
            split_seed: seed,
            mlp_hidden: DEFAULT_HIDDEN,
            ridge_lambda: DEFAULT_RIDGE,
        }
    }
}

/// What produces reconstructions during an evaluation.
pub enum Predictor<'a> {
    Model(&'a dyn Reconstructor),
    /// Returns the clean target.
    Perfect,
    /// Returns zeros.
    Zero,
}

impl Predictor<'_> {
    fn predict(&self, ex: &Example) -> Result<Tensor> {
        match self {
            Predictor::Model(m) => m.reconstruct(&ex.input, &ex.attn),
            Predictor::Perfect => Ok(ex.target.clone()),
            Predictor::Zero => Ok(Tensor::zeros(ex.target.shape())),
        }
    }
}

/// Signed residuals `x - x_hat` of one matrix, valid rows only.
pub type Residual = Tensor;

fn sse_count<'a>(res: impl IntoIterator<Item = &'a Residual>) -> (f64, usize) {
    res.into_iter()
        .fold((0.0, 0), |(s, n), r| (s + r.sum_squares(), n + r.len()))
}

pub fn mse_of<'a>(res: impl IntoIterator<Item = &'a Residual>) -> f64 {
    let (s, n) = sse_count(res);
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Residual rows `[start, end)` of one matrix.
fn row_block(r: &Residual, start: usize, end: usize) -> Result<Tensor> {
    let (_, d) = r.dims2()?;
    Tensor::new(&[end - start, d], r.data()[start * d..end * d].to_vec())
}

/// Shared-edge histogram of residuals per group.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<Vec<u64>>,
}

/// Histograms `groups` over `n_bins` equal bins on `[-m, m]`, `m` the largest
/// absolute residual (1 when every residual is zero).
pub fn error_histogram(groups: &[Vec<f64>], n_bins: usize) -> Result<Histogram> {
    if n_bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let m = groups
        .iter()
        .flatten()
        .fold(0.0_f64, |a, v| a.max(v.abs()));
    let m = if m > 0.0 { m } else { 1.0 };
    let edges: Vec<f64> = (0..=n_bins)
        .map(|i| -m + 2.0 * m * i as f64 / n_bins as f64)
        .collect();
    let counts = groups
        .iter()
        .map(|g| {
            let mut c = vec![0u64; n_bins];
            for &v in g {
                let b = (((v + m) / (2.0 * m)) * n_bins as f64).floor() as usize;
                c[b.min(n_bins - 1)] += 1;
            }
            c
        })
        .collect();
    Ok(Histogram { edges, counts })
}

/// Group boundaries `[(start, end)]` covering `[0, rows)`.
pub fn subcarrier_groups(rows: usize, size: usize) -> Result<Vec<(usize, usize)>> {
    if size == 0 {
        return Err(Error::Config("subcarrier group size must be positive".into()));
    }
    Ok((0..rows)
        .step_by(size)
        .map(|s| (s, (s + size).min(rows)))
        .collect())
}

/// Runs the protocols against one trained encoder.
pub struct Suite<'a> {
    pub dataset: &'a Dataset,
    pub model: &'a Encoder,
    pub train_config: TrainConfig,
    pub settings: EvalSettings,
    pub split: Split,
    holdout: Vec<FeatureMatrix>,
}

impl<'a> Suite<'a> {
    pub fn new(
        dataset: &'a Dataset,
        model: &'a Encoder,
        train_config: TrainConfig,
        settings: EvalSettings,
    ) -> Result<Self> {
        let split = split_indices(dataset, settings.holdout_fraction, settings.split_seed);
        if split.holdout.is_empty() {
            return Err(Error::Degenerate("held-out split is empty".into()));
        }
        let holdout = features(dataset, &split.holdout, train_config.norm_mode)?;
        let (rows, d) = holdout[0].data.dims2()?;
        if d != model.config.feature_dim || rows > model.config.max_len {
            return Err(Error::shape(
                "suite",
                format!(
                    "data rows {rows} x {d} do not fit model max_len {} feature_dim {}",
                    model.config.max_len, model.config.feature_dim
                ),
            ));
        }
        Ok(Self {
            dataset,
            model,
            train_config,
            settings,
            split,
            holdout,
        })
    }

    fn rows(&self) -> usize {
        self.holdout[0].rows()
    }

    fn cols(&self) -> usize {
        self.holdout[0].feature_dim()
    }

    fn every_k(&self) -> Result<MaskMatrix> {
        make_mask(
            &MaskSpec::new(MaskScheme::EveryKth { k: self.settings.every_k }, self.settings.mask_seed),
            self.rows(),
            self.cols(),
        )
    }

    /// Residuals for each matrix in `xs`, masked by `mask(i)`.
    fn residuals(
        &self,
        pred: &Predictor,
        xs: &[&Tensor],
        mask: &(dyn Fn(usize) -> Result<MaskMatrix> + Sync),
    ) -> Result<Vec<Residual>> {
        let max_len = self.model.config.max_len;
        xs.par_iter()
            .enumerate()
            .map(|(i, x)| {
                let ex = Example::new(x, &mask(i)?, max_len, LossScope::AllPositions)?;
                let y = pred.predict(&ex)?;
                let (rows, _) = x.dims2()?;
                row_block(&ex.target.sub(&y)?, 0, rows)
            })
            .collect()
    }

    fn holdout_data(&self) -> Vec<&Tensor> {
        self.holdout.iter().map(|f| &f.data).collect()
    }

    fn anchored<F>(&self, mut f: F) -> Result<Vec<ReportRow>>
    where
        F: FnMut(&Predictor, &str) -> Result<Vec<ReportRow>>,
    {
        let mut rows = f(&Predictor::Model(self.model), "model")?;
        rows.extend(f(&Predictor::Perfect, "perfect")?);
        rows.extend(f(&Predictor::Zero, "zero")?);
        Ok(rows)
    }

    fn report(&self, exp: Experiment, rows: Vec<ReportRow>) -> ExperimentReport {
        ExperimentReport {
            report_version: REPORT_VERSION,
            experiment: exp.name().to_owned(),
            config: serde_json::json!({
                "dataset": self.dataset.config,
                "model": self.model.config,
                "model_seed": self.model.seed,
                "training": self.train_config,
                "settings": self.settings,
            }),
            rows,
            paper_reference: paper_reference(exp),
            fingerprint: Fingerprint {
                seed: self.train_config.seed,
                toolkit_version: env!("CARGO_PKG_VERSION").to_owned(),
            },
            train_indices: self.split.train.clone(),
            holdout_indices: self.split.holdout.clone(),
        }
    }

    pub fn run(&self, exp: Experiment) -> Result<ExperimentReport> {
        let rows = match exp {
            Experiment::Reconstruction => self.reconstruction_rows()?,
            Experiment::Scenario => self.scenario_rows()?,
            Experiment::MaskSweep => self.mask_sweep_rows()?,
            Experiment::Subcarrier => self.subcarrier_rows()?,
            Experiment::CrossScenario => self.cross_scenario_rows()?,
            Experiment::ErrorDist => self.error_dist_rows()?,
            Experiment::Doppler => self.doppler_rows()?,
            Experiment::Baselines => self.baseline_rows()?,
        };
        let report = self.report(exp, rows);
        report.validate()?;
        Ok(report)
    }

    pub fn run_all(&self) -> Result<Vec<ExperimentReport>> {
        Experiment::ALL.iter().map(|&e| self.run(e)).collect()
    }

    fn reconstruction_rows(&self) -> Result<Vec<ReportRow>> {
        let mask = self.every_k()?;
        let xs = self.holdout_data();
        self.anchored(|p, name| {
            let res = self.residuals(p, &xs, &|_| Ok(mask.clone()))?;
            Ok(vec![ReportRow::new(&[("predictor", name.into())], "mse", mse_of(&res))])
        })
    }

    fn scenario_rows(&self) -> Result<Vec<ReportRow>> {
        let mask = self.every_k()?;
        let xs = self.holdout_data();
        self.anchored(|p, name| {
            let res = self.residuals(p, &xs, &|_| Ok(mask.clone()))?;
            let mut rows = Vec::new();
            for sc in ScenarioId::ALL {
                let part: Vec<&Residual> = res
                    .iter()
                    .zip(&self.holdout)
                    .filter(|(_, f)| f.scenario == sc)
                    .map(|(r, _)| r)
                    .collect();
                if part.is_empty() {
                    continue;
                }
                let labels = [("predictor", name.to_owned()), ("scenario", sc.name().to_owned())];
                rows.push(ReportRow::new(&labels, "mse", mse_of(part.iter().copied())));
                rows.push(ReportRow::new(&labels, "matrices", part.len() as f64));
            }
            let labels = [("predictor", name.to_owned()), ("scenario", "all".to_owned())];
            rows.push(ReportRow::new(&labels, "mse", mse_of(&res)));
            rows.push(ReportRow::new(&labels, "matrices", res.len() as f64));
            Ok(rows)
        })
    }

    fn mask_sweep_rows(&self) -> Result<Vec<ReportRow>> {
        let xs = self.holdout_data();
        let (rows, cols) = (self.rows(), self.cols());
        let seed = self.settings.mask_seed;
        self.anchored(|p, name| {
            let mut out = Vec::new();
            for (k, &gamma) in self.settings.gamma_grid.iter().enumerate() {
                let scheme = MaskScheme::RatioSweep { masked_fraction: gamma };
                let mask = |i: usize| {
                    let s = derive_seed(seed, &[k as u64, i as u64]);
                    make_mask(&MaskSpec::new(scheme, s), rows, cols)
                };
                let res = self.residuals(p, &xs, &mask)?;
                out.push(ReportRow::new(
                    &[("predictor", name.into()), ("gamma", gamma.to_string())],
                    "mse",
                    mse_of(&res),
                ));
            }
            Ok(out)
        })
    }

    fn subcarrier_rows(&self) -> Result<Vec<ReportRow>> {
        let mask = self.every_k()?;
        let xs = self.holdout_data();
        let groups = subcarrier_groups(self.rows(), self.settings.group_size)?;
        self.anchored(|p, name| {
            let res = self.residuals(p, &xs, &|_| Ok(mask.clone()))?;
            let mut out = Vec::new();
            for &(s, e) in &groups {
                let blocks: Vec<Tensor> = res.iter().map(|r| row_block(r, s, e)).collect::<Result<_>>()?;
                let (_, n) = sse_count(&blocks);
                let labels = [("predictor", name.to_owned()), ("group", format!("{}-{}", s, e - 1))];
                out.push(ReportRow::new(&labels, "mse", mse_of(&blocks)));
                out.push(ReportRow::new(&labels, "elements", n as f64));
            }
            let (_, n) = sse_count(&res);
            let labels = [("predictor", name.to_owned()), ("group", "all".to_owned())];
            out.push(ReportRow::new(&labels, "mse", mse_of(&res)));
            out.push(ReportRow::new(&labels, "elements", n as f64));
            Ok(out)
        })
    }

    fn cross_scenario_rows(&self) -> Result<Vec<ReportRow>> {
        let mask = self.every_k()?;
        let mut out = Vec::new();
        let by_scenario: Vec<(ScenarioId, Vec<&Tensor>)> = ScenarioId::ALL
            .iter()
            .map(|&sc| {
                let xs = self
                    .holdout
                    .iter()
                    .filter(|f| f.scenario == sc)
                    .map(|f| &f.data)
                    .collect();
                (sc, xs)
            })
            .collect();
        for train_sc in ScenarioId::ALL {
            let idx = self.split.train_for(self.dataset, train_sc);
            if idx.is_empty() {
                continue;
            }
            let samples: Vec<Tensor> = features(self.dataset, &idx, self.train_config.norm_mode)?
                .into_iter()
                .map(|f| f.data)
                .collect();
            let mut model = Encoder::new(self.model.config, self.model.seed)?;
            train(&mut model, &samples, &self.train_config)?;
            for (test_sc, xs) in &by_scenario {
                if xs.is_empty() {
                    continue;
                }
                let res = self.residuals(&Predictor::Model(&model), xs, &|_| Ok(mask.clone()))?;
                out.push(ReportRow::new(
                    &[
                        ("predictor", "model".into()),
                        ("train", train_sc.name().into()),
                        ("test", test_sc.name().into()),
                    ],
                    "mse",
                    mse_of(&res),
                ));
            }
        }
        for (name, p) in [("perfect", Predictor::Perfect), ("zero", Predictor::Zero)] {
            for (test_sc, xs) in &by_scenario {
                if xs.is_empty() {
                    continue;
                }
                let res = self.residuals(&p, xs, &|_| Ok(mask.clone()))?;
                out.push(ReportRow::new(
                    &[("predictor", name.into()), ("test", test_sc.name().into())],
                    "mse",
                    mse_of(&res),
                ));
            }
        }
        Ok(out)
    }

    fn error_dist_rows(&self) -> Result<Vec<ReportRow>> {
        let mask = self.every_k()?;
        let xs = self.holdout_data();
        let groups = subcarrier_groups(self.rows(), self.settings.group_size)?;
        let group_name = |&(s, e): &(usize, usize)| format!("{}-{}", s, e - 1);
        let res = self.residuals(&Predictor::Model(self.model), &xs, &|_| Ok(mask.clone()))?;
        let values: Vec<Vec<f64>> = groups
            .iter()
            .map(|&(s, e)| {
                res.iter()
                    .flat_map(|r| row_block(r, s, e).map(Tensor::into_data).unwrap_or_default())
                    .collect()
            })
            .collect();
        let hist = error_histogram(&values, self.settings.n_bins)?;
        let mut out = Vec::new();
        for (i, e) in hist.edges.iter().enumerate() {
            out.push(ReportRow::new(&[("edge", i.to_string())], "bin_edge", *e));
        }
        for (g, counts) in groups.iter().zip(&hist.counts) {
            for (b, &c) in counts.iter().enumerate() {
                out.push(ReportRow::new(
                    &[("predictor", "model".into()), ("group", group_name(g)), ("bin", b.to_string())],
                    "count",
                    c as f64,
                ));
            }
        }
        out.extend(self.anchored(|p, name| {
            let res = self.residuals(p, &xs, &|_| Ok(mask.clone()))?;
            groups
                .iter()
                .map(|g| {
                    let blocks: Vec<Tensor> =
                        res.iter().map(|r| row_block(r, g.0, g.1)).collect::<Result<_>>()?;
                    Ok(ReportRow::new(
                        &[("predictor", name.into()), ("group", group_name(g))],
                        "mse",
                        mse_of(&blocks),
                    ))
                })
                .collect()
        })?);
        Ok(out)
    }

    fn doppler_rows(&self) -> Result<Vec<ReportRow>> {
        let mask = self.every_k()?;
        let snapshot = self.dataset.config.snapshot_time;
        let mode = self.train_config.norm_mode;
        let mut shifted = Vec::with_capacity(self.settings.doppler_grid.len());
        for &delta in &self.settings.doppler_grid {
            let xs: Vec<Tensor> = self
                .split
                .holdout
                .par_iter()
                .map(|&i| {
                    let h = apply_doppler_rotation(&self.dataset.tensors[i], delta, snapshot);
                    FeatureMatrix::from_csi(&h, mode).map(|f| f.data)
                })
                .collect::<Result<_>>()?;
            shifted.push((delta, xs));
        }
        self.anchored(|p, name| {
            shifted
                .iter()
                .map(|(delta, xs)| {
                    let refs: Vec<&Tensor> = xs.iter().collect();
                    let res = self.residuals(p, &refs, &|_| Ok(mask.clone()))?;
                    Ok(ReportRow::new(
                        &[("predictor", name.into()), ("doppler_hz", delta.to_string())],
                        "mse",
                        mse_of(&res),
                    ))
                })
                .collect()
        })
    }

    fn baseline_rows(&self) -> Result<Vec<ReportRow>> {
        let mask = self.every_k()?;
        let xs = self.holdout_data();
        let cfg = &self.train_config;
        let samples: Vec<Tensor> = features(self.dataset, &self.split.train, cfg.norm_mode)?
            .into_iter()
            .map(|f| f.data)
            .collect();
        let (rows, cols) = (self.rows(), self.cols());
        let max_len = self.model.config.max_len;

        let mut transformer = Encoder::new(self.model.config, self.model.seed)?;
        train(&mut transformer, &samples, cfg)?;

        let mut inputs = Vec::with_capacity(samples.len() * rows * cols);
        for (i, x) in samples.iter().enumerate() {
            inputs.extend(apply_mask(x, &cfg.mask_for(i, 0, rows, cols)?)?.into_data());
        }
        let n = samples.len();
        let x_in = Tensor::new(&[n, rows * cols], inputs)?;
        let y = Tensor::new(
            &[n, rows * cols],
            samples.iter().flat_map(|s| s.data().iter().copied()).collect(),
        )?;
        let linreg = PaddedLinReg {
            model: LinRegModel::fit(&x_in, &y, self.settings.ridge_lambda, RidgeForm::Auto, rows)?,
            max_len,
        };

        let mut mlp = MlpModel::new(
            MlpConfig {
                rows,
                feature_dim: cols,
                hidden: self.settings.mlp_hidden,
                max_len,
            },
            self.model.seed,
        )?;
        train(&mut mlp, &samples, cfg)?;

        let predictors: [(&str, Predictor); 5] = [
            ("transformer", Predictor::Model(&transformer)),
            ("linear-regression", Predictor::Model(&linreg)),
            ("mlp", Predictor::Model(&mlp)),
            ("perfect", Predictor::Perfect),
            ("zero", Predictor::Zero),
        ];
        predictors
            .iter()
            .map(|(name, p)| {
                let res = self.residuals(p, &xs, &|_| Ok(mask.clone()))?;
                Ok(ReportRow::new(&[("predictor", (*name).into())], "mse", mse_of(&res)))
            })
            .collect()
    }
}

fn paper_reference(exp: Experiment) -> Vec<ReportRow> {
    let row = |labels: &[(&str, &str)], v: f64| {
        let owned: Vec<(&str, String)> = labels.iter().map(|(k, v)| (*k, (*v).to_owned())).collect();
        ReportRow::new(&owned, "mse", v)
    };
    match exp {
        Experiment::Reconstruction => vec![row(&[], 0.011035)],
        Experiment::Scenario => vec![
            row(&[("scenario", "stationary")], 0.003185),
            row(&[("scenario", "high-speed")], 0.003179),
            row(&[("scenario", "urban-macro")], 0.026609),
        ],
        Experiment::MaskSweep => vec![row(&[("gamma", "0.5")], 0.01103)],
        Experiment::Subcarrier | Experiment::ErrorDist => [
            ("0-7", 0.012956),
            ("8-15", 0.075252),
            ("16-23", 0.074781),
            ("24-31", 0.075120),
            ("32-39", 0.076423),
            ("40-47", 0.077504),
            ("48-55", 0.079439),
            ("56-63", 0.080906),
        ]
        .iter()
        .map(|(g, v)| row(&[("group", g)], *v))
        .collect(),
        Experiment::CrossScenario => {
            let names = ["stationary", "high-speed", "urban-macro"];
            let values = [
                [0.003185, 0.003182, 0.026610],
                [0.003185, 0.003182, 0.026611],
                [0.003185, 0.003182, 0.026611],
            ];
            let mut out = Vec::new();
            for (i, tr) in names.iter().enumerate() {
                for (j, te) in names.iter().enumerate() {
                    out.push(row(&[("train", tr), ("test", te)], values[i][j]));
                }
            }
            out
        }
        Experiment::Doppler => vec![
            row(&[("doppler_hz", "0")], 0.011037),
            row(&[("doppler_hz", "400")], 0.011043),
        ],
        Experiment::Baselines => vec![
            row(&[("predictor", "transformer")], 0.011035),
            row(&[("predictor", "linear-regression")], 0.309207),
            row(&[("predictor", "mlp")], 0.314465),
        ],
    }
}

/// Checks that every trained-model MSE lies between its perfect and zero
/// anchors, allowing `slack` relative excess over the zero anchor.
pub fn check_anchors(report: &ExperimentReport, slack: f64) -> std::result::Result<usize, String> {
    let key = |r: &ReportRow| -> BTreeMap<String, String> {
        r.labels
            .iter()
            .filter(|(k, _)| k.as_str() != "predictor" && k.as_str() != "train")
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    };
    let anchor = |name: &str, k: &BTreeMap<String, String>| {
        report
            .rows_with("mse")
            .find(|r| r.label("predictor") == Some(name) && &key(r) == k)
            .map(|r| r.value)
    };
    let mut checked = 0;
    for r in report.rows_with("mse") {
        let p = r.label("predictor").unwrap_or("");
        if p == "perfect" || p == "zero" {
            continue;
        }
        let k = key(r);
        let (Some(lo), Some(hi)) = (anchor("perfect", &k), anchor("zero", &k)) else {
            return Err(format!("{}: no anchors for {}", report.experiment, r.label_string()));
        };
        if !(r.value >= lo && r.value <= hi * (1.0 + slack)) {
            return Err(format!(
                "{}: {} = {} outside [{lo}, {}]",
                report.experiment,
                r.label_string(),
                r.value,
                hi * (1.0 + slack)
            ));
        }
        checked += 1;
    }
    Ok(checked)
}

/// Largest gap between the element-weighted mean of group MSEs and the overall
/// MSE, per predictor, in a subcarrier report.
pub fn partition_gap(report: &ExperimentReport) -> Result<f64> {
    let mut worst = 0.0_f64;
    for p in ["model", "perfect", "zero"] {
        let overall = report
            .find("mse", &[("predictor", p), ("group", "all")])
            .ok_or_else(|| Error::format("report", format!("no overall row for {p}")))?
            .value;
        let mut num = 0.0;
        let mut den = 0.0;
        for r in report.rows_with("mse") {
            let g = r.label("group").unwrap_or("all");
            if r.label("predictor") != Some(p) || g == "all" {
                continue;
            }
            let n = report
                .find("elements", &[("predictor", p), ("group", g)])
                .ok_or_else(|| Error::format("report", format!("no element count for {g}")))?
                .value;
            num += n * r.value;
            den += n;
        }
        worst = worst.max((num / den - overall).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_dataset, DatasetConfig};
    use crate::model::ModelConfig;

    fn fixture() -> (Dataset, Encoder, TrainConfig) {
        let ds = generate_dataset(&DatasetConfig {
            cells: 1,
            ues_per_cell: 6,
            n_subcarriers: 12,
            n_tx: 2,
            n_rx: 1,
            seed: 5,
            ..DatasetConfig::desk()
        })
        .unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            max_len: 14,
            feature_dim: 4,
            plain_head: false,
        };
        let mut model = Encoder::new(cfg, 1).unwrap();
        let train_cfg = TrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::desk(1)
        };
        let split = split_indices(&ds, HOLDOUT_FRACTION, 1);
        let samples: Vec<Tensor> = features(&ds, &split.train, train_cfg.norm_mode)
            .unwrap()
            .into_iter()
            .map(|f| f.data)
            .collect();
        train(&mut model, &samples, &train_cfg).unwrap();
        (ds, model, train_cfg)
    }

    fn settings() -> EvalSettings {
        EvalSettings {
            group_size: 5,
            n_bins: 10,
            mlp_hidden: 8,
            ..EvalSettings::new(1)
        }
    }

    #[test]
    fn names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        let err = "nope".parse::<Experiment>().unwrap_err().to_string();
        assert!(err.contains("mask-sweep"), "{err}");
    }

    #[test]
    fn groups_cover_rows() {
        assert_eq!(subcarrier_groups(64, 8).unwrap().len(), 8);
        assert_eq!(subcarrier_groups(12, 5).unwrap(), vec![(0, 5), (5, 10), (10, 12)]);
        assert!(subcarrier_groups(4, 0).is_err());
    }

    #[test]
    fn histogram_of_zero_residuals_is_one_bin() {
        let h = error_histogram(&[vec![0.0; 7], vec![0.0; 3]], 50).unwrap();
        assert_eq!(h.edges.len(), 51);
        assert_eq!(h.counts[0][25], 7);
        assert_eq!(h.counts[1][25], 3);
        assert_eq!(h.counts.iter().flatten().sum::<u64>(), 10);
    }

    #[test]
    fn histogram_edges_are_symmetric() {
        let h = error_histogram(&[vec![-2.0, 0.5, 2.0]], 4).unwrap();
        assert_eq!(h.edges, vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert_eq!(h.counts[0], vec![1, 0, 1, 1]);
    }

    #[test]
    fn anchors_reject_out_of_range() {
        let row = |p: &str, v| ReportRow::new(&[("predictor", p.to_owned())], "mse", v);
        let mut report = ExperimentReport {
            report_version: REPORT_VERSION,
            experiment: "reconstruction".into(),
            config: serde_json::Value::Null,
            rows: vec![row("model", 0.5), row("perfect", 0.0), row("zero", 1.0)],
            paper_reference: vec![],
            fingerprint: Fingerprint {
                seed: 0,
                toolkit_version: "0".into(),
            },
            train_indices: vec![],
            holdout_indices: vec![],
        };
        assert_eq!(check_anchors(&report, 0.1), Ok(1));
        report.rows[0].value = 1.2;
        assert!(check_anchors(&report, 0.1).is_err());
    }

    #[test]
    fn full_suite() {
        let (ds, model, cfg) = fixture();
        let suite = Suite::new(&ds, &model, cfg, settings()).unwrap();
        let reports = suite.run_all().unwrap();
        assert_eq!(reports.len(), 8);
        for r in &reports {
            check_anchors(r, 0.1).unwrap();
            for row in r.rows_with("mse").filter(|x| x.label("predictor") == Some("perfect")) {
                assert_eq!(row.value, 0.0, "{}", row.label_string());
            }
            let back = ExperimentReport::from_json(&r.to_json().unwrap()).unwrap();
            assert_eq!(&back, r);
            let csv = r.to_csv().unwrap();
            assert_eq!(csv.lines().count(), r.rows.len() + 1);
            let svg = r.to_svg();
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        }
        let by_name = |n: &str| reports.iter().find(|r| r.experiment == n).unwrap();

        assert!(partition_gap(by_name("subcarrier")).unwrap() < 1e-9);

        let zero = by_name("reconstruction")
            .find("mse", &[("predictor", "zero")])
            .unwrap()
            .value;
        // Z-scored features have unit mean square.
        assert!((zero - 1.0).abs() < 1e-9, "{zero}");

        let cross = by_name("cross-scenario");
        assert_eq!(
            cross.rows_with("mse").filter(|r| r.label("predictor") == Some("model")).count(),
            9
        );

        let hist = by_name("error-dist");
        let counted: f64 = hist.rows_with("count").map(|r| r.value).sum();
        let held = suite.split.holdout.len() * 12 * 4;
        assert_eq!(counted as usize, held);

        let base = by_name("baselines");
        for p in ["transformer", "linear-regression", "mlp", "zero", "perfect"] {
            assert!(base.find("mse", &[("predictor", p)]).is_some(), "{p}");
        }
        // The baseline transformer is retrained with the same config and seed.
        let recon = by_name("reconstruction").find("mse", &[("predictor", "model")]).unwrap().value;
        let again = base.find("mse", &[("predictor", "transformer")]).unwrap().value;
        assert_eq!(recon, again);
    }

    #[test]
    fn doppler_zero_matches_reconstruction() {
        let (ds, model, cfg) = fixture();
        let suite = Suite::new(&ds, &model, cfg, settings()).unwrap();
        let a = suite.run(Experiment::Reconstruction).unwrap();
        let b = suite.run(Experiment::Doppler).unwrap();
        let r = a.find("mse", &[("predictor", "model")]).unwrap().value;
        let d = b.find("mse", &[("predictor", "model"), ("doppler_hz", "0")]).unwrap().value;
        assert_eq!(r, d);
    }

    #[test]
    fn emitted_files_load_back() {
        let (ds, model, cfg) = fixture();
        let suite = Suite::new(&ds, &model, cfg, settings()).unwrap();
        let report = suite.run(Experiment::Scenario).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let [json, csv, svg] = emit_report(&report, dir.path()).unwrap();
        assert!(csv.exists() && svg.exists());
        assert_eq!(load_report(&json).unwrap(), report);
    }
}
