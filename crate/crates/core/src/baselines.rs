//! Comparison models on flattened CSI: ridge linear regression and a
//! one-hidden-layer MLP.

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::preprocess::AttentionMask;
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{Example, Reconstructor, Trainable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_RIDGE: f64 = 1e-8;
pub const DEFAULT_HIDDEN: usize = 512;

/// How the ridge normal equations are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RidgeForm {
    /// Primal when there are more samples than inputs, dual otherwise.
    #[default]
    Auto,
    /// `(A^T A + lambda I) W = A^T Y`, a `(D+1)`-square system.
    Primal,
    /// `W = A^T (A A^T + lambda I)^-1 Y`, an `N`-square system.
    Dual,
}

/// Affine map `y = [x, 1] W` with `W` of shape `[D_in + 1, D_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinRegModel {
    pub weights: Tensor,
    pub ridge_lambda: f64,
    /// Rows of one sample, used to reshape flat predictions.
    pub rows: usize,
}

/// Appends a column of ones.
fn augment(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let mut data = Vec::with_capacity(n * (d + 1));
    for i in 0..n {
        data.extend_from_slice(x.row(i));
        data.push(1.0);
    }
    Tensor::new(&[n, d + 1], data)
}

/// Solves `A X = B` for symmetric positive definite `A` by Cholesky factorization.
pub fn cholesky_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, n2) = a.dims2()?;
    let (bn, m) = b.dims2()?;
    if n != n2 || bn != n {
        return Err(Error::shape(
            "cholesky_solve",
            format!("{:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let mut l = vec![0.0; n * n];
    let a = a.data();
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::Degenerate(format!(
                "normal equations not positive definite at pivot {j}"
            )));
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    let mut x = b.data().to_vec();
    // forward: L z = b
    for i in 0..n {
        for k in 0..i {
            let f = l[i * n + k];
            if f != 0.0 {
                for c in 0..m {
                    x[i * m + c] -= f * x[k * m + c];
                }
            }
        }
        let d = l[i * n + i];
        for c in 0..m {
            x[i * m + c] /= d;
        }
    }
    // back: L^T x = z
    for i in (0..n).rev() {
        for k in i + 1..n {
            let f = l[k * n + i];
            if f != 0.0 {
                for c in 0..m {
                    x[i * m + c] -= f * x[k * m + c];
                }
            }
        }
        let d = l[i * n + i];
        for c in 0..m {
            x[i * m + c] /= d;
        }
    }
    Tensor::new(&[n, m], x)
}

fn add_diagonal(a: &mut Tensor, lambda: f64) {
    let n = a.shape()[0];
    let data = a.data_mut();
    for i in 0..n {
        data[i * n + i] += lambda;
    }
}

impl LinRegModel {
    /// Ridge least squares from `x` `[N, D_in]` to `y` `[N, D_out]`.
    pub fn fit(x: &Tensor, y: &Tensor, lambda: f64, form: RidgeForm, rows: usize) -> Result<Self> {
        let (n, _) = x.dims2()?;
        let (ny, _) = y.dims2()?;
        if n == 0 || n != ny {
            return Err(Error::shape("linreg_fit", format!("{n} inputs vs {ny} targets")));
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Domain("linear regression inputs must be finite".into()));
        }
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!("ridge lambda {lambda} must be non-negative")));
        }
        let a = augment(x)?;
        let at = a.transpose()?;
        let dual = match form {
            RidgeForm::Auto => n < a.shape()[1],
            RidgeForm::Primal => false,
            RidgeForm::Dual => true,
        };
        let weights = if dual {
            let mut gram = a.matmul(&at)?;
            add_diagonal(&mut gram, lambda);
            at.matmul(&cholesky_solve(&gram, y)?)?
        } else {
            let mut gram = at.matmul(&a)?;
            add_diagonal(&mut gram, lambda);
            cholesky_solve(&gram, &at.matmul(y)?)?
        };
        Ok(Self {
            weights,
            ridge_lambda: lambda,
            rows,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        augment(x)?.matmul(&self.weights)
    }

    /// `A^T A W - A^T Y + lambda W`, zero at the exact optimum.
    pub fn normal_residual(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let a = augment(x)?;
        let at = a.transpose()?;
        at.matmul(&a.matmul(&self.weights)?)?
            .sub(&at.matmul(y)?)?
            .add(&self.weights.scale(self.ridge_lambda))
    }

    pub fn to_archive(&self) -> TensorArchive {
        TensorArchive {
            kind: "linreg".into(),
            metadata: serde_json::json!({ "ridge_lambda": self.ridge_lambda, "rows": self.rows }),
            tensors: vec![("weights".into(), self.weights.clone())],
        }
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        if a.kind != "linreg" {
            return Err(Error::format("checkpoint", format!("expected linreg, found {:?}", a.kind)));
        }
        let weights = a
            .get("weights")
            .ok_or_else(|| Error::format("checkpoint", "missing weights"))?
            .clone();
        Ok(Self {
            weights,
            ridge_lambda: a.metadata["ridge_lambda"].as_f64().unwrap_or(DEFAULT_RIDGE),
            rows: a.metadata["rows"]
                .as_u64()
                .ok_or_else(|| Error::format("checkpoint", "missing rows"))? as usize,
        })
    }
}

/// Flattens the valid prefix of a padded `[max_len, d]` input to one row.
fn flatten_valid(input: &Tensor, attn: &AttentionMask, rows: usize) -> Result<Tensor> {
    let (_, d) = input.dims2()?;
    let n = attn.n_valid();
    if n != rows {
        return Err(Error::shape(
            "baseline",
            format!("{n} valid rows, model expects {rows}"),
        ));
    }
    Tensor::new(&[1, rows * d], input.data()[..rows * d].to_vec())
}

fn unflatten_padded(flat: &Tensor, rows: usize, max_len: usize) -> Result<Tensor> {
    let d = flat.len() / rows;
    let mut data = flat.data().to_vec();
    data.resize(max_len * d, 0.0);
    Tensor::new(&[max_len, d], data)
}

/// Linear regression applied to padded inputs whose valid length equals `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedLinReg {
    pub model: LinRegModel,
    pub max_len: usize,
}

impl Reconstructor for PaddedLinReg {
    fn max_len(&self) -> usize {
        self.max_len
    }

    fn reconstruct(&self, input: &Tensor, attn: &AttentionMask) -> Result<Tensor> {
        let flat = flatten_valid(input, attn, self.model.rows)?;
        unflatten_padded(&self.model.predict(&flat)?, self.model.rows, self.max_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub rows: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub max_len: usize,
}

impl MlpConfig {
    pub fn input_dim(&self) -> usize {
        self.rows * self.feature_dim
    }
}

/// `y = relu(x W1 + b1) W2 + b2` on the flattened sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub config: MlpConfig,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub seed: u64,
}

impl MlpModel {
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        let d = config.input_dim();
        if d == 0 || config.hidden == 0 || config.max_len < config.rows {
            return Err(Error::Config(format!("invalid MLP configuration {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| {
            let b = 1.0 / (rows as f64).sqrt();
            Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-b..=b)).collect())
        };
        Ok(Self {
            w1: uniform(d, config.hidden)?,
            b1: Tensor::zeros(&[config.hidden]),
            w2: uniform(config.hidden, d)?,
            b2: Tensor::zeros(&[d]),
            config,
            seed,
        })
    }

    /// Prediction for flat inputs `[N, D]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(&self.w1)?.add_row_vector(&self.b1)?.map(crate::tensor::relu);
        h.matmul(&self.w2)?.add_row_vector(&self.b2)
    }

    pub fn to_archive(&self) -> TensorArchive {
        TensorArchive {
            kind: "mlp".into(),
            metadata: serde_json::json!({ "config": self.config, "seed": self.seed }),
            tensors: vec![
                ("w1".into(), self.w1.clone()),
                ("b1".into(), self.b1.clone()),
                ("w2".into(), self.w2.clone()),
                ("b2".into(), self.b2.clone()),
            ],
        }
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let bad = |d: String| Error::format("checkpoint", d);
        if a.kind != "mlp" {
            return Err(bad(format!("expected mlp, found {:?}", a.kind)));
        }
        let config: MlpConfig = serde_json::from_value(a.metadata["config"].clone())
            .map_err(|e| bad(format!("config: {e}")))?;
        let seed = a.metadata["seed"].as_u64().ok_or_else(|| bad("missing seed".into()))?;
        let mut m = Self::new(config, seed)?;
        for (name, slot) in [("w1", &mut m.w1), ("b1", &mut m.b1), ("w2", &mut m.w2), ("b2", &mut m.b2)] {
            let t = a.get(name).ok_or_else(|| bad(format!("missing {name}")))?;
            if t.shape() != slot.shape() {
                return Err(bad(format!("{name}: shape {:?}", t.shape())));
            }
            *slot = t.clone();
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }
}

impl Reconstructor for MlpModel {
    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn reconstruct(&self, input: &Tensor, attn: &AttentionMask) -> Result<Tensor> {
        let flat = flatten_valid(input, attn, self.config.rows)?;
        unflatten_padded(&self.predict(&flat)?, self.config.rows, self.config.max_len)
    }
}

impl Trainable for MlpModel {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn record(&self, tape: &mut Tape, params: &[Var], input: Var, attn: &AttentionMask) -> Result<Var> {
        let &[w1, b1, w2, b2] = params else {
            return Err(Error::shape("mlp.record", format!("{} parameter vars", params.len())));
        };
        let (rows, d) = (self.config.rows, self.config.feature_dim);
        let max_len = self.config.max_len;
        if attn.n_valid() != rows || tape.value(input).shape() != [max_len, d] {
            return Err(Error::shape(
                "mlp.record",
                format!("input {:?} with {} valid rows", tape.value(input).shape(), attn.n_valid()),
            ));
        }
        // Padding rows are zero and the valid rows form a prefix, so flattening the
        // whole padded input and dropping the padded tail is a matmul with a selector.
        let flat = if rows == max_len {
            tape.reshape(input, &[1, rows * d])?
        } else {
            let mut sel = Tensor::zeros(&[rows, max_len]);
            for i in 0..rows {
                sel.data_mut()[i * max_len + i] = 1.0;
            }
            let sel = tape.leaf(sel);
            let valid = tape.matmul(sel, input)?;
            tape.reshape(valid, &[1, rows * d])?
        };
        let h = tape.matmul(flat, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.relu(h);
        let y = tape.matmul(h, w2)?;
        let y = tape.add_row_bias(y, b2)?;
        let y = tape.reshape(y, &[rows, d])?;
        if rows == max_len {
            return Ok(y);
        }
        let mut pad = Tensor::zeros(&[max_len, rows]);
        for i in 0..rows {
            pad.data_mut()[i * rows + i] = 1.0;
        }
        let pad = tape.leaf(pad);
        tape.matmul(pad, y)
    }

    /// Stacks the batch into one `[B, D]` pass.
    fn batch_gradient(&self, examples: &[Example]) -> Result<(Vec<f64>, Vec<Tensor>)> {
        let b = examples.len();
        let dim = self.config.input_dim();
        let mut input = Vec::with_capacity(b * dim);
        let mut target = Vec::with_capacity(b * dim);
        let mut scope = Vec::with_capacity(b * dim);
        for ex in examples {
            input.extend_from_slice(flatten_valid(&ex.input, &ex.attn, self.config.rows)?.data());
            target.extend_from_slice(&ex.target.data()[..dim]);
            scope.extend_from_slice(&ex.scope.data()[..dim]);
        }
        let mut tape = Tape::new();
        let params = self.parameters();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf((*p).clone())).collect();
        let x = tape.leaf(Tensor::new(&[b, dim], input)?);
        let h = tape.matmul(x, vars[0])?;
        let h = tape.add_row_bias(h, vars[1])?;
        let h = tape.relu(h);
        let y = tape.matmul(h, vars[2])?;
        let y = tape.add_row_bias(y, vars[3])?;
        let t = tape.leaf(Tensor::new(&[b, dim], target)?);
        let s = tape.leaf(Tensor::new(&[b, dim], scope)?);
        let diff = tape.sub(y, t)?;
        let diff = tape.mul(diff, s)?;
        let sq = tape.square(diff);
        let losses = (0..b).map(|i| tape.value(sq).row(i).iter().sum()).collect();
        let total = tape.sum_all(sq);
        let mut grads = tape.backward(total)?;
        let g = vars.iter().zip(&params).map(|(&v, p)| grads.take_or_zeros(v, p)).collect();
        Ok((losses, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[rows, cols], (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
            .unwrap()
    }

    #[test]
    fn exact_linear_recovery() {
        let x = random(20, 3, 1);
        let y = x.scale(2.0);
        let m = LinRegModel::fit(&x, &y, 0.0, RidgeForm::Primal, 1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 2.0 } else { 0.0 };
                assert!((m.weights.at(i, j) - expect).abs() < 1e-8);
            }
        }
        for j in 0..3 {
            assert!(m.weights.at(3, j).abs() < 1e-8);
        }
        let pred = m.predict(&x).unwrap();
        assert!(pred.sub(&y).unwrap().max_abs() < 1e-6);
        let r = m.normal_residual(&x, &y).unwrap();
        assert!(r.max_abs() < 1e-6 * y.max_abs());
    }

    /// Minimum-norm least squares via Gauss-Jordan inversion of `A A^T`.
    fn pinv_oracle(x: &Tensor, y: &Tensor) -> Tensor {
        let a = augment(x).unwrap();
        let gram = a.matmul(&a.transpose().unwrap()).unwrap();
        let n = gram.shape()[0];
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = gram.row(i).to_vec();
                r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for c in 0..n {
            let p = (c..n).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
            m.swap(c, p);
            let piv = m[c][c];
            for v in m[c].iter_mut() {
                *v /= piv;
            }
            for r in 0..n {
                if r != c {
                    let f = m[r][c];
                    let pivot_row = m[c].clone();
                    for (v, pv) in m[r].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        let inv = Tensor::from_rows(&m.iter().map(|r| r[n..].to_vec()).collect::<Vec<_>>()).unwrap();
        a.transpose().unwrap().matmul(&inv).unwrap().matmul(y).unwrap()
    }

    #[test]
    fn underdetermined_matches_pseudo_inverse() {
        let x = random(6, 10, 2);
        let y = random(6, 4, 3);
        let oracle = pinv_oracle(&x, &y);
        for form in [RidgeForm::Auto, RidgeForm::Dual] {
            let m = LinRegModel::fit(&x, &y, 1e-12, form, 1).unwrap();
            assert!(m.weights.sub(&oracle).unwrap().max_abs() < 1e-6);
        }
    }

    #[test]
    fn primal_and_dual_agree_with_ridge() {
        let x = random(8, 5, 4);
        let y = random(8, 5, 5);
        let p = LinRegModel::fit(&x, &y, 0.3, RidgeForm::Primal, 1).unwrap();
        let d = LinRegModel::fit(&x, &y, 0.3, RidgeForm::Dual, 1).unwrap();
        assert!(p.weights.sub(&d.weights).unwrap().max_abs() < 1e-10);
        assert!(p.normal_residual(&x, &y).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn large_ridge_shrinks_to_zero() {
        let x = random(10, 3, 6);
        let y = random(10, 3, 7);
        let m = LinRegModel::fit(&x, &y, 1e12, RidgeForm::Auto, 1).unwrap();
        assert!(m.weights.max_abs() < 1e-9);
    }

    #[test]
    fn first_order_optimality() {
        let x = random(30, 4, 8);
        let y = random(30, 4, 9);
        let m = LinRegModel::fit(&x, &y, DEFAULT_RIDGE, RidgeForm::Auto, 1).unwrap();
        let loss = |w: &Tensor| augment(&x).unwrap().matmul(w).unwrap().sub(&y).unwrap().sum_squares();
        let base = loss(&m.weights);
        for k in 0..m.weights.len() {
            for delta in [1e-3, -1e-3] {
                let mut w = m.weights.clone();
                w.data_mut()[k] += delta;
                assert!(loss(&w) >= base);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let x = random(3, 2, 1);
        let mut bad = x.clone();
        bad.data_mut()[0] = f64::NAN;
        assert!(LinRegModel::fit(&bad, &x, 1e-8, RidgeForm::Auto, 1).is_err());
        assert!(LinRegModel::fit(&x, &random(4, 2, 1), 1e-8, RidgeForm::Auto, 1).is_err());
    }

    #[test]
    fn mlp_zero_output_weights_predict_bias() {
        let cfg = MlpConfig {
            rows: 2,
            feature_dim: 3,
            hidden: 8,
            max_len: 4,
        };
        let mut m = MlpModel::new(cfg, 1).unwrap();
        m.w2 = Tensor::zeros(m.w2.shape());
        m.b2 = Tensor::new(&[6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = m.predict(&random(3, 6, 2)).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), m.b2.data());
        }
    }

    #[test]
    fn mlp_tape_matches_direct_prediction() {
        let cfg = MlpConfig {
            rows: 3,
            feature_dim: 2,
            hidden: 5,
            max_len: 4,
        };
        let m = MlpModel::new(cfg, 3).unwrap();
        let (input, attn) =
            crate::preprocess::pad_and_attention_mask(&random(3, 2, 4), 4).unwrap();
        let direct = m.reconstruct(&input, &attn).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = m.parameters().iter().map(|p| tape.leaf((*p).clone())).collect();
        let iv = tape.leaf(input);
        let out = m.record(&mut tape, &vars, iv, &attn).unwrap();
        assert!(tape.value(out).sub(&direct).unwrap().max_abs() < 1e-12);
        assert_eq!(direct.row(3), &[0.0, 0.0]);
    }

    #[test]
    fn batched_gradient_matches_per_sample() {
        use crate::preprocess::{make_mask, MaskScheme, MaskSpec};
        use crate::training::{sample_gradient, LossScope};
        let cfg = MlpConfig {
            rows: 3,
            feature_dim: 2,
            hidden: 5,
            max_len: 4,
        };
        let m = MlpModel::new(cfg, 3).unwrap();
        let mask = make_mask(&MaskSpec::new(MaskScheme::EveryKth { k: 2 }, 0), 3, 2).unwrap();
        let examples: Vec<Example> = (0..3)
            .map(|i| Example::new(&random(3, 2, 10 + i), &mask, 4, LossScope::AllPositions).unwrap())
            .collect();
        let (losses, grads) = m.batch_gradient(&examples).unwrap();
        let mut expect: Vec<Tensor> = m.parameters().iter().map(|p| Tensor::zeros(p.shape())).collect();
        for (ex, l) in examples.iter().zip(&losses) {
            let (l1, g1) = sample_gradient(&m, ex).unwrap();
            assert!((l1 - l).abs() < 1e-12);
            for (a, b) in expect.iter_mut().zip(&g1) {
                a.add_assign(b).unwrap();
            }
        }
        for (a, b) in expect.iter().zip(&grads) {
            assert!(a.sub(b).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoints_round_trip() {
        let x = random(5, 2, 1);
        let lr = LinRegModel::fit(&x, &x, 1e-8, RidgeForm::Auto, 1).unwrap();
        assert_eq!(LinRegModel::from_archive(&lr.to_archive()).unwrap(), lr);
        let m = MlpModel::new(
            MlpConfig {
                rows: 1,
                feature_dim: 2,
                hidden: 3,
                max_len: 1,
            },
            5,
        )
        .unwrap();
        assert_eq!(MlpModel::from_archive(&m.to_archive()).unwrap(), m);
    }
}
