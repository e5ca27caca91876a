//! Masked-CSI reconstruction encoder.
//!
//! Input rows (one per subcarrier) are projected into the model width and
//! added to a learned position embedding, passed through post-LN transformer
//! layers, and mapped back to the feature width by the reconstruction head.

mod weights;

pub use weights::{AttentionWeights, HeadWeights, IntermediateWeights, LayerWeights, Weights};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::preprocess::AttentionMask;
use crate::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub type ModelParams = Weights<Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Sequence length after padding.
    pub max_len: usize,
    /// Width of one input row.
    pub feature_dim: usize,
    /// Use a single affine output map instead of dense + GELU + LayerNorm + affine.
    #[serde(default)]
    pub plain_head: bool,
}

impl ModelConfig {
    pub fn desk(feature_dim: usize, max_len: usize) -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len,
            feature_dim,
            plain_head: false,
        }
    }

    /// 12 layers of 12 heads at BERT-base width.
    pub fn paper(feature_dim: usize, max_len: usize) -> Self {
        Self {
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ff: 3072,
            max_len,
            feature_dim,
            plain_head: false,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Number of scalar parameters implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        init_params(self, 0)
            .map(|p| p.named().iter().map(|(_, t)| t.len()).sum())
            .unwrap_or(0)
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(&[rows, cols], data).expect("positive dims")
}

/// Fresh parameters: weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero
/// biases, unit LayerNorm gains and a `N(0, 0.02^2)` position embedding.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dm, dk, dff, d) = (config.d_model, config.d_k(), config.d_ff, config.feature_dim);
    let normal = Normal::new(0.0, 0.02).map_err(|e| Error::Config(e.to_string()))?;
    let time_embedding = Tensor::new(
        &[config.max_len, dm],
        (0..config.max_len * dm).map(|_| normal.sample(&mut rng)).collect(),
    )?;
    let feature_weight = uniform(&mut rng, d, dm);
    let layers = (0..config.n_layers)
        .map(|_| {
            let heads = |rng: &mut ChaCha8Rng| -> Vec<Tensor> {
                (0..config.n_heads).map(|_| uniform(rng, dm, dk)).collect()
            };
            let query = heads(&mut rng);
            let key = heads(&mut rng);
            let value = heads(&mut rng);
            LayerWeights {
                attn: AttentionWeights {
                    query,
                    key,
                    value,
                    output: uniform(&mut rng, dm, dm),
                },
                ln1_gain: Tensor::ones(&[dm]),
                ln1_bias: Tensor::zeros(&[dm]),
                ff_w1: uniform(&mut rng, dm, dff),
                ff_b1: Tensor::zeros(&[dff]),
                ff_w2: uniform(&mut rng, dff, dm),
                ff_b2: Tensor::zeros(&[dm]),
                ln2_gain: Tensor::ones(&[dm]),
                ln2_bias: Tensor::zeros(&[dm]),
            }
        })
        .collect();
    let intermediate = (!config.plain_head).then(|| IntermediateWeights {
        weight: uniform(&mut rng, dm, dm),
        bias: Tensor::zeros(&[dm]),
        ln_gain: Tensor::ones(&[dm]),
        ln_bias: Tensor::zeros(&[dm]),
    });
    let head = HeadWeights {
        intermediate,
        out_weight: uniform(&mut rng, dm, d),
        out_bias: Tensor::zeros(&[d]),
    };
    Ok(Weights {
        time_embedding,
        feature_weight,
        feature_bias: Tensor::zeros(&[dm]),
        layers,
        head,
    })
}

/// `Z_0 = E_time + x W_feature + b_feature`.
pub fn embed(tape: &mut Tape, w: &Weights<Var>, x: Var) -> Result<Var> {
    let projected = tape.matmul(x, w.feature_weight)?;
    let projected = tape.add_row_bias(projected, w.feature_bias)?;
    tape.add(w.time_embedding, projected)
}

/// Multi-head scaled dot-product self-attention with padded keys masked out.
pub fn mhsa(tape: &mut Tape, w: &AttentionWeights<Var>, z: Var, attn: &AttentionMask) -> Result<Var> {
    if attn.n_valid() == 0 {
        return Err(Error::Degenerate("attention over an all-padding sequence".into()));
    }
    let mut heads = Vec::with_capacity(w.query.len());
    for ((&wq, &wk), &wv) in w.query.iter().zip(&w.key).zip(&w.value) {
        let q = tape.matmul(z, wq)?;
        let k = tape.matmul(z, wk)?;
        let v = tape.matmul(z, wv)?;
        let d_k = tape.value(q).dims2()?.1;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
        let weights = tape.softmax_rows(scores, Some(attn.as_slice()))?;
        heads.push(tape.matmul(weights, v)?);
    }
    let concat = tape.concat_cols(&heads)?;
    tape.matmul(concat, w.output)
}

/// Post-LN encoder layer: `Z = LN(Z + MHSA(Z))`, then `Z = LN(Z + FFN(Z))`.
pub fn encoder_layer(tape: &mut Tape, w: &LayerWeights<Var>, z: Var, attn: &AttentionMask) -> Result<Var> {
    let a = mhsa(tape, &w.attn, z, attn)?;
    let r1 = tape.add(z, a)?;
    let z1 = tape.layer_norm(r1, w.ln1_gain, w.ln1_bias, LAYER_NORM_EPS)?;
    let h = tape.matmul(z1, w.ff_w1)?;
    let h = tape.add_row_bias(h, w.ff_b1)?;
    let h = tape.relu(h);
    let f = tape.matmul(h, w.ff_w2)?;
    let f = tape.add_row_bias(f, w.ff_b2)?;
    let r2 = tape.add(z1, f)?;
    tape.layer_norm(r2, w.ln2_gain, w.ln2_bias, LAYER_NORM_EPS)
}

/// Reconstruction head back to the feature width.
pub fn head(tape: &mut Tape, w: &HeadWeights<Var>, z: Var) -> Result<Var> {
    let z = match &w.intermediate {
        Some(inter) => {
            let h = tape.matmul(z, inter.weight)?;
            let h = tape.add_row_bias(h, inter.bias)?;
            let h = tape.gelu(h);
            tape.layer_norm(h, inter.ln_gain, inter.ln_bias, LAYER_NORM_EPS)?
        }
        None => z,
    };
    let out = tape.matmul(z, w.out_weight)?;
    tape.add_row_bias(out, w.out_bias)
}

/// Full forward pass recorded on `tape`.
pub fn forward_on_tape(tape: &mut Tape, w: &Weights<Var>, x: Var, attn: &AttentionMask) -> Result<Var> {
    let mut z = embed(tape, w, x)?;
    for layer in &w.layers {
        z = encoder_layer(tape, layer, z, attn)?;
    }
    head(tape, &w.head, z)
}

/// A configured encoder together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Seed the parameters were initialized from.
    pub seed: u64,
}

pub const CHECKPOINT_KIND: &str = "encoder";

impl Encoder {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: init_params(&config, seed)?,
            config,
            seed,
        })
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Weights<Var> {
        self.params.map(|_, t| tape.leaf(t.clone()))
    }

    fn check_input(&self, x: &Tensor, attn: &AttentionMask) -> Result<()> {
        let (rows, cols) = x.dims2()?;
        if rows != self.config.max_len || cols != self.config.feature_dim || attn.len() != rows {
            return Err(Error::shape(
                "forward",
                format!(
                    "input [{rows},{cols}] with mask of {} for model max_len {} feature_dim {}",
                    attn.len(),
                    self.config.max_len,
                    self.config.feature_dim
                ),
            ));
        }
        Ok(())
    }

    /// Reconstruction `[max_len, feature_dim]` for a padded masked input.
    pub fn forward(&self, x: &Tensor, attn: &AttentionMask) -> Result<Tensor> {
        self.check_input(x, attn)?;
        let mut tape = Tape::new();
        let w = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = forward_on_tape(&mut tape, &w, xv, attn)?;
        Ok(tape.value(out).clone())
    }

    /// Forward on `tape`, returning the output var and bound weights.
    pub fn forward_recorded(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        attn: &AttentionMask,
    ) -> Result<(Var, Weights<Var>)> {
        self.check_input(x, attn)?;
        let w = self.bind(tape);
        let xv = tape.leaf(x.clone());
        let out = forward_on_tape(tape, &w, xv, attn)?;
        Ok((out, w))
    }

    pub fn to_archive(&self, extra: serde_json::Value) -> TensorArchive {
        let metadata = serde_json::json!({
            "config": self.config,
            "seed": self.seed,
            "extra": extra,
        });
        TensorArchive {
            kind: CHECKPOINT_KIND.to_owned(),
            metadata,
            tensors: self
                .params
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        if archive.kind != CHECKPOINT_KIND {
            return Err(Error::format(
                "checkpoint",
                format!("expected kind {CHECKPOINT_KIND:?}, found {:?}", archive.kind),
            ));
        }
        let config: ModelConfig = serde_json::from_value(archive.metadata["config"].clone())
            .map_err(|e| Error::format("checkpoint", format!("config: {e}")))?;
        let seed = archive.metadata["seed"]
            .as_u64()
            .ok_or_else(|| Error::format("checkpoint", "missing seed"))?;
        let mut params = init_params(&config, seed)?;
        params.load_named(&archive.tensors)?;
        Ok(Self {
            config,
            params,
            seed,
        })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_archive(extra).write(path)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let archive = TensorArchive::read(path)?;
        let model = Self::from_archive(&archive)?;
        Ok((model, archive.metadata["extra"].clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};

    fn desk() -> ModelConfig {
        ModelConfig::desk(32, 16)
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let c = desk();
        let (dm, l, dff, d, lm) = (c.d_model, c.n_layers, c.d_ff, c.feature_dim, c.max_len);
        let per_layer = 3 * dm * dm + dm * dm + dm * dff + dff + dff * dm + dm + 4 * dm;
        let head = dm * dm + dm + 2 * dm + dm * d + d;
        let expected = lm * dm + d * dm + dm + l * per_layer + head;
        assert_eq!(expected, 75_936);
        assert_eq!(c.parameter_count(), expected);
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(&desk(), 3).unwrap();
        assert_eq!(a, init_params(&desk(), 3).unwrap());
        assert_ne!(a, init_params(&desk(), 4).unwrap());
        for layer in &a.layers {
            assert!(layer.ln1_gain.data().iter().all(|&g| g == 1.0));
            assert!(layer.ln2_gain.data().iter().all(|&g| g == 1.0));
        }
        let bound = 1.0 / (64f64).sqrt();
        assert!(a.layers[0].ff_w1.max_abs() <= bound);
    }

    #[test]
    fn invalid_config() {
        let mut c = desk();
        c.n_heads = 3;
        assert!(matches!(init_params(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_input_embeds_to_time_rows() {
        let m = Encoder::new(desk(), 1).unwrap();
        let mut tape = Tape::new();
        let w = m.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros(&[16, 32]));
        let z = embed(&mut tape, &w, x).unwrap();
        assert_eq!(tape.value(z), &m.params.time_embedding);
    }

    #[test]
    fn embedding_is_row_local() {
        let m = Encoder::new(desk(), 1).unwrap();
        let x = random_input(16, 32, 2);
        let mut y = x.clone();
        y.row_mut(5)[3] += 0.5;
        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let w = m.bind(&mut tape);
            let xv = tape.leaf(input.clone());
            let z = embed(&mut tape, &w, xv).unwrap();
            tape.value(z).clone()
        };
        let (a, b) = (run(&x), run(&y));
        assert_eq!(a.shape(), &[16, 64]);
        for i in 0..16 {
            assert_eq!(a.row(i) == b.row(i), i != 5);
        }
    }

    #[test]
    fn identical_values_attend_to_themselves() {
        // Identical value rows: any convex combination returns v, so output = v W_O.
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.5], vec![1.0, 0.5], vec![1.0, 0.5]]).unwrap());
        let wq = tape.leaf(Tensor::from_rows(&[vec![0.3, -0.2], vec![0.9, 0.4]]).unwrap());
        let wk = tape.leaf(Tensor::from_rows(&[vec![-0.7, 0.1], vec![0.2, 0.6]]).unwrap());
        let wv = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap());
        let wo_t = Tensor::from_rows(&[vec![0.5, 1.0], vec![2.0, -1.0]]).unwrap();
        let wo = tape.leaf(wo_t.clone());
        let w = AttentionWeights {
            query: vec![wq],
            key: vec![wk],
            value: vec![wv],
            output: wo,
        };
        let out = mhsa(&mut tape, &w, z, &AttentionMask::all_valid(3)).unwrap();
        // v = [1, 0.5] W_V = [0.5, 2.25]; v W_O = [4.75, -1.75]
        for i in 0..3 {
            assert!((tape.value(out).at(i, 0) - 4.75).abs() < 1e-12);
            assert!((tape.value(out).at(i, 1) + 1.75).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_attention_by_hand() {
        // d_model = d_k = 1, W_Q = W_K = W_V = W_O = 1, z = [0, sqrt(ln 2)]:
        // scores row 1 = [0, ln 2] -> weights [1/3, 2/3].
        let a = (2f64.ln()).sqrt();
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![0.0], vec![a]]).unwrap());
        let one = || Tensor::from_rows(&[vec![1.0]]).unwrap();
        let w = AttentionWeights {
            query: vec![tape.leaf(one())],
            key: vec![tape.leaf(one())],
            value: vec![tape.leaf(one())],
            output: tape.leaf(one()),
        };
        let out = mhsa(&mut tape, &w, z, &AttentionMask::all_valid(2)).unwrap();
        let expected = (1.0 / 3.0) * 0.0 + (2.0 / 3.0) * a;
        assert!((tape.value(out).at(1, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn padded_keys_get_zero_weight() {
        let mut tape = Tape::new();
        let z = tape.leaf(random_input(4, 2, 8));
        let eye = || Tensor::identity(2);
        let w = AttentionWeights {
            query: vec![tape.leaf(eye())],
            key: vec![tape.leaf(eye())],
            value: vec![tape.leaf(eye())],
            output: tape.leaf(eye()),
        };
        let attn = AttentionMask::new(2, 4).unwrap();
        let out = mhsa(&mut tape, &w, z, &attn).unwrap();
        // With identity W_V/W_O every output row is a convex mix of the two valid rows.
        let zv = tape.value(z).clone();
        for i in 0..4 {
            let row = tape.value(out).row(i);
            let t = if (zv.at(1, 0) - zv.at(0, 0)).abs() > 1e-9 {
                (row[0] - zv.at(0, 0)) / (zv.at(1, 0) - zv.at(0, 0))
            } else {
                0.5
            };
            let predicted = zv.at(0, 1) + t * (zv.at(1, 1) - zv.at(0, 1));
            assert!((row[1] - predicted).abs() < 1e-9);
        }
        assert!(mhsa(&mut tape, &w, z, &AttentionMask::new(0, 4).unwrap()).is_err());
    }

    #[test]
    fn padding_rows_do_not_leak() {
        let mut c = desk();
        c.max_len = 20;
        let m = Encoder::new(c, 5).unwrap();
        let attn = AttentionMask::new(16, 20).unwrap();
        let mut x = random_input(20, 32, 6);
        for v in &mut x.data_mut()[16 * 32..] {
            *v = 0.0;
        }
        let base = m.forward(&x, &attn).unwrap();
        let mut noisy = x.clone();
        for v in &mut noisy.data_mut()[16 * 32..] {
            *v = 123.0;
        }
        let other = m.forward(&noisy, &attn).unwrap();
        for i in 0..16 {
            for (a, b) in base.row(i).iter().zip(other.row(i)) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let m = Encoder::new(desk(), 9).unwrap();
        let x = random_input(16, 32, 10);
        let attn = AttentionMask::all_valid(16);
        let a = m.forward(&x, &attn).unwrap();
        let b = m.forward(&x, &attn).unwrap();
        assert_eq!(a.shape(), &[16, 32]);
        assert!(a.is_finite());
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(m.forward(&random_input(15, 32, 1), &AttentionMask::all_valid(15)).is_err());
    }

    #[test]
    fn plain_head_is_affine() {
        let mut c = desk();
        c.plain_head = true;
        let m = Encoder::new(c, 2).unwrap();
        assert!(m.params.head.intermediate.is_none());
        let z = random_input(16, 64, 3);
        let mut tape = Tape::new();
        let w = m.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let out = head(&mut tape, &w.head, zv).unwrap();
        let expected = z
            .matmul(&m.params.head.out_weight)
            .unwrap()
            .add_row_vector(&m.params.head.out_bias)
            .unwrap();
        assert_eq!(tape.value(out), &expected);
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let mut m = Encoder::new(desk(), 12).unwrap();
        m.params.time_embedding = Tensor::zeros(&[16, 64]);
        let x = random_input(16, 32, 13);
        let perm: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 16).collect();
        let mut px = Tensor::zeros(&[16, 32]);
        for (i, &p) in perm.iter().enumerate() {
            px.row_mut(i).copy_from_slice(x.row(p));
        }
        let attn = AttentionMask::all_valid(16);
        let y = m.forward(&x, &attn).unwrap();
        let py = m.forward(&px, &attn).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in py.row(i).iter().zip(y.row(p)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn head_gradient_check() {
        let m = Encoder::new(ModelConfig::desk(6, 4), 4).unwrap();
        let z = random_input(4, 64, 5);
        let target = random_input(4, 6, 6);
        let inter = m.params.head.intermediate.clone().unwrap();
        let params = vec![
            z,
            inter.weight,
            inter.bias.map(|_| 0.1),
            inter.ln_gain,
            inter.ln_bias,
            m.params.head.out_weight.clone(),
            m.params.head.out_bias.clone(),
        ];
        let report = grad_check(
            |tape, v| {
                let w = HeadWeights {
                    intermediate: Some(IntermediateWeights {
                        weight: v[1],
                        bias: v[2],
                        ln_gain: v[3],
                        ln_bias: v[4],
                    }),
                    out_weight: v[5],
                    out_bias: v[6],
                };
                let out = head(tape, &w, v[0])?;
                let t = tape.leaf(target.clone());
                let r = tape.sub(out, t)?;
                let sq = tape.square(r);
                Ok(tape.sum_all(sq))
            },
            &params,
            &GradCheckOptions {
                max_coords_per_param: Some(40),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
