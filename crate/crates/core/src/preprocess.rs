//! CSI tensors to normalized real feature matrices, masking schemes and
//! padding masks.
//!
//! Row `s` of a feature matrix is the flattened real block of subcarrier `s`
//! followed by its flattened imaginary block, both in `(t, r)` row-major order.

use crate::channel::{CsiDims, CsiTensor, ScenarioId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use num_complex::Complex64;
use rand::distr::{Bernoulli, Distribution, Open01};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Standard deviations at or below this are rejected as degenerate.
pub const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean_real: f64,
    pub std_real: f64,
    pub mean_imag: f64,
    pub std_imag: f64,
}

/// Whether normalization statistics are taken over the whole matrix or per subcarrier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NormMode {
    #[default]
    Global,
    PerSubcarrier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Normalization {
    Global(NormStats),
    PerSubcarrier(Vec<NormStats>),
}

impl Normalization {
    fn for_row(&self, s: usize) -> &NormStats {
        match self {
            Normalization::Global(st) => st,
            Normalization::PerSubcarrier(v) => &v[s],
        }
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn stats_of(entries: &[Complex64]) -> Result<NormStats> {
    let (mean_real, std_real) = mean_std(entries.iter().map(|z| z.re));
    let (mean_imag, std_imag) = mean_std(entries.iter().map(|z| z.im));
    if std_real <= MIN_STD || std_imag <= MIN_STD {
        return Err(Error::Degenerate(format!(
            "near-constant channel component (std real {std_real:e}, imag {std_imag:e})"
        )));
    }
    Ok(NormStats {
        mean_real,
        std_real,
        mean_imag,
        std_imag,
    })
}

/// Splits `h` into real and imaginary parts, each standardized with
/// statistics over all entries.
pub fn split_and_normalize(h: &CsiTensor) -> Result<(Vec<f64>, Vec<f64>, NormStats)> {
    let st = stats_of(h.data())?;
    let re = h.data().iter().map(|z| (z.re - st.mean_real) / st.std_real).collect();
    let im = h.data().iter().map(|z| (z.im - st.mean_imag) / st.std_imag).collect();
    Ok((re, im, st))
}

fn split_with(h: &CsiTensor, mode: NormMode) -> Result<(Vec<f64>, Vec<f64>, Normalization)> {
    match mode {
        NormMode::Global => {
            let (re, im, st) = split_and_normalize(h)?;
            Ok((re, im, Normalization::Global(st)))
        }
        NormMode::PerSubcarrier => {
            let dims = h.dims();
            let block = dims.n_tx * dims.n_rx;
            let mut re = Vec::with_capacity(dims.len());
            let mut im = Vec::with_capacity(dims.len());
            let mut all = Vec::with_capacity(dims.n_subcarriers);
            for row in h.data().chunks_exact(block) {
                let st = stats_of(row)?;
                re.extend(row.iter().map(|z| (z.re - st.mean_real) / st.std_real));
                im.extend(row.iter().map(|z| (z.im - st.mean_imag) / st.std_imag));
                all.push(st);
            }
            Ok((re, im, Normalization::PerSubcarrier(all)))
        }
    }
}

/// Real-valued `[N_s, 2 * N_t * N_r]` view of one CSI tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Tensor,
    pub stats: Normalization,
    pub dims: CsiDims,
    pub scenario: ScenarioId,
}

impl FeatureMatrix {
    pub fn from_csi(h: &CsiTensor, mode: NormMode) -> Result<Self> {
        let (re, im, stats) = split_with(h, mode)?;
        flatten(h.dims(), &re, &im, stats, h.scenario)
    }

    pub fn rows(&self) -> usize {
        self.dims.n_subcarriers
    }

    pub fn feature_dim(&self) -> usize {
        self.dims.feature_dim()
    }

    /// Inverse of [`FeatureMatrix::from_csi`].
    pub fn to_csi(&self) -> Result<CsiTensor> {
        let (re, im) = unflatten(self)?;
        denormalize(&re, &im, &self.stats, self.dims, self.scenario)
    }

    /// Same metadata with different values.
    pub fn with_data(&self, data: Tensor) -> Result<Self> {
        if data.shape() != self.data.shape() {
            return Err(Error::shape(
                "feature_matrix",
                format!("{:?} vs {:?}", data.shape(), self.data.shape()),
            ));
        }
        Ok(Self {
            data,
            ..self.clone()
        })
    }
}

/// Packs normalized real/imaginary `[N_s, N_t, N_r]` arrays into a feature matrix.
pub fn flatten(
    dims: CsiDims,
    re: &[f64],
    im: &[f64],
    stats: Normalization,
    scenario: ScenarioId,
) -> Result<FeatureMatrix> {
    if re.len() != dims.len() || im.len() != dims.len() {
        return Err(Error::shape(
            "flatten",
            format!("{dims:?} vs real {} / imag {}", re.len(), im.len()),
        ));
    }
    let block = dims.n_tx * dims.n_rx;
    let mut data = Vec::with_capacity(2 * dims.len());
    for s in 0..dims.n_subcarriers {
        data.extend_from_slice(&re[s * block..(s + 1) * block]);
        data.extend_from_slice(&im[s * block..(s + 1) * block]);
    }
    Ok(FeatureMatrix {
        data: Tensor::new(&[dims.n_subcarriers, 2 * block], data)?,
        stats,
        dims,
        scenario,
    })
}

/// Splits a feature matrix back into real and imaginary `[N_s, N_t, N_r]` arrays.
pub fn unflatten(x: &FeatureMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let (rows, cols) = x.data.dims2()?;
    let block = x.dims.n_tx * x.dims.n_rx;
    if rows != x.dims.n_subcarriers || cols != 2 * block {
        return Err(Error::shape(
            "unflatten",
            format!("[{rows},{cols}] for dims {:?}", x.dims),
        ));
    }
    let mut re = Vec::with_capacity(x.dims.len());
    let mut im = Vec::with_capacity(x.dims.len());
    for s in 0..rows {
        let row = x.data.row(s);
        re.extend_from_slice(&row[..block]);
        im.extend_from_slice(&row[block..]);
    }
    Ok((re, im))
}

/// Undoes the standardization and rebuilds the complex tensor.
pub fn denormalize(
    re: &[f64],
    im: &[f64],
    stats: &Normalization,
    dims: CsiDims,
    scenario: ScenarioId,
) -> Result<CsiTensor> {
    let block = dims.n_tx * dims.n_rx;
    let data = re
        .iter()
        .zip(im)
        .enumerate()
        .map(|(i, (&r, &m))| {
            let st = stats.for_row(i / block);
            Complex64::new(r * st.std_real + st.mean_real, m * st.std_imag + st.mean_imag)
        })
        .collect();
    CsiTensor::new(data, dims, scenario)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum MaskScheme {
    /// Each element kept independently with probability `keep_prob`.
    Bernoulli { keep_prob: f64 },
    /// Rows whose index is a multiple of `k` are masked, row 0 included.
    EveryKth { k: usize },
    /// Row `i` kept iff `u_i > masked_fraction`, `u_i ~ Uniform(0, 1)`.
    RatioSweep { masked_fraction: f64 },
}

impl MaskScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MaskScheme::Bernoulli { keep_prob } if !(0.0..=1.0).contains(&keep_prob) => Err(
                Error::Config(format!("Bernoulli keep probability {keep_prob} outside [0, 1]")),
            ),
            MaskScheme::EveryKth { k: 0 } => {
                Err(Error::Config("every-k masking needs k >= 1".into()))
            }
            MaskScheme::RatioSweep { masked_fraction } if !(0.0..=1.0).contains(&masked_fraction) => {
                Err(Error::Config(format!(
                    "masking ratio {masked_fraction} outside [0, 1]"
                )))
            }
            _ => Ok(()),
        }
    }

    /// True when the realized mask does not depend on the seed.
    pub fn is_deterministic(&self) -> bool {
        matches!(self, MaskScheme::EveryKth { .. })
    }
}

/// Accepts `bernoulli:P`, `every:K` and `ratio:G`.
impl FromStr for MaskScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("mask {s:?} must look like kind:value")))?;
        let bad = |e: &dyn fmt::Display| Error::Config(format!("mask {s:?}: {e}"));
        let scheme = match kind {
            "bernoulli" => MaskScheme::Bernoulli {
                keep_prob: arg.parse().map_err(|e| bad(&e))?,
            },
            "every" => MaskScheme::EveryKth {
                k: arg.parse().map_err(|e| bad(&e))?,
            },
            "ratio" => MaskScheme::RatioSweep {
                masked_fraction: arg.parse().map_err(|e| bad(&e))?,
            },
            other => return Err(bad(&format!("unknown kind {other:?}"))),
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

impl fmt::Display for MaskScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskScheme::Bernoulli { keep_prob } => write!(f, "bernoulli:{keep_prob}"),
            MaskScheme::EveryKth { k } => write!(f, "every:{k}"),
            MaskScheme::RatioSweep { masked_fraction } => write!(f, "ratio:{masked_fraction}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub scheme: MaskScheme,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(scheme: MaskScheme, seed: u64) -> Self {
        Self { scheme, seed }
    }
}

/// Binary keep-mask of shape `[rows, cols]`; `true` keeps the element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl MaskMatrix {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![false; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn keep(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Rows in which every element is masked.
    pub fn masked_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .filter(|&i| self.keep[i * self.cols..(i + 1) * self.cols].iter().all(|&k| !k))
            .collect()
    }

    /// The mask as a 0/1 tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.rows, self.cols],
            self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask shape is positive")
    }

    /// Complement: keeps exactly what this mask hides.
    pub fn inverted(&self) -> Self {
        Self {
            keep: self.keep.iter().map(|&k| !k).collect(),
            ..self.clone()
        }
    }
}

/// Realizes `spec` for an `[rows, cols]` feature matrix.
pub fn make_mask(spec: &MaskSpec, rows: usize, cols: usize) -> Result<MaskMatrix> {
    spec.scheme.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let keep = match spec.scheme {
        MaskScheme::Bernoulli { keep_prob } => {
            let dist = Bernoulli::new(keep_prob).map_err(|e| Error::Config(e.to_string()))?;
            (0..rows * cols).map(|_| dist.sample(&mut rng)).collect()
        }
        MaskScheme::EveryKth { k } => (0..rows)
            .flat_map(|i| std::iter::repeat_n(i % k != 0, cols))
            .collect(),
        MaskScheme::RatioSweep { masked_fraction } => (0..rows)
            .flat_map(|_| {
                let u: f64 = Open01.sample(&mut rng);
                std::iter::repeat_n(u > masked_fraction, cols)
            })
            .collect(),
    };
    Ok(MaskMatrix { rows, cols, keep })
}

/// Zeroes the masked elements; kept elements are copied bit-for-bit.
pub fn apply_mask(x: &Tensor, m: &MaskMatrix) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    if (rows, cols) != m.shape() {
        return Err(Error::shape(
            "apply_mask",
            format!("[{rows},{cols}] vs mask {:?}", m.shape()),
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(&m.keep)
        .map(|(&v, &k)| if k { v } else { 0.0 })
        .collect();
    Tensor::new(&[rows, cols], data)
}

/// Marks which sequence positions hold real tokens; valid positions form a prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMask {
    valid: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n_valid: usize, max_len: usize) -> Result<Self> {
        if n_valid > max_len {
            return Err(Error::shape(
                "attention_mask",
                format!("{n_valid} tokens exceed max length {max_len}"),
            ));
        }
        Ok(Self {
            valid: (0..max_len).map(|i| i < n_valid).collect(),
        })
    }

    pub fn all_valid(len: usize) -> Self {
        Self {
            valid: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }

    pub fn to_vec_u8(&self) -> Vec<u8> {
        self.valid.iter().map(|&v| v as u8).collect()
    }
}

/// Zero-pads `x` to `max_len` rows.
pub fn pad_and_attention_mask(x: &Tensor, max_len: usize) -> Result<(Tensor, AttentionMask)> {
    let (rows, cols) = x.dims2()?;
    if rows > max_len {
        return Err(Error::shape(
            "pad",
            format!("{rows} rows exceed max length {max_len}"),
        ));
    }
    let mut data = x.data().to_vec();
    data.resize(max_len * cols, 0.0);
    Ok((Tensor::new(&[max_len, cols], data)?, AttentionMask::new(rows, max_len)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_csi, ScenarioConfig};

    fn sample_csi(seed: u64) -> CsiTensor {
        let sc = ScenarioConfig::preset(ScenarioId::HighSpeed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate_csi(&sc, CsiDims::new(6, 3, 2).unwrap(), 30e3, &mut rng).unwrap()
    }

    #[test]
    fn normalized_parts_are_standardized() {
        let (re, im, _) = split_and_normalize(&sample_csi(1)).unwrap();
        for part in [&re, &im] {
            let (m, s) = mean_std(part.iter().copied());
            assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let dims = CsiDims::new(2, 2, 2).unwrap();
        let h = CsiTensor::new(vec![Complex64::new(0.5, -0.5); 8], dims, ScenarioId::Stationary).unwrap();
        assert!(matches!(split_and_normalize(&h), Err(Error::Degenerate(_))));
    }

    #[test]
    fn round_trip_both_modes() {
        let h = sample_csi(2);
        for mode in [NormMode::Global, NormMode::PerSubcarrier] {
            let back = FeatureMatrix::from_csi(&h, mode).unwrap().to_csi().unwrap();
            for (a, b) in h.data().iter().zip(back.data()) {
                assert!((a - b).norm() <= 1e-6 * a.norm().max(1e-3));
            }
        }
    }

    #[test]
    fn flatten_layout() {
        let dims = CsiDims::new(2, 1, 1).unwrap();
        let h = CsiTensor::new(
            vec![Complex64::new(1.0, 2.0), Complex64::new(3.0, 4.0)],
            dims,
            ScenarioId::Stationary,
        )
        .unwrap();
        let re: Vec<f64> = h.data().iter().map(|z| z.re).collect();
        let im: Vec<f64> = h.data().iter().map(|z| z.im).collect();
        let fm = flatten(
            dims,
            &re,
            &im,
            Normalization::Global(NormStats {
                mean_real: 0.0,
                std_real: 1.0,
                mean_imag: 0.0,
                std_imag: 1.0,
            }),
            ScenarioId::Stationary,
        )
        .unwrap();
        assert_eq!(fm.data.shape(), &[2, 2]);
        assert_eq!(fm.data.row(0), &[1.0, 2.0]);
        assert_eq!(fm.data.row(1), &[3.0, 4.0]);
        assert_eq!(unflatten(&fm).unwrap(), (re, im));
        assert_eq!(CsiDims::new(64, 64, 4).unwrap().feature_dim(), 512);
    }

    #[test]
    fn flatten_shape_mismatch() {
        let dims = CsiDims::new(2, 2, 2).unwrap();
        let st = Normalization::Global(NormStats {
            mean_real: 0.0,
            std_real: 1.0,
            mean_imag: 0.0,
            std_imag: 1.0,
        });
        assert!(flatten(dims, &[0.0; 8], &[0.0; 7], st, ScenarioId::Stationary).is_err());
    }

    #[test]
    fn mask_examples() {
        let all = make_mask(&MaskSpec::new(MaskScheme::Bernoulli { keep_prob: 1.0 }, 3), 8, 4).unwrap();
        assert_eq!(all.kept_count(), 32);

        let every = make_mask(&MaskSpec::new(MaskScheme::EveryKth { k: 10 }, 0), 64, 5).unwrap();
        assert_eq!(every.masked_rows(), vec![0, 10, 20, 30, 40, 50, 60]);
        let other_seed = make_mask(&MaskSpec::new(MaskScheme::EveryKth { k: 10 }, 99), 64, 5).unwrap();
        assert_eq!(every, other_seed);

        let none = make_mask(&MaskSpec::new(MaskScheme::RatioSweep { masked_fraction: 0.0 }, 5), 100, 2).unwrap();
        assert_eq!(none.kept_count(), 200);
    }

    #[test]
    fn mask_spec_parsing() {
        assert_eq!("every:10".parse::<MaskScheme>().unwrap(), MaskScheme::EveryKth { k: 10 });
        assert_eq!(
            "bernoulli:0.85".parse::<MaskScheme>().unwrap(),
            MaskScheme::Bernoulli { keep_prob: 0.85 }
        );
        assert!("every:0".parse::<MaskScheme>().is_err());
        assert!("ratio:1.5".parse::<MaskScheme>().is_err());
        assert!("gauss:1".parse::<MaskScheme>().is_err());
        let s = MaskScheme::RatioSweep { masked_fraction: 0.3 };
        assert_eq!(s.to_string().parse::<MaskScheme>().unwrap(), s);
    }

    #[test]
    fn apply_mask_cases() {
        let x = Tensor::from_rows(&[vec![1.5, -2.0], vec![-0.25, 3.0]]).unwrap();
        assert_eq!(apply_mask(&x, &MaskMatrix::ones(2, 2)).unwrap(), x);
        let z = apply_mask(&x, &MaskMatrix::zeros(2, 2)).unwrap();
        assert!(z.data().iter().all(|v| v.to_bits() == 0));
        let m = make_mask(&MaskSpec::new(MaskScheme::EveryKth { k: 2 }, 0), 2, 2).unwrap();
        let y = apply_mask(&x, &m).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, -0.25, 3.0]);
        assert!(apply_mask(&x, &MaskMatrix::ones(3, 2)).is_err());
    }

    #[test]
    fn padding() {
        let x = Tensor::full(&[3, 2], 1.0);
        let (p, m) = pad_and_attention_mask(&x, 5).unwrap();
        assert_eq!(m.to_vec_u8(), vec![1, 1, 1, 0, 0]);
        assert_eq!(p.shape(), &[5, 2]);
        assert!(p.data()[6..].iter().all(|&v| v == 0.0));
        let (same, full) = pad_and_attention_mask(&x, 3).unwrap();
        assert_eq!(same, x);
        assert_eq!(full.n_valid(), 3);
        assert!(pad_and_attention_mask(&x, 2).is_err());
    }
}
