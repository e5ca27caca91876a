//! Dataset generation over `(cell, ue, scenario)` triples and the on-disk
//! "CSID v1" container.
//!
//! A dataset directory holds `manifest.json` and `data.bin`. `data.bin` is
//! the concatenation, in manifest order, of every matrix's entries as
//! interleaved little-endian `f32` pairs `(re, im)`, row-major `[s][t][r]`.

use super::{
    add_awgn, apply_doppler_per_path, apply_doppler_rotation, csi_from_paths, path_loss,
    sample_paths, CsiDims, CsiTensor, DopplerMode, PathLossParams, ScenarioConfig, ScenarioId,
};
use crate::error::{Error, Result};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CSID_MAGIC: &str = "CSID";
pub const CSID_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";
const BYTES_PER_ENTRY: u64 = 8;
const WRITE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub cells: usize,
    pub ues_per_cell: usize,
    pub scenarios: Vec<ScenarioConfig>,
    pub n_subcarriers: usize,
    pub n_tx: usize,
    pub n_rx: usize,
    /// Hz between adjacent subcarriers.
    pub subcarrier_spacing: f64,
    pub snr_db: f64,
    /// When set, each matrix draws its SNR uniformly from this range instead.
    #[serde(default)]
    pub snr_range_db: Option<[f64; 2]>,
    pub seed: u64,
    pub path_loss: PathLossParams,
    /// UE distances are drawn uniformly from this range, meters.
    pub distance_range: [f64; 2],
    /// Elapsed time at which Doppler phase is evaluated, seconds.
    pub snapshot_time: f64,
}

impl DatasetConfig {
    /// 10 cells x 200 UEs x 3 scenarios of 64 x 64 x 4 channels.
    pub fn paper() -> Self {
        Self {
            cells: 10,
            ues_per_cell: 200,
            n_subcarriers: 64,
            n_tx: 64,
            n_rx: 4,
            ..Self::desk()
        }
    }

    /// 2 cells x 20 UEs x 3 scenarios of 16 x 8 x 2 channels.
    pub fn desk() -> Self {
        Self {
            cells: 2,
            ues_per_cell: 20,
            scenarios: ScenarioConfig::presets(),
            n_subcarriers: 16,
            n_tx: 8,
            n_rx: 2,
            subcarrier_spacing: 30e3,
            snr_db: 100.0,
            snr_range_db: None,
            seed: 0,
            path_loss: PathLossParams::default(),
            distance_range: [50.0, 500.0],
            snapshot_time: 1e-3,
        }
    }

    pub fn dims(&self) -> CsiDims {
        CsiDims {
            n_subcarriers: self.n_subcarriers,
            n_tx: self.n_tx,
            n_rx: self.n_rx,
        }
    }

    /// `cells * ues_per_cell * scenarios`.
    pub fn total_matrices(&self) -> usize {
        self.cells * self.ues_per_cell * self.scenarios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.ues_per_cell == 0 || self.scenarios.is_empty() {
            return Err(Error::Config(format!(
                "cells, UEs per cell and scenario count must be positive (got {}, {}, {})",
                self.cells,
                self.ues_per_cell,
                self.scenarios.len()
            )));
        }
        if self.cells >= 1 << 21 || self.ues_per_cell >= 1 << 21 || self.scenarios.len() >= 1 << 21 {
            return Err(Error::Config("cells, UEs and scenarios are limited to 2^21 each".into()));
        }
        self.dims().validate()?;
        for sc in &self.scenarios {
            sc.validate()?;
        }
        self.path_loss.validate()?;
        if !(self.subcarrier_spacing > 0.0) {
            return Err(Error::Config("subcarrier spacing must be > 0".into()));
        }
        let [lo, hi] = self.distance_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("invalid distance range [{lo}, {hi}]")));
        }
        if let Some([a, b]) = self.snr_range_db {
            if !(a.is_finite() && b.is_finite() && b >= a) {
                return Err(Error::Config(format!("invalid SNR range [{a}, {b}]")));
            }
        } else if self.snr_db.is_nan() {
            return Err(Error::Config("SNR is NaN".into()));
        }
        if !(self.snapshot_time >= 0.0) {
            return Err(Error::Config("snapshot time must be >= 0".into()));
        }
        Ok(())
    }

    /// Manifest position of triple `(cell, ue, scenario)`.
    pub fn index_of(&self, cell: usize, ue: usize, scenario: usize) -> usize {
        (cell * self.ues_per_cell + ue) * self.scenarios.len() + scenario
    }

    fn triple_of(&self, index: usize) -> (usize, usize, usize) {
        let s = self.scenarios.len();
        (index / (self.ues_per_cell * s), (index / s) % self.ues_per_cell, index % s)
    }
}

/// Independent random stream for one `(cell, ue, scenario)` triple.
///
/// The ChaCha key comes from the base seed and the stream id packs the triple,
/// so a triple's draws do not depend on how many other triples exist or on
/// the order in which they are generated.
pub fn triple_rng(seed: u64, cell: usize, ue: usize, scenario: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((cell as u64) << 42) | ((ue as u64) << 21) | scenario as u64);
    rng
}

fn generate_one(config: &DatasetConfig, cell: usize, ue: usize, s: usize) -> Result<CsiTensor> {
    let scenario = &config.scenarios[s];
    let mut rng = triple_rng(config.seed, cell, ue, s);

    let mut paths = sample_paths(scenario, &mut rng)?;
    let max_doppler = scenario.doppler_shift();
    if scenario.doppler_mode == DopplerMode::PerPath && max_doppler > 0.0 {
        paths = apply_doppler_per_path(&paths, max_doppler, config.snapshot_time);
    }
    let mut h = csi_from_paths(&paths, config.dims(), config.subcarrier_spacing, scenario.id)?;
    if scenario.doppler_mode == DopplerMode::CommonRotation && max_doppler > 0.0 {
        h = apply_doppler_rotation(&h, max_doppler, config.snapshot_time);
    }

    let [d_lo, d_hi] = config.distance_range;
    let distance = if d_hi > d_lo {
        rng.random_range(d_lo..d_hi)
    } else {
        d_lo
    };
    let loss = path_loss(distance, scenario.doppler.carrier_frequency, &config.path_loss)?;
    h = h.scaled(loss);

    let snr = match config.snr_range_db {
        Some([a, b]) if b > a => rng.random_range(a..b),
        Some([a, _]) => a,
        None => config.snr_db,
    };
    let mut h = add_awgn(&h, snr, &mut rng)?;
    h.quantize_f32();
    Ok(h.with_ids(cell, ue))
}

/// One entry of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub index: usize,
    pub cell: usize,
    pub ue: usize,
    pub scenario: ScenarioId,
    /// Byte offset of the matrix in `data.bin`.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub magic: String,
    pub version: u32,
    pub config: DatasetConfig,
    pub records: Vec<MatrixRecord>,
}

impl DatasetManifest {
    fn new(config: &DatasetConfig) -> Self {
        let bytes = config.dims().len() as u64 * BYTES_PER_ENTRY;
        let records = (0..config.total_matrices())
            .map(|index| {
                let (cell, ue, s) = config.triple_of(index);
                MatrixRecord {
                    index,
                    cell,
                    ue,
                    scenario: config.scenarios[s].id,
                    offset: index as u64 * bytes,
                }
            })
            .collect();
        Self {
            magic: CSID_MAGIC.to_owned(),
            version: CSID_VERSION,
            config: config.clone(),
            records,
        }
    }
}

/// An in-memory collection of generated channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub tensors: Vec<CsiTensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count_for(&self, scenario: ScenarioId) -> usize {
        self.tensors.iter().filter(|t| t.scenario == scenario).count()
    }

    /// Indices of tensors belonging to `scenario`, in dataset order.
    pub fn indices_for(&self, scenario: ScenarioId) -> Vec<usize> {
        (0..self.tensors.len())
            .filter(|&i| self.tensors[i].scenario == scenario)
            .collect()
    }
}

/// Generates all `C * U * S` channels; values are rounded to `f32` so that
/// the in-memory dataset matches what [`read_dataset`] returns.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let tensors = (0..config.total_matrices())
        .into_par_iter()
        .map(|i| {
            let (c, u, s) = config.triple_of(i);
            generate_one(config, c, u, s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: config.clone(),
        tensors,
    })
}

fn write_tensor(out: &mut impl Write, t: &CsiTensor) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(t.data().len() * BYTES_PER_ENTRY as usize);
    for z in t.data() {
        buf.extend_from_slice(&(z.re as f32).to_le_bytes());
        buf.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
    out.write_all(&buf)
}

fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Writes an in-memory dataset as a CSID v1 directory.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let manifest = DatasetManifest::new(&dataset.config);
    if manifest.records.len() != dataset.tensors.len() {
        return Err(Error::Config(format!(
            "dataset holds {} tensors but its config describes {}",
            dataset.tensors.len(),
            manifest.records.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(DATA_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for t in &dataset.tensors {
        write_tensor(&mut out, t).map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    write_manifest(dir, &manifest)
}

/// Generates and writes a dataset in bounded-memory chunks. The bytes
/// written equal those of `write_dataset(dir, &generate_dataset(config)?)`.
pub fn write_generated_dataset(dir: &Path, config: &DatasetConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let manifest = DatasetManifest::new(config);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(DATA_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    let total = config.total_matrices();
    for start in (0..total).step_by(WRITE_CHUNK) {
        let end = (start + WRITE_CHUNK).min(total);
        let chunk = (start..end)
            .into_par_iter()
            .map(|i| {
                let (c, u, s) = config.triple_of(i);
                generate_one(config, c, u, s)
            })
            .collect::<Result<Vec<_>>>()?;
        for t in &chunk {
            write_tensor(&mut out, t).map_err(|e| Error::io(&path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Reads and validates just the manifest of a dataset directory.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    if manifest.magic != CSID_MAGIC {
        return Err(Error::format("manifest", format!("bad magic {:?}", manifest.magic)));
    }
    if manifest.version != CSID_VERSION {
        return Err(Error::format(
            "manifest",
            format!("unsupported version {}", manifest.version),
        ));
    }
    manifest
        .config
        .validate()
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    if manifest.records.len() != manifest.config.total_matrices() {
        return Err(Error::format(
            "manifest",
            format!(
                "{} records for a config describing {} matrices",
                manifest.records.len(),
                manifest.config.total_matrices()
            ),
        ));
    }
    Ok(manifest)
}

/// Loads a CSID v1 directory.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let dims = manifest.config.dims();
    let entries = dims.len();
    let stride = entries as u64 * BYTES_PER_ENTRY;

    let path = dir.join(DATA_FILE);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let expected = stride * manifest.records.len() as u64;
    let actual = file.metadata().map_err(|e| Error::io(&path, e))?.len();
    if actual != expected {
        return Err(Error::format(
            "data.bin",
            format!("expected {expected} bytes, found {actual}"),
        ));
    }
    let mut reader = BufReader::new(file);
    let mut buf = vec![0u8; stride as usize];
    let mut tensors = Vec::with_capacity(manifest.records.len());
    for (i, rec) in manifest.records.iter().enumerate() {
        if rec.index != i || rec.offset != i as u64 * stride {
            return Err(Error::format(
                "manifest",
                format!("record {i} has index {} offset {}", rec.index, rec.offset),
            ));
        }
        reader.read_exact(&mut buf).map_err(|e| Error::io(&path, e))?;
        let data: Vec<Complex64> = buf
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
                Complex64::new(re as f64, im as f64)
            })
            .collect();
        let t = CsiTensor::new(data, dims, rec.scenario)
            .map_err(|e| Error::format("data.bin", format!("matrix {i}: {e}")))?;
        tensors.push(t.with_ids(rec.cell, rec.ue));
    }
    Ok(Dataset {
        config: manifest.config,
        tensors,
    })
}
