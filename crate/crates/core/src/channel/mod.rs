//! Parametric multipath channel simulator.
//!
//! Each channel is a sum of `P` plane-wave paths between two uniform linear
//! arrays, evaluated on a grid of OFDM subcarriers:
//!
//! ```text
//! H[s, t, r] = sum_p  gain_p * a_tx(aod_p)[t] * conj(a_rx(aoa_p)[r]) * exp(-j 2 pi f_s delay_p)
//! ```
//!
//! Path delays follow an exponential power-delay profile whose realized RMS
//! delay spread is pinned to the scenario's target.

mod dataset;

pub use dataset::{
    generate_dataset, read_dataset, read_manifest, triple_rng, write_dataset, write_generated_dataset, Dataset,
    DatasetConfig, DatasetManifest, MatrixRecord, CSID_MAGIC, CSID_VERSION, DATA_FILE, MANIFEST_FILE,
};

use crate::error::{Error, Result};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

/// Speed of light used by the Doppler model, m/s.
pub const SPEED_OF_LIGHT: f64 = 2.998e8;

/// Default carrier frequency, Hz.
pub const DEFAULT_CARRIER_HZ: f64 = 3.5e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioId {
    Stationary,
    HighSpeed,
    UrbanMacro,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 3] = [
        ScenarioId::Stationary,
        ScenarioId::HighSpeed,
        ScenarioId::UrbanMacro,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::Stationary => "stationary",
            ScenarioId::HighSpeed => "high-speed",
            ScenarioId::UrbanMacro => "urban-macro",
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

/// Named delay profile family; only the RMS delay spread and Rician factor
/// of the scenario are used to realize it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DelayProfileId {
    TdlA,
    TdlC,
    TdlD,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DopplerParams {
    /// UE speed, m/s.
    pub speed: f64,
    /// Carrier frequency, Hz.
    pub carrier_frequency: f64,
    pub light_speed: f64,
}

impl DopplerParams {
    pub fn new(speed: f64, carrier_frequency: f64) -> Result<Self> {
        let p = Self {
            speed,
            carrier_frequency,
            light_speed: SPEED_OF_LIGHT,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.speed >= 0.0 && self.speed.is_finite()) {
            return Err(Error::Config(format!("UE speed must be >= 0, got {}", self.speed)));
        }
        if !(self.carrier_frequency > 0.0 && self.carrier_frequency.is_finite()) {
            return Err(Error::Config(format!(
                "carrier frequency must be > 0, got {}",
                self.carrier_frequency
            )));
        }
        if !(self.light_speed > 0.0) {
            return Err(Error::Config("speed of light must be > 0".into()));
        }
        Ok(())
    }
}

/// Maximum Doppler shift `v * f_c / c`, Hz.
pub fn doppler_shift(params: &DopplerParams) -> f64 {
    params.speed * params.carrier_frequency / params.light_speed
}

/// Converts km/h to m/s.
pub fn kmh_to_ms(kmh: f64) -> f64 {
    kmh / 3.6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLossParams {
    /// Distance exponent.
    pub exponent: f64,
    /// Reference frequency, Hz.
    pub ref_frequency: f64,
    /// Frequency scaling exponent.
    pub freq_scaling: f64,
}

impl Default for PathLossParams {
    fn default() -> Self {
        Self {
            exponent: 3.0,
            ref_frequency: DEFAULT_CARRIER_HZ,
            freq_scaling: 0.0,
        }
    }
}

impl PathLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ref_frequency > 0.0) {
            return Err(Error::Config("path-loss reference frequency must be > 0".into()));
        }
        if !self.exponent.is_finite() || !self.freq_scaling.is_finite() {
            return Err(Error::Config("path-loss parameters must be finite".into()));
        }
        Ok(())
    }

    /// Exponents between 2 and 4 cover the usual propagation environments.
    pub fn is_typical(&self) -> bool {
        (2.0..=4.0).contains(&self.exponent)
    }
}

/// Path-loss gain `d^-exponent * (f_c / f_0)^freq_scaling`.
pub fn path_loss(distance: f64, carrier_frequency: f64, params: &PathLossParams) -> Result<f64> {
    if !(distance > 0.0) {
        return Err(Error::Domain(format!("distance must be > 0, got {distance}")));
    }
    if !(carrier_frequency > 0.0) {
        return Err(Error::Domain(format!(
            "carrier frequency must be > 0, got {carrier_frequency}"
        )));
    }
    Ok(distance.powf(-params.exponent)
        * (carrier_frequency / params.ref_frequency).powf(params.freq_scaling))
}

/// Half-wavelength uniform linear array response: entry `k` is `exp(j pi k sin(angle))`.
pub fn steering_vector(n_antennas: usize, angle: f64) -> Vec<Complex64> {
    let phase = PI * angle.sin();
    (0..n_antennas)
        .map(|k| Complex64::from_polar(1.0, phase * k as f64))
        .collect()
}

/// How the scenario's Doppler shift is injected into generated channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DopplerMode {
    /// One phase rotation `exp(j 2 pi f_d t)` shared by all entries.
    #[default]
    CommonRotation,
    /// Path `p` rotates by `exp(j 2 pi f_d cos(aoa_p) t)`.
    PerPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub id: ScenarioId,
    pub profile: DelayProfileId,
    /// Target RMS delay spread, seconds.
    pub rms_delay_spread: f64,
    pub doppler: DopplerParams,
    pub path_count: usize,
    /// LOS-to-scattered power ratio; 0 for pure NLOS, `inf` for LOS only.
    pub rician_k: f64,
    #[serde(default)]
    pub doppler_mode: DopplerMode,
}

/// Default number of taps per channel.
pub const DEFAULT_PATH_COUNT: usize = 24;

impl ScenarioConfig {
    pub fn preset(id: ScenarioId) -> Self {
        let (profile, rms, speed, k) = match id {
            ScenarioId::Stationary => (DelayProfileId::TdlA, 100e-9, 0.0, 0.0),
            ScenarioId::HighSpeed => (DelayProfileId::TdlC, 300e-9, kmh_to_ms(120.0), 0.0),
            ScenarioId::UrbanMacro => (DelayProfileId::TdlD, 500e-9, 0.0, 10.0),
        };
        Self {
            id,
            profile,
            rms_delay_spread: rms,
            doppler: DopplerParams {
                speed,
                carrier_frequency: DEFAULT_CARRIER_HZ,
                light_speed: SPEED_OF_LIGHT,
            },
            path_count: DEFAULT_PATH_COUNT,
            rician_k: k,
            doppler_mode: DopplerMode::default(),
        }
    }

    pub fn presets() -> Vec<Self> {
        ScenarioId::ALL.into_iter().map(Self::preset).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.path_count == 0 {
            return Err(Error::Config(format!("{}: path count must be >= 1", self.id)));
        }
        if !(self.rms_delay_spread >= 0.0 && self.rms_delay_spread.is_finite()) {
            return Err(Error::Config(format!(
                "{}: RMS delay spread must be finite and >= 0",
                self.id
            )));
        }
        if !(self.rician_k >= 0.0) {
            return Err(Error::Config(format!("{}: Rician K must be >= 0", self.id)));
        }
        self.doppler.validate()
    }

    pub fn doppler_shift(&self) -> f64 {
        doppler_shift(&self.doppler)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultipathComponent {
    pub gain: Complex64,
    /// Angle of departure, radians.
    pub aod: f64,
    /// Angle of arrival, radians.
    pub aoa: f64,
    /// Excess delay, seconds.
    pub delay: f64,
}

/// Power-weighted RMS delay spread of a path list.
pub fn rms_delay_spread(paths: &[MultipathComponent]) -> f64 {
    let total: f64 = paths.iter().map(|p| p.gain.norm_sqr()).sum();
    if total == 0.0 {
        return 0.0;
    }
    let mean = paths.iter().map(|p| p.gain.norm_sqr() * p.delay).sum::<f64>() / total;
    let second = paths
        .iter()
        .map(|p| p.gain.norm_sqr() * p.delay * p.delay)
        .sum::<f64>()
        / total;
    (second - mean * mean).max(0.0).sqrt()
}

/// Draws `P` paths from an exponential power-delay profile.
///
/// Delays are i.i.d. exponential, powers decay as `exp(-delay / rms)`, and
/// the delays are then rescaled so the realized RMS spread equals the target.
/// Powers sum to one; with `rician_k > 0` the first path is a zero-delay LOS
/// component carrying `K / (K + 1)` of the power.
pub fn sample_paths<R: Rng + ?Sized>(
    scenario: &ScenarioConfig,
    rng: &mut R,
) -> Result<Vec<MultipathComponent>> {
    scenario.validate()?;
    let p = scenario.path_count;
    let target = scenario.rms_delay_spread;
    let has_los = scenario.rician_k > 0.0;
    let los_fraction = if scenario.rician_k.is_infinite() {
        1.0
    } else {
        scenario.rician_k / (scenario.rician_k + 1.0)
    };

    let delay_dist = (target > 0.0)
        .then(|| Exp::new(1.0 / target))
        .transpose()
        .map_err(|e| Error::Config(format!("delay distribution: {e}")))?;

    let mut delays = Vec::with_capacity(p);
    let mut phases = Vec::with_capacity(p);
    let mut aods = Vec::with_capacity(p);
    let mut aoas = Vec::with_capacity(p);
    for i in 0..p {
        let d = match &delay_dist {
            Some(dist) if !(has_los && i == 0) => dist.sample(rng),
            _ => 0.0,
        };
        delays.push(d);
        phases.push(rng.random_range(0.0..2.0 * PI));
        aods.push(rng.random_range(-FRAC_PI_2..=FRAC_PI_2));
        aoas.push(rng.random_range(-FRAC_PI_2..=FRAC_PI_2));
    }

    let mut powers: Vec<f64> = delays
        .iter()
        .map(|&d| if target > 0.0 { (-d / target).exp() } else { 1.0 })
        .collect();
    let scattered = if has_los { &mut powers[1..] } else { &mut powers[..] };
    let scattered_total: f64 = scattered.iter().sum();
    let scattered_share = if has_los { 1.0 - los_fraction } else { 1.0 };
    for w in scattered.iter_mut() {
        *w = if scattered_total > 0.0 {
            *w * scattered_share / scattered_total
        } else {
            0.0
        };
    }
    if has_los {
        powers[0] = if p == 1 { 1.0 } else { los_fraction };
    }

    let mut paths: Vec<MultipathComponent> = (0..p)
        .map(|i| MultipathComponent {
            gain: Complex64::from_polar(powers[i].sqrt(), phases[i]),
            aod: aods[i],
            aoa: aoas[i],
            delay: delays[i],
        })
        .collect();

    let realized = rms_delay_spread(&paths);
    if realized > 0.0 && target > 0.0 {
        let k = target / realized;
        for path in &mut paths {
            path.delay *= k;
        }
    }
    Ok(paths)
}

/// Channel tensor dimensions `(subcarriers, tx antennas, rx antennas)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CsiDims {
    pub n_subcarriers: usize,
    pub n_tx: usize,
    pub n_rx: usize,
}

impl CsiDims {
    pub fn new(n_subcarriers: usize, n_tx: usize, n_rx: usize) -> Result<Self> {
        let d = Self {
            n_subcarriers,
            n_tx,
            n_rx,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subcarriers == 0 || self.n_tx == 0 || self.n_rx == 0 {
            return Err(Error::Config(format!("channel dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_subcarriers * self.n_tx * self.n_rx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Real features per subcarrier: `2 * n_tx * n_rx`.
    pub fn feature_dim(&self) -> usize {
        2 * self.n_tx * self.n_rx
    }

    pub fn index(&self, s: usize, t: usize, r: usize) -> usize {
        (s * self.n_tx + t) * self.n_rx + r
    }
}

/// Complex channel gains of one link, row-major `[subcarrier][tx][rx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiTensor {
    data: Vec<Complex64>,
    dims: CsiDims,
    pub cell_id: usize,
    pub ue_id: usize,
    pub scenario: ScenarioId,
}

impl CsiTensor {
    pub fn new(data: Vec<Complex64>, dims: CsiDims, scenario: ScenarioId) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::shape(
                "csi_tensor",
                format!("{dims:?} needs {} entries, got {}", dims.len(), data.len()),
            ));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Degenerate("CSI tensor contains non-finite entries".into()));
        }
        Ok(Self {
            data,
            dims,
            cell_id: 0,
            ue_id: 0,
            scenario,
        })
    }

    pub fn with_ids(mut self, cell_id: usize, ue_id: usize) -> Self {
        self.cell_id = cell_id;
        self.ue_id = ue_id;
        self
    }

    pub fn dims(&self) -> CsiDims {
        self.dims
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, s: usize, t: usize, r: usize) -> Complex64 {
        self.data[self.dims.index(s, t, r)]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn phase(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.arg()).collect()
    }

    /// Mean squared magnitude of the entries.
    pub fn mean_power(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.data.len() as f64
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for z in &mut out.data {
            *z *= factor;
        }
        out
    }

    /// Rounds every component to the nearest `f32`, the precision used on disk.
    pub fn quantize_f32(&mut self) {
        for z in &mut self.data {
            *z = Complex64::new(z.re as f32 as f64, z.im as f32 as f64);
        }
    }
}

/// Evaluates the multipath sum for a fixed path list. Subcarrier `s` sits at
/// baseband offset `s * subcarrier_spacing`.
pub fn csi_from_paths(
    paths: &[MultipathComponent],
    dims: CsiDims,
    subcarrier_spacing: f64,
    scenario: ScenarioId,
) -> Result<CsiTensor> {
    dims.validate()?;
    let (ns, nt, nr) = (dims.n_subcarriers, dims.n_tx, dims.n_rx);
    let tx: Vec<Vec<Complex64>> = paths.iter().map(|p| steering_vector(nt, p.aod)).collect();
    let rx: Vec<Vec<Complex64>> = paths
        .iter()
        .map(|p| steering_vector(nr, p.aoa).into_iter().map(|z| z.conj()).collect())
        .collect();

    let mut data = vec![Complex64::new(0.0, 0.0); dims.len()];
    for s in 0..ns {
        let fs = s as f64 * subcarrier_spacing;
        let block = &mut data[s * nt * nr..(s + 1) * nt * nr];
        for (pi, path) in paths.iter().enumerate() {
            let coef = path.gain * Complex64::from_polar(1.0, -2.0 * PI * fs * path.delay);
            for (t, &at) in tx[pi].iter().enumerate() {
                let ct = coef * at;
                let row = &mut block[t * nr..(t + 1) * nr];
                for (h, &ar) in row.iter_mut().zip(&rx[pi]) {
                    *h += ct * ar;
                }
            }
        }
    }
    CsiTensor::new(data, dims, scenario)
}

/// Samples a path list for `scenario` and evaluates it on the subcarrier grid.
pub fn generate_csi<R: Rng + ?Sized>(
    scenario: &ScenarioConfig,
    dims: CsiDims,
    subcarrier_spacing: f64,
    rng: &mut R,
) -> Result<CsiTensor> {
    dims.validate()?;
    let paths = sample_paths(scenario, rng)?;
    csi_from_paths(&paths, dims, subcarrier_spacing, scenario.id)
}

/// Adds circularly-symmetric complex Gaussian noise at the requested SNR,
/// measured against the mean entry power of `h`.
pub fn add_awgn<R: Rng + ?Sized>(h: &CsiTensor, snr_db: f64, rng: &mut R) -> Result<CsiTensor> {
    if snr_db == f64::INFINITY {
        return Ok(h.clone());
    }
    if snr_db.is_nan() {
        return Err(Error::Domain("SNR is NaN".into()));
    }
    let signal = h.mean_power();
    if signal == 0.0 {
        return Err(Error::Degenerate(
            "cannot set a finite SNR on a zero-power channel".into(),
        ));
    }
    let noise_var = signal / 10f64.powf(snr_db / 10.0);
    let sigma = (noise_var / 2.0).sqrt();
    let mut out = h.clone();
    for z in &mut out.data {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *z += Complex64::new(sigma * re, sigma * im);
    }
    Ok(out)
}

/// Multiplies every entry by `exp(j 2 pi delta_f t)`.
pub fn apply_doppler_rotation(h: &CsiTensor, delta_f: f64, snapshot_time: f64) -> CsiTensor {
    let rot = Complex64::from_polar(1.0, 2.0 * PI * delta_f * snapshot_time);
    let mut out = h.clone();
    for z in &mut out.data {
        *z *= rot;
    }
    out
}

/// Rotates each path gain by its own Doppler term `exp(j 2 pi f_d cos(aoa) t)`.
pub fn apply_doppler_per_path(
    paths: &[MultipathComponent],
    max_doppler: f64,
    snapshot_time: f64,
) -> Vec<MultipathComponent> {
    paths
        .iter()
        .map(|p| {
            let phase = 2.0 * PI * max_doppler * p.aoa.cos() * snapshot_time;
            MultipathComponent {
                gain: p.gain * Complex64::from_polar(1.0, phase),
                ..*p
            }
        })
        .collect()
}
