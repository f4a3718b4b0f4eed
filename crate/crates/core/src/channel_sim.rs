//! Parametric street-canyon channel simulator.
//!
//! Each environment is a rectangular street segment with a base station (BS)
//! at a fixed relative location and a set of point scatterers on the two long
//! building facades. A UE position sees the line-of-sight (LOS) path, unless
//! its 1 m grid cell is marked blocked, plus one single-bounce path per
//! scatterer. Channels are evaluated on a comb of pilot subcarriers for a
//! ULA at the BS and a horizontal URA at the UE.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Identifier of a propagation environment (street segment).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct EnvId(pub u32);

impl std::fmt::Display for EnvId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Radio parameters shared by every environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub carrier_freq_hz: f64,
    pub bandwidth_hz: f64,
    pub total_subcarriers: usize,
    pub comb_factor: usize,
    /// Number of pilot subcarriers kept (the first `N_C` teeth of the comb).
    pub num_pilot_subcarriers: usize,
    pub n_rx: usize,
    pub n_tx: usize,
    pub tx_power_dbm_per_antenna: f64,
    pub noise_floor_dbm_hz: f64,
    pub noise_figure_db: f64,
    /// Element spacing in carrier wavelengths, both arrays.
    pub element_spacing: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            carrier_freq_hz: 3.5e9,
            bandwidth_hz: 100e6,
            total_subcarriers: 1024,
            comb_factor: 10,
            num_pilot_subcarriers: 52,
            n_rx: 8,
            n_tx: 4,
            tx_power_dbm_per_antenna: 23.0,
            noise_floor_dbm_hz: -174.0,
            noise_figure_db: 2.0,
            element_spacing: 0.5,
        }
    }
}

impl RadioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_pilot_subcarriers == 0 {
            return Err(Error::config("num_pilot_subcarriers must be at least 1"));
        }
        if self.comb_factor == 0 {
            return Err(Error::config("comb_factor must be at least 1"));
        }
        if self
            .num_pilot_subcarriers
            .checked_mul(self.comb_factor)
            .map_or(true, |used| used > self.total_subcarriers)
        {
            return Err(Error::config(format!(
                "{} pilots at comb factor {} exceed {} subcarriers",
                self.num_pilot_subcarriers, self.comb_factor, self.total_subcarriers
            )));
        }
        if self.n_rx == 0 || self.n_tx == 0 {
            return Err(Error::config("antenna counts must be at least 1"));
        }
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz.is_finite()) {
            return Err(Error::config("bandwidth_hz must be positive"));
        }
        if !(self.carrier_freq_hz > 0.0 && self.carrier_freq_hz.is_finite()) {
            return Err(Error::config("carrier_freq_hz must be positive"));
        }
        if !self.element_spacing.is_finite() {
            return Err(Error::config("element_spacing must be finite"));
        }
        Ok(())
    }

    /// `N_A = N_R * N_T`.
    pub fn num_antenna_pairs(&self) -> usize {
        self.n_rx * self.n_tx
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq_hz
    }

    pub fn subcarrier_spacing_hz(&self) -> f64 {
        self.bandwidth_hz / self.total_subcarriers as f64
    }

    /// Absolute frequency of pilot `c`: the carrier plus `c` comb steps.
    pub fn pilot_frequency(&self, c: usize) -> f64 {
        self.carrier_freq_hz + (c * self.comb_factor) as f64 * self.subcarrier_spacing_hz()
    }

    /// Per-entry complex noise variance in channel-gain units: thermal noise
    /// over one subcarrier divided by the per-antenna transmit power.
    pub fn noise_variance(&self) -> f64 {
        let noise_dbm = self.noise_floor_dbm_hz
            + self.noise_figure_db
            + 10.0 * self.subcarrier_spacing_hz().log10();
        db_to_linear(noise_dbm - self.tx_power_dbm_per_antenna)
    }

    /// Layout `(nx, ny)` of the UE URA, `nx * ny = n_tx`, as square as possible.
    pub fn ura_dims(&self) -> (usize, usize) {
        let n = self.n_tx;
        let mut ny = (n as f64).sqrt().floor() as usize;
        while ny > 1 && n % ny != 0 {
            ny -= 1;
        }
        let ny = ny.max(1);
        (n / ny, ny)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Street-segment rectangle `[0, length] x [0, width]` and BS placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub length_m: f64,
    pub width_m: f64,
    /// BS location as a fraction of `(length, width)`; may lie outside `[0, 1]`
    /// so the BS sits on or behind a facade.
    pub bs_relative: [f64; 2],
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            length_m: 60.0,
            width_m: 20.0,
            bs_relative: [0.5, 1.1],
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.length_m) || !ok(self.width_m) {
            return Err(Error::InvalidGeometry(format!(
                "area {} x {} m is degenerate",
                self.length_m, self.width_m
            )));
        }
        if !self.bs_relative.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite BS location".into()));
        }
        Ok(())
    }

    pub fn bs_position(&self) -> [f64; 2] {
        [
            self.bs_relative[0] * self.length_m,
            self.bs_relative[1] * self.width_m,
        ]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0.0..=self.length_m).contains(&p[0]) && (0.0..=self.width_m).contains(&p[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scatterer {
    pub position: [f64; 2],
    /// Complex reflection coefficient, `|reflection| <= 1`.
    pub reflection: Complex64,
}

/// Hash-based LOS blockage over square grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LosBlockage {
    pub cell_size_m: f64,
    pub blocked_fraction: f64,
}

impl Default for LosBlockage {
    fn default() -> Self {
        Self {
            cell_size_m: 1.0,
            blocked_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    pub env_id: EnvId,
    pub seed: u64,
    pub geometry: Geometry,
    pub bs_position: [f64; 2],
    /// Orientation of the BS ULA axis, radians from the street (x) axis.
    pub bs_array_orientation: f64,
    pub scatterers: Vec<Scatterer>,
    pub los_blockage: LosBlockage,
}

impl Environment {
    pub fn los_blocked(&self, p: [f64; 2]) -> bool {
        let b = &self.los_blockage;
        if b.blocked_fraction <= 0.0 {
            return false;
        }
        let cx = (p[0] / b.cell_size_m).floor() as i64;
        let cy = (p[1] / b.cell_size_m).floor() as i64;
        let h = rng::derive_seed(self.seed, &[tag::BLOCKAGE, cx as u64, cy as u64]);
        rng::unit_f64(h) < b.blocked_fraction
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates an environment description.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let env: Environment = serde_json::from_slice(bytes)?;
        env.geometry.validate()?;
        let bs = env.geometry.bs_position();
        if bs != env.bs_position {
            return Err(Error::InvalidGeometry(
                "bs_position disagrees with geometry.bs_relative".into(),
            ));
        }
        if !(env.los_blockage.cell_size_m > 0.0 && env.los_blockage.cell_size_m.is_finite()) {
            return Err(Error::InvalidGeometry("blockage cell size must be positive".into()));
        }
        for s in &env.scatterers {
            if !s.position.iter().all(|v| v.is_finite())
                || !(s.reflection.norm() <= 1.0 && s.reflection.norm() > 0.0)
            {
                return Err(Error::InvalidGeometry("invalid scatterer".into()));
            }
        }
        Ok(env)
    }
}

/// Samples an environment: scatterers on the two long facades (`y = 0` and
/// `y = width`) with seeded positions and reflection coefficients.
pub fn build_environment(
    env_id: EnvId,
    seed: u64,
    geometry: &Geometry,
    num_scatterers: usize,
) -> Result<Environment> {
    geometry.validate()?;
    let mut rng = rng::rng_for(seed, &[tag::SCATTERERS, env_id.0 as u64]);
    let scatterers = (0..num_scatterers)
        .map(|_| {
            let x = rng.gen_range(0.0..=geometry.length_m);
            let y = if rng.gen_bool(0.5) { 0.0 } else { geometry.width_m };
            let magnitude: f64 = rng.gen_range(0.3..0.9);
            let phase: f64 = rng.gen_range(0.0..2.0 * PI);
            Scatterer {
                position: [x, y],
                reflection: Complex64::from_polar(magnitude, phase),
            }
        })
        .collect();
    Ok(Environment {
        env_id,
        seed,
        geometry: geometry.clone(),
        bs_position: geometry.bs_position(),
        bs_array_orientation: 0.0,
        scatterers,
        los_blockage: LosBlockage::default(),
    })
}

/// One propagation path between the UE and the BS.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub delay_s: f64,
    /// Free-space amplitude times the reflection coefficient (unit for LOS).
    pub complex_gain: Complex64,
    /// Angle of arrival at the BS, measured from the ULA broadside.
    pub aoa: f64,
    /// Azimuth of departure at the UE, from the x axis.
    pub aod_azimuth: f64,
    /// Elevation of departure. Always zero in this planar model.
    pub aod_elevation: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn free_space_amplitude(wavelength: f64, length: f64) -> f64 {
    wavelength / (4.0 * PI * length)
}

impl Environment {
    /// AoA of a wave arriving at the BS from `from`, relative to broadside.
    fn arrival_angle(&self, from: [f64; 2]) -> f64 {
        let v = [from[0] - self.bs_position[0], from[1] - self.bs_position[1]];
        let (s, c) = self.bs_array_orientation.sin_cos();
        let along = v[0] * c + v[1] * s;
        // Broadside points into the street, away from the facade the BS sits on.
        let normal = v[0] * s - v[1] * c;
        along.atan2(normal)
    }
}

/// Enumerates the LOS path (if unblocked) and one bounce per scatterer.
pub fn enumerate_paths(env: &Environment, p: [f64; 2], radio: &RadioConfig) -> Result<Vec<Path>> {
    if !env.geometry.contains(p) {
        return Err(Error::OutOfBounds { x: p[0], y: p[1] });
    }
    let wavelength = radio.wavelength();
    let bs = env.bs_position;
    let mut paths = Vec::with_capacity(env.scatterers.len() + 1);
    if !env.los_blocked(p) {
        let d = dist(p, bs);
        paths.push(Path {
            delay_s: d / SPEED_OF_LIGHT,
            complex_gain: Complex64::new(free_space_amplitude(wavelength, d), 0.0),
            aoa: env.arrival_angle(p),
            aod_azimuth: (bs[1] - p[1]).atan2(bs[0] - p[0]),
            aod_elevation: 0.0,
        });
    }
    for s in &env.scatterers {
        let length = dist(p, s.position) + dist(s.position, bs);
        paths.push(Path {
            delay_s: length / SPEED_OF_LIGHT,
            complex_gain: s.reflection * free_space_amplitude(wavelength, length),
            aoa: env.arrival_angle(s.position),
            aod_azimuth: (s.position[1] - p[1]).atan2(s.position[0] - p[0]),
            aod_elevation: 0.0,
        });
    }
    Ok(paths)
}

/// Raw channel: `N_A x N_C` complex matrix, row `k * N_T + m` for receive
/// antenna `k` and transmit antenna `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCsi {
    pub n_rx: usize,
    pub n_tx: usize,
    pub n_sub: usize,
    pub entries: Vec<Complex64>,
    pub ue_position: [f64; 2],
    pub env_id: EnvId,
    /// Set when no path reached the BS; `entries` are then all zero.
    pub no_paths: bool,
}

impl RawCsi {
    pub fn num_rows(&self) -> usize {
        self.n_rx * self.n_tx
    }

    pub fn get(&self, row: usize, c: usize) -> Complex64 {
        self.entries[row * self.n_sub + c]
    }

    pub fn antenna_pair(&self, k: usize, m: usize, c: usize) -> Complex64 {
        self.get(k * self.n_tx + m, c)
    }

    /// Per-transmit-antenna `N_C x N_R` matrices `H^m`, row-major.
    pub fn per_tx_matrices(&self) -> Vec<Vec<Complex64>> {
        (0..self.n_tx)
            .map(|m| {
                let mut out = Vec::with_capacity(self.n_sub * self.n_rx);
                for c in 0..self.n_sub {
                    for k in 0..self.n_rx {
                        out.push(self.antenna_pair(k, m, c));
                    }
                }
                out
            })
            .collect()
    }
}

/// ULA response at receive element `k`.
pub fn ula_response(k: usize, aoa: f64, spacing: f64) -> Complex64 {
    Complex64::from_polar(1.0, -2.0 * PI * spacing * k as f64 * aoa.sin())
}

/// Horizontal URA response at transmit element `m` (row-major over `nx`).
pub fn ura_response(m: usize, nx: usize, azimuth: f64, elevation: f64, spacing: f64) -> Complex64 {
    let (ix, iy) = ((m % nx) as f64, (m / nx) as f64);
    let phase = -2.0 * PI * spacing * elevation.cos() * (ix * azimuth.cos() + iy * azimuth.sin());
    Complex64::from_polar(1.0, phase)
}

/// Evaluates the multipath sum for an explicit path list.
pub fn synth_from_paths(
    paths: &[Path],
    ue_position: [f64; 2],
    env_id: EnvId,
    radio: &RadioConfig,
) -> Result<RawCsi> {
    radio.validate()?;
    let (n_rx, n_tx, n_sub) = (radio.n_rx, radio.n_tx, radio.num_pilot_subcarriers);
    let (nx, _) = radio.ura_dims();
    let mut entries = vec![Complex64::new(0.0, 0.0); n_rx * n_tx * n_sub];
    let freqs: Vec<f64> = (0..n_sub).map(|c| radio.pilot_frequency(c)).collect();
    for path in paths {
        let rx: Vec<Complex64> = (0..n_rx)
            .map(|k| ula_response(k, path.aoa, radio.element_spacing))
            .collect();
        let tx: Vec<Complex64> = (0..n_tx)
            .map(|m| {
                ura_response(m, nx, path.aod_azimuth, path.aod_elevation, radio.element_spacing)
            })
            .collect();
        let tones: Vec<Complex64> = freqs
            .iter()
            .map(|f| path.complex_gain * phase_rotation(f * path.delay_s))
            .collect();
        for k in 0..n_rx {
            for m in 0..n_tx {
                let array = rx[k] * tx[m];
                let row = &mut entries[(k * n_tx + m) * n_sub..][..n_sub];
                for (e, t) in row.iter_mut().zip(&tones) {
                    *e += *t * array;
                }
            }
        }
    }
    Ok(RawCsi {
        n_rx,
        n_tx,
        n_sub,
        entries,
        ue_position,
        env_id,
        no_paths: paths.is_empty(),
    })
}

/// `exp(-j 2 pi cycles)`, reducing the cycle count first so large `f * tau`
/// products keep their fractional precision.
fn phase_rotation(cycles: f64) -> Complex64 {
    let frac = cycles - cycles.floor();
    Complex64::from_polar(1.0, -2.0 * PI * frac)
}

/// Noise-free channel at UE position `p`.
pub fn synth_channel(env: &Environment, p: [f64; 2], radio: &RadioConfig) -> Result<RawCsi> {
    radio.validate()?;
    let paths = enumerate_paths(env, p, radio)?;
    synth_from_paths(&paths, p, env.env_id, radio)
}

/// Adds circularly-symmetric complex Gaussian noise at the radio's thermal
/// noise level relative to the per-antenna transmit power.
pub fn apply_noise(csi: &RawCsi, radio: &RadioConfig, rng_seed: u64) -> RawCsi {
    apply_noise_with_variance(csi, radio.noise_variance(), rng_seed)
}

/// Adds `CN(0, variance)` noise to every entry.
pub fn apply_noise_with_variance(csi: &RawCsi, variance: f64, rng_seed: u64) -> RawCsi {
    let mut out = csi.clone();
    if variance <= 0.0 {
        return out;
    }
    let std = (variance / 2.0).sqrt();
    let mut rng = rng::rng_for(rng_seed, &[tag::NOISE]);
    for e in &mut out.entries {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *e += Complex64::new(re * std, im * std);
    }
    out
}
