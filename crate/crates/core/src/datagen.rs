//! Pilot matrices, Rayleigh channels, Bernoulli activity and SNR-scaled
//! noise, assembled into reproducible datasets.
//!
//! Randomness comes from ChaCha8 streams keyed by `(seed, stream id)`, so a
//! sample depends only on its own key and never on generation order.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array1;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lift_dictionary, lift_signal, CMatrix, RMatrix, RealizedSystem};

/// SNR at or above this value is treated as noiseless.
pub const NOISELESS_SNR_DB: f64 = 300.0;

const STREAM_ACTIVITY: u64 = 0;
const STREAM_CHANNEL: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_PILOT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotKind {
    Gaussian,
    Binary,
    ZadoffChu,
}

impl std::str::FromStr for PilotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "binary" => Ok(Self::Binary),
            "zadoff_chu" | "zc" => Ok(Self::ZadoffChu),
            other => Err(Error::Config(format!("unknown pilot kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_devices: usize,
    pub n_antennas: usize,
    pub pilot_len: usize,
    pub active_prob: f64,
    pub snr_db: f64,
    pub pilot_kind: PilotKind,
    /// Seeds the pilot matrix. Datasets that share it share `S`.
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_devices: 250,
            n_antennas: 6,
            pilot_len: 125,
            active_prob: 0.1,
            snr_db: 40.0,
            pilot_kind: PilotKind::ZadoffChu,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pilot_len == 0 || self.n_devices == 0 || self.n_antennas == 0 {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        if self.pilot_len >= self.n_devices {
            return Err(Error::Config(format!(
                "pilot length {} must be smaller than the device count {}",
                self.pilot_len, self.n_devices
            )));
        }
        if !(self.active_prob > 0.0 && self.active_prob < 1.0) {
            return Err(Error::Config(format!("active_prob must lie in (0,1), got {}", self.active_prob)));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Config("snr_db must be finite".into()));
        }
        Ok(())
    }
}

/// A set of scenes sharing one pilot matrix.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub systems: Vec<RealizedSystem>,
    pub config: SceneConfig,
    pub pilot: CMatrix,
    pub master_seed: u64,
}

impl Dataset {
    pub fn count(&self) -> usize {
        self.systems.len()
    }

    pub fn s_tilde(&self) -> &Arc<RMatrix> {
        &self.systems[0].s_tilde
    }

    /// Sub-dataset of the first `count` scenes.
    pub fn truncated(&self, count: usize) -> Dataset {
        Dataset {
            systems: self.systems[..count.min(self.count())].to_vec(),
            ..self.clone()
        }
    }
}

/// Key for one random stream.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// splitmix64 finalizer, mixes a master seed with a sample index.
pub fn sample_seed(master_seed: u64, index: u64) -> u64 {
    let mut z = master_seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Circular complex normal with unit variance.
fn cn(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn normalize_columns(s: &mut CMatrix) {
    for mut col in s.columns_mut() {
        let norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|z| z / norm);
        }
    }
}

fn largest_prime_at_most(n: usize) -> Option<usize> {
    (2..=n).rev().find(|&p| (2..).take_while(|d| d * d <= p).all(|d| p % d != 0))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Zadoff-Chu root sequence `z_u(n) = exp(-jπ u n (n+1) / P)` for `n < P`.
pub fn zadoff_chu_root(u: usize, p: usize) -> Vec<Complex64> {
    (0..p)
        .map(|n| {
            // reduce u n (n+1) mod 2P before converting to avoid precision loss
            let k = (u as u128 * n as u128 * (n as u128 + 1)) % (2 * p as u128);
            Complex64::from_polar(1.0, -PI * k as f64 / p as f64)
        })
        .collect()
}

/// Columns enumerate `(root, cyclic shift)` pairs in lexicographic order.
///
/// Each root sequence has prime length `P <= L`, is extended cyclically to
/// length `L`, and shifted cyclically by `0..L`.
fn zadoff_chu_matrix(l: usize, n: usize) -> Result<CMatrix> {
    if l < 3 {
        return Err(Error::Config(format!("Zadoff-Chu pilots need L >= 3, got {l}")));
    }
    let p = largest_prime_at_most(l).expect("L >= 3 has a prime below it");
    let mut s = CMatrix::zeros((l, n));
    let mut col = 0;
    'roots: for u in (1..p).filter(|&u| gcd(u, p) == 1) {
        let root = zadoff_chu_root(u, p);
        let extended: Vec<_> = (0..l).map(|i| root[i % p]).collect();
        for shift in 0..l {
            if col == n {
                break 'roots;
            }
            for i in 0..l {
                s[[i, col]] = extended[(i + shift) % l];
            }
            col += 1;
        }
    }
    if col < n {
        return Err(Error::Config(format!(
            "Zadoff-Chu family with L = {l} has only {col} distinct columns, {n} requested"
        )));
    }
    Ok(s)
}

/// `L x N` pilot matrix with unit-norm columns.
pub fn gen_pilot(kind: PilotKind, l: usize, n: usize, seed: u64) -> Result<CMatrix> {
    if l == 0 || n == 0 {
        return Err(Error::Config("pilot dimensions must be positive".into()));
    }
    let mut rng = stream_rng(seed, STREAM_PILOT);
    let mut s = match kind {
        PilotKind::Gaussian => CMatrix::from_shape_simple_fn((l, n), || cn(&mut rng)),
        PilotKind::Binary => CMatrix::from_shape_simple_fn((l, n), || {
            Complex64::new(if rng.gen::<bool>() { 1.0 } else { -1.0 }, 0.0)
        }),
        PilotKind::ZadoffChu => zadoff_chu_matrix(l, n)?,
    };
    normalize_columns(&mut s);
    Ok(s)
}

/// Per-entry noise standard deviation for a target SNR `‖SX‖²/(L M σ²)`.
pub fn snr_noise_sigma(s_x_frob_sq: f64, l: usize, m: usize, snr_db: f64) -> f64 {
    if snr_db >= NOISELESS_SNR_DB || s_x_frob_sq <= 0.0 {
        return 0.0;
    }
    (s_x_frob_sq / ((l * m) as f64 * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Device activity pattern drawn for a sample seed.
pub fn gen_activity(n: usize, active_prob: f64, per_sample_seed: u64) -> Vec<bool> {
    let mut rng = stream_rng(per_sample_seed, STREAM_ACTIVITY);
    (0..n).map(|_| rng.gen::<f64>() < active_prob).collect()
}

/// Draws one scene `Y = S A H + Z` and lifts it.
pub fn gen_instance(
    pilot: &CMatrix,
    s_tilde: &Arc<RMatrix>,
    cfg: &SceneConfig,
    per_sample_seed: u64,
) -> Result<RealizedSystem> {
    let (l, n) = pilot.dim();
    if l != cfg.pilot_len || n != cfg.n_devices {
        return Err(Error::Shape(format!(
            "pilot is {l}x{n}, config expects {}x{}",
            cfg.pilot_len, cfg.n_devices
        )));
    }
    let m = cfg.n_antennas;
    let activity = gen_activity(n, cfg.active_prob, per_sample_seed);
    let mut channel_rng = stream_rng(per_sample_seed, STREAM_CHANNEL);
    let mut x = CMatrix::zeros((n, m));
    for (i, &active) in activity.iter().enumerate() {
        // channels are drawn for every device so activity does not shift the stream
        let h: Array1<Complex64> = (0..m).map(|_| cn(&mut channel_rng)).collect();
        if active {
            x.row_mut(i).assign(&h);
        }
    }
    let sx = pilot.dot(&x);
    let s_x_frob_sq: f64 = sx.iter().map(|z| z.norm_sqr()).sum();
    let sigma = snr_noise_sigma(s_x_frob_sq, l, m, cfg.snr_db);
    let mut noise_rng = stream_rng(per_sample_seed, STREAM_NOISE);
    let z = CMatrix::from_shape_simple_fn((l, m), || cn(&mut noise_rng) * sigma);
    let x_tilde = lift_signal(&x);
    let z_tilde = lift_signal(&z);
    RealizedSystem::from_truth(s_tilde.clone(), x_tilde, &z_tilde)
}

/// Generates `count` scenes with one shared pilot drawn from `cfg.seed`.
pub fn gen_dataset(cfg: &SceneConfig, count: usize, master_seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    let pilot = gen_pilot(cfg.pilot_kind, cfg.pilot_len, cfg.n_devices, cfg.seed)?;
    let s_tilde = Arc::new(lift_dictionary(&pilot));
    let systems = (0..count as u64)
        .into_par_iter()
        .map(|i| gen_instance(&pilot, &s_tilde, cfg, sample_seed(master_seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { systems, config: cfg.clone(), pilot, master_seed })
}

/// Device activity of the lifted ground truth: device `n` is active when
/// either row `n` or row `n + N` is nonzero.
pub fn true_activity(x_tilde: &RMatrix) -> Vec<bool> {
    let n = x_tilde.nrows() / 2;
    (0..n)
        .map(|i| x_tilde.row(i).iter().chain(x_tilde.row(i + n).iter()).any(|&v| v != 0.0))
        .collect()
}
