//! Superimposed pilot construction.
//!
//! Two schemes are supported. `sp-dd` draws an i.i.d. unit-modulus QPSK
//! pilot frame directly on the delay-Doppler grid. `sp-dd-d` designs the
//! pilot in the frequency domain: a length `P = MN / beta` base sequence is
//! tiled `beta` times in the time domain, which concentrates all pilot power
//! on the comb of tones `{0, beta, 2 beta, ...}` and leaves the remaining
//! tones pilot-free for data. The base sequence is constructed so that every
//! occupied tone carries the same power. Superposition always happens on the
//! DD grid with the scalar split `x = sqrt(rho) x_p + sqrt(1 - rho) x_d`;
//! for the designed scheme `rho = rho_F / beta`, so each occupied comb tone
//! carries pilot power `rho_F` while the frame-average pilot power stays
//! `rho`.
//!
//! The same pilot is kept in all three domains (`x_p_dd`, time `x_p2`,
//! frequency `x_p3`) because the transmitter superimposes in DD while the
//! receiver consumes the frequency-domain form.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::dft::Dft;
use crate::error::{Error, Result};
use crate::{modem, C64, Dims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PilotScheme {
    /// Random DD-domain pilot, full-band (`beta = 1`).
    #[serde(rename = "sp-dd")]
    SpDd,
    /// Designed frequency-comb pilot with spacing `beta`.
    #[serde(rename = "sp-dd-d")]
    SpDdD,
}

impl std::fmt::Display for PilotScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PilotScheme::SpDd => "sp-dd",
            PilotScheme::SpDdD => "sp-dd-d",
        })
    }
}

/// Base sequence family for the designed scheme. Both families put equal
/// power on every occupied tone; they differ in how the phases are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum PilotBase {
    /// Unit-modulus QPSK comb values drawn from the pilot seed.
    #[default]
    #[serde(rename = "random-qpsk")]
    RandomQpsk,
    /// Zadoff-Chu (root 1): constant modulus in time and on the comb.
    #[serde(rename = "zadoff-chu")]
    ZadoffChu,
}

/// A fully constructed pilot: base sequence plus all three domain images.
#[derive(Debug, Clone)]
pub struct PilotSet {
    pub scheme: PilotScheme,
    pub dims: Dims,
    pub beta: usize,
    /// Length-`P` base sequence (`P = MN` for `sp-dd`).
    pub x_p1: Vec<C64>,
    /// Time-domain pilot, length `MN`.
    pub x_p2: Vec<C64>,
    /// Frequency-domain pilot, length `MN`; zero off the comb for `sp-dd-d`.
    pub x_p3: Vec<C64>,
    /// Delay-Doppler pilot, length `MN`; this is what gets superimposed.
    pub x_p_dd: Vec<C64>,
    /// DD-domain pilot power fraction, `rho = rho_f / beta`.
    pub rho: f64,
    /// Per-comb-tone pilot power fraction.
    pub rho_f: f64,
}

impl PilotSet {
    /// Comb length `P = MN / beta`.
    pub fn p(&self) -> usize {
        self.dims.mn() / self.beta
    }

    /// Occupied pilot tones `{0, beta, 2 beta, ...}`.
    pub fn comb_indices(&self) -> Vec<usize> {
        comb_indices(self.dims, self.beta)
    }
}

/// Occupied comb tones for spacing `beta`: multiples of `beta` below `MN`.
pub fn comb_indices(dims: Dims, beta: usize) -> Vec<usize> {
    (0..dims.mn()).step_by(beta).collect()
}

fn check_rho_f(rho_f: f64, beta: usize) -> Result<f64> {
    if !(rho_f > 0.0 && rho_f < 1.0) {
        return Err(Error::invalid_config(format!(
            "per-tone pilot power fraction rho_f must lie in (0, 1), got {rho_f}"
        )));
    }
    Ok(rho_f / beta as f64)
}

fn random_qpsk(len: usize, rng: &mut ChaCha12Rng) -> Vec<C64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let points =
        [C64::new(s, s), C64::new(s, -s), C64::new(-s, s), C64::new(-s, -s)];
    (0..len).map(|_| points[rng.random_range(0..4)]).collect()
}

fn zadoff_chu(len: usize) -> Vec<C64> {
    // Root-1 sequence; the quadratic phase differs between odd and even
    // lengths so that the magnitude stays flat in both domains.
    let p = len as f64;
    (0..len)
        .map(|n| {
            let n = n as f64;
            let phase = if len % 2 == 0 { -std::f64::consts::PI * n * n / p } else {
                -std::f64::consts::PI * n * (n + 1.0) / p
            };
            C64::from_polar(1.0, phase)
        })
        .collect()
}

/// Random DD-domain pilot (`sp-dd`): i.i.d. unit-modulus QPSK on the grid.
pub fn random_dd_pilots(dims: Dims, rho_f: f64, seed: u64) -> Result<PilotSet> {
    let rho = check_rho_f(rho_f, 1)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let x_p_dd = random_qpsk(dims.mn(), &mut rng);
    let frame = modem::DdFrame::new(dims, x_p_dd.clone())?;
    let x_p2 = modem::dd_to_time(&frame);
    let x_p3 = Dft::new(dims.mn()).forward(&x_p2);
    Ok(PilotSet {
        scheme: PilotScheme::SpDd,
        dims,
        beta: 1,
        x_p1: x_p2.clone(),
        x_p2,
        x_p3,
        x_p_dd,
        rho,
        rho_f,
    })
}

/// Designed comb pilot (`sp-dd-d`) with a random QPSK base sequence.
///
/// `channel_len` is the delay memory `L` the receiver will assume; the comb
/// must oversample the channel, so construction requires `P > L`.
pub fn designed_pilots(
    dims: Dims,
    beta: usize,
    rho_f: f64,
    channel_len: usize,
    seed: u64,
) -> Result<PilotSet> {
    designed_pilots_with_base(dims, beta, rho_f, channel_len, PilotBase::RandomQpsk, seed)
}

/// Designed comb pilot with an explicit base-sequence family.
pub fn designed_pilots_with_base(
    dims: Dims,
    beta: usize,
    rho_f: f64,
    channel_len: usize,
    base: PilotBase,
    seed: u64,
) -> Result<PilotSet> {
    let mn = dims.mn();
    if beta == 0 || mn % beta != 0 {
        return Err(Error::invalid_config(format!(
            "comb spacing beta = {beta} must divide the frame length {mn}"
        )));
    }
    let p = mn / beta;
    if p <= channel_len {
        return Err(Error::invalid_config(format!(
            "comb length P = {p} must satisfy P > L (channel memory L = {channel_len}); \
             reduce beta or L"
        )));
    }
    let rho = check_rho_f(rho_f, beta)?;
    let x_p1 = match base {
        PilotBase::RandomQpsk => {
            // The per-tone power fraction rho_f is defined on the comb, so
            // the random values are drawn there and the base sequence is
            // their inverse DFT. Drawing a unit-modulus sequence in time
            // instead would leave the comb Rayleigh-faded (the occupied
            // tones are the base's spectrum), and the channel estimate
            // behind the weak tones would drown in the data interference.
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            Dft::new(p).inverse(&random_qpsk(p, &mut rng))
        }
        PilotBase::ZadoffChu => zadoff_chu(p),
    };
    // beta-fold periodic extension in time puts all power on the comb.
    let x_p2: Vec<C64> = (0..mn).map(|i| x_p1[i % p]).collect();
    let x_p3 = Dft::new(mn).forward(&x_p2);
    let x_p_dd = modem::time_to_dd(&x_p2, dims)?.into_vec();
    Ok(PilotSet { scheme: PilotScheme::SpDdD, dims, beta, x_p1, x_p2, x_p3, x_p_dd, rho, rho_f })
}
