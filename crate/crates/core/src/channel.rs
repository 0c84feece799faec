//! Doubly-selective channel synthesis and application.
//!
//! A channel realization is the full tap matrix `h(n, l)` over one frame:
//! `MN` time samples by `L` delay taps. Taps evolve inside the frame
//! following Jakes' Doppler spectrum, synthesized as a sum of sinusoids with
//! per-seed random arrival angles and phases, so the ensemble
//! autocorrelation of each Rayleigh tap approaches `J0(2 pi f_d tau)`.
//!
//! Two power-delay profiles are available:
//!
//! * `tdl-e`: the 3GPP TDL-E table (14 rows, Rician first tap with a 22 dB
//!   K-factor). Row delays are scaled by the configured delay spread,
//!   quantized to the sample grid `T_s = 1 / (M delta_f)`, and co-quantized
//!   rows have their powers summed. The default delay spread stretches the
//!   longest row onto sample `L - 1`. The LOS ray rides a Doppler shift
//!   `f_d cos(theta)` with a per-seed random angle, like any other ray.
//! * `rayleigh-uniform`: `L` equal-power Rayleigh taps at delays `0..L-1`.
//!
//! The profile is normalized to unit total power, so a zero channel estimate
//! has mean squared error `1/L` in expectation.
//!
//! Application is cyclic (the cyclic prefix is implicit):
//! `y(n) = sum_l h(n, l) x((n - l) mod MN) + w(n)`.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::{seed, C64, Dims};

/// Propagation constant used for Doppler: rounded to the comms convention so
/// 500 km/h at 4 GHz gives 1851.85 Hz.
pub const C_LIGHT: f64 = 3.0e8;

/// Largest frame for which dense `MN x MN` oracle matrices may be built.
pub const DENSE_ORACLE_BOUND: usize = 4096;

/// Maximum Doppler shift in Hz for a speed in km/h and a carrier in Hz.
pub fn max_doppler_hz(speed_kmh: f64, carrier_hz: f64) -> f64 {
    (speed_kmh / 3.6) * carrier_hz / C_LIGHT
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ChannelProfile {
    #[serde(rename = "tdl-e")]
    TdlE,
    #[serde(rename = "rayleigh-uniform")]
    RayleighUniform,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub profile: ChannelProfile,
    /// Mobile speed in km/h.
    pub speed_kmh: f64,
    /// Carrier frequency in Hz.
    pub carrier_hz: f64,
    /// Subcarrier spacing in Hz; the sample rate is `M` times this.
    pub subcarrier_hz: f64,
    /// Channel memory `L` in samples.
    pub num_taps: usize,
    /// RMS-free delay scale in seconds applied to the TDL-E normalized
    /// delays. `None` selects the default that puts the longest row on
    /// sample `L - 1`.
    pub delay_spread_s: Option<f64>,
    /// Sinusoids per Jakes tap.
    pub sinusoid_count: usize,
    /// Default realization seed; sweep drivers pass explicit derived seeds.
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            profile: ChannelProfile::TdlE,
            speed_kmh: 125.0,
            carrier_hz: 4.0e9,
            subcarrier_hz: 15.0e3,
            num_taps: 14,
            delay_spread_s: None,
            sinusoid_count: 32,
            seed: 0,
        }
    }
}

/// One row of the TDL-E table: normalized delay, Rayleigh power in dB, and
/// the specular LOS power in dB when the row is Rician.
#[derive(Debug, Clone, Copy)]
pub struct ProfileTap {
    pub delay_norm: f64,
    pub power_db: f64,
    pub los_db: Option<f64>,
}

/// 3GPP TDL-E rows. The first row carries the LOS ray (-0.03 dB) over a
/// -22.03 dB Rayleigh component, a 22 dB K-factor.
pub fn tdl_e_table() -> &'static [ProfileTap; 14] {
    const T: [ProfileTap; 14] = [
        ProfileTap { delay_norm: 0.0, power_db: -22.03, los_db: Some(-0.03) },
        ProfileTap { delay_norm: 0.5133, power_db: -15.8, los_db: None },
        ProfileTap { delay_norm: 0.5440, power_db: -18.1, los_db: None },
        ProfileTap { delay_norm: 0.5630, power_db: -19.8, los_db: None },
        ProfileTap { delay_norm: 0.5440, power_db: -22.9, los_db: None },
        ProfileTap { delay_norm: 0.7112, power_db: -22.4, los_db: None },
        ProfileTap { delay_norm: 1.9092, power_db: -18.6, los_db: None },
        ProfileTap { delay_norm: 1.9293, power_db: -20.8, los_db: None },
        ProfileTap { delay_norm: 1.9589, power_db: -22.6, los_db: None },
        ProfileTap { delay_norm: 2.6426, power_db: -22.3, los_db: None },
        ProfileTap { delay_norm: 3.7136, power_db: -25.6, los_db: None },
        ProfileTap { delay_norm: 5.4524, power_db: -20.2, los_db: None },
        ProfileTap { delay_norm: 12.0034, power_db: -29.8, los_db: None },
        ProfileTap { delay_norm: 20.6519, power_db: -29.2, los_db: None },
    ];
    &T
}

/// Longest normalized delay in the TDL-E table.
pub const TDL_E_MAX_DELAY_NORM: f64 = 20.6519;

/// Additive noise description for [`apply_channel`].
///
/// `variance = 0` is allowed and means a noiseless run (used by oracles).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    /// Total complex noise variance `sigma^2` (`sigma^2 / 2` per component).
    pub variance: f64,
}

impl NoiseSpec {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance >= 0.0) || !variance.is_finite() {
            return Err(Error::invalid_input(format!(
                "noise variance must be finite and >= 0, got {variance}"
            )));
        }
        Ok(Self { variance })
    }

    pub fn from_snr_db(snr_db: f64) -> Self {
        // Unit-power frames: sigma^2 = 10^(-SNR/10).
        Self { variance: 10f64.powf(-snr_db / 10.0) }
    }
}

/// One channel realization: the tap matrix plus its generation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTaps {
    frame_len: usize,
    num_taps: usize,
    /// Row-major `frame_len x num_taps`: `gains[n * num_taps + l]`.
    gains: Vec<C64>,
    /// Maximum Doppler shift the realization was generated with.
    pub doppler_hz: f64,
    /// Average power per delay bin after quantization and normalization.
    pub avg_powers: Vec<f64>,
}

impl ChannelTaps {
    pub fn new(
        frame_len: usize,
        num_taps: usize,
        gains: Vec<C64>,
        doppler_hz: f64,
        avg_powers: Vec<f64>,
    ) -> Result<Self> {
        if gains.len() != frame_len * num_taps {
            return Err(Error::shape(format!(
                "gain matrix has {} entries, want {} x {}",
                gains.len(),
                frame_len,
                num_taps
            )));
        }
        if avg_powers.len() != num_taps {
            return Err(Error::shape(format!(
                "avg_powers has {} entries, want {num_taps}",
                avg_powers.len()
            )));
        }
        if num_taps == 0 || num_taps > frame_len {
            return Err(Error::invalid_config(format!(
                "channel memory {num_taps} must lie in 1..={frame_len}"
            )));
        }
        Ok(Self { frame_len, num_taps, gains, doppler_hz, avg_powers })
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn num_taps(&self) -> usize {
        self.num_taps
    }

    /// Gain of delay tap `l` at time sample `n`.
    pub fn at(&self, n: usize, l: usize) -> C64 {
        self.gains[n * self.num_taps + l]
    }

    pub fn gains(&self) -> &[C64] {
        &self.gains
    }

    /// Trajectory of one delay tap across the frame.
    pub fn tap_trajectory(&self, l: usize) -> Vec<C64> {
        (0..self.frame_len).map(|n| self.at(n, l)).collect()
    }

    /// Export as CSV rows `n,l,re,im`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "n,l,re,im")?;
        for n in 0..self.frame_len {
            for l in 0..self.num_taps {
                let g = self.at(n, l);
                writeln!(w, "{n},{l},{},{}", g.re, g.im)?;
            }
        }
        Ok(())
    }
}

/// Per-bin average powers for a config, after delay quantization and
/// normalization. Index = delay in samples.
fn quantized_profile(cfg: &ChannelConfig, t_s: f64) -> Result<(Vec<f64>, f64)> {
    let l = cfg.num_taps;
    if l == 0 {
        return Err(Error::invalid_config("channel needs at least one tap"));
    }
    match cfg.profile {
        ChannelProfile::RayleighUniform => Ok((vec![1.0 / l as f64; l], 0.0)),
        ChannelProfile::TdlE => {
            let ds = cfg
                .delay_spread_s
                .unwrap_or_else(|| (l - 1) as f64 * t_s / TDL_E_MAX_DELAY_NORM);
            let mut nlos = vec![0.0f64; l];
            let mut los_linear = 0.0f64;
            for tap in tdl_e_table() {
                let bin = (tap.delay_norm * ds / t_s).round() as usize;
                if bin >= l {
                    return Err(Error::invalid_config(format!(
                        "delay spread {ds:.3e} s maps a {:.4}-normalized tap to sample {bin}, \
                         beyond the channel memory L - 1 = {}",
                        tap.delay_norm,
                        l - 1
                    )));
                }
                nlos[bin] += 10f64.powf(tap.power_db / 10.0);
                if let Some(db) = tap.los_db {
                    debug_assert_eq!(bin, 0, "the LOS ray sits at zero delay");
                    los_linear += 10f64.powf(db / 10.0);
                }
            }
            let total: f64 = nlos.iter().sum::<f64>() + los_linear;
            for p in &mut nlos {
                *p /= total;
            }
            Ok((nlos, los_linear / total))
        }
    }
}

/// Synthesize one channel realization for a frame of geometry `dims`.
///
/// All randomness comes from `seed`; equal seeds give bit-identical taps.
pub fn generate_channel(cfg: &ChannelConfig, dims: Dims, seed_value: u64) -> Result<ChannelTaps> {
    if cfg.sinusoid_count == 0 {
        return Err(Error::invalid_config("sinusoid_count must be positive"));
    }
    if !(cfg.carrier_hz > 0.0) || !(cfg.subcarrier_hz > 0.0) || !(cfg.speed_kmh >= 0.0) {
        return Err(Error::invalid_config(format!(
            "carrier {} Hz, subcarrier {} Hz, speed {} km/h are out of range",
            cfg.carrier_hz, cfg.subcarrier_hz, cfg.speed_kmh
        )));
    }
    let mn = dims.mn();
    let l = cfg.num_taps;
    let t_s = 1.0 / (dims.m as f64 * cfg.subcarrier_hz);
    let f_d = max_doppler_hz(cfg.speed_kmh, cfg.carrier_hz);
    let (rayleigh_powers, los_power) = quantized_profile(cfg, t_s)?;

    let mut rng = seed::rng(seed_value, &[]);
    let mut gains = vec![C64::new(0.0, 0.0); mn * l];
    let omega = 2.0 * std::f64::consts::PI * f_d * t_s;
    let two_pi = 2.0 * std::f64::consts::PI;

    // LOS ray of the Rician bin: one deterministic-amplitude rotating
    // phasor, drawn before the diffuse rays for a stable stream layout.
    if los_power > 0.0 {
        let theta: f64 = rng.random_range(0.0..two_pi);
        let phi: f64 = rng.random_range(0.0..two_pi);
        let amp = los_power.sqrt();
        let step = C64::from_polar(1.0, omega * theta.cos());
        let mut phasor = C64::from_polar(amp, phi);
        for n in 0..mn {
            gains[n * l] += phasor;
            phasor *= step;
        }
    }

    let ns = cfg.sinusoid_count;
    let mut phasors = vec![C64::new(0.0, 0.0); ns];
    let mut steps = vec![C64::new(0.0, 0.0); ns];
    for (bin, &power) in rayleigh_powers.iter().enumerate() {
        if power == 0.0 {
            continue;
        }
        let amp = (power / ns as f64).sqrt();
        for k in 0..ns {
            let theta: f64 = rng.random_range(0.0..two_pi);
            let phi: f64 = rng.random_range(0.0..two_pi);
            phasors[k] = C64::from_polar(amp, phi);
            steps[k] = C64::from_polar(1.0, omega * theta.cos());
        }
        for n in 0..mn {
            let mut s = C64::new(0.0, 0.0);
            for k in 0..ns {
                s += phasors[k];
                phasors[k] *= steps[k];
            }
            gains[n * l + bin] += s;
        }
    }

    let mut avg_powers = rayleigh_powers;
    avg_powers[0] += los_power;
    ChannelTaps::new(mn, l, gains, f_d, avg_powers)
}

/// Pass a time-domain frame through the channel, cyclically, plus AWGN.
pub fn apply_channel(
    taps: &ChannelTaps,
    x_t: &[C64],
    noise: NoiseSpec,
    noise_seed: u64,
) -> Result<Vec<C64>> {
    let mn = taps.frame_len();
    if x_t.len() != mn {
        return Err(Error::shape(format!(
            "input frame has {} samples, channel was generated for {mn}",
            x_t.len()
        )));
    }
    let l = taps.num_taps();
    let mut y = vec![C64::new(0.0, 0.0); mn];
    for n in 0..mn {
        let mut acc = C64::new(0.0, 0.0);
        for d in 0..l {
            acc += taps.at(n, d) * x_t[(n + mn - d) % mn];
        }
        y[n] = acc;
    }
    if noise.variance > 0.0 {
        let mut rng = seed::rng(noise_seed, &[]);
        let s = (noise.variance / 2.0).sqrt();
        for v in &mut y {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v += C64::new(s * re, s * im);
        }
    }
    Ok(y)
}

/// Dense `MN x MN` time-domain channel matrix, for oracle use only.
///
/// Row `n` has `h(n, l)` at column `(n - l) mod MN`. Refuses frames longer
/// than [`DENSE_ORACLE_BOUND`].
pub fn build_channel_matrix(taps: &ChannelTaps) -> Result<nalgebra::DMatrix<C64>> {
    let mn = taps.frame_len();
    if mn > DENSE_ORACLE_BOUND {
        return Err(Error::OracleGuard { frame_len: mn, bound: DENSE_ORACLE_BOUND });
    }
    let mut h = nalgebra::DMatrix::from_element(mn, mn, C64::new(0.0, 0.0));
    for n in 0..mn {
        for l in 0..taps.num_taps() {
            h[(n, (n + mn - l) % mn)] += taps.at(n, l);
        }
    }
    Ok(h)
}

/// Normalized squared tap error `||a - b||_F^2 / (MN L)`.
pub fn channel_mse(truth: &ChannelTaps, estimate: &ChannelTaps) -> Result<f64> {
    if truth.frame_len() != estimate.frame_len() || truth.num_taps() != estimate.num_taps() {
        return Err(Error::shape(format!(
            "tap matrices disagree: {}x{} vs {}x{}",
            truth.frame_len(),
            truth.num_taps(),
            estimate.frame_len(),
            estimate.num_taps()
        )));
    }
    let err: f64 =
        truth.gains().iter().zip(estimate.gains()).map(|(a, b)| (a - b).norm_sqr()).sum();
    Ok(err / (truth.frame_len() * truth.num_taps()) as f64)
}
