//! Link-level simulation of OTFS transmission with superimposed pilots.
//!
//! The library covers the full chain: delay-Doppler framing and QPSK mapping
//! ([`modem`]), doubly-selective channel synthesis with Jakes fading and a
//! TDL-E power-delay profile ([`channel`]), complex-exponential basis
//! expansion of the tap trajectories ([`bem`]), superimposed pilot
//! construction in the delay-Doppler or frequency domain ([`pilots`]), the
//! iterative Gaussian message-passing receiver that jointly estimates the
//! channel and detects data ([`receiver`]), and a Monte-Carlo sweep driver
//! with CSV output ([`harness`]).
//!
//! Frames are `M x N` delay-Doppler grids stored column-major (delay index
//! fastest), so flat index `i = m + n * M`. All DFTs are unitary:
//! `F(p, q) = exp(-j 2 pi p q / size) / sqrt(size)`.

pub mod bem;
pub mod channel;
pub mod dft;
pub mod error;
pub mod harness;
pub mod modem;
pub mod pilots;
pub mod receiver;
pub mod seed;

pub use error::{Error, Result};

/// Complex sample type used throughout.
pub type C64 = num_complex::Complex64;

/// Delay-Doppler frame geometry: `m` delay bins by `n` Doppler bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    /// Delay bins per frame (also the number of subcarriers).
    pub m: usize,
    /// Doppler bins per frame (also the number of time symbols).
    pub n: usize,
}

impl Dims {
    pub fn new(m: usize, n: usize) -> Self {
        assert!(m > 0 && n > 0, "frame dimensions must be positive, got {m}x{n}");
        Self { m, n }
    }

    /// Samples per frame.
    pub fn mn(&self) -> usize {
        self.m * self.n
    }
}
