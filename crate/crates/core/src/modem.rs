//! Delay-Doppler framing, symbol mapping, and the DD <-> time transforms.
//!
//! A frame is an `M x N` grid of complex symbols stored column-major so that
//! the delay index runs fastest: flat index `i = m + n * M`. Modulation to
//! the time domain applies the inverse Doppler DFT along each delay row,
//! `x_T = vec(X_DD F_N^H)`, which is the combined ISFFT + Heisenberg step for
//! a rectangular pulse; demodulation is the adjoint. Both are unitary.
//!
//! ```
//! use otfs_sp::{modem, Dims};
//!
//! let cfg = modem::ModemConfig::qpsk(Dims::new(4, 2));
//! let bits: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
//! let frame = modem::map_bits(&bits, &cfg).unwrap();
//! let x_t = modem::dd_to_time(&frame);
//! let back = modem::time_to_dd(&x_t, frame.dims()).unwrap();
//! assert!((back.as_slice()[3] - frame.as_slice()[3]).norm() < 1e-12);
//! ```

use crate::dft::Dft;
use crate::error::{Error, Result};
use crate::{C64, Dims};

/// Tolerance on the unit-mean-energy check of a constellation.
const ENERGY_TOL: f64 = 1e-12;

/// Frame geometry plus the bit-labeled constellation.
///
/// `constellation[v]` is the point whose bit label, read MSB first, is the
/// integer `v`. The default QPSK alphabet is Gray labeled:
/// `(b0, b1) -> ((1 - 2 b0) + j (1 - 2 b1)) / sqrt(2)`, so `00 -> (1+j)/sqrt2`
/// and `11 -> (-1-j)/sqrt2`, and neighbors on the circle differ in one bit.
#[derive(Debug, Clone)]
pub struct ModemConfig {
    pub dims: Dims,
    pub constellation: Vec<C64>,
}

impl ModemConfig {
    pub fn qpsk(dims: Dims) -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let constellation = vec![
            C64::new(s, s),   // 00
            C64::new(s, -s),  // 01
            C64::new(-s, s),  // 10
            C64::new(-s, -s), // 11
        ];
        Self { dims, constellation }
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.constellation.len().trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.constellation.len();
        if a < 2 || !a.is_power_of_two() {
            return Err(Error::invalid_config(format!(
                "constellation size must be a power of two >= 2, got {a}"
            )));
        }
        let mean_energy = self.constellation.iter().map(C64::norm_sqr).sum::<f64>() / a as f64;
        if (mean_energy - 1.0).abs() > ENERGY_TOL {
            return Err(Error::invalid_config(format!(
                "constellation mean energy must be 1, got {mean_energy}"
            )));
        }
        Ok(())
    }
}

/// An `M x N` delay-Doppler grid, column-major with delay fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DdFrame {
    dims: Dims,
    data: Vec<C64>,
}

impl DdFrame {
    pub fn new(dims: Dims, data: Vec<C64>) -> Result<Self> {
        if data.len() != dims.mn() {
            return Err(Error::shape(format!(
                "frame data has {} samples, geometry {}x{} needs {}",
                data.len(),
                dims.m,
                dims.n,
                dims.mn()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { data: vec![C64::new(0.0, 0.0); dims.mn()], dims }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Sample at delay `m`, Doppler `n`.
    pub fn at(&self, m: usize, n: usize) -> C64 {
        self.data[m + n * self.dims.m]
    }

    pub fn at_mut(&mut self, m: usize, n: usize) -> &mut C64 {
        &mut self.data[m + n * self.dims.m]
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }
}

/// Map a bit stream onto one full frame of constellation symbols.
///
/// `bits` must hold exactly `M * N * bits_per_symbol` values in `{0, 1}`,
/// grouped MSB first per symbol.
pub fn map_bits(bits: &[u8], cfg: &ModemConfig) -> Result<DdFrame> {
    cfg.validate()?;
    let k = cfg.bits_per_symbol();
    if bits.len() % k != 0 {
        return Err(Error::invalid_input(format!(
            "bit count {} is not divisible by {} bits per symbol",
            bits.len(),
            k
        )));
    }
    if bits.len() / k != cfg.dims.mn() {
        return Err(Error::invalid_input(format!(
            "{} bits map to {} symbols but the frame holds {}",
            bits.len(),
            bits.len() / k,
            cfg.dims.mn()
        )));
    }
    let mut data = Vec::with_capacity(cfg.dims.mn());
    for chunk in bits.chunks(k) {
        let mut idx = 0usize;
        for &b in chunk {
            if b > 1 {
                return Err(Error::invalid_input(format!("bits must be 0 or 1, got {b}")));
            }
            idx = (idx << 1) | b as usize;
        }
        data.push(cfg.constellation[idx]);
    }
    DdFrame::new(cfg.dims, data)
}

/// Bit label (MSB first) of constellation index `idx`.
pub fn index_to_bits(idx: usize, bits_per_symbol: usize) -> Vec<u8> {
    (0..bits_per_symbol).map(|t| ((idx >> (bits_per_symbol - 1 - t)) & 1) as u8).collect()
}

/// Superimpose a pilot frame on a data frame:
/// `x = sqrt(rho) x_p + sqrt(1 - rho) x_d`.
pub fn superimpose(data: &DdFrame, pilot: &[C64], rho: f64) -> Result<DdFrame> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid_input(format!(
            "pilot power fraction rho must lie in (0, 1), got {rho}"
        )));
    }
    if pilot.len() != data.as_slice().len() {
        return Err(Error::shape(format!(
            "pilot has {} samples, data frame has {}",
            pilot.len(),
            data.as_slice().len()
        )));
    }
    let (sp, sd) = (rho.sqrt(), (1.0 - rho).sqrt());
    let mixed =
        data.as_slice().iter().zip(pilot).map(|(d, p)| sp * p + sd * d).collect::<Vec<_>>();
    DdFrame::new(data.dims(), mixed)
}

/// Modulate a DD frame to the time domain: `x_T = vec(X_DD F_N^H)`.
pub fn dd_to_time(frame: &DdFrame) -> Vec<C64> {
    dd_to_time_with(&Dft::new(frame.dims().n), frame.dims(), frame.as_slice())
}

/// Demodulate time samples back to the DD grid: `X_DD = unvec(x_T) F_N`.
pub fn time_to_dd(x_t: &[C64], dims: Dims) -> Result<DdFrame> {
    if x_t.len() != dims.mn() {
        return Err(Error::shape(format!(
            "time frame has {} samples, geometry needs {}",
            x_t.len(),
            dims.mn()
        )));
    }
    DdFrame::new(dims, time_to_dd_with(&Dft::new(dims.n), dims, x_t))
}

/// `dd_to_time` against a caller-planned Doppler DFT (hot-loop form).
pub fn dd_to_time_with(dft_n: &Dft, dims: Dims, x_dd: &[C64]) -> Vec<C64> {
    assert_eq!(dft_n.size(), dims.n, "Doppler DFT size must equal N");
    assert_eq!(x_dd.len(), dims.mn());
    let mut out = vec![C64::new(0.0, 0.0); dims.mn()];
    let mut row = vec![C64::new(0.0, 0.0); dims.n];
    for m in 0..dims.m {
        for n in 0..dims.n {
            row[n] = x_dd[m + n * dims.m];
        }
        dft_n.inverse_in_place(&mut row);
        for n in 0..dims.n {
            out[m + n * dims.m] = row[n];
        }
    }
    out
}

/// `time_to_dd` against a caller-planned Doppler DFT (hot-loop form).
pub fn time_to_dd_with(dft_n: &Dft, dims: Dims, x_t: &[C64]) -> Vec<C64> {
    assert_eq!(dft_n.size(), dims.n, "Doppler DFT size must equal N");
    assert_eq!(x_t.len(), dims.mn());
    let mut out = vec![C64::new(0.0, 0.0); dims.mn()];
    let mut row = vec![C64::new(0.0, 0.0); dims.n];
    for m in 0..dims.m {
        for n in 0..dims.n {
            row[n] = x_t[m + n * dims.m];
        }
        dft_n.forward_in_place(&mut row);
        for n in 0..dims.n {
            out[m + n * dims.m] = row[n];
        }
    }
    out
}

/// Per-symbol posterior probabilities over the constellation, one row per
/// frame sample. Rows are kept normalized to sum 1.
#[derive(Debug, Clone)]
pub struct SymbolBeliefs {
    arity: usize,
    probs: Vec<f64>,
}

impl SymbolBeliefs {
    pub fn uniform(symbols: usize, arity: usize) -> Self {
        assert!(arity >= 2, "constellation arity must be at least 2");
        Self { arity, probs: vec![1.0 / arity as f64; symbols * arity] }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn len(&self) -> usize {
        self.probs.len() / self.arity
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.arity..(i + 1) * self.arity]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.probs[i * self.arity..(i + 1) * self.arity]
    }

    pub fn set_one_hot(&mut self, i: usize, idx: usize) {
        let row = self.row_mut(i);
        row.fill(0.0);
        row[idx] = 1.0;
    }

    /// Hard decision per symbol: argmax, ties to the lowest index.
    pub fn argmax(&self) -> Vec<u8> {
        (0..self.len())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0usize;
                for (a, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = a;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Rows must be nonnegative and sum to 1 within 1e-12.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.len() {
            let row = self.row(i);
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::invalid_input(format!("belief row {i} has a negative entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::invalid_input(format!("belief row {i} sums to {s}, not 1")));
            }
        }
        Ok(())
    }
}

/// Hard symbols and bits from beliefs (argmax, ties to the lowest index).
pub fn decide_symbols(beliefs: &SymbolBeliefs, cfg: &ModemConfig) -> (Vec<C64>, Vec<u8>) {
    let k = cfg.bits_per_symbol();
    let idx = beliefs.argmax();
    let symbols = idx.iter().map(|&v| cfg.constellation[v as usize]).collect();
    let bits = idx.iter().flat_map(|&v| index_to_bits(v as usize, k)).collect();
    (symbols, bits)
}
