//! Unitary DFT helpers shared by the transmit chain and the receiver.
//!
//! Everything in this crate uses the unitary convention
//! `F(p, q) = exp(-j 2 pi p q / size) / sqrt(size)`, so `F` and its adjoint
//! are exact inverses and transforms preserve energy. [`Dft`] wraps a pair of
//! planned FFTs for one size; construction plans once, application is cheap.

use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::C64;

/// Planned unitary DFT of a fixed size.
#[derive(Clone)]
pub struct Dft {
    size: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for Dft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dft").field("size", &self.size).finish()
    }
}

impl Dft {
    pub fn new(size: usize) -> Self {
        assert!(size > 0, "DFT size must be positive");
        let mut planner = FftPlanner::new();
        Self {
            size,
            fwd: planner.plan_fft_forward(size),
            inv: planner.plan_fft_inverse(size),
            scale: 1.0 / (size as f64).sqrt(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// In-place `x <- F x`.
    pub fn forward_in_place(&self, x: &mut [C64]) {
        assert_eq!(x.len(), self.size, "buffer length {} != DFT size {}", x.len(), self.size);
        self.fwd.process(x);
        for v in x.iter_mut() {
            *v *= self.scale;
        }
    }

    /// In-place `x <- F^H x`.
    pub fn inverse_in_place(&self, x: &mut [C64]) {
        assert_eq!(x.len(), self.size, "buffer length {} != DFT size {}", x.len(), self.size);
        self.inv.process(x);
        for v in x.iter_mut() {
            *v *= self.scale;
        }
    }

    /// Out-of-place `F x`.
    pub fn forward(&self, x: &[C64]) -> Vec<C64> {
        let mut y = x.to_vec();
        self.forward_in_place(&mut y);
        y
    }

    /// Out-of-place `F^H x`.
    pub fn inverse(&self, x: &[C64]) -> Vec<C64> {
        let mut y = x.to_vec();
        self.inverse_in_place(&mut y);
        y
    }
}

/// Dense unitary DFT matrix, for small oracle-sized problems only.
pub fn dense_unitary_matrix(size: usize) -> nalgebra::DMatrix<C64> {
    let scale = 1.0 / (size as f64).sqrt();
    nalgebra::DMatrix::from_fn(size, size, |p, q| {
        let angle = -2.0 * std::f64::consts::PI * (p as f64) * (q as f64) / size as f64;
        C64::from_polar(scale, angle)
    })
}
