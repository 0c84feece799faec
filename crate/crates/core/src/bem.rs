//! Basis expansion of tap trajectories in complex exponentials.
//!
//! Each delay tap's time evolution over one frame is modeled as a weighted
//! sum of `Q` oversampled complex exponentials,
//! `b_q(n) = exp(j 2 pi n (q - (Q-1)/2) / (K_os MN))`, a generalized CE
//! basis whose frequencies straddle zero on a grid `K_os` times finer than
//! the frame resolution. `Q` must be odd so the grid is symmetric. With
//! `K_os = 2` (the default elsewhere in the crate) the basis covers Doppler
//! up to `(Q-1) / (4 T_frame)` with little edge leakage; `K_os = 1` is
//! accepted for critically-sampled experiments but leaks noticeably at the
//! frame edges.
//!
//! [`ls_fit`] projects a realized channel onto the basis per delay tap and
//! is the modeling-error oracle: the receiver can never beat its residual.

use crate::channel::{ChannelTaps, DENSE_ORACLE_BOUND};
use crate::dft::{dense_unitary_matrix, Dft};
use crate::error::{Error, Result};
use crate::C64;

/// Sampled basis: `frame_len` rows by `q_order` columns, column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BemBasis {
    frame_len: usize,
    q_order: usize,
    k_os: usize,
    data: Vec<C64>,
}

impl BemBasis {
    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn q_order(&self) -> usize {
        self.q_order
    }

    pub fn k_os(&self) -> usize {
        self.k_os
    }

    /// Basis sample `b_q(n)`.
    pub fn at(&self, n: usize, q: usize) -> C64 {
        self.data[q * self.frame_len + n]
    }

    /// Column `q` as a contiguous slice over `n`.
    pub fn column(&self, q: usize) -> &[C64] {
        &self.data[q * self.frame_len..(q + 1) * self.frame_len]
    }
}

/// Sample the generalized CE basis for a frame of `frame_len` samples.
pub fn gce_basis(frame_len: usize, q_order: usize, k_os: usize) -> Result<BemBasis> {
    if q_order == 0 || q_order % 2 == 0 {
        return Err(Error::invalid_config(format!(
            "basis order Q must be odd and positive, got {q_order}"
        )));
    }
    if k_os == 0 {
        return Err(Error::invalid_config("oversampling factor K_os must be >= 1"));
    }
    if frame_len == 0 {
        return Err(Error::invalid_config("frame length must be positive"));
    }
    let center = (q_order - 1) as f64 / 2.0;
    let denom = (k_os * frame_len) as f64;
    let mut data = Vec::with_capacity(frame_len * q_order);
    for q in 0..q_order {
        let freq = q as f64 - center;
        for n in 0..frame_len {
            let phase = 2.0 * std::f64::consts::PI * n as f64 * freq / denom;
            data.push(C64::from_polar(1.0, phase));
        }
    }
    Ok(BemBasis { frame_len, q_order, k_os, data })
}

/// Fitted coefficients: `num_taps` rows by `q_order` columns, column-major.
/// These are on the tap scale: `h(n, l) ~= sum_q b_q(n) * at(l, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BemCoeffs {
    num_taps: usize,
    q_order: usize,
    data: Vec<C64>,
}

impl BemCoeffs {
    pub fn new(num_taps: usize, q_order: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != num_taps * q_order {
            return Err(Error::shape(format!(
                "coefficient matrix has {} entries, want {num_taps} x {q_order}",
                data.len()
            )));
        }
        Ok(Self { num_taps, q_order, data })
    }

    pub fn zeros(num_taps: usize, q_order: usize) -> Self {
        Self { num_taps, q_order, data: vec![C64::new(0.0, 0.0); num_taps * q_order] }
    }

    pub fn num_taps(&self) -> usize {
        self.num_taps
    }

    pub fn q_order(&self) -> usize {
        self.q_order
    }

    pub fn at(&self, l: usize, q: usize) -> C64 {
        self.data[q * self.num_taps + l]
    }

    pub fn at_mut(&mut self, l: usize, q: usize) -> &mut C64 {
        &mut self.data[q * self.num_taps + l]
    }

    /// Coefficients of basis function `q` across the delay taps.
    pub fn column(&self, q: usize) -> &[C64] {
        &self.data[q * self.num_taps..(q + 1) * self.num_taps]
    }
}

/// Least-squares projection of a realized channel onto a basis, solved per
/// delay tap through the normal equations (`Q` is small and the oversampled
/// CE Gram matrix is well conditioned).
pub fn ls_fit(taps: &ChannelTaps, basis: &BemBasis) -> Result<BemCoeffs> {
    let mn = taps.frame_len();
    if basis.frame_len() != mn {
        return Err(Error::shape(format!(
            "basis covers {} samples, channel has {mn}",
            basis.frame_len()
        )));
    }
    let q = basis.q_order();
    let l_taps = taps.num_taps();
    let b = nalgebra::DMatrix::from_fn(mn, q, |n, j| basis.at(n, j));
    let bh = b.adjoint();
    let gram = &bh * &b;
    let lu = gram.lu();
    let mut data = vec![C64::new(0.0, 0.0); l_taps * q];
    for l in 0..l_taps {
        let h = nalgebra::DVector::from_fn(mn, |n, _| taps.at(n, l));
        let rhs = &bh * &h;
        let sol = lu.solve(&rhs).ok_or_else(|| {
            Error::invalid_config(format!("basis Gram matrix is singular for Q = {q}"))
        })?;
        for j in 0..q {
            data[j * l_taps + l] = sol[j];
        }
    }
    BemCoeffs::new(l_taps, q, data)
}

/// Expand coefficients back to a full tap matrix,
/// `h_hat(n, l) = sum_q b_q(n) c(l, q)`.
///
/// The result's Doppler metadata is zeroed (a fit has none); its per-bin
/// powers are the empirical powers of the reconstruction.
pub fn reconstruct_taps(coeffs: &BemCoeffs, basis: &BemBasis) -> Result<ChannelTaps> {
    let mn = basis.frame_len();
    let q_order = basis.q_order();
    if coeffs.q_order() != q_order {
        return Err(Error::shape(format!(
            "coefficients have order {}, basis has {q_order}",
            coeffs.q_order()
        )));
    }
    let l_taps = coeffs.num_taps();
    let mut gains = vec![C64::new(0.0, 0.0); mn * l_taps];
    for q in 0..q_order {
        let bq = basis.column(q);
        let cq = coeffs.column(q);
        for n in 0..mn {
            let row = &mut gains[n * l_taps..(n + 1) * l_taps];
            let b = bq[n];
            for (g, c) in row.iter_mut().zip(cq) {
                *g += b * c;
            }
        }
    }
    let mut avg_powers = vec![0.0f64; l_taps];
    for n in 0..mn {
        for l in 0..l_taps {
            avg_powers[l] += gains[n * l_taps + l].norm_sqr();
        }
    }
    for p in &mut avg_powers {
        *p /= mn as f64;
    }
    ChannelTaps::new(mn, l_taps, gains, 0.0, avg_powers)
}

/// Dense circulant factor `C_q = F^H diag(F_{MN x L} c_q) F`, for oracle
/// use only; `c_q` here is on the sqrt(MN)-scaled frequency convention, so
/// the first column of the result is `[c_q; 0] / sqrt(MN)`.
pub fn build_cq_matrix(c_q: &[C64], frame_len: usize) -> Result<nalgebra::DMatrix<C64>> {
    if frame_len > DENSE_ORACLE_BOUND {
        return Err(Error::OracleGuard { frame_len, bound: DENSE_ORACLE_BOUND });
    }
    if c_q.len() > frame_len {
        return Err(Error::shape(format!(
            "coefficient vector of length {} does not fit a frame of {frame_len}",
            c_q.len()
        )));
    }
    let mut padded = c_q.to_vec();
    padded.resize(frame_len, C64::new(0.0, 0.0));
    let g = Dft::new(frame_len).forward(&padded);
    let f = dense_unitary_matrix(frame_len);
    let mut diag_f = f.clone();
    for (k, mut row) in diag_f.row_iter_mut().enumerate() {
        let gk = g[k];
        for v in row.iter_mut() {
            *v *= gk;
        }
    }
    Ok(f.adjoint() * diag_f)
}
