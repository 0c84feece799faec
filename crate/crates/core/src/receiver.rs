//! Iterative joint channel estimation and data detection.
//!
//! The receiver runs Gaussian message passing on a factor graph of the
//! frequency-domain observation model
//! `y_F ~= sum_q diag-free products of c_qF and x_F`, where `c_qF` is the
//! DFT of the basis-expansion coefficients of branch `q` and `x_F` the DFT
//! of the transmitted time frame. One iteration sweeps:
//!
//! 1. backward from the symbol beliefs to the frequency domain
//!    ([`Receiver::part1_backward`]),
//! 2. forward from the observation through the per-branch sum node
//!    ([`Receiver::part2_forward`]),
//! 3. the bilinear data/coefficient round: extrinsic symbol messages,
//!    posteriors, mean-field coefficient messages, the delay-domain
//!    truncation of the coefficients, and the backward product messages
//!    ([`Receiver::part4_data_round`], which interleaves
//!    [`Receiver::part3_coeff_update`] between its steps (e) and (f)),
//! 4. the damped backward observation update ([`Receiver::part2_backward`]),
//! 5. belief recomputation and hard decisions ([`Receiver::part1_forward`]).
//!
//! Messages are Gaussian with either a per-element or an averaged scalar
//! variance; every variance is clamped to `[VAR_MIN, VAR_MAX]` after every
//! update. All transforms are FFT-sized, so one iteration costs
//! `O(Q MN log MN)`; nothing on this path materializes an `MN x MN` matrix.

use crate::bem::{self, BemBasis, BemCoeffs};
use crate::channel::{self, ChannelTaps};
use crate::dft::Dft;
use crate::error::{Error, Result};
use crate::modem::{self, ModemConfig, SymbolBeliefs};
use crate::pilots::{PilotScheme, PilotSet};
use crate::{C64, Dims};

/// Variance clamp floor.
pub const VAR_MIN: f64 = 1e-12;
/// Variance clamp ceiling; also stands in for "infinite" (flat) variance.
pub const VAR_MAX: f64 = 1e12;
/// Average variance above which an input message counts as uninformative.
/// Mean-field divisions through such a message would manufacture false
/// certainty, so the steps that divide emit a flat message instead.
pub const FLAT_GUARD: f64 = 1e6;

/// Clamp a variance into `[VAR_MIN, VAR_MAX]`; NaN becomes flat.
pub fn clamp_var(v: f64) -> f64 {
    if v.is_nan() {
        VAR_MAX
    } else {
        v.clamp(VAR_MIN, VAR_MAX)
    }
}

/// Product of two scalar Gaussians in mean/variance form.
pub fn gauss_combine(m1: C64, v1: f64, m2: C64, v2: f64) -> (C64, f64) {
    let p = 1.0 / v1 + 1.0 / v2;
    let v = clamp_var(1.0 / p);
    (v * (m1 / v1 + m2 / v2), v)
}

/// Division of two scalar Gaussians (extrinsic removal of `m2, v2` from
/// `m1, v1`) in the precision domain.
///
/// When the precision difference is not positive the division is
/// degenerate (the projected message carries less information than what
/// should be removed); the numerator message is returned unchanged, which
/// skips the extrinsic subtraction for that element instead of emitting an
/// unbounded mean.
pub fn gauss_extract(m1: C64, v1: f64, m2: C64, v2: f64) -> (C64, f64) {
    let p = 1.0 / v1 - 1.0 / v2;
    if p <= 1.0 / VAR_MAX {
        return (m1, clamp_var(v1));
    }
    let v = clamp_var(1.0 / p);
    (v * (m1 / v1 - m2 / v2), v)
}

/// [`gauss_extract`] for unit-power symbol domains.
///
/// A further fallback applies when the quotient mean lands outside
/// `radius`: no honest message about a unit-power symbol points that far
/// out, so such a mean is cancellation noise from dividing two nearly
/// identical messages, amplified by the small precision difference.
/// Passing the bounded numerator message on instead keeps one round of
/// redundant information in the loop rather than injecting an unbounded
/// error, and the damped observation update absorbs the redundancy.
pub fn gauss_extract_bounded(m1: C64, v1: f64, m2: C64, v2: f64, radius: f64) -> (C64, f64) {
    let (m, v) = gauss_extract(m1, v1, m2, v2);
    if m.norm_sqr() > radius * radius {
        return (m1, clamp_var(v1));
    }
    (m, v)
}

/// Gaussian message over a length-`MN` vector. The variance is either one
/// scalar (`ScalarMsg`, used after a variance-averaging step) or one entry
/// per element (`ElemMsg`). Direction is encoded in the owning field name.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussMsg<V> {
    pub mean: Vec<C64>,
    pub var: V,
}

pub type ScalarMsg = GaussMsg<f64>;
pub type ElemMsg = GaussMsg<Vec<f64>>;

impl ScalarMsg {
    pub fn flat(len: usize) -> Self {
        Self { mean: vec![C64::new(0.0, 0.0); len], var: VAR_MAX }
    }

    pub fn zero(len: usize) -> Self {
        Self { mean: vec![C64::new(0.0, 0.0); len], var: VAR_MIN }
    }
}

impl ElemMsg {
    pub fn flat(len: usize) -> Self {
        Self { mean: vec![C64::new(0.0, 0.0); len], var: vec![VAR_MAX; len] }
    }
}

/// Receiver knobs. Pilot quantities (`rho`, `beta`, scheme) are read from
/// the [`PilotSet`] handed to [`Receiver::new`] so they cannot disagree
/// with the transmitted frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverConfig {
    pub dims: Dims,
    /// Channel memory `L` assumed by the delay-domain truncation.
    pub channel_len: usize,
    /// Basis order for iteration 1.
    pub q_initial: usize,
    /// Basis order from iteration 2 on.
    pub q_main: usize,
    /// Basis oversampling factor.
    pub k_os: usize,
    /// Damping weight on the fresh backward observation message.
    pub damping: f64,
    pub max_iters: usize,
    /// Known noise variance `w^-1`.
    pub noise_var: f64,
    /// Restrict the first coefficient estimate to the pilot comb
    /// (`sp-dd-d` only) and fill the rest by delay-domain interpolation.
    pub comb_initial_ce: bool,
    /// Stop once hard decisions are unchanged for three iterations.
    pub early_stop: bool,
}

impl ReceiverConfig {
    pub fn new(dims: Dims, channel_len: usize, noise_var: f64) -> Self {
        Self {
            dims,
            channel_len,
            q_initial: 3,
            q_main: 5,
            k_os: 2,
            damping: 0.8,
            max_iters: 70,
            noise_var,
            comb_initial_ce: true,
            early_stop: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mn = self.dims.mn();
        if self.channel_len == 0 || self.channel_len > mn {
            return Err(Error::invalid_config(format!(
                "channel memory {} must lie in 1..={mn}",
                self.channel_len
            )));
        }
        for (name, q) in [("q_initial", self.q_initial), ("q_main", self.q_main)] {
            if q == 0 || q % 2 == 0 || q > mn {
                return Err(Error::invalid_config(format!(
                    "{name} = {q} must be odd and within the frame length"
                )));
            }
        }
        if self.k_os == 0 {
            return Err(Error::invalid_config("K_os must be >= 1"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invalid_config(format!(
                "damping factor must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid_config("max_iters must be >= 1"));
        }
        if !(self.noise_var >= 0.0) || !self.noise_var.is_finite() {
            return Err(Error::invalid_config(format!(
                "noise variance must be finite and >= 0, got {}",
                self.noise_var
            )));
        }
        Ok(())
    }
}

/// Full message state of the factor graph. Fields are public so reference
/// implementations can compare or inject state slot by slot.
#[derive(Debug, Clone)]
pub struct ReceiverState {
    /// Completed iterations.
    pub iteration: usize,
    /// Active basis order.
    pub q_order: usize,
    pub beliefs: SymbolBeliefs,
    /// Forward (channel-to-symbols) data message from the last
    /// [`Receiver::part1_forward`]; scalar variance.
    pub fwd_xd: ScalarMsg,
    /// Backward frequency-domain symbol message; scalar variance.
    pub bwd_xf: ScalarMsg,
    /// Per-branch forward symbol messages (part 4 step e).
    pub fwd_xqf: Vec<ElemMsg>,
    /// Per-branch backward symbol messages (part 4 step a).
    pub bwd_xqf: Vec<ElemMsg>,
    /// Per-branch symbol posteriors (part 4 step b).
    pub post_xqf: Vec<ElemMsg>,
    /// Per-branch forward product messages (part 2 forward).
    pub fwd_dqf: Vec<ScalarMsg>,
    /// Per-branch backward product messages (part 4 step f).
    pub bwd_dqf: Vec<ElemMsg>,
    /// Per-branch backward coefficient messages (part 4 step c).
    pub bwd_cqf: Vec<ElemMsg>,
    /// Per-branch coefficient posteriors (part 4 step d).
    pub post_cqf: Vec<ElemMsg>,
    /// Per-branch forward coefficient messages (part 3).
    pub fwd_cqf: Vec<ScalarMsg>,
    /// Delay-domain coefficient estimates on the sqrt(MN)-scaled frequency
    /// convention, `L x Q`.
    pub coeff_est: BemCoeffs,
    /// Averaged posterior variance per branch coefficient vector.
    pub coeff_var: Vec<f64>,
    /// Damped backward observation messages per branch.
    pub bwd_zqt: Vec<ScalarMsg>,
    /// Whether branch `q` has received its first damped update.
    pub damp_primed: Vec<bool>,
    /// Sum of the backward observation messages.
    pub bwd_zt: ScalarMsg,
    /// Current hard decisions (constellation indices).
    pub decisions: Vec<u8>,
    /// Symbol flips in the most recent decision update.
    pub symbol_changes: usize,
    /// Set while the symbol beliefs are still too diffuse to support the
    /// mean-field coefficient division; latched off once they sharpen.
    pub cold_start: bool,
}

impl ReceiverState {
    /// Fresh flat state: uniform beliefs; forward `x_qF` and `c_qF` flat
    /// (mean 0, variance `VAR_MAX`); backward observation messages zero
    /// with variance clamped up to `VAR_MIN`; no damping memory. The
    /// forward observation message is implicit: it is always `y_T` with
    /// variance `w^-1`.
    pub fn flat_init(mn: usize, channel_len: usize, q_order: usize, arity: usize) -> Self {
        Self {
            iteration: 0,
            q_order,
            beliefs: SymbolBeliefs::uniform(mn, arity),
            fwd_xd: ScalarMsg::flat(mn),
            bwd_xf: ScalarMsg::flat(mn),
            fwd_xqf: vec![ElemMsg::flat(mn); q_order],
            bwd_xqf: vec![ElemMsg::flat(mn); q_order],
            post_xqf: vec![ElemMsg::flat(mn); q_order],
            fwd_dqf: vec![ScalarMsg::flat(mn); q_order],
            bwd_dqf: vec![ElemMsg::flat(mn); q_order],
            bwd_cqf: vec![ElemMsg::flat(mn); q_order],
            post_cqf: vec![ElemMsg::flat(mn); q_order],
            fwd_cqf: vec![ScalarMsg::flat(mn); q_order],
            coeff_est: BemCoeffs::zeros(channel_len, q_order),
            coeff_var: vec![VAR_MAX; q_order],
            bwd_zqt: vec![ScalarMsg::zero(mn); q_order],
            damp_primed: vec![false; q_order],
            bwd_zt: ScalarMsg::zero(mn),
            decisions: vec![0; mn],
            symbol_changes: 0,
            cold_start: true,
        }
    }

    /// Reset every branch-indexed message to flat for a new basis order,
    /// keeping the symbol beliefs and the forward data message.
    pub fn reset_branches(&mut self, q_order: usize) {
        let mn = self.fwd_xd.mean.len();
        let channel_len = self.coeff_est.num_taps();
        self.q_order = q_order;
        self.fwd_xqf = vec![ElemMsg::flat(mn); q_order];
        self.bwd_xqf = vec![ElemMsg::flat(mn); q_order];
        self.post_xqf = vec![ElemMsg::flat(mn); q_order];
        self.fwd_dqf = vec![ScalarMsg::flat(mn); q_order];
        self.bwd_dqf = vec![ElemMsg::flat(mn); q_order];
        self.bwd_cqf = vec![ElemMsg::flat(mn); q_order];
        self.post_cqf = vec![ElemMsg::flat(mn); q_order];
        self.fwd_cqf = vec![ScalarMsg::flat(mn); q_order];
        self.coeff_est = BemCoeffs::zeros(channel_len, q_order);
        self.coeff_var = vec![VAR_MAX; q_order];
        self.bwd_zqt = vec![ScalarMsg::zero(mn); q_order];
        self.damp_primed = vec![false; q_order];
        self.bwd_zt = ScalarMsg::zero(mn);
    }

    /// Re-index branch messages for a new basis order whose Doppler offsets
    /// overlap the current ones.
    ///
    /// Branch `q` of an order-`Q` exponential basis models the offset
    /// `q - (Q-1)/2`, so when both orders have the same parity the shared
    /// offsets refer to bitwise-identical basis columns and their messages
    /// stay valid; they are moved to the re-indexed slot. Branches only
    /// present in the new order start flat (zero contribution to the
    /// observation sum), exactly as in the cold initialization. The
    /// backward observation sum is rebuilt from the carried branches.
    pub fn carry_branches(&mut self, q_order: usize) {
        let old_q = self.q_order as isize;
        let shift = (q_order as isize - old_q) / 2;
        let mn = self.fwd_xd.mean.len();
        let channel_len = self.coeff_est.num_taps();
        let old = |qn: usize| -> Option<usize> {
            let qo = qn as isize - shift;
            (qo >= 0 && qo < old_q).then_some(qo as usize)
        };

        fn remap<T: Clone>(src: &[T], q_order: usize, old: impl Fn(usize) -> Option<usize>, flat: T) -> Vec<T> {
            (0..q_order).map(|qn| old(qn).map_or_else(|| flat.clone(), |qo| src[qo].clone())).collect()
        }

        self.fwd_xqf = remap(&self.fwd_xqf, q_order, old, ElemMsg::flat(mn));
        self.bwd_xqf = remap(&self.bwd_xqf, q_order, old, ElemMsg::flat(mn));
        self.post_xqf = remap(&self.post_xqf, q_order, old, ElemMsg::flat(mn));
        self.fwd_dqf = remap(&self.fwd_dqf, q_order, old, ScalarMsg::flat(mn));
        self.bwd_dqf = remap(&self.bwd_dqf, q_order, old, ElemMsg::flat(mn));
        self.bwd_cqf = remap(&self.bwd_cqf, q_order, old, ElemMsg::flat(mn));
        self.post_cqf = remap(&self.post_cqf, q_order, old, ElemMsg::flat(mn));
        self.fwd_cqf = remap(&self.fwd_cqf, q_order, old, ScalarMsg::flat(mn));
        self.bwd_zqt = remap(&self.bwd_zqt, q_order, old, ScalarMsg::zero(mn));
        self.damp_primed = remap(&self.damp_primed, q_order, old, false);
        self.coeff_var = remap(&self.coeff_var, q_order, old, VAR_MAX);

        let mut coeff = BemCoeffs::zeros(channel_len, q_order);
        for qn in 0..q_order {
            if let Some(qo) = old(qn) {
                for li in 0..channel_len {
                    *coeff.at_mut(li, qn) = self.coeff_est.at(li, qo);
                }
            }
        }
        self.coeff_est = coeff;

        let mut zt = ScalarMsg::zero(mn);
        let mut var = 0.0f64;
        for msg in &self.bwd_zqt {
            for (acc, m) in zt.mean.iter_mut().zip(&msg.mean) {
                *acc += m;
            }
            var += msg.var;
        }
        zt.var = clamp_var(var);
        self.bwd_zt = zt;
        self.q_order = q_order;
    }
}

/// Per-iteration diagnostics from [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct IterDiag {
    /// 1-based iteration index.
    pub iteration: usize,
    /// Normalized tap MSE against the supplied truth, if any.
    pub mse: Option<f64>,
    /// Hard decisions that flipped in this iteration.
    pub symbol_changes: usize,
    /// `||y_T - backward z_T||_2` after the observation update.
    pub residual_norm: f64,
}

#[derive(Debug, Clone)]
pub struct ReceiverOutput {
    pub symbols: Vec<C64>,
    pub bits: Vec<u8>,
    pub beliefs: SymbolBeliefs,
    /// Tap-scale coefficient estimates (directly expandable by
    /// `bem::reconstruct_taps`).
    pub coeffs: BemCoeffs,
    pub taps_estimate: ChannelTaps,
    pub diagnostics: Vec<IterDiag>,
    /// Hard decisions (constellation indices) after every iteration.
    pub per_iter_decisions: Vec<Vec<u8>>,
    pub iterations_run: usize,
}

/// One receiver instance bound to an observation and a pilot set.
pub struct Receiver {
    cfg: ReceiverConfig,
    constellation: Vec<C64>,
    scheme: PilotScheme,
    rho: f64,
    beta: usize,
    x_p_dd: Vec<C64>,
    /// Frequency spectrum of the scaled pilot waveform `sqrt(rho) x_p`.
    pilot_f: Vec<C64>,
    comb: Vec<usize>,
    y_t: Vec<C64>,
    /// Mean received power above the noise floor, the only prior available
    /// for how much channel energy the branch messages still have to absorb.
    signal_power: f64,
    basis: BemBasis,
    dft_mn: Dft,
    dft_n: Dft,
    dft_p: Option<Dft>,
    pub state: ReceiverState,
}

impl Receiver {
    pub fn new(
        y_t: &[C64],
        pilots: &PilotSet,
        modem_cfg: &ModemConfig,
        cfg: &ReceiverConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        modem_cfg.validate()?;
        let mn = cfg.dims.mn();
        if y_t.len() != mn {
            return Err(Error::shape(format!(
                "observation has {} samples, config expects {mn}",
                y_t.len()
            )));
        }
        if pilots.dims != cfg.dims {
            return Err(Error::shape(format!(
                "pilot geometry {}x{} != receiver geometry {}x{}",
                pilots.dims.m, pilots.dims.n, cfg.dims.m, cfg.dims.n
            )));
        }
        if modem_cfg.dims != cfg.dims {
            return Err(Error::shape("modem and receiver geometry disagree"));
        }
        let basis = bem::gce_basis(mn, cfg.q_initial, cfg.k_os)?;
        let arity = modem_cfg.constellation.len();
        let dft_p = match pilots.scheme {
            PilotScheme::SpDdD => Some(Dft::new(pilots.p())),
            PilotScheme::SpDd => None,
        };
        let power = y_t.iter().map(|y| y.norm_sqr()).sum::<f64>() / mn as f64;
        let signal_power = (power - cfg.noise_var).max(0.0);
        let dft_mn = Dft::new(mn);
        let dft_n = Dft::new(cfg.dims.n);
        let sp = pilots.rho.sqrt();
        let scaled: Vec<C64> = pilots.x_p_dd.iter().map(|x| sp * x).collect();
        let pilot_f = dft_mn.forward(&modem::dd_to_time_with(&dft_n, cfg.dims, &scaled));
        let mut rcv = Self {
            cfg: cfg.clone(),
            constellation: modem_cfg.constellation.clone(),
            scheme: pilots.scheme,
            rho: pilots.rho,
            beta: pilots.beta,
            x_p_dd: pilots.x_p_dd.clone(),
            pilot_f,
            comb: pilots.comb_indices(),
            y_t: y_t.to_vec(),
            signal_power,
            basis,
            dft_mn,
            dft_n,
            dft_p,
            state: ReceiverState::flat_init(mn, cfg.channel_len, cfg.q_initial, arity),
        };
        rcv.seed_branch_vars();
        Ok(rcv)
    }

    /// Give the zero-mean initial branch observation messages an honest
    /// variance: each branch claims nothing about its own contribution, so
    /// the received signal power (minus noise) has to be accounted for as
    /// uncertainty, split evenly across branches. Without this the first
    /// leave-one-out division claims noise-limited accuracy while the other
    /// branches' whole signal is still inside it.
    fn seed_branch_vars(&mut self) {
        let q = self.state.q_order as f64;
        for msg in &mut self.state.bwd_zqt {
            msg.var = clamp_var(self.signal_power / q);
        }
        self.state.bwd_zt.var = clamp_var(self.signal_power);
    }

    pub fn config(&self) -> &ReceiverConfig {
        &self.cfg
    }

    pub fn basis(&self) -> &BemBasis {
        &self.basis
    }

    /// Whether the coefficient extraction currently runs comb-restricted.
    ///
    /// The designed comb pilot concentrates all its power on `P` tones, so
    /// in the first pass, when the symbol beliefs are still uniform, the
    /// channel is measurable only there; the mean-field division would
    /// shrink the estimate toward zero everywhere (the posterior pilot
    /// power on a comb tone is far below the posterior data uncertainty)
    /// and the remaining tones carry no pilot at all. The comb extraction
    /// runs once; the detection it feeds gives the later passes the data
    /// means the regular division needs.
    pub fn comb_mode(&self) -> bool {
        self.cfg.comb_initial_ce
            && self.scheme == PilotScheme::SpDdD
            && self.state.iteration == 0
    }

    /// Swap in a new basis order and reset all branch-indexed messages.
    pub fn switch_q(&mut self, q_order: usize) -> Result<()> {
        self.basis = bem::gce_basis(self.cfg.dims.mn(), q_order, self.cfg.k_os)?;
        if (q_order as isize - self.state.q_order as isize) % 2 == 0 {
            self.state.carry_branches(q_order);
        } else {
            self.state.reset_branches(q_order);
            self.seed_branch_vars();
        }
        Ok(())
    }

    // ---- Part I, backward: beliefs -> frequency-domain symbol message ----

    pub fn part1_backward(&mut self) {
        let mn = self.cfg.dims.mn();
        let st = &mut self.state;
        let sp = self.rho.sqrt();
        let sd = (1.0 - self.rho).sqrt();
        let mut xdd = vec![C64::new(0.0, 0.0); mn];
        let mut var_sum = 0.0f64;
        for i in 0..mn {
            let row = st.beliefs.row(i);
            let mut m = C64::new(0.0, 0.0);
            for (a, &p) in row.iter().enumerate() {
                m += p * self.constellation[a];
            }
            let v = clamp_var(1.0 - m.norm_sqr());
            let (mb, vb) = gauss_extract_bounded(m, v, st.fwd_xd.mean[i], st.fwd_xd.var, 3.0);
            xdd[i] = sp * self.x_p_dd[i] + sd * mb;
            var_sum += (1.0 - self.rho) * vb;
        }
        let x_t = modem::dd_to_time_with(&self.dft_n, self.cfg.dims, &xdd);
        let x_f = self.dft_mn.forward(&x_t);
        st.bwd_xf = ScalarMsg { mean: x_f, var: clamp_var(var_sum / mn as f64) };
        if st.bwd_xf.var < COLD_EXIT * (1.0 - self.rho) {
            st.cold_start = false;
        }
    }

    // ---- Part II, forward: observation -> per-branch product messages ----

    pub fn part2_forward(&mut self) {
        let mn = self.cfg.dims.mn();
        let st = &mut self.state;
        for q in 0..st.q_order {
            let bq = self.basis.column(q);
            let v = clamp_var(self.cfg.noise_var + st.bwd_zt.var - st.bwd_zqt[q].var);
            let mut dqt = vec![C64::new(0.0, 0.0); mn];
            for n in 0..mn {
                let zq = self.y_t[n] - st.bwd_zt.mean[n] + st.bwd_zqt[q].mean[n];
                // Division by the unit-modulus basis sample = conjugate multiply.
                dqt[n] = zq * bq[n].conj();
            }
            self.dft_mn.forward_in_place(&mut dqt);
            st.fwd_dqf[q] = ScalarMsg { mean: dqt, var: v };
        }
    }

    // ---- Part IV steps (a)-(f): the bilinear data/coefficient round ----

    /// (a) Backward per-branch symbol messages: combine the backward `x_F`
    /// message with the forward messages of all other branches.
    pub fn part4_step_a(&mut self) {
        let mn = self.cfg.dims.mn();
        let st = &mut self.state;
        let mut tot_p = vec![0.0f64; mn];
        let mut tot_w = vec![C64::new(0.0, 0.0); mn];
        for q in 0..st.q_order {
            let f = &st.fwd_xqf[q];
            for i in 0..mn {
                tot_p[i] += 1.0 / f.var[i];
                tot_w[i] += f.mean[i] / f.var[i];
            }
        }
        let bwd_p = 1.0 / st.bwd_xf.var;
        for q in 0..st.q_order {
            let (own_mean, own_var): (Vec<C64>, Vec<f64>) =
                (st.fwd_xqf[q].mean.clone(), st.fwd_xqf[q].var.clone());
            let out = &mut st.bwd_xqf[q];
            for i in 0..mn {
                let p = bwd_p + (tot_p[i] - 1.0 / own_var[i]);
                let v = clamp_var(1.0 / p);
                let w = st.bwd_xf.mean[i] * bwd_p + (tot_w[i] - own_mean[i] / own_var[i]);
                out.mean[i] = v * w;
                out.var[i] = v;
            }
        }
    }

    /// (b) Per-branch symbol posteriors.
    pub fn part4_step_b(&mut self) {
        let mn = self.cfg.dims.mn();
        let st = &mut self.state;
        for q in 0..st.q_order {
            for i in 0..mn {
                let (m, v) = gauss_combine(
                    st.bwd_xqf[q].mean[i],
                    st.bwd_xqf[q].var[i],
                    st.fwd_xqf[q].mean[i],
                    st.fwd_xqf[q].var[i],
                );
                st.post_xqf[q].mean[i] = m;
                st.post_xqf[q].var[i] = v;
            }
        }
    }

    /// (c) Backward coefficient messages: the mean-field division, or the
    /// comb-restricted extraction while the cold-start phase lasts.
    pub fn part4_step_c(&mut self) {
        if self.comb_mode() {
            self.comb_ls_backward();
            return;
        }
        let mn = self.cfg.dims.mn();
        for q in 0..self.state.q_order {
            let vd = self.state.fwd_dqf[q].var;
            let st = &mut self.state;
            let vhat = st.post_xqf[q].var.iter().sum::<f64>() / mn as f64;
            // An uninformative symbol posterior says nothing about the
            // coefficients. The raw rule would instead turn the huge
            // denominator into a near-zero variance claim around mean zero.
            if vhat > FLAT_GUARD {
                st.bwd_cqf[q] = ElemMsg::flat(mn);
                continue;
            }
            for i in 0..mn {
                let denom = st.post_xqf[q].mean[i].norm_sqr() + vhat;
                let m = st.fwd_dqf[q].mean[i] * st.post_xqf[q].mean[i].conj() / denom;
                let mut v = vd / denom;
                // Same outlier rule as step (e): a coefficient spectrum
                // holds at most unit average power, so a huge mean only
                // signals a bad division and must not carry weight.
                let p = m.norm_sqr();
                if p > 9.0 && p > v {
                    v = p;
                }
                st.bwd_cqf[q].mean[i] = m;
                st.bwd_cqf[q].var[i] = clamp_var(v);
            }
        }
    }

    /// Comb-restricted backward coefficient messages for the cold start.
    ///
    /// Divides the observed product spectrum by the known pilot tone on
    /// each comb index and smooths the quotients onto the `L`-coefficient
    /// delay manifold. The data riding on the comb tones enters as extra
    /// observation noise, not as a shrinkage of the mean: dividing by the
    /// posterior (whose pilot power is tiny next to the data uncertainty)
    /// would hand the loop a channel with almost no energy left in it.
    ///
    /// Only the zero-offset branch takes the estimate. The first passes
    /// cannot tell the Doppler branches apart, and every branch dividing
    /// the same observation would count the static channel once per
    /// branch; the off-center branches stay flat until the regular
    /// division resolves them.
    fn comb_ls_backward(&mut self) {
        let mn = self.cfg.dims.mn();
        let l = self.cfg.channel_len;
        let p = self.comb.len();
        let mid = (self.state.q_order - 1) / 2;
        // Everything except the pilot through the zero-offset branch acts
        // as observation noise here: thermal noise plus the data share of
        // the received power.
        let interference = self.cfg.noise_var + (1.0 - self.rho) * self.signal_power;
        let mut comb_vals = Vec::with_capacity(p);
        let mut var_acc = 0.0f64;
        for &i in &self.comb {
            let pilot = self.pilot_f[i];
            let denom = pilot.norm_sqr().max(VAR_MIN);
            comb_vals.push(self.state.fwd_dqf[mid].mean[i] * pilot.conj() / denom);
            var_acc += interference / denom;
        }
        // Keeping `l` delay coefficients out of `p` independent comb
        // measurements scales the averaged uncertainty accordingly.
        let v_fit = clamp_var(l as f64 / p as f64 * var_acc / p as f64);
        let interp = self.interpolate_comb(&comb_vals);
        let st = &mut self.state;
        for q in 0..st.q_order {
            st.bwd_cqf[q] = if q == mid {
                ElemMsg { mean: interp.clone(), var: vec![v_fit; mn] }
            } else {
                ElemMsg::flat(mn)
            };
        }
    }

    /// Expand `P` comb samples of a coefficient spectrum to all `MN` tones:
    /// inverse-DFT the comb, keep the first `L` delay coefficients, and
    /// forward-DFT back. The `sqrt(beta)` factor aligns the two unitary
    /// transform sizes, so an exact-model comb reproduces its spectrum
    /// exactly (P > L guaranteed at pilot construction).
    fn interpolate_comb(&self, comb_vals: &[C64]) -> Vec<C64> {
        let mn = self.cfg.dims.mn();
        let l = self.cfg.channel_len;
        let dft_p = self.dft_p.as_ref().expect("comb mode requires a designed pilot");
        let delay = dft_p.inverse(comb_vals);
        let scale = (self.beta as f64).sqrt();
        let mut padded = vec![C64::new(0.0, 0.0); mn];
        for (d, v) in padded.iter_mut().zip(delay.iter().take(l)) {
            *d = scale * v;
        }
        self.dft_mn.forward(&padded)
    }

    /// (d) Per-branch coefficient posteriors.
    pub fn part4_step_d(&mut self) {
        let mn = self.cfg.dims.mn();
        let st = &mut self.state;
        for q in 0..st.q_order {
            let vf = st.fwd_cqf[q].var;
            for i in 0..mn {
                let (m, v) = gauss_combine(
                    st.bwd_cqf[q].mean[i],
                    st.bwd_cqf[q].var[i],
                    st.fwd_cqf[q].mean[i],
                    vf,
                );
                st.post_cqf[q].mean[i] = m;
                st.post_cqf[q].var[i] = v;
            }
        }
    }

    /// (e) Forward per-branch symbol messages by the symmetric mean-field
    /// rule using the coefficient posteriors.
    ///
    /// The division can produce means far outside the unit-power symbol
    /// alphabet when the coefficient posterior is still unreliable (a weak
    /// `|c|` bin with a small averaged variance). Such a mean is known to be
    /// wrong a priori, so its claimed variance is raised to at least the
    /// squared magnitude, which keeps the message but removes its undue
    /// weight from the cross-branch combination.
    pub fn part4_step_e(&mut self) {
        let mn = self.cfg.dims.mn();
        let st = &mut self.state;
        for q in 0..st.q_order {
            let vd = st.fwd_dqf[q].var;
            let vhat = st.post_cqf[q].var.iter().sum::<f64>() / mn as f64;
            // A branch whose coefficients are still unknown cannot vouch for
            // its symbols; see the matching guard in step (c).
            if vhat > FLAT_GUARD {
                st.fwd_xqf[q] = ElemMsg::flat(mn);
                continue;
            }
            for i in 0..mn {
                let denom = st.post_cqf[q].mean[i].norm_sqr() + vhat;
                let m = st.fwd_dqf[q].mean[i] * st.post_cqf[q].mean[i].conj() / denom;
                let mut v = vd / denom;
                let p = m.norm_sqr();
                if p > 9.0 && p > v {
                    v = p;
                }
                st.fwd_xqf[q].mean[i] = m;
                st.fwd_xqf[q].var[i] = clamp_var(v);
            }
        }
    }

    // ---- Part III: delay-domain truncation of the coefficients ----

    /// Extract `c_q` estimates (flat prior: posterior = backward message)
    /// and push the model-consistent forward coefficient message.
    pub fn part3_coeff_update(&mut self) {
        let mn = self.cfg.dims.mn();
        let l = self.cfg.channel_len;
        // The truncation keeps `l` of `mn` independently measured bins and
        // scales the averaged uncertainty down accordingly. Comb-restricted
        // backward messages already carry fit-level variances (their bins
        // are interpolated copies, not independent measurements), so they
        // pass through unscaled.
        let shrink = if self.comb_mode() { 1.0 } else { l as f64 / mn as f64 };
        let st = &mut self.state;
        for q in 0..st.q_order {
            let cql = self.dft_mn.inverse(&st.bwd_cqf[q].mean);
            let v_cq = clamp_var(st.bwd_cqf[q].var.iter().sum::<f64>() / mn as f64);
            for li in 0..l {
                *st.coeff_est.at_mut(li, q) = cql[li];
            }
            st.coeff_var[q] = v_cq;
            let mut padded = vec![C64::new(0.0, 0.0); mn];
            padded[..l].copy_from_slice(&cql[..l]);
            self.dft_mn.forward_in_place(&mut padded);
            st.fwd_cqf[q] = ScalarMsg { mean: padded, var: clamp_var(shrink * v_cq) };
        }
    }

    /// (f) Backward per-branch product messages from the forward
    /// coefficient and backward symbol messages.
    pub fn part4_step_f(&mut self) {
        let mn = self.cfg.dims.mn();
        let st = &mut self.state;
        for q in 0..st.q_order {
            let vc = st.fwd_cqf[q].var;
            for i in 0..mn {
                let mc = st.fwd_cqf[q].mean[i];
                let mx = st.bwd_xqf[q].mean[i];
                let vx = st.bwd_xqf[q].var[i];
                st.bwd_dqf[q].mean[i] = mc * mx;
                st.bwd_dqf[q].var[i] =
                    clamp_var(vx * mc.norm_sqr() + vc * mx.norm_sqr() + vc * vx);
            }
        }
    }

    /// Steps (a)-(e), the coefficient update, then step (f), in the
    /// published step order.
    pub fn part4_data_round(&mut self) {
        self.part4_step_a();
        self.part4_step_b();
        self.part4_step_c();
        self.part4_step_d();
        self.part4_step_e();
        self.part3_coeff_update();
        self.part4_step_f();
    }

    // ---- Part II, backward: damped observation update ----

    pub fn part2_backward(&mut self) {
        let mn = self.cfg.dims.mn();
        let eta = self.cfg.damping;
        let st = &mut self.state;
        let mut zt_mean = vec![C64::new(0.0, 0.0); mn];
        let mut zt_var = 0.0f64;
        for q in 0..st.q_order {
            let bq = self.basis.column(q);
            let mut raw = self.dft_mn.inverse(&st.bwd_dqf[q].mean);
            for (r, b) in raw.iter_mut().zip(bq) {
                *r *= b;
            }
            let raw_var = clamp_var(st.bwd_dqf[q].var.iter().sum::<f64>() / mn as f64);
            // A branch whose product message is still uninformative makes
            // no new claim; its standing message (the initial power split,
            // or the last real update) persists and keeps the total honest.
            if raw_var > FLAT_GUARD {
                for i in 0..mn {
                    zt_mean[i] += st.bwd_zqt[q].mean[i];
                }
                zt_var += st.bwd_zqt[q].var;
                continue;
            }
            if st.damp_primed[q] {
                let pre_var = st.bwd_zqt[q].var;
                let v = clamp_var(1.0 / ((1.0 - eta) / pre_var + eta / raw_var));
                for i in 0..mn {
                    let m = v
                        * ((1.0 - eta) * st.bwd_zqt[q].mean[i] / pre_var
                            + eta * raw[i] / raw_var);
                    st.bwd_zqt[q].mean[i] = m;
                }
                st.bwd_zqt[q].var = v;
            } else {
                st.bwd_zqt[q] = ScalarMsg { mean: raw, var: raw_var };
                st.damp_primed[q] = true;
            }
            for i in 0..mn {
                zt_mean[i] += st.bwd_zqt[q].mean[i];
            }
            zt_var += st.bwd_zqt[q].var;
        }
        st.bwd_zt = ScalarMsg { mean: zt_mean, var: clamp_var(zt_var) };
    }

    // ---- Part I, forward: beliefs and hard decisions ----

    pub fn part1_forward(&mut self) {
        let mn = self.cfg.dims.mn();
        let st = &mut self.state;
        let mut xf = vec![C64::new(0.0, 0.0); mn];
        let mut var_sum = 0.0f64;
        for i in 0..mn {
            let mut p = 0.0f64;
            let mut w = C64::new(0.0, 0.0);
            for q in 0..st.q_order {
                p += 1.0 / st.fwd_xqf[q].var[i];
                w += st.fwd_xqf[q].mean[i] / st.fwd_xqf[q].var[i];
            }
            let v = clamp_var(1.0 / p);
            xf[i] = v * w;
            var_sum += v;
        }
        let x_t = self.dft_mn.inverse(&xf);
        let x_dd = modem::time_to_dd_with(&self.dft_n, self.cfg.dims, &x_t);
        let sp = self.rho.sqrt();
        let sd = (1.0 - self.rho).sqrt();
        let v_d = clamp_var(var_sum / mn as f64 / (1.0 - self.rho));
        let mut xd_mean = vec![C64::new(0.0, 0.0); mn];
        for i in 0..mn {
            xd_mean[i] = (x_dd[i] - sp * self.x_p_dd[i]) / sd;
        }
        let arity = st.beliefs.arity();
        let mut dist = vec![0.0f64; arity];
        for i in 0..mn {
            let mut dmin = f64::INFINITY;
            for (a, point) in self.constellation.iter().enumerate() {
                dist[a] = (point - xd_mean[i]).norm_sqr();
                dmin = dmin.min(dist[a]);
            }
            let row = st.beliefs.row_mut(i);
            let mut total = 0.0f64;
            for a in 0..arity {
                row[a] = (-(dist[a] - dmin) / v_d).exp();
                total += row[a];
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        st.fwd_xd = ScalarMsg { mean: xd_mean, var: v_d };
        let decided = st.beliefs.argmax();
        st.symbol_changes =
            decided.iter().zip(&st.decisions).filter(|(a, b)| a != b).count();
        st.decisions = decided;
    }

    /// One full iteration in the published order; increments the counter.
    pub fn iterate(&mut self) {
        self.part1_backward();
        self.part2_forward();
        self.part4_data_round();
        self.part2_backward();
        self.part1_forward();
        self.state.iteration += 1;
    }

    /// `||y_T - backward z_T||_2` for the current state.
    pub fn residual_norm(&self) -> f64 {
        self.y_t
            .iter()
            .zip(&self.state.bwd_zt.mean)
            .map(|(y, z)| (y - z).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// Coefficient estimates divided down to the tap scale.
    pub fn coeffs_tap_scale(&self) -> BemCoeffs {
        let l = self.cfg.channel_len;
        let q = self.state.q_order;
        let scale = 1.0 / (self.cfg.dims.mn() as f64).sqrt();
        let mut data = Vec::with_capacity(l * q);
        for qi in 0..q {
            for li in 0..l {
                data.push(self.state.coeff_est.at(li, qi) * scale);
            }
        }
        BemCoeffs::new(l, q, data).expect("coefficient shape is consistent by construction")
    }

    /// Expand the current coefficient estimates into a tap matrix.
    pub fn tap_estimate(&self) -> Result<ChannelTaps> {
        bem::reconstruct_taps(&self.coeffs_tap_scale(), &self.basis)
    }

    fn state_is_finite(&self) -> bool {
        let finite_c = |v: &[C64]| v.iter().all(|c| c.re.is_finite() && c.im.is_finite());
        let st = &self.state;
        finite_c(&st.bwd_zt.mean)
            && finite_c(&st.fwd_xd.mean)
            && st.fwd_xd.var.is_finite()
            && (0..st.beliefs.len()).all(|i| st.beliefs.row(i).iter().all(|p| p.is_finite()))
    }
}

/// Run the full receiver schedule on one observation.
///
/// `truth` enables the per-iteration channel-MSE diagnostic. The basis
/// order switches from `q_initial` to `q_main` after the first iteration;
/// branch messages restart flat while beliefs carry over.
pub fn run(
    y_t: &[C64],
    pilots: &PilotSet,
    modem_cfg: &ModemConfig,
    cfg: &ReceiverConfig,
    truth: Option<&ChannelTaps>,
) -> Result<ReceiverOutput> {
    if let Some(t) = truth {
        if t.frame_len() != cfg.dims.mn() || t.num_taps() != cfg.channel_len {
            return Err(Error::shape(format!(
                "truth taps are {}x{}, receiver expects {}x{}",
                t.frame_len(),
                t.num_taps(),
                cfg.dims.mn(),
                cfg.channel_len
            )));
        }
    }
    let mut rcv = Receiver::new(y_t, pilots, modem_cfg, cfg)?;
    let mut diagnostics = Vec::with_capacity(cfg.max_iters);
    let mut per_iter_decisions = Vec::with_capacity(cfg.max_iters);
    let mut unchanged_streak = 0usize;
    for it in 1..=cfg.max_iters {
        if it == 2 && cfg.q_main != cfg.q_initial {
            rcv.switch_q(cfg.q_main)?;
        }
        rcv.iterate();
        if !rcv.state_is_finite() {
            return Err(Error::NonFinite { iteration: it });
        }
        let mse = match truth {
            Some(t) => Some(channel::channel_mse(t, &rcv.tap_estimate()?)?),
            None => None,
        };
        diagnostics.push(IterDiag {
            iteration: it,
            mse,
            symbol_changes: rcv.state.symbol_changes,
            residual_norm: rcv.residual_norm(),
        });
        per_iter_decisions.push(rcv.state.decisions.clone());
        if rcv.state.symbol_changes == 0 {
            unchanged_streak += 1;
        } else {
            unchanged_streak = 0;
        }
        if cfg.early_stop && unchanged_streak >= 3 && it < cfg.max_iters {
            break;
        }
    }
    let iterations_run = diagnostics.len();
    let (symbols, bits) = {
        let mc = ModemConfig { dims: cfg.dims, constellation: rcv.constellation.clone() };
        modem::decide_symbols(&rcv.state.beliefs, &mc)
    };
    let taps_estimate = rcv.tap_estimate()?;
    Ok(ReceiverOutput {
        symbols,
        bits,
        beliefs: rcv.state.beliefs.clone(),
        coeffs: rcv.coeffs_tap_scale(),
        taps_estimate,
        diagnostics,
        per_iter_decisions,
        iterations_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilots;

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    fn small_setup(scheme: PilotScheme) -> (PilotSet, ModemConfig, ReceiverConfig) {
        let dims = Dims::new(8, 4);
        let set = match scheme {
            PilotScheme::SpDd => pilots::random_dd_pilots(dims, 0.1, 42).unwrap(),
            PilotScheme::SpDdD => pilots::designed_pilots(dims, 4, 0.1, 3, 42).unwrap(),
        };
        let modem_cfg = ModemConfig::qpsk(dims);
        let mut cfg = ReceiverConfig::new(dims, 3, 0.01);
        cfg.q_initial = 3;
        cfg.q_main = 3;
        (set, modem_cfg, cfg)
    }

    #[test]
    fn gauss_ops_round_trip() {
        let (ma, va) = (C64::new(0.3, -0.7), 0.8);
        let (mb, vb) = (C64::new(-1.1, 0.2), 2.5);
        let (mc, vc) = gauss_combine(ma, va, mb, vb);
        let (back_m, back_v) = gauss_extract(mc, vc, mb, vb);
        assert!(close(back_m, ma, 1e-9), "{back_m} vs {ma}");
        assert!((back_v - va).abs() < 1e-9);
    }

    #[test]
    fn degenerate_extraction_returns_numerator() {
        // Removing a sharper message than the numerator must not explode.
        let (m, v) = gauss_extract(C64::new(1.0, 0.0), 0.5, C64::new(50.0, 0.0), 0.1);
        assert!(close(m, C64::new(1.0, 0.0), 1e-12));
        assert!((v - 0.5).abs() < 1e-12);
        let (_, v2) = gauss_extract(C64::new(0.0, 0.0), 1.0, C64::new(0.0, 0.0), 1.0);
        assert!(v2 >= VAR_MIN && v2 <= VAR_MAX);
    }

    #[test]
    fn initial_state_shapes_and_values() {
        let dims = Dims::new(128, 16);
        let st = ReceiverState::flat_init(dims.mn(), 14, 3, 4);
        assert_eq!(st.fwd_xqf.len(), 3);
        assert!(st.fwd_xqf.iter().all(|m| m.mean.len() == 2048));
        assert!(st.fwd_xqf.iter().all(|m| m.var.iter().all(|&v| v == VAR_MAX)));
        assert_eq!(st.bwd_zqt[0].var, VAR_MIN);
        assert_eq!(st.bwd_zt.var, VAR_MIN);
        assert!(st.bwd_zt.mean.iter().all(|c| c.norm() == 0.0));
        assert_eq!(st.beliefs.row(0), &[0.25; 4]);
        assert!(!st.damp_primed[0]);
    }

    #[test]
    fn first_backward_pass_is_the_scaled_pilot_spectrum() {
        // Uniform beliefs project to mean 0 / var 1, so the first backward
        // message is sqrt(rho) times the pilot spectrum with variance 1-rho.
        let (set, modem_cfg, cfg) = small_setup(PilotScheme::SpDd);
        let y = vec![C64::new(0.0, 0.0); 32];
        let mut rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        rcv.part1_backward();
        let want: Vec<C64> = set.x_p3.iter().map(|p| p * set.rho.sqrt()).collect();
        for (a, b) in rcv.state.bwd_xf.mean.iter().zip(&want) {
            assert!(close(*a, *b, 1e-9), "{a} vs {b}");
        }
        assert!((rcv.state.bwd_xf.var - (1.0 - set.rho)).abs() < 1e-9);
    }

    #[test]
    fn one_hot_beliefs_reproduce_the_exact_spectrum() {
        let (set, modem_cfg, cfg) = small_setup(PilotScheme::SpDd);
        let dims = modem_cfg.dims;
        let bits: Vec<u8> = (0..dims.mn() * 2).map(|i| ((i / 3) % 2) as u8).collect();
        let frame = modem::map_bits(&bits, &modem_cfg).unwrap();
        let mixed = modem::superimpose(&frame, &set.x_p_dd, set.rho).unwrap();
        let x_t = modem::dd_to_time(&mixed);
        let y = vec![C64::new(0.0, 0.0); dims.mn()];
        let mut rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        for (i, sym) in frame.as_slice().iter().enumerate() {
            let idx = modem_cfg.constellation.iter().position(|c| close(*c, *sym, 1e-9)).unwrap();
            rcv.state.beliefs.set_one_hot(i, idx);
        }
        rcv.part1_backward();
        let want = Dft::new(dims.mn()).forward(&x_t);
        for (a, b) in rcv.state.bwd_xf.mean.iter().zip(&want) {
            assert!(close(*a, *b, 1e-9));
        }
        assert!(rcv.state.bwd_xf.var < 1e-9, "variance must sit near the clamp floor");
    }

    #[test]
    fn first_forward_observation_copies_y() {
        let (set, modem_cfg, cfg) = small_setup(PilotScheme::SpDd);
        let y: Vec<C64> = (0..32).map(|i| C64::new(i as f64 * 0.1, -0.2)).collect();
        let mut rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        rcv.part2_forward();
        let center = 1; // Q = 3
        let want = Dft::new(32).forward(&y);
        let power = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / 32.0;
        let residual = (power - cfg.noise_var).max(0.0) * 2.0 / 3.0;
        for q in 0..3 {
            assert!(
                (rcv.state.fwd_dqf[q].var - (cfg.noise_var + residual)).abs() < 1e-9,
                "first pass claims noise plus the unresolved share of the other branches"
            );
            if q == center {
                for (a, b) in rcv.state.fwd_dqf[q].mean.iter().zip(&want) {
                    assert!(close(*a, *b, 1e-9), "center branch sees y directly");
                }
            }
        }
    }

    #[test]
    fn part3_inverts_a_synthesized_coefficient_spectrum() {
        let (set, modem_cfg, cfg) = small_setup(PilotScheme::SpDd);
        let y = vec![C64::new(0.0, 0.0); 32];
        let mut rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        let gamma = [C64::new(0.5, -0.25), C64::new(-0.1, 0.9), C64::new(0.0, 0.3)];
        let mut padded = vec![C64::new(0.0, 0.0); 32];
        padded[..3].copy_from_slice(&gamma);
        let spectrum = Dft::new(32).forward(&padded);
        for q in 0..3 {
            rcv.state.bwd_cqf[q] = ElemMsg { mean: spectrum.clone(), var: vec![0.2; 32] };
        }
        rcv.part3_coeff_update();
        for q in 0..3 {
            for l in 0..3 {
                assert!(close(rcv.state.coeff_est.at(l, q), gamma[l], 1e-12));
            }
            assert!((rcv.state.coeff_var[q] - 0.2).abs() < 1e-12);
            assert!((rcv.state.fwd_cqf[q].var - 3.0 / 32.0 * 0.2).abs() < 1e-15);
            // The forward message is the L-truncated spectrum; here the
            // input was exactly L-tap consistent, so it round-trips.
            for (a, b) in rcv.state.fwd_cqf[q].mean.iter().zip(&spectrum) {
                assert!(close(*a, *b, 1e-12));
            }
        }
    }

    #[test]
    fn part3_variance_ratio_matches_the_table_parameters() {
        assert!((14.0 / 2048.0 - 0.0068359375f64).abs() < 1e-15);
    }

    #[test]
    fn zero_backward_coefficients_give_zero_estimates() {
        let (set, modem_cfg, cfg) = small_setup(PilotScheme::SpDd);
        let y = vec![C64::new(0.0, 0.0); 32];
        let mut rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        for q in 0..3 {
            rcv.state.bwd_cqf[q] = ElemMsg { mean: vec![C64::new(0.0, 0.0); 32], var: vec![1.0; 32] };
        }
        rcv.part3_coeff_update();
        for q in 0..3 {
            for l in 0..3 {
                assert_eq!(rcv.state.coeff_est.at(l, q), C64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn single_branch_backward_symbols_copy_the_frequency_message() {
        let (set, modem_cfg, mut cfg) = small_setup(PilotScheme::SpDd);
        cfg.q_initial = 1;
        cfg.q_main = 1;
        let y = vec![C64::new(0.0, 0.0); 32];
        let mut rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        let mean: Vec<C64> = (0..32).map(|i| C64::new(0.1 * i as f64, -0.05 * i as f64)).collect();
        rcv.state.bwd_xf = ScalarMsg { mean: mean.clone(), var: 0.7 };
        rcv.part4_step_a();
        for i in 0..32 {
            assert!(close(rcv.state.bwd_xqf[0].mean[i], mean[i], 1e-9));
            assert!((rcv.state.bwd_xqf[0].var[i] - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_field_division_recovers_a_known_response() {
        // Single branch, known symbols with tiny posterior variance, exact
        // products: step (c) must invert to the coefficient spectrum.
        let (set, modem_cfg, mut cfg) = small_setup(PilotScheme::SpDd);
        cfg.q_initial = 1;
        cfg.q_main = 1;
        let mn = 32;
        let y = vec![C64::new(0.0, 0.0); mn];
        let mut rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        let x_f: Vec<C64> = (0..mn).map(|i| C64::from_polar(1.0, 0.3 * i as f64)).collect();
        let c_f: Vec<C64> = (0..mn).map(|i| C64::new(1.0 + 0.1 * i as f64, -0.2)).collect();
        let d_f: Vec<C64> = x_f.iter().zip(&c_f).map(|(x, c)| x * c).collect();
        rcv.state.post_xqf[0] = ElemMsg { mean: x_f.clone(), var: vec![1e-9; mn] };
        rcv.state.fwd_dqf[0] = ScalarMsg { mean: d_f, var: 1e-9 };
        rcv.part4_step_c();
        for i in 0..mn {
            assert!(
                close(rcv.state.bwd_cqf[0].mean[i], c_f[i], 1e-6),
                "tone {i}: {} vs {}",
                rcv.state.bwd_cqf[0].mean[i],
                c_f[i]
            );
        }
    }

    #[test]
    fn damping_limits_behave() {
        let (set, modem_cfg, mut cfg) = small_setup(PilotScheme::SpDd);
        let mn = 32;
        let y = vec![C64::new(0.5, 0.0); mn];
        // eta = 1: damped value equals the raw value even with memory.
        cfg.damping = 1.0;
        let mut rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        let d_mean: Vec<C64> = (0..mn).map(|i| C64::new(i as f64 * 0.02, 0.1)).collect();
        for q in 0..3 {
            rcv.state.bwd_dqf[q] = ElemMsg { mean: d_mean.clone(), var: vec![0.3; mn] };
            rcv.state.bwd_zqt[q] = ScalarMsg { mean: vec![C64::new(9.0, 9.0); mn], var: 5.0 };
            rcv.state.damp_primed[q] = true;
        }
        rcv.part2_backward();
        let raw_zqt: Vec<C64> = {
            let dqt = Dft::new(mn).inverse(&d_mean);
            dqt.iter()
                .zip(rcv.basis().column(0))
                .map(|(d, b)| d * b)
                .collect()
        };
        for i in 0..mn {
            assert!(close(rcv.state.bwd_zqt[0].mean[i], raw_zqt[i], 1e-9));
        }
        assert!((rcv.state.bwd_zqt[0].var - 0.3).abs() < 1e-9);
        // Sum rule: v_zT is the exact sum over branches.
        let sum: f64 = (0..3).map(|q| rcv.state.bwd_zqt[q].var).sum();
        assert!((rcv.state.bwd_zt.var - sum).abs() < 1e-12);

        // eta = 0.8 with pre == raw is a fixed point.
        cfg.damping = 0.8;
        let mut rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        for q in 0..3 {
            rcv.state.bwd_dqf[q] = ElemMsg { mean: d_mean.clone(), var: vec![0.3; mn] };
        }
        rcv.part2_backward(); // primes the memory with the raw value
        let before = rcv.state.bwd_zqt[1].clone();
        for q in 0..3 {
            rcv.state.bwd_dqf[q] = ElemMsg { mean: d_mean.clone(), var: vec![0.3; mn] };
        }
        rcv.part2_backward();
        for i in 0..mn {
            assert!(close(rcv.state.bwd_zqt[1].mean[i], before.mean[i], 1e-9));
        }
        assert!((rcv.state.bwd_zqt[1].var - before.var).abs() < 1e-9);
    }

    #[test]
    fn unit_modulus_rotation_preserves_norm() {
        let (set, modem_cfg, cfg) = small_setup(PilotScheme::SpDd);
        let mn = 32;
        let y = vec![C64::new(0.0, 0.0); mn];
        let mut rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        let d_mean: Vec<C64> = (0..mn).map(|i| C64::new((i as f64).sin(), 0.4)).collect();
        for q in 0..3 {
            rcv.state.bwd_dqf[q] = ElemMsg { mean: d_mean.clone(), var: vec![0.2; mn] };
        }
        let d_norm: f64 = Dft::new(mn).inverse(&d_mean).iter().map(C64::norm_sqr).sum();
        rcv.part2_backward();
        let z_norm: f64 = rcv.state.bwd_zqt[2].mean.iter().map(C64::norm_sqr).sum();
        assert!((d_norm - z_norm).abs() < 1e-12 * d_norm);
    }

    #[test]
    fn confident_forward_message_yields_one_hot_beliefs() {
        let (set, modem_cfg, cfg) = small_setup(PilotScheme::SpDd);
        let dims = modem_cfg.dims;
        let mn = dims.mn();
        let bits: Vec<u8> = (0..mn * 2).map(|i| ((i * 5) % 2) as u8).collect();
        let frame = modem::map_bits(&bits, &modem_cfg).unwrap();
        let mixed = modem::superimpose(&frame, &set.x_p_dd, set.rho).unwrap();
        let x_t = modem::dd_to_time(&mixed);
        let x_f = Dft::new(mn).forward(&x_t);
        let y = vec![C64::new(0.0, 0.0); mn];
        let mut rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        for q in 0..3 {
            // All branches agree on the exact spectrum with tiny variance.
            rcv.state.fwd_xqf[q] = ElemMsg { mean: x_f.clone(), var: vec![1e-10; mn] };
        }
        rcv.part1_forward();
        for i in 0..mn {
            let row = rcv.state.beliefs.row(i);
            let max = row.iter().cloned().fold(0.0, f64::max);
            assert!(max > 1.0 - 1e-6, "symbol {i} belief {row:?}");
        }
        let (_, decided_bits) = modem::decide_symbols(&rcv.state.beliefs, &modem_cfg);
        assert_eq!(decided_bits, bits);
        // Flat forward messages give uniform beliefs instead.
        let mut rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        rcv.part1_forward();
        for i in 0..mn {
            for &p in rcv.state.beliefs.row(i) {
                assert!((p - 0.25).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn comb_mode_lasts_until_beliefs_sharpen_under_designed_scheme() {
        let (set, modem_cfg, cfg) = small_setup(PilotScheme::SpDdD);
        let mn = 32;
        let y = vec![C64::new(0.0, 0.0); mn];
        let mut rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        assert!(rcv.comb_mode(), "cold start begins comb-restricted");
        // Diffuse beliefs keep the cold-start latch set.
        rcv.part1_backward();
        assert!(rcv.comb_mode(), "uniform beliefs must not end the cold start");
        // Sharp beliefs release it, and it stays released.
        for i in 0..mn {
            let row = rcv.state.beliefs.row_mut(i);
            row.fill(0.0);
            row[i % 4] = 1.0;
        }
        rcv.part1_backward();
        assert!(!rcv.comb_mode(), "sharp beliefs must end the cold start");
        let (set, modem_cfg, cfg) = small_setup(PilotScheme::SpDd);
        let rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        assert!(!rcv.comb_mode(), "random pilots never run comb-restricted");
    }

    #[test]
    fn comb_interpolation_reproduces_an_exact_model_spectrum() {
        let (set, modem_cfg, cfg) = small_setup(PilotScheme::SpDdD);
        let mn = 32;
        let y = vec![C64::new(0.0, 0.0); mn];
        let rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        let gamma = [C64::new(0.4, 0.2), C64::new(-0.3, 0.1), C64::new(0.05, -0.6)];
        let mut padded = vec![C64::new(0.0, 0.0); mn];
        padded[..3].copy_from_slice(&gamma);
        let spectrum = Dft::new(mn).forward(&padded);
        let comb_vals: Vec<C64> = set.comb_indices().iter().map(|&i| spectrum[i]).collect();
        let interp = rcv.interpolate_comb(&comb_vals);
        for i in 0..mn {
            assert!(close(interp[i], spectrum[i], 1e-9), "tone {i}");
        }
    }

    #[test]
    fn variances_stay_clamped_through_iterations() {
        let (set, modem_cfg, mut cfg) = small_setup(PilotScheme::SpDd);
        cfg.max_iters = 4;
        let dims = modem_cfg.dims;
        let mn = dims.mn();
        let bits: Vec<u8> = (0..mn * 2).map(|i| ((i * 11 + 1) % 2) as u8).collect();
        let frame = modem::map_bits(&bits, &modem_cfg).unwrap();
        let mixed = modem::superimpose(&frame, &set.x_p_dd, set.rho).unwrap();
        let x_t = modem::dd_to_time(&mixed);
        let chan_cfg = channel::ChannelConfig {
            profile: channel::ChannelProfile::RayleighUniform,
            num_taps: 3,
            speed_kmh: 500.0,
            ..Default::default()
        };
        let taps = channel::generate_channel(&chan_cfg, dims, 5).unwrap();
        let y = channel::apply_channel(&taps, &x_t, channel::NoiseSpec { variance: 0.01 }, 7)
            .unwrap();
        let mut rcv = Receiver::new(&y, &set, &modem_cfg, &cfg).unwrap();
        for _ in 0..4 {
            rcv.iterate();
            let st = &rcv.state;
            let ok = |v: f64| (VAR_MIN..=VAR_MAX).contains(&v);
            assert!(ok(st.bwd_xf.var) && ok(st.fwd_xd.var) && ok(st.bwd_zt.var));
            for q in 0..st.q_order {
                assert!(ok(st.fwd_dqf[q].var) && ok(st.fwd_cqf[q].var) && ok(st.bwd_zqt[q].var));
                assert!(st.fwd_xqf[q].var.iter().all(|&v| ok(v)));
                assert!(st.bwd_xqf[q].var.iter().all(|&v| ok(v)));
                assert!(st.bwd_cqf[q].var.iter().all(|&v| ok(v)));
                assert!(st.bwd_dqf[q].var.iter().all(|&v| ok(v)));
            }
        }
    }

    #[test]
    fn run_produces_full_diagnostics_and_switches_basis() {
        let (set, modem_cfg, mut cfg) = small_setup(PilotScheme::SpDd);
        cfg.q_initial = 1;
        cfg.q_main = 3;
        cfg.max_iters = 5;
        let dims = modem_cfg.dims;
        let bits: Vec<u8> = (0..dims.mn() * 2).map(|i| (i % 2) as u8).collect();
        let frame = modem::map_bits(&bits, &modem_cfg).unwrap();
        let mixed = modem::superimpose(&frame, &set.x_p_dd, set.rho).unwrap();
        let x_t = modem::dd_to_time(&mixed);
        let chan_cfg = channel::ChannelConfig {
            profile: channel::ChannelProfile::RayleighUniform,
            num_taps: 3,
            speed_kmh: 125.0,
            ..Default::default()
        };
        let taps = channel::generate_channel(&chan_cfg, dims, 2).unwrap();
        let y = channel::apply_channel(&taps, &x_t, channel::NoiseSpec { variance: 0.001 }, 3)
            .unwrap();
        let out = run(&y, &set, &modem_cfg, &cfg, Some(&taps)).unwrap();
        assert_eq!(out.diagnostics.len(), 5);
        assert_eq!(out.per_iter_decisions.len(), 5);
        assert_eq!(out.iterations_run, 5);
        assert!(out.diagnostics.iter().all(|d| d.mse.is_some()));
        assert_eq!(out.coeffs.q_order(), 3, "output reflects the main basis order");
        assert_eq!(out.taps_estimate.frame_len(), dims.mn());
        assert_eq!(out.bits.len(), dims.mn() * 2);
    }
}
