//! System model: configuration, channels, beamforming variables, and exact
//! SINR / weighted sum-rate evaluation.
//!
//! The STAR-RIS coefficient matrices `Θ_τ = diag(β_τ e^{jθ_τ})` are never
//! materialized; every product uses the diagonal as a vector.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, C64};

/// Which half-space a user sits in, and therefore which STAR-RIS
/// coefficient set (transmission or reflection) reaches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Transmission,
    Reflection,
}

impl Side {
    /// Offset of this side's block in the stacked `2N` variables.
    pub fn offset(self, elements: usize) -> usize {
        match self {
            Side::Transmission => 0,
            Side::Reflection => elements,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    /// BS antennas `M`.
    pub antennas: usize,
    /// STAR-RIS elements `N`.
    pub elements: usize,
    /// Single-antenna users `K`.
    pub users: usize,
    pub user_sides: Vec<Side>,
    /// Total transmit power budget in watts.
    pub p_max: f64,
    /// Receiver noise power `σ²` in watts.
    pub noise_power: f64,
    /// Per-user rate weights `ω_k`.
    pub weights: Vec<f64>,
}

impl SystemConfig {
    /// Unit weights, first `⌈K/2⌉` users on the transmission side and the rest
    /// on the reflection side.
    pub fn new(antennas: usize, elements: usize, users: usize, p_max: f64, noise_power: f64) -> Self {
        Self {
            antennas,
            elements,
            users,
            user_sides: default_sides(users),
            p_max,
            noise_power,
            weights: vec![1.0; users],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 || self.elements == 0 || self.users == 0 {
            return Err(Error::Config(format!(
                "M, N, K must be positive (got {}, {}, {})",
                self.antennas, self.elements, self.users
            )));
        }
        if !(self.p_max > 0.0 && self.p_max.is_finite()) {
            return Err(Error::Config(format!("p_max must be positive, got {}", self.p_max)));
        }
        if !(self.noise_power > 0.0 && self.noise_power.is_finite()) {
            return Err(Error::Config(format!(
                "noise power must be positive, got {}",
                self.noise_power
            )));
        }
        if self.user_sides.len() != self.users {
            return Err(Error::Config(format!(
                "{} side labels for {} users",
                self.user_sides.len(),
                self.users
            )));
        }
        if self.weights.len() != self.users {
            return Err(Error::Config(format!(
                "{} weights for {} users",
                self.weights.len(),
                self.users
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("user weights must be finite and non-negative".into()));
        }
        if !self.weights.iter().any(|w| *w > 0.0) {
            return Err(Error::Config("at least one user weight must be positive".into()));
        }
        Ok(())
    }

    /// Users served through the transmission coefficients.
    pub fn transmission_users(&self) -> impl Iterator<Item = usize> + '_ {
        self.users_on(Side::Transmission)
    }

    pub fn reflection_users(&self) -> impl Iterator<Item = usize> + '_ {
        self.users_on(Side::Reflection)
    }

    fn users_on(&self, side: Side) -> impl Iterator<Item = usize> + '_ {
        self.user_sides
            .iter()
            .enumerate()
            .filter(move |(_, s)| **s == side)
            .map(|(k, _)| k)
    }
}

pub fn default_sides(users: usize) -> Vec<Side> {
    let n_t = users.div_ceil(2);
    (0..users)
        .map(|k| if k < n_t { Side::Transmission } else { Side::Reflection })
        .collect()
}

/// BS→RIS channel `G` (N×M) and RIS→user channels `h_k` (length N each).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    g: CMatrix,
    h: Vec<Vec<C64>>,
}

impl ChannelSet {
    pub fn new(g: CMatrix, h: Vec<Vec<C64>>) -> Result<Self> {
        let n = g.rows();
        if n == 0 || g.cols() == 0 || h.is_empty() {
            return Err(Error::Config("empty channel set".into()));
        }
        if let Some((k, hk)) = h.iter().enumerate().find(|(_, hk)| hk.len() != n) {
            return Err(Error::Config(format!(
                "h_{k} has length {} but G has {n} rows",
                hk.len()
            )));
        }
        Ok(Self { g, h })
    }

    pub fn g(&self) -> &CMatrix {
        &self.g
    }

    pub fn h(&self, k: usize) -> &[C64] {
        &self.h[k]
    }

    pub fn h_all(&self) -> &[Vec<C64>] {
        &self.h
    }

    pub fn antennas(&self) -> usize {
        self.g.cols()
    }

    pub fn elements(&self) -> usize {
        self.g.rows()
    }

    pub fn users(&self) -> usize {
        self.h.len()
    }

    /// `G̃ = [G; G]`, shape 2N×M.
    pub fn augmented_g(&self) -> CMatrix {
        self.g.vstack(&self.g)
    }

    /// `h̃_k = [h_k; h_k]`, length 2N.
    pub fn augmented_h(&self, k: usize) -> Vec<C64> {
        let mut out = self.h[k].clone();
        out.extend_from_slice(&self.h[k]);
        out
    }

    /// Diagonal of the selection matrix `S_τ` as a 0/1 vector of length 2N.
    pub fn selection_mask(&self, side: Side) -> Vec<f64> {
        let n = self.elements();
        let offset = side.offset(n);
        (0..2 * n)
            .map(|i| if (offset..offset + n).contains(&i) { 1.0 } else { 0.0 })
            .collect()
    }

    pub(crate) fn check_against(&self, cfg: &SystemConfig) -> Result<()> {
        if self.antennas() != cfg.antennas || self.elements() != cfg.elements || self.users() != cfg.users {
            return Err(Error::Config(format!(
                "channels are (M={}, N={}, K={}) but config is (M={}, N={}, K={})",
                self.antennas(),
                self.elements(),
                self.users(),
                cfg.antennas,
                cfg.elements,
                cfg.users
            )));
        }
        Ok(())
    }
}

/// The optimization variables: precoder `W`, amplitudes `β_τ`, phases `θ_τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformingState {
    /// M×K precoder, column `k` is `w_k`.
    pub w: CMatrix,
    pub beta_t: Vec<f64>,
    pub beta_r: Vec<f64>,
    /// Phases in radians, kept in `[0, 2π)`.
    pub theta_t: Vec<f64>,
    pub theta_r: Vec<f64>,
}

impl BeamformingState {
    pub fn elements(&self) -> usize {
        self.beta_t.len()
    }

    /// Stacked amplitudes `(β_t, β_r)`, length 2N.
    pub fn beta(&self) -> Vec<f64> {
        [self.beta_t.as_slice(), self.beta_r.as_slice()].concat()
    }

    /// Stacked phases `(θ_t, θ_r)`, length 2N.
    pub fn theta(&self) -> Vec<f64> {
        [self.theta_t.as_slice(), self.theta_r.as_slice()].concat()
    }

    pub fn set_beta(&mut self, stacked: &[f64]) {
        let n = self.elements();
        assert_eq!(stacked.len(), 2 * n);
        self.beta_t.copy_from_slice(&stacked[..n]);
        self.beta_r.copy_from_slice(&stacked[n..]);
    }

    pub fn set_theta(&mut self, stacked: &[f64]) {
        let n = self.elements();
        assert_eq!(stacked.len(), 2 * n);
        self.theta_t.copy_from_slice(&stacked[..n]);
        self.theta_r.copy_from_slice(&stacked[n..]);
    }

    /// `tr(WᴴW)`.
    pub fn power(&self) -> f64 {
        self.w.frobenius_sqr()
    }

    /// Relative deviation of the transmit power from `p_max`.
    pub fn power_error(&self, p_max: f64) -> f64 {
        (self.power() - p_max).abs() / p_max
    }

    /// `max_n |β_t² + β_r² − 1|`.
    pub fn amplitude_error(&self) -> f64 {
        self.beta_t
            .iter()
            .zip(&self.beta_r)
            .map(|(t, r)| (t * t + r * r - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite()
            && [&self.beta_t, &self.beta_r, &self.theta_t, &self.theta_r]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn check_against(&self, cfg: &SystemConfig) -> Result<()> {
        let n = cfg.elements;
        if self.w.shape() != (cfg.antennas, cfg.users) {
            return Err(Error::Config(format!(
                "precoder is {:?}, expected ({}, {})",
                self.w.shape(),
                cfg.antennas,
                cfg.users
            )));
        }
        if [&self.beta_t, &self.beta_r, &self.theta_t, &self.theta_r]
            .iter()
            .any(|v| v.len() != n)
        {
            return Err(Error::Config(format!("STAR-RIS vectors must have length N = {n}")));
        }
        Ok(())
    }
}

/// Auxiliary phases satisfying the coupled-phase constraint
/// `cos(θ̃_t − θ̃_r) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledAuxiliary {
    pub theta_t_aux: Vec<f64>,
    pub theta_r_aux: Vec<f64>,
}

impl CoupledAuxiliary {
    pub fn stacked(&self) -> Vec<f64> {
        [self.theta_t_aux.as_slice(), self.theta_r_aux.as_slice()].concat()
    }
}

/// Diagonals of `Θ_t` and `Θ_r`: `c_{τ,n} = β_{τ,n} e^{jθ_{τ,n}}`.
pub fn star_coefficient_vectors(state: &BeamformingState) -> (Vec<C64>, Vec<C64>) {
    let polar = |b: &[f64], th: &[f64]| -> Vec<C64> {
        b.iter().zip(th).map(|(b, t)| C64::from_polar(*b, *t)).collect()
    };
    (
        polar(&state.beta_t, &state.theta_t),
        polar(&state.beta_r, &state.theta_r),
    )
}

fn check_inputs(cfg: &SystemConfig, ch: &ChannelSet, state: &BeamformingState, k: usize) -> Result<()> {
    cfg.validate()?;
    ch.check_against(cfg)?;
    state.check_against(cfg)?;
    if k >= cfg.users {
        return Err(Error::Config(format!("user index {k} out of range (K = {})", cfg.users)));
    }
    Ok(())
}

/// SINR of user `k` through the per-side coefficient matrices.
pub fn sinr(cfg: &SystemConfig, ch: &ChannelSet, state: &BeamformingState, k: usize) -> Result<f64> {
    check_inputs(cfg, ch, state, k)?;
    let (c_t, c_r) = star_coefficient_vectors(state);
    let c = match cfg.user_sides[k] {
        Side::Transmission => &c_t,
        Side::Reflection => &c_r,
    };
    // Row vector h_kᴴ Θ_τ G.
    let hk = ch.h(k);
    let g = ch.g();
    let a: Vec<C64> = (0..cfg.antennas)
        .map(|m| {
            g.col(m)
                .iter()
                .zip(hk)
                .zip(c)
                .map(|((gnm, h), c)| h.conj() * c * gnm)
                .sum()
        })
        .collect();
    let mut signal = 0.0;
    let mut interference = 0.0;
    for j in 0..cfg.users {
        let s: C64 = a.iter().zip(state.w.col(j)).map(|(a, w)| a * w).sum();
        if j == k {
            signal = s.norm_sqr();
        } else {
            interference += s.norm_sqr();
        }
    }
    Ok(signal / (interference + cfg.noise_power))
}

/// SINR of user `k` through the stacked 2N-dimensional form
/// `h̃_kᴴ S_τ A Φ G̃ w_j`.
pub fn sinr_augmented(cfg: &SystemConfig, ch: &ChannelSet, state: &BeamformingState, k: usize) -> Result<f64> {
    check_inputs(cfg, ch, state, k)?;
    let g_aug = ch.augmented_g();
    let h_aug = ch.augmented_h(k);
    let mask = ch.selection_mask(cfg.user_sides[k]);
    let amp = state.beta();
    let phase = state.theta();
    // Diagonal of h̃_kᴴ S_τ A Φ as a row.
    let row: Vec<C64> = (0..2 * cfg.elements)
        .map(|i| h_aug[i].conj() * mask[i] * amp[i] * C64::from_polar(1.0, phase[i]))
        .collect();
    let mut signal = 0.0;
    let mut interference = 0.0;
    for j in 0..cfg.users {
        let projected = g_aug.mul_vec(state.w.col(j));
        let s: C64 = row.iter().zip(&projected).map(|(r, p)| r * p).sum();
        if j == k {
            signal = s.norm_sqr();
        } else {
            interference += s.norm_sqr();
        }
    }
    Ok(signal / (interference + cfg.noise_power))
}

/// Weighted sum-rate `Σ ω_k log2(1 + γ_k)`.
pub fn wsr(cfg: &SystemConfig, gammas: &[f64]) -> Result<f64> {
    if gammas.len() != cfg.weights.len() {
        return Err(Error::Config(format!(
            "{} SINRs for {} users",
            gammas.len(),
            cfg.weights.len()
        )));
    }
    if let Some(g) = gammas.iter().find(|g| !(**g >= 0.0)) {
        return Err(Error::Domain(format!("SINR must be non-negative, got {g}")));
    }
    Ok(cfg
        .weights
        .iter()
        .zip(gammas)
        .map(|(w, g)| w * (1.0 + g).log2())
        .sum())
}

/// All per-user SINRs.
pub fn sinr_all(cfg: &SystemConfig, ch: &ChannelSet, state: &BeamformingState) -> Result<Vec<f64>> {
    check_inputs(cfg, ch, state, 0)?;
    Ok(Evaluation::new(cfg, ch, state).sinrs())
}

/// WSR of a state.
pub fn wsr_of(cfg: &SystemConfig, ch: &ChannelSet, state: &BeamformingState) -> Result<f64> {
    check_inputs(cfg, ch, state, 0)?;
    Ok(Evaluation::new(cfg, ch, state).wsr(cfg))
}

/// Cross gains shared by the WSR and its gradients.
///
/// `s[k][j] = h_kᴴ Θ_τk G w_j`, `u[j] = G w_j`. Dimensions are assumed
/// checked by the caller.
pub(crate) struct Evaluation {
    pub users: usize,
    pub u: Vec<Vec<C64>>,
    pub c_t: Vec<C64>,
    pub c_r: Vec<C64>,
    s: Vec<C64>,
    /// `T_k = Σ_j |s_kj|² + σ²`.
    pub total: Vec<f64>,
    /// `I_k = Σ_{j≠k} |s_kj|² + σ²`.
    pub interference: Vec<f64>,
}

impl Evaluation {
    pub fn new(cfg: &SystemConfig, ch: &ChannelSet, state: &BeamformingState) -> Self {
        let users = cfg.users;
        let (c_t, c_r) = star_coefficient_vectors(state);
        let u: Vec<Vec<C64>> = (0..users).map(|j| ch.g().mul_vec(state.w.col(j))).collect();
        let mut s = Vec::with_capacity(users * users);
        let mut total = Vec::with_capacity(users);
        let mut interference = Vec::with_capacity(users);
        for k in 0..users {
            let c = match cfg.user_sides[k] {
                Side::Transmission => &c_t,
                Side::Reflection => &c_r,
            };
            // v_k = Θ_τᴴ h_k conjugated once so s_kj is a plain dot product.
            let v: Vec<C64> = ch.h(k).iter().zip(c).map(|(h, c)| h.conj() * c).collect();
            let mut t = cfg.noise_power;
            let mut i = cfg.noise_power;
            for (j, uj) in u.iter().enumerate() {
                let skj: C64 = v.iter().zip(uj).map(|(a, b)| a * b).sum();
                let p = skj.norm_sqr();
                t += p;
                if j != k {
                    i += p;
                }
                s.push(skj);
            }
            total.push(t);
            interference.push(i);
        }
        Self {
            users,
            u,
            c_t,
            c_r,
            s,
            total,
            interference,
        }
    }

    #[inline]
    pub fn s(&self, k: usize, j: usize) -> C64 {
        self.s[k * self.users + j]
    }

    pub fn sinrs(&self) -> Vec<f64> {
        (0..self.users)
            .map(|k| self.s(k, k).norm_sqr() / self.interference[k])
            .collect()
    }

    pub fn wsr(&self, cfg: &SystemConfig) -> f64 {
        self.sinrs()
            .iter()
            .zip(&cfg.weights)
            .map(|(g, w)| w * g.ln_1p() / LN_2)
            .sum()
    }

    /// `∂R/∂|s_kj|²`.
    #[inline]
    pub fn coefficient(&self, cfg: &SystemConfig, k: usize, j: usize) -> f64 {
        let direct = 1.0 / self.total[k];
        let cross = if j == k { 0.0 } else { 1.0 / self.interference[k] };
        cfg.weights[k] / LN_2 * (direct - cross)
    }
}
