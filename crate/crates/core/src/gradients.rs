//! Closed-form WSR gradients and a central-difference oracle.
//!
//! Complex convention: `grad_w` is the conjugate-Wirtinger derivative
//! `∂R/∂W* = (∂R/∂Re W + j ∂R/∂Im W) / 2`, so that for any direction `D`,
//! `d/dt R(W + tD)|₀ = 2 Re tr(grad_wᴴ D)`. Amplitude and phase gradients are
//! ordinary partial derivatives over the stacked `(t, r)` vectors.
//!
//! Every gradient goes through the cross gains `s_kj = h_kᴴ Θ_τk G w_j`:
//! `R = Σ_k ω_k/ln2 · (ln T_k − ln I_k)` with `T_k = Σ_j |s_kj|² + σ²` and
//! `I_k = T_k − |s_kk|²`, so `∂R/∂|s_kj|² = ω_k/ln2 · (1/T_k − [j≠k]/I_k)`.

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, C64};
use crate::model::{self, BeamformingState, ChannelSet, Evaluation, Side, SystemConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// M×K ascent direction for the precoder.
    pub grad_w: CMatrix,
    /// `∂R/∂(β_t, β_r)`, length 2N.
    pub grad_beta: Vec<f64>,
    /// `∂R/∂(θ_t, θ_r)`, length 2N.
    pub grad_theta: Vec<f64>,
}

impl GradientBundle {
    pub fn is_finite(&self) -> bool {
        self.grad_w.is_finite()
            && self.grad_beta.iter().all(|x| x.is_finite())
            && self.grad_theta.iter().all(|x| x.is_finite())
    }
}

fn checked(cfg: &SystemConfig, ch: &ChannelSet, state: &BeamformingState) -> Result<Evaluation> {
    cfg.validate()?;
    ch.check_against(cfg)?;
    state.check_against(cfg)?;
    Ok(Evaluation::new(cfg, ch, state))
}

pub fn grad_wsr_precoder(cfg: &SystemConfig, ch: &ChannelSet, state: &BeamformingState) -> Result<CMatrix> {
    let eval = checked(cfg, ch, state)?;
    Ok(precoder_gradient(cfg, ch, &eval))
}

pub fn grad_wsr_amplitudes(cfg: &SystemConfig, ch: &ChannelSet, state: &BeamformingState) -> Result<Vec<f64>> {
    let eval = checked(cfg, ch, state)?;
    Ok(coefficient_gradients(cfg, ch, state, &eval).0)
}

pub fn grad_wsr_phases(cfg: &SystemConfig, ch: &ChannelSet, state: &BeamformingState) -> Result<Vec<f64>> {
    let eval = checked(cfg, ch, state)?;
    Ok(coefficient_gradients(cfg, ch, state, &eval).1)
}

/// All three gradients from one evaluation of the cross gains.
pub fn wsr_gradients(cfg: &SystemConfig, ch: &ChannelSet, state: &BeamformingState) -> Result<GradientBundle> {
    let eval = checked(cfg, ch, state)?;
    let grad_w = precoder_gradient(cfg, ch, &eval);
    let (grad_beta, grad_theta) = coefficient_gradients(cfg, ch, state, &eval);
    Ok(GradientBundle {
        grad_w,
        grad_beta,
        grad_theta,
    })
}

/// `grad_w[:, j] = Σ_k c_kj s_kj conj(a_k)` with `a_k = (h_kᴴ Θ_τk G)ᵀ`.
pub(crate) fn precoder_gradient(cfg: &SystemConfig, ch: &ChannelSet, eval: &Evaluation) -> CMatrix {
    let (m, users) = (cfg.antennas, cfg.users);
    let g = ch.g();
    let mut grad = CMatrix::zeros(m, users);
    for k in 0..users {
        let c = match cfg.user_sides[k] {
            Side::Transmission => &eval.c_t,
            Side::Reflection => &eval.c_r,
        };
        let v: Vec<C64> = ch.h(k).iter().zip(c).map(|(h, c)| h.conj() * c).collect();
        let a_conj: Vec<C64> = (0..m)
            .map(|col| {
                let s: C64 = v.iter().zip(g.col(col)).map(|(v, g)| v * g).sum();
                s.conj()
            })
            .collect();
        for j in 0..users {
            let scale = eval.coefficient(cfg, k, j) * eval.s(k, j);
            for (out, a) in grad.col_mut(j).iter_mut().zip(&a_conj) {
                *out += scale * a;
            }
        }
    }
    grad
}

/// Returns `(∂R/∂β, ∂R/∂θ)`, both stacked `(t, r)`.
pub(crate) fn coefficient_gradients(
    cfg: &SystemConfig,
    ch: &ChannelSet,
    state: &BeamformingState,
    eval: &Evaluation,
) -> (Vec<f64>, Vec<f64>) {
    let n = cfg.elements;
    let mut grad_beta = vec![0.0; 2 * n];
    let mut grad_theta = vec![0.0; 2 * n];
    for k in 0..cfg.users {
        let side = cfg.user_sides[k];
        let offset = side.offset(n);
        let (c, theta) = match side {
            Side::Transmission => (&eval.c_t, &state.theta_t),
            Side::Reflection => (&eval.c_r, &state.theta_r),
        };
        let hk = ch.h(k);
        // weight_n = Σ_j 2 c_kj conj(s_kj) u_jn, then
        // ∂R/∂β_n = Re(weight_n conj(h_n) e^{jθ_n}), ∂R/∂θ_n = −Im(weight_n conj(h_n) c_n).
        let mut weight = vec![C64::new(0.0, 0.0); n];
        for (j, uj) in eval.u.iter().enumerate() {
            let scale = 2.0 * eval.coefficient(cfg, k, j) * eval.s(k, j).conj();
            for (w, u) in weight.iter_mut().zip(uj) {
                *w += scale * u;
            }
        }
        for i in 0..n {
            let base = weight[i] * hk[i].conj();
            grad_beta[offset + i] += (base * C64::from_polar(1.0, theta[i])).re;
            grad_theta[offset + i] -= (base * c[i]).im;
        }
    }
    (grad_beta, grad_theta)
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Central differences of `objective` over every real coordinate of the
/// state: `2MK` precoder coordinates, then `2N` amplitudes and `2N` phases.
///
/// The precoder part is returned in the same conjugate-Wirtinger convention
/// as [`grad_wsr_precoder`].
pub fn finite_diff_gradient<F>(objective: F, state: &BeamformingState, step: f64) -> Result<GradientBundle>
where
    F: Fn(&BeamformingState) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {step}")));
    }
    let at = |perturb: &dyn Fn(&mut BeamformingState, f64), h: f64| -> f64 {
        let mut s = state.clone();
        perturb(&mut s, h);
        objective(&s)
    };
    let central = |perturb: &dyn Fn(&mut BeamformingState, f64)| -> f64 {
        (at(perturb, step) - at(perturb, -step)) / (2.0 * step)
    };

    let (m, users) = state.w.shape();
    let mut grad_w = CMatrix::zeros(m, users);
    for j in 0..users {
        for r in 0..m {
            let d_re = central(&|s, h| {
                let z = s.w.get(r, j);
                s.w.set(r, j, z + C64::new(h, 0.0));
            });
            let d_im = central(&|s, h| {
                let z = s.w.get(r, j);
                s.w.set(r, j, z + C64::new(0.0, h));
            });
            grad_w.set(r, j, C64::new(d_re, d_im) / 2.0);
        }
    }

    let n = state.elements();
    let grad_beta = (0..2 * n)
        .map(|i| {
            central(&|s, h| {
                if i < n {
                    s.beta_t[i] += h;
                } else {
                    s.beta_r[i - n] += h;
                }
            })
        })
        .collect();
    let grad_theta = (0..2 * n)
        .map(|i| {
            central(&|s, h| {
                if i < n {
                    s.theta_t[i] += h;
                } else {
                    s.theta_r[i - n] += h;
                }
            })
        })
        .collect();
    Ok(GradientBundle {
        grad_w,
        grad_beta,
        grad_theta,
    })
}

/// Finite-difference gradient of the WSR itself.
pub fn finite_diff_wsr(cfg: &SystemConfig, ch: &ChannelSet, state: &BeamformingState, step: f64) -> Result<GradientBundle> {
    cfg.validate()?;
    ch.check_against(cfg)?;
    state.check_against(cfg)?;
    finite_diff_gradient(|s| Evaluation::new(cfg, ch, s).wsr(cfg), state, step)
}

/// Below this reference magnitude a coordinate is compared absolutely.
pub const ABSOLUTE_FLOOR: f64 = 1e-10;

/// Worst-case disagreement between an analytic and a reference gradient.
///
/// Coordinates whose reference value is below [`ABSOLUTE_FLOOR`] in magnitude
/// contribute to `max_abs`; all others to `max_rel`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradientDiscrepancy {
    pub max_rel: f64,
    pub max_abs: f64,
}

impl GradientDiscrepancy {
    pub fn of(analytic: &[f64], reference: &[f64]) -> Self {
        assert_eq!(analytic.len(), reference.len());
        let mut out = Self::default();
        for (a, r) in analytic.iter().zip(reference) {
            let err = (a - r).abs();
            if r.abs() < ABSOLUTE_FLOOR {
                out.max_abs = out.max_abs.max(err);
            } else {
                out.max_rel = out.max_rel.max(err / r.abs());
            }
            if !err.is_finite() {
                out.max_rel = f64::INFINITY;
            }
        }
        out
    }

    pub fn of_complex(analytic: &CMatrix, reference: &CMatrix) -> Self {
        let flat = |m: &CMatrix| -> Vec<f64> { m.as_slice().iter().flat_map(|z| [z.re, z.im]).collect() };
        Self::of(&flat(analytic), &flat(reference))
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            max_rel: self.max_rel.max(other.max_rel),
            max_abs: self.max_abs.max(other.max_abs),
        }
    }

    pub fn within(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel < rel_tol && self.max_abs < abs_tol
    }
}

/// WSR evaluated directly through the public SINR routine; used by tests as
/// an objective that shares no code with the gradient assembly.
pub fn wsr_reference(cfg: &SystemConfig, ch: &ChannelSet, state: &BeamformingState) -> f64 {
    let gammas: Vec<f64> = (0..cfg.users)
        .map(|k| model::sinr(cfg, ch, state, k).expect("valid instance"))
        .collect();
    model::wsr(cfg, &gammas).expect("non-negative SINR")
}
