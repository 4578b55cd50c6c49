//! Feasibility projections and the phase-delta regulator.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::model::CoupledAuxiliary;

/// Gain of the sigmoid phase regulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegulatorConfig {
    /// Amplification `λ` in radians.
    pub lambda: f64,
}

impl Default for RegulatorConfig {
    fn default() -> Self {
        Self { lambda: TAU }
    }
}

impl RegulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("regulator gain must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Phase differences allowed by the coupled-phase constraint, in the order
/// ties are resolved.
pub const COUPLED_OFFSETS: [f64; 4] = [FRAC_PI_2, -FRAC_PI_2, 3.0 * FRAC_PI_2, -3.0 * FRAC_PI_2];

/// Scales `w` onto the power sphere `tr(WᴴW) = p_max`.
pub fn normalize_power(w: &CMatrix, p_max: f64) -> Result<CMatrix> {
    let power = w.frobenius_sqr();
    if !(power > 0.0) || !power.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot normalize precoder with tr(WᴴW) = {power}"
        )));
    }
    Ok(w.scaled((p_max / power).sqrt()))
}

/// Per-element energy normalization `(b_t, b_r) / √(b_t² + b_r²)`.
///
/// For diagonal amplitude matrices this is exactly
/// `(AᵀA + ĀᵀĀ)^{-1/2} A` where `Ā` swaps the two blocks.
pub fn normalize_amplitudes(beta_t_raw: &[f64], beta_r_raw: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if beta_t_raw.len() != beta_r_raw.len() {
        return Err(Error::Config(format!(
            "amplitude blocks differ in length ({} vs {})",
            beta_t_raw.len(),
            beta_r_raw.len()
        )));
    }
    let mut bt = Vec::with_capacity(beta_t_raw.len());
    let mut br = Vec::with_capacity(beta_r_raw.len());
    for (n, (t, r)) in beta_t_raw.iter().zip(beta_r_raw).enumerate() {
        let norm = t.hypot(*r);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Degenerate(format!(
                "amplitude pair {n} is ({t}, {r}); cannot normalize"
            )));
        }
        bt.push(t / norm);
        br.push(r / norm);
    }
    Ok((bt, br))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `λ · sigmoid(δ)` elementwise, clamped strictly inside `(0, λ)`.
pub fn regulate_phase_delta(delta_raw: &[f64], reg: &RegulatorConfig) -> Vec<f64> {
    delta_raw
        .iter()
        .map(|d| {
            let v = reg.lambda * sigmoid(*d);
            if v >= reg.lambda {
                reg.lambda.next_down()
            } else if v <= 0.0 {
                f64::MIN_POSITIVE
            } else {
                v
            }
        })
        .collect()
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_phase(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    // rem_euclid rounds tiny negatives up to exactly 2π.
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// `(θ + Δ) mod 2π`, the additive form of `Φ ← Φ · ΔΦ̃`.
pub fn apply_phase_delta(theta: &[f64], delta_reg: &[f64]) -> Vec<f64> {
    assert_eq!(theta.len(), delta_reg.len(), "phase and delta lengths");
    theta
        .iter()
        .zip(delta_reg)
        .map(|(t, d)| wrap_phase(t + d))
        .collect()
}

/// Nearest coupled-feasible phase pair, element by element.
///
/// For a fixed offset `t` the closest pair with `θ̃_t − θ̃_r = t` is
/// `((θ_t+θ_r+t)/2, (θ_t+θ_r−t)/2)` at squared distance `(t − (θ_t−θ_r))²/2`;
/// the four offsets are enumerated and the first minimum kept. Inputs are
/// treated as plain reals (no wrapping).
pub fn project_coupled_phases(theta_t: &[f64], theta_r: &[f64]) -> CoupledAuxiliary {
    assert_eq!(theta_t.len(), theta_r.len(), "phase block lengths");
    let (aux_t, aux_r) = theta_t
        .iter()
        .zip(theta_r)
        .map(|(&tt, &tr)| {
            let offset = best_offset(tt - tr);
            let sum = tt + tr;
            ((sum + offset) / 2.0, (sum - offset) / 2.0)
        })
        .unzip();
    CoupledAuxiliary {
        theta_t_aux: aux_t,
        theta_r_aux: aux_r,
    }
}

fn best_offset(diff: f64) -> f64 {
    let mut best = COUPLED_OFFSETS[0];
    let mut best_dev = f64::INFINITY;
    for t in COUPLED_OFFSETS {
        let dev = (t - diff) * (t - diff) / 2.0;
        if dev < best_dev {
            best = t;
            best_dev = dev;
        }
    }
    best
}

/// `Σ_n (θ̃_t − θ_t)² + (θ̃_r − θ_r)²` between phases and their projection.
pub fn coupling_deviation(theta_t: &[f64], theta_r: &[f64], aux: &CoupledAuxiliary) -> f64 {
    theta_t
        .iter()
        .zip(&aux.theta_t_aux)
        .chain(theta_r.iter().zip(&aux.theta_r_aux))
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// `|cos(θ_t − θ_r)|` per element; zero exactly when the pair is coupled.
pub fn coupling_residual(theta_t: &[f64], theta_r: &[f64]) -> Vec<f64> {
    theta_t
        .iter()
        .zip(theta_r)
        .map(|(t, r)| (t - r).cos().abs())
        .collect()
}

/// `(θ_t − θ_r) mod 2π` per element.
pub fn phase_differences(theta_t: &[f64], theta_r: &[f64]) -> Vec<f64> {
    theta_t
        .iter()
        .zip(theta_r)
        .map(|(t, r)| wrap_phase(t - r))
        .collect()
}

/// Distance from a wrapped phase difference to the nearest of `π/2`, `3π/2`.
pub fn distance_to_coupled(diff: f64) -> f64 {
    let d = wrap_phase(diff);
    (d - FRAC_PI_2).abs().min((d - 3.0 * FRAC_PI_2).abs()).min(PI)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::C64;
    use proptest::prelude::*;

    /// Dense evaluation of `(AᵀA + ĀᵀĀ)^{-1/2} A` with `Ā = MᵀAM` and the
    /// block-swap matrix `M`.
    fn dense_amplitude_oracle(bt: &[f64], br: &[f64]) -> Vec<f64> {
        let n = bt.len();
        let dim = 2 * n;
        let mut a = vec![vec![0.0; dim]; dim];
        for i in 0..n {
            a[i][i] = bt[i];
            a[n + i][n + i] = br[i];
        }
        let mut swap = vec![vec![0.0; dim]; dim];
        for i in 0..n {
            swap[i][n + i] = 1.0;
            swap[n + i][i] = 1.0;
        }
        let mul = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            (0..dim)
                .map(|r| (0..dim).map(|c| (0..dim).map(|k| x[r][k] * y[k][c]).sum()).collect())
                .collect()
        };
        let tr = |x: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            (0..dim).map(|r| (0..dim).map(|c| x[c][r]).collect()).collect()
        };
        let a_bar = mul(&mul(&tr(&swap), &a), &swap);
        let ata = mul(&tr(&a), &a);
        let abar2 = mul(&tr(&a_bar), &a_bar);
        let gram: Vec<Vec<f64>> = (0..dim)
            .map(|r| (0..dim).map(|c| ata[r][c] + abar2[r][c]).collect())
            .collect();
        // The Gram matrix is diagonal for diagonal A, so its inverse square
        // root is taken entrywise on the diagonal.
        for r in 0..dim {
            for c in 0..dim {
                if r != c {
                    assert_eq!(gram[r][c], 0.0);
                }
            }
        }
        let inv_sqrt: Vec<Vec<f64>> = (0..dim)
            .map(|r| (0..dim).map(|c| if r == c { 1.0 / gram[r][r].sqrt() } else { 0.0 }).collect())
            .collect();
        let out = mul(&inv_sqrt, &a);
        (0..dim).map(|i| out[i][i]).collect()
    }

    #[test]
    fn power_scaling_examples() {
        // tr = 2, p_max = 8 -> scale by 2
        let w = CMatrix::from_fn(2, 1, |_, _| C64::new(1.0, 0.0));
        let out = normalize_power(&w, 8.0).unwrap();
        assert!(out.max_abs_diff(&w.scaled(2.0)) < 1e-15);
        let same = normalize_power(&out, 8.0).unwrap();
        assert!(same.max_abs_diff(&out) < 1e-15);
        assert!(matches!(
            normalize_power(&CMatrix::zeros(2, 2), 1.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn power_random_small_budget() {
        let w = CMatrix::from_fn(4, 2, |r, c| C64::new((r as f64 + 0.3).sin(), (c as f64 * 1.7 - r as f64).cos()));
        let out = normalize_power(&w, 0.01).unwrap();
        assert!((out.frobenius_sqr() - 0.01).abs() / 0.01 < 1e-12);
    }

    #[test]
    fn amplitude_examples_match_dense_form() {
        let (bt, br) = normalize_amplitudes(&[3.0, 1.0, 0.0], &[4.0, 1.0, 2.0]).unwrap();
        let dense = dense_amplitude_oracle(&[3.0, 1.0, 0.0], &[4.0, 1.0, 2.0]);
        assert!((bt[0] - 0.6).abs() < 1e-15 && (br[0] - 0.8).abs() < 1e-15);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((bt[1] - h).abs() < 1e-15 && (br[1] - h).abs() < 1e-15);
        assert_eq!((bt[2], br[2]), (0.0, 1.0));
        for i in 0..3 {
            assert!((bt[i] - dense[i]).abs() < 1e-15);
            assert!((br[i] - dense[3 + i]).abs() < 1e-15);
        }
    }

    #[test]
    fn amplitude_zero_pair_is_degenerate() {
        assert!(matches!(
            normalize_amplitudes(&[1.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn regulator_examples() {
        let reg = RegulatorConfig::default();
        let out = regulate_phase_delta(&[0.0, 3f64.ln(), 1e6, -1e6], &reg);
        assert!((out[0] - PI).abs() < 1e-15);
        assert!((out[1] - 1.5 * PI).abs() < 1e-14);
        assert!(out[2] < TAU && out[2] > TAU - 1e-12);
        assert!(out[3] > 0.0);
    }

    #[test]
    fn phase_delta_wraps() {
        let out = apply_phase_delta(&[1.5 * PI, 0.0], &[PI, PI]);
        assert!((out[0] - 0.5 * PI).abs() < 1e-15);
        assert!((out[1] - PI).abs() < 1e-15);
        assert_eq!(wrap_phase(-1e-300), 0.0);
    }

    #[test]
    fn coupled_projection_examples() {
        let aux = project_coupled_phases(&[FRAC_PI_2, 0.0, PI], &[0.0, 0.0, PI]);
        assert_eq!((aux.theta_t_aux[0], aux.theta_r_aux[0]), (FRAC_PI_2, 0.0));
        assert!((aux.theta_t_aux[1] - PI / 4.0).abs() < 1e-15);
        assert!((aux.theta_r_aux[1] + PI / 4.0).abs() < 1e-15);
        assert!((aux.theta_t_aux[2] - 1.25 * PI).abs() < 1e-15);
        assert!((aux.theta_r_aux[2] - 0.75 * PI).abs() < 1e-15);
        let dev = coupling_deviation(&[0.0], &[0.0], &project_coupled_phases(&[0.0], &[0.0]));
        assert!((dev - PI * PI / 8.0).abs() < 1e-15);
    }

    #[test]
    fn residual_examples() {
        let r = coupling_residual(&[FRAC_PI_2, 0.3, PI / 3.0], &[0.0, 0.3, 0.0]);
        assert!(r[0] < 1e-15);
        assert_eq!(r[1], 1.0);
        assert!((r[2] - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_optimal(tt in -20.0f64..20.0, tr in -20.0f64..20.0) {
            let aux = project_coupled_phases(&[tt], &[tr]);
            let (at, ar) = (aux.theta_t_aux[0], aux.theta_r_aux[0]);
            prop_assert!((at - ar).cos().abs() < 1e-12);
            let dev = (at - tt).powi(2) + (ar - tr).powi(2);
            for t in COUPLED_OFFSETS {
                let ct = (tt + tr + t) / 2.0;
                let cr = (tt + tr - t) / 2.0;
                let cand = (ct - tt).powi(2) + (cr - tr).powi(2);
                prop_assert!(dev <= cand + 1e-12 * (1.0 + cand));
            }
        }

        #[test]
        fn normalizations_idempotent(
            re in proptest::collection::vec(-3.0f64..3.0, 6),
            im in proptest::collection::vec(-3.0f64..3.0, 6),
            p in 1e-4f64..10.0,
        ) {
            let w = CMatrix::from_fn(3, 2, |r, c| C64::new(re[c * 3 + r], im[c * 3 + r]));
            prop_assume!(w.frobenius_sqr() > 1e-6);
            let once = normalize_power(&w, p).unwrap();
            let twice = normalize_power(&once, p).unwrap();
            prop_assert!(once.max_abs_diff(&twice) <= 1e-12 * p.sqrt());
            // Direction preserved.
            let a = w.scaled(1.0 / w.frobenius_sqr().sqrt());
            let b = once.scaled(1.0 / once.frobenius_sqr().sqrt());
            prop_assert!(a.max_abs_diff(&b) < 1e-12);

            prop_assume!(re.iter().zip(&im).all(|(a, b)| a.hypot(*b) > 1e-6));
            let (bt, br) = normalize_amplitudes(&re, &im).unwrap();
            let (bt2, br2) = normalize_amplitudes(&bt, &br).unwrap();
            for i in 0..6 {
                prop_assert!((bt[i] - bt2[i]).abs() < 1e-12 && (br[i] - br2[i]).abs() < 1e-12);
                prop_assert!((bt[i] * bt[i] + br[i] * br[i] - 1.0).abs() < 1e-12);
                prop_assert_eq!(bt[i].signum(), re[i].signum());
                prop_assert_eq!(br[i].signum(), im[i].signum());
                if im[i].abs() > 1e-3 {
                    prop_assert!((bt[i] / br[i] - re[i] / im[i]).abs() < 1e-9 * (1.0 + (re[i] / im[i]).abs()));
                }
            }
        }

        #[test]
        fn regulator_strictly_inside(x in proptest::num::f64::NORMAL) {
            let v = regulate_phase_delta(&[x], &RegulatorConfig::default())[0];
            prop_assert!(v > 0.0 && v < TAU);
        }

        #[test]
        fn regulator_monotone(a in -40.0f64..40.0, b in -40.0f64..40.0) {
            prop_assume!(a < b);
            let reg = RegulatorConfig::default();
            let out = regulate_phase_delta(&[a, b], &reg);
            prop_assert!(out[0] <= out[1]);
        }

        #[test]
        fn phase_delta_matches_complex_product(t in 0.0f64..TAU, d in 0.0f64..TAU) {
            let out = apply_phase_delta(&[t], &[d])[0];
            prop_assert!((0.0..TAU).contains(&out));
            let lhs = C64::from_polar(1.0, out);
            let rhs = C64::from_polar(1.0, t) * C64::from_polar(1.0, d);
            prop_assert!((lhs - rhs).norm() < 1e-12);
        }
    }
}
