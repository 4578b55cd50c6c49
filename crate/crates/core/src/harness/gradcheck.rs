//! Finite-difference audit of the analytic WSR gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use twofloat::TwoFloat;

use crate::error::Result;
use crate::gradients::{wsr_gradients, GradientBundle, GradientDiscrepancy};
use crate::linalg::{CMatrix, C64};
use crate::model::{BeamformingState, ChannelSet, Side, SystemConfig};

/// Signature of the gradient routine under test.
pub type AnalyticGradient = fn(&SystemConfig, &ChannelSet, &BeamformingState) -> Result<GradientBundle>;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub max_antennas: usize,
    pub max_elements: usize,
    pub max_users: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            seed: 0,
            max_antennas: 8,
            max_elements: 16,
            max_users: 4,
            rel_tol: 1e-6,
            abs_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCheck {
    pub antennas: usize,
    pub elements: usize,
    pub users: usize,
    pub precoder: GradientDiscrepancy,
    pub amplitudes: GradientDiscrepancy,
    pub phases: GradientDiscrepancy,
}

impl InstanceCheck {
    pub fn worst(&self) -> GradientDiscrepancy {
        self.precoder.merge(self.amplitudes).merge(self.phases)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub instances: Vec<InstanceCheck>,
    pub worst: GradientDiscrepancy,
    pub passed: bool,
}

fn cgauss(rng: &mut ChaCha8Rng) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// A random well-conditioned instance: unit-variance channels, budget and
/// noise near one, random weights, sides and surface state.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    cfg: &GradCheckConfig,
) -> Result<(SystemConfig, ChannelSet, BeamformingState)> {
    let m = rng.random_range(1..=cfg.max_antennas);
    let n = rng.random_range(1..=cfg.max_elements);
    let k = rng.random_range(1..=cfg.max_users);
    let mut sys = SystemConfig::new(m, n, k, rng.random_range(0.5..2.0), rng.random_range(0.2..1.0));
    sys.weights = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    sys.user_sides = (0..k)
        .map(|_| if rng.random_bool(0.5) { Side::Transmission } else { Side::Reflection })
        .collect();
    let ch = ChannelSet::new(
        CMatrix::from_fn(n, m, |_, _| cgauss(rng)),
        (0..k).map(|_| (0..n).map(|_| cgauss(rng)).collect()).collect(),
    )?;
    let split: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::FRAC_PI_2)).collect();
    let state = BeamformingState {
        w: crate::constraints::normalize_power(&CMatrix::from_fn(m, k, |_, _| cgauss(rng)), sys.p_max)?,
        beta_t: split.iter().map(|a| a.cos()).collect(),
        beta_r: split.iter().map(|a| a.sin()).collect(),
        theta_t: (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
        theta_r: (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
    };
    Ok((sys, ch, state))
}

// ---------------------------------------------------------------------------
// Reference gradient in double-double arithmetic.
//
// Plain f64 differences bottom out near 1e-13 absolute, which is too coarse
// for a per-coordinate relative comparison on gradient entries of size 1e-7.
// Here the signal and interference sums are formed in double-double, so
// their differences between stencil points are exact to ~1e-30, and the WSR
// difference is taken as ln_1p of the relative change.

/// Step of the five-point stencil used by [`reference_gradient`].
pub const REFERENCE_STEP: f64 = 1e-5;

#[derive(Clone, Copy)]
struct Cdd {
    re: TwoFloat,
    im: TwoFloat,
}

impl Cdd {
    fn new(re: TwoFloat, im: TwoFloat) -> Self {
        Self { re, im }
    }

    fn of(z: C64) -> Self {
        Self::new(z.re.into(), z.im.into())
    }

    fn zero() -> Self {
        Self::of(C64::new(0.0, 0.0))
    }

    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }

    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.im + o.im)
    }

    fn conj(self) -> Self {
        Self::new(self.re, -self.im)
    }

    fn norm_sqr(self) -> TwoFloat {
        self.re * self.re + self.im * self.im
    }
}

/// `e^{jh}` by its Taylor series; exact to double-double precision for
/// `|h| ≤ 1e-3`.
fn small_rotation(h: f64) -> Cdd {
    let h = TwoFloat::from(h);
    let h2 = h * h;
    let (mut cos, mut sin) = (TwoFloat::from(1.0), h);
    let (mut c_term, mut s_term) = (TwoFloat::from(1.0), h);
    for i in 1..6 {
        let i = i as f64;
        c_term = -c_term * h2 / ((2.0 * i - 1.0) * (2.0 * i));
        s_term = -s_term * h2 / ((2.0 * i) * (2.0 * i + 1.0));
        cos += c_term;
        sin += s_term;
    }
    Cdd::new(cos, sin)
}

#[derive(Clone, Copy)]
enum Coordinate {
    Precoder { row: usize, col: usize, imaginary: bool },
    Amplitude(usize),
    Phase(usize),
}

/// Per-user `(T_k, I_k)`: total received power plus noise, and interference
/// plus noise, at `state` moved by `h` along `coord`.
fn power_sums(sys: &SystemConfig, ch: &ChannelSet, state: &BeamformingState, shift: Option<(Coordinate, f64)>) -> Vec<(TwoFloat, TwoFloat)> {
    let n = sys.elements;
    let m = sys.antennas;
    let mut w: Vec<Vec<Cdd>> = (0..sys.users).map(|j| state.w.col(j).iter().map(|z| Cdd::of(*z)).collect()).collect();
    let mut beta: Vec<TwoFloat> = state.beta().into_iter().map(TwoFloat::from).collect();
    let mut phase: Vec<Cdd> = state.theta().into_iter().map(|t| Cdd::of(C64::from_polar(1.0, t))).collect();
    match shift {
        Some((Coordinate::Precoder { row, col, imaginary }, h)) => {
            let z = &mut w[col][row];
            if imaginary {
                z.im += h;
            } else {
                z.re += h;
            }
        }
        Some((Coordinate::Amplitude(i), h)) => beta[i] += h,
        Some((Coordinate::Phase(i), h)) => phase[i] = phase[i].mul(small_rotation(h)),
        None => {}
    }
    let coeff: Vec<Cdd> = (0..2 * n)
        .map(|i| Cdd::new(beta[i] * phase[i].re, beta[i] * phase[i].im))
        .collect();
    let noise = TwoFloat::from(sys.noise_power);
    (0..sys.users)
        .map(|k| {
            let offset = sys.user_sides[k].offset(n);
            let h = ch.h(k);
            let a: Vec<Cdd> = (0..m)
                .map(|col| {
                    (0..n).fold(Cdd::zero(), |acc, e| {
                        acc.add(Cdd::of(h[e]).conj().mul(coeff[offset + e]).mul(Cdd::of(ch.g().get(e, col))))
                    })
                })
                .collect();
            let powers: Vec<TwoFloat> = w
                .iter()
                .map(|wj| a.iter().zip(wj).fold(Cdd::zero(), |acc, (x, y)| acc.add(x.mul(*y))).norm_sqr())
                .collect();
            let interference = powers
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .fold(noise, |acc, (_, p)| acc + *p);
            (interference + powers[k], interference)
        })
        .collect()
}

/// Five-point differences of the WSR with double-double intermediate sums.
/// Same layout and conventions as the analytic [`GradientBundle`].
pub fn reference_gradient(sys: &SystemConfig, ch: &ChannelSet, state: &BeamformingState) -> Result<GradientBundle> {
    sys.validate()?;
    ch.check_against(sys)?;
    state.check_against(sys)?;
    let base = power_sums(sys, ch, state, None);
    let h = REFERENCE_STEP;
    let delta_r = |coord: Coordinate, step: f64| -> f64 {
        let moved = power_sums(sys, ch, state, Some((coord, step)));
        let log_ratio = |new: TwoFloat, old: TwoFloat| (f64::from(new - old) / f64::from(old)).ln_1p();
        moved
            .iter()
            .zip(&base)
            .zip(&sys.weights)
            .map(|(((t, i), (t0, i0)), wk)| wk * (log_ratio(*t, *t0) - log_ratio(*i, *i0)))
            .sum::<f64>()
            / std::f64::consts::LN_2
    };
    let derivative = |coord: Coordinate| -> f64 {
        (-delta_r(coord, 2.0 * h) + 8.0 * delta_r(coord, h) - 8.0 * delta_r(coord, -h) + delta_r(coord, -2.0 * h))
            / (12.0 * h)
    };
    let grad_w = CMatrix::from_fn(sys.antennas, sys.users, |row, col| {
        let re = derivative(Coordinate::Precoder { row, col, imaginary: false });
        let im = derivative(Coordinate::Precoder { row, col, imaginary: true });
        C64::new(re, im) / 2.0
    });
    let n2 = 2 * sys.elements;
    Ok(GradientBundle {
        grad_w,
        grad_beta: (0..n2).map(|i| derivative(Coordinate::Amplitude(i))).collect(),
        grad_theta: (0..n2).map(|i| derivative(Coordinate::Phase(i))).collect(),
    })
}

/// Compares `analytic` against [`reference_gradient`] on `cfg.instances`
/// random instances.
pub fn grad_check_with(cfg: &GradCheckConfig, analytic: AnalyticGradient) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut instances = Vec::with_capacity(cfg.instances);
    let mut worst = GradientDiscrepancy::default();
    for _ in 0..cfg.instances {
        let (sys, ch, state) = random_instance(&mut rng, cfg)?;
        let a = analytic(&sys, &ch, &state)?;
        let fd = reference_gradient(&sys, &ch, &state)?;
        let check = InstanceCheck {
            antennas: sys.antennas,
            elements: sys.elements,
            users: sys.users,
            precoder: GradientDiscrepancy::of_complex(&a.grad_w, &fd.grad_w),
            amplitudes: GradientDiscrepancy::of(&a.grad_beta, &fd.grad_beta),
            phases: GradientDiscrepancy::of(&a.grad_theta, &fd.grad_theta),
        };
        worst = worst.merge(check.worst());
        instances.push(check);
    }
    Ok(GradCheckReport {
        passed: worst.within(cfg.rel_tol, cfg.abs_tol),
        instances,
        worst,
    })
}

pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    grad_check_with(cfg, wsr_gradients)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped(sys: &SystemConfig, ch: &ChannelSet, state: &BeamformingState) -> Result<GradientBundle> {
        let mut g = wsr_gradients(sys, ch, state)?;
        g.grad_theta[0] = -g.grad_theta[0];
        Ok(g)
    }

    #[test]
    fn default_suite_passes_and_is_repeatable() {
        let cfg = GradCheckConfig::default();
        let report = grad_check(&cfg).unwrap();
        assert!(report.passed, "{:?}", report.worst);
        assert_eq!(report.instances.len(), 50);
        assert_eq!(report, grad_check(&cfg).unwrap());
    }

    #[test]
    fn reference_agrees_with_plain_differences() {
        let cfg = GradCheckConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let (sys, ch, state) = random_instance(&mut rng, &cfg).unwrap();
            let dd = reference_gradient(&sys, &ch, &state).unwrap();
            let plain = crate::gradients::finite_diff_wsr(&sys, &ch, &state, crate::gradients::FD_STEP).unwrap();
            let d = GradientDiscrepancy::of_complex(&plain.grad_w, &dd.grad_w)
                .merge(GradientDiscrepancy::of(&plain.grad_beta, &dd.grad_beta))
                .merge(GradientDiscrepancy::of(&plain.grad_theta, &dd.grad_theta));
            assert!(d.within(1e-3, 1e-8), "{d:?}");
        }
    }

    #[test]
    fn rotation_series_matches_libm() {
        for h in [1e-3, -4e-4, 1e-5] {
            let r = small_rotation(h);
            assert!((f64::from(r.re) - h.cos()).abs() < 1e-16);
            assert!((f64::from(r.im) - h.sin()).abs() < 1e-16);
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let report = grad_check_with(&GradCheckConfig::default(), flipped).unwrap();
        assert!(!report.passed);
    }
}
