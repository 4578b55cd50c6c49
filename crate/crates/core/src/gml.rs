//! The gradient-based meta-learning loop.
//!
//! Three small networks turn WSR gradients into variable updates:
//! PN for the precoder, AN for the amplitudes, TN for the phases. Each outer
//! iteration restarts the updated variable from the run's initial value and
//! applies `inner` sequential network updates, PN first, then AN, then TN,
//! each seeing the latest values of the other two variables. The loss at the
//! resulting state is backpropagated into each network's parameters (network
//! inputs, i.e. the WSR gradients, are held constant), averaged over the
//! outer iterations, and applied with Adam: PN every epoch, AN every `n1`
//! epochs, TN every `n2` epochs.
//!
//! In the coupled-phase mode the TN loss adds `ρ‖θ − θ̃‖²`, where `θ̃` is the
//! nearest coupled-feasible phase vector and `ρ` grows geometrically over the
//! run. The returned solution then has its phases projected onto the coupled
//! set and its WSR re-evaluated there.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constraints::{
    self, apply_phase_delta, coupling_deviation, coupling_residual, normalize_amplitudes, normalize_power,
    phase_differences, project_coupled_phases, regulate_phase_delta, sigmoid, wrap_phase, RegulatorConfig,
};
use crate::error::{Error, Result};
use crate::gradients::{coefficient_gradients, precoder_gradient, wsr_gradients};
use crate::linalg::{CMatrix, C64};
use crate::model::{BeamformingState, ChannelSet, Evaluation, SystemConfig};
use crate::networks::{
    adam_step, coefficient_forward_cached, pn_backward, pn_forward_cached, AdamState, ForwardCache, Mlp,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseMode {
    Independent,
    Coupled,
}

/// Geometric ramp of the penalty factor from `rho_min` to `rho_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySchedule {
    pub rho_min: f64,
    pub rho_max: f64,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        Self {
            rho_min: 1e-2,
            rho_max: 1e2,
        }
    }
}

impl PenaltySchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_min > 0.0 && self.rho_min <= self.rho_max && self.rho_max.is_finite()) {
            return Err(Error::Config(format!(
                "penalty schedule needs 0 < rho_min <= rho_max, got {} .. {}",
                self.rho_min, self.rho_max
            )));
        }
        Ok(())
    }
}

/// `rho_min · (rho_max/rho_min)^{epoch/n_epochs}`.
pub fn rho_at(schedule: &PenaltySchedule, epoch: usize, n_epochs: usize) -> f64 {
    let frac = if n_epochs == 0 {
        1.0
    } else {
        (epoch.min(n_epochs)) as f64 / n_epochs as f64
    };
    schedule.rho_min * (schedule.rho_max / schedule.rho_min).powf(frac)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub outer: usize,
    pub inner: usize,
    /// Adam learning rate of the precoder network.
    pub lr_w: f64,
    /// Adam learning rate of the amplitude network.
    pub lr_a: f64,
    /// Adam learning rate of the phase network.
    pub lr_theta: f64,
    /// Amplitude network update interval, in epochs.
    pub n1: usize,
    /// Phase network update interval, in epochs.
    pub n2: usize,
    pub mode: PhaseMode,
    pub penalty: PenaltySchedule,
    pub regulator: RegulatorConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            outer: 1,
            inner: 1,
            lr_w: 1e-3,
            lr_a: 5e-3,
            lr_theta: 5e-3,
            n1: 5,
            n2: 5,
            mode: PhaseMode::Independent,
            penalty: PenaltySchedule::default(),
            regulator: RegulatorConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the shorter 300-epoch horizon used at desk scale.
    pub fn desk() -> Self {
        Self {
            epochs: 300,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("outer", self.outer),
            ("inner", self.inner),
            ("n1", self.n1),
            ("n2", self.n2),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        for (name, lr) in [("lr_w", self.lr_w), ("lr_a", self.lr_a), ("lr_theta", self.lr_theta)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        self.penalty.validate()?;
        self.regulator.validate()
    }
}

/// The PN, AN and TN networks of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Subnetworks {
    pub pn: Mlp,
    pub an: Mlp,
    pub tn: Mlp,
}

impl Subnetworks {
    pub fn random<R: Rng + ?Sized>(sys: &SystemConfig, rng: &mut R) -> Self {
        Self {
            pn: Mlp::precoder(sys.antennas, rng),
            an: Mlp::coefficient(sys.elements, rng),
            tn: Mlp::coefficient(sys.elements, rng),
        }
    }

    pub fn zeros(sys: &SystemConfig) -> Self {
        let n2 = 2 * sys.elements;
        Self {
            pn: Mlp::zeros(sys.antennas, crate::networks::PN_HIDDEN, sys.antennas),
            an: Mlp::zeros(n2, crate::networks::AN_TN_HIDDEN, n2),
            tn: Mlp::zeros(n2, crate::networks::AN_TN_HIDDEN, n2),
        }
    }
}

/// Feasible random starting point: Gaussian precoder scaled to `p_max`,
/// amplitudes `1/√2`, phases uniform on `[0, 2π)`.
pub fn random_initial_state<R: Rng + ?Sized>(sys: &SystemConfig, rng: &mut R) -> Result<BeamformingState> {
    let w = CMatrix::from_fn(sys.antennas, sys.users, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(re, im)
    });
    let n = sys.elements;
    Ok(BeamformingState {
        w: normalize_power(&w, sys.p_max)?,
        beta_t: vec![FRAC_1_SQRT_2; n],
        beta_r: vec![FRAC_1_SQRT_2; n],
        theta_t: (0..n).map(|_| rng.random_range(0.0..TAU)).collect(),
        theta_r: (0..n).map(|_| rng.random_range(0.0..TAU)).collect(),
    })
}

// ---------------------------------------------------------------------------
// Inner updates. Each public op performs one network-driven step; the traced
// variants also keep what backpropagation needs.

struct PrecoderTrace {
    caches: Vec<ForwardCache>,
    pre_norm: CMatrix,
}

struct AmplitudeTrace {
    cache: ForwardCache,
    raw_t: Vec<f64>,
    raw_r: Vec<f64>,
}

struct PhaseTrace {
    cache: ForwardCache,
    raw_delta: Vec<f64>,
}

fn precoder_step(pn: &Mlp, sys: &SystemConfig, ch: &ChannelSet, state: &BeamformingState) -> Result<(BeamformingState, PrecoderTrace)> {
    let eval = Evaluation::new(sys, ch, state);
    let grad = precoder_gradient(sys, ch, &eval);
    let (delta, caches) = pn_forward_cached(pn, &grad)?;
    let mut pre_norm = state.w.clone();
    for (w, d) in pre_norm.as_mut_slice().iter_mut().zip(delta.as_slice()) {
        *w += d;
    }
    let mut next = state.clone();
    next.w = normalize_power(&pre_norm, sys.p_max)?;
    Ok((next, PrecoderTrace { caches, pre_norm }))
}

fn amplitude_step(an: &Mlp, sys: &SystemConfig, ch: &ChannelSet, state: &BeamformingState) -> Result<(BeamformingState, AmplitudeTrace)> {
    let eval = Evaluation::new(sys, ch, state);
    let (grad, _) = coefficient_gradients(sys, ch, state, &eval);
    let (delta, cache) = coefficient_forward_cached(an, &grad)?;
    let n = sys.elements;
    let raw_t: Vec<f64> = state.beta_t.iter().zip(&delta[..n]).map(|(b, d)| b + d).collect();
    let raw_r: Vec<f64> = state.beta_r.iter().zip(&delta[n..]).map(|(b, d)| b + d).collect();
    let (beta_t, beta_r) = normalize_amplitudes(&raw_t, &raw_r)?;
    let mut next = state.clone();
    next.beta_t = beta_t;
    next.beta_r = beta_r;
    Ok((next, AmplitudeTrace { cache, raw_t, raw_r }))
}

fn phase_step(
    tn: &Mlp,
    reg: &RegulatorConfig,
    sys: &SystemConfig,
    ch: &ChannelSet,
    state: &BeamformingState,
) -> Result<(BeamformingState, PhaseTrace)> {
    let eval = Evaluation::new(sys, ch, state);
    let (_, grad) = coefficient_gradients(sys, ch, state, &eval);
    let (raw_delta, cache) = coefficient_forward_cached(tn, &grad)?;
    let delta = regulate_phase_delta(&raw_delta, reg);
    let theta = apply_phase_delta(&state.theta(), &delta);
    let mut next = state.clone();
    next.set_theta(&theta);
    Ok((next, PhaseTrace { cache, raw_delta }))
}

fn checked(sys: &SystemConfig, ch: &ChannelSet, state: &BeamformingState) -> Result<()> {
    sys.validate()?;
    ch.check_against(sys)?;
    state.check_against(sys)
}

/// One PN step: `W ← normalize(W + PN(∇_W R))`.
pub fn inner_update_precoder(nets: &Subnetworks, state: &BeamformingState, ch: &ChannelSet, sys: &SystemConfig) -> Result<BeamformingState> {
    checked(sys, ch, state)?;
    Ok(precoder_step(&nets.pn, sys, ch, state)?.0)
}

/// One AN step: `β ← normalize(β + AN(∇_β R))`.
pub fn inner_update_amplitudes(nets: &Subnetworks, state: &BeamformingState, ch: &ChannelSet, sys: &SystemConfig) -> Result<BeamformingState> {
    checked(sys, ch, state)?;
    Ok(amplitude_step(&nets.an, sys, ch, state)?.0)
}

/// One TN step: `θ ← (θ + λ·sigmoid(TN(∇_θ R))) mod 2π`.
pub fn inner_update_phases(
    nets: &Subnetworks,
    state: &BeamformingState,
    ch: &ChannelSet,
    sys: &SystemConfig,
    reg: &RegulatorConfig,
) -> Result<BeamformingState> {
    checked(sys, ch, state)?;
    Ok(phase_step(&nets.tn, reg, sys, ch, state)?.0)
}

/// Loss of every network in the independent mode, and of PN/AN in the coupled
/// mode: `−R`.
pub fn loss_independent(sys: &SystemConfig, ch: &ChannelSet, state: &BeamformingState) -> Result<f64> {
    Ok(-crate::model::wsr_of(sys, ch, state)?)
}

/// TN loss in the coupled mode: `−R + ρ‖θ − θ̃‖²`, with `θ̃` the nearest
/// coupled-feasible phases of `state`.
pub fn loss_coupled_tn(sys: &SystemConfig, ch: &ChannelSet, state: &BeamformingState, rho: f64) -> Result<f64> {
    if !(rho >= 0.0) {
        return Err(Error::Domain(format!("penalty factor must be non-negative, got {rho}")));
    }
    Ok(loss_independent(sys, ch, state)? + rho * penalty_deviation(state))
}

fn penalty_deviation(state: &BeamformingState) -> f64 {
    let aux = project_coupled_phases(&state.theta_t, &state.theta_r);
    coupling_deviation(&state.theta_t, &state.theta_r, &aux)
}

// ---------------------------------------------------------------------------
// Backpropagation through the inner chains. `d_*` arguments are loss
// gradients with respect to the variable produced by the last step.

/// `d_w` uses packed real coordinates: `∂L/∂Re W + j ∂L/∂Im W`.
fn precoder_backward(pn: &Mlp, traces: &[PrecoderTrace], mut d_w: CMatrix, p_max: f64, grad: &mut [f64]) {
    for trace in traces.iter().rev() {
        let x = &trace.pre_norm;
        let norm = x.frobenius_sqr().sqrt();
        let radial: f64 = x
            .as_slice()
            .iter()
            .zip(d_w.as_slice())
            .map(|(x, g)| (x.conj() * g).re)
            .sum::<f64>()
            / norm;
        let scale = p_max.sqrt() / norm;
        let d_x = CMatrix::from_column_major(
            x.rows(),
            x.cols(),
            x.as_slice()
                .iter()
                .zip(d_w.as_slice())
                .map(|(x, g)| (g - x * (radial / norm)) * scale)
                .collect(),
        );
        pn_backward(pn, &trace.caches, &d_x, grad);
        // W_prev enters only through the addition; its influence on the
        // network input is not differentiated.
        d_w = d_x;
    }
}

fn amplitude_backward(an: &Mlp, traces: &[AmplitudeTrace], d_beta: Vec<f64>, grad: &mut [f64]) {
    let mut d = d_beta;
    for trace in traces.iter().rev() {
        let n = trace.raw_t.len();
        let mut d_raw = vec![0.0; 2 * n];
        for i in 0..n {
            let (xt, xr) = (trace.raw_t[i], trace.raw_r[i]);
            let norm = xt.hypot(xr);
            let (vt, vr) = (xt / norm, xr / norm);
            let (gt, gr) = (d[i], d[n + i]);
            let dot = vt * gt + vr * gr;
            d_raw[i] = (gt - vt * dot) / norm;
            d_raw[n + i] = (gr - vr * dot) / norm;
        }
        an.backward(&trace.cache, &d_raw, grad);
        d = d_raw;
    }
}

fn phase_backward(tn: &Mlp, traces: &[PhaseTrace], d_theta: Vec<f64>, lambda: f64, grad: &mut [f64]) {
    for trace in traces.iter().rev() {
        let d_raw: Vec<f64> = d_theta
            .iter()
            .zip(&trace.raw_delta)
            .map(|(g, z)| {
                let s = sigmoid(*z);
                g * lambda * s * (1.0 - s)
            })
            .collect();
        tn.backward(&trace.cache, &d_raw, grad);
        // The wrap and the addition both pass the phase gradient unchanged.
    }
}

// ---------------------------------------------------------------------------

/// Per-epoch records of a run. Values describe the state reached in the
/// last outer iteration of each epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Traces {
    pub wsr_best: Vec<f64>,
    pub wsr_current: Vec<f64>,
    /// WSR after projecting the current phases onto the coupled set
    /// (coupled mode only; empty otherwise).
    pub wsr_projected: Vec<f64>,
    /// `ρ‖θ − θ̃‖²` (zero in the independent mode).
    pub penalty: Vec<f64>,
    pub rho: Vec<f64>,
    /// `(θ_t − θ_r) mod 2π`, one vector of N per epoch.
    pub phase_differences: Vec<Vec<f64>>,
    /// `max_n |cos(θ_t − θ_r)|`.
    pub coupling_residual: Vec<f64>,
    /// `|tr(WᴴW) − p_max| / p_max`.
    pub power_error: Vec<f64>,
    /// `max_n |β_t² + β_r² − 1|`.
    pub amplitude_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub w: CMatrix,
    /// Stacked `(β_t, β_r)`.
    pub beta: Vec<f64>,
    /// Stacked `(θ_t, θ_r)`; projected onto the coupled set in coupled mode.
    pub theta: Vec<f64>,
    /// WSR of the returned variables.
    pub wsr: f64,
    /// Best WSR seen during training, before any projection.
    pub wsr_unprojected: f64,
    /// Phases of the best state before projection.
    pub theta_unprojected: Vec<f64>,
    pub feasible_coupled: bool,
    pub mode: PhaseMode,
    pub traces: Traces,
}

impl Solution {
    pub fn state(&self) -> BeamformingState {
        let n = self.beta.len() / 2;
        BeamformingState {
            w: self.w.clone(),
            beta_t: self.beta[..n].to_vec(),
            beta_r: self.beta[n..].to_vec(),
            theta_t: self.theta[..n].to_vec(),
            theta_r: self.theta[n..].to_vec(),
        }
    }

    pub fn coupling_residual(&self) -> f64 {
        let n = self.theta.len() / 2;
        coupling_residual(&self.theta[..n], &self.theta[n..])
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Knobs used by the baselines to freeze parts of the problem.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Starting variables; drawn from the run seed when absent.
    pub initial: Option<BeamformingState>,
    /// Starting networks; drawn from the run seed when absent.
    pub networks: Option<Subnetworks>,
    pub train_amplitudes: bool,
    pub train_phases: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            initial: None,
            networks: None,
            train_amplitudes: true,
            train_phases: true,
        }
    }
}

/// Runs the full training loop and returns the best state found.
pub fn run_gml(sys: &SystemConfig, ch: &ChannelSet, train: &TrainConfig) -> Result<Solution> {
    run_gml_with(sys, ch, train, RunOptions::default())
}

pub fn run_gml_with(sys: &SystemConfig, ch: &ChannelSet, train: &TrainConfig, opts: RunOptions) -> Result<Solution> {
    sys.validate()?;
    ch.check_against(sys)?;
    train.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut nets = match opts.networks {
        Some(n) => n,
        None => Subnetworks::random(sys, &mut rng),
    };
    let initial = match opts.initial {
        Some(s) => {
            s.check_against(sys)?;
            s
        }
        None => random_initial_state(sys, &mut rng)?,
    };

    let mut adam_pn = AdamState::new(nets.pn.param_count());
    let mut adam_an = AdamState::new(nets.an.param_count());
    let mut adam_tn = AdamState::new(nets.tn.param_count());

    let coupled = train.mode == PhaseMode::Coupled;
    let mut latest = initial.clone();
    let mut best = initial.clone();
    let mut best_wsr = 0.0;
    let mut traces = Traces::default();

    for epoch in 1..=train.epochs {
        let at = |outer: usize, inner: usize| {
            move |e: Error| Error::Run {
                epoch,
                outer,
                inner,
                source: Box::new(e),
            }
        };
        let rho = if coupled { rho_at(&train.penalty, epoch, train.epochs) } else { 0.0 };
        let update_an = opts.train_amplitudes && epoch % train.n1 == 0;
        let update_tn = opts.train_phases && epoch % train.n2 == 0;

        let mut grad_pn = vec![0.0; nets.pn.param_count()];
        let mut grad_an = vec![0.0; if update_an { nets.an.param_count() } else { 0 }];
        let mut grad_tn = vec![0.0; if update_tn { nets.tn.param_count() } else { 0 }];

        for outer in 1..=train.outer {
            let mut state = latest.clone();

            state.w = initial.w.clone();
            let mut pn_traces = Vec::with_capacity(train.inner);
            for inner in 1..=train.inner {
                let (next, trace) = precoder_step(&nets.pn, sys, ch, &state).map_err(at(outer, inner))?;
                state = next;
                pn_traces.push(trace);
            }

            let mut an_traces = Vec::new();
            if opts.train_amplitudes {
                state.beta_t = initial.beta_t.clone();
                state.beta_r = initial.beta_r.clone();
                for inner in 1..=train.inner {
                    let (next, trace) = amplitude_step(&nets.an, sys, ch, &state).map_err(at(outer, inner))?;
                    state = next;
                    an_traces.push(trace);
                }
            }

            let mut tn_traces = Vec::new();
            if opts.train_phases {
                state.theta_t = initial.theta_t.clone();
                state.theta_r = initial.theta_r.clone();
                for inner in 1..=train.inner {
                    let (next, trace) =
                        phase_step(&nets.tn, &train.regulator, sys, ch, &state).map_err(at(outer, inner))?;
                    state = next;
                    tn_traces.push(trace);
                }
            }

            // Loss gradients at the state reached by this outer iteration.
            let g = wsr_gradients(sys, ch, &state).map_err(at(outer, train.inner))?;
            let d_w = g.grad_w.scaled(-2.0);
            precoder_backward(&nets.pn, &pn_traces, d_w, sys.p_max, &mut grad_pn);
            if update_an {
                let d_beta = g.grad_beta.iter().map(|x| -x).collect();
                amplitude_backward(&nets.an, &an_traces, d_beta, &mut grad_an);
            }
            if update_tn {
                let mut d_theta: Vec<f64> = g.grad_theta.iter().map(|x| -x).collect();
                if coupled {
                    let aux = project_coupled_phases(&state.theta_t, &state.theta_r).stacked();
                    for ((d, t), a) in d_theta.iter_mut().zip(state.theta()).zip(aux) {
                        *d += 2.0 * rho * (t - a);
                    }
                }
                phase_backward(&nets.tn, &tn_traces, d_theta, train.regulator.lambda, &mut grad_tn);
            }

            let current = crate::model::wsr_of(sys, ch, &state).map_err(at(outer, train.inner))?;
            if current > best_wsr {
                best_wsr = current;
                best = state.clone();
            }
            if outer == train.outer {
                record(&mut traces, sys, ch, &state, current, best_wsr, rho, coupled)?;
            }
            latest = state;
        }

        let scale = 1.0 / train.outer as f64;
        let apply = |net: &mut Mlp, grad: &mut [f64], adam: &mut AdamState, lr: f64| -> Result<()> {
            grad.iter_mut().for_each(|g| *g *= scale);
            adam_step(net.params_mut(), grad, adam, lr)
        };
        let end = train.inner;
        apply(&mut nets.pn, &mut grad_pn, &mut adam_pn, train.lr_w).map_err(at(train.outer, end))?;
        if update_an {
            apply(&mut nets.an, &mut grad_an, &mut adam_an, train.lr_a).map_err(at(train.outer, end))?;
        }
        if update_tn {
            apply(&mut nets.tn, &mut grad_tn, &mut adam_tn, train.lr_theta).map_err(at(train.outer, end))?;
        }
    }

    finish(sys, ch, train.mode, best, best_wsr, traces)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn record(
    traces: &mut Traces,
    sys: &SystemConfig,
    ch: &ChannelSet,
    state: &BeamformingState,
    current: f64,
    best: f64,
    rho: f64,
    coupled: bool,
) -> Result<()> {
    traces.wsr_current.push(current);
    traces.wsr_best.push(best);
    traces.rho.push(rho);
    traces.penalty.push(if coupled { rho * penalty_deviation(state) } else { 0.0 });
    if coupled {
        traces.wsr_projected.push(crate::model::wsr_of(sys, ch, &project_state(state))?);
    }
    traces
        .phase_differences
        .push(phase_differences(&state.theta_t, &state.theta_r));
    traces.coupling_residual.push(
        coupling_residual(&state.theta_t, &state.theta_r)
            .into_iter()
            .fold(0.0, f64::max),
    );
    traces.power_error.push(state.power_error(sys.p_max));
    traces.amplitude_error.push(state.amplitude_error());
    Ok(())
}

/// Copy of `state` with its phases moved to the nearest coupled-feasible
/// point, wrapped into `[0, 2π)`.
pub fn project_state(state: &BeamformingState) -> BeamformingState {
    let aux = project_coupled_phases(&state.theta_t, &state.theta_r);
    let mut out = state.clone();
    out.theta_t = aux.theta_t_aux.iter().map(|t| wrap_phase(*t)).collect();
    out.theta_r = aux.theta_r_aux.iter().map(|t| wrap_phase(*t)).collect();
    out
}

pub(crate) fn finish(
    sys: &SystemConfig,
    ch: &ChannelSet,
    mode: PhaseMode,
    best: BeamformingState,
    best_wsr: f64,
    traces: Traces,
) -> Result<Solution> {
    let theta_unprojected = best.theta();
    let reported = match mode {
        PhaseMode::Independent => best,
        PhaseMode::Coupled => project_state(&best),
    };
    let wsr = match mode {
        PhaseMode::Independent => best_wsr,
        PhaseMode::Coupled => crate::model::wsr_of(sys, ch, &reported)?,
    };
    let residual = constraints::coupling_residual(&reported.theta_t, &reported.theta_r)
        .into_iter()
        .fold(0.0, f64::max);
    Ok(Solution {
        beta: reported.beta(),
        theta: reported.theta(),
        w: reported.w,
        wsr,
        wsr_unprojected: best_wsr,
        theta_unprojected,
        feasible_coupled: residual < 1e-9,
        mode,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{desk_scenario, generate_channels};
    use crate::model::wsr_of;

    fn instance(seed: u64) -> (SystemConfig, ChannelSet, BeamformingState, Subnetworks) {
        let sys = SystemConfig::new(3, 4, 2, 1.0, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = ChannelSet::new(
            CMatrix::from_fn(4, 3, |_, _| C64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng))),
            (0..2)
                .map(|_| (0..4).map(|_| C64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng))).collect())
                .collect(),
        )
        .unwrap();
        let nets = Subnetworks::random(&sys, &mut rng);
        let state = random_initial_state(&sys, &mut rng).unwrap();
        (sys, ch, state, nets)
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    // Central differences of `loss` over every `stride`-th parameter.
    fn fd(params: &[f64], stride: usize, loss: impl Fn(&[f64]) -> f64) -> Vec<(usize, f64)> {
        let h = 1e-6;
        (0..params.len())
            .step_by(stride)
            .map(|i| {
                let mut p = params.to_vec();
                p[i] += h;
                let up = loss(&p);
                p[i] -= 2.0 * h;
                let down = loss(&p);
                (i, (up - down) / (2.0 * h))
            })
            .collect()
    }

    #[test]
    fn penalty_schedule_endpoints() {
        let s = PenaltySchedule::default();
        assert_eq!(rho_at(&s, 0, 300), 1e-2);
        assert!((rho_at(&s, 300, 300) - 1e2).abs() < 1e-12);
        assert!((rho_at(&s, 150, 300) - 1.0).abs() < 1e-12);
        assert!((1..=300).all(|e| rho_at(&s, e, 300) >= rho_at(&s, e - 1, 300)));
    }

    #[test]
    fn coupled_loss_examples() {
        let (sys, ch, mut state, _) = instance(1);
        let base = loss_independent(&sys, &ch, &state).unwrap();
        assert_eq!(loss_coupled_tn(&sys, &ch, &state, 0.0).unwrap(), base);
        assert!(loss_coupled_tn(&sys, &ch, &state, -1.0).is_err());
        let projected = project_state(&state);
        let r = loss_independent(&sys, &ch, &projected).unwrap();
        assert!((loss_coupled_tn(&sys, &ch, &projected, 10.0).unwrap() - r).abs() < 1e-12);

        // One element at (0, 0): penalty π²/8.
        let one = SystemConfig::new(1, 1, 1, 1.0, 1.0);
        let ch1 = ChannelSet::new(CMatrix::from_fn(1, 1, |_, _| C64::new(1.0, 0.0)), vec![vec![C64::new(1.0, 0.0)]]).unwrap();
        state = BeamformingState {
            w: CMatrix::from_fn(1, 1, |_, _| C64::new(1.0, 0.0)),
            beta_t: vec![FRAC_1_SQRT_2],
            beta_r: vec![FRAC_1_SQRT_2],
            theta_t: vec![0.0],
            theta_r: vec![0.0],
        };
        let extra = loss_coupled_tn(&one, &ch1, &state, 1.0).unwrap() - loss_independent(&one, &ch1, &state).unwrap();
        assert!((extra - std::f64::consts::PI.powi(2) / 8.0).abs() < 1e-12);
    }

    #[test]
    fn inner_updates_keep_constraints() {
        let (sys, ch, state, nets) = instance(2);
        let w = inner_update_precoder(&nets, &state, &ch, &sys).unwrap();
        assert!(w.power_error(sys.p_max) < 1e-12);
        assert_eq!(w.theta(), state.theta());
        let a = inner_update_amplitudes(&nets, &state, &ch, &sys).unwrap();
        assert!(a.amplitude_error() < 1e-12);
        assert_eq!(a.w, state.w);
        let p = inner_update_phases(&nets, &state, &ch, &sys, &RegulatorConfig::default()).unwrap();
        assert!(p.theta().iter().all(|t| (0.0..TAU).contains(t)));
        assert_eq!(p.beta(), state.beta());
    }

    #[test]
    fn zero_networks_give_fixed_steps() {
        let (sys, ch, state, _) = instance(3);
        let nets = Subnetworks::zeros(&sys);
        let w = inner_update_precoder(&nets, &state, &ch, &sys).unwrap();
        assert!(w.w.max_abs_diff(&state.w) < 1e-15);
        let a = inner_update_amplitudes(&nets, &state, &ch, &sys).unwrap();
        assert!(a.beta().iter().zip(state.beta()).all(|(x, y)| (x - y).abs() < 1e-15));
        // Zero raw output → sigmoid(0)·λ = π.
        let p = inner_update_phases(&nets, &state, &ch, &sys, &RegulatorConfig::default()).unwrap();
        for (after, before) in p.theta().iter().zip(state.theta()) {
            assert!((after - wrap_phase(before + std::f64::consts::PI)).abs() < 1e-12);
        }
    }

    #[test]
    fn precoder_meta_gradient_matches_finite_differences() {
        let (sys, ch, state, nets) = instance(4);
        let loss = |params: &[f64]| {
            let mut pn = nets.pn.clone();
            pn.params_mut().copy_from_slice(params);
            let (next, _) = precoder_step(&pn, &sys, &ch, &state).unwrap();
            -wsr_of(&sys, &ch, &next).unwrap()
        };
        let (next, trace) = precoder_step(&nets.pn, &sys, &ch, &state).unwrap();
        let g = wsr_gradients(&sys, &ch, &next).unwrap();
        let mut grad = vec![0.0; nets.pn.param_count()];
        precoder_backward(&nets.pn, &[trace], g.grad_w.scaled(-2.0), sys.p_max, &mut grad);
        let numeric = fd(nets.pn.params(), 7, loss);
        let (a, b): (Vec<f64>, Vec<f64>) = numeric.iter().map(|(i, d)| (grad[*i], *d)).unzip();
        assert!(max_rel(&a, &b) < 1e-6, "{}", max_rel(&a, &b));
    }

    #[test]
    fn amplitude_meta_gradient_matches_finite_differences() {
        let (sys, ch, state, nets) = instance(5);
        let loss = |params: &[f64]| {
            let mut an = nets.an.clone();
            an.params_mut().copy_from_slice(params);
            let (next, _) = amplitude_step(&an, &sys, &ch, &state).unwrap();
            -wsr_of(&sys, &ch, &next).unwrap()
        };
        let (next, trace) = amplitude_step(&nets.an, &sys, &ch, &state).unwrap();
        let g = wsr_gradients(&sys, &ch, &next).unwrap();
        let mut grad = vec![0.0; nets.an.param_count()];
        amplitude_backward(&nets.an, &[trace], g.grad_beta.iter().map(|x| -x).collect(), &mut grad);
        let numeric = fd(nets.an.params(), 11, loss);
        let (a, b): (Vec<f64>, Vec<f64>) = numeric.iter().map(|(i, d)| (grad[*i], *d)).unzip();
        assert!(max_rel(&a, &b) < 1e-6, "{}", max_rel(&a, &b));
    }

    #[test]
    fn phase_meta_gradient_matches_finite_differences() {
        let (sys, ch, state, nets) = instance(6);
        let reg = RegulatorConfig::default();
        let rho = 0.7;
        let loss = |params: &[f64]| {
            let mut tn = nets.tn.clone();
            tn.params_mut().copy_from_slice(params);
            let (next, _) = phase_step(&tn, &reg, &sys, &ch, &state).unwrap();
            loss_coupled_tn(&sys, &ch, &next, rho).unwrap()
        };
        let (next, trace) = phase_step(&nets.tn, &reg, &sys, &ch, &state).unwrap();
        let g = wsr_gradients(&sys, &ch, &next).unwrap();
        let aux = project_coupled_phases(&next.theta_t, &next.theta_r).stacked();
        let d: Vec<f64> = g
            .grad_theta
            .iter()
            .zip(next.theta())
            .zip(aux)
            .map(|((g, t), a)| -g + 2.0 * rho * (t - a))
            .collect();
        let mut grad = vec![0.0; nets.tn.param_count()];
        phase_backward(&nets.tn, &[trace], d, reg.lambda, &mut grad);
        let numeric = fd(nets.tn.params(), 11, loss);
        let (a, b): (Vec<f64>, Vec<f64>) = numeric.iter().map(|(i, d)| (grad[*i], *d)).unzip();
        assert!(max_rel(&a, &b) < 1e-5, "{}", max_rel(&a, &b));
    }

    fn desk(seed: u64) -> (SystemConfig, ChannelSet) {
        let (sys, cc) = desk_scenario();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = generate_channels(&sys, &cc, &mut rng).unwrap();
        (sys, ch)
    }

    #[test]
    fn short_run_is_deterministic_and_feasible() {
        let (sys, ch) = desk(7);
        for mode in [PhaseMode::Independent, PhaseMode::Coupled] {
            let train = TrainConfig {
                epochs: 40,
                mode,
                seed: 3,
                ..TrainConfig::desk()
            };
            let a = run_gml(&sys, &ch, &train).unwrap();
            let b = run_gml(&sys, &ch, &train).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.traces.wsr_best.len(), 40);
            assert!(a.traces.wsr_best.windows(2).all(|w| w[1] >= w[0]));
            assert!(a.traces.power_error.iter().all(|e| *e < 1e-9));
            assert!(a.traces.amplitude_error.iter().all(|e| *e < 1e-12));
            assert!(a.state().power_error(sys.p_max) < 1e-9);
            let recomputed = wsr_of(&sys, &ch, &a.state()).unwrap();
            assert!((recomputed - a.wsr).abs() <= 1e-12 * a.wsr.max(1.0));
            if mode == PhaseMode::Coupled {
                assert!(a.feasible_coupled);
                assert_eq!(a.traces.wsr_projected.len(), 40);
            }
        }
    }

    #[test]
    fn best_wsr_improves_on_initial_point() {
        let (sys, ch) = desk(8);
        let train = TrainConfig {
            epochs: 150,
            ..TrainConfig::desk()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let _ = Subnetworks::random(&sys, &mut rng);
        let initial = random_initial_state(&sys, &mut rng).unwrap();
        let sol = run_gml(&sys, &ch, &train).unwrap();
        assert!(sol.wsr > wsr_of(&sys, &ch, &initial).unwrap());
    }

    #[test]
    fn invalid_configuration_is_rejected() {
        let (sys, ch) = desk(9);
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::desk() },
            TrainConfig { lr_w: 0.0, ..TrainConfig::desk() },
            TrainConfig { n2: 0, ..TrainConfig::desk() },
            TrainConfig {
                penalty: PenaltySchedule { rho_min: 1.0, rho_max: 0.5 },
                ..TrainConfig::desk()
            },
        ] {
            assert!(matches!(run_gml(&sys, &ch, &bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn failures_carry_iteration_context() {
        let (sys, ch) = desk(10);
        let mut nets = Subnetworks::zeros(&sys);
        nets.pn.params_mut()[0] = f64::NAN;
        let opts = RunOptions {
            networks: Some(nets),
            ..RunOptions::default()
        };
        let err = run_gml_with(&sys, &ch, &TrainConfig::desk(), opts).unwrap_err();
        match err {
            Error::Run { epoch, outer, inner, .. } => assert_eq!((epoch, outer, inner), (1, 1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
