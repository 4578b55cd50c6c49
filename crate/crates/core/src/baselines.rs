//! Comparison schemes: random phases, a conventional reflect-only plus
//! transmit-only surface, and a projected gradient ascent reference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::constraints::{apply_phase_delta, normalize_amplitudes, normalize_power};
use crate::error::{Error, Result};
use crate::gml::{self, random_initial_state, run_gml_with, PhaseMode, RunOptions, Solution, TrainConfig, Traces};
use crate::gradients::wsr_gradients;
use crate::model::{wsr_of, BeamformingState, ChannelSet, SystemConfig};

// Stream used for baseline starting points, kept apart from the network
// initialization stream of the same seed.
const INITIAL_STREAM: u64 = 1;

fn baseline_initial(sys: &SystemConfig, seed: u64) -> Result<BeamformingState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INITIAL_STREAM);
    random_initial_state(sys, &mut rng)
}

/// Random phases and amplitudes `1/√2`, both frozen; only the precoder is
/// learned.
pub fn random_phase_baseline(sys: &SystemConfig, ch: &ChannelSet, train: &TrainConfig) -> Result<Solution> {
    sys.validate()?;
    let initial = baseline_initial(sys, train.seed)?;
    let train = TrainConfig {
        mode: PhaseMode::Independent,
        ..train.clone()
    };
    run_gml_with(
        sys,
        ch,
        &train,
        RunOptions {
            initial: Some(initial),
            networks: None,
            train_amplitudes: false,
            train_phases: false,
        },
    )
}

/// Amplitude pattern of the conventional baseline: the first half of the
/// elements reflect only, the second half transmit only.
pub fn conventional_amplitudes(elements: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !elements.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "conventional surface needs an even element count, got {elements}"
        )));
    }
    let half = elements / 2;
    let beta_t = (0..elements).map(|n| if n < half { 0.0 } else { 1.0 }).collect();
    let beta_r = (0..elements).map(|n| if n < half { 1.0 } else { 0.0 }).collect();
    Ok((beta_t, beta_r))
}

/// Fixed reflect-only/transmit-only split; precoder and phases learned.
pub fn conventional_ris_baseline(sys: &SystemConfig, ch: &ChannelSet, train: &TrainConfig) -> Result<Solution> {
    sys.validate()?;
    let (beta_t, beta_r) = conventional_amplitudes(sys.elements)?;
    let mut initial = baseline_initial(sys, train.seed)?;
    initial.beta_t = beta_t;
    initial.beta_r = beta_r;
    let train = TrainConfig {
        mode: PhaseMode::Independent,
        ..train.clone()
    };
    run_gml_with(
        sys,
        ch,
        &train,
        RunOptions {
            initial: Some(initial),
            networks: None,
            train_amplitudes: false,
            train_phases: true,
        },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgaConfig {
    pub steps: usize,
    /// Initial step sizes of the precoder, amplitude and phase blocks.
    pub step_w: f64,
    pub step_beta: f64,
    pub step_theta: f64,
    /// Halvings tried before a block update is skipped.
    pub max_halvings: usize,
    pub seed: u64,
}

impl Default for PgaConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            step_w: 1.0,
            step_beta: 1.0,
            step_theta: 1.0,
            max_halvings: 40,
            seed: 0,
        }
    }
}

impl PgaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("step_w", self.step_w), ("step_beta", self.step_beta), ("step_theta", self.step_theta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Projected gradient ascent on the independent-phase problem.
///
/// Blocks are updated in turn (precoder, amplitudes, phases). Each block
/// starts from twice its last accepted step and halves it until the WSR does
/// not decrease, so every iterate is feasible and the WSR trace is
/// non-decreasing.
pub fn pga_oracle(sys: &SystemConfig, ch: &ChannelSet, cfg: &PgaConfig) -> Result<Solution> {
    sys.validate()?;
    ch.check_against(sys)?;
    cfg.validate()?;
    let initial = baseline_initial(sys, cfg.seed)?;
    pga_from(sys, ch, cfg, initial)
}

pub fn pga_from(sys: &SystemConfig, ch: &ChannelSet, cfg: &PgaConfig, initial: BeamformingState) -> Result<Solution> {
    initial.check_against(sys)?;
    let mut state = initial;
    let mut wsr = wsr_of(sys, ch, &state)?;
    let mut steps = [cfg.step_w, cfg.step_beta, cfg.step_theta];
    let mut traces = Traces::default();

    for _ in 0..cfg.steps {
        for (block, step) in steps.iter_mut().enumerate() {
            let g = wsr_gradients(sys, ch, &state)?;
            let mut mu = *step * 2.0;
            let mut accepted = None;
            for _ in 0..=cfg.max_halvings {
                let candidate = match block {
                    0 => {
                        // Ascent along ∂R/∂Re W + j∂R/∂Im W = 2∇_{W*}R.
                        let mut w = state.w.clone();
                        for (x, d) in w.as_mut_slice().iter_mut().zip(g.grad_w.as_slice()) {
                            *x += d * (2.0 * mu);
                        }
                        if w.frobenius_sqr() == 0.0 {
                            None
                        } else {
                            let mut s = state.clone();
                            s.w = normalize_power(&w, sys.p_max)?;
                            Some(s)
                        }
                    }
                    1 => {
                        let n = sys.elements;
                        let bt: Vec<f64> = (0..n).map(|i| state.beta_t[i] + mu * g.grad_beta[i]).collect();
                        let br: Vec<f64> = (0..n).map(|i| state.beta_r[i] + mu * g.grad_beta[n + i]).collect();
                        normalize_amplitudes(&bt, &br).ok().map(|(beta_t, beta_r)| {
                            let mut s = state.clone();
                            s.beta_t = beta_t;
                            s.beta_r = beta_r;
                            s
                        })
                    }
                    _ => {
                        let delta: Vec<f64> = g.grad_theta.iter().map(|d| mu * d).collect();
                        let mut s = state.clone();
                        s.set_theta(&apply_phase_delta(&state.theta(), &delta));
                        Some(s)
                    }
                };
                if let Some(s) = candidate {
                    let r = wsr_of(sys, ch, &s)?;
                    if r >= wsr {
                        accepted = Some((s, r));
                        break;
                    }
                }
                mu *= 0.5;
            }
            if let Some((s, r)) = accepted {
                state = s;
                wsr = r;
                *step = mu;
            }
        }
        gml::record(&mut traces, sys, ch, &state, wsr, wsr, 0.0, false)?;
    }

    gml::finish(sys, ch, PhaseMode::Independent, state, wsr, traces)
}
