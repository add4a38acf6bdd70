//! Leaky integrate-and-fire neurons with hard, soft and adaptive reset.
//!
//! Every step first integrates, `h = k_tau * u_prev + input`, then fires
//! `s = H(h - v_th)` and finally resets:
//!
//! | mode       | reset                                                   |
//! |------------|---------------------------------------------------------|
//! | `Hard`     | `u = h * (1 - s)`                                       |
//! | `Soft`     | `u = h - rho * s`                                       |
//! | `Adaptive` | `u = h - (v_r + v_th[t])` (or `h - (v_th[t] + sigmoid(v_r))`) |
//!
//! In adaptive mode the threshold follows the input,
//! `v_th[t] = v_th_base + beta * tanh(input)`, and the reset voltage comes
//! from an accumulator `r` that decays with an input-dependent factor and
//! then receives `+sigmoid(input)` on a spike, `-sigmoid(input)` otherwise.
//! The adaptive reset is subtracted whether or not the neuron fired.
//!
//! The step functions are written against a [`Tape`] so that the same code
//! path serves simulation and surrogate-gradient training. The plain
//! [`Tensor`] entry points below record onto a throwaway tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, tanh, FusedNeuron, FusedReset, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    Hard,
    Soft,
    Adaptive,
}

/// How the adaptive reset voltage is formed from the accumulator `v_r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveVariant {
    /// `u = h - (v_r + v_th[t])`.
    #[default]
    Raw,
    /// `u = h - (v_th[t] + sigmoid(v_r))`.
    Squashed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronParams {
    /// Membrane decay, `1 - 1/tau`.
    pub k_tau: f64,
    pub v_th_base: f64,
    /// Amount subtracted by a soft reset.
    pub rho: f64,
    /// Initial (or fixed) input gain of the accumulator decay.
    pub alpha: f64,
    /// Initial threshold adaptation strength.
    pub beta: f64,
    /// Width of the rectangular surrogate window.
    pub surrogate_width: f64,
    pub reset_mode: ResetMode,
    pub adaptive_variant: AdaptiveVariant,
    /// Pin alpha to 1 and stop learning it.
    pub alpha_fixed: bool,
    /// Pin the threshold to `v_th_base` and stop learning beta.
    pub threshold_fixed: bool,
    /// Stop gradients flowing from the spike into the reset path.
    pub detach_reset: bool,
}

impl Default for NeuronParams {
    fn default() -> Self {
        Self {
            k_tau: 0.5,
            v_th_base: 1.0,
            rho: 1.0,
            alpha: 0.5,
            beta: 0.0,
            surrogate_width: 1.0,
            reset_mode: ResetMode::Adaptive,
            adaptive_variant: AdaptiveVariant::Raw,
            alpha_fixed: false,
            threshold_fixed: false,
            detach_reset: false,
        }
    }
}

impl NeuronParams {
    pub fn with_mode(mode: ResetMode) -> Self {
        Self {
            reset_mode: mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, name, value, expected| {
            if ok {
                Ok(())
            } else {
                Err(Error::Parameter {
                    name,
                    value,
                    expected,
                })
            }
        };
        check(self.k_tau > 0.0 && self.k_tau < 1.0, "k_tau", self.k_tau, "in (0, 1)")?;
        check(self.v_th_base > 0.0, "v_th_base", self.v_th_base, "> 0")?;
        check(self.rho > 0.0, "rho", self.rho, "> 0")?;
        check((0.0..=1.0).contains(&self.alpha), "alpha", self.alpha, "in [0, 1]")?;
        check((-1.0..=1.0).contains(&self.beta), "beta", self.beta, "in [-1, 1]")?;
        check(self.surrogate_width > 0.0, "surrogate_width", self.surrogate_width, "> 0")
    }

    /// Whether alpha is a trained parameter under this configuration.
    pub fn learns_alpha(&self) -> bool {
        self.reset_mode == ResetMode::Adaptive && !self.alpha_fixed
    }

    /// Whether beta is a trained parameter under this configuration.
    pub fn learns_beta(&self) -> bool {
        self.reset_mode == ResetMode::Adaptive && !self.threshold_fixed
    }

    /// Alpha actually used by the accumulator decay.
    pub fn effective_alpha(&self, learned: f64) -> f64 {
        if self.alpha_fixed {
            1.0
        } else {
            learned
        }
    }
}

/// Carried per-element state: membrane potential and reset accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    pub u: Tensor,
    pub r: Tensor,
}

impl NeuronState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            u: Tensor::zeros(shape),
            r: Tensor::zeros(shape),
        }
    }
}

/// Observables of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub h: Tensor,
    pub s: Tensor,
    pub v_th_t: Tensor,
    /// Post-feedback accumulator; adaptive mode only.
    pub v_r: Option<Tensor>,
}

/// State handles on a tape.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub u: Var,
    pub r: Var,
}

impl StateVars {
    pub fn zeros(tape: &mut Tape, shape: &[usize]) -> Self {
        Self {
            u: tape.constant(Tensor::zeros(shape)),
            r: tape.constant(Tensor::zeros(shape)),
        }
    }

    pub fn from_state(tape: &mut Tape, state: &NeuronState) -> Self {
        Self {
            u: tape.constant(state.u.clone()),
            r: tape.constant(state.r.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TraceVars {
    pub h: Var,
    pub s: Var,
    pub v_th_t: Var,
    pub v_r: Option<Var>,
}

/// Scalar alpha and beta as recorded on the tape (learned or constant).
#[derive(Debug, Clone, Copy)]
pub struct ScalarVars {
    pub alpha: Var,
    pub beta: Var,
}

impl ScalarVars {
    pub fn constants(tape: &mut Tape, params: &NeuronParams) -> Self {
        Self {
            alpha: tape.scalar(params.alpha),
            beta: tape.scalar(params.beta),
        }
    }
}

/// Accumulator decay on the tape:
/// `r_prev >= 0 ? sigmoid(alpha*x) * r_prev : (1 - sigmoid(alpha*x)) * r_prev`.
pub fn r_decay_on(tape: &mut Tape, r_prev: Var, input: Var, alpha: Var) -> Result<Var> {
    let zero = tape.scalar(0.0);
    let keep = tape.compare_ge(r_prev, zero)?;
    let gated = tape.mul(alpha, input)?;
    let sg = tape.sigmoid(gated);
    let neg_sg = tape.scale(sg, -1.0);
    let one_minus = tape.add_scalar(neg_sg, 1.0);
    // keep * sg + (1 - keep) * (1 - sg); keep is a constant 0/1 mask.
    let neg_keep = tape.scale(keep, -1.0);
    let drop = tape.add_scalar(neg_keep, 1.0);
    let a = tape.mul(keep, sg)?;
    let b = tape.mul(drop, one_minus)?;
    let factor = tape.add(a, b)?;
    tape.mul(factor, r_prev)
}

/// `r + (2s - 1) * sigmoid(input)` on the tape.
pub fn spike_feedback_on(tape: &mut Tape, r: Var, s: Var, input: Var) -> Result<Var> {
    let twice = tape.scale(s, 2.0);
    let sign = tape.add_scalar(twice, -1.0);
    let sx = tape.sigmoid(input);
    let fb = tape.mul(sign, sx)?;
    tape.add(r, fb)
}

/// `center + beta * tanh(input)`, or the constant `center` when fixed.
pub fn adaptive_threshold_on(tape: &mut Tape, input: Var, beta: Var, center: f64, fixed: bool) -> Result<Var> {
    if fixed {
        return Ok(tape.scalar(center));
    }
    let t = tape.tanh(input);
    let scaled = tape.mul(beta, t)?;
    Ok(tape.add_scalar(scaled, center))
}

/// One neuron update on the tape, dispatched on `params.reset_mode`.
pub fn step_on(
    tape: &mut Tape,
    params: &NeuronParams,
    scalars: ScalarVars,
    state: StateVars,
    input: Var,
) -> Result<(StateVars, TraceVars)> {
    if tape.shape(input) != tape.shape(state.u) {
        return Err(Error::dim(
            "neuron step",
            format!("input {:?} vs state {:?}", tape.shape(input), tape.shape(state.u)),
        ));
    }
    let leaked = tape.scale(state.u, params.k_tau);
    let h = tape.add(leaked, input)?;

    match params.reset_mode {
        ResetMode::Hard | ResetMode::Soft => {
            let v_th = tape.scalar(params.v_th_base);
            let s = tape.spike(h, v_th, params.surrogate_width)?;
            let s_reset = if params.detach_reset { tape.detach(s) } else { s };
            let u = if params.reset_mode == ResetMode::Hard {
                let neg = tape.scale(s_reset, -1.0);
                let keep = tape.add_scalar(neg, 1.0);
                tape.mul(h, keep)?
            } else {
                let sub = tape.scale(s_reset, params.rho);
                tape.sub(h, sub)?
            };
            Ok((
                StateVars { u, r: state.r },
                TraceVars {
                    h,
                    s,
                    v_th_t: v_th,
                    v_r: None,
                },
            ))
        }
        ResetMode::Adaptive => {
            let v_th = adaptive_threshold_on(tape, input, scalars.beta, params.v_th_base, params.threshold_fixed)?;
            let s = tape.spike(h, v_th, params.surrogate_width)?;
            let s_reset = if params.detach_reset { tape.detach(s) } else { s };
            let alpha = if params.alpha_fixed { tape.scalar(1.0) } else { scalars.alpha };
            let r_dec = r_decay_on(tape, state.r, input, alpha)?;
            let v_r = spike_feedback_on(tape, r_dec, s_reset, input)?;
            let reset = match params.adaptive_variant {
                AdaptiveVariant::Raw => tape.add(v_r, v_th)?,
                AdaptiveVariant::Squashed => {
                    let sq = tape.sigmoid(v_r);
                    tape.add(v_th, sq)?
                }
            };
            let u = tape.sub(h, reset)?;
            Ok((
                StateVars { u, r: v_r },
                TraceVars {
                    h,
                    s,
                    v_th_t: v_th,
                    v_r: Some(v_r),
                },
            ))
        }
    }
}

impl NeuronParams {
    /// Settings for the single-node update [`sequence_on`].
    pub fn fused(&self) -> FusedNeuron {
        FusedNeuron {
            k_tau: self.k_tau,
            v_th_base: self.v_th_base,
            width: self.surrogate_width,
            reset: match self.reset_mode {
                ResetMode::Hard => FusedReset::Hard,
                ResetMode::Soft => FusedReset::Soft { rho: self.rho },
                ResetMode::Adaptive => FusedReset::Adaptive {
                    squashed: self.adaptive_variant == AdaptiveVariant::Squashed,
                },
            },
            alpha_fixed: self.alpha_fixed,
            threshold_fixed: self.threshold_fixed,
            detach_reset: self.detach_reset,
        }
    }
}

/// Spikes of `steps` updates from a zero state recorded as one tape node,
/// `[steps * B, ...]` step-major. `input` is either one step `[B, ...]`
/// reused at every step (`shared`) or all steps stacked. Values are bitwise
/// identical to chaining [`step_on`].
pub fn sequence_on(
    tape: &mut Tape,
    params: &NeuronParams,
    scalars: ScalarVars,
    input: Var,
    steps: usize,
    shared: bool,
) -> Result<Var> {
    tape.neuron_sequence(params.fused(), input, steps, shared, scalars.alpha, scalars.beta)
}

fn broadcast_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.is_scalar() && t.shape() != shape {
        Tensor::full(shape, t.data()[0])
    } else {
        t.clone()
    }
}

fn step_values(state: &NeuronState, input: &Tensor, params: &NeuronParams) -> Result<(NeuronState, StepTrace)> {
    if state.u.shape() != state.r.shape() {
        return Err(Error::dim(
            "neuron state",
            format!("u {:?} vs r {:?}", state.u.shape(), state.r.shape()),
        ));
    }
    let mut tape = Tape::new();
    let vars = StateVars::from_state(&mut tape, state);
    let x = tape.constant(input.clone());
    let scalars = ScalarVars::constants(&mut tape, params);
    let (next, trace) = step_on(&mut tape, params, scalars, vars, x)?;
    let shape = state.u.shape();
    Ok((
        NeuronState {
            u: tape.value(next.u).clone(),
            r: tape.value(next.r).clone(),
        },
        StepTrace {
            h: tape.value(trace.h).clone(),
            s: tape.value(trace.s).clone(),
            v_th_t: broadcast_to(tape.value(trace.v_th_t), shape),
            v_r: trace.v_r.map(|v| tape.value(v).clone()),
        },
    ))
}

/// Hard-reset LIF step (`params.reset_mode` is ignored).
pub fn lif_step_hard(state: &NeuronState, input: &Tensor, params: &NeuronParams) -> Result<(NeuronState, StepTrace)> {
    step_values(
        state,
        input,
        &NeuronParams {
            reset_mode: ResetMode::Hard,
            ..*params
        },
    )
}

/// Soft-reset LIF step (`params.reset_mode` is ignored).
pub fn lif_step_soft(state: &NeuronState, input: &Tensor, params: &NeuronParams) -> Result<(NeuronState, StepTrace)> {
    step_values(
        state,
        input,
        &NeuronParams {
            reset_mode: ResetMode::Soft,
            ..*params
        },
    )
}

/// Adaptive-reset step (`params.reset_mode` is ignored).
pub fn arlif_step(state: &NeuronState, input: &Tensor, params: &NeuronParams) -> Result<(NeuronState, StepTrace)> {
    step_values(
        state,
        input,
        &NeuronParams {
            reset_mode: ResetMode::Adaptive,
            ..*params
        },
    )
}

/// Step in whatever mode `params` selects.
pub fn step(state: &NeuronState, input: &Tensor, params: &NeuronParams) -> Result<(NeuronState, StepTrace)> {
    step_values(state, input, params)
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn r_decay(r_prev: &Tensor, input: &Tensor, alpha: f64) -> Result<Tensor> {
    check_same("r_decay", r_prev, input)?;
    let mut tape = Tape::new();
    let r = tape.constant(r_prev.clone());
    let x = tape.constant(input.clone());
    let a = tape.scalar(alpha);
    let out = r_decay_on(&mut tape, r, x, a)?;
    Ok(tape.value(out).clone())
}

pub fn spike_feedback(r: &Tensor, s: &Tensor, input: &Tensor) -> Result<Tensor> {
    check_same("spike_feedback", r, s)?;
    check_same("spike_feedback", r, input)?;
    if !s.is_binary() {
        return Err(Error::Contract("spike tensor must contain only 0 and 1".into()));
    }
    let mut tape = Tape::new();
    let rv = tape.constant(r.clone());
    let sv = tape.constant(s.clone());
    let x = tape.constant(input.clone());
    let out = spike_feedback_on(&mut tape, rv, sv, x)?;
    Ok(tape.value(out).clone())
}

/// `1 + beta * tanh(input)`, or all ones when `threshold_fixed`.
pub fn adaptive_threshold(input: &Tensor, beta: f64, threshold_fixed: bool) -> Tensor {
    if threshold_fixed {
        Tensor::full(input.shape(), 1.0)
    } else {
        input.map(|x| beta * tanh(x) + 1.0)
    }
}

/// Runs the configured step over `inputs` [T, ...] from a zero state.
/// Returns spikes [T, ...] and one trace per step.
pub fn unroll(inputs: &Tensor, params: &NeuronParams) -> Result<(Tensor, Vec<StepTrace>)> {
    let steps = inputs.shape().first().copied().unwrap_or(0);
    if steps == 0 {
        return Err(Error::Contract("unroll needs at least one timestep".into()));
    }
    let mut state = NeuronState::zeros(&inputs.shape()[1..]);
    let mut traces = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = inputs.index_axis0(t)?;
        let (next, trace) = step(&state, &x, params)?;
        state = next;
        traces.push(trace);
    }
    let spikes = Tensor::stack(&traces.iter().map(|tr| tr.s.clone()).collect::<Vec<_>>())?;
    Ok((spikes, traces))
}

/// Soft-reset spikes computed without the membrane potential:
///
/// `s[t] = H( sum_{j=0..t} k^j x[t-j] - v_th * (1 + sum_{j=1..t} k^j s[t-j]) )`
///
/// With `rho == v_th` this reproduces the soft-reset simulation.
pub fn soft_reset_closed_form(inputs: &[f64], v_th: f64, k_tau: f64) -> Vec<f64> {
    let mut spikes: Vec<f64> = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let drive: f64 = (0..=t).map(|j| k_tau.powi(j as i32) * inputs[t - j]).sum();
        let fired: f64 = (1..=t).map(|j| k_tau.powi(j as i32) * spikes[t - j]).sum();
        let margin = drive - v_th * (1.0 + fired);
        spikes.push(if margin > 0.0 { 1.0 } else { 0.0 });
    }
    spikes
}

/// Scalar reference for one adaptive step, used by tests and the CLI's
/// self-checks: returns `(h, s, v_th_t, v_r, u_next)`.
pub fn adaptive_step_scalar(u_prev: f64, r_prev: f64, x: f64, params: &NeuronParams) -> (f64, f64, f64, f64, f64) {
    let h = params.k_tau * u_prev + x;
    let v_th = if params.threshold_fixed {
        params.v_th_base
    } else {
        params.beta * tanh(x) + params.v_th_base
    };
    let s = if h - v_th > 0.0 { 1.0 } else { 0.0 };
    let g = sigmoid(params.effective_alpha(params.alpha) * x);
    let r_dec = if r_prev >= 0.0 { g * r_prev } else { (1.0 - g) * r_prev };
    let v_r = if s == 1.0 { r_dec + sigmoid(x) } else { r_dec - sigmoid(x) };
    let u = match params.adaptive_variant {
        AdaptiveVariant::Raw => h - (v_r + v_th),
        AdaptiveVariant::Squashed => h - (v_th + sigmoid(v_r)),
    };
    (h, s, v_th, v_r, u)
}
