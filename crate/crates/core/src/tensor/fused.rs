//! LIF dynamics over all timesteps as one tape node.
//!
//! Elements are simulated in blocks from a zero state through `T` steps with
//! the membrane and reset state held in small local buffers; only spikes are
//! stored. The backward pass re-simulates each block and runs
//! backpropagation through time for it. Forward values match the elementwise
//! op chain built by `neurons::step_on` bit for bit (same float operations in
//! the same order).

use super::{sigmoid, sigmoid_slice, tanh_slice};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FusedReset {
    /// `u = h * (1 - s)`.
    Hard,
    /// `u = h - rho * s`.
    Soft { rho: f64 },
    /// `u = h - (v_r + v_th)`, or `u = h - (v_th + sigmoid(v_r))` when squashed.
    Adaptive { squashed: bool },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedNeuron {
    pub k_tau: f64,
    pub v_th_base: f64,
    pub width: f64,
    pub reset: FusedReset,
    pub alpha_fixed: bool,
    pub threshold_fixed: bool,
    pub detach_reset: bool,
}

pub(crate) struct SequenceGrads {
    pub x: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

const BLOCK: usize = 64;

/// Feature planes restricted to one block: `(tanh x, sigmoid x, sigmoid(alpha x))`.
#[derive(Clone, Copy)]
struct Planes<'a> {
    t: &'a [f64],
    sx: &'a [f64],
    sg: &'a [f64],
}

impl<'a> Planes<'a> {
    fn of(feats: &'a [f64], len: usize, start: usize, m: usize) -> Self {
        if feats.is_empty() {
            return Planes { t: &[], sx: &[], sg: &[] };
        }
        Planes {
            t: &feats[start..start + m],
            sx: &feats[len + start..len + start + m],
            sg: &feats[2 * len + start..2 * len + start + m],
        }
    }
}

/// Per-block trajectory: the state entering each step and what it produced,
/// `steps` rows of `BLOCK`.
struct Trajectory {
    u: Vec<f64>,
    r: Vec<f64>,
    s: Vec<f64>,
    r_next: Vec<f64>,
}

impl FusedNeuron {
    pub fn is_adaptive(&self) -> bool {
        matches!(self.reset, FusedReset::Adaptive { .. })
    }

    fn alpha(&self, alpha: f64) -> f64 {
        if self.alpha_fixed {
            1.0
        } else {
            alpha
        }
    }

    /// Slope of the threshold in `tanh x`; zero when the threshold is fixed.
    fn beta(&self, beta: f64) -> f64 {
        if self.threshold_fixed {
            0.0
        } else {
            beta
        }
    }

    /// `[tanh x; sigmoid x; sigmoid(alpha x)]` as three planes over `x`;
    /// empty for hard and soft resets.
    fn feature_planes(&self, x: &[f64], alpha: f64) -> Vec<f64> {
        if !self.is_adaptive() {
            return Vec::new();
        }
        let len = x.len();
        let mut out = vec![0.0; 3 * len];
        let (t, rest) = out.split_at_mut(len);
        let (sx, sg) = rest.split_at_mut(len);
        if !self.threshold_fixed {
            tanh_slice(x, t);
        }
        sigmoid_slice(x, 1.0, sx);
        if self.alpha_fixed {
            sg.copy_from_slice(sx);
        } else {
            sigmoid_slice(x, alpha, sg);
        }
        out
    }

    /// One step for a block: reads and updates `u`, `r`, writes spikes.
    fn advance(&self, x: &[f64], f: Planes<'_>, beta: f64, u: &mut [f64], r: &mut [f64], s_out: &mut [f64]) {
        let m = x.len();
        let (u, r, s_out) = (&mut u[..m], &mut r[..m], &mut s_out[..m]);
        let (k, vb) = (self.k_tau, self.v_th_base);
        match self.reset {
            FusedReset::Hard => {
                for j in 0..m {
                    let h = u[j] * k + x[j];
                    let s = if h - vb > 0.0 { 1.0 } else { 0.0 };
                    s_out[j] = s;
                    u[j] = h * (-s + 1.0);
                }
            }
            FusedReset::Soft { rho } => {
                for j in 0..m {
                    let h = u[j] * k + x[j];
                    let s = if h - vb > 0.0 { 1.0 } else { 0.0 };
                    s_out[j] = s;
                    u[j] = h - s * rho;
                }
            }
            FusedReset::Adaptive { squashed: true } => self.advance_adaptive::<true>(x, f, beta, u, r, s_out),
            FusedReset::Adaptive { squashed: false } => self.advance_adaptive::<false>(x, f, beta, u, r, s_out),
        }
    }

    fn advance_adaptive<const SQUASHED: bool>(
        &self,
        x: &[f64],
        f: Planes<'_>,
        beta: f64,
        u: &mut [f64],
        r: &mut [f64],
        s_out: &mut [f64],
    ) {
        let m = x.len();
        let (u, r, s_out) = (&mut u[..m], &mut r[..m], &mut s_out[..m]);
        let (ft, sx, sg) = (&f.t[..m], &f.sx[..m], &f.sg[..m]);
        let (k, vb) = (self.k_tau, self.v_th_base);
        let fixed = self.threshold_fixed;
        for j in 0..m {
            let h = u[j] * k + x[j];
            let v_th = if fixed { vb } else { beta * ft[j] + vb };
            let s = if h - v_th > 0.0 { 1.0 } else { 0.0 };
            let factor = if r[j] >= 0.0 { sg[j] } else { -sg[j] + 1.0 };
            let v_r = factor * r[j] + (s * 2.0 + -1.0) * sx[j];
            let reset = if SQUASHED { v_th + sigmoid(v_r) } else { v_r + v_th };
            s_out[j] = s;
            u[j] = h - reset;
            r[j] = v_r;
        }
    }

    /// Spikes of `steps` steps from a zero state, laid out `[t][element]`,
    /// plus the feature planes [`FusedNeuron::run_backward`] needs. With
    /// `shared` the same `x` (one step's worth) drives every step, otherwise
    /// `x` holds `steps` consecutive blocks.
    pub(crate) fn run(&self, x: &[f64], steps: usize, shared: bool, alpha: f64, beta: f64) -> (Vec<f64>, Vec<f64>) {
        let feats = self.feature_planes(x, self.alpha(alpha));
        let len = x.len();
        let n = if shared { len } else { len / steps };
        let mut spikes = vec![0.0; steps * n];
        let (mut u, mut r) = ([0.0; BLOCK], [0.0; BLOCK]);
        for j0 in (0..n).step_by(BLOCK) {
            let m = BLOCK.min(n - j0);
            u.fill(0.0);
            r.fill(0.0);
            for t in 0..steps {
                let base = if shared { j0 } else { t * n + j0 };
                let out = &mut spikes[t * n + j0..t * n + j0 + m];
                self.advance(&x[base..base + m], Planes::of(&feats, len, base, m), beta, &mut u, &mut r, out);
            }
        }
        (spikes, feats)
    }

    /// Gradients of [`FusedNeuron::run`] given the spike gradient `g` and
    /// the feature planes it returned.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn run_backward(
        &self,
        x: &[f64],
        feats: &[f64],
        steps: usize,
        shared: bool,
        alpha: f64,
        beta: f64,
        g: &[f64],
    ) -> SequenceGrads {
        let alpha = self.alpha(alpha);
        let len = x.len();
        let n = if shared { len } else { len / steps };
        let mut dx = vec![0.0; len];
        let mut traj = Trajectory {
            u: vec![0.0; steps * BLOCK],
            r: vec![0.0; steps * BLOCK],
            s: vec![0.0; steps * BLOCK],
            r_next: vec![0.0; steps * BLOCK],
        };
        let mut acc = Accumulators::default();
        for j0 in (0..n).step_by(BLOCK) {
            let m = BLOCK.min(n - j0);
            let (mut u, mut r) = ([0.0; BLOCK], [0.0; BLOCK]);
            for t in 0..steps {
                let base = if shared { j0 } else { t * n + j0 };
                let row = t * BLOCK..t * BLOCK + m;
                traj.u[row.clone()].copy_from_slice(&u[..m]);
                traj.r[row.clone()].copy_from_slice(&r[..m]);
                let planes = Planes::of(feats, len, base, m);
                self.advance(&x[base..base + m], planes, beta, &mut u, &mut r, &mut traj.s[row.clone()]);
                traj.r_next[row].copy_from_slice(&r[..m]);
            }
            acc.start_block();
            for t in (0..steps).rev() {
                let base = if shared { j0 } else { t * n + j0 };
                let planes = Planes::of(feats, len, base, m);
                let row = t * BLOCK..t * BLOCK + m;
                let step = StepView {
                    x: &x[base..base + m],
                    u: &traj.u[row.clone()],
                    r: &traj.r[row.clone()],
                    s: &traj.s[row.clone()],
                    r_next: &traj.r_next[row],
                    g: &g[t * n + j0..t * n + j0 + m],
                };
                self.retreat(step, planes, beta, &mut acc);
                if !shared || t == 0 {
                    self.finish_input(&x[base..base + m], planes, alpha, &mut acc, &mut dx[base..base + m]);
                }
            }
        }
        let adaptive = self.is_adaptive();
        SequenceGrads {
            x: dx,
            alpha: if adaptive { acc.alpha.iter().sum() } else { 0.0 },
            beta: if adaptive { acc.beta.iter().sum() } else { 0.0 },
        }
    }

    /// Backward of one step for a block: consumes the gradients flowing into
    /// the next state from `acc` and leaves those of this step's state there,
    /// adding the input-side gradients to the pending sums.
    fn retreat(&self, st: StepView<'_>, f: Planes<'_>, beta: f64, acc: &mut Accumulators) {
        let m = st.x.len();
        let (x, u, s, g) = (st.x, &st.u[..m], &st.s[..m], &st.g[..m]);
        let (gu, dh_sum) = (&mut acc.gu[..m], &mut acc.dh[..m]);
        let (k, vb) = (self.k_tau, self.v_th_base);
        let (half, inv) = (self.width / 2.0, 1.0 / self.width);
        let flows = if self.detach_reset { 0.0 } else { 1.0 };
        match self.reset {
            FusedReset::Hard | FusedReset::Soft { .. } => {
                let rho = match self.reset {
                    FusedReset::Soft { rho } => Some(rho),
                    _ => None,
                };
                for j in 0..m {
                    let h = u[j] * k + x[j];
                    let sur = if (h - vb).abs() < half { inv } else { 0.0 };
                    let (dh_direct, ds_reset) = match rho {
                        Some(rho) => (gu[j], -gu[j] * rho),
                        None => (gu[j] * (1.0 - s[j]), -gu[j] * h),
                    };
                    let dh = dh_direct + sur * (g[j] + flows * ds_reset);
                    gu[j] = dh * k;
                    dh_sum[j] += dh;
                }
            }
            FusedReset::Adaptive { squashed: true } => self.retreat_adaptive::<true>(st, f, beta, acc),
            FusedReset::Adaptive { squashed: false } => self.retreat_adaptive::<false>(st, f, beta, acc),
        }
    }

    fn retreat_adaptive<const SQUASHED: bool>(&self, st: StepView<'_>, f: Planes<'_>, beta: f64, acc: &mut Accumulators) {
        let m = st.x.len();
        let (x, u, r, s, r_next, g) = (st.x, &st.u[..m], &st.r[..m], &st.s[..m], &st.r_next[..m], &st.g[..m]);
        let (gu, gr, dh_sum) = (&mut acc.gu[..m], &mut acc.gr[..m], &mut acc.dh[..m]);
        let (ft, sx, sg) = (&f.t[..m], &f.sx[..m], &f.sg[..m]);
        let (dt_sum, dsx_sum, dsg_sum) = (&mut acc.dt[..m], &mut acc.dsx[..m], &mut acc.dsg[..m]);
        let dbeta = &mut acc.beta[..m];
        let (k, vb) = (self.k_tau, self.v_th_base);
        let (half, inv) = (self.width / 2.0, 1.0 / self.width);
        let flows = if self.detach_reset { 0.0 } else { 1.0 };
        let b = self.beta(beta);
        for j in 0..m {
            let h = u[j] * k + x[j];
            let v_th = b * ft[j] + vb;
            let sur = if (h - v_th).abs() < half { inv } else { 0.0 };
            let du_dvr = if SQUASHED {
                let q = sigmoid(r_next[j]);
                -(q * (1.0 - q))
            } else {
                -1.0
            };
            let dvr = gr[j] + gu[j] * du_dvr;
            let ds = g[j] + flows * dvr * 2.0 * sx[j];
            let dh = gu[j] + sur * ds;
            let dvth = -gu[j] - sur * ds;
            let keep = r[j] >= 0.0;
            let factor = if keep { sg[j] } else { 1.0 - sg[j] };
            dsg_sum[j] += if keep { dvr * r[j] } else { -(dvr * r[j]) };
            dt_sum[j] += dvth * b;
            dbeta[j] += dvth * ft[j];
            dsx_sum[j] += dvr * (2.0 * s[j] - 1.0);
            dh_sum[j] += dh;
            gu[j] = dh * k;
            gr[j] = dvr * factor;
        }
    }

    /// Turns the pending input-side sums into `d x` and `d alpha`, then clears them.
    fn finish_input(&self, x: &[f64], f: Planes<'_>, alpha: f64, acc: &mut Accumulators, dx: &mut [f64]) {
        let m = x.len();
        let dx = &mut dx[..m];
        let dh = &mut acc.dh[..m];
        if !self.is_adaptive() {
            dx.copy_from_slice(dh);
            dh.fill(0.0);
            return;
        }
        let (ft, sx, sg) = (&f.t[..m], &f.sx[..m], &f.sg[..m]);
        let (dt, dsx, dsg) = (&mut acc.dt[..m], &mut acc.dsx[..m], &mut acc.dsg[..m]);
        let dalpha = &mut acc.alpha[..m];
        for j in 0..m {
            let d_ax = dsg[j] * sg[j] * (1.0 - sg[j]);
            dx[j] = dh[j] + dt[j] * (1.0 - ft[j] * ft[j]) + dsx[j] * sx[j] * (1.0 - sx[j]) + d_ax * alpha;
            dalpha[j] += d_ax * x[j];
            dh[j] = 0.0;
            dt[j] = 0.0;
            dsx[j] = 0.0;
            dsg[j] = 0.0;
        }
    }
}

/// One step of a block's recorded trajectory.
#[derive(Clone, Copy)]
struct StepView<'a> {
    x: &'a [f64],
    u: &'a [f64],
    r: &'a [f64],
    s: &'a [f64],
    r_next: &'a [f64],
    g: &'a [f64],
}

/// Per-lane running gradients of a block.
struct Accumulators {
    /// Into the state entering the step being processed.
    gu: [f64; BLOCK],
    gr: [f64; BLOCK],
    /// Pending input-side sums: through `h` and through each feature.
    dh: [f64; BLOCK],
    dt: [f64; BLOCK],
    dsx: [f64; BLOCK],
    dsg: [f64; BLOCK],
    /// Scalar-parameter partial sums per lane.
    alpha: [f64; BLOCK],
    beta: [f64; BLOCK],
}

impl Default for Accumulators {
    fn default() -> Self {
        Self {
            gu: [0.0; BLOCK],
            gr: [0.0; BLOCK],
            dh: [0.0; BLOCK],
            dt: [0.0; BLOCK],
            dsx: [0.0; BLOCK],
            dsg: [0.0; BLOCK],
            alpha: [0.0; BLOCK],
            beta: [0.0; BLOCK],
        }
    }
}

impl Accumulators {
    fn start_block(&mut self) {
        self.gu.fill(0.0);
        self.gr.fill(0.0);
    }
}
