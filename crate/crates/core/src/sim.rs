//! Closed-loop Galerkin dynamics `ẏ_i = -τ_i y_i + Σ_{j<N} G_ij u_j`.
//!
//! Under `u = -γ P_N y` the system is block lower triangular: the fed-back
//! block obeys `Ẋ = -(D_N + γ J_N) X` on its own and drives the tail through
//! `G_tail`. The default integrator diagonalizes `S = D_N + γ J_N` once and
//! propagates the tail with exact exponential integrals, so a linear step has
//! no discretization error at all regardless of how stiff γ makes it. The
//! truncated law freezes its scalar cutoff gain over each step and controls the
//! resulting error by step doubling.

use std::io::{self, Write};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::feedback::{norm, FeedbackParams};
use crate::fit::fit_loglinear;
use crate::spectral::{GramMatrix, ModeBasis};

/// Largest system the dense matrix-exponential oracle accepts.
pub const ORACLE_MAX_MODES: usize = 256;

/// Slow modes must beat `γ·N·ε` by this factor to be resolved in f64.
const RESOLVABILITY_MARGIN: f64 = 1e3;

/// Coefficients `(y_1, …, y_M)` of `y(t) = Σ y_i e_i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GalerkinState {
    pub coeffs: Vec<f64>,
    pub time: f64,
}

impl GalerkinState {
    pub fn new(coeffs: Vec<f64>, time: f64) -> Self {
        Self { coeffs, time }
    }

    /// L²(Ω) norm, by Parseval.
    pub fn norm(&self) -> f64 {
        norm(&self.coeffs)
    }
}

/// One row of a trajectory record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sample {
    pub t: f64,
    pub norm_y: f64,
    pub norm_low: f64,
    pub norm_tail: f64,
    pub norm_u: f64,
    #[serde(rename = "V")]
    pub v: f64,
    #[serde(rename = "V1")]
    pub v1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    /// Full states at the ends of every integrated interval.
    pub checkpoints: Vec<GalerkinState>,
}

pub const CSV_HEADER: &str = "t,norm_y,norm_low,norm_tail,norm_u,V,V1";

impl Trajectory {
    pub fn final_state(&self) -> Option<&GalerkinState> {
        self.checkpoints.last()
    }

    /// Appends a later run. A shared boundary sample is replaced by the later
    /// run's first sample, so the control recorded at a switching time is the
    /// one that acts from that time on.
    pub fn append(&mut self, mut other: Trajectory) {
        if let (Some(last), Some(first)) = (self.samples.last(), other.samples.first()) {
            if last.t == first.t {
                self.samples.pop();
            }
        }
        self.samples.append(&mut other.samples);
        if let (Some(last), Some(first)) = (self.checkpoints.last(), other.checkpoints.first()) {
            if last.time == first.time {
                other.checkpoints.remove(0);
            }
        }
        self.checkpoints.append(&mut other.checkpoints);
    }

    pub fn sup_control(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_u).fold(0.0, f64::max)
    }

    pub fn sup_state(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_y).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for s in &self.samples {
            let row = [s.t, s.norm_y, s.norm_low, s.norm_tail, s.norm_u, s.v, s.v1].map(csv_field);
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Shortest round-trip form, switching to exponent notation outside `[1e-4, 1e15)`.
fn csv_field(x: f64) -> String {
    if x == 0.0 || (1e-4..1e15).contains(&x.abs()) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorMethod {
    ExponentialEuler,
    DenseExponentialOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegratorConfig {
    pub method: IntegratorMethod,
    /// Local error tolerance of the truncated branch, relative to the state norm.
    pub tolerance: f64,
    pub samples_per_interval: usize,
    /// Steps below this size are refused.
    pub min_step: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: IntegratorMethod::ExponentialEuler,
            tolerance: 1e-9,
            samples_per_interval: 64,
            min_step: 1e-14,
        }
    }
}

/// Eigenvalues and observation data of one Galerkin truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct System {
    pub taus: Vec<f64>,
    pub gram: GramMatrix,
}

impl System {
    pub fn new(basis: &ModeBasis, gram: GramMatrix) -> Result<Self> {
        if gram.rows() != basis.len() {
            return Err(Error::InvalidInput(format!(
                "Gram matrix has {} rows for {} modes",
                gram.rows(),
                basis.len()
            )));
        }
        Ok(Self {
            taus: basis.eigenvalues(),
            gram,
        })
    }

    pub fn modes(&self) -> usize {
        self.taus.len()
    }

    /// Dense generator `diag(-τ) - γ G[:, :n]` (columns beyond `n` carry no control).
    pub fn generator(&self, gamma: f64, n: usize) -> DMatrix<f64> {
        let m = self.modes();
        DMatrix::from_fn(m, m, |i, j| {
            let diag = if i == j { -self.taus[i] } else { 0.0 };
            if j < n {
                diag - gamma * self.gram.entries[(i, j)]
            } else {
                diag
            }
        })
    }
}

/// Uncontrolled flow `y_i ↦ e^{-τ_i h} y_i`.
pub fn heat_flow(taus: &[f64], y: &[f64], h: f64) -> Vec<f64> {
    y.iter().zip(taus).map(|(v, t)| (-t * h).exp() * v).collect()
}

/// `∫_0^h e^{-a(h-σ)} e^{-bσ} dσ`, evaluated without cancellation.
fn exp_integral(a: f64, b: f64, h: f64) -> f64 {
    let d = (a - b).abs();
    let lo = a.min(b);
    if d * h < 1e-300 {
        return h * (-lo * h).exp();
    }
    (-lo * h).exp() * (-(-d * h).exp_m1()) / d
}

/// Exact propagator of `ẏ = -D y - γ G P_n y` for fixed γ and n.
#[derive(Debug, Clone)]
pub struct LinearPropagator {
    n: usize,
    gamma: f64,
    taus: Vec<f64>,
    vecs: DMatrix<f64>,
    rates: DVector<f64>,
    /// `G_tail · V`
    coupling: DMatrix<f64>,
}

impl LinearPropagator {
    pub fn new(system: &System, gamma: f64, n: usize) -> Result<Self> {
        if n > system.gram.cols() {
            return Err(Error::InvalidInput(format!(
                "feedback uses {n} modes but the Gram matrix has {} columns",
                system.gram.cols()
            )));
        }
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "gain γ = {gamma} must be finite and nonnegative"
            )));
        }
        let m = system.modes();
        let jn = system.gram.entries.view((0, 0), (n, n)).into_owned();
        let tail = system.gram.entries.view((n, 0), (m - n, n)).into_owned();
        Self::from_blocks(&system.taus, &jn, &tail, gamma)
    }

    fn from_blocks(taus: &[f64], jn: &DMatrix<f64>, tail: &DMatrix<f64>, gamma: f64) -> Result<Self> {
        let n = jn.nrows();
        let s_matrix = DMatrix::from_fn(n, n, |i, j| {
            let diag = if i == j { taus[i] } else { 0.0 };
            diag + gamma * jn[(i, j)]
        });
        let eig = SymmetricEigen::new(s_matrix);
        let s_min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let floor = RESOLVABILITY_MARGIN * gamma * n as f64 * f64::EPSILON;
        if n > 0 && !(s_min > floor) {
            return Err(Error::Numerical(format!(
                "slowest closed-loop rate {s_min:e} is below the f64 resolution floor {floor:e} \
                 (γ = {gamma:e}, N = {n})"
            )));
        }
        let coupling = tail * &eig.eigenvectors;
        Ok(Self {
            n,
            gamma,
            taus: taus.to_vec(),
            vecs: eig.eigenvectors,
            rates: eig.eigenvalues,
            coupling,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Slowest decay rate of the fed-back block.
    pub fn slowest_rate(&self) -> f64 {
        self.rates.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn advance(&self, y: &[f64], h: f64) -> Vec<f64> {
        let n = self.n;
        if n == 0 {
            return heat_flow(&self.taus, y, h);
        }
        let c = self.vecs.tr_mul(&DVector::from_column_slice(&y[..n]));
        let decayed = DVector::from_fn(n, |k, _| (-self.rates[k] * h).exp() * c[k]);
        let low = &self.vecs * decayed;
        let mut out = Vec::with_capacity(y.len());
        out.extend(low.iter());
        for (row, i) in (n..y.len()).enumerate() {
            let tau = self.taus[i];
            let forced: f64 = (0..n)
                .map(|k| self.coupling[(row, k)] * c[k] * exp_integral(tau, self.rates[k], h))
                .sum();
            out.push((-tau * h).exp() * y[i] - self.gamma * forced);
        }
        out
    }
}

/// Which form of the feedback is active on an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// No control.
    Off,
    /// `F_λ`.
    Linear,
    /// `K_{r_λ} ∘ F_λ`.
    Truncated,
}

/// A feedback law bound to a system, ready to integrate.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    branch: Branch,
    params: Option<FeedbackParams>,
    taus: Vec<f64>,
    jn: DMatrix<f64>,
    tail: DMatrix<f64>,
    full: Option<LinearPropagator>,
    generator: OnceLock<DMatrix<f64>>,
}

impl ClosedLoop {
    pub fn new(system: &System, branch: Branch, params: Option<FeedbackParams>) -> Result<Self> {
        let params = match branch {
            Branch::Off => None,
            _ => Some(params.ok_or_else(|| Error::InvalidInput("a feedback branch needs parameters".into()))?),
        };
        let n = params.as_ref().map_or(0, |p| p.n);
        let full = match &params {
            Some(p) => Some(LinearPropagator::new(system, p.gamma, n)?),
            None => None,
        };
        let m = system.modes();
        Ok(Self {
            branch,
            taus: system.taus.clone(),
            jn: system.gram.entries.view((0, 0), (n, n)).into_owned(),
            tail: system.gram.entries.view((n, 0), (m - n, n)).into_owned(),
            full,
            generator: OnceLock::new(),
            params,
        })
    }

    pub fn stationary(system: &System, params: FeedbackParams) -> Result<Self> {
        Self::new(system, Branch::Linear, Some(params))
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn params(&self) -> Option<&FeedbackParams> {
        self.params.as_ref()
    }

    fn n(&self) -> usize {
        self.params.as_ref().map_or(0, |p| p.n)
    }

    /// Scalar factor multiplying `F_λ y` under this branch.
    pub fn gain(&self, y: &[f64]) -> f64 {
        match (self.branch, &self.params) {
            (Branch::Linear, _) => 1.0,
            (Branch::Truncated, Some(p)) => crate::feedback::truncation_gain(p, y),
            _ => 0.0,
        }
    }

    /// Control coefficients `u_j`, `j < N`.
    pub fn control(&self, y: &[f64]) -> Vec<f64> {
        match &self.params {
            None => Vec::new(),
            Some(p) => {
                let g = self.gain(y) * p.gamma;
                y[..p.n].iter().map(|v| -g * v).collect()
            }
        }
    }

    pub fn sample(&self, t: f64, y: &[f64]) -> Sample {
        let n = self.n();
        let low_sq: f64 = y[..n].iter().map(|v| v * v).sum();
        let tail_sq: f64 = y[n..].iter().map(|v| v * v).sum();
        let tail_h1: f64 = y[n..].iter().zip(&self.taus[n..]).map(|(v, t)| t * v * v).sum();
        let (v_low, v1_low, gamma) = match &self.params {
            Some(p) => (p.mu_times(low_sq), p.mu_tilde_times(low_sq), p.gamma),
            None => (low_sq, 0.0, 0.0),
        };
        Sample {
            t,
            norm_y: (low_sq + tail_sq).sqrt(),
            norm_low: low_sq.sqrt(),
            norm_tail: tail_sq.sqrt(),
            norm_u: self.gain(y) * gamma * low_sq.sqrt(),
            v: v_low + tail_sq,
            v1: v1_low + tail_h1,
        }
    }

    fn propagator_for(&self, gain: f64) -> Result<LinearPropagator> {
        let p = self.params.as_ref().expect("feedback branch");
        LinearPropagator::from_blocks(&self.taus, &self.jn, &self.tail, p.gamma * gain)
    }

    fn step_with_gain(&self, y: &[f64], g: f64, h: f64) -> Result<Vec<f64>> {
        if g == 0.0 {
            Ok(heat_flow(&self.taus, y, h))
        } else if g == 1.0 {
            Ok(self.full.as_ref().expect("feedback branch").advance(y, h))
        } else {
            Ok(self.propagator_for(g)?.advance(y, h))
        }
    }

    /// Exponential midpoint step: the cutoff gain is frozen at its value on a
    /// predicted half-step state, which makes the step second order.
    fn frozen_step(&self, y: &[f64], h: f64) -> Result<Vec<f64>> {
        let g0 = self.gain(y);
        let half = self.step_with_gain(y, g0, 0.5 * h)?;
        self.step_with_gain(y, self.gain(&half), h)
    }

    /// Advances `y` from `t0` to `t1`. `step` carries the adaptive step size
    /// between calls on the truncated branch.
    pub fn advance(&self, y: &[f64], t0: f64, t1: f64, cfg: &IntegratorConfig, step: &mut f64) -> Result<Vec<f64>> {
        let h = t1 - t0;
        if h == 0.0 {
            return Ok(y.to_vec());
        }
        match (self.branch, cfg.method) {
            (Branch::Off, _) => Ok(heat_flow(&self.taus, y, h)),
            (Branch::Linear, IntegratorMethod::ExponentialEuler) => {
                Ok(self.full.as_ref().expect("feedback branch").advance(y, h))
            }
            (Branch::Linear, IntegratorMethod::DenseExponentialOracle) => {
                let b = self.generator.get().expect("oracle generator");
                Ok(((b * h).exp() * DVector::from_column_slice(y))
                    .iter()
                    .copied()
                    .collect())
            }
            (Branch::Truncated, IntegratorMethod::DenseExponentialOracle) => Err(Error::InvalidInput(
                "the dense oracle integrates linear branches only".into(),
            )),
            (Branch::Truncated, IntegratorMethod::ExponentialEuler) => self.advance_truncated(y, t0, t1, cfg, step),
        }
    }

    fn advance_truncated(
        &self,
        y: &[f64],
        t0: f64,
        t1: f64,
        cfg: &IntegratorConfig,
        step: &mut f64,
    ) -> Result<Vec<f64>> {
        let mut t = t0;
        let mut y = y.to_vec();
        if !(*step > 0.0) {
            *step = t1 - t0;
        }
        while t < t1 {
            let h = step.min(t1 - t);
            let last = h == t1 - t;
            let big = self.frozen_step(&y, h)?;
            let mid = self.frozen_step(&y, 0.5 * h)?;
            let small = self.frozen_step(&mid, 0.5 * h)?;
            let err = big
                .iter()
                .zip(&small)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let scale = norm(&y).max(norm(&small)).max(f64::MIN_POSITIVE);
            if err <= cfg.tolerance * scale {
                y = small;
                t = if last { t1 } else { t + h };
                *step = 2.0 * h;
            } else {
                if 0.5 * h < cfg.min_step {
                    return Err(Error::StepRejected {
                        t,
                        estimate: err / scale,
                        tolerance: cfg.tolerance,
                    });
                }
                *step = 0.5 * h;
            }
        }
        Ok(y)
    }

    /// Integrates from `start` to `t_end`, sampling uniformly.
    pub fn run(
        &self,
        system: &System,
        start: &GalerkinState,
        t_end: f64,
        cfg: &IntegratorConfig,
    ) -> Result<Trajectory> {
        let t0 = start.time;
        if !(t_end >= t0) {
            return Err(Error::InvalidInput(format!(
                "end time {t_end} precedes start time {t0}"
            )));
        }
        if start.coeffs.len() != self.taus.len() {
            return Err(Error::InvalidInput(format!(
                "state has {} coefficients, system has {} modes",
                start.coeffs.len(),
                self.taus.len()
            )));
        }
        if start.coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("initial state is not finite".into()));
        }
        if cfg.method == IntegratorMethod::DenseExponentialOracle && self.branch == Branch::Linear {
            if system.modes() > ORACLE_MAX_MODES {
                return Err(Error::InvalidInput(format!(
                    "dense oracle limited to {ORACLE_MAX_MODES} modes, got {}",
                    system.modes()
                )));
            }
            let p = self.params.as_ref().expect("feedback branch");
            self.generator.get_or_init(|| system.generator(p.gamma, p.n));
        }
        let mut traj = Trajectory::default();
        let mut y = start.coeffs.clone();
        traj.samples.push(self.sample(t0, &y));
        traj.checkpoints.push(start.clone());
        if t_end > t0 {
            let k = cfg.samples_per_interval.max(1);
            let mut step = 0.0;
            let mut prev = t0;
            for i in 1..=k {
                let t = if i == k {
                    t_end
                } else {
                    t0 + (t_end - t0) * i as f64 / k as f64
                };
                y = self.advance(&y, prev, t, cfg, &mut step)?;
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!("state left the f64 range at t = {t}")));
                }
                traj.samples.push(self.sample(t, &y));
                prev = t;
            }
            traj.checkpoints.push(GalerkinState::new(y, t_end));
        }
        Ok(traj)
    }
}

/// One exact step of the stationary closed loop.
pub fn step_linear(system: &System, params: &FeedbackParams, y: &GalerkinState, dt: f64) -> Result<GalerkinState> {
    let prop = LinearPropagator::new(system, params.gamma, params.n)?;
    Ok(GalerkinState::new(prop.advance(&y.coeffs, dt), y.time + dt))
}

/// One error-controlled step of the truncated closed loop.
pub fn step_truncated(
    system: &System,
    params: &FeedbackParams,
    y: &GalerkinState,
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<GalerkinState> {
    let lp = ClosedLoop::new(system, Branch::Truncated, Some(params.clone()))?;
    let mut step = dt;
    let out = lp.advance(&y.coeffs, y.time, y.time + dt, cfg, &mut step)?;
    Ok(GalerkinState::new(out, y.time + dt))
}

/// `V(y) = μ ‖X_N‖² + ‖P_N^⊥ y‖²`.
pub fn lyapunov_v(params: &FeedbackParams, y: &[f64]) -> f64 {
    let low: f64 = y[..params.n].iter().map(|v| v * v).sum();
    let tail: f64 = y[params.n..].iter().map(|v| v * v).sum();
    params.mu_times(low) + tail
}

/// `V₁(y) = μ̃ ‖X_N‖² + Σ_{i>N} τ_i y_i²`.
pub fn lyapunov_v1(params: &FeedbackParams, taus: &[f64], y: &[f64]) -> f64 {
    let low: f64 = y[..params.n].iter().map(|v| v * v).sum();
    let tail: f64 = y[params.n..]
        .iter()
        .zip(&taus[params.n..])
        .map(|(v, t)| t * v * v)
        .sum();
    params.mu_tilde_times(low) + tail
}

/// Stationary closed loop `ẏ = -D y - γ G P_N y` from `t = 0`.
pub fn run_stationary(
    system: &System,
    params: &FeedbackParams,
    y0: &[f64],
    horizon: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidInput(format!("horizon {horizon} must be positive")));
    }
    let lp = ClosedLoop::stationary(system, params.clone())?;
    lp.run(system, &GalerkinState::new(y0.to_vec(), 0.0), horizon, cfg)
}

/// `exp(B t) y₀` for the dense generator; the cross-check oracle.
pub fn dense_oracle(system: &System, params: &FeedbackParams, y0: &[f64], t: f64) -> Result<Vec<f64>> {
    if system.modes() > ORACLE_MAX_MODES {
        return Err(Error::InvalidInput(format!(
            "dense oracle limited to {ORACLE_MAX_MODES} modes, got {}",
            system.modes()
        )));
    }
    let b = system.generator(params.gamma, params.n) * t;
    Ok((b.exp() * DVector::from_column_slice(y0)).iter().copied().collect())
}

/// Decay rate `-d/dt log‖y(t)‖` regressed over samples in `[t_lo, t_hi]`,
/// skipping samples that have underflowed to zero.
pub fn decay_rate(traj: &Trajectory, t_lo: f64, t_hi: f64) -> Result<f64> {
    let (ts, logs): (Vec<f64>, Vec<f64>) = traj
        .samples
        .iter()
        .filter(|s| s.t >= t_lo && s.t <= t_hi && s.norm_y > 0.0)
        .map(|s| (s.t, s.norm_y.ln()))
        .unzip();
    Ok(-fit_loglinear(&ts, &logs)?.slope)
}

/// Largest per-step ratio `W(t_{k+1}) e^{λ t_{k+1}} / (W(t_k) e^{λ t_k})` for
/// the chosen Lyapunov monitor; 1 or less means the certificate holds exactly.
/// Steps where the monitor has underflowed to zero or overflowed are skipped.
pub fn lyapunov_worst_ratio(samples: &[Sample], lambda: f64, monitor: impl Fn(&Sample) -> f64) -> f64 {
    samples
        .windows(2)
        .filter(|w| {
            [monitor(&w[0]), monitor(&w[1])]
                .iter()
                .all(|m| *m > 0.0 && m.is_finite())
        })
        .map(|w| (monitor(&w[1]).ln() - monitor(&w[0]).ln() + lambda * (w[1].t - w[0].t)).exp())
        .fold(0.0, f64::max)
}

/// Samples violating `‖y(t)‖ ≤ C₁e^{C₁√λ}e^{-λt/2}‖y₀‖` or
/// `‖u(t)‖ ≤ C₂e^{C₂√λ}e^{-λt/2}‖y₀‖` (relative slack `1e-9`).
pub fn stationary_bound_violations(traj: &Trajectory, params: &FeedbackParams) -> usize {
    let Some(first) = traj.samples.first() else { return 0 };
    let (t0, y0) = (first.t, first.norm_y);
    traj.samples
        .iter()
        .filter(|s| {
            let decay = (-params.lambda * (s.t - t0) / 2.0).exp() * y0;
            let slack = 1.0 + 1e-9;
            s.norm_y > params.state_bound_factor() * decay * slack
                || s.norm_u > params.control_bound_factor() * decay * slack
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::{make_params, select_c2};
    use crate::spectral::{enumerate_modes, gram_matrix, ControlRegion, DomainSpec};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn setup(m: usize, region: Option<(f64, f64)>, n: usize) -> (ModeBasis, System) {
        let basis = enumerate_modes(&DomainSpec::interval(PI).unwrap(), m).unwrap();
        let omega = match region {
            Some(b) => ControlRegion::new(vec![b], &basis.domain).unwrap(),
            None => ControlRegion::full(&basis.domain),
        };
        let gram = gram_matrix(&basis, &omega, n).unwrap();
        let system = System::new(&basis, gram).unwrap();
        (basis, system)
    }

    fn params(basis: &ModeBasis, lambda: f64, c1: f64) -> FeedbackParams {
        let c2 = select_c2(c1, lambda, lambda).unwrap();
        make_params(lambda, c1, c2, basis).unwrap()
    }

    #[test]
    fn no_control_is_pure_heat() {
        let (_, system) = setup(16, Some((1.0, 2.0)), 4);
        let y: Vec<f64> = (0..16).map(|i| 1.0 / (i + 1) as f64).collect();
        let prop = LinearPropagator::new(&system, 0.0, 4).unwrap();
        let out = prop.advance(&y, 0.3);
        for (i, v) in out.iter().enumerate() {
            assert_relative_eq!(
                *v,
                (-(((i + 1) * (i + 1)) as f64) * 0.3).exp() * y[i],
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn full_region_decouples() {
        let (basis, system) = setup(16, None, 16);
        let p = params(&basis, 10.0, 1.0);
        let mut y = vec![0.0; 16];
        y[0] = 1.0;
        y[2] = -0.5;
        y[5] = 0.25;
        let out = step_linear(&system, &p, &GalerkinState::new(y.clone(), 0.0), 0.01).unwrap();
        for (i, (&got, &y0)) in out.coeffs.iter().zip(&y).enumerate() {
            let rate = (i + 1) as f64 * (i + 1) as f64 + if i < p.n { p.gamma } else { 0.0 };
            assert_relative_eq!(got, (-rate * 0.01).exp() * y0, max_relative = 1e-10, epsilon = 1e-300);
        }
    }

    #[test]
    fn propagator_matches_dense_exponential() {
        let (basis, system) = setup(48, Some((1.0, 2.0)), 10);
        let p = params(&basis, 10.0, 1.0);
        let y: Vec<f64> = (0..48).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
        let exact = dense_oracle(&system, &p, &y, 0.05).unwrap();
        let ours = step_linear(&system, &p, &GalerkinState::new(y, 0.0), 0.05).unwrap();
        let diff: f64 = ours
            .coeffs
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-10 * norm(&exact), "{diff}");
    }

    #[test]
    fn zero_start_stays_zero() {
        let (basis, system) = setup(32, Some((1.0, 2.0)), 8);
        let p = params(&basis, 10.0, 1.0);
        let traj = run_stationary(&system, &p, &[0.0; 32], 1.0, &IntegratorConfig::default()).unwrap();
        assert!(traj
            .samples
            .iter()
            .all(|s| s.norm_y == 0.0 && s.norm_u == 0.0 && s.v == 0.0));
        assert!(matches!(
            decay_rate(&traj, 0.2, 1.0),
            Err(Error::InsufficientFitPoints(0))
        ));
    }

    #[test]
    fn lyapunov_values() {
        let (basis, _) = setup(16, None, 16);
        let p = params(&basis, 10.0, 1.0);
        assert_eq!(lyapunov_v(&p, &[0.0; 16]), 0.0);
        let mut y = vec![0.0; 16];
        y[p.n] = 0.6;
        y[p.n + 2] = 0.8;
        assert_relative_eq!(lyapunov_v(&p, &y), 1.0, max_relative = 1e-15);
        y[0] = 1.0;
        assert_relative_eq!(lyapunov_v(&p, &y), p.mu + 1.0, max_relative = 1e-15);
    }

    #[test]
    fn truncated_inactive_and_saturated() {
        let (basis, system) = setup(32, Some((1.0, 2.0)), 8);
        let p = params(&basis, 10.0, 1.0);
        let cfg = IntegratorConfig::default();
        let mut small = vec![0.0; 32];
        small[0] = 0.1 * p.r / p.gamma;
        small[9] = 0.1 * p.r / p.gamma;
        let a = step_truncated(&system, &p, &GalerkinState::new(small.clone(), 0.0), 0.1, &cfg).unwrap();
        let b = step_linear(&system, &p, &GalerkinState::new(small, 0.0), 0.1).unwrap();
        for (x, z) in a.coeffs.iter().zip(&b.coeffs) {
            assert!((x - z).abs() <= 1e-12 * norm(&b.coeffs).max(1e-300));
        }
        let mut big = vec![0.0; 32];
        big[0] = 1.0;
        big[1] = 1.0;
        let h = 1e-4;
        let out = step_truncated(&system, &p, &GalerkinState::new(big.clone(), 0.0), h, &cfg).unwrap();
        // the fed-back norm stays far above 2r over this short step
        for (x, z) in out.coeffs.iter().zip(heat_flow(&system.taus, &big, h)) {
            assert_relative_eq!(*x, z, max_relative = 1e-14);
        }
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        Trajectory::default().write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "t,norm_y,norm_low,norm_tail,norm_u,V,V1\n"
        );
    }

    #[test]
    fn csv_fields_round_trip() {
        for x in [0.0, 1.0, 0.0078125, 4.496184603262803e-48, 3.7e20, 1e-4, 123.456] {
            let f = csv_field(x);
            assert_eq!(f.parse::<f64>().unwrap(), x, "{f}");
            assert!(f.len() < 25, "{f}");
        }
    }

    #[test]
    fn resolvability_guard() {
        let (basis, system) = setup(256, Some((1.0, 2.0)), 40);
        let p = params(&basis, 1600.0, 3.0);
        assert!(matches!(
            LinearPropagator::new(&system, p.gamma, p.n),
            Err(Error::Numerical(_))
        ));
    }
}
