//! The T-periodic feedback that drives every state of norm at most Λ to rest
//! within two periods.
//!
//! One period reuses the poly4 partition of `[0, T)`: pieces `n_T ≤ n ≤ N_T`
//! apply `F_{λ_n}`, later pieces apply the truncated law `K_{r_{λ_n}} ∘ F_{λ_n}`,
//! and the unresolved remainder of the period runs without control.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::feedback::{make_params, norm};
use crate::schedule::{build_schedule, first_index, solve_gamma, Schedule, ScheduleKind, StopRule};
use crate::sim::{Branch, ClosedLoop, GalerkinState, IntegratorConfig, System, Trajectory};
use crate::spectral::{gram_matrix, ControlRegion, ModeBasis};

/// Upper end of the N_T scan.
pub const NT_SCAN_LIMIT: u64 = 1_000_000;

/// `N² - 3 Σ_{k=n_T}^{N} k² + 2(N+1)²`, exactly.
fn nt_bracket(n_t: u64, n: u64) -> i128 {
    let sq = |m: i128| m * (m + 1) * (2 * m + 1) / 6;
    let (a, b) = (n_t as i128, n as i128);
    b * b - 3 * (sq(b) - sq(a - 1)) + 2 * (b + 1) * (b + 1)
}

/// Log of `2e^{Γ²N²/16} Λ (Π_{k=n_T}^{N} e^{-3Γ²k²/16}) e^{Γ²(N+1)²/8}`.
pub fn nt_log_lhs(radius: f64, gamma: f64, n_t: u64, n: u64) -> f64 {
    std::f64::consts::LN_2 + radius.ln() + gamma * gamma / 16.0 * nt_bracket(n_t, n) as f64
}

/// Smallest `N_T > n_T` whose selection product is at most 1.
pub fn select_nt(radius: f64, gamma: f64, n_t: u64) -> Result<u64> {
    if !(radius >= 1.0 && radius.is_finite()) {
        return Err(Error::InvalidInput(format!("Λ = {radius} must be at least 1")));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidInput(format!("Γ = {gamma} must be positive")));
    }
    if n_t == 0 {
        return Err(Error::InvalidInput("n_T must be positive".into()));
    }
    (n_t + 1..=NT_SCAN_LIMIT)
        .find(|&n| nt_log_lhs(radius, gamma, n_t, n) <= 0.0)
        .ok_or(Error::NoNtWithinBound(NT_SCAN_LIMIT))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilizerConfig {
    #[serde(rename = "T")]
    pub period: f64,
    pub n_t: u64,
    #[serde(rename = "Lambda")]
    pub radius: f64,
    #[serde(rename = "Gamma")]
    pub gamma: f64,
    #[serde(rename = "N_T")]
    pub n_big: u64,
    pub c1: f64,
    pub c2: f64,
    /// One period of the partition, with pieces beyond `N_T` flagged truncated.
    pub template: Schedule,
}

impl StabilizerConfig {
    /// Solves Γ from `(C₁, C₂)`, selects N_T and lays out one period, keeping
    /// the pieces whose rate stays below `0.8 τ_max`.
    pub fn new(period: f64, radius: f64, c1: f64, c2: f64, tau_max: f64) -> Result<Self> {
        let n_t = first_index(ScheduleKind::Poly4, period, None)?;
        let gamma = solve_gamma(c1, c2)?.value;
        let n_big = select_nt(radius, gamma, n_t)?;
        let mut template = build_schedule(
            ScheduleKind::Poly4,
            period,
            gamma,
            None,
            StopRule::Resolution,
            c1,
            tau_max,
        )?;
        for piece in &mut template.pieces {
            piece.truncated = piece.n > n_big;
        }
        Ok(Self {
            period,
            n_t,
            radius,
            gamma,
            n_big,
            c1,
            c2,
            template,
        })
    }
}

/// Per-sample record of a truncated branch: whether `‖F_λ y‖ ≤ r_λ` held.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CutoffCheck {
    pub t: f64,
    pub n: u64,
    pub identity: bool,
    pub norm_u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowResult {
    pub start: f64,
    pub end: f64,
    pub initial: Vec<f64>,
    pub terminal: Vec<f64>,
    pub sup_state: f64,
    pub sup_control: f64,
    pub trajectory: Trajectory,
    pub cutoff_checks: Vec<CutoffCheck>,
    /// Samples with `‖u‖ > C‖y‖ + 2‖y‖^{1/2}`, `C` the largest linear gain.
    pub branch_bound_violations: usize,
}

impl FlowResult {
    pub fn terminal_norm(&self) -> f64 {
        norm(&self.terminal)
    }
}

/// Outcome of the uniform-stability probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformReport {
    pub delta: f64,
    pub eta: f64,
    /// Largest `sup_t ‖Φ(t, s; y₀)‖` over all probes.
    pub worst_sup: f64,
    /// `worst_sup / δ`; at most 1 on a pass.
    pub worst_ratio: f64,
    pub worst_start: f64,
    pub probes: usize,
    pub pass: bool,
}

/// Amplification constants measured for the operational η.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtaReport {
    pub eta: f64,
    /// Worst `sup ‖Φ(t, s; y)‖/‖y‖` from a start `s` to the next period boundary.
    pub within_period: f64,
    /// Worst `sup ‖Φ(t, kT; z)‖/‖z‖` from that boundary to `s + 2T`.
    pub after_boundary: f64,
}

/// The periodic closed loop bound to a Galerkin system.
#[derive(Debug, Clone)]
pub struct Stabilizer {
    pub config: StabilizerConfig,
    system: System,
    loops: Vec<ClosedLoop>,
    off: ClosedLoop,
    max_linear_gain: f64,
    pub integrator: IntegratorConfig,
}

impl Stabilizer {
    pub fn new(
        config: StabilizerConfig,
        basis: &ModeBasis,
        region: &ControlRegion,
        integrator: IntegratorConfig,
    ) -> Result<Self> {
        let lambda_top = config.template.pieces.iter().map(|p| p.lambda).fold(0.0, f64::max);
        let n_top = basis.count_modes(lambda_top)?;
        let system = System::new(basis, gram_matrix(basis, region, n_top.max(1))?)?;
        let mut loops = Vec::new();
        let mut max_linear_gain: f64 = 0.0;
        for piece in &config.template.pieces {
            let params = make_params(piece.lambda, config.c1, config.c2, basis)?;
            let branch = if piece.truncated {
                Branch::Truncated
            } else {
                Branch::Linear
            };
            if !piece.truncated {
                max_linear_gain = max_linear_gain.max(params.gamma);
            }
            loops.push(ClosedLoop::new(&system, branch, Some(params))?);
        }
        let off = ClosedLoop::new(&system, Branch::Off, None)?;
        Ok(Self {
            config,
            system,
            loops,
            off,
            max_linear_gain,
            integrator,
        })
    }

    pub fn system(&self) -> &System {
        &self.system
    }

    fn period(&self) -> f64 {
        self.config.period
    }

    /// Index into the template of the piece containing local time `tau`.
    fn piece_index(&self, tau: f64) -> Option<usize> {
        let pieces = &self.config.template.pieces;
        let i = pieces.partition_point(|p| p.t_start <= tau);
        (i > 0 && tau < pieces[i - 1].t_end).then(|| i - 1)
    }

    fn law_at(&self, tau: f64) -> (&ClosedLoop, Option<u64>) {
        match self.piece_index(tau) {
            Some(i) => (&self.loops[i], Some(self.config.template.pieces[i].n)),
            None => (&self.off, None),
        }
    }

    /// `U(t; y)`, reduced to `t mod T`.
    pub fn periodic_feedback(&self, t: f64, y: &[f64]) -> Vec<f64> {
        self.law_at(t.rem_euclid(self.period())).0.control(y)
    }

    /// Breakpoints in `[s, t]` where the active law may change.
    fn segments(&self, s: f64, t: f64) -> Vec<f64> {
        let period = self.period();
        let mut local: Vec<f64> = self.config.template.pieces.iter().map(|p| p.t_start).collect();
        local.push(self.config.template.control_end());
        let mut points = vec![s];
        let mut k = (s / period).floor() as i64;
        loop {
            let base = k as f64 * period;
            if base >= t {
                break;
            }
            for &b in &local {
                let x = base + b;
                if x > s && x < t {
                    points.push(x);
                }
            }
            k += 1;
        }
        points.push(t);
        points.sort_by(f64::total_cmp);
        points.dedup();
        points
    }

    /// Integrates the closed loop from `(s, y₀)` to time `t`.
    pub fn flow(&self, s: f64, t: f64, y0: &[f64]) -> Result<FlowResult> {
        if !(t >= s) {
            return Err(Error::InvalidInput(format!("flow end {t} precedes start {s}")));
        }
        let points = self.segments(s, t);
        let mut traj = Trajectory::default();
        let mut state = GalerkinState::new(y0.to_vec(), s);
        let mut cutoff_checks = Vec::new();
        if points.len() == 1 {
            let (lp, _) = self.law_at(s.rem_euclid(self.period()));
            traj = lp.run(&self.system, &state, s, &self.integrator)?;
        }
        for w in points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let mid = 0.5 * (a + b);
            let (lp, n) = self.law_at(mid.rem_euclid(self.period()));
            let seg = lp.run(&self.system, &state, b, &self.integrator)?;
            if let (Branch::Truncated, Some(p), Some(n)) = (lp.branch(), lp.params(), n) {
                for smp in &seg.samples {
                    cutoff_checks.push(CutoffCheck {
                        t: smp.t,
                        n,
                        identity: p.gamma * smp.norm_low <= p.r,
                        norm_u: smp.norm_u,
                    });
                }
            }
            state = seg.final_state().cloned().expect("nonempty run");
            traj.append(seg);
        }
        let c = self.max_linear_gain;
        let branch_bound_violations = traj
            .samples
            .iter()
            .filter(|smp| smp.norm_u > (c * smp.norm_y + 2.0 * smp.norm_y.sqrt()) * (1.0 + 1e-12))
            .count();
        Ok(FlowResult {
            start: s,
            end: t,
            initial: y0.to_vec(),
            terminal: state.coeffs,
            sup_state: traj.sup_state(),
            sup_control: traj.sup_control(),
            trajectory: traj,
            cutoff_checks,
            branch_bound_violations,
        })
    }

    /// A priori growth bound over one period: `‖Φ(s+T, s; y₀)‖ ≤ 2 + e^{Γ²N_T²/16}‖y₀‖`,
    /// returned in log form.
    pub fn period_log_bound(&self, y0_norm: f64) -> f64 {
        let g = self.config.gamma;
        let n = self.config.n_big as f64;
        let amp = g * g * n * n / 16.0 + y0_norm.ln();
        // ln(2 + e^{amp}) without overflow
        amp.max(std::f64::consts::LN_2) + (-(amp - std::f64::consts::LN_2).abs()).exp().ln_1p()
    }

    /// Worst `sup_t ‖Φ(t, s; η d)‖` over the given starts and unit directions,
    /// up to `s + 2T`.
    pub fn uniform_stability_probe(
        &self,
        delta: f64,
        eta: f64,
        starts: &[f64],
        directions: &[Vec<f64>],
    ) -> Result<UniformReport> {
        if !(delta > 0.0) || !(eta > 0.0 && eta < delta) {
            return Err(Error::InvalidInput(format!(
                "need δ > 0 and η in (0, δ), got δ = {delta}, η = {eta}"
            )));
        }
        let mut worst_sup: f64 = 0.0;
        let mut worst_start = starts.first().copied().unwrap_or(0.0);
        let mut probes = 0;
        for &s in starts {
            for d in directions {
                let scale = eta / norm(d).max(f64::MIN_POSITIVE);
                let y0: Vec<f64> = d.iter().map(|v| v * scale).collect();
                let res = self.flow(s, s + 2.0 * self.period(), &y0)?;
                probes += 1;
                if res.sup_state > worst_sup {
                    worst_sup = res.sup_state;
                    worst_start = s;
                }
            }
        }
        Ok(UniformReport {
            delta,
            eta,
            worst_sup,
            worst_ratio: worst_sup / delta,
            worst_start,
            probes,
            pass: worst_sup <= delta,
        })
    }

    /// η from measured amplifications: `δ / (2 A_within A_after)`, capped at `δ/2`.
    ///
    /// Each calibration probe starts at amplitude δ, is followed to the next
    /// period boundary, and the boundary state is then followed to `s + 2T`.
    pub fn compute_eta(&self, delta: f64, starts: &[f64], directions: &[Vec<f64>]) -> Result<EtaReport> {
        if !(delta > 0.0) {
            return Err(Error::InvalidInput(format!("δ = {delta} must be positive")));
        }
        let period = self.period();
        let mut within: f64 = 1.0;
        let mut after: f64 = 1.0;
        for &s in starts {
            let boundary = ((s / period).floor() + 1.0) * period;
            for d in directions {
                let scale = delta / norm(d).max(f64::MIN_POSITIVE);
                let y0: Vec<f64> = d.iter().map(|v| v * scale).collect();
                let first = self.flow(s, boundary, &y0)?;
                within = within.max(first.sup_state / delta);
                let z = first.terminal_norm();
                if z > 0.0 {
                    let second = self.flow(boundary, s + 2.0 * period, &first.terminal)?;
                    after = after.max(second.sup_state / z);
                }
            }
        }
        Ok(EtaReport {
            eta: (delta / (2.0 * within * after)).min(delta / 2.0),
            within_period: within,
            after_boundary: after,
        })
    }
}
