//! Piecewise null-control schedules: the polynomial partitions `t_n = T - 1/n^k`
//! with rates `Γ² n^{2(k+1)}`, the dyadic partition `t_n = 2^{-n₀}(1 - 2^{-n})`
//! with rates `Q² 4^{n₀+n}`, their gain constants, and cost extraction.
//!
//! The partitions accumulate at `T`; a schedule keeps finitely many pieces and
//! runs the remainder `[t_{n_max}, T)` without control.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::feedback::make_params;
use crate::fit::{fit_loglinear, FitResult};
use crate::sim::{Branch, ClosedLoop, GalerkinState, IntegratorConfig, System, Trajectory};
use crate::spectral::{gram_matrix, ControlRegion, ModeBasis};

/// Fraction of `τ_M` a scheduled rate may reach.
pub const RESOLUTION_FRACTION: f64 = 0.8;

/// Number of indices the gain solvers re-verify.
pub const VERIFY_UP_TO: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Poly4,
    PolyK,
    Dyadic,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Poly4 => "poly4",
            ScheduleKind::PolyK => "poly_k",
            ScheduleKind::Dyadic => "dyadic",
        }
    }
}

/// Where to cut the infinite partition. The resolution rule
/// (`λ_n > 0.8 τ_M`) always applies as well.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop once the predicted terminal bound reaches this ratio.
    TargetRatio(f64),
    /// Keep pieces with index below this value.
    MaxIndex(u64),
    /// Keep every resolved piece.
    Resolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetRatio,
    MaxIndex,
    Resolution,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::TargetRatio => "target_ratio",
            StopReason::MaxIndex => "max_index",
            StopReason::Resolution => "resolution",
        }
    }
}

/// Outcome of a gain-constant solve with its post-hoc verification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainSolution {
    pub value: f64,
    pub checked: u32,
    pub violations: u32,
}

/// Smallest `g` (to relative 1e-13) with `ln C / e(n) + C g ≤ g²/16` for
/// `C ∈ {C₁, C₂}` at `n = 1`, then re-checked for `n = 1..=1000`.
fn solve_exponent_constant(c1: f64, c2: f64, exponent: impl Fn(u32) -> f64) -> Result<GainSolution> {
    for (name, c) in [("C1", c1), ("C2", c2)] {
        if !(c.is_finite() && c >= 1.0) {
            return Err(Error::InvalidInput(format!("{name} = {c} must be at least 1")));
        }
    }
    let holds = |g: f64, e: f64| [c1, c2].iter().all(|&c| c.ln() / e + c * g <= g * g / 16.0);
    let e1 = exponent(1);
    let mut hi = 16.0 * c1.max(c2);
    while !holds(hi, e1) {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > 1e-13 * hi {
        let mid = 0.5 * (lo + hi);
        if holds(mid, e1) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let violations = (1..=VERIFY_UP_TO).filter(|&n| !holds(hi, exponent(n))).count() as u32;
    Ok(GainSolution {
        value: hi,
        checked: VERIFY_UP_TO,
        violations,
    })
}

/// Γ with `C e^{CΓn²} ≤ e^{Γ²n²/16}` for all `n ≥ 1`, `C ∈ {C₁, C₂}`.
pub fn solve_gamma(c1: f64, c2: f64) -> Result<GainSolution> {
    solve_exponent_constant(c1, c2, |n| (n as f64).powi(2))
}

/// Q with `C e^{CQm} ≤ e^{Q²m/16}` for all `m ≥ 1`.
pub fn solve_q(c1: f64, c2: f64) -> Result<GainSolution> {
    solve_exponent_constant(c1, c2, |m| m as f64)
}

/// Γ_ε with `ln C + CΓn^{k+1} ≤ (Γ²/16) n^{k+1}` for all `n ≥ 1`.
pub fn solve_gamma_eps(c1: f64, c2: f64, k: u32) -> Result<GainSolution> {
    solve_exponent_constant(c1, c2, |n| (n as f64).powi(k as i32 + 1))
}

/// `k = ⌈1/ε⌉`.
pub fn k_for_epsilon(eps: f64) -> Result<u32> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidInput(format!("ε = {eps} must be positive")));
    }
    Ok((1.0 / eps).ceil().max(1.0) as u32)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Piece {
    pub n: u64,
    pub t_start: f64,
    pub t_end: f64,
    pub lambda: f64,
    pub truncated: bool,
}

impl Piece {
    pub fn length(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Γ, Γ_ε or Q.
    pub constant: f64,
    pub k: Option<u32>,
    pub n0: Option<u32>,
    pub pieces: Vec<Piece>,
    /// Index one past the last kept piece; `t_{n_max}` is where control stops.
    pub n_max: u64,
    pub stop_reason: StopReason,
    /// `Σ ln(C₁ e^{C₁√λ_k} e^{-λ_k|I_k|/2})` over the kept pieces.
    pub predicted_log_bound: f64,
    /// The closed-form per-piece decay in terms of the gain constant alone
    /// (`-3Γ²k²/16` for poly4, `ln C₁ + C₁Γn^{k+1} - Γ²n^{k+1}/4` for poly_k).
    pub constant_log_bound: Option<f64>,
}

impl Schedule {
    /// `C₃ = constant²/16`.
    pub fn c3(&self) -> f64 {
        self.constant * self.constant / 16.0
    }

    /// Log of the cost bound `e^{C₃/T²}`, `e^{C₃/T^{1+1/k}}` or `e^{C₃/T}`.
    pub fn log_cost_bound(&self) -> f64 {
        self.c3() * cost_abscissa(self.kind, self.horizon, self.k)
    }

    pub fn control_end(&self) -> f64 {
        self.pieces.last().map_or(0.0, |p| p.t_end)
    }
}

/// Regression abscissa of the cost law: `1/T²`, `1/T^{1+1/k}` or `1/T`.
pub fn cost_abscissa(kind: ScheduleKind, horizon: f64, k: Option<u32>) -> f64 {
    match kind {
        ScheduleKind::Poly4 => horizon.powi(-2),
        ScheduleKind::PolyK => horizon.powf(-(1.0 + 1.0 / k.unwrap_or(1) as f64)),
        ScheduleKind::Dyadic => 1.0 / horizon,
    }
}

fn integer_near(x: f64) -> Option<u64> {
    let r = x.round();
    ((x - r).abs() <= 1e-9 * x.abs().max(1.0) && r >= 1.0).then_some(r as u64)
}

/// `n_T = 1/T^{1/k}` when it is an integer and `T ∈ (0, 1)`.
pub fn first_index(kind: ScheduleKind, horizon: f64, k: Option<u32>) -> Result<u64> {
    if !(horizon > 0.0 && horizon < 1.0) {
        return Err(Error::HorizonNotAdmissible(format!("T = {horizon} must lie in (0, 1)")));
    }
    match kind {
        ScheduleKind::Poly4 => integer_near(1.0 / horizon)
            .ok_or_else(|| Error::HorizonNotAdmissible(format!("1/T not integer (T = {horizon})"))),
        ScheduleKind::PolyK => {
            let k = k.ok_or_else(|| Error::InvalidInput("poly_k schedule needs k".into()))?;
            if k == 0 {
                return Err(Error::InvalidInput("k must be at least 1".into()));
            }
            integer_near(horizon.powf(-1.0 / k as f64))
                .ok_or_else(|| Error::HorizonNotAdmissible(format!("1/T^(1/{k}) not integer (T = {horizon})")))
        }
        ScheduleKind::Dyadic => {
            let n0 = integer_near(-horizon.log2()).filter(|&n| 2f64.powi(-(n as i32)) == horizon);
            n0.ok_or_else(|| Error::HorizonNotAdmissible(format!("1/T not a power of two (T = {horizon})")))
        }
    }
}

fn piece_at(kind: ScheduleKind, horizon: f64, constant: f64, k: u32, first: u64, n: u64) -> Piece {
    match kind {
        ScheduleKind::Poly4 | ScheduleKind::PolyK => {
            let (nf, kk) = (n as f64, k as i32);
            let t = |m: f64| if m == first as f64 { 0.0 } else { horizon - m.powi(-kk) };
            Piece {
                n,
                t_start: t(nf),
                t_end: t(nf + 1.0),
                lambda: constant * constant * nf.powi(2 * (kk + 1)),
                truncated: false,
            }
        }
        ScheduleKind::Dyadic => {
            let n0 = first as i32;
            let t = |m: i32| horizon * (1.0 - 2f64.powi(-m));
            Piece {
                n,
                t_start: t(n as i32),
                t_end: t(n as i32 + 1),
                lambda: constant * constant * 4f64.powi(n0 + n as i32),
                truncated: false,
            }
        }
    }
}

/// Builds the finite schedule for `kind` on `[0, T)`.
///
/// `k` is required for poly_k. `c1` enters the predicted terminal bound and
/// `tau_max` the resolution rule.
pub fn build_schedule(
    kind: ScheduleKind,
    horizon: f64,
    constant: f64,
    k: Option<u32>,
    stop: StopRule,
    c1: f64,
    tau_max: f64,
) -> Result<Schedule> {
    if !(constant.is_finite() && constant > 0.0) {
        return Err(Error::InvalidInput(format!(
            "schedule constant {constant} must be positive"
        )));
    }
    let first = first_index(kind, horizon, k)?;
    let kk = match kind {
        ScheduleKind::Poly4 => 1,
        ScheduleKind::PolyK => k.unwrap_or(1),
        ScheduleKind::Dyadic => 1,
    };
    // the dyadic index starts at 0; its `first` is n₀
    let start = if kind == ScheduleKind::Dyadic { 0 } else { first };
    let mut pieces = Vec::new();
    let mut log_bound = 0.0;
    let mut constant_bound = 0.0;
    let mut n = start;
    let reason = loop {
        if let StopRule::MaxIndex(limit) = stop {
            if n >= limit {
                break StopReason::MaxIndex;
            }
        }
        let piece = piece_at(kind, horizon, constant, kk, first, n);
        if piece.lambda > RESOLUTION_FRACTION * tau_max {
            break StopReason::Resolution;
        }
        log_bound += c1.ln() + c1 * piece.lambda.sqrt() - piece.lambda * piece.length() / 2.0;
        let nf = n as f64;
        constant_bound += match kind {
            ScheduleKind::Poly4 => -3.0 * constant * constant * nf * nf / 16.0,
            ScheduleKind::PolyK => {
                let e = nf.powi(kk as i32 + 1);
                c1.ln() + c1 * constant * e - constant * constant * e / 4.0
            }
            ScheduleKind::Dyadic => 0.0,
        };
        pieces.push(piece);
        n += 1;
        if let StopRule::TargetRatio(eps) = stop {
            if log_bound <= eps.ln() {
                break StopReason::TargetRatio;
            }
        }
        if pieces.len() > 1 && pieces.last().unwrap().length() <= 0.0 {
            return Err(Error::Numerical("schedule pieces shrank below f64 resolution".into()));
        }
    };
    if pieces.is_empty() {
        return Err(Error::ScheduleTail(format!(
            "first rate {:e} already exceeds {RESOLUTION_FRACTION}·τ_M = {:e}",
            piece_at(kind, horizon, constant, kk, first, start).lambda,
            RESOLUTION_FRACTION * tau_max
        )));
    }
    Ok(Schedule {
        kind,
        horizon,
        constant,
        k: (kind == ScheduleKind::PolyK).then_some(kk),
        n0: (kind == ScheduleKind::Dyadic).then_some(first as u32),
        pieces,
        n_max: n,
        stop_reason: reason,
        predicted_log_bound: log_bound,
        constant_log_bound: (kind != ScheduleKind::Dyadic).then_some(constant_bound),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub gamma_or_q: f64,
    pub c3: f64,
    /// Supremum of `‖u(t)‖₂` over all samples.
    pub sup_cost: f64,
    pub per_piece_sup: Vec<f64>,
    /// `‖y(T)‖/‖y₀‖` (0 for a zero start).
    pub terminal_ratio: f64,
    pub n_max: u64,
    pub stop_rule: StopReason,
    /// `‖y(t_n)‖/‖y₀‖` at each piece end.
    pub boundary_ratios: Vec<f64>,
    /// Chained bound `Π_{k≤n} C₁e^{C₁√λ_k}e^{-λ_k|I_k|/2}` in log form.
    pub boundary_log_bounds: Vec<f64>,
    /// Piece ends where the chained bound fails.
    pub boundary_violations: usize,
    /// Whether `sup_cost ≤ e^{C₃/T^p}‖y₀‖`.
    pub cost_within_bound: bool,
}

impl CostReport {
    /// Index within the schedule of the piece with the largest control.
    pub fn argmax_piece(&self) -> Option<usize> {
        self.per_piece_sup
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

/// Applies `F_{λ_n}` on each piece, chaining terminal states, then runs the
/// uncontrolled remainder up to `T`.
pub fn run_null_control(
    schedule: &Schedule,
    y0: &[f64],
    basis: &ModeBasis,
    region: &ControlRegion,
    c1: f64,
    c2: f64,
    cfg: &IntegratorConfig,
) -> Result<(Trajectory, CostReport)> {
    let lambda_top = schedule.pieces.iter().map(|p| p.lambda).fold(0.0, f64::max);
    let n_top = basis.count_modes(lambda_top).map_err(|e| match e {
        Error::TruncationTooSmall { lambda, tau_max } => {
            Error::ScheduleTail(format!("rate {lambda:e} is not resolved by τ_M = {tau_max:e}"))
        }
        other => other,
    })?;
    let system = System::new(basis, gram_matrix(basis, region, n_top.max(1))?)?;
    let y0_norm = crate::feedback::norm(y0);

    let mut traj = Trajectory::default();
    let mut state = GalerkinState::new(y0.to_vec(), 0.0);
    let mut per_piece_sup = Vec::new();
    let mut boundary_ratios = Vec::new();
    let mut boundary_log_bounds = Vec::new();
    let mut log_bound = 0.0;
    for piece in &schedule.pieces {
        let params = make_params(piece.lambda, c1, c2, basis)?;
        let lp = ClosedLoop::stationary(&system, params)?;
        let seg = lp.run(&system, &state, piece.t_end, cfg)?;
        per_piece_sup.push(seg.sup_control());
        state = seg.final_state().cloned().expect("nonempty run");
        log_bound += c1.ln() + c1 * piece.lambda.sqrt() - piece.lambda * piece.length() / 2.0;
        boundary_ratios.push(if y0_norm > 0.0 { state.norm() / y0_norm } else { 0.0 });
        boundary_log_bounds.push(log_bound);
        traj.append(seg);
    }
    if state.time < schedule.horizon {
        let off = ClosedLoop::new(&system, Branch::Off, None)?;
        let seg = off.run(&system, &state, schedule.horizon, cfg)?;
        state = seg.final_state().cloned().expect("nonempty run");
        traj.append(seg);
    }

    let boundary_violations = boundary_ratios
        .iter()
        .zip(&boundary_log_bounds)
        .filter(|(r, b)| **r > 0.0 && r.ln() > **b + 1e-9)
        .count();
    let sup_cost = traj.sup_control();
    let cost_within_bound = sup_cost == 0.0 || sup_cost.ln() <= schedule.log_cost_bound() + y0_norm.ln();
    let report = CostReport {
        kind: schedule.kind,
        horizon: schedule.horizon,
        gamma_or_q: schedule.constant,
        c3: schedule.c3(),
        sup_cost,
        per_piece_sup,
        terminal_ratio: if y0_norm > 0.0 { state.norm() / y0_norm } else { 0.0 },
        n_max: schedule.n_max,
        stop_rule: schedule.stop_reason,
        boundary_ratios,
        boundary_log_bounds,
        boundary_violations,
        cost_within_bound,
    };
    Ok((traj, report))
}

/// Regresses `log sup-cost` on the kind's cost abscissa over several horizons.
pub fn cost_scaling(kind: ScheduleKind, horizons: &[f64], costs: &[f64], k: Option<u32>) -> Result<FitResult> {
    if horizons.len() != costs.len() {
        return Err(Error::InvalidInput("one cost per horizon required".into()));
    }
    if horizons.len() < 3 {
        return Err(Error::InsufficientFitPoints(horizons.len()));
    }
    if costs.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
        return Err(Error::DegenerateFit("costs must be positive and finite".into()));
    }
    if costs.iter().all(|c| *c == costs[0]) {
        return Err(Error::DegenerateFit("cost does not vary with T".into()));
    }
    let xs: Vec<f64> = horizons.iter().map(|&t| cost_abscissa(kind, t, k)).collect();
    let ys: Vec<f64> = costs.iter().map(|c| c.ln()).collect();
    fit_loglinear(&xs, &ys)
}
