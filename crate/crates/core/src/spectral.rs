//! Dirichlet eigenbasis on intervals and boxes, the observation Gram matrix on
//! a control sub-box, and the empirical spectral-inequality fit.
//!
//! Eigenfunctions are products of normalized sines
//! `e(x) = Π_k sqrt(2/L_k) sin(n_k π x_k / L_k)`, so every inner product over a
//! sub-box factorizes into one-dimensional integrals with closed-form
//! antiderivatives. Nothing here uses quadrature.

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fit::{fit_loglinear, FitResult};
use crate::mp;

/// Values of λ_min(J_N) at or below this are rejected from fits.
pub const MIN_EIGENVALUE_FLOOR: f64 = 1e-300;

/// Safety margin applied to the fitted slope to get the operational C₁.
pub const C1_MARGIN: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Interval,
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub lengths: Vec<f64>,
}

impl DomainSpec {
    pub fn new(kind: DomainKind, lengths: Vec<f64>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::InvalidInput("domain needs at least one axis".into()));
        }
        if kind == DomainKind::Interval && lengths.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "an interval has exactly one length, got {}",
                lengths.len()
            )));
        }
        if let Some(bad) = lengths.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "domain length {bad} is not strictly positive"
            )));
        }
        Ok(Self { kind, lengths })
    }

    pub fn interval(length: f64) -> Result<Self> {
        Self::new(DomainKind::Interval, vec![length])
    }

    pub fn box_domain(lengths: Vec<f64>) -> Result<Self> {
        Self::new(DomainKind::Box, lengths)
    }

    pub fn dim(&self) -> usize {
        self.lengths.len()
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }
}

/// Axis-aligned control sub-box ω = Π_k (a_k, b_k).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlRegion {
    pub bounds: Vec<(f64, f64)>,
}

impl ControlRegion {
    pub fn new(bounds: Vec<(f64, f64)>, domain: &DomainSpec) -> Result<Self> {
        if bounds.len() != domain.dim() {
            return Err(Error::InvalidInput(format!(
                "control region has {} axes but the domain has {}",
                bounds.len(),
                domain.dim()
            )));
        }
        for (k, (&(a, b), &l)) in bounds.iter().zip(&domain.lengths).enumerate() {
            if !(a.is_finite() && b.is_finite() && 0.0 <= a && a < b && b <= l) {
                return Err(Error::InvalidInput(format!(
                    "control bounds ({a}, {b}) on axis {k} must satisfy 0 <= a < b <= {l}"
                )));
            }
        }
        Ok(Self { bounds })
    }

    /// ω = Ω.
    pub fn full(domain: &DomainSpec) -> Self {
        Self {
            bounds: domain.lengths.iter().map(|&l| (0.0, l)).collect(),
        }
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|(a, b)| b - a).product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenMode {
    pub multi_index: Vec<u32>,
    pub eigenvalue: f64,
    pub rank: usize,
}

/// The `M` lowest Dirichlet eigenpairs, sorted by eigenvalue and then by
/// multi-index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeBasis {
    pub domain: DomainSpec,
    pub modes: Vec<EigenMode>,
}

fn eigenvalue_of(index: &[u32], lengths: &[f64]) -> f64 {
    index
        .iter()
        .zip(lengths)
        .map(|(&n, &l)| {
            let k = n as f64 * (PI / l);
            k * k
        })
        .sum()
}

fn collect_indices(lengths: &[f64], cutoff: f64, prefix: &mut Vec<u32>, partial: f64, out: &mut Vec<(f64, Vec<u32>)>) {
    let axis = prefix.len();
    if axis == lengths.len() {
        out.push((partial, prefix.clone()));
        return;
    }
    let mut n = 1u32;
    loop {
        let k = n as f64 * (PI / lengths[axis]);
        // every remaining axis contributes at least its n = 1 term
        let rest: f64 = lengths[axis + 1..].iter().map(|l| (PI / l).powi(2)).sum();
        let value = partial + k * k;
        if value + rest > cutoff {
            break;
        }
        prefix.push(n);
        collect_indices(lengths, cutoff, prefix, value, out);
        prefix.pop();
        n += 1;
    }
}

/// Returns the `m` lowest Dirichlet eigenpairs of `domain`.
pub fn enumerate_modes(domain: &DomainSpec, m: usize) -> Result<ModeBasis> {
    if m == 0 {
        return Err(Error::InvalidInput("need at least one mode (M >= 1)".into()));
    }
    let lengths = &domain.lengths;
    let mut candidates: Vec<(f64, Vec<u32>)> = if domain.dim() == 1 {
        (1..=m as u32)
            .map(|n| (eigenvalue_of(&[n], lengths), vec![n]))
            .collect()
    } else {
        let ground = eigenvalue_of(&vec![1; domain.dim()], lengths);
        let mut cutoff = ground * 2.0;
        loop {
            let mut out = Vec::new();
            collect_indices(lengths, cutoff, &mut Vec::new(), 0.0, &mut out);
            if out.len() >= m {
                break out;
            }
            cutoff *= 1.5;
        }
    };
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    // Values that agree to rounding are ties; order each run lexicographically.
    let mut start = 0;
    while start < candidates.len() {
        let base = candidates[start].0;
        let mut end = start + 1;
        while end < candidates.len() && (candidates[end].0 - base).abs() <= 1e-12 * base {
            end += 1;
        }
        candidates[start..end].sort_by(|a, b| a.1.cmp(&b.1));
        start = end;
    }
    let modes = candidates
        .into_iter()
        .take(m)
        .enumerate()
        .map(|(rank, (eigenvalue, multi_index))| EigenMode {
            multi_index,
            eigenvalue,
            rank,
        })
        .collect();
    Ok(ModeBasis {
        domain: domain.clone(),
        modes,
    })
}

/// Volume of the unit ball in ℝ^d.
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * PI / d as f64 * unit_ball_volume(d - 2),
    }
}

impl ModeBasis {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.eigenvalue).collect()
    }

    /// Largest resolved eigenvalue τ_M.
    pub fn tau_max(&self) -> f64 {
        self.modes.last().map_or(0.0, |m| m.eigenvalue)
    }

    /// N(λ): number of eigenvalues not exceeding λ.
    pub fn count_modes(&self, lambda: f64) -> Result<usize> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidInput(format!("λ = {lambda} must be positive")));
        }
        let tau_max = self.tau_max();
        if lambda >= tau_max {
            return Err(Error::TruncationTooSmall { lambda, tau_max });
        }
        Ok(self.modes.partition_point(|m| m.eigenvalue <= lambda))
    }

    /// N(λ) divided by the Weyl asymptotic (2π)^{-d} ω_d vol(Ω) λ^{d/2}.
    pub fn weyl_check(&self, lambda: f64) -> Result<f64> {
        let count = self.count_modes(lambda)?;
        let d = self.domain.dim();
        let prefactor = unit_ball_volume(d) * self.domain.volume() / (2.0 * PI).powi(d as i32);
        let weyl = prefactor * lambda.sqrt().powi(d as i32);
        Ok(count as f64 / weyl)
    }

    /// Squared H¹₀ seminorm Σ τ_i y_i².
    pub fn h1_seminorm_sq(&self, coeffs: &[f64]) -> f64 {
        self.modes.iter().zip(coeffs).map(|(m, y)| m.eigenvalue * y * y).sum()
    }
}

/// `(2/L) ∫_a^b sin(pπx/L) sin(qπx/L) dx`, exact on the full axis.
pub(crate) fn axis_overlap(p: u32, q: u32, length: f64, a: f64, b: f64) -> f64 {
    if a == 0.0 && b == length {
        return if p == q { 1.0 } else { 0.0 };
    }
    // sin(kb) - sin(ka) = 2 cos(k(a+b)/2) sin(k(b-a)/2)
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let sin_diff = |k: f64| 2.0 * (k * mid).cos() * (k * half).sin();
    let w = PI / length;
    let sum = (p + q) as f64 * w;
    let value = if p == q {
        (b - a) / 2.0 - sin_diff(sum) / (2.0 * sum)
    } else {
        let diff = (p as f64 - q as f64) * w;
        sin_diff(diff) / (2.0 * diff) - sin_diff(sum) / (2.0 * sum)
    };
    2.0 / length * value
}

/// The `M × N` observation matrix `G_ij = (e_i, e_j)_{L²(ω)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
    pub(crate) lengths: Vec<f64>,
    pub(crate) region: ControlRegion,
    pub(crate) indices: Vec<Vec<u32>>,
}

impl GramMatrix {
    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn region(&self) -> &ControlRegion {
        &self.region
    }

    /// The symmetric `n × n` leading block J_n.
    pub fn jn(&self, n: usize) -> DMatrix<f64> {
        self.entries.view((0, 0), (n, n)).into_owned()
    }

    /// Same Gram data restricted to its first `n` columns.
    pub fn leading(&self, n: usize) -> Result<GramMatrix> {
        if n == 0 || n > self.cols() {
            return Err(Error::InvalidInput(format!(
                "leading block size {n} outside 1..={}",
                self.cols()
            )));
        }
        Ok(GramMatrix {
            entries: self.entries.columns(0, n).into_owned(),
            lengths: self.lengths.clone(),
            region: self.region.clone(),
            indices: self.indices.clone(),
        })
    }

    /// True when ω is the whole domain, so J_N is exactly the identity.
    pub fn is_full_region(&self) -> bool {
        self.region
            .bounds
            .iter()
            .zip(&self.lengths)
            .all(|(&(a, b), &l)| a == 0.0 && b == l)
    }

    /// All eigenvalues of J_N from the f64 symmetric eigensolver, ascending.
    pub fn jn_eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.jn(self.cols()))
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Spectral norm of the full `M × N` block.
    pub fn norm2(&self) -> f64 {
        self.entries.clone().svd(false, false).singular_values.max()
    }

    /// Smallest eigenvalue of J_N (N = number of columns).
    ///
    /// The f64 eigensolver is used while it resolves the value; smaller values
    /// are recomputed from the closed form in multiprecision arithmetic, with
    /// the working precision doubled until the result clears the rounding floor.
    pub fn min_eigenvalue_jn(&self) -> Result<f64> {
        let n = self.cols();
        if self.is_full_region() {
            return Ok(1.0);
        }
        let quick = self.jn_eigenvalues()[0];
        let value = if quick >= 1e-6 {
            quick
        } else {
            mp::min_eigenvalue_gram(&self.lengths, &self.region.bounds, &self.indices[..n])
                .ok_or(Error::DegenerateObservation { n, value: 0.0 })?
        };
        if !(value > MIN_EIGENVALUE_FLOOR) {
            return Err(Error::DegenerateObservation { n, value });
        }
        Ok(value)
    }
}

/// Assembles `G_ij = (e_i, e_j)_{L²(ω)}` for `i < M`, `j < n`.
pub fn gram_matrix(basis: &ModeBasis, region: &ControlRegion, n: usize) -> Result<GramMatrix> {
    let m = basis.len();
    if n == 0 || n > m {
        return Err(Error::InvalidInput(format!("need 1 <= N <= M = {m}, got N = {n}")));
    }
    let lengths = &basis.domain.lengths;
    if region.bounds.len() != lengths.len() {
        return Err(Error::InvalidInput(
            "control region dimension does not match the domain".into(),
        ));
    }
    // per-axis overlap tables indexed by 1-based mode numbers
    let tables: Vec<Vec<Vec<f64>>> = (0..lengths.len())
        .map(|k| {
            let top = basis.modes.iter().map(|md| md.multi_index[k]).max().unwrap_or(1) as usize;
            let (a, b) = region.bounds[k];
            (0..=top)
                .map(|p| {
                    (0..=top)
                        .map(|q| {
                            if p == 0 || q == 0 {
                                0.0
                            } else {
                                axis_overlap(p as u32, q as u32, lengths[k], a, b)
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let entries = DMatrix::from_fn(m, n, |i, j| {
        let (mi, mj) = (&basis.modes[i].multi_index, &basis.modes[j].multi_index);
        tables
            .iter()
            .enumerate()
            .map(|(k, t)| t[mi[k] as usize][mj[k] as usize])
            .product()
    });
    Ok(GramMatrix {
        entries,
        lengths: lengths.clone(),
        region: region.clone(),
        indices: basis.modes.iter().map(|md| md.multi_index.clone()).collect(),
    })
}

/// Empirical fit of `log λ_min(J_{N(λ)}) ≈ logc − C √λ`, plus the per-mode
/// tunneling fit `log ‖e_n‖²_{L²(ω)} ≈ logc₀ − C₀ √τ_n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralFit {
    pub lambda_grid: Vec<f64>,
    pub mode_counts: Vec<usize>,
    pub min_eigs: Vec<f64>,
    /// Grid points dropped because λ_min(J_N) fell below the floor.
    pub rejected: Vec<f64>,
    pub fitted_c: f64,
    pub fitted_logc: f64,
    pub r_squared: f64,
    pub tunneling: Option<FitResult>,
}

impl SpectralFit {
    /// C₁ as consumed downstream: `max(1, margin · fitted slope)`.
    pub fn operational_c1(&self) -> f64 {
        (C1_MARGIN * self.fitted_c).max(1.0)
    }
}

pub fn fit_spectral_constant(basis: &ModeBasis, region: &ControlRegion, lambda_grid: &[f64]) -> Result<SpectralFit> {
    if lambda_grid.len() < 2 {
        return Err(Error::InsufficientFitPoints(lambda_grid.len()));
    }
    if lambda_grid
        .windows(2)
        .any(|w| w[0].partial_cmp(&w[1]) != Some(Ordering::Less))
    {
        return Err(Error::InvalidInput("λ grid must be strictly ascending".into()));
    }
    let counts = lambda_grid
        .iter()
        .map(|&l| basis.count_modes(l))
        .collect::<Result<Vec<_>>>()?;
    if let Some(pos) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidInput(format!(
            "λ = {} lies below τ_1, so J_N is empty",
            lambda_grid[pos]
        )));
    }
    let n_max = *counts.last().unwrap();
    let gram = gram_matrix(basis, region, n_max)?;

    let mut grid = Vec::new();
    let mut mode_counts = Vec::new();
    let mut min_eigs = Vec::new();
    let mut rejected = Vec::new();
    for (&lambda, &n) in lambda_grid.iter().zip(&counts) {
        match gram.leading(n)?.min_eigenvalue_jn() {
            Ok(v) => {
                grid.push(lambda);
                mode_counts.push(n);
                min_eigs.push(v);
            }
            Err(Error::DegenerateObservation { .. }) => rejected.push(lambda),
            Err(e) => return Err(e),
        }
    }
    if grid.len() < 2 {
        return Err(Error::InsufficientFitPoints(grid.len()));
    }
    let xs: Vec<f64> = grid.iter().map(|l| -l.sqrt()).collect();
    let ys: Vec<f64> = min_eigs.iter().map(|v| v.ln()).collect();
    let fit = fit_loglinear(&xs, &ys)?;

    let tunneling = if n_max >= 2 {
        let xs: Vec<f64> = basis.modes[..n_max].iter().map(|m| -m.eigenvalue.sqrt()).collect();
        let ys: Vec<f64> = (0..n_max).map(|i| gram.entries[(i, i)].ln()).collect();
        fit_loglinear(&xs, &ys).ok()
    } else {
        None
    };

    Ok(SpectralFit {
        lambda_grid: grid,
        mode_counts,
        min_eigs,
        rejected,
        fitted_c: fit.slope,
        fitted_logc: fit.intercept,
        r_squared: fit.r_squared,
        tunneling,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pi_interval(m: usize) -> ModeBasis {
        enumerate_modes(&DomainSpec::interval(PI).unwrap(), m).unwrap()
    }

    #[test]
    fn interval_eigenvalues() {
        assert_eq!(pi_interval(3).eigenvalues(), vec![1.0, 4.0, 9.0]);
        let unit = enumerate_modes(&DomainSpec::interval(1.0).unwrap(), 2).unwrap();
        assert_relative_eq!(unit.modes[0].eigenvalue, PI * PI, max_relative = 1e-15);
        assert_relative_eq!(unit.modes[1].eigenvalue, 4.0 * PI * PI, max_relative = 1e-15);
    }

    #[test]
    fn box_ties_are_lexicographic() {
        let basis = enumerate_modes(&DomainSpec::box_domain(vec![PI, PI]).unwrap(), 4).unwrap();
        assert_eq!(basis.eigenvalues(), vec![2.0, 5.0, 5.0, 8.0]);
        assert_eq!(basis.modes[1].multi_index, vec![1, 2]);
        assert_eq!(basis.modes[2].multi_index, vec![2, 1]);
        assert_eq!(basis.modes.iter().map(|m| m.rank).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn box_enumeration_matches_brute_force() {
        let lengths = vec![1.0, 1.7, 2.3];
        let basis = enumerate_modes(&DomainSpec::box_domain(lengths.clone()).unwrap(), 60).unwrap();
        let mut brute = Vec::new();
        for a in 1..20u32 {
            for b in 1..20u32 {
                for c in 1..20u32 {
                    brute.push(eigenvalue_of(&[a, b, c], &lengths));
                }
            }
        }
        brute.sort_by(f64::total_cmp);
        for (mode, expect) in basis.modes.iter().zip(&brute) {
            assert_relative_eq!(mode.eigenvalue, *expect, max_relative = 1e-14);
        }
    }

    #[test]
    fn invalid_domains() {
        assert!(DomainSpec::interval(-1.0).is_err());
        assert!(DomainSpec::box_domain(vec![]).is_err());
        assert!(DomainSpec::new(DomainKind::Interval, vec![1.0, 2.0]).is_err());
        let d = DomainSpec::interval(PI).unwrap();
        assert!(ControlRegion::new(vec![(2.0, 1.0)], &d).is_err());
        assert!(ControlRegion::new(vec![(0.0, 4.0)], &d).is_err());
        assert!(enumerate_modes(&d, 0).is_err());
    }

    #[test]
    fn counting() {
        let basis = pi_interval(10);
        assert_eq!(basis.count_modes(4.0).unwrap(), 2);
        assert_eq!(basis.count_modes(3.9).unwrap(), 1);
        assert_eq!(basis.count_modes(0.5).unwrap(), 0);
        assert!(matches!(
            basis.count_modes(100.0),
            Err(Error::TruncationTooSmall { .. })
        ));
    }

    #[test]
    fn weyl_interval_is_exact() {
        let basis = pi_interval(60);
        assert_eq!(basis.weyl_check(2500.0).unwrap(), 1.0);
        assert_eq!(basis.weyl_check(100.0).unwrap(), 1.0);
    }

    #[test]
    fn weyl_square() {
        // Direct lattice count: #{(a,b) : a² + b² <= 1000} against π·1000/4.
        let basis = enumerate_modes(&DomainSpec::box_domain(vec![PI, PI]).unwrap(), 900).unwrap();
        let mut count = 0;
        for a in 1..40 {
            for b in 1..40 {
                if a * a + b * b <= 1000 {
                    count += 1;
                }
            }
        }
        assert_eq!(basis.count_modes(1000.0).unwrap(), count);
        let ratio = basis.weyl_check(1000.0).unwrap();
        assert_relative_eq!(ratio, count as f64 / (PI * 1000.0 / 4.0), max_relative = 1e-12);
        assert!((0.9..=1.1).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn unit_ball_volumes() {
        assert_relative_eq!(unit_ball_volume(2), PI);
        assert_relative_eq!(unit_ball_volume(3), 4.0 * PI / 3.0);
    }

    #[test]
    fn gram_closed_form_values() {
        let basis = pi_interval(4);
        let d = &basis.domain;
        let g = gram_matrix(&basis, &ControlRegion::new(vec![(0.0, PI / 2.0)], d).unwrap(), 2).unwrap();
        assert_relative_eq!(g.entries[(0, 0)], 0.5, max_relative = 1e-14);
        assert_relative_eq!(g.entries[(0, 1)], 4.0 / (3.0 * PI), max_relative = 1e-14);
        assert_eq!(g.entries[(0, 1)], g.entries[(1, 0)]);
    }

    #[test]
    fn full_region_is_identity() {
        let basis = enumerate_modes(&DomainSpec::box_domain(vec![1.0, 2.0]).unwrap(), 12).unwrap();
        let g = gram_matrix(&basis, &ControlRegion::full(&basis.domain), 12).unwrap();
        assert_eq!(g.entries, DMatrix::identity(12, 12));
        assert_eq!(g.min_eigenvalue_jn().unwrap(), 1.0);
    }

    #[test]
    fn min_eigenvalue_single_mode() {
        let basis = pi_interval(16);
        let region = ControlRegion::new(vec![(1.0, 2.0)], &basis.domain).unwrap();
        let one = gram_matrix(&basis, &region, 1).unwrap();
        // (2/π) ∫_1^2 sin²x dx = (2/π)(1/2 − (sin 4 − sin 2)/4)
        let expect = 2.0 / PI * (0.5 - ((4.0f64).sin() - (2.0f64).sin()) / 4.0);
        assert_relative_eq!(one.min_eigenvalue_jn().unwrap(), expect, max_relative = 1e-14);
        let ten = gram_matrix(&basis, &region, 10).unwrap();
        let v10 = ten.min_eigenvalue_jn().unwrap();
        assert!(v10 > 0.0 && v10 < expect);
    }

    #[test]
    fn fit_requires_two_points() {
        let basis = pi_interval(64);
        let region = ControlRegion::new(vec![(1.0, 2.0)], &basis.domain).unwrap();
        assert_eq!(
            fit_spectral_constant(&basis, &region, &[25.0]),
            Err(Error::InsufficientFitPoints(1))
        );
    }

    #[test]
    fn full_region_fit_is_flat() {
        let basis = pi_interval(64);
        let fit = fit_spectral_constant(&basis, &ControlRegion::full(&basis.domain), &[25.0, 100.0, 400.0]).unwrap();
        assert!(fit.min_eigs.iter().all(|&v| v == 1.0));
        assert_eq!(fit.fitted_c, 0.0);
        assert_eq!(fit.operational_c1(), 1.0);
    }
}
