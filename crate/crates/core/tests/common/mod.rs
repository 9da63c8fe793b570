#![allow(dead_code)]

use std::f64::consts::PI;

use heatstab::spectral::{ControlRegion, DomainSpec, ModeBasis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gauss–Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre rule on [a, b]: `panels` panels of `order` nodes.
pub fn composite_rule(a: f64, b: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for (xi, wi) in x.iter().zip(&w) {
            out.push((lo + 0.5 * h * (xi + 1.0), 0.5 * h * wi));
        }
    }
    out
}

/// `e_i(x)` for a product-of-sines mode.
pub fn eigenfunction(index: &[u32], lengths: &[f64], x: &[f64]) -> f64 {
    index
        .iter()
        .zip(lengths)
        .zip(x)
        .map(|((&n, &l), &xk)| (2.0 / l).sqrt() * (n as f64 * PI * xk / l).sin())
        .product()
}

/// `‖Σ a_i e_i‖²_{L²(ω)}` by tensor-product quadrature.
pub fn quadrature_norm_sq(basis: &ModeBasis, region: &ControlRegion, a: &[f64]) -> f64 {
    let lengths = &basis.domain.lengths;
    let rules: Vec<Vec<(f64, f64)>> = region
        .bounds
        .iter()
        .map(|&(lo, hi)| composite_rule(lo, hi, 16, 24))
        .collect();
    let mut total = 0.0;
    let mut idx = vec![0usize; rules.len()];
    loop {
        let x: Vec<f64> = idx.iter().zip(&rules).map(|(&i, r)| r[i].0).collect();
        let w: f64 = idx.iter().zip(&rules).map(|(&i, r)| r[i].1).product();
        let v: f64 = a
            .iter()
            .zip(&basis.modes)
            .map(|(ai, m)| ai * eigenfunction(&m.multi_index, lengths, &x))
            .sum();
        total += w * v * v;
        let mut k = 0;
        loop {
            if k == idx.len() {
                return total;
            }
            idx[k] += 1;
            if idx[k] < rules[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn pi_interval(m: usize) -> ModeBasis {
    heatstab::spectral::enumerate_modes(&DomainSpec::interval(PI).unwrap(), m).unwrap()
}

/// The narrow control region used throughout: ω = (1, 2) in (0, π).
pub fn desk_region(basis: &ModeBasis) -> ControlRegion {
    ControlRegion::new(vec![(1.0, 2.0)], &basis.domain).unwrap()
}

/// A control region covering all of (0, π) but two thin strips.
pub fn wide_region(basis: &ModeBasis) -> ControlRegion {
    ControlRegion::new(vec![(0.02, PI - 0.02)], &basis.domain).unwrap()
}
