//! Multiprecision smallest eigenvalue of the observation block.
//!
//! Once `λ_min(J_N)` drops below double-precision resolution of `‖J_N‖` the f64
//! eigensolver returns rounding noise. Here J_N is re-assembled from the closed
//! form in MPFR arithmetic and diagonalized with cyclic Jacobi rotations, with
//! the precision doubled until the answer clears the rounding floor.

use rug::float::Constant;
use rug::ops::Pow;
use rug::Float;

const START_BITS: u32 = 128;
const MAX_BITS: u32 = 8192;
/// Required headroom above the rounding floor, in bits.
const GUARD_BITS: i32 = 64;
const MAX_SWEEPS: usize = 80;

fn axis_overlap(p: u32, q: u32, length: f64, a: f64, b: f64, pi: &Float, prec: u32) -> Float {
    if a == 0.0 && b == length {
        return Float::with_val(prec, if p == q { 1 } else { 0 });
    }
    let len = Float::with_val(prec, length);
    let mid = Float::with_val(prec, a + b) / 2u32;
    let half = Float::with_val(prec, Float::with_val(prec, b) - a) / 2u32;
    let w = Float::with_val(prec, pi / &len);
    // sin(kb) - sin(ka) = 2 cos(k·mid) sin(k·half)
    let sin_diff = |k: &Float| -> Float {
        let c = Float::with_val(prec, k * &mid).cos();
        let s = Float::with_val(prec, k * &half).sin();
        c * s * 2u32
    };
    let sum = Float::with_val(prec, &w * (p + q));
    let sum_term = sin_diff(&sum) / (Float::with_val(prec, &sum * 2u32));
    let value = if p == q {
        half - sum_term
    } else {
        let diff = Float::with_val(prec, &w * (p as i64 - q as i64));
        sin_diff(&diff) / Float::with_val(prec, &diff * 2u32) - sum_term
    };
    value * 2u32 / len
}

fn assemble(lengths: &[f64], bounds: &[(f64, f64)], indices: &[Vec<u32>], prec: u32) -> Vec<Vec<Float>> {
    let pi = Float::with_val(prec, Constant::Pi);
    let n = indices.len();
    let mut a = vec![vec![Float::new(prec); n]; n];
    for i in 0..n {
        for j in i..n {
            let mut entry = Float::with_val(prec, 1);
            for (k, &length) in lengths.iter().enumerate() {
                let (lo, hi) = bounds[k];
                entry *= axis_overlap(indices[i][k], indices[j][k], length, lo, hi, &pi, prec);
            }
            a[j][i] = entry.clone();
            a[i][j] = entry;
        }
    }
    a
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi; `a` is destroyed.
#[allow(clippy::needless_range_loop)]
pub(crate) fn jacobi_eigenvalues(mut a: Vec<Vec<Float>>, prec: u32) -> Vec<Float> {
    let n = a.len();
    let tol = Float::with_val(prec, 2u32).pow(-(prec as i32));
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].is_zero() {
                    continue;
                }
                let scale = Float::with_val(prec, &a[p][p] * &a[q][q]).abs().sqrt() * &tol;
                if Float::with_val(prec, a[p][q].abs_ref()) <= scale {
                    continue;
                }
                rotated = true;
                let apq = a[p][q].clone();
                let theta = Float::with_val(prec, &a[q][q] - &a[p][p]) / Float::with_val(prec, &apq * 2u32);
                let root = (Float::with_val(prec, theta.square_ref()) + 1u32).sqrt();
                let mut t = (Float::with_val(prec, theta.abs_ref()) + &root).recip();
                if theta.is_sign_negative() {
                    t = -t;
                }
                let c = (Float::with_val(prec, t.square_ref()) + 1u32).sqrt().recip();
                let s = Float::with_val(prec, &t * &c);
                let shift = Float::with_val(prec, &t * &apq);
                a[p][p] -= &shift;
                a[q][q] += &shift;
                a[p][q] = Float::new(prec);
                a[q][p] = Float::new(prec);
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[r][p].clone();
                    let arq = a[r][q].clone();
                    let new_rp = Float::with_val(prec, &c * &arp) - Float::with_val(prec, &s * &arq);
                    let new_rq = Float::with_val(prec, &c * &arq) + Float::with_val(prec, &s * &arp);
                    a[p][r] = new_rp.clone();
                    a[r][p] = new_rp;
                    a[q][r] = new_rq.clone();
                    a[r][q] = new_rq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (0..n).map(|i| a[i][i].clone()).collect()
}

/// Smallest eigenvalue of J_N for the given modes, or `None` when it stays
/// below the rounding floor up to the maximum working precision.
pub(crate) fn min_eigenvalue_gram(lengths: &[f64], bounds: &[(f64, f64)], indices: &[Vec<u32>]) -> Option<f64> {
    let n = indices.len();
    let mut prec = START_BITS;
    while prec <= MAX_BITS {
        let a = assemble(lengths, bounds, indices, prec);
        // Frobenius norm bounds the spectral norm from above.
        let mut frob = Float::new(prec);
        for row in &a {
            for x in row {
                frob += Float::with_val(prec, x.square_ref());
            }
        }
        let norm = frob.sqrt();
        let eigs = jacobi_eigenvalues(a, prec);
        let min = eigs.into_iter().min_by(|x, y| x.partial_cmp(y).unwrap()).unwrap();
        let floor = Float::with_val(prec, 2u32).pow(-((prec as i32) - GUARD_BITS)) * norm * n as u32;
        if min > floor {
            return Some(min.to_f64());
        }
        prec *= 2;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]], prec: u32) -> Vec<Vec<Float>> {
        rows.iter()
            .map(|r| r.iter().map(|&x| Float::with_val(prec, x)).collect())
            .collect()
    }

    #[test]
    fn jacobi_two_by_two() {
        let mut ev: Vec<f64> = jacobi_eigenvalues(mat(&[&[2.0, 1.0], &[1.0, 2.0]], 128), 128)
            .into_iter()
            .map(|x| x.to_f64())
            .collect();
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] - 1.0).abs() < 1e-30 && (ev[1] - 3.0).abs() < 1e-30);
    }

    #[test]
    fn jacobi_matches_f64_on_hilbert() {
        let n = 6;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| 1.0 / (i + j + 1) as f64).collect())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let ev = jacobi_eigenvalues(mat(&refs, 256), 256);
        let min = ev.iter().map(|x| x.to_f64()).fold(f64::INFINITY, f64::min);
        // smallest eigenvalue of the 6×6 Hilbert matrix
        assert!((min / 1.082_799_484_565_51e-7 - 1.0).abs() < 1e-6, "{min}");
    }

    #[test]
    fn full_axis_gram_is_identity() {
        let a = assemble(&[1.0], &[(0.0, 1.0)], &[vec![1], vec![2], vec![3]], 128);
        for (i, row) in a.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                assert_eq!(x.to_f64(), if i == j { 1.0 } else { 0.0 });
            }
        }
    }
}
