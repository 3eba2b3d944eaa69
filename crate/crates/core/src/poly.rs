//! Real monic polynomial helpers: expansion from roots, companion-matrix
//! eigenvalues, and Hurwitz tests.
//!
//! Coefficients are stored ascending: `[c0, c1, ..., c_{n-1}]` stands for
//! `s^n + c_{n-1} s^{n-1} + ... + c1 s + c0`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Expands `prod_k (s - r_k)` into real monic coefficients (ascending).
///
/// The root set must be closed under conjugation; complex roots are matched
/// to their conjugates within a relative tolerance of `1e-9`.
pub fn real_coeffs_from_roots(roots: &[Complex64]) -> Result<Vec<f64>> {
    check_conjugate_closed(roots)?;

    // Complex expansion, then drop the (tiny) imaginary residue.
    let mut acc: Vec<Complex64> = vec![Complex64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); acc.len() + 1];
        for (k, c) in acc.iter().enumerate() {
            next[k + 1] += c;
            next[k] -= c * r;
        }
        acc = next;
    }

    let scale = roots.iter().map(|r| r.norm()).fold(1.0, f64::max);
    let tol = 1e-9 * scale.powi(roots.len() as i32).max(1.0);
    let mut coeffs = Vec::with_capacity(roots.len());
    for c in acc.iter().take(acc.len() - 1) {
        if c.im.abs() > tol {
            return Err(Error::Invalid(format!(
                "root product has imaginary residue {:.3e}; roots not conjugate-closed",
                c.im
            )));
        }
        coeffs.push(c.re);
    }
    Ok(coeffs)
}

fn check_conjugate_closed(roots: &[Complex64]) -> Result<()> {
    let mut used = vec![false; roots.len()];
    for (i, r) in roots.iter().enumerate() {
        if used[i] || r.im.abs() <= 1e-12 * (1.0 + r.norm()) {
            continue;
        }
        let conj = r.conj();
        let partner = roots.iter().enumerate().position(|(j, s)| {
            !used[j] && j != i && (s - conj).norm() <= 1e-9 * (1.0 + r.norm())
        });
        match partner {
            Some(j) => {
                used[i] = true;
                used[j] = true;
            }
            None => {
                return Err(Error::Invalid(format!(
                    "complex root {r} has no conjugate partner"
                )))
            }
        }
    }
    Ok(())
}

/// Roots of the monic polynomial with the given ascending coefficients,
/// computed as companion-matrix eigenvalues.
pub fn companion_roots(coeffs: &[f64]) -> Vec<Complex64> {
    let n = coeffs.len();
    if n == 0 {
        return Vec::new();
    }
    let mut comp = DMatrix::<f64>::zeros(n, n);
    for i in 0..n - 1 {
        comp[(i, i + 1)] = 1.0;
    }
    for (j, c) in coeffs.iter().enumerate() {
        comp[(n - 1, j)] = -c;
    }
    comp.complex_eigenvalues().iter().copied().collect()
}

/// True when every root satisfies `Re < -margin`. Degree zero is vacuously
/// Hurwitz.
pub fn is_hurwitz(coeffs: &[f64], margin: f64) -> bool {
    companion_roots(coeffs).iter().all(|r| r.re < -margin)
}

/// Evaluates the monic polynomial at a complex point.
pub fn eval_monic(coeffs: &[f64], s: Complex64) -> Complex64 {
    let mut acc = Complex64::new(1.0, 0.0);
    for c in coeffs.iter().rev() {
        acc = acc * s + c;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn expands_real_roots() {
        // (s+1)(s+2) = s^2 + 3s + 2
        let coeffs =
            real_coeffs_from_roots(&[Complex64::new(-1.0, 0.0), Complex64::new(-2.0, 0.0)])
                .unwrap();
        assert_relative_eq!(coeffs[0], 2.0, max_relative = 1e-12);
        assert_relative_eq!(coeffs[1], 3.0, max_relative = 1e-12);
    }

    #[test]
    fn expands_conjugate_pair() {
        // (s+1-2i)(s+1+2i) = s^2 + 2s + 5
        let coeffs =
            real_coeffs_from_roots(&[Complex64::new(-1.0, 2.0), Complex64::new(-1.0, -2.0)])
                .unwrap();
        assert_relative_eq!(coeffs[0], 5.0, max_relative = 1e-12);
        assert_relative_eq!(coeffs[1], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn rejects_unpaired_complex_root() {
        assert!(real_coeffs_from_roots(&[Complex64::new(-1.0, 2.0)]).is_err());
    }

    #[test]
    fn companion_recovers_roots() {
        // s^2 + 8s + 15 = (s+3)(s+5)
        let mut roots = companion_roots(&[15.0, 8.0]);
        roots.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap());
        assert_relative_eq!(roots[0].re, -5.0, epsilon = 1e-10);
        assert_relative_eq!(roots[1].re, -3.0, epsilon = 1e-10);
        assert!(roots[0].im.abs() < 1e-10 && roots[1].im.abs() < 1e-10);
    }

    #[test]
    fn hurwitz_tests() {
        assert!(is_hurwitz(&[15.0, 8.0], 0.0));
        assert!(!is_hurwitz(&[-1.0, 2.0], 0.0));
        // s^3 + 3s^2 + 2s + 10: positive coefficients but 3*2 < 10, not Hurwitz.
        assert!(!is_hurwitz(&[10.0, 2.0, 3.0], 0.0));
        // degree 0
        assert!(is_hurwitz(&[], 0.0));
    }
}
