//! Polynomial roots as eigenvalues of the (balanced) companion matrix,
//! computed with a single-shift complex QR iteration on Hessenberg form.

use num_complex::Complex64;

use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// Roots of `coeffs[0] + coeffs[1] z + ... + coeffs[d] z^d`.
///
/// Leading coefficients that are zero relative to the largest one are
/// dropped (the degree shrinks); trailing zeros contribute roots at 0.
pub fn poly_roots(coeffs: &[Complex64]) -> Result<Vec<Complex64>> {
    let scale = coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::domain("polynomial has no finite nonzero coefficients"));
    }
    let mut hi = coeffs.len() - 1;
    while coeffs[hi].norm() <= 1e-14 * scale {
        hi -= 1;
    }
    let mut lo = 0;
    while coeffs[lo] == ZERO {
        lo += 1;
    }
    let mut roots = vec![ZERO; lo];
    let p = &coeffs[lo..=hi];
    let deg = p.len() - 1;
    if deg == 0 {
        return Ok(roots);
    }
    let lead = p[deg];
    // Upper Hessenberg companion: first row -p[deg-1..0]/lead, ones below.
    let mut h = vec![ZERO; deg * deg];
    for j in 0..deg {
        h[j] = -p[deg - 1 - j] / lead;
    }
    for i in 1..deg {
        h[i * deg + (i - 1)] = ONE;
    }
    balance(&mut h, deg);
    roots.extend(hessenberg_eigenvalues(&mut h, deg)?);
    Ok(roots)
}

/// Parlett-Reinsch balancing with power-of-two scalings (row-major `n x n`).
fn balance(a: &mut [Complex64], n: usize) {
    const RADIX: f64 = 2.0;
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[j * n + i].l1_norm();
                    r += a[i * n + j].l1_norm();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / RADIX;
            while c < g {
                f *= RADIX;
                c *= RADIX * RADIX;
            }
            g = r * RADIX;
            while c > g {
                f /= RADIX;
                c /= RADIX * RADIX;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                let inv = 1.0 / f;
                for j in 0..n {
                    a[i * n + j] *= inv;
                }
                for j in 0..n {
                    a[j * n + i] *= f;
                }
            }
        }
    }
}

/// Givens rotation `G = [[c, s], [-conj(s), c]]` with `G [x; y] = [r; 0]`.
fn givens(x: Complex64, y: Complex64) -> (f64, Complex64) {
    let ax = x.norm();
    let ay = y.norm();
    if ay == 0.0 {
        return (1.0, ZERO);
    }
    if ax == 0.0 {
        return (0.0, y.conj() / ay);
    }
    let r = ax.hypot(ay);
    (ax / r, (x / ax) * y.conj() / r)
}

/// Eigenvalues of an upper Hessenberg matrix (row-major, destroyed).
fn hessenberg_eigenvalues(h: &mut [Complex64], n: usize) -> Result<Vec<Complex64>> {
    let idx = |i: usize, j: usize| i * n + j;
    let mut eig = vec![ZERO; n];
    let mut hi = n - 1;
    let mut iter = 0usize;
    let mut total = 0usize;
    let budget = 60 * n.max(1);
    let mut rots: Vec<(f64, Complex64)> = Vec::with_capacity(n);

    loop {
        if hi == 0 {
            eig[0] = h[idx(0, 0)];
            break;
        }
        // Look for a negligible subdiagonal entry in the active block.
        let mut l = hi;
        while l > 0 {
            let s = h[idx(l - 1, l - 1)].l1_norm() + h[idx(l, l)].l1_norm();
            if h[idx(l, l - 1)].l1_norm() <= f64::EPSILON * s {
                h[idx(l, l - 1)] = ZERO;
                break;
            }
            l -= 1;
        }
        if l == hi {
            eig[hi] = h[idx(hi, hi)];
            hi -= 1;
            iter = 0;
            continue;
        }
        iter += 1;
        total += 1;
        if total > budget {
            return Err(Error::Numerical("complex QR iteration did not converge".into()));
        }

        let shift = if iter % 11 == 0 {
            // Exceptional shift to break cycles.
            h[idx(hi, hi)] + Complex64::new(h[idx(hi, hi - 1)].l1_norm(), 0.0) * 0.75
        } else {
            wilkinson(
                h[idx(hi - 1, hi - 1)],
                h[idx(hi - 1, hi)],
                h[idx(hi, hi - 1)],
                h[idx(hi, hi)],
            )
        };

        for i in l..=hi {
            h[idx(i, i)] -= shift;
        }
        rots.clear();
        for k in l..hi {
            let (c, s) = givens(h[idx(k, k)], h[idx(k + 1, k)]);
            rots.push((c, s));
            for j in k..=hi {
                let x = h[idx(k, j)];
                let y = h[idx(k + 1, j)];
                h[idx(k, j)] = x * c + s * y;
                h[idx(k + 1, j)] = -s.conj() * x + y * c;
            }
            h[idx(k + 1, k)] = ZERO;
        }
        for (off, &(c, s)) in rots.iter().enumerate() {
            let k = l + off;
            let top = (k + 2).min(hi);
            for i in l..=top {
                let x = h[idx(i, k)];
                let y = h[idx(i, k + 1)];
                h[idx(i, k)] = x * c + s.conj() * y;
                h[idx(i, k + 1)] = -s * x + y * c;
            }
        }
        for i in l..=hi {
            h[idx(i, i)] += shift;
        }
    }
    Ok(eig)
}

/// Eigenvalue of `[[a, b], [c, d]]` closest to `d`.
fn wilkinson(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> Complex64 {
    let half = (a - d) * 0.5;
    let disc = (half * half + b * c).sqrt();
    let m1 = (a + d) * 0.5 + disc;
    let m2 = (a + d) * 0.5 - disc;
    if (m1 - d).norm() < (m2 - d).norm() {
        m1
    } else {
        m2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng as _;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn expand(roots: &[Complex64]) -> Vec<Complex64> {
        let mut p = vec![ONE];
        for &r in roots {
            let mut q = vec![ZERO; p.len() + 1];
            for (i, &a) in p.iter().enumerate() {
                q[i + 1] += a;
                q[i] -= a * r;
            }
            p = q;
        }
        p
    }

    fn matched(found: &[Complex64], want: &[Complex64], tol: f64) -> bool {
        let mut used = vec![false; found.len()];
        want.iter().all(|w| {
            let best = found
                .iter()
                .enumerate()
                .filter(|(i, _)| !used[*i])
                .min_by(|a, b| (a.1 - w).norm().total_cmp(&(b.1 - w).norm()));
            match best {
                Some((i, f)) if (f - w).norm() < tol => {
                    used[i] = true;
                    true
                }
                _ => false,
            }
        })
    }

    #[test]
    fn quadratic() {
        // z^2 + 1
        let r = poly_roots(&[ONE, ZERO, ONE]).unwrap();
        assert!(matched(&r, &[c(0.0, 1.0), c(0.0, -1.0)], 1e-14));
    }

    #[test]
    fn trailing_and_leading_zeros() {
        // 0 + 0 z + 2 z^2 - 2 z^3 (+ 0 z^4)
        let r = poly_roots(&[ZERO, ZERO, c(2.0, 0.0), c(-2.0, 0.0), ZERO]).unwrap();
        assert_eq!(r.len(), 3);
        assert!(matched(&r, &[ZERO, ZERO, ONE], 1e-14));
        assert!(poly_roots(&[ZERO, ZERO]).is_err());
    }

    #[test]
    fn random_roots_recovered() {
        let mut rng = seed::rng(9);
        for deg in [3, 8, 18, 40] {
            let want: Vec<Complex64> = (0..deg)
                .map(|_| {
                    Complex64::from_polar(rng.random_range(0.3..1.5), rng.random_range(-3.1..3.1))
                })
                .collect();
            let r = poly_roots(&expand(&want)).unwrap();
            assert_eq!(r.len(), deg);
            assert!(matched(&r, &want, 1e-6), "deg {deg}");
        }
    }

    #[test]
    fn unit_circle_roots_of_high_degree() {
        // z^n - 1
        let n = 156;
        let mut p = vec![ZERO; n + 1];
        p[0] = -ONE;
        p[n] = ONE;
        let r = poly_roots(&p).unwrap();
        assert!(r.iter().all(|z| (z.norm() - 1.0).abs() < 1e-10));
        let want: Vec<Complex64> = (0..n)
            .map(|k| Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 / n as f64))
            .collect();
        assert!(matched(&r, &want, 1e-9));
    }
}
