//! Spatial covariance matrices and direct co-array augmentation.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::{difference_coarray, response_matrix, ArrayGeometry};
use crate::linalg::{symmetrize, CMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScmKind {
    Sample,
    Noiseless,
    Augmented,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scm {
    pub mat: CMatrix,
    pub kind: ScmKind,
}

impl Scm {
    pub fn size(&self) -> usize {
        self.mat.nrows()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            mat: &self.mat * Complex64::new(c, 0.0),
            kind: self.kind,
        }
    }
}

/// `(1/T) Y Y^H`.
pub fn sample_scm(y: &CMatrix) -> Result<Scm> {
    let t = y.ncols();
    if t == 0 {
        return Err(Error::domain("sample covariance needs at least one snapshot"));
    }
    let mut mat = y * y.adjoint() / Complex64::new(t as f64, 0.0);
    symmetrize(&mut mat);
    Ok(Scm { mat, kind: ScmKind::Sample })
}

/// `A diag(p) A^H`.
pub fn noiseless_scm(geom: &ArrayGeometry, thetas: &[f64], powers: &[f64]) -> Result<Scm> {
    if thetas.len() != powers.len() {
        return Err(Error::shape("one power per angle required"));
    }
    let a = response_matrix(geom, thetas)?;
    let mut ap = a.clone();
    for (k, &p) in powers.iter().enumerate() {
        ap.column_mut(k).iter_mut().for_each(|z| *z *= p);
    }
    let mut mat = ap * a.adjoint();
    symmetrize(&mut mat);
    Ok(Scm { mat, kind: ScmKind::Noiseless })
}

/// Hermitian Toeplitz matrix with first column `r`; `r[0]` is made real.
pub fn toeplitz_from_lags(r: &[Complex64]) -> Result<Scm> {
    let n = r.len();
    if n == 0 {
        return Err(Error::domain("toeplitz needs at least one lag"));
    }
    let r0 = Complex64::new(r[0].re, 0.0);
    let lag = |d: usize| if d == 0 { r0 } else { r[d] };
    let mat = CMatrix::from_fn(n, n, |i, j| {
        if i >= j {
            lag(i - j)
        } else {
            lag(j - i).conj()
        }
    });
    Ok(Scm { mat, kind: ScmKind::Augmented })
}

/// First column of a Toeplitz matrix.
pub fn lags_of(t: &CMatrix) -> Vec<Complex64> {
    t.column(0).iter().copied().collect()
}

/// Redundancy-averaged lags `r[l] = mean{ R[i,j] : idx_i - idx_j = l }`.
pub fn coarray_lags(scm: &Scm, geom: &ArrayGeometry) -> Result<Vec<Complex64>> {
    if scm.size() != geom.m() {
        return Err(Error::shape(format!(
            "covariance is {}x{} for a {}-antenna array",
            scm.size(),
            scm.size(),
            geom.m()
        )));
    }
    if !difference_coarray(geom).contiguous {
        return Err(Error::UnsupportedGeometry(format!(
            "difference co-array of {:?} has holes",
            geom.indices()
        )));
    }
    let n = geom.n();
    let mut sums = vec![Complex64::new(0.0, 0.0); n];
    let mut counts = vec![0usize; n];
    let idx = geom.indices();
    for (i, &a) in idx.iter().enumerate() {
        for (j, &b) in idx.iter().enumerate() {
            if a >= b {
                sums[a - b] += scm.mat[(i, j)];
                counts[a - b] += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s / c as f64)
        .collect())
}

/// Direct augmentation of an SLA covariance to the `n x n` virtual ULA
/// covariance (Hermitian Toeplitz).
pub fn coarray_augment(scm: &Scm, geom: &ArrayGeometry) -> Result<Scm> {
    toeplitz_from_lags(&coarray_lags(scm, geom)?)
}

/// As [`coarray_augment`], subtracting a known noise floor from lag 0 first.
pub fn coarray_augment_denoised(scm: &Scm, geom: &ArrayGeometry, noise: f64) -> Result<Scm> {
    let mut lags = coarray_lags(scm, geom)?;
    lags[0] -= noise;
    toeplitz_from_lags(&lags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{hermitian_defect, max_abs_diff};
    use crate::seed;
    use crate::sigsim::{
        gen_powers, sample_doas, synthesize, Modulation, SourceConfig, DELTA_MIN, THETA_MAX,
        THETA_MIN,
    };
    use crate::subspace::hermitian_eigen;
    use rand::Rng as _;
    use std::f64::consts::PI;

    fn mra5() -> ArrayGeometry {
        ArrayGeometry::preset("mra5").unwrap()
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn sample_scm_basic_cases() {
        let y = CMatrix::from_column_slice(3, 1, &[c(1.0, 0.0), c(0.0, 2.0), c(-1.0, 1.0)]);
        let r = sample_scm(&y).unwrap();
        assert!(max_abs_diff(&r.mat, &(&y * y.adjoint())) < 1e-15);

        let mut y = CMatrix::zeros(4, 2);
        y[(0, 0)] = c(1.0, 0.0);
        y[(1, 1)] = c(1.0, 0.0);
        let r = sample_scm(&y).unwrap();
        let mut want = CMatrix::zeros(4, 4);
        want[(0, 0)] = c(0.5, 0.0);
        want[(1, 1)] = c(0.5, 0.0);
        assert_eq!(r.mat, want);
        assert!(sample_scm(&CMatrix::zeros(3, 0)).is_err());
    }

    #[test]
    fn sample_scm_of_single_noiseless_source_is_rank_one() {
        let cfg = SourceConfig::new(vec![1.1], vec![1.0], Modulation::Qam16).unwrap();
        let batch = synthesize(&mra5(), &cfg, 37, f64::INFINITY, 3).unwrap();
        let r = sample_scm(&batch.y).unwrap();
        let (vals, _) = hermitian_eigen(&r.mat).unwrap();
        assert!(vals[1] < 1e-10 * vals[0]);
    }

    #[test]
    fn noiseless_scm_properties() {
        let g = mra5();
        let r = noiseless_scm(&g, &[0.8], &[1.0]).unwrap();
        assert!((0..5).all(|i| (r.mat[(i, i)] - c(1.0, 0.0)).norm() < 1e-15));

        let mut rng = seed::rng(4);
        for _ in 0..20 {
            let k = rng.random_range(1..=9);
            let th = sample_doas(k, THETA_MIN, THETA_MAX, DELTA_MIN, &mut rng).unwrap();
            let p = gen_powers(k, 10.0, &mut rng).unwrap();
            let r = noiseless_scm(&g, &th, &p).unwrap();
            let want = 5.0 * p.iter().sum::<f64>();
            assert!((r.mat.trace().re - want).abs() < 1e-10);
            assert!(hermitian_defect(&r.mat) < 1e-12);
        }

        // Far-separated sources: two dominant eigenvalues near m * p.
        let r = noiseless_scm(&g, &[PI / 3.0, 2.0 * PI / 3.0], &[1.0, 1.0]).unwrap();
        let a = crate::geometry::steering_vector(&g, PI / 3.0).unwrap();
        let b = crate::geometry::steering_vector(&g, 2.0 * PI / 3.0).unwrap();
        let coh: Complex64 = a.iter().zip(&b).map(|(x, y)| x.conj() * y).sum();
        assert!(coh.norm() / 5.0 < 0.3);
        let (vals, _) = hermitian_eigen(&r.mat).unwrap();
        assert!((vals[0] - 5.0).abs() < 5.0 * 0.3 && (vals[1] - 5.0).abs() < 5.0 * 0.3);
        assert!(vals[2].abs() < 1e-10);
    }

    #[test]
    fn toeplitz_cases() {
        let id = toeplitz_from_lags(&[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]).unwrap();
        assert_eq!(id.mat, CMatrix::identity(3, 3));
        let t = toeplitz_from_lags(&[c(1.0, 0.0), c(0.0, 1.0)]).unwrap();
        assert_eq!(t.mat[(0, 1)], c(0.0, -1.0));
        assert_eq!(t.mat[(1, 0)], c(0.0, 1.0));
        assert!(toeplitz_from_lags(&[]).is_err());
        // lag-0 imaginary drift is dropped
        let t = toeplitz_from_lags(&[c(2.0, 1e-9)]).unwrap();
        assert_eq!(t.mat[(0, 0)], c(2.0, 0.0));
    }

    #[test]
    fn toeplitz_round_trip() {
        let mut rng = seed::rng(5);
        for _ in 0..100 {
            let n = rng.random_range(1..12);
            let mut r: Vec<Complex64> = (0..n)
                .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            r[0].im = 0.0;
            let t = toeplitz_from_lags(&r).unwrap();
            assert!(hermitian_defect(&t.mat) == 0.0);
            let back = toeplitz_from_lags(&lags_of(&t.mat)).unwrap();
            assert_eq!(back.mat, t.mat);
        }
    }

    #[test]
    fn augmentation_matches_virtual_ula() {
        let g = mra5();
        let ula = ArrayGeometry::ula(10).unwrap();
        for &theta in &[0.6, 1.3, 2.4] {
            let sla = noiseless_scm(&g, &[theta], &[1.0]).unwrap();
            let aug = coarray_augment(&sla, &g).unwrap();
            let want = noiseless_scm(&ula, &[theta], &[1.0]).unwrap();
            assert!(max_abs_diff(&aug.mat, &want.mat) < 1e-10);
        }

        let th = [0.7, 1.5, 2.2];
        let p = [0.5, 1.0, 1.5];
        let mut sla = noiseless_scm(&g, &th, &p).unwrap();
        for i in 0..5 {
            sla.mat[(i, i)] += 0.3;
        }
        let aug = coarray_augment(&sla, &g).unwrap();
        let mut want = noiseless_scm(&ula, &th, &p).unwrap().mat;
        for i in 0..10 {
            want[(i, i)] += 0.3;
        }
        assert!(max_abs_diff(&aug.mat, &want) < 1e-10);
        let den = coarray_augment_denoised(&sla, &g, 0.3).unwrap();
        let clean = noiseless_scm(&ula, &th, &p).unwrap();
        assert!(max_abs_diff(&den.mat, &clean.mat) < 1e-10);
    }

    #[test]
    fn augmentation_of_toeplitz_ula_is_identity_map() {
        let ula = ArrayGeometry::ula(6).unwrap();
        let r = noiseless_scm(&ula, &[0.9, 1.9], &[1.0, 2.0]).unwrap();
        let aug = coarray_augment(&r, &ula).unwrap();
        assert!(max_abs_diff(&aug.mat, &r.mat) < 1e-12);
    }

    #[test]
    fn augmentation_errors() {
        let holes = ArrayGeometry::new(vec![1, 2, 5]).unwrap();
        let r = noiseless_scm(&holes, &[1.0], &[1.0]).unwrap();
        assert!(matches!(
            coarray_augment(&r, &holes),
            Err(Error::UnsupportedGeometry(_))
        ));
        let r = noiseless_scm(&ArrayGeometry::ula(3).unwrap(), &[1.0], &[1.0]).unwrap();
        assert!(coarray_augment(&r, &mra5()).is_err());
    }

    #[test]
    fn augmentation_is_linear() {
        let g = mra5();
        let a = noiseless_scm(&g, &[0.6, 2.0], &[1.0, 0.4]).unwrap();
        let b = noiseless_scm(&g, &[1.1], &[2.0]).unwrap();
        let combo = Scm { mat: &a.mat * c(2.0, 0.0) + &b.mat * c(-0.5, 0.0), kind: ScmKind::Sample };
        let lhs = coarray_augment(&combo, &g).unwrap().mat;
        let rhs = coarray_augment(&a, &g).unwrap().mat * c(2.0, 0.0)
            + coarray_augment(&b, &g).unwrap().mat * c(-0.5, 0.0);
        assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn augmented_rank_equals_source_count() {
        let g = mra5();
        let mut rng = seed::rng(6);
        for k in 1..=9 {
            let th = sample_doas(k, THETA_MIN, THETA_MAX, 0.15, &mut rng).unwrap();
            let p = gen_powers(k, 10.0, &mut rng).unwrap();
            let aug = coarray_augment(&noiseless_scm(&g, &th, &p).unwrap(), &g).unwrap();
            let (vals, _) = hermitian_eigen(&aug.mat).unwrap();
            if k < 10 {
                assert!(vals[k - 1] > 1e6 * vals[k].abs().max(1e-300), "k={k} {vals:?}");
            }
        }
    }
}
