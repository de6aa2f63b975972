//! Subspace machinery: eigen-split of a covariance, MUSIC pseudo-spectrum,
//! Root-MUSIC and the principal-angle distance between signal subspaces.
//!
//! Spectra and polynomials here assume the covariance belongs to a ULA of
//! the same size (e.g. an augmented virtual-ULA covariance).

mod jacobi;
mod roots;

pub use jacobi::hermitian_eigen;
pub use roots::poly_roots;

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::covariance::{coarray_augment, sample_scm, Scm};
use crate::error::{Error, Result};
use crate::geometry::{angle_from_electrical, steering_from_u, steering_vector, ArrayGeometry};
use crate::linalg::CMatrix;

#[derive(Debug, Clone)]
pub struct EigenSplit {
    /// All eigenvalues, descending.
    pub values: Vec<f64>,
    /// `n x k` orthonormal basis of the `k` dominant eigenvectors.
    pub signal: CMatrix,
    /// `n x (n - k)` orthonormal basis of the remaining eigenvectors.
    pub noise: CMatrix,
}

impl EigenSplit {
    pub fn k(&self) -> usize {
        self.signal.ncols()
    }

    pub fn size(&self) -> usize {
        self.signal.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoaEstimate {
    /// Sorted ascending, radians.
    pub thetas: Vec<f64>,
    pub method: String,
}

impl DoaEstimate {
    pub fn new(mut thetas: Vec<f64>, method: impl Into<String>) -> Self {
        thetas.sort_by(f64::total_cmp);
        Self { thetas, method: method.into() }
    }

    pub fn k(&self) -> usize {
        self.thetas.len()
    }
}

pub fn eig_hermitian(scm: &Scm, k: usize) -> Result<EigenSplit> {
    let n = scm.size();
    if k == 0 || k >= n {
        return Err(Error::domain(format!("need 1 <= K < {n}, got K = {k}")));
    }
    let (values, vectors) = hermitian_eigen(&scm.mat)?;
    Ok(EigenSplit {
        values,
        signal: vectors.columns(0, k).into_owned(),
        noise: vectors.columns(k, n - k).into_owned(),
    })
}

fn noise_projection_energy(noise: &CMatrix, a: &[Complex64]) -> f64 {
    noise
        .column_iter()
        .map(|v| v.iter().zip(a).map(|(x, y)| x.conj() * y).sum::<Complex64>().norm_sqr())
        .sum()
}

/// `1 / ||V^H a(theta)||^2` for a ULA of the split's size.
pub fn music_spectrum(split: &EigenSplit, grid: &[f64]) -> Result<Vec<f64>> {
    music_spectrum_on(&ArrayGeometry::ula(split.size())?, split, grid)
}

pub fn music_spectrum_on(
    geom: &ArrayGeometry,
    split: &EigenSplit,
    grid: &[f64],
) -> Result<Vec<f64>> {
    if geom.m() != split.size() {
        return Err(Error::shape("geometry and eigen-split sizes differ"));
    }
    if split.noise.ncols() == 0 {
        return Err(Error::domain("empty noise subspace"));
    }
    grid.iter()
        .map(|&theta| {
            let a = steering_vector(geom, theta)?;
            Ok(1.0 / noise_projection_energy(&split.noise, &a).max(f64::MIN_POSITIVE))
        })
        .collect()
}

/// Grid indices of the `k` largest local maxima of a spectrum, sorted by index.
pub fn spectrum_peaks(spectrum: &[f64], k: usize) -> Vec<usize> {
    let n = spectrum.len();
    let mut peaks: Vec<usize> = (0..n)
        .filter(|&i| {
            let left = i == 0 || spectrum[i] >= spectrum[i - 1];
            let right = i + 1 == n || spectrum[i] > spectrum[i + 1];
            left && right
        })
        .collect();
    peaks.sort_by(|&a, &b| spectrum[b].total_cmp(&spectrum[a]));
    peaks.truncate(k);
    peaks.sort_unstable();
    peaks
}

/// Coefficients (ascending powers) of `z^{n-1} a(z)^H C a(z)`, where
/// `C = V V^H` is the noise projector and `a(z) = [1, z, ..., z^{n-1}]`.
pub fn root_music_polynomial(noise: &CMatrix) -> Vec<Complex64> {
    let n = noise.nrows();
    let proj = noise * noise.adjoint();
    let mut coeffs = vec![Complex64::new(0.0, 0.0); 2 * n - 1];
    for i in 0..n {
        for j in 0..n {
            // exponent j - i, shifted by n - 1
            coeffs[j + n - 1 - i] += proj[(i, j)];
        }
    }
    coeffs
}

/// Root-MUSIC on an `n x n` ULA covariance.
///
/// Roots of the conjugate-reciprocal polynomial come in pairs
/// `(z, 1/conj(z))`; each pair is matched and its distance from the unit
/// circle scored. The `k` pairs nearest the circle give the DOAs through
/// the phase of the pair (the inside root for well-separated pairs).
pub fn root_music(scm: &Scm, k: usize) -> Result<DoaEstimate> {
    let n = scm.size();
    if k == 0 || k >= n {
        return Err(Error::domain(format!("Root-MUSIC needs 1 <= k < {n}, got {k}")));
    }
    let split = eig_hermitian(scm, k)?;
    let roots = poly_roots(&root_music_polynomial(&split.noise))?;
    let pairs = pair_reciprocal_roots(&roots);
    if pairs.len() < k {
        return Err(Error::Numerical(format!(
            "only {} admissible root pairs for {k} sources",
            pairs.len()
        )));
    }
    let thetas = pairs
        .iter()
        .take(k)
        .map(|p| angle_from_electrical(p.phase / PI))
        .collect();
    Ok(DoaEstimate::new(thetas, "coarray_rootmusic"))
}

#[derive(Debug, Clone, Copy)]
struct RootPair {
    /// Mean of `|ln |z||` over the pair.
    distance: f64,
    /// Phase representing the pair, in `(-pi, pi]`.
    phase: f64,
}

/// Greedy matching of roots with their conjugate-reciprocal partners; the
/// result is sorted by distance to the unit circle (ties: larger modulus of
/// the inside root first).
fn pair_reciprocal_roots(roots: &[Complex64]) -> Vec<RootPair> {
    let usable: Vec<Complex64> = roots
        .iter()
        .copied()
        .filter(|z| z.norm() > 0.0 && z.is_finite())
        .collect();
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..usable.len() {
        for j in (i + 1)..usable.len() {
            let mirror = 1.0 / usable[j].conj();
            let scale = usable[i].norm().max(mirror.norm());
            cand.push(((usable[i] - mirror).norm() / scale, i, j));
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used = vec![false; usable.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cand {
        if used[i] || used[j] {
            continue;
        }
        used[i] = true;
        used[j] = true;
        let (a, b) = (usable[i], usable[j]);
        let (inside, outside) = if a.norm() <= b.norm() { (a, b) } else { (b, a) };
        let dir = inside / inside.norm() + outside / outside.norm();
        let phase = if dir.norm() > 1e-12 { dir.arg() } else { inside.arg() };
        pairs.push((
            RootPair {
                distance: 0.5 * (a.norm().ln().abs() + b.norm().ln().abs()),
                phase,
            },
            inside.norm(),
        ));
    }
    pairs.sort_by(|a, b| a.0.distance.total_cmp(&b.0.distance).then(b.1.total_cmp(&a.1)));
    pairs.into_iter().map(|p| p.0).collect()
}

/// Principal angles between the `k`-dimensional dominant subspaces of two
/// covariances, returned ascending.
pub fn principal_angles(scm_a: &Scm, scm_b: &Scm, k: usize) -> Result<Vec<f64>> {
    if scm_a.size() != scm_b.size() {
        return Err(Error::shape(format!(
            "covariance sizes differ: {} vs {}",
            scm_a.size(),
            scm_b.size()
        )));
    }
    let ua = eig_hermitian(scm_a, k)?.signal;
    let ub = eig_hermitian(scm_b, k)?.signal;
    let cross = ua.adjoint() * &ub;
    let resid = &ub - &ua * &cross;
    let (cos2, _) = hermitian_eigen(&(cross.adjoint() * &cross))?;
    let (sin2, _) = hermitian_eigen(&(resid.adjoint() * &resid))?;
    // cos descending pairs with sin ascending.
    Ok(cos2
        .iter()
        .zip(sin2.iter().rev())
        .map(|(&c2, &s2)| {
            let c = c2.clamp(0.0, 1.0).sqrt();
            let s = s2.clamp(0.0, 1.0).sqrt();
            if c2 >= 0.5 {
                s.asin()
            } else {
                c.acos()
            }
        })
        .collect())
}

/// `|| arccos(sigma(U_a^H U_b)) ||_2`.
pub fn principal_angle_distance(scm_a: &Scm, scm_b: &Scm, k: usize) -> Result<f64> {
    Ok(principal_angles(scm_a, scm_b, k)?
        .iter()
        .map(|t| t * t)
        .sum::<f64>()
        .sqrt())
}

/// Sample covariance, co-array augmentation and Root-MUSIC in one call.
pub fn coarray_root_music(geom: &ArrayGeometry, y: &CMatrix, k: usize) -> Result<DoaEstimate> {
    let r = sample_scm(y)?;
    let aug = coarray_augment(&r, geom)?;
    root_music(&aug, k)
}

/// Steering vector on an `n`-element ULA for electrical angle `u`.
pub fn ula_steering(n: usize, u: f64) -> Vec<Complex64> {
    steering_from_u(&ArrayGeometry::ula(n).expect("n >= 1"), u)
}
