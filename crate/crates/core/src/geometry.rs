//! Sparse linear array geometry on a half-wavelength grid.
//!
//! Antenna `m` sits at `(indices[m] - 1) * d` with `d = lambda / 2`. The
//! steering phase of an antenna at grid offset `k` is `pi * k * u(theta)`
//! with the electrical angle `u(theta) = cos(theta)`, which is injective on
//! `[0, pi]`.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{cis, CMatrix};

/// Five-antenna minimum-redundancy array with aperture 10.
pub const MRA5: [usize; 5] = [1, 2, 5, 8, 10];
/// Large minimum-redundancy array with aperture 79 (fourteen indices).
pub const MRA79: [usize; 14] = [1, 2, 3, 6, 11, 16, 27, 38, 49, 60, 66, 72, 78, 79];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArrayGeometry {
    indices: Vec<usize>,
}

impl ArrayGeometry {
    /// Validates `1 = indices[0] < indices[1] < ... < indices[m-1] = n`.
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::domain("geometry needs at least one antenna"));
        }
        if indices[0] != 1 {
            return Err(Error::domain(format!(
                "first antenna index must be 1, got {}",
                indices[0]
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("antenna indices must be strictly increasing"));
        }
        Ok(Self { indices })
    }

    pub fn ula(n: usize) -> Result<Self> {
        Self::new((1..=n).collect())
    }

    /// Named presets: `mra5`, `mra79`, or `ulaN` for an N-element ULA. A
    /// comma-separated index list such as `1,2,5,8,10` is also accepted.
    pub fn preset(name: &str) -> Result<Self> {
        if name.contains(',') {
            let indices = name
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::domain(format!("bad index list `{name}`: {e}")))?;
            return Self::new(indices);
        }
        match name {
            "mra5" => Self::new(MRA5.to_vec()),
            "mra79" => Self::new(MRA79.to_vec()),
            other => match other.strip_prefix("ula").and_then(|n| n.parse().ok()) {
                Some(n) if n >= 1 => Self::ula(n),
                _ => Err(Error::domain(format!("unknown geometry preset `{other}`"))),
            },
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Physical antenna count `M`.
    pub fn m(&self) -> usize {
        self.indices.len()
    }

    /// Aperture `N` in grid units (last index).
    pub fn n(&self) -> usize {
        *self.indices.last().expect("non-empty by construction")
    }

    pub fn is_ula(&self) -> bool {
        self.m() == self.n()
    }

    /// The ULA spanning the same aperture.
    pub fn virtual_ula(&self) -> Self {
        Self::ula(self.n()).expect("n >= 1")
    }

    /// Zero-based grid offsets `indices[m] - 1`.
    pub fn offsets(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().map(|&i| i - 1)
    }
}

/// Electrical angle `u(theta) = cos(theta)`.
#[inline]
pub fn electrical_angle(theta: f64) -> f64 {
    theta.cos()
}

/// Inverse of [`electrical_angle`]; clamps `u` into `[-1, 1]`.
#[inline]
pub fn angle_from_electrical(u: f64) -> f64 {
    u.clamp(-1.0, 1.0).acos()
}

fn check_angle(theta: f64) -> Result<()> {
    if !(0.0..=PI).contains(&theta) {
        return Err(Error::domain(format!("angle {theta} outside [0, pi]")));
    }
    Ok(())
}

/// Steering vector for an electrical angle `u` (no domain check).
pub fn steering_from_u(geom: &ArrayGeometry, u: f64) -> Vec<Complex64> {
    geom.offsets().map(|k| cis(PI * k as f64 * u)).collect()
}

pub fn steering_vector(geom: &ArrayGeometry, theta: f64) -> Result<Vec<Complex64>> {
    check_angle(theta)?;
    Ok(steering_from_u(geom, electrical_angle(theta)))
}

/// `A(theta)`, one steering vector per column.
pub fn response_matrix(geom: &ArrayGeometry, thetas: &[f64]) -> Result<CMatrix> {
    if thetas.is_empty() {
        return Err(Error::domain("response matrix needs at least one angle"));
    }
    let mut a = CMatrix::zeros(geom.m(), thetas.len());
    for (k, &theta) in thetas.iter().enumerate() {
        for (i, v) in steering_vector(geom, theta)?.into_iter().enumerate() {
            a[(i, k)] = v;
        }
    }
    Ok(a)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coarray {
    /// Sorted distinct non-negative lags.
    pub lags: Vec<usize>,
    /// `lags == {0, 1, ..., n - 1}`.
    pub contiguous: bool,
}

pub fn difference_coarray(geom: &ArrayGeometry) -> Coarray {
    let idx = geom.indices();
    let lags: BTreeSet<usize> = idx
        .iter()
        .flat_map(|&a| idx.iter().map(move |&b| a.abs_diff(b)))
        .collect();
    let lags: Vec<usize> = lags.into_iter().collect();
    let contiguous = lags.len() == geom.n() && lags.iter().enumerate().all(|(i, &l)| i == l);
    Coarray { lags, contiguous }
}

/// Distinct values of `indices[i] + indices[j] - 2` over unordered pairs,
/// `i == j` included.
pub fn sum_coarray(geom: &ArrayGeometry) -> Vec<usize> {
    let idx = geom.indices();
    let sums: BTreeSet<usize> = idx
        .iter()
        .enumerate()
        .flat_map(|(i, &a)| idx[i..].iter().map(move |&b| a + b - 2))
        .collect();
    sums.into_iter().collect()
}

/// Apply the row-selection matrix: pick the ULA entries at the antenna offsets.
pub fn select_rows<T: Copy>(geom: &ArrayGeometry, full: &[T]) -> Result<Vec<T>> {
    if full.len() != geom.n() {
        return Err(Error::shape(format!(
            "select_rows expects length {}, got {}",
            geom.n(),
            full.len()
        )));
    }
    Ok(geom.offsets().map(|k| full[k]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mra5() -> ArrayGeometry {
        ArrayGeometry::preset("mra5").unwrap()
    }

    fn close(a: Complex64, b: Complex64) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn geometry_validation() {
        assert!(ArrayGeometry::new(vec![]).is_err());
        assert!(ArrayGeometry::new(vec![2, 3]).is_err());
        assert!(ArrayGeometry::new(vec![1, 3, 3]).is_err());
        let g = mra5();
        assert_eq!((g.m(), g.n()), (5, 10));
        assert!(!g.is_ula());
        assert!(ArrayGeometry::ula(4).unwrap().is_ula());
        assert_eq!(ArrayGeometry::preset("mra79").unwrap().m(), 14);
        assert_eq!(ArrayGeometry::preset("ula64").unwrap().n(), 64);
        assert!(ArrayGeometry::preset("nope").is_err());
        assert_eq!(ArrayGeometry::preset("1, 2,5,8,10").unwrap(), g);
        assert!(ArrayGeometry::preset("1,x").is_err());
        assert!(ArrayGeometry::preset("2,3").is_err());
    }

    #[test]
    fn steering_at_unit_electrical_angle() {
        // u = cos(0) = 1
        let a = steering_vector(&mra5(), 0.0).unwrap();
        let want = [1.0, -1.0, 1.0, -1.0, -1.0];
        for (z, w) in a.iter().zip(want) {
            assert!(close(*z, Complex64::new(w, 0.0)));
        }
    }

    #[test]
    fn steering_at_broadside_and_half() {
        let g = ArrayGeometry::new(vec![1, 2]).unwrap();
        let a = steering_vector(&g, PI / 2.0).unwrap();
        assert!(a.iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-15));

        // u = 0.5 at theta = pi/3
        let a = steering_vector(&mra5(), PI / 3.0).unwrap();
        let j = Complex64::new(0.0, 1.0);
        let want = [Complex64::new(1.0, 0.0), j, Complex64::new(1.0, 0.0), -j, j];
        for (z, w) in a.iter().zip(want) {
            assert!(close(*z, w), "{z} vs {w}");
        }
    }

    #[test]
    fn steering_rejects_out_of_range() {
        assert!(steering_vector(&mra5(), -0.1).is_err());
        assert!(steering_vector(&mra5(), PI + 1e-9).is_err());
    }

    #[test]
    fn response_matrix_columns_and_rank() {
        let g = mra5();
        assert!(response_matrix(&g, &[]).is_err());
        let a = response_matrix(&g, &[0.7]).unwrap();
        let v = steering_vector(&g, 0.7).unwrap();
        for i in 0..5 {
            assert_eq!(a[(i, 0)], v[i]);
        }
        let a = response_matrix(&g, &[0.7, 0.7]).unwrap();
        let sv = a.clone().svd(false, false).singular_values;
        assert!(sv[1] < 1e-9 * sv[0]);

        let a = response_matrix(&g, &[0.6, 1.2, 2.0]).unwrap();
        let sv = a.svd(false, false).singular_values;
        assert!(sv.iter().all(|&s| s > 1e-9), "{sv:?}");
    }

    #[test]
    fn coarrays_of_presets() {
        let d = difference_coarray(&mra5());
        assert_eq!(d.lags, (0..10).collect::<Vec<_>>());
        assert!(d.contiguous);
        assert_eq!(sum_coarray(&mra5()).len(), 14);

        // The fourteen listed indices leave five holes in the co-array.
        let big = ArrayGeometry::preset("mra79").unwrap();
        let d = difference_coarray(&big);
        assert!(!d.contiguous);
        let holes: Vec<usize> = (0..79).filter(|l| !d.lags.contains(l)).collect();
        assert_eq!(holes, vec![20, 31, 42, 53, 74]);

        let d = difference_coarray(&ArrayGeometry::ula(3).unwrap());
        assert_eq!(d.lags, vec![0, 1, 2]);
        assert!(d.contiguous);

        let d = difference_coarray(&ArrayGeometry::new(vec![1, 2, 5]).unwrap());
        assert_eq!(d.lags, vec![0, 1, 3, 4]);
        assert!(!d.contiguous);
    }

    #[test]
    fn sum_coarray_small_cases() {
        assert_eq!(sum_coarray(&ArrayGeometry::new(vec![1]).unwrap()), vec![0]);
        assert_eq!(
            sum_coarray(&ArrayGeometry::new(vec![1, 2]).unwrap()),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn select_rows_reads_offsets() {
        let full: Vec<usize> = (0..10).collect();
        assert_eq!(select_rows(&mra5(), &full).unwrap(), vec![0, 1, 4, 7, 9]);
        let ula = ArrayGeometry::ula(4).unwrap();
        assert_eq!(select_rows(&ula, &[3, 1, 4, 1]).unwrap(), vec![3, 1, 4, 1]);
        assert!(select_rows(&mra5(), &full[..9]).is_err());
    }

    fn arb_geometry() -> impl Strategy<Value = ArrayGeometry> {
        proptest::collection::btree_set(2usize..40, 0..8).prop_map(|rest| {
            let mut idx = vec![1];
            idx.extend(rest);
            ArrayGeometry::new(idx).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn selection_identity(geom in arb_geometry(), theta in 0.0..PI) {
            let full = steering_vector(&geom.virtual_ula(), theta).unwrap();
            let picked = select_rows(&geom, &full).unwrap();
            let direct = steering_vector(&geom, theta).unwrap();
            for (a, b) in picked.iter().zip(&direct) {
                prop_assert!((a - b).norm() < 1e-12);
            }
            prop_assert!(direct.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
            prop_assert_eq!(direct[0], Complex64::new(1.0, 0.0));
        }

        #[test]
        fn steering_depends_only_on_electrical_angle(geom in arb_geometry(), theta in 0.0..PI) {
            let u = electrical_angle(theta);
            let again = steering_vector(&geom, angle_from_electrical(u)).unwrap();
            let direct = steering_vector(&geom, theta).unwrap();
            for (a, b) in again.iter().zip(&direct) {
                prop_assert!((a - b).norm() < 1e-9);
            }
        }
    }
}
