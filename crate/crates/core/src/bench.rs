//! Monte Carlo evaluation: permutation-free MSE, SNR sweeps and
//! generalization studies, emitted as CSV-ready curve points.

use std::fmt::Write as _;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::ArrayGeometry;
use crate::seed;
use crate::sigsim::{
    gen_powers, random_coherence_group, sample_doas, synthesize, Modulation, SnapshotBatch, SourceConfig,
    DELTA_MIN, THETA_MAX, THETA_MIN,
};
use crate::snaptf::SnapTfModel;
use crate::subspace::coarray_root_music;

pub const CSV_HEADER: &str = "method,snr_db,k,t,mse_rad2,trials,ci95";

/// `(1/K) min_P ||P est - truth||^2`, attained by pairing both lists in sorted order.
pub fn mse_metric(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::Mismatch(format!(
            "{} estimates for {} true angles",
            est.len(),
            truth.len()
        )));
    }
    if est.is_empty() {
        return Err(Error::domain("empty angle lists"));
    }
    let mut a = est.to_vec();
    let mut b = truth.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

#[derive(Debug, Clone)]
pub enum Estimator {
    /// Returns the true angles; a pipeline sanity check.
    Oracle,
    CoarrayRootMusic,
    SnapTf { model: Arc<SnapTfModel>, tag: String },
}

impl Estimator {
    pub fn snap_tf(model: SnapTfModel) -> Self {
        Estimator::SnapTf { model: Arc::new(model), tag: "snap_tf".into() }
    }

    pub fn tag(&self) -> &str {
        match self {
            Estimator::Oracle => "oracle",
            Estimator::CoarrayRootMusic => "coarray_rootmusic",
            Estimator::SnapTf { tag, .. } => tag,
        }
    }

    fn check(&self, geom: &ArrayGeometry, k: usize) -> Result<()> {
        if let Estimator::SnapTf { model, .. } = self {
            let cfg = model.config();
            if cfg.m != geom.m() {
                return Err(Error::Mismatch(format!(
                    "model trained for m = {}, geometry has m = {}",
                    cfg.m,
                    geom.m()
                )));
            }
            if k > cfg.k_max {
                return Err(Error::Mismatch(format!("k = {k} exceeds model k_max = {}", cfg.k_max)));
            }
        }
        Ok(())
    }

    pub fn estimate(&self, geom: &ArrayGeometry, batch: &SnapshotBatch, k: usize) -> Result<Vec<f64>> {
        Ok(match self {
            Estimator::Oracle => batch.truth.thetas.clone(),
            Estimator::CoarrayRootMusic => coarray_root_music(geom, &batch.y, k)?.thetas,
            Estimator::SnapTf { model, .. } => model.forward(&batch.y, k)?.thetas,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub snr_grid: Vec<f64>,
    pub k_list: Vec<usize>,
    pub t: usize,
    pub trials: usize,
    pub geometry: String,
    pub modulation: Modulation,
    /// Size of one coherent group per trial; `< 2` means independent sources.
    pub coherent: usize,
    pub alpha: Complex64,
    pub power_ratio: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub delta_min: f64,
    pub master_seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            snr_grid: vec![-20.0, -10.0, 0.0, 10.0, 20.0],
            k_list: vec![3],
            t: 50,
            trials: 200,
            geometry: "mra5".into(),
            modulation: Modulation::Qam16,
            coherent: 0,
            alpha: Complex64::new(1.0, 0.0),
            power_ratio: 10.0,
            theta_min: THETA_MIN,
            theta_max: THETA_MAX,
            delta_min: DELTA_MIN,
            master_seed: 0,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<ArrayGeometry> {
        if self.snr_grid.is_empty() || self.k_list.is_empty() {
            return Err(Error::domain("snr_grid and k_list must be nonempty"));
        }
        if self.trials == 0 || self.t == 0 {
            return Err(Error::domain("trials and t must be >= 1"));
        }
        if self.k_list.contains(&0) {
            return Err(Error::domain("k must be >= 1"));
        }
        ArrayGeometry::preset(&self.geometry)
    }

    /// The scene of one trial. Every method sees the same draw for a given
    /// `(k, snr, t, trial)`.
    pub fn trial(&self, geom: &ArrayGeometry, k: usize, snr_db: f64, trial: usize) -> Result<SnapshotBatch> {
        let path = [k as u64, snr_db.to_bits(), self.t as u64, trial as u64];
        let mut rng = seed::derived_rng(self.master_seed, &path);
        let thetas = sample_doas(k, self.theta_min, self.theta_max, self.delta_min, &mut rng)?;
        let powers = gen_powers(k, self.power_ratio, &mut rng)?;
        let mut cfg = SourceConfig::new(thetas, powers, self.modulation)?;
        cfg.coherence = random_coherence_group(k, self.coherent.min(k), self.alpha, &mut rng)?;
        let sub = seed::derive(self.master_seed, &[path[0], path[1], path[2], path[3], 1]);
        synthesize(geom, &cfg, self.t, snr_db, sub)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub method: String,
    pub snr_db: f64,
    pub k: usize,
    pub t: usize,
    pub mse_rad2: f64,
    pub trials: usize,
    /// Normal-approximation half-width, `1.96 sd / sqrt(n)`.
    pub ci95: f64,
}

/// Mean and 95% half-width, summed in slice order.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Per-trial MSEs of every estimator for one `(k, snr)` cell.
pub fn cell_errors(
    spec: &SweepSpec,
    geom: &ArrayGeometry,
    estimators: &[Estimator],
    k: usize,
    snr_db: f64,
) -> Result<Vec<Vec<f64>>> {
    let per_trial = (0..spec.trials)
        .into_par_iter()
        .map(|trial| {
            let batch = spec.trial(geom, k, snr_db, trial)?;
            estimators
                .iter()
                .map(|e| mse_metric(&e.estimate(geom, &batch, k)?, &batch.truth.thetas))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..estimators.len())
        .map(|m| per_trial.iter().map(|row| row[m]).collect())
        .collect())
}

/// Rows ordered by method, then `k`, then SNR as listed in the spec.
pub fn run_sweep(spec: &SweepSpec, estimators: &[Estimator]) -> Result<Vec<CurvePoint>> {
    let geom = spec.validate()?;
    if estimators.is_empty() {
        return Err(Error::domain("no estimators given"));
    }
    for e in estimators {
        for &k in &spec.k_list {
            e.check(&geom, k)?;
        }
    }
    let mut cells = Vec::new();
    for &k in &spec.k_list {
        for &snr in &spec.snr_grid {
            cells.push((k, snr, cell_errors(spec, &geom, estimators, k, snr)?));
        }
    }
    let mut out = Vec::new();
    for (m, e) in estimators.iter().enumerate() {
        for (k, snr, errs) in &cells {
            let (mse, ci) = mean_ci95(&errs[m]);
            out.push(CurvePoint {
                method: e.tag().to_string(),
                snr_db: *snr,
                k: *k,
                t: spec.t,
                mse_rad2: mse,
                trials: spec.trials,
                ci95: ci,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeneralizationAxis {
    Snapshots(Vec<usize>),
    /// Test-time modulations; the method tag records which one, e.g. `snap_tf[qpsk]`.
    Modulation(Vec<Modulation>),
}

impl GeneralizationAxis {
    pub fn default_snapshots() -> Self {
        GeneralizationAxis::Snapshots((1..=10).map(|i| 10 * i).collect())
    }

    pub fn default_modulations() -> Self {
        GeneralizationAxis::Modulation(vec![Modulation::Qam16, Modulation::Qpsk, Modulation::Mixed])
    }
}

/// Evaluates fixed estimators off their training distribution.
pub fn run_generalization(
    spec: &SweepSpec,
    axis: &GeneralizationAxis,
    estimators: &[Estimator],
) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    match axis {
        GeneralizationAxis::Snapshots(ts) => {
            if ts.is_empty() {
                return Err(Error::domain("empty snapshot axis"));
            }
            for &t in ts {
                out.extend(run_sweep(&SweepSpec { t, ..spec.clone() }, estimators)?);
            }
        }
        GeneralizationAxis::Modulation(mods) => {
            if mods.is_empty() {
                return Err(Error::domain("empty modulation axis"));
            }
            for &modulation in mods {
                let mut pts = run_sweep(&SweepSpec { modulation, ..spec.clone() }, estimators)?;
                for p in &mut pts {
                    p.method = format!("{}[{}]", p.method, modulation.name());
                }
                out.extend(pts);
            }
        }
    }
    Ok(out)
}

pub fn to_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{:e},{},{:e}",
            p.method, p.snr_db, p.k, p.t, p.mse_rad2, p.trials, p.ci95
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snaptf::SnapTfConfig;
    use rand::Rng as _;

    fn brute_force(est: &[f64], truth: &[f64]) -> f64 {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        perms(est.len())
            .iter()
            .map(|p| p.iter().zip(truth).map(|(&i, t)| (est[i] - t).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            / est.len() as f64
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_metric(&[0.3, 0.1], &[0.1, 0.3]).unwrap(), 0.0);
        assert!((mse_metric(&[0.1, 0.2], &[0.2, 0.4]).unwrap() - 0.025).abs() < 1e-15);
        assert!(mse_metric(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn sorted_pairing_matches_exhaustive_minimum() {
        let mut rng = seed::rng(42);
        for _ in 0..1000 {
            let k = rng.random_range(1..=6);
            let a: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..3.2)).collect();
            let b: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..3.2)).collect();
            let fast = mse_metric(&a, &b).unwrap();
            assert!((fast - brute_force(&a, &b)).abs() <= 1e-12);
            assert_eq!(fast, mse_metric(&b, &a).unwrap());
            assert_eq!(mse_metric(&a, &a).unwrap(), 0.0);
        }
    }

    #[test]
    fn oracle_sweep_is_zero() {
        let spec = SweepSpec { trials: 1, k_list: vec![1, 3], ..SweepSpec::default() };
        let pts = run_sweep(&spec, &[Estimator::Oracle]).unwrap();
        assert_eq!(pts.len(), 10);
        assert!(pts.iter().all(|p| p.mse_rad2 == 0.0 && p.ci95 == 0.0));
    }

    #[test]
    fn sweep_is_reproducible_and_thread_independent() {
        let spec = SweepSpec {
            trials: 12,
            snr_grid: vec![0.0, 10.0],
            master_seed: 9,
            ..SweepSpec::default()
        };
        let est = [Estimator::CoarrayRootMusic, Estimator::Oracle];
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let wide = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = serial.install(|| to_csv(&run_sweep(&spec, &est).unwrap()));
        let b = wide.install(|| to_csv(&run_sweep(&spec, &est).unwrap()));
        assert_eq!(a, b);
        assert!(a.starts_with(CSV_HEADER));
        assert_eq!(a.lines().count(), 1 + 4);
    }

    #[test]
    fn baseline_improves_with_snr() {
        // heavy-tailed per-trial errors: compare medians of cell means over seeds
        let snrs = [-10.0, 0.0, 10.0, 20.0];
        let mut per_snr = vec![Vec::new(); snrs.len()];
        for master_seed in 0..7 {
            let spec = SweepSpec { trials: 40, snr_grid: snrs.to_vec(), t: 200, master_seed, ..SweepSpec::default() };
            for (i, p) in run_sweep(&spec, &[Estimator::CoarrayRootMusic]).unwrap().iter().enumerate() {
                per_snr[i].push(p.mse_rad2);
            }
        }
        let medians: Vec<f64> = per_snr
            .iter_mut()
            .map(|v| {
                v.sort_by(f64::total_cmp);
                v[v.len() / 2]
            })
            .collect();
        for w in medians.windows(2) {
            assert!(w[1] <= w[0], "{medians:?}");
        }
    }

    #[test]
    fn snap_tf_mismatch_is_reported() {
        let model = SnapTfModel::init(SnapTfConfig { k_max: 4, ..SnapTfConfig::gaussian(14, 4) }, 1).unwrap();
        let spec = SweepSpec { trials: 1, ..SweepSpec::default() };
        let err = run_sweep(&spec, &[Estimator::snap_tf(model)]).unwrap_err();
        assert!(matches!(err, Error::Mismatch(_)));
    }

    #[test]
    fn generalization_axes() {
        let cfg = SnapTfConfig { layers: 1, d_model: 8, d_attn: 8, d_ff: 8, hidden_out: 8, k_max: 3, m: 5 };
        let est = [Estimator::snap_tf(SnapTfModel::init(cfg, 2).unwrap()), Estimator::CoarrayRootMusic];
        let spec = SweepSpec { trials: 2, snr_grid: vec![10.0], ..SweepSpec::default() };
        let pts = run_generalization(&spec, &GeneralizationAxis::Snapshots(vec![10, 100]), &est).unwrap();
        assert_eq!(pts.len(), 4);
        assert!(pts.iter().all(|p| p.mse_rad2.is_finite()));
        assert_eq!(pts.iter().map(|p| p.t).collect::<Vec<_>>(), vec![10, 10, 100, 100]);
        let pts = run_generalization(&spec, &GeneralizationAxis::default_modulations(), &est).unwrap();
        let tags: Vec<&str> = pts.iter().map(|p| p.method.as_str()).collect();
        assert_eq!(
            tags,
            [
                "snap_tf[qam16]",
                "coarray_rootmusic[qam16]",
                "snap_tf[qpsk]",
                "coarray_rootmusic[qpsk]",
                "snap_tf[mixed]",
                "coarray_rootmusic[mixed]"
            ]
        );
    }

    #[test]
    fn ci_of_constant_is_zero() {
        assert_eq!(mean_ci95(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, c) = mean_ci95(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((c - 1.96 * (2.0f64 / 2.0).sqrt()).abs() < 1e-15);
    }
}
