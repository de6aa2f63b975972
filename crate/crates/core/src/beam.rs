//! Sensing-assisted multi-user beam management.
//!
//! Uplink DOA estimates prune a Type-I codebook sweep; selected beams feed
//! a one-pilot least-squares gain estimate and a zero-forcing downlink.
//! Throughput is `max(0, 1 - (t_train + t_fb)/t_c) * sum_k log2(1 + SINR_k)`.

use std::fmt::Write as _;
use std::str::FromStr;

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::bench::{mean_ci95, Estimator};
use crate::error::{Error, Result};
use crate::geometry::{angle_from_electrical, steering_from_u, steering_vector, ArrayGeometry};
use crate::linalg::CMatrix;
use crate::seed::{self, Rng};
use crate::sigsim::{complex_gaussian, gen_powers, sample_doas, synthesize, Modulation, SourceConfig};

pub const CSV_HEADER: &str = "scheme,t_c,sigma_mis_deg,delta_deg,mean_R,ci95,mean_t_train";

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// Electrical angles `2q/Q - 1`, `q = 1..=Q`.
    pub u: Vec<f64>,
    /// Beam angles in `[0, pi]`.
    pub angles: Vec<f64>,
    /// Unit-modulus steering vectors on the geometry.
    pub vectors: Vec<Vec<Complex64>>,
}

impl Codebook {
    pub fn q(&self) -> usize {
        self.u.len()
    }

    /// Beam whose angle is closest to `theta`.
    pub fn nearest(&self, theta: f64) -> usize {
        let mut best = 0;
        for (i, a) in self.angles.iter().enumerate() {
            if (a - theta).abs() < (self.angles[best] - theta).abs() {
                best = i;
            }
        }
        best
    }
}

pub fn type1_codebook(geom: &ArrayGeometry, q: usize) -> Result<Codebook> {
    if q == 0 {
        return Err(Error::domain("codebook needs at least one beam"));
    }
    let u: Vec<f64> = (1..=q).map(|i| 2.0 * i as f64 / q as f64 - 1.0).collect();
    let angles = u.iter().map(|&x| angle_from_electrical(x)).collect();
    let vectors = u.iter().map(|&x| steering_from_u(geom, x)).collect();
    Ok(Codebook { u, angles, vectors })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pruning {
    /// Candidate beams per user, ascending.
    pub sets: Vec<Vec<usize>>,
    /// Union of all sets, ascending; its size is the sweep overhead.
    pub union: Vec<usize>,
}

impl Pruning {
    pub fn overhead(&self) -> usize {
        self.union.len()
    }
}

/// Beams within `delta` of each estimate; an empty window falls back to the nearest beam.
pub fn prune_beams(cb: &Codebook, doas: &[f64], delta: f64) -> Result<Pruning> {
    if !(delta > 0.0) {
        return Err(Error::domain("pruning window must be positive"));
    }
    let sets: Vec<Vec<usize>> = doas
        .iter()
        .map(|&th| {
            let set: Vec<usize> = (0..cb.q()).filter(|&i| (cb.angles[i] - th).abs() < delta).collect();
            if set.is_empty() {
                vec![cb.nearest(th)]
            } else {
                set
            }
        })
        .collect();
    let mut union: Vec<usize> = sets.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    Ok(Pruning { sets, union })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Full,
    Pruned,
    SensingOnly,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Full, Scheme::Pruned, Scheme::SensingOnly];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Full => "full",
            Scheme::Pruned => "pruned",
            Scheme::SensingOnly => "sensing_only",
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown scheme {s:?}")))
    }
}

/// Beam used by the no-sweep scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SensingBeam {
    /// Steer straight at the estimate.
    #[default]
    Direct,
    /// Codebook beam nearest the estimate.
    Nearest,
}

impl FromStr for SensingBeam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(SensingBeam::Direct),
            "nearest" => Ok(SensingBeam::Nearest),
            _ => Err(Error::domain(format!("unknown sensing beam {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkParams {
    pub t_c: f64,
    /// Pruning half-width, radians.
    pub delta: f64,
    pub snr_dl_db: f64,
    /// LS pilots per selected beam.
    pub pilots: usize,
    pub sensing_beam: SensingBeam,
    /// Pruned users pick from every swept beam rather than only their own window.
    pub select_from_union: bool,
}

/// Per-trial user geometry shared by every scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct UserDraw {
    pub theta_ul: Vec<f64>,
    pub theta_dl: Vec<f64>,
    /// Uplink estimates, index-aligned with `theta_ul`.
    pub estimates: Vec<f64>,
    pub powers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputReport {
    pub scheme: Scheme,
    pub t_train: usize,
    pub t_fb: usize,
    pub t_c: f64,
    pub sinr: Vec<f64>,
    pub rate: f64,
    /// Selected codebook beam per user (`None` when steering directly).
    pub beams: Vec<Option<usize>>,
}

/// `max(0, 1 - (t_train + t_fb)/t_c) * sum log2(1 + sinr)`.
pub fn throughput(t_train: usize, t_fb: usize, t_c: f64, sinr: &[f64]) -> f64 {
    let pre = (1.0 - (t_train + t_fb) as f64 / t_c).max(0.0);
    pre * sinr.iter().map(|s| (1.0 + s).log2()).sum::<f64>()
}

fn inner(h: &[Complex64], w: &[Complex64]) -> Complex64 {
    h.iter().zip(w).map(|(a, b)| a.conj() * b).sum()
}

/// Zero-forcing precoder for the rows of `h_hat` (`K x M`, row `k` is `h_k^H`),
/// each column scaled to power `total_power / K`. Uses a pseudo-inverse, so
/// rank-deficient estimates yield a least-squares precoder.
pub fn zf_precoder(h_hat: &CMatrix, total_power: f64) -> Result<CMatrix> {
    let k = h_hat.nrows();
    let svd = h_hat.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut f: CMatrix = svd
        .pseudo_inverse(1e-10 * smax.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let per_user = (total_power / k as f64).sqrt();
    for mut col in f.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col *= Complex64::new(per_user / norm, 0.0);
        }
    }
    Ok(f)
}

/// SINR of each user on true channels `h` (row `k` is `h_k^H`) with unit noise.
pub fn sinr(h: &CMatrix, f: &CMatrix) -> Vec<f64> {
    let g = h * f;
    (0..h.nrows())
        .map(|k| {
            let sig = g[(k, k)].norm_sqr();
            let int: f64 = (0..f.ncols()).filter(|&j| j != k).map(|j| g[(k, j)].norm_sqr()).sum();
            sig / (int + 1.0)
        })
        .collect()
}

/// One scheme's downlink on a drawn scene. `rng` drives pilot noise only.
pub fn downlink_trial(
    geom: &ArrayGeometry,
    cb: &Codebook,
    draw: &UserDraw,
    scheme: Scheme,
    params: &LinkParams,
    rng: &mut Rng,
) -> Result<ThroughputReport> {
    let m = geom.m();
    let k = draw.theta_dl.len();
    if k == 0 || k > m {
        return Err(Error::domain(format!("need 1 <= K <= M, got K = {k}, M = {m}")));
    }
    if draw.estimates.len() != k || draw.powers.len() != k {
        return Err(Error::shape("user draw fields differ in length"));
    }
    if params.pilots == 0 {
        return Err(Error::domain("need at least one pilot"));
    }
    let channels: Vec<Vec<Complex64>> = draw
        .theta_dl
        .iter()
        .zip(&draw.powers)
        .map(|(&th, &p)| {
            let a = steering_vector(geom, th.clamp(0.0, std::f64::consts::PI))?;
            Ok(a.into_iter().map(|z| z * p.sqrt()).collect())
        })
        .collect::<Result<_>>()?;
    let best_in = |user: usize, set: &[usize]| {
        let mut best = set[0];
        let mut gain = -1.0;
        for &b in set {
            let g = inner(&channels[user], &cb.vectors[b]).norm();
            if g > gain {
                gain = g;
                best = b;
            }
        }
        best
    };

    let all: Vec<usize> = (0..cb.q()).collect();
    let (beams, t_train, t_fb): (Vec<Option<usize>>, usize, usize) = match scheme {
        Scheme::Full => ((0..k).map(|u| Some(best_in(u, &all))).collect(), cb.q(), k),
        Scheme::Pruned => {
            let pr = prune_beams(cb, &draw.estimates, params.delta)?;
            let choice = (0..k)
                .map(|u| Some(best_in(u, if params.select_from_union { &pr.union } else { &pr.sets[u] })))
                .collect();
            (choice, pr.overhead(), k)
        }
        Scheme::SensingOnly => match params.sensing_beam {
            SensingBeam::Nearest => (draw.estimates.iter().map(|&th| Some(cb.nearest(th))).collect(), 0, 0),
            SensingBeam::Direct => (vec![None; k], 0, 0),
        },
    };

    let power = 10f64.powf(params.snr_dl_db / 10.0);
    let pilot_amp = (power / m as f64).sqrt();
    let mut h_hat = CMatrix::zeros(k, m);
    let mut h_true = CMatrix::zeros(k, m);
    for u in 0..k {
        let w = match beams[u] {
            Some(b) => cb.vectors[b].clone(),
            None => steering_vector(geom, draw.estimates[u].clamp(0.0, std::f64::consts::PI))?,
        };
        let clean = inner(&channels[u], &w) * pilot_amp;
        let y: Complex64 = (0..params.pilots)
            .map(|_| clean + complex_gaussian(rng, 1.0))
            .sum::<Complex64>()
            / params.pilots as f64;
        let c = y / (power * m as f64).sqrt();
        for i in 0..m {
            h_hat[(u, i)] = c * w[i].conj();
            h_true[(u, i)] = channels[u][i].conj();
        }
    }
    let f = zf_precoder(&h_hat, power)?;
    let sinr = sinr(&h_true, &f);
    Ok(ThroughputReport {
        scheme,
        t_train,
        t_fb,
        t_c: params.t_c,
        rate: throughput(t_train, t_fb, params.t_c, &sinr),
        sinr,
        beams,
    })
}

/// Source of uplink DOA estimates.
#[derive(Debug, Clone)]
pub enum DoaErrorModel {
    /// True angle plus Gaussian error of the given RMSE (radians).
    Synthetic { rmse: f64 },
    /// Run an estimator on simulated uplink snapshots.
    Estimated { estimator: Estimator, snr_ul_db: f64, t: usize, modulation: Modulation },
}

#[derive(Debug, Clone)]
pub struct BeamScenario {
    pub geometry: String,
    pub k: usize,
    /// Codebook size; `0` means `M`.
    pub q: usize,
    pub snr_dl_db: f64,
    pub t_c_grid: Vec<f64>,
    pub sigma_mis_deg: Vec<f64>,
    /// Pruning half-width in degrees; `None` means twice the estimator RMSE.
    pub delta_deg: Option<f64>,
    pub trials: usize,
    pub pilots: usize,
    pub sensing_beam: SensingBeam,
    pub select_from_union: bool,
    /// One mismatch draw shared by all users instead of one per user.
    pub common_mismatch: bool,
    pub schemes: Vec<Scheme>,
    pub power_ratio: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub delta_min: f64,
    pub doa_error: DoaErrorModel,
    /// Trials used to measure an estimator's RMSE when `delta_deg` is unset.
    pub calibration_trials: usize,
    pub seed: u64,
}

impl Default for BeamScenario {
    fn default() -> Self {
        Self {
            geometry: "ula64".into(),
            k: 10,
            q: 0,
            snr_dl_db: 10.0,
            t_c_grid: vec![50.0, 100.0, 200.0, 500.0, 1000.0],
            sigma_mis_deg: vec![0.0],
            delta_deg: None,
            trials: 10_000,
            pilots: 1,
            sensing_beam: SensingBeam::Direct,
            select_from_union: true,
            common_mismatch: true,
            schemes: Scheme::ALL.to_vec(),
            power_ratio: 10.0,
            theta_min: crate::sigsim::THETA_MIN,
            theta_max: crate::sigsim::THETA_MAX,
            delta_min: crate::sigsim::DELTA_MIN,
            // about what co-array Root-MUSIC reaches on this scene at 5 dB uplink SNR
            doa_error: DoaErrorModel::Synthetic { rmse: 0.025f64.to_radians() },
            calibration_trials: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamRow {
    pub scheme: Scheme,
    pub t_c: f64,
    pub sigma_mis_deg: f64,
    pub delta_deg: f64,
    pub mean_rate: f64,
    pub ci95: f64,
    pub mean_t_train: f64,
}

impl BeamScenario {
    fn estimates(&self, geom: &ArrayGeometry, theta: &[f64], powers: &[f64], trial: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        match &self.doa_error {
            DoaErrorModel::Synthetic { rmse } => Ok(theta
                .iter()
                .map(|&th| {
                    let e: f64 = StandardNormal.sample(rng);
                    (th + rmse * e).clamp(0.0, std::f64::consts::PI)
                })
                .collect()),
            DoaErrorModel::Estimated { estimator, snr_ul_db, t, modulation } => {
                let cfg = SourceConfig::new(theta.to_vec(), powers.to_vec(), *modulation)?;
                let batch = synthesize(geom, &cfg, *t, *snr_ul_db, seed::derive(self.seed, &[trial as u64, 2]))?;
                let mut est = estimator.estimate(geom, &batch, theta.len())?;
                est.sort_by(f64::total_cmp);
                Ok(est)
            }
        }
    }

    /// Uplink/downlink angles, powers and estimates of one trial; the
    /// mismatch term is `sigma_mis` times a shared standard normal draw.
    pub fn draw(&self, geom: &ArrayGeometry, trial: usize, sigma_mis: f64) -> Result<UserDraw> {
        let mut rng = seed::derived_rng(self.seed, &[trial as u64]);
        let theta_ul = sample_doas(self.k, self.theta_min, self.theta_max, self.delta_min, &mut rng)?;
        let powers = gen_powers(self.k, self.power_ratio, &mut rng)?;
        let shared: f64 = StandardNormal.sample(&mut rng);
        let theta_dl = theta_ul
            .iter()
            .map(|&th| {
                let e: f64 = StandardNormal.sample(&mut rng);
                th + sigma_mis * if self.common_mismatch { shared } else { e }
            })
            .collect();
        let mut est_rng = seed::derived_rng(self.seed, &[trial as u64, 1]);
        let estimates = self.estimates(geom, &theta_ul, &powers, trial, &mut est_rng)?;
        Ok(UserDraw { theta_ul, theta_dl, estimates, powers })
    }

    /// RMSE of the DOA error model (exact for the synthetic injector).
    pub fn estimator_rmse(&self, geom: &ArrayGeometry) -> Result<f64> {
        if let DoaErrorModel::Synthetic { rmse } = self.doa_error {
            return Ok(rmse);
        }
        let n = self.calibration_trials.max(1);
        let sq = (0..n)
            .into_par_iter()
            .map(|i| {
                let d = self.draw(geom, usize::MAX - i, 0.0)?;
                Ok(d.estimates.iter().zip(&d.theta_ul).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok((sq.iter().sum::<f64>() / (n * self.k) as f64).sqrt())
    }

    fn validate(&self) -> Result<ArrayGeometry> {
        let geom = ArrayGeometry::preset(&self.geometry)?;
        if self.k == 0 || self.k > geom.m() {
            return Err(Error::domain(format!("need 1 <= K <= M, got K = {}, M = {}", self.k, geom.m())));
        }
        if self.trials == 0 || self.t_c_grid.is_empty() || self.sigma_mis_deg.is_empty() || self.schemes.is_empty() {
            return Err(Error::domain("trials, t_c grid, mismatch grid and schemes must be nonempty"));
        }
        if self.t_c_grid.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::domain("coherence times must be positive"));
        }
        Ok(geom)
    }
}

/// Mean throughput per `(sigma_mis, scheme, t_c)`, in that nesting order.
pub fn run_beam_sim(sc: &BeamScenario) -> Result<Vec<BeamRow>> {
    let geom = sc.validate()?;
    let cb = type1_codebook(&geom, if sc.q == 0 { geom.m() } else { sc.q })?;
    let delta = match sc.delta_deg {
        Some(d) => d.to_radians(),
        None => 2.0 * sc.estimator_rmse(&geom)?,
    };
    let mut rows = Vec::new();
    for &sigma_deg in &sc.sigma_mis_deg {
        let sigma = sigma_deg.to_radians();
        // per trial, per scheme: (sinr sum-log terms, t_train, t_fb)
        let trials = (0..sc.trials)
            .into_par_iter()
            .map(|trial| {
                let draw = sc.draw(&geom, trial, sigma)?;
                sc.schemes
                    .iter()
                    .map(|&scheme| {
                        let params = LinkParams {
                            t_c: f64::INFINITY,
                            delta,
                            snr_dl_db: sc.snr_dl_db,
                            pilots: sc.pilots,
                            sensing_beam: sc.sensing_beam,
                            select_from_union: sc.select_from_union,
                        };
                        let mut rng = seed::derived_rng(sc.seed, &[trial as u64, 3, scheme as u64]);
                        downlink_trial(&geom, &cb, &draw, scheme, &params, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for (s, &scheme) in sc.schemes.iter().enumerate() {
            let mean_t_train = trials.iter().map(|t| t[s].t_train as f64).sum::<f64>() / sc.trials as f64;
            for &t_c in &sc.t_c_grid {
                let rates: Vec<f64> = trials
                    .iter()
                    .map(|t| throughput(t[s].t_train, t[s].t_fb, t_c, &t[s].sinr))
                    .collect();
                let (mean_rate, ci95) = mean_ci95(&rates);
                rows.push(BeamRow {
                    scheme,
                    t_c,
                    sigma_mis_deg: sigma_deg,
                    delta_deg: delta.to_degrees(),
                    mean_rate,
                    ci95,
                    mean_t_train,
                });
            }
        }
    }
    Ok(rows)
}

pub fn beam_csv(rows: &[BeamRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:e},{}",
            r.scheme.name(),
            r.t_c,
            r.sigma_mis_deg,
            r.delta_deg,
            r.mean_rate,
            r.ci95,
            r.mean_t_train
        );
    }
    s
}
