//! Source and snapshot generation.
//!
//! `Y = A(theta) diag(sqrt(p)) S + N`, where `p` holds per-source *powers*
//! and `N` is circular white Gaussian noise of per-entry variance `eta`.

mod dataset;

pub use dataset::{gen_dataset, Dataset, DatasetSpec, Record, DATASET_MAGIC};

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{response_matrix, ArrayGeometry};
use crate::linalg::CMatrix;
use crate::seed::{self, Rng};

/// Default field of view and minimum separation used throughout.
pub const THETA_MIN: f64 = PI / 6.0;
pub const THETA_MAX: f64 = 5.0 * PI / 6.0;
pub const DELTA_MIN: f64 = PI / 60.0;

const MAX_REJECTIONS: usize = 10_000;
const MAX_RESTARTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modulation {
    Gaussian,
    Qpsk,
    Qam16,
    /// Per-symbol fair coin between QPSK and 16QAM.
    Mixed,
}

impl Modulation {
    pub const ALL: [Modulation; 4] = [
        Modulation::Gaussian,
        Modulation::Qpsk,
        Modulation::Qam16,
        Modulation::Mixed,
    ];

    pub fn code(self) -> u8 {
        match self {
            Modulation::Gaussian => 0,
            Modulation::Qpsk => 1,
            Modulation::Qam16 => 2,
            Modulation::Mixed => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.code() == code)
            .ok_or_else(|| Error::Format(format!("unknown modulation code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Gaussian => "gaussian",
            Modulation::Qpsk => "qpsk",
            Modulation::Qam16 => "qam16",
            Modulation::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown modulation `{s}`")))
    }
}

/// A coherent group: each member's symbol stream is `alpha` times the leader's.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceGroup {
    pub leader: usize,
    pub members: Vec<(usize, Complex64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceConfig {
    /// Sorted ascending, radians.
    pub thetas: Vec<f64>,
    /// Non-negative powers, one per source.
    pub powers: Vec<f64>,
    pub modulation: Modulation,
    pub coherence: Vec<CoherenceGroup>,
}

impl SourceConfig {
    pub fn new(thetas: Vec<f64>, powers: Vec<f64>, modulation: Modulation) -> Result<Self> {
        let cfg = Self {
            thetas,
            powers,
            modulation,
            coherence: Vec::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn k(&self) -> usize {
        self.thetas.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.thetas.is_empty() {
            return Err(Error::domain("source config needs at least one source"));
        }
        if self.powers.len() != self.thetas.len() {
            return Err(Error::domain("one power per source required"));
        }
        if self.thetas.iter().any(|t| !(0.0..=PI).contains(t)) {
            return Err(Error::domain("source angle outside [0, pi]"));
        }
        if self.thetas.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::domain("source angles must be sorted"));
        }
        if self.powers.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::domain("powers must be finite and non-negative"));
        }
        check_groups(self.k(), &self.coherence)
    }

    pub fn mean_power(&self) -> f64 {
        self.powers.iter().sum::<f64>() / self.powers.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct SnapshotBatch {
    /// `m x t` received snapshots.
    pub y: CMatrix,
    pub snr_db: f64,
    pub noise_power: f64,
    pub truth: SourceConfig,
    pub seed: u64,
}

impl SnapshotBatch {
    pub fn t(&self) -> usize {
        self.y.ncols()
    }
}

/// Dart-throwing Poisson-disk sampler on an interval; returns sorted angles.
pub fn sample_doas(
    k: usize,
    theta_min: f64,
    theta_max: f64,
    delta_min: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::domain("need at least one source"));
    }
    if !(theta_max > theta_min) || delta_min < 0.0 {
        return Err(Error::domain("invalid angle interval"));
    }
    if (k - 1) as f64 * delta_min > theta_max - theta_min {
        return Err(Error::domain(format!(
            "{k} sources with separation {delta_min} do not fit in [{theta_min}, {theta_max}]"
        )));
    }
    for _ in 0..MAX_RESTARTS {
        let mut accepted: Vec<f64> = Vec::with_capacity(k);
        let mut rejections = 0;
        while accepted.len() < k && rejections < MAX_REJECTIONS {
            let cand = rng.random_range(theta_min..=theta_max);
            if accepted.iter().all(|a| (a - cand).abs() >= delta_min) {
                accepted.push(cand);
                rejections = 0;
            } else {
                rejections += 1;
            }
        }
        if accepted.len() == k {
            accepted.sort_by(f64::total_cmp);
            return Ok(accepted);
        }
    }
    Err(Error::Numerical(format!(
        "Poisson-disk sampling of {k} angles failed after {MAX_RESTARTS} restarts"
    )))
}

const QAM16_LEVELS: [f64; 4] = [-3.0, -1.0, 1.0, 3.0];

fn qam16(rng: &mut Rng) -> Complex64 {
    let scale = 1.0 / 10f64.sqrt();
    let re = QAM16_LEVELS[rng.random_range(0..4)];
    let im = QAM16_LEVELS[rng.random_range(0..4)];
    Complex64::new(re * scale, im * scale)
}

fn qpsk(rng: &mut Rng) -> Complex64 {
    let re = if rng.random::<bool>() { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
    let im = if rng.random::<bool>() { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
    Complex64::new(re, im)
}

/// Circularly-symmetric complex Gaussian with `E|z|^2 = var`.
pub fn complex_gaussian(rng: &mut Rng, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// `k x t` i.i.d. unit-average-power symbols.
pub fn gen_symbols(modulation: Modulation, k: usize, t: usize, rng: &mut Rng) -> Result<CMatrix> {
    if k == 0 || t == 0 {
        return Err(Error::domain("symbol matrix needs k, t >= 1"));
    }
    // Row-major draw order so a source's stream does not depend on t of others.
    let mut s = CMatrix::zeros(k, t);
    for i in 0..k {
        for j in 0..t {
            s[(i, j)] = match modulation {
                Modulation::Gaussian => complex_gaussian(rng, 1.0),
                Modulation::Qpsk => qpsk(rng),
                Modulation::Qam16 => qam16(rng),
                Modulation::Mixed => {
                    if rng.random::<bool>() {
                        qpsk(rng)
                    } else {
                        qam16(rng)
                    }
                }
            };
        }
    }
    Ok(s)
}

/// Uniform draws on `[1, ratio_max]`, rescaled to unit mean.
pub fn gen_powers(k: usize, ratio_max: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if k == 0 || !(ratio_max >= 1.0) {
        return Err(Error::domain("gen_powers needs k >= 1 and ratio_max >= 1"));
    }
    let raw: Vec<f64> = (0..k)
        .map(|_| {
            if ratio_max == 1.0 {
                1.0
            } else {
                rng.random_range(1.0..=ratio_max)
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|p| k as f64 * p / total).collect())
}

fn check_groups(k: usize, groups: &[CoherenceGroup]) -> Result<()> {
    let mut seen = vec![false; k];
    for g in groups {
        for idx in std::iter::once(g.leader).chain(g.members.iter().map(|m| m.0)) {
            if idx >= k {
                return Err(Error::domain(format!("coherence index {idx} >= k = {k}")));
            }
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::domain(format!("source {idx} in two coherence roles")));
            }
        }
        for &(_, alpha) in &g.members {
            if !alpha.is_finite() || alpha == Complex64::new(0.0, 0.0) {
                return Err(Error::domain("coherence coefficient must be finite and nonzero"));
            }
        }
    }
    Ok(())
}

/// Replace each non-leader row by `alpha` times its leader's row.
pub fn apply_coherence(symbols: &CMatrix, groups: &[CoherenceGroup]) -> Result<CMatrix> {
    check_groups(symbols.nrows(), groups)?;
    let mut out = symbols.clone();
    for g in groups {
        for &(member, alpha) in &g.members {
            for t in 0..out.ncols() {
                out[(member, t)] = symbols[(g.leader, t)] * alpha;
            }
        }
    }
    Ok(out)
}

/// Draw a single coherent group of `size` sources (random subset, random
/// leader) sharing coefficient `alpha`.
pub fn random_coherence_group(
    k: usize,
    size: usize,
    alpha: Complex64,
    rng: &mut Rng,
) -> Result<Vec<CoherenceGroup>> {
    if size < 2 {
        return Ok(Vec::new());
    }
    if size > k {
        return Err(Error::domain(format!("coherent group of {size} exceeds k = {k}")));
    }
    let mut idx: Vec<usize> = (0..k).collect();
    idx.shuffle(rng);
    Ok(vec![CoherenceGroup {
        leader: idx[0],
        members: idx[1..size].iter().map(|&i| (i, alpha)).collect(),
    }])
}

/// Noise power giving `10 log10(mean(p) / eta) = snr_db`; `+inf` dB is noiseless.
pub fn noise_power_for(mean_power: f64, snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        return 0.0;
    }
    let reference = if mean_power > 0.0 { mean_power } else { 1.0 };
    reference * 10f64.powf(-snr_db / 10.0)
}

/// Draws symbols for `config`, applies its coherence groups, and mixes them
/// through the array with additive noise at `snr_db`.
pub fn synthesize(
    geom: &ArrayGeometry,
    config: &SourceConfig,
    t: usize,
    snr_db: f64,
    seed: u64,
) -> Result<SnapshotBatch> {
    config.validate()?;
    let mut rng = seed::rng(seed);
    let symbols = gen_symbols(config.modulation, config.k(), t, &mut rng)?;
    let symbols = apply_coherence(&symbols, &config.coherence)?;
    let eta = noise_power_for(config.mean_power(), snr_db);
    let y = mix(geom, config, &symbols, eta, &mut rng)?;
    Ok(SnapshotBatch {
        y,
        snr_db,
        noise_power: eta,
        truth: config.clone(),
        seed,
    })
}

/// `A diag(sqrt(p)) S + N` with caller-supplied symbols.
pub fn mix(
    geom: &ArrayGeometry,
    config: &SourceConfig,
    symbols: &CMatrix,
    noise_power: f64,
    rng: &mut Rng,
) -> Result<CMatrix> {
    if symbols.nrows() != config.k() {
        return Err(Error::shape(format!(
            "symbols have {} rows for {} sources",
            symbols.nrows(),
            config.k()
        )));
    }
    let mut a = response_matrix(geom, &config.thetas)?;
    for (k, p) in config.powers.iter().enumerate() {
        let amp = p.sqrt();
        a.column_mut(k).iter_mut().for_each(|z| *z *= amp);
    }
    let mut y = a * symbols;
    if noise_power > 0.0 {
        // Column-major walk: snapshot by snapshot.
        for z in y.iter_mut() {
            *z += complex_gaussian(rng, noise_power);
        }
    }
    Ok(y)
}
