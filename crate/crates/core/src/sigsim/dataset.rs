//! `SNAPDOA1` dataset files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8 bytes  "SNAPDOA1"
//! m, t, k_max, record_count   u32 x 4
//! modulation u8       (0 gaussian, 1 qpsk, 2 qam16, 3 mixed)
//! records:
//!   k        u16
//!   doas     k x f64  (sorted, radians)
//!   powers   k x f64
//!   y        m*t x (f32 re, f32 im), column-major (snapshot by snapshot)
//! ```

use std::io::{self, Read, Write};

use num_complex::Complex64;
use rand::Rng as _;
use rayon::prelude::*;

use super::{
    gen_powers, mix, random_coherence_group, sample_doas, Modulation, SourceConfig, DELTA_MIN,
    THETA_MAX, THETA_MIN,
};
use crate::error::{Error, Result};
use crate::geometry::ArrayGeometry;
use crate::linalg::CMatrix;
use crate::seed;

pub const DATASET_MAGIC: &[u8; 8] = b"SNAPDOA1";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub doas: Vec<f64>,
    pub powers: Vec<f64>,
    /// Interleaved `(re, im)` pairs, column-major.
    pub y: Vec<[f32; 2]>,
}

impl Record {
    pub fn k(&self) -> usize {
        self.doas.len()
    }

    pub fn snapshots(&self, m: usize, t: usize) -> CMatrix {
        CMatrix::from_iterator(
            m,
            t,
            self.y.iter().map(|&[re, im]| Complex64::new(re as f64, im as f64)),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub m: usize,
    pub t: usize,
    pub k_max: usize,
    pub modulation: Modulation,
    pub records: Vec<Record>,
}

/// What to generate. Record `i` carries `k_lo + i mod (k_hi - k_lo + 1)`
/// sources, so a record count divisible by the range gives equal counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub records: usize,
    pub k_lo: usize,
    pub k_hi: usize,
    /// Label width; `>= k_hi`.
    pub k_max: usize,
    pub t: usize,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub modulation: Modulation,
    pub theta_min: f64,
    pub theta_max: f64,
    pub delta_min: f64,
    pub power_ratio: f64,
    /// Size of one coherent group per record (`< 2` disables coherence).
    pub coherent: usize,
    pub alpha: Complex64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            records: 10_000,
            k_lo: 3,
            k_hi: 3,
            k_max: 9,
            t: 50,
            snr_min_db: -20.0,
            snr_max_db: 20.0,
            modulation: Modulation::Qam16,
            theta_min: THETA_MIN,
            theta_max: THETA_MAX,
            delta_min: DELTA_MIN,
            power_ratio: 10.0,
            coherent: 0,
            alpha: Complex64::new(1.0, 0.0),
        }
    }
}

impl DatasetSpec {
    fn validate(&self, geom: &ArrayGeometry) -> Result<()> {
        if self.k_lo == 0 || self.k_lo > self.k_hi || self.k_hi > self.k_max {
            return Err(Error::domain(format!(
                "need 1 <= k_lo <= k_hi <= k_max, got {} {} {}",
                self.k_lo, self.k_hi, self.k_max
            )));
        }
        if self.k_max > u16::MAX as usize || geom.m() > u32::MAX as usize {
            return Err(Error::domain("dataset dimensions overflow the file header"));
        }
        if self.t == 0 {
            return Err(Error::domain("t must be >= 1"));
        }
        if self.snr_min_db > self.snr_max_db {
            return Err(Error::domain("snr_min_db > snr_max_db"));
        }
        if (self.k_hi - 1) as f64 * self.delta_min > self.theta_max - self.theta_min {
            return Err(Error::domain("infeasible DOA separation for k_hi"));
        }
        Ok(())
    }

    /// Sources, powers, SNR and the snapshot matrix of record `index`.
    pub fn draw(
        &self,
        geom: &ArrayGeometry,
        master_seed: u64,
        index: usize,
    ) -> Result<(SourceConfig, f64, CMatrix)> {
        let mut rng = seed::derived_rng(master_seed, &[index as u64]);
        let span = self.k_hi - self.k_lo + 1;
        let k = self.k_lo + index % span;
        let thetas = sample_doas(k, self.theta_min, self.theta_max, self.delta_min, &mut rng)?;
        let powers = gen_powers(k, self.power_ratio, &mut rng)?;
        let snr_db = if self.snr_max_db > self.snr_min_db {
            rng.random_range(self.snr_min_db..=self.snr_max_db)
        } else {
            self.snr_min_db
        };
        let mut cfg = SourceConfig::new(thetas, powers, self.modulation)?;
        cfg.coherence = random_coherence_group(k, self.coherent.min(k), self.alpha, &mut rng)?;
        let symbols = super::gen_symbols(self.modulation, k, self.t, &mut rng)?;
        let symbols = super::apply_coherence(&symbols, &cfg.coherence)?;
        let eta = super::noise_power_for(cfg.mean_power(), snr_db);
        let y = mix(geom, &cfg, &symbols, eta, &mut rng)?;
        Ok((cfg, snr_db, y))
    }
}

/// Generate a dataset; records are independent of worker scheduling.
pub fn gen_dataset(geom: &ArrayGeometry, spec: &DatasetSpec, master_seed: u64) -> Result<Dataset> {
    spec.validate(geom)?;
    let records = (0..spec.records)
        .into_par_iter()
        .map(|i| {
            let (cfg, _, y) = spec.draw(geom, master_seed, i)?;
            Ok(Record {
                doas: cfg.thetas,
                powers: cfg.powers,
                y: y.iter().map(|z| [z.re as f32, z.im as f32]).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        m: geom.m(),
        t: spec.t,
        k_max: spec.k_max,
        modulation: spec.modulation,
        records,
    })
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format("truncated dataset file".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r)?))
}

impl Dataset {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        for v in [self.m, self.t, self.k_max, self.records.len()] {
            let v = u32::try_from(v).map_err(|_| Error::domain("header field overflows u32"))?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[self.modulation.code()])?;
        for rec in &self.records {
            if rec.k() > self.k_max || rec.powers.len() != rec.k() {
                return Err(Error::domain("record inconsistent with header"));
            }
            if rec.y.len() != self.m * self.t {
                return Err(Error::shape("record snapshot size"));
            }
            w.write_all(&(rec.k() as u16).to_le_bytes())?;
            for v in rec.doas.iter().chain(&rec.powers) {
                w.write_all(&v.to_le_bytes())?;
            }
            for [re, im] in &rec.y {
                w.write_all(&re.to_le_bytes())?;
                w.write_all(&im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let (m, t, k_max, count, modulation) = Self::read_header(r)?;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let k = u16::from_le_bytes(read_array(r)?) as usize;
            if k > k_max {
                return Err(Error::Format(format!("record has k = {k} > k_max = {k_max}")));
            }
            let doas = (0..k).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            let powers = (0..k).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            let y = (0..m * t)
                .map(|_| {
                    let b: [u8; 8] = read_array(r)?;
                    Ok([
                        f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
                        f32::from_le_bytes([b[4], b[5], b[6], b[7]]),
                    ])
                })
                .collect::<Result<Vec<_>>>()?;
            records.push(Record { doas, powers, y });
        }
        Ok(Self { m, t, k_max, modulation, records })
    }

    /// `(m, t, k_max, record_count, modulation)`.
    pub fn read_header(r: &mut impl Read) -> Result<(usize, usize, usize, usize, Modulation)> {
        let magic: [u8; 8] = read_array(r)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a SNAPDOA1 dataset".into()));
        }
        let m = read_u32(r)? as usize;
        let t = read_u32(r)? as usize;
        let k_max = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let [code] = read_array::<1>(r)?;
        Ok((m, t, k_max, count, Modulation::from_code(code)?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut r = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}
