//! Run configuration. One TOML file may hold a section per subcommand;
//! unknown keys anywhere are rejected before any work starts.
//!
//! Defaults are desk-scale; full-scale values are noted beside each field.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use snapdoa_core::beam::{BeamScenario, DoaErrorModel, Scheme, SensingBeam};
use snapdoa_core::bench::{Estimator, GeneralizationAxis, SweepSpec};
use snapdoa_core::sigsim::{DatasetSpec, Modulation};
use snapdoa_core::snaptf::{SnapTfConfig, TrainConfig};
use snapdoa_core::{ArrayGeometry, Complex64};

use crate::error::CliError;

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub gen_data: GenDataConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub beam_sim: BeamConfig,
}

/// A preset name (`mra5`, `mra79`, `ula64`) or a literal index list.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum GeometrySpec {
    Preset(String),
    Indices(Vec<usize>),
}

impl GeometrySpec {
    /// Canonical string accepted by `ArrayGeometry::preset`.
    pub fn key(&self) -> String {
        match self {
            GeometrySpec::Preset(s) => s.clone(),
            GeometrySpec::Indices(v) => v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
        }
    }

    pub fn resolve(&self) -> Result<ArrayGeometry, CliError> {
        ArrayGeometry::preset(&self.key()).map_err(|e| CliError::Config(format!("geometry: {e}")))
    }
}

fn parse_modulation(s: &str) -> Result<Modulation, CliError> {
    s.parse().map_err(|_| CliError::Config(format!("unknown modulation {s:?} (gaussian, qpsk, qam16, mixed)")))
}

fn check_range(name: &str, r: [f64; 2]) -> Result<(), CliError> {
    if r[0] > r[1] || !r.iter().all(|v| v.is_finite()) {
        return Err(CliError::Config(format!("{name}: need finite [lo, hi] with lo <= hi")));
    }
    Ok(())
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub output: PathBuf,
    pub geometry: GeometrySpec,
    /// Full scale: 2e6 per K.
    pub records: usize,
    /// Inclusive source-count range; records cycle through it evenly.
    pub k_range: [usize; 2],
    pub k_max: usize,
    pub t: usize,
    pub snr_db: [f64; 2],
    pub modulation: String,
    /// Size of one coherent group per record (0 = independent sources).
    pub coherent: usize,
    pub alpha: f64,
    pub power_ratio: f64,
    pub theta_deg: [f64; 2],
    pub delta_min_deg: f64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            output: "train.snapdoa".into(),
            geometry: GeometrySpec::Preset("mra5".into()),
            records: 10_000,
            k_range: [3, 3],
            k_max: 9,
            t: 50,
            snr_db: [-20.0, 20.0],
            modulation: "qam16".into(),
            coherent: 0,
            alpha: 1.0,
            power_ratio: 10.0,
            theta_deg: [30.0, 150.0],
            delta_min_deg: 3.0,
        }
    }
}

impl GenDataConfig {
    pub fn to_spec(&self) -> Result<(ArrayGeometry, DatasetSpec), CliError> {
        let geom = self.geometry.resolve()?;
        check_range("snr_db", self.snr_db)?;
        check_range("theta_deg", self.theta_deg)?;
        if self.records == 0 {
            return Err(CliError::Config("records must be >= 1".into()));
        }
        let spec = DatasetSpec {
            records: self.records,
            k_lo: self.k_range[0],
            k_hi: self.k_range[1],
            k_max: self.k_max,
            t: self.t,
            snr_min_db: self.snr_db[0],
            snr_max_db: self.snr_db[1],
            modulation: parse_modulation(&self.modulation)?,
            theta_min: self.theta_deg[0].to_radians(),
            theta_max: self.theta_deg[1].to_radians(),
            delta_min: self.delta_min_deg.to_radians(),
            power_ratio: self.power_ratio,
            coherent: self.coherent,
            alpha: Complex64::new(self.alpha, 0.0),
        };
        Ok((geom, spec))
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// Per-epoch CSV: epoch, train_loss, val_loss, lr.
    pub curve: PathBuf,
    /// Continue from this checkpoint (its training state included).
    pub resume: Option<PathBuf>,
    pub layers: usize,
    pub d_model: usize,
    pub d_attn: usize,
    pub d_ff: usize,
    pub hidden_out: usize,
    pub k_max: usize,
    /// Full scale: 4096.
    pub batch_size: usize,
    /// Full scale: 100.
    pub epochs: usize,
    /// Full scale: 0.001.
    pub lr_max: f64,
    pub momentum: f64,
    pub loss_mask: bool,
    pub val_fraction: f64,
    pub schedule_div: f64,
    pub schedule_final_div: f64,
    pub schedule_warmup: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        let m = SnapTfConfig::modulated(5, 9);
        Self {
            dataset: "train.snapdoa".into(),
            checkpoint: "model.snaptf".into(),
            curve: "loss.csv".into(),
            resume: None,
            layers: m.layers,
            d_model: m.d_model,
            d_attn: m.d_attn,
            d_ff: m.d_ff,
            hidden_out: m.hidden_out,
            k_max: m.k_max,
            batch_size: 64,
            epochs: 5,
            lr_max: 0.01,
            momentum: 0.9,
            loss_mask: d.loss_mask,
            val_fraction: d.val_fraction,
            schedule_div: d.schedule_div,
            schedule_final_div: d.schedule_final_div,
            schedule_warmup: d.schedule_warmup,
        }
    }
}

impl TrainSection {
    pub fn model_config(&self, m: usize) -> SnapTfConfig {
        SnapTfConfig {
            layers: self.layers,
            d_model: self.d_model,
            d_attn: self.d_attn,
            d_ff: self.d_ff,
            hidden_out: self.hidden_out,
            k_max: self.k_max,
            m,
        }
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        if self.batch_size == 0 {
            return Err(CliError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_max >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(CliError::Config("need lr_max >= 0 and 0 <= momentum < 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CliError::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_max: self.lr_max,
            seed,
            loss_mask: self.loss_mask,
            momentum: self.momentum,
            val_fraction: self.val_fraction,
            schedule_div: self.schedule_div,
            schedule_final_div: self.schedule_final_div,
            schedule_warmup: self.schedule_warmup,
        })
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub output: PathBuf,
    /// Needed only when `methods` contains `snap_tf`.
    pub checkpoint: Option<PathBuf>,
    pub methods: Vec<String>,
    /// `snr`, `snapshots` or `modulation`.
    pub axis: String,
    pub geometry: GeometrySpec,
    pub snr_db: Vec<f64>,
    pub k: Vec<usize>,
    pub t: usize,
    /// Full scale: 1e4.
    pub trials: usize,
    pub modulation: String,
    pub coherent: usize,
    pub alpha: f64,
    pub power_ratio: f64,
    pub theta_deg: [f64; 2],
    pub delta_min_deg: f64,
    pub snapshots: Vec<usize>,
    pub modulations: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            output: "curves.csv".into(),
            checkpoint: None,
            methods: vec!["coarray_rootmusic".into()],
            axis: "snr".into(),
            geometry: GeometrySpec::Preset("mra5".into()),
            snr_db: vec![-20.0, -10.0, 0.0, 10.0, 20.0],
            k: vec![3],
            t: 50,
            trials: 200,
            modulation: "qam16".into(),
            coherent: 0,
            alpha: 1.0,
            power_ratio: 10.0,
            theta_deg: [30.0, 150.0],
            delta_min_deg: 3.0,
            snapshots: (1..=10).map(|i| 10 * i).collect(),
            modulations: vec!["qam16".into(), "qpsk".into(), "mixed".into()],
        }
    }
}

impl EvalConfig {
    pub fn sweep_spec(&self, seed: u64) -> Result<SweepSpec, CliError> {
        check_range("theta_deg", self.theta_deg)?;
        let spec = SweepSpec {
            snr_grid: self.snr_db.clone(),
            k_list: self.k.clone(),
            t: self.t,
            trials: self.trials,
            geometry: self.geometry.key(),
            modulation: parse_modulation(&self.modulation)?,
            coherent: self.coherent,
            alpha: Complex64::new(self.alpha, 0.0),
            power_ratio: self.power_ratio,
            theta_min: self.theta_deg[0].to_radians(),
            theta_max: self.theta_deg[1].to_radians(),
            delta_min: self.delta_min_deg.to_radians(),
            master_seed: seed,
        };
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn axis(&self) -> Result<Option<GeneralizationAxis>, CliError> {
        match self.axis.as_str() {
            "snr" => Ok(None),
            "snapshots" => Ok(Some(GeneralizationAxis::Snapshots(self.snapshots.clone()))),
            "modulation" => Ok(Some(GeneralizationAxis::Modulation(
                self.modulations.iter().map(|s| parse_modulation(s)).collect::<Result<_, _>>()?,
            ))),
            other => Err(CliError::Config(format!("unknown axis {other:?} (snr, snapshots, modulation)"))),
        }
    }

    /// Estimators in `methods` order; `snap_tf` loads the checkpoint.
    pub fn estimators(&self, base: &Path) -> Result<Vec<Estimator>, CliError> {
        if self.methods.is_empty() {
            return Err(CliError::Config("methods must be nonempty".into()));
        }
        self.methods
            .iter()
            .map(|m| match m.as_str() {
                "oracle" => Ok(Estimator::Oracle),
                "coarray_rootmusic" => Ok(Estimator::CoarrayRootMusic),
                "snap_tf" => {
                    let path = self
                        .checkpoint
                        .as_ref()
                        .ok_or_else(|| CliError::Config("method snap_tf needs eval.checkpoint".into()))?;
                    Ok(Estimator::snap_tf(crate::commands::load_model(&base.join(path))?))
                }
                other => Err(CliError::Config(format!(
                    "unknown method {other:?} (oracle, coarray_rootmusic, snap_tf)"
                ))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub output: PathBuf,
    pub geometry: GeometrySpec,
    pub k: usize,
    /// Codebook size; 0 means one beam per antenna.
    pub q: usize,
    pub snr_dl_db: f64,
    pub t_c: Vec<f64>,
    pub sigma_mis_deg: Vec<f64>,
    /// Pruning half-width; unset means twice the DOA RMSE.
    pub delta_deg: Option<f64>,
    /// Full scale: 1e4.
    pub trials: usize,
    pub pilots: usize,
    /// `direct` or `nearest`.
    pub sensing_beam: String,
    pub select_from_union: bool,
    pub common_mismatch: bool,
    pub schemes: Vec<String>,
    pub power_ratio: f64,
    pub theta_deg: [f64; 2],
    pub delta_min_deg: f64,
    /// `synthetic`, `rootmusic` or `checkpoint`.
    pub doa_error: String,
    pub doa_rmse_deg: f64,
    pub checkpoint: Option<PathBuf>,
    pub snr_ul_db: f64,
    pub t: usize,
    pub modulation: String,
    pub calibration_trials: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        let d = BeamScenario::default();
        Self {
            output: "throughput.csv".into(),
            geometry: GeometrySpec::Preset(d.geometry),
            k: d.k,
            q: d.q,
            snr_dl_db: d.snr_dl_db,
            t_c: d.t_c_grid,
            sigma_mis_deg: d.sigma_mis_deg,
            delta_deg: d.delta_deg,
            trials: 1000,
            pilots: d.pilots,
            sensing_beam: "direct".into(),
            select_from_union: d.select_from_union,
            common_mismatch: d.common_mismatch,
            schemes: Scheme::ALL.iter().map(|s| s.name().to_string()).collect(),
            power_ratio: d.power_ratio,
            theta_deg: [30.0, 150.0],
            delta_min_deg: 3.0,
            doa_error: "synthetic".into(),
            doa_rmse_deg: 0.025,
            checkpoint: None,
            snr_ul_db: 5.0,
            t: 100,
            modulation: "qam16".into(),
            calibration_trials: d.calibration_trials,
        }
    }
}

impl BeamConfig {
    pub fn scenario(&self, seed: u64, base: &Path) -> Result<BeamScenario, CliError> {
        let geom = self.geometry.resolve()?;
        if self.k == 0 || self.k > geom.m() {
            return Err(CliError::Config(format!("k = {} must lie in 1..={}", self.k, geom.m())));
        }
        check_range("theta_deg", self.theta_deg)?;
        let sensing_beam: SensingBeam = self.sensing_beam.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        let schemes = self
            .schemes
            .iter()
            .map(|s| s.parse::<Scheme>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let modulation = parse_modulation(&self.modulation)?;
        let doa_error = match self.doa_error.as_str() {
            "synthetic" => {
                if !(self.doa_rmse_deg >= 0.0) {
                    return Err(CliError::Config("doa_rmse_deg must be >= 0".into()));
                }
                DoaErrorModel::Synthetic { rmse: self.doa_rmse_deg.to_radians() }
            }
            "rootmusic" => DoaErrorModel::Estimated {
                estimator: Estimator::CoarrayRootMusic,
                snr_ul_db: self.snr_ul_db,
                t: self.t,
                modulation,
            },
            "checkpoint" => {
                let path = self
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| CliError::Config("doa_error = \"checkpoint\" needs beam_sim.checkpoint".into()))?;
                let model = crate::commands::load_model(&base.join(path))?;
                if model.config().m != geom.m() {
                    return Err(CliError::Mismatch(format!(
                        "checkpoint has m = {}, beam geometry has m = {}",
                        model.config().m,
                        geom.m()
                    )));
                }
                DoaErrorModel::Estimated { estimator: Estimator::snap_tf(model), snr_ul_db: self.snr_ul_db, t: self.t, modulation }
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown doa_error {other:?} (synthetic, rootmusic, checkpoint)"
                )))
            }
        };
        Ok(BeamScenario {
            geometry: self.geometry.key(),
            k: self.k,
            q: self.q,
            snr_dl_db: self.snr_dl_db,
            t_c_grid: self.t_c.clone(),
            sigma_mis_deg: self.sigma_mis_deg.clone(),
            delta_deg: self.delta_deg,
            trials: self.trials,
            pilots: self.pilots,
            sensing_beam,
            select_from_union: self.select_from_union,
            common_mismatch: self.common_mismatch,
            schemes,
            power_ratio: self.power_ratio,
            theta_min: self.theta_deg[0].to_radians(),
            theta_max: self.theta_deg[1].to_radians(),
            delta_min: self.delta_min_deg.to_radians(),
            doa_error,
            calibration_trials: self.calibration_trials,
            seed,
        })
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
