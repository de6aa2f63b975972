use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Read};
use std::path::Path;

use snapdoa_core::beam::{beam_csv, run_beam_sim};
use snapdoa_core::bench::{run_generalization, run_sweep, to_csv};
use snapdoa_core::sigsim::{gen_dataset, Dataset, DATASET_MAGIC};
use snapdoa_core::snaptf::{
    read_checkpoint_header, save_checkpoint, train_epochs, TrainReport, CHECKPOINT_MAGIC,
};
use snapdoa_core::SnapTfModel;

use crate::config::{BeamConfig, EvalConfig, GenDataConfig, TrainSection};
use crate::error::CliError;

pub fn load_model(path: &Path) -> Result<SnapTfModel, CliError> {
    SnapTfModel::load(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

pub fn gen_data(cfg: &GenDataConfig, seed: u64) -> Result<String, CliError> {
    let (geom, spec) = cfg.to_spec()?;
    let ds = gen_dataset(&geom, &spec, seed)?;
    write(&cfg.output, ds.to_bytes()?)?;
    Ok(format!(
        "wrote {} records (m = {}, t = {}, k {}..={}) to {}",
        ds.records.len(),
        ds.m,
        ds.t,
        spec.k_lo,
        spec.k_hi,
        cfg.output.display()
    ))
}

pub fn loss_curve_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for e in &report.epochs {
        let _ = writeln!(s, "{},{:e},{:e},{:e}", e.epoch, e.train_loss, e.val_loss, e.lr);
    }
    s
}

pub fn train_cmd(cfg: &TrainSection, seed: u64, stop_after: Option<usize>) -> Result<String, CliError> {
    let ds = Dataset::load(&cfg.dataset).map_err(|e| CliError::Other(format!("{}: {e}", cfg.dataset.display())))?;
    let tcfg = cfg.train_config(seed)?;
    let (mut model, state) = match &cfg.resume {
        Some(path) => SnapTfModel::load_with_state(path)
            .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?,
        None => (SnapTfModel::init(cfg.model_config(ds.m), seed)?, None),
    };
    if model.config().m != ds.m {
        return Err(CliError::Mismatch(format!(
            "dataset has m = {}, model expects m = {}",
            ds.m,
            model.config().m
        )));
    }
    let until = stop_after.map_or(tcfg.epochs, |n| n.min(tcfg.epochs));
    let report = train_epochs(&mut model, &ds, &tcfg, state, until)?;
    save_checkpoint(&model, &report.state, &cfg.checkpoint)?;
    write(&cfg.curve, loss_curve_csv(&report))?;
    let last = report
        .epochs
        .last()
        .map(|e| format!("epoch {} train {:.4e} val {:.4e}", e.epoch, e.train_loss, e.val_loss))
        .unwrap_or_else(|| "no epochs run".into());
    Ok(format!(
        "{} parameters; {last}; checkpoint {}",
        model.parameter_count(),
        cfg.checkpoint.display()
    ))
}

pub fn eval_cmd(cfg: &EvalConfig, seed: u64, base: &Path) -> Result<String, CliError> {
    let spec = cfg.sweep_spec(seed)?;
    let axis = cfg.axis()?;
    let estimators = cfg.estimators(base)?;
    let points = match axis {
        None => run_sweep(&spec, &estimators)?,
        Some(axis) => run_generalization(&spec, &axis, &estimators)?,
    };
    write(&cfg.output, to_csv(&points))?;
    Ok(format!("wrote {} curve points to {}", points.len(), cfg.output.display()))
}

pub fn beam_sim_cmd(cfg: &BeamConfig, seed: u64, base: &Path) -> Result<String, CliError> {
    let sc = cfg.scenario(seed, base)?;
    let rows = run_beam_sim(&sc)?;
    write(&cfg.output, beam_csv(&rows))?;
    Ok(format!("wrote {} throughput rows to {}", rows.len(), cfg.output.display()))
}

/// Header summary of a dataset or checkpoint file.
pub fn inspect(path: &Path) -> Result<String, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| CliError::Other(format!("{}: too short to be a snapdoa file", path.display())))?;
    let mut whole = std::io::Cursor::new(magic).chain(r);
    if &magic == DATASET_MAGIC {
        let (m, t, k_max, count, modulation) = Dataset::read_header(&mut whole)?;
        Ok(format!(
            "dataset {}\n  m = {m}\n  t = {t}\n  k_max = {k_max}\n  records = {count}\n  modulation = {modulation}",
            path.display()
        ))
    } else if &magic == CHECKPOINT_MAGIC {
        let c = read_checkpoint_header(&mut whole)?;
        Ok(format!(
            "checkpoint {}\n  layers = {}\n  d_model = {}\n  d_attn = {}\n  d_ff = {}\n  hidden_out = {}\n  k_max = {}\n  m = {}\n  parameters = {}",
            path.display(),
            c.layers,
            c.d_model,
            c.d_attn,
            c.d_ff,
            c.hidden_out,
            c.k_max,
            c.m,
            c.parameter_count()
        ))
    } else {
        Err(CliError::Other(format!("{}: unrecognised file magic", path.display())))
    }
}
