//! Permutation-invariant transformer over snapshots.
//!
//! Each snapshot (column of `Y`) becomes a token `[Re y; Im y]`, is embedded
//! to `d_model` features and passed through `layers` single-head attention
//! blocks (residual + column layer norm, then a ReLU feed-forward block with
//! residual + layer norm). Tokens are mean-pooled and an MLP head emits
//! `k_max` angles; the first `k` are the estimate. There is no positional
//! encoding, so the output does not depend on snapshot order or count.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::nn::optim::{OneCycle, Sgd};
use crate::nn::tape::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::seed;
use crate::sigsim::Dataset;
use crate::subspace::DoaEstimate;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SNAPTF01";
pub const TRAIN_STATE_MAGIC: &[u8; 8] = b"TRAINST1";

/// Records per gradient work unit; fixed so the reduction order never
/// depends on the number of threads.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SnapTfConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_attn: usize,
    pub d_ff: usize,
    pub hidden_out: usize,
    pub k_max: usize,
    /// Physical antennas.
    pub m: usize,
}

impl SnapTfConfig {
    /// Defaults for modulated (non-Gaussian) symbols: three layers.
    pub fn modulated(m: usize, k_max: usize) -> Self {
        Self { layers: 3, d_model: 96, d_attn: 96, d_ff: 384, hidden_out: 200, k_max, m }
    }

    /// Defaults for Gaussian symbols: two layers.
    pub fn gaussian(m: usize, k_max: usize) -> Self {
        Self { layers: 2, ..Self::modulated(m, k_max) }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.layers,
            self.d_model,
            self.d_attn,
            self.d_ff,
            self.hidden_out,
            self.k_max,
            self.m,
        ];
        if fields.contains(&0) {
            return Err(Error::domain(format!("all model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Trainable scalars implied by the layer shapes.
    pub fn parameter_count(&self) -> usize {
        let (d, a, f, h) = (self.d_model, self.d_attn, self.d_ff, self.hidden_out);
        let embed = 2 * self.m * d + d;
        let layer = 2 * a * d + d * d + 4 * d + (f * d + f) + (d * f + d);
        let head = (h * d + h) + (self.k_max * h + self.k_max);
        embed + self.layers * layer + head
    }
}

/// Layers needed to expose interactions up to order `2k`: `ceil(log2(k + 1))`.
pub fn depth_for_sources(k: usize) -> usize {
    let mut l = 0;
    while (1usize << l) < k + 1 {
        l += 1;
    }
    l
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embed_w: ParamId,
    embed_b: ParamId,
    layers: Vec<LayerIds>,
    head_w3: ParamId,
    head_b3: ParamId,
    head_w4: ParamId,
    head_b4: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapTfModel {
    config: SnapTfConfig,
    params: ParamStore,
    layout: Layout,
}

enum Init {
    Glorot,
    Zeros,
    Ones,
}

/// Builds the store in the checkpoint's fixed parameter order.
fn build(config: &SnapTfConfig, mut fill: impl FnMut(&str, usize, usize, Init) -> Tensor) -> (ParamStore, Layout) {
    let mut store = ParamStore::new();
    let mut add = |store: &mut ParamStore, name: String, r: usize, c: usize, init: Init| {
        let t = fill(&name, r, c, init);
        store.add(name, t)
    };
    let (d, a, f, h) = (config.d_model, config.d_attn, config.d_ff, config.hidden_out);
    let embed_w = add(&mut store, "embed.w".into(), d, 2 * config.m, Init::Glorot);
    let embed_b = add(&mut store, "embed.b".into(), d, 1, Init::Zeros);
    let layers = (0..config.layers)
        .map(|l| {
            let p = |s: &str| format!("layer{l}.{s}");
            LayerIds {
                wq: add(&mut store, p("wq"), a, d, Init::Glorot),
                wk: add(&mut store, p("wk"), a, d, Init::Glorot),
                wv: add(&mut store, p("wv"), d, d, Init::Glorot),
                ln1_gain: add(&mut store, p("ln1.gain"), d, 1, Init::Ones),
                ln1_bias: add(&mut store, p("ln1.bias"), d, 1, Init::Zeros),
                ff1_w: add(&mut store, p("ff1.w"), f, d, Init::Glorot),
                ff1_b: add(&mut store, p("ff1.b"), f, 1, Init::Zeros),
                ff2_w: add(&mut store, p("ff2.w"), d, f, Init::Glorot),
                ff2_b: add(&mut store, p("ff2.b"), d, 1, Init::Zeros),
                ln2_gain: add(&mut store, p("ln2.gain"), d, 1, Init::Ones),
                ln2_bias: add(&mut store, p("ln2.bias"), d, 1, Init::Zeros),
            }
        })
        .collect();
    let head_w3 = add(&mut store, "head.w3".into(), h, d, Init::Glorot);
    let head_b3 = add(&mut store, "head.b3".into(), h, 1, Init::Zeros);
    let head_w4 = add(&mut store, "head.w4".into(), config.k_max, h, Init::Glorot);
    let head_b4 = add(&mut store, "head.b4".into(), config.k_max, 1, Init::Zeros);
    (
        store,
        Layout { embed_w, embed_b, layers, head_w3, head_b3, head_w4, head_b4 },
    )
}

/// Stack `[Re Y; Im Y]` into a `2m x T` real tensor.
pub fn tokens(y: &CMatrix) -> Tensor {
    let (m, t) = (y.nrows(), y.ncols());
    let mut data = vec![0.0; 2 * m * t];
    for i in 0..m {
        for j in 0..t {
            let z = y[(i, j)];
            data[i * t + j] = z.re;
            data[(m + i) * t + j] = z.im;
        }
    }
    Tensor { rows: 2 * m, cols: t, data }
}

/// Sorted DOAs zero-padded to `k_max`.
pub fn label(doas: &[f64], k_max: usize) -> Vec<f64> {
    let mut l = doas.to_vec();
    l.sort_by(f64::total_cmp);
    l.resize(k_max, 0.0);
    l
}

impl SnapTfModel {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(config: SnapTfConfig, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::derived_rng(rng_seed, &[0x1417]);
        let (params, layout) = build(&config, |_, r, c, init| match init {
            Init::Zeros => Tensor::zeros(r, c),
            Init::Ones => Tensor::filled(r, c, 1.0),
            Init::Glorot => {
                let bound = (6.0 / (r + c) as f64).sqrt();
                Tensor {
                    rows: r,
                    cols: c,
                    data: (0..r * c).map(|_| rng.random_range(-bound..bound)).collect(),
                }
            }
        });
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &SnapTfConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Records the forward pass on `tape`; returns the `k_max x 1` output.
    pub fn forward_tape(&self, tape: &mut Tape<'_>, input: Tensor) -> Result<Var> {
        if input.rows != 2 * self.config.m {
            return Err(Error::Mismatch(format!(
                "model expects {} antennas, input has {}",
                self.config.m,
                input.rows / 2
            )));
        }
        if input.cols == 0 {
            return Err(Error::domain("need at least one snapshot"));
        }
        let ids = &self.layout;
        let x = tape.constant(input);
        let w = tape.param(ids.embed_w);
        let b = tape.param(ids.embed_b);
        let e = tape.matmul(w, x)?;
        let mut s = tape.add_broadcast(e, b)?;
        let inv_sqrt = 1.0 / (self.config.d_attn as f64).sqrt();

        for l in &ids.layers {
            let wq = tape.param(l.wq);
            let wk = tape.param(l.wk);
            let wv = tape.param(l.wv);
            let q = tape.matmul(wq, s)?;
            let k = tape.matmul(wk, s)?;
            let v = tape.matmul(wv, s)?;
            let scores = tape.matmul_t(k, q, true, false)?;
            let scores = tape.scale(scores, inv_sqrt);
            let attn = tape.softmax_cols(scores);
            let mixed = tape.matmul(v, attn)?;
            let res = tape.add_broadcast(s, mixed)?;
            let g1 = tape.param(l.ln1_gain);
            let b1 = tape.param(l.ln1_bias);
            let z = tape.layernorm_cols(res, g1, b1)?;

            let w1 = tape.param(l.ff1_w);
            let c1 = tape.param(l.ff1_b);
            let w2 = tape.param(l.ff2_w);
            let c2 = tape.param(l.ff2_b);
            let h = tape.matmul(w1, z)?;
            let h = tape.add_broadcast(h, c1)?;
            let h = tape.relu(h);
            let f = tape.matmul(w2, h)?;
            let f = tape.add_broadcast(f, c2)?;
            let res = tape.add_broadcast(z, f)?;
            let g2 = tape.param(l.ln2_gain);
            let b2 = tape.param(l.ln2_bias);
            s = tape.layernorm_cols(res, g2, b2)?;
        }

        let pooled = tape.mean_cols(s);
        let w3 = tape.param(ids.head_w3);
        let b3 = tape.param(ids.head_b3);
        let w4 = tape.param(ids.head_w4);
        let b4 = tape.param(ids.head_b4);
        let h = tape.matmul(w3, pooled)?;
        let h = tape.add_broadcast(h, b3)?;
        let h = tape.relu(h);
        let o = tape.matmul(w4, h)?;
        tape.add_broadcast(o, b4)
    }

    /// All `k_max` raw outputs for snapshots `y` (`m x T`).
    pub fn predict(&self, y: &CMatrix) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.params);
        let out = self.forward_tape(&mut tape, tokens(y))?;
        Ok(tape.value(out).to_vec())
    }

    /// First `k` outputs, sorted.
    pub fn forward(&self, y: &CMatrix, k: usize) -> Result<DoaEstimate> {
        if k == 0 || k > self.config.k_max {
            return Err(Error::domain(format!(
                "k = {k} outside 1..={}",
                self.config.k_max
            )));
        }
        let mut out = self.predict(y)?;
        out.truncate(k);
        Ok(DoaEstimate::new(out, "snap_tf"))
    }

    /// Loss and parameter gradients for one record.
    fn record_grad(
        &self,
        input: Tensor,
        target: &[f64],
        weights: Option<&[f64]>,
        acc: &mut [Tensor],
    ) -> Result<f64> {
        let mut tape = Tape::with_params(&self.params);
        let out = self.forward_tape(&mut tape, input)?;
        let loss = tape.mse(out, target, weights)?;
        let value = tape.value(loss)[0];
        tape.backward(loss)?.accumulate_into(acc, 1.0);
        Ok(value)
    }

    fn record_loss(&self, input: Tensor, target: &[f64], weights: Option<&[f64]>) -> Result<f64> {
        let mut tape = Tape::with_params(&self.params);
        let out = self.forward_tape(&mut tape, input)?;
        let loss = tape.mse(out, target, weights)?;
        Ok(tape.value(loss)[0])
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.write_with_state(w, None)
    }

    fn write_with_state(&self, w: &mut impl Write, state: Option<&TrainState>) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let c = &self.config;
        for v in [c.layers, c.d_model, c.d_attn, c.d_ff, c.hidden_out, c.k_max, c.m] {
            write_u32(w, v)?;
        }
        write_u32(w, self.params.len())?;
        for (name, t) in self.params.iter() {
            write_blob(w, name, t)?;
        }
        if let Some(state) = state {
            w.write_all(TRAIN_STATE_MAGIC)?;
            write_u32(w, state.epochs_done)?;
            write_u32(w, state.velocity.len())?;
            for ((name, _), t) in self.params.iter().zip(&state.velocity) {
                write_blob(w, name, t)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    /// Reads a checkpoint; a trailing training state, if present, is returned too.
    pub fn read_from(r: &mut impl Read) -> Result<(Self, Option<TrainState>)> {
        let config = read_checkpoint_header(r)?;
        config.validate()?;
        let count = read_u32(r)?;
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            blobs.push(read_blob(r)?);
        }
        let mut blobs = blobs.into_iter();
        let mut failure = None;
        let (params, layout) = build(&config, |name, rows, cols, _| match blobs.next() {
            Some((n, t)) if n == name && t.rows == rows && t.cols == cols => t,
            other => {
                failure.get_or_insert_with(|| {
                    format!(
                        "expected parameter {name} ({rows}x{cols}), found {:?}",
                        other.map(|(n, t)| (n, t.rows, t.cols))
                    )
                });
                Tensor::zeros(rows, cols)
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Format(msg));
        }
        if blobs.next().is_some() {
            return Err(Error::Format("unexpected extra parameters".into()));
        }
        let model = Self { config, params, layout };

        let mut magic = [0u8; 8];
        let state = match read_exact_or_eof(r, &mut magic)? {
            false => None,
            true if &magic == TRAIN_STATE_MAGIC => {
                let epochs_done = read_u32(r)?;
                let n = read_u32(r)?;
                let mut velocity = Vec::with_capacity(n);
                for (name, t) in model.params.iter() {
                    let (vn, v) = read_blob(r)?;
                    if vn != name || v.shape() != t.shape() {
                        return Err(Error::Format(format!("bad velocity blob for {name}")));
                    }
                    velocity.push(v);
                }
                if n != velocity.len() {
                    return Err(Error::Format("velocity count mismatch".into()));
                }
                Some(TrainState { epochs_done, velocity })
            }
            true => return Err(Error::Format("trailing bytes after checkpoint".into())),
        };
        Ok((model, state))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::load_with_state(path)?.0)
    }

    pub fn load_with_state(path: impl AsRef<Path>) -> Result<(Self, Option<TrainState>)> {
        let mut r = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

/// Reads the magic and configuration block only.
pub fn read_checkpoint_header(r: &mut impl Read) -> Result<SnapTfConfig> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a SNAPTF01 checkpoint".into()));
    }
    let mut f = [0usize; 7];
    for v in &mut f {
        *v = read_u32(r)?;
    }
    Ok(SnapTfConfig {
        layers: f[0],
        d_model: f[1],
        d_attn: f[2],
        d_ff: f[3],
        hidden_out: f[4],
        k_max: f[5],
        m: f[6],
    })
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::domain("value overflows u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_blob(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::domain("parameter name too long"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    write_u32(w, t.rows)?;
    write_u32(w, t.cols)?;
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

/// `Ok(false)` on a clean EOF before the first byte.
fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::Format("truncated checkpoint".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_blob(r: &mut impl Read) -> Result<(String, Tensor)> {
    let mut lb = [0u8; 2];
    read_exact(r, &mut lb)?;
    let mut name = vec![0u8; u16::from_le_bytes(lb) as usize];
    read_exact(r, &mut name)?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("non-UTF-8 name".into()))?;
    let rows = read_u32(r)?;
    let cols = read_u32(r)?;
    let len = rows
        .checked_mul(cols)
        .filter(|&n| n <= 1 << 28)
        .ok_or_else(|| Error::Format("parameter blob too large".into()))?;
    let mut data = Vec::with_capacity(len);
    let mut b = [0u8; 8];
    for _ in 0..len {
        read_exact(r, &mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok((name, Tensor { rows, cols, data }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub seed: u64,
    /// Restrict the loss to the first `k` outputs of each record.
    pub loss_mask: bool,
    pub momentum: f64,
    /// Tail fraction of the dataset held out for validation.
    pub val_fraction: f64,
    pub schedule_div: f64,
    pub schedule_final_div: f64,
    pub schedule_warmup: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4096,
            epochs: 100,
            lr_max: 1e-3,
            seed: 0,
            loss_mask: false,
            momentum: 0.0,
            val_fraction: 0.1,
            schedule_div: 25.0,
            schedule_final_div: 2500.0,
            schedule_warmup: 0.3,
        }
    }
}

/// Optimizer state carried between training sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub velocity: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate at the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean loss of the very first minibatch, before any update.
    pub initial_loss: Option<f64>,
    pub epochs: Vec<EpochStats>,
    pub state: TrainState,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Writes a checkpoint with its training state appended.
pub fn save_checkpoint(model: &SnapTfModel, state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    model.write_with_state(&mut w, Some(state))?;
    w.flush()?;
    Ok(())
}

pub fn checkpoint_bytes(model: &SnapTfModel, state: &TrainState) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    model.write_with_state(&mut buf, Some(state))?;
    Ok(buf)
}

struct Example {
    input: Tensor,
    target: Vec<f64>,
    weights: Option<Vec<f64>>,
}

fn example(ds: &Dataset, idx: usize, k_max: usize, mask: bool) -> Example {
    let rec = &ds.records[idx];
    let target = label(&rec.doas, k_max);
    debug_assert!(target[..rec.k()].windows(2).all(|w| w[0] <= w[1]));
    let weights = mask.then(|| (0..k_max).map(|i| if i < rec.k() { 1.0 } else { 0.0 }).collect());
    Example { input: tokens(&rec.snapshots(ds.m, ds.t)), target, weights }
}

fn check_dataset(model: &SnapTfModel, ds: &Dataset) -> Result<()> {
    if ds.m != model.config.m {
        return Err(Error::Mismatch(format!(
            "dataset has m = {}, model expects m = {}",
            ds.m, model.config.m
        )));
    }
    if let Some(r) = ds.records.iter().find(|r| r.k() > model.config.k_max || r.k() == 0) {
        return Err(Error::Mismatch(format!(
            "record with k = {} outside the model's 1..={}",
            r.k(),
            model.config.k_max
        )));
    }
    Ok(())
}

/// Mean per-record loss over `indices`.
pub fn mean_loss(model: &SnapTfModel, ds: &Dataset, indices: &[usize], mask: bool) -> Result<f64> {
    check_dataset(model, ds)?;
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let losses = indices
        .par_iter()
        .map(|&i| {
            let ex = example(ds, i, model.config.k_max, mask);
            model.record_loss(ex.input, &ex.target, ex.weights.as_deref())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / indices.len() as f64)
}

/// Minibatch SGD with a one-cycle schedule over `epochs * ceil(n / batch)` steps.
///
/// `resume` continues from a previous session's state; the schedule and
/// shuffles are functions of the global step/epoch, so a resumed run
/// reproduces an uninterrupted one exactly.
pub fn train(
    model: &mut SnapTfModel,
    ds: &Dataset,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<TrainReport> {
    train_epochs(model, ds, cfg, resume, cfg.epochs)
}

/// Like [`train`] but stops once `until` epochs of `cfg`'s schedule are done.
pub fn train_epochs(
    model: &mut SnapTfModel,
    ds: &Dataset,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    until: usize,
) -> Result<TrainReport> {
    check_dataset(model, ds)?;
    if ds.records.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::domain("batch_size must be >= 1"));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::domain("val_fraction must lie in [0, 1)"));
    }
    let n = ds.records.len();
    let n_val = ((n as f64) * cfg.val_fraction).floor() as usize;
    let n_train = n - n_val;
    if n_train == 0 {
        return Err(Error::domain("no training records after the validation split"));
    }
    let val_idx: Vec<usize> = (n_train..n).collect();
    let steps_per_epoch = n_train.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let schedule = OneCycle {
        lr_max: cfg.lr_max,
        div: cfg.schedule_div,
        final_div: cfg.schedule_final_div,
        warmup: cfg.schedule_warmup,
    };

    let mut opt = Sgd::new(&model.params, cfg.momentum);
    let start_epoch = match resume {
        Some(state) => {
            opt.set_velocity(state.velocity)?;
            state.epochs_done
        }
        None => 0,
    };
    let k_max = model.config.k_max;
    let mut grads = model.params.zeros_like();
    let mut report = TrainReport {
        initial_loss: None,
        epochs: Vec::new(),
        state: TrainState { epochs_done: start_epoch, velocity: Vec::new() },
    };

    let until = until.min(cfg.epochs);
    for epoch in start_epoch..until {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut seed::derived_rng(cfg.seed, &[0x5eed, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + b;
            let partials = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut acc = model.params.zeros_like();
                    let mut loss = 0.0;
                    for &i in chunk {
                        let ex = example(ds, i, k_max, cfg.loss_mask);
                        loss += model.record_grad(ex.input, &ex.target, ex.weights.as_deref(), &mut acc)?;
                    }
                    Ok((acc, loss))
                })
                .collect::<Result<Vec<_>>>()?;
            let inv = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for (acc, loss) in partials {
                batch_loss += loss;
                for (g, a) in grads.iter_mut().zip(acc) {
                    g.data.iter_mut().zip(a.data).for_each(|(g, a)| *g += a * inv);
                }
            }
            if report.initial_loss.is_none() && epoch == 0 && b == 0 {
                report.initial_loss = Some(batch_loss * inv);
            }
            loss_sum += batch_loss;
            lr = schedule.lr(step, total_steps)?;
            opt.step(&mut model.params, &mut grads, lr)?;
        }
        let val_loss = mean_loss(model, ds, &val_idx, cfg.loss_mask)?;
        report.epochs.push(EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / n_train as f64,
            val_loss,
            lr,
        });
    }
    report.state = TrainState {
        epochs_done: until.max(start_epoch),
        velocity: opt.velocity().to_vec(),
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ArrayGeometry;
    use crate::sigsim::{gen_dataset, DatasetSpec, Modulation};
    use num_complex::Complex64;

    fn tiny() -> SnapTfConfig {
        SnapTfConfig { layers: 2, d_model: 8, d_attn: 6, d_ff: 16, hidden_out: 10, k_max: 4, m: 5 }
    }

    fn random_y(m: usize, t: usize, s: u64) -> CMatrix {
        let mut rng = seed::rng(s);
        CMatrix::from_fn(m, t, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn parameter_count_near_reference_scale() {
        let cfg = SnapTfConfig::modulated(5, 9);
        let model = SnapTfModel::init(cfg, 1).unwrap();
        assert_eq!(model.parameter_count(), cfg.parameter_count());
        assert_eq!(cfg.parameter_count(), 328_985);
        let rel = cfg.parameter_count() as f64 / 356_000.0 - 1.0;
        assert!(rel.abs() <= 0.2);
        let big = SnapTfConfig { m: 14, ..cfg };
        assert_eq!(big.parameter_count() - cfg.parameter_count(), (28 - 10) * 96);
    }

    #[test]
    fn depth_rule() {
        assert_eq!(depth_for_sources(1), 1);
        assert_eq!(depth_for_sources(3), 2);
        assert_eq!(depth_for_sources(4), 3);
        assert_eq!(depth_for_sources(7), 3);
        assert_eq!(depth_for_sources(9), 4);
    }

    #[test]
    fn init_is_deterministic() {
        let a = SnapTfModel::init(tiny(), 5).unwrap();
        let b = SnapTfModel::init(tiny(), 5).unwrap();
        let c = SnapTfModel::init(tiny(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(SnapTfModel::init(SnapTfConfig { layers: 0, ..tiny() }, 1).is_err());
    }

    #[test]
    fn output_is_permutation_invariant() {
        let model = SnapTfModel::init(tiny(), 2).unwrap();
        let y = random_y(5, 20, 3);
        let base = model.predict(&y).unwrap();
        let mut rng = seed::rng(4);
        for _ in 0..50 {
            let mut perm: Vec<usize> = (0..20).collect();
            perm.shuffle(&mut rng);
            let yp = CMatrix::from_fn(5, 20, |i, j| y[(i, perm[j])]);
            let out = model.predict(&yp).unwrap();
            for (a, b) in out.iter().zip(&base) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn duplicated_snapshots_leave_output_unchanged() {
        let model = SnapTfModel::init(tiny(), 7).unwrap();
        let y = random_y(5, 9, 8);
        let yy = CMatrix::from_fn(5, 18, |i, j| y[(i, j % 9)]);
        let a = model.predict(&y).unwrap();
        let b = model.predict(&yy).unwrap();
        for (x, z) in a.iter().zip(&b) {
            assert!((x - z).abs() <= 1e-9 * x.abs().max(1e-12));
        }
    }

    #[test]
    fn forward_any_snapshot_count() {
        let model = SnapTfModel::init(tiny(), 9).unwrap();
        for t in [1, 10, 50, 100] {
            let est = model.forward(&random_y(5, t, t as u64), 3).unwrap();
            assert_eq!(est.k(), 3);
            assert!(est.thetas.windows(2).all(|w| w[0] <= w[1]));
        }
        let y = random_y(5, 4, 1);
        assert!(model.forward(&y, 0).is_err());
        assert!(model.forward(&y, 5).is_err());
        assert!(model.forward(&CMatrix::zeros(5, 0), 1).is_err());
        assert!(matches!(model.forward(&random_y(4, 3, 1), 1), Err(Error::Mismatch(_))));
    }

    #[test]
    fn label_and_loss_examples() {
        use std::f64::consts::PI;
        assert_eq!(
            label(&[PI / 2.0, PI / 6.0, PI / 3.0], 9),
            vec![PI / 6.0, PI / 3.0, PI / 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        let mut tape = Tape::new();
        let l = vec![0.5, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let same = tape.constant(Tensor::column(l.clone()));
        let z = tape.mse(same, &l, None).unwrap();
        assert_eq!(tape.value(z)[0], 0.0);
        let shifted = tape.constant(Tensor::column(l.iter().map(|v| v + 0.3).collect()));
        let z = tape.mse(shifted, &l, None).unwrap();
        assert!((tape.value(z)[0] - 0.09).abs() < 1e-15);
        // errors on the three live entries with squared sum 0.09
        let mut p = l.clone();
        p[0] += 0.1;
        p[1] -= 0.2;
        p[2] += 0.2;
        let pv = tape.constant(Tensor::column(p));
        let z = tape.mse(pv, &l, None).unwrap();
        assert!((tape.value(z)[0] - 0.01).abs() < 1e-15);
    }

    fn tiny_dataset(records: usize, s: u64) -> Dataset {
        let spec = DatasetSpec {
            records,
            k_lo: 3,
            k_hi: 3,
            k_max: 4,
            t: 10,
            snr_min_db: 10.0,
            snr_max_db: 10.0,
            modulation: Modulation::Qam16,
            ..DatasetSpec::default()
        };
        gen_dataset(&ArrayGeometry::preset("mra5").unwrap(), &spec, s).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = tiny_dataset(40, 1);
        let mut model = SnapTfModel::init(tiny(), 3).unwrap();
        let before = model.clone();
        let cfg = TrainConfig { batch_size: 16, epochs: 2, lr_max: 0.0, ..TrainConfig::default() };
        let report = train(&mut model, &ds, &cfg, None).unwrap();
        assert_eq!(model, before);
        assert_eq!(report.epochs.len(), 2);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let ds = tiny_dataset(400, 2);
        let cfg = TrainConfig {
            batch_size: 16,
            epochs: 4,
            lr_max: 0.05,
            momentum: 0.9,
            seed: 11,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = SnapTfModel::init(tiny(), 4).unwrap();
            let report = train(&mut model, &ds, &cfg, None).unwrap();
            (checkpoint_bytes(&model, &report.state).unwrap(), report)
        };
        let (bytes_a, report) = run();
        let (bytes_b, _) = run();
        assert_eq!(bytes_a, bytes_b);
        let init = report.initial_loss.unwrap();
        let last = report.final_train_loss().unwrap();
        assert!(last <= 0.5 * init, "{init} -> {last}");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = tiny_dataset(64, 3);
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 3,
            lr_max: 0.02,
            momentum: 0.5,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut full = SnapTfModel::init(tiny(), 8).unwrap();
        let report = train(&mut full, &ds, &cfg, None).unwrap();
        let want = checkpoint_bytes(&full, &report.state).unwrap();

        let mut part = SnapTfModel::init(tiny(), 8).unwrap();
        let first = train_epochs(&mut part, &ds, &cfg, None, 2).unwrap();
        assert_eq!(first.state.epochs_done, 2);
        let bytes = checkpoint_bytes(&part, &first.state).unwrap();
        let (mut loaded, state) = SnapTfModel::read_from(&mut bytes.as_slice()).unwrap();
        let rest = train(&mut loaded, &ds, &cfg, state).unwrap();
        assert_eq!(rest.epochs.len(), 1);
        assert_eq!(checkpoint_bytes(&loaded, &rest.state).unwrap(), want);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = SnapTfModel::init(tiny(), 12).unwrap();
        let bytes = model.to_bytes().unwrap();
        let (back, state) = SnapTfModel::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, model);
        assert!(state.is_none());
        assert_eq!(read_checkpoint_header(&mut bytes.as_slice()).unwrap(), tiny());
        assert!(SnapTfModel::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SnapTfModel::read_from(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn dataset_mismatch_detected() {
        let ds = tiny_dataset(8, 4);
        let mut model = SnapTfModel::init(SnapTfConfig { m: 14, ..tiny() }, 1).unwrap();
        assert!(matches!(
            train(&mut model, &ds, &TrainConfig::default(), None),
            Err(Error::Mismatch(_))
        ));
        let mut small = SnapTfModel::init(SnapTfConfig { k_max: 2, ..tiny() }, 1).unwrap();
        assert!(matches!(
            train(&mut small, &ds, &TrainConfig::default(), None),
            Err(Error::Mismatch(_))
        ));
        let empty = Dataset { records: vec![], ..ds };
        let mut model = SnapTfModel::init(tiny(), 1).unwrap();
        assert!(train(&mut model, &empty, &TrainConfig::default(), None).is_err());
    }
}
