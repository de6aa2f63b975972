//! Reverse-mode differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records primitive applications in order; [`Tape::backward`]
//! walks them in reverse. Leaves are either owned tensors or borrowed
//! parameters from a [`ParamStore`], whose gradients are collected per
//! parameter so a training step can sum them across records.

use matrixmultiply::dgemm;

use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Dense row-major matrix; vectors are `n x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self { rows: data.len(), cols: 1, data }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Zero-filled tensors shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    /// `op(a) op(b)` with optional transposes.
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    /// `a + b` with `b` either the same shape or an `rows x 1` column.
    AddBroadcast { a: Var, b: Var },
    Relu { x: Var },
    /// Softmax down each column.
    SoftmaxCols { x: Var },
    /// Normalise each column over its rows, then per-row gain and bias.
    LayerNormCols { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    /// Mean across columns, giving `rows x 1`.
    MeanCols { x: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    /// Weighted mean of squared differences against a constant target.
    Mse { pred: Var, target: Vec<f64>, weights: Vec<f64>, denom: f64 },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    /// Empty for parameter leaves (the value lives in the store).
    value: Vec<f64>,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }

    /// Gradient of every parameter touched on the tape.
    pub fn params(&self) -> &[(ParamId, Vec<f64>)] {
        &self.params
    }

    /// `acc[p] += scale * grad[p]` for every touched parameter.
    pub fn accumulate_into(&self, acc: &mut [Tensor], scale: f64) {
        for (id, g) in &self.params {
            for (a, b) in acc[id.0].data.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_rows_stride: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_cols: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides describe views inside the given slices, checked by
    // the callers' shape logic; `c` is a contiguous m x n row-major block.
    unsafe {
        dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_rows_stride.0,
            a_rows_stride.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_cols as isize,
            1,
        );
    }
}

/// Row/column strides of `op(X)` for a row-major `rows x cols` matrix.
fn strides(cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { params: None, nodes: Vec::new() }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self { params: Some(params), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let n = &self.nodes[v.0];
        [n.rows, n.cols]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        match n.op {
            Op::Param(id) => &self.params.expect("param leaf without store").get(id).data,
            _ => &n.value,
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let [rows, cols] = self.shape(v);
        Tensor { rows, cols, data: self.value(v).to_vec() }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert!(value.is_empty() || value.len() == rows * cols);
        self.nodes.push(Node { op, rows, cols, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t.rows, t.cols, t.data, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.params.expect("tape has no parameter store").get(id);
        let (rows, cols) = (t.rows, t.cols);
        self.push(Op::Param(id), rows, cols, Vec::new(), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let [ar, ac] = self.shape(a);
        let [br, bc] = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions {k} and {k2} differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a),
            strides(ac, ta),
            self.value(b),
            strides(bc, tb),
            0.0,
            &mut out,
            n,
        );
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(Op::Matmul { a, b, ta, tb }, m, n, out, rg))
    }

    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ar, ac] = self.shape(a);
        let [br, bc] = self.shape(b);
        if br != ar || (bc != ac && bc != 1) {
            return Err(Error::shape(format!(
                "cannot add {br}x{bc} to {ar}x{ac}"
            )));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let out: Vec<f64> = if bc == ac {
            av.iter().zip(bv).map(|(x, y)| x + y).collect()
        } else {
            av.iter().enumerate().map(|(i, x)| x + bv[i / ac]).collect()
        };
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(Op::AddBroadcast { a, b }, ar, ac, out, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let [r, c] = self.shape(x);
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.grad_flag(&[x]);
        self.push(Op::Relu { x }, r, c, out, rg)
    }

    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let [r, c] = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let max = (0..r).map(|i| xv[i * c + j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..r {
                let e = (xv[i * c + j] - max).exp();
                out[i * c + j] = e;
                total += e;
            }
            for i in 0..r {
                out[i * c + j] /= total;
            }
        }
        let rg = self.grad_flag(&[x]);
        self.push(Op::SoftmaxCols { x }, r, c, out, rg)
    }

    pub fn layernorm_cols(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let [r, c] = self.shape(x);
        if self.shape(gain) != [r, 1] || self.shape(bias) != [r, 1] {
            return Err(Error::shape("layer-norm gain/bias must be rows x 1"));
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let mean = (0..r).map(|i| xv[i * c + j]).sum::<f64>() / r as f64;
            let var = (0..r).map(|i| (xv[i * c + j] - mean).powi(2)).sum::<f64>() / r as f64;
            let s = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[j] = s;
            for i in 0..r {
                let h = (xv[i * c + j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = g[i] * h + b[i];
            }
        }
        let rg = self.grad_flag(&[x, gain, bias]);
        Ok(self.push(Op::LayerNormCols { x, gain, bias, xhat, inv_std }, r, c, out, rg))
    }

    pub fn mean_cols(&mut self, x: Var) -> Var {
        let [r, c] = self.shape(x);
        let xv = self.value(x);
        let out = (0..r)
            .map(|i| xv[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        let rg = self.grad_flag(&[x]);
        self.push(Op::MeanCols { x }, r, 1, out, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let [r, cols] = self.shape(x);
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.grad_flag(&[x]);
        self.push(Op::Scale { x, c }, r, cols, out, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = vec![self.value(x).iter().sum()];
        let rg = self.grad_flag(&[x]);
        self.push(Op::Sum { x }, 1, 1, out, rg)
    }

    /// `sum_i w_i (pred_i - target_i)^2 / sum_i w_i`.
    pub fn mse(&mut self, pred: Var, target: &[f64], weights: Option<&[f64]>) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n || weights.is_some_and(|w| w.len() != n) {
            return Err(Error::shape(format!(
                "loss over {n} predictions got {} targets",
                target.len()
            )));
        }
        let weights = weights.map_or_else(|| vec![1.0; n], <[f64]>::to_vec);
        let denom: f64 = weights.iter().sum();
        if !(denom > 0.0) {
            return Err(Error::domain("loss weights must have a positive sum"));
        }
        let p = self.value(pred);
        let loss = p
            .iter()
            .zip(target)
            .zip(&weights)
            .map(|((p, t), w)| w * (p - t).powi(2))
            .sum::<f64>()
            / denom;
        let rg = self.grad_flag(&[pred]);
        Ok(self.push(
            Op::Mse { pred, target: target.to_vec(), weights, denom },
            1,
            1,
            vec![loss],
            rg,
        ))
    }

    /// Back-propagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = n.op {
                if let Some(g) = &grads[i] {
                    params.push((id, g.clone()));
                }
            }
        }
        // Parameters used more than once appear once, summed.
        params.sort_by_key(|(id, _)| id.0);
        let mut merged: Vec<(ParamId, Vec<f64>)> = Vec::with_capacity(params.len());
        for (id, g) in params {
            match merged.last_mut() {
                Some((last, acc)) if *last == id => {
                    acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                _ => merged.push((id, g)),
            }
        }
        Ok(Grads { nodes: grads, params: merged })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::Matmul { a, b, ta, tb } => {
                let [ar, ac] = self.shape(a);
                let [br, bc] = self.shape(b);
                let k = if ta { ar } else { ac };
                // C = op(A) op(B), dC is rows x cols.
                if self.nodes[a.0].requires_grad {
                    // d op(A) = dC op(B)^T ; dA = (d op(A)) or its transpose.
                    let mut da = vec![0.0; ar * ac];
                    if !ta {
                        // dA (rows x k) = dC * op(B)^T
                        gemm(rows, cols, k, 1.0, g, (cols as isize, 1),
                             self.value(b), transpose_strides(bc, tb), 0.0, &mut da, ac);
                    } else {
                        // dA (k x rows) = op(B) * dC^T
                        gemm(k, cols, rows, 1.0, self.value(b), strides(bc, tb),
                             g, (1, cols as isize), 0.0, &mut da, ac);
                    }
                    self.accumulate(grads, a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; br * bc];
                    if !tb {
                        // dB (k x cols) = op(A)^T dC
                        gemm(k, rows, cols, 1.0, self.value(a), transpose_strides(ac, ta),
                             g, (cols as isize, 1), 0.0, &mut db, bc);
                    } else {
                        // dB (cols x k) = dC^T op(A)
                        gemm(cols, rows, k, 1.0, g, (1, cols as isize),
                             self.value(a), strides(ac, ta), 0.0, &mut db, bc);
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::AddBroadcast { a, b } => {
                self.accumulate(grads, a, g.to_vec());
                if self.nodes[b.0].requires_grad {
                    let [_, bc] = self.shape(b);
                    let db = if bc == cols {
                        g.to_vec()
                    } else {
                        (0..rows).map(|i| g[i * cols..(i + 1) * cols].iter().sum()).collect()
                    };
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Relu { x } => {
                let xv = self.value(x);
                let dx = g.iter().zip(xv).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, x, dx);
            }
            &Op::SoftmaxCols { x } => {
                let y = &node.value;
                let mut dx = vec![0.0; rows * cols];
                for j in 0..cols {
                    let dot: f64 = (0..rows).map(|i| y[i * cols + j] * g[i * cols + j]).sum();
                    for i in 0..rows {
                        dx[i * cols + j] = y[i * cols + j] * (g[i * cols + j] - dot);
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::LayerNormCols { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain);
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; rows * cols];
                    let r = rows as f64;
                    for j in 0..cols {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for i in 0..rows {
                            let d = g[i * cols + j] * gv[i];
                            mean_d += d;
                            mean_dh += d * xhat[i * cols + j];
                        }
                        mean_d /= r;
                        mean_dh /= r;
                        for i in 0..rows {
                            let d = g[i * cols + j] * gv[i];
                            dx[i * cols + j] =
                                inv_std[j] * (d - mean_d - xhat[i * cols + j] * mean_dh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.nodes[gain.0].requires_grad {
                    let dg = (0..rows)
                        .map(|i| (0..cols).map(|j| g[i * cols + j] * xhat[i * cols + j]).sum())
                        .collect();
                    self.accumulate(grads, *gain, dg);
                }
                if self.nodes[bias.0].requires_grad {
                    let db = (0..rows).map(|i| g[i * cols..(i + 1) * cols].iter().sum()).collect();
                    self.accumulate(grads, *bias, db);
                }
            }
            &Op::MeanCols { x } => {
                let [xr, xc] = self.shape(x);
                let inv = 1.0 / xc as f64;
                let dx = (0..xr * xc).map(|i| g[i / xc] * inv).collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Scale { x, c } => {
                self.accumulate(grads, x, g.iter().map(|v| v * c).collect());
            }
            &Op::Sum { x } => {
                let n = self.value(x).len();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            Op::Mse { pred, target, weights, denom } => {
                let p = self.value(*pred);
                let dx = p
                    .iter()
                    .zip(target)
                    .zip(weights)
                    .map(|((p, t), w)| g[0] * 2.0 * w * (p - t) / denom)
                    .collect();
                self.accumulate(grads, *pred, dx);
            }
        }
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Strides of `op(X)^T`.
fn transpose_strides(cols: usize, transposed: bool) -> (isize, isize) {
    strides(cols, !transposed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng as _;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn forward_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(2, 1, &[0.0, 0.0]));
        let s = tape.softmax_cols(x);
        assert_eq!(tape.value(s), &[0.5, 0.5]);

        let x = tape.constant(t(2, 1, &[2.0, -3.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[2.0, 0.0]);

        let x = tape.constant(t(2, 1, &[1.0, -1.0]));
        let g = tape.constant(t(2, 1, &[1.0, 1.0]));
        let b = tape.constant(t(2, 1, &[0.0, 0.0]));
        let y = tape.layernorm_cols(x, g, b).unwrap();
        let want = 1.0 / (1.0 + LAYERNORM_EPS).sqrt();
        assert!((tape.value(y)[0] - want).abs() < 1e-15);
        assert!((tape.value(y)[1] + want).abs() < 1e-15);
        assert!((want - 0.999995).abs() < 1e-6);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.matmul_t(a, b, true, false).is_ok());
        let c = tape.constant(Tensor::zeros(3, 1));
        assert!(tape.add_broadcast(a, c).is_err());
        assert!(tape.mse(a, &[0.0; 5], None).is_err());
        assert!(tape.backward(a).is_err());
        assert!(Tensor::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 1, &[2.0, -3.0]), true);
        let r = tape.relu(x);
        let l = tape.sum(r);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.of(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn matmul_sum_gradient_by_hand() {
        // L = sum(A B) => dL/dA[i,k] = sum_j B[k,j]
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]), true);
        let b = tape.leaf(t(2, 2, &[5.0, 6.0, 7.0, 8.0]), true);
        let c = tape.matmul(a, b).unwrap();
        let l = tape.sum(c);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.of(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        // dL/dB[k,j] = sum_i A[i,k]
        assert_eq!(g.of(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn inputs_not_mutated_and_params_accumulate() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(2, 2, &[1.0, -1.0, 0.5, 2.0]));
        let before = store.clone();
        let mut tape = Tape::with_params(&store);
        let p1 = tape.param(w);
        let p2 = tape.param(w);
        let s = tape.matmul(p1, p2).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert_eq!(store, before);
        assert_eq!(g.params().len(), 1);
        // d sum(W W) / dW = 1 W^T + W^T 1 pattern
        let wv = [1.0, -1.0, 0.5, 2.0];
        let mut want = [0.0; 4];
        for i in 0..2 {
            for k in 0..2 {
                // sum_j W[k,j] + sum_j W[j,i]
                want[i * 2 + k] = (0..2).map(|j| wv[k * 2 + j]).sum::<f64>()
                    + (0..2).map(|j| wv[j * 2 + i]).sum::<f64>();
            }
        }
        assert_eq!(g.params()[0].1, want.to_vec());
    }

    /// Central finite differences against analytic gradients.
    fn grad_check(build: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor]) -> f64 {
        let run = |vals: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), true)).collect();
            let out = build(&mut tape, &vars);
            (tape.value(out)[0], tape.backward(out).unwrap().nodes, vars)
        };
        let (_, grads, vars) = run(inputs);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (n, inp) in inputs.iter().enumerate() {
            let analytic = grads[vars[n].0].clone().unwrap_or_else(|| vec![0.0; inp.len()]);
            for i in 0..inp.len() {
                let mut plus = inputs.to_vec();
                plus[n].data[i] += h;
                let mut minus = inputs.to_vec();
                minus[n].data[i] -= h;
                let fd = (run(&plus).0 - run(&minus).0) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / (fd.abs().max(analytic[i].abs()).max(1e-3));
                worst = worst.max(err);
            }
        }
        worst
    }

    fn rand_tensor(rng: &mut seed::Rng, r: usize, c: usize) -> Tensor {
        Tensor {
            rows: r,
            cols: c,
            data: (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect(),
        }
    }

    /// Projects an arbitrary node onto a scalar with fixed random weights so
    /// every output entry contributes to the checked gradient.
    fn project(tape: &mut Tape, v: Var, seed_: u64) -> Var {
        let [r, c] = tape.shape(v);
        let mut rng = seed::rng(seed_);
        let w = tape.constant(rand_tensor(&mut rng, r, c));
        let prod = tape.matmul_t(v, w, true, false).unwrap();
        // trace(V^T W) via sum of the product's diagonal is not a primitive;
        // sum of all entries of V^T W weights every entry of V.
        tape.sum(prod)
    }

    #[test]
    fn finite_difference_every_primitive() {
        let mut rng = seed::rng(42);
        for case in 0..20 {
            let r = rng.random_range(1..5);
            let c = rng.random_range(1..5); // includes single-column T = 1
            let k = rng.random_range(1..4);
            let s = case as u64;

            let a = rand_tensor(&mut rng, r, k);
            let b = rand_tensor(&mut rng, k, c);
            let bt = rand_tensor(&mut rng, c, k);
            let at = rand_tensor(&mut rng, k, r);
            for (ta, tb, x, y) in [
                (false, false, &a, &b),
                (true, false, &at, &b),
                (false, true, &a, &bt),
                (true, true, &at, &bt),
            ] {
                let err = grad_check(
                    &|tp, v| {
                        let m = tp.matmul_t(v[0], v[1], ta, tb).unwrap();
                        project(tp, m, s)
                    },
                    &[x.clone(), y.clone()],
                );
                assert!(err < 1e-4, "matmul {ta} {tb}: {err}");
            }

            let x = rand_tensor(&mut rng, r, c);
            let col = rand_tensor(&mut rng, r, 1);
            let same = rand_tensor(&mut rng, r, c);
            for other in [&col, &same] {
                let err = grad_check(
                    &|tp, v| {
                        let m = tp.add_broadcast(v[0], v[1]).unwrap();
                        project(tp, m, s)
                    },
                    &[x.clone(), other.clone()],
                );
                assert!(err < 1e-4, "add: {err}");
            }

            // Keep relu inputs away from the kink.
            let mut xr = rand_tensor(&mut rng, r, c);
            xr.data.iter_mut().for_each(|v| {
                if v.abs() < 0.05 {
                    *v += 0.1
                }
            });
            let err = grad_check(
                &|tp, v| {
                    let m = tp.relu(v[0]);
                    project(tp, m, s)
                },
                &[xr],
            );
            assert!(err < 1e-4, "relu: {err}");

            let err = grad_check(
                &|tp, v| {
                    let m = tp.softmax_cols(v[0]);
                    project(tp, m, s)
                },
                std::slice::from_ref(&x),
            );
            assert!(err < 1e-4, "softmax: {err}");

            let rr = r.max(2);
            let xl = rand_tensor(&mut rng, rr, c);
            let gl = rand_tensor(&mut rng, rr, 1);
            let bl = rand_tensor(&mut rng, rr, 1);
            let err = grad_check(
                &|tp, v| {
                    let m = tp.layernorm_cols(v[0], v[1], v[2]).unwrap();
                    project(tp, m, s)
                },
                &[xl, gl, bl],
            );
            assert!(err < 1e-4, "layernorm: {err}");

            let err = grad_check(
                &|tp, v| {
                    let m = tp.mean_cols(v[0]);
                    project(tp, m, s)
                },
                std::slice::from_ref(&x),
            );
            assert!(err < 1e-4, "mean_cols: {err}");

            let err = grad_check(
                &|tp, v| {
                    let m = tp.scale(v[0], -0.37);
                    project(tp, m, s)
                },
                std::slice::from_ref(&x),
            );
            assert!(err < 1e-4, "scale: {err}");

            let target: Vec<f64> = (0..r * c).map(|i| i as f64 * 0.1).collect();
            let weights: Vec<f64> = (0..r * c).map(|i| (i % 3) as f64).collect();
            let weights = if weights.iter().sum::<f64>() > 0.0 { weights } else { vec![1.0; r * c] };
            let err = grad_check(
                &|tp, v| tp.mse(v[0], &target, Some(&weights)).unwrap(),
                std::slice::from_ref(&x),
            );
            assert!(err < 1e-4, "mse: {err}");
        }
    }
}
