use crate::error::{Error, Result};

use super::kernels::{self, ConvGeometry};
use super::{ParamId, ParamStore, Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

impl Bcast {
    fn resolve(lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        let numel: usize = rhs.iter().product();
        if lhs == rhs {
            Ok(Bcast::Same)
        } else if numel == 1 {
            Ok(Bcast::Scalar)
        } else if lhs.len() == 2 && (rhs == [lhs[1]] || rhs == [1, lhs[1]]) {
            Ok(Bcast::Row)
        } else if lhs.len() == 2 && rhs == [lhs[0], 1] {
            Ok(Bcast::Col)
        } else {
            Err(Error::Shape(format!("cannot broadcast {rhs:?} onto {lhs:?}")))
        }
    }

    #[inline]
    fn index(self, flat: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => flat,
            Bcast::Scalar => 0,
            Bcast::Row => flat % cols,
            Bcast::Col => flat / cols,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var, Bcast),
    Affine {
        x: Var,
        scale: T,
    },
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv1d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Gather {
        table: Var,
        index: Vec<usize>,
    },
    Softmax {
        x: Var,
        bias: Option<Var>,
        scale: T,
    },
    LogSoftmax(Var),
    NormalizeRows {
        x: Var,
        denom: Vec<T>,
        clamped: Vec<bool>,
    },
    ReplaceRows {
        x: Var,
        row: Var,
        rows: Vec<usize>,
    },
    Nll {
        logp: Var,
        targets: Vec<(usize, usize)>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Tape of forward operations; [`Graph::backward`] replays it in reverse.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let v = self.leaf(store.value(id).clone());
        self.nodes[v.0].param = Some(id);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bc = Bcast::resolve(av.shape(), bv.shape())?;
        let cols = av.cols();
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[bc.index(i, cols)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(kind, a, b, bc), rg))
    }

    /// `a + b`, broadcasting `b` as a scalar, row vector or column vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::lit(scale), T::lit(shift));
        let value = self.value(x).map(|v| s * v + t);
        let rg = self.rg(x);
        self.push(value, Op::Affine { x, scale: s }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Layer normalisation over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::Shape(format!(
                "layer norm over {cols} features with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (out, xhat, inv_std) =
            kernels::layer_norm_forward(xv.data(), cols, self.value(gain).data(), self.value(bias).data());
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Grouped strided convolution of `x[C×L]`; see [`kernels::conv1d`].
    pub fn conv1d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        groups: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = kernels::conv_geometry(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            groups,
            padding,
        )?;
        let value = kernels::conv1d(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            groups,
            padding,
        )?;
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv1d { x, weight, bias, geom }, rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start + len > xv.cols() {
            return Err(Error::Shape(format!(
                "column slice {start}..{} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(&[rows, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Shape("concatenation of nothing".into()))?;
        if parts
            .iter()
            .any(|&p| self.shape(p).len() != 2 || self.value(p).rows() != rows)
        {
            return Err(Error::Shape("column concatenation needs equal row counts".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(&[rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// `out[i] = table.flat[index[i]]`, shaped as `shape`.
    pub fn gather(&mut self, table: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = index.iter().find(|&&i| i >= tv.len()) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of range for {} elements",
                tv.len()
            )));
        }
        let data = index.iter().map(|&i| tv.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::Gather { table, index }, rg))
    }

    /// Row softmax of `c·x + bias` where `x` holds logits already divided by
    /// `c`: `exp((x − max(x))·c + bias)`, normalised per row.
    pub fn softmax_rows(&mut self, x: Var, bias: Option<Var>, scale: f64) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(Error::InvalidValue(format!("softmax scale must be > 0, got {scale}")));
        }
        let xv = self.value(x);
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN in softmax input".into()));
        }
        if let Some(b) = bias {
            if self.shape(b) != xv.shape() {
                return Err(Error::Shape(format!(
                    "softmax bias {:?} does not match logits {:?}",
                    self.shape(b),
                    xv.shape()
                )));
            }
        }
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        let s = T::lit(scale);
        for (r, row) in out.chunks_mut(cols).enumerate() {
            let brow = bias.map(|b| self.value(b).row(r));
            kernels::softmax_row_in_place(row, brow, s);
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Softmax { x, bias, scale: s }, rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN in log-softmax input".into()));
        }
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            kernels::log_softmax_row_in_place(row);
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let eps = T::lit(eps);
        let mut denom = Vec::with_capacity(xv.rows());
        let mut clamped = Vec::with_capacity(xv.rows());
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            let mut ss = T::zero();
            for &v in row.iter() {
                ss += v * v;
            }
            let norm = ss.sqrt();
            let d = if norm > eps { norm } else { eps };
            clamped.push(norm <= eps);
            denom.push(d);
            row.iter_mut().for_each(|v| *v /= d);
        }
        let value = Tensor::new(xv.shape(), out).expect("shape preserved");
        let rg = self.rg(x);
        self.push(value, Op::NormalizeRows { x, denom, clamped }, rg)
    }

    /// Replaces the listed rows of `x` by the vector `row`.
    pub fn replace_rows(&mut self, x: Var, row: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(row).len() != cols {
            return Err(Error::Shape(format!(
                "replacement row of {} elements for {cols} columns",
                self.value(row).len()
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::Shape(format!("row {bad} out of range for {} rows", xv.rows())));
        }
        let mut out = xv.data().to_vec();
        let rv = self.value(row).data();
        for &r in rows {
            out[r * cols..(r + 1) * cols].copy_from_slice(rv);
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(
            value,
            Op::ReplaceRows {
                x,
                row,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// `−Σ logp[row, col]` over `targets`; zero for an empty target list.
    pub fn nll(&mut self, logp: Var, targets: Vec<(usize, usize)>) -> Result<Var> {
        let lv = self.value(logp);
        let (rows, cols) = (lv.rows(), lv.cols());
        let mut acc = T::zero();
        for &(r, c) in &targets {
            if r >= rows || c >= cols {
                return Err(Error::Shape(format!(
                    "target ({r}, {c}) outside {rows}×{cols} log-probabilities"
                )));
            }
            acc -= lv.data()[r * cols + c];
        }
        let rg = self.rg(logp);
        Ok(self.push(Tensor::scalar(acc), Op::Nll { logp, targets }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds every parameter leaf's gradient into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for node_id in self.param_vars.iter().flatten() {
            let pid = self.nodes[node_id.0].param.expect("parameter leaf");
            if let Some(g) = grads.get(*node_id) {
                let dst = store.get_mut(pid).grad.data_mut();
                for (d, &s) in dst.iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("initialised").data_mut());
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                self.accumulate(grads, *a, |da| kernels::mm_nt_acc(gd, bv.data(), da, m, n, k));
                self.accumulate(grads, *b, |db| kernels::mm_tn_acc(av.data(), gd, db, m, k, n));
            }
            Op::Transpose(x) => {
                let gt = g.transpose()?;
                self.accumulate(grads, *x, |dx| add_into(dx, gt.data()));
            }
            Op::Binary(kind, a, b, bc) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = av.cols();
                let bd = bv.data();
                match kind {
                    Binary::Add | Binary::Sub => {
                        self.accumulate(grads, *a, |da| add_into(da, gd));
                        let sign = if matches!(kind, Binary::Add) {
                            T::one()
                        } else {
                            -T::one()
                        };
                        self.accumulate(grads, *b, |db| {
                            for (i, &gv) in gd.iter().enumerate() {
                                db[bc.index(i, cols)] += sign * gv;
                            }
                        });
                    }
                    Binary::Mul => {
                        self.accumulate(grads, *a, |da| {
                            for (i, &gv) in gd.iter().enumerate() {
                                da[i] += gv * bd[bc.index(i, cols)];
                            }
                        });
                        let ad = av.data();
                        self.accumulate(grads, *b, |db| {
                            for (i, &gv) in gd.iter().enumerate() {
                                db[bc.index(i, cols)] += gv * ad[i];
                            }
                        });
                    }
                }
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, |dx| {
                    for (d, &gv) in dx.iter_mut().zip(gd) {
                        *d += gv * *scale;
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |dx| {
                    for i in 0..gd.len() {
                        dx[i] += gd[i] * kernels::gelu_grad(xd[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yd = node.value.data();
                self.accumulate(grads, *x, |dx| {
                    for i in 0..gd.len() {
                        dx[i] += gd[i] * yd[i] * (T::one() - yd[i]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = node.value.cols();
                let gainv = self.value(*gain).data();
                self.accumulate(grads, *gain, |dg| {
                    for (i, &gv) in gd.iter().enumerate() {
                        dg[i % cols] += gv * xhat[i];
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for (i, &gv) in gd.iter().enumerate() {
                        db[i % cols] += gv;
                    }
                });
                let n = T::lit(cols as f64);
                self.accumulate(grads, *x, |dx| {
                    let mut dxhat = vec![T::zero(); cols];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let base = r * cols;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..cols {
                            let d = gd[base + c] * gainv[c];
                            dxhat[c] = d;
                            s1 += d;
                            s2 += d * xhat[base + c];
                        }
                        for c in 0..cols {
                            dx[base + c] += inv / n * (n * dxhat[c] - s1 - xhat[base + c] * s2);
                        }
                    }
                });
            }
            Op::Conv1d { x, weight, bias, geom } => {
                let len = self.shape(*x)[1];
                let plen = len + 2 * geom.padding;
                let out_len = node.value.cols();
                let cin_g = geom.in_channels / geom.groups;
                let cout_g = geom.out_channels / geom.groups;
                let k = geom.kernel;
                let s = geom.stride;
                if let Some(b) = bias {
                    self.accumulate(grads, *b, |db| {
                        for (co, d) in db.iter_mut().enumerate() {
                            for &gv in &gd[co * out_len..(co + 1) * out_len] {
                                *d += gv;
                            }
                        }
                    });
                }
                let xp = kernels::pad_input(self.value(*x).data(), geom.in_channels, len, geom.padding);
                self.accumulate(grads, *weight, |dw| {
                    for co in 0..geom.out_channels {
                        let group = co / cout_g;
                        let grow = &gd[co * out_len..(co + 1) * out_len];
                        for cl in 0..cin_g {
                            let ci = group * cin_g + cl;
                            let xrow = &xp[ci * plen..(ci + 1) * plen];
                            let wslot = &mut dw[(co * cin_g + cl) * k..(co * cin_g + cl + 1) * k];
                            for (kk, w) in wslot.iter_mut().enumerate() {
                                let mut acc = T::zero();
                                for (t, &gv) in grow.iter().enumerate() {
                                    acc += gv * xrow[t * s + kk];
                                }
                                *w += acc;
                            }
                        }
                    }
                });
                let wd = self.value(*weight).data();
                self.accumulate(grads, *x, |dx| {
                    let mut dxp = vec![T::zero(); geom.in_channels * plen];
                    for co in 0..geom.out_channels {
                        let group = co / cout_g;
                        let grow = &gd[co * out_len..(co + 1) * out_len];
                        for cl in 0..cin_g {
                            let ci = group * cin_g + cl;
                            let w = &wd[(co * cin_g + cl) * k..(co * cin_g + cl + 1) * k];
                            let drow = &mut dxp[ci * plen..(ci + 1) * plen];
                            for (t, &gv) in grow.iter().enumerate() {
                                let window = &mut drow[t * s..t * s + k];
                                for (d, &wv) in window.iter_mut().zip(w) {
                                    *d += gv * wv;
                                }
                            }
                        }
                    }
                    for ci in 0..geom.in_channels {
                        let src = &dxp[ci * plen + geom.padding..ci * plen + geom.padding + len];
                        add_into(&mut dx[ci * len..(ci + 1) * len], src);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).cols();
                let width = node.value.cols();
                self.accumulate(grads, *x, |dx| {
                    for (r, grow) in gd.chunks(width).enumerate() {
                        add_into(&mut dx[r * cols + start..r * cols + start + width], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    self.accumulate(grads, p, |dp| {
                        for (r, drow) in dp.chunks_mut(width).enumerate() {
                            add_into(drow, &gd[r * total + offset..r * total + offset + width]);
                        }
                    });
                    offset += width;
                }
            }
            Op::Gather { table, index } => {
                self.accumulate(grads, *table, |dt| {
                    for (&i, &gv) in index.iter().zip(gd) {
                        dt[i] += gv;
                    }
                });
            }
            Op::Softmax { x, bias, scale } => {
                let yd = node.value.data();
                let cols = node.value.cols();
                let mut dz = vec![T::zero(); yd.len()];
                for r in 0..yd.len() / cols {
                    let base = r * cols;
                    let mut dot = T::zero();
                    for c in 0..cols {
                        dot += yd[base + c] * gd[base + c];
                    }
                    for c in 0..cols {
                        dz[base + c] = yd[base + c] * (gd[base + c] - dot);
                    }
                }
                if let Some(b) = bias {
                    self.accumulate(grads, *b, |db| add_into(db, &dz));
                }
                // The row maximum only translates the arguments.
                self.accumulate(grads, *x, |dx| {
                    for (d, &z) in dx.iter_mut().zip(&dz) {
                        *d += z * *scale;
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let yd = node.value.data();
                let cols = node.value.cols();
                self.accumulate(grads, *x, |dx| {
                    for r in 0..yd.len() / cols {
                        let base = r * cols;
                        let mut gsum = T::zero();
                        for c in 0..cols {
                            gsum += gd[base + c];
                        }
                        for c in 0..cols {
                            dx[base + c] += gd[base + c] - yd[base + c].exp() * gsum;
                        }
                    }
                });
            }
            Op::NormalizeRows { x, denom, clamped } => {
                let yd = node.value.data();
                let cols = node.value.cols();
                self.accumulate(grads, *x, |dx| {
                    for (r, (&d, &cl)) in denom.iter().zip(clamped).enumerate() {
                        let base = r * cols;
                        if cl {
                            for c in 0..cols {
                                dx[base + c] += gd[base + c] / d;
                            }
                            continue;
                        }
                        let mut dot = T::zero();
                        for c in 0..cols {
                            dot += gd[base + c] * yd[base + c];
                        }
                        for c in 0..cols {
                            dx[base + c] += (gd[base + c] - yd[base + c] * dot) / d;
                        }
                    }
                });
            }
            Op::ReplaceRows { x, row, rows } => {
                let cols = node.value.cols();
                let mut replaced = vec![false; node.value.rows()];
                for &r in rows {
                    replaced[r] = true;
                }
                self.accumulate(grads, *x, |dx| {
                    for (r, &rep) in replaced.iter().enumerate() {
                        if !rep {
                            add_into(&mut dx[r * cols..(r + 1) * cols], &gd[r * cols..(r + 1) * cols]);
                        }
                    }
                });
                self.accumulate(grads, *row, |drow| {
                    for (r, &rep) in replaced.iter().enumerate() {
                        if rep {
                            add_into(drow, &gd[r * cols..(r + 1) * cols]);
                        }
                    }
                });
            }
            Op::Nll { logp, targets } => {
                let cols = self.value(*logp).cols();
                let gv = gd[0];
                self.accumulate(grads, *logp, |dl| {
                    for &(r, c) in targets {
                        dl[r * cols + c] -= gv;
                    }
                });
            }
            Op::Sum(x) => {
                let gv = gd[0];
                self.accumulate(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += gv));
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
