//! Forward kernels shared by the autodiff graph and the plain-tensor API.

use crate::error::{Error, Result};

use super::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Default translation scale for the stabilised softmax.
pub const SOFTMAX_SCALE: f64 = 32.0;

/// `out[m×n] = a[m×k] · b[k×n]`, accumulating into `out`.
pub(crate) fn mm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn mm_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn mm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::Shape(format!("matmul of {:?} and {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    mm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// Row softmax in the translated form: each row is divided by `scale`,
/// shifted by its maximum, multiplied back by `scale` and exponentiated, so
/// every exponent argument is at most zero.
pub fn stable_softmax_rows<T: Real>(logits: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if !(scale > 0.0) {
        return Err(Error::InvalidValue(format!("softmax scale must be > 0, got {scale}")));
    }
    if logits.data().iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("NaN in softmax input".into()));
    }
    let cols = logits.cols();
    let c = T::lit(scale);
    let mut out: Vec<T> = logits.data().iter().map(|&x| x / c).collect();
    if cols > 0 {
        for row in out.chunks_mut(cols) {
            softmax_row_in_place(row, None, c);
        }
    }
    Tensor::new(logits.shape(), out)
}

/// `row ← softmax(c·row + bias)` for a row already divided by `c`, computed
/// as `exp((row − max(row))·c + bias)` then normalised.
pub(crate) fn softmax_row_in_place<T: Real>(row: &mut [T], bias: Option<&[T]>, scale: T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut shifted_max = T::neg_infinity();
    for (j, x) in row.iter_mut().enumerate() {
        *x = (*x - max) * scale;
        if let Some(b) = bias {
            *x += b[j];
        }
        if *x > shifted_max {
            shifted_max = *x;
        }
    }
    // With a bias the arguments can become positive again; a second shift
    // keeps exp() bounded without changing the result.
    if bias.is_some() && shifted_max.is_finite() {
        for x in row.iter_mut() {
            *x -= shifted_max;
        }
    }
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = x.exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn log_softmax_row_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for &x in row.iter() {
        total += (x - max).exp();
    }
    let lse = max + total.ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Normalises every row of `x` over its last axis, returning the output and
/// the per-row normalised values and inverse deviations.
pub(crate) fn layer_norm_forward<T: Real>(x: &[T], cols: usize, gain: &[T], bias: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    let n = T::lit(cols as f64);
    let eps = T::lit(LAYER_NORM_EPS);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean /= n;
        let mut var = T::zero();
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var /= n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        for c in 0..cols {
            let h = (row[c] - mean) * inv;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    (out, xhat, inv_std)
}

pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = x.cols();
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::Shape(format!(
            "layer norm over {cols} features with gain {:?} and bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let (out, _, _) = layer_norm_forward(x.data(), cols, gain.data(), bias.data());
    Tensor::new(x.shape(), out)
}

/// Geometry of a 1-d convolution over a `[channels × length]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    /// Symmetric zero padding applied to both ends.
    pub padding: usize,
}

impl ConvGeometry {
    /// `floor((L + 2·pad − kernel)/stride) + 1`, or `None` when the padded
    /// input is shorter than the kernel.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.out_channels, self.in_channels / self.groups, self.kernel]
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.groups == 0
            || self.stride == 0
            || self.kernel == 0
            || !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(Error::Shape(format!(
                "invalid convolution geometry {self:?}: channels must divide into groups"
            )));
        }
        Ok(())
    }
}

pub(crate) fn pad_input<T: Real>(x: &[T], channels: usize, len: usize, pad: usize) -> Vec<T> {
    if pad == 0 {
        return x.to_vec();
    }
    let plen = len + 2 * pad;
    let mut out = vec![T::zero(); channels * plen];
    for c in 0..channels {
        out[c * plen + pad..c * plen + pad + len].copy_from_slice(&x[c * len..(c + 1) * len]);
    }
    out
}

/// Grouped strided 1-d convolution without the geometry checks.
pub(crate) fn conv1d_raw<T: Real>(
    x_padded: &[T],
    padded_len: usize,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
    out_len: usize,
) -> Vec<T> {
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let k = g.kernel;
    let mut out = vec![T::zero(); g.out_channels * out_len];
    for co in 0..g.out_channels {
        let group = co / cout_g;
        let orow = &mut out[co * out_len..(co + 1) * out_len];
        if let Some(b) = bias {
            orow.iter_mut().for_each(|o| *o = b[co]);
        }
        for cl in 0..cin_g {
            let ci = group * cin_g + cl;
            let xrow = &x_padded[ci * padded_len..(ci + 1) * padded_len];
            let w = &weight[(co * cin_g + cl) * k..(co * cin_g + cl + 1) * k];
            for (t, o) in orow.iter_mut().enumerate() {
                let window = &xrow[t * g.stride..t * g.stride + k];
                let mut acc = T::zero();
                for (&wv, &xv) in w.iter().zip(window) {
                    acc += wv * xv;
                }
                *o += acc;
            }
        }
    }
    out
}

/// 1-d convolution of `x[in_channels × L]` with `weight[out × in/groups × kernel]`.
pub fn conv1d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    groups: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, weight, bias, stride, groups, padding)?;
    let len = x.shape()[1];
    let out_len = g.output_len(len).ok_or_else(|| {
        Error::Length(format!(
            "convolution input of length {len} is shorter than kernel {}",
            g.kernel
        ))
    })?;
    let xp = pad_input(x.data(), g.in_channels, len, padding);
    let out = conv1d_raw(
        &xp,
        len + 2 * padding,
        weight.data(),
        bias.map(|b| b.data()),
        &g,
        out_len,
    );
    Tensor::new(&[g.out_channels, out_len], out)
}

pub(crate) fn conv_geometry<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    groups: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    if x.shape().len() != 2 || weight.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "conv1d expects input [C×L] and weight [O×C/g×K], got {:?} and {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    let g = ConvGeometry {
        in_channels: x.shape()[0],
        out_channels: weight.shape()[0],
        kernel: weight.shape()[2],
        stride,
        groups,
        padding,
    };
    g.validate()?;
    if weight.shape()[1] * groups != g.in_channels {
        return Err(Error::Shape(format!(
            "weight {:?} does not match {} input channels in {groups} groups",
            weight.shape(),
            g.in_channels
        )));
    }
    if let Some(b) = bias {
        if b.len() != g.out_channels {
            return Err(Error::Shape(format!(
                "conv bias has {} entries for {} output channels",
                b.len(),
                g.out_channels
            )));
        }
    }
    Ok(g)
}
