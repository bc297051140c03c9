//! Dense row-major `f64` arrays and the kernels the rest of the crate is
//! built from: distances, neighbor selection, correlation, softmax, dilated
//! convolution, affine layers and Adam.
//!
//! Every kernel is a pure function. Batched kernels fan out over rayon but
//! each output element is reduced in a fixed order, so results do not depend
//! on the size of the thread pool.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Additive guard used wherever a denominator may vanish.
pub const EPSILON: f64 = 1e-8;

const MAX_RANK: usize = 4;

/// A shaped array of up to four dimensions stored contiguously in row-major
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    /// Builds an array, rejecting bad shapes and non-finite values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        let array = Self {
            shape: shape.to_vec(),
            data,
        };
        array.ensure_finite("DenseArray::new")?;
        Ok(array)
    }

    /// # Panics
    ///
    /// Panics on an empty shape, a zero extent or rank above four.
    pub fn zeros(shape: &[usize]) -> Self {
        validate_shape(shape).expect("invalid shape for zeros");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut out = Self::zeros(shape);
        out.data.fill(value);
        out
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut out = Self::zeros(shape);
        for (i, v) in out.data.iter_mut().enumerate() {
            *v = f(i);
        }
        out
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Extent of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn ensure_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape == shape {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: expected shape {shape:?}, got {:?}",
                self.shape
            )))
        }
    }

    pub fn max_abs_diff(&self, other: &DenseArray) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &DenseArray) -> Result<()> {
        other.expect_shape(&self.shape, "add_assign")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Shape(format!(
            "rank must be between 1 and {MAX_RANK}, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

/// Euclidean distances between all rows of an `n x d` matrix.
pub fn pairwise_distances(points: &DenseArray) -> Result<DenseArray> {
    if points.rank() != 2 {
        return Err(Error::Shape(format!(
            "pairwise_distances expects n x d points, got {:?}",
            points.shape()
        )));
    }
    let (n, d) = (points.dim(0), points.dim(1));
    let mut out = vec![0.0; n * n];
    pairwise_distances_into(points.data(), n, d, &mut out);
    let out = DenseArray::new(&[n, n], out)?;
    Ok(out)
}

/// Slice form of [`pairwise_distances`]; `out` must hold `n * n` values.
pub(crate) fn pairwise_distances_into(points: &[f64], n: usize, d: usize, out: &mut [f64]) {
    debug_assert_eq!(points.len(), n * d);
    debug_assert_eq!(out.len(), n * n);
    for i in 0..n {
        out[i * n + i] = 0.0;
        let pi = &points[i * d..(i + 1) * d];
        for j in (i + 1)..n {
            let pj = &points[j * d..(j + 1) * d];
            let sq: f64 = pi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
            let dist = sq.sqrt();
            out[i * n + j] = dist;
            out[j * n + i] = dist;
        }
    }
}

/// Returns the `k` smallest entries of `row` in ascending order, never
/// returning `exclude`. Equal distances are ordered by index.
pub fn topk_smallest(
    row: &[f64],
    k: usize,
    exclude: Option<usize>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let available = row.len() - usize::from(exclude.is_some_and(|e| e < row.len()));
    if k > available {
        return Err(Error::Argument(format!(
            "requested {k} neighbors but only {available} candidates exist"
        )));
    }
    let mut candidates: Vec<(f64, usize)> = row
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, &d)| (d, i))
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, order);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(order);
    Ok(candidates.into_iter().map(|(d, i)| (i, d)).unzip())
}

/// Pearson correlation with an explicit flag for the zero-variance case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub r: f64,
    /// Set when either input has (numerically) zero variance; `r` is then 0.
    pub degenerate: bool,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "pearson inputs differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Argument("pearson needs at least two samples".into()));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if is_flat(saa, a) || is_flat(sbb, b) {
        return Ok(Correlation {
            r: 0.0,
            degenerate: true,
        });
    }
    let r = (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0);
    Ok(Correlation {
        r,
        degenerate: false,
    })
}

// Sum of squared deviations indistinguishable from rounding noise.
fn is_flat(sum_sq: f64, values: &[f64]) -> bool {
    let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    sum_sq <= 16.0 * values.len() as f64 * (f64::EPSILON * scale).powi(2)
}

/// Softmax over the trailing axis with max-subtraction.
pub fn softmax_rows(m: &DenseArray) -> DenseArray {
    let n = m.last_dim();
    let mut out = m.clone();
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Output length of a stride-1, unpadded convolution.
pub fn conv_output_len(input_len: usize, kernel: usize, dilation: usize) -> Option<usize> {
    let span = dilation.checked_mul(kernel.checked_sub(1)?)?;
    input_len.checked_sub(span).filter(|&l| l >= 1)
}

struct ConvDims {
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    kernel: usize,
    out_len: usize,
}

fn conv_dims(input: &DenseArray, kernels: &DenseArray, dilation: usize) -> Result<ConvDims> {
    if input.rank() != 3 || kernels.rank() != 3 {
        return Err(Error::Shape(format!(
            "dilated_conv1d expects input B x C_in x L and kernels C_out x C_in x E, got {:?} and {:?}",
            input.shape(),
            kernels.shape()
        )));
    }
    if dilation == 0 {
        return Err(Error::Argument("dilation must be positive".into()));
    }
    let (batch, c_in, len) = (input.dim(0), input.dim(1), input.dim(2));
    let (c_out, kc_in, kernel) = (kernels.dim(0), kernels.dim(1), kernels.dim(2));
    if kc_in != c_in {
        return Err(Error::Shape(format!(
            "kernel expects {kc_in} input channels, input has {c_in}"
        )));
    }
    let out_len = conv_output_len(len, kernel, dilation).ok_or_else(|| {
        Error::Precondition(format!(
            "window of {kernel} taps at dilation {dilation} exceeds series length {len}"
        ))
    })?;
    Ok(ConvDims {
        batch,
        c_in,
        len,
        c_out,
        kernel,
        out_len,
    })
}

/// Stride-1, unpadded, bias-free dilated 1-D convolution.
///
/// `out[b, o, t] = sum_{c, k} kernels[o, c, k] * input[b, c, t + k * dilation]`,
/// so output position `t` reads input positions `t, t + dilation, ...`.
pub fn dilated_conv1d(
    input: &DenseArray,
    kernels: &DenseArray,
    dilation: usize,
) -> Result<DenseArray> {
    let d = conv_dims(input, kernels, dilation)?;
    let mut out = vec![0.0; d.batch * d.c_out * d.out_len];
    let x = input.data();
    let w = kernels.data();
    out.par_chunks_mut(d.c_out * d.out_len)
        .enumerate()
        .for_each(|(b, out_b)| {
            let x_b = &x[b * d.c_in * d.len..(b + 1) * d.c_in * d.len];
            for o in 0..d.c_out {
                let out_row = &mut out_b[o * d.out_len..(o + 1) * d.out_len];
                for c in 0..d.c_in {
                    let x_row = &x_b[c * d.len..(c + 1) * d.len];
                    for k in 0..d.kernel {
                        let wk = w[(o * d.c_in + c) * d.kernel + k];
                        let shifted = &x_row[k * dilation..k * dilation + d.out_len];
                        for (acc, xv) in out_row.iter_mut().zip(shifted) {
                            *acc += wk * xv;
                        }
                    }
                }
            }
        });
    let out = DenseArray::new(&[d.batch, d.c_out, d.out_len], out)?;
    Ok(out)
}

/// Gradients of [`dilated_conv1d`] with respect to its input and kernels.
pub fn dilated_conv1d_backward(
    grad_out: &DenseArray,
    saved_input: &DenseArray,
    kernels: &DenseArray,
    dilation: usize,
) -> Result<(DenseArray, DenseArray)> {
    let d = conv_dims(saved_input, kernels, dilation)?;
    grad_out.expect_shape(&[d.batch, d.c_out, d.out_len], "conv grad_out")?;
    let g = grad_out.data();
    let x = saved_input.data();
    let w = kernels.data();

    let mut grad_in = vec![0.0; d.batch * d.c_in * d.len];
    grad_in
        .par_chunks_mut(d.c_in * d.len)
        .enumerate()
        .for_each(|(b, gi_b)| {
            let g_b = &g[b * d.c_out * d.out_len..(b + 1) * d.c_out * d.out_len];
            for o in 0..d.c_out {
                let g_row = &g_b[o * d.out_len..(o + 1) * d.out_len];
                for c in 0..d.c_in {
                    let gi_row = &mut gi_b[c * d.len..(c + 1) * d.len];
                    for k in 0..d.kernel {
                        let wk = w[(o * d.c_in + c) * d.kernel + k];
                        let shifted = &mut gi_row[k * dilation..k * dilation + d.out_len];
                        for (acc, gv) in shifted.iter_mut().zip(g_row) {
                            *acc += wk * gv;
                        }
                    }
                }
            }
        });

    let mut grad_k = vec![0.0; d.c_out * d.c_in * d.kernel];
    grad_k
        .par_chunks_mut(d.c_in * d.kernel)
        .enumerate()
        .for_each(|(o, gk_o)| {
            for b in 0..d.batch {
                let g_row = &g[(b * d.c_out + o) * d.out_len..(b * d.c_out + o + 1) * d.out_len];
                for c in 0..d.c_in {
                    let x_row = &x[(b * d.c_in + c) * d.len..(b * d.c_in + c + 1) * d.len];
                    for k in 0..d.kernel {
                        let shifted = &x_row[k * dilation..k * dilation + d.out_len];
                        let dot: f64 = g_row.iter().zip(shifted).map(|(a, b)| a * b).sum();
                        gk_o[c * d.kernel + k] += dot;
                    }
                }
            }
        });

    Ok((
        DenseArray::new(saved_input.shape(), grad_in)?,
        DenseArray::new(kernels.shape(), grad_k)?,
    ))
}

fn linear_dims(input: &DenseArray, weight: &DenseArray, bias: &DenseArray) -> Result<(usize, usize, usize)> {
    if weight.rank() != 2 {
        return Err(Error::Shape(format!(
            "linear weight must be d_out x d_in, got {:?}",
            weight.shape()
        )));
    }
    let (d_out, d_in) = (weight.dim(0), weight.dim(1));
    if input.last_dim() != d_in {
        return Err(Error::Shape(format!(
            "linear expects trailing dimension {d_in}, input shape {:?}",
            input.shape()
        )));
    }
    bias.expect_shape(&[d_out], "linear bias")?;
    Ok((input.len() / d_in, d_in, d_out))
}

/// Affine map over the trailing axis: `out[.., j] = sum_i weight[j, i] * input[.., i] + bias[j]`.
pub fn linear(input: &DenseArray, weight: &DenseArray, bias: &DenseArray) -> Result<DenseArray> {
    let (rows, d_in, d_out) = linear_dims(input, weight, bias)?;
    let x = input.data();
    let w = weight.data();
    let mut out = vec![0.0; rows * d_out];
    out.par_chunks_mut(d_out).enumerate().for_each(|(r, out_r)| {
        let x_r = &x[r * d_in..(r + 1) * d_in];
        for (j, o) in out_r.iter_mut().enumerate() {
            let w_j = &w[j * d_in..(j + 1) * d_in];
            *o = bias.data()[j] + w_j.iter().zip(x_r).map(|(a, b)| a * b).sum::<f64>();
        }
    });
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = d_out;
    DenseArray::new(&shape, out)
}

/// Gradients of [`linear`]: `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward(
    grad_out: &DenseArray,
    input: &DenseArray,
    weight: &DenseArray,
) -> Result<(DenseArray, DenseArray, DenseArray)> {
    let (d_out, d_in) = (weight.dim(0), weight.dim(1));
    let zero_bias = DenseArray::zeros(&[d_out]);
    let (rows, _, _) = linear_dims(input, weight, &zero_bias)?;
    if grad_out.len() != rows * d_out || grad_out.last_dim() != d_out {
        return Err(Error::Shape(format!(
            "linear grad_out shape {:?} inconsistent with input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let g = grad_out.data();
    let x = input.data();
    let w = weight.data();

    let mut grad_in = vec![0.0; rows * d_in];
    grad_in
        .par_chunks_mut(d_in)
        .enumerate()
        .for_each(|(r, gi_r)| {
            for j in 0..d_out {
                let gj = g[r * d_out + j];
                if gj == 0.0 {
                    continue;
                }
                let w_j = &w[j * d_in..(j + 1) * d_in];
                for (acc, wv) in gi_r.iter_mut().zip(w_j) {
                    *acc += gj * wv;
                }
            }
        });

    let mut grad_w = vec![0.0; d_out * d_in];
    grad_w
        .par_chunks_mut(d_in)
        .enumerate()
        .for_each(|(j, gw_j)| {
            for r in 0..rows {
                let gj = g[r * d_out + j];
                if gj == 0.0 {
                    continue;
                }
                let x_r = &x[r * d_in..(r + 1) * d_in];
                for (acc, xv) in gw_j.iter_mut().zip(x_r) {
                    *acc += gj * xv;
                }
            }
        });

    let mut grad_b = vec![0.0; d_out];
    for r in 0..rows {
        for (acc, gv) in grad_b.iter_mut().zip(&g[r * d_out..(r + 1) * d_out]) {
            *acc += gv;
        }
    }

    Ok((
        DenseArray::new(input.shape(), grad_in)?,
        DenseArray::new(weight.shape(), grad_w)?,
        DenseArray::new(&[d_out], grad_b)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub first: DenseArray,
    pub second: DenseArray,
}

impl AdamMoments {
    pub fn zeros_like(param: &DenseArray) -> Self {
        Self {
            first: DenseArray::zeros(param.shape()),
            second: DenseArray::zeros(param.shape()),
        }
    }
}

/// One bias-corrected Adam update. `step` counts from 1.
pub fn adam_step(
    param: &mut DenseArray,
    grad: &DenseArray,
    moments: &mut AdamMoments,
    config: &AdamConfig,
    step: u64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Argument("adam step index starts at 1".into()));
    }
    grad.expect_shape(param.shape(), "adam gradient")?;
    moments.first.expect_shape(param.shape(), "adam first moment")?;
    moments.second.expect_shape(param.shape(), "adam second moment")?;
    let correction1 = 1.0 - config.beta1.powf(step as f64);
    let correction2 = 1.0 - config.beta2.powf(step as f64);
    let m = moments.first.data_mut();
    let v = moments.second.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
    }
    param.ensure_finite("adam_step")
}
