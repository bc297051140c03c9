//! Learned multi-manifold cross mapping.
//!
//! Each lag `tau_i` defines a shadow manifold built by a dilated convolution
//! over the time-reversed input embedding. Within every manifold each
//! service's trajectory is used to cross-map every other service, giving a
//! batch of causal matrices. Those are smoothed with momentum across training
//! iterations, row-softmaxed, and used to mix per-service manifold summaries
//! into the causal representation `h_ccm`.
//!
//! Layouts used throughout:
//!
//! | tensor    | shape                        |
//! |-----------|------------------------------|
//! | window    | `B x N x L_x` (chronological)|
//! | `X`       | `B x N x L_x x C_in` (reversed) |
//! | `X_conv`  | `B x N x C_out x L_out`      |
//! | `X_ccm`   | `B x N x L_out x C_out`      |
//! | `Y`       | `B x N x L_out` (reversed)   |
//! | `M`       | `B x N x N`                  |
//!
//! Position 0 of every reversed axis is the most recent observation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{
    conv_output_len, dilated_conv1d, linear, linear_backward, softmax_in_place, topk_smallest, DenseArray,
    EPSILON,
};

/// Raw value plus six calendar encodings.
pub const EMBEDDING_INPUTS: usize = 7;

/// `E_i = floor(tau_w / tau_i)`, minus one when that is even.
pub fn compute_embedding_dims(taus: &[usize], tau_w: usize) -> Result<Vec<usize>> {
    taus.iter()
        .map(|&tau| {
            if tau == 0 {
                return Err(Error::Argument("lags must be positive".into()));
            }
            let base = tau_w / tau;
            if base == 0 {
                return Err(Error::Argument(format!(
                    "lag {tau} exceeds window length {tau_w}"
                )));
            }
            Ok(if base % 2 == 0 { base - 1 } else { base })
        })
        .collect()
}

/// Lags, window and the derived embedding dimensions for one input length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingSpec {
    pub taus: Vec<usize>,
    pub tau_w: usize,
    pub dims: Vec<usize>,
    pub input_len: usize,
}

impl EmbeddingSpec {
    pub fn new(taus: Vec<usize>, tau_w: usize, input_len: usize) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::Argument("at least one lag is required".into()));
        }
        let dims = compute_embedding_dims(&taus, tau_w)?;
        Ok(Self {
            taus,
            tau_w,
            dims,
            input_len,
        })
    }

    pub fn n_manifolds(&self) -> usize {
        self.taus.len()
    }

    /// Trajectory length of manifold `i`, `None` when it is skipped.
    pub fn out_len(&self, i: usize) -> Option<usize> {
        conv_output_len(self.input_len, self.dims[i], self.taus[i])
    }

    pub fn is_skipped(&self, i: usize) -> bool {
        self.out_len(i).is_none()
    }

    /// Indices of manifolds that are not skipped.
    pub fn active(&self) -> Vec<usize> {
        (0..self.n_manifolds()).filter(|&i| !self.is_skipped(i)).collect()
    }

    fn skipped_error(&self, i: usize) -> Error {
        Error::ManifoldSkipped {
            index: i,
            tau: self.taus[i],
            dim: self.dims[i],
            input_len: self.input_len,
        }
    }
}

/// `[sin, cos]` of minute-of-hour, hour-of-day and day-of-week (Monday = 0),
/// all in UTC.
pub fn date_features(timestamp: i64) -> [f64; 6] {
    use std::f64::consts::TAU;
    let minute = timestamp.div_euclid(60).rem_euclid(60) as f64;
    let hour = timestamp.div_euclid(3600).rem_euclid(24) as f64;
    // 1970-01-01 was a Thursday.
    let weekday = (timestamp.div_euclid(86_400) + 3).rem_euclid(7) as f64;
    let (ms, mc) = (TAU * minute / 60.0).sin_cos();
    let (hs, hc) = (TAU * hour / 24.0).sin_cos();
    let (ds, dc) = (TAU * weekday / 7.0).sin_cos();
    [ms, mc, hs, hc, ds, dc]
}

/// Time-reversed embedding inputs `B x N x L x 7`.
///
/// `timestamps` holds `B x L` chronological epoch seconds, one row per window.
pub fn embedding_features(window: &DenseArray, timestamps: &[i64]) -> Result<DenseArray> {
    if window.rank() != 3 {
        return Err(Error::Shape(format!(
            "window must be B x N x L, got {:?}",
            window.shape()
        )));
    }
    let (b, n, l) = (window.dim(0), window.dim(1), window.dim(2));
    if timestamps.len() != b * l {
        return Err(Error::Argument(format!(
            "expected {} timestamps for {b} windows of length {l}, got {}",
            b * l,
            timestamps.len()
        )));
    }
    let calendar: Vec<[f64; 6]> = timestamps.iter().map(|&t| date_features(t)).collect();
    let x = window.data();
    let mut out = Vec::with_capacity(b * n * l * EMBEDDING_INPUTS);
    for bi in 0..b {
        for ni in 0..n {
            let row = &x[(bi * n + ni) * l..(bi * n + ni + 1) * l];
            for p in 0..l {
                let t = l - 1 - p;
                out.push(row[t]);
                out.extend_from_slice(&calendar[bi * l + t]);
            }
        }
    }
    DenseArray::new(&[b, n, l, EMBEDDING_INPUTS], out)
}

/// Learned affine map of [`embedding_features`] to `C_in` channels.
pub fn build_input_embedding(
    window: &DenseArray,
    timestamps: &[i64],
    weight: &DenseArray,
    bias: &DenseArray,
) -> Result<DenseArray> {
    linear(&embedding_features(window, timestamps)?, weight, bias)
}

/// `B x N x L` window reversed along time.
pub fn reverse_time(window: &DenseArray) -> DenseArray {
    let l = window.last_dim();
    let mut out = window.clone();
    out.data_mut().chunks_mut(l).for_each(|row| row.reverse());
    out
}

/// Swaps the two trailing axes of a rank-3 or rank-4 array.
pub fn transpose_last2(a: &DenseArray) -> DenseArray {
    let rank = a.rank();
    assert!(rank >= 2, "transpose_last2 needs rank >= 2");
    let (r, c) = (a.dim(rank - 2), a.dim(rank - 1));
    let mut shape = a.shape().to_vec();
    shape.swap(rank - 2, rank - 1);
    let src = a.data();
    let mut out = vec![0.0; src.len()];
    for (block_in, block_out) in src.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                block_out[j * r + i] = block_in[i * c + j];
            }
        }
    }
    DenseArray::new(&shape, out).expect("transpose preserves validity")
}

/// One shadow manifold for a batch.
#[derive(Debug, Clone)]
pub struct ShadowManifoldBatch {
    pub index: usize,
    pub out_len: usize,
    /// `B x N x C_out x L_out`, the convolution output.
    pub x_conv: DenseArray,
    /// `B x N x L_out x C_out`, one manifold point per trajectory position.
    pub x_ccm: DenseArray,
}

/// Convolves `X` (`B x N x L x C_in`) with manifold `i`'s kernels
/// (`C_out x C_in x E_i`) at dilation `tau_i`.
pub fn shadow_manifold_features(
    x: &DenseArray,
    spec: &EmbeddingSpec,
    i: usize,
    kernels: &DenseArray,
) -> Result<ShadowManifoldBatch> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!(
            "embedding must be B x N x L x C_in, got {:?}",
            x.shape()
        )));
    }
    let (b, n, l, c_in) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let x_bar = transpose_last2(x).reshape(&[b * n, c_in, l])?;
    manifold_from_channels_first(&x_bar, b, n, spec, i, kernels)
}

/// Same as [`shadow_manifold_features`] on the channels-first input
/// `B*N x C_in x L`, which callers can share across manifolds.
pub(crate) fn manifold_from_channels_first(
    x_bar: &DenseArray,
    batch: usize,
    services: usize,
    spec: &EmbeddingSpec,
    i: usize,
    kernels: &DenseArray,
) -> Result<ShadowManifoldBatch> {
    if i >= spec.n_manifolds() {
        return Err(Error::Argument(format!("no manifold {i}")));
    }
    if x_bar.dim(2) != spec.input_len {
        return Err(Error::Shape(format!(
            "input length {} does not match the embedding spec ({})",
            x_bar.dim(2),
            spec.input_len
        )));
    }
    let out_len = spec.out_len(i).ok_or_else(|| spec.skipped_error(i))?;
    if kernels.rank() != 3 || kernels.dim(2) != spec.dims[i] {
        return Err(Error::Shape(format!(
            "manifold {i} kernels must have width {}, got {:?}",
            spec.dims[i],
            kernels.shape()
        )));
    }
    let c_out = kernels.dim(0);
    let conv = dilated_conv1d(x_bar, kernels, spec.taus[i])?;
    let x_conv = conv.reshape(&[batch, services, c_out, out_len])?;
    let x_ccm = transpose_last2(&x_conv);
    Ok(ShadowManifoldBatch {
        index: i,
        out_len,
        x_conv,
        x_ccm,
    })
}

/// `cov(a, b) / (sd(a) sd(b) + eps)` with population moments.
pub fn guarded_correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (sab / n) / ((saa / n).sqrt() * (sbb / n).sqrt() + EPSILON)
}

/// Batched cross-map causal matrices for one manifold.
///
/// For each batch row `l` and source service `m`, every point of `m`'s
/// trajectory takes its `C_out + 1` nearest other points, weights them by
/// `exp(-d / (d_nearest + eps))` normalized by `sum + eps`, and estimates every
/// service `n` from `Y[l, n]` at the neighbor positions. The correlation of
/// estimate and truth fills `corr[l, m, n]`; the result is its transpose, so
/// `M[l, a, b]` is the skill of manifold `b` at estimating series `a`.
pub fn causal_matrix_train(x_ccm: &DenseArray, y: &DenseArray) -> Result<DenseArray> {
    if x_ccm.rank() != 4 {
        return Err(Error::Shape(format!(
            "X_ccm must be B x N x L_out x C_out, got {:?}",
            x_ccm.shape()
        )));
    }
    let (b, n, l_out, c_out) = (x_ccm.dim(0), x_ccm.dim(1), x_ccm.dim(2), x_ccm.dim(3));
    y.expect_shape(&[b, n, l_out], "cross-map targets")?;
    if l_out < c_out + 3 {
        return Err(Error::Precondition(format!(
            "trajectory length {l_out} is below C_out + 3 = {}",
            c_out + 3
        )));
    }
    let k = c_out + 1;
    let pts = x_ccm.data();
    let ys = y.data();
    // corr[l, m, :] for every (l, m) pair.
    let rows: Vec<Vec<f64>> = (0..b * n)
        .into_par_iter()
        .map(|lm| {
            let l = lm / n;
            let p = &pts[lm * l_out * c_out..(lm + 1) * l_out * c_out];
            let mut dist = vec![0.0; l_out * l_out];
            crate::numeric::pairwise_distances_into(p, l_out, c_out, &mut dist);
            let mut idx = Vec::with_capacity(l_out * k);
            let mut w = Vec::with_capacity(l_out * k);
            for t in 0..l_out {
                let (ni, nd) = topk_smallest(&dist[t * l_out..(t + 1) * l_out], k, Some(t))?;
                let scale = nd[0] + EPSILON;
                let u: Vec<f64> = nd.iter().map(|d| (-d / scale).exp()).collect();
                let total: f64 = u.iter().sum::<f64>() + EPSILON;
                idx.extend(ni);
                w.extend(u.iter().map(|v| v / total));
            }
            let mut estimate = vec![0.0; l_out];
            let out = (0..n)
                .map(|target| {
                    let truth = &ys[(l * n + target) * l_out..(l * n + target + 1) * l_out];
                    for (t, e) in estimate.iter_mut().enumerate() {
                        *e = idx[t * k..(t + 1) * k]
                            .iter()
                            .zip(&w[t * k..(t + 1) * k])
                            .map(|(&j, wj)| wj * truth[j])
                            .sum();
                    }
                    guarded_correlation(&estimate, truth)
                })
                .collect();
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut m = vec![0.0; b * n * n];
    for (lm, row) in rows.into_iter().enumerate() {
        let (l, src) = (lm / n, lm % n);
        for (target, v) in row.into_iter().enumerate() {
            m[(l * n + target) * n + src] = v;
        }
    }
    DenseArray::new(&[b, n, n], m)
}

/// Momentum-smoothed `N x N` causal matrix carried across training iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalMatrix {
    pub raw: DenseArray,
    pub iteration: u64,
    pub momentum: f64,
}

impl CausalMatrix {
    pub fn n_services(&self) -> usize {
        self.raw.dim(0)
    }

    pub fn row_normalized(&self) -> DenseArray {
        crate::numeric::softmax_rows(&self.raw)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.raw.data()[row * self.n_services() + col]
    }
}

pub fn validate_momentum(momentum: f64) -> Result<()> {
    if (0.0..1.0).contains(&momentum) {
        Ok(())
    } else {
        Err(Error::Argument(format!("momentum {momentum} outside [0, 1)")))
    }
}

fn repeat_batch(m: &DenseArray, batch: usize) -> DenseArray {
    let n = m.dim(0);
    let mut data = Vec::with_capacity(batch * n * n);
    for _ in 0..batch {
        data.extend_from_slice(m.data());
    }
    DenseArray::new(&[batch, n, n], data).expect("valid repeat")
}

fn batch_mean(m: &DenseArray) -> DenseArray {
    let (b, n) = (m.dim(0), m.dim(1));
    let mut out = vec![0.0; n * n];
    for block in m.data().chunks(n * n) {
        for (o, v) in out.iter_mut().zip(block) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= b as f64);
    DenseArray::new(&[n, n], out).expect("valid mean")
}

/// Blends this iteration's matrices with the previous causal matrix and
/// returns `(blend, mean_b softmax(blend))`. With no previous matrix the blend
/// is `m_train` itself.
pub fn momentum_update(
    m_train: &DenseArray,
    previous: Option<&CausalMatrix>,
    momentum: f64,
) -> Result<(DenseArray, DenseArray)> {
    validate_momentum(momentum)?;
    if m_train.rank() != 3 || m_train.dim(1) != m_train.dim(2) {
        return Err(Error::Shape(format!(
            "M_train must be B x N x N, got {:?}",
            m_train.shape()
        )));
    }
    let (b, n) = (m_train.dim(0), m_train.dim(1));
    let blend = match previous {
        None => m_train.clone(),
        Some(prev) => {
            prev.raw.expect_shape(&[n, n], "previous causal matrix")?;
            let mut blend = repeat_batch(&prev.raw, b);
            for (o, v) in blend.data_mut().iter_mut().zip(m_train.data()) {
                *o = (1.0 - momentum) * v + momentum * *o;
            }
            blend
        }
    };
    let m_cc = batch_mean(&crate::numeric::softmax_rows(&blend));
    Ok((blend, m_cc))
}

/// Output of [`ccm_representation`], kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ManifoldRepresentation {
    /// `B x N x C_out`
    pub h: DenseArray,
    /// Row-stochastic `B x N x N` mixing matrix.
    pub mixing: DenseArray,
    /// `B x N x C_out` projected manifold summary.
    pub x_hat: DenseArray,
}

/// Batched `mixing (B x N x N) . x_hat (B x N x C)`.
pub fn batched_mix(mixing: &DenseArray, x_hat: &DenseArray) -> Result<DenseArray> {
    let (b, n) = (mixing.dim(0), mixing.dim(1));
    let c = x_hat.dim(2);
    x_hat.expect_shape(&[b, n, c], "mixing operand")?;
    let (mx, xh) = (mixing.data(), x_hat.data());
    let mut out = vec![0.0; b * n * c];
    for bi in 0..b {
        for i in 0..n {
            let row = &mut out[(bi * n + i) * c..(bi * n + i + 1) * c];
            for j in 0..n {
                let w = mx[(bi * n + i) * n + j];
                let src = &xh[(bi * n + j) * c..(bi * n + j + 1) * c];
                for (o, s) in row.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }
    DenseArray::new(&[b, n, c], out)
}

/// Projects each channel's trajectory to a scalar and mixes services with
/// `softmax(blend)`. `x_conv` is `B x N x C_out x L_out`; the projection maps
/// `L_out -> 1`.
pub fn ccm_representation(
    blend: &DenseArray,
    x_conv: &DenseArray,
    proj_weight: &DenseArray,
    proj_bias: &DenseArray,
) -> Result<ManifoldRepresentation> {
    let mixing = crate::numeric::softmax_rows(blend);
    represent_with_mixing(mixing, x_conv, proj_weight, proj_bias)
}

pub(crate) fn represent_with_mixing(
    mixing: DenseArray,
    x_conv: &DenseArray,
    proj_weight: &DenseArray,
    proj_bias: &DenseArray,
) -> Result<ManifoldRepresentation> {
    if x_conv.rank() != 4 {
        return Err(Error::Shape(format!(
            "X_conv must be B x N x C_out x L_out, got {:?}",
            x_conv.shape()
        )));
    }
    let (b, n, c_out) = (x_conv.dim(0), x_conv.dim(1), x_conv.dim(2));
    if proj_weight.shape() != [1, x_conv.dim(3)] {
        return Err(Error::Shape(format!(
            "projection must map L_out = {} to 1, got weight {:?}",
            x_conv.dim(3),
            proj_weight.shape()
        )));
    }
    mixing.expect_shape(&[b, n, n], "mixing matrix")?;
    let x_hat = linear(x_conv, proj_weight, proj_bias)?.reshape(&[b, n, c_out])?;
    let h = batched_mix(&mixing, &x_hat)?;
    Ok(ManifoldRepresentation { h, mixing, x_hat })
}

/// Gradients of [`ccm_representation`] with the mixing matrix held constant:
/// `(grad_x_conv, grad_proj_weight, grad_proj_bias)`.
pub fn ccm_representation_backward(
    grad_h: &DenseArray,
    rep: &ManifoldRepresentation,
    x_conv: &DenseArray,
    proj_weight: &DenseArray,
) -> Result<(DenseArray, DenseArray, DenseArray)> {
    let (b, n, c) = (rep.x_hat.dim(0), rep.x_hat.dim(1), rep.x_hat.dim(2));
    grad_h.expect_shape(&[b, n, c], "grad h")?;
    let (mx, gh) = (rep.mixing.data(), grad_h.data());
    let mut grad_xhat = vec![0.0; b * n * c];
    for bi in 0..b {
        for i in 0..n {
            let g_row = &gh[(bi * n + i) * c..(bi * n + i + 1) * c];
            for j in 0..n {
                let w = mx[(bi * n + i) * n + j];
                let dst = &mut grad_xhat[(bi * n + j) * c..(bi * n + j + 1) * c];
                for (d, g) in dst.iter_mut().zip(g_row) {
                    *d += w * g;
                }
            }
        }
    }
    let grad_proj_out = DenseArray::new(&[b, n, c, 1], grad_xhat)?;
    linear_backward(&grad_proj_out, x_conv, proj_weight)
}

/// Arithmetic mean of per-manifold representations and causal matrices.
pub fn aggregate_manifolds(h_list: &[DenseArray], m_list: &[DenseArray]) -> Result<(DenseArray, DenseArray)> {
    if h_list.is_empty() || m_list.is_empty() {
        return Err(Error::Config(
            "every shadow manifold was skipped; shorten the lags or lengthen the input".into(),
        ));
    }
    Ok((mean_of(h_list)?, mean_of(m_list)?))
}

fn mean_of(list: &[DenseArray]) -> Result<DenseArray> {
    let mut acc = list[0].clone();
    for a in &list[1..] {
        acc.add_assign(a)?;
    }
    acc.scale(1.0 / list.len() as f64);
    Ok(acc)
}

/// Per-manifold learned weights needed for the representation path.
#[derive(Debug, Clone, Copy)]
pub struct ManifoldProjection<'a> {
    pub weight: &'a DenseArray,
    pub bias: &'a DenseArray,
}

/// Testing-mode representation: the stored matrix is repeated over the batch
/// and row-softmaxed; it is never updated.
pub fn forward_test_mode(
    manifolds: &[ShadowManifoldBatch],
    stored: Option<&CausalMatrix>,
    projections: &[ManifoldProjection<'_>],
) -> Result<DenseArray> {
    let stored = stored.ok_or_else(|| {
        Error::Config("testing mode needs the causal matrix stored by training".into())
    })?;
    if manifolds.len() != projections.len() {
        return Err(Error::Argument(format!(
            "{} manifolds but {} projections",
            manifolds.len(),
            projections.len()
        )));
    }
    let mut h_list = Vec::with_capacity(manifolds.len());
    for (mf, proj) in manifolds.iter().zip(projections) {
        let b = mf.x_conv.dim(0);
        let blend = repeat_batch(&stored.raw, b);
        h_list.push(ccm_representation(&blend, &mf.x_conv, proj.weight, proj.bias)?.h);
    }
    let (h, _) = aggregate_manifolds(&h_list, std::slice::from_ref(&stored.raw))?;
    Ok(h)
}

/// Row softmax of a stored matrix repeated over a batch of `batch`.
pub fn test_mixing(stored: &CausalMatrix, batch: usize) -> DenseArray {
    let mut m = repeat_batch(&stored.raw, batch);
    let n = stored.n_services();
    m.data_mut().chunks_mut(n).for_each(softmax_in_place);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::softmax_rows;
    use crate::rng::Xorshift64Star;
    use proptest::prelude::*;

    fn random(rng: &mut Xorshift64Star, shape: &[usize]) -> DenseArray {
        DenseArray::from_fn(shape, |_| rng.next_normal())
    }

    /// Scalar transcription of the training-mode cross map, independent of the
    /// vectorized path: full sorts, explicit loops over (l, m, n, t).
    fn oracle_causal_matrix(x_ccm: &DenseArray, y: &DenseArray) -> Vec<f64> {
        let s = x_ccm.shape();
        let (b, n, l_out, c_out) = (s[0], s[1], s[2], s[3]);
        let p = |l: usize, m: usize, t: usize, c: usize| x_ccm.data()[((l * n + m) * l_out + t) * c_out + c];
        let yv = |l: usize, m: usize, t: usize| y.data()[(l * n + m) * l_out + t];
        let mut out = vec![0.0; b * n * n];
        for l in 0..b {
            for m in 0..n {
                for tgt in 0..n {
                    let mut est = vec![0.0; l_out];
                    for t in 0..l_out {
                        let mut cand: Vec<(f64, usize)> = Vec::new();
                        for j in 0..l_out {
                            if j == t {
                                continue;
                            }
                            let mut sq = 0.0;
                            for c in 0..c_out {
                                sq += (p(l, m, t, c) - p(l, m, j, c)).powi(2);
                            }
                            cand.push((sq.sqrt(), j));
                        }
                        cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        let near = &cand[..c_out + 1];
                        let d1 = near[0].0;
                        let u: Vec<f64> = near.iter().map(|(d, _)| (-d / (d1 + 1e-8)).exp()).collect();
                        let su: f64 = u.iter().sum();
                        for (ui, (_, j)) in u.iter().zip(near) {
                            est[t] += ui / (su + 1e-8) * yv(l, tgt, *j);
                        }
                    }
                    let truth: Vec<f64> = (0..l_out).map(|t| yv(l, tgt, t)).collect();
                    let me = est.iter().sum::<f64>() / l_out as f64;
                    let mt = truth.iter().sum::<f64>() / l_out as f64;
                    let mut cov = 0.0;
                    let mut ve = 0.0;
                    let mut vt = 0.0;
                    for t in 0..l_out {
                        cov += (est[t] - me) * (truth[t] - mt);
                        ve += (est[t] - me).powi(2);
                        vt += (truth[t] - mt).powi(2);
                    }
                    let lf = l_out as f64;
                    let r = (cov / lf) / ((ve / lf).sqrt() * (vt / lf).sqrt() + 1e-8);
                    // transpose: entry [l, tgt, m]
                    out[(l * n + tgt) * n + m] = r;
                }
            }
        }
        out
    }

    #[test]
    fn embedding_dims_examples() {
        assert_eq!(compute_embedding_dims(&[1, 2, 3, 4], 100).unwrap(), vec![99, 49, 33, 25]);
        assert_eq!(compute_embedding_dims(&[100], 100).unwrap(), vec![1]);
        assert_eq!(compute_embedding_dims(&[7], 100).unwrap(), vec![13]);
        assert!(compute_embedding_dims(&[0], 100).is_err());
        assert!(compute_embedding_dims(&[101], 100).is_err());
    }

    #[test]
    fn spec_marks_skipped_manifolds() {
        let spec = EmbeddingSpec::new(vec![1, 2, 3, 4], 100, 168).unwrap();
        let lens: Vec<_> = (0..4).map(|i| spec.out_len(i).unwrap()).collect();
        assert_eq!(lens, vec![70, 72, 72, 72]);
        let short = EmbeddingSpec::new(vec![1, 2], 100, 90).unwrap();
        assert!(short.is_skipped(0));
        assert!(short.is_skipped(1));
        assert!(short.active().is_empty());
        let x = DenseArray::zeros(&[1, 1, 90, 2]);
        let k = DenseArray::zeros(&[2, 2, 99]);
        assert!(matches!(
            shadow_manifold_features(&x, &short, 0, &k),
            Err(Error::ManifoldSkipped { index: 0, .. })
        ));
    }

    #[test]
    fn date_features_monday_midnight() {
        // 2024-01-01 00:00:00 UTC was a Monday.
        let f = date_features(1_704_067_200);
        let expected = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        for (a, b) in f.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let f = date_features(1_704_067_200 + 6 * 3600 + 15 * 60);
        assert!((f[0] - 1.0).abs() < 1e-12, "quarter past");
        assert!((f[2] - 1.0).abs() < 1e-12, "06:00");
    }

    #[test]
    fn input_embedding_zero_and_passthrough() {
        let window = DenseArray::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let ts = [0, 60, 120];
        let zero = build_input_embedding(&window, &ts, &DenseArray::zeros(&[4, 7]), &DenseArray::zeros(&[4])).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));
        let eye = DenseArray::from_fn(&[7, 7], |i| if i / 7 == i % 7 { 1.0 } else { 0.0 });
        let x = build_input_embedding(&window, &ts, &eye, &DenseArray::zeros(&[7])).unwrap();
        assert_eq!(x.shape(), &[1, 2, 3, 7]);
        let first: Vec<f64> = x.data().chunks(7).map(|c| c[0]).collect();
        assert_eq!(first, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert!(embedding_features(&window, &ts[..2]).is_err());
    }

    #[test]
    fn manifold_shapes_and_identity_kernel() {
        let spec = EmbeddingSpec::new(vec![1, 2, 3, 4], 100, 168).unwrap();
        let mut rng = Xorshift64Star::new(1);
        let x = random(&mut rng, &[8, 4, 168, 3]);
        let k = random(&mut rng, &[32, 3, 99]);
        let mf = shadow_manifold_features(&x, &spec, 0, &k).unwrap();
        assert_eq!(mf.out_len, 70);
        assert_eq!(mf.x_ccm.shape(), &[8, 4, 70, 32]);

        // E = 1 manifold: each coordinate is a linear image of one time point.
        let spec1 = EmbeddingSpec::new(vec![100], 100, 10).unwrap();
        let x = random(&mut rng, &[1, 1, 10, 2]);
        let k = DenseArray::new(&[2, 2, 1], vec![1.0, 0.0, 0.5, 2.0]).unwrap();
        let mf = shadow_manifold_features(&x, &spec1, 0, &k).unwrap();
        for t in 0..10 {
            let (a, b) = (x.data()[t * 2], x.data()[t * 2 + 1]);
            assert!((mf.x_ccm.data()[t * 2] - a).abs() < 1e-15);
            assert!((mf.x_ccm.data()[t * 2 + 1] - (0.5 * a + 2.0 * b)).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_matrix_matches_scalar_oracle() {
        let mut rng = Xorshift64Star::new(99);
        for (b, n, l_out, c_out) in [(1, 2, 8, 2), (2, 3, 12, 3), (1, 1, 6, 1)] {
            let x = random(&mut rng, &[b, n, l_out, c_out]);
            let y = random(&mut rng, &[b, n, l_out]);
            let got = causal_matrix_train(&x, &y).unwrap();
            let want = oracle_causal_matrix(&x, &y);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-10, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn causal_matrix_self_prediction_of_smooth_series() {
        let l = 200;
        let series: Vec<f64> = (0..l).map(|t| (t as f64 * 0.11).sin() + 0.5 * (t as f64 * 0.037).cos()).collect();
        // Two-coordinate delay manifold as X_ccm.
        let mut pts = Vec::new();
        for t in 0..l - 3 {
            pts.push(series[t]);
            pts.push(series[t + 3]);
        }
        let x = DenseArray::new(&[1, 1, l - 3, 2], pts).unwrap();
        let y = DenseArray::new(&[1, 1, l - 3], series[..l - 3].to_vec()).unwrap();
        let m = causal_matrix_train(&x, &y).unwrap();
        assert!(m.data()[0] > 0.99, "{}", m.data()[0]);
    }

    #[test]
    fn causal_matrix_independent_noise() {
        let mut rng = Xorshift64Star::new(4);
        let l = 600;
        let mut pts = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..2 {
            let s: Vec<f64> = (0..l + 2).map(|_| rng.next_normal()).collect();
            for t in 0..l {
                pts.extend([s[t], s[t + 1], s[t + 2]]);
            }
            ys.extend_from_slice(&s[..l]);
        }
        let x = DenseArray::new(&[1, 2, l, 3], pts).unwrap();
        let y = DenseArray::new(&[1, 2, l], ys).unwrap();
        let m = causal_matrix_train(&x, &y).unwrap();
        assert!(m.data()[1].abs() < 0.2 && m.data()[2].abs() < 0.2, "{:?}", m.data());
    }

    #[test]
    fn causal_matrix_rejects_short_trajectory() {
        let x = DenseArray::zeros(&[1, 1, 5, 3]);
        let y = DenseArray::zeros(&[1, 1, 5]);
        assert!(matches!(causal_matrix_train(&x, &y), Err(Error::Precondition(_))));
    }

    #[test]
    fn momentum_cases() {
        let mut rng = Xorshift64Star::new(2);
        let m_train = random(&mut rng, &[3, 2, 2]);
        let prev = CausalMatrix {
            raw: DenseArray::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            iteration: 1,
            momentum: 0.5,
        };
        let (blend, _) = momentum_update(&m_train, Some(&prev), 0.0).unwrap();
        assert_eq!(blend, m_train);
        let (first, m_cc) = momentum_update(&m_train, None, 0.7).unwrap();
        assert_eq!(first, m_train);
        assert_eq!(m_cc.shape(), &[2, 2]);
        let (half, _) = momentum_update(&DenseArray::zeros(&[3, 2, 2]), Some(&prev), 0.5).unwrap();
        assert_eq!(half.data(), [0.5, 0.0, 0.0, 0.5].repeat(3).as_slice());
        assert!(momentum_update(&m_train, None, 1.0).is_err());
        assert!(momentum_update(&m_train, None, -0.1).is_err());
    }

    fn manifold_rep_case(rng: &mut Xorshift64Star, b: usize, n: usize, c: usize, l: usize) -> (DenseArray, DenseArray, DenseArray) {
        (random(rng, &[b, n, c, l]), random(rng, &[1, l]), random(rng, &[1]))
    }

    #[test]
    fn representation_mixing_limits() {
        let mut rng = Xorshift64Star::new(8);
        let (x_conv, w, bias) = manifold_rep_case(&mut rng, 2, 3, 4, 5);
        let mut near_eye = DenseArray::zeros(&[2, 3, 3]);
        for b in 0..2 {
            for i in 0..3 {
                near_eye.data_mut()[(b * 3 + i) * 3 + i] = 1e3;
            }
        }
        let rep = ccm_representation(&near_eye, &x_conv, &w, &bias).unwrap();
        assert!(rep.h.max_abs_diff(&rep.x_hat) < 1e-12);

        let rep = ccm_representation(&DenseArray::zeros(&[2, 3, 3]), &x_conv, &w, &bias).unwrap();
        for b in 0..2 {
            for c in 0..4 {
                let mean: f64 = (0..3).map(|j| rep.x_hat.data()[(b * 3 + j) * 4 + c]).sum::<f64>() / 3.0;
                for i in 0..3 {
                    assert!((rep.h.data()[(b * 3 + i) * 4 + c] - mean).abs() < 1e-12);
                }
            }
        }
        assert!(ccm_representation(&DenseArray::zeros(&[2, 3, 3]), &x_conv, &DenseArray::zeros(&[1, 4]), &bias).is_err());
    }

    #[test]
    fn representation_matches_triple_loop() {
        let mut rng = Xorshift64Star::new(12);
        let (x_conv, w, bias) = manifold_rep_case(&mut rng, 2, 4, 3, 6);
        let blend = random(&mut rng, &[2, 4, 4]);
        let rep = ccm_representation(&blend, &x_conv, &w, &bias).unwrap();
        let mix = softmax_rows(&blend);
        for b in 0..2 {
            for i in 0..4 {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for j in 0..4 {
                        let mut xh = bias.data()[0];
                        for t in 0..6 {
                            xh += w.data()[t] * x_conv.data()[((b * 4 + j) * 3 + c) * 6 + t];
                        }
                        acc += mix.data()[(b * 4 + i) * 4 + j] * xh;
                    }
                    assert!((rep.h.data()[(b * 4 + i) * 3 + c] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn representation_backward_matches_finite_differences() {
        let mut rng = Xorshift64Star::new(31);
        for _ in 0..20 {
            let (x_conv, w, bias) = manifold_rep_case(&mut rng, 2, 3, 2, 4);
            let blend = random(&mut rng, &[2, 3, 3]);
            let probe = random(&mut rng, &[2, 3, 2]);
            let rep = ccm_representation(&blend, &x_conv, &w, &bias).unwrap();
            let (gx, gw, gb) = ccm_representation_backward(&probe, &rep, &x_conv, &w).unwrap();
            let objective = |xc: &DenseArray, wv: &DenseArray, bv: &DenseArray| -> f64 {
                let h = ccm_representation(&blend, xc, wv, bv).unwrap().h;
                h.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let h = 1e-5;
            let check = |analytic: &DenseArray, perturb: &dyn Fn(usize, f64) -> f64| {
                for i in 0..analytic.len() {
                    let num = (perturb(i, h) - perturb(i, -h)) / (2.0 * h);
                    let a = analytic.data()[i];
                    assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-3) < 1e-6);
                }
            };
            check(&gx, &|i, d| {
                let mut xc = x_conv.clone();
                xc.data_mut()[i] += d;
                objective(&xc, &w, &bias)
            });
            check(&gw, &|i, d| {
                let mut wv = w.clone();
                wv.data_mut()[i] += d;
                objective(&x_conv, &wv, &bias)
            });
            check(&gb, &|i, d| {
                let mut bv = bias.clone();
                bv.data_mut()[i] += d;
                objective(&x_conv, &w, &bv)
            });
        }
    }

    #[test]
    fn aggregate_cases() {
        let mut rng = Xorshift64Star::new(5);
        let h = random(&mut rng, &[2, 3, 4]);
        let m = random(&mut rng, &[3, 3]);
        let (ha, ma) = aggregate_manifolds(&[h.clone()], &[m.clone()]).unwrap();
        assert_eq!((ha, ma), (h.clone(), m.clone()));
        let mut neg = h.clone();
        neg.scale(-1.0);
        let (hz, _) = aggregate_manifolds(&[h.clone(), neg], &[m.clone(), m.clone()]).unwrap();
        assert!(hz.data().iter().all(|v| *v == 0.0));
        let hs: Vec<DenseArray> = (0..4).map(|_| random(&mut rng, &[2, 3, 4])).collect();
        let ms: Vec<DenseArray> = (0..4).map(|_| random(&mut rng, &[3, 3])).collect();
        let (hm, mm) = aggregate_manifolds(&hs, &ms).unwrap();
        for i in 0..24 {
            let mean = hs.iter().map(|a| a.data()[i]).sum::<f64>() / 4.0;
            assert!((hm.data()[i] - mean).abs() < 1e-15);
        }
        for i in 0..9 {
            let mean = ms.iter().map(|a| a.data()[i]).sum::<f64>() / 4.0;
            assert!((mm.data()[i] - mean).abs() < 1e-15);
        }
        assert!(matches!(aggregate_manifolds(&[], &[]), Err(Error::Config(_))));
    }

    fn make_manifold(rng: &mut Xorshift64Star, b: usize, n: usize, c: usize, l: usize) -> ShadowManifoldBatch {
        let x_conv = random(rng, &[b, n, c, l]);
        let x_ccm = transpose_last2(&x_conv);
        ShadowManifoldBatch { index: 0, out_len: l, x_conv, x_ccm }
    }

    #[test]
    fn test_mode_cases() {
        let mut rng = Xorshift64Star::new(6);
        let mf = make_manifold(&mut rng, 2, 3, 4, 12);
        let (w, bias) = (random(&mut rng, &[1, 12]), random(&mut rng, &[1]));
        let proj = [ManifoldProjection { weight: &w, bias: &bias }];
        assert!(forward_test_mode(std::slice::from_ref(&mf), None, &proj).is_err());

        let zero = CausalMatrix { raw: DenseArray::zeros(&[3, 3]), iteration: 3, momentum: 0.5 };
        let h = forward_test_mode(std::slice::from_ref(&mf), Some(&zero), &proj).unwrap();
        let x_hat = ccm_representation(&DenseArray::zeros(&[2, 3, 3]), &mf.x_conv, &w, &bias).unwrap().x_hat;
        for b in 0..2 {
            for c in 0..4 {
                let mean: f64 = (0..3).map(|j| x_hat.data()[(b * 3 + j) * 4 + c]).sum::<f64>() / 3.0;
                assert!((h.data()[(b * 3) * 4 + c] - mean).abs() < 1e-12);
            }
        }

        // Training mode with momentum -> 1 and the stored matrix as previous.
        let stored = CausalMatrix { raw: random(&mut rng, &[3, 3]), iteration: 3, momentum: 0.5 };
        let y = random(&mut rng, &[2, 3, 12]);
        let m_train = causal_matrix_train(&mf.x_ccm, &y).unwrap();
        let (blend, _) = momentum_update(&m_train, Some(&stored), 1.0 - 1e-12).unwrap();
        let h_train = ccm_representation(&blend, &mf.x_conv, &w, &bias).unwrap().h;
        let h_test = forward_test_mode(std::slice::from_ref(&mf), Some(&stored), &proj).unwrap();
        assert!(h_train.max_abs_diff(&h_test) < 1e-9);

        let single = test_mixing(&stored, 1);
        assert_eq!(single.shape(), &[1, 3, 3]);
        assert!(single.max_abs_diff(&softmax_rows(&stored.raw).reshape(&[1, 3, 3]).unwrap()) < 1e-15);
    }

    #[test]
    fn idempotent_on_fixed_data_with_zero_momentum() {
        let mut rng = Xorshift64Star::new(10);
        let mf = make_manifold(&mut rng, 2, 3, 2, 10);
        let y = random(&mut rng, &[2, 3, 10]);
        let m_train = causal_matrix_train(&mf.x_ccm, &y).unwrap();
        let (_, first) = momentum_update(&m_train, None, 0.0).unwrap();
        let prev = CausalMatrix { raw: first.clone(), iteration: 1, momentum: 0.0 };
        let m_train2 = causal_matrix_train(&mf.x_ccm, &y).unwrap();
        let (_, second) = momentum_update(&m_train2, Some(&prev), 0.0).unwrap();
        assert_eq!(first, second);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn mixing_rows_are_stochastic(seed in any::<u64>(), m in 0.0f64..0.99) {
            let mut rng = Xorshift64Star::new(seed);
            let mf = make_manifold(&mut rng, 2, 4, 2, 9);
            let y = random(&mut rng, &[2, 4, 9]);
            let m_train = causal_matrix_train(&mf.x_ccm, &y).unwrap();
            let prev = CausalMatrix { raw: random(&mut rng, &[4, 4]), iteration: 1, momentum: m };
            let (blend, m_cc) = momentum_update(&m_train, Some(&prev), m).unwrap();
            for row in softmax_rows(&blend).data().chunks(4).chain(m_cc.data().chunks(4)) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            for row in test_mixing(&prev, 3).data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn causal_matrix_affine_invariance(seed in any::<u64>()) {
            let mut rng = Xorshift64Star::new(seed);
            let mf = make_manifold(&mut rng, 2, 3, 2, 10);
            let y = random(&mut rng, &[2, 3, 10]);
            let mut scaled = mf.x_ccm.clone();
            let per = 10 * 2;
            for (block, chunk) in scaled.data_mut().chunks_mut(per).enumerate() {
                let a = 0.5 + (block % 3) as f64 * 3.7;
                let b = -2.0 + block as f64;
                chunk.iter_mut().for_each(|v| *v = a * *v + b);
            }
            let m1 = causal_matrix_train(&mf.x_ccm, &y).unwrap();
            let m2 = causal_matrix_train(&scaled, &y).unwrap();
            prop_assert!(m1.max_abs_diff(&m2) < 1e-6, "{}", m1.max_abs_diff(&m2));
        }

        #[test]
        fn batch_permutation_equivariance(seed in any::<u64>()) {
            let mut rng = Xorshift64Star::new(seed);
            let mf = make_manifold(&mut rng, 3, 3, 2, 8);
            let y = random(&mut rng, &[3, 3, 8]);
            let perm = [2usize, 0, 1];
            let permute = |a: &DenseArray| {
                let block = a.len() / 3;
                let mut data = Vec::with_capacity(a.len());
                for &p in &perm {
                    data.extend_from_slice(&a.data()[p * block..(p + 1) * block]);
                }
                DenseArray::new(a.shape(), data).unwrap()
            };
            let m = causal_matrix_train(&mf.x_ccm, &y).unwrap();
            let mp = causal_matrix_train(&permute(&mf.x_ccm), &permute(&y)).unwrap();
            prop_assert_eq!(&permute(&m), &mp);
            let (_, cc) = momentum_update(&m, None, 0.5).unwrap();
            let (_, ccp) = momentum_update(&mp, None, 0.5).unwrap();
            prop_assert!(cc.max_abs_diff(&ccp) < 1e-12);
        }

        #[test]
        fn service_permutation_equivariance(seed in any::<u64>()) {
            let mut rng = Xorshift64Star::new(seed);
            let (b, n, c, l) = (2, 3, 2, 8);
            let mf = make_manifold(&mut rng, b, n, c, l);
            let y = random(&mut rng, &[b, n, l]);
            let perm = [1usize, 2, 0];
            let permute_services = |a: &DenseArray| {
                let block = a.len() / (b * n);
                let mut data = Vec::with_capacity(a.len());
                for bi in 0..b {
                    for &p in &perm {
                        let s = (bi * n + p) * block;
                        data.extend_from_slice(&a.data()[s..s + block]);
                    }
                }
                DenseArray::new(a.shape(), data).unwrap()
            };
            let m = causal_matrix_train(&mf.x_ccm, &y).unwrap();
            let mp = causal_matrix_train(&permute_services(&mf.x_ccm), &permute_services(&y)).unwrap();
            let (_, cc) = momentum_update(&m, None, 0.0).unwrap();
            let (_, ccp) = momentum_update(&mp, None, 0.0).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((ccp.data()[i * n + j] - cc.data()[perm[i] * n + perm[j]]).abs() < 1e-12);
                }
            }
            let (w, bias) = (random(&mut rng, &[1, l]), random(&mut rng, &[1]));
            let stored = CausalMatrix { raw: cc, iteration: 1, momentum: 0.0 };
            let stored_p = CausalMatrix { raw: ccp, iteration: 1, momentum: 0.0 };
            let proj = [ManifoldProjection { weight: &w, bias: &bias }];
            let h = forward_test_mode(std::slice::from_ref(&mf), Some(&stored), &proj).unwrap();
            let mfp = ShadowManifoldBatch {
                index: 0,
                out_len: l,
                x_conv: permute_services(&mf.x_conv),
                x_ccm: permute_services(&mf.x_ccm),
            };
            let hp = forward_test_mode(std::slice::from_ref(&mfp), Some(&stored_p), &proj).unwrap();
            prop_assert!(permute_services(&h).max_abs_diff(&hp) < 1e-12);
        }
    }
}
