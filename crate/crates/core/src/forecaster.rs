//! Traffic forecaster: input embedding, CCMPlus causal representation, a
//! pluggable backbone and a fusion head trained with MSE and Adam.

use std::time::Instant;

use log::{debug, info};

use crate::ccmplus::{
    self, causal_matrix_train, ccm_representation, ccm_representation_backward, embedding_features,
    manifold_from_channels_first, momentum_update, represent_with_mixing, reverse_time, test_mixing,
    transpose_last2, CausalMatrix, EmbeddingSpec, ManifoldRepresentation, ShadowManifoldBatch,
    EMBEDDING_INPUTS,
};
use crate::data::{split, window_count, NormalizationRecord, SplitRatios, TrafficPanel};
use crate::error::{Error, Result};
use crate::numeric::{
    adam_step, dilated_conv1d_backward, linear, linear_backward, AdamConfig, AdamMoments, DenseArray,
};
use crate::rng::Xorshift64Star;

/// Architecture hyperparameters. `n_services` is fixed by the training panel.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_services: usize,
    pub input_len: usize,
    pub pred_len: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub taus: Vec<usize>,
    pub tau_w: usize,
    pub d_ts: usize,
    pub head_hidden: usize,
    /// When false the causal slot of the head input is held at zero.
    pub use_ccm: bool,
}

impl ModelConfig {
    pub fn new(n_services: usize) -> Self {
        Self {
            n_services,
            input_len: 168,
            pred_len: 1,
            c_in: 16,
            c_out: 32,
            taus: vec![1, 2, 3, 4],
            tau_w: 100,
            d_ts: 64,
            head_hidden: 64,
            use_ccm: true,
        }
    }

    pub fn embedding_spec(&self) -> Result<EmbeddingSpec> {
        EmbeddingSpec::new(self.taus.clone(), self.tau_w, self.input_len)
    }

    pub fn validate(&self) -> Result<EmbeddingSpec> {
        let positive = [
            ("n_services", self.n_services),
            ("input_len", self.input_len),
            ("pred_len", self.pred_len),
            ("c_in", self.c_in),
            ("c_out", self.c_out),
            ("tau_w", self.tau_w),
            ("d_ts", self.d_ts),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let spec = self.embedding_spec()?;
        let active = spec.active();
        if active.is_empty() {
            return Err(Error::Config(format!(
                "every shadow manifold is skipped for input length {}",
                self.input_len
            )));
        }
        for &i in &active {
            let l_out = spec.out_len(i).expect("active");
            if l_out < self.c_out + 3 {
                return Err(Error::Config(format!(
                    "manifold {i} (tau={}, E={}) has trajectory length {l_out}, below c_out + 3 = {}",
                    spec.taus[i],
                    spec.dims[i],
                    self.c_out + 3
                )));
            }
        }
        Ok(spec)
    }

    /// Key-value form used in checkpoints.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let taus: Vec<String> = self.taus.iter().map(|t| t.to_string()).collect();
        vec![
            ("n_services".into(), self.n_services.to_string()),
            ("input_len".into(), self.input_len.to_string()),
            ("pred_len".into(), self.pred_len.to_string()),
            ("c_in".into(), self.c_in.to_string()),
            ("c_out".into(), self.c_out.to_string()),
            ("taus".into(), taus.join(",")),
            ("tau_w".into(), self.tau_w.to_string()),
            ("d_ts".into(), self.d_ts.to_string()),
            ("head_hidden".into(), self.head_hidden.to_string()),
            ("use_ccm".into(), self.use_ccm.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("model config lacks {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for {key}")))
        };
        let taus = get("taus")?
            .split(',')
            .map(|t| t.parse().map_err(|_| Error::Checkpoint("bad taus".into())))
            .collect::<Result<Vec<usize>>>()?;
        Ok(Self {
            n_services: num("n_services")?,
            input_len: num("input_len")?,
            pred_len: num("pred_len")?,
            c_in: num("c_in")?,
            c_out: num("c_out")?,
            taus,
            tau_w: num("tau_w")?,
            d_ts: num("d_ts")?,
            head_hidden: num("head_hidden")?,
            use_ccm: get("use_ccm")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad use_ccm".into()))?,
        })
    }
}

fn uniform_init(rng: &mut Xorshift64Star, shape: &[usize], fan_in: usize) -> DenseArray {
    let bound = 1.0 / (fan_in as f64).sqrt();
    DenseArray::from_fn(shape, |_| (2.0 * rng.next_f64() - 1.0) * bound)
}

fn tanh_in_place(a: &mut DenseArray) {
    a.data_mut().iter_mut().for_each(|v| *v = v.tanh());
}

/// `grad * (1 - a^2)` for `a = tanh(z)`.
fn tanh_backward(grad: &DenseArray, activated: &DenseArray) -> DenseArray {
    let mut out = grad.clone();
    for (g, a) in out.data_mut().iter_mut().zip(activated.data()) {
        *g *= 1.0 - a * a;
    }
    out
}

/// Saved activations of one backbone call.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    pub h: DenseArray,
    pub saved: Vec<DenseArray>,
}

/// A per-service temporal model over the embedded input `B x N x L_x x C_in`
/// producing `B x N x d_ts`.
pub trait Backbone: Clone + Send + Sync {
    fn output_width(&self) -> usize;
    fn forward(&self, x: &DenseArray) -> Result<BackboneTrace>;
    /// Returns the input gradient and one gradient per [`Backbone::named_params`] entry.
    fn backward(&self, trace: &BackboneTrace, grad_h: &DenseArray) -> Result<(DenseArray, Vec<DenseArray>)>;
    fn named_params(&self) -> Vec<(String, &DenseArray)>;
    fn params_mut(&mut self) -> Vec<&mut DenseArray>;
}

/// Two-layer tanh MLP over the flattened `L_x * C_in` window of each service.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBackbone {
    pub input_len: usize,
    pub c_in: usize,
    pub w1: DenseArray,
    pub b1: DenseArray,
    pub w2: DenseArray,
    pub b2: DenseArray,
}

impl MlpBackbone {
    pub fn new(input_len: usize, c_in: usize, d_ts: usize, rng: &mut Xorshift64Star) -> Self {
        let fan = input_len * c_in;
        Self {
            input_len,
            c_in,
            w1: uniform_init(rng, &[d_ts, fan], fan),
            b1: uniform_init(rng, &[d_ts], fan),
            w2: uniform_init(rng, &[d_ts, d_ts], d_ts),
            b2: uniform_init(rng, &[d_ts], d_ts),
        }
    }
}

impl Backbone for MlpBackbone {
    fn output_width(&self) -> usize {
        self.w2.dim(0)
    }

    fn forward(&self, x: &DenseArray) -> Result<BackboneTrace> {
        if x.rank() != 4 || x.dim(2) != self.input_len || x.dim(3) != self.c_in {
            return Err(Error::Shape(format!(
                "backbone expects B x N x {} x {}, got {:?}",
                self.input_len,
                self.c_in,
                x.shape()
            )));
        }
        let flat = x.clone().reshape(&[x.dim(0), x.dim(1), self.input_len * self.c_in])?;
        let mut a1 = linear(&flat, &self.w1, &self.b1)?;
        tanh_in_place(&mut a1);
        let h = linear(&a1, &self.w2, &self.b2)?;
        Ok(BackboneTrace {
            h,
            saved: vec![flat, a1],
        })
    }

    fn backward(&self, trace: &BackboneTrace, grad_h: &DenseArray) -> Result<(DenseArray, Vec<DenseArray>)> {
        let (flat, a1) = (&trace.saved[0], &trace.saved[1]);
        let (g_a1, g_w2, g_b2) = linear_backward(grad_h, a1, &self.w2)?;
        let g_z1 = tanh_backward(&g_a1, a1);
        let (g_flat, g_w1, g_b1) = linear_backward(&g_z1, flat, &self.w1)?;
        let g_x = g_flat.reshape(&[flat.dim(0), flat.dim(1), self.input_len, self.c_in])?;
        Ok((g_x, vec![g_w1, g_b1, g_w2, g_b2]))
    }

    fn named_params(&self) -> Vec<(String, &DenseArray)> {
        vec![
            ("backbone.w1".into(), &self.w1),
            ("backbone.b1".into(), &self.b1),
            ("backbone.w2".into(), &self.w2),
            ("backbone.b2".into(), &self.b2),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut DenseArray> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Learned weights of one non-skipped shadow manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldParams {
    pub index: usize,
    /// `C_out x C_in x E_i`
    pub kernels: DenseArray,
    /// `1 x L_out`
    pub proj_weight: DenseArray,
    pub proj_bias: DenseArray,
}

/// Two-layer tanh head on `[h_ccm | h_ts]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub w1: DenseArray,
    pub b1: DenseArray,
    pub w2: DenseArray,
    pub b2: DenseArray,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: Vec<AdamMoments>,
}

/// All trainable state of a forecaster plus its optimizer and stored causal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<B: Backbone = MlpBackbone> {
    pub config: ModelConfig,
    pub embed_weight: DenseArray,
    pub embed_bias: DenseArray,
    pub manifolds: Vec<ManifoldParams>,
    pub backbone: B,
    pub head: FusionHead,
    pub optimizer: OptimizerState,
    pub causal: Option<CausalMatrix>,
}

impl ModelParams<MlpBackbone> {
    /// Fresh weights drawn from the portable stream seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = Xorshift64Star::new(seed);
        let backbone_rng = &mut rng.fork();
        let backbone = MlpBackbone::new(config.input_len, config.c_in, config.d_ts, backbone_rng);
        Self::with_backbone(config, backbone, &mut rng)
    }
}

impl<B: Backbone> ModelParams<B> {
    pub fn with_backbone(config: ModelConfig, backbone: B, rng: &mut Xorshift64Star) -> Result<Self> {
        let spec = config.validate()?;
        if backbone.output_width() != config.d_ts {
            return Err(Error::Config(format!(
                "backbone width {} differs from d_ts {}",
                backbone.output_width(),
                config.d_ts
            )));
        }
        let embed_weight = uniform_init(rng, &[config.c_in, EMBEDDING_INPUTS], EMBEDDING_INPUTS);
        let embed_bias = uniform_init(rng, &[config.c_in], EMBEDDING_INPUTS);
        let manifolds = spec
            .active()
            .into_iter()
            .map(|i| {
                let fan = config.c_in * spec.dims[i];
                let l_out = spec.out_len(i).expect("active");
                ManifoldParams {
                    index: i,
                    kernels: uniform_init(rng, &[config.c_out, config.c_in, spec.dims[i]], fan),
                    proj_weight: uniform_init(rng, &[1, l_out], l_out),
                    proj_bias: uniform_init(rng, &[1], l_out),
                }
            })
            .collect();
        let head_in = config.c_out + config.d_ts;
        let head = FusionHead {
            w1: uniform_init(rng, &[config.head_hidden, head_in], head_in),
            b1: uniform_init(rng, &[config.head_hidden], head_in),
            w2: uniform_init(rng, &[config.pred_len, config.head_hidden], config.head_hidden),
            b2: uniform_init(rng, &[config.pred_len], config.head_hidden),
        };
        let mut params = Self {
            config,
            embed_weight,
            embed_bias,
            manifolds,
            backbone,
            head,
            optimizer: OptimizerState {
                step: 0,
                moments: Vec::new(),
            },
            causal: None,
        };
        params.reset_optimizer();
        Ok(params)
    }

    pub fn reset_optimizer(&mut self) {
        self.optimizer = OptimizerState {
            step: 0,
            moments: self
                .named_params()
                .iter()
                .map(|(_, p)| AdamMoments::zeros_like(p))
                .collect(),
        };
    }

    /// Every trainable array in a fixed order, with stable names.
    pub fn named_params(&self) -> Vec<(String, &DenseArray)> {
        let mut out = vec![
            ("embed.weight".to_string(), &self.embed_weight),
            ("embed.bias".to_string(), &self.embed_bias),
        ];
        for m in &self.manifolds {
            out.push((format!("manifold.{}.kernels", m.index), &m.kernels));
            out.push((format!("manifold.{}.proj_weight", m.index), &m.proj_weight));
            out.push((format!("manifold.{}.proj_bias", m.index), &m.proj_bias));
        }
        out.extend(self.backbone.named_params());
        out.push(("head.w1".into(), &self.head.w1));
        out.push(("head.b1".into(), &self.head.b1));
        out.push(("head.w2".into(), &self.head.w2));
        out.push(("head.b2".into(), &self.head.b2));
        out
    }

    /// Same order as [`ModelParams::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut out = vec![&mut self.embed_weight, &mut self.embed_bias];
        for m in &mut self.manifolds {
            out.push(&mut m.kernels);
            out.push(&mut m.proj_weight);
            out.push(&mut m.proj_bias);
        }
        out.extend(self.backbone.params_mut());
        out.push(&mut self.head.w1);
        out.push(&mut self.head.b1);
        out.push(&mut self.head.w2);
        out.push(&mut self.head.b2);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

/// How the causal mixing matrix is obtained for a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Mixing<'a> {
    /// Cross-map the batch and blend with the previous matrix.
    Train {
        previous: Option<&'a CausalMatrix>,
        momentum: f64,
    },
    /// Use a stored matrix unchanged.
    Stored(&'a CausalMatrix),
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub prediction: DenseArray,
    pub h_ccm: DenseArray,
    pub h_ts: DenseArray,
    /// Updated matrix in training mode.
    pub causal: Option<DenseArray>,
    features: DenseArray,
    x_bar: Option<DenseArray>,
    manifolds: Vec<(ShadowManifoldBatch, ManifoldRepresentation)>,
    backbone: BackboneTrace,
    head_input: DenseArray,
    head_hidden: DenseArray,
}

/// One mini-batch of windows.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `B x N x L_x` inputs in chronological order.
    pub inputs: DenseArray,
    /// `B x L_x` epoch seconds.
    pub timestamps: Vec<i64>,
    /// `B x N x L_pred`
    pub targets: DenseArray,
}

fn concat_last(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    let (ca, cb) = (a.last_dim(), b.last_dim());
    let rows = a.len() / ca;
    if b.len() / cb != rows {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(rows * (ca + cb));
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
        data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = ca + cb;
    DenseArray::new(&shape, data)
}

fn split_last(a: &DenseArray, left: usize) -> Result<(DenseArray, DenseArray)> {
    let c = a.last_dim();
    let rows = a.len() / c;
    let (mut l, mut r) = (Vec::with_capacity(rows * left), Vec::with_capacity(rows * (c - left)));
    for row in a.data().chunks(c) {
        l.extend_from_slice(&row[..left]);
        r.extend_from_slice(&row[left..]);
    }
    let mut ls = a.shape().to_vec();
    let mut rs = a.shape().to_vec();
    *ls.last_mut().expect("rank >= 1") = left;
    *rs.last_mut().expect("rank >= 1") = c - left;
    Ok((DenseArray::new(&ls, l)?, DenseArray::new(&rs, r)?))
}

/// Reversed ground truth aligned with manifold trajectory positions.
fn cross_map_targets(inputs: &DenseArray, l_out: usize) -> Result<DenseArray> {
    let rev = reverse_time(inputs);
    let (b, n, l) = (rev.dim(0), rev.dim(1), rev.dim(2));
    let mut data = Vec::with_capacity(b * n * l_out);
    for row in rev.data().chunks(l) {
        data.extend_from_slice(&row[..l_out]);
    }
    DenseArray::new(&[b, n, l_out], data)
}

/// Runs the whole model on a batch.
pub fn forward<B: Backbone>(params: &ModelParams<B>, batch: &Batch, mixing: Mixing<'_>) -> Result<ForwardPass> {
    let cfg = &params.config;
    let inputs = &batch.inputs;
    inputs.expect_shape(
        &[inputs.dim(0), cfg.n_services, cfg.input_len],
        "forecaster inputs",
    )?;
    let b = inputs.dim(0);
    let n = cfg.n_services;
    let features = embedding_features(inputs, &batch.timestamps)?;
    let x = linear(&features, &params.embed_weight, &params.embed_bias)?;

    let mut manifolds = Vec::new();
    let mut causal = None;
    let (h_ccm, x_bar) = if cfg.use_ccm {
        let spec = cfg.embedding_spec()?;
        let x_bar = transpose_last2(&x).reshape(&[b * n, cfg.c_in, cfg.input_len])?;
        let mut h_list = Vec::with_capacity(params.manifolds.len());
        let mut m_list = Vec::with_capacity(params.manifolds.len());
        for mp in &params.manifolds {
            let mf = manifold_from_channels_first(&x_bar, b, n, &spec, mp.index, &mp.kernels)?;
            let rep = match mixing {
                Mixing::Train { previous, momentum } => {
                    let y = cross_map_targets(inputs, mf.out_len)?;
                    let m_train = causal_matrix_train(&mf.x_ccm, &y).map_err(|e| match e {
                        Error::Precondition(msg) => Error::Precondition(format!("manifold {}: {msg}", mp.index)),
                        other => other,
                    })?;
                    let (blend, m_cc) = momentum_update(&m_train, previous, momentum)?;
                    m_list.push(m_cc);
                    ccm_representation(&blend, &mf.x_conv, &mp.proj_weight, &mp.proj_bias)?
                }
                Mixing::Stored(stored) => {
                    stored.raw.expect_shape(&[n, n], "stored causal matrix")?;
                    represent_with_mixing(test_mixing(stored, b), &mf.x_conv, &mp.proj_weight, &mp.proj_bias)?
                }
            };
            h_list.push(rep.h.clone());
            manifolds.push((mf, rep));
        }
        let (h, m) = if m_list.is_empty() {
            let (h, _) = ccmplus::aggregate_manifolds(&h_list, &[DenseArray::zeros(&[n, n])])?;
            (h, None)
        } else {
            let (h, m) = ccmplus::aggregate_manifolds(&h_list, &m_list)?;
            (h, Some(m))
        };
        causal = m;
        (h, Some(x_bar))
    } else {
        (DenseArray::zeros(&[b, n, cfg.c_out]), None)
    };

    let backbone = params.backbone.forward(&x)?;
    let head_input = concat_last(&h_ccm, &backbone.h)?;
    let mut head_hidden = linear(&head_input, &params.head.w1, &params.head.b1)?;
    tanh_in_place(&mut head_hidden);
    let prediction = linear(&head_hidden, &params.head.w2, &params.head.b2)?;
    prediction.ensure_finite("forecaster forward")?;
    Ok(ForwardPass {
        prediction,
        h_ts: backbone.h.clone(),
        h_ccm,
        causal,
        features,
        x_bar,
        manifolds,
        backbone,
        head_input,
        head_hidden,
    })
}

/// Gradients of a scalar objective with respect to every parameter, given
/// `d objective / d prediction`. The mixing matrices are constants.
pub fn backward<B: Backbone>(
    params: &ModelParams<B>,
    pass: &ForwardPass,
    grad_prediction: &DenseArray,
) -> Result<Vec<DenseArray>> {
    let cfg = &params.config;
    grad_prediction.expect_shape(pass.prediction.shape(), "prediction gradient")?;
    let (g_hidden, g_hw2, g_hb2) = linear_backward(grad_prediction, &pass.head_hidden, &params.head.w2)?;
    let g_z = tanh_backward(&g_hidden, &pass.head_hidden);
    let (g_in, g_hw1, g_hb1) = linear_backward(&g_z, &pass.head_input, &params.head.w1)?;
    let (g_hccm, g_hts) = split_last(&g_in, cfg.c_out)?;

    let (mut g_x, backbone_grads) = params.backbone.backward(&pass.backbone, &g_hts)?;
    let b = pass.prediction.dim(0);
    let n = cfg.n_services;

    let mut manifold_grads = Vec::with_capacity(params.manifolds.len() * 3);
    if let Some(x_bar) = &pass.x_bar {
        let spec = cfg.embedding_spec()?;
        let mut g_hi = g_hccm.clone();
        g_hi.scale(1.0 / pass.manifolds.len() as f64);
        let mut g_xbar = DenseArray::zeros(x_bar.shape());
        for (mp, (mf, rep)) in params.manifolds.iter().zip(&pass.manifolds) {
            let (g_conv, g_pw, g_pb) = ccm_representation_backward(&g_hi, rep, &mf.x_conv, &mp.proj_weight)?;
            let g_conv = g_conv.reshape(&[b * n, cfg.c_out, mf.out_len])?;
            let (g_in_i, g_k) = dilated_conv1d_backward(&g_conv, x_bar, &mp.kernels, spec.taus[mp.index])?;
            g_xbar.add_assign(&g_in_i)?;
            manifold_grads.extend([g_k, g_pw, g_pb]);
        }
        let g_x_ccm = transpose_last2(&g_xbar.reshape(&[b, n, cfg.c_in, cfg.input_len])?);
        g_x.add_assign(&g_x_ccm)?;
    } else {
        for mp in &params.manifolds {
            manifold_grads.extend([
                DenseArray::zeros(mp.kernels.shape()),
                DenseArray::zeros(mp.proj_weight.shape()),
                DenseArray::zeros(mp.proj_bias.shape()),
            ]);
        }
    }
    let (_, g_ew, g_eb) = linear_backward(&g_x, &pass.features, &params.embed_weight)?;

    let mut grads = vec![g_ew, g_eb];
    grads.extend(manifold_grads);
    grads.extend(backbone_grads);
    grads.extend([g_hw1, g_hb1, g_hw2, g_hb2]);
    Ok(grads)
}

pub fn mse(target: &DenseArray, prediction: &DenseArray) -> Result<f64> {
    prediction.expect_shape(target.shape(), "mse operands")?;
    let n = target.len() as f64;
    Ok(target
        .data()
        .iter()
        .zip(prediction.data())
        .map(|(t, p)| (t - p) * (t - p))
        .sum::<f64>()
        / n)
}

pub fn mae(target: &DenseArray, prediction: &DenseArray) -> Result<f64> {
    prediction.expect_shape(target.shape(), "mae operands")?;
    let n = target.len() as f64;
    Ok(target
        .data()
        .iter()
        .zip(prediction.data())
        .map(|(t, p)| (t - p).abs())
        .sum::<f64>()
        / n)
}

fn mse_gradient(target: &DenseArray, prediction: &DenseArray) -> DenseArray {
    let scale = 2.0 / target.len() as f64;
    let mut g = prediction.clone();
    for (gv, t) in g.data_mut().iter_mut().zip(target.data()) {
        *gv = scale * (*gv - t);
    }
    g
}

/// Sliding windows (stride 1) over a normalized panel segment.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub panel: TrafficPanel,
    pub input_len: usize,
    pub pred_len: usize,
}

impl WindowSet {
    pub fn new(panel: TrafficPanel, input_len: usize, pred_len: usize) -> Result<Self> {
        if window_count(panel.len(), input_len, pred_len) == 0 {
            return Err(Error::Precondition(format!(
                "segment of {} buckets holds no window of {input_len} inputs and {pred_len} targets",
                panel.len()
            )));
        }
        Ok(Self {
            panel,
            input_len,
            pred_len,
        })
    }

    pub fn len(&self) -> usize {
        window_count(self.panel.len(), self.input_len, self.pred_len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, starts: &[usize]) -> Result<Batch> {
        let n = self.panel.n_services();
        let (lx, lp) = (self.input_len, self.pred_len);
        let mut inputs = Vec::with_capacity(starts.len() * n * lx);
        let mut targets = Vec::with_capacity(starts.len() * n * lp);
        let mut timestamps = Vec::with_capacity(starts.len() * lx);
        for &s in starts {
            if s >= self.len() {
                return Err(Error::Argument(format!("window {s} out of range")));
            }
            for svc in 0..n {
                let series = self.panel.series(svc);
                inputs.extend_from_slice(&series[s..s + lx]);
                targets.extend_from_slice(&series[s + lx..s + lx + lp]);
            }
            timestamps.extend((s..s + lx).map(|t| self.panel.timestamp(t)));
        }
        Ok(Batch {
            inputs: DenseArray::new(&[starts.len(), n, lx], inputs)?,
            timestamps,
            targets: DenseArray::new(&[starts.len(), n, lp], targets)?,
        })
    }
}

/// Normalized train/validation/test windows of one panel.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    pub normalization: NormalizationRecord,
}

impl Dataset {
    /// Chronological split, then z-scores fitted on the training segment.
    pub fn prepare(panel: &TrafficPanel, ratios: SplitRatios, input_len: usize, pred_len: usize) -> Result<Self> {
        let parts = split(panel, ratios, input_len + pred_len)?;
        let normalization = NormalizationRecord::fit(&parts.train);
        Ok(Self {
            train: WindowSet::new(normalization.apply(&parts.train)?, input_len, pred_len)?,
            val: WindowSet::new(normalization.apply(&parts.val)?, input_len, pred_len)?,
            test: WindowSet::new(normalization.apply(&parts.test)?, input_len, pred_len)?,
            normalization,
        })
    }

    pub fn n_services(&self) -> usize {
        self.train.panel.n_services()
    }

    pub fn service_ids(&self) -> &[String] {
        &self.train.panel.service_ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-6,
            epochs: 15,
            patience: 5,
            batch_size: 8,
            momentum: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ccmplus::validate_momentum(self.momentum)?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and nonnegative", self.lr)));
        }
        if self.epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, patience and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult<B: Backbone = MlpBackbone> {
    /// Weights from the epoch with the lowest validation MSE.
    pub params: ModelParams<B>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub n_samples: usize,
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step<B: Backbone>(params: &mut ModelParams<B>, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
    let pass = forward(
        params,
        batch,
        Mixing::Train {
            previous: params.causal.as_ref(),
            momentum: cfg.momentum,
        },
    )?;
    let loss = mse(&batch.targets, &pass.prediction)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grads = backward(params, &pass, &mse_gradient(&batch.targets, &pass.prediction))?;
    if let Some(raw) = pass.causal {
        let iteration = params.causal.as_ref().map_or(0, |c| c.iteration) + 1;
        params.causal = Some(CausalMatrix {
            raw,
            iteration,
            momentum: cfg.momentum,
        });
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    params.optimizer.step += 1;
    let step = params.optimizer.step;
    let mut moments = std::mem::take(&mut params.optimizer.moments);
    for ((p, g), m) in params.params_mut().into_iter().zip(&grads).zip(&mut moments) {
        adam_step(p, g, m, &adam, step)?;
    }
    params.optimizer.moments = moments;
    Ok(loss)
}

/// Trains from `params`, keeping the best-validation weights.
pub fn fit_from<B: Backbone>(mut params: ModelParams<B>, data: &Dataset, cfg: &TrainConfig) -> Result<FitResult<B>> {
    cfg.validate()?;
    if data.n_services() != params.config.n_services {
        return Err(Error::Config(format!(
            "model built for {} services, data has {}",
            params.config.n_services,
            data.n_services()
        )));
    }
    if data.train.input_len != params.config.input_len || data.train.pred_len != params.config.pred_len {
        return Err(Error::Config("window lengths differ from the model configuration".into()));
    }
    let mut rng = Xorshift64Star::new(cfg.seed ^ 0x5EED_0F_5A_u64);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams<B>)> = None;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.train.batch(chunk)?;
            let loss = train_step(&mut params, &batch, cfg)?;
            loss_sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let train_mse = loss_sum / count as f64;
        let val_mse = evaluate(&params, &data.val, cfg.batch_size)?.mse;
        let record = EpochRecord {
            epoch,
            train_mse,
            val_mse,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        info!("epoch {epoch}: train mse {train_mse:.6}, val mse {val_mse:.6}");
        history.push(record);
        let improved = best.as_ref().is_none_or(|(v, _, _)| val_mse < *v);
        if improved {
            best = Some((val_mse, epoch, params.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if epoch - best_epoch >= cfg.patience {
            debug!("stopping after epoch {epoch}; best was {best_epoch}");
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(FitResult {
        params,
        history,
        best_epoch,
        stopped_early,
    })
}

/// Builds a fresh MLP-backbone model for `data` and trains it.
pub fn fit(data: &Dataset, model: ModelConfig, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    fit_from(ModelParams::init(model, cfg.seed)?, data, cfg)
}

/// Testing-mode metrics over every window of `windows`.
pub fn evaluate<B: Backbone>(params: &ModelParams<B>, windows: &WindowSet, batch_size: usize) -> Result<Metrics> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let uniform;
    let stored = match (&params.causal, params.config.use_ccm) {
        (Some(c), _) => c,
        (None, false) => {
            let n = params.config.n_services;
            uniform = CausalMatrix {
                raw: DenseArray::zeros(&[n, n]),
                iteration: 0,
                momentum: 0.0,
            };
            &uniform
        }
        (None, true) => {
            return Err(Error::Config(
                "testing mode needs the causal matrix stored by training".into(),
            ))
        }
    };
    let starts: Vec<usize> = (0..windows.len()).collect();
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for chunk in starts.chunks(batch_size) {
        let batch = windows.batch(chunk)?;
        let pass = forward(params, &batch, Mixing::Stored(stored))?;
        let n = batch.targets.len();
        se += mse(&batch.targets, &pass.prediction)? * n as f64;
        ae += mae(&batch.targets, &pass.prediction)? * n as f64;
        count += n;
    }
    Ok(Metrics {
        mse: se / count as f64,
        mae: ae / count as f64,
        n_samples: windows.len(),
    })
}

/// Sum of all parameter bits, for cheap equality checks.
pub fn params_checksum<B: Backbone>(params: &ModelParams<B>) -> u64 {
    let mut acc = 0xcbf2_9ce4_8422_2325u64;
    for (_, p) in params.named_params() {
        for v in p.data() {
            acc = (acc ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
        }
    }
    if let Some(c) = &params.causal {
        for v in c.raw.data() {
            acc = (acc ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_traffic_panel, TrafficConfig};

    fn tiny_config(n: usize) -> ModelConfig {
        ModelConfig {
            n_services: n,
            input_len: 24,
            pred_len: 2,
            c_in: 3,
            c_out: 4,
            taus: vec![1, 2],
            tau_w: 8,
            d_ts: 5,
            head_hidden: 6,
            use_ccm: true,
        }
    }

    fn random(rng: &mut Xorshift64Star, shape: &[usize]) -> DenseArray {
        DenseArray::from_fn(shape, |_| rng.next_normal())
    }

    fn random_batch(rng: &mut Xorshift64Star, b: usize, cfg: &ModelConfig) -> Batch {
        Batch {
            inputs: random(rng, &[b, cfg.n_services, cfg.input_len]),
            timestamps: (0..b * cfg.input_len).map(|i| 1_700_000_000 + 300 * i as i64).collect(),
            targets: random(rng, &[b, cfg.n_services, cfg.pred_len]),
        }
    }

    #[test]
    fn metric_examples() {
        let t = DenseArray::vector(vec![0.0, 0.0]).unwrap();
        let p = DenseArray::vector(vec![1.0, 3.0]).unwrap();
        assert_eq!(mse(&t, &p).unwrap(), 5.0);
        assert_eq!(mae(&t, &p).unwrap(), 2.0);
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        let p2 = DenseArray::vector(vec![2.0, 6.0]).unwrap();
        assert_eq!(mse(&t, &p2).unwrap(), 20.0);
        assert_eq!(mae(&t, &p2).unwrap(), 4.0);
        assert!(mse(&t, &DenseArray::vector(vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn backbone_shapes_and_zero_weights() {
        let mut rng = Xorshift64Star::new(3);
        let mut bb = MlpBackbone::new(12, 4, 64, &mut rng);
        let x = random(&mut rng, &[8, 4, 12, 4]);
        assert_eq!(bb.forward(&x).unwrap().h.shape(), &[8, 4, 64]);
        for p in bb.params_mut() {
            p.scale(0.0);
        }
        assert!(bb.forward(&x).unwrap().h.data().iter().all(|v| *v == 0.0));
        assert!(bb.forward(&random(&mut rng, &[1, 1, 11, 4])).is_err());
    }

    #[test]
    fn backbone_backward_matches_finite_differences() {
        let mut rng = Xorshift64Star::new(17);
        for _ in 0..20 {
            let bb = MlpBackbone::new(5, 2, 3, &mut rng);
            let x = random(&mut rng, &[2, 2, 5, 2]);
            let probe = random(&mut rng, &[2, 2, 3]);
            let obj = |bb: &MlpBackbone, x: &DenseArray| -> f64 {
                let h = bb.forward(x).unwrap().h;
                h.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let trace = bb.forward(&x).unwrap();
            let (gx, gp) = bb.backward(&trace, &probe).unwrap();
            let h = 1e-5;
            for i in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[i] += h;
                xm.data_mut()[i] -= h;
                let num = (obj(&bb, &xp) - obj(&bb, &xm)) / (2.0 * h);
                assert_rel(gx.data()[i], num, 1e-6);
            }
            for (k, g) in gp.iter().enumerate() {
                for i in 0..g.len() {
                    let (mut bp, mut bm) = (bb.clone(), bb.clone());
                    bp.params_mut()[k].data_mut()[i] += h;
                    bm.params_mut()[k].data_mut()[i] -= h;
                    let num = (obj(&bp, &x) - obj(&bm, &x)) / (2.0 * h);
                    assert_rel(g.data()[i], num, 1e-6);
                }
            }
        }
    }

    fn assert_rel(analytic: f64, numeric: f64, tol: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-4);
        assert!(
            (analytic - numeric).abs() / denom < tol,
            "analytic {analytic} vs numeric {numeric}"
        );
    }

    #[test]
    fn head_wiring() {
        let cfg = tiny_config(3);
        let mut params = ModelParams::init(cfg.clone(), 1).unwrap();
        let mut rng = Xorshift64Star::new(2);
        let batch = random_batch(&mut rng, 2, &cfg);
        let stored = CausalMatrix {
            raw: random(&mut rng, &[3, 3]),
            iteration: 1,
            momentum: 0.5,
        };
        for p in [&mut params.head.w1, &mut params.head.b1, &mut params.head.w2, &mut params.head.b2] {
            p.scale(0.0);
        }
        let pass = forward(&params, &batch, Mixing::Stored(&stored)).unwrap();
        assert!(pass.prediction.data().iter().all(|v| *v == 0.0));

        // Route h_ccm channel 2 through the hidden layer's linear regime.
        let s = 1e-4;
        params.head.w1.data_mut()[2] = s;
        params.head.w2.data_mut()[0] = 1.0 / s;
        let pass = forward(&params, &batch, Mixing::Stored(&stored)).unwrap();
        for (bn, pred) in pass.prediction.data().chunks(2).enumerate() {
            let want = pass.h_ccm.data()[bn * 4 + 2];
            assert!((pred[0] - want).abs() < 1e-6 * want.abs().max(1.0), "{} vs {want}", pred[0]);
        }
    }

    #[test]
    fn full_path_gradient_check() {
        let cfg = tiny_config(3);
        for case in 0..20u64 {
            let params = ModelParams::init(cfg.clone(), 100 + case).unwrap();
            let mut rng = Xorshift64Star::new(900 + case);
            let batch = random_batch(&mut rng, 2, &cfg);
            let stored = CausalMatrix {
                raw: random(&mut rng, &[3, 3]),
                iteration: 1,
                momentum: 0.5,
            };
            let loss = |p: &ModelParams| -> f64 {
                let pass = forward(p, &batch, Mixing::Stored(&stored)).unwrap();
                mse(&batch.targets, &pass.prediction).unwrap()
            };
            let pass = forward(&params, &batch, Mixing::Stored(&stored)).unwrap();
            let grads = backward(&params, &pass, &mse_gradient(&batch.targets, &pass.prediction)).unwrap();
            let h = 1e-5;
            for (k, g) in grads.iter().enumerate() {
                // A handful of coordinates per array keeps the check quick.
                let picks: Vec<usize> = (0..g.len().min(6)).map(|_| rng.next_below(g.len() as u64) as usize).collect();
                for i in picks {
                    let (mut pp, mut pm) = (params.clone(), params.clone());
                    pp.params_mut()[k].data_mut()[i] += h;
                    pm.params_mut()[k].data_mut()[i] -= h;
                    let num = (loss(&pp) - loss(&pm)) / (2.0 * h);
                    assert_rel(g.data()[i], num, 1e-5);
                }
            }
        }
    }

    #[test]
    fn mlp_only_ignores_manifold_weights() {
        let mut cfg = tiny_config(2);
        cfg.use_ccm = false;
        let params = ModelParams::init(cfg.clone(), 4).unwrap();
        let mut rng = Xorshift64Star::new(5);
        let batch = random_batch(&mut rng, 3, &cfg);
        let pass = forward(&params, &batch, Mixing::Train { previous: None, momentum: 0.5 }).unwrap();
        assert!(pass.h_ccm.data().iter().all(|v| *v == 0.0));
        assert!(pass.causal.is_none());
        let grads = backward(&params, &pass, &mse_gradient(&batch.targets, &pass.prediction)).unwrap();
        assert!(grads[2..8].iter().all(|g| g.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(4);
        assert!(cfg.validate().is_ok());
        cfg.input_len = 50;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_config(2);
        cfg.c_out = 16;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("manifold 0"), "{err}");
        let round = ModelConfig::from_pairs(&tiny_config(3).to_pairs()).unwrap();
        assert_eq!(round, tiny_config(3));
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn small_dataset(seed: u64) -> Dataset {
        let mut tc = TrafficConfig::uncoupled(3, 400, seed);
        tc.couple(0, 1, 0.8);
        let panel = gen_traffic_panel(&tc).unwrap();
        Dataset::prepare(&panel, SplitRatios::default(), 24, 2).unwrap()
    }

    fn quick_train(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            lr,
            epochs,
            patience: 3,
            batch_size: 8,
            momentum: 0.5,
            seed: 11,
        }
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let data = small_dataset(1);
        let params = ModelParams::init(tiny_config(3), 3).unwrap();
        let before: Vec<DenseArray> = params.named_params().into_iter().map(|(_, p)| p.clone()).collect();
        let out = fit_from(params, &data, &quick_train(0.0, 1)).unwrap();
        let after: Vec<DenseArray> = out.params.named_params().into_iter().map(|(_, p)| p.clone()).collect();
        assert_eq!(before, after);
        assert!(out.params.causal.is_some());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = small_dataset(2);
        let cfg = quick_train(3e-3, 6);
        let a = fit(&data, tiny_config(3), &cfg).unwrap();
        let b = fit(&data, tiny_config(3), &cfg).unwrap();
        let curve = |r: &FitResult| r.history.iter().map(|e| (e.train_mse.to_bits(), e.val_mse.to_bits())).collect::<Vec<_>>();
        assert_eq!(curve(&a), curve(&b));
        assert!(a.history.len() >= 5);
        assert!(a.history[a.history.len() - 1].train_mse < a.history[0].train_mse);

        let train_eval = evaluate(&a.params, &data.train, 8).unwrap();
        assert!(train_eval.mse <= a.history[0].train_mse, "{} vs {}", train_eval.mse, a.history[0].train_mse);
        assert_eq!(train_eval.n_samples, data.train.len());
    }

    #[test]
    fn early_stopping_bounds_and_best_weights() {
        let data = small_dataset(3);
        let cfg = TrainConfig {
            patience: 1,
            ..quick_train(5e-2, 8)
        };
        let out = fit(&data, tiny_config(3), &cfg).unwrap();
        let last = out.history.last().unwrap().epoch;
        assert!(last <= out.best_epoch + cfg.patience);
        let best_val = out.history.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(out.history[out.best_epoch].val_mse, best_val);
        let again = evaluate(&out.params, &data.val, cfg.batch_size).unwrap().mse;
        assert_eq!(again.to_bits(), best_val.to_bits());
    }

    #[test]
    fn evaluate_is_pure_and_repeatable() {
        let data = small_dataset(4);
        let out = fit(&data, tiny_config(3), &quick_train(1e-3, 1)).unwrap();
        let before = params_checksum(&out.params);
        let m1 = evaluate(&out.params, &data.test, 8).unwrap();
        let m2 = evaluate(&out.params, &data.test, 5).unwrap();
        assert_eq!(before, params_checksum(&out.params));
        assert_eq!(m1.mse.to_bits(), evaluate(&out.params, &data.test, 8).unwrap().mse.to_bits());
        assert!((m1.mse - m2.mse).abs() < 1e-12);
        assert!((m1.mae - m2.mae).abs() < 1e-12);
        let fresh = ModelParams::init(tiny_config(3), 0).unwrap();
        assert!(evaluate(&fresh, &data.test, 8).is_err());
    }

    #[test]
    fn perfect_params_on_constant_series() {
        let cfg = tiny_config(2);
        let mut params = ModelParams::init(cfg.clone(), 9).unwrap();
        for p in [&mut params.head.w1, &mut params.head.b1, &mut params.head.w2, &mut params.head.b2] {
            p.scale(0.0);
        }
        params.head.b2.data_mut().fill(3.5);
        params.causal = Some(CausalMatrix {
            raw: DenseArray::zeros(&[2, 2]),
            iteration: 1,
            momentum: 0.5,
        });
        let panel = TrafficPanel::new(
            vec!["a".into(), "b".into()],
            0,
            60,
            DenseArray::filled(&[2, 40], 3.5),
        )
        .unwrap();
        let windows = WindowSet::new(panel, 24, 2).unwrap();
        let m = evaluate(&params, &windows, 4).unwrap();
        assert_eq!((m.mse, m.mae, m.n_samples), (0.0, 0.0, 15));
    }

    #[test]
    fn insufficient_data_errors() {
        let panel = TrafficPanel::new(vec!["a".into()], 0, 60, DenseArray::filled(&[1, 20], 1.0)).unwrap();
        assert!(WindowSet::new(panel.clone(), 24, 1).is_err());
        assert!(Dataset::prepare(&panel, SplitRatios::default(), 24, 1).is_err());
    }
}
