//! Actor-critic networks over the [window, F] observation matrix.
//!
//! Three architectures share the same head layout (a linear actor producing
//! the action mean, a state-independent learnable log-std vector, and a
//! linear critic producing the scalar value):
//!
//! * `mlp` — flatten → dense(64) + ReLU → dense(64) + ReLU → heads
//! * `cnn_v1` — reshape to 1×window×F → conv(32, 8×8, s4) + ReLU + dropout →
//!   conv(64, 4×4, s2) + ReLU + dropout → flatten → dense(512) + ReLU → heads
//! * `grcnn` — column-normalize → reshape → conv(32, 8×8, s4) + BN + ReLU +
//!   maxpool(2×2) → conv(64, 4×4, s2) + BN + ReLU → conv(128, 3×3) + BN +
//!   ReLU → conv(256, 3×3) + BN + ReLU → flatten → dense(512) + ReLU → heads
//!
//! Declared kernel sizes clamp to the remaining spatial extent
//! (`k_eff = min(k, dim)`), so deep stacks keep their filter progression on
//! narrow inputs; a layer only fails to build when a pooling window cannot
//! fit, and the error names that layer.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    self, checkpoint, column_normalize, column_normalize_backward, conv2d_backward_batch,
    conv2d_forward_batch, conv_out_dim, dense_backward_batch, dense_forward_batch,
    dropout_apply_mask, dropout_forward, gaussian_entropy, gaussian_log_prob,
    gaussian_log_prob_grads, gaussian_sample, maxpool2d_backward, maxpool2d_forward, BatchNormCtx,
    ColumnNormCtx, MaxPoolCtx, Mode, RunningStats, Tensor,
};

const INPUT_NORM_EPS: f64 = 1e-8;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Mlp,
    CnnV1,
    Grcnn,
}

impl ArchKind {
    pub fn name(&self) -> &'static str {
        match self {
            ArchKind::Mlp => "mlp",
            ArchKind::CnnV1 => "cnn_v1",
            ArchKind::Grcnn => "grcnn",
        }
    }

    pub fn parse(s: &str) -> Result<ArchKind> {
        Ok(match s {
            "mlp" => ArchKind::Mlp,
            "cnn_v1" => ArchKind::CnnV1,
            "grcnn" => ArchKind::Grcnn,
            other => {
                return Err(Error::Config(format!(
                    "unknown architecture {other:?} (want mlp | cnn_v1 | grcnn)"
                )))
            }
        })
    }
}

/// One convolutional stage and the post-processing attached to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub batchnorm: bool,
    pub dropout: bool,
    /// 2×2 stride-2 max pool after the activation.
    pub pool_after: bool,
}

/// Architecture description; `mlp`, `cnn_v1` and `grcnn` give the stock
/// configurations, and the fields stay public so tests can build scaled-down
/// variants of the same layer stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub conv_layers: Vec<ConvLayerSpec>,
    /// Dense widths after the trunk: every hidden layer of the MLP, or the
    /// single post-flatten width of the CNNs.
    pub hidden: Vec<usize>,
    pub dropout_p: f64,
    pub use_input_norm: bool,
}

impl ArchSpec {
    pub fn mlp() -> Self {
        ArchSpec {
            kind: ArchKind::Mlp,
            conv_layers: Vec::new(),
            hidden: vec![64, 64],
            dropout_p: 0.0,
            use_input_norm: false,
        }
    }

    pub fn cnn_v1() -> Self {
        let conv = |filters, k, s| ConvLayerSpec {
            filters,
            kernel: (k, k),
            stride: (s, s),
            batchnorm: false,
            dropout: true,
            pool_after: false,
        };
        ArchSpec {
            kind: ArchKind::CnnV1,
            conv_layers: vec![conv(32, 8, 4), conv(64, 4, 2)],
            hidden: vec![512],
            dropout_p: 0.1,
            use_input_norm: false,
        }
    }

    pub fn grcnn() -> Self {
        let conv = |filters, k, s, pool| ConvLayerSpec {
            filters,
            kernel: (k, k),
            stride: (s, s),
            batchnorm: true,
            dropout: false,
            pool_after: pool,
        };
        ArchSpec {
            kind: ArchKind::Grcnn,
            conv_layers: vec![
                conv(32, 8, 4, true),
                conv(64, 4, 2, false),
                conv(128, 3, 1, false),
                conv(256, 3, 1, false),
            ],
            hidden: vec![512],
            dropout_p: 0.0,
            use_input_norm: true,
        }
    }

    pub fn for_kind(kind: ArchKind) -> Self {
        match kind {
            ArchKind::Mlp => ArchSpec::mlp(),
            ArchKind::CnnV1 => ArchSpec::cnn_v1(),
            ArchKind::Grcnn => ArchSpec::grcnn(),
        }
    }

    fn to_text(&self, window: usize, features: usize, action_dim: usize) -> String {
        let mut out = String::new();
        out.push_str(&format!("kind {}\n", self.kind.name()));
        out.push_str(&format!("window {window}\n"));
        out.push_str(&format!("features {features}\n"));
        out.push_str(&format!("action_dim {action_dim}\n"));
        out.push_str(&format!("input_norm {}\n", self.use_input_norm));
        out.push_str(&format!("dropout_p {:?}\n", self.dropout_p));
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        out.push_str(&format!("hidden {}\n", hidden.join(",")));
        for c in &self.conv_layers {
            out.push_str(&format!(
                "conv {} {} {} {} {} {} {} {}\n",
                c.filters,
                c.kernel.0,
                c.kernel.1,
                c.stride.0,
                c.stride.1,
                c.batchnorm,
                c.dropout,
                c.pool_after
            ));
        }
        out
    }

    fn from_text(text: &str) -> Result<(ArchSpec, usize, usize, usize)> {
        let bad = |why: String| Error::Checkpoint(format!("arch spec: {why}"));
        let mut kind = None;
        let mut window = None;
        let mut features = None;
        let mut action_dim = None;
        let mut input_norm = false;
        let mut dropout_p = 0.0;
        let mut hidden = Vec::new();
        let mut conv_layers = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            match key {
                "kind" => kind = Some(ArchKind::parse(rest)?),
                "window" => window = Some(rest.parse().map_err(|_| bad("bad window".into()))?),
                "features" => {
                    features = Some(rest.parse().map_err(|_| bad("bad features".into()))?)
                }
                "action_dim" => {
                    action_dim = Some(rest.parse().map_err(|_| bad("bad action_dim".into()))?)
                }
                "input_norm" => {
                    input_norm = rest.parse().map_err(|_| bad("bad input_norm".into()))?
                }
                "dropout_p" => {
                    dropout_p = rest.parse().map_err(|_| bad("bad dropout_p".into()))?
                }
                "hidden" => {
                    hidden = rest
                        .split(',')
                        .map(|h| h.parse().map_err(|_| bad("bad hidden".into())))
                        .collect::<Result<_>>()?
                }
                "conv" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    if f.len() != 8 {
                        return Err(bad(format!("conv line needs 8 fields: {line:?}")));
                    }
                    let p = |i: usize| -> Result<usize> {
                        f[i].parse().map_err(|_| bad(format!("bad conv field {i}")))
                    };
                    let b = |i: usize| -> Result<bool> {
                        f[i].parse().map_err(|_| bad(format!("bad conv flag {i}")))
                    };
                    conv_layers.push(ConvLayerSpec {
                        filters: p(0)?,
                        kernel: (p(1)?, p(2)?),
                        stride: (p(3)?, p(4)?),
                        batchnorm: b(5)?,
                        dropout: b(6)?,
                        pool_after: b(7)?,
                    });
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        let spec = ArchSpec {
            kind: kind.ok_or_else(|| bad("missing kind".into()))?,
            conv_layers,
            hidden,
            dropout_p,
            use_input_norm: input_norm,
        };
        Ok((
            spec,
            window.ok_or_else(|| bad("missing window".into()))?,
            features.ok_or_else(|| bad("missing features".into()))?,
            action_dim.ok_or_else(|| bad("missing action_dim".into()))?,
        ))
    }
}

// ---------------------------------------------------------------------------
// parameter initialization

/// Orthogonal-style init: modified Gram–Schmidt over normal draws along the
/// smaller dimension, scaled by `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut Rng) -> Tensor {
    let n = rows.min(cols);
    let long = rows.max(cols);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..long).map(|_| rng.normal()).collect();
        for u in &basis {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= proj * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // essentially-dependent draw, take another
        }
        for vi in &mut v {
            *vi /= norm;
        }
        basis.push(v);
    }
    let mut w = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            w[r * cols + c] = gain
                * if rows <= cols {
                    basis[r][c]
                } else {
                    basis[c][r]
                };
        }
    }
    Tensor::new(vec![rows, cols], w).unwrap()
}

fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform(-bound, bound))
}

// ---------------------------------------------------------------------------
// layers

#[derive(Debug, Clone)]
struct DenseLayer {
    weight: Tensor,
    bias: Tensor,
    saved_input: Option<Tensor>,
    saved_pre_act: Option<Tensor>,
}

impl DenseLayer {
    fn new(in_dim: usize, out_dim: usize, gain: f64, rng: &mut Rng) -> Self {
        DenseLayer {
            weight: orthogonal(out_dim, in_dim, gain, rng).with_grad(),
            bias: Tensor::zeros(&[out_dim]).with_grad(),
            saved_input: None,
            saved_pre_act: None,
        }
    }

    fn forward(&mut self, x: &Tensor, save: bool) -> Result<Tensor> {
        let y = dense_forward_batch(x, &self.weight, &self.bias)?;
        if save {
            self.saved_input = Some(x.clone());
        }
        Ok(y)
    }

    /// Forward followed by ReLU, saving the pre-activation for backward.
    fn forward_relu(&mut self, x: &Tensor, save: bool) -> Result<Tensor> {
        let z = self.forward(x, save)?;
        if save {
            self.saved_pre_act = Some(z.clone());
        }
        Ok(tensor::relu(&z))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.saved_input.as_ref().ok_or(Error::InvalidArgument {
            op: "dense_backward",
            reason: "no saved forward context".into(),
        })?;
        let (gx, gw, gb) = dense_backward_batch(grad_out, x, &self.weight)?;
        accumulate(self.weight.grad_mut(), gw.data());
        accumulate(self.bias.grad_mut(), gb.data());
        Ok(gx)
    }

    fn backward_relu(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let z = self.saved_pre_act.take().ok_or(Error::InvalidArgument {
            op: "dense_backward",
            reason: "no saved pre-activation".into(),
        })?;
        let gz = tensor::relu_backward(grad_out, &z)?;
        self.backward(&gz)
    }
}

#[derive(Debug, Clone)]
struct BnLayer {
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    ctx: Option<BatchNormCtx>,
}

impl BnLayer {
    fn new(channels: usize) -> Self {
        BnLayer {
            gamma: Tensor::full(&[channels], 1.0).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            // identity running stats so rollouts can run eval-mode forwards
            // before the first training update
            stats: RunningStats::with_identity(channels),
            ctx: None,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    spec: ConvLayerSpec,
    kernels: Tensor,
    bias: Tensor,
    bn: Option<BnLayer>,
    in_shape: [usize; 3],
    out_shape: [usize; 3],
    pooled_shape: [usize; 3],
    saved_input: Option<Tensor>,
    saved_pre_act: Option<Tensor>,
    pool_ctx: Option<MaxPoolCtx>,
    dropout_mask: Option<Tensor>,
}

fn accumulate(acc: &mut [f64], add: &[f64]) {
    debug_assert_eq!(acc.len(), add.len());
    for (a, b) in acc.iter_mut().zip(add) {
        *a += b;
    }
}

/// Effective kernel after clamping to the input extent.
fn effective_kernel(declared: (usize, usize), h: usize, w: usize) -> (usize, usize) {
    (declared.0.min(h), declared.1.min(w))
}

impl ConvBlock {
    fn build(
        layer_idx: usize,
        spec: &ConvLayerSpec,
        in_shape: [usize; 3],
        rng: &mut Rng,
    ) -> Result<Self> {
        let [c_in, h, w] = in_shape;
        let (kh, kw) = effective_kernel(spec.kernel, h, w);
        let (sh, sw) = spec.stride;
        let h_out = conv_out_dim(h, kh, sh);
        let w_out = conv_out_dim(w, kw, sw);
        let out_shape = [spec.filters, h_out, w_out];
        let pooled_shape = if spec.pool_after {
            if h_out < 2 || w_out < 2 {
                return Err(Error::LayerShape {
                    layer: format!("maxpool{layer_idx}"),
                    shape: out_shape.to_vec(),
                    reason: "2x2 max pool needs both spatial dims >= 2".into(),
                });
            }
            [
                spec.filters,
                conv_out_dim(h_out, 2, 2),
                conv_out_dim(w_out, 2, 2),
            ]
        } else {
            out_shape
        };
        let fan_in = c_in * kh * kw;
        Ok(ConvBlock {
            spec: spec.clone(),
            kernels: fan_in_uniform(&[spec.filters, c_in, kh, kw], fan_in, rng).with_grad(),
            bias: Tensor::zeros(&[spec.filters]).with_grad(),
            bn: spec.batchnorm.then(|| BnLayer::new(spec.filters)),
            in_shape,
            out_shape,
            pooled_shape,
            saved_input: None,
            saved_pre_act: None,
            pool_ctx: None,
            dropout_mask: None,
        })
    }

    fn forward(
        &mut self,
        x: &Tensor,
        mode: Mode,
        dropout_p: f64,
        rng: Option<&mut Rng>,
        save: bool,
    ) -> Result<Tensor> {
        let batch = x.shape()[0];
        let z = conv2d_forward_batch(x, &self.kernels, &self.bias, self.spec.stride)?;
        if save {
            self.saved_input = Some(x.clone());
        }
        let z = match self.bn.as_mut() {
            Some(bn) => {
                let (y, ctx) = tensor::batchnorm_forward(
                    &z,
                    &bn.gamma,
                    &bn.beta,
                    BN_EPS,
                    BN_MOMENTUM,
                    mode,
                    &mut bn.stats,
                )?;
                if save {
                    bn.ctx = ctx;
                }
                y
            }
            None => z,
        };
        if save {
            self.saved_pre_act = Some(z.clone());
        }
        let mut y = tensor::relu(&z);
        if self.spec.pool_after {
            let [c, h, w] = self.out_shape;
            let flat = y.reshaped(&[batch * c, h, w])?;
            let (pooled, ctx) = maxpool2d_forward(&flat, (2, 2), (2, 2))?;
            let [pc, ph, pw] = self.pooled_shape;
            y = pooled.reshaped(&[batch, pc, ph, pw])?;
            if save {
                self.pool_ctx = Some(ctx);
            }
        }
        if self.spec.dropout && mode == Mode::Train {
            let rng = rng.ok_or(Error::InvalidArgument {
                op: "policy_forward",
                reason: "dropout in train mode needs an rng".into(),
            })?;
            let (dropped, mask) = dropout_forward(&y, dropout_p, mode, rng)?;
            if save {
                self.dropout_mask = Some(mask);
            }
            y = dropped;
        }
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let batch = grad_out.shape()[0];
        let mut g = grad_out.clone();
        if let Some(mask) = self.dropout_mask.take() {
            g = dropout_apply_mask(&g, &mask)?;
        }
        if self.spec.pool_after {
            let ctx = self.pool_ctx.take().ok_or(Error::InvalidArgument {
                op: "policy_backward",
                reason: "no saved pool context".into(),
            })?;
            let [pc, ph, pw] = self.pooled_shape;
            let flat = g.reshaped(&[batch * pc, ph, pw])?;
            let unpooled = maxpool2d_backward(&flat, &ctx)?;
            let [c, h, w] = self.out_shape;
            g = unpooled.reshaped(&[batch, c, h, w])?;
        }
        let pre_act = self.saved_pre_act.take().ok_or(Error::InvalidArgument {
            op: "policy_backward",
            reason: "no saved pre-activation".into(),
        })?;
        g = tensor::relu_backward(&g, &pre_act)?;
        if let Some(bn) = self.bn.as_mut() {
            let ctx = bn.ctx.take().ok_or(Error::InvalidArgument {
                op: "policy_backward",
                reason: "batchnorm backward needs a train-mode forward".into(),
            })?;
            let (gx, gg, gb) = tensor::batchnorm_backward(&g, &ctx, &bn.gamma)?;
            accumulate(bn.gamma.grad_mut(), gg.data());
            accumulate(bn.beta.grad_mut(), gb.data());
            g = gx;
        }
        let x = self.saved_input.take().ok_or(Error::InvalidArgument {
            op: "policy_backward",
            reason: "no saved conv input".into(),
        })?;
        let (gx, gk, gb) = conv2d_backward_batch(&g, &x, &self.kernels, self.spec.stride)?;
        accumulate(self.kernels.grad_mut(), gk.data());
        accumulate(self.bias.grad_mut(), gb.data());
        Ok(gx)
    }
}

#[derive(Debug, Clone)]
enum Trunk {
    Mlp { layers: Vec<DenseLayer> },
    Cnn { blocks: Vec<ConvBlock>, fc: DenseLayer },
}

/// Actor-critic network: shared trunk, linear heads, learnable log-std.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    spec: ArchSpec,
    window: usize,
    features: usize,
    action_dim: usize,
    trunk: Trunk,
    actor: DenseLayer,
    critic: DenseLayer,
    log_std: Tensor,
    layer_shapes: Vec<(String, Vec<usize>)>,
    norm_ctx: Vec<ColumnNormCtx>,
}

/// Output of a stochastic action query.
#[derive(Debug, Clone)]
pub struct ActOutput {
    /// Clipped to [−1, 1] per dimension, ready for the environment.
    pub action: Vec<f64>,
    /// The unclipped Gaussian sample the log-prob refers to.
    pub raw_sample: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
}

/// Batched density/value evaluation used by the PPO update.
#[derive(Debug, Clone)]
pub struct ActionEval {
    pub log_probs: Vec<f64>,
    pub entropies: Vec<f64>,
    pub values: Vec<f64>,
    pub means: Tensor,
}

/// Deterministic initialization: trunk parameters in layer order, then the
/// actor and critic heads, all drawn from `seed`'s stream.
pub fn build(
    spec: &ArchSpec,
    obs_shape: (usize, usize),
    action_dim: usize,
    seed: u64,
) -> Result<PolicyNet> {
    let (window, features) = obs_shape;
    if window == 0 || features == 0 || action_dim == 0 {
        return Err(Error::InvalidArgument {
            op: "policy_build",
            reason: "window, features and action_dim must be positive".into(),
        });
    }
    let mut spec = spec.clone();
    if spec.kind == ArchKind::Grcnn {
        spec.use_input_norm = true;
    }
    let mut rng = Rng::new(seed);
    let mut shapes: Vec<(String, Vec<usize>)> = vec![("input".into(), vec![window, features])];
    if spec.use_input_norm {
        shapes.push(("input_norm".into(), vec![window, features]));
    }

    let (trunk, feat_dim) = match spec.kind {
        ArchKind::Mlp => {
            let flat = window * features;
            shapes.push(("flatten".into(), vec![flat]));
            let mut layers = Vec::new();
            let mut in_dim = flat;
            for (i, &width) in spec.hidden.iter().enumerate() {
                layers.push(DenseLayer::new(in_dim, width, 2.0_f64.sqrt(), &mut rng));
                shapes.push((format!("dense{i}"), vec![width]));
                in_dim = width;
            }
            (Trunk::Mlp { layers }, in_dim)
        }
        ArchKind::CnnV1 | ArchKind::Grcnn => {
            if spec.conv_layers.is_empty() {
                return Err(Error::InvalidArgument {
                    op: "policy_build",
                    reason: "cnn architectures need at least one conv layer".into(),
                });
            }
            shapes.push(("reshape".into(), vec![1, window, features]));
            let mut blocks = Vec::new();
            let mut in_shape = [1usize, window, features];
            for (i, layer) in spec.conv_layers.iter().enumerate() {
                let block = ConvBlock::build(i, layer, in_shape, &mut rng)?;
                shapes.push((format!("conv{i}"), block.out_shape.to_vec()));
                if layer.pool_after {
                    shapes.push((format!("maxpool{i}"), block.pooled_shape.to_vec()));
                }
                in_shape = block.pooled_shape;
                blocks.push(block);
            }
            let flat = in_shape[0] * in_shape[1] * in_shape[2];
            shapes.push(("flatten".into(), vec![flat]));
            let width = *spec.hidden.first().ok_or(Error::InvalidArgument {
                op: "policy_build",
                reason: "cnn architectures need a dense width".into(),
            })?;
            let fc = DenseLayer::new(flat, width, 2.0_f64.sqrt(), &mut rng);
            shapes.push(("fc".into(), vec![width]));
            (Trunk::Cnn { blocks, fc }, width)
        }
    };

    let actor = DenseLayer::new(feat_dim, action_dim, 0.01, &mut rng);
    let critic = DenseLayer::new(feat_dim, 1, 1.0, &mut rng);
    shapes.push(("actor".into(), vec![action_dim]));
    shapes.push(("critic".into(), vec![1]));

    Ok(PolicyNet {
        spec,
        window,
        features,
        action_dim,
        trunk,
        actor,
        critic,
        log_std: Tensor::zeros(&[action_dim]).with_grad(),
        layer_shapes: shapes,
        norm_ctx: Vec::new(),
    })
}

impl PolicyNet {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn obs_shape(&self) -> (usize, usize) {
        (self.window, self.features)
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn log_std(&self) -> &Tensor {
        &self.log_std
    }

    pub fn log_std_mut(&mut self) -> &mut Tensor {
        &mut self.log_std
    }

    /// Declared output shape of every stage, for shape audits.
    pub fn layer_shapes(&self) -> &[(String, Vec<usize>)] {
        &self.layer_shapes
    }

    /// Total number of trainable parameters.
    pub fn param_count(&mut self) -> usize {
        self.named_params_mut().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_obs(&self, obs: &Tensor) -> Result<()> {
        if obs.shape() != [self.window, self.features] {
            return Err(Error::ShapeMismatch {
                op: "policy_forward",
                lhs: obs.shape().to_vec(),
                rhs: vec![self.window, self.features],
            });
        }
        obs.assert_finite("policy observation")
    }

    /// Batched forward pass. Returns the per-sample action means [B, D] and
    /// critic values. With `save` the layer contexts are kept for
    /// `backward_heads`.
    fn forward_batch(
        &mut self,
        obs: &[&Tensor],
        mode: Mode,
        mut rng: Option<&mut Rng>,
        save: bool,
    ) -> Result<(Tensor, Vec<f64>)> {
        if obs.is_empty() {
            return Err(Error::InvalidArgument {
                op: "policy_forward",
                reason: "empty observation batch".into(),
            });
        }
        for o in obs {
            self.check_obs(o)?;
        }
        let batch = obs.len();
        self.norm_ctx.clear();

        // input normalization (per sample), then stack into one batch tensor
        let mut stacked = Vec::with_capacity(batch * self.window * self.features);
        for o in obs {
            if self.spec.use_input_norm {
                let (normed, ctx) = column_normalize(o, INPUT_NORM_EPS)?;
                stacked.extend_from_slice(normed.data());
                if save {
                    self.norm_ctx.push(ctx);
                }
            } else {
                stacked.extend_from_slice(o.data());
            }
        }

        let feats = match &mut self.trunk {
            Trunk::Mlp { layers } => {
                let mut x = Tensor::new(vec![batch, self.window * self.features], stacked)?;
                for layer in layers.iter_mut() {
                    x = layer.forward_relu(&x, save)?;
                }
                x
            }
            Trunk::Cnn { blocks, fc } => {
                let mut x = Tensor::new(vec![batch, 1, self.window, self.features], stacked)?;
                for block in blocks.iter_mut() {
                    x = block.forward(&x, mode, self.spec.dropout_p, rng.as_deref_mut(), save)?;
                }
                let flat: usize = x.shape()[1..].iter().product();
                let x = x.reshaped(&[batch, flat])?;
                fc.forward_relu(&x, save)?
            }
        };

        let means = self.actor.forward(&feats, save)?;
        let values_t = self.critic.forward(&feats, save)?;
        means.assert_finite("policy action mean")?;
        values_t.assert_finite("policy value")?;
        Ok((means, values_t.data().to_vec()))
    }

    /// Reverse pass from head gradients; parameter gradients accumulate in
    /// place and the per-sample observation gradients are returned.
    /// `grad_log_std` folds straight into the log-std parameter.
    pub fn backward_heads(
        &mut self,
        grad_means: &Tensor,
        grad_log_std: &[f64],
        grad_values: &[f64],
    ) -> Result<Vec<Tensor>> {
        let batch = grad_means.shape()[0];
        if grad_values.len() != batch || grad_log_std.len() != self.action_dim {
            return Err(Error::ShapeMismatch {
                op: "policy_backward",
                lhs: vec![grad_values.len(), grad_log_std.len()],
                rhs: vec![batch, self.action_dim],
            });
        }
        accumulate(self.log_std.grad_mut(), grad_log_std);
        let gv = Tensor::new(vec![batch, 1], grad_values.to_vec())?;
        let g_feat_actor = self.actor.backward(grad_means)?;
        let g_feat_critic = self.critic.backward(&gv)?;
        let mut g_feats = g_feat_actor;
        accumulate(g_feats.data_mut(), g_feat_critic.data());

        let g_input = match &mut self.trunk {
            Trunk::Mlp { layers } => {
                let mut g = g_feats;
                for layer in layers.iter_mut().rev() {
                    g = layer.backward_relu(&g)?;
                }
                g
            }
            Trunk::Cnn { blocks, fc } => {
                let g = fc.backward_relu(&g_feats)?;
                let last_shape = blocks.last().unwrap().pooled_shape;
                let mut g =
                    g.reshaped(&[batch, last_shape[0], last_shape[1], last_shape[2]])?;
                for block in blocks.iter_mut().rev() {
                    g = block.backward(&g)?;
                }
                g.reshaped(&[batch, self.window * self.features])?
            }
        };

        let per_row = self.window * self.features;
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let g = Tensor::new(
                vec![self.window, self.features],
                g_input.data()[b * per_row..(b + 1) * per_row].to_vec(),
            )?;
            if self.spec.use_input_norm {
                let ctx = &self.norm_ctx[b];
                out.push(column_normalize_backward(&g, ctx)?);
            } else {
                out.push(g);
            }
        }
        Ok(out)
    }

    /// Sample an action for one observation (eval-mode statistics, no
    /// dropout). The log-prob refers to the unclipped sample.
    pub fn act(&mut self, obs: &Tensor, rng: &mut Rng) -> Result<ActOutput> {
        let (means, values) = self.forward_batch(&[obs], Mode::Eval, None, false)?;
        let mean = Tensor::new(vec![self.action_dim], means.data().to_vec())?;
        let sample = gaussian_sample(&mean, &self.log_std, rng)?;
        let log_prob = gaussian_log_prob(&mean, &self.log_std, &sample)?;
        Ok(ActOutput {
            action: sample.data().iter().map(|a| a.clamp(-1.0, 1.0)).collect(),
            raw_sample: sample.data().to_vec(),
            log_prob,
            value: values[0],
        })
    }

    /// The clipped action mean, for deterministic evaluation.
    pub fn deterministic_action(&mut self, obs: &Tensor) -> Result<Vec<f64>> {
        let (means, _) = self.forward_batch(&[obs], Mode::Eval, None, false)?;
        Ok(means.data().iter().map(|a| a.clamp(-1.0, 1.0)).collect())
    }

    /// Critic value of one observation (eval-mode statistics).
    pub fn value(&mut self, obs: &Tensor) -> Result<f64> {
        let (_, values) = self.forward_batch(&[obs], Mode::Eval, None, false)?;
        Ok(values[0])
    }

    /// Log-densities, entropies and values for stored (obs, action) pairs.
    /// Train mode uses batch statistics and active dropout and saves the
    /// contexts needed by `backward_heads`.
    pub fn evaluate_actions(
        &mut self,
        obs: &[&Tensor],
        actions: &[Vec<f64>],
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<ActionEval> {
        if obs.len() != actions.len() {
            return Err(Error::ShapeMismatch {
                op: "evaluate_actions",
                lhs: vec![obs.len()],
                rhs: vec![actions.len()],
            });
        }
        let save = mode == Mode::Train;
        let (means, values) = self.forward_batch(obs, mode, rng, save)?;
        let mut log_probs = Vec::with_capacity(obs.len());
        let mut entropies = Vec::with_capacity(obs.len());
        let entropy = gaussian_entropy(&self.log_std);
        for (b, action) in actions.iter().enumerate() {
            if action.len() != self.action_dim {
                return Err(Error::ShapeMismatch {
                    op: "evaluate_actions",
                    lhs: vec![action.len()],
                    rhs: vec![self.action_dim],
                });
            }
            let mean = Tensor::new(
                vec![self.action_dim],
                means.data()[b * self.action_dim..(b + 1) * self.action_dim].to_vec(),
            )?;
            let a = Tensor::new(vec![self.action_dim], action.clone())?;
            log_probs.push(gaussian_log_prob(&mean, &self.log_std, &a)?);
            entropies.push(entropy);
        }
        Ok(ActionEval {
            log_probs,
            entropies,
            values,
            means,
        })
    }

    /// Gradients of one sample's log-prob with respect to its action mean
    /// and the log-std, for composing loss seeds.
    pub fn log_prob_grads(
        &self,
        means: &Tensor,
        sample_idx: usize,
        action: &[f64],
    ) -> Result<(Tensor, Tensor)> {
        let d = self.action_dim;
        let mean = Tensor::new(
            vec![d],
            means.data()[sample_idx * d..(sample_idx + 1) * d].to_vec(),
        )?;
        let a = Tensor::new(vec![d], action.to_vec())?;
        gaussian_log_prob_grads(&mean, &self.log_std, &a)
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    /// Trainable parameters in a stable order with stable names.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        match &mut self.trunk {
            Trunk::Mlp { layers } => {
                for (i, l) in layers.iter_mut().enumerate() {
                    out.push((format!("trunk.dense{i}.weight"), &mut l.weight));
                    out.push((format!("trunk.dense{i}.bias"), &mut l.bias));
                }
            }
            Trunk::Cnn { blocks, fc } => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    out.push((format!("trunk.conv{i}.kernels"), &mut b.kernels));
                    out.push((format!("trunk.conv{i}.bias"), &mut b.bias));
                    if let Some(bn) = b.bn.as_mut() {
                        out.push((format!("trunk.bn{i}.gamma"), &mut bn.gamma));
                        out.push((format!("trunk.bn{i}.beta"), &mut bn.beta));
                    }
                }
                out.push(("trunk.fc.weight".into(), &mut fc.weight));
                out.push(("trunk.fc.bias".into(), &mut fc.bias));
            }
        }
        out.push(("actor.weight".into(), &mut self.actor.weight));
        out.push(("actor.bias".into(), &mut self.actor.bias));
        out.push(("critic.weight".into(), &mut self.critic.weight));
        out.push(("critic.bias".into(), &mut self.critic.bias));
        out.push(("log_std".into(), &mut self.log_std));
        out
    }

    /// Non-trainable state that must survive a checkpoint (batch-norm running
    /// statistics).
    fn named_buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Trunk::Cnn { blocks, .. } = &self.trunk {
            for (i, b) in blocks.iter().enumerate() {
                if let Some(bn) = b.bn.as_ref() {
                    out.push((
                        format!("trunk.bn{i}.running_mean"),
                        Tensor::new(vec![bn.stats.channels()], bn.stats.mean.clone()).unwrap(),
                    ));
                    out.push((
                        format!("trunk.bn{i}.running_var"),
                        Tensor::new(vec![bn.stats.channels()], bn.stats.var.clone()).unwrap(),
                    ));
                }
            }
        }
        out
    }

    /// Write architecture + parameters + buffers to a checkpoint directory.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let arch = self.spec.to_text(self.window, self.features, self.action_dim);
        let arch_path = dir.join("arch.txt");
        std::fs::write(&arch_path, arch)
            .map_err(|e| Error::io(arch_path.display().to_string(), e))?;
        let buffers = self.named_buffers();
        let named = self.named_params_mut();
        let mut entries: Vec<(String, &Tensor)> =
            named.iter().map(|(n, t)| (n.clone(), &**t)).collect();
        for (n, t) in &buffers {
            entries.push((n.clone(), t));
        }
        checkpoint::save(dir, &entries)
    }

    /// Rebuild a network from a checkpoint directory.
    pub fn load(dir: &Path) -> Result<PolicyNet> {
        let arch_path = dir.join("arch.txt");
        let text = std::fs::read_to_string(&arch_path)
            .map_err(|e| Error::io(arch_path.display().to_string(), e))?;
        let (spec, window, features, action_dim) = ArchSpec::from_text(&text)?;
        let mut net = build(&spec, (window, features), action_dim, 0)?;
        let stored = checkpoint::load(dir)?;
        let mut lookup: std::collections::HashMap<String, Tensor> = stored.into_iter().collect();
        for (name, param) in net.named_params_mut() {
            let loaded = lookup.remove(&name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing parameter {name}"))
            })?;
            if loaded.shape() != param.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    param.shape()
                )));
            }
            param.data_mut().copy_from_slice(loaded.data());
        }
        if let Trunk::Cnn { blocks, .. } = &mut net.trunk {
            for (i, b) in blocks.iter_mut().enumerate() {
                if let Some(bn) = b.bn.as_mut() {
                    for field in ["running_mean", "running_var"] {
                        let name = format!("trunk.bn{i}.{field}");
                        let loaded = lookup.remove(&name).ok_or_else(|| {
                            Error::Checkpoint(format!("checkpoint is missing buffer {name}"))
                        })?;
                        let target = if field == "running_mean" {
                            &mut bn.stats.mean
                        } else {
                            &mut bn.stats.var
                        };
                        if loaded.len() != target.len() {
                            return Err(Error::Checkpoint(format!(
                                "buffer {name} has wrong size"
                            )));
                        }
                        target.copy_from_slice(loaded.data());
                    }
                }
            }
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_grcnn_spec() -> ArchSpec {
        let conv = |filters, pool| ConvLayerSpec {
            filters,
            kernel: (3, 3),
            stride: (1, 1),
            batchnorm: true,
            dropout: false,
            pool_after: pool,
        };
        ArchSpec {
            kind: ArchKind::Grcnn,
            conv_layers: vec![conv(4, true), conv(8, false)],
            hidden: vec![16],
            dropout_p: 0.0,
            use_input_norm: true,
        }
    }

    #[test]
    fn default_filter_progressions() {
        let g = ArchSpec::grcnn();
        let filters: Vec<usize> = g.conv_layers.iter().map(|c| c.filters).collect();
        assert_eq!(filters, vec![32, 64, 128, 256]);
        assert!(g.use_input_norm);
        let v1 = ArchSpec::cnn_v1();
        let filters: Vec<usize> = v1.conv_layers.iter().map(|c| c.filters).collect();
        assert_eq!(filters, vec![32, 64]);
    }

    #[test]
    fn build_is_seed_deterministic() {
        let mut a = build(&ArchSpec::mlp(), (20, 10), 3, 77).unwrap();
        let mut b = build(&ArchSpec::mlp(), (20, 10), 3, 77).unwrap();
        for ((na, ta), (nb, tb)) in a.named_params_mut().iter().zip(b.named_params_mut().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        let mut c = build(&ArchSpec::mlp(), (20, 10), 3, 78).unwrap();
        let differs = a
            .named_params_mut()
            .iter()
            .zip(c.named_params_mut().iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(differs);
    }

    #[test]
    fn grcnn_first_layer_shapes_at_f291() {
        let net = build(&ArchSpec::grcnn(), (90, 291), 29, 0).unwrap();
        let shapes = net.layer_shapes();
        let get = |name: &str| {
            shapes
                .iter()
                .find(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("no stage {name}"))
                .1
                .clone()
        };
        assert_eq!(get("conv0"), vec![32, 21, 71]);
        assert_eq!(get("maxpool0"), vec![32, 10, 35]);
    }

    #[test]
    fn grcnn_too_narrow_input_names_failing_layer() {
        let err = build(&ArchSpec::grcnn(), (90, 8), 2, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("maxpool0"), "{msg}");
    }

    #[test]
    fn mlp_parameter_count_formula() {
        let mut net = build(&ArchSpec::mlp(), (90, 35), 2, 0).unwrap();
        // (90·35)·64+64 + 64·64+64 + (64·2+2) + (64·1+1), plus D log-std slots
        let without_log_std = 3150 * 64 + 64 + 64 * 64 + 64 + 130 + 65;
        assert_eq!(without_log_std, 206_019);
        assert_eq!(net.param_count(), without_log_std + 2);
    }

    #[test]
    fn constant_observation_through_grcnn_is_finite_and_unique() {
        let mut net = build(&tiny_grcnn_spec(), (12, 8), 2, 3).unwrap();
        let a = net
            .deterministic_action(&Tensor::full(&[12, 8], 5.0))
            .unwrap();
        let b = net
            .deterministic_action(&Tensor::full(&[12, 8], -3.25))
            .unwrap();
        // column normalization maps any constant matrix to zeros
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn value_is_scalar_and_eval_forward_is_deterministic() {
        let mut net = build(&ArchSpec::cnn_v1(), (30, 20), 2, 5).unwrap();
        let mut rng = Rng::new(0);
        let obs = Tensor::from_fn(&[30, 20], |_| rng.normal());
        let v1 = net.value(&obs).unwrap();
        let v2 = net.value(&obs).unwrap();
        assert_eq!(v1, v2);
        let a1 = net.deterministic_action(&obs).unwrap();
        let a2 = net.deterministic_action(&obs).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn act_is_rng_deterministic_and_clipped() {
        let mut net = build(&ArchSpec::mlp(), (10, 6), 3, 1).unwrap();
        let rng = Rng::new(42);
        let obs = Tensor::from_fn(&[10, 6], |i| (i % 7) as f64);
        let out1 = net.act(&obs, &mut rng.clone()).unwrap();
        let out2 = net.act(&obs, &mut rng.clone()).unwrap();
        assert_eq!(out1.raw_sample, out2.raw_sample);
        assert!(out1.action.iter().all(|a| (-1.0..=1.0).contains(a)));
    }

    #[test]
    fn act_with_tiny_std_returns_clipped_mean() {
        let mut net = build(&ArchSpec::mlp(), (10, 6), 2, 1).unwrap();
        for v in net.log_std_mut().data_mut() {
            *v = -27.6; // sigma ~ 1e-12
        }
        let obs = Tensor::from_fn(&[10, 6], |i| i as f64 / 10.0);
        let mean = net.deterministic_action(&obs).unwrap();
        let mut rng = Rng::new(7);
        let out = net.act(&obs, &mut rng).unwrap();
        for (a, m) in out.action.iter().zip(&mean) {
            assert!((a - m).abs() < 1e-9);
        }
    }

    #[test]
    fn evaluate_reproduces_act_log_probs() {
        let mut net = build(&ArchSpec::mlp(), (15, 9), 2, 11).unwrap();
        let mut rng = Rng::new(5);
        let mut obs_set = Vec::new();
        let mut actions = Vec::new();
        let mut lps = Vec::new();
        for _ in 0..6 {
            let obs = Tensor::from_fn(&[15, 9], |_| rng.normal());
            let out = net.act(&obs, &mut rng).unwrap();
            actions.push(out.raw_sample.clone());
            lps.push(out.log_prob);
            obs_set.push(obs);
        }
        let refs: Vec<&Tensor> = obs_set.iter().collect();
        let eval = net
            .evaluate_actions(&refs, &actions, Mode::Eval, None)
            .unwrap();
        for (a, b) in eval.log_probs.iter().zip(&lps) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // state-independent log-std ⇒ identical entropies
        assert!(eval.entropies.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = build(&tiny_grcnn_spec(), (12, 8), 2, 9).unwrap();
        let mut rng = Rng::new(3);
        let obs = Tensor::from_fn(&[12, 8], |_| rng.normal());
        // push some training statistics through batch norm first
        let obs2 = Tensor::from_fn(&[12, 8], |_| rng.normal());
        let obs_refs = vec![&obs, &obs2];
        let actions = vec![vec![0.1, -0.2], vec![0.0, 0.3]];
        net.evaluate_actions(&obs_refs, &actions, Mode::Train, None)
            .unwrap();
        let before = net.deterministic_action(&obs).unwrap();
        net.save(dir.path()).unwrap();
        let mut loaded = PolicyNet::load(dir.path()).unwrap();
        let after = loaded.deterministic_action(&obs).unwrap();
        assert_eq!(before, after);
        assert_eq!(net.value(&obs).unwrap(), loaded.value(&obs).unwrap());
    }

    #[test]
    fn non_finite_observation_is_rejected() {
        let mut net = build(&ArchSpec::mlp(), (4, 3), 1, 0).unwrap();
        let mut obs = Tensor::zeros(&[4, 3]);
        obs.data_mut()[5] = f64::INFINITY;
        assert!(net.value(&obs).is_err());
    }
}
