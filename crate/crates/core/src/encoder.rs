//! Convolutional subsampling followed by a stack of Conformer blocks.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, RelPositionAttention};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Ctx, Init, LayerNorm, Linear, ParamId, ParamStore, RunningStats};
use crate::tensor::{Graph, Tensor, Var};

/// Shortest input that survives two 3×3 stride-2 convolutions.
pub const SUBSAMPLE_MIN_FRAMES: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformerConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_expansion: usize,
    pub depthwise_kernel: usize,
    pub dropout_p: f64,
    /// Dropout on attention probabilities inside the self-attention module.
    pub attn_dropout_p: f64,
    pub subsample_factor: usize,
    /// Channels of both subsampling convolutions.
    pub subsample_channels: usize,
}

impl Default for ConformerConfig {
    fn default() -> Self {
        ConformerConfig {
            n_blocks: 2,
            d_model: 64,
            n_heads: 4,
            ff_expansion: 4,
            depthwise_kernel: 15,
            dropout_p: 0.1,
            attn_dropout_p: 0.0,
            subsample_factor: 4,
            subsample_channels: 16,
        }
    }
}

impl ConformerConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            dropout_p: self.attn_dropout_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_blocks", self.n_blocks),
            ("d_model", self.d_model),
            ("ff_expansion", self.ff_expansion),
            ("subsample_channels", self.subsample_channels),
        ] {
            if v == 0 {
                return Err(Error::config(format!("encoder.{}", name), "must be positive"));
            }
        }
        if self.depthwise_kernel.is_multiple_of(2) {
            return Err(Error::config("encoder.depthwise_kernel", "must be odd"));
        }
        if self.subsample_factor != 4 {
            return Err(Error::config(
                "encoder.subsample_factor",
                "only 4 (two stride-2 convolutions) is supported",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("encoder.dropout_p", "must lie in [0, 1)"));
        }
        self.attention().validate("encoder")
    }
}

fn conv_out(n: usize) -> Option<usize> {
    (n >= 3).then(|| (n - 3) / 2 + 1)
}

/// Output length of the subsampling stack, `None` when the input is too short.
pub fn subsampled_len(frames: usize) -> Option<usize> {
    conv_out(frames).and_then(conv_out)
}

#[derive(Clone, Debug)]
pub struct ConvSubsample {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub proj: Linear,
    pub in_dims: usize,
}

impl ConvSubsample {
    pub fn new(store: &mut ParamStore, init: &mut Init, in_dims: usize, channels: usize, d_model: usize) -> Self {
        let c = channels;
        let f = subsampled_len(in_dims).expect("feature dimension of at least 7");
        ConvSubsample {
            conv1_w: store.add("subsample.conv1.weight", init.xavier(&[c, 1, 3, 3], 9, 9 * c)),
            conv1_b: store.add("subsample.conv1.bias", Tensor::zeros(&[c])),
            conv2_w: store.add("subsample.conv2.weight", init.xavier(&[c, c, 3, 3], 9 * c, 9 * c)),
            conv2_b: store.add("subsample.conv2.bias", Tensor::zeros(&[c])),
            proj: Linear::new(store, init, "subsample.proj", c * f, d_model, true),
            in_dims,
        }
    }

    /// `[T × F]` features to `[T' × d_model]`.
    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, x: Var) -> Result<(Var, usize)> {
        let (t, f) = g.value(x).dims2().ok_or_else(|| Error::Dimension {
            op: "conv_subsample",
            msg: format!("expected [T x F] features, got {:?}", g.shape(x)),
        })?;
        if f != self.in_dims {
            return Err(Error::Dimension {
                op: "conv_subsample",
                msg: format!("expected {} feature dims, got {}", self.in_dims, f),
            });
        }
        let t_out = subsampled_len(t).ok_or_else(|| Error::Dimension {
            op: "conv_subsample",
            msg: format!("{} frames is too few, need at least {}", t, SUBSAMPLE_MIN_FRAMES),
        })?;
        let img = g.reshape(x, vec![1, t, f])?;
        let (w1, b1) = (cx.param(g, self.conv1_w), cx.param(g, self.conv1_b));
        let h = g.conv2d(img, w1, b1, 2)?;
        let h = g.swish(h);
        let (w2, b2) = (cx.param(g, self.conv2_w), cx.param(g, self.conv2_b));
        let h = g.conv2d(h, w2, b2, 2)?;
        let h = g.swish(h);
        let (c, tt, ff) = match g.shape(h) {
            &[c, tt, ff] => (c, tt, ff),
            s => unreachable!("conv2d yields rank 3, got {:?}", s),
        };
        debug_assert_eq!(tt, t_out);
        let h = g.permute(h, &[1, 0, 2])?;
        let h = g.reshape(h, vec![tt, c * ff])?;
        Ok((self.proj.forward(g, cx, h)?, t_out))
    }
}

/// `(x·w + b) ⊗ σ(x·v + c)`.
pub fn glu_gate(g: &mut Graph, cx: &mut Ctx, x: Var, linear: &Linear, gate: &Linear) -> Result<Var> {
    let a = linear.forward(g, cx, x)?;
    let b = gate.forward(g, cx, x)?;
    let s = g.sigmoid(b);
    g.mul(a, s)
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub lin1: Linear,
    pub lin2: Linear,
    pub dropout_p: f64,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, expansion: usize, dropout_p: f64) -> Self {
        FeedForward {
            norm: LayerNorm::new(store, &format!("{}.norm", name), d),
            lin1: Linear::new(store, init, &format!("{}.lin1", name), d, d * expansion, true),
            lin2: Linear::new(store, init, &format!("{}.lin2", name), d * expansion, d, true),
            dropout_p,
        }
    }

    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, cx, x)?;
        let h = self.lin1.forward(g, cx, h)?;
        let h = g.swish(h);
        let h = cx.dropout(g, h, self.dropout_p)?;
        let h = self.lin2.forward(g, cx, h)?;
        cx.dropout(g, h, self.dropout_p)
    }
}

#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pw_in: Linear,
    pub gate: Linear,
    /// Depthwise kernel `[K × d]`.
    pub dw: ParamId,
    pub bn: BatchNorm,
    pub pw_out: Linear,
    pub dropout_p: f64,
}

impl ConvModule {
    pub fn new(
        store: &mut ParamStore,
        running: &mut Vec<RunningStats>,
        init: &mut Init,
        name: &str,
        d: usize,
        kernel: usize,
        dropout_p: f64,
    ) -> Self {
        ConvModule {
            norm: LayerNorm::new(store, &format!("{}.norm", name), d),
            pw_in: Linear::new(store, init, &format!("{}.pw_in", name), d, d, true),
            gate: Linear::new(store, init, &format!("{}.gate", name), d, d, true),
            dw: store.add(format!("{}.depthwise", name), init.xavier(&[kernel, d], kernel, kernel)),
            bn: BatchNorm::new(store, running, &format!("{}.bn", name), d),
            pw_out: Linear::new(store, init, &format!("{}.pw_out", name), d, d, true),
            dropout_p,
        }
    }

    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, cx, x)?;
        let h = glu_gate(g, cx, h, &self.pw_in, &self.gate)?;
        let k = cx.param(g, self.dw);
        let h = g.conv1d_depthwise(h, k)?;
        let h = self.bn.forward(g, cx, h)?;
        let h = g.swish(h);
        let h = self.pw_out.forward(g, cx, h)?;
        cx.dropout(g, h, self.dropout_p)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttentionModule {
    pub norm: LayerNorm,
    pub att: RelPositionAttention,
    pub dropout_p: f64,
}

impl SelfAttentionModule {
    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, cx, x)?;
        let h = self.att.forward(g, cx, h)?;
        cx.dropout(g, h, self.dropout_p)
    }
}

#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ff1: FeedForward,
    pub mhsa: SelfAttentionModule,
    pub conv: ConvModule,
    pub ff2: FeedForward,
    pub norm_out: LayerNorm,
}

impl ConformerBlock {
    pub fn new(
        store: &mut ParamStore,
        running: &mut Vec<RunningStats>,
        init: &mut Init,
        name: &str,
        cfg: &ConformerConfig,
    ) -> Self {
        let d = cfg.d_model;
        ConformerBlock {
            ff1: FeedForward::new(store, init, &format!("{}.ff1", name), d, cfg.ff_expansion, cfg.dropout_p),
            mhsa: SelfAttentionModule {
                norm: LayerNorm::new(store, &format!("{}.mhsa.norm", name), d),
                att: RelPositionAttention::new(store, init, &format!("{}.mhsa", name), &cfg.attention()),
                dropout_p: cfg.dropout_p,
            },
            conv: ConvModule::new(
                store,
                running,
                init,
                &format!("{}.conv", name),
                d,
                cfg.depthwise_kernel,
                cfg.dropout_p,
            ),
            ff2: FeedForward::new(store, init, &format!("{}.ff2", name), d, cfg.ff_expansion, cfg.dropout_p),
            norm_out: LayerNorm::new(store, &format!("{}.norm_out", name), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, x: Var) -> Result<Var> {
        let f = self.ff1.forward(g, cx, x)?;
        let f = g.scale(f, 0.5);
        let x1 = g.add(x, f)?;
        let a = self.mhsa.forward(g, cx, x1)?;
        let x2 = g.add(x1, a)?;
        let c = self.conv.forward(g, cx, x2)?;
        let x3 = g.add(x2, c)?;
        let f = self.ff2.forward(g, cx, x3)?;
        let f = g.scale(f, 0.5);
        let x4 = g.add(x3, f)?;
        self.norm_out.forward(g, cx, x4)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: ConformerConfig,
    pub subsample: ConvSubsample,
    pub blocks: Vec<ConformerBlock>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        running: &mut Vec<RunningStats>,
        init: &mut Init,
        in_dims: usize,
        cfg: &ConformerConfig,
    ) -> Self {
        let subsample = ConvSubsample::new(store, init, in_dims, cfg.subsample_channels, cfg.d_model);
        let blocks = (0..cfg.n_blocks)
            .map(|i| ConformerBlock::new(store, running, init, &format!("encoder.{}", i), cfg))
            .collect();
        Encoder {
            cfg: cfg.clone(),
            subsample,
            blocks,
        }
    }

    /// `[T × F]` features to `([T' × d_model], T')`.
    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, feats: Var) -> Result<(Var, usize)> {
        let (mut h, t) = self.subsample.forward(g, cx, feats)?;
        for b in &self.blocks {
            h = b.forward(g, cx, h)?;
        }
        Ok((h, t))
    }
}
