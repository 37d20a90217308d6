//! Autoregressive Transformer decoder attending over encoder frames.

use serde::{Deserialize, Serialize};

use crate::attention::{absolute_sinusoids, AttentionConfig, Mask, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, LayerNorm, Linear, Mode, ParamId, ParamStore, RunningStats};
use crate::tensor::{Graph, RngState, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_expansion: usize,
    pub dropout_p: f64,
    pub attn_dropout_p: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            ff_expansion: 4,
            dropout_p: 0.1,
            attn_dropout_p: 0.0,
        }
    }
}

impl DecoderConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            dropout_p: self.attn_dropout_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("decoder.n_layers", "must be positive"));
        }
        if self.ff_expansion == 0 {
            return Err(Error::config("decoder.ff_expansion", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("decoder.dropout_p", "must lie in [0, 1)"));
        }
        self.attention().validate("decoder")
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_att: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_att: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub dropout_p: f64,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &DecoderConfig) -> Self {
        let d = cfg.d_model;
        let att = cfg.attention();
        DecoderLayer {
            norm_self: LayerNorm::new(store, &format!("{}.norm_self", name), d),
            self_att: MultiHeadAttention::new(store, init, &format!("{}.self_att", name), &att),
            norm_cross: LayerNorm::new(store, &format!("{}.norm_cross", name), d),
            cross_att: MultiHeadAttention::new(store, init, &format!("{}.cross_att", name), &att),
            norm_ff: LayerNorm::new(store, &format!("{}.norm_ff", name), d),
            ff1: Linear::new(store, init, &format!("{}.ff1", name), d, d * cfg.ff_expansion, true),
            ff2: Linear::new(store, init, &format!("{}.ff2", name), d * cfg.ff_expansion, d, true),
            dropout_p: cfg.dropout_p,
        }
    }

    fn forward(&self, g: &mut Graph, cx: &mut Ctx, x: Var, enc: Var, mask: &Mask) -> Result<Var> {
        let h = self.norm_self.forward(g, cx, x)?;
        let h = self.self_att.forward(g, cx, h, h, Some(mask))?;
        let h = cx.dropout(g, h, self.dropout_p)?;
        let x = g.add(x, h)?;

        let h = self.norm_cross.forward(g, cx, x)?;
        let h = self.cross_att.forward(g, cx, h, enc, None)?;
        let h = cx.dropout(g, h, self.dropout_p)?;
        let x = g.add(x, h)?;

        let h = self.norm_ff.forward(g, cx, x)?;
        let h = self.ff1.forward(g, cx, h)?;
        let h = g.relu(h);
        let h = cx.dropout(g, h, self.dropout_p)?;
        let h = self.ff2.forward(g, cx, h)?;
        let h = cx.dropout(g, h, self.dropout_p)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub vocab_size: usize,
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub norm_out: LayerNorm,
    pub out: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, vocab_size: usize, cfg: &DecoderConfig) -> Self {
        let d = cfg.d_model;
        let embed = store.add("decoder.embed", init.normal(&[vocab_size, d], (1.0 / d as f64).sqrt()));
        let layers = (0..cfg.n_layers)
            .map(|i| DecoderLayer::new(store, init, &format!("decoder.{}", i), cfg))
            .collect();
        Decoder {
            cfg: cfg.clone(),
            vocab_size,
            embed,
            layers,
            norm_out: LayerNorm::new(store, "decoder.norm_out", d),
            out: Linear::new(store, init, "decoder.out", d, vocab_size, true),
        }
    }

    /// Teacher-forced logits `[L × V]` for `tokens` (leading sos included).
    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, tokens: &[usize], enc: Var) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Dimension {
                op: "decoder_forward",
                msg: "token sequence must start with sos".into(),
            });
        }
        let table = cx.param(g, self.embed);
        self.forward_with_table(g, cx, table, tokens, enc)
    }

    /// As [`Decoder::forward`] with an explicit embedding table `[V × d]`.
    pub fn forward_with_table(&self, g: &mut Graph, cx: &mut Ctx, table: Var, tokens: &[usize], enc: Var) -> Result<Var> {
        let d = self.cfg.d_model;
        let emb = g.gather_rows(table, tokens)?;
        let emb = g.scale(emb, (d as f64).sqrt());
        let pe = g.constant(absolute_sinusoids(tokens.len(), d));
        let mut x = g.add(emb, pe)?;
        x = cx.dropout(g, x, self.cfg.dropout_p)?;
        let mask = Mask::causal(tokens.len());
        for layer in &self.layers {
            x = layer.forward(g, cx, x, enc, &mask)?;
        }
        let x = self.norm_out.forward(g, cx, x)?;
        self.out.forward(g, cx, x)
    }

    /// Greedy autoregressive decoding from `sos`; stops at `eos` (same id) or `max_len` tokens.
    pub fn greedy_decode(
        &self,
        store: &ParamStore,
        running: &[RunningStats],
        enc: &Tensor,
        sos_eos: usize,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut tokens = vec![sos_eos];
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut g = Graph::new();
            let mut cx = Ctx::new(store, running, Mode::Eval, RngState::new(0)).frozen();
            let e = g.constant(enc.clone());
            let logits = self.forward(&mut g, &mut cx, &tokens, e)?;
            let last = g.value(logits).row(tokens.len() - 1);
            let next = argmax(last);
            if next == sos_eos {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
