//! Scaled dot-product and multi-head attention, Transformer-XL style
//! relative-position scoring for the encoder, and causal masks for the decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Dropout on attention probabilities.
    pub dropout_p: f64,
}

impl AttentionConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                format!("{}.n_heads", prefix),
                format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!("{}.attn_dropout_p", prefix), "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Boolean `[rows × cols]` attention mask; `true` lets a query see a key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl Mask {
    /// Lower-triangular mask: position `i` may attend to `j` iff `j <= i`.
    pub fn causal(t: usize) -> Self {
        let allow = (0..t * t).map(|idx| idx % t <= idx / t).collect();
        Mask {
            rows: t,
            cols: t,
            allow,
        }
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }
}

/// `PE[pos, 2j] = sin(pos / 10000^(2j/d))`, `PE[pos, 2j+1] = cos(...)`; `pos` may be negative.
pub fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 10000f64.powf((i - i % 2) as f64 / d as f64);
            if i % 2 == 0 {
                (pos / freq).sin()
            } else {
                (pos / freq).cos()
            }
        })
        .collect()
}

/// Absolute encodings for positions `0..len`.
pub fn absolute_sinusoids(len: usize, d: usize) -> Tensor {
    let data = (0..len).flat_map(|p| sinusoid(p as f64, d)).collect();
    Tensor::new(vec![len, d], data).expect("consistent shape")
}

/// Relative encodings `r_{i-l}`; row `j` holds offset `j - (t - 1)`, covering `-(t-1)..=t-1`.
pub fn relative_sinusoids(t: usize, d: usize) -> Tensor {
    let data = (0..2 * t - 1)
        .flat_map(|j| sinusoid(j as f64 - (t as f64 - 1.0), d))
        .collect();
    Tensor::new(vec![2 * t - 1, d], data).expect("consistent shape")
}

/// `softmax(Q·Kᵀ/√d_k + mask)·V`. Returns the output and the attention weights.
pub fn scaled_dot_attention(
    g: &mut Graph,
    cx: &mut Ctx,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
    dropout_p: f64,
) -> Result<(Var, Var)> {
    let d_k = g.shape(q)[1];
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    attend(g, cx, scores, v, d_k, mask, dropout_p)
}

fn attend(
    g: &mut Graph,
    cx: &mut Ctx,
    scores: Var,
    v: Var,
    d_k: usize,
    mask: Option<&Mask>,
    dropout_p: f64,
) -> Result<(Var, Var)> {
    let mut s = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    if let Some(m) = mask {
        s = g.mask_fill(s, &m.allow)?;
    }
    let w = g.softmax(s, 1)?;
    let wd = cx.dropout(g, w, dropout_p)?;
    let out = g.matmul(wd, v)?;
    Ok((out, w))
}

/// Multi-head attention with per-head projections and output projection `W^o`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &AttentionConfig) -> Self {
        let d = cfg.d_model;
        MultiHeadAttention {
            cfg: cfg.clone(),
            wq: Linear::new(store, init, &format!("{}.wq", name), d, d, true),
            wk: Linear::new(store, init, &format!("{}.wk", name), d, d, true),
            wv: Linear::new(store, init, &format!("{}.wv", name), d, d, true),
            wo: Linear::new(store, init, &format!("{}.wo", name), d, d, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, x_q: Var, x_kv: Var, mask: Option<&Mask>) -> Result<Var> {
        for x in [x_q, x_kv] {
            if g.shape(x).get(1) != Some(&self.cfg.d_model) {
                return Err(Error::Dimension {
                    op: "multi_head_attention",
                    msg: format!("input {:?} does not have width {}", g.shape(x), self.cfg.d_model),
                });
            }
        }
        let q = self.wq.forward(g, cx, x_q)?;
        let k = self.wk.forward(g, cx, x_kv)?;
        let v = self.wv.forward(g, cx, x_kv)?;
        let d_k = self.cfg.d_k();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = g.slice_cols(q, h * d_k, d_k)?;
            let kh = g.slice_cols(k, h * d_k, d_k)?;
            let vh = g.slice_cols(v, h * d_k, d_k)?;
            let (out, _) = scaled_dot_attention(g, cx, qh, kh, vh, mask, self.cfg.dropout_p)?;
            heads.push(out);
        }
        let cat = g.concat_cols(&heads)?;
        self.wo.forward(g, cx, cat)
    }
}

/// Self-attention scored with content and relative-position terms:
/// `A_il = (q_i + u)·k_l + (q_i + v)·(r_{i-l} W^{K,r})`.
#[derive(Clone, Debug)]
pub struct RelPositionAttention {
    pub cfg: AttentionConfig,
    pub wq: Linear,
    /// `W^{K,E}`: content key projection.
    pub wk: Linear,
    pub wv: Linear,
    /// `W^{K,r}`: position key projection, no bias.
    pub wpos: Linear,
    pub wo: Linear,
    pub pos_bias_u: ParamId,
    pub pos_bias_v: ParamId,
}

impl RelPositionAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &AttentionConfig) -> Self {
        let d = cfg.d_model;
        let bias_scale = (1.0 / d as f64).sqrt();
        RelPositionAttention {
            cfg: cfg.clone(),
            wq: Linear::new(store, init, &format!("{}.wq", name), d, d, true),
            wk: Linear::new(store, init, &format!("{}.wk", name), d, d, true),
            wv: Linear::new(store, init, &format!("{}.wv", name), d, d, true),
            wpos: Linear::new(store, init, &format!("{}.wpos", name), d, d, false),
            wo: Linear::new(store, init, &format!("{}.wo", name), d, d, true),
            pos_bias_u: store.add(format!("{}.pos_bias_u", name), init.uniform(&[d], bias_scale)),
            pos_bias_v: store.add(format!("{}.pos_bias_v", name), init.uniform(&[d], bias_scale)),
        }
    }

    /// Unscaled `[T × T]` scores for every head, plus the value projection.
    pub fn scores(&self, g: &mut Graph, cx: &mut Ctx, x: Var) -> Result<(Vec<Var>, Var)> {
        let (t, d) = g
            .value(x)
            .dims2()
            .filter(|&(_, d)| d == self.cfg.d_model)
            .ok_or_else(|| Error::Dimension {
                op: "rel_attention_scores",
                msg: format!("expected [T x {}], got {:?}", self.cfg.d_model, g.shape(x)),
            })?;
        let q = self.wq.forward(g, cx, x)?;
        let k = self.wk.forward(g, cx, x)?;
        let v = self.wv.forward(g, cx, x)?;
        let r = g.constant(relative_sinusoids(t, d));
        let p = self.wpos.forward(g, cx, r)?;
        let u = cx.param(g, self.pos_bias_u);
        let vb = cx.param(g, self.pos_bias_v);
        let qu = g.add_row(q, u)?;
        let qv = g.add_row(q, vb)?;
        let d_k = self.cfg.d_k();
        let mut out = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let quh = g.slice_cols(qu, h * d_k, d_k)?;
            let qvh = g.slice_cols(qv, h * d_k, d_k)?;
            let kh = g.slice_cols(k, h * d_k, d_k)?;
            let ph = g.slice_cols(p, h * d_k, d_k)?;
            let kt = g.transpose(kh)?;
            let content = g.matmul(quh, kt)?;
            let pt = g.transpose(ph)?;
            let rel = g.matmul(qvh, pt)?;
            let position = g.rel_gather(rel)?;
            out.push(g.add(content, position)?);
        }
        Ok((out, v))
    }

    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (scores, v) = self.scores(g, cx, x)?;
        let d_k = self.cfg.d_k();
        let mut heads = Vec::with_capacity(scores.len());
        for (h, s) in scores.into_iter().enumerate() {
            let vh = g.slice_cols(v, h * d_k, d_k)?;
            let (out, _) = attend(g, cx, s, vh, d_k, None, self.cfg.dropout_p)?;
            heads.push(out);
        }
        let cat = g.concat_cols(&heads)?;
        self.wo.forward(g, cx, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, RunningStats};
    use crate::tensor::gradcheck::{check, random_tensor};
    use crate::tensor::RngState;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize, h: usize) -> AttentionConfig {
        AttentionConfig {
            d_model: d,
            n_heads: h,
            dropout_p: 0.0,
        }
    }

    /// Scalar reference for softmax(q·kᵀ/√d)·v.
    fn oracle_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
        let (tq, dk) = q.dims2().unwrap();
        let (tk, dv) = v.dims2().unwrap();
        let mut out = vec![0.0; tq * dv];
        for i in 0..tq {
            let s: Vec<f64> = (0..tk)
                .map(|j| (0..dk).map(|c| q.at2(i, c) * k.at2(j, c)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for j in 0..tk {
                let w = (s[j] - m).exp() / z;
                for c in 0..dv {
                    out[i * dv + c] += w * v.at2(j, c);
                }
            }
        }
        out
    }

    fn sda(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Mask>) -> (Tensor, Tensor) {
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store, &[], Mode::Eval, RngState::new(0));
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let (o, w) = scaled_dot_attention(&mut g, &mut cx, qv, kv, vv, mask, 0.0).unwrap();
        (g.value(o).clone(), g.value(w).clone())
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_tensor(&[3, 4], 2.0, &mut rng);
        let k = random_tensor(&[1, 4], 2.0, &mut rng);
        let v = random_tensor(&[1, 5], 2.0, &mut rng);
        let (o, _) = sda(&q, &k, &v, None);
        for i in 0..3 {
            assert_eq!(o.row(i), v.row(0));
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_tensor(&[2, 3], 2.0, &mut rng);
        let krow = random_tensor(&[1, 3], 2.0, &mut rng);
        let k = Tensor::from_rows(&vec![krow.row(0).to_vec(); 4]);
        let v = random_tensor(&[4, 2], 2.0, &mut rng);
        let (o, _) = sda(&q, &k, &v, None);
        for c in 0..2 {
            let mean = (0..4).map(|j| v.at2(j, c)).sum::<f64>() / 4.0;
            assert!((o.at2(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_tensor(&[2, 2], 1.5, &mut rng);
        let k = random_tensor(&[2, 2], 1.5, &mut rng);
        let v = random_tensor(&[2, 2], 1.5, &mut rng);
        let (o, _) = sda(&q, &k, &v, None);
        for (a, b) in o.data().iter().zip(oracle_attention(&q, &k, &v)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_weights_are_probability_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_tensor(&[5, 3], 3.0, &mut rng);
        let k = random_tensor(&[5, 3], 3.0, &mut rng);
        let v = random_tensor(&[5, 3], 3.0, &mut rng);
        let mask = Mask::causal(5);
        let (_, w) = sda(&q, &k, &v, Some(&mask));
        for i in 0..5 {
            let row = w.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for j in 0..5 {
                if j > i {
                    assert_eq!(row[j], 0.0);
                } else {
                    assert!(row[j] > 0.0);
                }
            }
        }
    }

    #[test]
    fn causal_mask_shape() {
        assert_eq!(Mask::causal(1).allow, vec![true]);
        let m = Mask::causal(6);
        assert_eq!((0..6).filter(|&j| m.allowed(0, j)).count(), 1);
        assert_eq!(m.allow.iter().filter(|&&a| a).count(), 6 * 7 / 2);
    }

    #[test]
    fn sinusoid_tables() {
        let r = relative_sinusoids(4, 6);
        assert_eq!(r.shape(), &[7, 6]);
        // offset 0 sits in the middle row and equals the position-0 encoding.
        assert_eq!(r.row(3), sinusoid(0.0, 6).as_slice());
        assert_eq!(r.row(3), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let a = absolute_sinusoids(10, 8);
        assert!((a.at2(7, 2) - (7.0 / 10000f64.powf(2.0 / 8.0)).sin()).abs() < 1e-15);
        assert!((a.at2(3, 5) - (3.0 / 10000f64.powf(4.0 / 8.0)).cos()).abs() < 1e-15);
    }

    #[test]
    fn single_head_identity_projection_reduces_to_sda() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut init = Init::new(5);
        let mha = MultiHeadAttention::new(&mut store, &mut init, "att", &cfg(d, 1));
        for lin in [&mha.wq, &mha.wk, &mha.wv, &mha.wo] {
            store.get_mut(lin.w).value = Tensor::eye(d);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xq = random_tensor(&[3, d], 1.0, &mut rng);
        let xkv = random_tensor(&[5, d], 1.0, &mut rng);
        let mut g = Graph::new();
        let mut cx = Ctx::new(&store, &[], Mode::Eval, RngState::new(0));
        let (a, b) = (g.constant(xq.clone()), g.constant(xkv.clone()));
        let y = mha.forward(&mut g, &mut cx, a, b, None).unwrap();
        assert_eq!(g.shape(y), &[3, d]);
        for (u, w) in g.value(y).data().iter().zip(oracle_attention(&xq, &xkv, &xkv)) {
            assert!((u - w).abs() < 1e-12);
        }
    }

    #[test]
    fn two_heads_match_head_by_head_oracle() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut init = Init::new(7);
        let mha = MultiHeadAttention::new(&mut store, &mut init, "att", &cfg(d, 2));
        for lin in [&mha.wq, &mha.wk, &mha.wv, &mha.wo] {
            store.get_mut(lin.b.unwrap()).value = init.uniform(&[d], 0.5);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&[3, d], 1.0, &mut rng);

        let proj = |l: &Linear, x: &Tensor| -> Tensor {
            let (w, b) = (&store.get(l.w).value, &store.get(l.b.unwrap()).value);
            let (r, din) = x.dims2().unwrap();
            let dout = w.shape()[1];
            let mut out = vec![0.0; r * dout];
            for i in 0..r {
                for j in 0..dout {
                    out[i * dout + j] = b.data()[j] + (0..din).map(|p| x.at2(i, p) * w.at2(p, j)).sum::<f64>();
                }
            }
            Tensor::new(vec![r, dout], out).unwrap()
        };
        let cols = |t: &Tensor, s: usize, n: usize| -> Tensor {
            Tensor::from_rows(&(0..t.shape()[0]).map(|i| t.row(i)[s..s + n].to_vec()).collect::<Vec<_>>())
        };
        let (q, k, v) = (proj(&mha.wq, &x), proj(&mha.wk, &x), proj(&mha.wv, &x));
        let h0 = oracle_attention(&cols(&q, 0, 2), &cols(&k, 0, 2), &cols(&v, 0, 2));
        let h1 = oracle_attention(&cols(&q, 2, 2), &cols(&k, 2, 2), &cols(&v, 2, 2));
        let cat = Tensor::from_rows(
            &(0..3)
                .map(|i| [&h0[i * 2..i * 2 + 2], &h1[i * 2..i * 2 + 2]].concat())
                .collect::<Vec<_>>(),
        );
        let want = proj(&mha.wo, &cat);

        let mut g = Graph::new();
        let mut cx = Ctx::new(&store, &[], Mode::Eval, RngState::new(0));
        let xv = g.constant(x);
        let y = mha.forward(&mut g, &mut cx, xv, xv, None).unwrap();
        for (a, b) in g.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_gradient_check() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut init = Init::new(9);
        let mha = MultiHeadAttention::new(&mut store, &mut init, "att", &cfg(d, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let xq = random_tensor(&[3, d], 1.0, &mut rng);
        let xkv = random_tensor(&[4, d], 1.0, &mut rng);
        let w = random_tensor(&[3, d], 1.0, &mut rng);
        let mask = Mask {
            rows: 3,
            cols: 4,
            allow: vec![true, true, false, false, true, true, true, false, true, true, true, true],
        };
        let rep = check(&[xq, xkv], 20, 1, |g, v| {
            let mut cx = Ctx::new(&store, &[] as &[RunningStats], Mode::Eval, RngState::new(0));
            let y = mha.forward(g, &mut cx, v[0], v[1], Some(&mask))?;
            let wc = g.constant(w.clone());
            let p = g.mul(y, wc)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{}", rep.max_rel_err);
    }

    fn rel_setup(seed: u64, d: usize, h: usize) -> (ParamStore, RelPositionAttention) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let att = RelPositionAttention::new(&mut store, &mut init, "rel", &cfg(d, h));
        for lin in [&att.wq, &att.wk] {
            store.get_mut(lin.b.unwrap()).value = init.uniform(&[d], 0.5);
        }
        (store, att)
    }

    fn rel_scores(store: &ParamStore, att: &RelPositionAttention, x: &Tensor) -> Vec<Tensor> {
        let mut g = Graph::new();
        let mut cx = Ctx::new(store, &[], Mode::Eval, RngState::new(0));
        let xv = g.constant(x.clone());
        let (s, _) = att.scores(&mut g, &mut cx, xv).unwrap();
        s.into_iter().map(|v| g.value(v).clone()).collect()
    }

    fn affine(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
        let w = &store.get(l.w).value;
        let (din, dout) = w.dims2().unwrap();
        (0..dout)
            .map(|j| {
                let b = l.b.map_or(0.0, |b| store.get(b).value.data()[j]);
                b + (0..din).map(|p| x[p] * w.at2(p, j)).sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn rel_scores_match_four_term_expansion() {
        let (d, h, t) = (4, 2, 3);
        let (store, att) = rel_setup(11, d, h);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let e = random_tensor(&[t, d], 1.0, &mut rng);
        let got = rel_scores(&store, &att, &e);
        let u = store.get(att.pos_bias_u).value.data();
        let v = store.get(att.pos_bias_v).value.data();
        let dk = d / h;
        for i in 0..t {
            let q = affine(&store, &att.wq, e.row(i));
            for l in 0..t {
                let k = affine(&store, &att.wk, e.row(l));
                let r = affine(&store, &att.wpos, &sinusoid(i as f64 - l as f64, d));
                for head in 0..h {
                    let cols = head * dk..(head + 1) * dk;
                    let dot = |a: &[f64], b: &[f64]| cols.clone().map(|c| a[c] * b[c]).sum::<f64>();
                    let want = dot(&q, &k) + dot(&q, &r) + dot(u, &k) + dot(v, &r);
                    assert!((got[head].at2(i, l) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rel_scores_shift_invariant_for_constant_rows() {
        let (d, t) = (8, 5);
        let (store, att) = rel_setup(13, d, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let row = random_tensor(&[1, d], 1.0, &mut rng).row(0).to_vec();
        let e = Tensor::from_rows(&vec![row; t]);
        for s in rel_scores(&store, &att, &e) {
            for i in 0..t - 1 {
                for l in 0..t - 1 {
                    assert!((s.at2(i, l) - s.at2(i + 1, l + 1)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rel_scores_without_position_terms_are_content_scores() {
        let (d, t) = (4, 4);
        let (mut store, att) = rel_setup(15, d, 1);
        store.get_mut(att.pos_bias_u).value = Tensor::zeros(&[d]);
        store.get_mut(att.pos_bias_v).value = Tensor::zeros(&[d]);
        store.get_mut(att.wpos.w).value = Tensor::zeros(&[d, d]);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let e = random_tensor(&[t, d], 1.0, &mut rng);
        let got = rel_scores(&store, &att, &e);
        for i in 0..t {
            let q = affine(&store, &att.wq, e.row(i));
            for l in 0..t {
                let k = affine(&store, &att.wk, e.row(l));
                let want: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                assert_eq!(got[0].at2(i, l), want);
            }
        }
    }

    #[test]
    fn rel_attention_gradient_check() {
        let (store, att) = rel_setup(17, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = random_tensor(&[3, 4], 1.0, &mut rng);
        let w = random_tensor(&[3, 4], 1.0, &mut rng);
        let rep = check(&[x], 20, 2, |g, v| {
            let mut cx = Ctx::new(&store, &[], Mode::Eval, RngState::new(0));
            let y = att.forward(g, &mut cx, v[0])?;
            let wc = g.constant(w.clone());
            let p = g.mul(y, wc)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{}", rep.max_rel_err);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn causal_output_ignores_future_rows(seed in 0u64..1000, t in 2usize..6, pick in 0usize..100) {
            let d = 4;
            let mut store = ParamStore::new();
            let mut init = Init::new(seed);
            let mha = MultiHeadAttention::new(&mut store, &mut init, "att", &cfg(d, 2));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&[t, d], 1.0, &mut rng);
            let changed_row = 1 + pick % (t - 1);
            let mut y = x.clone();
            for c in 0..d {
                y.data_mut()[changed_row * d + c] += 1.0 + c as f64;
            }
            let run = |input: &Tensor| {
                let mut g = Graph::new();
                let mut cx = Ctx::new(&store, &[], Mode::Eval, RngState::new(0));
                let v = g.constant(input.clone());
                let out = mha.forward(&mut g, &mut cx, v, v, Some(&Mask::causal(t))).unwrap();
                g.value(out).clone()
            };
            let (a, b) = (run(&x), run(&y));
            for r in 0..changed_row {
                proptest::prop_assert_eq!(a.row(r), b.row(r));
            }
        }
    }
}
