//! Training objectives: CTC, symmetric KL between dropout branches, R-Drop
//! combinations, label-smoothed attention cross-entropy and the hybrid total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, log_sum_exp, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the KL term between dropout branches.
    pub alpha: f64,
    /// Weight of the attention-decoder loss against the CTC loss.
    pub beta: f64,
    pub smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.3,
            beta: 0.7,
            smoothing: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("loss.alpha", "must lie in [0, 1] for the convex merge"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("loss.beta", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config("loss.smoothing", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Number of adjacent equal labels; each needs a separating blank.
pub fn adjacent_repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Whether `frames` can emit `target` under CTC.
pub fn ctc_feasible(frames: usize, target: &[usize]) -> bool {
    frames >= target.len() + adjacent_repeats(target)
}

/// `-log P(target | logits)` for `[T × V]` logits. Forward and backward
/// recursions run in log space; the gradient enters the tape as a fused node.
pub fn ctc_loss(g: &mut Graph, logits: Var, target: &[usize], blank: usize) -> Result<Var> {
    let (t_len, v) = g.value(logits).dims2().ok_or_else(|| Error::Dimension {
        op: "ctc_loss",
        msg: format!("expected [T x V] logits, got {:?}", g.shape(logits)),
    })?;
    for (position, &id) in target.iter().enumerate() {
        if id >= v || id == blank {
            return Err(Error::Vocabulary { id, position, size: v });
        }
    }
    if t_len == 0 || !ctc_feasible(t_len, target) {
        return Err(Error::InfeasibleAlignment {
            frames: t_len,
            target_len: target.len(),
            repeats: adjacent_repeats(target),
        });
    }
    let lp = log_softmax_rows(g.value(logits).data(), v);
    let (loss, grad) = ctc_forward_backward(&lp, t_len, v, target, blank);
    g.fused_scalar(loss, &[logits], vec![grad])
}

/// Returns the loss and its gradient with respect to the logits.
fn ctc_forward_backward(lp: &[f64], t_len: usize, v: usize, target: &[usize], blank: usize) -> (f64, Vec<f64>) {
    const NEG: f64 = f64::NEG_INFINITY;
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &c in target {
        ext.push(c);
        ext.push(blank);
    }
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let emit = |t: usize, s: usize| lp[t * v + ext[s]];

    let mut alpha = vec![NEG; t_len * s_len];
    alpha[0] = emit(0, 0);
    if s_len > 1 {
        alpha[1] = emit(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_sum_exp(a, prev[s - 1]);
            }
            if skip(s) {
                a = log_sum_exp(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == NEG { NEG } else { a + emit(t, s) };
        }
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![NEG; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + emit(t + 1, s);
            if s + 1 < s_len {
                b = log_sum_exp(b, beta[next + s + 1] + emit(t + 1, s + 1));
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_sum_exp(b, beta[next + s + 2] + emit(t + 1, s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_sum_exp(log_p, alpha[last + s_len - 2]);
    }

    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        let mut occ = vec![NEG; v];
        for s in 0..s_len {
            let a = alpha[t * s_len + s] + beta[t * s_len + s];
            occ[ext[s]] = log_sum_exp(occ[ext[s]], a);
        }
        for j in 0..v {
            let y = lp[t * v + j].exp();
            let gamma = (occ[j] - log_p).exp();
            grad[t * v + j] = y - gamma;
        }
    }
    (-log_p, grad)
}

/// Per-frame symmetric KL `½[KL(P1‖P2) + KL(P2‖P1)]` between row-softmaxes,
/// averaged over frames.
pub fn kl_bidirectional(g: &mut Graph, z1: Var, z2: Var) -> Result<Var> {
    if g.shape(z1) != g.shape(z2) {
        return Err(Error::Shape {
            op: "kl_bidirectional",
            lhs: g.shape(z1).to_vec(),
            rhs: g.shape(z2).to_vec(),
        });
    }
    let (t, v) = g.value(z1).dims2().ok_or_else(|| Error::Dimension {
        op: "kl_bidirectional",
        msg: format!("expected [T x V] logits, got {:?}", g.shape(z1)),
    })?;
    let lp1 = log_softmax_rows(g.value(z1).data(), v);
    let lp2 = log_softmax_rows(g.value(z2).data(), v);
    let inv_t = 1.0 / t as f64;
    let mut total = 0.0;
    let mut g1 = vec![0.0; t * v];
    let mut g2 = vec![0.0; t * v];
    for f in 0..t {
        let row = f * v..(f + 1) * v;
        let p1: Vec<f64> = lp1[row.clone()].iter().map(|x| x.exp()).collect();
        let p2: Vec<f64> = lp2[row.clone()].iter().map(|x| x.exp()).collect();
        let d: Vec<f64> = lp1[row.clone()].iter().zip(&lp2[row]).map(|(a, b)| a - b).collect();
        let mut frame = 0.0;
        let (mut e1, mut e2) = (0.0, 0.0);
        for j in 0..v {
            frame += (p1[j] - p2[j]) * d[j];
            e1 += p1[j] * d[j];
            e2 += p2[j] * d[j];
        }
        total += 0.5 * frame;
        for j in 0..v {
            g1[f * v + j] = 0.5 * inv_t * (p1[j] * (d[j] - e1) + (p1[j] - p2[j]));
            g2[f * v + j] = 0.5 * inv_t * (p2[j] * (e2 - d[j]) + (p2[j] - p1[j]));
        }
    }
    g.fused_scalar(total * inv_t, &[z1, z2], vec![g1, g2])
}

/// Sum of both branches' CTC negative log-likelihoods.
pub fn rdrop_ce(g: &mut Graph, z1: Var, z2: Var, target: &[usize], blank: usize) -> Result<Var> {
    let a = ctc_loss(g, z1, target, blank)?;
    let b = ctc_loss(g, z2, target, blank)?;
    g.add(a, b)
}

fn weighted(g: &mut Graph, a: Var, wa: f64, b: Var, wb: f64) -> Result<Var> {
    let a = g.scale(a, wa);
    let b = g.scale(b, wb);
    g.add(a, b)
}

/// Convex R-Drop merge `(1-α)·L_merge + α·L_KL`.
pub fn rdrop_merge_ctc(g: &mut Graph, l_merge: Var, l_kl: Var, alpha: f64) -> Result<Var> {
    weighted(g, l_merge, 1.0 - alpha, l_kl, alpha)
}

/// Additive R-Drop form `L_CE + α·L_KL`.
pub fn rdrop_generic(g: &mut Graph, l_ce: Var, l_kl: Var, alpha: f64) -> Result<Var> {
    let k = g.scale(l_kl, alpha);
    g.add(l_ce, k)
}

/// Hybrid objective `(1-β)·L_CTC + β·L_AED`.
pub fn total_loss(g: &mut Graph, l_ctc: Var, l_aed: Var, beta: f64) -> Result<Var> {
    weighted(g, l_ctc, 1.0 - beta, l_aed, beta)
}

/// Mean of scalar losses.
pub fn mean_of(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let (first, rest) = parts.split_first().ok_or_else(|| Error::Dimension {
        op: "mean_of",
        msg: "no losses to average".into(),
    })?;
    let mut acc = *first;
    for &p in rest {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, 1.0 / parts.len() as f64))
}

/// Smoothed target rows: `1 - smoothing` on the label, the rest spread evenly.
pub fn smoothed_targets(target: &[usize], v: usize, smoothing: f64) -> Tensor {
    let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
    let mut data = vec![off; target.len() * v];
    for (i, &y) in target.iter().enumerate() {
        data[i * v + y] = 1.0 - smoothing;
    }
    Tensor::new(vec![target.len(), v], data).expect("consistent shape")
}

/// Label-smoothed cross-entropy of `[L × V]` decoder logits, averaged over positions.
pub fn aed_ce_loss(g: &mut Graph, logits: Var, target: &[usize], smoothing: f64) -> Result<Var> {
    let (l, v) = g.value(logits).dims2().ok_or_else(|| Error::Dimension {
        op: "aed_ce_loss",
        msg: format!("expected [L x V] logits, got {:?}", g.shape(logits)),
    })?;
    if l != target.len() || l == 0 {
        return Err(Error::Dimension {
            op: "aed_ce_loss",
            msg: format!("{} logit rows for {} target tokens", l, target.len()),
        });
    }
    if let Some((position, &id)) = target.iter().enumerate().find(|(_, &id)| id >= v) {
        return Err(Error::Vocabulary { id, position, size: v });
    }
    let lp = g.log_softmax(logits, 1)?;
    let q = g.constant(smoothed_targets(target, v, smoothing));
    let prod = g.mul(lp, q)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / l as f64))
}
