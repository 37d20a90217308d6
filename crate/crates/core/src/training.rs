//! Learning-rate schedule, Adam, frame-budget batching and the R-Drop training step.

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::subsampled_len;
use crate::error::{Error, Result};
use crate::losses::{
    aed_ce_loss, ctc_feasible, ctc_loss, kl_bidirectional, mean_of, rdrop_merge_ctc, total_loss, LossWeights,
};
use crate::metrics::{corpus_cer, CorpusReport};
use crate::model::Model;
use crate::nn::{Ctx, Mode, ParamStore, BN_MOMENTUM};
use crate::tensor::{BatchStats, Graph, RngState, Tensor};
use crate::vocab::BLANK_ID;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub k: f64,
    pub d_m: f64,
    pub warmup_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            k: 1.0,
            d_m: 64.0,
            warmup_steps: 200,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) {
            return Err(Error::config("schedule.k", "must be positive"));
        }
        if !(self.d_m > 0.0) {
            return Err(Error::config("schedule.d_m", "must be positive"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("schedule.warmup_steps", "must be positive"));
        }
        Ok(())
    }
}

/// `k · d_m^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::Dimension {
            op: "lr_at",
            msg: "steps are counted from 1".into(),
        });
    }
    let s = step as f64;
    let w = cfg.warmup_steps as f64;
    Ok(cfg.k * cfg.d_m.powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Adam moments, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        OptState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, opt: &mut OptState, lr: f64) -> Result<()> {
    if let Some(p) = store.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFiniteGradient(p.name.clone()));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (idx, p) in store.iter_mut().enumerate() {
        let (m, v) = (&mut opt.m[idx], &mut opt.v[idx]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = p.grad[j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchingConfig {
    /// Maximum summed feature frames per micro-batch.
    pub batch_bins: usize,
    /// Micro-batches per optimizer update.
    pub accum_steps: usize,
}

impl Default for BatchingConfig {
    fn default() -> Self {
        BatchingConfig {
            batch_bins: 4000,
            accum_steps: 1,
        }
    }
}

impl BatchingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_bins == 0 {
            return Err(Error::config("batching.batch_bins", "must be positive"));
        }
        if self.accum_steps == 0 {
            return Err(Error::config("batching.accum_steps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    /// Indices into the manifest.
    pub batches: Vec<Vec<usize>>,
    /// Utterances longer than the budget, each placed in its own batch.
    pub oversized: Vec<usize>,
}

/// Shuffles by `seed`, then fills batches greedily under the frame budget.
pub fn plan_batches(frames: &[usize], batch_bins: usize, seed: u64) -> Result<BatchPlan> {
    if frames.is_empty() {
        return Err(Error::Data("no utterances to batch".into()));
    }
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut rng = RngState::new(seed).next_stream();
    order.shuffle(&mut rng);
    let mut plan = BatchPlan {
        batches: Vec::new(),
        oversized: Vec::new(),
    };
    let mut cur = Vec::new();
    let mut used = 0;
    for i in order {
        let f = frames[i];
        if f > batch_bins {
            warn!("utterance {} has {} frames, above batch_bins {}", i, f, batch_bins);
            plan.oversized.push(i);
            plan.batches.push(vec![i]);
            continue;
        }
        if used + f > batch_bins && !cur.is_empty() {
            plan.batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += f;
    }
    if !cur.is_empty() {
        plan.batches.push(cur);
    }
    Ok(plan)
}

/// A featurized utterance with its transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub utt_id: String,
    pub text: String,
    pub feats: Tensor,
    /// Character ids, no blank or sos/eos.
    pub target: Vec<usize>,
}

/// Mean losses over the utterances of one micro-batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub loss: f64,
    pub ctc: f64,
    pub aed: f64,
    pub kl: f64,
    pub merge: f64,
    pub utts: usize,
    pub skipped: usize,
}

struct UttPass {
    losses: [f64; 5],
    grads: Vec<Option<Vec<f64>>>,
    bn: Vec<Option<BatchStats>>,
}

/// Whether the utterance survives subsampling with enough frames for its target.
pub fn trainable(ex: &Example) -> bool {
    let frames = ex.feats.dims2().map_or(0, |(t, _)| t);
    subsampled_len(frames).is_some_and(|t| ctc_feasible(t, &ex.target))
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

/// Forward and backward for one utterance through `branches` dropout copies.
/// With one branch the KL term is the constant zero and the step is a plain
/// hybrid CTC/attention step.
fn utterance_pass(
    model: &Model,
    ex: &Example,
    weights: &LossWeights,
    branches: usize,
    rng: RngState,
) -> Result<UttPass> {
    let mut g = Graph::new();
    let feats = g.constant(ex.feats.clone());
    let mut ctxs: Vec<Ctx> = (0..branches)
        .map(|b| Ctx::new(&model.store, &model.running, Mode::Train, rng.derive(b as u64)))
        .collect();
    let mut ctc = Vec::with_capacity(branches);
    let mut aed = Vec::with_capacity(branches);
    let mut ctc_logits = Vec::with_capacity(branches);
    let mut aed_target = ex.target.clone();
    aed_target.push(model.vocab.sos_eos_id());
    for cx in ctxs.iter_mut() {
        let out = model.forward(&mut g, cx, feats, &ex.target)?;
        ctc_logits.push(out.ctc_logits);
        ctc.push(ctc_loss(&mut g, out.ctc_logits, &ex.target, BLANK_ID)?);
        aed.push(aed_ce_loss(&mut g, out.aed_logits, &aed_target, weights.smoothing)?);
    }
    let l_merge = mean_of(&mut g, &ctc)?;
    let l_kl = match ctc_logits[..] {
        [a, b] => kl_bidirectional(&mut g, a, b)?,
        _ => g.constant(Tensor::scalar(0.0)),
    };
    let l_ctc = rdrop_merge_ctc(&mut g, l_merge, l_kl, weights.alpha)?;
    let l_aed = mean_of(&mut g, &aed)?;
    let loss = total_loss(&mut g, l_ctc, l_aed, weights.beta)?;
    g.backward(loss)?;

    let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
    for cx in &ctxs {
        for (slot, leaf) in grads.iter_mut().zip(cx.leaves()) {
            if let Some(gr) = leaf.and_then(|v| g.grad(v)) {
                add_into(slot, gr);
            }
        }
    }

    let mut bn: Vec<Option<BatchStats>> = vec![None; model.running.len()];
    for cx in &ctxs {
        for (layer, s) in &cx.bn_updates {
            match &mut bn[*layer] {
                Some(acc) => {
                    acc.mean.iter_mut().zip(&s.mean).for_each(|(a, b)| *a += b);
                    acc.var.iter_mut().zip(&s.var).for_each(|(a, b)| *a += b);
                }
                slot => *slot = Some(s.clone()),
            }
        }
    }
    let inv = 1.0 / branches as f64;
    for s in bn.iter_mut().flatten() {
        s.mean.iter_mut().chain(s.var.iter_mut()).for_each(|x| *x *= inv);
    }

    let v = |x| g.value(x).item();
    Ok(UttPass {
        losses: [v(loss), v(l_ctc), v(l_aed), v(l_kl), v(l_merge)],
        grads,
        bn,
    })
}

/// Gradients and statistics of one micro-batch, before any optimizer action.
#[derive(Clone, Debug)]
pub struct MicroBatch {
    pub losses: LossBreakdown,
    /// Mean gradient over trainable utterances, one buffer per parameter.
    pub grads: Vec<Vec<f64>>,
    /// Mean batch-norm statistics per layer, when the layer ran.
    pub bn: Vec<Option<BatchStats>>,
}

/// Runs the batch through `branches` copies (2 for R-Drop, 1 for the plain
/// step). Utterances are processed in parallel and reduced in batch order,
/// so the result does not depend on the thread count.
pub fn micro_batch(
    model: &Model,
    batch: &[&Example],
    weights: &LossWeights,
    branches: usize,
    rng: RngState,
) -> Result<MicroBatch> {
    let mut grads: Vec<Vec<f64>> = model.store.iter().map(|p| vec![0.0; p.value.len()]).collect();
    let mut bn_sum: Vec<Option<BatchStats>> = vec![None; model.running.len()];
    let mut bn_count = vec![0usize; model.running.len()];
    let mut sums = [0.0; 5];
    let mut used = 0usize;
    let mut skipped = 0usize;

    let items: Vec<(usize, &Example)> = batch.iter().copied().enumerate().filter(|(_, ex)| {
        let ok = trainable(ex);
        if !ok {
            warn!("skipping {}: too few frames for its transcript", ex.utt_id);
        }
        ok
    }).collect();
    skipped += batch.len() - items.len();

    let chunk = rayon::current_num_threads().max(1) * 2;
    for part in items.chunks(chunk) {
        let passes: Vec<Result<UttPass>> = part
            .par_iter()
            .map(|&(i, ex)| utterance_pass(model, ex, weights, branches, rng.derive(i as u64)))
            .collect();
        for pass in passes {
            let pass = pass?;
            used += 1;
            for (s, l) in sums.iter_mut().zip(pass.losses) {
                *s += l;
            }
            for (dst, src) in grads.iter_mut().zip(&pass.grads) {
                if let Some(src) = src {
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            for (layer, s) in pass.bn.into_iter().enumerate() {
                if let Some(s) = s {
                    bn_count[layer] += 1;
                    match &mut bn_sum[layer] {
                        Some(acc) => {
                            acc.mean.iter_mut().zip(&s.mean).for_each(|(a, b)| *a += b);
                            acc.var.iter_mut().zip(&s.var).for_each(|(a, b)| *a += b);
                        }
                        slot => *slot = Some(s),
                    }
                }
            }
        }
    }

    if used > 0 {
        let inv = 1.0 / used as f64;
        grads.iter_mut().flatten().for_each(|x| *x *= inv);
        sums.iter_mut().for_each(|x| *x *= inv);
    }
    for (s, &n) in bn_sum.iter_mut().zip(&bn_count) {
        if let Some(s) = s {
            let inv = 1.0 / n as f64;
            s.mean.iter_mut().chain(s.var.iter_mut()).for_each(|x| *x *= inv);
        }
    }
    Ok(MicroBatch {
        losses: LossBreakdown {
            loss: sums[0],
            ctc: sums[1],
            aed: sums[2],
            kl: sums[3],
            merge: sums[4],
            utts: used,
            skipped,
        },
        grads,
        bn: bn_sum,
    })
}

/// Adds a micro-batch's gradients scaled by `1/accum_steps` and folds its
/// batch-norm statistics into the running averages.
pub fn absorb(model: &mut Model, mb: &MicroBatch, accum_steps: usize) {
    let scale = 1.0 / accum_steps as f64;
    for (p, g) in model.store.iter_mut().zip(&mb.grads) {
        p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
    }
    for (rs, s) in model.running.iter_mut().zip(&mb.bn) {
        if let Some(s) = s {
            rs.update(s, BN_MOMENTUM);
        }
    }
}

/// Evaluation output for both decoding paths.
#[derive(Clone, Debug)]
pub struct EvalReport {
    /// `(utt_id, ctc hypothesis, attention hypothesis)` in input order.
    pub hyps: Vec<(String, String, String)>,
    pub ctc: CorpusReport,
    pub aed: CorpusReport,
}

/// Decodes every example in eval mode and scores both paths.
pub fn evaluate(model: &Model, examples: &[Example], max_len: usize) -> Result<EvalReport> {
    let hyps: Vec<(String, String, String)> = examples
        .par_iter()
        .map(|ex| {
            let (c, a) = model.transcribe(&ex.feats, max_len)?;
            Ok((ex.utt_id.clone(), c, a))
        })
        .collect::<Result<_>>()?;
    let pairs = |pick: fn(&(String, String, String)) -> &String| -> Vec<(String, String, String)> {
        examples
            .iter()
            .zip(&hyps)
            .map(|(ex, h)| (ex.utt_id.clone(), ex.text.clone(), pick(h).clone()))
            .collect()
    };
    let ctc = corpus_cer(&pairs(|h| &h.1))?;
    let aed = corpus_cer(&pairs(|h| &h.2))?;
    Ok(EvalReport { hyps, ctc, aed })
}

/// Snapshot of everything besides the model that a resumed run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub opt: OptState,
    pub rng: RngState,
    pub epoch: usize,
}

/// Rounds parameters, moments and running statistics through `f32` so that
/// a run resumed from a checkpoint continues from exactly the same state.
pub fn snap_to_f32(model: &mut Model, opt: &mut OptState) {
    let snap = |x: &mut f64| *x = *x as f32 as f64;
    for p in model.store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(snap);
    }
    for buf in opt.m.iter_mut().chain(opt.v.iter_mut()) {
        buf.iter_mut().for_each(snap);
    }
    for rs in model.running.iter_mut() {
        rs.mean.iter_mut().chain(rs.var.iter_mut()).for_each(snap);
    }
}
