//! The epoch loop: batching, micro-batch steps, optimizer updates, metrics
//! log and per-epoch checkpoints with exact resume.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::frontend::FEATURE_DIMS;
use crate::model::Model;
use crate::tensor::RngState;
use crate::training::{
    absorb, adam_step, lr_at, micro_batch, plan_batches, snap_to_f32, Example, LossBreakdown, OptState,
    TrainState,
};

pub const METRICS_HEADER: &str = "step,lr,loss,loss_ctc,loss_aed,loss_kl,loss_merge";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{}.ckpt", epoch))
}

/// One metrics row: the global micro-batch index and the rate of the update
/// it feeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub losses: LossBreakdown,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!("{},{},{},{},{},{},{}\n", self.step, self.lr, l.loss, l.ctc, l.aed, l.kl, l.merge)
    }
}

/// Display-only exponential smoothing of the logged loss.
#[derive(Clone, Copy, Debug, Default)]
pub struct Smoother {
    value: Option<f64>,
}

impl Smoother {
    pub const FACTOR: f64 = 0.5;

    pub fn push(&mut self, x: f64) -> f64 {
        let v = match self.value {
            Some(prev) => Self::FACTOR * prev + (1.0 - Self::FACTOR) * x,
            None => x,
        };
        self.value = Some(v);
        v
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub state: TrainState,
    /// Per micro-batch log of this invocation (resumed runs start after the checkpoint).
    pub log: Vec<StepLog>,
}

fn keep_rows_through(csv: &str, step: u64) -> String {
    let mut out = format!("{}\n", METRICS_HEADER);
    for line in csv.lines().skip(1) {
        let s: Option<u64> = line.split(',').next().and_then(|x| x.parse().ok());
        if s.is_some_and(|s| s <= step) {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Trains for `cfg.epochs` epochs, writing `config.json`, `metrics.csv` and
/// `epoch_<k>.ckpt` under `out_dir`. With `resume`, continues from that
/// checkpoint's epoch and reproduces the uninterrupted run exactly.
pub fn train(cfg: &RunConfig, examples: &[Example], out_dir: &Path, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("no utterances".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.save(&out_dir.join(CONFIG_FILE))?;
    let metrics_path = out_dir.join(METRICS_FILE);

    let (mut model, mut state, mut csv) = match resume {
        Some(ck) => {
            if ck.manifest.config_hash != cfg.hash() {
                warn!("resuming from a checkpoint with a different configuration");
            }
            let old = std::fs::read_to_string(&metrics_path).unwrap_or_default();
            let csv = keep_rows_through(&old, ck.state.rng.counter);
            (ck.model, ck.state, csv)
        }
        None => {
            let mut model = Model::new(FEATURE_DIMS, &cfg.encoder, &cfg.decoder, cfg.vocab.clone(), cfg.seed)?;
            let mut opt = OptState::new(&model.store);
            snap_to_f32(&mut model, &mut opt);
            let state = TrainState {
                opt,
                rng: RngState::new(cfg.seed).derive(1),
                epoch: 0,
            };
            checkpoint::save(&checkpoint_path(out_dir, 0), cfg, &model, &state)?;
            (model, state, format!("{}\n", METRICS_HEADER))
        }
    };
    std::fs::write(&metrics_path, &csv).map_err(|e| Error::io(&metrics_path, e))?;

    let frames: Vec<usize> = examples.iter().map(|e| e.feats.dims2().map_or(0, |(t, _)| t)).collect();
    let branches = if cfg.rdrop { 2 } else { 1 };
    let accum = cfg.batching.accum_steps;
    let mut log = Vec::new();
    let mut smooth = Smoother::default();

    for epoch in state.epoch..cfg.epochs {
        let shuffle = RngState::new(cfg.seed).derive(2).derive(epoch as u64).seed;
        let plan = plan_batches(&frames, cfg.batching.batch_bins, shuffle)?;
        for &b in &plan.oversized {
            warn!("batch {} holds one utterance longer than batch_bins", b);
        }
        let mut pending = 0usize;
        let mut pending_frames = 0usize;
        let n_batches = plan.batches.len();
        for (bi, ids) in plan.batches.iter().enumerate() {
            let batch: Vec<&Example> = ids.iter().map(|&i| &examples[i]).collect();
            let mb_rng = state.rng.derive(state.rng.counter);
            state.rng.counter += 1;
            let mb = micro_batch(&model, &batch, &cfg.loss, branches, mb_rng)?;
            absorb(&mut model, &mb, accum);
            pending += 1;
            pending_frames += ids.iter().map(|&i| frames[i]).sum::<usize>();
            let lr = lr_at(state.opt.step + 1, &cfg.schedule)?;
            if pending == accum || bi + 1 == n_batches {
                adam_step(&mut model.store, &mut state.opt, lr)?;
                model.store.zero_grad();
                debug!("update {}: {} micro-batches, {} frames", state.opt.step, pending, pending_frames);
                pending = 0;
                pending_frames = 0;
            }
            let entry = StepLog {
                step: state.rng.counter,
                lr,
                losses: mb.losses,
            };
            csv.push_str(&entry.csv_row());
            let shown = smooth.push(entry.losses.loss);
            info!(
                "epoch {} step {} loss {:.4} (smoothed {:.4}) ctc {:.4} aed {:.4} kl {:.5} skipped {}",
                epoch + 1,
                entry.step,
                entry.losses.loss,
                shown,
                entry.losses.ctc,
                entry.losses.aed,
                entry.losses.kl,
                entry.losses.skipped
            );
            log.push(entry);
        }
        snap_to_f32(&mut model, &mut state.opt);
        state.epoch = epoch + 1;
        if state.epoch % cfg.checkpoint_every == 0 || state.epoch == cfg.epochs {
            checkpoint::save(&checkpoint_path(out_dir, state.epoch), cfg, &model, &state)?;
        }
        std::fs::write(&metrics_path, &csv).map_err(|e| Error::io(&metrics_path, e))?;
    }
    Ok(TrainOutcome { model, state, log })
}

/// Writes `hyp_ctc.txt`, `hyp_aed.txt`, `cer_ctc.csv` and `cer_aed.csv`.
pub fn write_eval_report(out_dir: &Path, report: &crate::training::EvalReport) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut ctc = String::new();
    let mut aed = String::new();
    for (id, c, a) in &report.hyps {
        writeln!(ctc, "{} {}", id, c).expect("string write");
        writeln!(aed, "{} {}", id, a).expect("string write");
    }
    let files = [
        ("hyp_ctc.txt", ctc),
        ("hyp_aed.txt", aed),
        ("cer_ctc.csv", report.ctc.to_csv()),
        ("cer_aed.csv", report.aed.to_csv()),
    ];
    for (name, body) in files {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
