use std::collections::HashMap;
use std::path::{Path, PathBuf};

use conformer_r::checkpoint;
use conformer_r::config::RunConfig;
use conformer_r::frontend::{compute_fbank, load_pcm_wav, write_features, FrontendConfig};
use conformer_r::manifest::{read_text_map, Manifest, ManifestRow};
use conformer_r::metrics::corpus_cer;
use conformer_r::synth::{write_corpus, SynthConfig};
use conformer_r::trainer::{checkpoint_path, train, write_eval_report};
use conformer_r::training::evaluate;
use conformer_r::vocab::Vocabulary;
use conformer_r::{Error, Result};
use log::{error, info};
use rayon::prelude::*;

use crate::{Cli, Command};

pub fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Command::Featurize { manifest } => featurize(&cli, manifest),
        Command::Synth {
            n_utts,
            vocab_size,
            min_len,
            max_len,
            noise_std,
            prefix,
        } => {
            let cfg = SynthConfig {
                n_utts: *n_utts,
                vocab_size: *vocab_size,
                min_len: *min_len,
                max_len: *max_len,
                seed: cli.seed.unwrap_or(1),
                noise_std: *noise_std,
                utt_prefix: prefix.clone(),
                ..SynthConfig::default()
            };
            let out = require_out(&cli)?;
            let rows = write_corpus(&cfg, &out)?;
            info!("wrote {} utterances to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Train { manifest, epochs } => cmd_train(&cli, manifest, *epochs),
        Command::Eval { checkpoint, manifest } => cmd_eval(&cli, checkpoint, manifest),
        Command::Score { reference, hyp } => score(&cli, reference, hyp),
    }
}

fn require_out(cli: &Cli) -> Result<PathBuf> {
    cli.out.clone().ok_or_else(|| Error::config("--out", "required for this command"))
}

fn frontend(cli: &Cli) -> Result<FrontendConfig> {
    match &cli.config {
        Some(p) => Ok(RunConfig::load(p)?.frontend),
        None => Ok(FrontendConfig::default()),
    }
}

fn featurize(cli: &Cli, manifest: &Path) -> Result<()> {
    let out = require_out(cli)?;
    let fe = frontend(cli)?;
    let m = Manifest::read(manifest)?;
    if m.rows.is_empty() {
        return Err(Error::Data("no utterances".into()));
    }
    let feat_dir = out.join("feats");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let results: Vec<Result<ManifestRow>> = m
        .rows
        .par_iter()
        .map(|r| {
            let (samples, _) = load_pcm_wav(&m.resolve(r), fe.sample_rate_hz)?;
            let mut f = compute_fbank(&samples, &fe)?;
            f.utt_id = r.utt_id.clone();
            let rel = format!("feats/{}.fbk", r.utt_id);
            write_features(&out.join(&rel), &f)?;
            Ok(ManifestRow {
                utt_id: r.utt_id.clone(),
                path: rel,
                text: r.text.clone(),
                frames: Some(f.frames),
            })
        })
        .collect();
    let mut rows = Vec::new();
    let mut failed = 0;
    for (r, res) in m.rows.iter().zip(results) {
        match res {
            Ok(row) => rows.push(row),
            Err(e) => {
                error!("{}: {}", r.utt_id, e);
                failed += 1;
            }
        }
    }
    Manifest::write(&out.join("manifest.jsonl"), &rows)?;
    info!("featurized {} of {} utterances", rows.len(), m.rows.len());
    if failed > 0 {
        return Err(Error::Data(format!("{} of {} utterances failed", failed, m.rows.len())));
    }
    Ok(())
}

fn cmd_train(cli: &Cli, manifest: &Path, epochs: Option<usize>) -> Result<()> {
    let m = Manifest::read(manifest)?;
    let resume = cli.resume.as_deref().map(checkpoint::read_header).transpose()?;
    let mut cfg = match (&cli.config, &resume) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(h)) => {
            let mut c = h.config.clone();
            c.epochs = h.epoch;
            c
        }
        (None, None) => RunConfig::desk(Vocabulary::from_texts(m.rows.iter().map(|r| r.text.as_str()))?),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    match (&cli.out, &cli.resume) {
        (Some(o), _) => cfg.out_dir = o.display().to_string(),
        (None, Some(r)) if cfg.out_dir.is_empty() => {
            cfg.out_dir = r.parent().unwrap_or(Path::new(".")).display().to_string();
        }
        _ => {}
    }
    cfg.validate()?;
    let ck = match &cli.resume {
        Some(p) => Some(checkpoint::load(p, Some(&cfg), cli.force)?),
        None => None,
    };
    let examples = m.load_examples(&cfg.vocab, &cfg.frontend)?;
    let out = PathBuf::from(&cfg.out_dir);
    let res = train(&cfg, &examples, &out, ck)?;
    info!(
        "finished epoch {} after {} optimizer steps; last checkpoint {}",
        res.state.epoch,
        res.state.opt.step,
        checkpoint_path(&out, res.state.epoch).display()
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, ckpt: &Path, manifest: &Path) -> Result<()> {
    let expected = cli.config.as_deref().map(RunConfig::load).transpose()?;
    let ck = checkpoint::load(ckpt, expected.as_ref(), cli.force)?;
    let cfg = &ck.manifest.config;
    let m = Manifest::read(manifest)?;
    let examples = m.load_examples(&cfg.vocab, &cfg.frontend)?;
    let report = evaluate(&ck.model, &examples, cfg.max_decode_len)?;
    let out = match &cli.out {
        Some(o) => o.clone(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join("eval"),
    };
    write_eval_report(&out, &report)?;
    println!("ctc cer {}", report.ctc.cer());
    println!("aed cer {}", report.aed.cer());
    Ok(())
}

fn score(cli: &Cli, reference: &Path, hyp: &Path) -> Result<()> {
    let refs = read_text_map(reference)?;
    let hyps: HashMap<String, String> = read_text_map(hyp)?.into_iter().collect();
    let triples: Vec<(String, String, String)> = refs
        .iter()
        .map(|(id, r)| (id.clone(), r.clone(), hyps.get(id).cloned().unwrap_or_default()))
        .collect();
    let report = corpus_cer(&triples)?;
    let csv = report.to_csv();
    match &cli.out {
        Some(o) => {
            std::fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
            let p = o.join("cer.csv");
            std::fs::write(&p, &csv).map_err(|e| Error::io(&p, e))?;
            println!("cer {}", report.cer());
        }
        None => print!("{}", csv),
    }
    let known: std::collections::HashSet<&str> = refs.iter().map(|(id, _)| id.as_str()).collect();
    let mut extra: Vec<&String> = hyps.keys().filter(|k| !known.contains(k.as_str())).collect();
    if !extra.is_empty() {
        extra.sort();
        let list: Vec<&str> = extra.iter().map(|s| s.as_str()).collect();
        return Err(Error::Data(format!("hypotheses without a reference: {}", list.join(", "))));
    }
    Ok(())
}
