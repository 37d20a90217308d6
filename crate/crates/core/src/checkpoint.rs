//! Checkpoints: a one-line JSON manifest followed by little-endian `f32`
//! buffers for parameters, Adam moments and batch-norm running statistics.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{config_diff, RunConfig};
use crate::error::{Error, Result};
use crate::frontend::FEATURE_DIMS;
use crate::model::Model;
use crate::tensor::{RngState, Tensor};
use crate::training::{OptState, TrainState};

pub const CHECKPOINT_FORMAT: &str = "conformer-r-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub epoch: usize,
    pub opt_step: u64,
    pub rng: RngState,
    /// Buffers in file order.
    pub tensors: Vec<TensorEntry>,
}

fn entries(model: &Model) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    for prefix in ["param", "adam_m", "adam_v"] {
        for p in model.store.iter() {
            out.push(TensorEntry {
                name: format!("{}:{}", prefix, p.name),
                shape: p.value.shape().to_vec(),
            });
        }
    }
    for (i, rs) in model.running.iter().enumerate() {
        for kind in ["bn_mean", "bn_var"] {
            out.push(TensorEntry {
                name: format!("{}:{}", kind, i),
                shape: vec![rs.mean.len()],
            });
        }
    }
    out
}

/// Writes `model`, optimizer and RNG state. Values are stored as `f32`.
pub fn save(path: &Path, cfg: &RunConfig, model: &Model, state: &TrainState) -> Result<()> {
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        config_hash: cfg.hash(),
        config: cfg.identity(),
        epoch: state.epoch,
        opt_step: state.opt.step,
        rng: state.rng,
        tensors: entries(model),
    };
    let mut bytes = serde_json::to_vec(&manifest)?;
    bytes.push(b'\n');
    let mut push = |xs: &[f64]| {
        for &x in xs {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    for p in model.store.iter() {
        push(p.value.data());
    }
    for m in &state.opt.m {
        push(m);
    }
    for v in &state.opt.v {
        push(v);
    }
    for rs in &model.running {
        push(&rs.mean);
        push(&rs.var);
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads only the manifest line.
pub fn read_header(path: &Path) -> Result<CheckpointManifest> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    BufReader::new(f).read_line(&mut line).map_err(|e| Error::io(path, e))?;
    parse_manifest(line.trim_end(), path)
}

fn parse_manifest(line: &str, path: &Path) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = serde_json::from_str(line)
        .map_err(|e| Error::Data(format!("{}: bad checkpoint manifest: {}", path.display(), e)))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Data(format!("{}: unknown checkpoint format {:?}", path.display(), m.format)));
    }
    Ok(m)
}

/// A loaded checkpoint: rebuilt model, its run state and embedded configuration.
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: Model,
    pub state: TrainState,
}

/// Loads a checkpoint. With `expected` set, the configuration hash must match
/// unless `force` is given; a mismatch reports the differing fields.
pub fn load(path: &Path, expected: Option<&RunConfig>, force: bool) -> Result<Checkpoint> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let manifest = parse_manifest(line.trim_end(), path)?;
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Data(format!("{}: embedded configuration does not match its hash", path.display())));
    }
    if let Some(cfg) = expected {
        if cfg.hash() != manifest.config_hash && !force {
            let diff = config_diff(&manifest.config, &cfg.identity());
            return Err(Error::ConfigMismatch(diff.join("\n")));
        }
    }
    let mut body = Vec::new();
    reader.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;

    let cfg = &manifest.config;
    let mut model = Model::new(FEATURE_DIMS, &cfg.encoder, &cfg.decoder, cfg.vocab.clone(), cfg.seed)?;
    let want = entries(&model);
    if want != manifest.tensors {
        return Err(Error::Data(format!("{}: tensor layout does not match the configuration", path.display())));
    }
    let total: usize = want.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if body.len() != total * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes of tensor data, found {}",
            path.display(),
            total * 4,
            body.len()
        )));
    }
    let mut vals = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };

    for p in model.store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = Tensor::new(shape, take(p.value.len()))?;
    }
    let sizes: Vec<usize> = model.store.iter().map(|p| p.value.len()).collect();
    let m = sizes.iter().map(|&n| take(n)).collect();
    let v = sizes.iter().map(|&n| take(n)).collect();
    for rs in model.running.iter_mut() {
        rs.mean = take(rs.mean.len());
        rs.var = take(rs.var.len());
    }
    let state = TrainState {
        opt: OptState {
            m,
            v,
            step: manifest.opt_step,
        },
        rng: manifest.rng,
        epoch: manifest.epoch,
    };
    Ok(Checkpoint { manifest, model, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::snap_to_f32;
    use crate::vocab::Vocabulary;

    fn small_cfg() -> RunConfig {
        let mut c = RunConfig::desk(Vocabulary::new(vec!['a', 'b']).unwrap());
        c.encoder.d_model = 8;
        c.encoder.n_heads = 2;
        c.encoder.n_blocks = 1;
        c.encoder.subsample_channels = 2;
        c.decoder.d_model = 8;
        c.decoder.n_heads = 2;
        c.decoder.n_layers = 1;
        c
    }

    #[test]
    fn round_trip_after_snap_is_exact() {
        let cfg = small_cfg();
        let mut model = Model::new(FEATURE_DIMS, &cfg.encoder, &cfg.decoder, cfg.vocab.clone(), 3).unwrap();
        let mut opt = OptState::new(&model.store);
        opt.step = 5;
        for (i, m) in opt.m.iter_mut().enumerate() {
            m.iter_mut().enumerate().for_each(|(j, x)| *x = (i * 31 + j) as f64 * 1e-3);
        }
        model.running[0].mean[1] = 0.123456789;
        snap_to_f32(&mut model, &mut opt);
        let state = TrainState {
            opt,
            rng: RngState { seed: 9, counter: 17 },
            epoch: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut cfg_seeded = cfg.clone();
        cfg_seeded.seed = 3;
        save(&path, &cfg_seeded, &model, &state).unwrap();
        let ck = load(&path, Some(&cfg_seeded), false).unwrap();
        assert_eq!(ck.state, state);
        assert_eq!(ck.model.running, model.running);
        for (a, b) in ck.model.store.iter().zip(model.store.iter()) {
            assert_eq!(a.value, b.value);
        }
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.iter().filter(|&&b| b == b'\n').count() >= 1);
        assert_eq!(read_header(&path).unwrap().epoch, 2);
    }

    #[test]
    fn mismatch_is_refused_with_diff_unless_forced() {
        let cfg = small_cfg();
        let model = Model::new(FEATURE_DIMS, &cfg.encoder, &cfg.decoder, cfg.vocab.clone(), cfg.seed).unwrap();
        let state = TrainState {
            opt: OptState::new(&model.store),
            rng: RngState::new(1),
            epoch: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save(&path, &cfg, &model, &state).unwrap();
        let mut other = cfg.clone();
        other.loss.beta = 0.5;
        match load(&path, Some(&other), false) {
            Err(Error::ConfigMismatch(d)) => assert!(d.contains("loss.beta: 0.7 -> 0.5"), "{}", d),
            Err(e) => panic!("{}", e),
            Ok(_) => panic!("mismatch accepted"),
        }
        assert!(load(&path, Some(&other), true).is_ok());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let cfg = small_cfg();
        let model = Model::new(FEATURE_DIMS, &cfg.encoder, &cfg.decoder, cfg.vocab.clone(), cfg.seed).unwrap();
        let state = TrainState {
            opt: OptState::new(&model.store),
            rng: RngState::new(1),
            epoch: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save(&path, &cfg, &model, &state).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&path, None, false), Err(Error::Data(_))));
    }
}
