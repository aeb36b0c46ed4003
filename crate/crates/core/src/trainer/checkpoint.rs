//! Checkpoint container: versioned JSON manifest (config, vocabulary,
//! parameter registry) followed by little-endian f32 blocks in registry
//! order. Optimizer moments ride along as extra registry entries so an
//! interrupted run resumes bitwise identically.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::numerics::{Scalar, Tensor};
use crate::params::ParamStore;
use crate::pipeline::Pipeline;
use crate::seqmodel::Vocabulary;

use super::optim::AdamW;

const MAGIC: &[u8; 4] = b"HWC1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("registry mismatch: {0}")]
    Registry(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RegistryEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    Init,
    PhaseA,
    Joint,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainState {
    pub phase: TrainPhase,
    pub step: usize,
    pub has_optimizer: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: RunConfig,
    vocabulary: Vec<String>,
    registry: Vec<RegistryEntry>,
    train_state: TrainState,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub vocabulary: Vec<String>,
    pub registry: Vec<RegistryEntry>,
    pub params: Vec<Vec<f32>>,
    pub opt_m: Option<Vec<Vec<f32>>>,
    pub opt_v: Option<Vec<Vec<f32>>>,
    pub train_state: TrainState,
}

fn write_block(w: &mut impl Write, data: &[f32]) -> io::Result<()> {
    w.write_all(&(data.len() as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_block(r: &mut impl Read, expect: usize) -> Result<Vec<f32>, CheckpointError> {
    let mut lenb = [0u8; 4];
    r.read_exact(&mut lenb).map_err(|_| CheckpointError::Truncated)?;
    let n = u32::from_le_bytes(lenb) as usize;
    if n != expect {
        return Err(CheckpointError::Registry(format!("block of {n} floats, registry says {expect}")));
    }
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| CheckpointError::Truncated)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    store: &ParamStore<S>,
    config: &RunConfig,
    vocab: &Vocabulary,
    optimizer: Option<&AdamW<S>>,
    phase: TrainPhase,
    step: usize,
) -> Result<(), CheckpointError> {
    let registry: Vec<RegistryEntry> = store
        .iter()
        .map(|(_, e)| RegistryEntry { name: e.name.clone(), shape: e.tensor.shape().to_vec() })
        .collect();
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: config.clone(),
        vocabulary: vocab.words().to_vec(),
        registry,
        train_state: TrainState { phase, step, has_optimizer: optimizer.is_some() },
    };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let mbytes = serde_json::to_vec(&manifest)?;
    w.write_all(&(mbytes.len() as u32).to_le_bytes())?;
    w.write_all(&mbytes)?;
    for (_, e) in store.iter() {
        write_block(&mut w, &e.tensor.to_f32_vec())?;
    }
    if let Some(opt) = optimizer {
        for t in &opt.m {
            write_block(&mut w, &t.to_f32_vec())?;
        }
        for t in &opt.v {
            write_block(&mut w, &t.to_f32_vec())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::Truncated)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut lenb = [0u8; 4];
    r.read_exact(&mut lenb).map_err(|_| CheckpointError::Truncated)?;
    let mlen = u32::from_le_bytes(lenb) as usize;
    let mut mbytes = vec![0u8; mlen];
    r.read_exact(&mut mbytes).map_err(|_| CheckpointError::Truncated)?;
    let manifest: Manifest = serde_json::from_slice(&mbytes)?;
    if manifest.version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.version));
    }
    let mut params = Vec::with_capacity(manifest.registry.len());
    for e in &manifest.registry {
        params.push(read_block(&mut r, e.shape.iter().product())?);
    }
    let (opt_m, opt_v) = if manifest.train_state.has_optimizer {
        let mut m = Vec::with_capacity(manifest.registry.len());
        for e in &manifest.registry {
            m.push(read_block(&mut r, e.shape.iter().product())?);
        }
        let mut v = Vec::with_capacity(manifest.registry.len());
        for e in &manifest.registry {
            v.push(read_block(&mut r, e.shape.iter().product())?);
        }
        (Some(m), Some(v))
    } else {
        (None, None)
    };
    Ok(Checkpoint {
        config: manifest.config,
        vocabulary: manifest.vocabulary,
        registry: manifest.registry,
        params,
        opt_m,
        opt_v,
        train_state: manifest.train_state,
    })
}

/// Rebuild a pipeline (and optionally optimizer state) from a checkpoint.
pub fn restore_pipeline<S: Scalar>(ckpt: &Checkpoint) -> Result<(Pipeline<S>, Option<AdamW<S>>), CheckpointError> {
    let mut pipe = Pipeline::<S>::init(&ckpt.config);
    if pipe.vocab.words() != ckpt.vocabulary.as_slice() {
        return Err(CheckpointError::Registry("vocabulary mismatch".into()));
    }
    let names: Vec<String> = pipe.store.iter().map(|(_, e)| e.name.clone()).collect();
    if names.len() != ckpt.registry.len() {
        return Err(CheckpointError::Registry(format!(
            "{} parameters on disk, {} in the model",
            ckpt.registry.len(),
            names.len()
        )));
    }
    for (i, (re, name)) in ckpt.registry.iter().zip(names.iter()).enumerate() {
        if &re.name != name {
            return Err(CheckpointError::Registry(format!("entry {i}: {} vs {}", re.name, name)));
        }
        let id = pipe.store.lookup(name).expect("registered name");
        if pipe.store.tensor(id).shape() != re.shape.as_slice() {
            return Err(CheckpointError::Registry(format!(
                "{name}: shape {:?} on disk, {:?} in the model",
                re.shape,
                pipe.store.tensor(id).shape()
            )));
        }
        *pipe.store.tensor_mut(id) = Tensor::from_f32_slice(&re.shape, &ckpt.params[i]);
    }
    let opt = match (&ckpt.opt_m, &ckpt.opt_v) {
        (Some(m), Some(v)) => {
            let mut opt = AdamW::new(&pipe.store);
            for (i, re) in ckpt.registry.iter().enumerate() {
                opt.m[i] = Tensor::from_f32_slice(&re.shape, &m[i]);
                opt.v[i] = Tensor::from_f32_slice(&re.shape, &v[i]);
            }
            opt.step = ckpt.train_state.step;
            Some(opt)
        }
        _ => None,
    };
    Ok((pipe, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("dwm-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.bev = crate::config::BevConfig { w: 8, h: 8, c: 8 };
        cfg.model.width = 32;
        cfg.model.layers = 1;
        cfg.model.n_world_queries = 4;
        cfg.render.z = 4;
        cfg.render.c_prime = 4;
        cfg.train.seed = 11;
        cfg
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = small_cfg();
        let pipe = Pipeline::<f32>::init(&cfg);
        let p1 = tmp("a.ckpt");
        save_checkpoint(&p1, &pipe.store, &cfg, &pipe.vocab, None, TrainPhase::Init, 0).unwrap();
        let ck = load_checkpoint(&p1).unwrap();
        let (pipe2, _) = restore_pipeline::<f32>(&ck).unwrap();
        // parameters bitwise identical after the round trip
        for ((_, a), (_, b)) in pipe.store.iter().zip(pipe2.store.iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
        let p2 = tmp("b.ckpt");
        save_checkpoint(&p2, &pipe2.store, &cfg, &pipe2.vocab, None, TrainPhase::Init, 0).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let cfg = small_cfg();
        let pipe = Pipeline::<f32>::init(&cfg);
        let p = tmp("magic.ckpt");
        save_checkpoint(&p, &pipe.store, &cfg, &pipe.vocab, None, TrainPhase::Init, 0).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn edited_shape_is_a_registry_error() {
        let cfg = small_cfg();
        let pipe = Pipeline::<f32>::init(&cfg);
        let p = tmp("shape.ckpt");
        save_checkpoint(&p, &pipe.store, &cfg, &pipe.vocab, None, TrainPhase::Init, 0).unwrap();
        let mut ck = load_checkpoint(&p).unwrap();
        ck.registry[0].shape = vec![1, 2, 3];
        assert!(matches!(restore_pipeline::<f32>(&ck), Err(CheckpointError::Registry(_))));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let cfg = small_cfg();
        let pipe = Pipeline::<f32>::init(&cfg);
        let mut opt = AdamW::new(&pipe.store);
        opt.step = 17;
        opt.m[0].data_mut()[0] = 0.25;
        opt.v[3].data_mut()[1] = 0.5;
        let p = tmp("opt.ckpt");
        save_checkpoint(&p, &pipe.store, &cfg, &pipe.vocab, Some(&opt), TrainPhase::Joint, 17).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck.train_state, TrainState { phase: TrainPhase::Joint, step: 17, has_optimizer: true });
        let (_, opt2) = restore_pipeline::<f32>(&ck).unwrap();
        let opt2 = opt2.unwrap();
        assert_eq!(opt2.step, 17);
        assert_eq!(opt2.m[0].data()[0], 0.25);
        assert_eq!(opt2.v[3].data()[1], 0.5);
    }
}
