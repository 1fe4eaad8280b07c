//! `NPK1` network parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NPK1"  u32 version
//! u32 len, kind tag (UTF-8)
//! u32 len, config block (UTF-8 `key=value` lines)
//! u32 tensor count
//! per tensor: u32 len, name; u32 rank; rank × u32 dims; f64 values
//! ```
//!
//! Training checkpoints use the same container with a `-checkpoint` kind,
//! the optimizer state as extra `adam.m.*` / `adam.v.*` tensors and the
//! epoch and step counters in the config block.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use posekit_core::corrnet::{CorrNetConfig, CorrNetModel, CorrNetTrainParams, CorrNetTrainer};
use posekit_core::nnet::{Adam, ParamTensor, Parameterized};
use posekit_core::pgm::{PgmConfig, PgmModel, PgmTrainParams, PgmTrainer};

const MAGIC: &[u8; 4] = b"NPK1";
pub const VERSION: u32 = 1;

pub const KIND_PGM: &str = "pgm";
pub const KIND_CORRNET: &str = "corrnet";
pub const KIND_PGM_CHECKPOINT: &str = "pgm-checkpoint";
pub const KIND_CORRNET_CHECKPOINT: &str = "corrnet-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParamsFile {
    pub kind: String,
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

fn write_u32(w: &mut impl Write, x: usize) -> Result<()> {
    let x = u32::try_from(x).context("value does not fit the container's u32 field")?;
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).context("truncated parameter file")?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)?;
    ensure!(n <= 1 << 20, "implausible string length {n}");
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).context("truncated parameter file")?;
    String::from_utf8(b).context("string field is not UTF-8")
}

impl NetParamsFile {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, VERSION as usize)?;
        write_str(w, &self.kind)?;
        let block: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        write_str(w, &block)?;
        write_u32(w, self.tensors.len())?;
        for t in &self.tensors {
            ensure!(
                t.shape.iter().product::<usize>() == t.values.len(),
                "tensor {} has {} values for shape {:?}",
                t.name,
                t.values.len(),
                t.shape
            );
            write_str(w, &t.name)?;
            write_u32(w, t.shape.len())?;
            for d in &t.shape {
                write_u32(w, *d)?;
            }
            let mut buf = Vec::with_capacity(t.values.len() * 8);
            for v in &t.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<NetParamsFile> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).context("truncated parameter file")?;
        ensure!(&magic == MAGIC, "not a parameter file (magic {magic:?})");
        let version = read_u32(r)?;
        ensure!(version == VERSION as usize, "unsupported parameter file version {version}");
        let kind = read_str(r)?;
        let mut config = BTreeMap::new();
        for line in read_str(r)?.lines() {
            let (k, v) = line.split_once('=').context("malformed config block")?;
            config.insert(k.to_string(), v.to_string());
        }
        let count = read_u32(r)?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = read_str(r)?;
            let rank = read_u32(r)?;
            ensure!(rank <= 8, "tensor {name} has implausible rank {rank}");
            let shape = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .filter(|n| *n <= 1 << 30)
                .with_context(|| format!("tensor {name} has implausible shape {shape:?}"))?;
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).context("truncated parameter file")?;
            let values = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Tensor { name, shape, values });
        }
        Ok(NetParamsFile { kind, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NetParamsFile> {
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        NetParamsFile::read_from(&mut BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            bail!("parameter file holds a `{}` model, expected `{kind}`", self.kind);
        }
        Ok(())
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .config
            .get(key)
            .with_context(|| format!("config block lacks `{key}`"))?;
        v.parse().ok().with_context(|| format!("bad `{key}` value {v:?}"))
    }
}

fn tensors_of(model: &impl Parameterized) -> Vec<Tensor> {
    model
        .params()
        .into_iter()
        .map(|p| Tensor {
            name: p.name.clone(),
            shape: p.shape.clone(),
            values: p.value.clone(),
        })
        .collect()
}

fn param_tensors(tensors: &[Tensor]) -> Vec<ParamTensor> {
    tensors
        .iter()
        .map(|t| {
            let mut p = ParamTensor::zeros(t.name.clone(), &t.shape);
            p.value.clone_from(&t.values);
            p
        })
        .collect()
}

fn pgm_block(c: &PgmConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("layers".into(), c.layers.to_string()),
        ("hidden".into(), c.hidden.to_string()),
        ("shortcut".into(), c.shortcut.to_string()),
        ("dropout".into(), c.dropout.to_string()),
        ("resolution_w".into(), c.resolution.0.to_string()),
        ("resolution_h".into(), c.resolution.1.to_string()),
    ])
}

fn pgm_config(f: &NetParamsFile) -> Result<PgmConfig> {
    Ok(PgmConfig {
        layers: f.get("layers")?,
        hidden: f.get("hidden")?,
        shortcut: f.get("shortcut")?,
        dropout: f.get("dropout")?,
        resolution: (f.get("resolution_w")?, f.get("resolution_h")?),
    })
}

fn corrnet_block(c: &CorrNetConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("width".into(), c.width.to_string()),
        ("blocks".into(), c.blocks.to_string()),
    ])
}

fn corrnet_config(f: &NetParamsFile) -> Result<CorrNetConfig> {
    Ok(CorrNetConfig {
        width: f.get("width")?,
        blocks: f.get("blocks")?,
    })
}

pub fn pgm_file(model: &PgmModel) -> NetParamsFile {
    NetParamsFile {
        kind: KIND_PGM.into(),
        config: pgm_block(&model.config),
        tensors: tensors_of(model),
    }
}

pub fn pgm_from_file(f: &NetParamsFile) -> Result<PgmModel> {
    f.expect_kind(KIND_PGM)?;
    Ok(PgmModel::from_tensors(pgm_config(f)?, param_tensors(&f.tensors))?)
}

pub fn corrnet_file(model: &CorrNetModel) -> NetParamsFile {
    NetParamsFile {
        kind: KIND_CORRNET.into(),
        config: corrnet_block(&model.config),
        tensors: tensors_of(model),
    }
}

pub fn corrnet_from_file(f: &NetParamsFile) -> Result<CorrNetModel> {
    f.expect_kind(KIND_CORRNET)?;
    Ok(CorrNetModel::from_tensors(corrnet_config(f)?, param_tensors(&f.tensors))?)
}

pub fn save_pgm(path: &Path, model: &PgmModel) -> Result<()> {
    pgm_file(model).save(path)
}

pub fn load_pgm(path: &Path) -> Result<PgmModel> {
    pgm_from_file(&NetParamsFile::load(path)?).with_context(|| format!("loading {}", path.display()))
}

pub fn save_corrnet(path: &Path, model: &CorrNetModel) -> Result<()> {
    corrnet_file(model).save(path)
}

pub fn load_corrnet(path: &Path) -> Result<CorrNetModel> {
    corrnet_from_file(&NetParamsFile::load(path)?).with_context(|| format!("loading {}", path.display()))
}

/// Model tensors followed by the Adam moments under `adam.m.` / `adam.v.`.
fn optimizer_tensors(model: &impl Parameterized, opt: &Adam) -> Vec<Tensor> {
    let mut out = tensors_of(model);
    if !opt.m.is_empty() {
        for (prefix, moments) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
            for (p, m) in model.params().into_iter().zip(moments) {
                out.push(Tensor {
                    name: format!("{prefix}{}", p.name),
                    shape: p.shape.clone(),
                    values: m.clone(),
                });
            }
        }
    }
    out
}

/// Splits checkpoint tensors back into model tensors and an optimizer.
fn split_optimizer(f: &NetParamsFile, lr: f64) -> Result<(Vec<ParamTensor>, Adam)> {
    let model: Vec<Tensor> = f.tensors.iter().filter(|t| !t.name.starts_with("adam.")).cloned().collect();
    let mut opt = Adam::new(lr);
    opt.step = f.get("step")?;
    let moments = |prefix: &str| -> Vec<Vec<f64>> {
        f.tensors
            .iter()
            .filter(|t| t.name.starts_with(prefix))
            .map(|t| t.values.clone())
            .collect()
    };
    opt.m = moments("adam.m.");
    opt.v = moments("adam.v.");
    ensure!(
        opt.m.is_empty() || (opt.m.len() == model.len() && opt.v.len() == model.len()),
        "checkpoint optimizer state does not match the model"
    );
    Ok((param_tensors(&model), opt))
}

fn train_block(epoch: usize, step: u64, seed: u64, batch: usize, lr: f64) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("epoch".into(), epoch.to_string()),
        ("step".into(), step.to_string()),
        ("seed".into(), seed.to_string()),
        ("batch".into(), batch.to_string()),
        ("lr".into(), lr.to_string()),
    ])
}

/// Refuses to resume under different optimization settings.
fn check_resume(f: &NetParamsFile, seed: u64, batch: usize, lr: f64) -> Result<()> {
    let (s, b, l): (u64, usize, f64) = (f.get("seed")?, f.get("batch")?, f.get("lr")?);
    ensure!(
        s == seed && b == batch && l == lr,
        "checkpoint was written with seed {s}, batch {b}, lr {l}; current run uses seed {seed}, batch {batch}, lr {lr}"
    );
    Ok(())
}

pub fn save_pgm_checkpoint(path: &Path, t: &PgmTrainer) -> Result<()> {
    let mut config = pgm_block(&t.model.config);
    config.extend(train_block(
        t.epoch,
        t.opt.step,
        t.params.seed,
        t.params.batch_size,
        t.params.learning_rate,
    ));
    NetParamsFile {
        kind: KIND_PGM_CHECKPOINT.into(),
        config,
        tensors: optimizer_tensors(&t.model, &t.opt),
    }
    .save(path)
}

pub fn load_pgm_checkpoint(path: &Path, params: PgmTrainParams) -> Result<PgmTrainer> {
    let f = NetParamsFile::load(path)?;
    f.expect_kind(KIND_PGM_CHECKPOINT)?;
    check_resume(&f, params.seed, params.batch_size, params.learning_rate)?;
    let (tensors, opt) = split_optimizer(&f, params.learning_rate)?;
    Ok(PgmTrainer {
        model: PgmModel::from_tensors(pgm_config(&f)?, tensors)?,
        opt,
        params,
        epoch: f.get("epoch")?,
    })
}

pub fn save_corrnet_checkpoint(path: &Path, t: &CorrNetTrainer) -> Result<()> {
    let mut config = corrnet_block(&t.model.config);
    config.extend(train_block(
        t.epoch,
        t.opt.step,
        t.params.seed,
        t.params.batch_size,
        t.params.learning_rate,
    ));
    NetParamsFile {
        kind: KIND_CORRNET_CHECKPOINT.into(),
        config,
        tensors: optimizer_tensors(&t.model, &t.opt),
    }
    .save(path)
}

pub fn load_corrnet_checkpoint(path: &Path, params: CorrNetTrainParams) -> Result<CorrNetTrainer> {
    let f = NetParamsFile::load(path)?;
    f.expect_kind(KIND_CORRNET_CHECKPOINT)?;
    check_resume(&f, params.seed, params.batch_size, params.learning_rate)?;
    let (tensors, opt) = split_optimizer(&f, params.learning_rate)?;
    Ok(CorrNetTrainer {
        model: CorrNetModel::from_tensors(corrnet_config(&f)?, tensors)?,
        opt,
        params,
        epoch: f.get("epoch")?,
    })
}
