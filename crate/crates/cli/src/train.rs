//! Training loops with loss curves, validation losses and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use posekit_core::corrnet::{
    hybrid_loss, input_features, CorrNetModel, CorrNetSample, CorrNetTrainer,
};
use posekit_core::datagen::{gt_stack, LabeledPool};
use posekit_core::pgm::{crop_sample, pgm_eval_loss, PgmModel, PgmSample, PgmTrainer};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataset::Split;
use crate::npk;

/// Grouping-network examples for the first `limit` scenes (0 = all).
pub fn pgm_samples(split: &Split, cfg: &RunConfig, limit: usize) -> Result<Vec<PgmSample>> {
    let n = if limit == 0 { split.len() } else { limit.min(split.len()) };
    (0..n)
        .into_par_iter()
        .map(|i| {
            let rec = &split.records[i];
            let merged = split.stack(i)?;
            let gt = gt_stack(&rec.gt_projections()?, rec.width, rec.height, cfg.scenario.gt_sigma);
            Ok(crop_sample(&merged, &gt, cfg.pgm.resolution)?.0)
        })
        .collect()
}

/// Correspondence-network examples for the first `limit` pools (0 = all).
pub fn corrnet_samples(split: &Split, limit: usize) -> Result<Vec<CorrNetSample>> {
    let pools = split.pools()?;
    let n = if limit == 0 { split.len() } else { limit.min(split.len()) };
    split.records[..n]
        .iter()
        .zip(pools)
        .map(|(rec, pool)| samples_from_pool(pool, rec.k, rec.corners()?.diameter()))
        .collect()
}

fn samples_from_pool(
    pool: LabeledPool,
    k: posekit_core::CameraIntrinsics,
    diameter: f64,
) -> Result<CorrNetSample> {
    Ok(CorrNetSample {
        corrs: pool.corrs,
        labels: pool.labels,
        k,
        diameter,
    })
}

/// Mean hybrid loss over `data` with the given loss weights.
pub fn corrnet_eval_loss(model: &CorrNetModel, data: &[CorrNetSample], alpha: f64, beta: f64) -> Result<f64> {
    anyhow::ensure!(!data.is_empty(), "no validation pools");
    let losses = data
        .par_iter()
        .map(|s| {
            let (logits, _) = model.logits(&input_features(&s.corrs, &s.k, s.diameter))?;
            Ok(hybrid_loss(&logits, &s.corrs, &s.labels, alpha, beta).total)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / data.len() as f64)
}

/// Where a training run writes its files.
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub model: PathBuf,
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
}

impl TrainPaths {
    pub fn new(out: &Path, kind: &str) -> TrainPaths {
        TrainPaths {
            model: out.join(format!("{kind}.npk")),
            checkpoint: out.join(format!("{kind}.ckpt")),
            curve: out.join(format!("{kind}_curve.csv")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Curve rows kept from an interrupted run: header plus the rows of epochs
/// before `epoch`.
fn resumed_curve(path: &Path, header: &str, epoch: usize) -> Result<Vec<String>> {
    let mut rows = vec![header.to_string()];
    if epoch == 0 {
        return Ok(rows);
    }
    let text = fs::read_to_string(path).with_context(|| format!("resuming needs {}", path.display()))?;
    rows.extend(
        text.lines()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < epoch))
            .map(String::from),
    );
    Ok(rows)
}

fn write_curve(path: &Path, rows: &[String]) -> Result<()> {
    fs::write(path, rows.join("\n") + "\n").with_context(|| format!("writing {}", path.display()))
}

const PGM_CURVE_HEADER: &str = "epoch,step,train_loss,val_loss";
const CORRNET_CURVE_HEADER: &str = "epoch,step,train_loss,classification,geometric,geometric_fraction,accuracy,val_loss";

/// Trains the grouping network, checkpointing after every epoch. With
/// `resume`, continues from the checkpoint if there is one.
pub fn train_pgm(
    cfg: &RunConfig,
    train: &[PgmSample],
    val: &[PgmSample],
    paths: &TrainPaths,
    resume: bool,
    mut report: impl FnMut(&str),
) -> Result<(PgmModel, TrainSummary)> {
    let params = cfg.pgm_train_params();
    let mut t = if resume && paths.checkpoint.exists() {
        let t = npk::load_pgm_checkpoint(&paths.checkpoint, params)?;
        anyhow::ensure!(t.model.config == cfg.pgm, "checkpoint holds a different network ({})", t.model.config);
        report(&format!("resuming {} at epoch {}", t.model.config, t.epoch));
        t
    } else {
        PgmTrainer::new(cfg.pgm, params)?
    };
    let mut rows = resumed_curve(&paths.curve, PGM_CURVE_HEADER, t.epoch)?;
    let mut summary = TrainSummary {
        epochs: t.epoch,
        train_loss: f64::NAN,
        val_loss: f64::NAN,
    };
    while t.epoch < params.epochs {
        let log = t.train_epoch(train)?;
        let val_loss = if val.is_empty() { f64::NAN } else { pgm_eval_loss(&t.model, val)? };
        rows.push(format!("{},{},{},{}", log.epoch, log.step, log.train_loss, val_loss));
        write_curve(&paths.curve, &rows)?;
        npk::save_pgm_checkpoint(&paths.checkpoint, &t)?;
        report(&format!(
            "{} epoch {}: train loss {:.5}, val loss {:.5}",
            t.model.config, log.epoch, log.train_loss, val_loss
        ));
        summary = TrainSummary {
            epochs: t.epoch,
            train_loss: log.train_loss,
            val_loss,
        };
    }
    write_curve(&paths.curve, &rows)?;
    npk::save_pgm(&paths.model, &t.model)?;
    Ok((t.model, summary))
}

/// Trains the correspondence network, checkpointing after every epoch.
pub fn train_corrnet(
    cfg: &RunConfig,
    train: &[CorrNetSample],
    val: &[CorrNetSample],
    paths: &TrainPaths,
    resume: bool,
    mut report: impl FnMut(&str),
) -> Result<(CorrNetModel, TrainSummary)> {
    let params = cfg.corrnet_train_params();
    let mut t = if resume && paths.checkpoint.exists() {
        let t = npk::load_corrnet_checkpoint(&paths.checkpoint, params)?;
        anyhow::ensure!(t.model.config == cfg.corrnet, "checkpoint holds a different network");
        report(&format!("resuming correspondence network at epoch {}", t.epoch));
        t
    } else {
        CorrNetTrainer::new(cfg.corrnet, params)?
    };
    let mut rows = resumed_curve(&paths.curve, CORRNET_CURVE_HEADER, t.epoch)?;
    let mut summary = TrainSummary {
        epochs: t.epoch,
        train_loss: f64::NAN,
        val_loss: f64::NAN,
    };
    while t.epoch < params.epochs {
        let log = t.train_epoch(train)?;
        let val_loss = if val.is_empty() {
            f64::NAN
        } else {
            corrnet_eval_loss(&t.model, val, params.alpha, params.beta)?
        };
        rows.push(format!(
            "{},{},{},{},{},{},{},{}",
            log.epoch,
            log.step,
            log.loss,
            log.classification,
            log.geometric,
            log.geometric_fraction,
            log.accuracy,
            val_loss
        ));
        write_curve(&paths.curve, &rows)?;
        npk::save_corrnet_checkpoint(&paths.checkpoint, &t)?;
        report(&format!(
            "correspondence epoch {}: loss {:.5} (cla {:.5}, geo {:.3} on {:.0}%), accuracy {:.4}, val loss {:.5}",
            log.epoch,
            log.loss,
            log.classification,
            log.geometric,
            100.0 * log.geometric_fraction,
            log.accuracy,
            val_loss
        ));
        summary = TrainSummary {
            epochs: t.epoch,
            train_loss: log.loss,
            val_loss,
        };
    }
    write_curve(&paths.curve, &rows)?;
    npk::save_corrnet(&paths.model, &t.model)?;
    Ok((t.model, summary))
}
