//! Grouping-network architecture sweep scored by false projection
//! selections against the per-channel argmax baseline.

use anyhow::Result;
use posekit_core::heatmap::{fps_count, max_grouping, Selection, DEFAULT_CLUSTER_RADIUS};
use posekit_core::pgm::{PgmConfig, PgmModel, PgmSample, PgmTrainer};
use posekit_core::pipeline::{group, Grouping};
use posekit_core::{HeatmapStack, Vec2, NUM_CHANNELS};
use rayon::prelude::*;

use crate::config::RunConfig;

/// One network of the sweep with its training budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepEntry {
    pub config: PgmConfig,
    pub samples: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub name: String,
    pub samples: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub fps: f64,
}

/// All sixteen configurations. The configured network (`pg.*`) gets the
/// full grouping budget, every other one the `sweep.*` budget.
pub fn sweep_plan(cfg: &RunConfig) -> Vec<SweepEntry> {
    PgmConfig::sweep(cfg.pgm.resolution)
        .into_iter()
        .map(|config| {
            if config == cfg.pgm {
                SweepEntry {
                    config,
                    samples: cfg.pgm_samples,
                    epochs: cfg.pgm_train.epochs,
                }
            } else {
                SweepEntry {
                    config,
                    samples: cfg.sweep.train,
                    epochs: cfg.sweep.epochs,
                }
            }
        })
        .collect()
}

/// False selections per hundred channels of `model` (or the argmax
/// baseline for `None`) on the given stacks.
pub fn fps_of(model: Option<&PgmModel>, stacks: &[HeatmapStack], gt: &[[Vec2; NUM_CHANNELS]]) -> Result<f64> {
    let selections = stacks
        .par_iter()
        .map(|s| match model {
            None => Ok(max_grouping(s)),
            Some(m) => group(s, Grouping::Pgm(m)),
        })
        .collect::<posekit_core::Result<Vec<Selection>>>()?;
    Ok(fps_count(&selections, gt, DEFAULT_CLUSTER_RADIUS)?)
}

/// Trains and scores every entry of `plan`. `train` must hold at least the
/// largest requested sample count (entries with 0 use all of it). Returns
/// the rows, baseline first, and the trained model of the configured
/// network if it is part of the plan.
pub fn run_sweep(
    cfg: &RunConfig,
    plan: &[SweepEntry],
    train: &[PgmSample],
    test: &[HeatmapStack],
    gt: &[[Vec2; NUM_CHANNELS]],
    mut report: impl FnMut(&SweepRow),
) -> Result<(Vec<SweepRow>, Option<PgmModel>)> {
    let base = SweepRow {
        name: "max".into(),
        samples: 0,
        epochs: 0,
        final_loss: f64::NAN,
        fps: fps_of(None, test, gt)?,
    };
    report(&base);
    let mut rows = vec![base];
    let mut headline = None;
    for e in plan {
        let n = if e.samples == 0 { train.len() } else { e.samples.min(train.len()) };
        let params = cfg.pgm_train_params();
        let mut t = PgmTrainer::new(e.config, params)?;
        let mut loss = f64::NAN;
        for _ in 0..e.epochs {
            loss = t.train_epoch(&train[..n])?.train_loss;
        }
        let row = SweepRow {
            name: e.config.to_string(),
            samples: n,
            epochs: e.epochs,
            final_loss: loss,
            fps: fps_of(Some(&t.model), test, gt)?,
        };
        report(&row);
        rows.push(row);
        if e.config == cfg.pgm {
            headline = Some(t.model);
        }
    }
    Ok((rows, headline))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("network,train_samples,epochs,final_loss,fps\n");
    for r in rows {
        out += &format!("{},{},{},{},{}\n", r.name, r.samples, r.epochs, r.final_loss, r.fps);
    }
    out
}
