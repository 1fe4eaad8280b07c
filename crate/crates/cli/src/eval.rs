//! Evaluation of grouping/scoring combinations over a test split.

use anyhow::{bail, Result};
use posekit_core::corrnet::CorrNetModel;
use posekit_core::heatmap::{fps_count, Selection, DEFAULT_CLUSTER_RADIUS};
use posekit_core::metrics::{MetricReport, SceneErrors};
use posekit_core::pgm::PgmModel;
use posekit_core::pipeline::{group, run_backend, Grouping, PipelineParams, StageTimings};
use posekit_core::rng::derive_seed;
use posekit_core::{HeatmapStack, Vec2, NUM_CHANNELS};
use rayon::prelude::*;

use crate::dataset::SceneRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GroupingKind {
    Max,
    Pgm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ScoringKind {
    Ransac,
    Corrnet,
}

impl GroupingKind {
    pub fn name(self) -> &'static str {
        match self {
            GroupingKind::Max => "max",
            GroupingKind::Pgm => "pgm",
        }
    }
}

impl ScoringKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoringKind::Ransac => "ransac",
            ScoringKind::Corrnet => "corrnet",
        }
    }
}

/// Loaded networks; a combination needing a missing one is refused.
#[derive(Debug, Default)]
pub struct Models {
    pub pgm: Option<PgmModel>,
    pub corrnet: Option<CorrNetModel>,
}

impl Models {
    fn grouping(&self, g: GroupingKind) -> Result<Grouping<'_>> {
        Ok(match g {
            GroupingKind::Max => Grouping::Max,
            GroupingKind::Pgm => match &self.pgm {
                Some(m) => Grouping::Pgm(m),
                None => bail!("missing model: pgm grouping needs a trained grouping network (pgm.npk)"),
            },
        })
    }

    fn scoring(&self, s: ScoringKind) -> Result<posekit_core::pipeline::Scoring<'_>> {
        use posekit_core::pipeline::Scoring;
        Ok(match s {
            ScoringKind::Ransac => Scoring::Ransac,
            ScoringKind::Corrnet => match &self.corrnet {
                Some(m) => Scoring::CorrNet(m),
                None => bail!("missing model: corrnet scoring needs a trained correspondence network (corrnet.npk)"),
            },
        })
    }
}

/// Outcome of one scene under one combination.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneOutcome {
    pub scene_id: u64,
    pub errors: SceneErrors,
    pub selection: Selection,
    pub estimated: bool,
    pub fallback: bool,
    pub pool_warning: bool,
    pub false_selections: usize,
    pub timings: StageTimings,
}

/// Per-scene pipeline seed; results do not depend on evaluation order.
pub fn scene_params(params: &PipelineParams, scene_id: u64) -> PipelineParams {
    PipelineParams {
        seed: derive_seed(params.seed, 0x5CE, scene_id),
        ..*params
    }
}

/// Runs one combination over every scene, in parallel, in record order.
pub fn evaluate(
    records: &[SceneRecord],
    stacks: &[HeatmapStack],
    models: &Models,
    grouping: GroupingKind,
    scoring: ScoringKind,
    params: &PipelineParams,
) -> Result<Vec<SceneOutcome>> {
    let g = models.grouping(grouping)?;
    let s = models.scoring(scoring)?;
    records
        .par_iter()
        .zip(stacks)
        .map(|(rec, stack)| {
            let corners = rec.corners()?;
            let gt = rec.gt_projections()?;
            let points = corners.corners().to_vec();
            let est = run_backend(stack, &rec.k, &corners, g, s, &scene_params(params, rec.id));
            let (errors, selection, diag) = match &est {
                Ok(e) => (
                    SceneErrors::evaluate(&rec.k, Some(&e.pose), &rec.pose, &points, corners.diameter()),
                    e.selection.map(Some),
                    Some(&e.diagnostics),
                ),
                Err(_) => (
                    SceneErrors::failed(corners.diameter()),
                    group(stack, g).unwrap_or([None; NUM_CHANNELS]),
                    None,
                ),
            };
            let false_selections = selection
                .iter()
                .zip(&gt)
                .filter(|(s, g)| s.is_none_or(|p| (p - **g).norm() > DEFAULT_CLUSTER_RADIUS))
                .count();
            Ok(SceneOutcome {
                scene_id: rec.id,
                errors,
                selection,
                estimated: est.is_ok(),
                fallback: diag.is_some_and(|d| d.fallback),
                pool_warning: diag.is_some_and(|d| d.pool_warning),
                false_selections,
                timings: diag.map(|d| d.timings).unwrap_or_default(),
            })
        })
        .collect()
}

/// Aggregate row of one combination.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub grouping: GroupingKind,
    pub scoring: ScoringKind,
    pub scenes: usize,
    pub fps: f64,
    pub report: MetricReport,
    pub failures: usize,
    pub fallbacks: usize,
}

/// Thresholds of the pixel accuracy curve, 0 to 50 px.
pub fn curve_thresholds() -> Vec<f64> {
    (0..=50).map(f64::from).collect()
}

pub fn summarize(
    grouping: GroupingKind,
    scoring: ScoringKind,
    outcomes: &[SceneOutcome],
    gt: &[[Vec2; NUM_CHANNELS]],
) -> Result<Summary> {
    let selections: Vec<Selection> = outcomes.iter().map(|o| o.selection).collect();
    Ok(Summary {
        grouping,
        scoring,
        scenes: outcomes.len(),
        fps: fps_count(&selections, gt, DEFAULT_CLUSTER_RADIUS)?,
        report: MetricReport::new(outcomes.iter().map(|o| o.errors).collect(), &curve_thresholds())?,
        failures: outcomes.iter().filter(|o| !o.estimated).count(),
        fallbacks: outcomes.iter().filter(|o| o.fallback).count(),
    })
}

pub const SCENES_HEADER: &str =
    "grouping,scoring,scene_id,reprojection_px,add,adi,accepted_2d,accepted_add,accepted_adi,false_selections,estimated,fallback,pool_warning\n";

pub fn scenes_csv_rows(grouping: GroupingKind, scoring: ScoringKind, outcomes: &[SceneOutcome]) -> String {
    let b = |x: bool| u8::from(x);
    outcomes
        .iter()
        .map(|o| {
            let e = &o.errors;
            format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                grouping.name(),
                scoring.name(),
                o.scene_id,
                e.reprojection_px,
                e.add,
                e.adi,
                b(e.accepted_2d()),
                b(e.accepted_add()),
                b(e.accepted_adi()),
                o.false_selections,
                b(o.estimated),
                b(o.fallback),
                b(o.pool_warning)
            )
        })
        .collect()
}

pub const SUMMARY_HEADER: &str =
    "grouping,scoring,scenes,fps,accuracy_2d,accuracy_add,accuracy_adi,auc_add,auc_adi,failures,fallbacks\n";

pub fn summary_csv_row(s: &Summary) -> String {
    let r = &s.report;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}\n",
        s.grouping.name(),
        s.scoring.name(),
        s.scenes,
        s.fps,
        r.accuracy_2d,
        r.accuracy_add,
        r.accuracy_adi,
        r.auc_add,
        r.auc_adi,
        s.failures,
        s.fallbacks
    )
}

pub const CURVE_HEADER: &str = "grouping,scoring,threshold_px,accuracy\n";

pub fn curve_csv_rows(s: &Summary) -> String {
    s.report
        .curve
        .iter()
        .map(|(t, a)| format!("{},{},{t},{a}\n", s.grouping.name(), s.scoring.name()))
        .collect()
}

/// Mean stage timings over the estimated scenes.
pub fn mean_timings(outcomes: &[SceneOutcome]) -> StageTimings {
    let ok: Vec<&StageTimings> = outcomes.iter().filter(|o| o.estimated).map(|o| &o.timings).collect();
    let n = ok.len().max(1) as f64;
    let mean = |f: fn(&StageTimings) -> f64| ok.iter().map(|t| f(t)).sum::<f64>() / n;
    StageTimings {
        grouping_ms: mean(|t| t.grouping_ms),
        pool_ms: mean(|t| t.pool_ms),
        scoring_ms: mean(|t| t.scoring_ms),
        solve_ms: mean(|t| t.solve_ms),
        total_ms: mean(|t| t.total_ms),
    }
}
