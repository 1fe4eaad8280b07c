//! Back-end orchestration: grouping, hypothesis pool, scoring, solve.
//!
//! Grouping picks one projection per channel (per-channel argmax or the
//! projection-grouping network). Each channel of the merged stack is then
//! masked to a small disc around its pick, the hypothesis pool is sampled
//! around the masked maxima, and the pool is scored either by RANSAC or by
//! the correspondence network followed by a weighted DLT.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;

use crate::corrnet::{corrnet_forward, CorrNetModel};
use crate::geom::{CameraIntrinsics, CornerSet, Correspondence2D3D, Pose, Vec2};
use crate::heatmap::{max_grouping, HeatmapStack, Selection, EMPTY_CHANNEL, NUM_CHANNELS};
use crate::pgm::{pgm_forward, select_projections, CropWindow, PgmModel};
use crate::rng::{derive_seed, stream};
use crate::solver::{
    decompose, ransac_pnp, reprojection_residuals, ProjectionMatrix, RansacParams,
    MIN_CORRESPONDENCES,
};
use crate::{Error, Result};

pub const DEFAULT_POI_RADIUS: f64 = 10.0;
pub const DEFAULT_PER_CHANNEL: usize = 60;
/// Fraction of the channel maximum a sampled pixel must reach.
pub const DEFAULT_CONFIDENCE_FLOOR: f32 = 0.3;
/// Radius of the disc each merged channel is masked to around its pick.
pub const DEFAULT_FILTER_RADIUS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    /// Projection-of-interest radius `R` in pixels.
    pub radius: f64,
    /// Hypotheses per channel `N_ch`.
    pub per_channel: usize,
    pub confidence_floor: f32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            radius: DEFAULT_POI_RADIUS,
            per_channel: DEFAULT_PER_CHANNEL,
            confidence_floor: DEFAULT_CONFIDENCE_FLOOR,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidParameter(format!("pool radius {}", self.radius)));
        }
        if self.per_channel == 0 {
            return Err(Error::InvalidParameter("pool needs at least one hypothesis per channel".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return Err(Error::InvalidParameter(format!("confidence floor {}", self.confidence_floor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisPool {
    pub corrs: Vec<Correspondence2D3D>,
    pub channels: Vec<usize>,
    pub confidences: Vec<f32>,
    pub peaks: [Vec2; NUM_CHANNELS],
    pub params: SamplingParams,
    /// Channels whose disc had fewer than `N_ch` qualifying pixels and were
    /// sampled with replacement.
    pub resampled: [bool; NUM_CHANNELS],
}

impl HypothesisPool {
    pub fn len(&self) -> usize {
        self.corrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corrs.is_empty()
    }

    pub fn warning(&self) -> bool {
        self.resampled.iter().any(|r| *r)
    }
}

/// Sample `N_ch` hypotheses per channel around each channel's global
/// maximum: the peak itself, then distinct pixels of the closed disc of
/// radius `R` whose value is at least `floor · max`.
pub fn build_pool(
    filtered: &HeatmapStack,
    corners: &CornerSet,
    params: &SamplingParams,
    seed: u64,
) -> Result<HypothesisPool> {
    params.validate()?;
    let (w, h) = (filtered.width(), filtered.height());
    let n = NUM_CHANNELS * params.per_channel;
    let mut pool = HypothesisPool {
        corrs: Vec::with_capacity(n),
        channels: Vec::with_capacity(n),
        confidences: Vec::with_capacity(n),
        peaks: [Vec2::zeros(); NUM_CHANNELS],
        params: *params,
        resampled: [false; NUM_CHANNELS],
    };
    let r = params.radius;
    let reach = r.floor() as isize;
    for c in 0..NUM_CHANNELS {
        let (pu, pv, max) = filtered.argmax(c);
        if max < EMPTY_CHANNEL {
            return Err(Error::MissingChannel(c));
        }
        let floor = params.confidence_floor * max;
        let mut candidates = Vec::new();
        for dv in -reach..=reach {
            for du in -reach..=reach {
                let (u, v) = (pu as isize + du, pv as isize + dv);
                if (du == 0 && dv == 0)
                    || u < 0
                    || v < 0
                    || u >= w as isize
                    || v >= h as isize
                    || ((du * du + dv * dv) as f64) > r * r
                {
                    continue;
                }
                let val = filtered.get(c, u as usize, v as usize);
                if val >= floor {
                    candidates.push((u as usize, v as usize, val));
                }
            }
        }
        let mut rng = stream(seed, 0xB0, c as u64);
        let want = params.per_channel - 1;
        let mut picks = vec![(pu, pv, max)];
        if candidates.len() >= want {
            picks.extend(sample(&mut rng, candidates.len(), want).into_iter().map(|i| candidates[i]));
        } else {
            pool.resampled[c] = true;
            // the peak qualifies too, so the draw is never empty
            candidates.push((pu, pv, max));
            picks.extend((0..want).map(|_| candidates[rng.random_range(0..candidates.len())]));
        }
        let object = corners.corner(c);
        for (u, v, val) in picks {
            pool.corrs.push(Correspondence2D3D::new(Vec2::new(u as f64, v as f64), object));
            pool.channels.push(c);
            pool.confidences.push(val);
        }
        pool.peaks[c] = Vec2::new(pu as f64, pv as f64);
    }
    Ok(pool)
}

/// Mask every channel of `merged` to the closed disc of `radius` around its
/// selected location. A channel with nothing left inside the disc (or no
/// selection) becomes a one-hot at the rounded location.
pub fn filter_stack(merged: &HeatmapStack, selection: &Selection, radius: f64) -> Result<HeatmapStack> {
    let (w, h) = (merged.width(), merged.height());
    let mut out = HeatmapStack::zeros(w, h);
    for (c, sel) in selection.iter().enumerate() {
        let Some(p) = sel else {
            return Err(Error::MissingChannel(c));
        };
        let src = merged.channel(c);
        let dst = out.channel_mut(c);
        let mut any = false;
        for v in 0..h {
            for u in 0..w {
                let d2 = (u as f64 - p.x).powi(2) + (v as f64 - p.y).powi(2);
                if d2 <= radius * radius && src[v * w + u] >= EMPTY_CHANNEL {
                    dst[v * w + u] = src[v * w + u];
                    any = true;
                }
            }
        }
        if !any {
            let u = (p.x.round().max(0.0) as usize).min(w - 1);
            let v = (p.y.round().max(0.0) as usize).min(h - 1);
            dst[v * w + u] = 1.0;
        }
    }
    out.normalize();
    Ok(out)
}

/// How one projection per channel is chosen.
#[derive(Debug, Clone, Copy)]
pub enum Grouping<'a> {
    Max,
    Pgm(&'a PgmModel),
}

/// How the pool is turned into a pose.
#[derive(Debug, Clone, Copy)]
pub enum Scoring<'a> {
    Ransac,
    CorrNet(&'a CorrNetModel),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineParams {
    pub sampling: SamplingParams,
    pub filter_radius: f64,
    pub ransac: RansacParams,
    pub seed: u64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            sampling: SamplingParams::default(),
            filter_radius: DEFAULT_FILTER_RADIUS,
            ransac: RansacParams::default(),
            seed: 0,
        }
    }
}

/// Wall-clock milliseconds spent in each stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub grouping_ms: f64,
    pub pool_ms: f64,
    pub scoring_ms: f64,
    pub solve_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub timings: StageTimings,
    /// The network predicted too few inliers (or its solve failed) and
    /// RANSAC was used instead.
    pub fallback: bool,
    pub pool_warning: bool,
    pub predicted_inliers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub h: ProjectionMatrix,
    /// Over the pool.
    pub inliers: Vec<bool>,
    /// Mean reprojection residual of `h` over the inliers.
    pub mean_error_px: f64,
    pub selection: [Vec2; NUM_CHANNELS],
    pub pool: HypothesisPool,
    pub diagnostics: Diagnostics,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Selected projection per channel in full-resolution pixels.
pub fn group(merged: &HeatmapStack, grouping: Grouping<'_>) -> Result<Selection> {
    match grouping {
        Grouping::Max => Ok(max_grouping(merged)),
        Grouping::Pgm(model) => {
            let crop = CropWindow::around_peaks(merged, model.config.resolution);
            let filtered = pgm_forward(model, &crop.apply(merged))?;
            let picks = select_projections(&filtered);
            Ok(std::array::from_fn(|c| Some(crop.to_source(&picks[c].0))))
        }
    }
}

fn ransac_estimate(pool: &HypothesisPool, k: &CameraIntrinsics, params: &PipelineParams) -> Result<(Pose, ProjectionMatrix, Vec<bool>)> {
    let rp = RansacParams {
        seed: derive_seed(params.seed, 0x5A, params.ransac.seed),
        ..params.ransac
    };
    let r = ransac_pnp(&pool.corrs, k, &rp)?;
    Ok((r.pose, r.h, r.inliers))
}

/// Full back-end for one merged stack.
pub fn run_backend(
    merged: &HeatmapStack,
    k: &CameraIntrinsics,
    corners: &CornerSet,
    grouping: Grouping<'_>,
    scoring: Scoring<'_>,
    params: &PipelineParams,
) -> Result<PoseEstimate> {
    let start = Instant::now();
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let selection = group(merged, grouping)?;
    let filtered = filter_stack(merged, &selection, params.filter_radius)?;
    timings.grouping_ms = ms(t);

    let t = Instant::now();
    let pool = build_pool(&filtered, corners, &params.sampling, derive_seed(params.seed, 0xB0, 0))?;
    timings.pool_ms = ms(t);

    let mut fallback = false;
    let mut predicted_inliers = 0;
    let (pose, h, inliers) = match scoring {
        Scoring::Ransac => {
            let t = Instant::now();
            let r = ransac_estimate(&pool, k, params);
            timings.solve_ms = ms(t);
            r.map_err(|e| Error::EstimationFailed(format!("ransac: {e}")))?
        }
        Scoring::CorrNet(model) => {
            let t = Instant::now();
            let weighted = corrnet_forward(model, &pool.corrs, k, corners.diameter())?;
            timings.scoring_ms = ms(t);
            predicted_inliers = weighted.inlier_count();
            let t = Instant::now();
            let direct = if predicted_inliers >= MIN_CORRESPONDENCES {
                weighted
                    .solve()
                    .and_then(|h| decompose(&h, k).map(|p| (p, h, weighted.predicted_inlier.clone())))
            } else {
                Err(Error::DegenerateSet(predicted_inliers))
            };
            let out = match direct {
                Ok(r) => r,
                Err(first) => {
                    fallback = true;
                    ransac_estimate(&pool, k, params).map_err(|e| {
                        Error::EstimationFailed(format!("weighted solve: {first}; ransac: {e}"))
                    })?
                }
            };
            timings.solve_ms = ms(t);
            out
        }
    };
    let inlier_corrs: Vec<Correspondence2D3D> = pool
        .corrs
        .iter()
        .zip(&inliers)
        .filter(|(_, m)| **m)
        .map(|(c, _)| *c)
        .collect();
    let mean_error_px = reprojection_residuals(&h, &inlier_corrs)?.mean;
    timings.total_ms = ms(start);
    let selection = std::array::from_fn(|c| selection[c].unwrap_or(pool.peaks[c]));
    Ok(PoseEstimate {
        pose,
        h,
        inliers,
        mean_error_px,
        selection,
        diagnostics: Diagnostics {
            timings,
            fallback,
            pool_warning: pool.warning(),
            predicted_inliers,
        },
        pool,
    })
}

/// Learned grouping and learned scoring.
pub fn estimate_pose(
    merged: &HeatmapStack,
    k: &CameraIntrinsics,
    corners: &CornerSet,
    pgm: &PgmModel,
    corrnet: &CorrNetModel,
    params: &PipelineParams,
) -> Result<PoseEstimate> {
    run_backend(merged, k, corners, Grouping::Pgm(pgm), Scoring::CorrNet(corrnet), params)
}

/// Per-channel argmax grouping with RANSAC scoring.
pub fn run_baseline(
    merged: &HeatmapStack,
    k: &CameraIntrinsics,
    corners: &CornerSet,
    params: &PipelineParams,
) -> Result<PoseEstimate> {
    run_backend(merged, k, corners, Grouping::Max, Scoring::Ransac, params)
}
