//! Pose-accuracy metrics: ADD, ADI, 2D reprojection error, acceptance
//! tests, AUC and accuracy-threshold curves.
//!
//! Failed estimates are represented by infinite errors; they count as
//! rejected everywhere and contribute zero area.

use crate::geom::{project, CameraIntrinsics, Pose, Vec3};
use crate::{Error, Result};

/// 2D reprojection acceptance threshold, pixels.
pub const REPROJECTION_THRESHOLD_PX: f64 = 5.0;
/// ADD|I acceptance threshold as a fraction of the object diameter.
pub const DIAMETER_FRACTION: f64 = 0.1;
/// Default upper limit of the AUC integral, meters.
pub const AUC_MAX_THRESHOLD: f64 = 0.10;
pub const AUC_STEPS: usize = 1000;

/// Mean distance between corresponding transformed points.
pub fn add_error(est: &Pose, gt: &Pose, points: &[Vec3]) -> f64 {
    assert!(!points.is_empty(), "ADD needs at least one model point");
    points
        .iter()
        .map(|p| (est.transform(p) - gt.transform(p)).norm())
        .sum::<f64>()
        / points.len() as f64
}

/// Mean distance from each ground-truth-transformed point to the nearest
/// estimate-transformed point. Exhaustive `O(n²)` scan.
pub fn adi_error(est: &Pose, gt: &Pose, points: &[Vec3]) -> f64 {
    assert!(!points.is_empty(), "ADI needs at least one model point");
    let moved: Vec<Vec3> = points.iter().map(|p| est.transform(p)).collect();
    points
        .iter()
        .map(|p| {
            let g = gt.transform(p);
            moved
                .iter()
                .map(|e| (e - g).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / points.len() as f64
}

/// Mean pixel distance between model points projected with `est` and `gt`.
pub fn reprojection_error(
    k: &CameraIntrinsics,
    est: &Pose,
    gt: &Pose,
    points: &[Vec3],
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut sum = 0.0;
    for p in points {
        sum += (project(k, est, p)? - project(k, gt, p)?).norm();
    }
    Ok(sum / points.len() as f64)
}

/// Strictly below `threshold_px`.
pub fn accepted_2d(reprojection_px: f64, threshold_px: f64) -> bool {
    reprojection_px < threshold_px
}

/// Strictly below `0.1 × diameter`.
pub fn accepted_add(error: f64, diameter: f64) -> bool {
    assert!(diameter > 0.0, "diameter must be positive");
    error < DIAMETER_FRACTION * diameter
}

/// Fraction of errors at or below `t`.
fn fraction_within(sorted: &[f64], t: f64) -> f64 {
    sorted.partition_point(|e| *e <= t) as f64 / sorted.len() as f64
}

/// Normalized area under accuracy(t) for `t ∈ [0, max_threshold]`,
/// trapezoidal with `steps` intervals. Accuracy here counts errors `≤ t` so
/// that perfect estimates score exactly 1.
pub fn auc(errors: &[f64], max_threshold: f64, steps: usize) -> f64 {
    assert!(max_threshold > 0.0 && steps > 0);
    if errors.is_empty() {
        return 0.0;
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let dt = max_threshold / steps as f64;
    let mut area = 0.0;
    let mut prev = fraction_within(&sorted, 0.0);
    for i in 1..=steps {
        let cur = fraction_within(&sorted, dt * i as f64);
        area += 0.5 * (prev + cur) * dt;
        prev = cur;
    }
    (area / max_threshold).clamp(0.0, 1.0)
}

/// `(threshold, fraction of errors < threshold)` for each threshold.
pub fn accuracy_curve(errors: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len().max(1) as f64;
    thresholds
        .iter()
        .map(|t| (*t, sorted.partition_point(|e| e < t) as f64 / n))
        .collect()
}

/// Errors of one evaluated scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneErrors {
    pub add: f64,
    pub adi: f64,
    pub reprojection_px: f64,
    pub diameter: f64,
}

impl SceneErrors {
    /// Errors of `est` against `gt`, or infinite errors for a failed estimate.
    pub fn evaluate(
        k: &CameraIntrinsics,
        est: Option<&Pose>,
        gt: &Pose,
        points: &[Vec3],
        diameter: f64,
    ) -> SceneErrors {
        match est {
            Some(est) => SceneErrors {
                add: add_error(est, gt, points),
                adi: adi_error(est, gt, points),
                reprojection_px: reprojection_error(k, est, gt, points).unwrap_or(f64::INFINITY),
                diameter,
            },
            None => SceneErrors::failed(diameter),
        }
    }

    pub fn failed(diameter: f64) -> SceneErrors {
        SceneErrors {
            add: f64::INFINITY,
            adi: f64::INFINITY,
            reprojection_px: f64::INFINITY,
            diameter,
        }
    }

    pub fn accepted_2d(&self) -> bool {
        accepted_2d(self.reprojection_px, REPROJECTION_THRESHOLD_PX)
    }

    pub fn accepted_add(&self) -> bool {
        accepted_add(self.add, self.diameter)
    }

    pub fn accepted_adi(&self) -> bool {
        accepted_add(self.adi, self.diameter)
    }
}

/// Aggregates over a set of scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub scenes: Vec<SceneErrors>,
    pub accuracy_2d: f64,
    pub accuracy_add: f64,
    pub accuracy_adi: f64,
    pub auc_add: f64,
    pub auc_adi: f64,
    pub curve: Vec<(f64, f64)>,
}

impl MetricReport {
    /// Pixel curve sampled at the given thresholds.
    pub fn new(scenes: Vec<SceneErrors>, curve_thresholds: &[f64]) -> Result<MetricReport> {
        if scenes.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        let n = scenes.len() as f64;
        let frac = |f: fn(&SceneErrors) -> bool| scenes.iter().filter(|s| f(s)).count() as f64 / n;
        let add: Vec<f64> = scenes.iter().map(|s| s.add).collect();
        let adi: Vec<f64> = scenes.iter().map(|s| s.adi).collect();
        let px: Vec<f64> = scenes.iter().map(|s| s.reprojection_px).collect();
        Ok(MetricReport {
            accuracy_2d: frac(SceneErrors::accepted_2d),
            accuracy_add: frac(SceneErrors::accepted_add),
            accuracy_adi: frac(SceneErrors::accepted_adi),
            auc_add: auc(&add, AUC_MAX_THRESHOLD, AUC_STEPS),
            auc_adi: auc(&adi, AUC_MAX_THRESHOLD, AUC_STEPS),
            curve: accuracy_curve(&px, curve_thresholds),
            scenes,
        })
    }
}
