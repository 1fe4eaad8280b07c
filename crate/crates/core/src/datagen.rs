//! Synthetic scenes: view-sphere poses, labeled 2D-3D correspondence pools
//! and merged heatmap stacks with decoy peaks.
//!
//! The merged-stack simulator stands in for a heatmap CNN. It reproduces the
//! failure mode that matters downstream (competing local maxima, some
//! stronger than the true one) but makes no attempt to mimic real network
//! error statistics.

use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::geom::{
    corners_from_extent, project, CameraIntrinsics, CornerSet, Correspondence2D3D, Pose, Vec2,
    Vec3,
};
use crate::heatmap::{synth_gaussian_channel, HeatmapStack, NUM_CHANNELS};
use crate::rng::{derive_seed, rng_from, stream};
use crate::{Error, Result};

/// Residual under the true pose below which a hypothesis is an inlier, px.
pub const INLIER_THRESHOLD_PX: f64 = 3.0;

/// How the 2D-3D hypotheses of a pool relate to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolVariant {
    /// All channels come from the box corners under one pose.
    Consistent,
    /// Each channel gets an independent random 2D location whose 3D
    /// reference is its back-projection, so the eight references do not
    /// form a box.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolParams {
    pub per_channel: usize,
    /// Pixel noise σ, drawn once per pool.
    pub noise_sigma: (f64, f64),
    /// Outlier fraction, drawn once per pool; each hypothesis is replaced
    /// by a uniform image position with this probability.
    pub outlier_fraction: (f64, f64),
    /// Probability that a whole channel is centered on a wrong location
    /// (as after a wrong peak selection).
    pub displacement_prob: f64,
    pub displacement_min_distance: f64,
    pub variant: PoolVariant,
}

impl Default for PoolParams {
    fn default() -> Self {
        PoolParams {
            per_channel: 60,
            noise_sigma: (0.5, 2.0),
            outlier_fraction: (0.0, 0.5),
            displacement_prob: 0.0,
            displacement_min_distance: 15.0,
            variant: PoolVariant::Consistent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioParams {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub extent: [f64; 3],
    pub radius: (f64, f64),
    pub roll: (f64, f64),
    /// Accepted poses keep every corner this far inside the image.
    pub margin_px: f64,
    pub gt_sigma: f64,
    pub gt_confidence: (f64, f64),
    pub max_decoys: usize,
    /// Decoy confidence as a multiple of the true peak's.
    pub decoy_confidence: (f64, f64),
    pub decoy_min_distance: f64,
    pub occlusion_prob: f64,
    pub pool: PoolParams,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            width: 64,
            height: 64,
            fx: 140.0,
            fy: 140.0,
            cx: 32.0,
            cy: 32.0,
            extent: [0.10, 0.08, 0.06],
            radius: (0.45, 0.7),
            roll: (-std::f64::consts::PI, std::f64::consts::PI),
            margin_px: 2.0,
            gt_sigma: 2.0,
            gt_confidence: (0.7, 1.0),
            max_decoys: 3,
            decoy_confidence: (0.8, 1.05),
            decoy_min_distance: 15.0,
            occlusion_prob: 0.3,
            pool: PoolParams::default(),
        }
    }
}

fn check_range(name: &str, r: (f64, f64), lo: f64, hi: f64) -> Result<()> {
    if !(r.0.is_finite() && r.1.is_finite() && r.0 <= r.1 && r.0 >= lo && r.1 <= hi) {
        return Err(Error::InvalidParameter(format!(
            "{name} range {r:?} must be ordered within [{lo}, {hi}]"
        )));
    }
    Ok(())
}

fn check_fraction(name: &str, p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("{name} = {p} must lie in [0, 1)")));
    }
    Ok(())
}

impl ScenarioParams {
    /// Noise-free scenes: no decoys, no occlusion, no pool noise or outliers.
    pub fn clean() -> Self {
        ScenarioParams {
            max_decoys: 0,
            occlusion_prob: 0.0,
            pool: PoolParams {
                noise_sigma: (0.0, 0.0),
                outlier_fraction: (0.0, 0.0),
                ..PoolParams::default()
            },
            ..ScenarioParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidParameter("image must be at least 8x8".into()));
        }
        self.intrinsics()?;
        corners_from_extent(self.extent[0], self.extent[1], self.extent[2])?;
        check_range("radius", self.radius, 1e-6, f64::MAX)?;
        check_range("roll", self.roll, -10.0, 10.0)?;
        check_range("gt_confidence", self.gt_confidence, 1e-6, 1.0)?;
        check_range("decoy_confidence", self.decoy_confidence, 0.0, 10.0)?;
        check_range("noise_sigma", self.pool.noise_sigma, 0.0, 1e3)?;
        check_range("outlier_fraction", self.pool.outlier_fraction, 0.0, 1.0)?;
        if self.pool.outlier_fraction.1 >= 1.0 {
            return Err(Error::InvalidParameter("outlier fraction must be below 1".into()));
        }
        check_fraction("occlusion_prob", self.occlusion_prob)?;
        check_fraction("displacement_prob", self.pool.displacement_prob)?;
        if !(self.gt_sigma > 0.0) || !(self.margin_px >= 0.0) || self.pool.per_channel == 0 {
            return Err(Error::InvalidParameter(
                "gt_sigma, margin and per_channel must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy)
    }

    pub fn corners(&self) -> Result<CornerSet> {
        corners_from_extent(self.extent[0], self.extent[1], self.extent[2])
    }

    fn inside(&self, p: &Vec2) -> bool {
        let m = self.margin_px;
        p.x >= m && p.y >= m && p.x <= self.width as f64 - 1.0 - m && p.y <= self.height as f64 - 1.0 - m
    }
}

fn uniform(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

/// Camera on the view sphere looking at the object origin.
///
/// `direction` is the camera position in the object frame (unit length);
/// the returned pose maps object to camera coordinates with `t = (0, 0, r)`.
pub fn look_at_pose(direction: Vec3, radius: f64, roll: f64) -> Pose {
    let z = -direction.normalize();
    let up = if z.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let (s, c) = roll.sin_cos();
    let xr = x * c + y * s;
    let yr = -x * s + y * c;
    let rotation = Matrix3::from_rows(&[xr.transpose(), yr.transpose(), z.transpose()]);
    Pose {
        rotation,
        translation: Vec3::new(0.0, 0.0, radius),
    }
}

/// `n` view-sphere poses whose corners all project inside the image.
pub fn sample_viewsphere(n: usize, params: &ScenarioParams, seed: u64) -> Result<Vec<Pose>> {
    params.validate()?;
    let k = params.intrinsics()?;
    let corners = params.corners()?;
    let mut rng = rng_from(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(n);
    let mut rejected = 0usize;
    let budget = 1000 * n.max(1);
    while out.len() < n {
        let d = Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
        let norm = d.norm();
        let r = uniform(&mut rng, params.radius);
        let roll = uniform(&mut rng, params.roll);
        if norm < 1e-12 {
            continue;
        }
        let pose = look_at_pose(d / norm, r, roll);
        let ok = corners
            .corners()
            .iter()
            .all(|c| project(&k, &pose, c).is_ok_and(|p| params.inside(&p)));
        if ok {
            out.push(pose);
        } else {
            rejected += 1;
            if rejected > budget {
                return Err(Error::RejectionExhausted(rejected));
            }
        }
    }
    Ok(out)
}

/// Hypotheses with ground-truth inlier labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPool {
    pub corrs: Vec<Correspondence2D3D>,
    pub labels: Vec<bool>,
    pub channels: Vec<usize>,
}

impl LabeledPool {
    pub fn len(&self) -> usize {
        self.corrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corrs.is_empty()
    }

    pub fn inlier_count(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }
}

/// Label by the ε-rule: residual under the true pose below the threshold.
pub fn label(k: &CameraIntrinsics, pose: &Pose, c: &Correspondence2D3D) -> bool {
    project(k, pose, &c.object).is_ok_and(|p| (p - c.image).norm() < INLIER_THRESHOLD_PX)
}

fn uniform_pixel(rng: &mut impl Rng, params: &ScenarioParams) -> Vec2 {
    Vec2::new(
        rng.random_range(0.0..params.width as f64 - 1.0),
        rng.random_range(0.0..params.height as f64 - 1.0),
    )
}

fn far_pixel(rng: &mut impl Rng, params: &ScenarioParams, from: &Vec2, min_dist: f64) -> Option<Vec2> {
    (0..200)
        .map(|_| uniform_pixel(rng, params))
        .find(|p| (p - from).norm() >= min_dist)
}

/// A labeled pool of `8 × per_channel` hypotheses around the true
/// projections of `corners` under `pose`.
pub fn synth_pool(
    pose: &Pose,
    k: &CameraIntrinsics,
    corners: &CornerSet,
    params: &ScenarioParams,
    seed: u64,
) -> Result<LabeledPool> {
    let pp = &params.pool;
    let mut rng = rng_from(seed);
    let sigma = uniform(&mut rng, pp.noise_sigma);
    let outlier_frac = uniform(&mut rng, pp.outlier_fraction);
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("non-negative sigma");
    let n = NUM_CHANNELS * pp.per_channel;
    let mut pool = LabeledPool {
        corrs: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        channels: Vec::with_capacity(n),
    };
    for ch in 0..NUM_CHANNELS {
        let (center, object) = match pp.variant {
            PoolVariant::Consistent => {
                let p = corners.corner(ch);
                (project(k, pose, &p)?, p)
            }
            PoolVariant::Independent => {
                let q = uniform_pixel(&mut rng, params);
                let depth = pose.transform(&corners.corner(ch)).z * rng.random_range(0.9..1.1);
                let ray = k.inverse_matrix() * Vec3::new(q.x, q.y, 1.0);
                let cam = ray * depth;
                let obj = pose.inverse().transform(&cam);
                (project(k, pose, &obj)?, obj)
            }
        };
        let center = if rng.random::<f64>() < pp.displacement_prob {
            far_pixel(&mut rng, params, &center, pp.displacement_min_distance).unwrap_or(center)
        } else {
            center
        };
        for _ in 0..pp.per_channel {
            let image = if rng.random::<f64>() < outlier_frac {
                uniform_pixel(&mut rng, params)
            } else if sigma > 0.0 {
                center + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                center
            };
            let c = Correspondence2D3D::new(image, object);
            pool.labels.push(label(k, pose, &c));
            pool.corrs.push(c);
            pool.channels.push(ch);
        }
    }
    Ok(pool)
}

/// A synthetic scene with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub pose: Pose,
    pub k: CameraIntrinsics,
    pub corners: CornerSet,
    pub gt_projections: [Vec2; NUM_CHANNELS],
    pub merged: HeatmapStack,
    pub pool: LabeledPool,
}

impl LabeledScene {
    /// Ground-truth-only stack (unit Gaussians at the true projections).
    pub fn gt_stack(&self, sigma: f64) -> HeatmapStack {
        gt_stack(&self.gt_projections, self.merged.width(), self.merged.height(), sigma)
    }
}

pub fn gt_stack(points: &[Vec2; NUM_CHANNELS], width: usize, height: usize, sigma: f64) -> HeatmapStack {
    let ch: Vec<Vec<f32>> = points
        .iter()
        .map(|p| synth_gaussian_channel(*p, sigma, width, height))
        .collect();
    HeatmapStack::from_channels(width, height, &ch).expect("gaussian channels are valid")
}

pub fn gt_projections(
    k: &CameraIntrinsics,
    pose: &Pose,
    corners: &CornerSet,
) -> Result<[Vec2; NUM_CHANNELS]> {
    let mut out = [Vec2::zeros(); NUM_CHANNELS];
    for (o, c) in out.iter_mut().zip(corners.corners()) {
        *o = project(k, pose, c)?;
    }
    Ok(out)
}

/// Merged heatmap stack for `pose`: the true peak plus decoys per channel,
/// summed and normalized. Also draws the scene's labeled pool.
pub fn synth_merged_stack(
    pose: &Pose,
    k: &CameraIntrinsics,
    corners: &CornerSet,
    params: &ScenarioParams,
    seed: u64,
) -> Result<LabeledScene> {
    let gt = gt_projections(k, pose, corners)?;
    let (w, h) = (params.width, params.height);
    let mut rng = stream(seed, 1, 0);
    let mut channels = Vec::with_capacity(NUM_CHANNELS);
    for truth in &gt {
        let mut gt_conf = uniform(&mut rng, params.gt_confidence);
        let n_decoys = rng.random_range(0..=params.max_decoys);
        let mut decoys = Vec::with_capacity(n_decoys);
        for _ in 0..n_decoys {
            if let Some(p) = far_pixel(&mut rng, params, truth, params.decoy_min_distance) {
                decoys.push((p, gt_conf * uniform(&mut rng, params.decoy_confidence)));
            }
        }
        if rng.random::<f64>() < params.occlusion_prob {
            let below = decoys
                .iter()
                .map(|d| d.1)
                .fold(f64::INFINITY, f64::min)
                .min(gt_conf);
            gt_conf = below * rng.random_range(0.6..0.95);
        }
        let mut ch = vec![0f32; w * h];
        let mut add = |center: Vec2, conf: f64| {
            for (a, g) in ch.iter_mut().zip(synth_gaussian_channel(center, params.gt_sigma, w, h)) {
                *a += (conf as f32) * g;
            }
        };
        add(*truth, gt_conf);
        for (p, c) in decoys {
            add(p, c);
        }
        channels.push(ch);
    }
    let merged = HeatmapStack::from_channels(w, h, &channels)?;
    let pool = synth_pool(pose, k, corners, params, derive_seed(seed, 2, 0))?;
    Ok(LabeledScene {
        pose: *pose,
        k: *k,
        corners: *corners,
        gt_projections: gt,
        merged,
        pool,
    })
}

/// Scene `id` of the split generated from `seed`.
pub fn generate_scene(params: &ScenarioParams, seed: u64, id: u64) -> Result<LabeledScene> {
    let pose = sample_viewsphere(1, params, derive_seed(seed, 0, id))?[0];
    synth_merged_stack(
        &pose,
        &params.intrinsics()?,
        &params.corners()?,
        params,
        derive_seed(seed, 3, id),
    )
}
