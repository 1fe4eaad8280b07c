//! Pose from 2D-3D correspondences.
//!
//! [`dlt_solve`] recovers the 3×4 projection matrix `H` as the right singular
//! vector of the stacked (optionally weighted) correspondence matrix with the
//! smallest singular value. Coordinates are Hartley-normalized first; the
//! normalizing similarities are computed from *all* supplied correspondences,
//! independent of the weights, so that the solve is a smooth function of the
//! weights and [`dlt_weight_gradient`] can differentiate it.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, SMatrix, SVector, SymmetricEigen, SVD};
use rand::seq::index::sample;

use crate::geom::{CameraIntrinsics, Correspondence2D3D, Pose, Vec2, Vec3};
use crate::rng;
use crate::{Error, Result};

/// Minimum number of positively weighted correspondences for a solve.
pub const MIN_CORRESPONDENCES: usize = 6;
/// Smallest two singular values closer than this mean an ambiguous null space.
pub const SINGULAR_GAP_TOLERANCE: f64 = 1e-12;
/// Eigen-gap below which the weight gradient is refused.
pub const EIGEN_GAP_TOLERANCE: f64 = 1e-10;
/// `σ₃/σ₁` of `K⁻¹H`'s left block below this is not a camera.
pub const DECOMPOSE_CONDITION_TOLERANCE: f64 = 1e-6;
/// Homogeneous depths with magnitude at or below this cannot be dehomogenized.
pub const MIN_HOMOGENEOUS_DEPTH: f64 = 1e-12;

type Vec12 = SVector<f64, 12>;
type Mat12 = SMatrix<f64, 12, 12>;

/// A 3×4 projection matrix with unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix {
    m: Matrix3x4<f64>,
}

impl ProjectionMatrix {
    /// Scales `m` to unit norm. Fails on zero or non-finite input.
    pub fn from_matrix(m: Matrix3x4<f64>) -> Result<Self> {
        let n = m.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::DegenerateConfiguration(
                "projection matrix has zero or non-finite norm".into(),
            ));
        }
        Ok(ProjectionMatrix { m: m / n })
    }

    /// `K·[R|t]`, normalized.
    pub fn from_pose(k: &CameraIntrinsics, pose: &Pose) -> Self {
        ProjectionMatrix::from_matrix(k.matrix() * pose.matrix3x4())
            .expect("K[R|t] is never zero")
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.m
    }

    /// Row-major entries, the ordering used by the correspondence matrix.
    pub fn to_vec(&self) -> [f64; 12] {
        std::array::from_fn(|i| self.m[(i / 4, i % 4)])
    }

    /// Homogeneous depth of `p` (third row of `H·[p;1]`).
    pub fn depth(&self, p: &Vec3) -> f64 {
        (self.m * p.push(1.0)).z
    }

    pub fn project(&self, p: &Vec3) -> Result<Vec2> {
        let q = self.m * p.push(1.0);
        if !(q.z.abs() > MIN_HOMOGENEOUS_DEPTH) {
            return Err(Error::DegeneratePoint(q.z));
        }
        Ok(Vec2::new(q.x / q.z, q.y / q.z))
    }

    pub fn negated(&self) -> Self {
        ProjectionMatrix { m: -self.m }
    }
}

/// Stacked `2N × 12` correspondence matrix.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub a: DMatrix<f64>,
    pub n: usize,
}

fn design_rows(img: &Vec2, obj: &Vec3) -> [[f64; 12]; 2] {
    let (u, v) = (img.x, img.y);
    let (x, y, z) = (obj.x, obj.y, obj.z);
    [
        [x, y, z, 1.0, 0.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u * z, -u],
        [0.0, 0.0, 0.0, 0.0, x, y, z, 1.0, -v * x, -v * y, -v * z, -v],
    ]
}

pub fn build_design_matrix(corrs: &[Correspondence2D3D]) -> DesignMatrix {
    let mut a = DMatrix::zeros(2 * corrs.len(), 12);
    for (i, c) in corrs.iter().enumerate() {
        let rows = design_rows(&c.image, &c.object);
        for (r, row) in rows.iter().enumerate() {
            for (j, val) in row.iter().enumerate() {
                a[(2 * i + r, j)] = *val;
            }
        }
    }
    DesignMatrix {
        a,
        n: corrs.len(),
    }
}

/// Hartley similarities for image and object coordinates.
#[derive(Debug, Clone, Copy)]
struct Normalization {
    t2: Matrix3<f64>,
    t2_inv: Matrix3<f64>,
    t3: Matrix4<f64>,
}

impl Normalization {
    fn from_corrs(corrs: &[Correspondence2D3D]) -> Self {
        let n = corrs.len() as f64;
        let c2 = corrs.iter().map(|c| c.image).sum::<Vec2>() / n;
        let c3 = corrs.iter().map(|c| c.object).sum::<Vec3>() / n;
        let d2 = corrs.iter().map(|c| (c.image - c2).norm()).sum::<f64>() / n;
        let d3 = corrs.iter().map(|c| (c.object - c3).norm()).sum::<f64>() / n;
        let s2 = if d2 > 1e-12 { 2f64.sqrt() / d2 } else { 1.0 };
        let s3 = if d3 > 1e-12 { 3f64.sqrt() / d3 } else { 1.0 };
        let t2 = Matrix3::new(s2, 0.0, -s2 * c2.x, 0.0, s2, -s2 * c2.y, 0.0, 0.0, 1.0);
        let t2_inv = Matrix3::new(1.0 / s2, 0.0, c2.x, 0.0, 1.0 / s2, c2.y, 0.0, 0.0, 1.0);
        let mut t3 = Matrix4::identity() * s3;
        t3[(3, 3)] = 1.0;
        t3[(0, 3)] = -s3 * c3.x;
        t3[(1, 3)] = -s3 * c3.y;
        t3[(2, 3)] = -s3 * c3.z;
        Normalization { t2, t2_inv, t3 }
    }

    fn apply(&self, c: &Correspondence2D3D) -> (Vec2, Vec3) {
        let p = self.t2 * c.image.push(1.0);
        let q = self.t3 * c.object.push(1.0);
        (p.xy(), q.xyz())
    }

    /// Map a normalized-space solution back to pixel/object coordinates.
    fn denormalize(&self, h_hat: &Matrix3x4<f64>) -> Matrix3x4<f64> {
        self.t2_inv * h_hat * self.t3
    }
}

fn vec_to_mat(h: &Vec12) -> Matrix3x4<f64> {
    Matrix3x4::from_fn(|r, c| h[r * 4 + c])
}

fn check_weights(corrs: &[Correspondence2D3D], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; corrs.len()]),
        Some(w) => {
            if w.len() != corrs.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} weights for {} correspondences",
                    w.len(),
                    corrs.len()
                )));
            }
            if let Some(bad) = w.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                return Err(Error::InvalidParameter(format!(
                    "weights must be finite and non-negative, got {bad}"
                )));
            }
            Ok(w.to_vec())
        }
    }
}

/// Fix the overall sign so the centroid of the positively weighted points has
/// positive homogeneous depth.
fn fix_sign(h: ProjectionMatrix, corrs: &[Correspondence2D3D], weights: &[f64]) -> ProjectionMatrix {
    let mut centroid = Vec3::zeros();
    let mut count = 0.0;
    for (c, w) in corrs.iter().zip(weights) {
        if *w > 0.0 {
            centroid += c.object;
            count += 1.0;
        }
    }
    centroid /= count;
    if h.depth(&centroid) < 0.0 {
        h.negated()
    } else {
        h
    }
}

/// Weighted DLT. `weights` scale each correspondence's row pair; `None`
/// means all ones. Zero-weight correspondences do not constrain `H` but
/// still take part in the coordinate normalization.
pub fn dlt_solve(
    corrs: &[Correspondence2D3D],
    weights: Option<&[f64]>,
) -> Result<ProjectionMatrix> {
    let w = check_weights(corrs, weights)?;
    let active: Vec<usize> = (0..corrs.len()).filter(|&i| w[i] > 0.0).collect();
    if active.len() < MIN_CORRESPONDENCES {
        return Err(Error::DegenerateConfiguration(format!(
            "{} positively weighted correspondences, need {MIN_CORRESPONDENCES}",
            active.len()
        )));
    }
    if let Some(c) = corrs.iter().find(|c| !c.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite correspondence {c:?}")));
    }
    // The gap tolerance is absolute; rescale so the largest weight is one.
    let w_max = active.iter().map(|&i| w[i]).fold(0.0, f64::max);
    let norm = Normalization::from_corrs(corrs);
    let mut a = DMatrix::zeros(2 * active.len(), 12);
    for (k, &i) in active.iter().enumerate() {
        let (p, q) = norm.apply(&corrs[i]);
        let s = w[i] / w_max;
        for (r, row) in design_rows(&p, &q).iter().enumerate() {
            for (j, val) in row.iter().enumerate() {
                a[(2 * k + r, j)] = s * val;
            }
        }
    }
    let svd = SVD::new(a, false, true);
    let v_t = svd.v_t.expect("requested V");
    let sv = &svd.singular_values;
    let len = sv.len();
    if len < 12 {
        return Err(Error::DegenerateConfiguration("fewer than 12 singular values".into()));
    }
    let (s_min, s_next) = (sv[len - 1], sv[len - 2]);
    if s_next - s_min < SINGULAR_GAP_TOLERANCE {
        return Err(Error::DegenerateConfiguration(format!(
            "smallest singular values {s_min:e} and {s_next:e} are not separated"
        )));
    }
    let h_hat = Vec12::from_iterator(v_t.row(len - 1).iter().copied());
    let h = ProjectionMatrix::from_matrix(norm.denormalize(&vec_to_mat(&h_hat)))?;
    Ok(fix_sign(h, corrs, &w))
}

/// Metric pose from `H` and the intrinsics.
///
/// `M = K⁻¹H` is rescaled by `sign·3/(σ₁+σ₂+σ₃)` of its left block (the sign
/// makes that block's determinant positive), the block is projected onto
/// SO(3) and the last column gives the translation.
pub fn decompose(h: &ProjectionMatrix, k: &CameraIntrinsics) -> Result<Pose> {
    let m = k.inverse_matrix() * h.matrix();
    let b: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let svd = SVD::new(b, false, false);
    let s = svd.singular_values;
    if !(s[2] / s[0] >= DECOMPOSE_CONDITION_TOLERANCE) {
        return Err(Error::DegenerateConfiguration(format!(
            "rotation block is near-singular: σ = {s:?}"
        )));
    }
    let sign = b.determinant().signum();
    let scale = sign * 3.0 / (s[0] + s[1] + s[2]);
    let scaled = b * scale;
    let svd = SVD::new(scaled, true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V");
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t;
    let t = m.column(3) * scale;
    Pose::new(r, t.into_owned())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub per_point: Vec<f64>,
    pub mean: f64,
}

/// Pixel distance between `dehomog(H·P̃ᵢ)` and `pᵢ`, and their mean.
pub fn reprojection_residuals(
    h: &ProjectionMatrix,
    corrs: &[Correspondence2D3D],
) -> Result<Residuals> {
    if corrs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let per_point = corrs
        .iter()
        .map(|c| h.project(&c.object).map(|p| (p - c.image).norm()))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_point.iter().sum::<f64>() / per_point.len() as f64;
    Ok(Residuals { per_point, mean })
}

/// Mean reprojection residual of the weighted-DLT solution over the
/// correspondences flagged in `eval_mask`.
pub fn geometric_loss_on(
    corrs: &[Correspondence2D3D],
    weights: &[f64],
    eval_mask: &[bool],
) -> Result<f64> {
    let h = dlt_solve(corrs, Some(weights))?;
    let eval: Vec<Correspondence2D3D> = corrs
        .iter()
        .zip(eval_mask)
        .filter(|(_, m)| **m)
        .map(|(c, _)| *c)
        .collect();
    Ok(reprojection_residuals(&h, &eval)?.mean)
}

/// Geometric loss and its gradient with respect to the weights.
#[derive(Debug, Clone)]
pub struct GeometricGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub h: ProjectionMatrix,
    pub eval_count: usize,
    pub eigen_gap: f64,
}

/// `∂L_geo/∂w` where `L_geo` is the mean residual over the predicted inliers
/// (`w > 0`). The inlier set is held fixed when differentiating.
pub fn dlt_weight_gradient(
    corrs: &[Correspondence2D3D],
    weights: &[f64],
) -> Result<GeometricGradient> {
    let mask: Vec<bool> = weights.iter().map(|w| *w > 0.0).collect();
    dlt_weight_gradient_on(corrs, weights, &mask)
}

/// Same as [`dlt_weight_gradient`] with an explicit evaluation set.
///
/// With `M = ÂᵀW²Â` in normalized coordinates and `ĥ` its smallest
/// eigenvector, `∂ĥ/∂wᵢ = −(M − λ₁I)⁺ (2wᵢ ÂᵢᵀÂᵢ) ĥ`. Contracting with
/// `g = ∂L/∂ĥ` once through the pseudo-inverse gives every weight's entry
/// in one pass.
pub fn dlt_weight_gradient_on(
    corrs: &[Correspondence2D3D],
    weights: &[f64],
    eval_mask: &[bool],
) -> Result<GeometricGradient> {
    if eval_mask.len() != corrs.len() {
        return Err(Error::DimensionMismatch("evaluation mask length".into()));
    }
    let eval_count = eval_mask.iter().filter(|m| **m).count();
    if eval_count == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let h = dlt_solve(corrs, Some(weights))?;
    let norm = Normalization::from_corrs(corrs);

    let rows: Vec<[[f64; 12]; 2]> = corrs
        .iter()
        .map(|c| {
            let (p, q) = norm.apply(c);
            design_rows(&p, &q)
        })
        .collect();
    let mut m = Mat12::zeros();
    for (r, w) in rows.iter().zip(weights) {
        if *w > 0.0 {
            let w2 = w * w;
            for row in r {
                let a = Vec12::from_row_slice(row);
                m += (a * a.transpose()) * w2;
            }
        }
    }
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lambda = |i: usize| eig.eigenvalues[order[i]];
    let vec = |i: usize| -> Vec12 { eig.eigenvectors.column(order[i]).into_owned() };
    let gap = lambda(1) - lambda(0);
    if !(gap > EIGEN_GAP_TOLERANCE) {
        return Err(Error::IllConditioned { gap });
    }
    let h_hat = vec(0);
    let h_raw = norm.denormalize(&vec_to_mat(&h_hat));

    // dL/dH at the unnormalized solution; L is invariant to the scale of H.
    let mut g_h = Matrix3x4::<f64>::zeros();
    let mut loss = 0.0;
    for (c, _) in corrs.iter().zip(eval_mask).filter(|(_, m)| **m) {
        let ph = c.object.push(1.0);
        let q = h_raw * ph;
        if !(q.z.abs() > MIN_HOMOGENEOUS_DEPTH) {
            return Err(Error::DegeneratePoint(q.z));
        }
        let proj = Vec2::new(q.x / q.z, q.y / q.z);
        let e = proj - c.image;
        let r = e.norm();
        loss += r;
        if r > 0.0 {
            let inv = 1.0 / q.z;
            let dq = nalgebra::Vector3::new(
                e.x / r * inv,
                e.y / r * inv,
                -(e.x * q.x + e.y * q.y) / r * inv * inv,
            );
            g_h += dq * ph.transpose();
        }
    }
    let scale = 1.0 / eval_count as f64;
    loss *= scale;
    g_h *= scale;
    let g_hat_m = norm.t2_inv.transpose() * g_h * norm.t3.transpose();
    let g_hat = Vec12::from_fn(|i, _| g_hat_m[(i / 4, i % 4)]);

    // q = (M − λ₁I)⁺ g
    let mut q = Vec12::zeros();
    for i in 1..12 {
        let v = vec(i);
        q += v * (v.dot(&g_hat) / (lambda(i) - lambda(0)));
    }
    let grad = rows
        .iter()
        .zip(weights)
        .map(|(r, w)| {
            if *w == 0.0 {
                return 0.0;
            }
            let mut s = 0.0;
            for row in r {
                let a = Vec12::from_row_slice(row);
                s += a.dot(&h_hat) * a.dot(&q);
            }
            -2.0 * w * s
        })
        .collect();
    Ok(GeometricGradient {
        loss,
        grad,
        h,
        eval_count,
        eigen_gap: gap,
    })
}

/// Maximum consensus refits after the sampling loop.
pub const REFIT_ROUNDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_threshold_px: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            iterations: 500,
            inlier_threshold_px: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RansacResult {
    pub pose: Pose,
    pub h: ProjectionMatrix,
    pub inliers: Vec<bool>,
}

fn consensus(h: &ProjectionMatrix, corrs: &[Correspondence2D3D], threshold: f64) -> Vec<bool> {
    corrs
        .iter()
        .map(|c| {
            h.depth(&c.object) > MIN_HOMOGENEOUS_DEPTH
                && h.project(&c.object)
                    .map(|p| (p - c.image).norm() < threshold)
                    .unwrap_or(false)
        })
        .collect()
}

/// Minimal-sample RANSAC around [`dlt_solve`], refit on the best consensus
/// set. Iteration `i` draws from a stream derived from `(seed, i)`.
pub fn ransac_pnp(
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    params: &RansacParams,
) -> Result<RansacResult> {
    if corrs.len() < MIN_CORRESPONDENCES {
        return Err(Error::NoConsensus { best: 0 });
    }
    let mut best: Option<(usize, Vec<bool>)> = None;
    let mut sample_buf = Vec::with_capacity(MIN_CORRESPONDENCES);
    for it in 0..params.iterations {
        let mut r = rng::stream(params.seed, 0x5a4c, it as u64);
        sample_buf.clear();
        sample_buf.extend(
            sample(&mut r, corrs.len(), MIN_CORRESPONDENCES)
                .into_iter()
                .map(|i| corrs[i]),
        );
        let Ok(h) = dlt_solve(&sample_buf, None) else {
            continue;
        };
        let mask = consensus(&h, corrs, params.inlier_threshold_px);
        let count = mask.iter().filter(|m| **m).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, mask));
        }
    }
    let (count, mask) = best.unwrap_or((0, Vec::new()));
    if count < MIN_CORRESPONDENCES {
        return Err(Error::NoConsensus { best: count });
    }
    // local optimization: refit on the consensus set until it stops growing
    let select = |mask: &[bool]| -> Vec<Correspondence2D3D> {
        corrs.iter().zip(mask).filter(|(_, m)| **m).map(|(c, _)| *c).collect()
    };
    let mut count = count;
    let mut h = dlt_solve(&select(&mask), None)?;
    for _ in 0..REFIT_ROUNDS {
        let next = consensus(&h, corrs, params.inlier_threshold_px);
        let n = next.iter().filter(|m| **m).count();
        if n <= count || n < MIN_CORRESPONDENCES {
            break;
        }
        match dlt_solve(&select(&next), None) {
            Ok(refit) => {
                h = refit;
                count = n;
            }
            Err(_) => break,
        }
    }
    let mask = consensus(&h, corrs, params.inlier_threshold_px);
    let pose = decompose(&h, k)?;
    Ok(RansacResult {
        pose,
        h,
        inliers: mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{corners_from_extent, project};
    use crate::rng::rng_from;
    use rand::Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0).unwrap()
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Pose::from_axis_angle(
            axis,
            rng.random_range(-3.0..3.0),
            Vec3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(0.6..1.2),
            ),
        )
    }

    fn exact_corners(pose: &Pose) -> Vec<Correspondence2D3D> {
        corners_from_extent(0.12, 0.09, 0.07)
            .unwrap()
            .corners()
            .iter()
            .map(|c| Correspondence2D3D::new(project(&k(), pose, c).unwrap(), *c))
            .collect()
    }

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-0.06..0.06),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.04..0.04),
                )
            })
            .collect()
    }

    fn noisy_corrs(rng: &mut impl Rng, pose: &Pose, n: usize, sigma: f64) -> Vec<Correspondence2D3D> {
        random_points(rng, n)
            .into_iter()
            .map(|p| {
                let mut img = project(&k(), pose, &p).unwrap();
                img.x += sigma * rng.random_range(-1.0..1.0);
                img.y += sigma * rng.random_range(-1.0..1.0);
                Correspondence2D3D::new(img, p)
            })
            .collect()
    }

    fn same_up_to_sign(a: &ProjectionMatrix, b: &ProjectionMatrix) -> f64 {
        let d1 = (a.matrix() - b.matrix()).norm();
        let d2 = (a.matrix() + b.matrix()).norm();
        d1.min(d2)
    }

    #[test]
    fn design_rows_match_block() {
        let a = build_design_matrix(&[Correspondence2D3D::new(Vec2::zeros(), Vec3::zeros())]).a;
        let mut r0 = [0.0; 12];
        r0[3] = 1.0;
        let mut r1 = [0.0; 12];
        r1[7] = 1.0;
        assert_eq!(a.row(0).iter().copied().collect::<Vec<_>>(), r0);
        assert_eq!(a.row(1).iter().copied().collect::<Vec<_>>(), r1);

        let a = build_design_matrix(&[Correspondence2D3D::new(
            Vec2::new(2.0, 3.0),
            Vec3::new(1.0, 0.0, 0.0),
        )])
        .a;
        let expect = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, -2.0];
        assert_eq!(a.row(0).iter().copied().collect::<Vec<_>>(), expect);
        let expect = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, -3.0, 0.0, 0.0, -3.0];
        assert_eq!(a.row(1).iter().copied().collect::<Vec<_>>(), expect);
    }

    #[test]
    fn exact_projections_lie_in_null_space() {
        let mut rng = rng_from(21);
        for _ in 0..50 {
            let h = Matrix3x4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let h = ProjectionMatrix::from_matrix(h).unwrap();
            let corrs: Vec<_> = random_points(&mut rng, 20)
                .into_iter()
                .filter_map(|p| h.project(&p).ok().map(|img| Correspondence2D3D::new(img, p)))
                .filter(|c| c.image.norm() < 1e4)
                .collect();
            let a = build_design_matrix(&corrs).a;
            let hv = nalgebra::DVector::from_row_slice(&h.to_vec());
            let res = &a * hv;
            assert!(res.amax() < 1e-9, "{}", res.amax());
            // the smallest singular value of A is numerically zero
            let sv = SVD::new(a, false, false).singular_values;
            assert!(sv[sv.len() - 1] < 1e-9);
        }
    }

    #[test]
    fn exact_corners_reproject() {
        let mut rng = rng_from(1);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let corrs = exact_corners(&pose);
            let h = dlt_solve(&corrs, None).unwrap();
            let res = reprojection_residuals(&h, &corrs).unwrap();
            assert!(res.per_point.iter().all(|r| *r < 1e-6), "{res:?}");
            assert!((h.matrix().norm() - 1.0).abs() < 1e-12);
            // centroid in front
            assert!(h.depth(&Vec3::zeros()) > 0.0);
        }
    }

    #[test]
    fn duplicated_correspondences_give_same_h() {
        let mut rng = rng_from(2);
        let pose = random_pose(&mut rng);
        let corrs = noisy_corrs(&mut rng, &pose, 12, 1.0);
        let h1 = dlt_solve(&corrs, None).unwrap();
        let doubled: Vec<_> = corrs.iter().chain(corrs.iter()).copied().collect();
        let h2 = dlt_solve(&doubled, None).unwrap();
        assert!(same_up_to_sign(&h1, &h2) < 1e-12);
    }

    #[test]
    fn zero_weights_drop_outliers() {
        let mut rng = rng_from(3);
        let pose = random_pose(&mut rng);
        let clean: Vec<_> = noisy_corrs(&mut rng, &pose, 8, 0.0);
        let mut all = clean.clone();
        for _ in 0..4 {
            all.push(Correspondence2D3D::new(
                Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                random_points(&mut rng, 1)[0],
            ));
        }
        let mut w = vec![1.0; 12];
        w[8..].fill(0.0);
        let h_w = dlt_solve(&all, Some(&w)).unwrap();
        let h_c = dlt_solve(&clean, None).unwrap();
        assert!(same_up_to_sign(&h_w, &h_c) < 1e-10);
    }

    #[test]
    fn uniform_weight_scaling_is_invariant() {
        let mut rng = rng_from(4);
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let corrs = noisy_corrs(&mut rng, &pose, 15, 2.0);
            let w: Vec<f64> = (0..15).map(|_| rng.random_range(0.1..1.0)).collect();
            let c = rng.random_range(1e-3..1e3);
            let wc: Vec<f64> = w.iter().map(|x| x * c).collect();
            let h1 = dlt_solve(&corrs, Some(&w)).unwrap();
            let h2 = dlt_solve(&corrs, Some(&wc)).unwrap();
            assert!((h1.matrix() - h2.matrix()).norm() < 1e-12);
        }
    }

    #[test]
    fn too_few_or_degenerate() {
        let mut rng = rng_from(5);
        let pose = random_pose(&mut rng);
        let corrs = noisy_corrs(&mut rng, &pose, 5, 0.0);
        assert!(matches!(
            dlt_solve(&corrs, None),
            Err(Error::DegenerateConfiguration(_))
        ));
        let corrs = noisy_corrs(&mut rng, &pose, 10, 0.0);
        let mut w = vec![0.0; 10];
        w[..5].fill(1.0);
        assert!(dlt_solve(&corrs, Some(&w)).is_err());
        // all object points on the z = 0 plane
        let planar: Vec<_> = (0..10)
            .map(|i| {
                let p = Vec3::new(0.01 * i as f64, 0.02 * ((i * 7) % 5) as f64, 0.0);
                Correspondence2D3D::new(project(&k(), &pose, &p).unwrap(), p)
            })
            .collect();
        assert!(matches!(
            dlt_solve(&planar, None),
            Err(Error::DegenerateConfiguration(_))
        ));
        assert!(dlt_solve(&corrs, Some(&[1.0; 3])).is_err());
        let mut neg = vec![1.0; 10];
        neg[0] = -1.0;
        assert!(dlt_solve(&corrs, Some(&neg)).is_err());
    }

    #[test]
    fn decompose_round_trip() {
        let mut rng = rng_from(6);
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let h = ProjectionMatrix::from_pose(&k(), &pose);
            let rec = decompose(&h, &k()).unwrap();
            assert!(rec.rotation_error(&pose) < 1e-6);
            assert!(rec.translation_error(&pose) < 1e-8);
            let rec_neg = decompose(&h.negated(), &k()).unwrap();
            assert!(rec_neg.rotation_error(&pose) < 1e-6);
            assert!(rec_neg.translation_error(&pose) < 1e-8);
        }
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, 1.0));
        let rec = decompose(&ProjectionMatrix::from_pose(&k(), &pose), &k()).unwrap();
        assert!((rec.rotation - Matrix3::identity()).norm() < 1e-15);
        assert!((rec.translation - pose.translation).norm() < 1e-15);
    }

    #[test]
    fn decompose_rejects_singular_block() {
        let m = Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let h = ProjectionMatrix::from_matrix(m).unwrap();
        assert!(decompose(&h, &k()).is_err());
    }

    #[test]
    fn residual_examples() {
        let mut rng = rng_from(7);
        let pose = random_pose(&mut rng);
        let mut corrs = exact_corners(&pose);
        let h = ProjectionMatrix::from_pose(&k(), &pose);
        let res = reprojection_residuals(&h, &corrs).unwrap();
        assert!(res.per_point.iter().all(|r| *r < 1e-9));
        corrs[2].image += Vec2::new(3.0, 4.0);
        let res = reprojection_residuals(&h, &corrs).unwrap();
        assert!((res.per_point[2] - 5.0).abs() < 1e-9);
        let pair = [corrs[0], corrs[2]];
        let res = reprojection_residuals(&h, &pair).unwrap();
        assert!((res.mean - 2.5).abs() < 1e-9);
        assert!(matches!(
            reprojection_residuals(&h, &[]),
            Err(Error::EmptyEvaluation)
        ));
    }

    /// Central difference of the geometric loss in weight `i`.
    fn fd(corrs: &[Correspondence2D3D], w: &[f64], mask: &[bool], i: usize, h: f64) -> f64 {
        let mut wp = w.to_vec();
        wp[i] += h;
        let mut wm = w.to_vec();
        wm[i] -= h;
        (geometric_loss_on(corrs, &wp, mask).unwrap() - geometric_loss_on(corrs, &wm, mask).unwrap())
            / (2.0 * h)
    }

    fn rel(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = rng_from(8);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let corrs = noisy_corrs(&mut rng, &pose, 16, 3.0);
            let w: Vec<f64> = (0..16).map(|_| rng.random_range(0.2..1.0)).collect();
            let g = dlt_weight_gradient(&corrs, &w).unwrap();
            let mask = vec![true; 16];
            for i in 0..16 {
                let n = fd(&corrs, &w, &mask, i, 1e-5);
                assert!(rel(g.grad[i], n) < 1e-4, "{} vs {}", g.grad[i], n);
            }
            // uniform scaling direction
            let dir: f64 = g.grad.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!(dir.abs() < 1e-8, "{dir}");
        }
    }

    #[test]
    fn zero_weight_gradient_vanishes() {
        let mut rng = rng_from(9);
        let pose = random_pose(&mut rng);
        let mut corrs = noisy_corrs(&mut rng, &pose, 12, 1.0);
        corrs[11].image += Vec2::new(40.0, -25.0);
        let mut w = vec![1.0; 12];
        w[11] = 0.0;
        let mask: Vec<bool> = w.iter().map(|x| *x > 0.0).collect();
        let g = dlt_weight_gradient_on(&corrs, &w, &mask).unwrap();
        assert_eq!(g.grad[11], 0.0);
        // one-sided second-order difference at w = 0⁺
        let h = 1e-4;
        let f = |x: f64| {
            let mut wx = w.clone();
            wx[11] = x;
            geometric_loss_on(&corrs, &wx, &mask).unwrap()
        };
        let one_sided = (-3.0 * f(0.0) + 4.0 * f(h) - f(2.0 * h)) / (2.0 * h);
        let scale = g.grad.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!((one_sided - g.grad[11]).abs() < 1e-4 * scale, "{one_sided} vs scale {scale}");
    }

    #[test]
    fn ransac_exact_data() {
        let mut rng = rng_from(10);
        let pose = random_pose(&mut rng);
        let corrs = noisy_corrs(&mut rng, &pose, 60, 0.0);
        let res = ransac_pnp(&corrs, &k(), &RansacParams::default()).unwrap();
        assert!(res.inliers.iter().all(|m| *m));
        assert!(res.pose.rotation_error(&pose) < 1e-6);
        assert!(res.pose.translation_error(&pose) < 1e-6);
        let direct = dlt_solve(&corrs, None).unwrap();
        let a = reprojection_residuals(&res.h, &corrs).unwrap();
        let b = reprojection_residuals(&direct, &corrs).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-9);
    }

    #[test]
    fn ransac_needs_six() {
        let mut rng = rng_from(11);
        let pose = random_pose(&mut rng);
        let corrs = noisy_corrs(&mut rng, &pose, 5, 0.0);
        assert!(matches!(
            ransac_pnp(&corrs, &k(), &RansacParams::default()),
            Err(Error::NoConsensus { .. })
        ));
    }

    #[test]
    fn ransac_rejects_gross_outliers() {
        let mut ok = 0;
        for seed in 0..100u64 {
            let mut rng = rng_from(1000 + seed);
            let pose = random_pose(&mut rng);
            let mut corrs = noisy_corrs(&mut rng, &pose, 60, 0.0);
            let mut is_outlier = vec![false; 60];
            for i in 0..24 {
                let truth = corrs[i].image;
                loop {
                    let p = Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                    if (p - truth).norm() > 20.0 {
                        corrs[i].image = p;
                        break;
                    }
                }
                is_outlier[i] = true;
            }
            let params = RansacParams {
                iterations: 500,
                inlier_threshold_px: 3.0,
                seed,
            };
            let res = ransac_pnp(&corrs, &k(), &params).unwrap();
            if res.inliers.iter().zip(&is_outlier).all(|(m, o)| !(*m && *o)) {
                ok += 1;
            }
        }
        assert!(ok >= 99, "{ok}/100");
    }

    #[test]
    fn ransac_deterministic() {
        let mut rng = rng_from(12);
        let pose = random_pose(&mut rng);
        let mut corrs = noisy_corrs(&mut rng, &pose, 40, 1.0);
        for c in corrs.iter_mut().take(10) {
            c.image = Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        }
        let p = RansacParams {
            seed: 99,
            ..Default::default()
        };
        let a = ransac_pnp(&corrs, &k(), &p).unwrap();
        let b = ransac_pnp(&corrs, &k(), &p).unwrap();
        assert_eq!(a.inliers, b.inliers);
        assert_eq!(a.h, b.h);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn weight_scale_invariance(seed in 0u64..10_000, c in 1e-2f64..1e2) {
                let mut rng = rng_from(seed);
                let pose = random_pose(&mut rng);
                let corrs = noisy_corrs(&mut rng, &pose, 10, 1.5);
                let w: Vec<f64> = (0..10).map(|_| rng.random_range(0.05..1.0)).collect();
                let wc: Vec<f64> = w.iter().map(|x| x * c).collect();
                let h1 = dlt_solve(&corrs, Some(&w)).unwrap();
                let h2 = dlt_solve(&corrs, Some(&wc)).unwrap();
                prop_assert!((h1.matrix() - h2.matrix()).norm() < 1e-12);
            }
        }
    }
}
