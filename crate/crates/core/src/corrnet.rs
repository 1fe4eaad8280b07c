//! Correspondence-evaluation network.
//!
//! A permutation-equivariant set network: every hypothesis goes through the
//! same perceptrons, and context normalization across the set gives each one
//! a view of the others. The per-hypothesis logit `o` becomes a weight
//! `relu(tanh(o))`; hypotheses with positive weight are predicted inliers and
//! the pose is the weighted DLT solution over them.
//!
//! Training combines a class-balanced cross-entropy on the inlier labels with
//! the mean reprojection residual of the weighted solve, differentiated
//! through the solver.

use rand::seq::SliceRandom;

use crate::geom::{CameraIntrinsics, Correspondence2D3D};
use crate::nnet::{
    context_normalize, context_normalize_backward, relu, relu_backward, Adam, ContextNormCache,
    Dense, Mat, ParamTensor, Parameterized,
};
use crate::rng::{rng_from, stream};
use crate::solver::{dlt_solve, dlt_weight_gradient, ProjectionMatrix, MIN_CORRESPONDENCES};
use crate::{Error, Result};

pub const MIN_SET_SIZE: usize = 8;
pub const INPUT_DIM: usize = 5;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.15;
/// Distinct object points the predicted inliers must span for the
/// geometric term. With six or seven the weighted DLT is (almost) exactly
/// determined, so its residual rewards switching whole corners off.
pub const GEO_MIN_OBJECT_POINTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CorrNetConfig {
    pub width: usize,
    pub blocks: usize,
}

impl Default for CorrNetConfig {
    fn default() -> Self {
        CorrNetConfig {
            width: 64,
            blocks: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    first: Dense,
    second: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrNetModel {
    pub config: CorrNetConfig,
    input: Dense,
    blocks: Vec<Block>,
    head: Dense,
}

impl Parameterized for CorrNetModel {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut v = self.input.params();
        for b in &self.blocks {
            v.extend(b.first.params());
            v.extend(b.second.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = self.input.params_mut();
        for b in &mut self.blocks {
            v.extend(b.first.params_mut());
            v.extend(b.second.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

/// Per-hypothesis input: normalized camera coordinates and object
/// coordinates in units of the object diameter.
pub fn input_features(corrs: &[Correspondence2D3D], k: &CameraIntrinsics, diameter: f64) -> Mat {
    let mut x = Mat::zeros(corrs.len(), INPUT_DIM);
    for (r, c) in corrs.iter().enumerate() {
        let p = k.normalize(&c.image);
        x.row_mut(r)
            .copy_from_slice(&[p.x, p.y, c.object.x / diameter, c.object.y / diameter, c.object.z / diameter]);
    }
    x
}

struct BlockCache {
    input: Mat,
    cn1: ContextNormCache,
    r1: Mat,
    cn2: ContextNormCache,
    r2: Mat,
}

pub struct CorrNetCache {
    x: Mat,
    blocks: Vec<BlockCache>,
    last: Mat,
}

/// Weight from a logit: `relu(tanh(o))`.
pub fn logit_to_weight(o: f64) -> f64 {
    o.tanh().max(0.0)
}

impl CorrNetModel {
    /// He-initialized layers with a zero output head.
    pub fn new(config: CorrNetConfig, seed: u64) -> Result<Self> {
        if config.width == 0 {
            return Err(Error::InvalidParameter("correspondence network width must be positive".into()));
        }
        let mut rng = rng_from(seed);
        let d = config.width;
        let input = Dense::new("cn.input", INPUT_DIM, d, &mut rng);
        let blocks = (0..config.blocks)
            .map(|i| Block {
                first: Dense::new(&format!("cn.block{i}.a"), d, d, &mut rng),
                second: Dense::new(&format!("cn.block{i}.b"), d, d, &mut rng),
            })
            .collect();
        Ok(CorrNetModel {
            config,
            input,
            blocks,
            head: Dense::zeros("cn.head", d, 1),
        })
    }

    pub fn from_tensors(config: CorrNetConfig, tensors: Vec<ParamTensor>) -> Result<Self> {
        let mut m = CorrNetModel::new(config, 0)?;
        let mut it = tensors.into_iter();
        for p in m.params_mut() {
            let t = it
                .next()
                .ok_or_else(|| Error::Format(format!("missing tensor {}", p.name)))?;
            if t.name != p.name || t.shape != p.shape {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, p.name, p.shape
                )));
            }
            p.value = t.value;
        }
        if it.next().is_some() {
            return Err(Error::Format("unexpected extra tensors".into()));
        }
        Ok(m)
    }

    /// Logits for one set of input features (`N × 5`).
    pub fn logits(&self, x: &Mat) -> Result<(Vec<f64>, CorrNetCache)> {
        if x.rows < MIN_SET_SIZE {
            return Err(Error::DegenerateSet(x.rows));
        }
        let mut a = self.input.forward(x)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (n1, cn1) = context_normalize(&b.first.forward(&a)?)?;
            let r1 = relu(&n1);
            let (n2, cn2) = context_normalize(&b.second.forward(&r1)?)?;
            let r2 = relu(&n2);
            let mut out = a.clone();
            out.add_assign(&r2);
            caches.push(BlockCache {
                input: a,
                cn1,
                r1,
                cn2,
                r2,
            });
            a = out;
        }
        let o = self.head.forward(&a)?;
        Ok((
            o.data,
            CorrNetCache {
                x: x.clone(),
                blocks: caches,
                last: a,
            },
        ))
    }

    /// Accumulate parameter gradients for `∂L/∂logits`.
    pub fn backward(&mut self, cache: &CorrNetCache, dlogits: &[f64]) {
        let dy = Mat {
            rows: dlogits.len(),
            cols: 1,
            data: dlogits.to_vec(),
        };
        let mut g = self.head.backward(&cache.last, &dy);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            let g_n2 = relu_backward(&c.r2, &g);
            let g_h2 = context_normalize_backward(&c.cn2, &g_n2);
            let g_r1 = b.second.backward(&c.r1, &g_h2);
            let g_n1 = relu_backward(&c.r1, &g_r1);
            let g_h1 = context_normalize_backward(&c.cn1, &g_n1);
            let mut g_in = b.first.backward(&c.input, &g_h1);
            g_in.add_assign(&g);
            g = g_in;
        }
        self.input.backward_params(&cache.x, &g);
    }
}

/// Hypotheses with their predicted weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCorrespondences {
    pub corrs: Vec<Correspondence2D3D>,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub predicted_inlier: Vec<bool>,
}

impl WeightedCorrespondences {
    pub fn inlier_count(&self) -> usize {
        self.predicted_inlier.iter().filter(|x| **x).count()
    }

    /// Weighted DLT over the predicted inliers.
    pub fn solve(&self) -> Result<ProjectionMatrix> {
        dlt_solve(&self.corrs, Some(&self.weights))
    }
}

pub fn corrnet_forward(
    model: &CorrNetModel,
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    diameter: f64,
) -> Result<WeightedCorrespondences> {
    if corrs.len() < MIN_SET_SIZE {
        return Err(Error::DegenerateSet(corrs.len()));
    }
    let (logits, _) = model.logits(&input_features(corrs, k, diameter))?;
    let weights: Vec<f64> = logits.iter().map(|o| logit_to_weight(*o)).collect();
    Ok(WeightedCorrespondences {
        corrs: corrs.to_vec(),
        predicted_inlier: weights.iter().map(|w| *w > 0.0).collect(),
        logits,
        weights,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Class-balanced binary cross-entropy of `sigmoid(logit)` against the
/// labels. Each class gets total weight `N/2` (all `N` when only one class
/// is present), so all-zero logits give `ln 2`.
pub fn classification_loss(logits: &[f64], labels: &[bool]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), labels.len());
    let n = logits.len() as f64;
    let pos = labels.iter().filter(|l| **l).count() as f64;
    let neg = n - pos;
    let (wp, wn) = match (pos > 0.0, neg > 0.0) {
        (true, true) => (n / (2.0 * pos), n / (2.0 * neg)),
        _ => (1.0, 1.0),
    };
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(o, y)| {
            let (w, t) = if *y { (wp, 1.0) } else { (wn, 0.0) };
            // -t·ln σ(o) - (1-t)·ln(1-σ(o))
            loss += w * if *y { softplus(-o) } else { softplus(*o) };
            w * (sigmoid(*o) - t) / n
        })
        .collect();
    (loss / n, grad)
}

/// `α·L_cla + β·L_geo`, with a skipped geometric term contributing nothing.
pub fn combine_loss(alpha: f64, beta: f64, classification: f64, geometric: Option<f64>) -> f64 {
    alpha * classification + geometric.map_or(0.0, |g| beta * g)
}

/// Loss terms of one set.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridLoss {
    pub total: f64,
    pub classification: f64,
    /// `None` when the geometric term was skipped.
    pub geometric: Option<f64>,
    pub grad: Vec<f64>,
}

fn covered_object_points(corrs: &[Correspondence2D3D], weights: &[f64]) -> usize {
    let mut pts: Vec<[u64; 3]> = corrs
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(c, _)| [c.object.x.to_bits(), c.object.y.to_bits(), c.object.z.to_bits()])
        .collect();
    pts.sort_unstable();
    pts.dedup();
    pts.len()
}

/// `α·L_cla + β·L_geo` and its gradient with respect to the logits.
///
/// The geometric term is skipped (classification only) when fewer than six
/// hypotheses are predicted inliers, when they span fewer than
/// [`GEO_MIN_OBJECT_POINTS`] distinct object points, or when the solve is
/// ill-conditioned.
pub fn hybrid_loss(
    logits: &[f64],
    corrs: &[Correspondence2D3D],
    labels: &[bool],
    alpha: f64,
    beta: f64,
) -> HybridLoss {
    let (cla, mut grad) = classification_loss(logits, labels);
    grad.iter_mut().for_each(|g| *g *= alpha);
    let weights: Vec<f64> = logits.iter().map(|o| logit_to_weight(*o)).collect();
    let active = weights.iter().filter(|w| **w > 0.0).count();
    let mut geometric = None;
    if beta != 0.0
        && active >= MIN_CORRESPONDENCES
        && covered_object_points(corrs, &weights) >= GEO_MIN_OBJECT_POINTS
    {
        if let Ok(g) = dlt_weight_gradient(corrs, &weights) {
            if g.loss.is_finite() && g.grad.iter().all(|x| x.is_finite()) {
                geometric = Some(g.loss);
                for ((gr, gw), o) in grad.iter_mut().zip(&g.grad).zip(logits) {
                    if *o > 0.0 {
                        let t = o.tanh();
                        *gr += beta * gw * (1.0 - t * t);
                    }
                }
            }
        }
    }
    HybridLoss {
        total: combine_loss(alpha, beta, cla, geometric),
        classification: cla,
        geometric,
        grad,
    }
}

/// A labeled hypothesis set with the camera and object scale it lives in.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrNetSample {
    pub corrs: Vec<Correspondence2D3D>,
    pub labels: Vec<bool>,
    pub k: CameraIntrinsics,
    pub diameter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrNetTrainParams {
    pub epochs: usize,
    /// Sets per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Epochs trained on the classification term alone before the
    /// geometric term is switched on.
    pub geo_warmup_epochs: usize,
    pub seed: u64,
}

impl Default for CorrNetTrainParams {
    fn default() -> Self {
        CorrNetTrainParams {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            geo_warmup_epochs: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrNetEpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub classification: f64,
    /// Mean over the sets where the geometric term was active.
    pub geometric: f64,
    pub geometric_fraction: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct CorrNetTrainer {
    pub model: CorrNetModel,
    pub opt: Adam,
    pub params: CorrNetTrainParams,
    pub epoch: usize,
}

/// Fraction of hypotheses whose predicted label (`logit > 0`) is correct.
pub fn classification_accuracy(logits: &[f64], labels: &[bool]) -> f64 {
    let ok = logits.iter().zip(labels).filter(|(o, l)| (**o > 0.0) == **l).count();
    ok as f64 / logits.len().max(1) as f64
}

impl CorrNetTrainer {
    pub fn new(config: CorrNetConfig, params: CorrNetTrainParams) -> Result<Self> {
        Ok(CorrNetTrainer {
            model: CorrNetModel::new(config, params.seed)?,
            opt: Adam::new(params.learning_rate),
            params,
            epoch: 0,
        })
    }

    pub fn train_epoch(&mut self, data: &[CorrNetSample]) -> Result<CorrNetEpochLog> {
        if data.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        let beta = if self.epoch < self.params.geo_warmup_epochs {
            0.0
        } else {
            self.params.beta
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(self.params.seed, 0x5F, self.epoch as u64));
        let (mut loss, mut cla, mut geo, mut geo_n, mut acc) = (0.0, 0.0, 0.0, 0usize, 0.0);
        for chunk in order.chunks(self.params.batch_size.max(1)) {
            self.model.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let s = &data[i];
                let x = input_features(&s.corrs, &s.k, s.diameter);
                let (logits, cache) = self.model.logits(&x)?;
                let h = hybrid_loss(&logits, &s.corrs, &s.labels, self.params.alpha, beta);
                if !h.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: self.epoch,
                        step: self.opt.step as usize,
                        detail: format!("correspondence loss {} on set {i}", h.total),
                    });
                }
                let g: Vec<f64> = h.grad.iter().map(|v| v * scale).collect();
                self.model.backward(&cache, &g);
                loss += h.total;
                cla += h.classification;
                if let Some(gl) = h.geometric {
                    geo += gl;
                    geo_n += 1;
                }
                acc += classification_accuracy(&logits, &s.labels);
            }
            self.opt.step(&mut self.model.params_mut())?;
        }
        let n = data.len() as f64;
        let log = CorrNetEpochLog {
            epoch: self.epoch,
            step: self.opt.step,
            loss: loss / n,
            classification: cla / n,
            geometric: if geo_n > 0 { geo / geo_n as f64 } else { 0.0 },
            geometric_fraction: geo_n as f64 / n,
            accuracy: acc / n,
        };
        self.epoch += 1;
        Ok(log)
    }
}

pub fn corrnet_train(
    data: &[CorrNetSample],
    config: CorrNetConfig,
    params: CorrNetTrainParams,
) -> Result<(CorrNetModel, Vec<CorrNetEpochLog>)> {
    let mut t = CorrNetTrainer::new(config, params)?;
    let mut logs = Vec::with_capacity(params.epochs);
    for _ in 0..params.epochs {
        logs.push(t.train_epoch(data)?);
    }
    Ok((t.model, logs))
}
