//! Projection-grouping network.
//!
//! A fully connected map over the flattened 8-channel heatmap crop that
//! learns which combination of peaks is geometrically consistent, followed
//! by an independent softmax per channel. With the shortcut enabled the
//! network output is added to its input, so it learns a correction to the
//! per-channel argmax rather than a grouping from scratch.
//!
//! The network runs at a fixed resolution. [`CropWindow`] maps a
//! full-resolution stack onto it (tight box around all detected peaks,
//! padded, bilinear resampling) and maps selections back.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::geom::Vec2;
use crate::heatmap::{peak_list, HeatmapStack, DEFAULT_NMS_RADIUS, DEFAULT_PEAK_FLOOR, NUM_CHANNELS};
use crate::nnet::{
    dropout, dropout_backward, relu, relu_backward, softmax, softmax_cross_entropy, Adam, Dense,
    Mat, ParamTensor, Parameterized,
};
use crate::rng::{rng_from, stream};
use crate::{Error, Result};

pub const DROPOUT_RATE: f64 = 0.5;
/// Relative padding added on every side of the peak bounding box.
pub const CROP_PADDING: f64 = 0.2;
/// Crops never shrink below this many source pixels per side.
pub const MIN_CROP_SIDE: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PgmConfig {
    pub layers: usize,
    pub hidden: usize,
    pub shortcut: bool,
    pub dropout: bool,
    pub resolution: (usize, usize),
}

impl Default for PgmConfig {
    fn default() -> Self {
        PgmConfig {
            layers: 2,
            hidden: 2048,
            shortcut: true,
            dropout: true,
            resolution: (32, 32),
        }
    }
}

impl PgmConfig {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.resolution;
        if self.layers == 0 || self.hidden == 0 || w == 0 || h == 0 {
            return Err(Error::InvalidParameter(format!("invalid grouping network {self:?}")));
        }
        Ok(())
    }

    /// Flattened input/output length, `8·w·h`.
    pub fn io_len(&self) -> usize {
        NUM_CHANNELS * self.resolution.0 * self.resolution.1
    }

    pub fn channel_len(&self) -> usize {
        self.resolution.0 * self.resolution.1
    }

    /// The sixteen combinations of 1/2 layers, 1024/2048 units, with and
    /// without shortcut and dropout, at the given resolution.
    pub fn sweep(resolution: (usize, usize)) -> Vec<PgmConfig> {
        let mut out = Vec::new();
        for layers in [1, 2] {
            for hidden in [1024, 2048] {
                for shortcut in [true, false] {
                    for dropout in [false, true] {
                        out.push(PgmConfig {
                            layers,
                            hidden,
                            shortcut,
                            dropout,
                            resolution,
                        });
                    }
                }
            }
        }
        out
    }
}

/// `PG-x-y`, then ` w/o SC` without shortcut, then `+D` with dropout.
impl fmt::Display for PgmConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PG-{}-{}", self.layers, self.hidden)?;
        if !self.shortcut {
            write!(f, " w/o SC")?;
        }
        if self.dropout {
            write!(f, "+D")?;
        }
        Ok(())
    }
}

/// Parses the [`Display`](fmt::Display) form; resolution defaults to 32×32.
impl FromStr for PgmConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("cannot parse grouping network name {s:?}"));
        let mut rest = s.trim();
        let dropout = rest.ends_with("+D");
        if dropout {
            rest = rest[..rest.len() - 2].trim_end();
        }
        let shortcut = !rest.ends_with("w/o SC");
        if !shortcut {
            rest = rest[..rest.len() - 6].trim_end();
        }
        let mut parts = rest.strip_prefix("PG-").ok_or_else(bad)?.split('-');
        let layers = parts.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
        let hidden = parts.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        let c = PgmConfig {
            layers,
            hidden,
            shortcut,
            dropout,
            ..PgmConfig::default()
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgmModel {
    pub config: PgmConfig,
    pub hidden: Vec<Dense>,
    pub output: Dense,
}

impl Parameterized for PgmModel {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut v: Vec<&ParamTensor> = self.hidden.iter().flat_map(|d| d.params()).collect();
        v.extend(self.output.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v: Vec<&mut ParamTensor> =
            self.hidden.iter_mut().flat_map(|d| d.params_mut()).collect();
        v.extend(self.output.params_mut());
        v
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PgmCache {
    inputs: Vec<Mat>,
    activations: Vec<Mat>,
    mask: Option<Vec<f64>>,
}

impl PgmModel {
    /// He-initialized hidden layers and a zero output layer, so training
    /// starts from the residual identity when the shortcut is on.
    pub fn new(config: PgmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let n = config.io_len();
        let hidden = (0..config.layers)
            .map(|l| {
                let d_in = if l == 0 { n } else { config.hidden };
                Dense::new(&format!("pg.dense{l}"), d_in, config.hidden, &mut rng)
            })
            .collect();
        Ok(PgmModel {
            config,
            hidden,
            output: Dense::zeros("pg.out", config.hidden, n),
        })
    }

    /// Rebuild from named tensors, checking every shape.
    pub fn from_tensors(config: PgmConfig, tensors: Vec<ParamTensor>) -> Result<Self> {
        let mut m = PgmModel::new(config, 0)?;
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

    /// Logits for a batch of flattened stacks (`batch × 8wh`).
    pub fn forward_logits(&self, x: &Mat, training: bool, rng: &mut impl Rng) -> Result<(Mat, PgmCache)> {
        if x.cols != self.config.io_len() {
            return Err(Error::ShapeMismatch(format!(
                "grouping input has {} values, expected {}",
                x.cols,
                self.config.io_len()
            )));
        }
        let mut cache = PgmCache {
            inputs: Vec::with_capacity(self.hidden.len() + 1),
            activations: Vec::with_capacity(self.hidden.len()),
            mask: None,
        };
        let mut a = x.clone();
        for (l, d) in self.hidden.iter().enumerate() {
            let r = relu(&d.forward(&a)?);
            cache.inputs.push(a);
            a = if l == 0 && self.config.dropout {
                let (y, mask) = dropout(&r, DROPOUT_RATE, training, rng);
                cache.mask = mask;
                y
            } else {
                r.clone()
            };
            cache.activations.push(r);
        }
        let mut out = self.output.forward(&a)?;
        cache.inputs.push(a);
        if self.config.shortcut {
            out.add_assign(x);
        }
        Ok((out, cache))
    }

    /// Accumulate parameter gradients for `∂L/∂logits`.
    pub fn backward(&mut self, cache: &PgmCache, dlogits: &Mat) {
        let last = cache.inputs.len() - 1;
        let mut g = self.output.backward(&cache.inputs[last], dlogits);
        for l in (0..self.hidden.len()).rev() {
            if l == 0 && self.config.dropout {
                g = dropout_backward(&g, cache.mask.as_deref());
            }
            g = relu_backward(&cache.activations[l], &g);
            if l == 0 {
                self.hidden[l].backward_params(&cache.inputs[l], &g);
            } else {
                g = self.hidden[l].backward(&cache.inputs[l], &g);
            }
        }
    }

    /// Filtered stack: per-channel probabilities over the `w·h` bins.
    pub fn forward(&self, merged: &HeatmapStack, training: bool, rng: &mut impl Rng) -> Result<HeatmapStack> {
        let (w, h) = self.config.resolution;
        if merged.width() != w || merged.height() != h {
            return Err(Error::ShapeMismatch(format!(
                "stack is {}x{}, network expects {w}x{h}",
                merged.width(),
                merged.height()
            )));
        }
        let x = stack_to_row(merged);
        let (logits, _) = self.forward_logits(&x, training, rng)?;
        let probs = softmax(&logits, self.config.channel_len());
        HeatmapStack::from_data(w, h, probs.data.iter().map(|p| *p as f32).collect())
    }
}

/// Inference-mode [`PgmModel::forward`].
pub fn pgm_forward(model: &PgmModel, merged: &HeatmapStack) -> Result<HeatmapStack> {
    model.forward(merged, false, &mut rng_from(0))
}

pub fn stack_to_row(s: &HeatmapStack) -> Mat {
    Mat {
        rows: 1,
        cols: s.data().len(),
        data: s.data().iter().map(|v| *v as f64).collect(),
    }
}

/// Per-channel distributions from a ground-truth stack. Empty channels
/// become uniform.
pub fn target_distribution(gt: &HeatmapStack) -> Vec<f64> {
    let n = gt.width() * gt.height();
    let mut out = Vec::with_capacity(n * NUM_CHANNELS);
    for c in 0..NUM_CHANNELS {
        let ch = gt.channel(c);
        let s: f64 = ch.iter().map(|v| *v as f64).sum();
        if s > 0.0 {
            out.extend(ch.iter().map(|v| *v as f64 / s));
        } else {
            out.extend(std::iter::repeat_n(1.0 / n as f64, n));
        }
    }
    out
}

/// Mean over the batch of the per-channel cross-entropies, summed over the
/// eight channels.
pub fn pgm_loss(logits: &Mat, targets: &Mat, channel_len: usize) -> (f64, Mat) {
    softmax_cross_entropy(logits, targets, channel_len)
}

/// Argmax and value of every channel; ties go to the smallest `(v, u)`.
pub fn select_projections(filtered: &HeatmapStack) -> [(Vec2, f32); NUM_CHANNELS] {
    std::array::from_fn(|c| {
        let (u, v, val) = filtered.argmax(c);
        (Vec2::new(u as f64, v as f64), val)
    })
}

/// Square source window resampled onto the network grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out_w: usize,
    pub out_h: usize,
}

impl CropWindow {
    /// Padded square around every peak of `stack` (whole image if none).
    pub fn around_peaks(stack: &HeatmapStack, out: (usize, usize)) -> CropWindow {
        let peaks = peak_list(stack, DEFAULT_PEAK_FLOOR, DEFAULT_NMS_RADIUS);
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in peaks.iter().flatten() {
            lo = lo.inf(&p.position());
            hi = hi.sup(&p.position());
        }
        if !lo.x.is_finite() {
            lo = Vec2::zeros();
            hi = Vec2::new(stack.width() as f64 - 1.0, stack.height() as f64 - 1.0);
        }
        let span = (hi - lo).max();
        let side = (span * (1.0 + 2.0 * CROP_PADDING)).max(MIN_CROP_SIDE);
        let center = (lo + hi) * 0.5;
        CropWindow {
            x0: center.x - side * 0.5,
            y0: center.y - side * 0.5,
            side,
            out_w: out.0,
            out_h: out.1,
        }
    }

    /// Source coordinate of network pixel `(i, j)`.
    pub fn to_source(&self, p: &Vec2) -> Vec2 {
        Vec2::new(
            self.x0 + (p.x + 0.5) * self.side / self.out_w as f64 - 0.5,
            self.y0 + (p.y + 0.5) * self.side / self.out_h as f64 - 0.5,
        )
    }

    pub fn to_network(&self, p: &Vec2) -> Vec2 {
        Vec2::new(
            (p.x + 0.5 - self.x0) * self.out_w as f64 / self.side - 0.5,
            (p.y + 0.5 - self.y0) * self.out_h as f64 / self.side - 0.5,
        )
    }

    /// Bilinear resample of every channel, renormalized to unit maxima.
    pub fn apply(&self, stack: &HeatmapStack) -> HeatmapStack {
        let (w, h) = (stack.width(), stack.height());
        let mut out = vec![0f32; self.out_w * self.out_h * NUM_CHANNELS];
        let n = self.out_w * self.out_h;
        for j in 0..self.out_h {
            for i in 0..self.out_w {
                let s = self.to_source(&Vec2::new(i as f64, j as f64));
                let (fx, fy) = (s.x.floor(), s.y.floor());
                let (ax, ay) = ((s.x - fx) as f32, (s.y - fy) as f32);
                let taps = [
                    (fx, fy, (1.0 - ax) * (1.0 - ay)),
                    (fx + 1.0, fy, ax * (1.0 - ay)),
                    (fx, fy + 1.0, (1.0 - ax) * ay),
                    (fx + 1.0, fy + 1.0, ax * ay),
                ];
                for c in 0..NUM_CHANNELS {
                    let ch = stack.channel(c);
                    let mut v = 0f32;
                    for (x, y, wt) in taps {
                        if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                            v += wt * ch[y as usize * w + x as usize];
                        }
                    }
                    out[c * n + j * self.out_w + i] = v.clamp(0.0, 1.0);
                }
            }
        }
        let mut s = HeatmapStack::from_data(self.out_w, self.out_h, out).expect("values clamped to [0, 1]");
        s.normalize();
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgmTrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PgmTrainParams {
    fn default() -> Self {
        PgmTrainParams {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// One training example at network resolution: the input stack and the
/// flattened per-channel target distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct PgmSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

impl PgmSample {
    pub fn new(merged: &HeatmapStack, gt: &HeatmapStack) -> Result<Self> {
        if (merged.width(), merged.height()) != (gt.width(), gt.height()) {
            return Err(Error::DimensionMismatch("input and target sizes differ".into()));
        }
        Ok(PgmSample {
            input: merged.data().iter().map(|v| *v as f64).collect(),
            target: target_distribution(gt),
        })
    }
}

/// Training example from a full-resolution merged stack and its
/// ground-truth stack, both resampled through the crop window around the
/// merged stack's peaks.
pub fn crop_sample(
    merged: &HeatmapStack,
    gt: &HeatmapStack,
    resolution: (usize, usize),
) -> Result<(PgmSample, CropWindow)> {
    let crop = CropWindow::around_peaks(merged, resolution);
    Ok((PgmSample::new(&crop.apply(merged), &crop.apply(gt))?, crop))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct PgmTrainer {
    pub model: PgmModel,
    pub opt: Adam,
    pub params: PgmTrainParams,
    pub epoch: usize,
}

impl PgmTrainer {
    pub fn new(config: PgmConfig, params: PgmTrainParams) -> Result<Self> {
        Ok(PgmTrainer {
            model: PgmModel::new(config, params.seed)?,
            opt: Adam::new(params.learning_rate),
            params,
            epoch: 0,
        })
    }

    fn batch(data: &[PgmSample], idx: &[usize], n: usize) -> (Mat, Mat) {
        let mut x = Mat::zeros(idx.len(), n);
        let mut t = Mat::zeros(idx.len(), n);
        for (r, i) in idx.iter().enumerate() {
            x.row_mut(r).copy_from_slice(&data[*i].input);
            t.row_mut(r).copy_from_slice(&data[*i].target);
        }
        (x, t)
    }

    /// One optimizer step on the given examples; returns the batch loss.
    pub fn step(&mut self, data: &[PgmSample], idx: &[usize]) -> Result<f64> {
        let cfg = self.model.config;
        let (x, t) = Self::batch(data, idx, cfg.io_len());
        let mut drop_rng = stream(self.params.seed, 0xD0, self.opt.step);
        let (logits, cache) = self.model.forward_logits(&x, true, &mut drop_rng)?;
        let (loss, g) = pgm_loss(&logits, &t, cfg.channel_len());
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: self.opt.step as usize,
                detail: format!("grouping loss {loss}"),
            });
        }
        self.model.zero_grad();
        self.model.backward(&cache, &g);
        self.opt.step(&mut self.model.params_mut())?;
        Ok(loss)
    }

    pub fn train_epoch(&mut self, data: &[PgmSample]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        if data.iter().any(|s| s.input.len() != self.model.config.io_len() || s.target.len() != s.input.len()) {
            return Err(Error::ShapeMismatch("training sample size does not match the network".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(self.params.seed, 0x5F, self.epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(self.params.batch_size.max(1)) {
            total += self.step(data, chunk)? * chunk.len() as f64;
        }
        let log = EpochLog {
            epoch: self.epoch,
            step: self.opt.step,
            train_loss: total / data.len() as f64,
        };
        self.epoch += 1;
        Ok(log)
    }
}

/// Train a fresh model for `params.epochs` epochs.
pub fn pgm_train(
    data: &[PgmSample],
    config: PgmConfig,
    params: PgmTrainParams,
) -> Result<(PgmModel, Vec<EpochLog>)> {
    let mut t = PgmTrainer::new(config, params)?;
    let mut logs = Vec::with_capacity(params.epochs);
    for _ in 0..params.epochs {
        logs.push(t.train_epoch(data)?);
    }
    Ok((t.model, logs))
}

/// Mean cross-entropy of `model` on `data` in inference mode.
pub fn pgm_eval_loss(model: &PgmModel, data: &[PgmSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(64) {
        let (x, t) = PgmTrainer::batch(data, chunk, model.config.io_len());
        let (logits, _) = model.forward_logits(&x, false, &mut rng_from(0))?;
        total += pgm_loss(&logits, &t, model.config.channel_len()).0 * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}
