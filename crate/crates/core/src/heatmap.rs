//! Projection heatmaps: storage, synthesis, merging, peak extraction, the
//! per-channel argmax grouping baseline and the false-selection count.
//!
//! Pixel `(u, v)` is column `u`, row `v`; its center sits at integer
//! coordinates, so a projection at `(10.0, 10.0)` lands exactly on a grid
//! point.

use std::io::{Read, Write};

use crate::geom::Vec2;
use crate::{Error, Result};

/// One channel per box corner.
pub const NUM_CHANNELS: usize = 8;
pub const DEFAULT_PEAK_FLOOR: f32 = 0.1;
pub const DEFAULT_NMS_RADIUS: f64 = 5.0;
pub const DEFAULT_GT_SIGMA: f64 = 2.0;
pub const DEFAULT_CLUSTER_RADIUS: f64 = 10.0;
/// Channels whose maximum is below this are treated as empty.
pub const EMPTY_CHANNEL: f32 = 1e-9;

const MAGIC: &[u8; 4] = b"HMS1";

/// An 8-channel confidence grid, channel-major and row-major within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl HeatmapStack {
    pub fn zeros(width: usize, height: usize) -> Self {
        HeatmapStack {
            width,
            height,
            data: vec![0.0; width * height * NUM_CHANNELS],
        }
    }

    /// Wraps raw values; every value must lie in `[0, 1]`.
    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * NUM_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{NUM_CHANNELS} stack",
                data.len()
            )));
        }
        if let Some(x) = data.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::InvalidParameter(format!(
                "heatmap value {x} outside [0, 1]"
            )));
        }
        Ok(HeatmapStack {
            width,
            height,
            data,
        })
    }

    /// Per-channel grids, each normalized so its maximum is 1.
    pub fn from_channels(width: usize, height: usize, channels: &[Vec<f32>]) -> Result<Self> {
        if channels.len() != NUM_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "{} channels, expected {NUM_CHANNELS}",
                channels.len()
            )));
        }
        let mut data = Vec::with_capacity(width * height * NUM_CHANNELS);
        for ch in channels {
            if ch.len() != width * height {
                return Err(Error::ShapeMismatch("channel size".into()));
            }
            data.extend_from_slice(ch);
        }
        if data.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidParameter("negative or non-finite channel value".into()));
        }
        let mut s = HeatmapStack {
            width,
            height,
            data,
        };
        s.normalize();
        Ok(s)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, u: usize, v: usize) -> f32 {
        self.channel(c)[v * self.width + u]
    }

    /// Value at the nearest pixel, 0 outside the grid.
    pub fn at(&self, c: usize, p: &Vec2) -> f32 {
        let (u, v) = (p.x.round(), p.y.round());
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return 0.0;
        }
        self.get(c, u as usize, v as usize)
    }

    pub fn channel_max(&self, c: usize) -> f32 {
        self.channel(c).iter().copied().fold(0.0, f32::max)
    }

    /// Rescale every channel to maximum 1; empty channels are left as is.
    pub fn normalize(&mut self) {
        for c in 0..NUM_CHANNELS {
            let m = self.channel_max(c);
            if m >= EMPTY_CHANNEL {
                for x in self.channel_mut(c) {
                    *x = (*x / m).min(1.0);
                }
            }
        }
    }

    /// Location and value of the channel maximum; ties go to the smallest
    /// `(v, u)`, i.e. the first hit in row-major order.
    pub fn argmax(&self, c: usize) -> (usize, usize, f32) {
        let mut best = 0;
        let ch = self.channel(c);
        for (i, x) in ch.iter().enumerate() {
            if *x > ch[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width, ch[best])
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for x in [self.width, self.height, NUM_CHANNELS] {
            w.write_all(&(x as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("reading heatmap header: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad heatmap magic {magic:?}")));
        }
        let mut dims = [0u32; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|e| Error::Format(format!("reading heatmap header: {e}")))?;
            *d = u32::from_le_bytes(b);
        }
        let [width, height, channels] = dims.map(|d| d as usize);
        if channels != NUM_CHANNELS {
            return Err(Error::Format(format!("{channels} channels, expected {NUM_CHANNELS}")));
        }
        let n = width
            .checked_mul(height)
            .and_then(|x| x.checked_mul(NUM_CHANNELS))
            .filter(|n| *n > 0 && *n <= 1 << 28)
            .ok_or_else(|| Error::Format(format!("implausible size {width}x{height}")))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Format(format!("truncated heatmap data: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        HeatmapStack::from_data(width, height, data).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Unit-peak Gaussian around `center`, scaled so the nearest grid point is 1.
pub fn synth_gaussian_channel(center: Vec2, sigma: f64, width: usize, height: usize) -> Vec<f32> {
    assert!(sigma > 0.0, "sigma must be positive");
    let inv = 1.0 / (2.0 * sigma * sigma);
    let g = |u: f64, v: f64| (-((u - center.x).powi(2) + (v - center.y).powi(2)) * inv).exp();
    let nu = center.x.round().clamp(0.0, (width - 1) as f64);
    let nv = center.y.round().clamp(0.0, (height - 1) as f64);
    let peak = g(nu, nv);
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let mut out = Vec::with_capacity(width * height);
    for v in 0..height {
        for u in 0..width {
            out.push(((g(u as f64, v as f64) * scale).min(1.0)) as f32);
        }
    }
    out
}

/// Element-wise mean followed by per-channel renormalization.
///
/// Each element is summed in sorted order so the result does not depend on
/// the order of `stacks`.
pub fn merge(stacks: &[HeatmapStack]) -> Result<HeatmapStack> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::DimensionMismatch("nothing to merge".into()))?;
    if stacks
        .iter()
        .any(|s| s.width != first.width || s.height != first.height)
    {
        return Err(Error::DimensionMismatch("stack sizes differ".into()));
    }
    let k = stacks.len() as f64;
    let mut vals = vec![0f32; stacks.len()];
    let data = (0..first.data.len())
        .map(|i| {
            for (slot, s) in vals.iter_mut().zip(stacks) {
                *slot = s.data[i];
            }
            vals.sort_by(f32::total_cmp);
            (vals.iter().map(|x| *x as f64).sum::<f64>() / k) as f32
        })
        .collect();
    let mut out = HeatmapStack {
        width: first.width,
        height: first.height,
        data,
    };
    out.normalize();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub u: usize,
    pub v: usize,
    pub confidence: f32,
}

impl Peak {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.u as f64, self.v as f64)
    }
}

/// Per-channel peaks, each list sorted by confidence descending.
pub type PeakList = Vec<Vec<Peak>>;

/// Greedy non-maximum suppression: take the highest remaining value at or
/// above `floor`, suppress everything within `nms_radius` of it, repeat.
pub fn local_maxima(
    channel: &[f32],
    width: usize,
    floor: f32,
    nms_radius: f64,
) -> Vec<Peak> {
    assert!(nms_radius >= 1.0, "nms radius must be at least 1 px");
    let mut cand: Vec<usize> = (0..channel.len())
        .filter(|&i| channel[i] >= floor && channel[i] > 0.0)
        .collect();
    // descending value, then row-major order
    cand.sort_by(|&a, &b| channel[b].total_cmp(&channel[a]).then(a.cmp(&b)));
    let r2 = nms_radius * nms_radius;
    let mut peaks: Vec<Peak> = Vec::new();
    for i in cand {
        let (u, v) = (i % width, i / width);
        let suppressed = peaks.iter().any(|p| {
            let du = p.u as f64 - u as f64;
            let dv = p.v as f64 - v as f64;
            du * du + dv * dv <= r2
        });
        if !suppressed {
            peaks.push(Peak {
                u,
                v,
                confidence: channel[i],
            });
        }
    }
    peaks
}

pub fn peak_list(stack: &HeatmapStack, floor: f32, nms_radius: f64) -> PeakList {
    (0..NUM_CHANNELS)
        .map(|c| local_maxima(stack.channel(c), stack.width, floor, nms_radius))
        .collect()
}

/// One selected projection per channel; `None` for an absent channel.
pub type Selection = [Option<Vec2>; NUM_CHANNELS];

/// Per-channel global maximum.
pub fn max_grouping(stack: &HeatmapStack) -> Selection {
    std::array::from_fn(|c| {
        let (u, v, val) = stack.argmax(c);
        (val >= EMPTY_CHANNEL).then(|| Vec2::new(u as f64, v as f64))
    })
}

/// False selections per hundred channels. A selection is correct when it is
/// within `cluster_radius` (inclusive) of the ground-truth projection.
pub fn fps_count(
    selections: &[Selection],
    gt: &[[Vec2; NUM_CHANNELS]],
    cluster_radius: f64,
) -> Result<f64> {
    if selections.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} selections for {} ground-truth groups",
            selections.len(),
            gt.len()
        )));
    }
    let channels = selections.len() * NUM_CHANNELS;
    if channels == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let wrong = selections
        .iter()
        .zip(gt)
        .flat_map(|(s, g)| s.iter().zip(g.iter()))
        .filter(|(s, g)| match s {
            Some(p) => (p - *g).norm() > cluster_radius,
            None => true,
        })
        .count();
    Ok(100.0 * wrong as f64 / channels as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn gt_stack(points: &[Vec2; 8], w: usize, h: usize) -> HeatmapStack {
        let ch: Vec<_> = points
            .iter()
            .map(|p| synth_gaussian_channel(*p, 2.0, w, h))
            .collect();
        HeatmapStack::from_channels(w, h, &ch).unwrap()
    }

    fn random_points(rng: &mut impl Rng, w: usize, h: usize) -> [Vec2; 8] {
        std::array::from_fn(|_| {
            Vec2::new(
                rng.random_range(3..w - 3) as f64,
                rng.random_range(3..h - 3) as f64,
            )
        })
    }

    #[test]
    fn gaussian_values() {
        let ch = synth_gaussian_channel(Vec2::new(10.0, 10.0), 2.0, 32, 32);
        assert_eq!(ch[10 * 32 + 10], 1.0);
        assert!((ch[10 * 32 + 12] - (-0.5f32).exp()).abs() < 1e-7);
        for d in 1..8 {
            assert!((ch[10 * 32 + 10 + d] - ch[10 * 32 + 10 - d]).abs() < 1e-6);
            assert!((ch[(10 + d) * 32 + 10] - ch[(10 - d) * 32 + 10]).abs() < 1e-6);
        }
        let off = synth_gaussian_channel(Vec2::new(10.3, 9.8), 2.0, 32, 32);
        let m = off.iter().copied().fold(0.0, f32::max);
        assert_eq!(m, 1.0);
        assert_eq!(off[10 * 32 + 10], 1.0);
    }

    #[test]
    fn gaussian_integral() {
        let ch = synth_gaussian_channel(Vec2::new(64.0, 60.0), 2.0, 128, 128);
        let sum: f64 = ch.iter().map(|x| *x as f64).sum();
        let expect = 2.0 * std::f64::consts::PI * 4.0;
        assert!((sum - expect).abs() / expect < 0.02, "{sum}");
    }

    #[test]
    fn merge_examples() {
        let mut rng = rng_from(1);
        let s = gt_stack(&random_points(&mut rng, 40, 30), 40, 30);
        assert_eq!(merge(&[s.clone(), s.clone()]).unwrap(), s);
        let z = HeatmapStack::zeros(8, 8);
        let m = merge(&[z.clone(), z.clone()]).unwrap();
        assert!(m.data().iter().all(|x| *x == 0.0));
        // k one-hot channels with disjoint peaks → k maxima of value 1
        let k = 3;
        let stacks: Vec<_> = (0..k)
            .map(|i| {
                let mut d = vec![0f32; 16 * 16 * 8];
                for c in 0..8 {
                    d[c * 256 + 16 * (2 + 5 * i) + 3] = 1.0;
                }
                HeatmapStack::from_data(16, 16, d).unwrap()
            })
            .collect();
        let m = merge(&stacks).unwrap();
        for c in 0..8 {
            let ones = m.channel(c).iter().filter(|x| **x == 1.0).count();
            assert_eq!(ones, k);
            assert_eq!(local_maxima(m.channel(c), 16, 0.1, 1.0).len(), k);
        }
        assert!(matches!(merge(&[]), Err(Error::DimensionMismatch(_))));
        assert!(merge(&[z, HeatmapStack::zeros(8, 9)]).is_err());
    }

    #[test]
    fn merge_permutation_invariant() {
        let mut rng = rng_from(2);
        let mut stacks: Vec<_> = (0..5)
            .map(|_| {
                let d = (0..20 * 20 * 8).map(|_| rng.random::<f32>()).collect();
                HeatmapStack::from_data(20, 20, d).unwrap()
            })
            .collect();
        let a = merge(&stacks).unwrap();
        for _ in 0..10 {
            stacks.shuffle(&mut rng);
            assert_eq!(merge(&stacks).unwrap(), a);
        }
    }

    #[test]
    fn maxima_examples() {
        let ch = synth_gaussian_channel(Vec2::new(20.0, 15.0), 2.0, 64, 64);
        let p = local_maxima(&ch, 64, 0.1, 5.0);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].u, p[0].v), (20, 15));

        let a = synth_gaussian_channel(Vec2::new(10.0, 30.0), 2.0, 64, 64);
        let b = synth_gaussian_channel(Vec2::new(40.0, 30.0), 2.0, 64, 64);
        let two: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x.max(0.8 * y)).collect();
        let p = local_maxima(&two, 64, 0.1, 5.0);
        assert_eq!(p.len(), 2);
        assert_eq!((p[0].u, p[1].u), (10, 40));
        assert!(p[0].confidence >= p[1].confidence);

        let low = vec![0.05f32; 64];
        assert!(local_maxima(&low, 8, 0.1, 5.0).is_empty());
    }

    #[test]
    fn max_grouping_examples() {
        let mut rng = rng_from(3);
        let pts = random_points(&mut rng, 64, 64);
        let s = gt_stack(&pts, 64, 64);
        let sel = max_grouping(&s);
        for c in 0..8 {
            assert_eq!(sel[c], Some(pts[c]));
        }
        assert_eq!(fps_count(&[sel], &[pts], 10.0).unwrap(), 0.0);

        // decoy above the true peak wins
        let truth = Vec2::new(10.0, 10.0);
        let decoy = Vec2::new(40.0, 40.0);
        let t = synth_gaussian_channel(truth, 2.0, 64, 64);
        let d = synth_gaussian_channel(decoy, 2.0, 64, 64);
        let ch: Vec<f32> = t.iter().zip(&d).map(|(a, b)| 0.90 * a + 0.95 * b).collect();
        let mut chans = vec![ch; 8];
        chans[7] = vec![0.0; 64 * 64];
        let s = HeatmapStack::from_channels(64, 64, &chans).unwrap();
        let sel = max_grouping(&s);
        assert_eq!(sel[0], Some(decoy));
        assert_eq!(sel[7], None);
    }

    #[test]
    fn fps_examples() {
        let gt = [Vec2::zeros(); 8];
        let exact: Selection = [Some(Vec2::zeros()); 8];
        let mut sels = vec![exact; 30];
        assert_eq!(fps_count(&sels, &vec![gt; 30], 10.0).unwrap(), 0.0);
        sels[0][1] = Some(Vec2::new(30.0, 0.0));
        sels[3][2] = None;
        sels[7][7] = Some(Vec2::new(0.0, -11.0));
        assert!((fps_count(&sels, &vec![gt; 30], 10.0).unwrap() - 1.25).abs() < 1e-12);

        let mut s = exact;
        s[0] = Some(Vec2::new(10.0, 0.0));
        assert_eq!(fps_count(&[s], &[gt], 10.0).unwrap(), 0.0);
        s[0] = Some(Vec2::new(10.01, 0.0));
        assert_eq!(fps_count(&[s], &[gt], 10.0).unwrap(), 12.5);
        assert!(matches!(fps_count(&[], &[], 10.0), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn hms_round_trip_and_errors() {
        let mut rng = rng_from(4);
        let s = gt_stack(&random_points(&mut rng, 24, 20), 24, 20);
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 24 * 20 * 8 * 4);
        assert_eq!(&buf[..4], b"HMS1");
        assert_eq!(HeatmapStack::read_from(buf.as_slice()).unwrap(), s);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(HeatmapStack::read_from(bad.as_slice()), Err(Error::Format(_))));
        assert!(HeatmapStack::read_from(&buf[..100]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn argmax_invariant_under_monotone_maps(seed in 0u64..5000, gamma in 0.2f32..4.0, shift in 0f32..0.5) {
                let mut rng = rng_from(seed);
                let pts = random_points(&mut rng, 48, 40);
                let s = gt_stack(&pts, 48, 40);
                let sel = max_grouping(&s);
                let mapped: Vec<f32> = s.data().iter().map(|x| (x.powf(gamma) + shift) / (1.0 + shift)).collect();
                let t = HeatmapStack::from_data(48, 40, mapped).unwrap();
                prop_assert_eq!(max_grouping(&t), sel);
            }

            #[test]
            fn maxima_are_separated_and_sorted(seed in 0u64..5000, r in 1.0f64..8.0) {
                let mut rng = rng_from(seed);
                let ch: Vec<f32> = (0..30 * 30).map(|_| rng.random()).collect();
                let p = local_maxima(&ch, 30, 0.3, r);
                for i in 0..p.len() {
                    prop_assert!(p[i].confidence >= 0.3);
                    for j in 0..i {
                        prop_assert!(p[j].confidence >= p[i].confidence);
                        prop_assert!((p[i].position() - p[j].position()).norm() > r);
                    }
                }
            }
        }
    }
}
