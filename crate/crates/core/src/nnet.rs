//! Small dense/set-network kernel: row-major matrices, dense layers, ReLU,
//! dropout, segmented softmax cross-entropy, context normalization, Adam and
//! a finite-difference gradient checker.
//!
//! Everything is `f64`. Layers keep no hidden state between calls; a forward
//! pass returns whatever its backward pass needs.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c ← alpha·op(a)·op(b) + beta·c`, where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Mat, ta: bool, b: &Mat, tb: bool, beta: f64, c: &mut Mat) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "inner dimensions");
    assert_eq!((c.rows, c.cols), (m, n), "output shape");
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides describe `a`, `b` and `c` exactly as allocated above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn matmul(a: &Mat, ta: bool, b: &Mat, tb: bool) -> Mat {
    let m = if ta { a.cols } else { a.rows };
    let n = if tb { b.rows } else { b.cols };
    let mut c = Mat::zeros(m, n);
    gemm(1.0, a, ta, b, tb, 0.0, &mut c);
    c
}

/// A named parameter with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        ParamTensor {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything with an ordered list of parameters.
pub trait Parameterized {
    fn params(&self) -> Vec<&ParamTensor>;
    fn params_mut(&mut self) -> Vec<&mut ParamTensor>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn flat_values(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    fn set_flat_values(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length");
    }
}

/// `y = xW + b` with `W: d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

impl Dense {
    /// He-normal weights, zero bias.
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let mut d = Dense::zeros(name, d_in, d_out);
        let std = (2.0 / d_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in &mut d.weight.value {
            *w = normal.sample(rng);
        }
        d
    }

    pub fn zeros(name: &str, d_in: usize, d_out: usize) -> Self {
        Dense {
            weight: ParamTensor::zeros(format!("{name}.weight"), &[d_in, d_out]),
            bias: ParamTensor::zeros(format!("{name}.bias"), &[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        if x.cols != self.d_in() {
            return Err(Error::ShapeMismatch(format!(
                "dense {}: input width {} != {}",
                self.weight.name,
                x.cols,
                self.d_in()
            )));
        }
        let mut y = Mat::zeros(x.rows, self.d_out());
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.bias.value);
        }
        if x.rows <= GEMV_MAX_ROWS {
            axpy_w(x, &self.weight.value, self.d_out(), &mut y);
        } else {
            gemm_w(x, &self.weight.value, self.d_in(), self.d_out(), &mut y);
        }
        Ok(y)
    }

    /// Accumulates `∂L/∂W`, `∂L/∂b` and returns `∂L/∂x`.
    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        // dW += xᵀ dy, computed in place on the gradient buffer
        let mut gw = Mat {
            rows: d_in,
            cols: d_out,
            data: std::mem::take(&mut self.weight.grad),
        };
        gemm(1.0, x, true, dy, false, 1.0, &mut gw);
        self.weight.grad = gw.data;
        for r in 0..dy.rows {
            for (g, d) in self.bias.grad.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dx = Mat::zeros(x.rows, d_in);
        let w = Mat {
            rows: d_in,
            cols: d_out,
            data: std::mem::take(&mut self.weight.value),
        };
        gemm(1.0, dy, false, &w, true, 0.0, &mut dx);
        self.weight.value = w.data;
        dx
    }

    /// Backward pass that skips `∂L/∂x` (first layer).
    pub fn backward_params(&mut self, x: &Mat, dy: &Mat) {
        let mut gw = Mat {
            rows: self.d_in(),
            cols: self.d_out(),
            data: std::mem::take(&mut self.weight.grad),
        };
        gemm(1.0, x, true, dy, false, 1.0, &mut gw);
        self.weight.grad = gw.data;
        for r in 0..dy.rows {
            for (g, d) in self.bias.grad.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
    }

}

/// Batches up to this many rows skip packing and stream the weights once.
/// Packing a large weight matrix costs more than the product itself when
/// only a handful of rows use it.
const GEMV_MAX_ROWS: usize = 4;

fn axpy_w(x: &Mat, w: &[f64], d_out: usize, y: &mut Mat) {
    for (i, wr) in w.chunks_exact(d_out).enumerate() {
        for r in 0..x.rows {
            let a = x.data[r * x.cols + i];
            if a == 0.0 {
                continue;
            }
            for (yv, wv) in y.row_mut(r).iter_mut().zip(wr) {
                *yv += a * wv;
            }
        }
    }
}

fn gemm_w(x: &Mat, w: &[f64], d_in: usize, d_out: usize, y: &mut Mat) {
    // SAFETY: `w` is d_in × d_out row-major, `x` is rows × d_in, `y` rows × d_out.
    unsafe {
        matrixmultiply::dgemm(
            x.rows,
            d_in,
            d_out,
            1.0,
            x.data.as_ptr(),
            x.cols as isize,
            1,
            w.as_ptr(),
            d_out as isize,
            1,
            1.0,
            y.data.as_mut_ptr(),
            d_out as isize,
            1,
        );
    }
}

impl Parameterized for Dense {
    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn relu(x: &Mat) -> Mat {
    x.map(|v| v.max(0.0))
}

/// Gradient through ReLU given its *output* `y`.
pub fn relu_backward(y: &Mat, dy: &Mat) -> Mat {
    Mat {
        rows: dy.rows,
        cols: dy.cols,
        data: y
            .data
            .iter()
            .zip(&dy.data)
            .map(|(y, d)| if *y > 0.0 { *d } else { 0.0 })
            .collect(),
    }
}

/// Inverted dropout. Returns the output and the multiplicative mask
/// (`None` in inference mode or at rate 0, where the layer is the identity).
pub fn dropout(x: &Mat, rate: f64, training: bool, rng: &mut impl Rng) -> (Mat, Option<Vec<f64>>) {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    if !training || rate == 0.0 {
        return (x.clone(), None);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.data.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let y = Mat {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
    };
    (y, Some(mask))
}

pub fn dropout_backward(dy: &Mat, mask: Option<&[f64]>) -> Mat {
    match mask {
        None => dy.clone(),
        Some(m) => Mat {
            rows: dy.rows,
            cols: dy.cols,
            data: dy.data.iter().zip(m).map(|(d, m)| d * m).collect(),
        },
    }
}

fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Softmax applied independently to consecutive `segment`-long runs of each
/// row (`segment = cols` gives an ordinary row softmax).
pub fn softmax(x: &Mat, segment: usize) -> Mat {
    assert!(segment > 0 && x.cols % segment == 0, "segment must divide the row");
    let mut y = Mat::zeros(x.rows, x.cols);
    for (xs, ys) in x.data.chunks(segment).zip(y.data.chunks_mut(segment)) {
        softmax_slice(xs, ys);
    }
    y
}

/// Segmented softmax cross-entropy: per row the cross-entropies of every
/// segment are summed, then rows are averaged. Returns the loss and
/// `∂L/∂logits`.
pub fn softmax_cross_entropy(logits: &Mat, targets: &Mat, segment: usize) -> (f64, Mat) {
    assert_eq!((logits.rows, logits.cols), (targets.rows, targets.cols));
    assert!(segment > 0 && logits.cols % segment == 0);
    let b = logits.rows as f64;
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for ((xs, ts), gs) in logits
        .data
        .chunks(segment)
        .zip(targets.data.chunks(segment))
        .zip(grad.data.chunks_mut(segment))
    {
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let tsum: f64 = ts.iter().sum();
        for ((x, t), g) in xs.iter().zip(ts).zip(gs.iter_mut()) {
            if *t != 0.0 {
                loss -= t * (x - lse);
            }
            *g = ((x - lse).exp() * tsum - t) / b;
        }
    }
    (loss / b, grad)
}

/// Variance floor inside the context-normalization square root.
pub const CONTEXT_NORM_EPS: f64 = 1e-6;

/// Saved statistics for [`context_normalize_backward`].
#[derive(Debug, Clone)]
pub struct ContextNormCache {
    pub normalized: Mat,
    pub inv_std: Vec<f64>,
}

fn sorted_sum(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    vals.iter().sum()
}

/// Per-column standardization across the rows of one set.
///
/// Column sums are taken in sorted order so permuting rows permutes the
/// output bit for bit.
pub fn context_normalize(x: &Mat) -> Result<(Mat, ContextNormCache)> {
    let n = x.rows;
    if n < 2 {
        return Err(Error::DegenerateSet(n));
    }
    let mut y = Mat::zeros(n, x.cols);
    let mut inv_std = vec![0.0; x.cols];
    let mut col = vec![0.0; n];
    for c in 0..x.cols {
        for r in 0..n {
            col[r] = x.data[r * x.cols + c];
        }
        let mean = sorted_sum(&mut col) / n as f64;
        for r in 0..n {
            let d = x.data[r * x.cols + c] - mean;
            col[r] = d * d;
        }
        let var = sorted_sum(&mut col) / n as f64;
        let is = 1.0 / (var + CONTEXT_NORM_EPS).sqrt();
        inv_std[c] = is;
        for r in 0..n {
            y.data[r * x.cols + c] = (x.data[r * x.cols + c] - mean) * is;
        }
    }
    let cache = ContextNormCache {
        normalized: y.clone(),
        inv_std,
    };
    Ok((y, cache))
}

pub fn context_normalize_backward(cache: &ContextNormCache, dy: &Mat) -> Mat {
    let (n, d) = (dy.rows, dy.cols);
    let xh = &cache.normalized;
    let mut dx = Mat::zeros(n, d);
    for c in 0..d {
        let mut s = 0.0;
        let mut sx = 0.0;
        for r in 0..n {
            let g = dy.data[r * d + c];
            s += g;
            sx += g * xh.data[r * d + c];
        }
        let (mean_g, mean_gx) = (s / n as f64, sx / n as f64);
        for r in 0..n {
            let i = r * d + c;
            dx.data[i] = cache.inv_std[c] * (dy.data[i] - mean_g - xh.data[i] * mean_gx);
        }
    }
    dx
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update from the accumulated gradients. A non-finite gradient
    /// leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut ParamTensor]) -> Result<()> {
        for p in params.iter() {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("{}[{i}]", p.name)));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        // p -= lr·(m/c1) / (sqrt(v/c2) + eps), rearranged to hoist the divisions
        let step_size = self.lr / c1;
        let inv_sqrt_c2 = 1.0 / c2.sqrt();
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let p = &mut **p;
            for (((w, g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / (v.sqrt() * inv_sqrt_c2 + eps);
            }
        }
        Ok(())
    }
}

/// Result of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Five-point central difference, `O(h⁴)`.
fn five_point(f: &mut impl FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, h: f64) -> f64 {
    let x0 = x[i];
    let mut at = |d: f64, x: &mut [f64]| {
        x[i] = x0 + d;
        let v = f(x);
        x[i] = x0;
        v
    };
    let p1 = at(h, x);
    let m1 = at(-h, x);
    let p2 = at(2.0 * h, x);
    let m2 = at(-2.0 * h, x);
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
}

/// Compare `analytic` against central differences of `loss` on `coords`
/// randomly chosen coordinates (all of them if there are fewer).
///
/// Relative errors are floored at `1e-3 · max|analytic|`, so components whose
/// true gradient is structurally zero (a bias feeding a normalization) are
/// judged against the gradient's scale rather than against round-off.
///
/// Each coordinate is differenced at `h` and `h/2`; when the two disagree
/// (a ReLU kink or similar lies within the stencil) the step is shrunk and
/// the most self-consistent estimate is kept.
pub fn grad_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
    h: f64,
    coords: usize,
    rng: &mut impl Rng,
) -> GradCheckReport {
    assert_eq!(x0.len(), analytic.len());
    let idx: Vec<usize> = if coords >= x0.len() {
        (0..x0.len()).collect()
    } else {
        sample(rng, x0.len(), coords).into_vec()
    };
    let floor = 1e-3 * analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut x = x0.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: idx.len(),
    };
    for &i in &idx {
        let mut step = h;
        let mut best = (f64::INFINITY, 0.0);
        for _ in 0..4 {
            let a = five_point(&mut loss, &mut x, i, step);
            let b = five_point(&mut loss, &mut x, i, step * 0.5);
            let disagreement = relative_error(a, b);
            if disagreement < best.0 {
                best = (disagreement, b);
            }
            if disagreement < 1e-7 {
                break;
            }
            step *= 0.1;
        }
        let err = (analytic[i] - best.1).abs() / analytic[i].abs().max(best.1.abs()).max(floor).max(1e-8);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn random_mat(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive(a: &Mat, b: &Mat) -> Mat {
        let mut c = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                c.data[i * b.cols + j] = (0..a.cols).map(|k| a.get(i, k) * b.get(k, j)).sum();
            }
        }
        c
    }

    fn transpose(a: &Mat) -> Mat {
        let mut t = Mat::zeros(a.cols, a.rows);
        for i in 0..a.rows {
            for j in 0..a.cols {
                t.data[j * a.rows + i] = a.get(i, j);
            }
        }
        t
    }

    #[test]
    fn gemm_transposes() {
        let mut rng = rng_from(1);
        let a = random_mat(&mut rng, 5, 7);
        let b = random_mat(&mut rng, 7, 3);
        let want = naive(&a, &b);
        let close = |x: &Mat| x.data.iter().zip(&want.data).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&matmul(&a, false, &b, false)));
        assert!(close(&matmul(&transpose(&a), true, &b, false)));
        assert!(close(&matmul(&a, false, &transpose(&b), true)));
        assert!(close(&matmul(&transpose(&a), true, &transpose(&b), true)));
    }

    #[test]
    fn dense_identity_and_rows() {
        let mut d = Dense::zeros("d", 3, 3);
        for i in 0..3 {
            d.weight.value[i * 3 + i] = 1.0;
        }
        let x = Mat::from_vec(2, 3, vec![1.0, -2.0, 3.0, 1.0, -2.0, 3.0]).unwrap();
        let y = d.forward(&x).unwrap();
        assert_eq!(y, x);
        assert_eq!(y.row(0), y.row(1));
        assert!(matches!(d.forward(&Mat::zeros(1, 4)), Err(Error::ShapeMismatch(_))));
    }

    /// Loss `Σ c ⊙ f(x)` for a fixed random `c`, so every output matters.
    fn probe(y: &Mat, c: &Mat) -> f64 {
        y.data.iter().zip(&c.data).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn dense_backward_matches_fd() {
        let mut rng = rng_from(2);
        for _ in 0..100 {
            let mut d = Dense::new("d", 6, 3, &mut rng);
            for b in &mut d.bias.value {
                *b = rng.random_range(-1.0..1.0);
            }
            let x = random_mat(&mut rng, 4, 6);
            let c = random_mat(&mut rng, 4, 3);
            d.zero_grad();
            let dx = d.backward(&x, &c);
            let mut analytic = d.flat_grads();
            analytic.extend_from_slice(&dx.data);
            let mut flat = d.flat_values();
            flat.extend_from_slice(&x.data);
            let np = d.num_params();
            let dd = d.clone();
            let f = |v: &[f64]| {
                let mut m = dd.clone();
                m.set_flat_values(&v[..np]);
                let xx = Mat::from_vec(4, 6, v[np..].to_vec()).unwrap();
                probe(&m.forward(&xx).unwrap(), &c)
            };
            let r = grad_check(f, &flat, &analytic, 1e-3, 1000, &mut rng);
            assert!(r.max_rel_error < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn primitives() {
        let x = Mat::from_vec(1, 2, vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data, vec![0.0, 2.0]);
        let mut rng = rng_from(3);
        let big = random_mat(&mut rng, 10, 10);
        let (y, m) = dropout(&big, 0.0, true, &mut rng);
        assert_eq!(y, big);
        assert!(m.is_none());
        let (y, m) = dropout(&big, 0.5, false, &mut rng);
        assert_eq!(y, big);
        assert!(m.is_none());
        let (y, m) = dropout(&big, 0.5, true, &mut rng);
        let m = m.unwrap();
        for ((a, b), k) in y.data.iter().zip(&big.data).zip(&m) {
            assert!(*k == 0.0 || *k == 2.0);
            assert_eq!(*a, b * k);
        }
        let u = softmax(&Mat::from_vec(1, 5, vec![0.3; 5]).unwrap(), 5);
        assert!(u.data.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let seg = softmax(&random_mat(&mut rng, 3, 12), 4);
        for s in seg.data.chunks(4) {
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_keeps_expected_fraction() {
        let mut rng = rng_from(4);
        let x = Mat::from_vec(1, 100_000, vec![1.0; 100_000]).unwrap();
        let (y, _) = dropout(&x, 0.5, true, &mut rng);
        let mean = y.data.iter().sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn cross_entropy_examples() {
        let mut rng = rng_from(5);
        let logits = random_mat(&mut rng, 3, 6);
        let t = softmax(&logits, 6);
        let (_, g) = softmax_cross_entropy(&logits, &t, 6);
        assert!(g.data.iter().all(|v| v.abs() < 1e-12));

        let logits = Mat::zeros(1, 4);
        let t = Mat::from_vec(1, 4, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let (l, _) = softmax_cross_entropy(&logits, &t, 4);
        assert!((l - 4f64.ln()).abs() < 1e-12);

        for _ in 0..100 {
            let logits = random_mat(&mut rng, 3, 8);
            let raw = random_mat(&mut rng, 3, 8).map(|v| v.abs());
            let mut t = raw.clone();
            for s in t.data.chunks_mut(4) {
                let tot: f64 = s.iter().sum();
                s.iter_mut().for_each(|v| *v /= tot);
            }
            let (_, g) = softmax_cross_entropy(&logits, &t, 4);
            let r = grad_check(
                |v| softmax_cross_entropy(&Mat::from_vec(3, 8, v.to_vec()).unwrap(), &t, 4).0,
                &logits.data,
                &g.data,
                1e-3,
                24,
                &mut rng,
            );
            assert!(r.max_rel_error < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn context_norm_statistics() {
        let mut rng = rng_from(6);
        let x = random_mat(&mut rng, 20, 8).map(|v| 3.0 * v + 1.0);
        let (y, _) = context_normalize(&x).unwrap();
        for c in 0..8 {
            let col: Vec<f64> = (0..20).map(|r| y.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 20.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
        assert!(matches!(context_normalize(&Mat::zeros(1, 3)), Err(Error::DegenerateSet(1))));
    }

    #[test]
    fn context_norm_equivariant_bitwise() {
        use rand::seq::SliceRandom;
        let mut rng = rng_from(7);
        for _ in 0..20 {
            let x = random_mat(&mut rng, 33, 5);
            let (y, _) = context_normalize(&x).unwrap();
            let mut perm: Vec<usize> = (0..33).collect();
            perm.shuffle(&mut rng);
            let mut xp = Mat::zeros(33, 5);
            for (i, p) in perm.iter().enumerate() {
                xp.row_mut(i).copy_from_slice(x.row(*p));
            }
            let (yp, _) = context_normalize(&xp).unwrap();
            for (i, p) in perm.iter().enumerate() {
                assert_eq!(yp.row(i), y.row(*p));
            }
        }
    }

    #[test]
    fn context_norm_backward_matches_fd() {
        let mut rng = rng_from(8);
        for _ in 0..100 {
            let x = random_mat(&mut rng, 20, 8);
            let c = random_mat(&mut rng, 20, 8);
            let (_, cache) = context_normalize(&x).unwrap();
            let dx = context_normalize_backward(&cache, &c);
            let r = grad_check(
                |v| probe(&context_normalize(&Mat::from_vec(20, 8, v.to_vec()).unwrap()).unwrap().0, &c),
                &x.data,
                &dx.data,
                1e-3,
                160,
                &mut rng,
            );
            assert!(r.max_rel_error < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn composite_dense_relu_ce() {
        let mut rng = rng_from(9);
        for _ in 0..100 {
            let d1 = Dense::new("a", 6, 10, &mut rng);
            let d2 = Dense::new("b", 10, 8, &mut rng);
            let x = random_mat(&mut rng, 4, 6);
            let mut t = random_mat(&mut rng, 4, 8).map(|v| v.abs());
            for s in t.data.chunks_mut(4) {
                let tot: f64 = s.iter().sum();
                s.iter_mut().for_each(|v| *v /= tot);
            }
            let forward = |a: &Dense, b: &Dense| {
                let h = relu(&a.forward(&x).unwrap());
                let o = b.forward(&h).unwrap();
                (h, o)
            };
            let (mut a, mut b) = (d1.clone(), d2.clone());
            let (h, o) = forward(&a, &b);
            let (_, g) = softmax_cross_entropy(&o, &t, 4);
            let dh = b.backward(&h, &g);
            a.backward_params(&x, &relu_backward(&h, &dh));
            let mut analytic = a.flat_grads();
            analytic.extend(b.flat_grads());
            let mut flat = a.flat_values();
            flat.extend(b.flat_values());
            let na = a.num_params();
            let f = |v: &[f64]| {
                let (mut a, mut b) = (d1.clone(), d2.clone());
                a.set_flat_values(&v[..na]);
                b.set_flat_values(&v[na..]);
                softmax_cross_entropy(&forward(&a, &b).1, &t, 4).0
            };
            let r = grad_check(f, &flat, &analytic, 1e-3, 200, &mut rng);
            assert!(r.max_rel_error < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn adam_behaviour() {
        let mut p = ParamTensor::zeros("p", &[3]);
        p.value = vec![1.0, 2.0, 3.0];
        let mut opt = Adam::default();
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value, vec![1.0, 2.0, 3.0]);

        let mut q = ParamTensor::zeros("q", &[2]);
        let mut opt = Adam::default();
        let mut prev = q.value.clone();
        for _ in 0..5000 {
            q.grad = vec![0.5, -2.0];
            opt.step(&mut [&mut q]).unwrap();
            let d0 = q.value[0] - prev[0];
            let d1 = q.value[1] - prev[1];
            assert!((d0 + 1e-3).abs() < 1e-6 && (d1 - 1e-3).abs() < 1e-6, "{d0} {d1}");
            prev = q.value.clone();
        }

        let mut r = ParamTensor::zeros("r", &[2]);
        r.grad = vec![1.0, f64::NAN];
        let mut opt = Adam::default();
        assert!(matches!(opt.step(&mut [&mut r]), Err(Error::NonFiniteGradient(_))));
        assert_eq!(r.value, vec![0.0, 0.0]);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn adam_deterministic() {
        let run = || {
            let mut rng = rng_from(10);
            let mut d = Dense::new("d", 5, 4, &mut rng);
            let mut opt = Adam::default();
            for _ in 0..50 {
                let x = random_mat(&mut rng, 8, 5);
                let y = d.forward(&x).unwrap();
                d.zero_grad();
                d.backward(&x, &y);
                opt.step(&mut d.params_mut()).unwrap();
            }
            d.flat_values()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
