//! Dense layers with hand-written backward passes.
//!
//! Every layer keeps the activations it needs in an explicit cache returned by
//! `forward`, and `backward` accumulates parameter gradients into a structure
//! of the same type as the layer. All arithmetic is `f64`.

pub mod encoder;
pub mod optim;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub use encoder::{pool_representation, EncoderConfig, EncoderTrace, Mode, PatchEncoder};
pub use optim::{AdamW, AdamWConfig};

pub type Mat = Array2<f64>;

/// Ordered access to every trainable array.
pub trait Parameters {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>);

    fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// `self += scale * other` over matching parameter structures.
pub fn accumulate<P: Parameters>(into: &mut P, other: &P, scale: f64) {
    let src: Vec<&Mat> = other.named_tensors().into_iter().map(|(_, t)| t).collect();
    for (dst, s) in into.tensors_mut().into_iter().zip(src) {
        dst.scaled_add(scale, s);
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fan-in uniform initialization `U(-1/sqrt(in), 1/sqrt(in))`.
pub fn init_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let bound = 1.0 / (rows as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    Mat::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub fn init_normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat {
    let dist = Normal::new(0.0, std).expect("valid std");
    Mat::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Mat,
    pub b: Mat,
}

impl Linear {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: init_uniform(input, output, rng),
            b: Mat::zeros((1, output)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Mat::zeros((input, output)),
            b: Mat::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Linear) -> Mat {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Parameters for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        out.push((join(prefix, "w"), &self.w));
        out.push((join(prefix, "b"), &self.b));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Mat,
    pub beta: Mat,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Mat::ones((1, dim)),
            beta: Mat::zeros((1, dim)),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| v * s);
            inv_std.push(s);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Mat, grad: &mut LayerNorm) -> Mat {
        let d = dy.ncols() as f64;
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let mut dx = Mat::zeros(dy.raw_dim());
        for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            let s = cache.inv_std[i];
            for j in 0..out.len() {
                out[j] = s / d * (d * g[j] - sum_g - xh[j] * sum_gx);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise numerically stable softmax, in place.
pub fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// `log(sum(exp(x)))` computed stably.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverted dropout mask: entries are 0 or `1 / (1 - p)`.
pub fn dropout_mask<R: Rng>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Mat {
    let keep = 1.0 / (1.0 - p);
    Mat::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Mean over rows, as a `1 x d` matrix.
pub fn mean_rows(m: &Mat) -> Mat {
    m.mean_axis(Axis(0)).expect("at least one row").insert_axis(Axis(0))
}
