//! Dense layers with explicit forward and backward passes.
//!
//! Activations are row-major `rows x features` matrices. Each layer's
//! `backward` takes whatever its forward pass cached, accumulates parameter
//! gradients in place and returns the gradient with respect to its input.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed::Rng;

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl Param {
    pub fn new(value: Array2<f64>, decay: bool) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad, decay }
    }

    pub fn zeros(rows: usize, cols: usize, decay: bool) -> Self {
        Self::new(Array2::zeros((rows, cols)), decay)
    }

    pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut Rng, decay: bool) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        Self::new(Array2::from_shape_fn((rows, cols), |_| dist.sample(rng)), decay)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Named, ordered access to every parameter of a model. The visiting order
/// is stable and defines checkpoint layout and optimizer state alignment.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.value.len());
        n
    }

    fn grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        self.visit(&mut |_, p| sq += p.grad.iter().map(|g| g * g).sum::<f64>());
        sq.sqrt()
    }

    /// Rescale gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            let scale = max_norm / (norm + 1e-6);
            self.visit_mut(&mut |_, p| p.grad.mapv_inplace(|g| g * scale));
        }
        norm
    }
}

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(input: usize, output: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            w: Param::normal(input, output, std, rng, true),
            b: Param::zeros(1, output, false),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.value.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.value) + &self.b.value
    }

    pub fn backward(&mut self, x: &ArrayView2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.w.grad += &x.t().dot(dy);
        self.b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.value.t())
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

/// Row-wise layer normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Array2::ones((1, dim)), false),
            beta: Param::zeros(1, dim, false),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut rstd = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let y = &xhat * &self.gamma.value + &self.beta.value;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        self.gamma.grad += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma.value;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            let r = cache.rstd[i];
            Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xi| *o = r * (gi - mean_g - xi * mean_gx));
        }
        dx
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Dilated causal 1-D convolution over a `steps x channels` sequence,
/// computed as an im2col matrix product. Output step `t` reads input steps
/// `t - j * dilation` for `j in 0..kernel`; steps before the start are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalConv1d {
    pub kernel: usize,
    pub dilation: usize,
    pub in_channels: usize,
    /// `(kernel * in_channels) x out_channels`; block `j` holds the taps
    /// applied to step `t - (kernel - 1 - j) * dilation`.
    pub w: Param,
    pub b: Param,
}

impl CausalConv1d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize, rng: &mut Rng) -> Self {
        let fan_in = (kernel * in_channels) as f64;
        Self {
            kernel,
            dilation,
            in_channels,
            w: Param::normal(kernel * in_channels, out_channels, (2.0 / fan_in).sqrt(), rng, true),
            b: Param::zeros(1, out_channels, false),
        }
    }

    /// Number of past steps (inclusive of the current one) each output reads.
    pub fn receptive_field(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }

    pub fn im2col(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let (steps, c) = x.dim();
        let mut cols = Array2::zeros((steps, self.kernel * c));
        for j in 0..self.kernel {
            let lag = (self.kernel - 1 - j) * self.dilation;
            if lag >= steps {
                continue;
            }
            cols.slice_mut(s![lag.., j * c..(j + 1) * c])
                .assign(&x.slice(s![..steps - lag, ..]));
        }
        cols
    }

    /// Returns the output and the im2col matrix needed by `backward`.
    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let cols = self.im2col(x);
        let y = cols.dot(&self.w.value) + &self.b.value;
        (y, cols)
    }

    pub fn backward(&mut self, cols: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.w.grad += &cols.t().dot(dy);
        self.b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dcols = dy.dot(&self.w.value.t());
        let steps = dy.nrows();
        let c = self.in_channels;
        let mut dx = Array2::zeros((steps, c));
        for j in 0..self.kernel {
            let lag = (self.kernel - 1 - j) * self.dilation;
            if lag >= steps {
                continue;
            }
            let mut dst = dx.slice_mut(s![..steps - lag, ..]);
            dst += &dcols.slice(s![lag.., j * c..(j + 1) * c]);
        }
        dx
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn gelu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(pre).for_each(|d, &x| {
        let u = GELU_C * (x + 0.044715 * x * x * x);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
        *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    });
    dx
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Serialized tensor inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

pub fn export_params(model: &dyn Parameters) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    model.visit(&mut |name, p| {
        out.push(NamedTensor {
            name: name.to_string(),
            shape: [p.value.nrows(), p.value.ncols()],
            data: p.value.iter().copied().collect(),
        })
    });
    out
}

/// Load tensors into a model with identical layout.
pub fn import_params(model: &mut dyn Parameters, tensors: &[NamedTensor]) -> crate::Result<()> {
    let mut idx = 0;
    let mut err = None;
    model.visit_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        let Some(t) = tensors.get(idx) else {
            err = Some(format!("missing tensor `{name}`"));
            return;
        };
        idx += 1;
        if t.name != name || t.shape != [p.value.nrows(), p.value.ncols()] {
            err = Some(format!(
                "tensor mismatch: expected `{name}` {:?}, found `{}` {:?}",
                p.value.dim(),
                t.name,
                t.shape
            ));
            return;
        }
        if t.data.len() != t.shape[0] * t.shape[1] || t.data.iter().any(|v| !v.is_finite()) {
            err = Some(format!("tensor `{name}` is malformed or non-finite"));
            return;
        }
        p.value = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone()).unwrap();
        p.grad = Array2::zeros(p.value.raw_dim());
    });
    if let Some(e) = err {
        return Err(crate::Error::Incompatible(e));
    }
    if idx != tensors.len() {
        return Err(crate::Error::Incompatible(format!(
            "checkpoint holds {} tensors, model expects {idx}",
            tensors.len()
        )));
    }
    Ok(())
}
