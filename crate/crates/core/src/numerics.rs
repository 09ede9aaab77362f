//! Minimal dense-network engine: parameter storage, forward evaluation,
//! exact reverse-mode gradients and a central-difference oracle.
//!
//! Everything is `f64` and every reduction runs in index order, so identical
//! inputs give bitwise-identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::{dim, FairNetError, Result};
use crate::rng::SplitMix64;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(dim(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FairNetError::NonFinite("matrix entry".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Symmetric uniform init in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut SplitMix64) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(dim(format!(
                "matvec: {}x{} by {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`.
    pub fn t_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(dim(format!(
                "t_matvec: {}x{} by {}",
                self.rows,
                self.cols,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(dim(format!(
                "matmul: {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    out.values[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(dim(format!(
                "add: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            values,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.values[c * self.rows + r] = self.get(r, c);
            }
        }
        out
    }

    /// `self += alpha · u vᵀ`.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let a = alpha * ur;
            let row = &mut self.values[r * self.cols..(r + 1) * self.cols];
            for (w, &vc) in row.iter_mut().zip(v) {
                *w += a * vc;
            }
        }
    }

    /// `self -= lr · grad`.
    pub fn step(&mut self, lr: f64, grad: &Matrix) {
        debug_assert_eq!(self.shape(), grad.shape());
        for (w, g) in self.values.iter_mut().zip(&grad.values) {
            *w -= lr * g;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
}

pub fn step_vec(params: &mut [f64], lr: f64, grad: &[f64]) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => stable_sigmoid(x),
        }
    }

    /// d(output)/d(pre) given both the pre-activation and the output.
    pub fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
            Activation::Sigmoid => out * (1.0 - out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(dim("layer dimensions must be >= 1"));
        }
        Ok(Self {
            in_dim,
            out_dim,
            activation,
        })
    }
}

/// Values retained by a dense forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCache {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub output: Vec<f64>,
}

/// `activation(W x + b)`, returning the pre-activation alongside the output.
pub fn dense_forward(
    w: &Matrix,
    b: &[f64],
    x: &[f64],
    activation: Activation,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if b.len() != w.rows() {
        return Err(dim(format!(
            "bias length {} for {} outputs",
            b.len(),
            w.rows()
        )));
    }
    let mut pre = w.matvec(x)?;
    for (p, &bi) in pre.iter_mut().zip(b) {
        *p += bi;
    }
    let out = pre.iter().map(|&p| activation.apply(p)).collect();
    Ok((pre, out))
}

pub fn dense_forward_cached(
    w: &Matrix,
    b: &[f64],
    x: &[f64],
    activation: Activation,
) -> Result<DenseCache> {
    let (pre_activation, output) = dense_forward(w, b, x, activation)?;
    Ok(DenseCache {
        input: x.to_vec(),
        pre_activation,
        output,
    })
}

/// Gradient w.r.t. the pre-activation from the gradient w.r.t. the output.
pub fn activation_backward(
    activation: Activation,
    cache: &DenseCache,
    upstream: &[f64],
) -> Vec<f64> {
    upstream
        .iter()
        .zip(cache.pre_activation.iter().zip(&cache.output))
        .map(|(&g, (&p, &o))| g * activation.derivative(p, o))
        .collect()
}

/// Per-parameter gradient buffers aligned with a layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientTape {
    pub fn for_shapes(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (weights, biases) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), vec![0.0; r]))
            .unzip();
        Self { weights, biases }
    }

    pub fn zero(&mut self) {
        self.weights.iter_mut().for_each(|w| w.fill(0.0));
        self.biases
            .iter_mut()
            .for_each(|b| b.iter_mut().for_each(|x| *x = 0.0));
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.values_mut().iter_mut().for_each(|x| *x *= factor);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Weights then bias, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.values());
            out.extend_from_slice(b);
        }
        out
    }
}

/// Accumulates `dL/dW`, `dL/db` for layer `layer` into `tape` and returns
/// `dL/dx`.
pub fn dense_backward(
    tape: &mut GradientTape,
    layer: usize,
    w: &Matrix,
    activation: Activation,
    cache: &DenseCache,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    if layer >= tape.weights.len() {
        return Err(dim(format!("no gradient buffer for layer {layer}")));
    }
    if upstream.len() != w.rows()
        || cache.pre_activation.len() != w.rows()
        || cache.input.len() != w.cols()
        || tape.weights[layer].shape() != w.shape()
    {
        return Err(dim(
            "dense_backward: cache or upstream does not match layer",
        ));
    }
    let dpre = activation_backward(activation, cache, upstream);
    tape.weights[layer].add_outer(1.0, &dpre, &cache.input);
    for (gb, d) in tape.biases[layer].iter_mut().zip(&dpre) {
        *gb += d;
    }
    w.t_matvec(&dpre)
}

/// Central-difference estimate of `∇f(θ)`, one coordinate at a time.
pub fn finite_difference_gradient<F>(mut loss_fn: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = loss_fn(&theta);
        theta[i] = orig - h;
        let minus = loss_fn(&theta);
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(FairNetError::NonFinite(format!("loss at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest per-coordinate relative error, with a `1e-6` floor on the
/// denominator so that coordinates with vanishing gradient are compared
/// absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy and its gradient `softmax(logits) − one_hot(label)`.
pub fn stable_softmax_ce(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(dim(format!("label {label} for {} classes", logits.len())));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(FairNetError::NonFinite("logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|&l| (l - log_z).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Weighted binary cross-entropy on a logit `u`:
/// `weight · (softplus(u) − target·u)`, with gradient `weight · (σ(u) − target)`.
pub fn weighted_bce_with_logit(u: f64, target: f64, weight: f64) -> (f64, f64) {
    let loss = weight * (softplus(u) - target * u);
    let grad = weight * (stable_sigmoid(u) - target);
    (loss, grad)
}
