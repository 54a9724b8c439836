//! Numeric kernels for the convolutional classifier.
//!
//! Everything runs in `f64`. Each forward kernel has a matching backward
//! kernel that computes the exact adjoint of the forward definition.

use ndarray::{Array1, Array2, Array3, ArrayView2, Dimension};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative given the activated output. ReLU uses subgradient 0 at 0.
    #[inline]
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Filters of one height: `weights[f][r][c]` spans `height` rows of a
/// `dim`-wide input.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub weights: Array3<f64>,
    pub bias: Array1<f64>,
}

impl FilterBank {
    /// Glorot-uniform weights, zero bias.
    pub fn init(height: usize, num_filters: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if height == 0 || num_filters == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "filter bank needs positive height, count and dim (got {height}, {num_filters}, {dim})"
            )));
        }
        let fan_in = (height * dim) as f64;
        let fan_out = (height * num_filters) as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        Ok(FilterBank {
            weights: Array3::from_shape_simple_fn((num_filters, height, dim), || {
                rng.gen_range(-limit..=limit)
            }),
            bias: Array1::zeros(num_filters),
        })
    }

    pub fn zeros(height: usize, num_filters: usize, dim: usize) -> Self {
        FilterBank {
            weights: Array3::zeros((num_filters, height, dim)),
            bias: Array1::zeros(num_filters),
        }
    }

    pub fn height(&self) -> usize {
        self.weights.dim().1
    }

    pub fn num_filters(&self) -> usize {
        self.weights.dim().0
    }

    pub fn dim(&self) -> usize {
        self.weights.dim().2
    }

    /// Contiguous `height × dim` weights of filter `f`.
    #[inline]
    pub(crate) fn filter(&self, f: usize) -> &[f64] {
        let n = self.height() * self.dim();
        &self.weights.as_slice().expect("standard layout")[f * n..(f + 1) * n]
    }
}

/// Filter banks for a set of distinct heights, applied to one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilterBank {
    pub banks: Vec<FilterBank>,
}

impl ConvFilterBank {
    pub fn init(heights: &[usize], num_filters: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let banks = heights
            .iter()
            .map(|&h| FilterBank::init(h, num_filters, dim, rng))
            .collect::<Result<_>>()?;
        Ok(ConvFilterBank { banks })
    }

    pub fn num_features(&self) -> usize {
        self.banks.iter().map(FilterBank::num_filters).sum()
    }

    pub fn max_height(&self) -> usize {
        self.banks.iter().map(FilterBank::height).max().unwrap_or(0)
    }

    pub fn zeros_like(&self) -> Self {
        ConvFilterBank {
            banks: self
                .banks
                .iter()
                .map(|b| FilterBank::zeros(b.height(), b.num_filters(), b.dim()))
                .collect(),
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Pre-activation of filter `f` at window `t`: the window/filter dot
/// product accumulated row-major, plus bias.
#[inline]
pub(crate) fn window_response(input: &[f64], bank: &FilterBank, f: usize, t: usize) -> f64 {
    let n = bank.height() * bank.dim();
    let start = t * bank.dim();
    dot(&input[start..start + n], bank.filter(f)) + bank.bias[f]
}

fn check_input(input: &ArrayView2<'_, f64>, bank: &FilterBank) -> Result<()> {
    if input.ncols() != bank.dim() {
        return Err(Error::Shape(format!(
            "input width {} differs from filter width {}",
            input.ncols(),
            bank.dim()
        )));
    }
    if input.nrows() < bank.height() {
        return Err(Error::Shape(format!(
            "sequence length {} shorter than filter height {}; pad first",
            input.nrows(),
            bank.height()
        )));
    }
    Ok(())
}

/// Feature maps `[num_filters, l - h + 1]` of an `l × d` input.
pub fn conv_forward(
    input: ArrayView2<'_, f64>,
    bank: &FilterBank,
    act: Activation,
) -> Result<Array2<f64>> {
    check_input(&input, bank)?;
    let windows = input.nrows() - bank.height() + 1;
    conv_forward_windows(input, bank, act, windows)
}

/// As [`conv_forward`] but only over the first `windows` windows.
pub fn conv_forward_windows(
    input: ArrayView2<'_, f64>,
    bank: &FilterBank,
    act: Activation,
    windows: usize,
) -> Result<Array2<f64>> {
    check_input(&input, bank)?;
    if windows == 0 || windows > input.nrows() - bank.height() + 1 {
        return Err(Error::Shape(format!("invalid window count {windows}")));
    }
    let owned;
    let x = match input.as_slice() {
        Some(s) => s,
        None => {
            owned = input.to_owned();
            owned.as_slice().expect("owned is standard layout")
        }
    };
    let mut out = Array2::zeros((bank.num_filters(), windows));
    for f in 0..bank.num_filters() {
        for t in 0..windows {
            out[[f, t]] = act.apply(window_response(x, bank, f, t));
        }
    }
    Ok(out)
}

/// Gradients of a filter bank's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBankGrad {
    pub weights: Array3<f64>,
    pub bias: Array1<f64>,
}

/// Adjoint of [`conv_forward`]. `output` is the activated forward result and
/// `grad_output` the upstream gradient with the same shape. Returns the
/// gradient w.r.t. the input and the bank parameters.
pub fn conv_backward(
    input: ArrayView2<'_, f64>,
    bank: &FilterBank,
    act: Activation,
    output: &Array2<f64>,
    grad_output: &Array2<f64>,
) -> Result<(Array2<f64>, FilterBankGrad)> {
    check_input(&input, bank)?;
    if output.dim() != grad_output.dim() || output.nrows() != bank.num_filters() {
        return Err(Error::Shape(format!(
            "feature map shapes {:?} / {:?} do not match {} filters",
            output.dim(),
            grad_output.dim(),
            bank.num_filters()
        )));
    }
    let (h, d) = (bank.height(), bank.dim());
    let mut grad_input = Array2::zeros(input.dim());
    let mut grad = FilterBankGrad {
        weights: Array3::zeros(bank.weights.dim()),
        bias: Array1::zeros(bank.num_filters()),
    };
    for f in 0..bank.num_filters() {
        for t in 0..output.ncols() {
            let g = grad_output[[f, t]] * act.grad_from_output(output[[f, t]]);
            if g == 0.0 {
                continue;
            }
            grad.bias[f] += g;
            for r in 0..h {
                for c in 0..d {
                    grad.weights[[f, r, c]] += g * input[[t + r, c]];
                    grad_input[[t + r, c]] += g * bank.weights[[f, r, c]];
                }
            }
        }
    }
    Ok((grad_input, grad))
}

/// 1-max pooling: the maximum and its lowest index.
pub fn maxpool1(v: &[f64]) -> Result<(f64, usize)> {
    let (&first, rest) = v
        .split_first()
        .ok_or_else(|| Error::Empty("max pooling over an empty feature map".into()))?;
    let mut best = (first, 0);
    for (i, &x) in rest.iter().enumerate() {
        if x > best.0 {
            best = (x, i + 1);
        }
    }
    Ok(best)
}

/// Adjoint of [`maxpool1`]: routes `upstream` to `argmax`.
pub fn pool_backward(len: usize, argmax: usize, upstream: f64) -> Result<Vec<f64>> {
    if argmax >= len {
        return Err(Error::Shape(format!("argmax {argmax} outside feature map of length {len}")));
    }
    let mut g = vec![0.0; len];
    g[argmax] = upstream;
    Ok(g)
}

/// Stabilized softmax and cross-entropy `-ln p[label]`.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", logits.len())));
    }
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} outside {} classes",
            logits.len()
        )));
    }
    let probs = softmax(logits);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok((log_z - logits[label], probs))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient of the cross-entropy w.r.t. the logits: `p - onehot(label)`.
pub fn xent_backward(probs: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= probs.len() {
        return Err(Error::InvalidArgument(format!("label {label} outside {} classes", probs.len())));
    }
    let mut g = probs.to_vec();
    g[label] -= 1.0;
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (0 or `1 / (1 - rate)`; all ones in eval mode), which is also the
/// backward factor.
pub fn dropout(v: &[f64], rate: f64, mode: Mode, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((v.to_vec(), vec![1.0; v.len()]));
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = seed::rng(seed);
    let mask: Vec<f64> = v
        .iter()
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Ok((v.iter().zip(&mask).map(|(x, m)| x * m).collect(), mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        AdadeltaConfig { rho: 0.95, eps: 1e-6 }
    }
}

/// Running averages `E[g²]` and `E[Δx²]` of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState {
    pub sq_grad: Vec<f64>,
    pub sq_update: Vec<f64>,
}

impl AdadeltaState {
    pub fn new(len: usize) -> Self {
        AdadeltaState {
            sq_grad: vec![0.0; len],
            sq_update: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.sq_grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sq_grad.is_empty()
    }

    /// One Adadelta step on a flat parameter slice.
    pub fn update(&mut self, param: &mut [f64], grad: &[f64], cfg: &AdadeltaConfig) -> Result<()> {
        if param.len() != grad.len() || param.len() != self.len() {
            return Err(Error::Shape(format!(
                "adadelta: param {}, grad {}, state {}",
                param.len(),
                grad.len(),
                self.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        let (rho, eps) = (cfg.rho, cfg.eps);
        for (((x, &g), eg), ex) in param
            .iter_mut()
            .zip(grad)
            .zip(self.sq_grad.iter_mut())
            .zip(self.sq_update.iter_mut())
        {
            *eg = rho * *eg + (1.0 - rho) * g * g;
            let dx = -((*ex + eps).sqrt() / (*eg + eps).sqrt()) * g;
            *ex = rho * *ex + (1.0 - rho) * dx * dx;
            *x += dx;
        }
        Ok(())
    }
}

/// [`AdadeltaState::update`] for standard-layout ndarray tensors.
pub fn adadelta_update<D: Dimension>(
    param: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    state: &mut AdadeltaState,
    cfg: &AdadeltaConfig,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Shape(format!(
            "adadelta: param {:?} vs grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    let p = param
        .as_slice_mut()
        .ok_or_else(|| Error::Shape("parameter not contiguous".into()))?;
    let g = grad
        .as_slice()
        .ok_or_else(|| Error::Shape("gradient not contiguous".into()))?;
    state.update(p, g, cfg)
}
