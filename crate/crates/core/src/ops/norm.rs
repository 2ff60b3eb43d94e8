//! Batch normalization over the channel axis of (N,C,H,W) tensors.
//!
//! Statistics are biased (divide by the sample count); running stats are
//! updated with `running = (1 - momentum) * running + momentum * batch`.

use crate::error::{Error, Result};
use crate::meter::{self, FLOPS_BATCH_NORM};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel values cached by the training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn check_bn_args(input: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<()> {
    let [_, c, h, w] = input.shape();
    if h == 0 || w == 0 {
        return Err(Error::InvalidGeometry {
            context: "batch_norm",
            message: "zero-size spatial input".into(),
        });
    }
    if gamma.len() != c {
        return Err(Error::ShapeMismatch {
            context: "batch_norm",
            dimension: "gamma length",
            expected: c,
            found: gamma.len(),
        });
    }
    if beta.len() != c {
        return Err(Error::ShapeMismatch {
            context: "batch_norm",
            dimension: "beta length",
            expected: c,
            found: beta.len(),
        });
    }
    Ok(())
}

/// Training-mode forward: normalize by batch statistics, update running stats
/// in place, and return the saved values needed by the backward pass.
pub fn batch_norm_train(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &mut [f64],
    running_var: &mut [f64],
    eps: f64,
    momentum: f64,
) -> Result<(Tensor, BnSaved)> {
    check_bn_args(input, gamma, beta)?;
    let [n, c, h, w] = input.shape();
    let per_channel = n * h * w;
    if per_channel < 2 {
        return Err(Error::InvalidGeometry {
            context: "batch_norm",
            message: format!("train mode requires N*H*W >= 2 per channel, got {per_channel}"),
        });
    }

    let plane = h * w;
    let count = per_channel as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    let data = input.data();
    for img in 0..n {
        for (ch, slot) in mean.iter_mut().enumerate() {
            let base = (img * c + ch) * plane;
            let mut s = 0.0;
            for v in &data[base..base + plane] {
                s += v;
            }
            *slot += s;
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let m = mean[ch];
            let mut s = 0.0;
            for v in &data[base..base + plane] {
                let d = v - m;
                s += d * d;
            }
            var[ch] += s;
        }
    }
    for v in var.iter_mut() {
        *v /= count;
    }

    for ch in 0..c {
        running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean[ch];
        running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * var[ch];
    }

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let out = apply_affine(input, &mean, &inv_std, gamma, beta);
    Ok((out, BnSaved { mean, inv_std }))
}

/// Eval-mode forward: normalize by the provided running statistics.
pub fn batch_norm_eval(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    check_bn_args(input, gamma, beta)?;
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    Ok(apply_affine(input, running_mean, &inv_std, gamma, beta))
}

fn apply_affine(input: &Tensor, mean: &[f64], inv_std: &[f64], gamma: &[f64], beta: &[f64]) -> Tensor {
    let [n, c, h, w] = input.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(input.shape());
    let src = input.data();
    let dst = out.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for i in base..base + plane {
                dst[i] = src[i] * scale + shift;
            }
        }
    }
    if meter::enabled() {
        meter::add(FLOPS_BATCH_NORM * (n * c * plane) as u64);
    }
    out
}

/// Backward through the training-mode normalization (batch statistics are
/// part of the differentiated graph).
///
/// Returns (input_grad, gamma_grad, beta_grad).
pub fn batch_norm_train_backward(
    output_grad: &Tensor,
    input: &Tensor,
    gamma: &[f64],
    saved: &BnSaved,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = input.shape();
    let plane = h * w;
    let count = (n * plane) as f64;
    let src = input.data();
    let g = output_grad.data();

    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let m = saved.mean[ch];
            let is = saved.inv_std[ch];
            let mut sg = 0.0;
            let mut sgx = 0.0;
            for i in base..base + plane {
                let xhat = (src[i] - m) * is;
                sg += g[i];
                sgx += g[i] * xhat;
            }
            sum_g[ch] += sg;
            sum_gx[ch] += sgx;
        }
    }
    dbeta.copy_from_slice(&sum_g);
    dgamma.copy_from_slice(&sum_gx);

    let mut dinput = Tensor::zeros(input.shape());
    let dx = dinput.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let m = saved.mean[ch];
            let is = saved.inv_std[ch];
            let k = gamma[ch] * is;
            let mg = sum_g[ch] / count;
            let mgx = sum_gx[ch] / count;
            for i in base..base + plane {
                let xhat = (src[i] - m) * is;
                dx[i] = k * (g[i] - mg - xhat * mgx);
            }
        }
    }
    (dinput, dgamma, dbeta)
}

/// Backward through the eval-mode normalization (running stats are constants).
pub fn batch_norm_eval_backward(
    output_grad: &Tensor,
    input: &Tensor,
    gamma: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = input.shape();
    let plane = h * w;
    let src = input.data();
    let g = output_grad.data();
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut dinput = Tensor::zeros(input.shape());
    let dx = dinput.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let is = 1.0 / (running_var[ch] + eps).sqrt();
            let m = running_mean[ch];
            let k = gamma[ch] * is;
            for i in base..base + plane {
                dbeta[ch] += g[i];
                dgamma[ch] += g[i] * (src[i] - m) * is;
                dx[i] = g[i] * k;
            }
        }
    }
    (dinput, dgamma, dbeta)
}
