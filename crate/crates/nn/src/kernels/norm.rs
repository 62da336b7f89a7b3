//! Per-channel batch feature normalization over `[n, c, spatial]` tensors.
//!
//! Statistics are always accumulated in `f64` and stored as `f32`, whatever
//! precision the surrounding activations are kept in.

use crate::tensor::Tensor;

pub struct NormForward {
    pub output: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
    pub mean: Vec<f32>,
    /// Unbiased batch variance, used for running-statistics updates.
    pub var_unbiased: Vec<f32>,
}

fn layout(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    let spatial: usize = s[2..].iter().product();
    (s[0], s[1], spatial)
}

pub fn batch_norm_train(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> NormForward {
    let (n, c, sp) = layout(x);
    let m = (n * sp) as f64;
    let mut mean = vec![0f32; c];
    let mut inv_std = vec![0f32; c];
    let mut var_unbiased = vec![0f32; c];
    let mut xhat = Tensor::zeros(x.shape());
    let mut output = Tensor::zeros(x.shape());
    for ch in 0..c {
        let mut sum = 0f64;
        for s in 0..n {
            sum += x.data()[(s * c + ch) * sp..][..sp].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = sum / m;
        let mut sq = 0f64;
        for s in 0..n {
            sq += x.data()[(s * c + ch) * sp..][..sp]
                .iter()
                .map(|&v| {
                    let d = v as f64 - mu;
                    d * d
                })
                .sum::<f64>();
        }
        let var = sq / m;
        let istd = 1.0 / (var + eps as f64).sqrt();
        mean[ch] = mu as f32;
        inv_std[ch] = istd as f32;
        var_unbiased[ch] = if m > 1.0 { (sq / (m - 1.0)) as f32 } else { var as f32 };
        for s in 0..n {
            let off = (s * c + ch) * sp;
            let src = &x.data()[off..off + sp];
            let xh = &mut xhat.data_mut()[off..off + sp];
            for (h, &v) in xh.iter_mut().zip(src) {
                *h = ((v as f64 - mu) * istd) as f32;
            }
            let out = &mut output.data_mut()[off..off + sp];
            for (o, &h) in out.iter_mut().zip(&xhat.data()[off..off + sp]) {
                *o = gamma[ch] * h + beta[ch];
            }
        }
    }
    NormForward {
        output,
        xhat,
        inv_std,
        mean,
        var_unbiased,
    }
}

/// Inference-mode normalization with running statistics; returns output and
/// the per-channel `1/sqrt(var + eps)` used by the backward pass.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
) -> (Tensor, Tensor, Vec<f32>) {
    let (n, c, sp) = layout(x);
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let inv_std: Vec<f32> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * sp;
            for i in off..off + sp {
                let h = (x.data()[i] - running_mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = h;
                out.data_mut()[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (out, xhat, inv_std)
}

pub struct NormGrads {
    pub dx: Tensor,
    pub dgamma: Vec<f32>,
    pub dbeta: Vec<f32>,
}

/// Backward of normalization. With `batch_stats` the batch mean/variance
/// depend on the input; otherwise the transform is a fixed affine map.
pub fn batch_norm_backward(
    dy: &Tensor,
    xhat: &Tensor,
    gamma: &[f32],
    inv_std: &[f32],
    batch_stats: bool,
) -> NormGrads {
    let (n, c, sp) = layout(dy);
    let m = (n * sp) as f64;
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = vec![0f32; c];
    let mut dbeta = vec![0f32; c];
    for ch in 0..c {
        let mut sum_dy = 0f64;
        let mut sum_dy_xhat = 0f64;
        for s in 0..n {
            let off = (s * c + ch) * sp;
            for (&g, &h) in dy.data()[off..off + sp].iter().zip(&xhat.data()[off..off + sp]) {
                sum_dy += g as f64;
                sum_dy_xhat += g as f64 * h as f64;
            }
        }
        dgamma[ch] = sum_dy_xhat as f32;
        dbeta[ch] = sum_dy as f32;
        let k = gamma[ch] as f64 * inv_std[ch] as f64;
        for s in 0..n {
            let off = (s * c + ch) * sp;
            for i in off..off + sp {
                let g = dy.data()[i] as f64;
                dx.data_mut()[i] = if batch_stats {
                    let h = xhat.data()[i] as f64;
                    (k * (g - sum_dy / m - h * sum_dy_xhat / m)) as f32
                } else {
                    (k * g) as f32
                };
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}
