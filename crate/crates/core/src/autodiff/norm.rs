use crate::error::{Error, Result};

use super::Real;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

pub(crate) struct BnForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub updated: Option<BnStats<T>>,
}

pub(crate) fn batchnorm_forward<T: Real>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    stats: &BnStats<T>,
    mode: BnMode,
) -> Result<BnForward<T>> {
    let hw = h * w;
    let m = n * hw;
    if gamma.len() != c || beta.len() != c || stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::Shape(format!("batch-norm parameters do not match {c} channels")));
    }
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    match mode {
        BnMode::Train => {
            if m < 2 {
                return Err(Error::Shape(format!("train-mode batch norm needs N*H*W >= 2, got {m}")));
            }
            for ch in 0..c {
                let mut s = 0.0;
                for s_i in 0..n {
                    s += x[(s_i * c + ch) * hw..][..hw].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = s / m as f64;
                let mut q = 0.0;
                for s_i in 0..n {
                    q += x[(s_i * c + ch) * hw..][..hw]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = q / m as f64;
            }
        }
        BnMode::Eval => {
            for ch in 0..c {
                mean[ch] = stats.mean[ch].as_f64();
                var[ch] = stats.var[ch].as_f64();
            }
        }
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::lit(1.0 / (v + BN_EPS).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&v| T::lit(v)).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for s_i in 0..n {
        for ch in 0..c {
            let off = (s_i * c + ch) * hw;
            let (mu, is, g, b) = (mean_t[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in off..off + hw {
                let xh = (x[i] - mu) * is;
                xhat[i] = xh;
                y[i] = g * xh + b;
            }
        }
    }
    let updated = (mode == BnMode::Train).then(|| {
        let unbias = m as f64 / (m as f64 - 1.0);
        BnStats {
            mean: (0..c)
                .map(|ch| T::lit((1.0 - BN_MOMENTUM) * stats.mean[ch].as_f64() + BN_MOMENTUM * mean[ch]))
                .collect(),
            var: (0..c)
                .map(|ch| T::lit((1.0 - BN_MOMENTUM) * stats.var[ch].as_f64() + BN_MOMENTUM * var[ch] * unbias))
                .collect(),
        }
    });
    Ok(BnForward { y, xhat, inv_std, updated })
}

pub(crate) struct BnGrads<'a, T> {
    pub dx: Option<&'a mut [T]>,
    pub dgamma: Option<&'a mut [T]>,
    pub dbeta: Option<&'a mut [T]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    train: bool,
    out: BnGrads<'_, T>,
) {
    let hw = h * w;
    let m = (n * hw) as f64;
    let BnGrads { mut dx, mut dgamma, mut dbeta } = out;
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for s_i in 0..n {
            let off = (s_i * c + ch) * hw;
            for i in off..off + hw {
                sum_dy += dy[i].as_f64();
                sum_dy_xhat += (dy[i] * xhat[i]).as_f64();
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            db[ch] += T::lit(sum_dy);
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            dg[ch] += T::lit(sum_dy_xhat);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let scale = gamma[ch] * inv_std[ch];
            let mean_dy = T::lit(sum_dy / m);
            let mean_dy_xhat = T::lit(sum_dy_xhat / m);
            for s_i in 0..n {
                let off = (s_i * c + ch) * hw;
                for i in off..off + hw {
                    dx[i] += if train {
                        scale * (dy[i] - mean_dy - xhat[i] * mean_dy_xhat)
                    } else {
                        scale * dy[i]
                    };
                }
            }
        }
    }
}
