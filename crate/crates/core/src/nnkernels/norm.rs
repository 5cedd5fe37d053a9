//! Batch normalization over (n, h, w) per channel.

use super::{shape_err, KernelError, Real, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the running averages.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads<T> {
    pub input: Tensor4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

fn for_channel<T: Real>(t: &Tensor4<T>, c: usize, mut f: impl FnMut(usize)) {
    let [n, ch, h, w] = t.dims();
    let plane = h * w;
    for i in 0..n {
        let base = (i * ch + c) * plane;
        (base..base + plane).for_each(&mut f);
    }
}

/// `y = gamma * (x - mu) / sqrt(var + eps) + beta` per channel.
///
/// In [`BnMode::Train`] the biased batch variance normalizes and the unbiased
/// one feeds the running average: `running = (1 - momentum) * running + momentum * batch`.
pub fn batchnorm2d<T: Real>(
    input: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    stats: &mut RunningStats<T>,
    mode: BnMode,
    eps: T,
    momentum: T,
) -> Result<(Tensor4<T>, BnCache<T>), KernelError> {
    let [n, c, h, w] = input.dims();
    if gamma.len() != c || beta.len() != c || stats.mean.len() != c || stats.var.len() != c {
        return Err(shape_err(format!("batchnorm over {c} channels got gamma {} beta {}", gamma.len(), beta.len())));
    }
    let m = n * h * w;
    let mut xhat = Tensor4::zeros(input.dims());
    let mut out = Tensor4::zeros(input.dims());
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let (mean, var) = match mode {
            BnMode::Train => {
                if m == 0 {
                    return Err(shape_err("batchnorm training on an empty batch"));
                }
                let mut sum = T::zero();
                for_channel(input, ch, |i| sum = sum + input.data[i]);
                let mean = sum / T::from_usize(m);
                let mut sq = T::zero();
                for_channel(input, ch, |i| {
                    let d = input.data[i] - mean;
                    sq = sq + d * d;
                });
                let var = sq / T::from_usize(m);
                let unbiased = if m > 1 { sq / T::from_usize(m - 1) } else { var };
                stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mean;
                stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * unbiased;
                (mean, var)
            }
            BnMode::Eval => (stats.mean[ch], stats.var[ch]),
        };
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        for_channel(input, ch, |i| {
            let xh = (input.data[i] - mean) * is;
            xhat.data[i] = xh;
            out.data[i] = gamma[ch] * xh + beta[ch];
        });
    }
    Ok((out, BnCache { xhat, inv_std, mode }))
}

pub fn batchnorm2d_backward<T: Real>(
    cache: &BnCache<T>,
    gamma: &[T],
    grad_out: &Tensor4<T>,
) -> Result<BnGrads<T>, KernelError> {
    let dims = cache.xhat.dims();
    if grad_out.dims() != dims || gamma.len() != dims[1] {
        return Err(shape_err("batchnorm backward shape mismatch"));
    }
    let [n, c, h, w] = dims;
    let m = T::from_usize(n * h * w);
    let mut dx = Tensor4::zeros(dims);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let xhat = &cache.xhat.data;
    let dy = &grad_out.data;
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for_channel(grad_out, ch, |i| {
            sum_dy = sum_dy + dy[i];
            sum_dy_xhat = sum_dy_xhat + dy[i] * xhat[i];
        });
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * cache.inv_std[ch];
        match cache.mode {
            BnMode::Eval => for_channel(grad_out, ch, |i| dx.data[i] = dy[i] * scale),
            BnMode::Train => for_channel(grad_out, ch, |i| {
                dx.data[i] = scale / m * (m * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
            }),
        }
    }
    Ok(BnGrads { input: dx, gamma: dgamma, beta: dbeta })
}
