//! The SpeechNet CNN: five conv blocks, global average pooling, dense head.
//!
//! | block | conv (filters, kernel, padding) | pool  | output for T = 400 |
//! |-------|---------------------------------|-------|--------------------|
//! | 1     | 8,  1x4,  same-time             | 1x8   | (8, 14, 50)        |
//! | 2     | 16, 1x16, same-time             | 1x4   | (16, 14, 12)       |
//! | 3     | 16, 1x8,  same-time             | 1x4   | (16, 14, 3)        |
//! | 4     | 32, 7x1,  valid                 | 1x1   | (32, 8, 3)         |
//! | 5     | 32, 7x1,  valid                 | 1x1   | (32, 2, 3)         |
//! | 6     | adaptive average pool           |       | (32, 1, 1)         |
//! | 7     | dense                           |       | 9                  |
//!
//! Each conv is followed by batch normalization (affine) and ReLU, then the
//! pool. Conv biases and BN affine parameters are both trainable, which gives
//! 15,489 trainable scalars for 14 channels and 9 classes.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nnkernels::{
    adaptive_avg_pool, adaptive_avg_pool_backward, batchnorm2d, batchnorm2d_backward, conv2d, conv2d_backward, dense,
    dense_backward, maxpool2d, maxpool2d_backward, relu, relu_backward, BnCache, BnMode, ConvShape, KernelError,
    MaxPoolRecord, Padding, RunningStats, Tensor4,
};
use crate::seed;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
/// Shortest window (samples) for which every pooled time axis stays non-empty.
pub const MIN_WINDOW: usize = 128;
/// Added to the standard deviation in [`normalize_window`].
pub const NORM_EPS: f32 = 1e-8;

pub const MODEL_MAGIC: &[u8; 4] = b"SWNM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("WindowTooShort: {len} samples, need at least {min}")]
    WindowTooShort { len: usize, min: usize },
    #[error("VersionMismatch: file version {found}, reader supports {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("Corrupt: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// (filters, kh, kw, padding, pool_h, pool_w) of each conv block.
const BLOCK_TABLE: [(usize, usize, usize, Padding, usize, usize); 5] = [
    (8, 1, 4, Padding::SameTime, 1, 8),
    (16, 1, 16, Padding::SameTime, 1, 4),
    (16, 1, 8, Padding::SameTime, 1, 4),
    (32, 7, 1, Padding::Valid, 1, 1),
    (32, 7, 1, Padding::Valid, 1, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub conv: ConvShape,
    pub pool: (usize, usize),
}

/// Layer geometry shared by the float and the quantized model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_channels: usize,
    pub n_classes: usize,
    pub blocks: Vec<BlockSpec>,
}

impl Architecture {
    pub fn speechnet(n_channels: usize, n_classes: usize) -> Result<Self, ModelError> {
        if n_channels < 13 {
            return Err(ModelError::InvalidConfig(format!(
                "{n_channels} channels; the two 7x1 spatial convs need at least 13"
            )));
        }
        if n_classes < 2 {
            return Err(ModelError::InvalidConfig(format!("{n_classes} classes")));
        }
        let mut in_c = 1;
        let blocks = BLOCK_TABLE
            .iter()
            .map(|&(out_c, kh, kw, padding, ph, pw)| {
                let conv = ConvShape { out_c, in_c, kh, kw, padding };
                in_c = out_c;
                BlockSpec { conv, pool: (ph, pw) }
            })
            .collect();
        Ok(Self { n_channels, n_classes, blocks })
    }

    pub fn features(&self) -> usize {
        self.blocks.last().map_or(1, |b| b.conv.out_c)
    }

    /// Per block: (conv output dims, pooled output dims) for one `n_channels x t` input.
    pub fn block_shapes(&self, t: usize) -> Result<Vec<BlockShape>, ModelError> {
        if t < MIN_WINDOW {
            return Err(ModelError::WindowTooShort { len: t, min: MIN_WINDOW });
        }
        let (mut h, mut w) = (self.n_channels, t);
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (ho, wo) = b.conv.out_hw(h, w)?;
            let (ph, pw) = b.pool;
            if ho < ph || wo < pw {
                return Err(ModelError::WindowTooShort { len: t, min: MIN_WINDOW });
            }
            h = ho / ph;
            w = wo / pw;
            out.push(([b.conv.out_c, ho, wo], [b.conv.out_c, h, w]));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub stats: RunningStats<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub spec: BlockSpec,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub bn: Option<BatchNorm>,
}

/// Dense head; `weight` is `in_features x n_classes`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead {
    pub in_features: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeechNetConfig {
    pub n_channels: usize,
    pub n_classes: usize,
    /// Ablation switch; the canonical network has BN in every block.
    pub batch_norm: bool,
}

impl Default for SpeechNetConfig {
    fn default() -> Self {
        Self { n_channels: crate::NUM_CHANNELS, n_classes: crate::NUM_CLASSES, batch_norm: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeechNet {
    pub arch: Architecture,
    pub blocks: Vec<ConvBlock>,
    pub head: DenseHead,
}

/// Intermediates of a training forward pass.
#[derive(Debug, Clone, Default)]
pub struct ExecutionRecord {
    batch: usize,
    window: usize,
    blocks: Vec<BlockRecord>,
    pooled_dims: [usize; 4],
    features: Vec<f32>,
}

#[derive(Debug, Clone)]
struct BlockRecord {
    input: Tensor4<f32>,
    bn: Option<BnCache<f32>>,
    activation: Tensor4<f32>,
    pool: MaxPoolRecord,
}

impl ExecutionRecord {
    pub fn is_recorded(&self) -> bool {
        !self.blocks.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Gradients in [`SpeechNet::params_mut`] order.
pub type Gradients = Vec<Vec<f32>>;

/// (conv output dims, pooled output dims) of one block, as `[c, h, w]`.
pub type BlockShape = ([usize; 3], [usize; 3]);

/// Per-channel z-score in place: mean 0, std 1; a flat channel becomes zeros.
pub fn normalize_window(data: &mut [f32], n_channels: usize) {
    let len = data.len() / n_channels.max(1);
    if len == 0 {
        return;
    }
    for ch in data.chunks_exact_mut(len) {
        let mean = ch.iter().map(|&v| f64::from(v)).sum::<f64>() / len as f64;
        let var = ch.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / len as f64;
        let scale = 1.0 / (var.sqrt() + f64::from(NORM_EPS));
        ch.iter_mut().for_each(|v| *v = ((f64::from(*v) - mean) * scale) as f32);
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl SpeechNet {
    /// Builds the network with seeded fan-in uniform weights, zero biases,
    /// unit BN scale and zero BN shift.
    pub fn build(cfg: SpeechNetConfig, seed: u64) -> Result<Self, ModelError> {
        let arch = Architecture::speechnet(cfg.n_channels, cfg.n_classes)?;
        let mut rng = seed::rng(seed, "speechnet/init");
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f32> {
            let bound = 1.0 / (fan_in as f32).sqrt();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let blocks = arch
            .blocks
            .iter()
            .map(|spec| {
                let c = spec.conv;
                ConvBlock {
                    spec: *spec,
                    weight: uniform(c.weight_len(), c.patch_len()),
                    bias: vec![0.0; c.out_c],
                    bn: cfg.batch_norm.then(|| BatchNorm {
                        gamma: vec![1.0; c.out_c],
                        beta: vec![0.0; c.out_c],
                        stats: RunningStats::new(c.out_c),
                    }),
                }
            })
            .collect();
        let f = arch.features();
        let head = DenseHead { in_features: f, weight: uniform(f * cfg.n_classes, f), bias: vec![0.0; cfg.n_classes] };
        Ok(Self { arch, blocks, head })
    }

    /// The canonical 14-channel, 9-class network.
    pub fn canonical(seed: u64) -> Self {
        Self::build(SpeechNetConfig::default(), seed).expect("canonical config is valid")
    }

    pub fn n_channels(&self) -> usize {
        self.arch.n_channels
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes
    }

    pub fn has_batch_norm(&self) -> bool {
        self.blocks.iter().all(|b| b.bn.is_some())
    }

    /// Trainable tensors in a fixed order: per block weight, bias
    /// [, gamma, beta]; then head weight, bias.
    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            if let Some(bn) = &mut b.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn params(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for b in &self.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
            if let Some(bn) = &b.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn param_lens(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.len()).collect()
    }

    /// Trainable scalars; BN running statistics are not counted.
    pub fn param_count(&self) -> usize {
        self.param_lens().iter().sum()
    }

    fn check_input(&self, x: &Tensor4<f32>) -> Result<(), ModelError> {
        let [_, c, h, w] = x.dims();
        if c != 1 || h != self.n_channels() {
            return Err(ModelError::Kernel(KernelError::ShapeMismatch(format!(
                "expected (n, 1, {}, T) input, got {:?}",
                self.n_channels(),
                x.dims()
            ))));
        }
        if w < MIN_WINDOW {
            return Err(ModelError::WindowTooShort { len: w, min: MIN_WINDOW });
        }
        Ok(())
    }

    /// Stacks channel-major windows of equal length into an `(n, 1, C, T)` tensor.
    pub fn batch_tensor<'a>(
        &self,
        windows: impl IntoIterator<Item = &'a [f32]>,
        t: usize,
    ) -> Result<Tensor4<f32>, ModelError> {
        let mut data = Vec::new();
        let mut n = 0;
        for w in windows {
            if w.len() != self.n_channels() * t {
                return Err(ModelError::Kernel(KernelError::ShapeMismatch(format!(
                    "window of {} values, expected {} x {t}",
                    w.len(),
                    self.n_channels()
                ))));
            }
            data.extend_from_slice(w);
            n += 1;
        }
        Ok(Tensor4::new([n, 1, self.n_channels(), t], data)?)
    }

    /// Eval-mode logits for a batch, `n x n_classes` row-major.
    pub fn forward_batch(&self, x: &Tensor4<f32>) -> Result<Vec<f32>, ModelError> {
        self.check_input(x)?;
        let mut h = x.clone();
        for b in &self.blocks {
            let mut y = conv2d(&h, &b.weight, &b.bias, b.spec.conv)?;
            if let Some(bn) = &b.bn {
                let mut stats = bn.stats.clone();
                y = batchnorm2d(&y, &bn.gamma, &bn.beta, &mut stats, BnMode::Eval, BN_EPS, BN_MOMENTUM)?.0;
            }
            let a = relu(&y);
            h = maxpool2d(&a, b.spec.pool.0, b.spec.pool.1)?.0;
        }
        let pooled = adaptive_avg_pool(&h)?;
        Ok(dense(&pooled.data, x.n(), &self.head.weight, &self.head.bias)?)
    }

    /// Eval-mode logits of one `n_channels x t` window (already normalized).
    pub fn forward(&self, window: &[f32], t: usize) -> Result<Vec<f32>, ModelError> {
        let x = self.batch_tensor([window], t)?;
        self.forward_batch(&x)
    }

    /// Eval-mode forward that also reports every intermediate shape
    /// (without the batch axis): the five pooled block outputs, the global
    /// pool output, and finally `[n_classes]`.
    pub fn forward_trace(&self, window: &[f32], t: usize) -> Result<(Vec<f32>, Vec<Vec<usize>>), ModelError> {
        let x = self.batch_tensor([window], t)?;
        self.check_input(&x)?;
        let mut shapes = Vec::new();
        let mut h = x;
        for b in &self.blocks {
            let mut y = conv2d(&h, &b.weight, &b.bias, b.spec.conv)?;
            if let Some(bn) = &b.bn {
                let mut stats = bn.stats.clone();
                y = batchnorm2d(&y, &bn.gamma, &bn.beta, &mut stats, BnMode::Eval, BN_EPS, BN_MOMENTUM)?.0;
            }
            h = maxpool2d(&relu(&y), b.spec.pool.0, b.spec.pool.1)?.0;
            shapes.push(h.dims()[1..].to_vec());
        }
        let pooled = adaptive_avg_pool(&h)?;
        shapes.push(pooled.dims()[1..].to_vec());
        let logits = dense(&pooled.data, 1, &self.head.weight, &self.head.bias)?;
        shapes.push(vec![logits.len()]);
        Ok((logits, shapes))
    }

    /// Training forward pass. `bn_mode` selects batch statistics (`Train`,
    /// running averages updated) or frozen running statistics (`Eval`).
    pub fn forward_train(
        &mut self,
        x: &Tensor4<f32>,
        bn_mode: BnMode,
    ) -> Result<(Vec<f32>, ExecutionRecord), ModelError> {
        self.check_input(x)?;
        let mut record = ExecutionRecord { batch: x.n(), window: x.w(), ..Default::default() };
        let mut h = x.clone();
        for b in &mut self.blocks {
            let conv_out = conv2d(&h, &b.weight, &b.bias, b.spec.conv)?;
            let (normed, bn_cache) = match &mut b.bn {
                Some(bn) => {
                    let (y, cache) =
                        batchnorm2d(&conv_out, &bn.gamma, &bn.beta, &mut bn.stats, bn_mode, BN_EPS, BN_MOMENTUM)?;
                    (y, Some(cache))
                }
                None => (conv_out, None),
            };
            let activation = relu(&normed);
            let (pooled, pool) = maxpool2d(&activation, b.spec.pool.0, b.spec.pool.1)?;
            record.blocks.push(BlockRecord { input: h, bn: bn_cache, activation, pool });
            h = pooled;
        }
        record.pooled_dims = h.dims();
        let features = adaptive_avg_pool(&h)?;
        let logits = dense(&features.data, x.n(), &self.head.weight, &self.head.bias)?;
        record.features = features.data;
        Ok((logits, record))
    }

    /// Reverse pass over a recorded forward; `dlogits` is `n x n_classes`.
    pub fn backward(&self, record: &ExecutionRecord, dlogits: &[f32]) -> Result<Gradients, ModelError> {
        if !record.is_recorded() {
            return Err(KernelError::GraphNotRecorded.into());
        }
        let n = record.batch;
        let head = dense_backward(&record.features, n, &self.head.weight, dlogits)?;
        let mut grad = adaptive_avg_pool_backward(
            record.pooled_dims,
            &Tensor4::new([n, self.head.in_features, 1, 1], head.input)?,
        )?;
        let mut per_block: Vec<Vec<Vec<f32>>> = Vec::with_capacity(self.blocks.len());
        for (i, (b, rec)) in self.blocks.iter().zip(&record.blocks).enumerate().rev() {
            let d_act = maxpool2d_backward(&rec.pool, &grad)?;
            let d_norm = relu_backward(&rec.activation, &d_act)?;
            let mut tensors = Vec::with_capacity(4);
            let d_conv = match (&b.bn, &rec.bn) {
                (Some(bn), Some(cache)) => {
                    let g = batchnorm2d_backward(cache, &bn.gamma, &d_norm)?;
                    tensors.push(g.gamma);
                    tensors.push(g.beta);
                    g.input
                }
                _ => d_norm,
            };
            let cg = conv2d_backward(&rec.input, &b.weight, b.spec.conv, &d_conv, i > 0)?;
            tensors.insert(0, cg.bias);
            tensors.insert(0, cg.weight);
            per_block.push(tensors);
            if let Some(dx) = cg.input {
                grad = dx;
            }
        }
        let mut out: Gradients = per_block.into_iter().rev().flatten().collect();
        out.push(head.weight);
        out.push(head.bias);
        debug_assert!(record.window > 0);
        Ok(out)
    }

    /// Writes the SWNM model file.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_channels() as u16).to_le_bytes());
        out.extend_from_slice(&(self.n_classes() as u16).to_le_bytes());
        out.extend_from_slice(&u16::from(self.has_batch_norm()).to_le_bytes());
        let tensors = self.named_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, data) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u32).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn named_tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{}.conv.weight", i + 1), &b.weight));
            out.push((format!("block{}.conv.bias", i + 1), &b.bias));
            if let Some(bn) = &b.bn {
                out.push((format!("block{}.bn.gamma", i + 1), &bn.gamma));
                out.push((format!("block{}.bn.beta", i + 1), &bn.beta));
                out.push((format!("block{}.bn.running_mean", i + 1), &bn.stats.mean));
                out.push((format!("block{}.bn.running_var", i + 1), &bn.stats.var));
            }
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(ModelError::Corrupt("bad magic".into()));
        }
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(ModelError::VersionMismatch { found: version, expected: MODEL_VERSION });
        }
        let n_channels = r.u16()? as usize;
        let n_classes = r.u16()? as usize;
        let batch_norm = r.u16()? & 1 == 1;
        let mut model = Self::build(SpeechNetConfig { n_channels, n_classes, batch_norm }, 0)
            .map_err(|e| ModelError::Corrupt(format!("header describes an invalid network: {e}")))?;
        let expected: Vec<(String, usize)> =
            model.named_tensors().into_iter().map(|(name, d)| (name, d.len())).collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(ModelError::Corrupt(format!("{count} tensors, expected {}", expected.len())));
        }
        let mut loaded = Vec::with_capacity(count);
        for (name, len) in &expected {
            let name_len = r.u16()? as usize;
            let found =
                std::str::from_utf8(r.take(name_len)?).map_err(|_| ModelError::Corrupt("tensor name".into()))?;
            let n = r.u32()? as usize;
            if found != name || n != *len {
                return Err(ModelError::Corrupt(format!("tensor {found}[{n}], expected {name}[{len}]")));
            }
            let data: Vec<f32> =
                r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            loaded.push(data);
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut it = loaded.into_iter();
        for b in &mut model.blocks {
            b.weight = it.next().expect("counted");
            b.bias = it.next().expect("counted");
            if let Some(bn) = &mut b.bn {
                bn.gamma = it.next().expect("counted");
                bn.beta = it.next().expect("counted");
                bn.stats.mean = it.next().expect("counted");
                bn.stats.var = it.next().expect("counted");
            }
        }
        model.head.weight = it.next().expect("counted");
        model.head.bias = it.next().expect("counted");
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()).map_err(|source| ModelError::File { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|source| ModelError::File { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16, ModelError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(t: usize, seed: u64) -> Vec<f32> {
        let mut rng = seed::rng(seed, "test-window");
        let mut w: Vec<f32> = (0..14 * t).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize_window(&mut w, 14);
        w
    }

    #[test]
    fn parameter_ledger() {
        let m = SpeechNet::canonical(0);
        assert_eq!(m.param_count(), 15_489);
        let conv: Vec<usize> = m.blocks.iter().map(|b| b.weight.len() + b.bias.len()).collect();
        assert_eq!(conv, vec![40, 2064, 2064, 3616, 7200]);
        let bn: usize = m.blocks.iter().map(|b| b.bn.as_ref().map_or(0, |bn| bn.gamma.len() + bn.beta.len())).sum();
        assert_eq!(bn, 208);
        assert_eq!(m.head.weight.len() + m.head.bias.len(), 297);

        let two = SpeechNet::build(SpeechNetConfig { n_classes: 2, ..Default::default() }, 0).unwrap();
        assert_eq!(two.param_count(), 15_489 - 7 * 33);
        let no_bn = SpeechNet::build(SpeechNetConfig { batch_norm: false, ..Default::default() }, 0).unwrap();
        assert_eq!(no_bn.param_count(), 15_281);
    }

    #[test]
    fn rejects_too_few_channels() {
        let cfg = SpeechNetConfig { n_channels: 12, ..Default::default() };
        assert!(matches!(SpeechNet::build(cfg, 0), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(SpeechNet::canonical(5), SpeechNet::canonical(5));
        assert_ne!(SpeechNet::canonical(5), SpeechNet::canonical(6));
    }

    #[test]
    fn shape_chain_t400() {
        let m = SpeechNet::canonical(1);
        let (logits, shapes) = m.forward_trace(&window(400, 1), 400).unwrap();
        assert_eq!(logits.len(), 9);
        let expected: Vec<Vec<usize>> = vec![
            vec![8, 14, 50],
            vec![16, 14, 12],
            vec![16, 14, 3],
            vec![32, 8, 3],
            vec![32, 2, 3],
            vec![32, 1, 1],
            vec![9],
        ];
        assert_eq!(shapes, expected);
    }

    #[test]
    fn shape_chain_t700() {
        let m = SpeechNet::canonical(1);
        let (_, shapes) = m.forward_trace(&window(700, 2), 700).unwrap();
        assert_eq!(shapes[0][2], 87);
        assert_eq!(shapes[1][2], 21);
        assert_eq!(shapes[2][2], 5);
    }

    #[test]
    fn too_short_window() {
        let m = SpeechNet::canonical(1);
        assert!(matches!(m.forward(&window(127, 1), 127), Err(ModelError::WindowTooShort { len: 127, min: 128 })));
        assert!(m.forward(&window(128, 1), 128).is_ok());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = SpeechNet::canonical(3);
        m.head.weight.iter_mut().for_each(|w| *w = 0.0);
        assert!(m.forward(&window(200, 4), 200).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_batch_independent() {
        let m = SpeechNet::canonical(3);
        let (a, b) = (window(256, 1), window(256, 2));
        let single = m.forward(&a, 256).unwrap();
        let batch = m.forward_batch(&m.batch_tensor([&a[..], &b[..]], 256).unwrap()).unwrap();
        assert_eq!(&batch[..9], &single[..]);
    }

    #[test]
    fn backward_needs_a_record() {
        let m = SpeechNet::canonical(0);
        let err = m.backward(&ExecutionRecord::default(), &[0.0; 9]).unwrap_err();
        assert!(matches!(err, ModelError::Kernel(KernelError::GraphNotRecorded)));
    }

    #[test]
    fn gradient_lengths_follow_params() {
        let mut m = SpeechNet::canonical(0);
        let x = m.batch_tensor([&window(128, 1)[..], &window(128, 2)[..]], 128).unwrap();
        let (logits, rec) = m.forward_train(&x, BnMode::Train).unwrap();
        let grads = m.backward(&rec, &vec![0.1; logits.len()]).unwrap();
        assert_eq!(grads.iter().map(Vec::len).collect::<Vec<_>>(), m.param_lens());
    }

    #[test]
    fn save_load_round_trip() {
        let mut m = SpeechNet::canonical(9);
        m.blocks[2].bn.as_mut().unwrap().stats.var[3] = 2.5;
        let bytes = m.to_bytes();
        let back = SpeechNet::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        let w = window(400, 5);
        assert_eq!(back.forward(&w, 400).unwrap(), m.forward(&w, 400).unwrap());

        assert!(matches!(SpeechNet::from_bytes(&bytes[..bytes.len() - 3]), Err(ModelError::Corrupt(_))));
        let mut v2 = bytes.clone();
        v2[4..6].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(SpeechNet::from_bytes(&v2), Err(ModelError::VersionMismatch { found: 2, expected: 1 })));
    }

    #[test]
    fn normalization() {
        let mut w: Vec<f32> = (0..20).map(|v| v as f32 * 3.0 + 7.0).chain(std::iter::repeat_n(5.0, 20)).collect();
        normalize_window(&mut w, 2);
        let ch0 = &w[..20];
        let mean: f32 = ch0.iter().sum::<f32>() / 20.0;
        let var: f32 = ch0.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 20.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4);
        assert!(w[20..].iter().all(|&v| v == 0.0));
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
