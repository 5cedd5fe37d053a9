//! BN folding, int8 post-training quantization and the integer inference path.
//!
//! Scheme:
//! - weights: per output channel, symmetric, `scale = max|w| / 127`, int8 in [-127, 127]
//! - activations: per tensor, asymmetric uint8, `real = scale * (q - zero_point)`,
//!   range taken from calibration min/max widened to include 0
//! - biases: int32 at `s_w[o] * s_in`
//! - requantization: 32-bit fixed-point multiplier and shift, rounding half
//!   away from zero, saturating; the ReLU that follows every conv becomes a
//!   clamp at the output zero point
//!
//! Max pooling commutes with the monotone uint8 mapping and runs on codes.
//! The global average pool keeps the block-5 quantization parameters and
//! rounds its mean. The dense head accumulates in int32 and dequantizes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nnkernels::{adaptive_avg_pool, conv2d, maxpool2d, relu, Padding, Tensor4};
use crate::speechnet::{Architecture, BlockSpec, ModelError, Reader, SpeechNet, BN_EPS, MIN_WINDOW};

pub const QMODEL_MAGIC: &[u8; 4] = b"SWQ1";
pub const QMODEL_VERSION: u16 = 1;
/// Calibration windows drawn by default.
pub const DEFAULT_CALIBRATION_WINDOWS: usize = 512;
/// Fewest calibration windows accepted.
pub const MIN_CALIBRATION_WINDOWS: usize = 64;

const CALIB_CHUNK: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum QuantError {
    #[error("EmptyCalibrationSet: {found} windows, need at least {needed}")]
    EmptyCalibrationSet { found: usize, needed: usize },
    #[error("UnpopulatedStats: block {block} has non-finite or negative running variance")]
    UnpopulatedStats { block: usize },
    #[error("WindowTooShort: {len} samples, need at least {min}")]
    WindowTooShort { len: usize, min: usize },
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("VersionMismatch: file version {found}, reader supports {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("Corrupt: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::nnkernels::KernelError> for QuantError {
    fn from(e: crate::nnkernels::KernelError) -> Self {
        Self::Model(e.into())
    }
}

/// Returns an equivalent model without BN: each block's conv absorbs
/// `gamma / sqrt(var + eps)` and the shift.
pub fn fold_batchnorm(model: &SpeechNet) -> Result<SpeechNet, QuantError> {
    let mut out = model.clone();
    for (i, b) in out.blocks.iter_mut().enumerate() {
        let Some(bn) = b.bn.take() else { continue };
        if bn.stats.var.iter().chain(&bn.stats.mean).any(|v| !v.is_finite()) || bn.stats.var.iter().any(|&v| v < 0.0) {
            return Err(QuantError::UnpopulatedStats { block: i + 1 });
        }
        let per_out = b.spec.conv.patch_len();
        for o in 0..b.spec.conv.out_c {
            let s = f64::from(bn.gamma[o]) / (f64::from(bn.stats.var[o]) + f64::from(BN_EPS)).sqrt();
            b.weight[o * per_out..(o + 1) * per_out].iter_mut().for_each(|w| *w = (f64::from(*w) * s) as f32);
            b.bias[o] = ((f64::from(b.bias[o]) - f64::from(bn.stats.mean[o])) * s + f64::from(bn.beta[o])) as f32;
        }
    }
    Ok(out)
}

/// Asymmetric uint8 activation parameters: `real = scale * (q - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    pub scale: f32,
    pub zero_point: u8,
}

impl QParams {
    /// Parameters covering `[min, max]` widened to include 0.
    pub fn from_range(min: f32, max: f32) -> Self {
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        if hi - lo <= f32::EPSILON {
            return Self { scale: 1.0, zero_point: 0 };
        }
        let scale = (hi - lo) / 255.0;
        let zp = (-lo / scale).round().clamp(0.0, 255.0) as u8;
        Self { scale, zero_point: zp }
    }

    pub fn quantize(&self, x: f32) -> u8 {
        ((x / self.scale).round() + f32::from(self.zero_point)).clamp(0.0, 255.0) as u8
    }

    pub fn dequantize(&self, q: u8) -> f32 {
        self.scale * (i32::from(q) - i32::from(self.zero_point)) as f32
    }
}

/// Per-channel symmetric int8 quantization of `rows` equal-length rows.
pub fn quantize_weights(w: &[f32], rows: usize) -> (Vec<i8>, Vec<f32>) {
    let per = w.len() / rows.max(1);
    let mut q = Vec::with_capacity(w.len());
    let mut scales = Vec::with_capacity(rows);
    for row in w.chunks_exact(per.max(1)).take(rows) {
        let max = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let scale = if max > 0.0 { max / 127.0 } else { 1.0 };
        scales.push(scale);
        q.extend(row.iter().map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8));
    }
    (q, scales)
}

/// `real_multiplier ~= mult * 2^(shift - 31)` with `mult` in `[2^30, 2^31)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requant {
    pub mult: i32,
    pub shift: i32,
}

impl Requant {
    pub fn new(real: f64) -> Self {
        if real <= 0.0 || !real.is_finite() {
            return Self { mult: 0, shift: 0 };
        }
        let mut shift = 0i32;
        let mut m = real;
        while m >= 1.0 {
            m /= 2.0;
            shift += 1;
        }
        while m < 0.5 {
            m *= 2.0;
            shift -= 1;
        }
        let mut mult = (m * (1u64 << 31) as f64).round() as i64;
        if mult == 1i64 << 31 {
            mult /= 2;
            shift += 1;
        }
        Self { mult: mult as i32, shift }
    }

    /// `round_half_away(acc * mult * 2^(shift - 31))`, saturated to i32.
    pub fn apply(&self, acc: i32) -> i32 {
        let prod = i64::from(acc) * i64::from(self.mult);
        let rshift = 31 - self.shift;
        let v = if rshift <= 0 {
            prod.checked_shl((-rshift) as u32).unwrap_or(if prod < 0 { i64::MIN } else { i64::MAX })
        } else if rshift >= 63 {
            0
        } else {
            rounding_shift(prod, rshift as u32)
        };
        v.clamp(i64::from(i32::MIN), i64::from(i32::MAX)) as i32
    }
}

fn rounding_shift(x: i64, n: u32) -> i64 {
    let half = 1i64 << (n - 1);
    if x >= 0 {
        (x + half) >> n
    } else {
        -((-x + half) >> n)
    }
}

/// Integer conv layer with fused ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct QConv {
    pub spec: BlockSpec,
    pub weight: Vec<i8>,
    pub weight_scales: Vec<f32>,
    pub bias: Vec<i32>,
    pub input: QParams,
    pub output: QParams,
    requant: Vec<Requant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QDense {
    pub in_features: usize,
    pub n_classes: usize,
    /// `in_features x n_classes`, scales per output class.
    pub weight: Vec<i8>,
    pub weight_scales: Vec<f32>,
    pub bias: Vec<i32>,
    pub input: QParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSpeechNet {
    pub arch: Architecture,
    pub convs: Vec<QConv>,
    pub dense: QDense,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub weight_bytes: usize,
    pub bias_bytes: usize,
    pub weight_scale_bytes: usize,
    /// One f32 scale and one u8 zero point per quantized activation tensor.
    pub activation_param_bytes: usize,
    pub total_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub layer: String,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacReport {
    pub layers: Vec<LayerMacs>,
    pub total: u64,
}

/// Multiply-accumulates for one `n_channels x t` input: conv layers count
/// `out_elems * in_c * kh * kw`, the dense head `in * out`; pooling, BN and
/// activations are excluded.
pub fn count_macs(arch: &Architecture, t: usize) -> Result<MacReport, QuantError> {
    let shapes = arch.block_shapes(t).map_err(|_| QuantError::WindowTooShort { len: t, min: MIN_WINDOW })?;
    let mut layers: Vec<LayerMacs> = arch
        .blocks
        .iter()
        .zip(&shapes)
        .enumerate()
        .map(|(i, (b, (conv_out, _)))| LayerMacs {
            layer: format!("block{}.conv", i + 1),
            macs: (conv_out.iter().product::<usize>() * b.conv.patch_len()) as u64,
        })
        .collect();
    layers.push(LayerMacs { layer: "head".into(), macs: (arch.features() * arch.n_classes) as u64 });
    let total = layers.iter().map(|l| l.macs).sum();
    Ok(MacReport { layers, total })
}

/// Observed `(min, max)` of the input and of every block's post-ReLU conv output.
fn calibration_ranges(folded: &SpeechNet, windows: &[&[f32]], t: usize) -> Result<Vec<(f32, f32)>, QuantError> {
    let n_blocks = folded.blocks.len();
    let mut ranges = vec![(f32::INFINITY, f32::NEG_INFINITY); n_blocks + 1];
    let widen = |r: &mut (f32, f32), data: &[f32]| {
        for &v in data {
            r.0 = r.0.min(v);
            r.1 = r.1.max(v);
        }
    };
    for chunk in windows.chunks(CALIB_CHUNK) {
        let mut h = folded.batch_tensor(chunk.iter().copied(), t)?;
        widen(&mut ranges[0], &h.data);
        for (i, b) in folded.blocks.iter().enumerate() {
            let a = relu(&conv2d(&h, &b.weight, &b.bias, b.spec.conv)?);
            widen(&mut ranges[i + 1], &a.data);
            h = maxpool2d(&a, b.spec.pool.0, b.spec.pool.1)?.0;
        }
    }
    Ok(ranges)
}

/// Folds BN, calibrates activation ranges on `calib` (normalized
/// `n_channels x t` windows) and quantizes every layer.
pub fn calibrate_and_quantize(model: &SpeechNet, calib: &[&[f32]], t: usize) -> Result<QuantizedSpeechNet, QuantError> {
    if calib.len() < MIN_CALIBRATION_WINDOWS {
        return Err(QuantError::EmptyCalibrationSet { found: calib.len(), needed: MIN_CALIBRATION_WINDOWS });
    }
    if t < MIN_WINDOW {
        return Err(QuantError::WindowTooShort { len: t, min: MIN_WINDOW });
    }
    let folded = fold_batchnorm(model)?;
    let ranges = calibration_ranges(&folded, calib, t)?;
    let qp: Vec<QParams> = ranges.iter().map(|&(lo, hi)| QParams::from_range(lo, hi)).collect();
    let convs = folded
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let (weight, weight_scales) = quantize_weights(&b.weight, b.spec.conv.out_c);
            let (input, output) = (qp[i], qp[i + 1]);
            let bias = b.bias.iter().zip(&weight_scales).map(|(&bv, &sw)| quantize_bias(bv, sw, input.scale)).collect();
            QConv::new(b.spec, weight, weight_scales, bias, input, output)
        })
        .collect();
    let f = folded.head.in_features;
    let k = folded.n_classes();
    // Per-class scales: quantize columns of the F x K matrix.
    let columns: Vec<f32> =
        (0..k).flat_map(|c| (0..f).map(move |r| (r, c))).map(|(r, c)| folded.head.weight[r * k + c]).collect();
    let (qcols, weight_scales) = quantize_weights(&columns, k);
    let mut weight = vec![0i8; f * k];
    for c in 0..k {
        for r in 0..f {
            weight[r * k + c] = qcols[c * f + r];
        }
    }
    let input = qp[qp.len() - 1];
    let bias =
        folded.head.bias.iter().zip(&weight_scales).map(|(&bv, &sw)| quantize_bias(bv, sw, input.scale)).collect();
    let dense = QDense { in_features: f, n_classes: k, weight, weight_scales, bias, input };
    Ok(QuantizedSpeechNet { arch: folded.arch.clone(), convs, dense })
}

fn quantize_bias(b: f32, s_w: f32, s_in: f32) -> i32 {
    let v = (f64::from(b) / (f64::from(s_w) * f64::from(s_in))).round();
    v.clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32
}

impl QConv {
    fn new(
        spec: BlockSpec,
        weight: Vec<i8>,
        weight_scales: Vec<f32>,
        bias: Vec<i32>,
        input: QParams,
        output: QParams,
    ) -> Self {
        let requant = weight_scales
            .iter()
            .map(|&sw| Requant::new(f64::from(sw) * f64::from(input.scale) / f64::from(output.scale)))
            .collect();
        Self { spec, weight, weight_scales, bias, input, output, requant }
    }

    /// One sample: `codes` is `(in_c, h, w)` uint8; returns the pooled `(out_c, h', w')` codes.
    fn forward(&self, codes: &[u8], h: usize, w: usize) -> (Vec<u8>, usize, usize) {
        let c = self.spec.conv;
        let zp_in = i32::from(self.input.zero_point);
        let (ho, wo) = c.out_hw(h, w).expect("shapes checked before the integer path");
        let pad = c.pad_left();
        let positions = ho * wo;
        let patch = c.patch_len();
        // im2col on centered codes; padding contributes the real value 0.
        let mut col = vec![0i32; patch * positions];
        for ci in 0..c.in_c {
            for ky in 0..c.kh {
                for kx in 0..c.kw {
                    let row = (ci * c.kh + ky) * c.kw + kx;
                    let dst = &mut col[row * positions..(row + 1) * positions];
                    for oy in 0..ho {
                        let src = &codes[(ci * h + oy + ky) * w..(ci * h + oy + ky + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[oy * wo + ox] = i32::from(src[ix as usize]) - zp_in;
                            }
                        }
                    }
                }
            }
        }
        let zp_out = i32::from(self.output.zero_point);
        let mut acc = vec![0i32; positions];
        let mut out = vec![0u8; c.out_c * positions];
        for o in 0..c.out_c {
            acc.iter_mut().for_each(|a| *a = self.bias[o]);
            let wrow = &self.weight[o * patch..(o + 1) * patch];
            for (p, &wv) in wrow.iter().enumerate() {
                let wv = i32::from(wv);
                if wv == 0 {
                    continue;
                }
                let src = &col[p * positions..(p + 1) * positions];
                acc.iter_mut().zip(src).for_each(|(a, &x)| *a = a.wrapping_add(wv * x));
            }
            let rq = self.requant[o];
            for (dst, &a) in out[o * positions..(o + 1) * positions].iter_mut().zip(&acc) {
                *dst = (rq.apply(a).saturating_add(zp_out)).clamp(zp_out, 255) as u8;
            }
        }
        let (ph, pw) = self.spec.pool;
        if ph == 1 && pw == 1 {
            return (out, ho, wo);
        }
        let (hp, wp) = (ho / ph, wo / pw);
        let mut pooled = Vec::with_capacity(c.out_c * hp * wp);
        for o in 0..c.out_c {
            let plane = &out[o * positions..(o + 1) * positions];
            for py in 0..hp {
                for px in 0..wp {
                    let mut m = 0u8;
                    for y in 0..ph {
                        let row = &plane[(py * ph + y) * wo + px * pw..(py * ph + y) * wo + (px + 1) * pw];
                        m = row.iter().copied().fold(m, u8::max);
                    }
                    pooled.push(m);
                }
            }
        }
        (pooled, hp, wp)
    }
}

impl QuantizedSpeechNet {
    pub fn n_channels(&self) -> usize {
        self.arch.n_channels
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes
    }

    pub fn input_params(&self) -> QParams {
        self.convs[0].input
    }

    /// Integer forward pass of one normalized `n_channels x t` window; the
    /// logits are dequantized.
    pub fn qforward(&self, window: &[f32], t: usize) -> Result<Vec<f32>, QuantError> {
        if t < MIN_WINDOW {
            return Err(QuantError::WindowTooShort { len: t, min: MIN_WINDOW });
        }
        if window.len() != self.n_channels() * t {
            return Err(QuantError::ShapeMismatch(format!(
                "window of {} values, expected {} x {t}",
                window.len(),
                self.n_channels()
            )));
        }
        self.arch.block_shapes(t).map_err(|_| QuantError::WindowTooShort { len: t, min: MIN_WINDOW })?;
        let qin = self.input_params();
        let mut codes: Vec<u8> = window.iter().map(|&x| qin.quantize(x)).collect();
        let (mut h, mut w) = (self.n_channels(), t);
        for layer in &self.convs {
            let (next, hn, wn) = layer.forward(&codes, h, w);
            codes = next;
            h = hn;
            w = wn;
        }
        let plane = h * w;
        let zp = i32::from(self.dense.input.zero_point);
        let features: Vec<i32> = codes
            .chunks_exact(plane)
            .map(|p| {
                let sum: i64 = p.iter().map(|&v| i64::from(v)).sum();
                let n = plane as i64;
                let mean = (sum + n / 2) / n;
                mean as i32 - zp
            })
            .collect();
        let k = self.n_classes();
        let mut logits = Vec::with_capacity(k);
        for c in 0..k {
            let mut acc = self.dense.bias[c];
            for (f, &x) in features.iter().enumerate() {
                acc = acc.wrapping_add(i32::from(self.dense.weight[f * k + c]) * x);
            }
            logits.push(
                (f64::from(acc) * f64::from(self.dense.weight_scales[c]) * f64::from(self.dense.input.scale)) as f32,
            );
        }
        Ok(logits)
    }

    pub fn footprint(&self) -> FootprintReport {
        let weight_bytes = self.convs.iter().map(|c| c.weight.len()).sum::<usize>() + self.dense.weight.len();
        let n_bias = self.convs.iter().map(|c| c.bias.len()).sum::<usize>() + self.dense.bias.len();
        let n_scales = self.convs.iter().map(|c| c.weight_scales.len()).sum::<usize>() + self.dense.weight_scales.len();
        // Input of block 1 plus each block's output; the pooled features share block 5's.
        let activation_tensors = self.convs.len() + 1;
        let activation_param_bytes = activation_tensors * (4 + 1);
        let total = weight_bytes + 4 * n_bias + 4 * n_scales + activation_param_bytes;
        FootprintReport {
            weight_bytes,
            bias_bytes: 4 * n_bias,
            weight_scale_bytes: 4 * n_scales,
            activation_param_bytes,
            total_bytes: total,
        }
    }

    pub fn footprint_bytes(&self) -> usize {
        self.footprint().total_bytes
    }

    /// Serializes to the SWQ1 format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(QMODEL_MAGIC);
        out.extend_from_slice(&QMODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_channels() as u16).to_le_bytes());
        out.extend_from_slice(&(self.n_classes() as u16).to_le_bytes());
        out.extend_from_slice(&(self.convs.len() as u16).to_le_bytes());
        let put_q = |out: &mut Vec<u8>, q: QParams| {
            out.extend_from_slice(&q.scale.to_le_bytes());
            out.push(q.zero_point);
        };
        for c in &self.convs {
            let s = c.spec.conv;
            for v in [s.out_c, s.in_c, s.kh, s.kw, c.spec.pool.0, c.spec.pool.1] {
                out.extend_from_slice(&(v as u16).to_le_bytes());
            }
            out.push(u8::from(s.padding == Padding::SameTime));
            put_q(&mut out, c.input);
            put_q(&mut out, c.output);
            put_blobs(&mut out, &c.weight, &c.bias, &c.weight_scales);
        }
        out.extend_from_slice(&(self.dense.in_features as u16).to_le_bytes());
        put_q(&mut out, self.dense.input);
        put_blobs(&mut out, &self.dense.weight, &self.dense.bias, &self.dense.weight_scales);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, QuantError> {
        let corrupt = |e: ModelError| match e {
            ModelError::Corrupt(m) => QuantError::Corrupt(m),
            other => QuantError::Model(other),
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(corrupt)? != QMODEL_MAGIC {
            return Err(QuantError::Corrupt("bad magic".into()));
        }
        let version = r.u16().map_err(corrupt)?;
        if version != QMODEL_VERSION {
            return Err(QuantError::VersionMismatch { found: version, expected: QMODEL_VERSION });
        }
        let n_channels = r.u16().map_err(corrupt)? as usize;
        let n_classes = r.u16().map_err(corrupt)? as usize;
        let n_convs = r.u16().map_err(corrupt)? as usize;
        let arch = Architecture::speechnet(n_channels, n_classes).map_err(|e| QuantError::Corrupt(e.to_string()))?;
        if n_convs != arch.blocks.len() {
            return Err(QuantError::Corrupt(format!("{n_convs} conv layers, expected {}", arch.blocks.len())));
        }
        let get_q = |r: &mut Reader| -> Result<QParams, QuantError> {
            let s = r.take(4).map_err(corrupt)?;
            let scale = f32::from_le_bytes([s[0], s[1], s[2], s[3]]);
            let zero_point = r.take(1).map_err(corrupt)?[0];
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(QuantError::Corrupt(format!("activation scale {scale}")));
            }
            Ok(QParams { scale, zero_point })
        };
        let mut convs = Vec::with_capacity(n_convs);
        for spec in &arch.blocks {
            let mut dims = [0usize; 6];
            for d in &mut dims {
                *d = r.u16().map_err(corrupt)? as usize;
            }
            let same = r.take(1).map_err(corrupt)?[0] == 1;
            let c = spec.conv;
            let expect = [c.out_c, c.in_c, c.kh, c.kw, spec.pool.0, spec.pool.1];
            if dims != expect || same != (c.padding == Padding::SameTime) {
                return Err(QuantError::Corrupt(format!("layer dims {dims:?}, expected {expect:?}")));
            }
            let input = get_q(&mut r)?;
            let output = get_q(&mut r)?;
            let (weight, bias, scales) = get_blobs(&mut r, c.weight_len(), c.out_c).map_err(corrupt)?;
            convs.push(QConv::new(*spec, weight, scales, bias, input, output));
        }
        let in_features = r.u16().map_err(corrupt)? as usize;
        if in_features != arch.features() {
            return Err(QuantError::Corrupt(format!("dense input {in_features}, expected {}", arch.features())));
        }
        let input = get_q(&mut r)?;
        let (weight, bias, weight_scales) = get_blobs(&mut r, in_features * n_classes, n_classes).map_err(corrupt)?;
        if r.pos != bytes.len() {
            return Err(QuantError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let dense = QDense { in_features, n_classes, weight, weight_scales, bias, input };
        Ok(Self { arch, convs, dense })
    }

    pub fn save(&self, path: &Path) -> Result<(), QuantError> {
        fs::write(path, self.to_bytes()).map_err(|source| QuantError::File { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, QuantError> {
        let bytes = fs::read(path).map_err(|source| QuantError::File { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

fn put_blobs(out: &mut Vec<u8>, w: &[i8], b: &[i32], s: &[f32]) {
    out.extend_from_slice(&(w.len() as u32).to_le_bytes());
    out.extend(w.iter().map(|&v| v as u8));
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    b.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    s.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
}

type Blobs = (Vec<i8>, Vec<i32>, Vec<f32>);

fn get_blobs(r: &mut Reader, n_w: usize, n_out: usize) -> Result<Blobs, ModelError> {
    let nw = r.u32()? as usize;
    if nw != n_w {
        return Err(ModelError::Corrupt(format!("{nw} weights, expected {n_w}")));
    }
    let w = r.take(nw)?.iter().map(|&v| v as i8).collect();
    let nb = r.u32()? as usize;
    if nb != n_out {
        return Err(ModelError::Corrupt(format!("{nb} biases, expected {n_out}")));
    }
    let b = r.take(4 * nb)?.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let s: Vec<f32> = r.take(4 * nb)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(ModelError::Corrupt("non-positive weight scale".into()));
    }
    Ok((w, b, s))
}

/// Float forward of the folded model, used as the reference in tests.
pub fn folded_forward(folded: &SpeechNet, window: &[f32], t: usize) -> Result<Vec<f32>, QuantError> {
    let mut h: Tensor4<f32> = folded.batch_tensor([window], t)?;
    for b in &folded.blocks {
        let a = relu(&conv2d(&h, &b.weight, &b.bias, b.spec.conv)?);
        h = maxpool2d(&a, b.spec.pool.0, b.spec.pool.1)?.0;
    }
    let pooled = adaptive_avg_pool(&h)?;
    Ok(crate::nnkernels::dense(&pooled.data, 1, &folded.head.weight, &folded.head.bias)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkernels::{BnMode, RunningStats};
    use crate::seed;
    use crate::speechnet::{argmax, normalize_window, SpeechNetConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn windows(n: usize, t: usize, s: u64) -> Vec<Vec<f32>> {
        let mut rng = seed::rng(s, "quant-test");
        (0..n)
            .map(|_| {
                let mut w: Vec<f32> = (0..14 * t).map(|_| rng.random_range(-1.0..1.0)).collect();
                normalize_window(&mut w, 14);
                w
            })
            .collect()
    }

    /// A model whose BN statistics came from a few training-mode passes.
    fn populated(seed: u64) -> SpeechNet {
        let mut m = SpeechNet::canonical(seed);
        let ws = windows(16, 200, seed + 100);
        let x = m.batch_tensor(ws.iter().map(|w| &w[..]), 200).unwrap();
        for _ in 0..5 {
            m.forward_train(&x, BnMode::Train).unwrap();
        }
        let mut rng = seed::rng(seed, "bn-affine");
        for b in &mut m.blocks {
            let bn = b.bn.as_mut().unwrap();
            bn.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
            bn.beta.iter_mut().for_each(|g| *g = rng.random_range(-0.2..0.2));
        }
        m
    }

    #[test]
    fn folding_preserves_logits() {
        let m = populated(1);
        let f = fold_batchnorm(&m).unwrap();
        assert!(f.blocks.iter().all(|b| b.bn.is_none()));
        for w in windows(5, 400, 2) {
            let a = m.forward(&w, 400).unwrap();
            let b = folded_forward(&f, &w, 400).unwrap();
            let c = f.forward(&w, 400).unwrap();
            for ((x, y), z) in a.iter().zip(&b).zip(&c) {
                assert!((x - y).abs() < 1e-4 && (x - z).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn folding_identity_stats_and_fresh_model() {
        let m = SpeechNet::canonical(3);
        let f = fold_batchnorm(&m).unwrap();
        for (a, b) in m.blocks.iter().zip(&f.blocks) {
            for (x, y) in a.weight.iter().zip(&b.weight) {
                assert!((x - y).abs() <= 1e-5 * x.abs() + 1e-12);
            }
        }
        let mut bad = m.clone();
        bad.blocks[2].bn.as_mut().unwrap().stats = RunningStats { mean: vec![0.0; 16], var: vec![f32::NAN; 16] };
        assert!(matches!(fold_batchnorm(&bad), Err(QuantError::UnpopulatedStats { block: 3 })));
    }

    #[test]
    fn weight_scheme_examples() {
        let (q, s) = quantize_weights(&[1.27, -0.5, 0.0, 0.01], 1);
        assert!((s[0] - 0.01).abs() < 1e-9);
        assert_eq!(q, vec![127, -50, 0, 1]);
        let (q, s) = quantize_weights(&[0.0; 3], 1);
        assert_eq!((q, s), (vec![0, 0, 0], vec![1.0]));
    }

    #[test]
    fn qparams_examples() {
        let q = QParams::from_range(-1.0, 3.0);
        assert_eq!(q.zero_point, 64);
        assert_eq!(q.quantize(0.0), 64);
        assert_eq!(q.quantize(100.0), 255);
        let relu = QParams::from_range(0.5, 2.0);
        assert_eq!(relu.zero_point, 0);
        assert!((relu.dequantize(255) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn requant_rounds_half_away_from_zero() {
        let r = Requant::new(0.5);
        assert_eq!((r.apply(3), r.apply(-3), r.apply(2), r.apply(-1)), (2, -2, 1, -1));
        let r = Requant::new(0.25);
        assert_eq!((r.apply(5), r.apply(6), r.apply(-6)), (1, 2, -2));
        let r = Requant::new(3.0);
        assert_eq!(r.apply(i32::MAX), i32::MAX);
        assert_eq!(r.apply(7), 21);
    }

    #[test]
    fn mac_ledger() {
        let arch = Architecture::speechnet(14, 9).unwrap();
        let r = count_macs(&arch, 400).unwrap();
        let per: Vec<u64> = r.layers.iter().map(|l| l.macs).collect();
        assert_eq!(per, vec![179_200, 1_433_600, 344_064, 86_016, 43_008, 288]);
        assert_eq!(r.total, 2_086_176);
        assert!(count_macs(&arch, 0).is_err());
        assert!(count_macs(&arch, 128).unwrap().layers.iter().all(|l| l.macs > 0));
    }

    #[test]
    fn calibration_needs_windows() {
        let m = SpeechNet::canonical(0);
        let ws = windows(10, 200, 1);
        let refs: Vec<&[f32]> = ws.iter().map(|w| &w[..]).collect();
        assert!(matches!(
            calibrate_and_quantize(&m, &refs, 200),
            Err(QuantError::EmptyCalibrationSet { found: 10, .. })
        ));
    }

    #[test]
    fn footprint_and_agreement_and_round_trip() {
        let m = populated(4);
        let ws = windows(96, 400, 5);
        let refs: Vec<&[f32]> = ws.iter().map(|w| &w[..]).collect();
        let q = calibrate_and_quantize(&m, &refs[..64], 400).unwrap();
        let fp = q.footprint();
        assert_eq!(fp.weight_bytes, 15_168);
        assert_eq!(fp.bias_bytes, 452);
        assert_eq!(fp.total_bytes, 15_168 + 452 + 452 + 30);

        let mut agree = 0;
        for w in &ws[64..] {
            let a = q.qforward(w, 400).unwrap();
            assert_eq!(a, q.qforward(w, 400).unwrap());
            agree += usize::from(argmax(&a) == argmax(&m.forward(w, 400).unwrap()));
        }
        assert!(agree >= 28, "{agree}/32");

        let back = QuantizedSpeechNet::from_bytes(&q.to_bytes()).unwrap();
        assert_eq!(back, q);
        let bytes = q.to_bytes();
        assert!(matches!(QuantizedSpeechNet::from_bytes(&bytes[..bytes.len() - 1]), Err(QuantError::Corrupt(_))));
        assert!(matches!(q.qforward(&ws[0][..14 * 127], 127), Err(QuantError::WindowTooShort { .. })));
    }

    #[test]
    fn footprint_grows_with_classes() {
        let cfg = SpeechNetConfig { n_classes: 18, ..Default::default() };
        let m18 = SpeechNet::build(cfg, 1).unwrap();
        let m9 = SpeechNet::canonical(1);
        let ws = windows(64, 200, 6);
        let refs: Vec<&[f32]> = ws.iter().map(|w| &w[..]).collect();
        let a = calibrate_and_quantize(&m9, &refs, 200).unwrap().footprint();
        let b = calibrate_and_quantize(&m18, &refs, 200).unwrap().footprint();
        assert_eq!(b.weight_bytes - a.weight_bytes, 288);
        assert_eq!(b.bias_bytes - a.bias_bytes, 36);
        assert_eq!(b.weight_scale_bytes - a.weight_scale_bytes, 36);
    }

    proptest! {
        #[test]
        fn weight_round_trip_within_half_step(w in proptest::collection::vec(-3.0f32..3.0, 1..64)) {
            let (q, s) = quantize_weights(&w, 1);
            for (&x, &qv) in w.iter().zip(&q) {
                prop_assert!((x - f32::from(qv) * s[0]).abs() <= s[0] / 2.0 * (1.0 + 1e-5));
            }
        }

        #[test]
        fn requant_matches_float(acc in -1_000_000i32..1_000_000, m in 1e-6f64..4.0) {
            let r = Requant::new(m);
            let exact = f64::from(acc) * m;
            prop_assert!((f64::from(r.apply(acc)) - exact).abs() <= 0.5 + exact.abs() * 1e-8 + 1e-9);
        }
    }
}
