//! 2-D cross-correlation via im2col + GEMM.

use serde::{Deserialize, Serialize};

use super::{gemm, shape_err, KernelError, MatRef, Real, Tensor4};

/// `SameTime` zero-pads only the time (w) axis: `kw - 1` in total,
/// `(kw - 1) / 2` on the left and the remainder on the right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Valid,
    SameTime,
}

/// Static geometry of a convolution. Weights are laid out
/// `[out_c][in_c][kh][kw]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub out_c: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: Padding,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kh * self.kw
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn pad_left(&self) -> usize {
        match self.padding {
            Padding::Valid => 0,
            Padding::SameTime => (self.kw - 1) / 2,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize), KernelError> {
        let padded_w = match self.padding {
            Padding::Valid => w,
            Padding::SameTime => w + self.kw - 1,
        };
        if self.kh == 0 || self.kw == 0 || h < self.kh || padded_w < self.kw {
            return Err(shape_err(format!("kernel {}x{} does not fit input {h}x{w}", self.kh, self.kw)));
        }
        Ok((h - self.kh + 1, padded_w - self.kw + 1))
    }

    fn check(&self, input: &[usize; 4], weight: usize, bias: usize) -> Result<(usize, usize), KernelError> {
        if input[1] != self.in_c {
            return Err(shape_err(format!("input has {} channels, kernel expects {}", input[1], self.in_c)));
        }
        if weight != self.weight_len() || bias != self.out_c {
            return Err(shape_err(format!(
                "weights {weight} / bias {bias}, expected {} / {}",
                self.weight_len(),
                self.out_c
            )));
        }
        self.out_hw(input[2], input[3])
    }
}

/// Fills `cols` (`patch_len x ho*wo`, row-major) from one sample.
fn im2col<T: Real>(x: &[T], h: usize, w: usize, s: &ConvShape, ho: usize, wo: usize, cols: &mut [T]) {
    let p = ho * wo;
    let pad = s.pad_left() as isize;
    for ci in 0..s.in_c {
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let r = (ci * s.kh + ky) * s.kw + kx;
                let shift = kx as isize - pad;
                for oy in 0..ho {
                    let src = &x[(ci * h + oy + ky) * w..(ci * h + oy + ky + 1) * w];
                    let dst = &mut cols[r * p + oy * wo..r * p + (oy + 1) * wo];
                    // dst[ox] = src[ox + shift] where in range
                    let lo = (-shift).clamp(0, wo as isize) as usize;
                    let hi = (w as isize - shift).clamp(0, wo as isize) as usize;
                    dst[..lo].iter_mut().for_each(|v| *v = T::zero());
                    if hi > lo {
                        let start = (lo as isize + shift) as usize;
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    }
                    dst[hi.max(lo)..].iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
    }
}

/// Accumulates `cols` back into a sample gradient (adjoint of [`im2col`]).
fn col2im<T: Real>(cols: &[T], h: usize, w: usize, s: &ConvShape, ho: usize, wo: usize, dx: &mut [T]) {
    let p = ho * wo;
    let pad = s.pad_left() as isize;
    for ci in 0..s.in_c {
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let r = (ci * s.kh + ky) * s.kw + kx;
                let shift = kx as isize - pad;
                let lo = (-shift).clamp(0, wo as isize) as usize;
                let hi = (w as isize - shift).clamp(0, wo as isize) as usize;
                if hi <= lo {
                    continue;
                }
                for oy in 0..ho {
                    let row = (ci * h + oy + ky) * w;
                    let src = &cols[r * p + oy * wo + lo..r * p + oy * wo + hi];
                    let start = (lo as isize + shift) as usize;
                    let dst = &mut dx[row + start..row + start + hi - lo];
                    dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
    }
}

/// Cross-correlation: `out[n, o, y, x] = b[o] + sum_{c,i,j} w[o,c,i,j] * in[n, c, y+i, x+j-pad]`.
pub fn conv2d<T: Real>(
    input: &Tensor4<T>,
    weight: &[T],
    bias: &[T],
    shape: ConvShape,
) -> Result<Tensor4<T>, KernelError> {
    let dims = input.dims();
    let (ho, wo) = shape.check(&dims, weight.len(), bias.len())?;
    let [n, _, h, w] = dims;
    let (k, p) = (shape.patch_len(), ho * wo);
    let mut out = Tensor4::zeros([n, shape.out_c, ho, wo]);
    let mut cols = vec![T::zero(); k * p];
    for i in 0..n {
        im2col(input.sample(i), h, w, &shape, ho, wo, &mut cols);
        let dst = &mut out.data[i * shape.out_c * p..(i + 1) * shape.out_c * p];
        for (o, row) in dst.chunks_exact_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[o]);
        }
        gemm(shape.out_c, k, p, MatRef::rows(weight, k), MatRef::rows(&cols, p), T::one(), dst);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor4<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients of [`conv2d`] given the forward input and the output gradient.
pub fn conv2d_backward<T: Real>(
    input: &Tensor4<T>,
    weight: &[T],
    shape: ConvShape,
    grad_out: &Tensor4<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>, KernelError> {
    let dims = input.dims();
    let (ho, wo) = shape.check(&dims, weight.len(), shape.out_c)?;
    let [n, _, h, w] = dims;
    if grad_out.dims() != [n, shape.out_c, ho, wo] {
        return Err(shape_err(format!("grad_out dims {:?} do not match output", grad_out.dims())));
    }
    let (k, p) = (shape.patch_len(), ho * wo);
    let mut dw = vec![T::zero(); shape.weight_len()];
    let mut db = vec![T::zero(); shape.out_c];
    let mut dx = need_input_grad.then(|| Tensor4::zeros(dims));
    let mut cols = vec![T::zero(); k * p];
    let mut dcols = vec![T::zero(); if need_input_grad { k * p } else { 0 }];
    for i in 0..n {
        let dy = grad_out.sample(i);
        for (o, row) in dy.chunks_exact(p).enumerate() {
            db[o] = db[o] + row.iter().copied().sum::<T>();
        }
        im2col(input.sample(i), h, w, &shape, ho, wo, &mut cols);
        // dW += dY * cols^T
        gemm(shape.out_c, p, k, MatRef::rows(dy, p), MatRef::transposed(&cols, p), T::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T * dY
            gemm(k, shape.out_c, p, MatRef::transposed(weight, k), MatRef::rows(dy, p), T::zero(), &mut dcols);
            let s = input.sample_len();
            col2im(&dcols, h, w, &shape, ho, wo, &mut dx.data[i * s..(i + 1) * s]);
        }
    }
    Ok(ConvGrads { input: dx, weight: dw, bias: db })
}
