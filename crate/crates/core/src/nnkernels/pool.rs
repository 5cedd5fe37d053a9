use super::{shape_err, KernelError, Real, Tensor4};

/// Argmax positions (flat input indices) of a max-pool forward pass.
#[derive(Debug, Clone)]
pub struct MaxPoolRecord {
    pub input_dims: [usize; 4],
    pub argmax: Vec<u32>,
}

/// Non-overlapping max pooling with stride equal to the kernel; trailing
/// rows/columns that do not fill a window are dropped. Ties go to the
/// lowest input index.
pub fn maxpool2d<T: Real>(
    input: &Tensor4<T>,
    kh: usize,
    kw: usize,
) -> Result<(Tensor4<T>, MaxPoolRecord), KernelError> {
    let [n, c, h, w] = input.dims();
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(shape_err(format!("pool {kh}x{kw} larger than input {h}x{w}")));
    }
    let (ho, wo) = (h / kh, w / kw);
    let mut out = Tensor4::zeros([n, c, ho, wo]);
    let mut argmax = vec![0u32; out.data.len()];
    if kh == 1 && kw == 1 {
        out.data.copy_from_slice(&input.data);
        argmax.iter_mut().enumerate().for_each(|(i, a)| *a = i as u32);
        return Ok((out, MaxPoolRecord { input_dims: input.dims(), argmax }));
    }
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * kh * w + ox * kw;
                for y in 0..kh {
                    let row = base + (oy * kh + y) * w + ox * kw;
                    for idx in row..row + kw {
                        if input.data[idx] > input.data[best] {
                            best = idx;
                        }
                    }
                }
                out.data[o] = input.data[best];
                argmax[o] = best as u32;
                o += 1;
            }
        }
    }
    Ok((out, MaxPoolRecord { input_dims: input.dims(), argmax }))
}

/// Routes each output gradient to its argmax input position.
pub fn maxpool2d_backward<T: Real>(record: &MaxPoolRecord, grad_out: &Tensor4<T>) -> Result<Tensor4<T>, KernelError> {
    if grad_out.data.len() != record.argmax.len() {
        return Err(shape_err("maxpool backward: gradient does not match recorded output"));
    }
    let mut dx = Tensor4::zeros(record.input_dims);
    for (&idx, &g) in record.argmax.iter().zip(&grad_out.data) {
        let i = idx as usize;
        dx.data[i] = dx.data[i] + g;
    }
    Ok(dx)
}

/// Mean over all spatial positions: `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn adaptive_avg_pool<T: Real>(input: &Tensor4<T>) -> Result<Tensor4<T>, KernelError> {
    let [n, c, h, w] = input.dims();
    if h == 0 || w == 0 {
        return Err(shape_err("adaptive average pool over an empty plane"));
    }
    let inv = T::one() / T::from_usize(h * w);
    let data = input.data.chunks_exact(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor4::new([n, c, 1, 1], data)
}

pub fn adaptive_avg_pool_backward<T: Real>(
    input_dims: [usize; 4],
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>, KernelError> {
    let [n, c, h, w] = input_dims;
    if grad_out.dims() != [n, c, 1, 1] {
        return Err(shape_err("adaptive average pool backward shape mismatch"));
    }
    let inv = T::one() / T::from_usize(h * w);
    let mut dx = Tensor4::zeros(input_dims);
    for (plane, &g) in dx.data.chunks_exact_mut(h * w).zip(&grad_out.data) {
        plane.iter_mut().for_each(|v| *v = g * inv);
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkernels::testutil::*;

    #[test]
    fn maxpool_examples() {
        let x = Tensor4::new([1, 1, 1, 16], (1..=16).map(|v| v as f32).collect()).unwrap();
        assert_eq!(maxpool2d(&x, 1, 8).unwrap().0.data, vec![8.0, 16.0]);
        let x = Tensor4::<f32>::zeros([1, 1, 1, 50]);
        assert_eq!(maxpool2d(&x, 1, 4).unwrap().0.w(), 12);
        let x = Tensor4::new([1, 2, 2, 3], random_vec(1, 12)).unwrap();
        assert_eq!(maxpool2d(&x, 1, 1).unwrap().0, x);
        assert!(maxpool2d(&x, 1, 4).is_err());
    }

    #[test]
    fn maxpool_gradient_goes_to_first_max() {
        let x = Tensor4::new([1, 1, 1, 4], vec![1.0, 5.0, 5.0, 2.0]).unwrap();
        let (_, rec) = maxpool2d(&x, 1, 4).unwrap();
        let dx = maxpool2d_backward(&rec, &Tensor4::new([1, 1, 1, 1], vec![3.0]).unwrap()).unwrap();
        assert_eq!(dx.data, vec![0.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_examples() {
        let x = Tensor4::new([1, 2, 1, 4], vec![7.0, 7.0, 7.0, 7.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(adaptive_avg_pool(&x).unwrap().data, vec![7.0, 2.5]);
        let x = Tensor4::<f32>::zeros([1, 32, 2, 3]);
        assert_eq!(adaptive_avg_pool(&x).unwrap().dims(), [1, 32, 1, 1]);
    }

    #[test]
    fn gradients_match_central_differences() {
        let dims = [2, 2, 3, 8];
        let x = random_vec(3, 96);
        let input = Tensor4::new(dims, x.clone()).unwrap();

        let (out, rec) = maxpool2d(&input, 2, 3).unwrap();
        let r = random_vec(4, out.data.len());
        let dx = maxpool2d_backward(&rec, &Tensor4::new(out.dims(), r.clone()).unwrap()).unwrap();
        let num =
            numeric_grad(&x, |v| dot(&maxpool2d(&Tensor4::new(dims, v.to_vec()).unwrap(), 2, 3).unwrap().0.data, &r));
        assert!(max_rel_err(&dx.data, &num) < 1e-4);

        let r = random_vec(5, 4);
        let dx = adaptive_avg_pool_backward(dims, &Tensor4::new([2, 2, 1, 1], r.clone()).unwrap()).unwrap();
        let num =
            numeric_grad(&x, |v| dot(&adaptive_avg_pool(&Tensor4::new(dims, v.to_vec()).unwrap()).unwrap().data, &r));
        assert!(max_rel_err(&dx.data, &num) < 1e-4);
    }
}
