//! Fully connected layer, ReLU and the softmax cross-entropy loss.

use super::{gemm, shape_err, KernelError, MatRef, Real, Tensor4};

/// Affine map of `n` row vectors: `y[i, k] = b[k] + sum_f x[i, f] * w[f, k]`.
///
/// `w` is `F x K` row-major, so `x = e_1` yields the first row of `w`.
pub fn dense<T: Real>(x: &[T], n: usize, w: &[T], b: &[T]) -> Result<Vec<T>, KernelError> {
    let k = b.len();
    if n == 0 || !x.len().is_multiple_of(n) {
        return Err(shape_err(format!("{} inputs do not split into {n} rows", x.len())));
    }
    let f = x.len() / n;
    if w.len() != f * k {
        return Err(shape_err(format!("weights {} != {f} x {k}", w.len())));
    }
    let mut y: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
    gemm(n, f, k, MatRef::rows(x, f), MatRef::rows(w, k), T::one(), &mut y);
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn dense_backward<T: Real>(x: &[T], n: usize, w: &[T], grad_out: &[T]) -> Result<DenseGrads<T>, KernelError> {
    if n == 0 || !x.len().is_multiple_of(n) || !grad_out.len().is_multiple_of(n) {
        return Err(shape_err("dense backward: ragged batch"));
    }
    let (f, k) = (x.len() / n, grad_out.len() / n);
    if w.len() != f * k {
        return Err(shape_err("dense backward: weight shape mismatch"));
    }
    let mut dw = vec![T::zero(); f * k];
    gemm(f, n, k, MatRef::transposed(x, f), MatRef::rows(grad_out, k), T::zero(), &mut dw);
    let mut dx = vec![T::zero(); n * f];
    gemm(n, k, f, MatRef::rows(grad_out, k), MatRef::transposed(w, k), T::zero(), &mut dx);
    let mut db = vec![T::zero(); k];
    for row in grad_out.chunks_exact(k) {
        db.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
    }
    Ok(DenseGrads { input: dx, weight: dw, bias: db })
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of ReLU given its forward output: passes where the output is positive.
pub fn relu_backward<T: Real>(output: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>, KernelError> {
    if output.dims() != grad_out.dims() {
        return Err(shape_err("relu backward shape mismatch"));
    }
    let data =
        output.data.iter().zip(&grad_out.data).map(|(&y, &g)| if y > T::zero() { g } else { T::zero() }).collect();
    Tensor4::new(output.dims(), data)
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of one sample and its gradient `softmax - onehot`.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<(T, Vec<T>), KernelError> {
    if label >= logits.len() {
        return Err(KernelError::LabelOutOfRange { label, classes: logits.len() });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    let loss = lse - logits[label];
    let mut grad = softmax(logits);
    grad[label] = grad[label] - T::one();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkernels::testutil::*;
    use proptest::prelude::*;

    #[test]
    fn dense_examples() {
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(dense(&[1.0, 2.0, 3.0], 1, &eye, &[0.0; 3]).unwrap(), vec![1.0, 2.0, 3.0]);
        let w: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2 x 3
        assert_eq!(dense(&[1.0, 0.0], 1, &w, &[0.0; 3]).unwrap(), vec![0.0, 1.0, 2.0]);
        assert!(dense(&[1.0, 0.0], 1, &w, &[0.0; 2]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, grad) = softmax_cross_entropy(&[0.5f64; 9], 3).unwrap();
        assert!((loss - 9f64.ln()).abs() < 1e-12);
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
        let mut z = vec![0.0f64; 9];
        z[2] = 30.0;
        assert!(softmax_cross_entropy(&z, 2).unwrap().0 < 1e-9);
        assert!(matches!(softmax_cross_entropy(&z, 9), Err(KernelError::LabelOutOfRange { label: 9, classes: 9 })));
    }

    #[test]
    fn relu_passes_positive_gradient() {
        let x = Tensor4::new([1, 1, 1, 3], vec![0.5, 2.0, -1.0]).unwrap();
        let y = relu(&x);
        let g = relu_backward(&y, &Tensor4::new([1, 1, 1, 3], vec![1.0, -2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(g.data, vec![1.0, -2.0, 0.0]);
    }

    #[test]
    fn gradients_match_central_differences() {
        let (n, f, k) = (3, 4, 5);
        let x = random_vec(1, n * f);
        let w = random_vec(2, f * k);
        let b = random_vec(3, k);
        let r = random_vec(4, n * k);
        let g = dense_backward(&x, n, &w, &r).unwrap();
        assert!(max_rel_err(&g.input, &numeric_grad(&x, |v| dot(&dense(v, n, &w, &b).unwrap(), &r))) < 1e-4);
        assert!(max_rel_err(&g.weight, &numeric_grad(&w, |v| dot(&dense(&x, n, v, &b).unwrap(), &r))) < 1e-4);
        assert!(max_rel_err(&g.bias, &numeric_grad(&b, |v| dot(&dense(&x, n, &w, v).unwrap(), &r))) < 1e-4);

        let z = random_vec(5, 9).iter().map(|v| v * 4.0).collect::<Vec<_>>();
        let (_, grad) = softmax_cross_entropy(&z, 4).unwrap();
        let num = numeric_grad(&z, |v| softmax_cross_entropy(v, 4).unwrap().0);
        assert!(max_rel_err(&grad, &num) < 1e-4);

        let xs = random_vec(6, 12);
        let t = Tensor4::new([1, 1, 3, 4], xs.clone()).unwrap();
        let r = random_vec(7, 12);
        let gr = relu_backward(&relu(&t), &Tensor4::new([1, 1, 3, 4], r.clone()).unwrap()).unwrap();
        let num = numeric_grad(&xs, |v| dot(&relu(&Tensor4::new([1, 1, 3, 4], v.to_vec()).unwrap()).data, &r));
        assert!(max_rel_err(&gr.data, &num) < 1e-4);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(z in proptest::collection::vec(-50.0f64..50.0, 2..12)) {
            let p = softmax(&z);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let (_, g) = softmax_cross_entropy(&z, 0).unwrap();
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-9);
        }
    }
}
