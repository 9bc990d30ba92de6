//! Matrix products over the trailing two axes.

use std::rc::Rc;

use super::shape::{broadcast_shape, broadcast_strides, for_each_pair, numel};
use super::{Real, Result, Tensor, TensorError};

impl<T: Real> Tensor<T> {
    /// `[..., m, k] · [..., k, n] -> [..., m, n]`; leading axes broadcast.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self, other);
        if a.rank() < 2 || b.rank() < 2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (ra, rb) = (a.rank(), b.rank());
        let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
        let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        if rb == 2 {
            return Ok(matmul_flat(a, b, m, k, n));
        }
        let lead_a = &a.shape()[..ra - 2];
        let lead_b = &b.shape()[..rb - 2];
        let lead = broadcast_shape("matmul", lead_a, lead_b)?;
        let sa = broadcast_strides(lead_a, &lead);
        let sb = broadcast_strides(lead_b, &lead);
        // Offsets of each batch item into a, b (in matrices).
        let mut pairs = Vec::with_capacity(numel(&lead));
        for_each_pair(&lead, &sa, &sb, |_, ia, ib| pairs.push((ia * m * k, ib * k * n)));

        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![T::zero(); pairs.len() * m * n];
        for (bi, &(oa, ob)) in pairs.iter().enumerate() {
            T::gemm(
                m,
                k,
                n,
                &ad[oa..oa + m * k],
                (k as isize, 1),
                &bd[ob..ob + k * n],
                (n as isize, 1),
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
                (n as isize, 1),
            );
        }
        let mut out_shape = lead;
        out_shape.extend([m, n]);

        let needs = (a.requires_grad(), b.requires_grad());
        let (a_data, b_data) = (Rc::clone(&a.0.data), Rc::clone(&b.0.data));
        let (na, nb) = (a.len(), b.len());
        let backward = Box::new(move |g: &[T]| {
            let mut ga = needs.0.then(|| vec![T::zero(); na]);
            let mut gb = needs.1.then(|| vec![T::zero(); nb]);
            for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                let gblock = &g[bi * m * n..(bi + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    // ga += g · bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        gblock,
                        (n as isize, 1),
                        &b_data[ob..ob + k * n],
                        (1, n as isize),
                        T::one(),
                        &mut ga[oa..oa + m * k],
                        (k as isize, 1),
                    );
                }
                if let Some(gb) = gb.as_mut() {
                    // gb += aᵀ · g
                    T::gemm(
                        k,
                        m,
                        n,
                        &a_data[oa..oa + m * k],
                        (1, k as isize),
                        gblock,
                        (n as isize, 1),
                        T::one(),
                        &mut gb[ob..ob + k * n],
                        (n as isize, 1),
                    );
                }
            }
            vec![ga, gb]
        });
        Ok(Tensor::from_op(out, out_shape, vec![a.clone(), b.clone()], backward))
    }
}

/// Right operand is a plain matrix: collapse the left operand's leading axes
/// into rows and run a single product.
fn matmul_flat<T: Real>(a: &Tensor<T>, b: &Tensor<T>, m: usize, k: usize, n: usize) -> Tensor<T> {
    let rows = a.len() / k;
    let mut out = vec![T::zero(); rows * n];
    T::gemm(
        rows,
        k,
        n,
        a.data(),
        (k as isize, 1),
        b.data(),
        (n as isize, 1),
        T::zero(),
        &mut out,
        (n as isize, 1),
    );
    let mut out_shape = a.shape()[..a.rank() - 2].to_vec();
    out_shape.extend([m, n]);
    let needs = (a.requires_grad(), b.requires_grad());
    let (a_data, b_data) = (Rc::clone(&a.0.data), Rc::clone(&b.0.data));
    let backward = Box::new(move |g: &[T]| {
        let ga = needs.0.then(|| {
            let mut ga = vec![T::zero(); rows * k];
            T::gemm(rows, n, k, g, (n as isize, 1), &b_data, (1, n as isize), T::zero(), &mut ga, (k as isize, 1));
            ga
        });
        let gb = needs.1.then(|| {
            let mut gb = vec![T::zero(); k * n];
            T::gemm(k, rows, n, &a_data, (1, k as isize), g, (n as isize, 1), T::zero(), &mut gb, (n as isize, 1));
            gb
        });
        vec![ga, gb]
    });
    Tensor::from_op(out, out_shape, vec![a.clone(), b.clone()], backward)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn hand_product() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[1.0, 1.0], &[2, 1]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn identity_and_zero() {
        let a = t(&[1.0, -2.0, 0.5, 3.0, 4.0, -1.0], &[2, 3]);
        let eye = t(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        assert_eq!(a.matmul(&eye).unwrap().data(), a.data());
        let z = Tensor::<f64>::zeros(&[2, 2]).unwrap();
        let b = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert!(z.matmul(&b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inner_mismatch() {
        let a = t(&[1.0; 6], &[2, 3]);
        let b = t(&[1.0; 4], &[2, 2]);
        assert!(matches!(a.matmul(&b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn batched_with_broadcast_matches_loop() {
        let a_vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b_vals: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect();
        // a: [2, 2, 3], b: [1, 3, 2] broadcast over the batch.
        let a = t(&a_vals, &[2, 2, 3]);
        let b = t(&b_vals, &[1, 3, 2]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        for bi in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let expect: f64 = (0..3).map(|p| a_vals[bi * 6 + i * 3 + p] * b_vals[p * 2 + j]).sum();
                    assert!((c.data()[bi * 4 + i * 2 + j] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_follow_transpose_rule() {
        let a = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::<f64>::param(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        a.matmul(&b).unwrap().sum().backward().unwrap();
        // g = ones: ga = 1·bᵀ (row sums of b), gb = aᵀ·1 (column sums of a)
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }
}
