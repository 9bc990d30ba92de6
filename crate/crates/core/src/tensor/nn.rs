//! Fused operations used by the network and the losses.

use std::rc::Rc;

use super::{Real, Result, Tensor, TensorError};

fn last_extent<T: Real>(x: &Tensor<T>, op: &'static str) -> Result<usize> {
    x.shape()
        .last()
        .copied()
        .ok_or_else(|| TensorError::Contract(format!("{op} needs rank >= 1")))
}

impl<T: Real> Tensor<T> {
    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_lastdim(&self) -> Result<Tensor<T>> {
        let n = last_extent(self, "softmax_lastdim")?;
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let y = Rc::new(out.clone());
        let backward = Box::new(move |g: &[T]| {
            let mut gx = vec![T::zero(); g.len()];
            for ((gx, g), y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                    *d = yi * (gi - dot);
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], backward))
    }

    /// Zero-mean, unit-variance rows over the last axis (biased variance).
    pub fn normalize_lastdim(&self, eps: T) -> Result<Tensor<T>> {
        let n = last_extent(self, "normalize_lastdim")?;
        let nt = T::lit(n as f64);
        let mut out = self.to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / n.max(1));
        for row in out.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nt;
            row.iter_mut().for_each(|v| *v -= mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / nt;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= r);
            inv_std.push(r);
        }
        let y = Rc::new(out.clone());
        let backward = Box::new(move |g: &[T]| {
            let mut gx = vec![T::zero(); g.len()];
            for (((gx, g), y), &r) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).zip(&inv_std) {
                let mg = g.iter().copied().sum::<T>() / nt;
                let mgy = g.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / nt;
                for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                    *d = r * (gi - mg - yi * mgy);
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], backward))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_lastdim(&self) -> Result<Tensor<T>> {
        let n = last_extent(self, "log_softmax_lastdim")?;
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let y = Rc::new(out.clone());
        let backward = Box::new(move |g: &[T]| {
            let mut gx = vec![T::zero(); g.len()];
            for ((gx, g), y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                let total: T = g.iter().copied().sum();
                for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                    *d = gi - yi.exp() * total;
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], backward))
    }

    /// Euclidean norm over the last axis (axis removed). The subgradient at a
    /// zero vector is zero.
    pub fn norm_lastdim(&self) -> Result<Tensor<T>> {
        let n = last_extent(self, "norm_lastdim")?;
        let x = Rc::clone(&self.0.data);
        let out: Vec<T> = x
            .chunks(n)
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let norms = Rc::new(out.clone());
        let backward = Box::new(move |g: &[T]| {
            let mut gx = vec![T::zero(); x.len()];
            for (r, (dst, src)) in gx.chunks_mut(n).zip(x.chunks(n)).enumerate() {
                let nr = norms[r];
                if nr > T::zero() {
                    let s = g[r] / nr;
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d = s * v);
                }
            }
            vec![Some(gx)]
        });
        let shape = self.shape()[..self.rank() - 1].to_vec();
        Ok(Tensor::from_op(out, shape, vec![self.clone()], backward))
    }

    /// `‖a − b‖₂` over the last axis, broadcasting leading axes.
    pub fn l2_distance(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape().last() != other.shape().last() {
            return Err(TensorError::Shape {
                op: "l2_distance",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        self.sub(other)?.norm_lastdim()
    }

    /// Elementwise Huber with unit threshold:
    /// ½(a−b)² when |a−b| ≤ 1, else |a−b| − ½.
    pub fn huber(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(TensorError::Shape {
                op: "huber",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let half = T::lit(0.5);
        let diffs: Vec<T> = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        let out = diffs
            .iter()
            .map(|&r| if r.abs() <= T::one() { half * r * r } else { r.abs() - half })
            .collect();
        let needs = (self.requires_grad(), other.requires_grad());
        let backward = Box::new(move |g: &[T]| {
            let d: Vec<T> = g
                .iter()
                .zip(&diffs)
                .map(|(&g, &r)| g * r.max(-T::one()).min(T::one()))
                .collect();
            let neg = needs.1.then(|| d.iter().map(|&v| -v).collect());
            vec![needs.0.then_some(d), neg]
        });
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            backward,
        ))
    }

    /// 3×3 patch extraction with zero padding of 1 for an NHWC tensor:
    /// `[b, h, w, c] -> [b, h, w, 9c]`, patch layout `(dy, dx, channel)`.
    pub fn im2col3x3(&self) -> Result<Tensor<T>> {
        let &[b, h, w, c] = self.shape() else {
            return Err(TensorError::Contract(format!(
                "im2col3x3 expects [b, h, w, c], got {:?}",
                self.shape()
            )));
        };
        let x = self.data();
        let k = 9 * c;
        let mut out = vec![T::zero(); b * h * w * k];
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let dst = ((n * h + i) * w + j) * k;
                    for dy in 0..3 {
                        let si = i as isize + dy as isize - 1;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for dx in 0..3 {
                            let sj = j as isize + dx as isize - 1;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            let src = ((n * h + si as usize) * w + sj as usize) * c;
                            let d = dst + (dy * 3 + dx) * c;
                            out[d..d + c].copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
        }
        let backward = Box::new(move |g: &[T]| {
            let mut gx = vec![T::zero(); b * h * w * c];
            for n in 0..b {
                for i in 0..h {
                    for j in 0..w {
                        let src = ((n * h + i) * w + j) * k;
                        for dy in 0..3 {
                            let si = i as isize + dy as isize - 1;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for dx in 0..3 {
                                let sj = j as isize + dx as isize - 1;
                                if sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                let dst = ((n * h + si as usize) * w + sj as usize) * c;
                                let s = src + (dy * 3 + dx) * c;
                                gx[dst..dst + c]
                                    .iter_mut()
                                    .zip(&g[s..s + c])
                                    .for_each(|(d, &v)| *d += v);
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(out, vec![b, h, w, k], vec![self.clone()], backward))
    }

    /// 2×2 average pooling with stride 2 on an NHWC tensor with even extents.
    pub fn avg_pool2x2(&self) -> Result<Tensor<T>> {
        let &[b, h, w, c] = self.shape() else {
            return Err(TensorError::Contract(format!(
                "avg_pool2x2 expects [b, h, w, c], got {:?}",
                self.shape()
            )));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Contract(format!(
                "avg_pool2x2 needs even spatial extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data();
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); b * oh * ow * c];
        for n in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    let dst = ((n * oh + i) * ow + j) * c;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let src = ((n * h + 2 * i + di) * w + 2 * j + dj) * c;
                        for ch in 0..c {
                            out[dst + ch] += x[src + ch];
                        }
                    }
                    out[dst..dst + c].iter_mut().for_each(|v| *v *= quarter);
                }
            }
        }
        let backward = Box::new(move |g: &[T]| {
            let mut gx = vec![T::zero(); b * h * w * c];
            for n in 0..b {
                for i in 0..oh {
                    for j in 0..ow {
                        let src = ((n * oh + i) * ow + j) * c;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let dst = ((n * h + 2 * i + di) * w + 2 * j + dj) * c;
                            for ch in 0..c {
                                gx[dst + ch] = g[src + ch] * quarter;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(out, vec![b, oh, ow, c], vec![self.clone()], backward))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let u = t(&[2.0, 2.0, 2.0, 2.0], &[4]).softmax_lastdim().unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = t(&[0.0, 3f64.ln()], &[2]).softmax_lastdim().unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12 && (p.data()[1] - 0.75).abs() < 1e-12);
        let x = [0.3, -1.2, 2.0];
        let a = t(&x, &[3]).softmax_lastdim().unwrap();
        let b = t(&x, &[3]).add_scalar(17.5).softmax_lastdim().unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = t(&[0.3, -1.2, 2.0, 5.0, 5.0, -3.0], &[2, 3]);
        let a = x.log_softmax_lastdim().unwrap();
        let b = x.softmax_lastdim().unwrap().log().unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_distance_examples() {
        let a = t(&[1.0, 0.0], &[2]);
        let b = t(&[0.0, 1.0], &[2]);
        assert!((a.l2_distance(&b).unwrap().item() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(a.l2_distance(&a).unwrap().item(), 0.0);
        assert_eq!(b.l2_distance(&a).unwrap().item(), a.l2_distance(&b).unwrap().item());
        assert!(a.l2_distance(&t(&[1.0, 2.0, 3.0], &[3])).is_err());
    }

    #[test]
    fn zero_distance_has_zero_subgradient() {
        let a = Tensor::<f64>::param(vec![0.5, -0.5], &[2]).unwrap();
        let b = Tensor::<f64>::new(vec![0.5, -0.5], &[2]).unwrap();
        a.l2_distance(&b).unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn huber_branches() {
        let a = t(&[0.5, 3.0, 1.0], &[3]);
        let b = t(&[0.0, 1.0, 1.0], &[3]);
        assert_eq!(a.huber(&b).unwrap().data(), &[0.125, 1.5, 0.0]);
    }

    #[test]
    fn im2col_center_tap_is_input() {
        let vals: Vec<f64> = (0..2 * 3 * 3 * 2).map(|v| v as f64).collect();
        let x = t(&vals, &[2, 3, 3, 2]);
        let cols = x.im2col3x3().unwrap();
        assert_eq!(cols.shape(), &[2, 3, 3, 18]);
        for p in 0..18 {
            let center = &cols.data()[p * 18 + 8..p * 18 + 10];
            assert_eq!(center, &vals[p * 2..p * 2 + 2]);
        }
        // top-left corner: the (0,0) tap is padding
        assert_eq!(&cols.data()[0..2], &[0.0, 0.0]);
    }

    #[test]
    fn avg_pool_averages_quads() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2, 1]);
        assert_eq!(x.avg_pool2x2().unwrap().data(), &[2.5]);
        assert!(t(&[1.0; 3], &[1, 3, 1, 1]).avg_pool2x2().is_err());
    }
}
