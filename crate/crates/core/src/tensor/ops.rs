//! Elementwise arithmetic, reductions and layout operations.

use std::rc::Rc;

use super::shape::{broadcast_shape, broadcast_strides, contiguous_strides, for_each_pair, numel, reduce_to};
use super::{Real, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Log,
    Exp,
    Abs,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Pow => "pow",
            BinaryOp::Max => "max",
        }
    }

    #[inline]
    fn apply<T: Real>(self, x: T, y: T) -> T {
        match self {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
            BinaryOp::Pow => x.powf(y),
            BinaryOp::Max => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
        }
    }

    /// Local partial derivatives (d/dx, d/dy) at (x, y) with output z.
    #[inline]
    fn partials<T: Real>(self, x: T, y: T, z: T) -> (T, T) {
        match self {
            BinaryOp::Add => (T::one(), T::one()),
            BinaryOp::Sub => (T::one(), -T::one()),
            BinaryOp::Mul => (y, x),
            BinaryOp::Div => (T::one() / y, -x / (y * y)),
            BinaryOp::Pow => {
                let dx = if y == T::zero() {
                    T::zero()
                } else {
                    y * x.powf(y - T::one())
                };
                let dy = if x > T::zero() { z * x.ln() } else { T::zero() };
                (dx, dy)
            }
            BinaryOp::Max => {
                if x >= y {
                    (T::one(), T::zero())
                } else {
                    (T::zero(), T::one())
                }
            }
        }
    }
}

/// Broadcasting binary operation.
pub(crate) fn binary<T: Real>(kind: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(kind.name(), a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); numel(&out_shape)];
    if a.shape() == b.shape() {
        for ((o, &x), &y) in out.iter_mut().zip(ad).zip(bd) {
            *o = kind.apply(x, y);
        }
    } else {
        for_each_pair(&out_shape, &sa, &sb, |i, ia, ib| out[i] = kind.apply(ad[ia], bd[ib]));
    }

    let needs = (a.requires_grad(), b.requires_grad());
    let (a_data, b_data) = (Rc::clone(&a.0.data), Rc::clone(&b.0.data));
    let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
    let z = Rc::new(out.clone());
    let shape_c = out_shape.clone();
    let backward = Box::new(move |g: &[T]| {
        let n = g.len();
        let (ga, gb) = match kind {
            // constant partials: no need to visit the operands
            BinaryOp::Add | BinaryOp::Sub => {
                let ga = if needs.0 { g.to_vec() } else { Vec::new() };
                let gb = match (needs.1, kind) {
                    (false, _) => Vec::new(),
                    (true, BinaryOp::Add) => g.to_vec(),
                    (true, _) => g.iter().map(|&v| -v).collect(),
                };
                (ga, gb)
            }
            _ => {
                let mut ga = if needs.0 { vec![T::zero(); n] } else { Vec::new() };
                let mut gb = if needs.1 { vec![T::zero(); n] } else { Vec::new() };
                let mut visit = |i: usize, ia: usize, ib: usize| {
                    let (dx, dy) = kind.partials(a_data[ia], b_data[ib], z[i]);
                    if needs.0 {
                        ga[i] = g[i] * dx;
                    }
                    if needs.1 {
                        gb[i] = g[i] * dy;
                    }
                };
                if a_shape == b_shape {
                    (0..n).for_each(|i| visit(i, i, i));
                } else {
                    for_each_pair(&shape_c, &sa, &sb, visit);
                }
                (ga, gb)
            }
        };
        vec![
            needs.0.then(|| reduce_to(&ga, &shape_c, &a_shape)),
            needs.1.then(|| reduce_to(&gb, &shape_c, &b_shape)),
        ]
    });
    Ok(Tensor::from_op(out, out_shape, vec![a.clone(), b.clone()], backward))
}

/// Pointwise map with derivative `d(x, y)` given input x and output y.
pub(crate) fn map<T: Real>(
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    d: impl Fn(T, T) -> T + 'static,
) -> Tensor<T> {
    let out: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    let input = Rc::clone(&x.0.data);
    let y = Rc::new(out.clone());
    let backward = Box::new(move |g: &[T]| {
        let gx = g
            .iter()
            .zip(input.iter().zip(y.iter()))
            .map(|(&g, (&x, &y))| g * d(x, y))
            .collect();
        vec![Some(gx)]
    });
    Tensor::from_op(out, x.shape().to_vec(), vec![x.clone()], backward)
}

impl<T: Real> Tensor<T> {
    pub fn elementwise(&self, kind: BinaryOp, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(kind, self, other)
    }

    pub fn unary(&self, kind: UnaryOp) -> Result<Tensor<T>> {
        match kind {
            UnaryOp::Log => self.log(),
            UnaryOp::Exp => Ok(self.exp()),
            UnaryOp::Abs => Ok(self.abs()),
        }
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinaryOp::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinaryOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinaryOp::Mul, self, other)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinaryOp::Div, self, other)
    }

    pub fn pow(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinaryOp::Pow, self, other)
    }

    pub fn maximum(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinaryOp::Max, self, other)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        map(self, |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        map(self, |x| x * c, move |_, _| c)
    }

    /// `c - x`
    pub fn rsub_scalar(&self, c: T) -> Tensor<T> {
        map(self, |x| c - x, |_, _| -T::one())
    }

    pub fn powi(&self, p: i32) -> Tensor<T> {
        map(
            self,
            |x| x.powi(p),
            move |x, _| T::lit(p as f64) * x.powi(p - 1),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        map(self, |x| -x, |_, _| -T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        map(self, |x| x.exp(), |_, y| y)
    }

    /// Natural log; non-positive entries are a domain error.
    pub fn log(&self) -> Result<Tensor<T>> {
        if let Some(bad) = self.data().iter().find(|&&v| !(v > T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(map(self, |x| x.ln(), |x, _| T::one() / x))
    }

    pub fn abs(&self) -> Tensor<T> {
        map(
            self,
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        map(
            self,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// x * sigmoid(x).
    pub fn silu(&self) -> Tensor<T> {
        fn sig<T: Real>(x: T) -> T {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        }
        map(
            self,
            |x| x * sig(x),
            |x, _| {
                let s = sig(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        map(
            self,
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        map(
            self,
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum::<T>();
        let n = self.len();
        Tensor::from_op(
            vec![total],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g: &[T]| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::lit(self.len() as f64);
        self.sum().mul_scalar(T::one() / n)
    }

    /// Sums out `axis`; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Contract(format!(
                "sum_axis: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let pre: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let post: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![T::zero(); pre * post];
        for p in 0..pre {
            for j in 0..n {
                let row = &x[(p * n + j) * post..(p * n + j + 1) * post];
                let dst = &mut out[p * post..(p + 1) * post];
                dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let backward = Box::new(move |g: &[T]| {
            let mut gx = vec![T::zero(); pre * n * post];
            for p in 0..pre {
                for j in 0..n {
                    gx[(p * n + j) * post..(p * n + j + 1) * post]
                        .copy_from_slice(&g[p * post..(p + 1) * post]);
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(out, out_shape, vec![self.clone()], backward))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g: &[T]| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `j` is input axis `axes[j]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Contract(format!(
                "permute: {axes:?} is not a permutation of {rank} axes"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let strides = contiguous_strides(shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
        let zero = vec![0; rank];
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for_each_pair(&out_shape, &src_strides, &zero, |i, s, _| out[i] = x[s]);
        let oshape = out_shape.clone();
        let backward = Box::new(move |g: &[T]| {
            let mut gx = vec![T::zero(); g.len()];
            for_each_pair(&oshape, &src_strides, &zero, |i, s, _| gx[s] = g[i]);
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(out, out_shape, vec![self.clone()], backward))
    }

    /// Gathers slices along the first axis; repeated indices are allowed.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(TensorError::Contract("select_rows on a scalar".into()));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(TensorError::Contract(format!(
                "select_rows: index {r} out of range for {} rows",
                shape[0]
            )));
        }
        if rows.is_empty() {
            return Err(TensorError::Contract("select_rows: empty index list".into()));
        }
        let width: usize = shape[1..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&x[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = rows.len();
        let rows = rows.to_vec();
        let n_in = self.len();
        let backward = Box::new(move |g: &[T]| {
            let mut gx = vec![T::zero(); n_in];
            for (k, &r) in rows.iter().enumerate() {
                gx[r * width..(r + 1) * width]
                    .iter_mut()
                    .zip(&g[k * width..(k + 1) * width])
                    .for_each(|(d, &v)| *d += v);
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(out, out_shape, vec![self.clone()], backward))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn identity_cases() {
        let x = t(&[1.5, -2.0, 0.25], &[3]);
        assert_eq!(x.add(&Tensor::scalar(0.0)).unwrap().data(), x.data());
        assert_eq!(x.mul(&Tensor::scalar(1.0)).unwrap().data(), x.data());
    }

    #[test]
    fn log_exp_roundtrip() {
        let xs: Vec<f64> = (0..=100).map(|i| -5.0 + 0.1 * i as f64).collect();
        let x = t(&xs, &[xs.len()]);
        let y = x.exp().log().unwrap();
        for (a, b) in y.data().iter().zip(&xs) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn log_domain_error() {
        let x = t(&[1.0, 0.0], &[2]);
        assert!(matches!(x.log(), Err(TensorError::Domain { .. })));
        assert!(matches!(
            t(&[-1.0], &[1]).unary(UnaryOp::Log),
            Err(TensorError::Domain { .. })
        ));
    }

    #[test]
    fn non_broadcastable_is_shape_error() {
        let a = t(&[1.0; 6], &[2, 3]);
        let b = t(&[1.0; 2], &[2]);
        assert!(matches!(a.add(&b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn broadcast_backward_sums_over_stretched_axes() {
        let a = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::<f64>::param(vec![10.0, 20.0, 30.0], &[3]).unwrap();
        a.mul(&b).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![5.0, 7.0, 9.0]);
        assert_eq!(a.grad().unwrap(), vec![10.0, 20.0, 30.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn sigmoid_values() {
        let x = t(&[0.0, 3f64.ln(), 40.0, -40.0], &[4]);
        let y = x.sigmoid();
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
        assert!(y.data()[2] <= 1.0 && y.data()[3] > 0.0);
        let xs = [-3.0, -0.4, 0.1, 2.2];
        let p = t(&xs, &[4]).sigmoid();
        let m = t(&xs, &[4]).neg().sigmoid();
        for (a, b) in p.data().iter().zip(m.data()) {
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_axis_and_permute() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(x.sum_axis(0).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1).unwrap().data(), &[6.0, 15.0]);
        let p = x.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn select_rows_scatters_gradient() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let y = x.select_rows(&[1, 1, 0]).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn max_routes_gradient_to_larger() {
        let a = Tensor::<f64>::param(vec![1.0, 5.0], &[2]).unwrap();
        let b = Tensor::<f64>::param(vec![3.0, 2.0], &[2]).unwrap();
        a.maximum(&b).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 0.0]);
    }
}
