//! Central-difference gradient checks at 64-bit precision.

use super::{Result, Tensor, TensorError};

/// Max over coordinates of `|analytic − numeric| / max(1, |numeric|)` for a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    grad_check_multi(|xs| f(&xs[0]), &[(x.to_vec(), shape.to_vec())], h)
}

/// Same as [`grad_check`] over several inputs; every coordinate of every
/// input is perturbed.
pub fn grad_check_multi<F>(f: F, inputs: &[(Vec<f64>, Vec<usize>)], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves = inputs
        .iter()
        .map(|(d, s)| Tensor::param(d.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&leaves)?;
    if out.len() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(Tensor::grad_or_zeros).collect();

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let xs = inputs
            .iter()
            .enumerate()
            .map(|(i, (d, s))| {
                let mut d = d.clone();
                if i == which {
                    d[coord] += delta;
                }
                Tensor::new(d, s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&xs)?.item())
    };

    let mut worst = 0.0f64;
    for (which, (data, _)) in inputs.iter().enumerate() {
        for coord in 0..data.len() {
            let numeric = (eval(which, coord, h)? - eval(which, coord, -h)?) / (2.0 * h);
            let err = (analytic[which][coord] - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn linear_sum_is_exact() {
        let err = grad_check(|x| Ok(x.sum()), &random(5, 1), &[5], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sigmoid_sum() {
        let err = grad_check(|x| Ok(x.sigmoid().sum()), &random(7, 2), &[7], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_vector_output() {
        assert!(grad_check(|x| Ok(x.clone()), &[1.0, 2.0], &[2], 1e-5).is_err());
    }

    /// Every differentiable primitive at random inputs in [−2, 2].
    #[test]
    fn primitives_pass() {
        let h = 1e-5;
        let tol = 1e-4;
        for seed in 0..5 {
            let a = random(6, 10 + seed);
            let b = random(3, 20 + seed);
            let pos: Vec<f64> = a.iter().map(|v| v.abs() + 0.5).collect();
            let w = random(6, 30 + seed);
            let weighted = move |t: Tensor<f64>| -> Result<Tensor<f64>> {
                Ok(t.mul(&Tensor::new(w.clone(), &[2, 3])?)?.sum())
            };
            let cases: Vec<(&str, f64)> = vec![
                ("add", grad_check_multi(|x| weighted(x[0].add(&x[1])?), &[(a.clone(), vec![2, 3]), (b.clone(), vec![3])], h).unwrap()),
                ("sub", grad_check_multi(|x| weighted(x[0].sub(&x[1])?), &[(a.clone(), vec![2, 3]), (b.clone(), vec![3])], h).unwrap()),
                ("mul", grad_check_multi(|x| weighted(x[0].mul(&x[1])?), &[(a.clone(), vec![2, 3]), (b.clone(), vec![3])], h).unwrap()),
                ("div", grad_check_multi(|x| weighted(x[1].div(&x[0])?), &[(pos.clone(), vec![2, 3]), (b.clone(), vec![3])], h).unwrap()),
                ("pow", grad_check_multi(|x| weighted(x[0].pow(&x[1])?), &[(pos.clone(), vec![2, 3]), (b.clone(), vec![3])], h).unwrap()),
                ("max", grad_check_multi(|x| weighted(x[0].maximum(&x[1])?), &[(a.clone(), vec![2, 3]), (b.clone(), vec![3])], h).unwrap()),
                ("log", grad_check(|x| weighted(x.log()?), &pos, &[2, 3], h).unwrap()),
                ("exp", grad_check(|x| weighted(x.exp()), &a, &[2, 3], h).unwrap()),
                ("abs", grad_check(|x| weighted(x.abs()), &a, &[2, 3], h).unwrap()),
                ("sigmoid", grad_check(|x| weighted(x.sigmoid()), &a, &[2, 3], h).unwrap()),
                ("silu", grad_check(|x| weighted(x.silu()), &a, &[2, 3], h).unwrap()),
                ("softmax", grad_check(|x| weighted(x.softmax_lastdim()?), &a, &[2, 3], h).unwrap()),
                ("normalize", grad_check(|x| weighted(x.normalize_lastdim(1e-5)?), &a, &[2, 3], h).unwrap()),
                ("log_softmax", grad_check(|x| weighted(x.log_softmax_lastdim()?), &a, &[2, 3], h).unwrap()),
                ("permute", grad_check(|x| weighted(x.reshape(&[3, 2])?.permute(&[1, 0])?), &a, &[2, 3], h).unwrap()),
                ("norm", grad_check(|x| Ok(x.norm_lastdim()?.sum()), &a, &[2, 3], h).unwrap()),
                ("huber", grad_check_multi(|x| Ok(x[0].mul_scalar(2.0).huber(&x[1])?.sum()), &[(a.clone(), vec![6]), (random(6, 40 + seed), vec![6])], h).unwrap()),
                ("matmul", grad_check_multi(|x| weighted(x[0].matmul(&x[1])?), &[(a[..4].to_vec(), vec![2, 2]), (b.repeat(2), vec![2, 3])], h).unwrap()),
                ("sum_axis", grad_check(|x| Ok(x.sum_axis(1)?.powi(2).sum()), &a, &[2, 3], h).unwrap()),
                ("select_rows", grad_check(|x| Ok(x.select_rows(&[1, 0, 1])?.powi(2).sum()), &a, &[2, 3], h).unwrap()),
            ];
            for (name, err) in cases {
                assert!(err < tol, "{name}: {err}");
            }
        }
    }

    #[test]
    fn conv_primitives_pass() {
        let x = random(2 * 4 * 4 * 2, 99);
        let err = grad_check(
            |x| Ok(x.im2col3x3()?.avg_pool2x2()?.powi(2).sum()),
            &x,
            &[2, 4, 4, 2],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn batched_matmul_broadcast_pass() {
        let err = grad_check_multi(
            |x| Ok(x[0].matmul(&x[1])?.powi(2).sum()),
            &[(random(12, 5), vec![2, 2, 3]), (random(12, 6), vec![2, 1, 3, 2])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
