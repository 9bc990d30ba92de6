use l2d_core::losses::{
    bce_loss, cd_loss, id_loss, l2d_loss, mld_loss, mse_baseline, ps_baseline, DistillConfig, LabelMatrix,
    StudentSignals, TeacherSignals,
};
use l2d_core::model::{Bound, Capacity, LabelWiseEmbeddingSet, Model, ModelConfig};
use l2d_core::tensor::{grad_check, grad_check_multi};
use l2d_core::{Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn labels(rng: &mut ChaCha8Rng, b: usize, q: usize) -> LabelMatrix {
    let mut bits: Vec<u8> = (0..b * q).map(|_| rng.gen_bool(0.6) as u8).collect();
    for i in 0..b {
        if bits[i * q..(i + 1) * q].iter().all(|&v| v == 0) {
            bits[i * q + rng.gen_range(0..q)] = 1;
        }
    }
    LabelMatrix::new(bits, b, q).unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(2..=3), rng.gen_range(2..=4), rng.gen_range(2..=8))
}

fn lift(e: l2d_core::Error) -> TensorError {
    TensorError::Contract(e.to_string())
}

fn embs(t: &Tensor<f64>) -> LabelWiseEmbeddingSet<f64> {
    LabelWiseEmbeddingSet(t.clone())
}

#[test]
fn probability_losses_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (b, q, _) = dims(&mut rng);
        let y = labels(&mut rng, b, q);
        let p = uniform(&mut rng, b * q, 0.05, 0.95);
        let pt = Tensor::new(uniform(&mut rng, b * q, 0.05, 0.95), &[b, q]).unwrap();
        let bce = grad_check(|x| bce_loss(x, &y).map_err(lift), &p, &[b, q], H).unwrap();
        let mld = grad_check(|x| mld_loss(&pt, x).map_err(lift), &p, &[b, q], H).unwrap();
        assert!(bce < TOL, "bce {bce}");
        assert!(mld < TOL, "mld {mld}");
    }
}

#[test]
fn logit_baselines_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (b, q, _) = dims(&mut rng);
        let y = labels(&mut rng, b, q);
        let z = uniform(&mut rng, b * q, -2.0, 2.0);
        let zt = Tensor::new(uniform(&mut rng, b * q, -2.0, 2.0), &[b, q]).unwrap();
        let temperature = rng.gen_range(0.5..4.0);
        let mse = grad_check(|x| mse_baseline(&zt, x).map_err(lift), &z, &[b, q], H).unwrap();
        let ps = grad_check(|x| ps_baseline(&zt, x, &y, temperature).map_err(lift), &z, &[b, q], H).unwrap();
        assert!(mse < TOL, "mse {mse}");
        assert!(ps < TOL, "ps {ps}");
    }
}

#[test]
fn structural_losses_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..20 {
        let (b, q, d) = dims(&mut rng);
        let y = labels(&mut rng, b, q);
        let e = uniform(&mut rng, b * q * d, -2.0, 2.0);
        let et = Tensor::new(uniform(&mut rng, b * q * d, -2.0, 2.0), &[b, q, d]).unwrap();
        let cfg = DistillConfig {
            normalize_pairs: case % 2 == 1,
            normalize_embeddings: case % 4 == 3,
            ..DistillConfig::default()
        };
        let cd = grad_check(|x| cd_loss(&embs(&et), &embs(x), &y, &cfg).map_err(lift), &e, &[b, q, d], H).unwrap();
        let id = grad_check(|x| id_loss(&embs(&et), &embs(x), &y, &cfg).map_err(lift), &e, &[b, q, d], H).unwrap();
        assert!(cd < TOL, "cd {cd}");
        assert!(id < TOL, "id {id}");
    }
}

#[test]
fn huber_composite_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let n = rng.gen_range(2..=12);
        let a = uniform(&mut rng, n, -3.0, 3.0);
        let b = uniform(&mut rng, n, -3.0, 3.0);
        let err = grad_check_multi(
            |x| Ok(x[0].abs().huber(&x[1].mul(&x[0])?)?.sum()),
            &[(a, vec![n]), (b, vec![n])],
            H,
        )
        .unwrap();
        assert!(err < TOL, "huber {err}");
    }
}

fn tiny_config(q: usize, d: usize, seed: u64, capacity: Capacity) -> ModelConfig {
    ModelConfig {
        height: 4,
        width: 4,
        channels: 2,
        widths: vec![3],
        embed_dim: d,
        heads: 2,
        num_classes: q,
        capacity,
        seed,
        positional_encoding: seed % 2 == 0,
    }
}

/// Full L2D objective through a student network, checked against every
/// student parameter.
#[test]
fn end_to_end_model_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..20 {
        let b = rng.gen_range(2..=3);
        let q = rng.gen_range(2..=4);
        let d = 2 * rng.gen_range(1..=4);
        let y = labels(&mut rng, b, q);
        let x = Tensor::new(uniform(&mut rng, b * 32, 0.0, 1.0), &[b, 4, 4, 2]).unwrap();
        let teacher = Model::<f64>::new(tiny_config(q, d, 100 + case, Capacity::Teacher)).unwrap();
        let tp = teacher.bind(false).unwrap();
        let tout = teacher.forward(&tp, &x).unwrap();
        let student = Model::<f64>::new(tiny_config(q, d, 200 + case, Capacity::Student)).unwrap();
        let inputs: Vec<(Vec<f64>, Vec<usize>)> =
            student.params().iter().map(|p| (p.value.clone(), p.shape.clone())).collect();
        let cfg = DistillConfig::default();
        let err = grad_check_multi(
            |leaves| {
                let bound = Bound::from_tensors(&student, leaves.to_vec()).map_err(lift)?;
                let out = student.forward(&bound, &x).map_err(lift)?;
                let s = StudentSignals {
                    probs: &out.predictions.probs,
                    logits: &out.predictions.logits,
                    embeddings: &out.embeddings,
                };
                let t = TeacherSignals {
                    probs: &tout.predictions.probs,
                    logits: &tout.predictions.logits,
                    embeddings: &tout.embeddings,
                };
                Ok(l2d_loss(&s, &y, Some(&t), &cfg).map_err(lift)?.0)
            },
            &inputs,
            H,
        )
        .unwrap();
        assert!(err < TOL, "case {case} (b={b} q={q} d={d}): {err}");
    }
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian-ish matrix.
fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < d {
        let mut v = uniform(rng, d, -1.0, 1.0);
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-3 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    rows.concat()
}

fn rigid(e: &[f64], d: usize, rot: &[f64], shift: &[f64]) -> Vec<f64> {
    e.chunks(d)
        .flat_map(|v| (0..d).map(move |i| (0..d).map(|j| rot[i * d + j] * v[j]).sum::<f64>() + shift[i]))
        .collect()
}

fn losses(et: &[f64], es: &[f64], y: &LabelMatrix, d: usize, cfg: &DistillConfig) -> (f64, f64) {
    let shape = [y.rows(), y.classes(), d];
    let t = LabelWiseEmbeddingSet(Tensor::new(et.to_vec(), &shape).unwrap());
    let s = LabelWiseEmbeddingSet(Tensor::new(es.to_vec(), &shape).unwrap());
    (cd_loss(&t, &s, y, cfg).unwrap().item(), id_loss(&t, &s, y, cfg).unwrap().item())
}

fn bits_strategy() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (2usize..=4, 2usize..=4, 1usize..=6, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn structural_losses_are_isometry_invariant((b, q, d, seed) in bits_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = labels(&mut rng, b, q);
        let et = uniform(&mut rng, b * q * d, -2.0, 2.0);
        let es = uniform(&mut rng, b * q * d, -2.0, 2.0);
        let rot = orthogonal(&mut rng, d);
        let shift = uniform(&mut rng, d, -5.0, 5.0);
        let cfg = DistillConfig::default();
        let (cd0, id0) = losses(&et, &es, &y, d, &cfg);
        let (cd1, id1) = losses(&et, &rigid(&es, d, &rot, &shift), &y, d, &cfg);
        prop_assert!((cd0 - cd1).abs() < 1e-8, "{cd0} vs {cd1}");
        prop_assert!((id0 - id1).abs() < 1e-8, "{id0} vs {id1}");
        // a rigid image of the teacher is a perfect student
        let (cd2, id2) = losses(&et, &rigid(&et, d, &rot, &shift), &y, d, &cfg);
        prop_assert!(cd2.abs() < 1e-8 && id2.abs() < 1e-8, "{cd2} {id2}");
    }

    #[test]
    fn masked_embeddings_are_inert((b, q, d, seed) in bits_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = labels(&mut rng, b, q);
        let et = uniform(&mut rng, b * q * d, -2.0, 2.0);
        let es = uniform(&mut rng, b * q * d, -2.0, 2.0);
        let (mut et2, mut es2) = (et.clone(), es.clone());
        for i in 0..b {
            for k in 0..q {
                if !y.get(i, k) {
                    let at = (i * q + k) * d;
                    for c in 0..d {
                        et2[at + c] = 0.0;
                        es2[at + c] = rng.gen_range(-100.0..100.0);
                    }
                }
            }
        }
        let cfg = DistillConfig::default();
        prop_assert_eq!(losses(&et, &es, &y, d, &cfg), losses(&et2, &es2, &y, d, &cfg));
    }

    #[test]
    fn structural_losses_are_batch_permutation_invariant((b, q, d, seed) in bits_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = labels(&mut rng, b, q);
        let et = uniform(&mut rng, b * q * d, -2.0, 2.0);
        let es = uniform(&mut rng, b * q * d, -2.0, 2.0);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % b);
        let gather = |v: &[f64], w: usize| perm.iter().flat_map(|&i| v[i * w..(i + 1) * w].to_vec()).collect::<Vec<f64>>();
        let yp = LabelMatrix::new(perm.iter().flat_map(|&i| y.row(i).to_vec()).collect(), b, q).unwrap();
        let cfg = DistillConfig::default();
        let (cd0, id0) = losses(&et, &es, &y, d, &cfg);
        let (cd1, id1) = losses(&gather(&et, q * d), &gather(&es, q * d), &yp, d, &cfg);
        prop_assert!((cd0 - cd1).abs() < 1e-9 * cd0.max(1.0));
        prop_assert!((id0 - id1).abs() < 1e-9 * id0.max(1.0));
    }

    #[test]
    fn every_loss_is_non_negative((b, q, d, seed) in bits_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = labels(&mut rng, b, q);
        let t = |rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64| {
            Tensor::<f64>::new(uniform(rng, shape.iter().product(), lo, hi), shape).unwrap()
        };
        let (pt, ps) = (t(&mut rng, &[b, q], 0.0, 1.0), t(&mut rng, &[b, q], 0.0, 1.0));
        let (zt, zs) = (t(&mut rng, &[b, q], -9.0, 9.0), t(&mut rng, &[b, q], -9.0, 9.0));
        let (et, es) = (t(&mut rng, &[b, q, d], -3.0, 3.0), t(&mut rng, &[b, q, d], -3.0, 3.0));
        let cfg = DistillConfig::default();
        let values = [
            bce_loss(&ps, &y).unwrap().item(),
            mld_loss(&pt, &ps).unwrap().item(),
            cd_loss(&embs(&et), &embs(&es), &y, &cfg).unwrap().item(),
            id_loss(&embs(&et), &embs(&es), &y, &cfg).unwrap().item(),
            mse_baseline(&zt, &zs).unwrap().item(),
            ps_baseline(&zt, &zs, &y, 1.0).unwrap().item(),
        ];
        for v in values {
            prop_assert!(v >= 0.0 && v.is_finite(), "{values:?}");
        }
    }
}

#[test]
fn teacher_receives_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (b, q, d) = (3, 4, 4);
    let y = labels(&mut rng, b, q);
    let x = Tensor::new(uniform(&mut rng, b * 32, 0.0, 1.0), &[b, 4, 4, 2]).unwrap();
    let teacher = Model::<f64>::new(tiny_config(q, d, 7, Capacity::Teacher)).unwrap();
    let student = Model::<f64>::new(tiny_config(q, d, 8, Capacity::Student)).unwrap();
    let tp = teacher.bind(true).unwrap();
    let sp = student.bind(true).unwrap();
    let tout = teacher.forward(&tp, &x).unwrap();
    let sout = student.forward(&sp, &x).unwrap();
    for baseline in [
        l2d_core::losses::BaselineMode::None,
        l2d_core::losses::BaselineMode::Mse,
        l2d_core::losses::BaselineMode::Ps,
    ] {
        let cfg = if baseline == l2d_core::losses::BaselineMode::None {
            DistillConfig::default()
        } else {
            DistillConfig::baseline(baseline)
        };
        let s = StudentSignals {
            probs: &sout.predictions.probs,
            logits: &sout.predictions.logits,
            embeddings: &sout.embeddings,
        };
        let t = TeacherSignals {
            probs: &tout.predictions.probs,
            logits: &tout.predictions.logits,
            embeddings: &tout.embeddings,
        };
        let (loss, _) = l2d_loss(&s, &y, Some(&t), &cfg).unwrap();
        loss.backward().unwrap();
        assert!(tp.grads().iter().flatten().all(|&g| g == 0.0), "{baseline:?}");
        assert!(sp.grads().iter().flatten().any(|&g| g != 0.0));
    }
}

#[test]
fn breakdown_recombines_to_total() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (b, q, d) = (3, 3, 4);
    let y = labels(&mut rng, b, q);
    let x = Tensor::new(uniform(&mut rng, b * 32, 0.0, 1.0), &[b, 4, 4, 2]).unwrap();
    let teacher = Model::<f32>::new(tiny_config(q, d, 1, Capacity::Teacher)).unwrap();
    let student = Model::<f32>::new(tiny_config(q, d, 2, Capacity::Student)).unwrap();
    let x32 = Tensor::<f32>::new(x.data().iter().map(|&v| v as f32).collect(), x.shape()).unwrap();
    let tout = teacher.forward(&teacher.bind(false).unwrap(), &x32).unwrap();
    let sout = student.forward(&student.bind(true).unwrap(), &x32).unwrap();
    let s = StudentSignals {
        probs: &sout.predictions.probs,
        logits: &sout.predictions.logits,
        embeddings: &sout.embeddings,
    };
    let t = TeacherSignals {
        probs: &tout.predictions.probs,
        logits: &tout.predictions.logits,
        embeddings: &tout.embeddings,
    };
    for cfg in [
        DistillConfig::default(),
        DistillConfig::none(),
        DistillConfig::baseline(l2d_core::losses::BaselineMode::Ps),
    ] {
        let (loss, parts) = l2d_loss(&s, &y, Some(&t), &cfg).unwrap();
        assert_eq!(parts.total, loss.item());
        assert_eq!(parts.recombine(&cfg), parts.total);
    }
}
