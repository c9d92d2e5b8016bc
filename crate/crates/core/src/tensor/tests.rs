use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::constant(shape.to_vec(), data.to_vec())
}

#[test]
fn linear_identity_and_zero_weight() {
    let x = t(&[1, 2], &[1.0, 2.0]);
    let w_id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let b0 = t(&[2], &[0.0, 0.0]);
    assert_eq!(linear(&x, &w_id, &b0).unwrap().data(), &[1.0, 2.0]);

    let w0 = t(&[2, 2], &[0.0; 4]);
    let b = t(&[2], &[3.0, 4.0]);
    assert_eq!(linear(&x, &w0, &b).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn linear_matches_hand_unrolled_dot_products() {
    let mut rng = crate::rng::stream(11, "linear-oracle", 0);
    use rand::Rng;
    let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = linear(&t(&[2, 3], &x), &t(&[3, 4], &w), &t(&[4], &b)).unwrap();
    // Brute-force triple loop.
    for r in 0..2 {
        for o in 0..4 {
            let mut acc = b[o];
            for i in 0..3 {
                acc += x[r * 3 + i] * w[i * 4 + o];
            }
            assert!((y.data()[r * 4 + o] - acc).abs() < 1e-15);
        }
    }
}

#[test]
fn linear_shape_mismatch_errors() {
    let x = t(&[1, 3], &[0.0; 3]);
    let w = t(&[2, 2], &[0.0; 4]);
    let b = t(&[2], &[0.0; 2]);
    assert!(matches!(
        linear(&x, &w, &b),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn conv2d_constant_and_identity_kernels() {
    let x = t(&[1, 1, 3, 3], &[1.0; 9]);
    let k = t(&[1, 1, 1, 1], &[2.0]);
    let y = conv2d(&x, &k, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 2.0));

    // 3x3 kernel, center 1: with pad 1 output equals input.
    let xi: Vec<f64> = (0..9).map(|i| i as f64).collect();
    let x = t(&[1, 1, 3, 3], &xi);
    let mut kc = vec![0.0; 9];
    kc[4] = 1.0;
    let y = conv2d(&x, &t(&[1, 1, 3, 3], &kc), 1, 1).unwrap();
    assert_eq!(y.data(), &xi[..]);
}

#[test]
fn conv2d_matches_six_loop_oracle() {
    use rand::Rng;
    let mut rng = crate::rng::stream(12, "conv-oracle", 0);
    let x: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (stride, pad) = (2, 1);
    let y = conv2d(&t(&[1, 2, 5, 5], &x), &t(&[3, 2, 3, 3], &k), stride, pad).unwrap();
    let (oh, ow) = (3usize, 3usize);
    assert_eq!(y.shape(), &[1, 3, oh, ow]);
    for oc in 0..3 {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for ic in 0..2 {
                    for kh in 0..3 {
                        for kw in 0..3 {
                            let ih = (i * stride + kh) as isize - pad as isize;
                            let iw = (j * stride + kw) as isize - pad as isize;
                            if ih >= 0 && ih < 5 && iw >= 0 && iw < 5 {
                                acc += x[(ic * 5 + ih as usize) * 5 + iw as usize]
                                    * k[((oc * 2 + ic) * 3 + kh) * 3 + kw];
                            }
                        }
                    }
                }
                let got = y.data()[(oc * oh + i) * ow + j];
                assert!((got - acc).abs() < 1e-14, "oc={oc} i={i} j={j}");
            }
        }
    }
}

#[test]
fn conv2d_kernel_larger_than_padded_input_errors() {
    let x = t(&[1, 1, 2, 2], &[0.0; 4]);
    let k = t(&[1, 1, 5, 5], &[0.0; 25]);
    assert!(conv2d(&x, &k, 1, 1).is_err());
}

#[test]
fn relu_pool_batchnorm_basics() {
    let y = t(&[1, 3], &[-1.0, 0.0, 2.0]).relu();
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

    let x = t(&[1, 2, 2, 2], &[3.0, 3.0, 3.0, 3.0, -1.0, -1.0, -1.0, -1.0]);
    let p = global_avg_pool(&x).unwrap();
    assert_eq!(p.data(), &[3.0, -1.0]);

    // Eval-mode batch norm with unit running stats is the identity (up to eps).
    let x = t(&[2, 2], &[0.5, -0.25, 1.5, 0.75]);
    let gamma = t(&[2], &[1.0, 1.0]);
    let beta = t(&[2], &[0.0, 0.0]);
    let mut stats = RunningStats::new(2);
    let y = batch_norm(&x, &gamma, &beta, &mut stats, BnMode::Eval).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_train_rejects_batch_of_one() {
    let x = t(&[1, 2], &[0.0, 0.0]);
    let g = t(&[2], &[1.0, 1.0]);
    let b = t(&[2], &[0.0, 0.0]);
    let mut stats = RunningStats::new(2);
    assert!(matches!(
        batch_norm(&x, &g, &b, &mut stats, BnMode::Train { update_stats: true }),
        Err(Error::DegenerateBatch(1))
    ));
}

#[test]
fn batch_norm_train_normalizes_and_updates_running_stats() {
    let x = t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]);
    let g = t(&[1], &[1.0]);
    let b = t(&[1], &[0.0]);
    let mut stats = RunningStats::new(1);
    let y = batch_norm(&x, &g, &b, &mut stats, BnMode::Train { update_stats: true }).unwrap();
    let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
    // mean 2.5, unbiased var 5/3 folded at momentum 0.1
    assert!((stats.mean[0] - 0.25).abs() < 1e-12);
    assert!((stats.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn softmax_tau_examples() {
    let y = t(&[1, 2], &[0.0, 0.0]).softmax_tau(1.0).unwrap();
    assert_eq!(y.data(), &[0.5, 0.5]);

    // Large tau flattens toward uniform, monotonically.
    let row = t(&[1, 2], &[10.0, 0.0]);
    let p1 = row.softmax_tau(1.0).unwrap().data()[0];
    let p10 = row.softmax_tau(10.0).unwrap().data()[0];
    let p100 = row.softmax_tau(100.0).unwrap().data()[0];
    assert!(p1 > p10 && p10 > p100 && p100 > 0.5);
    assert!((p100 - 0.5).abs() < 0.05);

    // Direct evaluation oracle.
    let y = t(&[1, 3], &[1.0, 2.0, 3.0]).softmax_tau(2.0).unwrap();
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| (x / 2.0).exp()).collect();
    let s: f64 = e.iter().sum();
    for (a, b) in y.data().iter().zip(e.iter().map(|v| v / s)) {
        assert!((a - b).abs() < 1e-15);
    }

    assert!(t(&[1, 2], &[0.0, 0.0]).softmax_tau(0.0).is_err());
    assert!(t(&[1, 2], &[0.0, 0.0]).softmax_tau(-1.0).is_err());
}

#[test]
fn softmax_rows_are_probability_vectors() {
    use rand::Rng;
    let mut rng = crate::rng::stream(5, "softmax-prop", 0);
    for _ in 0..100 {
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let y = t(&[3, 4], &data).softmax_tau(rng.gen_range(0.1..5.0)).unwrap();
        for r in 0..3 {
            let row = &y.data()[r * 4..(r + 1) * 4];
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let uniform = t(&[1, 3], &[0.0, 0.0, 0.0]);
    let l = cross_entropy(&uniform, &[1]).unwrap().item();
    assert!((l - 3.0f64.ln()).abs() < 1e-12);

    let saturated = t(&[1, 3], &[0.0, 1e3, 0.0]);
    assert!(cross_entropy(&saturated, &[1]).unwrap().item() < 1e-10);

    // Direct-formula oracle on a random 4-class batch.
    use rand::Rng;
    let mut rng = crate::rng::stream(3, "ce-oracle", 0);
    let logits: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let labels = [2usize, 0, 3];
    let got = cross_entropy(&t(&[3, 4], &logits), &labels).unwrap().item();
    let mut want = 0.0;
    for r in 0..3 {
        let row = &logits[r * 4..(r + 1) * 4];
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        want += -(row[labels[r]].exp() / z).ln();
    }
    want /= 3.0;
    assert!((got - want).abs() < 1e-12);

    assert!(matches!(
        cross_entropy(&uniform, &[3]),
        Err(Error::Index(_))
    ));
}

#[test]
fn kl_div_examples() {
    let a = t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 0.5, -0.5]);
    assert!(kl_div_tau(&a, &a, 1.7).unwrap().item().abs() < 1e-15);

    // tau^2 scale factor: KL at tau equals tau^2 times the KL of the
    // tau-softened distributions at tau = 1.
    let s = t(&[1, 2], &[0.4, -0.6]);
    let te = t(&[1, 2], &[1.0, 0.2]);
    let tau = 2.0;
    let got = kl_div_tau(&s, &te, tau).unwrap().item();
    let soft = |v: &[f64]| {
        let e: Vec<f64> = v.iter().map(|x| (x / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect::<Vec<_>>()
    };
    let (ps, pt) = (soft(s.data()), soft(te.data()));
    let kl: f64 = pt
        .iter()
        .zip(&ps)
        .map(|(&t, &s)| t * (t.ln() - s.ln()))
        .sum();
    assert!((got - tau * tau * kl).abs() < 1e-14);

    // Closed-form: student uniform, teacher [ln 3, ln 1] -> KL([.75,.25] || [.5,.5]).
    let s = t(&[1, 2], &[0.0, 0.0]);
    let te = t(&[1, 2], &[3.0f64.ln(), 0.0]);
    let got = kl_div_tau(&s, &te, 1.0).unwrap().item();
    let want = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
    assert!((got - want).abs() < 1e-14);

    assert!(kl_div_tau(&s, &t(&[1, 3], &[0.0; 3]), 1.0).is_err());
}

#[test]
fn kl_div_nonnegative_property() {
    use rand::Rng;
    let mut rng = crate::rng::stream(9, "kl-prop", 0);
    for _ in 0..200 {
        let a: Vec<f64> = (0..8).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let tau = rng.gen_range(0.5..4.0);
        let v = kl_div_tau(&t(&[2, 4], &a), &t(&[2, 4], &b), tau).unwrap().item();
        assert!(v >= -1e-12);
    }
}

#[test]
fn stopgrad_shares_data_and_blocks_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(vec![1], vec![3.0]);
    let frozen = stopgrad(&x);
    assert_eq!(frozen.data(), x.data());

    // d/dx [ stopgrad(x) * x ] = stopgrad(x) = 3, not 6.
    let y = mul(&frozen, &x).unwrap();
    backward(&y).unwrap();
    assert_eq!(x.grad().unwrap(), vec![3.0]);
}

#[test]
fn stopgrad_teacher_receives_no_gradient() {
    let tape = Tape::new();
    let s = tape.leaf(vec![1, 2], vec![0.1, -0.2]);
    let te = tape.leaf(vec![1, 2], vec![0.7, 0.3]);
    let loss = kl_div_tau(&s, &stopgrad(&te), 2.0).unwrap();
    backward(&loss).unwrap();
    assert!(s.grad().is_some());
    assert!(te.grad().is_none(), "detached teacher must get no gradient");
}

#[test]
fn backward_populates_leaf_grads() {
    // loss = sum(x^2), x = [1, 2] -> grad [2, 4]
    let tape = Tape::new();
    let x = tape.leaf(vec![2], vec![1.0, 2.0]);
    let loss = mul(&x, &x).unwrap().sum();
    backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn backward_requires_scalar_and_runs_once() {
    let tape = Tape::new();
    let x = tape.leaf(vec![2], vec![1.0, 2.0]);
    let y = mul(&x, &x).unwrap();
    assert!(matches!(backward(&y), Err(Error::Contract(_))));

    let loss = y.sum();
    backward(&loss).unwrap();
    assert!(matches!(backward(&loss), Err(Error::Contract(_))));
}

#[test]
fn sgd_single_step_and_momentum_recurrence() {
    let mut p = Param::new("w", vec![2], vec![1.0, -1.0]);
    let tape = Tape::new();
    let w = p.tensor(Some(&tape));
    let loss = mul(&w, &w).unwrap().sum();
    backward(&loss).unwrap();
    let grads = tape.param_grads();
    let g = grads.get(&p).unwrap().to_vec();
    assert_eq!(g, vec![2.0, -2.0]);

    // One step, v0 = 0, wd 0: theta - lr * g.
    let cfg = SgdConfig {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
    };
    sgd_update([&mut p], &grads, &cfg);
    assert_eq!(p.value(), &[1.0 - 0.1 * 2.0, -1.0 + 0.1 * 2.0]);

    // Constant gradient twice: v2 = g * (1 + momentum).
    let mut q = Param::new("q", vec![1], vec![0.0]);
    for _ in 0..2 {
        let tape = Tape::new();
        let w = q.tensor(Some(&tape));
        // loss = 3 * w -> constant grad 3
        let loss = w.scale(3.0).sum();
        backward(&loss).unwrap();
        sgd_update([&mut q], &tape.param_grads(), &cfg);
    }
    assert!((q.momentum()[0] - 3.0 * 1.9).abs() < 1e-15);
}

#[test]
fn param_mount_is_memoized_and_grads_accumulate() {
    let p = Param::new("w", vec![1], vec![2.0]);
    let tape = Tape::new();
    let a = p.tensor(Some(&tape));
    let b = p.tensor(Some(&tape));
    // Two mounts, one node: loss = w + w -> grad 2.
    let loss = add(&a, &b).unwrap().sum();
    backward(&loss).unwrap();
    assert_eq!(tape.param_grads().get(&p).unwrap(), &[2.0]);
}

#[test]
fn mixing_tapes_is_an_error() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let a = t1.leaf(vec![1], vec![1.0]);
    let b = t2.leaf(vec![1], vec![1.0]);
    assert!(matches!(add(&a, &b), Err(Error::TapeMismatch)));
}

#[test]
fn mask_residual_exact_gate_paths() {
    let f = t(&[3], &[1.0, -2.0, 3.0]);
    let x = t(&[3], &[0.5, 0.5, -0.5]);
    let on = mask_residual(&f, &x, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(on.data(), add(&f, &x).unwrap().data());
    let off = mask_residual(&f, &x, &Tensor::scalar(0.0)).unwrap();
    assert_eq!(off.data(), x.data());
}

#[test]
fn straight_through_forward_is_hard_backward_is_identity() {
    let tape = Tape::new();
    let pi = tape.leaf(vec![3], vec![0.2, 0.5, 0.3]);
    let soft = pi.softmax_tau_vec_helper();
    let hard = vec![0.0, 1.0, 0.0];
    let b = straight_through(hard.clone(), &soft).unwrap();
    assert_eq!(b.data(), &hard[..]);
    let w = t(&[3], &[1.0, 2.0, 3.0]);
    let loss = mul(&b, &w).unwrap().sum();
    backward(&loss).unwrap();

    // Same loss through the soft path on a fresh tape gives the same grads.
    let tape2 = Tape::new();
    let pi2 = tape2.leaf(vec![3], vec![0.2, 0.5, 0.3]);
    let soft2 = pi2.softmax_tau_vec_helper();
    let loss2 = mul(&soft2, &w).unwrap().sum();
    backward(&loss2).unwrap();
    assert_eq!(pi.grad().unwrap(), pi2.grad().unwrap());
}

impl Tensor {
    /// Test helper: softmax over a 1-D tensor via the matrix op.
    fn softmax_tau_vec_helper(&self) -> Tensor {
        let n = self.numel();
        let y = self.reshape(vec![1, n]).softmax_tau(1.0).unwrap();
        y.reshape(vec![n])
    }
}

#[test]
fn finite_diff_quadratic_is_machine_precision() {
    let f = |xs: &[Tensor]| Ok(mul(&xs[0], &xs[0])?.sum());
    let report = finite_diff_check(&f, &[(vec![3], vec![0.3, -1.2, 2.0])], 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-9, "{report:?}");
}

#[test]
fn forward_and_grads_are_deterministic() {
    let run = || {
        use rand::Rng;
        let mut rng = crate::rng::stream(21, "det", 0);
        let xv: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..12 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let x = tape.leaf(vec![1, 12], xv);
        let w = tape.leaf(vec![12, 3], wv);
        let b = tape.leaf(vec![3], vec![0.0; 3]);
        let y = linear(&x, &w, &b).unwrap();
        let loss = cross_entropy(&y.relu(), &[1]).unwrap();
        backward(&loss).unwrap();
        (
            loss.item().to_bits(),
            w.grad()
                .unwrap()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
