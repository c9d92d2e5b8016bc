use super::*;
use crate::tensor::{backward, Tape};
use rand::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::constant(shape.to_vec(), data.to_vec())
}

fn rand_logits(rng: &mut impl Rng, batch: usize, classes: usize) -> Tensor {
    let data: Vec<f64> = (0..batch * classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::constant(vec![batch, classes], data)
}

#[test]
fn kd_loss_limits_and_componentwise_oracle() {
    let mut rng = crate::rng::stream(61, "kd", 0);
    let s = rand_logits(&mut rng, 4, 3);
    let te = rand_logits(&mut rng, 4, 3);
    let labels = [0usize, 2, 1, 1];

    let ce = crate::tensor::cross_entropy(&s, &labels).unwrap().item();
    let pure_ce = kd_loss(&s, &te, &labels, 0.0, 2.0).unwrap().item();
    assert!((pure_ce - ce).abs() < 1e-15);

    let zero = kd_loss(&s, &s, &labels, 1.0, 3.0).unwrap().item();
    assert!(zero.abs() < 1e-14);

    let kl = crate::tensor::kl_div_tau(&s, &te, 2.0).unwrap().item();
    let got = kd_loss(&s, &te, &labels, 0.5, 2.0).unwrap().item();
    assert!((got - (0.5 * ce + 0.5 * kl)).abs() < 1e-14);

    assert!(kd_loss(&s, &te, &labels, -0.1, 2.0).is_err());
    assert!(kd_loss(&s, &te, &labels, 1.5, 2.0).is_err());
}

#[test]
fn simple_self_distill_reduces_to_ce() {
    let mut rng = crate::rng::stream(62, "ssd", 0);
    let full = rand_logits(&mut rng, 3, 4);
    let labels = [1usize, 0, 3];
    let ce = crate::tensor::cross_entropy(&full, &labels).unwrap().item();

    let no_subs = simple_self_distill(&full, &[], &labels, 1.0, 2.0).unwrap().item();
    assert_eq!(no_subs, ce);

    let same = simple_self_distill(&full, &[full.clone(), full.clone()], &labels, 1.0, 2.0)
        .unwrap()
        .item();
    assert!((same - ce).abs() < 1e-14);

    let s1 = rand_logits(&mut rng, 3, 4);
    let s2 = rand_logits(&mut rng, 3, 4);
    let k1 = crate::tensor::kl_div_tau(&s1, &full, 1.0).unwrap().item();
    let k2 = crate::tensor::kl_div_tau(&s2, &full, 1.0).unwrap().item();
    let got = simple_self_distill(&full, &[s1, s2], &labels, 1.0, 1.0).unwrap().item();
    assert!((got - (ce + (k1 + k2))).abs() < 1e-14);
}

#[test]
fn scaled_subnet_loss_weights_are_exact_reciprocals() {
    let mut rng = crate::rng::stream(63, "sfsl", 0);
    let full = rand_logits(&mut rng, 2, 3);
    let quarter = rand_logits(&mut rng, 2, 3);

    let kl = crate::tensor::kl_div_tau(&quarter, &full, 1.0).unwrap().item();
    let got = scaled_subnet_loss(&full, &[(0.25, quarter.clone())], 1.0).unwrap().item();
    assert_eq!(got, kl * (1.0 / 0.25), "weight must be exactly 1/s");

    let same = scaled_subnet_loss(&full, &[(0.5, full.clone())], 1.0).unwrap().item();
    assert!(same.abs() < 1e-14);

    let half = rand_logits(&mut rng, 2, 3);
    let a = crate::tensor::kl_div_tau(&half, &full, 1.0).unwrap().item();
    let b = crate::tensor::kl_div_tau(&quarter, &full, 1.0).unwrap().item();
    let got = scaled_subnet_loss(&full, &[(0.5, half), (0.25, quarter)], 1.0)
        .unwrap()
        .item();
    assert!((got - (2.0 * a + 4.0 * b)).abs() < 1e-13);

    assert!(scaled_subnet_loss(&full, &[(1.0, full.clone())], 1.0).is_err());
    assert!(scaled_subnet_loss(&full, &[(0.0, full.clone())], 1.0).is_err());
}

#[test]
fn self_learning_loss_composition() {
    let mut rng = crate::rng::stream(64, "sl", 0);
    let full = rand_logits(&mut rng, 3, 5);
    let labels = [4usize, 0, 2];
    let ce = crate::tensor::cross_entropy(&full, &labels).unwrap().item();

    assert_eq!(self_learning_loss(&full, &[], &labels).unwrap().item(), ce);

    let subs = vec![(0.5, rand_logits(&mut rng, 3, 5)), (0.2, rand_logits(&mut rng, 3, 5))];
    let got = self_learning_loss(&full, &subs, &labels).unwrap().item();
    let want = ce + scaled_subnet_loss(&full, &subs, 1.0).unwrap().item();
    assert!((got - want).abs() < 1e-14);
}

fn cohort(
    rng: &mut impl Rng,
    factors: &[f64],
    batch: usize,
    classes: usize,
) -> CohortOutputs {
    let mut a = FactorOutputs::new();
    let mut b = FactorOutputs::new();
    for &f in factors {
        a.insert(Factor::new(f).unwrap(), rand_logits(rng, batch, classes));
        b.insert(Factor::new(f).unwrap(), rand_logits(rng, batch, classes));
    }
    CohortOutputs {
        teammate_a: a,
        teammate_b: b,
        leader: rand_logits(rng, batch, classes),
        labels: (0..batch).map(|i| i % classes).collect(),
    }
}

#[test]
fn interactive_loss_zero_and_symmetric() {
    let mut rng = crate::rng::stream(65, "il", 0);
    let mut outputs = cohort(&mut rng, &[1.0, 0.5], 4, 3);
    outputs.teammate_b = outputs.teammate_a.clone();
    assert!(interactive_loss(&outputs).unwrap().item().abs() < 1e-14);

    let outputs = cohort(&mut rng, &[1.0, 0.5, 0.2], 4, 3);
    let v = interactive_loss(&outputs).unwrap().item();
    let swapped = CohortOutputs {
        teammate_a: outputs.teammate_b.clone(),
        teammate_b: outputs.teammate_a.clone(),
        leader: outputs.leader.clone(),
        labels: outputs.labels.clone(),
    };
    assert_eq!(v, interactive_loss(&swapped).unwrap().item());

    // Single factor: KL(p||q) + KL(q||p) by direct evaluation.
    let single = cohort(&mut rng, &[1.0], 2, 4);
    let a = &single.teammate_a[&Factor::new(1.0).unwrap()];
    let b = &single.teammate_b[&Factor::new(1.0).unwrap()];
    let want = crate::tensor::kl_div_tau(a, b, 1.0).unwrap().item()
        + crate::tensor::kl_div_tau(b, a, 1.0).unwrap().item();
    assert!((interactive_loss(&single).unwrap().item() - want).abs() < 1e-14);
}

#[test]
fn interactive_loss_rejects_factor_mismatch() {
    let mut rng = crate::rng::stream(66, "il-err", 0);
    let mut outputs = cohort(&mut rng, &[1.0, 0.5], 4, 3);
    outputs
        .teammate_b
        .insert(Factor::new(0.3).unwrap(), rand_logits(&mut rng, 4, 3));
    assert!(matches!(
        interactive_loss(&outputs),
        Err(Error::Contract(_))
    ));
}

#[test]
fn guided_loss_reduces_to_leader_ce() {
    let mut rng = crate::rng::stream(67, "gl", 0);
    let mut outputs = cohort(&mut rng, &[1.0, 0.4], 3, 3);
    let full = Factor::new(1.0).unwrap();
    outputs.teammate_a.insert(full, outputs.leader.clone());
    outputs.teammate_b.insert(full, outputs.leader.clone());
    let ce = crate::tensor::cross_entropy(&outputs.leader, &outputs.labels)
        .unwrap()
        .item();
    assert!((guided_loss(&outputs).unwrap().item() - ce).abs() < 1e-14);

    // Saturated leader: CE ~ 0, loss ~ the two distillation terms.
    let mut outputs = cohort(&mut rng, &[1.0], 2, 3);
    let mut sat = vec![-1e3; 6];
    sat[outputs.labels[0]] = 1e3;
    sat[3 + outputs.labels[1]] = 1e3;
    outputs.leader = t(&[2, 3], &sat);
    let v = guided_loss(&outputs).unwrap().item();
    let kls = crate::tensor::kl_div_tau(
        &outputs.teammate_a[&full],
        &outputs.leader,
        1.0,
    )
    .unwrap()
    .item()
        + crate::tensor::kl_div_tau(&outputs.teammate_b[&full], &outputs.leader, 1.0)
            .unwrap()
            .item();
    assert!((v - kls).abs() < 1e-9);
}

#[test]
fn total_loss_components_sum_and_collapse() {
    let mut rng = crate::rng::stream(68, "tl", 0);
    let outputs = cohort(&mut rng, &[1.0, 0.5, 0.2], 4, 5);
    let loss = total_loss(&outputs).unwrap();
    let b = loss.breakdown();
    assert!((b.total - (b.self_a + b.self_b + b.interactive + b.guided)).abs() < 1e-12);
    assert!(b.self_a >= 0.0 && b.self_b >= 0.0 && b.interactive >= 0.0 && b.guided >= 0.0);

    // All nets emitting identical logits: only the three CE terms remain.
    let shared = rand_logits(&mut rng, 4, 5);
    let mut same = FactorOutputs::new();
    for f in [1.0, 0.5, 0.2] {
        same.insert(Factor::new(f).unwrap(), shared.clone());
    }
    let outputs = CohortOutputs {
        teammate_a: same.clone(),
        teammate_b: same,
        leader: shared.clone(),
        labels: vec![0, 1, 2, 3],
    };
    let loss = total_loss(&outputs).unwrap();
    let ce = crate::tensor::cross_entropy(&shared, &outputs.labels).unwrap().item();
    assert!((loss.breakdown().total - 3.0 * ce).abs() < 1e-12);
}

#[test]
fn teacher_role_gradients_are_exactly_zero() {
    // Isolate each KL term: the teacher-side leaf must receive no gradient.
    let tape = Tape::new();
    let mut rng = crate::rng::stream(69, "freeze", 0);
    let student = tape.leaf(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let teacher = tape.leaf(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let loss = scaled_subnet_loss(&teacher, &[(0.5, student.clone())], 1.0).unwrap();
    backward(&loss).unwrap();
    assert!(student.grad().is_some());
    assert!(teacher.grad().is_none(), "full-net teacher must be frozen");

    // Guided learning: the leader gets gradient only through its CE term.
    let tape = Tape::new();
    let leader = tape.leaf(vec![2, 2], vec![0.3, -0.1, 0.4, 0.2]);
    let a_full = tape.leaf(vec![2, 2], vec![0.1, 0.6, -0.2, 0.0]);
    let b_full = tape.leaf(vec![2, 2], vec![-0.4, 0.2, 0.3, 0.1]);
    let mut am = FactorOutputs::new();
    let mut bm = FactorOutputs::new();
    am.insert(Factor::new(1.0).unwrap(), a_full.clone());
    bm.insert(Factor::new(1.0).unwrap(), b_full.clone());
    let outputs = CohortOutputs {
        teammate_a: am,
        teammate_b: bm,
        leader: leader.clone(),
        labels: vec![0, 1],
    };
    // Drop the CE term: only the two distillation terms remain.
    let teacher = stopgrad(&outputs.leader);
    let kl_only = add(
        &kl_div_tau(&a_full, &teacher, 1.0).unwrap(),
        &kl_div_tau(&b_full, &teacher, 1.0).unwrap(),
    )
    .unwrap();
    backward(&kl_only).unwrap();
    assert!(leader.grad().is_none(), "leader must get no gradient from distillation");
    assert!(a_full.grad().is_some());
    assert!(b_full.grad().is_some());
}

#[test]
fn scaling_set_dedups_and_orders() {
    let set = ScalingSet::new(&[0.2, 1.0, 0.7, 0.7, 0.4]).unwrap();
    assert_eq!(set.all_factors(), &[1.0, 0.7, 0.4, 0.2]);
    assert_eq!(set.sub_factors(), &[0.7, 0.4, 0.2]);
    assert!(ScalingSet::new(&[0.0]).is_err());
    assert!(ScalingSet::new(&[1.2]).is_err());
}
