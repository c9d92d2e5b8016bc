//! Distillation losses.
//!
//! Besides classic teacher-student distillation, this module implements the
//! cooperative objective over two teammate networks and a leader:
//! self-learning (each teammate's sub-nets distill from its own full net,
//! weighted by the reciprocal of their scaling factor), interactive learning
//! (the teammates exchange soft labels at every factor), and guided learning
//! (both full-size teammates distill from a leader trained on labels only).
//! Every tensor used as a teacher is detached, so teacher-role gradients are
//! exactly zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{add, cross_entropy, kl_div_tau, stopgrad, Tensor};

/// Scaling factor usable as an ordered map key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Factor(f64);

impl Factor {
    pub fn new(s: f64) -> Result<Factor> {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "scaling factor must be in (0, 1], got {s}"
            )));
        }
        Ok(Factor(s))
    }

    pub fn get(&self) -> f64 {
        self.0
    }

    pub fn is_full(&self) -> bool {
        self.0 == 1.0
    }
}

impl Eq for Factor {}

impl Ord for Factor {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for Factor {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Logits per scaling factor for one network.
pub type FactorOutputs = BTreeMap<Factor, Tensor>;

/// The scaling factors of one training step: `sub` excludes 1.0, `all`
/// includes it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingSet {
    sub: Vec<f64>,
    all: Vec<f64>,
}

impl ScalingSet {
    /// Deduplicates, sorts descending, and ensures 1.0 is present.
    pub fn new(factors: &[f64]) -> Result<ScalingSet> {
        let mut all: Vec<f64> = Vec::new();
        for &f in factors.iter().chain(std::iter::once(&1.0)) {
            Factor::new(f)?;
            if !all.contains(&f) {
                all.push(f);
            }
        }
        all.sort_by(|a, b| b.total_cmp(a));
        let sub = all.iter().copied().filter(|&f| f != 1.0).collect();
        Ok(ScalingSet { sub, all })
    }

    /// Factors below 1.0, descending.
    pub fn sub_factors(&self) -> &[f64] {
        &self.sub
    }

    /// All factors including 1.0, descending.
    pub fn all_factors(&self) -> &[f64] {
        &self.all
    }
}

/// One training step's logits: both teammates at every factor (including
/// 1.0), the leader's full-size logits, and the true labels.
#[derive(Debug, Clone)]
pub struct CohortOutputs {
    pub teammate_a: FactorOutputs,
    pub teammate_b: FactorOutputs,
    pub leader: Tensor,
    pub labels: Vec<usize>,
}

impl CohortOutputs {
    pub fn validate(&self) -> Result<()> {
        let keys_a: Vec<Factor> = self.teammate_a.keys().copied().collect();
        let keys_b: Vec<Factor> = self.teammate_b.keys().copied().collect();
        if keys_a != keys_b {
            return Err(Error::Contract(format!(
                "teammate factor sets differ: {:?} vs {:?}",
                keys_a.iter().map(|f| f.get()).collect::<Vec<_>>(),
                keys_b.iter().map(|f| f.get()).collect::<Vec<_>>()
            )));
        }
        let full = Factor::new(1.0)?;
        if !self.teammate_a.contains_key(&full) {
            return Err(Error::Contract("factor 1.0 missing from cohort outputs".into()));
        }
        let shape = self.leader.shape().to_vec();
        for t in self.teammate_a.values().chain(self.teammate_b.values()) {
            if t.shape() != shape {
                return Err(Error::Contract(format!(
                    "cohort logit shapes differ: {:?} vs {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        if shape.first().copied() != Some(self.labels.len()) {
            return Err(Error::Contract(format!(
                "batch {} does not match {} labels",
                shape.first().copied().unwrap_or(0),
                self.labels.len()
            )));
        }
        Ok(())
    }

    fn full(&self, outputs: &FactorOutputs) -> Tensor {
        outputs
            .get(&Factor(1.0))
            .expect("validated cohort has factor 1.0")
            .clone()
    }
}

/// Classic distillation: `(1 - lambda) * CE(student, labels) +
/// lambda * kl(student, detach(teacher), tau)`.
pub fn kd_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    lambda: f64,
    tau: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParam(format!(
            "kd lambda must be in [0, 1], got {lambda}"
        )));
    }
    let ce = cross_entropy(student_logits, labels)?;
    let kl = kl_div_tau(student_logits, &stopgrad(teacher_logits), tau)?;
    add(&ce.scale(1.0 - lambda), &kl.scale(lambda))
}

/// Uniform self-distillation aggregate: `CE(full, labels) +
/// lambda * sum_i kl(sub_i, detach(full), tau)`.
pub fn simple_self_distill(
    full_logits: &Tensor,
    sub_logits: &[Tensor],
    labels: &[usize],
    lambda: f64,
    tau: f64,
) -> Result<Tensor> {
    let ce = cross_entropy(full_logits, labels)?;
    if sub_logits.is_empty() {
        return Ok(ce);
    }
    let teacher = stopgrad(full_logits);
    let mut acc: Option<Tensor> = None;
    for sub in sub_logits {
        let kl = kl_div_tau(sub, &teacher, tau)?;
        acc = Some(match acc {
            Some(a) => add(&a, &kl)?,
            None => kl,
        });
    }
    add(&ce, &acc.expect("nonempty").scale(lambda))
}

/// Scale-weighted sub-network distillation: each sub-net's divergence from
/// the detached full net is multiplied by `1 / s`, so shallower sub-nets
/// weigh more. The `tau^2` factor lives inside [`kl_div_tau`].
pub fn scaled_subnet_loss(
    full_logits: &Tensor,
    subs: &[(f64, Tensor)],
    tau: f64,
) -> Result<Tensor> {
    for (s, _) in subs {
        if !(*s > 0.0 && *s < 1.0) {
            return Err(Error::InvalidParam(format!(
                "sub-network scaling factor must be in (0, 1), got {s}"
            )));
        }
    }
    let teacher = stopgrad(full_logits);
    let mut acc = Tensor::scalar(0.0);
    for (s, logits) in subs {
        let kl = kl_div_tau(logits, &teacher, tau)?;
        acc = add(&acc, &kl.scale(1.0 / s))?;
    }
    Ok(acc)
}

/// Self-learning for one teammate: the full net trains on labels, every
/// sub-net distills from the detached full output with weight `1 / s`
/// (temperature 1).
pub fn self_learning_loss(
    full_logits: &Tensor,
    subs: &[(f64, Tensor)],
    labels: &[usize],
) -> Result<Tensor> {
    let ce = cross_entropy(full_logits, labels)?;
    if subs.is_empty() {
        return Ok(ce);
    }
    add(&ce, &scaled_subnet_loss(full_logits, subs, 1.0)?)
}

/// Interactive learning over two factor-output maps with matching keys: at
/// every factor (including 1.0) each side distills from the other's detached
/// output, temperature 1, both directions summed.
pub fn interactive_pair_loss(a: &FactorOutputs, b: &FactorOutputs) -> Result<Tensor> {
    let keys_a: Vec<Factor> = a.keys().copied().collect();
    let keys_b: Vec<Factor> = b.keys().copied().collect();
    if keys_a != keys_b {
        return Err(Error::Contract(format!(
            "teammate factor sets differ: {:?} vs {:?}",
            keys_a.iter().map(|f| f.get()).collect::<Vec<_>>(),
            keys_b.iter().map(|f| f.get()).collect::<Vec<_>>()
        )));
    }
    let mut acc = Tensor::scalar(0.0);
    for (factor, a_logits) in a {
        let b_logits = &b[factor];
        let a_learns = kl_div_tau(a_logits, &stopgrad(b_logits), 1.0)?;
        let b_learns = kl_div_tau(b_logits, &stopgrad(a_logits), 1.0)?;
        acc = add(&acc, &add(&a_learns, &b_learns)?)?;
    }
    Ok(acc)
}

/// Interactive learning for a full cohort; symmetric under swapping the
/// teammates.
pub fn interactive_loss(outputs: &CohortOutputs) -> Result<Tensor> {
    outputs.validate()?;
    interactive_pair_loss(&outputs.teammate_a, &outputs.teammate_b)
}

/// Guided learning: the leader trains on labels only; both teammates'
/// full-size outputs distill from the detached leader, temperature 1.
pub fn guided_loss(outputs: &CohortOutputs) -> Result<Tensor> {
    outputs.validate()?;
    let ce = cross_entropy(&outputs.leader, &outputs.labels)?;
    let teacher = stopgrad(&outputs.leader);
    let a = kl_div_tau(&outputs.full(&outputs.teammate_a), &teacher, 1.0)?;
    let b = kl_div_tau(&outputs.full(&outputs.teammate_b), &teacher, 1.0)?;
    add(&ce, &add(&a, &b)?)
}

/// The cooperative objective and its decomposition. Components are scalar
/// tensors on the step's tape; `total` is their sum.
#[derive(Debug, Clone)]
pub struct CoopLoss {
    pub self_a: Tensor,
    pub self_b: Tensor,
    pub interactive: Tensor,
    pub guided: Tensor,
    pub total: Tensor,
}

/// Plain-number view of a loss decomposition, as logged per step and epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub self_a: f64,
    pub self_b: f64,
    pub interactive: f64,
    pub guided: f64,
    pub total: f64,
    pub kd_lambda: f64,
    pub kd_tau: f64,
}

impl CoopLoss {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            self_a: self.self_a.item(),
            self_b: self.self_b.item(),
            interactive: self.interactive.item(),
            guided: self.guided.item(),
            total: self.total.item(),
            // Unit weights and temperature inside the cooperative losses.
            kd_lambda: 1.0,
            kd_tau: 1.0,
        }
    }
}

fn subs_of(outputs: &FactorOutputs) -> Vec<(f64, Tensor)> {
    outputs
        .iter()
        .filter(|(f, _)| !f.is_full())
        .map(|(f, t)| (f.get(), t.clone()))
        .collect()
}

/// The full cooperative loss: both teammates' self-learning, interactive
/// learning, and guided learning, all at unit weights.
pub fn total_loss(outputs: &CohortOutputs) -> Result<CoopLoss> {
    outputs.validate()?;
    let self_a = self_learning_loss(
        &outputs.full(&outputs.teammate_a),
        &subs_of(&outputs.teammate_a),
        &outputs.labels,
    )?;
    let self_b = self_learning_loss(
        &outputs.full(&outputs.teammate_b),
        &subs_of(&outputs.teammate_b),
        &outputs.labels,
    )?;
    let interactive = interactive_loss(outputs)?;
    let guided = guided_loss(outputs)?;
    let total = add(&add(&add(&self_a, &self_b)?, &interactive)?, &guided)?;
    Ok(CoopLoss {
        self_a,
        self_b,
        interactive,
        guided,
        total,
    })
}

#[cfg(test)]
mod tests;
