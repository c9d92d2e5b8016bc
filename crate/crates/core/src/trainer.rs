//! The cooperative training loop.
//!
//! Each step forwards both teammates at every sampled scaling factor (and the
//! leader at full depth), combines the self-, interactive-, and guided-
//! learning losses, backpropagates once, and applies one SGD step per
//! network. Randomness comes from purpose-scoped streams derived from
//! `(seed, purpose, epoch)`, so resuming at an epoch boundary reproduces the
//! trajectory of an uninterrupted run exactly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::config::{RunConfig, SamplerKind, SubnetMechanism, TrainSettings, TrainVariant};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    self, interactive_pair_loss, CohortOutputs, CoopLoss, Factor, FactorOutputs, LossBreakdown,
    ScalingSet,
};
use crate::mask::{self, BinaryMask, GumbelConfig, MaskLayout, MaskParams};
use crate::metrics::{factor_key, AccuracyMap, MetricsRecord, MetricsWriter, METRICS_SCHEMA};
use crate::net::{derive_subnet, AdaptiveNet, Mode};
use crate::rng;
use crate::tensor::{add, backward, cross_entropy, sgd_update, SgdConfig, Tape, Tensor};

/// Learning rate at an epoch: warmup on epoch 0, then the piecewise schedule
/// with boundary-inclusive switch points.
pub fn lr_at_epoch(train: &TrainSettings, epoch: usize) -> f64 {
    if epoch == 0 {
        return train.warmup_lr;
    }
    let [b0, b1, b2] = train.boundaries;
    if epoch < b0 {
        train.rates[0]
    } else if epoch < b1 {
        train.rates[1]
    } else if epoch < b2 {
        train.rates[2]
    } else {
        train.rates[3]
    }
}

/// Per-epoch scaling factor source.
#[derive(Debug, Clone)]
pub enum ScalingSampler {
    Static { factors: Vec<f64> },
    Random { endpoints: [f64; 2], pool: Vec<f64>, draws: usize },
}

impl ScalingSampler {
    pub fn from_config(cfg: &crate::config::SamplerConfig) -> Result<ScalingSampler> {
        cfg.validate()?;
        Ok(match cfg.kind {
            SamplerKind::Static => ScalingSampler::Static {
                factors: cfg.static_factors.clone(),
            },
            SamplerKind::Random => ScalingSampler::Random {
                endpoints: cfg.endpoints,
                pool: cfg.pool.clone(),
                draws: cfg.draws,
            },
        })
    }

    /// The factors for one epoch. Random sampling draws with replacement;
    /// duplicates collapse into the set.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<ScalingSet> {
        match self {
            ScalingSampler::Static { factors } => ScalingSet::new(factors),
            ScalingSampler::Random {
                endpoints,
                pool,
                draws,
            } => {
                let mut factors = endpoints.to_vec();
                for _ in 0..*draws {
                    factors.push(pool[rng.gen_range(0..pool.len())]);
                }
                ScalingSet::new(&factors)
            }
        }
    }
}

/// The three cooperating networks plus per-teammate mask scores (present
/// only under the mask mechanism). Variants that need fewer networks leave
/// the rest unbuilt.
pub struct Cohort {
    pub teammate_a: AdaptiveNet,
    pub teammate_b: Option<AdaptiveNet>,
    pub leader: Option<AdaptiveNet>,
    pub mask_a: Option<MaskParams>,
    pub mask_b: Option<MaskParams>,
    layout: MaskLayout,
}

impl Cohort {
    pub fn new(config: &RunConfig) -> Result<Cohort> {
        config.validate()?;
        let seed = config.train.seed;
        let net_seed = |role: &str| rng::stream(seed, role, 0).gen::<u64>();
        let variant = config.train.variant;
        let teammate_a = AdaptiveNet::new(config.arch.clone(), net_seed("init-teammate-a"))?;
        let teammate_b = match variant {
            TrainVariant::Cooperative | TrainVariant::Mutual => Some(AdaptiveNet::new(
                config.arch.clone(),
                net_seed("init-teammate-b"),
            )?),
            _ => None,
        };
        let leader = match variant {
            TrainVariant::Cooperative => Some(AdaptiveNet::new(
                config.arch.clone(),
                net_seed("init-leader"),
            )?),
            _ => None,
        };
        let masked = config.train.mechanism == SubnetMechanism::Mask;
        let total = config.arch.total_blocks();
        Ok(Cohort {
            mask_a: masked.then(|| MaskParams::new(total)),
            mask_b: (masked && teammate_b.is_some()).then(|| MaskParams::new(total)),
            layout: MaskLayout::for_arch(&config.arch),
            teammate_a,
            teammate_b,
            leader,
        })
    }

    pub fn mask_layout(&self) -> &MaskLayout {
        &self.layout
    }

    fn nets(&self) -> Vec<(&'static str, &AdaptiveNet)> {
        let mut v = vec![("teammate_a", &self.teammate_a)];
        if let Some(b) = &self.teammate_b {
            v.push(("teammate_b", b));
        }
        if let Some(l) = &self.leader {
            v.push(("leader", l));
        }
        v
    }

    /// Full state for checkpointing: parameters, momentum buffers, norm
    /// statistics, and mask scores, in a fixed order.
    pub fn state(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (prefix, net) in self.nets() {
            net.visit_params(&mut |p| {
                out.push(NamedTensor {
                    name: format!("{prefix}/{}", p.name()),
                    shape: p.shape().to_vec(),
                    data: p.value().to_vec(),
                });
                out.push(NamedTensor {
                    name: format!("momentum:{prefix}/{}", p.name()),
                    shape: p.shape().to_vec(),
                    data: p.momentum().to_vec(),
                });
            });
            net.visit_norm_stats(&mut |name, stats| {
                let stats = stats.borrow();
                out.push(NamedTensor {
                    name: format!("stats:{prefix}/{name}/mean"),
                    shape: vec![stats.mean.len()],
                    data: stats.mean.clone(),
                });
                out.push(NamedTensor {
                    name: format!("stats:{prefix}/{name}/var"),
                    shape: vec![stats.var.len()],
                    data: stats.var.clone(),
                });
            });
        }
        for (tag, m) in [("mask_a", &self.mask_a), ("mask_b", &self.mask_b)] {
            if let Some(m) = m {
                out.push(NamedTensor {
                    name: format!("{tag}/scores"),
                    shape: m.scores.shape().to_vec(),
                    data: m.scores.value().to_vec(),
                });
                out.push(NamedTensor {
                    name: format!("momentum:{tag}/scores"),
                    shape: m.scores.shape().to_vec(),
                    data: m.scores.momentum().to_vec(),
                });
            }
        }
        out
    }

    /// Restore from a checkpoint's tensors; every entry must match a slot.
    pub fn restore(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut missing: Vec<String> = Vec::new();
        let mut used = 0usize;

        let mut restore_net = |prefix: &str, net: &mut AdaptiveNet| {
            net.visit_params_mut(&mut |p| {
                let key = format!("{prefix}/{}", p.name());
                match lookup.get(key.as_str()) {
                    Some(t) if t.data.len() == p.len() => {
                        p.set_value(t.data.clone());
                        used += 1;
                    }
                    _ => missing.push(key),
                }
                let mkey = format!("momentum:{prefix}/{}", p.name());
                match lookup.get(mkey.as_str()) {
                    Some(t) if t.data.len() == p.len() => {
                        p.set_momentum(t.data.clone());
                        used += 1;
                    }
                    _ => missing.push(mkey),
                }
            });
            net.visit_norm_stats(&mut |name, stats| {
                let mut stats = stats.borrow_mut();
                let mut restore_buf = |field: &str, buf: &mut Vec<f64>| {
                    let key = format!("stats:{prefix}/{name}/{field}");
                    match lookup.get(key.as_str()) {
                        Some(t) if t.data.len() == buf.len() => {
                            buf.copy_from_slice(&t.data);
                            used += 1;
                        }
                        _ => missing.push(key),
                    }
                };
                restore_buf("mean", &mut stats.mean);
                restore_buf("var", &mut stats.var);
            });
        };

        restore_net("teammate_a", &mut self.teammate_a);
        if let Some(b) = &mut self.teammate_b {
            restore_net("teammate_b", b);
        }
        if let Some(l) = &mut self.leader {
            restore_net("leader", l);
        }
        for (tag, m) in [("mask_a", &mut self.mask_a), ("mask_b", &mut self.mask_b)] {
            if let Some(m) = m {
                for (key, is_momentum) in [
                    (format!("{tag}/scores"), false),
                    (format!("momentum:{tag}/scores"), true),
                ] {
                    match lookup.get(key.as_str()) {
                        Some(t) if t.data.len() == m.scores.len() => {
                            if is_momentum {
                                m.scores.set_momentum(t.data.clone());
                            } else {
                                m.scores.set_value(t.data.clone());
                            }
                            used += 1;
                        }
                        _ => missing.push(key),
                    }
                }
            }
        }

        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "missing or mismatched tensors: {}",
                missing.join(", ")
            )));
        }
        if used != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, cohort consumed {used}",
                tensors.len()
            )));
        }
        Ok(())
    }
}

/// One network's forwards at every factor of the step.
#[allow(clippy::too_many_arguments)]
fn factor_forwards(
    net: &AdaptiveNet,
    mask_params: Option<&MaskParams>,
    layout: &MaskLayout,
    mechanism: SubnetMechanism,
    gumbel: &GumbelConfig,
    tape: &Tape,
    x: &Tensor,
    factors: &ScalingSet,
    gumbel_rng: &mut ChaCha8Rng,
) -> Result<FactorOutputs> {
    let mut out = FactorOutputs::new();
    // Descending order: the full-depth pass runs first and is the only one
    // that updates normalization statistics.
    for &s in factors.all_factors() {
        let spec = derive_subnet(&net.config, s)?;
        let logits = if s == 1.0 {
            net.forward(Some(tape), x, &spec, Mode::Train { update_stats: true })?
        } else {
            match mechanism {
                SubnetMechanism::Truncation => {
                    net.forward(Some(tape), x, &spec, Mode::Train { update_stats: false })?
                }
                SubnetMechanism::Mask => {
                    let params = mask_params
                        .ok_or_else(|| Error::Contract("mask mechanism without mask scores".into()))?;
                    let k = spec.total_active();
                    let mask =
                        mask::draw_mask(Some(tape), layout, params, gumbel, k, Some(gumbel_rng))?;
                    net.forward_masked(Some(tape), x, &mask, Mode::Train { update_stats: false })?
                }
            }
        };
        out.insert(Factor::new(s)?, logits);
    }
    Ok(out)
}

fn subs_of(outputs: &FactorOutputs) -> Vec<(f64, Tensor)> {
    outputs
        .iter()
        .filter(|(f, _)| !f.is_full())
        .map(|(f, t)| (f.get(), t.clone()))
        .collect()
}

fn full_of(outputs: &FactorOutputs) -> Tensor {
    outputs[&Factor::new(1.0).expect("valid")].clone()
}

/// One optimization step over one batch. Returns the loss decomposition;
/// aborts with a diagnostic dump if the total is not finite.
pub fn train_step(
    cohort: &mut Cohort,
    config: &RunConfig,
    x: &Tensor,
    labels: &[usize],
    factors: &ScalingSet,
    lr: f64,
    gumbel_rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let train = &config.train;
    let gumbel = GumbelConfig {
        temperature: config.mask.temperature,
    };

    // Plain-CE training touches only the full depth.
    let full_only = ScalingSet::new(&[1.0])?;
    let factors_a = match train.variant {
        TrainVariant::CeOnly => &full_only,
        _ => factors,
    };
    let outputs_a = factor_forwards(
        &cohort.teammate_a,
        cohort.mask_a.as_ref(),
        &cohort.layout,
        train.mechanism,
        &gumbel,
        &tape,
        x,
        factors_a,
        gumbel_rng,
    )?;

    let (loss, breakdown);
    match train.variant {
        TrainVariant::Cooperative => {
            let outputs_b = factor_forwards(
                cohort.teammate_b.as_ref().expect("cooperative cohort"),
                cohort.mask_b.as_ref(),
                &cohort.layout,
                train.mechanism,
                &gumbel,
                &tape,
                x,
                factors,
                gumbel_rng,
            )?;
            let leader = cohort.leader.as_ref().expect("cooperative cohort");
            let full = derive_subnet(&leader.config, 1.0)?;
            let leader_logits =
                leader.forward(Some(&tape), x, &full, Mode::Train { update_stats: true })?;
            let outputs = CohortOutputs {
                teammate_a: outputs_a,
                teammate_b: outputs_b,
                leader: leader_logits,
                labels: labels.to_vec(),
            };
            let coop: CoopLoss = losses::total_loss(&outputs)?;
            breakdown = coop.breakdown();
            loss = coop.total;
        }
        TrainVariant::Mutual => {
            let outputs_b = factor_forwards(
                cohort.teammate_b.as_ref().expect("mutual cohort"),
                cohort.mask_b.as_ref(),
                &cohort.layout,
                train.mechanism,
                &gumbel,
                &tape,
                x,
                factors,
                gumbel_rng,
            )?;
            let self_a =
                losses::self_learning_loss(&full_of(&outputs_a), &subs_of(&outputs_a), labels)?;
            let self_b =
                losses::self_learning_loss(&full_of(&outputs_b), &subs_of(&outputs_b), labels)?;
            let interactive = interactive_pair_loss(&outputs_a, &outputs_b)?;
            let total = add(&add(&self_a, &self_b)?, &interactive)?;
            breakdown = LossBreakdown {
                self_a: self_a.item(),
                self_b: self_b.item(),
                interactive: interactive.item(),
                guided: 0.0,
                total: total.item(),
                kd_lambda: 1.0,
                kd_tau: 1.0,
            };
            loss = total;
        }
        TrainVariant::SelfDistill => {
            let self_a =
                losses::self_learning_loss(&full_of(&outputs_a), &subs_of(&outputs_a), labels)?;
            breakdown = LossBreakdown {
                self_a: self_a.item(),
                self_b: 0.0,
                interactive: 0.0,
                guided: 0.0,
                total: self_a.item(),
                kd_lambda: 1.0,
                kd_tau: 1.0,
            };
            loss = self_a;
        }
        TrainVariant::CeOnly => {
            // Plain single-model training: cross-entropy on the full depth
            // only. Sub-nets share the weights but get no training signal,
            // which is what evaluating a conventionally trained net at
            // truncated depths amounts to.
            let total = cross_entropy(&full_of(&outputs_a), labels)?;
            breakdown = LossBreakdown {
                self_a: total.item(),
                self_b: 0.0,
                interactive: 0.0,
                guided: 0.0,
                total: total.item(),
                kd_lambda: 1.0,
                kd_tau: 1.0,
            };
            loss = total;
        }
    }

    // Optional score-sharpening penalty under the mask mechanism.
    let mut loss = loss;
    if train.mechanism == SubnetMechanism::Mask && config.mask.entropy_reg_weight > 0.0 {
        for m in [&cohort.mask_a, &cohort.mask_b].into_iter().flatten() {
            let h = mask::selection_entropy(Some(&tape), &cohort.layout, m)?;
            loss = add(&loss, &h.scale(config.mask.entropy_reg_weight))?;
        }
    }

    if !loss.item().is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "self_a={} self_b={} interactive={} guided={} total={}",
            breakdown.self_a,
            breakdown.self_b,
            breakdown.interactive,
            breakdown.guided,
            breakdown.total
        )));
    }

    backward(&loss)?;
    let grads = tape.param_grads();
    let sgd = SgdConfig {
        lr,
        momentum: train.momentum,
        weight_decay: train.weight_decay,
    };
    let apply = |net: &mut AdaptiveNet| {
        net.visit_params_mut(&mut |p| sgd_update([p], &grads, &sgd));
    };
    apply(&mut cohort.teammate_a);
    if let Some(b) = &mut cohort.teammate_b {
        apply(b);
    }
    if let Some(l) = &mut cohort.leader {
        apply(l);
    }
    for m in [&mut cohort.mask_a, &mut cohort.mask_b].into_iter().flatten() {
        sgd_update([&mut m.scores], &grads, &sgd);
    }
    Ok(breakdown)
}

/// Argmax accuracy of one network at one factor under eval-mode forwards.
/// The mask mechanism evaluates with the deterministic (noise-free) top-k
/// mask for that factor's budget.
pub fn evaluate(
    net: &AdaptiveNet,
    mask_params: Option<&MaskParams>,
    layout: &MaskLayout,
    mechanism: SubnetMechanism,
    gumbel: &GumbelConfig,
    s: f64,
    data: &Dataset,
) -> Result<f64> {
    let spec = derive_subnet(&net.config, s)?;
    let mask: Option<BinaryMask> = match (mechanism, s) {
        (SubnetMechanism::Mask, s) if s < 1.0 => {
            let params = mask_params
                .ok_or_else(|| Error::Contract("mask mechanism without mask scores".into()))?;
            Some(mask::draw_mask(
                None,
                layout,
                params,
                gumbel,
                spec.total_active(),
                None,
            )?)
        }
        _ => None,
    };

    let chunk = 256usize;
    let mut correct = 0usize;
    let rows: Vec<usize> = (0..data.len()).collect();
    for batch in rows.chunks(chunk) {
        let (x, labels) = data.batch(batch);
        let logits = match &mask {
            Some(m) => net.forward_masked(None, &x, m, Mode::Eval)?,
            None => net.forward(None, &x, &spec, Mode::Eval)?,
        };
        let k = net.config.num_classes;
        for (r, &label) in labels.iter().enumerate() {
            let row = &logits.data()[r * k..(r + 1) * k];
            let pred = (0..k)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .expect("nonempty row");
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Where training artifacts land.
pub struct RunPaths {
    pub metrics: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

impl RunPaths {
    pub fn none() -> RunPaths {
        RunPaths {
            metrics: None,
            checkpoints: None,
        }
    }

    pub fn in_dir(dir: &Path) -> RunPaths {
        RunPaths {
            metrics: Some(dir.join("metrics.jsonl")),
            checkpoints: Some(dir.to_path_buf()),
        }
    }
}

/// Train from `start_epoch` (0 for a fresh run, `checkpoint.epoch` when
/// resuming) through `config.train.epochs`. Returns the per-epoch records.
pub fn train(
    cohort: &mut Cohort,
    data: &Dataset,
    config: &RunConfig,
    start_epoch: usize,
    paths: &RunPaths,
) -> Result<Vec<MetricsRecord>> {
    train_observed(cohort, data, config, start_epoch, paths, &mut |_| {})
}

/// [`train`] with a per-epoch observer (used by the CLI for progress lines).
pub fn train_observed(
    cohort: &mut Cohort,
    data: &Dataset,
    config: &RunConfig,
    start_epoch: usize,
    paths: &RunPaths,
    observer: &mut dyn FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>> {
    config.validate()?;
    data.validate()?;
    let sampler = ScalingSampler::from_config(&config.sampler)?;
    let train_cfg = &config.train;
    let seed = train_cfg.seed;
    let gumbel = GumbelConfig {
        temperature: config.mask.temperature,
    };

    let mut writer = match &paths.metrics {
        Some(p) => Some(MetricsWriter::append(p)?),
        None => None,
    };
    let mut history = Vec::with_capacity(train_cfg.epochs.saturating_sub(start_epoch));

    for epoch in start_epoch..train_cfg.epochs {
        let epoch_start = Instant::now();
        let lr = lr_at_epoch(train_cfg, epoch);
        let mut factor_rng = rng::stream(seed, "factors", epoch as u64);
        let mut gumbel_rng = rng::stream(seed, "gumbel", epoch as u64);
        let mut shuffle_rng = rng::stream(seed, "shuffle", epoch as u64);
        let factors = sampler.sample(&mut factor_rng)?;

        let order = rng::permutation(data.len(), &mut shuffle_rng);
        let mut sums = [0.0f64; 5];
        let mut steps = 0usize;
        for batch in order.chunks(train_cfg.batch_size) {
            if batch.len() < 2 {
                // Batch norm needs at least two samples; drop the remainder.
                continue;
            }
            let (x, labels) = data.batch(batch);
            let b = train_step(cohort, config, &x, &labels, &factors, lr, &mut gumbel_rng)?;
            sums[0] += b.self_a;
            sums[1] += b.self_b;
            sums[2] += b.interactive;
            sums[3] += b.guided;
            sums[4] += b.total;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let loss = LossBreakdown {
            self_a: sums[0] / n,
            self_b: sums[1] / n,
            interactive: sums[2] / n,
            guided: sums[3] / n,
            total: sums[4] / n,
            kd_lambda: 1.0,
            kd_tau: 1.0,
        };

        let mut acc = AccuracyMap::new();
        for &f in &train_cfg.eval_factors {
            let a = evaluate(
                &cohort.teammate_a,
                cohort.mask_a.as_ref(),
                &cohort.layout,
                train_cfg.mechanism,
                &gumbel,
                f,
                data,
            )?;
            acc.entry("teammate_a".into())
                .or_default()
                .insert(factor_key(f), a);
            if let Some(bnet) = &cohort.teammate_b {
                let b = evaluate(
                    bnet,
                    cohort.mask_b.as_ref(),
                    &cohort.layout,
                    train_cfg.mechanism,
                    &gumbel,
                    f,
                    data,
                )?;
                acc.entry("teammate_b".into())
                    .or_default()
                    .insert(factor_key(f), b);
            }
        }
        if let Some(leader) = &cohort.leader {
            let l = evaluate(
                leader,
                None,
                &cohort.layout,
                SubnetMechanism::Truncation,
                &gumbel,
                1.0,
                data,
            )?;
            acc.entry("leader".into())
                .or_default()
                .insert(factor_key(1.0), l);
        }

        let record = MetricsRecord {
            schema: METRICS_SCHEMA,
            epoch,
            lr,
            loss,
            acc,
            wall_time_ms: epoch_start.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(w) = &mut writer {
            w.write(&record)?;
        }
        observer(&record);
        history.push(record);

        if let Some(dir) = &paths.checkpoints {
            let completed = epoch + 1;
            let periodic = train_cfg.checkpoint_every > 0
                && completed % train_cfg.checkpoint_every == 0;
            if periodic || completed == train_cfg.epochs {
                let name = if completed == train_cfg.epochs {
                    "final.ckpt".to_string()
                } else {
                    format!("epoch_{completed:04}.ckpt")
                };
                let ckpt = Checkpoint::new(completed, config.clone(), cohort.state());
                ckpt.save(&dir.join(name))?;
            }
        }
    }
    Ok(history)
}

/// Restore a cohort from a checkpoint after verifying the config hash.
/// Returns the epoch to resume from.
pub fn resume(cohort: &mut Cohort, config: &RunConfig, ckpt: &Checkpoint) -> Result<usize> {
    ckpt.verify_config(config)?;
    cohort.restore(&ckpt.tensors)?;
    Ok(ckpt.epoch)
}
