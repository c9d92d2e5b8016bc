//! Depth-parameterized residual networks.
//!
//! A network is a stem, a sequence of stages of repeated residual blocks, and
//! a classification head. All sub-networks share the same parameters: a
//! sub-network of scaling factor `s` executes a per-stage prefix of blocks, so
//! a deeper sub-net is always a shallower one plus extra blocks. Norm layers
//! (and their running statistics) are likewise shared across every
//! sub-network — a known accuracy trade-off of weight sharing, accepted here
//! in exchange for a single parameter set.

use std::cell::RefCell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::mask::BinaryMask;
use crate::rng;
use crate::tensor::{
    add, batch_norm, conv2d, global_avg_pool, linear, mask_residual, BnMode, Param, RunningStats,
    Tape, Tensor,
};

/// Forward mode; train mode optionally folds batch statistics into the
/// running estimates.
pub type Mode = BnMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct StageConfig {
    pub repeats: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StemKind {
    /// `in_channels -> channels[0]` convolution plus norm and relu.
    Conv {
        in_channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// `in_features -> channels[0]` dense layer plus norm and relu.
    Linear { in_features: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BlockKind {
    /// Two 3x3 convolutions with norms.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand; block output is `expansion * channels`.
    Bottleneck { expansion: usize },
    /// Two dense layers with norms, for vector inputs.
    Mlp,
}

/// How `s * repeats` maps to a per-stage active block count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoundingRule {
    /// `clamp(ceil(s * r), 1, r)` per stage.
    Ceil,
    /// Boundary-pinned floor: every stage entry block is always active, the
    /// final block of the final stage is always active, and `floor(s * m)` of
    /// each stage's `m` remaining blocks activate on top. Calibrated so the
    /// bottleneck-152 preset reproduces its published per-factor parameter
    /// counts; the default everywhere.
    #[default]
    Calibrated,
}

const ROUND_NUDGE: f64 = 1e-9;

impl RoundingRule {
    /// Active block count for one stage.
    pub fn active_count(&self, s: f64, stage_idx: usize, num_stages: usize, repeats: usize) -> usize {
        match self {
            RoundingRule::Ceil => {
                let raw = (s * repeats as f64 - ROUND_NUDGE).ceil() as usize;
                raw.clamp(1, repeats)
            }
            RoundingRule::Calibrated => {
                let last = stage_idx + 1 == num_stages;
                let pinned = if last && repeats >= 2 { 2 } else { 1 };
                let maskable = repeats - pinned;
                let extra = (s * maskable as f64 + ROUND_NUDGE).floor() as usize;
                (pinned + extra).min(repeats)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub stem: StemKind,
    pub block: BlockKind,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    #[serde(default)]
    pub rounding: RoundingRule,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config {
                key: "arch.stages".into(),
                message: "at least one stage is required".into(),
            });
        }
        for (j, st) in self.stages.iter().enumerate() {
            if st.repeats < 1 || st.channels < 1 {
                return Err(Error::Config {
                    key: format!("arch.stages[{j}]"),
                    message: "repeats and channels must be >= 1".into(),
                });
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config {
                key: "arch.num_classes".into(),
                message: "need at least two classes".into(),
            });
        }
        if matches!(self.block, BlockKind::Bottleneck { expansion } if expansion < 1) {
            return Err(Error::Config {
                key: "arch.block.expansion".into(),
                message: "expansion must be >= 1".into(),
            });
        }
        if matches!((&self.stem, &self.block), (StemKind::Linear { .. }, BlockKind::Basic))
            || matches!(
                (&self.stem, &self.block),
                (StemKind::Linear { .. }, BlockKind::Bottleneck { .. })
            )
            || matches!((&self.stem, &self.block), (StemKind::Conv { .. }, BlockKind::Mlp))
        {
            return Err(Error::Config {
                key: "arch.block".into(),
                message: "conv blocks need a conv stem, mlp blocks a linear stem".into(),
            });
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.repeats).sum()
    }

    /// Flat block index of `(stage, position)`.
    pub fn block_index(&self, stage: usize, position: usize) -> usize {
        self.stages[..stage].iter().map(|s| s.repeats).sum::<usize>() + position
    }

    /// Flat indices of stage-entry blocks (always active).
    pub fn entry_block_indices(&self) -> Vec<usize> {
        (0..self.stages.len()).map(|j| self.block_index(j, 0)).collect()
    }

    /// Output width of a block in stage `j`.
    fn stage_out(&self, j: usize) -> usize {
        match self.block {
            BlockKind::Bottleneck { expansion } => self.stages[j].channels * expansion,
            _ => self.stages[j].channels,
        }
    }

    /// Feature width entering the head.
    pub fn head_in(&self) -> usize {
        self.stage_out(self.stages.len() - 1)
    }
}

/// A scaling factor resolved to per-stage active block counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubnetSpec {
    pub scaling_factor: f64,
    pub active_counts: Vec<usize>,
}

impl SubnetSpec {
    pub fn total_active(&self) -> usize {
        self.active_counts.iter().sum()
    }
}

/// Resolve a scaling factor into per-stage prefix counts under the config's
/// rounding rule. Counts are nested: `s1 <= s2` implies elementwise
/// `counts(s1) <= counts(s2)`, and `s = 1` activates every block.
pub fn derive_subnet(config: &ArchConfig, s: f64) -> Result<SubnetSpec> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "scaling factor must be in (0, 1], got {s}"
        )));
    }
    let n = config.stages.len();
    let active_counts = config
        .stages
        .iter()
        .enumerate()
        .map(|(j, st)| config.rounding.active_count(s, j, n, st.repeats))
        .collect();
    Ok(SubnetSpec {
        scaling_factor: s,
        active_counts,
    })
}

// ---------------------------------------------------------------------------
// Layers

#[derive(Debug)]
struct Conv {
    w: Param,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(name: &str, in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Conv {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let w: Vec<f64> = (0..out_c * in_c * k * k)
            .map(|_| rng::normal(rng) * std)
            .collect();
        Conv {
            w: Param::new(format!("{name}/weight"), vec![out_c, in_c, k, k], w),
            stride,
            padding: k / 2,
        }
    }

    fn forward(&self, tape: Option<&Tape>, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.w.tensor(tape), self.stride, self.padding)
    }
}

#[derive(Debug)]
struct Dense {
    w: Param,
    b: Param,
}

impl Dense {
    fn new(name: &str, in_f: usize, out_f: usize, rng: &mut impl Rng) -> Dense {
        let std = (2.0 / in_f as f64).sqrt();
        let w: Vec<f64> = (0..in_f * out_f).map(|_| rng::normal(rng) * std).collect();
        Dense {
            w: Param::new(format!("{name}/weight"), vec![in_f, out_f], w),
            b: Param::new(format!("{name}/bias"), vec![out_f], vec![0.0; out_f]),
        }
    }

    fn forward(&self, tape: Option<&Tape>, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.w.tensor(tape), &self.b.tensor(tape))
    }
}

#[derive(Debug)]
struct Norm {
    gamma: Param,
    beta: Param,
    name: String,
    stats: RefCell<RunningStats>,
}

impl Norm {
    fn new(name: &str, channels: usize) -> Norm {
        Norm::with_scale(name, channels, 1.0)
    }

    /// The closing norm of each residual branch starts at scale 0, so every
    /// block is the identity at initialization and all sub-network depths
    /// emit identical logits; the distillation terms then grow from exactly
    /// zero as the blocks differentiate.
    fn zeroed(name: &str, channels: usize) -> Norm {
        Norm::with_scale(name, channels, 0.0)
    }

    fn with_scale(name: &str, channels: usize, scale: f64) -> Norm {
        Norm {
            gamma: Param::new(format!("{name}/gamma"), vec![channels], vec![scale; channels]),
            beta: Param::new(format!("{name}/beta"), vec![channels], vec![0.0; channels]),
            name: name.to_string(),
            stats: RefCell::new(RunningStats::new(channels)),
        }
    }

    fn forward(&self, tape: Option<&Tape>, x: &Tensor, mode: Mode) -> Result<Tensor> {
        batch_norm(
            x,
            &self.gamma.tensor(tape),
            &self.beta.tensor(tape),
            &mut self.stats.borrow_mut(),
            mode,
        )
    }
}

#[derive(Debug)]
enum Block {
    Basic {
        conv1: Conv,
        bn1: Norm,
        conv2: Conv,
        bn2: Norm,
        proj: Option<(Conv, Norm)>,
    },
    Bottleneck {
        conv1: Conv,
        bn1: Norm,
        conv2: Conv,
        bn2: Norm,
        conv3: Conv,
        bn3: Norm,
        proj: Option<(Conv, Norm)>,
    },
    Mlp {
        fc1: Dense,
        n1: Norm,
        fc2: Dense,
        n2: Norm,
        proj: Option<Dense>,
    },
}

impl Block {
    /// The residual branch `F(x)`.
    fn branch(&self, tape: Option<&Tape>, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Block::Basic {
                conv1,
                bn1,
                conv2,
                bn2,
                ..
            } => {
                let h = bn1.forward(tape, &conv1.forward(tape, x)?, mode)?.relu();
                bn2.forward(tape, &conv2.forward(tape, &h)?, mode)
            }
            Block::Bottleneck {
                conv1,
                bn1,
                conv2,
                bn2,
                conv3,
                bn3,
                ..
            } => {
                let h = bn1.forward(tape, &conv1.forward(tape, x)?, mode)?.relu();
                let h = bn2.forward(tape, &conv2.forward(tape, &h)?, mode)?.relu();
                bn3.forward(tape, &conv3.forward(tape, &h)?, mode)
            }
            Block::Mlp { fc1, n1, fc2, n2, .. } => {
                let h = n1.forward(tape, &fc1.forward(tape, x)?, mode)?.relu();
                n2.forward(tape, &fc2.forward(tape, &h)?, mode)
            }
        }
    }

    /// The skip path: identity, or the projection where shapes change.
    fn skip(&self, tape: Option<&Tape>, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Block::Basic { proj, .. } | Block::Bottleneck { proj, .. } => match proj {
                Some((conv, bn)) => bn.forward(tape, &conv.forward(tape, x)?, mode),
                None => Ok(x.clone()),
            },
            Block::Mlp { proj, .. } => match proj {
                Some(fc) => fc.forward(tape, x),
                None => Ok(x.clone()),
            },
        }
    }

    fn has_identity_skip(&self) -> bool {
        match self {
            Block::Basic { proj, .. } | Block::Bottleneck { proj, .. } => proj.is_none(),
            Block::Mlp { proj, .. } => proj.is_none(),
        }
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Block::Basic {
                conv1,
                bn1,
                conv2,
                bn2,
                proj,
            } => {
                f(&conv1.w);
                f(&bn1.gamma);
                f(&bn1.beta);
                f(&conv2.w);
                f(&bn2.gamma);
                f(&bn2.beta);
                if let Some((c, n)) = proj {
                    f(&c.w);
                    f(&n.gamma);
                    f(&n.beta);
                }
            }
            Block::Bottleneck {
                conv1,
                bn1,
                conv2,
                bn2,
                conv3,
                bn3,
                proj,
            } => {
                f(&conv1.w);
                f(&bn1.gamma);
                f(&bn1.beta);
                f(&conv2.w);
                f(&bn2.gamma);
                f(&bn2.beta);
                f(&conv3.w);
                f(&bn3.gamma);
                f(&bn3.beta);
                if let Some((c, n)) = proj {
                    f(&c.w);
                    f(&n.gamma);
                    f(&n.beta);
                }
            }
            Block::Mlp { fc1, n1, fc2, n2, proj } => {
                f(&fc1.w);
                f(&fc1.b);
                f(&n1.gamma);
                f(&n1.beta);
                f(&fc2.w);
                f(&fc2.b);
                f(&n2.gamma);
                f(&n2.beta);
                if let Some(fc) = proj {
                    f(&fc.w);
                    f(&fc.b);
                }
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Block::Basic {
                conv1,
                bn1,
                conv2,
                bn2,
                proj,
            } => {
                f(&mut conv1.w);
                f(&mut bn1.gamma);
                f(&mut bn1.beta);
                f(&mut conv2.w);
                f(&mut bn2.gamma);
                f(&mut bn2.beta);
                if let Some((c, n)) = proj {
                    f(&mut c.w);
                    f(&mut n.gamma);
                    f(&mut n.beta);
                }
            }
            Block::Bottleneck {
                conv1,
                bn1,
                conv2,
                bn2,
                conv3,
                bn3,
                proj,
            } => {
                f(&mut conv1.w);
                f(&mut bn1.gamma);
                f(&mut bn1.beta);
                f(&mut conv2.w);
                f(&mut bn2.gamma);
                f(&mut bn2.beta);
                f(&mut conv3.w);
                f(&mut bn3.gamma);
                f(&mut bn3.beta);
                if let Some((c, n)) = proj {
                    f(&mut c.w);
                    f(&mut n.gamma);
                    f(&mut n.beta);
                }
            }
            Block::Mlp { fc1, n1, fc2, n2, proj } => {
                f(&mut fc1.w);
                f(&mut fc1.b);
                f(&mut n1.gamma);
                f(&mut n1.beta);
                f(&mut fc2.w);
                f(&mut fc2.b);
                f(&mut n2.gamma);
                f(&mut n2.beta);
                if let Some(fc) = proj {
                    f(&mut fc.w);
                    f(&mut fc.b);
                }
            }
        }
    }

    fn visit_norms(&self, f: &mut dyn FnMut(&str, &RefCell<RunningStats>)) {
        match self {
            Block::Basic { bn1, bn2, proj, .. } => {
                f(&bn1.name, &bn1.stats);
                f(&bn2.name, &bn2.stats);
                if let Some((_, n)) = proj {
                    f(&n.name, &n.stats);
                }
            }
            Block::Bottleneck { bn1, bn2, bn3, proj, .. } => {
                f(&bn1.name, &bn1.stats);
                f(&bn2.name, &bn2.stats);
                f(&bn3.name, &bn3.stats);
                if let Some((_, n)) = proj {
                    f(&n.name, &n.stats);
                }
            }
            Block::Mlp { n1, n2, .. } => {
                f(&n1.name, &n1.stats);
                f(&n2.name, &n2.stats);
            }
        }
    }
}

#[derive(Debug)]
enum Stem {
    Conv { conv: Conv, bn: Norm },
    Linear { fc: Dense, bn: Norm },
}

#[derive(Debug)]
struct Head {
    fc: Dense,
}

/// Weight-shared depth-adaptive network. All sub-network specs execute
/// against the same parameter set.
#[derive(Debug)]
pub struct AdaptiveNet {
    pub config: ArchConfig,
    stem: Stem,
    stages: Vec<Vec<Block>>,
    head: Head,
}

impl AdaptiveNet {
    pub fn new(config: ArchConfig, seed: u64) -> Result<AdaptiveNet> {
        config.validate()?;
        let mut rng = rng::stream(seed, "net-init", 0);
        let width0 = config.stages[0].channels;
        let stem = match config.stem {
            StemKind::Conv {
                in_channels,
                kernel,
                stride,
            } => Stem::Conv {
                conv: Conv::new("stem/conv", in_channels, width0, kernel, stride, &mut rng),
                bn: Norm::new("stem/bn", width0),
            },
            StemKind::Linear { in_features } => Stem::Linear {
                fc: Dense::new("stem/fc", in_features, width0, &mut rng),
                bn: Norm::new("stem/bn", width0),
            },
        };

        let mut stages = Vec::with_capacity(config.stages.len());
        let mut in_width = width0;
        for (j, st) in config.stages.iter().enumerate() {
            let mut blocks = Vec::with_capacity(st.repeats);
            for i in 0..st.repeats {
                let name = format!("stage{j}/block{i}");
                let stride = if j > 0 && i == 0 { 2 } else { 1 };
                let block = match config.block {
                    BlockKind::Basic => {
                        let out = st.channels;
                        let proj = if in_width != out || stride != 1 {
                            Some((
                                Conv::new(&format!("{name}/proj"), in_width, out, 1, stride, &mut rng),
                                Norm::new(&format!("{name}/proj_bn"), out),
                            ))
                        } else {
                            None
                        };
                        Block::Basic {
                            conv1: Conv::new(&format!("{name}/conv1"), in_width, out, 3, stride, &mut rng),
                            bn1: Norm::new(&format!("{name}/bn1"), out),
                            conv2: Conv::new(&format!("{name}/conv2"), out, out, 3, 1, &mut rng),
                            bn2: Norm::zeroed(&format!("{name}/bn2"), out),
                            proj,
                        }
                    }
                    BlockKind::Bottleneck { expansion } => {
                        let mid = st.channels;
                        let out = mid * expansion;
                        let proj = if in_width != out || stride != 1 {
                            Some((
                                Conv::new(&format!("{name}/proj"), in_width, out, 1, stride, &mut rng),
                                Norm::new(&format!("{name}/proj_bn"), out),
                            ))
                        } else {
                            None
                        };
                        Block::Bottleneck {
                            conv1: Conv::new(&format!("{name}/conv1"), in_width, mid, 1, 1, &mut rng),
                            bn1: Norm::new(&format!("{name}/bn1"), mid),
                            conv2: Conv::new(&format!("{name}/conv2"), mid, mid, 3, stride, &mut rng),
                            bn2: Norm::new(&format!("{name}/bn2"), mid),
                            conv3: Conv::new(&format!("{name}/conv3"), mid, out, 1, 1, &mut rng),
                            bn3: Norm::zeroed(&format!("{name}/bn3"), out),
                            proj,
                        }
                    }
                    BlockKind::Mlp => {
                        let out = st.channels;
                        let proj = if in_width != out {
                            Some(Dense::new(&format!("{name}/proj"), in_width, out, &mut rng))
                        } else {
                            None
                        };
                        Block::Mlp {
                            fc1: Dense::new(&format!("{name}/fc1"), in_width, out, &mut rng),
                            n1: Norm::new(&format!("{name}/n1"), out),
                            fc2: Dense::new(&format!("{name}/fc2"), out, out, &mut rng),
                            n2: Norm::zeroed(&format!("{name}/n2"), out),
                            proj,
                        }
                    }
                };
                let out_width = match config.block {
                    BlockKind::Bottleneck { expansion } => st.channels * expansion,
                    _ => st.channels,
                };
                blocks.push(block);
                in_width = out_width;
            }
            stages.push(blocks);
        }

        // Small-scale classifier init keeps the initial logits near zero.
        let mut head_fc = Dense::new("head/fc", config.head_in(), config.num_classes, &mut rng);
        let damped: Vec<f64> = head_fc.w.value().iter().map(|v| v * 0.05).collect();
        head_fc.w.set_value(damped);
        let head = Head { fc: head_fc };
        Ok(AdaptiveNet {
            config,
            stem,
            stages,
            head,
        })
    }

    fn stem_forward(&self, tape: Option<&Tape>, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match &self.stem {
            Stem::Conv { conv, bn } => Ok(bn.forward(tape, &conv.forward(tape, x)?, mode)?.relu()),
            Stem::Linear { fc, bn } => Ok(bn.forward(tape, &fc.forward(tape, x)?, mode)?.relu()),
        }
    }

    fn head_forward(&self, tape: Option<&Tape>, x: &Tensor) -> Result<Tensor> {
        let flat = if x.shape().len() == 4 {
            global_avg_pool(x)?
        } else {
            x.clone()
        };
        self.head.fc.forward(tape, &flat)
    }

    /// One block's `y = relu(F(x) + skip(x))`, by flat block index.
    pub fn residual_forward(
        &self,
        tape: Option<&Tape>,
        block_index: usize,
        x: &Tensor,
        mode: Mode,
    ) -> Result<Tensor> {
        let (j, i) = self.locate(block_index)?;
        let block = &self.stages[j][i];
        let f = block.branch(tape, x, mode)?;
        let s = block.skip(tape, x, mode)?;
        Ok(add(&f, &s)?.relu())
    }

    fn locate(&self, flat: usize) -> Result<(usize, usize)> {
        let mut rem = flat;
        for (j, blocks) in self.stages.iter().enumerate() {
            if rem < blocks.len() {
                return Ok((j, rem));
            }
            rem -= blocks.len();
        }
        Err(Error::Index(format!(
            "block index {flat} out of range for {} blocks",
            self.config.total_blocks()
        )))
    }

    /// Truncated forward: per stage, only the first `active_counts[j]` blocks
    /// execute; skipped blocks are never touched.
    pub fn forward(
        &self,
        tape: Option<&Tape>,
        x: &Tensor,
        spec: &SubnetSpec,
        mode: Mode,
    ) -> Result<Tensor> {
        if spec.active_counts.len() != self.stages.len() {
            return Err(shape_err(
                "forward spec",
                format!("{} stages", self.stages.len()),
                format!("{}", spec.active_counts.len()),
            ));
        }
        let mut h = self.stem_forward(tape, x, mode)?;
        for (j, blocks) in self.stages.iter().enumerate() {
            let active = spec.active_counts[j];
            if active == 0 || active > blocks.len() {
                return Err(Error::Contract(format!(
                    "active count {active} invalid for stage {j} with {} blocks",
                    blocks.len()
                )));
            }
            for block in &blocks[..active] {
                let f = block.branch(tape, &h, mode)?;
                let s = block.skip(tape, &h, mode)?;
                h = add(&f, &s)?.relu();
            }
        }
        self.head_forward(tape, &h)
    }

    /// Masked forward over every block.
    ///
    /// Train mode computes `F(x) * B_i + skip(x)` for each block so the
    /// gradient reaches the mask; eval mode skips the branch entirely when
    /// `B_i = 0` (identity-skip blocks return `x` untouched). For the same
    /// hard mask the skipping and the dense execution produce bit-identical
    /// outputs under the same normalization mode; see
    /// [`forward_masked_dense`](Self::forward_masked_dense).
    pub fn forward_masked(
        &self,
        tape: Option<&Tape>,
        x: &Tensor,
        mask: &BinaryMask,
        mode: Mode,
    ) -> Result<Tensor> {
        self.masked_impl(tape, x, mask, mode, matches!(mode, BnMode::Eval))
    }

    /// Masked forward that always executes every block densely, multiplying
    /// each branch by its gate. Reference path for skip-equivalence checks.
    pub fn forward_masked_dense(
        &self,
        tape: Option<&Tape>,
        x: &Tensor,
        mask: &BinaryMask,
        mode: Mode,
    ) -> Result<Tensor> {
        self.masked_impl(tape, x, mask, mode, false)
    }

    fn masked_impl(
        &self,
        tape: Option<&Tape>,
        x: &Tensor,
        mask: &BinaryMask,
        mode: Mode,
        skip_inactive: bool,
    ) -> Result<Tensor> {
        if mask.len() != self.config.total_blocks() {
            return Err(shape_err(
                "forward_masked",
                format!("mask of {}", self.config.total_blocks()),
                format!("{}", mask.len()),
            ));
        }
        let mut h = self.stem_forward(tape, x, mode)?;
        let mut flat = 0usize;
        for blocks in &self.stages {
            for block in blocks {
                let gate = mask.gate(flat);
                let gate_value = gate.data()[0];
                if skip_inactive && gate_value == 0.0 {
                    if !block.has_identity_skip() {
                        h = block.skip(tape, &h, mode)?.relu();
                    }
                    // Identity skip: x passes through untouched.
                } else if skip_inactive && gate_value == 1.0 {
                    let f = block.branch(tape, &h, mode)?;
                    let s = block.skip(tape, &h, mode)?;
                    h = add(&f, &s)?.relu();
                } else {
                    let f = block.branch(tape, &h, mode)?;
                    let s = block.skip(tape, &h, mode)?;
                    h = mask_residual(&f, &s, &gate)?.relu();
                }
                flat += 1;
            }
        }
        self.head_forward(tape, &h)
    }

    /// Hard 0/1 mask activating exactly the prefix blocks of `spec`.
    pub fn prefix_mask_values(&self, spec: &SubnetSpec) -> Vec<f64> {
        let mut values = Vec::with_capacity(self.config.total_blocks());
        for (j, st) in self.config.stages.iter().enumerate() {
            for i in 0..st.repeats {
                values.push(if i < spec.active_counts[j] { 1.0 } else { 0.0 });
            }
        }
        values
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        match &self.stem {
            Stem::Conv { conv, bn } => {
                f(&conv.w);
                f(&bn.gamma);
                f(&bn.beta);
            }
            Stem::Linear { fc, bn } => {
                f(&fc.w);
                f(&fc.b);
                f(&bn.gamma);
                f(&bn.beta);
            }
        }
        for blocks in &self.stages {
            for b in blocks {
                b.visit_params(f);
            }
        }
        f(&self.head.fc.w);
        f(&self.head.fc.b);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match &mut self.stem {
            Stem::Conv { conv, bn } => {
                f(&mut conv.w);
                f(&mut bn.gamma);
                f(&mut bn.beta);
            }
            Stem::Linear { fc, bn } => {
                f(&mut fc.w);
                f(&mut fc.b);
                f(&mut bn.gamma);
                f(&mut bn.beta);
            }
        }
        for blocks in &mut self.stages {
            for b in blocks {
                b.visit_params_mut(f);
            }
        }
        f(&mut self.head.fc.w);
        f(&mut self.head.fc.b);
    }

    pub fn visit_norm_stats(&self, f: &mut dyn FnMut(&str, &RefCell<RunningStats>)) {
        match &self.stem {
            Stem::Conv { bn, .. } | Stem::Linear { bn, .. } => f(&bn.name, &bn.stats),
        }
        for blocks in &self.stages {
            for b in blocks {
                b.visit_norms(f);
            }
        }
    }

    /// Trainable scalar count of the structure a spec executes: stem, head,
    /// and each stage's active prefix.
    pub fn num_params(&self, spec: &SubnetSpec) -> usize {
        let mut total = 0usize;
        let count = |p: &Param, total: &mut usize| *total += p.len();
        match &self.stem {
            Stem::Conv { conv, bn } => {
                count(&conv.w, &mut total);
                count(&bn.gamma, &mut total);
                count(&bn.beta, &mut total);
            }
            Stem::Linear { fc, bn } => {
                count(&fc.w, &mut total);
                count(&fc.b, &mut total);
                count(&bn.gamma, &mut total);
                count(&bn.beta, &mut total);
            }
        }
        for (j, blocks) in self.stages.iter().enumerate() {
            for b in &blocks[..spec.active_counts[j]] {
                b.visit_params(&mut |p| total += p.len());
            }
        }
        total += self.head.fc.w.len() + self.head.fc.b.len();
        total
    }

    /// All parameter values flattened in visiting order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend_from_slice(p.value()));
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0usize;
        self.visit_params_mut(&mut |p| {
            let n = p.len();
            p.set_value(flat[offset..offset + n].to_vec());
            offset += n;
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }
}
