//! Differentiable binary layer selection.
//!
//! A learnable score per block is perturbed with Gumbel noise, the top-k
//! blocks are switched on, and a straight-through estimator makes the binary
//! mask differentiable: the forward value is exactly 0/1 while the backward
//! gradient is that of the softmax relaxation. Stage-entry blocks are pinned
//! on and excluded from the selection pool.

use rand::Rng;

use crate::error::{Error, Result};
use crate::net::{derive_subnet, ArchConfig};
use crate::tensor::{add, straight_through, Param, Tape, Tensor};

/// Gumbel-softmax settings. The temperature lives in (0, 1]; 2/3 is the
/// conventional choice.
#[derive(Debug, Clone, Copy)]
pub struct GumbelConfig {
    pub temperature: f64,
}

pub const DEFAULT_GUMBEL_TEMPERATURE: f64 = 2.0 / 3.0;

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            temperature: DEFAULT_GUMBEL_TEMPERATURE,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "gumbel temperature must be in (0, 1], got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Learnable selection scores, one logit per block (pinned blocks keep a
/// slot so indices line up with the network layout).
#[derive(Debug, Clone)]
pub struct MaskParams {
    pub scores: Param,
}

impl MaskParams {
    pub fn new(total_blocks: usize) -> MaskParams {
        MaskParams {
            scores: Param::new("mask/scores", vec![total_blocks], vec![0.0; total_blocks]),
        }
    }
}

/// Which blocks are eligible for masking. Stage entries are forced on.
#[derive(Debug, Clone)]
pub struct MaskLayout {
    forced: Vec<bool>,
    maskable: Vec<usize>,
}

impl MaskLayout {
    pub fn for_arch(config: &ArchConfig) -> MaskLayout {
        let total = config.total_blocks();
        let mut forced = vec![false; total];
        for idx in config.entry_block_indices() {
            forced[idx] = true;
        }
        let maskable = (0..total).filter(|&i| !forced[i]).collect();
        MaskLayout { forced, maskable }
    }

    pub fn total(&self) -> usize {
        self.forced.len()
    }

    pub fn num_forced(&self) -> usize {
        self.forced.len() - self.maskable.len()
    }
}

/// A realized binary mask over all blocks: exact 0/1 forward values, with the
/// softmax relaxation as gradient carrier for the learned entries.
#[derive(Debug, Clone)]
pub struct BinaryMask {
    values: Vec<f64>,
    /// Straight-through tensor over the maskable positions (train draws).
    selected: Option<Tensor>,
    /// phi, the softmax relaxation over the maskable positions.
    soft: Option<Tensor>,
    /// Position of each maskable block inside `selected`.
    slot_of: Vec<Option<usize>>,
}

impl BinaryMask {
    /// A constant mask from raw 0/1 values; no gradient flows.
    pub fn constant(values: Vec<f64>) -> Result<BinaryMask> {
        for &v in &values {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Contract(format!("mask entry {v} is not binary")));
            }
        }
        let slot_of = vec![None; values.len()];
        Ok(BinaryMask {
            values,
            selected: None,
            soft: None,
            slot_of,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    /// The softmax relaxation over maskable positions, when this mask was
    /// drawn differentiably.
    pub fn soft_scores(&self) -> Option<&Tensor> {
        self.soft.as_ref()
    }

    /// Scalar gate for one block. Learned entries index into the
    /// straight-through tensor so gradients reach the scores.
    pub fn gate(&self, block: usize) -> Tensor {
        match (self.slot_of[block], &self.selected) {
            (Some(slot), Some(sel)) => sel.at(slot).expect("slot in range"),
            _ => Tensor::scalar(self.values[block]),
        }
    }
}

/// Standard Gumbel noise `g = -log(-log u)`, `u ~ U(0,1)` excluding endpoints.
pub fn sample_gumbel(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = loop {
                let u = rng.gen::<f64>();
                if u > 0.0 {
                    break u;
                }
            };
            -(-u.ln()).ln()
        })
        .collect()
}

/// Exactly `k` ones at the k largest scores; ties break toward the lowest
/// index.
pub fn hard_topk(scores: &[f64], k: usize) -> Result<Vec<f64>> {
    let n = scores.len();
    if k < 1 || k > n {
        return Err(Error::InvalidParam(format!(
            "top-k selection needs 1 <= k <= {n}, got {k}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| a.cmp(&b)));
    let mut out = vec![0.0; n];
    for &i in &idx[..k] {
        out[i] = 1.0;
    }
    Ok(out)
}

/// The softmax relaxation `phi = softmax((log pi + g) / temperature)` where
/// `pi = softmax(score_logits)` keeps the log finite.
pub fn soft_scores(score_logits: &Tensor, gumbel: &[f64], temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "gumbel temperature must be positive, got {temperature}"
        )));
    }
    let n = score_logits.numel();
    if gumbel.len() != n {
        return Err(Error::Contract(format!(
            "gumbel noise length {} does not match {n} scores",
            gumbel.len()
        )));
    }
    let as_row = score_logits.reshape(vec![1, n]);
    let log_pi = as_row.log_softmax()?;
    let noise = Tensor::constant(vec![1, n], gumbel.to_vec());
    let z = add(&log_pi, &noise)?;
    let phi = z.softmax_tau(temperature)?;
    Ok(phi.reshape(vec![n]))
}

/// Straight-through top-k: forward is the exact binary `hard_topk(phi, k)`,
/// backward is the identity onto `phi`.
pub fn straight_through_topk(phi: &Tensor, k: usize) -> Result<Tensor> {
    let hard = hard_topk(phi.data(), k)?;
    straight_through(hard, phi)
}

/// Total active blocks for a scaling factor: the sum of the derived
/// per-stage counts. This is the `k` handed to the mask for factor `s`.
pub fn k_for_scaling(config: &ArchConfig, s: f64) -> Result<usize> {
    Ok(derive_subnet(config, s)?.total_active())
}

/// Draw a differentiable mask with exactly `k` active blocks.
///
/// Stage entries are pinned to 1 and excluded from the pool; the remaining
/// `k - forced` slots go to the top-k of the Gumbel-perturbed scores. With
/// `noise` off (eval), selection is the deterministic top-k of the scores.
pub fn draw_mask(
    tape: Option<&Tape>,
    layout: &MaskLayout,
    params: &MaskParams,
    gumbel: &GumbelConfig,
    k: usize,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<BinaryMask> {
    gumbel.validate()?;
    let total = layout.total();
    if params.scores.len() != total {
        return Err(Error::Contract(format!(
            "mask has {} scores for {total} blocks",
            params.scores.len()
        )));
    }
    let forced = layout.num_forced();
    if k < forced || k > total {
        return Err(Error::InvalidParam(format!(
            "mask budget k={k} outside [{forced}, {total}]"
        )));
    }
    let k_pool = k - forced;

    let mut values = vec![0.0; total];
    for (i, &is_forced) in layout.forced.iter().enumerate() {
        if is_forced {
            values[i] = 1.0;
        }
    }
    let mut slot_of = vec![None; total];

    if layout.maskable.is_empty() || k_pool == 0 {
        return Ok(BinaryMask {
            values,
            selected: None,
            soft: None,
            slot_of,
        });
    }

    let scores = params.scores.tensor(tape);
    let pool_scores = scores.gather(&layout.maskable)?;
    let noise = match rng {
        Some(mut rng) => sample_gumbel(layout.maskable.len(), &mut rng),
        None => vec![0.0; layout.maskable.len()],
    };
    let phi = soft_scores(&pool_scores, &noise, gumbel.temperature)?;
    let selected = straight_through_topk(&phi, k_pool)?;
    for (slot, &block) in layout.maskable.iter().enumerate() {
        values[block] = selected.data()[slot];
        slot_of[block] = Some(slot);
    }
    Ok(BinaryMask {
        values,
        selected: Some(selected),
        soft: Some(phi),
        slot_of,
    })
}

/// Entropy of the selection distribution over maskable blocks. Adding this
/// (scaled) to a loss sharpens the scores toward a confident selection; off
/// by default in training configs.
pub fn selection_entropy(tape: Option<&Tape>, layout: &MaskLayout, params: &MaskParams) -> Result<Tensor> {
    if layout.maskable.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let m = layout.maskable.len();
    let scores = params.scores.tensor(tape).gather(&layout.maskable)?;
    let row = scores.reshape(vec![1, m]);
    let p = row.softmax_tau(1.0)?;
    let logp = row.log_softmax()?;
    // H = -sum p log p
    Ok(crate::tensor::mul(&p, &logp)?.sum().scale(-1.0))
}
