//! Analytic cost accounting and budget-driven depth selection.
//!
//! Parameters and FLOPs are computed from the architecture description alone,
//! walking exactly the structure a sub-network spec executes. The FLOP
//! convention defaults to one FLOP per multiply-accumulate, which is what the
//! common profiler packages report; a 2x convention is available.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{
    derive_subnet, AdaptiveNet, ArchConfig, BlockKind, Mode, RoundingRule, StageConfig, StemKind,
    SubnetSpec,
};
use crate::tensor::Tensor;

/// How multiply-accumulates translate into reported FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// 1 FLOP per MAC (profiler-package style). Default.
    #[default]
    Mac,
    /// 2 FLOPs per MAC (multiply plus add).
    TwoMac,
}

impl FlopConvention {
    fn macs(&self, macs: u64) -> u64 {
        match self {
            FlopConvention::Mac => macs,
            FlopConvention::TwoMac => 2 * macs,
        }
    }
}

pub fn conv_params(out_c: usize, in_c: usize, k: usize) -> u64 {
    (out_c * in_c * k * k) as u64
}

pub fn linear_params(in_f: usize, out_f: usize) -> u64 {
    (in_f * out_f + out_f) as u64
}

pub fn norm_params(channels: usize) -> u64 {
    // Scale and shift; running statistics are not trainable.
    2 * channels as u64
}

fn conv_out(side: usize, k: usize, stride: usize) -> usize {
    (side + 2 * (k / 2) - k) / stride + 1
}

/// One architectural component's cost share.
#[derive(Debug, Clone, Serialize)]
pub struct CostComponent {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

struct Walk {
    components: Vec<CostComponent>,
    convention: FlopConvention,
}

impl Walk {
    fn push(&mut self, name: String, params: u64, flops: u64) {
        self.components.push(CostComponent { name, params, flops });
    }

    fn conv(&self, in_c: usize, out_c: usize, k: usize, out_hw: (usize, usize)) -> u64 {
        let macs = (out_c * out_hw.0 * out_hw.1) as u64 * (in_c * k * k) as u64;
        self.convention.macs(macs)
    }

    fn linear(&self, in_f: usize, out_f: usize) -> u64 {
        self.convention.macs((in_f * out_f) as u64) + out_f as u64
    }

    fn norm(&self, elems: usize) -> u64 {
        2 * elems as u64
    }

    fn relu(&self, elems: usize) -> u64 {
        elems as u64
    }
}

/// Per-component cost walk of the structure `spec` executes, at batch 1.
/// `input_hw` is required for convolutional stems and ignored for linear
/// stems.
pub fn component_costs(
    config: &ArchConfig,
    spec: &SubnetSpec,
    input_hw: Option<(usize, usize)>,
    convention: FlopConvention,
) -> Result<Vec<CostComponent>> {
    config.validate()?;
    if spec.active_counts.len() != config.stages.len() {
        return Err(Error::Contract(format!(
            "spec has {} stages, config {}",
            spec.active_counts.len(),
            config.stages.len()
        )));
    }
    let mut walk = Walk {
        components: Vec::new(),
        convention,
    };

    let width0 = config.stages[0].channels;
    // (height, width) of the feature map; (1, 1) for the vector path.
    let mut hw;
    let mut in_width;
    match config.stem {
        StemKind::Conv {
            in_channels,
            kernel,
            stride,
        } => {
            let (h, w) = input_hw.ok_or_else(|| {
                Error::InvalidParam("conv stems need an input size, e.g. 32x32".into())
            })?;
            let out = (conv_out(h, kernel, stride), conv_out(w, kernel, stride));
            let elems = width0 * out.0 * out.1;
            let params = conv_params(width0, in_channels, kernel) + norm_params(width0);
            let flops =
                walk.conv(in_channels, width0, kernel, out) + walk.norm(elems) + walk.relu(elems);
            walk.push("stem".into(), params, flops);
            hw = out;
            in_width = width0;
        }
        StemKind::Linear { in_features } => {
            let params = linear_params(in_features, width0) + norm_params(width0);
            let flops = walk.linear(in_features, width0) + walk.norm(width0) + walk.relu(width0);
            walk.push("stem".into(), params, flops);
            hw = (1, 1);
            in_width = width0;
        }
    }

    for (j, stage) in config.stages.iter().enumerate() {
        let active = spec.active_counts[j];
        if active < 1 || active > stage.repeats {
            return Err(Error::Contract(format!(
                "active count {active} out of range for stage {j}"
            )));
        }
        for i in 0..active {
            let stride = if j > 0 && i == 0 { 2 } else { 1 };
            let (params, flops, out_width, out_hw) =
                block_cost(&walk, config.block, in_width, stage.channels, stride, hw);
            walk.push(format!("stage{j}/block{i}"), params, flops);
            in_width = out_width;
            hw = out_hw;
        }
    }

    let head_in = config.head_in();
    let mut head_flops = 0u64;
    if matches!(config.stem, StemKind::Conv { .. }) {
        // Global average pool: one add per element plus one divide per channel.
        head_flops += (head_in * hw.0 * hw.1 + head_in) as u64;
    }
    head_flops += walk.linear(head_in, config.num_classes);
    walk.push(
        "head".into(),
        linear_params(head_in, config.num_classes),
        head_flops,
    );
    Ok(walk.components)
}

fn block_cost(
    walk: &Walk,
    kind: BlockKind,
    in_width: usize,
    channels: usize,
    stride: usize,
    hw: (usize, usize),
) -> (u64, u64, usize, (usize, usize)) {
    match kind {
        BlockKind::Basic => {
            let out = channels;
            let out_hw = (conv_out(hw.0, 3, stride), conv_out(hw.1, 3, stride));
            let elems = out * out_hw.0 * out_hw.1;
            let mut params = conv_params(out, in_width, 3)
                + norm_params(out)
                + conv_params(out, out, 3)
                + norm_params(out);
            // conv1 (strided) + bn + relu, conv2 + bn, add + final relu.
            let mut flops = walk.conv(in_width, out, 3, out_hw)
                + walk.norm(elems)
                + walk.relu(elems)
                + walk.conv(out, out, 3, out_hw)
                + walk.norm(elems)
                + elems as u64
                + walk.relu(elems);
            if in_width != out || stride != 1 {
                params += conv_params(out, in_width, 1) + norm_params(out);
                flops += walk.conv(in_width, out, 1, out_hw) + walk.norm(elems);
            }
            (params, flops, out, out_hw)
        }
        BlockKind::Bottleneck { expansion } => {
            let mid = channels;
            let out = mid * expansion;
            let mid_hw = (conv_out(hw.0, 3, stride), conv_out(hw.1, 3, stride));
            let mid_in_elems = mid * hw.0 * hw.1;
            let mid_elems = mid * mid_hw.0 * mid_hw.1;
            let out_elems = out * mid_hw.0 * mid_hw.1;
            let mut params = conv_params(mid, in_width, 1)
                + norm_params(mid)
                + conv_params(mid, mid, 3)
                + norm_params(mid)
                + conv_params(out, mid, 1)
                + norm_params(out);
            // conv1 1x1 at input resolution, conv2 3x3 strided, conv3 1x1.
            let mut flops = walk.conv(in_width, mid, 1, hw)
                + walk.norm(mid_in_elems)
                + walk.relu(mid_in_elems)
                + walk.conv(mid, mid, 3, mid_hw)
                + walk.norm(mid_elems)
                + walk.relu(mid_elems)
                + walk.conv(mid, out, 1, mid_hw)
                + walk.norm(out_elems)
                + out_elems as u64
                + walk.relu(out_elems);
            if in_width != out || stride != 1 {
                params += conv_params(out, in_width, 1) + norm_params(out);
                flops += walk.conv(in_width, out, 1, mid_hw) + walk.norm(out_elems);
            }
            (params, flops, out, mid_hw)
        }
        BlockKind::Mlp => {
            let out = channels;
            let mut params = linear_params(in_width, out)
                + norm_params(out)
                + linear_params(out, out)
                + norm_params(out);
            let mut flops = walk.linear(in_width, out)
                + walk.norm(out)
                + walk.relu(out)
                + walk.linear(out, out)
                + walk.norm(out)
                + out as u64
                + walk.relu(out);
            if in_width != out {
                params += linear_params(in_width, out);
                flops += walk.linear(in_width, out);
            }
            (params, flops, out, hw)
        }
    }
}

/// Trainable parameter count of the structure `spec` executes: conv kernels,
/// dense weights and biases, and norm scale/shift pairs over the stem, each
/// stage's active prefix, and the head.
pub fn count_params(config: &ArchConfig, spec: &SubnetSpec) -> Result<u64> {
    Ok(component_costs(config, spec, Some((1, 1)), FlopConvention::Mac)?
        .iter()
        .map(|c| c.params)
        .sum())
}

/// FLOPs at batch 1 under the given convention, including norm, activation,
/// pooling, and the residual adds.
pub fn count_flops(
    config: &ArchConfig,
    spec: &SubnetSpec,
    input_hw: Option<(usize, usize)>,
    convention: FlopConvention,
) -> Result<u64> {
    Ok(component_costs(config, spec, input_hw, convention)?
        .iter()
        .map(|c| c.flops)
        .sum())
}

/// The bottleneck-152 preset with the small-image stem (3x3, stride 1, no
/// max-pool) and a 100-class head.
pub fn resnet152_cifar_preset() -> ArchConfig {
    ArchConfig {
        stem: StemKind::Conv {
            in_channels: 3,
            kernel: 3,
            stride: 1,
        },
        block: BlockKind::Bottleneck { expansion: 4 },
        stages: vec![
            StageConfig { repeats: 3, channels: 64 },
            StageConfig { repeats: 8, channels: 128 },
            StageConfig { repeats: 36, channels: 256 },
            StageConfig { repeats: 3, channels: 512 },
        ],
        num_classes: 100,
        rounding: RoundingRule::Calibrated,
    }
}

/// One scaling factor's cost row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub s: f64,
    pub params: u64,
    pub flops: u64,
    pub latency_ms: Option<f64>,
}

/// Per-factor cost table, ascending in `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
}

impl CostTable {
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Contract("cost table is empty".into()));
        }
        if !self.rows.iter().any(|r| r.s == 1.0) {
            return Err(Error::Contract("cost table must include s = 1.0".into()));
        }
        for pair in self.rows.windows(2) {
            if pair[1].s <= pair[0].s {
                return Err(Error::Contract("cost table rows must be ascending in s".into()));
            }
            if pair[1].params < pair[0].params || pair[1].flops < pair[0].flops {
                return Err(Error::Contract(
                    "params and flops must be monotone in s".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,params,flops,latency_ms\n");
        for r in &self.rows {
            let lat = r.latency_ms.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.s, r.params, r.flops, lat);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<CostTable> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Contract("empty cost table file".into()))?;
        if header.trim() != "s,params,flops,latency_ms" {
            return Err(Error::Contract(format!(
                "unexpected cost table header: {header}"
            )));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Contract(format!(
                    "cost table line {} has {} fields",
                    i + 2,
                    fields.len()
                )));
            }
            let parse_err = |what: &str| {
                Error::Contract(format!("cost table line {}: bad {what}", i + 2))
            };
            rows.push(CostRow {
                s: fields[0].trim().parse().map_err(|_| parse_err("s"))?,
                params: fields[1].trim().parse().map_err(|_| parse_err("params"))?,
                flops: fields[2].trim().parse().map_err(|_| parse_err("flops"))?,
                latency_ms: if fields[3].trim().is_empty() {
                    None
                } else {
                    Some(fields[3].trim().parse().map_err(|_| parse_err("latency"))?)
                },
            });
        }
        let table = CostTable { rows };
        table.validate()?;
        Ok(table)
    }
}

/// Build the params/FLOPs table for the given factors.
pub fn cost_table(
    config: &ArchConfig,
    factors: &[f64],
    input_hw: Option<(usize, usize)>,
    convention: FlopConvention,
) -> Result<CostTable> {
    let mut factors = factors.to_vec();
    factors.sort_by(|a, b| a.total_cmp(b));
    factors.dedup();
    let mut rows = Vec::with_capacity(factors.len());
    for s in factors {
        let spec = derive_subnet(config, s)?;
        rows.push(CostRow {
            s,
            params: count_params(config, &spec)?,
            flops: count_flops(config, &spec, input_hw, convention)?,
            latency_ms: None,
        });
    }
    let table = CostTable { rows };
    table.validate()?;
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    Params,
    Flops,
    LatencyMs,
}

/// An inference budget: pick the deepest sub-network whose cost fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub kind: BudgetKind,
    pub limit: f64,
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        if !(self.limit > 0.0) {
            return Err(Error::InvalidParam(format!(
                "budget limit must be positive, got {}",
                self.limit
            )));
        }
        Ok(())
    }
}

fn row_cost(row: &CostRow, kind: BudgetKind) -> Result<f64> {
    Ok(match kind {
        BudgetKind::Params => row.params as f64,
        BudgetKind::Flops => row.flops as f64,
        BudgetKind::LatencyMs => row.latency_ms.ok_or_else(|| {
            Error::Contract("cost table has no latency column for a latency budget".into())
        })?,
    })
}

/// Largest scaling factor whose cost fits the budget.
pub fn budget_select(table: &CostTable, budget: &Budget) -> Result<f64> {
    budget.validate()?;
    table.validate()?;
    let mut best: Option<f64> = None;
    let mut cheapest: Option<(f64, f64)> = None;
    for row in &table.rows {
        let cost = row_cost(row, budget.kind)?;
        if cheapest.is_none_or(|(_, c)| cost < c) {
            cheapest = Some((row.s, cost));
        }
        if cost <= budget.limit && best.is_none_or(|b| row.s > b) {
            best = Some(row.s);
        }
    }
    match best {
        Some(s) => Ok(s),
        None => {
            let (cheapest_s, cheapest_cost) = cheapest.expect("validated nonempty table");
            Err(Error::InfeasibleBudget {
                limit: budget.limit,
                cheapest_s,
                cheapest_cost,
            })
        }
    }
}

/// Latency measurement summary.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Coefficient of variation, `std / mean`.
    pub cov: f64,
    pub reps: usize,
}

/// Timed eval-mode forwards: `warmup` unrecorded runs, then the mean and
/// standard deviation of `reps` timed runs.
pub fn measure_latency(
    net: &AdaptiveNet,
    spec: &SubnetSpec,
    input: &Tensor,
    warmup: usize,
    reps: usize,
) -> Result<LatencyStats> {
    if reps == 0 {
        return Err(Error::InvalidParam("latency measurement needs reps >= 1".into()));
    }
    for _ in 0..warmup {
        net.forward(None, input, spec, Mode::Eval)?;
    }
    let mut samples_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        net.forward(None, input, spec, Mode::Eval)?;
        samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = samples_ms.iter().sum::<f64>() / reps as f64;
    let var = samples_ms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / reps as f64;
    let std = var.sqrt();
    Ok(LatencyStats {
        mean_ms: mean,
        std_ms: std,
        cov: if mean > 0.0 { std / mean } else { 0.0 },
        reps,
    })
}
