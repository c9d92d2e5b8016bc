//! Forward operations. Each op computes its value eagerly and records a node
//! when any differentiable input carries one.

use std::cell::Cell;
use std::rc::Rc;

use super::{common_tape, expect_same_shape, ConvDims, Op, Tape, Tensor};
use crate::error::{shape_err, Error, Result};

thread_local! {
    static KERNEL_OPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of dense kernel invocations (linear/conv/norm and elementwise math)
/// on this thread. Test instrumentation for the "skipped blocks do no
/// arithmetic" property.
pub fn kernel_ops() -> u64 {
    KERNEL_OPS.with(|c| c.get())
}

pub fn reset_kernel_ops() {
    KERNEL_OPS.with(|c| c.set(0));
}

fn count_kernel() {
    KERNEL_OPS.with(|c| c.set(c.get() + 1));
}

fn record(tape: Option<&Tape>, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    record_rc(tape, op, shape, Rc::new(data))
}

fn record_rc(tape: Option<&Tape>, op: Op, shape: Vec<usize>, data: Rc<Vec<f64>>) -> Tensor {
    match tape {
        Some(t) => Tensor::from_op_rc(t, op, shape, data),
        None => Tensor::constant_rc(shape, data),
    }
}

/// Elementwise `a + b`; shapes must match.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape("add", a, b)?;
    count_kernel();
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let tape = common_tape(&[a, b])?;
    Ok(record(
        tape,
        Op::Add {
            a: a.src(),
            b: b.src(),
        },
        a.shape().to_vec(),
        data,
    ))
}

/// Elementwise `a - b`.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape("sub", a, b)?;
    count_kernel();
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let tape = common_tape(&[a, b])?;
    Ok(record(
        tape,
        Op::Sub {
            a: a.src(),
            b: b.src(),
        },
        a.shape().to_vec(),
        data,
    ))
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape("mul", a, b)?;
    count_kernel();
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let tape = common_tape(&[a, b])?;
    Ok(record(
        tape,
        Op::Mul {
            a: a.src(),
            b: b.src(),
            a_data: a.data_rc(),
            b_data: b.data_rc(),
        },
        a.shape().to_vec(),
        data,
    ))
}

impl Tensor {
    /// `c * x` for a compile-time constant factor.
    pub fn scale(&self, c: f64) -> Tensor {
        count_kernel();
        let data: Vec<f64> = self.data().iter().map(|x| c * x).collect();
        record(
            self.node_tape(),
            Op::Scale { x: self.src(), c },
            self.shape().to_vec(),
            data,
        )
    }

    /// Elementwise natural log; caller ensures positivity.
    pub fn log(&self) -> Tensor {
        count_kernel();
        let data: Vec<f64> = self.data().iter().map(|x| x.ln()).collect();
        record(
            self.node_tape(),
            Op::Log {
                x: self.src(),
                x_data: self.data_rc(),
            },
            self.shape().to_vec(),
            data,
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        count_kernel();
        let s: f64 = self.data().iter().sum();
        record(
            self.node_tape(),
            Op::Sum {
                x: self.src(),
                n: self.numel(),
            },
            vec![1],
            vec![s],
        )
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor {
        count_kernel();
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        record(
            self.node_tape(),
            Op::Mean { x: self.src(), n },
            vec![1],
            vec![s / n as f64],
        )
    }

    /// Single element as a scalar tensor; gradient scatters back to slot `i`.
    pub fn at(&self, i: usize) -> Result<Tensor> {
        if i >= self.numel() {
            return Err(Error::Index(format!(
                "at({i}) on tensor of {} elements",
                self.numel()
            )));
        }
        Ok(record(
            self.node_tape(),
            Op::At { x: self.src(), i },
            vec![1],
            vec![self.data()[i]],
        ))
    }

    /// Gather elements at `idx` into a new 1-D tensor.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.numel() {
                return Err(Error::Index(format!(
                    "gather index {i} on tensor of {} elements",
                    self.numel()
                )));
            }
            data.push(self.data()[i]);
        }
        Ok(record(
            self.node_tape(),
            Op::Gather {
                x: self.src(),
                idx: Rc::new(idx.to_vec()),
            },
            vec![idx.len()],
            data,
        ))
    }

    /// `max(0, x)` with the subgradient at 0 defined as 0.
    pub fn relu(&self) -> Tensor {
        count_kernel();
        let data: Rc<Vec<f64>> = Rc::new(
            self.data()
                .iter()
                .map(|&x| if x > 0.0 { x } else { 0.0 })
                .collect(),
        );
        record_rc(
            self.node_tape(),
            Op::Relu {
                x: self.src(),
                y_data: Rc::clone(&data),
            },
            self.shape().to_vec(),
            data,
        )
    }

    /// Rows of `softmax(x / tau)` for a `[rows, cols]` tensor.
    pub fn softmax_tau(&self, tau: f64) -> Result<Tensor> {
        if tau <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        let (rows, cols) = as_matrix(self, "softmax_tau")?;
        count_kernel();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.data()[r * cols..(r + 1) * cols];
            softmax_row_into(row, tau, &mut data[r * cols..(r + 1) * cols]);
        }
        let data = Rc::new(data);
        Ok(record_rc(
            self.node_tape(),
            Op::SoftmaxTau {
                x: self.src(),
                y_data: Rc::clone(&data),
                tau,
                rows,
                cols,
            },
            self.shape().to_vec(),
            data,
        ))
    }

    /// Rows of `log softmax(x)` for a `[rows, cols]` tensor.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let (rows, cols) = as_matrix(self, "log_softmax")?;
        count_kernel();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.data()[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row, 1.0);
            for c in 0..cols {
                data[r * cols + c] = row[c] - lse;
            }
        }
        let data = Rc::new(data);
        Ok(record_rc(
            self.node_tape(),
            Op::LogSoftmax {
                x: self.src(),
                y_data: Rc::clone(&data),
                rows,
                cols,
            },
            self.shape().to_vec(),
            data,
        ))
    }
}

fn as_matrix(t: &Tensor, context: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(shape_err(context, "[rows, cols]", format!("{other:?}"))),
    }
}

fn softmax_row_into(row: &[f64], tau: f64, out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = ((x - m) / tau).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64], tau: f64) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
    let s: f64 = row.iter().map(|&x| (x / tau - m).exp()).sum();
    m + s.ln()
}

/// `y = x @ w + b` for `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, in_dim) = as_matrix(x, "linear input")?;
    let (w_in, out_dim) = as_matrix(w, "linear weight")?;
    if w_in != in_dim {
        return Err(shape_err(
            "linear",
            format!("weight [{in_dim}, *]"),
            format!("weight [{w_in}, {out_dim}]"),
        ));
    }
    if b.shape() != [out_dim] {
        return Err(shape_err(
            "linear bias",
            format!("[{out_dim}]"),
            format!("{:?}", b.shape()),
        ));
    }
    count_kernel();
    let mut data = vec![0.0; batch * out_dim];
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    for r in 0..batch {
        let yrow = &mut data[r * out_dim..(r + 1) * out_dim];
        yrow.copy_from_slice(bd);
        for i in 0..in_dim {
            let xv = xd[r * in_dim + i];
            let wrow = &wd[i * out_dim..(i + 1) * out_dim];
            for o in 0..out_dim {
                yrow[o] += xv * wrow[o];
            }
        }
    }
    let tape = common_tape(&[x, w, b])?;
    Ok(record(
        tape,
        Op::Linear {
            x: x.src(),
            w: w.src(),
            b: b.src(),
            x_data: x.data_rc(),
            w_data: w.data_rc(),
            batch,
            in_dim,
            out_dim,
        },
        vec![batch, out_dim],
        data,
    ))
}

/// Cross-correlation of `x: [B, C, H, W]` with `k: [O, C, Kh, Kw]`.
/// Output spatial size is `floor((H + 2p - Kh) / stride) + 1`.
pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let [batch, in_c, in_h, in_w] = *x.shape() else {
        return Err(shape_err("conv2d input", "[B, C, H, W]", format!("{:?}", x.shape())));
    };
    let [out_c, k_c, k_h, k_w] = *k.shape() else {
        return Err(shape_err("conv2d kernel", "[O, C, Kh, Kw]", format!("{:?}", k.shape())));
    };
    if k_c != in_c {
        return Err(shape_err(
            "conv2d channels",
            format!("kernel C = {in_c}"),
            format!("{k_c}"),
        ));
    }
    if stride < 1 {
        return Err(Error::InvalidParam("conv2d stride must be >= 1".into()));
    }
    if in_h + 2 * padding < k_h || in_w + 2 * padding < k_w {
        return Err(shape_err(
            "conv2d",
            format!("padded input >= kernel {k_h}x{k_w}"),
            format!("{}x{}", in_h + 2 * padding, in_w + 2 * padding),
        ));
    }
    let out_h = (in_h + 2 * padding - k_h) / stride + 1;
    let out_w = (in_w + 2 * padding - k_w) / stride + 1;
    count_kernel();
    let mut data = vec![0.0; batch * out_c * out_h * out_w];
    let xd = x.data();
    let kd = k.data();
    for b in 0..batch {
        for oc in 0..out_c {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = 0.0;
                    for ic in 0..in_c {
                        for kh in 0..k_h {
                            let ih = (oh * stride + kh) as isize - padding as isize;
                            if ih < 0 || ih >= in_h as isize {
                                continue;
                            }
                            for kw in 0..k_w {
                                let iw = (ow * stride + kw) as isize - padding as isize;
                                if iw < 0 || iw >= in_w as isize {
                                    continue;
                                }
                                let kv = kd[((oc * in_c + ic) * k_h + kh) * k_w + kw];
                                let xv = xd[((b * in_c + ic) * in_h + ih as usize) * in_w
                                    + iw as usize];
                                acc += kv * xv;
                            }
                        }
                    }
                    data[((b * out_c + oc) * out_h + oh) * out_w + ow] = acc;
                }
            }
        }
    }
    let dims = ConvDims {
        batch,
        in_c,
        in_h,
        in_w,
        out_c,
        k_h,
        k_w,
        out_h,
        out_w,
        stride,
        padding,
    };
    let tape = common_tape(&[x, k])?;
    Ok(record(
        tape,
        Op::Conv2d {
            x: x.src(),
            k: k.src(),
            x_data: x.data_rc(),
            k_data: k.data_rc(),
            dims,
        },
        vec![batch, out_c, out_h, out_w],
        data,
    ))
}

/// Spatial mean of `x: [B, C, H, W]` into `[B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [batch, channels, h, w] = *x.shape() else {
        return Err(shape_err("global_avg_pool", "[B, C, H, W]", format!("{:?}", x.shape())));
    };
    let spatial = h * w;
    count_kernel();
    let mut data = vec![0.0; batch * channels];
    for bc in 0..batch * channels {
        let slice = &x.data()[bc * spatial..(bc + 1) * spatial];
        data[bc] = slice.iter().sum::<f64>() / spatial as f64;
    }
    Ok(record(
        x.node_tape(),
        Op::GlobalAvgPool {
            x: x.src(),
            batch,
            channels,
            spatial,
        },
        vec![batch, channels],
        data,
    ))
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; optionally fold them into the running
    /// estimates with the fixed momentum.
    Train { update_stats: bool },
    /// Normalize with running statistics.
    Eval,
}

/// Running-stat momentum (fraction of the new batch folded in per update).
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over `[B, F]` (per feature) or `[B, C, H, W]`
/// (per channel). Train mode requires a batch of at least 2.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: BnMode,
) -> Result<Tensor> {
    let (batch, channels, spatial) = match *x.shape() {
        [b, c] => (b, c, 1),
        [b, c, h, w] => (b, c, h * w),
        ref other => {
            return Err(shape_err("batch_norm", "[B, F] or [B, C, H, W]", format!("{other:?}")))
        }
    };
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(shape_err(
            "batch_norm affine",
            format!("[{channels}]"),
            format!("{:?} / {:?}", gamma.shape(), beta.shape()),
        ));
    }
    if stats.mean.len() != channels {
        return Err(shape_err(
            "batch_norm running stats",
            format!("{channels}"),
            format!("{}", stats.mean.len()),
        ));
    }
    let batch_stats = matches!(mode, BnMode::Train { .. });
    if batch_stats && batch < 2 {
        return Err(Error::DegenerateBatch(batch));
    }
    count_kernel();

    let n = (batch * spatial) as f64;
    let xd = x.data();
    let at = |b: usize, c: usize, s: usize| (b * channels + c) * spatial + s;

    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    if batch_stats {
        for c in 0..channels {
            let mut m = 0.0;
            for b in 0..batch {
                for s in 0..spatial {
                    m += xd[at(b, c, s)];
                }
            }
            m /= n;
            let mut v = 0.0;
            for b in 0..batch {
                for s in 0..spatial {
                    let d = xd[at(b, c, s)] - m;
                    v += d * d;
                }
            }
            mean[c] = m;
            var[c] = v / n;
        }
        if let BnMode::Train { update_stats: true } = mode {
            for c in 0..channels {
                // Unbiased variance feeds the running estimate.
                let unbiased = var[c] * n / (n - 1.0);
                stats.mean[c] = (1.0 - BN_MOMENTUM) * stats.mean[c] + BN_MOMENTUM * mean[c];
                stats.var[c] = (1.0 - BN_MOMENTUM) * stats.var[c] + BN_MOMENTUM * unbiased;
            }
        }
    } else {
        mean.copy_from_slice(&stats.mean);
        var.copy_from_slice(&stats.var);
    }

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; batch * channels * spatial];
    let mut data = vec![0.0; batch * channels * spatial];
    let gd = gamma.data();
    let bd = beta.data();
    for c in 0..channels {
        for b in 0..batch {
            for s in 0..spatial {
                let i = at(b, c, s);
                let h = (xd[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                data[i] = gd[c] * h + bd[c];
            }
        }
    }
    let tape = common_tape(&[x, gamma, beta])?;
    Ok(record(
        tape,
        Op::BatchNorm {
            x: x.src(),
            gamma: gamma.src(),
            beta: beta.src(),
            xhat: Rc::new(xhat),
            inv_std,
            gamma_data: gamma.data_rc(),
            batch,
            channels,
            spatial,
            batch_stats,
        },
        x.shape().to_vec(),
        data,
    ))
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, cols) = as_matrix(logits, "cross_entropy")?;
    if labels.len() != rows {
        return Err(shape_err(
            "cross_entropy labels",
            format!("{rows}"),
            format!("{}", labels.len()),
        ));
    }
    for (r, &l) in labels.iter().enumerate() {
        if l >= cols {
            return Err(Error::Index(format!(
                "label {l} at row {r} out of range for {cols} classes"
            )));
        }
    }
    count_kernel();
    let mut probs = vec![0.0; rows * cols];
    let mut loss = 0.0;
    for r in 0..rows {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let lse = log_sum_exp(row, 1.0);
        loss += lse - row[labels[r]];
        softmax_row_into(row, 1.0, &mut probs[r * cols..(r + 1) * cols]);
    }
    loss /= rows as f64;
    Ok(record(
        logits.node_tape(),
        Op::CrossEntropy {
            logits: logits.src(),
            probs,
            labels: Rc::new(labels.to_vec()),
            rows,
            cols,
        },
        vec![1],
        vec![loss],
    ))
}

/// Temperature-scaled distillation divergence:
/// `tau^2 * mean_batch sum_k p_t (log p_t - log p_s)` with
/// `p = softmax(logits / tau)`. The teacher side receives gradient unless the
/// caller detaches it; temperatures below 1 are unusual for distillation but
/// permitted.
pub fn kl_div_tau(student_logits: &Tensor, teacher_logits: &Tensor, tau: f64) -> Result<Tensor> {
    expect_same_shape("kl_div_tau", student_logits, teacher_logits)?;
    if tau <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "kl temperature must be positive, got {tau}"
        )));
    }
    let (rows, cols) = as_matrix(student_logits, "kl_div_tau")?;
    count_kernel();
    let mut p_student = vec![0.0; rows * cols];
    let mut p_teacher = vec![0.0; rows * cols];
    let mut total = 0.0;
    for r in 0..rows {
        let s_row = &student_logits.data()[r * cols..(r + 1) * cols];
        let t_row = &teacher_logits.data()[r * cols..(r + 1) * cols];
        let s_lse = log_sum_exp(s_row, tau);
        let t_lse = log_sum_exp(t_row, tau);
        let mut row_kl = 0.0;
        for c in 0..cols {
            let lps = s_row[c] / tau - s_lse;
            let lpt = t_row[c] / tau - t_lse;
            let pt = lpt.exp();
            p_student[r * cols + c] = lps.exp();
            p_teacher[r * cols + c] = pt;
            row_kl += pt * (lpt - lps);
        }
        total += row_kl;
    }
    let loss = tau * tau * total / rows as f64;
    let tape = common_tape(&[student_logits, teacher_logits])?;
    Ok(record(
        tape,
        Op::KlDiv {
            student: student_logits.src(),
            teacher: teacher_logits.src(),
            p_student,
            p_teacher,
            tau,
            rows,
            cols,
        },
        vec![1],
        vec![loss],
    ))
}

/// Residual combine `branch * gate + skip` for a scalar `gate`.
///
/// Exact binary gates take exact paths: gate 1 computes `branch + skip`
/// bit-identically to [`add`], gate 0 returns `skip` unchanged. The gradient
/// always flows to all three inputs (`d gate = sum(upstream * branch)`).
pub fn mask_residual(branch: &Tensor, skip: &Tensor, gate: &Tensor) -> Result<Tensor> {
    expect_same_shape("mask_residual", branch, skip)?;
    if gate.numel() != 1 {
        return Err(shape_err("mask_residual gate", "[1]", format!("{:?}", gate.shape())));
    }
    let g = gate.data()[0];
    count_kernel();
    let data: Vec<f64> = if g == 1.0 {
        branch.data().iter().zip(skip.data()).map(|(f, x)| f + x).collect()
    } else if g == 0.0 {
        skip.data().to_vec()
    } else {
        branch
            .data()
            .iter()
            .zip(skip.data())
            .map(|(f, x)| f * g + x)
            .collect()
    };
    let tape = common_tape(&[branch, skip, gate])?;
    Ok(record(
        tape,
        Op::MaskResidual {
            branch: branch.src(),
            skip: skip.src(),
            gate: gate.src(),
            branch_data: branch.data_rc(),
            gate_value: g,
        },
        branch.shape().to_vec(),
        data,
    ))
}

/// Straight-through estimator node: forward takes the exact `hard` values,
/// backward passes the upstream gradient to `soft` unchanged.
pub fn straight_through(hard: Vec<f64>, soft: &Tensor) -> Result<Tensor> {
    if hard.len() != soft.numel() {
        return Err(shape_err(
            "straight_through",
            format!("{}", soft.numel()),
            format!("{}", hard.len()),
        ));
    }
    Ok(record(
        soft.node_tape(),
        Op::StraightThrough { soft: soft.src() },
        soft.shape().to_vec(),
        hard,
    ))
}
