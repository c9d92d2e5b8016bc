//! Dense double-precision tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes in
//! creation order (parents always precede children, so the list is already a
//! valid topological order). [`backward`] walks the list once in reverse and
//! accumulates gradients; leaf gradients are then read back through the tape.
//!
//! Tensors are cheap handles: the value buffer is shared behind `Rc`, and a
//! tensor participates in differentiation only if it carries a node reference.
//! A tensor without a node never accumulates a gradient.

mod check;
mod ops;
mod param;
#[cfg(test)]
mod tests;

pub use check::{compare_grads, finite_diff_check, finite_diff_grad, numeric_grad, FdReport};
pub use ops::*;
pub use param::{sgd_update, Param, ParamGrads, SgdConfig};

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};

/// Parent slot of a recorded node: `None` marks a constant input that takes
/// no gradient.
pub(crate) type Src = Option<usize>;

/// Saved forward context plus parent links for one recorded operation.
pub(crate) enum Op {
    Leaf,
    Add {
        a: Src,
        b: Src,
    },
    Sub {
        a: Src,
        b: Src,
    },
    Mul {
        a: Src,
        b: Src,
        a_data: Rc<Vec<f64>>,
        b_data: Rc<Vec<f64>>,
    },
    Scale {
        x: Src,
        c: f64,
    },
    Log {
        x: Src,
        x_data: Rc<Vec<f64>>,
    },
    Sum {
        x: Src,
        n: usize,
    },
    Mean {
        x: Src,
        n: usize,
    },
    At {
        x: Src,
        i: usize,
    },
    Gather {
        x: Src,
        idx: Rc<Vec<usize>>,
    },
    Linear {
        x: Src,
        w: Src,
        b: Src,
        x_data: Rc<Vec<f64>>,
        w_data: Rc<Vec<f64>>,
        batch: usize,
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        x: Src,
        k: Src,
        x_data: Rc<Vec<f64>>,
        k_data: Rc<Vec<f64>>,
        dims: ConvDims,
    },
    Relu {
        x: Src,
        y_data: Rc<Vec<f64>>,
    },
    GlobalAvgPool {
        x: Src,
        batch: usize,
        channels: usize,
        spatial: usize,
    },
    BatchNorm {
        x: Src,
        gamma: Src,
        beta: Src,
        xhat: Rc<Vec<f64>>,
        inv_std: Vec<f64>,
        gamma_data: Rc<Vec<f64>>,
        batch: usize,
        channels: usize,
        spatial: usize,
        batch_stats: bool,
    },
    SoftmaxTau {
        x: Src,
        y_data: Rc<Vec<f64>>,
        tau: f64,
        rows: usize,
        cols: usize,
    },
    LogSoftmax {
        x: Src,
        y_data: Rc<Vec<f64>>,
        rows: usize,
        cols: usize,
    },
    CrossEntropy {
        logits: Src,
        probs: Vec<f64>,
        labels: Rc<Vec<usize>>,
        rows: usize,
        cols: usize,
    },
    KlDiv {
        student: Src,
        teacher: Src,
        p_student: Vec<f64>,
        p_teacher: Vec<f64>,
        tau: f64,
        rows: usize,
        cols: usize,
    },
    MaskResidual {
        branch: Src,
        skip: Src,
        gate: Src,
        branch_data: Rc<Vec<f64>>,
        gate_value: f64,
    },
    StraightThrough {
        soft: Src,
    },
}

#[derive(Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
}

pub(crate) struct Node {
    pub op: Op,
    /// Output element count; the gradient buffer for this node has this length.
    pub len: usize,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_mounts: HashMap<u64, usize>,
    backward_done: bool,
}

/// Recording of one forward computation.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                param_mounts: HashMap::new(),
                backward_done: false,
            })),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn backward_done(&self) -> bool {
        self.inner.borrow().backward_done
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn push(&self, op: Op, len: usize) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { op, len });
        inner.nodes.len() - 1
    }

    /// A leaf tensor that requires gradient.
    pub fn leaf(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let len = data.len();
        assert_eq!(
            len,
            shape.iter().product::<usize>(),
            "leaf data length must match shape"
        );
        let id = self.push(Op::Leaf, len);
        Tensor {
            shape,
            data: Rc::new(data),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    /// Mount a parameter as a leaf, memoized by parameter id so repeated
    /// mounts within one tape share a node and accumulate gradients.
    pub fn mount(&self, param: &Param) -> Tensor {
        let existing = self.inner.borrow().param_mounts.get(&param.id()).copied();
        let id = match existing {
            Some(id) => id,
            None => {
                let id = self.push(Op::Leaf, param.value().len());
                self.inner.borrow_mut().param_mounts.insert(param.id(), id);
                id
            }
        };
        Tensor {
            shape: param.shape().to_vec(),
            data: param.value_rc(),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    /// Gradient of the node `id`, if backward reached it.
    fn grad_of(&self, id: usize) -> Option<Vec<f64>> {
        self.inner.borrow().grads.get(id).and_then(|g| g.clone())
    }

    /// Gradients of all mounted parameters, keyed by parameter id.
    pub fn param_grads(&self) -> ParamGrads {
        let inner = self.inner.borrow();
        let mut out = HashMap::new();
        for (&pid, &node) in &inner.param_mounts {
            if let Some(Some(g)) = inner.grads.get(node) {
                out.insert(pid, g.clone());
            }
        }
        ParamGrads::new(out)
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub tape: Tape,
    pub id: usize,
}

/// Dense row-major tensor of `f64` values.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

impl Tensor {
    /// Constant tensor outside any tape; never accumulates gradient.
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length must match shape"
        );
        Tensor {
            shape,
            data: Rc::new(data),
            node: None,
        }
    }

    pub(crate) fn constant_rc(shape: Vec<usize>, data: Rc<Vec<f64>>) -> Tensor {
        Tensor {
            shape,
            data,
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![1], vec![v])
    }

    pub(crate) fn from_op_rc(tape: &Tape, op: Op, shape: Vec<usize>, data: Rc<Vec<f64>>) -> Tensor {
        let id = tape.push(op, data.len());
        Tensor {
            shape,
            data,
            node: Some(NodeRef {
                tape: tape.clone(),
                id,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Gradient populated by [`backward`]; `None` for constants and for nodes
    /// the loss does not reach.
    pub fn grad(&self) -> Option<Vec<f64>> {
        let node = self.node.as_ref()?;
        node.tape.grad_of(node.id)
    }

    /// Value-identical tensor detached from the tape. Shares the buffer, so
    /// `detach(x).data == x.data` bit for bit; contributes zero gradient.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    /// Same buffer and node under a new shape; element count must match.
    /// Gradients are flat, so differentiation is unaffected.
    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape must preserve element count"
        );
        Tensor {
            shape,
            data: Rc::clone(&self.data),
            node: self.node.clone(),
        }
    }

    pub(crate) fn src(&self) -> Src {
        self.node.as_ref().map(|n| n.id)
    }

    pub(crate) fn node_tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }
}

/// Stop-gradient: value-identical, contributes zero gradient to ancestors.
pub fn stopgrad(x: &Tensor) -> Tensor {
    x.detach()
}

/// Resolve the tape shared by the given tensors, if any of them records one.
/// Errors when two tensors belong to different tapes.
pub(crate) fn common_tape<'a>(tensors: &[&'a Tensor]) -> Result<Option<&'a Tape>> {
    let mut found: Option<&Tape> = None;
    for t in tensors {
        if let Some(tape) = t.node_tape() {
            match found {
                None => found = Some(tape),
                Some(f) if f.same_tape(tape) => {}
                Some(_) => return Err(Error::TapeMismatch),
            }
        }
    }
    Ok(found)
}

fn add_into(acc: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = acc.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Reverse-topological gradient accumulation from a scalar loss.
///
/// May be called once per tape; leaf gradients are afterwards available via
/// [`Tensor::grad`] and [`Tape::param_grads`].
pub fn backward(loss: &Tensor) -> Result<()> {
    let node = loss
        .node
        .as_ref()
        .ok_or_else(|| Error::Contract("backward on a tensor with no tape".into()))?;
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape
        )));
    }
    let mut inner = node.tape.inner.borrow_mut();
    if inner.backward_done {
        return Err(Error::Contract("backward called twice on one tape".into()));
    }
    inner.backward_done = true;

    let n = inner.nodes.len();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
    grads[node.id] = Some(vec![1.0]);

    let TapeInner { nodes, .. } = &mut *inner;
    for id in (0..=node.id).rev() {
        let Some(up) = grads[id].take() else { continue };
        step_backward(&nodes[id].op, &up, nodes, &mut grads);
        grads[id] = Some(up);
    }
    inner.grads = grads;
    Ok(())
}

fn step_backward(op: &Op, up: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let len_of = |src: usize| nodes[src].len;
    match op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            for &src in [a, b].into_iter().flatten() {
                add_into(&mut grads[src], len_of(src), |g| {
                    for (gi, ui) in g.iter_mut().zip(up) {
                        *gi += ui;
                    }
                });
            }
        }
        Op::Sub { a, b } => {
            if let Some(src) = *a {
                add_into(&mut grads[src], len_of(src), |g| {
                    for (gi, ui) in g.iter_mut().zip(up) {
                        *gi += ui;
                    }
                });
            }
            if let Some(src) = *b {
                add_into(&mut grads[src], len_of(src), |g| {
                    for (gi, ui) in g.iter_mut().zip(up) {
                        *gi -= ui;
                    }
                });
            }
        }
        Op::Mul {
            a,
            b,
            a_data,
            b_data,
        } => {
            if let Some(src) = *a {
                add_into(&mut grads[src], len_of(src), |g| {
                    for i in 0..up.len() {
                        g[i] += up[i] * b_data[i];
                    }
                });
            }
            if let Some(src) = *b {
                add_into(&mut grads[src], len_of(src), |g| {
                    for i in 0..up.len() {
                        g[i] += up[i] * a_data[i];
                    }
                });
            }
        }
        Op::Scale { x, c } => {
            if let Some(src) = *x {
                add_into(&mut grads[src], len_of(src), |g| {
                    for i in 0..up.len() {
                        g[i] += up[i] * c;
                    }
                });
            }
        }
        Op::Log { x, x_data } => {
            if let Some(src) = *x {
                add_into(&mut grads[src], len_of(src), |g| {
                    for i in 0..up.len() {
                        g[i] += up[i] / x_data[i];
                    }
                });
            }
        }
        Op::Sum { x, n } => {
            if let Some(src) = *x {
                add_into(&mut grads[src], *n, |g| {
                    for gi in g.iter_mut() {
                        *gi += up[0];
                    }
                });
            }
        }
        Op::Mean { x, n } => {
            if let Some(src) = *x {
                let scale = 1.0 / *n as f64;
                add_into(&mut grads[src], *n, |g| {
                    for gi in g.iter_mut() {
                        *gi += up[0] * scale;
                    }
                });
            }
        }
        Op::At { x, i } => {
            if let Some(src) = *x {
                add_into(&mut grads[src], len_of(src), |g| {
                    g[*i] += up[0];
                });
            }
        }
        Op::Gather { x, idx } => {
            if let Some(src) = *x {
                add_into(&mut grads[src], len_of(src), |g| {
                    for (j, &i) in idx.iter().enumerate() {
                        g[i] += up[j];
                    }
                });
            }
        }
        Op::Linear {
            x,
            w,
            b,
            x_data,
            w_data,
            batch,
            in_dim,
            out_dim,
        } => {
            let (bsz, i_d, o_d) = (*batch, *in_dim, *out_dim);
            if let Some(src) = *x {
                add_into(&mut grads[src], bsz * i_d, |g| {
                    for r in 0..bsz {
                        for i in 0..i_d {
                            let mut acc = 0.0;
                            let wrow = &w_data[i * o_d..(i + 1) * o_d];
                            let urow = &up[r * o_d..(r + 1) * o_d];
                            for o in 0..o_d {
                                acc += urow[o] * wrow[o];
                            }
                            g[r * i_d + i] += acc;
                        }
                    }
                });
            }
            if let Some(src) = *w {
                add_into(&mut grads[src], i_d * o_d, |g| {
                    for r in 0..bsz {
                        let urow = &up[r * o_d..(r + 1) * o_d];
                        for i in 0..i_d {
                            let xv = x_data[r * i_d + i];
                            let grow = &mut g[i * o_d..(i + 1) * o_d];
                            for o in 0..o_d {
                                grow[o] += xv * urow[o];
                            }
                        }
                    }
                });
            }
            if let Some(src) = *b {
                add_into(&mut grads[src], o_d, |g| {
                    for r in 0..bsz {
                        let urow = &up[r * o_d..(r + 1) * o_d];
                        for o in 0..o_d {
                            g[o] += urow[o];
                        }
                    }
                });
            }
        }
        Op::Conv2d {
            x,
            k,
            x_data,
            k_data,
            dims,
        } => {
            let d = *dims;
            if let Some(src) = *x {
                add_into(&mut grads[src], d.batch * d.in_c * d.in_h * d.in_w, |g| {
                    conv2d_backward_input(g, up, k_data, &d);
                });
            }
            if let Some(src) = *k {
                add_into(&mut grads[src], d.out_c * d.in_c * d.k_h * d.k_w, |g| {
                    conv2d_backward_kernel(g, up, x_data, &d);
                });
            }
        }
        Op::Relu { x, y_data } => {
            if let Some(src) = *x {
                add_into(&mut grads[src], len_of(src), |g| {
                    for i in 0..up.len() {
                        if y_data[i] > 0.0 {
                            g[i] += up[i];
                        }
                    }
                });
            }
        }
        Op::GlobalAvgPool {
            x,
            batch,
            channels,
            spatial,
        } => {
            if let Some(src) = *x {
                let scale = 1.0 / *spatial as f64;
                add_into(&mut grads[src], batch * channels * spatial, |g| {
                    for bc in 0..batch * channels {
                        let u = up[bc] * scale;
                        for s in 0..*spatial {
                            g[bc * spatial + s] += u;
                        }
                    }
                });
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            gamma_data,
            batch,
            channels,
            spatial,
            batch_stats,
        } => {
            let (bsz, ch, sp) = (*batch, *channels, *spatial);
            let n = (bsz * sp) as f64;
            let at = |b: usize, c: usize, s: usize| (b * ch + c) * sp + s;
            if let Some(src) = *beta {
                add_into(&mut grads[src], ch, |g| {
                    for c in 0..ch {
                        let mut acc = 0.0;
                        for b in 0..bsz {
                            for s in 0..sp {
                                acc += up[at(b, c, s)];
                            }
                        }
                        g[c] += acc;
                    }
                });
            }
            if let Some(src) = *gamma {
                add_into(&mut grads[src], ch, |g| {
                    for c in 0..ch {
                        let mut acc = 0.0;
                        for b in 0..bsz {
                            for s in 0..sp {
                                let i = at(b, c, s);
                                acc += up[i] * xhat[i];
                            }
                        }
                        g[c] += acc;
                    }
                });
            }
            if let Some(src) = *x {
                add_into(&mut grads[src], bsz * ch * sp, |g| {
                    for c in 0..ch {
                        if *batch_stats {
                            // Batch statistics participate in the forward value.
                            let mut sum_dy = 0.0;
                            let mut sum_dy_xhat = 0.0;
                            for b in 0..bsz {
                                for s in 0..sp {
                                    let i = at(b, c, s);
                                    let dy = up[i] * gamma_data[c];
                                    sum_dy += dy;
                                    sum_dy_xhat += dy * xhat[i];
                                }
                            }
                            for b in 0..bsz {
                                for s in 0..sp {
                                    let i = at(b, c, s);
                                    let dy = up[i] * gamma_data[c];
                                    g[i] += inv_std[c] * (dy - sum_dy / n - xhat[i] * sum_dy_xhat / n);
                                }
                            }
                        } else {
                            // Running statistics are constants.
                            for b in 0..bsz {
                                for s in 0..sp {
                                    let i = at(b, c, s);
                                    g[i] += up[i] * gamma_data[c] * inv_std[c];
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::SoftmaxTau {
            x,
            y_data,
            tau,
            rows,
            cols,
        } => {
            if let Some(src) = *x {
                add_into(&mut grads[src], rows * cols, |g| {
                    for r in 0..*rows {
                        let y = &y_data[r * cols..(r + 1) * cols];
                        let u = &up[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(u).map(|(yi, ui)| yi * ui).sum();
                        for c in 0..*cols {
                            g[r * cols + c] += y[c] * (u[c] - dot) / tau;
                        }
                    }
                });
            }
        }
        Op::LogSoftmax {
            x,
            y_data,
            rows,
            cols,
        } => {
            if let Some(src) = *x {
                add_into(&mut grads[src], rows * cols, |g| {
                    for r in 0..*rows {
                        let y = &y_data[r * cols..(r + 1) * cols];
                        let u = &up[r * cols..(r + 1) * cols];
                        let usum: f64 = u.iter().sum();
                        for c in 0..*cols {
                            g[r * cols + c] += u[c] - y[c].exp() * usum;
                        }
                    }
                });
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            labels,
            rows,
            cols,
        } => {
            if let Some(src) = *logits {
                let scale = up[0] / *rows as f64;
                add_into(&mut grads[src], rows * cols, |g| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            let indicator = if labels[r] == c { 1.0 } else { 0.0 };
                            g[r * cols + c] += scale * (probs[r * cols + c] - indicator);
                        }
                    }
                });
            }
        }
        Op::KlDiv {
            student,
            teacher,
            p_student,
            p_teacher,
            tau,
            rows,
            cols,
        } => {
            let scale = up[0] * tau / *rows as f64;
            if let Some(src) = *student {
                add_into(&mut grads[src], rows * cols, |g| {
                    for i in 0..rows * cols {
                        g[i] += scale * (p_student[i] - p_teacher[i]);
                    }
                });
            }
            if let Some(src) = *teacher {
                add_into(&mut grads[src], rows * cols, |g| {
                    for r in 0..*rows {
                        let ps = &p_student[r * cols..(r + 1) * cols];
                        let pt = &p_teacher[r * cols..(r + 1) * cols];
                        let row_kl: f64 = pt
                            .iter()
                            .zip(ps)
                            .map(|(&t, &s)| t * (t.ln() - s.ln()))
                            .sum();
                        for c in 0..*cols {
                            let diff = pt[c].ln() - ps[c].ln();
                            g[r * cols + c] += scale * pt[c] * (diff - row_kl);
                        }
                    }
                });
            }
        }
        Op::MaskResidual {
            branch,
            skip,
            gate,
            branch_data,
            gate_value,
        } => {
            if let Some(src) = *branch {
                add_into(&mut grads[src], len_of(src), |g| {
                    for i in 0..up.len() {
                        g[i] += up[i] * gate_value;
                    }
                });
            }
            if let Some(src) = *skip {
                add_into(&mut grads[src], len_of(src), |g| {
                    for (gi, ui) in g.iter_mut().zip(up) {
                        *gi += ui;
                    }
                });
            }
            if let Some(src) = *gate {
                add_into(&mut grads[src], 1, |g| {
                    let mut acc = 0.0;
                    for i in 0..up.len() {
                        acc += up[i] * branch_data[i];
                    }
                    g[0] += acc;
                });
            }
        }
        Op::StraightThrough { soft } => {
            if let Some(src) = *soft {
                add_into(&mut grads[src], len_of(src), |g| {
                    for (gi, ui) in g.iter_mut().zip(up) {
                        *gi += ui;
                    }
                });
            }
        }
    }
}

fn conv2d_backward_input(g: &mut [f64], up: &[f64], k_data: &[f64], d: &ConvDims) {
    for b in 0..d.batch {
        for oc in 0..d.out_c {
            for oh in 0..d.out_h {
                for ow in 0..d.out_w {
                    let u = up[((b * d.out_c + oc) * d.out_h + oh) * d.out_w + ow];
                    if u == 0.0 {
                        continue;
                    }
                    for ic in 0..d.in_c {
                        for kh in 0..d.k_h {
                            let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.in_h as isize {
                                continue;
                            }
                            for kw in 0..d.k_w {
                                let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                                if iw < 0 || iw >= d.in_w as isize {
                                    continue;
                                }
                                let kidx = ((oc * d.in_c + ic) * d.k_h + kh) * d.k_w + kw;
                                let xidx = ((b * d.in_c + ic) * d.in_h + ih as usize) * d.in_w
                                    + iw as usize;
                                g[xidx] += u * k_data[kidx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernel(g: &mut [f64], up: &[f64], x_data: &[f64], d: &ConvDims) {
    for b in 0..d.batch {
        for oc in 0..d.out_c {
            for oh in 0..d.out_h {
                for ow in 0..d.out_w {
                    let u = up[((b * d.out_c + oc) * d.out_h + oh) * d.out_w + ow];
                    if u == 0.0 {
                        continue;
                    }
                    for ic in 0..d.in_c {
                        for kh in 0..d.k_h {
                            let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.in_h as isize {
                                continue;
                            }
                            for kw in 0..d.k_w {
                                let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                                if iw < 0 || iw >= d.in_w as isize {
                                    continue;
                                }
                                let kidx = ((oc * d.in_c + ic) * d.k_h + kh) * d.k_w + kw;
                                let xidx = ((b * d.in_c + ic) * d.in_h + ih as usize) * d.in_w
                                    + iw as usize;
                                g[kidx] += u * x_data[xidx];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn expect_same_shape(context: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err(
            context,
            format!("{:?}", a.shape),
            format!("{:?}", b.shape),
        ));
    }
    Ok(())
}
