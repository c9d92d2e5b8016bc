//! Trainable parameters and the SGD update rule.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Tape, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named, trainable array with its momentum buffer. The value buffer is
/// shared with any tensors mounted from it; updates copy-on-write.
#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    id: u64,
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    momentum: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Param {
        assert_eq!(
            value.len(),
            shape.iter().product::<usize>(),
            "param value length must match shape"
        );
        let momentum = vec![0.0; value.len()];
        Param {
            name: name.into(),
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            value: Rc::new(value),
            momentum,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.value)
    }

    pub fn momentum(&self) -> &[f64] {
        &self.momentum
    }

    pub fn set_value(&mut self, value: Vec<f64>) {
        assert_eq!(value.len(), self.len(), "set_value length mismatch");
        self.value = Rc::new(value);
    }

    pub fn set_momentum(&mut self, momentum: Vec<f64>) {
        assert_eq!(momentum.len(), self.len(), "set_momentum length mismatch");
        self.momentum = momentum;
    }

    /// Mount on a tape as a gradient-taking leaf, or use as a constant.
    pub fn tensor(&self, tape: Option<&Tape>) -> Tensor {
        match tape {
            Some(t) => t.mount(self),
            None => Tensor::constant_rc(self.shape.clone(), Rc::clone(&self.value)),
        }
    }
}

/// Parameter gradients collected from a tape after backward.
pub struct ParamGrads(HashMap<u64, Vec<f64>>);

impl ParamGrads {
    pub(crate) fn new(map: HashMap<u64, Vec<f64>>) -> Self {
        ParamGrads(map)
    }

    pub fn get(&self, param: &Param) -> Option<&[f64]> {
        self.0.get(&param.id()).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Classic momentum SGD with weight decay folded into the gradient:
/// `v <- momentum * v + g + wd * theta; theta <- theta - lr * v`.
/// Parameters the loss never reached are left untouched.
pub fn sgd_update<'a>(
    params: impl IntoIterator<Item = &'a mut Param>,
    grads: &ParamGrads,
    cfg: &SgdConfig,
) {
    for p in params {
        let Some(g) = grads.get(p) else { continue };
        let mut value = p.value().to_vec();
        for i in 0..value.len() {
            let v = cfg.momentum * p.momentum[i] + g[i] + cfg.weight_decay * value[i];
            p.momentum[i] = v;
            value[i] -= cfg.lr * v;
        }
        p.value = Rc::new(value);
    }
}
