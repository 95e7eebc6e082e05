use std::cell::RefCell;
use std::collections::HashMap;

use super::ops::Op;
use super::{ParamId, ParamStore, TResult, Tensor, TensorError};

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Records every op of one forward pass in execution order.
///
/// Backward walks the record in reverse, so each node is visited exactly once
/// after all of its consumers. A tape is single-threaded; build one per pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()), grad_enabled: true }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn no_grad() -> Self {
        Tape { grad_enabled: false, ..Tape::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf holding `t`; differentiable when `t.requires_grad()` is set.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let rg = t.requires_grad() && self.grad_enabled;
        self.push_raw(t, Op::Leaf, rg)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_raw(t.with_grad(false), Op::Leaf, false)
    }

    /// Leaf for a stored parameter, created once per tape. Frozen parameters
    /// are constants and never receive a gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&idx) = self.params.borrow().get(&id) {
            return Var { tape: self, idx };
        }
        let rg = store.is_trainable(id) && self.grad_enabled;
        let v = self.push_raw(store.value(id).clone().with_grad(rg), Op::Leaf, rg);
        self.params.borrow_mut().insert(id, v.idx);
        v
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    pub(crate) fn push(&self, name: &'static str, value: Tensor, op: Op) -> TResult<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        // Ops with no differentiable input are stored as constants.
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push_raw(value, op, rg))
    }

    pub(crate) fn with_values<R>(&self, f: impl FnOnce(&[Node]) -> R) -> R {
        f(&self.nodes.borrow())
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> TResult<Gradients> {
        let nodes = self.nodes.borrow();
        let lnode = &nodes[loss.idx];
        if lnode.value.numel() != 1 {
            return Err(TensorError::NotScalar(lnode.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.idx).map(|_| None).collect();
        if lnode.requires_grad {
            grads[loss.idx] = Some(vec![1.0]);
        }
        for i in (0..=loss.idx).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            node.op.backward(&g, &node.value, &nodes, &mut grads);
        }
        let params = self.params.borrow().iter().map(|(&p, &i)| (p, i)).collect();
        Ok(Gradients { grads, params })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|&i| self.grads.get(i)).and_then(|g| g.as_deref())
    }

    /// Parameters that received a gradient, ordered by id.
    pub fn params(&self) -> Vec<(ParamId, &[f64])> {
        let mut v: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&p, &i)| self.grads.get(i).and_then(|g| g.as_deref()).map(|g| (p, g)))
            .collect();
        v.sort_by_key(|(p, _)| *p);
        v
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.with_values(|n| n[self.idx].value.clone())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_values(|n| n[self.idx].value.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.tape.with_values(|n| n[self.idx].value.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with_values(|n| n[self.idx].requires_grad)
    }
}
