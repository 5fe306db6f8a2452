//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its value and, when gradients are being
//! recorded, a closure mapping the output gradient to parent gradients.
//! Gradients are only retained for leaves (parameters and tracked inputs).

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Maps the output gradient to one gradient per parent.
///
/// Arguments: output gradient, parent values, output value, which parents need a gradient.
pub type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    needs_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Float> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|n| self.leaves.get(n))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

impl<T: Float> Tape<T> {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that only evaluates values.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// Input whose gradient is retained (used by gradient checks).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let rec = self.record;
        self.leaf(value, rec, None)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<T>, trainable: bool) -> Var {
        let rec = self.record && trainable;
        self.leaf(value, rec, Some(id))
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an op node. The closure is dropped when no parent needs a gradient.
    pub fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let needs_grad = self.record && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward() requires a scalar output"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        let mut leaves = HashMap::new();
        let mut params = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.backward {
                None => {
                    if let Some(id) = node.param {
                        params.insert(id, idx);
                    }
                    leaves.insert(idx, g);
                }
                Some(f) => {
                    let pvals: Vec<&Tensor<T>> =
                        node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                    let needs: Vec<bool> =
                        node.parents.iter().map(|&p| self.nodes[p].needs_grad).collect();
                    let pgrads = f(&g, &pvals, &node.value, &needs);
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    for ((&p, pg), need) in node.parents.iter().zip(pgrads).zip(needs) {
                        let (Some(pg), true) = (pg, need) else { continue };
                        debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Grads { leaves, params }
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; running statistics are queued for update.
    Train,
    /// Running statistics; nothing is mutated.
    Eval,
}

/// Running-statistics update produced by a batch-norm layer in training mode.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Forward-pass context: tape, read-only parameters, and mode.
pub struct Ctx<'a, T: Float> {
    pub tape: Tape<T>,
    pub params: &'a ParamStore<T>,
    pub mode: Mode,
    memo: HashMap<ParamId, Var>,
    pub stat_updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(params: &'a ParamStore<T>, mode: Mode, record: bool) -> Self {
        Self {
            tape: if record { Tape::new() } else { Tape::no_grad() },
            params,
            mode,
            memo: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn train(params: &'a ParamStore<T>) -> Self {
        Self::new(params, Mode::Train, true)
    }

    pub fn eval(params: &'a ParamStore<T>) -> Self {
        Self::new(params, Mode::Eval, false)
    }

    /// Places a parameter on the tape once and reuses the node afterwards.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.memo.get(&id) {
            return v;
        }
        let param = self.params.entry(id);
        let v = self
            .tape
            .param(id, param.value.clone(), param.is_trainable());
        self.memo.insert(id, v);
        v
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }
}
