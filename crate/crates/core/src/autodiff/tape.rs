use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{contract, Result};
use crate::memory::{record_alloc, record_free};

/// Inputs handed to a node's backward closure.
pub(crate) struct BackwardArgs<'a> {
    pub inputs: &'a [&'a [f64]],
    pub output: &'a [f64],
    pub grad: &'a [f64],
    pub needs: &'a [bool],
}

/// Returns one optional gradient contribution per input, in input order.
pub(crate) type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    value: Option<Arc<Vec<f64>>>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<usize>,
    retained: usize,
}

/// Records operations in execution order so gradients can be accumulated in
/// reverse. A tape is confined to the thread that builds it.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: Vec<Tensor>,
    param_nodes: RefCell<HashMap<usize, usize>>,
    spent: Cell<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: Vec::new(),
            param_nodes: RefCell::new(HashMap::new()),
            spent: Cell::new(false),
        }
    }

    /// A tape that can place the parameters of `store` as leaves.
    pub fn with_params(store: &ParamStore) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: store.tensors().to_vec(),
            param_nodes: RefCell::new(HashMap::new()),
            spent: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input leaf.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push_leaf(t, true, None)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_leaf(t, false, None)
    }

    /// The leaf for parameter `id`, created on first use.
    pub fn param(&self, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_nodes.borrow().get(&id.0) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let t = self
            .params
            .get(id.0)
            .unwrap_or_else(|| panic!("parameter {} is not bound to this tape", id.0))
            .clone();
        let v = self.push_leaf(t, true, Some(id.0));
        self.param_nodes.borrow_mut().insert(id.0, v.id);
        v
    }

    fn push_leaf(&self, t: Tensor, requires_grad: bool, param: Option<usize>) -> Var<'_> {
        let shape = t.shape().to_vec();
        let value = t.arc().clone();
        // Parameters are shared storage, not activations.
        let retained = if param.is_some() { 0 } else { value.len() };
        record_alloc(retained, "leaf");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: Some(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            param,
            retained,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends an op node. `extra` counts saved intermediates beyond the
    /// output value; `view` marks outputs that share storage.
    pub(crate) fn push_op(
        &self,
        label: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        inputs: &[Var<'_>],
        extra: usize,
        backward: BackwardFn,
    ) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.push_raw(label, shape, Arc::new(value), inputs, extra, false, backward)
    }

    pub(crate) fn push_view(
        &self,
        shape: Vec<usize>,
        value: Arc<Vec<f64>>,
        input: Var<'_>,
        backward: BackwardFn,
    ) -> Var<'_> {
        self.push_raw("view", shape, value, &[input], 0, true, backward)
    }

    #[allow(clippy::too_many_arguments)]
    fn push_raw(
        &self,
        label: &'static str,
        shape: Vec<usize>,
        value: Arc<Vec<f64>>,
        inputs: &[Var<'_>],
        extra: usize,
        view: bool,
        backward: BackwardFn,
    ) -> Var<'_> {
        assert!(!self.spent.get(), "tape has already been consumed by backward");
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = inputs
            .iter()
            .map(|v| {
                assert!(std::ptr::eq(v.tape, self), "input belongs to another tape");
                v.id
            })
            .collect();
        let requires_grad = ids.iter().any(|&i| nodes[i].requires_grad);
        let retained = if view { 0 } else { value.len() } + extra;
        record_alloc(retained, label);
        nodes.push(Node {
            shape,
            value: Some(value),
            inputs: ids,
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
            param: None,
            retained,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Vec<f64>> {
        self.nodes.borrow()[id]
            .value
            .clone()
            .expect("node value was released by backward")
    }

    pub(crate) fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// Node values are released as soon as their backward step has run, so
    /// the tape cannot be read or extended afterwards. Every differentiable
    /// leaf receives a gradient (zeros when unreachable from `loss`).
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(contract("loss belongs to another tape"));
        }
        if self.spent.get() {
            return Err(contract("tape has already been consumed by backward"));
        }
        let mut nodes = self.nodes.borrow_mut();
        let numel: usize = nodes[loss.id].shape.iter().product();
        if numel != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        self.spent.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);
        record_alloc(1, "grad");
        let mut out = Gradients {
            nodes: HashMap::new(),
            params: vec![None; self.params.len()],
        };

        for i in (0..=loss.id).rev() {
            if let Some(g) = grads[i].take() {
                let node = &nodes[i];
                if node.requires_grad {
                    if let Some(bw) = &node.backward {
                        let vals: Vec<Arc<Vec<f64>>> = node
                            .inputs
                            .iter()
                            .map(|&j| nodes[j].value.clone().expect("input value released"))
                            .collect();
                        let slices: Vec<&[f64]> = vals.iter().map(|v| v.as_slice()).collect();
                        let needs: Vec<bool> =
                            node.inputs.iter().map(|&j| nodes[j].requires_grad).collect();
                        let output = node.value.as_ref().expect("value released");
                        let contribs = bw(&BackwardArgs {
                            inputs: &slices,
                            output,
                            grad: &g,
                            needs: &needs,
                        });
                        debug_assert_eq!(contribs.len(), node.inputs.len());
                        for (k, c) in contribs.into_iter().enumerate() {
                            let Some(c) = c else { continue };
                            if !needs[k] {
                                continue;
                            }
                            let j = node.inputs[k];
                            match &mut grads[j] {
                                Some(acc) => {
                                    for (a, v) in acc.iter_mut().zip(&c) {
                                        *a += v;
                                    }
                                }
                                slot @ None => {
                                    record_alloc(c.len(), "grad");
                                    *slot = Some(c);
                                }
                            }
                        }
                        record_free(g.len());
                    } else {
                        let t = Tensor::from_arc(node.shape.clone(), Arc::new(g));
                        record_free(t.numel());
                        match node.param {
                            Some(p) => out.params[p] = Some(t),
                            None => {
                                out.nodes.insert(i, t);
                            }
                        }
                    }
                } else {
                    record_free(g.len());
                }
            }
            if nodes[i].value.take().is_some() {
                record_free(nodes[i].retained);
            }
        }
        for (i, node) in nodes.iter_mut().enumerate() {
            if node.value.take().is_some() {
                record_free(node.retained);
            }
            if node.requires_grad && node.backward.is_none() {
                let zeros = || Tensor::zeros(node.shape.clone());
                match node.param {
                    Some(p) => {
                        if out.params[p].is_none() {
                            out.params[p] = Some(zeros());
                        }
                    }
                    None => {
                        out.nodes.entry(i).or_insert_with(zeros);
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        for node in self.nodes.get_mut().iter_mut() {
            if node.value.take().is_some() {
                record_free(node.retained);
            }
        }
    }
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    nodes: HashMap<usize, Tensor>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for an input leaf created with [`Tape::leaf`] or a parameter
    /// leaf; `None` for constants and interior nodes.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        if let Some(t) = self.nodes.get(&v.id) {
            return Some(t);
        }
        let param = v.tape.nodes.borrow()[v.id].param;
        param.and_then(|p| self.params[p].as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(|t| t.as_ref())
    }

    /// Parameter gradients indexed like the bound [`ParamStore`]; parameters
    /// never placed on the tape are `None`.
    pub fn into_param_grads(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn cols(&self) -> usize {
        *self.shape().last().unwrap_or(&1)
    }

    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub fn value(&self) -> Tensor {
        Tensor::from_arc(self.shape(), self.tape.value_of(self.id))
    }

    pub(crate) fn data(&self) -> Arc<Vec<f64>> {
        self.tape.value_of(self.id)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on a tensor with {} elements", d.len());
        d[0]
    }
}
