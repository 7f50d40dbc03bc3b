//! Define-by-run autodiff tape.
//!
//! Every op appends a node holding its forward value and, when any input
//! requires a gradient, a closure mapping the output gradient to input
//! gradients. [`Graph::backward`] walks the tape in reverse.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::{ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    record: bool,
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<ParamId, Var>>,
}

impl<'p> Graph<'p> {
    /// A recording graph bound to `params`.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            record: true,
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    /// A graph that evaluates forward values only.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            record: false,
            ..Self::new(params)
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push_node(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.constant_shared(Arc::new(value))
    }

    pub(crate) fn constant_shared(&self, value: Arc<Tensor>) -> Var {
        self.push_node(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
            param: None,
        })
    }

    /// Input whose gradient is tracked, e.g. for gradient checking.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_node(Node {
            value: Arc::new(value),
            requires_grad: self.record,
            parents: Vec::new(),
            backward: None,
            param: None,
        })
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.borrow().get(&id) {
            return *v;
        }
        let var = self.push_node(Node {
            value: self.params.shared(id),
            requires_grad: self.record,
            parents: Vec::new(),
            backward: None,
            param: Some(id),
        });
        self.param_nodes.borrow_mut().insert(id, var);
        var
    }

    /// Copy of `v`'s value cut off from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant_shared(value)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Appends an op result. `make_backward` is only invoked when some parent
    /// requires a gradient.
    pub(crate) fn push_op<V, F>(&self, value: V, parents: &[Var], make_backward: F) -> Var
    where
        V: Into<Arc<Tensor>>,
        F: FnOnce() -> BackwardFn,
    {
        let requires_grad = self.record && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        let backward = requires_grad.then(make_backward);
        self.push_node(Node {
            value: value.into(),
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
            param: None,
        })
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let seed = Tensor::ones(nodes[loss.0].value.shape());
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(out_grad) = grads[i].take() else {
                continue;
            };
            let parent_grads = backward(&out_grad);
            assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                assert_eq!(g.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let mut params = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if let Some(id) = node.param {
                if let Some(g) = grads[i].take() {
                    params.insert(id, g);
                }
            }
        }
        Gradients {
            leaves: grads,
            params,
        }
    }
}

/// Result of [`Graph::backward`]: gradients of leaves and parameters.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}
