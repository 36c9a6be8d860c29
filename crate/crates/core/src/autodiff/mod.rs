//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every differentiable primitive appends a node to a [`Tape`]. Nodes are
//! created in dependency order, so walking the tape backwards visits them in
//! reverse topological order. Learnable tensors are [`Param`]s; registering
//! one on a tape with [`Tape::param`] creates a leaf whose gradient is
//! reported under the parameter's [`ParamId`].
//!
//! ```
//! use flopeq::autodiff::{Param, ParamKind, Tape};
//! use flopeq::tensor::Tensor;
//!
//! let w = Param::new("w", ParamKind::Bias, Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap());
//! let tape = Tape::new();
//! let x = tape.constant(Tensor::from_f64([2], &[3.0, 4.0]).unwrap());
//! let wv = tape.param(&w);
//! let y = tape.mul(wv, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(&w).data(), &[3.0, 4.0]);
//! ```

mod ops;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use ops::Activation;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a learnable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ParamId(u64);

/// What a parameter is for; drives both initialisers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ParamKind {
    /// Multiplicative weight seen by `fan_in` inputs per output.
    Weight {
        fan_in: usize,
    },
    Bias,
    /// Per-channel diagonal scale with its training-time initial value.
    Scale {
        init: f64,
    },
    /// Per-channel additive shift of a normalisation or affine layer.
    Shift,
    /// Positional embedding or classification token.
    Embedding,
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    id: ParamId,
    name: String,
    kind: ParamKind,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Self {
        Self {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            kind,
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    /// Number of free scalars.
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything owning learnable parameters, in a fixed deterministic order.
pub trait Parameterized<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

impl<T: Scalar> Parameterized<T> for Param<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![self]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![self]
    }
}

impl<T: Scalar, P: Parameterized<T>> Parameterized<T> for Vec<P> {
    fn params(&self) -> Vec<&Param<T>> {
        self.iter().flat_map(|p| p.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.iter_mut().flat_map(|p| p.params_mut()).collect()
    }
}

impl<T: Scalar, P: Parameterized<T>> Parameterized<T> for Option<P> {
    fn params(&self) -> Vec<&Param<T>> {
        self.as_ref().map(|p| p.params()).unwrap_or_default()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.as_mut().map(|p| p.params_mut()).unwrap_or_default()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Maps the output gradient (plus parent values and the node's own value) to
/// one optional gradient per parent.
type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Single-owner record of primitive applications.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<Vec<(ParamId, usize)>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; parameters behave as constants.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Differentiable input that is not a parameter (e.g. for input gradients).
    pub fn variable(&self, value: Tensor<T>) -> Var {
        self.leaf(value, self.grad_enabled)
    }

    pub fn param(&self, p: &Param<T>) -> Var {
        let v = self.leaf(p.value.clone(), self.grad_enabled);
        self.params.borrow_mut().push((p.id, v.0));
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Appends a node. The backward closure is dropped when no parent needs
    /// a gradient.
    pub(crate) fn push(&self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Propagates d(loss)/d(node) for every node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(nodes[loss.0].value.map(|_| T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            let (Some(backward), Some(g)) = (&node.backward, grads[idx].as_ref()) else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let parent_grads = backward(g, &inputs, &node.value)?;
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => acc.add(&pg)?,
                    None => pg,
                });
            }
        }
        let mut by_param: HashMap<ParamId, Tensor<T>> = HashMap::new();
        for &(id, node) in self.params.borrow().iter() {
            if let Some(g) = &grads[node] {
                let entry = match by_param.remove(&id) {
                    Some(acc) => acc.add(g)?,
                    None => g.clone(),
                };
                by_param.insert(id, entry);
            }
        }
        Ok(Gradients {
            by_node: grads,
            by_param,
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    by_param: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a parameter; exactly zero when the loss never used it.
    pub fn get(&self, p: &Param<T>) -> Tensor<T> {
        match self.by_param.get(&p.id) {
            Some(g) => g.clone(),
            None => p.value.map(|_| T::zero()),
        }
    }

    pub fn try_get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    /// Gradient with respect to any node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}
