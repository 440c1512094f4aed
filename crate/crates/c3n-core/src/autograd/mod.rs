//! Minimal tape-based reverse-mode differentiation over `ndarray` tensors.
//!
//! A [`Graph`] records one forward pass; [`Graph::backward`] walks the tape
//! once and accumulates gradients. Ops parallelize internally over batch
//! items with a fixed decomposition, so results are bit-identical across
//! runs and thread counts.

mod kernels;
mod ops_basic;
mod ops_conv;
mod ops_linalg;
mod ops_loss;

pub use kernels::{bilinear_resize, conv2d_forward, Conv2dSpec};

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::collections::HashSet;

/// Handle to a node in the tape.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub value: ArrayD<f32>,
    backward: Option<BackFn>,
    requires_grad: bool,
}

type BackFn = Box<dyn Fn(&mut BackArgs<'_>)>;

pub(crate) struct BackArgs<'a> {
    pub gout: &'a ArrayD<f32>,
    pub out: &'a ArrayD<f32>,
    nodes: &'a [Node],
    grads: &'a mut [Option<ArrayD<f32>>],
}

impl<'a> BackArgs<'a> {
    pub fn val(&self, v: Var) -> &ArrayD<f32> {
        &self.nodes[v.0].value
    }

    /// Accumulate a gradient into a parent node, skipping constants.
    pub fn accum(&mut self, v: Var, g: ArrayD<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

/// One recorded forward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<Vec<(usize, Var)>>,
    param_cache: RefCell<std::collections::HashMap<usize, Var>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(Vec::new()),
            param_cache: RefCell::new(std::collections::HashMap::new()),
        }
    }

    /// Parameter leaf, deduplicated per slot so layers used more than once
    /// in a pass accumulate into a single gradient.
    pub fn cached_param(&self, slot: usize, value: impl FnOnce() -> ArrayD<f32>) -> Var {
        if let Some(v) = self.param_cache.borrow().get(&slot) {
            return *v;
        }
        let var = self.param(slot, value());
        self.param_cache.borrow_mut().insert(slot, var);
        var
    }

    /// A constant: no gradient flows into it.
    pub fn value(&self, value: ArrayD<f32>) -> Var {
        self.push(Node {
            value,
            backward: None,
            requires_grad: false,
        })
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: ArrayD<f32>) -> Var {
        self.push(Node {
            value,
            backward: None,
            requires_grad: true,
        })
    }

    /// A differentiable leaf tied to a parameter slot, for optimizer updates.
    pub fn param(&self, slot: usize, value: ArrayD<f32>) -> Var {
        let v = self.leaf(value);
        self.param_vars.borrow_mut().push((slot, v));
        v
    }

    pub(crate) fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &self,
        value: ArrayD<f32>,
        parents: &[Var],
        backward: BackFn,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push(Node {
            value,
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        })
    }

    pub fn value_of(&self, v: Var) -> ArrayD<f32> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_of(&self, v: Var) -> f32 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        val.iter().next().copied().unwrap_or(f32::NAN)
    }

    /// Borrow a node value for read-only work without cloning.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&ArrayD<f32>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Reverse pass from a scalar root. Gradients are kept for leaves only.
    pub fn backward(&self, root: Var) -> Gradients {
        self.backward_keeping(root, &[])
    }

    /// Reverse pass keeping gradients for `keep` in addition to leaves.
    pub fn backward_keeping(&self, root: Var, keep: &[Var]) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward root must be a scalar"
        );
        let keep: HashSet<usize> = keep.iter().map(|v| v.0).collect();
        let mut grads: Vec<Option<ArrayD<f32>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root.0] = Some(ArrayD::ones(IxDyn(nodes[root.0].value.shape())));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if node.backward.is_none() && !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(backward) = &node.backward else {
                continue; // leaf: keep its accumulated gradient
            };
            let (head, tail) = grads.split_at_mut(i);
            let Some(gout) = tail[0].take() else {
                continue; // no downstream dependence
            };
            let mut args = BackArgs {
                gout: &gout,
                out: &node.value,
                nodes: &nodes[..i],
                grads: head,
            };
            backward(&mut args);
            if keep.contains(&i) {
                tail[0] = Some(gout);
            }
        }

        Gradients {
            grads,
            param_vars: self.param_vars.borrow().clone(),
        }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f32>>>,
    param_vars: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f32>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f32>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// (parameter slot, gradient) pairs for every parameter that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &ArrayD<f32>)> {
        self.param_vars
            .iter()
            .filter_map(|(slot, var)| self.grads[var.0].as_ref().map(|g| (*slot, g)))
    }
}
