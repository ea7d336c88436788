use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::real::Real;
use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &mut GradSink<'_, T>)>;

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node list is
/// already a topological order and backward is a single reverse sweep.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    bound: Vec<(ParamId, Var)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(value), None, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(value), None, false)
    }

    /// Leaf bound to a stored parameter; its gradient is routed back by
    /// [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let value = Arc::clone(&store.get(id).value);
        self.push_leaf(value, Some(id), true)
    }

    /// Makes every later `param(_, id)` return `v` instead of a fresh leaf. Used to
    /// differentiate with respect to stored parameters as ordinary inputs.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.bound.retain(|(p, _)| *p != id);
        self.bound.push((id, v));
    }

    fn push_leaf(&mut self, value: Arc<Tensor<T>>, param: Option<ParamId>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, backward: None, param, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Appends an op node. `backward` is dropped when no parent requires a gradient.
    pub(crate) fn push_op(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value: Arc::new(value), backward: needs_grad.then_some(backward), param: None, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Runs reverse-mode differentiation from `output`, seeded with ones
    /// (for a scalar loss, the usual d loss / d loss = 1).
    pub fn backward(self, output: Var) -> Gradients<T> {
        let seed = Tensor::full(self.nodes[output.0].value.shape(), T::one());
        self.backward_with(output, seed)
    }

    /// Reverse sweep seeded with an explicit cotangent.
    pub fn backward_with(self, output: Var, seed: Tensor<T>) -> Gradients<T> {
        let n = output.0 + 1;
        let mut nodes = self.nodes;
        nodes.truncate(n);
        let needs: Vec<bool> = nodes.iter().map(|nd| nd.needs_grad).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut params = Vec::new();
        let mut leaves = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &mut nodes[i];
            match node.backward.take() {
                Some(back) => {
                    let mut sink = GradSink { grads: &mut grads[..i], needs: &needs[..i] };
                    back(&g, &mut sink);
                }
                None => {
                    if let Some(pid) = node.param {
                        params.push((pid, g));
                    } else {
                        leaves.push((Var(i), g));
                    }
                }
            }
        }
        Gradients { params, leaves }
    }
}

/// Collects parent gradients during one node's backward step.
pub struct GradSink<'a, T: Real> {
    grads: &'a mut [Option<Tensor<T>>],
    needs: &'a [bool],
}

impl<T: Real> GradSink<'_, T> {
    pub fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    pub fn add(&mut self, v: Var, g: Tensor<T>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds `g` in place through a closure, allocating zeros of `shape` on first use.
    pub fn add_with(&mut self, v: Var, shape: &[usize], f: impl FnOnce(&mut [T])) {
        if !self.needs[v.0] {
            return;
        }
        let slot = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
        f(slot.data_mut());
    }
}

/// Result of a backward sweep: gradients of parameters and of plain input leaves.
pub struct Gradients<T: Real> {
    params: Vec<(ParamId, Tensor<T>)>,
    leaves: Vec<(Var, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of an input leaf (None if it did not influence the output).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(x, _)| *x == v).map(|(_, g)| g)
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for (pid, g) in &self.params {
            if *pid == id {
                match &mut acc {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }

    /// Adds every parameter gradient into `store` (scaled by `scale`).
    pub fn accumulate_into(&self, store: &mut ParamStore<T>, scale: T) {
        for (pid, g) in &self.params {
            let p = store.get_mut(*pid);
            for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b * scale;
            }
        }
    }
}
