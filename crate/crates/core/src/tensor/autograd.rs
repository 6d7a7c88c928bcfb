use std::collections::{HashMap, HashSet};

use super::{shape_str, Element, Tensor};
use crate::error::{Error, Result};

/// Ordered record of the differentiable operations reachable from a root.
///
/// Op nodes are ordered by creation, which is execution order; backward
/// walks them from the end.
pub struct GradTape<E: Element> {
    ops: Vec<Tensor<E>>,
    leaves: Vec<Tensor<E>>,
}

impl<E: Element> GradTape<E> {
    pub fn from_root(root: &Tensor<E>) -> Self {
        let mut seen = HashSet::new();
        let mut ops = Vec::new();
        let mut leaves = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            match t.op() {
                Some(op) => {
                    stack.extend(op.parents.iter().filter(|p| p.requires_grad()).cloned());
                    ops.push(t);
                }
                None => leaves.push(t),
            }
        }
        ops.sort_by_key(Tensor::id);
        leaves.sort_by_key(Tensor::id);
        GradTape { ops, leaves }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Op names in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.ops.iter().filter_map(Tensor::op_name).collect()
    }

    /// Leaves reachable from the root that require gradients.
    pub fn leaves(&self) -> &[Tensor<E>] {
        &self.leaves
    }

    /// Replays the tape backward from `root`, calling `visit` with each op's
    /// id in the order it is processed.
    fn replay(&self, root: &Tensor<E>, mut visit: impl FnMut(u64)) -> HashMap<u64, Vec<E>> {
        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        grads.insert(root.id(), vec![E::one(); root.numel()]);
        for node in self.ops.iter().rev() {
            visit(node.id());
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            let op = node.op().expect("tape entries carry op nodes");
            let parent_grads = (op.backward)(&g);
            debug_assert_eq!(parent_grads.len(), op.parents.len());
            for (parent, pg) in op.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel(), "grad for {:?}", op.name);
                match grads.get_mut(&parent.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    None => {
                        grads.insert(parent.id(), pg);
                    }
                }
            }
        }
        grads
    }

    /// Ids of op nodes in the order a backward pass processes them.
    pub fn backward_order(&self) -> Vec<u64> {
        let mut order = Vec::with_capacity(self.ops.len());
        if let Some(root) = self.ops.last() {
            // Only the ordering is of interest; gradients are discarded.
            let _ = self.replay(root, |id| order.push(id));
        }
        order
    }
}

/// Gradients of a scalar root with respect to its grad-requiring leaves.
pub struct Gradients<E: Element> {
    by_id: HashMap<u64, Tensor<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, t: &Tensor<E>) -> Option<&Tensor<E>> {
        self.by_id.get(&t.id())
    }

    /// Gradient for `t`; zeros when `t` did not influence the root.
    pub fn wrt(&self, t: &Tensor<E>) -> Tensor<E> {
        self.get(t)
            .cloned()
            .unwrap_or_else(|| Tensor::build(t.shape().to_vec(), vec![E::zero(); t.numel()], false, None))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl<E: Element> Tensor<E> {
    /// Reverse-mode pass from this one-element root.
    ///
    /// Leaf gradients are returned and also added into each leaf's stored
    /// gradient (see [`Tensor::grad`]).
    pub fn backward(&self) -> Result<Gradients<E>> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {}",
                shape_str(self.shape())
            )));
        }
        let tape = GradTape::from_root(self);
        let mut grads = tape.replay(self, |_| {});
        let mut by_id = HashMap::new();
        for leaf in tape.leaves() {
            if !leaf.requires_grad() {
                continue;
            }
            let g = grads
                .remove(&leaf.id())
                .unwrap_or_else(|| vec![E::zero(); leaf.numel()]);
            leaf.accumulate_grad(&g);
            by_id.insert(
                leaf.id(),
                Tensor::build(leaf.shape().to_vec(), g, false, None),
            );
        }
        Ok(Gradients { by_id })
    }
}
