//! Reverse-mode autodiff over dynamically shaped `ndarray` tensors.
//!
//! The tape is a flat arena: every operation appends one node holding the
//! eagerly computed value plus an optional backward closure. Backward walks
//! the arena in reverse insertion order, which is always a valid topological
//! order. Everything is deterministic: no hashing of float data, fixed
//! reduction orders, and fixed parallel chunking inside the heavy kernels.
//!
//! Generic over `f32` (training) and `f64` (gradient checks).

pub mod check;
pub mod conv;
pub mod ops;

use ndarray::{ArrayD, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::rc::Rc;

/// Scalar element the tape is generic over.
pub trait Element:
    ndarray::LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Sum
    + Display
    + Debug
    + Send
    + Sync
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + rand::distributions::uniform::SampleUniform
    + 'static
{
    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn cast(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn cast(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Index of a node on the tape.
#[derive(Copy, Clone, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(pub(crate) usize);

/// Gradient accumulator indexed by `NodeId`.
pub struct GradStore<T: Element> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Element> GradStore<T> {
    fn new(len: usize) -> Self {
        let mut grads = Vec::with_capacity(len);
        grads.resize_with(len, || None);
        Self { grads }
    }

    /// Add a gradient contribution for `id`.
    pub fn add(&mut self, id: NodeId, g: ArrayD<T>) {
        use rayon::prelude::*;
        match &mut self.grads[id.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                let a = acc.as_slice_mut().expect("gradients are standard layout");
                let b = g.as_slice().expect("gradients are standard layout");
                if a.len() >= (1 << 16) {
                    a.par_chunks_mut(1 << 15)
                        .zip(b.par_chunks(1 << 15))
                        .for_each(|(ac, bc)| {
                            for (av, bv) in ac.iter_mut().zip(bc) {
                                *av += *bv;
                            }
                        });
                } else {
                    for (av, bv) in a.iter_mut().zip(b) {
                        *av += *bv;
                    }
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<T>> {
        self.grads[id.0].take()
    }
}

/// Backward closure: receives the node values, the incoming gradient for the
/// node it belongs to, and the gradient store to accumulate into.
type BackFn<T> = Box<dyn Fn(&[Rc<ArrayD<T>>], &ArrayD<T>, &mut GradStore<T>)>;

struct Node<T: Element> {
    back: Option<BackFn<T>>,
    _marker: std::marker::PhantomData<T>,
}

/// Arena holding one forward pass worth of values and backward closures.
pub struct Tape<T: Element> {
    values: Vec<Rc<ArrayD<T>>>,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Element> Tape<T> {
    pub fn new(grad_enabled: bool) -> Self {
        Self {
            values: Vec::new(),
            nodes: Vec::new(),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Append a node. The backward closure is dropped when gradients are off.
    pub fn push(&mut self, value: ArrayD<T>, back: Option<BackFn<T>>) -> NodeId {
        self.push_shared(Rc::new(value), back)
    }

    pub fn push_shared(&mut self, value: Rc<ArrayD<T>>, back: Option<BackFn<T>>) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.nodes.push(Node {
            back: if self.grad_enabled { back } else { None },
            _marker: std::marker::PhantomData,
        });
        id
    }

    /// Insert a leaf (no backward). Gradients accumulate here and survive
    /// the backward sweep.
    pub fn leaf(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, None)
    }

    pub fn leaf_shared(&mut self, value: Rc<ArrayD<T>>) -> NodeId {
        self.push_shared(value, None)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn value_rc(&self, id: NodeId) -> Rc<ArrayD<T>> {
        Rc::clone(&self.values[id.0])
    }

    /// Scalar convenience for 0-d nodes.
    pub fn scalar_value(&self, id: NodeId) -> T {
        let v = self.value(id);
        debug_assert_eq!(v.ndim(), 0);
        *v.iter().next().expect("scalar node")
    }

    /// Reverse sweep seeded with ones at `root`.
    ///
    /// Interior-node gradients are consumed as the sweep passes them, except
    /// for ids listed in `keep`, whose gradients are preserved in the result
    /// (needed e.g. for activation-gradient visualizations).
    pub fn backward_keep(&self, root: NodeId, keep: &[NodeId]) -> GradStore<T> {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        let mut grads = GradStore::new(self.values.len());
        let seed = ArrayD::from_elem(self.values[root.0].raw_dim(), T::one());
        grads.add(root, seed);
        for idx in (0..=root.0).rev() {
            if grads.grads[idx].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[idx].back {
                let g = if keep.contains(&NodeId(idx)) {
                    grads.grads[idx].clone().unwrap()
                } else {
                    grads.grads[idx].take().unwrap()
                };
                back(&self.values, &g, &mut grads);
            }
        }
        grads
    }

    pub fn backward(&self, root: NodeId) -> GradStore<T> {
        self.backward_keep(root, &[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn leaf_roundtrip_and_scalar() {
        let mut tape = Tape::<f64>::new(true);
        let id = tape.leaf(ArrayD::from_elem(IxDyn(&[]), 3.5));
        assert_eq!(tape.scalar_value(id), 3.5);
    }

    #[test]
    fn grad_accumulates_over_multiple_uses() {
        // y = x + x  =>  dy/dx = 2
        let mut tape = Tape::<f64>::new(true);
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let y = ops::add(&mut tape, x, x);
        let s = ops::sum_all(&mut tape, y);
        let grads = tape.backward(s);
        let gx = grads.get(x).unwrap();
        assert!(gx.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn no_grad_tape_skips_closures() {
        let mut tape = Tape::<f32>::new(false);
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let y = ops::relu(&mut tape, x);
        assert_eq!(tape.value(y).len(), 2);
        assert!(tape.nodes[y.0].back.is_none());
    }
}
