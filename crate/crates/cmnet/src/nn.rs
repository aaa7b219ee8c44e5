//! Parameter storage, layer primitives, and the forward-pass context.
//!
//! Layers hold `ParamId`s into a shared [`ParamStore`]; cloning a layer
//! clones the ids, which is exactly how branch weight sharing works: the
//! shared-parameter policies hand the same ids to several branches, and the
//! tape then accumulates gradients from every use into one leaf.

use crate::error::{Error, Result};
use crate::tensor::{ops, Element, NodeId, Tape};
use indexmap::IndexMap;
use ndarray::{Array1, ArrayD, IxDyn};
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::rc::Rc;

/// Index of a tensor in a [`ParamStore`].
#[derive(Copy, Clone, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub usize);

/// Training / inference switch. Affects batch-norm statistics.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

struct ParamEntry<T: Element> {
    value: Rc<ArrayD<T>>,
    trainable: bool,
}

/// Named tensor table: trainable parameters plus non-trainable buffers
/// (batch-norm running statistics).
pub struct ParamStore<T: Element> {
    entries: Vec<ParamEntry<T>>,
    names: IndexMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            names: IndexMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>, trainable: bool) -> ParamId {
        assert!(
            !self.names.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            value: Rc::new(value),
            trainable,
        });
        self.names.insert(name.to_string(), id.0);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn value_rc(&self, id: ParamId) -> Rc<ArrayD<T>> {
        Rc::clone(&self.entries[id.0].value)
    }

    /// Mutable access; copies only if a tape still holds the tensor.
    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<T>) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape());
        self.entries[id.0].value = Rc::new(value);
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        self.names
            .iter()
            .find(|(_, &i)| i == id.0)
            .map(|(n, _)| n.as_str())
            .expect("named parameter")
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).map(|&i| ParamId(i))
    }

    /// Iterate `(name, id)` in insertion order.
    pub fn iter_names(&self) -> impl Iterator<Item = (&str, ParamId)> + '_ {
        self.names.iter().map(|(n, &i)| (n.as_str(), ParamId(i)))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    /// Total element count of trainable tensors.
    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Records multiply-accumulate counts per parameterized layer during a
/// forward pass. The anchor key is the layer's weight `ParamId`, so layers
/// that share weights share a key.
#[derive(Default)]
pub struct FlopRecorder {
    /// anchor -> (macs of last call, total macs over all calls, call count)
    entries: IndexMap<usize, (u64, u64, u32)>,
}

impl FlopRecorder {
    pub fn record(&mut self, anchor: ParamId, macs: u64) {
        let e = self.entries.entry(anchor.0).or_insert((0, 0, 0));
        e.0 = macs;
        e.1 += macs;
        e.2 += 1;
    }

    /// Shared modules counted once, at the shape of their final call.
    pub fn macs_unique_last_call(&self) -> u64 {
        self.entries.values().map(|e| e.0).sum()
    }

    /// Every call counted.
    pub fn macs_all_calls(&self) -> u64 {
        self.entries.values().map(|e| e.1).sum()
    }
}

/// Context threaded through every layer forward.
pub struct Fwd<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
    /// Compute input gradients at stem convolutions (needed by gradient
    /// checks w.r.t. images; off during ordinary training).
    pub need_input_grads: bool,
    /// Test hook: force every attention gate to one (skips gating).
    pub gates_to_one: bool,
    pub flops: Option<&'a mut FlopRecorder>,
    leaf_cache: HashMap<usize, NodeId>,
}

impl<'a, T: Element> Fwd<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            need_input_grads: false,
            gates_to_one: false,
            flops: None,
            leaf_cache: HashMap::new(),
        }
    }

    /// Tape leaf for a parameter; one leaf per parameter per pass, so shared
    /// weights accumulate gradients from every consumer.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.leaf_cache.get(&id.0) {
            return n;
        }
        let n = self.tape.leaf_shared(self.store.value_rc(id));
        self.leaf_cache.insert(id.0, n);
        n
    }

    pub fn record_macs(&mut self, anchor: ParamId, macs: u64) {
        if let Some(rec) = self.flops.as_deref_mut() {
            rec.record(anchor, macs);
        }
    }

    /// Hand back the parameter-leaf map when the pass is finished.
    pub fn into_param_leaves(self) -> HashMap<usize, NodeId> {
        self.leaf_cache
    }
}

/// Fan-based uniform initialization: `U(±1/√fan_in)`.
pub fn init_uniform<T: Element>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> ArrayD<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let len: usize = shape.iter().product();
    let data: Vec<T> = (0..len).map(|_| T::cast(dist.sample(rng))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// 2-D convolution layer, bias-free (batch norm follows each one).
#[derive(Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// Stem convolutions skip the image gradient unless a pass requests it.
    pub is_stem: bool,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore<impl Element>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = init_uniform(rng, &[out_ch, in_ch, kernel, kernel], fan_in);
        let weight = store.insert(name, w, true);
        Self {
            weight,
            stride,
            pad,
            out_channels: out_ch,
            in_channels: in_ch,
            kernel,
            is_stem: false,
        }
    }

    pub fn forward<T: Element>(&self, fx: &mut Fwd<'_, T>, x: NodeId) -> NodeId {
        let w = fx.param(self.weight);
        let need_dx = !self.is_stem || fx.need_input_grads;
        let y = ops::conv2d(fx.tape, x, w, self.stride, self.pad, need_dx);
        let os = fx.tape.value(y).shape().to_vec();
        let macs = (self.kernel * self.kernel * self.in_channels) as u64
            * (self.out_channels * os[2] * os[3]) as u64
            * (os[0] as u64);
        fx.record_macs(self.weight, macs);
        y
    }
}

/// Batch normalization with affine parameters and running statistics.
#[derive(Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        let gamma = store.insert(
            &format!("{prefix}.weight"),
            ArrayD::from_elem(IxDyn(&[channels]), T::one()),
            true,
        );
        let beta = store.insert(
            &format!("{prefix}.bias"),
            ArrayD::zeros(IxDyn(&[channels])),
            true,
        );
        let running_mean = store.insert(
            &format!("{prefix}.running_mean"),
            ArrayD::zeros(IxDyn(&[channels])),
            false,
        );
        let running_var = store.insert(
            &format!("{prefix}.running_var"),
            ArrayD::from_elem(IxDyn(&[channels]), T::one()),
            false,
        );
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<T: Element>(&self, fx: &mut Fwd<'_, T>, x: NodeId) -> NodeId {
        let gamma = fx.param(self.gamma);
        let beta = fx.param(self.beta);
        match fx.mode {
            Mode::Train => {
                let (y, stats) = ops::batchnorm_train(fx.tape, x, gamma, beta, self.eps);
                let mom = T::cast(self.momentum);
                let one_m = T::cast(1.0 - self.momentum);
                {
                    let rm = fx.store.value_mut(self.running_mean);
                    let mut rm1 = rm.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                    ndarray::Zip::from(&mut rm1).and(&stats.mean).for_each(|r, &b| {
                        *r = *r * one_m + b * mom;
                    });
                }
                {
                    let rv = fx.store.value_mut(self.running_var);
                    let mut rv1 = rv.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                    ndarray::Zip::from(&mut rv1)
                        .and(&stats.var_unbiased)
                        .for_each(|r, &b| {
                            *r = *r * one_m + b * mom;
                        });
                }
                y
            }
            Mode::Eval => {
                let rm: Array1<T> = fx
                    .store
                    .value(self.running_mean)
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
                    .to_owned();
                let rv: Array1<T> = fx
                    .store
                    .value(self.running_var)
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
                    .to_owned();
                ops::batchnorm_eval(fx.tape, x, gamma, beta, &rm, &rv, self.eps)
            }
        }
    }
}

/// Fully connected layer with bias: `y = x·wᵀ + b`.
#[derive(Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore<impl Element>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let w = init_uniform(rng, &[out_features, in_features], in_features);
        let b = init_uniform(rng, &[out_features], in_features);
        Self {
            weight: store.insert(&format!("{prefix}.weight"), w, true),
            bias: store.insert(&format!("{prefix}.bias"), b, true),
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Element>(&self, fx: &mut Fwd<'_, T>, x: NodeId) -> NodeId {
        let w = fx.param(self.weight);
        let b = fx.param(self.bias);
        let n = fx.tape.value(x).shape()[0] as u64;
        let y = ops::linear(fx.tape, x, w, b);
        fx.record_macs(self.weight, (self.in_features * self.out_features) as u64 * n);
        y
    }
}

/// Copy a tensor into the store with shape validation, for weight loading.
pub fn load_tensor_checked<T: Element>(
    store: &mut ParamStore<T>,
    id: ParamId,
    name_for_err: &str,
    value: ArrayD<T>,
) -> Result<()> {
    let expect = store.value(id).shape().to_vec();
    if expect != value.shape() {
        return Err(Error::Load(format!(
            "shape mismatch for {name_for_err}: checkpoint {:?} vs model {:?}",
            value.shape(),
            expect
        )));
    }
    store.set(id, value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shared_ids_share_storage() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(&mut store, &mut rng, "c.weight", 3, 8, 3, 1, 1);
        let clone = conv.clone();
        assert_eq!(conv.weight, clone.weight);
        store.value_mut(conv.weight)[[0, 0, 0, 0]] = 42.0;
        assert_eq!(store.value(clone.weight)[[0, 0, 0, 0]], 42.0);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a: ArrayD<f32> = init_uniform(&mut r1, &[4, 3], 3);
        let b: ArrayD<f32> = init_uniform(&mut r2, &[4, 3], 3);
        assert_eq!(a, b);
    }

    #[test]
    fn bn_running_stats_update_in_train_mode_only() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        let x = ArrayD::from_shape_vec(
            IxDyn(&[1, 2, 2, 2]),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        )
        .unwrap();

        let mut tape = Tape::new(false);
        let mut fx = Fwd::new(&mut tape, &mut store, Mode::Eval);
        let xid = fx.tape.leaf(x.clone());
        bn.forward(&mut fx, xid);
        assert_eq!(store.value(bn.running_mean)[[0]], 0.0);

        let mut tape = Tape::new(false);
        let mut fx = Fwd::new(&mut tape, &mut store, Mode::Train);
        let xid = fx.tape.leaf(x);
        bn.forward(&mut fx, xid);
        // channel 0 mean 2.5, momentum 0.1
        assert!((store.value(bn.running_mean)[[0]] - 0.25).abs() < 1e-12);
    }
}
