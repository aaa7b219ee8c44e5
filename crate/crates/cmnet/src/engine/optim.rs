//! Optimizers. SGD with momentum applies `v ← μv + g`, `p ← p − lr·(v +
//! wd·p)`; adaptive moment estimation applies the standard bias-corrected
//! first/second-moment update with the decay added to the gradient.

use crate::config::{OptimizerKind, TrainConfig};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Element;
use ndarray::ArrayD;
use std::collections::HashMap;

struct Slot<T> {
    velocity: Option<ArrayD<T>>,
    m: Option<ArrayD<T>>,
    v: Option<ArrayD<T>>,
}

pub struct Optimizer<T: Element> {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    slots: HashMap<usize, Slot<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            slots: HashMap::new(),
        }
    }

    /// Apply one update. Parameters are visited in ascending id order.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &HashMap<usize, ArrayD<T>>,
        lr: f64,
    ) {
        self.step_count += 1;
        let mut ids: Vec<usize> = grads.keys().copied().collect();
        ids.sort_unstable();
        for idx in ids {
            let g = &grads[&idx];
            let slot = self.slots.entry(idx).or_insert(Slot {
                velocity: None,
                m: None,
                v: None,
            });
            let p = store.value_mut(ParamId(idx));
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let mu = T::cast(self.momentum);
                    let wd = T::cast(self.weight_decay);
                    let lr_t = T::cast(lr);
                    let vel = slot
                        .velocity
                        .get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                    let vs = vel.as_slice_mut().expect("standard layout");
                    let gs = g.as_slice().expect("standard layout");
                    let ps = p.as_slice_mut().expect("standard layout");
                    for i in 0..ps.len() {
                        vs[i] = vs[i] * mu + gs[i];
                        ps[i] = ps[i] - lr_t * (vs[i] + wd * ps[i]);
                    }
                }
                OptimizerKind::AdaptiveMoment => {
                    let b1 = self.beta1;
                    let b2 = self.beta2;
                    let bc1 = 1.0 - b1.powi(self.step_count as i32);
                    let bc2 = 1.0 - b2.powi(self.step_count as i32);
                    let wd = T::cast(self.weight_decay);
                    let m = slot.m.get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                    let v = slot.v.get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                    ndarray::Zip::from(&mut *m)
                        .and(&mut *v)
                        .and(g)
                        .and(&*p)
                        .for_each(|mi, vi, &gi, &pi| {
                            let gd = gi + wd * pi;
                            *mi = T::cast(b1) * *mi + T::cast(1.0 - b1) * gd;
                            *vi = T::cast(b2) * *vi + T::cast(1.0 - b2) * gd * gd;
                        });
                    let (m, v) = (slot.m.as_ref().unwrap(), slot.v.as_ref().unwrap());
                    ndarray::Zip::from(p).and(m).and(v).for_each(|pi, &mi, &vi| {
                        let mhat = mi.as_f64() / bc1;
                        let vhat = vi.as_f64() / bc2;
                        *pi = T::cast(pi.as_f64() - lr * mhat / (vhat.sqrt() + self.eps));
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn scalar_store(v: f64) -> (ParamStore<f64>, usize) {
        let mut store = ParamStore::new();
        let id = store.insert("p", ArrayD::from_elem(IxDyn(&[1]), v), true);
        (store, id.0)
    }

    #[test]
    fn sgd_single_step_matches_hand_arithmetic() {
        // lr=0.1, μ=0, wd=0, p=1, g=2 → p' = 0.8
        let cfg = TrainConfig {
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let (mut store, idx) = scalar_store(1.0);
        let mut opt = Optimizer::new(&cfg);
        let mut grads = HashMap::new();
        grads.insert(idx, ArrayD::from_elem(IxDyn(&[1]), 2.0));
        opt.step(&mut store, &grads, 0.1);
        assert!((store.value(ParamId(idx))[[0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_and_decay_follow_the_stated_rule() {
        // v ← μv + g; p ← p − lr(v + wd·p)
        let cfg = TrainConfig {
            momentum: 0.9,
            weight_decay: 0.1,
            ..Default::default()
        };
        let (mut store, idx) = scalar_store(1.0);
        let mut opt = Optimizer::new(&cfg);
        let mut grads = HashMap::new();
        grads.insert(idx, ArrayD::from_elem(IxDyn(&[1]), 1.0));
        opt.step(&mut store, &grads, 0.5); // v=1, p = 1 − 0.5(1 + 0.1) = 0.45
        assert!((store.value(ParamId(idx))[[0]] - 0.45).abs() < 1e-12);
        opt.step(&mut store, &grads, 0.5); // v=1.9, p = 0.45 − 0.5(1.9 + 0.045)
        let expect = 0.45 - 0.5 * (1.9 + 0.045);
        assert!((store.value(ParamId(idx))[[0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        // with bias correction the first update is lr·g/(|g|+ε̃)
        let cfg = TrainConfig {
            optimizer: OptimizerKind::AdaptiveMoment,
            weight_decay: 0.0,
            ..Default::default()
        };
        let (mut store, idx) = scalar_store(0.3);
        let mut opt = Optimizer::new(&cfg);
        let mut grads = HashMap::new();
        grads.insert(idx, ArrayD::from_elem(IxDyn(&[1]), -4.0));
        opt.step(&mut store, &grads, 1e-3);
        let got = store.value(ParamId(idx))[[0]];
        assert!((got - (0.3 + 1e-3)).abs() < 1e-6, "{got}");
    }
}
