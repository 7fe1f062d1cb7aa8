use std::collections::BTreeMap;

use super::{Gradients, ParamId, ParamStore};

/// SGD with classical momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter in `group` that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, group: &[ParamId], lr: f64) {
        for &id in group {
            let Some(g) = grads.param(id) else { continue };
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![0.0; g.len()]);
            let p = store.get_mut(id).data_mut();
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, group: &[ParamId], lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for &id in group {
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), g) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
