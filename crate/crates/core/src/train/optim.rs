//! Adam with L2 weight decay folded into the gradient before the moment
//! updates.

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::cluster::normalize_prototypes;
use crate::params::{ParamId, ParamKind, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<Mat>,
    #[serde(skip)]
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    /// One update from per-parameter gradients (missing entries count as
    /// zero). Prototype rows are renormalized after a non-zero step.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Mat>], lr: f64, weight_decay: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<ParamId>>() {
            let kind = store.kind(id);
            let theta = store.get(id).clone();
            let mut g = match &grads[id.0] {
                Some(g) => g.clone(),
                None => Mat::zeros(theta.dim()),
            };
            if kind.decays() && weight_decay != 0.0 {
                g.scaled_add(weight_decay, &theta);
            }
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            ndarray::Zip::from(&mut *v).and(&g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            if lr != 0.0 {
                let target = store.get_mut(id);
                ndarray::Zip::from(target).and(&*m).and(&*v).for_each(|x, &m, &v| {
                    *x -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                });
                if kind == ParamKind::Prototype {
                    normalize_prototypes(store.get_mut(id));
                }
            }
        }
    }
}
