use crate::params::{GradBuffer, ParamStore};
use crate::Tensor;
use serde::{Deserialize, Serialize};

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient keep their value but
    /// their moments still decay, as with a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) {
        assert_eq!(grads.len(), store.len(), "gradient buffer does not match the store");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let p = store.get_mut(id);
            match grads.get(id) {
                Some(g) => {
                    for (((pv, mv), vv), gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                        *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                        *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                        *pv -= self.learning_rate * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
                    }
                }
                None => {
                    for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()) {
                        *mv *= self.beta1;
                        *vv *= self.beta2;
                        if *mv != 0.0 {
                            *pv -= self.learning_rate * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
                        }
                    }
                }
            }
        }
    }
}
