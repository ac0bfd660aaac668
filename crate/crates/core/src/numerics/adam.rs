use super::params::ParamStore;
use super::tape::Gradients;

/// Adam with bias correction. Parameters without a gradient this step are
/// left untouched, moments included.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        AdamState {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, idx: usize) -> &[f64] {
        &self.m[idx]
    }

    pub fn second_moment(&self, idx: usize) -> &[f64] {
        &self.v[idx]
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for n in 0..p.len() {
                m[n] = self.beta1 * m[n] + (1.0 - self.beta1) * g[n];
                v[n] = self.beta2 * v[n] + (1.0 - self.beta2) * g[n] * g[n];
                let mh = m[n] / bc1;
                let vh = v[n] / bc2;
                p[n] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
