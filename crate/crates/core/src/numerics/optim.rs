use super::params::ParamStore;

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter
/// id, so one optimizer instance should only ever see one parameter group.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[id]` is `None` for parameters outside this
    /// optimizer's group; those are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        if self.moments.len() < grads.len() {
            self.moments.resize(grads.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let p = params.by_id_mut(id);
            // Matrices decay; gains, biases and other row vectors do not.
            let decay = if p.rows() > 1 { self.weight_decay } else { 0.0 };
            let (m, v) = self.moments[id].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= self.lr * (mhat / (vhat.sqrt() + self.eps) + decay * *x);
            }
        }
    }
}
