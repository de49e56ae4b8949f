use crate::tensor::{Element, ParamStore};

/// Decoupled-weight-decay Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter from its accumulated gradient.
    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>) {
        if self.m.is_empty() {
            self.m = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let grad = p.grad.data();
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i].as_f64();
                let mut w = x.as_f64();
                w -= self.lr * self.weight_decay * w;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                *x = T::of(w);
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Element>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .map(|p| p.grad.l2_norm_sq())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|x| *x = T::of(x.as_f64() * s));
        }
    }
    norm
}
