use super::tensor::{ParamGrads, ParamStore, Scalar};
use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr * wd * p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers, one pair per parameter of the store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| vec![T::zero(); t.numel()])
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update. A parameter without a gradient is
    /// treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<(), TensorError> {
        if grads.0.len() != store.len() || self.m.len() != store.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "adam: {} params, {} grads, {} moment buffers",
                store.len(),
                grads.0.len(),
                self.m.len()
            )));
        }
        for (i, (id, name, t)) in store.iter().enumerate() {
            let g_len = grads.get(id).map_or(t.numel(), <[T]>::len);
            if g_len != t.numel() || self.m[i].len() != t.numel() {
                return Err(TensorError::ShapeMismatch(format!("adam: buffers for {name}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps, lr_t, wd) = (T::one(), T::lit(c.eps), T::lit(lr), T::lit(c.weight_decay));
        for i in 0..store.len() {
            let id = super::ParamId(i);
            let grad = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let g = grad.map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * p[j]);
            }
        }
        Ok(())
    }
}
