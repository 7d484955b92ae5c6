use crate::{c, Gradients, NumericsError, ParamStore, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| vec![T::zero(); t.numel()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Fails without touching any parameter if a
    /// gradient is NaN or infinite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.len() != store.len() {
            return Err(NumericsError::Invalid {
                op: "adam",
                msg: format!("{} gradients for {} parameters", grads.len(), store.len()),
            });
        }
        for id in store.ids() {
            let g = grads.get(id);
            if g.shape() != store.get(id).shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NumericsError::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (c::<T>(beta1), c::<T>(beta2));
        let (one_b1, one_b2) = (c::<T>(1.0 - beta1), c::<T>(1.0 - beta2));
        let step_size = c::<T>(lr / bc1);
        let inv_sqrt_bc2 = c::<T>(1.0 / bc2.sqrt());
        let eps = c::<T>(eps);

        for id in store.ids() {
            let g = grads.get(id).data();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let denom = v[i].sqrt() * inv_sqrt_bc2 + eps;
                p[i] = p[i] - step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}
