use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v <- mu v + g + wd theta`, `theta <- theta - lr v`.
pub fn sgd_momentum_step<T: Real>(
    theta: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    cfg: &SgdConfig,
) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != velocity.len() {
        return Err(Error::dims(
            "sgd_momentum_step",
            &[theta.len()],
            &[grad.len(), velocity.len()],
        ));
    }
    let lr = T::from_f64(cfg.lr);
    let mu = T::from_f64(cfg.momentum);
    let wd = T::from_f64(cfg.weight_decay);
    for ((p, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for every tensor of a store.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub cfg: SgdConfig,
    pub velocities: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(cfg: SgdConfig, store: &ParamStore<T>) -> Self {
        Self {
            cfg,
            velocities: store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    /// `grads[i]` belongs to the i-th store tensor; `None` means zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dims("sgd step", &[store.len()], &[grads.len()]));
        }
        for (id, (g, v)) in store
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(grads.iter().zip(&mut self.velocities))
        {
            let theta = store.get_mut(id).data_mut();
            match g {
                Some(g) => sgd_momentum_step(theta, g, v.data_mut(), &self.cfg)?,
                None => {
                    let zeros = vec![T::zero(); theta.len()];
                    sgd_momentum_step(theta, &zeros, v.data_mut(), &self.cfg)?
                }
            }
        }
        Ok(())
    }
}
