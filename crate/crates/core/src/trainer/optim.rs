//! RMSProp and the parameter moving average.

use stylefat_autograd::{Scalar, Tensor};

use crate::error::{ensure, Result};
use crate::params::ParamStore;

/// RMSProp without momentum: `v = a*v + (1-a)*g^2; p -= lr * g / (sqrt(v) + eps)`.
#[derive(Clone, Debug)]
pub struct RmsProp<T: Scalar> {
    pub learning_rate: f64,
    pub alpha: f64,
    pub eps: f64,
    /// Squared-gradient averages, one per parameter in store order.
    pub(crate) square_avg: Vec<Vec<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(params: &ParamStore<T>, learning_rate: f64, alpha: f64, eps: f64) -> Self {
        RmsProp {
            learning_rate,
            alpha,
            eps,
            square_avg: params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect(),
        }
    }

    pub fn square_avg(&self) -> &[Vec<T>] {
        &self.square_avg
    }

    /// Applies one update; `grads` follow the store's parameter order.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        ensure!(
            grads.len() == params.len() && self.square_avg.len() == params.len(),
            Shape,
            "optimizer expects {} gradients, got {}",
            params.len(),
            grads.len()
        );
        let (lr, a, eps) = (
            T::from_f64_lossy(self.learning_rate),
            T::from_f64_lossy(self.alpha),
            T::from_f64_lossy(self.eps),
        );
        let one = T::one();
        let ids: Vec<_> = params.ids().collect();
        for ((id, g), v) in ids.into_iter().zip(grads).zip(&mut self.square_avg) {
            let p = params.get(id);
            ensure!(
                g.shape() == p.shape(),
                Shape,
                "gradient of {} has shape {:?}, parameter {:?}",
                params.name(id),
                g.shape(),
                p.shape()
            );
            let updated = p
                .data()
                .iter()
                .zip(g.data().iter())
                .zip(v.iter_mut())
                .map(|((&p, &g), v)| {
                    *v = a * *v + (one - a) * g * g;
                    p - lr * g / (v.sqrt() + eps)
                })
                .collect();
            params.set(id, updated);
        }
        Ok(())
    }
}

/// `ema <- (1 - w) * ema + w * live`, element-wise.
///
/// Evaluated as `ema + w * (live - ema)` so that equal inputs are an exact
/// fixed point.
pub fn ema_update<T: Scalar>(ema: &mut ParamStore<T>, live: &ParamStore<T>, w: f64) -> Result<()> {
    ema.ensure_same_layout(live)?;
    ensure!(w > 0.0 && w < 1.0, Config, "EMA weight must be in (0, 1), got {w}");
    let w = T::from_f64_lossy(w);
    let ids: Vec<_> = ema.ids().collect();
    for id in ids {
        let mixed = ema
            .get(id)
            .data()
            .iter()
            .zip(live.get(id).data().iter())
            .map(|(&e, &l)| e + w * (l - e))
            .collect();
        ema.set(id, mixed);
    }
    Ok(())
}
