use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::RunRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroOrderConfig {
    pub lr: f64,
    pub perturbation_scale: f64,
}

impl Default for ZeroOrderConfig {
    fn default() -> Self {
        Self {
            lr: 1e-6,
            perturbation_scale: 1e-3,
        }
    }
}

/// Anything whose trainable values can be walked in a fixed order.
pub trait ZoParams {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f32]));
}

impl ZoParams for Model {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        for (_, t) in self.trainable_mut() {
            f(t.data_mut());
        }
    }
}

impl ZoParams for Tensor {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        f(self.data_mut());
    }
}

/// Adds `scale * z` where `z ~ N(0, I)` is regenerated from `seed`.
fn shift<P: ZoParams + ?Sized>(params: &mut P, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.visit_mut(&mut |xs| {
        for x in xs {
            let z: f64 = rng.sample::<f32, _>(StandardNormal) as f64;
            *x = (*x as f64 + scale * z) as f32;
        }
    });
}

/// Two-sided probe along the direction drawn from `seed`. Parameters are
/// perturbed in place and restored before returning.
/// Returns `(loss_plus, loss_minus, projected_grad)`.
pub fn zo_probe<P: ZoParams + ?Sized>(
    params: &mut P,
    seed: u64,
    eps: f64,
    mut loss: impl FnMut(&P) -> Result<f64>,
) -> Result<(f64, f64, f64)> {
    shift(params, seed, eps);
    let plus = loss(params);
    shift(params, seed, -2.0 * eps);
    let minus = loss(params);
    shift(params, seed, eps);
    let (plus, minus) = (plus?, minus?);
    let g = (plus - minus) / (2.0 * eps);
    if !g.is_finite() {
        return Err(Error::ZeroOrderDivergence {
            plus: plus as f32,
            minus: minus as f32,
        });
    }
    Ok((plus, minus, g))
}

/// `θ -= lr * g * z` with `z` regenerated from `seed`.
pub fn zo_apply<P: ZoParams + ?Sized>(params: &mut P, seed: u64, lr: f64, projected_grad: f64) {
    shift(params, seed, -lr * projected_grad);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroOrderOutcome {
    pub seed: u64,
    pub loss_plus: f64,
    pub loss_minus: f64,
    pub projected_grad: f64,
}

/// One forward-only step on the adapters of `model`. `batch` holds
/// `(inputs, targets)` pairs; the loss is their mean.
pub fn zero_order_step(
    model: &mut Model,
    batch: &[(Vec<u32>, Vec<u32>)],
    config: &ZeroOrderConfig,
    rng: &mut RunRng,
) -> Result<ZeroOrderOutcome> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let seed: u64 = rng.random();
    let (loss_plus, loss_minus, projected_grad) = zo_probe(model, seed, config.perturbation_scale, |m: &Model| {
        let mut total = 0.0;
        for (x, y) in batch {
            total += m.loss_no_grad(x, y)? as f64;
        }
        Ok(total / batch.len() as f64)
    })?;
    zo_apply(model, seed, config.lr, projected_grad);
    Ok(ZeroOrderOutcome {
        seed,
        loss_plus,
        loss_minus,
        projected_grad,
    })
}
