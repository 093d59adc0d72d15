use crate::error::Result;
use crate::tensor::ParamSet;

/// One SGD step on the trainable entries of `params`:
/// `w <- w - lr * (grad + weight_decay * w + correction)`.
///
/// Buffers are left alone. `correction` must share the layout of `params`.
pub fn sgd_step(params: &mut ParamSet, lr: f64, weight_decay: f64, correction: Option<&ParamSet>) -> Result<()> {
    sgd_step_tracked(params, lr, weight_decay, correction, None)
}

/// [`sgd_step`] that also adds each applied step `lr * (...)` to `travel`.
pub fn sgd_step_tracked(
    params: &mut ParamSet,
    lr: f64,
    weight_decay: f64,
    correction: Option<&ParamSet>,
    mut travel: Option<&mut ParamSet>,
) -> Result<()> {
    if let Some(c) = correction {
        params.check_structure(c)?;
    }
    if let Some(t) = travel.as_deref() {
        params.check_structure(t)?;
    }
    for (i, (_, p)) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let corr = correction.map(|c| c.param(i).value.data());
        let mut trav = travel.as_deref_mut().map(|t| t.param_mut(i).value.data_mut());
        let grad = p.grad.data();
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let c = corr.map_or(0.0, |c| c[j]);
            let step = lr * (grad[j] + weight_decay * *w + c);
            *w -= step;
            if let Some(t) = trav.as_deref_mut() {
                t[j] += step;
            }
        }
    }
    Ok(())
}

/// Cosine-annealed learning rate for epoch `epoch` of `epochs`, restarting at
/// `base` on epoch zero.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return base;
    }
    let t = epoch as f64 / epochs as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}
