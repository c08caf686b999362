//! Plain stochastic gradient descent.

use crate::error::{Error, Result};
use crate::tape::Gradients;
use crate::tensor::Parameter;

/// `p ← p − lr·g` for every non-frozen parameter that has a gradient.
///
/// Frozen parameters are skipped even when a gradient is supplied.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    grads: &Gradients,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    for p in params {
        if p.frozen {
            continue;
        }
        let Some(g) = grads.get(&p.name) else { continue };
        if g.shape() != p.value.shape() {
            return Err(Error::dim("sgd_step", p.value.shape(), g.shape()));
        }
        for (w, d) in p.value.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}
