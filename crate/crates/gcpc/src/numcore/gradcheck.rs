//! Central finite-difference gradient oracle. This is deliberately
//! independent of the tape: it only re-evaluates a scalar function under
//! coordinate perturbations, so it can vouch for `Graph::backward`.

use crate::error::{Error, Result};
use crate::numcore::params::{Gradients, ParameterStore};
use crate::numcore::tensor::Tensor;

/// Central differences (f(p+eps) - f(p-eps)) / (2 eps) per coordinate of
/// every trainable parameter. Non-trainable parameters get zero gradients.
pub fn finite_diff_gradient<F>(f: F, params: &ParameterStore, eps: f64) -> Result<Gradients>
where
    F: Fn(&ParameterStore) -> Result<f64>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Contract(format!("finite difference step must be positive, got {eps}")));
    }
    let mut grads = params.zero_gradients();
    let mut work = params.clone();
    let names = params.names();
    for name in &names {
        if !params.is_trainable(name) {
            continue;
        }
        let numel = params.get(name)?.numel();
        let mut gdata = vec![0.0; numel];
        for i in 0..numel {
            let orig = params.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + eps;
            let plus = f(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - eps;
            let minus = f(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite evaluation while differencing {name:?}[{i}]"
                )));
            }
            gdata[i] = (plus - minus) / (2.0 * eps);
        }
        let shape = params.get(name)?.shape().to_vec();
        grads.insert(name.clone(), Tensor::new(shape, gdata)?);
    }
    Ok(grads)
}

/// Largest scaled relative error between two gradient maps:
/// |a - b| / max(1, |a|, |b|), maximized over all coordinates.
pub fn max_rel_error(a: &Gradients, b: &Gradients) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, ga) in a {
        let gb = match b.get(name) {
            Some(g) => g,
            None => continue,
        };
        for (x, y) in ga.data().iter().zip(gb.data()) {
            let denom = 1.0f64.max(x.abs()).max(y.abs());
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
