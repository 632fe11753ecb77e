#![allow(dead_code)]

use flowmix::autodiff::{finite_diff_gradient, max_relative_error, Gradients};
use flowmix::{rng, ParamStore, Result, Tensor};

/// Replaces every trainable parameter by `scale · N(0, 1)` so that no gradient
/// vanishes because of a zero initialization.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng::seeded(seed);
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let mut t = rng::standard_normal(&mut r, shape);
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
        store.set(id, t).unwrap();
    }
}

/// Largest relative error between backprop and central differences over
/// every trainable parameter of `store`.
pub fn param_gradient_error(store: &ParamStore, h: f64, f: impl Fn(&ParamStore) -> Result<(f64, Gradients)>) -> f64 {
    let (_, grads) = f(store).unwrap();
    let mut worst: f64 = 0.0;
    for id in store.trainable_ids() {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let numeric = finite_diff_gradient(
            |v| {
                let mut s = store.clone();
                s.set(id, v.clone())?;
                Ok(f(&s)?.0)
            },
            store.get(id),
            h,
        )
        .unwrap();
        let err = max_relative_error(&analytic, &numeric);
        if err > worst {
            worst = err;
        }
    }
    worst
}
