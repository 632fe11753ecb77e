use super::{batch_of, Bijection};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Elementwise `x = z` for `z >= 0`, `x = α z` otherwise, with `α = exp(a)`.
#[derive(Clone, Debug)]
pub struct PreluLayer {
    dim: usize,
    log_alpha: ParamId,
}

impl PreluLayer {
    /// Starts at `α = 1` (identity).
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(PreluLayer { dim, log_alpha: store.add(format!("{prefix}.log_alpha"), Tensor::zeros([1]))? })
    }

    pub fn alpha(&self, store: &ParamStore) -> f64 {
        store.get(self.log_alpha).item().exp()
    }

    pub fn set_alpha(&self, store: &mut ParamStore, alpha: f64) -> Result<()> {
        store.set(self.log_alpha, Tensor::vector(vec![alpha.ln()]))
    }

    /// Shared by both directions: the sign pattern of the input picks the
    /// slope, and the sign is preserved by the map.
    fn apply(&self, g: &mut Graph, input: Var, direction: f64) -> Result<(Var, Var)> {
        let batch = batch_of(g, input, self.dim)?;
        let v = g.value(input);
        let pos = v.map(|x| if x >= 0.0 { 1.0 } else { 0.0 });
        let neg = v.map(|x| if x >= 0.0 { 0.0 } else { 1.0 });
        let counts: Vec<f64> = (0..batch).map(|r| neg.row(r).iter().sum()).collect();
        let a = g.param(self.log_alpha);
        let a = g.scale(a, direction)?;
        let alpha = g.exp(a)?;
        let neg = g.input(neg);
        let pos = g.input(pos);
        let slope = g.mul(neg, alpha)?;
        let slope = g.add(slope, pos)?;
        let out = g.mul(input, slope)?;
        let counts = g.input(Tensor::vector(counts));
        let log_det = g.mul(counts, a)?;
        Ok((out, log_det))
    }
}

impl Bijection for PreluLayer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        self.apply(g, z, 1.0)
    }

    fn inverse(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        self.apply(g, x, -1.0)
    }
}
