use super::{batch_of, Bijection};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch-normalization bijection.
///
/// In the density direction (`inverse`, data side to base side) the input is
/// standardized, `z = (x − μ̃) / sqrt(σ̃² + ε)`, with `log|det| = −½ Σ log(σ̃²+ε)`.
/// In a training graph `μ̃` and `σ̃²` are the (biased) statistics of the current
/// batch and are differentiated through; otherwise the running statistics are
/// used. The generative direction always uses the running statistics, which
/// makes sampling and evaluation deterministic.
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    dim: usize,
    eps: f64,
    momentum: f64,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, eps: f64, momentum: f64) -> Result<Self> {
        if !(eps > 0.0) || !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Contract(format!("batch-norm eps {eps} / momentum {momentum} out of range")));
        }
        Ok(BatchNormLayer {
            dim,
            eps,
            momentum,
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros([dim]))?,
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::ones([dim]))?,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn running_stats<'a>(&self, store: &'a ParamStore) -> (&'a Tensor, &'a Tensor) {
        (store.get(self.running_mean), store.get(self.running_var))
    }

    /// `(mean, log(var + eps))` as nodes, from the batch or the running stats.
    fn stats(&self, g: &mut Graph, x: Var, batch: usize) -> Result<(Var, Var)> {
        if g.is_training() {
            if batch < 2 {
                return Err(Error::Contract("batch-norm needs at least two rows in training".into()));
            }
            let mean = g.mean_axis(x, 0)?;
            let centered = g.sub(x, mean)?;
            let sq = g.mul(centered, centered)?;
            let var = g.mean_axis(sq, 0)?;
            self.queue_running_update(g, mean, var, batch);
            let v = g.offset(var, self.eps)?;
            let log_var = g.log(v)?;
            Ok((mean, log_var))
        } else {
            let mean = g.param(self.running_mean);
            let var = g.store().get(self.running_var).map(|v| (v + self.eps).ln());
            Ok((mean, g.input(var)))
        }
    }

    fn queue_running_update(&self, g: &mut Graph, mean: Var, var: Var, batch: usize) {
        let m = self.momentum;
        let unbiased = batch as f64 / (batch as f64 - 1.0);
        let store = g.store();
        let (rm, rv) = (store.get(self.running_mean), store.get(self.running_var));
        let new_mean = blend(rm, g.value(mean), m, 1.0);
        let new_var = blend(rv, g.value(var), m, unbiased);
        g.record_buffer_update(self.running_mean, new_mean);
        g.record_buffer_update(self.running_var, new_var);
    }

    fn log_det(&self, g: &mut Graph, log_var: Var, batch: usize, sign: f64) -> Result<Var> {
        let total = g.sum(log_var)?;
        let total = g.scale(total, 0.5 * sign)?;
        g.broadcast_to(total, &[batch])
    }
}

fn blend(old: &Tensor, new: &Tensor, momentum: f64, factor: f64) -> Tensor {
    let data = old.data().iter().zip(new.data()).map(|(o, n)| (1.0 - momentum) * o + momentum * factor * n).collect();
    Tensor::new(old.shape(), data).expect("shape")
}

impl Bijection for BatchNormLayer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        let batch = batch_of(g, z, self.dim)?;
        let mean = g.param(self.running_mean);
        let log_var = g.store().get(self.running_var).map(|v| (v + self.eps).ln());
        let log_var = g.input(log_var);
        let half = g.scale(log_var, 0.5)?;
        let std = g.exp(half)?;
        let x = g.mul(z, std)?;
        let x = g.add(x, mean)?;
        Ok((x, self.log_det(g, log_var, batch, 1.0)?))
    }

    fn inverse(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let batch = batch_of(g, x, self.dim)?;
        let (mean, log_var) = self.stats(g, x, batch)?;
        let centered = g.sub(x, mean)?;
        let half = g.scale(log_var, -0.5)?;
        let inv_std = g.exp(half)?;
        let z = g.mul(centered, inv_std)?;
        Ok((z, self.log_det(g, log_var, batch, -1.0)?))
    }
}
