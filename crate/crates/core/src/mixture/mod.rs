//! The variational mixture of flows.
//!
//! `K` flow stacks share one architecture but have their own parameters. A
//! posterior network maps each point to a softmax over the `K` components,
//! and the evidence lower bound
//!
//! ```text
//! ELBO(x) = Σ_k q(k|x) · (log p(x|k) + log p(k) − log q(k|x))
//! ```
//!
//! is evaluated exactly by summing over the components, so no sampling of the
//! discrete latent is involved anywhere.

mod schedule;
mod train;

use serde::{Deserialize, Serialize};

pub use schedule::TemperatureSchedule;
pub use train::{
    pretrain_supervised, supervised_epoch, train_epoch_unsupervised, train_semisupervised, EpochMetrics, Phase,
    SemiSupervisedOptions,
};

use crate::autodiff::{logsumexp_slice, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::flows::{FlowStack, LayerSpec};
use crate::nn::{Mlp, PROB_FLOOR};
use crate::rng;
use crate::tensor::Tensor;

/// Architecture of a mixture model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Number of components `K`.
    pub components: usize,
    /// Data dimension `D`.
    pub dim: usize,
    /// Layers of every component, base side first.
    pub flow: Vec<LayerSpec>,
    /// Hidden widths of the posterior network.
    pub posterior_hidden: Vec<usize>,
}

/// Per-example breakdown of the ELBO.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ElboTerms {
    /// `E_q[log p(x|z)]`
    pub reconstruction: Vec<f64>,
    /// `E_q[log p(z)]`
    pub prior: Vec<f64>,
    /// `−E_q[log q(z|x)]`
    pub entropy: Vec<f64>,
}

impl ElboTerms {
    pub fn per_example(&self) -> Vec<f64> {
        (0..self.reconstruction.len()).map(|i| self.reconstruction[i] + self.prior[i] + self.entropy[i]).collect()
    }

    pub fn mean_reconstruction(&self) -> f64 {
        mean(&self.reconstruction)
    }

    pub fn mean_prior(&self) -> f64 {
        mean(&self.prior)
    }

    pub fn mean_entropy(&self) -> f64 {
        mean(&self.entropy)
    }

    pub fn mean_elbo(&self) -> f64 {
        mean(&self.per_example())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct MixtureModel {
    spec: ModelSpec,
    store: ParamStore,
    components: Vec<FlowStack>,
    posterior: Mlp,
    log_prior: Vec<f64>,
}

impl MixtureModel {
    /// Fresh model with a uniform prior; initialization is deterministic in `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.components == 0 {
            return Err(Error::Contract("a mixture needs at least one component".into()));
        }
        if spec.dim == 0 {
            return Err(Error::Contract("data dimension must be positive".into()));
        }
        let mut rng = rng::seeded(seed);
        let mut store = ParamStore::new();
        let components = (0..spec.components)
            .map(|k| FlowStack::build(&mut store, &format!("component.{k}"), spec.dim, &spec.flow, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let widths: Vec<usize> = std::iter::once(spec.dim)
            .chain(spec.posterior_hidden.iter().copied())
            .chain([spec.components])
            .collect();
        let posterior = Mlp::new(&mut store, "posterior", &widths, &mut rng)?;
        let log_prior = vec![-(spec.components as f64).ln(); spec.components];
        Ok(MixtureModel { spec, store, components, posterior, log_prior })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn components(&self) -> &[FlowStack] {
        &self.components
    }

    pub fn posterior(&self) -> &Mlp {
        &self.posterior
    }

    pub fn log_prior(&self) -> &[f64] {
        &self.log_prior
    }

    /// Replaces the prior with `probs` (must lie on the simplex).
    pub fn set_prior(&mut self, probs: &[f64]) -> Result<()> {
        if probs.len() != self.num_components()
            || probs.iter().any(|&p| !(p > 0.0))
            || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::Contract(format!("prior {probs:?} is not a point of the open simplex")));
        }
        self.log_prior = probs.iter().map(|p| p.ln()).collect();
        Ok(())
    }

    pub(crate) fn set_log_prior(&mut self, log_prior: Vec<f64>) -> Result<()> {
        if log_prior.len() != self.num_components() || log_prior.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("log prior of length {}", log_prior.len())));
        }
        self.log_prior = log_prior;
        Ok(())
    }

    /// Sets every posterior weight and bias to zero (uniform responsibilities).
    pub fn zero_posterior(&mut self) {
        let ids: Vec<_> = self.posterior.params().collect();
        for id in ids {
            let shape = self.store.get(id).shape().to_vec();
            self.store.set(id, Tensor::zeros(shape)).expect("same shape");
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (rows, cols) = x.dims2()?;
        if cols != self.dim() {
            return Err(Error::Contract(format!("data has dimension {cols}, model expects {}", self.dim())));
        }
        Ok(rows)
    }

    pub fn posterior_logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.posterior.forward(g, x)
    }

    /// `log p(x | z = k)` for every component, as a `[batch, K]` node.
    pub fn component_log_probs(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (batch, _) = g.value(x).dims2()?;
        let mut cols = Vec::with_capacity(self.components.len());
        for (k, comp) in self.components.iter().enumerate() {
            let lp = comp.log_prob(g, x).map_err(|e| e.within(|| format!("component {k}")))?;
            cols.push(g.reshape(lp, &[batch, 1])?);
        }
        g.concat(&cols, 1)
    }

    /// ELBO averaged over the batch, with the posterior at temperature `t`.
    pub fn elbo(&self, g: &mut Graph, x: Var, temperature: f64) -> Result<(Var, ElboTerms)> {
        let logits = self.posterior_logits(g, x)?;
        let q = g.softmax(logits, temperature)?;
        let lp = self.component_log_probs(g, x)?;
        self.elbo_from_parts(g, lp, q)
    }

    /// ELBO with the posterior probabilities supplied directly.
    pub fn elbo_with_posterior(&self, g: &mut Graph, x: Var, q: Var) -> Result<(Var, ElboTerms)> {
        let lp = self.component_log_probs(g, x)?;
        self.elbo_from_parts(g, lp, q)
    }

    fn elbo_from_parts(&self, g: &mut Graph, lp: Var, q: Var) -> Result<(Var, ElboTerms)> {
        let (batch, k) = g.value(lp).dims2()?;
        if batch == 0 {
            return Err(Error::Contract("ELBO of an empty batch".into()));
        }
        if g.value(q).shape() != [batch, k] {
            return Err(Error::Shape { op: "elbo", detail: format!("posterior {:?}, expected [{batch}, {k}]", g.shape(q)) });
        }
        let clamped = g.max_const(q, PROB_FLOOR)?;
        let log_q = g.log(clamped)?;
        let prior = g.input(Tensor::vector(self.log_prior.clone()));
        let inner = g.add(lp, prior)?;
        let inner = g.sub(inner, log_q)?;
        let weighted = g.mul(q, inner)?;
        let per_example = g.sum_axis(weighted, 1)?;
        let elbo = g.mean(per_example)?;

        let (qv, lpv, lqv) = (g.value(q), g.value(lp), g.value(log_q));
        let mut terms = ElboTerms::default();
        for r in 0..batch {
            let (mut rec, mut pri, mut ent) = (0.0, 0.0, 0.0);
            for j in 0..k {
                let w = qv.get2(r, j);
                rec += w * lpv.get2(r, j);
                pri += w * self.log_prior[j];
                ent -= w * lqv.get2(r, j);
            }
            terms.reconstruction.push(rec);
            terms.prior.push(pri);
            terms.entropy.push(ent);
        }
        Ok((elbo, terms))
    }

    /// ELBO terms evaluated outside of any training graph.
    pub fn elbo_values(&self, x: &Tensor, temperature: f64) -> Result<ElboTerms> {
        self.check_input(x)?;
        let mut g = Graph::new(&self.store);
        let xv = g.input(x.clone());
        Ok(self.elbo(&mut g, xv, temperature)?.1)
    }

    /// `q(z|x)` at temperature `t`, `[batch, K]`.
    pub fn responsibilities(&self, x: &Tensor, temperature: f64) -> Result<Tensor> {
        self.check_input(x)?;
        let mut g = Graph::new(&self.store);
        let xv = g.input(x.clone());
        let logits = self.posterior_logits(&mut g, xv)?;
        let q = g.softmax(logits, temperature)?;
        Ok(g.value(q).clone())
    }

    /// `log p(x|k)` for every component, `[batch, K]`.
    pub fn component_log_prob_values(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut g = Graph::new(&self.store);
        let xv = g.input(x.clone());
        let lp = self.component_log_probs(&mut g, xv)?;
        Ok(g.value(lp).clone())
    }

    /// `log Σ_k p(k) p(x|k)` per row.
    pub fn exact_log_evidence(&self, x: &Tensor) -> Result<Tensor> {
        let lp = self.component_log_prob_values(x)?;
        let (rows, k) = lp.dims2()?;
        let out = (0..rows)
            .map(|r| {
                let joint: Vec<f64> = (0..k).map(|j| lp.get2(r, j) + self.log_prior[j]).collect();
                logsumexp_slice(&joint)
            })
            .collect();
        Ok(Tensor::vector(out))
    }

    /// Exact posterior `p(k|x)` under the current components and prior.
    pub fn exact_posterior(&self, x: &Tensor) -> Result<Tensor> {
        let lp = self.component_log_prob_values(x)?;
        let (rows, k) = lp.dims2()?;
        let mut out = Tensor::zeros([rows, k]);
        for r in 0..rows {
            let joint: Vec<f64> = (0..k).map(|j| lp.get2(r, j) + self.log_prior[j]).collect();
            let lse = logsumexp_slice(&joint);
            for (j, v) in joint.iter().enumerate() {
                out.set2(r, j, (v - lse).exp());
            }
        }
        Ok(out)
    }

    /// Most probable component under the posterior network; ties go to the
    /// lowest index. Softmax is monotone, so this is the argmax of the logits
    /// and does not depend on the temperature.
    pub fn assign_cluster(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.check_input(x)?;
        let mut g = Graph::new(&self.store);
        let xv = g.input(x.clone());
        let logits = self.posterior_logits(&mut g, xv)?;
        let lv = g.value(logits);
        Ok((0..lv.shape()[0]).map(|r| argmax(lv.row(r))).collect())
    }

    /// `n` samples from component `k`.
    pub fn sample_component(&self, k: usize, n: usize, seed: u64) -> Result<Tensor> {
        let comp = self
            .components
            .get(k)
            .ok_or_else(|| Error::Index(format!("component {k} of {}", self.components.len())))?;
        comp.sample(&self.store, n, seed)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
