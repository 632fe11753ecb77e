//! Invertible layers and the flow density built from them.
//!
//! Every layer maps base-side `z` to data-side `x` in [`Bijection::forward`]
//! and back in [`Bijection::inverse`]; both return the per-row log absolute
//! Jacobian determinant of the map they apply. A [`FlowStack`] composes layers
//! over a standard normal base and evaluates densities by inverting from the
//! data side.

mod batchnorm;
mod coupling;
mod maf;
mod plu;
mod prelu;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use batchnorm::BatchNormLayer;
pub use coupling::{build_alternating_masks, CouplingLayer};
pub use maf::{build_made_masks, MafLayer};
pub use plu::PluLayer;
pub use prelu::PreluLayer;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// An invertible, differentiable map with a tractable Jacobian determinant.
pub trait Bijection {
    fn dim(&self) -> usize;

    /// `x = h(z)` and `log|det ∂h/∂z|` per row.
    fn forward(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)>;

    /// `z = h⁻¹(x)` and `log|det ∂h⁻¹/∂x|` per row.
    fn inverse(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)>;
}

/// Checks that `v` is `[batch, dim]` and returns the batch size.
pub(crate) fn batch_of(g: &Graph, v: Var, dim: usize) -> Result<usize> {
    let (rows, cols) = g.value(v).dims2()?;
    if cols != dim {
        return Err(Error::Shape { op: "flow_layer", detail: format!("input width {cols}, layer dimension {dim}") });
    }
    Ok(rows)
}

/// One entry of a flow architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Plu,
    Prelu,
    BatchNorm {
        #[serde(default = "default_bn_eps")]
        eps: f64,
        #[serde(default = "default_bn_momentum")]
        momentum: f64,
    },
    /// Affine coupling; masks alternate across the coupling layers of a stack.
    Coupling { hidden: Vec<usize> },
    /// Masked autoregressive layer; orderings alternate natural/reversed.
    Maf { hidden: Vec<usize> },
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.1
}

impl LayerSpec {
    /// `blocks` coupling layers with one hidden width list shared by all.
    pub fn realnvp(blocks: usize, hidden: &[usize]) -> Vec<LayerSpec> {
        vec![LayerSpec::Coupling { hidden: hidden.to_vec() }; blocks]
    }

    pub fn maf(blocks: usize, hidden: &[usize]) -> Vec<LayerSpec> {
        vec![LayerSpec::Maf { hidden: hidden.to_vec() }; blocks]
    }
}

#[derive(Clone, Debug)]
pub enum FlowLayer {
    Plu(PluLayer),
    Prelu(PreluLayer),
    BatchNorm(BatchNormLayer),
    Coupling(CouplingLayer),
    Maf(MafLayer),
}

impl FlowLayer {
    fn as_bijection(&self) -> &dyn Bijection {
        match self {
            FlowLayer::Plu(l) => l,
            FlowLayer::Prelu(l) => l,
            FlowLayer::BatchNorm(l) => l,
            FlowLayer::Coupling(l) => l,
            FlowLayer::Maf(l) => l,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FlowLayer::Plu(_) => "plu",
            FlowLayer::Prelu(_) => "prelu",
            FlowLayer::BatchNorm(_) => "batch_norm",
            FlowLayer::Coupling(_) => "coupling",
            FlowLayer::Maf(_) => "maf",
        }
    }
}

impl Bijection for FlowLayer {
    fn dim(&self) -> usize {
        self.as_bijection().dim()
    }

    fn forward(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        self.as_bijection().forward(g, z)
    }

    fn inverse(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        self.as_bijection().inverse(g, x)
    }
}

/// Per-row standard normal log-density `−D/2·ln(2π) − ½‖z‖²`.
pub fn base_log_prob(g: &mut Graph, z: Var) -> Result<Var> {
    let (_, d) = g.value(z).dims2()?;
    let sq = g.mul(z, z)?;
    let ss = g.sum_axis(sq, 1)?;
    let half = g.scale(ss, -0.5)?;
    g.offset(half, -0.5 * d as f64 * (2.0 * PI).ln())
}

/// Ordered composition of layers over a standard normal base: one mixture
/// component.
#[derive(Clone, Debug)]
pub struct FlowStack {
    dim: usize,
    layers: Vec<FlowLayer>,
}

impl FlowStack {
    /// Layers are named `{prefix}.{index}.*` in the store.
    pub fn build(store: &mut ParamStore, prefix: &str, dim: usize, specs: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Unsupported("zero-dimensional flow".into()));
        }
        let n_coupling = specs.iter().filter(|s| matches!(s, LayerSpec::Coupling { .. })).count();
        let masks = if n_coupling > 0 { build_alternating_masks(dim, n_coupling)? } else { Vec::new() };
        let (mut ci, mut mi) = (0, 0);
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let name = format!("{prefix}.{i}");
            let layer = match spec {
                LayerSpec::Plu => FlowLayer::Plu(PluLayer::new(store, &name, dim, rng)?),
                LayerSpec::Prelu => FlowLayer::Prelu(PreluLayer::new(store, &name, dim)?),
                LayerSpec::BatchNorm { eps, momentum } => {
                    FlowLayer::BatchNorm(BatchNormLayer::new(store, &name, dim, *eps, *momentum)?)
                }
                LayerSpec::Coupling { hidden } => {
                    ci += 1;
                    FlowLayer::Coupling(CouplingLayer::new(store, &name, &masks[ci - 1], hidden, rng)?)
                }
                LayerSpec::Maf { hidden } => {
                    let mut ordering: Vec<usize> = (0..dim).collect();
                    if mi % 2 == 1 {
                        ordering.reverse();
                    }
                    mi += 1;
                    FlowLayer::Maf(MafLayer::new(store, &name, dim, hidden, ordering, rng)?)
                }
            };
            layers.push(layer);
        }
        Ok(FlowStack { dim, layers })
    }

    /// Stack from already constructed layers.
    pub fn from_layers(dim: usize, layers: Vec<FlowLayer>) -> Result<Self> {
        if let Some(bad) = layers.iter().find(|l| l.dim() != dim) {
            return Err(Error::Shape { op: "flow_stack", detail: format!("{} layer of dimension {}, stack {dim}", bad.kind(), bad.dim()) });
        }
        Ok(FlowStack { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    /// Pushes base samples through every layer; returns `x` and the summed log-det.
    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        let batch = batch_of(g, z, self.dim)?;
        let mut x = z;
        let mut total = g.input(Tensor::zeros([batch]));
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, ld) = layer.forward(g, x).map_err(|e| e.within(|| format!("layer {i} ({})", layer.kind())))?;
            check_finite(g, &[next, ld], i, layer)?;
            total = g.add(total, ld)?;
            x = next;
        }
        Ok((x, total))
    }

    /// Inverts layer by layer from the data side; returns `z` and the summed
    /// inverse log-det.
    pub fn inverse(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let batch = batch_of(g, x, self.dim)?;
        let mut z = x;
        let mut total = g.input(Tensor::zeros([batch]));
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (prev, ld) = layer.inverse(g, z).map_err(|e| e.within(|| format!("layer {i} ({})", layer.kind())))?;
            check_finite(g, &[prev, ld], i, layer)?;
            total = g.add(total, ld)?;
            z = prev;
        }
        Ok((z, total))
    }

    /// `log f_X(x)` per row.
    pub fn log_prob(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (z, ld) = self.inverse(g, x)?;
        let base = base_log_prob(g, z)?;
        g.add(base, ld)
    }

    /// Evaluates `log f_X` outside of any training graph.
    pub fn log_prob_values(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let xv = g.input(x.clone());
        let lp = self.log_prob(&mut g, xv)?;
        Ok(g.value(lp).clone())
    }

    /// `n` draws from the flow, deterministic in `seed`.
    pub fn sample(&self, store: &ParamStore, n: usize, seed: u64) -> Result<Tensor> {
        self.sample_with(store, n, &mut rng::seeded(seed))
    }

    pub fn sample_with(&self, store: &ParamStore, n: usize, rng: &mut Rng) -> Result<Tensor> {
        let z = rng::standard_normal(rng, [n, self.dim]);
        if n == 0 {
            return Ok(z);
        }
        let mut g = Graph::new(store);
        let zv = g.input(z);
        let (x, _) = self.forward(&mut g, zv)?;
        Ok(g.value(x).clone())
    }
}

fn check_finite(g: &Graph, vars: &[Var], index: usize, layer: &FlowLayer) -> Result<()> {
    if vars.iter().all(|&v| g.value(v).is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("layer {index} ({})", layer.kind())))
    }
}
