use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Fully connected network: affine layers with `tanh` between them and a
/// linear output.
///
/// Weights are stored `[fan_in, fan_out]` so a batch `x` maps as `x W + b`.
#[derive(Clone, Debug)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Glorot-uniform weights and biases drawn from `U(±1/√fan_in)` for widths
    /// `[d_in, h_1, .., d_out]`. Random biases spread the `tanh` kinks away
    /// from the origin; with zero biases every hidden unit of a network on a
    /// one-dimensional input would be an odd function.
    pub fn new(store: &mut ParamStore, prefix: &str, widths: &[usize], rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Contract(format!("MLP widths {widths:?} need at least two positive entries")));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = store.add(format!("{prefix}.w{i}"), rng::uniform(rng, [fan_in, fan_out], -a, a))?;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let b = store.add(format!("{prefix}.b{i}"), rng::uniform(rng, [fan_out], -bound, bound))?;
            layers.push((w, b));
        }
        Ok(Mlp { widths: widths.to_vec(), layers })
    }

    /// Like [`Mlp::new`] but with the output layer set to zero, so the
    /// network starts out as the constant zero function.
    pub fn with_zero_output(store: &mut ParamStore, prefix: &str, widths: &[usize], rng: &mut Rng) -> Result<Self> {
        let mlp = Self::new(store, prefix, widths, rng)?;
        let &(w, b) = mlp.layers.last().expect("at least one layer");
        for id in [w, b] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape))?;
        }
        Ok(mlp)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_out(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_impl(g, x, None)
    }

    /// Forward pass with each weight matrix multiplied elementwise by the
    /// matching connectivity mask.
    pub fn forward_masked(&self, g: &mut Graph, x: Var, masks: &[Var]) -> Result<Var> {
        if masks.len() != self.layers.len() {
            return Err(Error::Contract(format!("{} masks for {} layers", masks.len(), self.layers.len())));
        }
        self.forward_impl(g, x, Some(masks))
    }

    fn forward_impl(&self, g: &mut Graph, x: Var, masks: Option<&[Var]>) -> Result<Var> {
        let width = g.value(x).dims2()?.1;
        if width != self.d_in() {
            return Err(Error::Shape { op: "mlp_forward", detail: format!("input width {width}, expected {}", self.d_in()) });
        }
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let mut wv = g.param(w);
            if let Some(m) = masks {
                wv = g.mul(wv, m[i])?;
            }
            let bv = g.param(b);
            let a = g.matmul(h, wv)?;
            h = g.add(a, bv)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }
}
