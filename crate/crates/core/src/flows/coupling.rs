use super::{batch_of, Bijection};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Checkerboard masks for `layers` coupling layers over `dim` inputs.
///
/// Layer `ℓ` marks the even indices when `ℓ` is even and the odd indices
/// otherwise. Marked (`true`) dimensions condition the transformation and
/// pass through unchanged; the rest are transformed.
pub fn build_alternating_masks(dim: usize, layers: usize) -> Result<Vec<Vec<bool>>> {
    if dim < 2 {
        return Err(Error::Unsupported(format!("coupling needs at least 2 dimensions, got {dim}")));
    }
    Ok((0..layers).map(|l| (0..dim).map(|i| i % 2 == l % 2).collect()).collect())
}

/// Affine coupling: `x_t = z_t ⊙ exp(s(z_c)) + t(z_c)`, `x_c = z_c`.
///
/// The scale passes through `tanh` and a learnable positive per-dimension gain
/// before being exponentiated, which keeps it bounded.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    dim: usize,
    cond: Vec<usize>,
    trans: Vec<usize>,
    s_net: Mlp,
    t_net: Mlp,
    log_gain: ParamId,
}

impl CouplingLayer {
    /// `hidden` are the hidden widths of both the scale and shift networks.
    /// Their output layers start at zero, so the layer starts as the identity.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        mask: &[bool],
        hidden: &[usize],
        rng: &mut Rng,
    ) -> Result<Self> {
        let dim = mask.len();
        let cond: Vec<usize> = (0..dim).filter(|&i| mask[i]).collect();
        let trans: Vec<usize> = (0..dim).filter(|&i| !mask[i]).collect();
        if dim < 2 {
            return Err(Error::Unsupported("coupling layers need at least 2 dimensions".into()));
        }
        if cond.is_empty() || trans.is_empty() {
            return Err(Error::Contract(format!("mask {mask:?} must contain both kinds of entries")));
        }
        let widths: Vec<usize> = std::iter::once(cond.len()).chain(hidden.iter().copied()).chain([trans.len()]).collect();
        let s_net = Mlp::with_zero_output(store, &format!("{prefix}.s"), &widths, rng)?;
        let t_net = Mlp::with_zero_output(store, &format!("{prefix}.t"), &widths, rng)?;
        let log_gain = store.add(format!("{prefix}.log_gain"), Tensor::zeros([trans.len()]))?;
        Ok(CouplingLayer { dim, cond, trans, s_net, t_net, log_gain })
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.dim];
        for &i in &self.cond {
            m[i] = true;
        }
        m
    }

    pub fn nets(&self) -> (&Mlp, &Mlp) {
        (&self.s_net, &self.t_net)
    }

    /// Bounded log-scale and shift computed from the conditioning columns.
    fn scale_shift(&self, g: &mut Graph, cond: Var) -> Result<(Var, Var)> {
        let raw = self.s_net.forward(g, cond)?;
        let raw = g.tanh(raw)?;
        let lg = g.param(self.log_gain);
        let gain = g.exp(lg)?;
        let s = g.mul(raw, gain)?;
        let t = self.t_net.forward(g, cond)?;
        Ok((s, t))
    }

    fn assemble(&self, g: &mut Graph, cond: Var, trans: Var) -> Result<Var> {
        let a = g.scatter_cols(cond, &self.cond, self.dim)?;
        let b = g.scatter_cols(trans, &self.trans, self.dim)?;
        g.add(a, b)
    }
}

impl Bijection for CouplingLayer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        batch_of(g, z, self.dim)?;
        let zc = g.gather_cols(z, &self.cond)?;
        let zt = g.gather_cols(z, &self.trans)?;
        let (s, t) = self.scale_shift(g, zc)?;
        let es = g.exp(s)?;
        let xt = g.mul(zt, es)?;
        let xt = g.add(xt, t)?;
        let x = self.assemble(g, zc, xt)?;
        let log_det = g.sum_axis(s, 1)?;
        Ok((x, log_det))
    }

    fn inverse(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        batch_of(g, x, self.dim)?;
        let xc = g.gather_cols(x, &self.cond)?;
        let xt = g.gather_cols(x, &self.trans)?;
        let (s, t) = self.scale_shift(g, xc)?;
        let neg_s = g.neg(s)?;
        let es = g.exp(neg_s)?;
        let zt = g.sub(xt, t)?;
        let zt = g.mul(zt, es)?;
        let z = self.assemble(g, xc, zt)?;
        let log_det = g.sum_axis(neg_s, 1)?;
        Ok((z, log_det))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternating_masks() {
        assert_eq!(build_alternating_masks(2, 2).unwrap(), vec![vec![true, false], vec![false, true]]);
        let m = build_alternating_masks(5, 2).unwrap();
        assert_eq!(m[0], vec![true, false, true, false, true]);
        assert_eq!(m[1], vec![false, true, false, true, false]);
        assert!(build_alternating_masks(1, 2).is_err());
    }

    #[test]
    fn every_dim_transformed_half_the_time() {
        for dim in 2..7 {
            for layers in [2, 4, 8] {
                let masks = build_alternating_masks(dim, layers).unwrap();
                for i in 0..dim {
                    let transformed = masks.iter().filter(|m| !m[i]).count();
                    assert_eq!(transformed, layers / 2);
                }
            }
        }
    }
}
