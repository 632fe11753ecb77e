use super::{batch_of, Bijection};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Connectivity masks of a MADE network with layer `widths`
/// `[dim, h_1, .., h_m, 2·dim]`, laid out like the weights (`[fan_in, fan_out]`).
///
/// `ordering[p]` is the input dimension at autoregressive position `p`; its
/// degree is `p + 1`. Hidden degrees cycle through `1..dim-1`. Hidden masks
/// connect when the unit's degree is at least the input's; the output mask
/// requires it to be strictly greater. Output `i` (shift) and `dim + i`
/// (log-scale) both carry the degree of input dimension `i`.
pub fn build_made_masks(widths: &[usize], dim: usize, ordering: &[usize]) -> Result<Vec<Tensor>> {
    if dim == 0 {
        return Err(Error::Unsupported("MADE needs at least one dimension".into()));
    }
    if widths.len() < 2 || widths[0] != dim || *widths.last().expect("len >= 2") != 2 * dim {
        return Err(Error::Contract(format!("MADE widths {widths:?} must run from {dim} to {}", 2 * dim)));
    }
    let mut seen = vec![false; dim];
    if ordering.len() != dim || ordering.iter().any(|&o| o >= dim || std::mem::replace(&mut seen[o], true)) {
        return Err(Error::Contract(format!("ordering {ordering:?} is not a permutation of 0..{dim}")));
    }
    let mut input_deg = vec![0usize; dim];
    for (pos, &d) in ordering.iter().enumerate() {
        input_deg[d] = pos + 1;
    }
    let hidden_deg = |units: usize| -> Vec<usize> {
        if dim == 1 {
            vec![0; units]
        } else {
            (0..units).map(|k| k % (dim - 1) + 1).collect()
        }
    };
    let mut masks = Vec::with_capacity(widths.len() - 1);
    let mut prev = input_deg.clone();
    for &units in &widths[1..widths.len() - 1] {
        let deg = hidden_deg(units);
        let mut m = Tensor::zeros([prev.len(), units]);
        for (j, &dj) in prev.iter().enumerate() {
            for (k, &dk) in deg.iter().enumerate() {
                if dk >= dj {
                    m.set2(j, k, 1.0);
                }
            }
        }
        masks.push(m);
        prev = deg;
    }
    let out_deg: Vec<usize> = input_deg.iter().chain(input_deg.iter()).copied().collect();
    let mut m = Tensor::zeros([prev.len(), 2 * dim]);
    for (j, &dj) in prev.iter().enumerate() {
        for (k, &dk) in out_deg.iter().enumerate() {
            if dk > dj {
                m.set2(j, k, 1.0);
            }
        }
    }
    masks.push(m);
    Ok(masks)
}

/// Masked autoregressive flow layer: `x_i = z_i exp(α_i) + μ_i` where
/// `(μ_i, α_i)` depend only on earlier coordinates of `x` under `ordering`.
///
/// Density evaluation is a single MADE pass; sampling needs one pass per
/// dimension.
#[derive(Clone, Debug)]
pub struct MafLayer {
    dim: usize,
    ordering: Vec<usize>,
    made: Mlp,
    masks: Vec<Tensor>,
}

impl MafLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: &[usize],
        ordering: Vec<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(dim).chain(hidden.iter().copied()).chain([2 * dim]).collect();
        let masks = build_made_masks(&widths, dim, &ordering)?;
        let made = Mlp::with_zero_output(store, &format!("{prefix}.made"), &widths, rng)?;
        Ok(MafLayer { dim, ordering, made, masks })
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    pub fn masks(&self) -> &[Tensor] {
        &self.masks
    }

    pub fn made(&self) -> &Mlp {
        &self.made
    }

    /// `(μ, α)` for every row of `x`, each `[batch, dim]`.
    pub fn shift_log_scale(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let masks: Vec<Var> = self.masks.iter().map(|m| g.input(m.clone())).collect();
        let out = self.made.forward_masked(g, x, &masks)?;
        let mu = g.slice(out, 1, 0, self.dim)?;
        let alpha = g.slice(out, 1, self.dim, self.dim)?;
        Ok((mu, alpha))
    }
}

impl Bijection for MafLayer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        let batch = batch_of(g, z, self.dim)?;
        let mut x = g.input(Tensor::zeros([batch, self.dim]));
        let mut alpha = x;
        // after pass p the first p+1 positions of the ordering are final
        for _ in 0..self.dim {
            let (mu, a) = self.shift_log_scale(g, x)?;
            let scale = g.exp(a)?;
            let scaled = g.mul(z, scale)?;
            x = g.add(scaled, mu)?;
            alpha = a;
        }
        let log_det = g.sum_axis(alpha, 1)?;
        Ok((x, log_det))
    }

    fn inverse(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        batch_of(g, x, self.dim)?;
        let (mu, alpha) = self.shift_log_scale(g, x)?;
        let centered = g.sub(x, mu)?;
        let neg = g.neg(alpha)?;
        let inv_scale = g.exp(neg)?;
        let z = g.mul(centered, inv_scale)?;
        let log_det = g.sum_axis(neg, 1)?;
        Ok((z, log_det))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn connected(masks: &[Tensor]) -> Tensor {
        // path counts input -> output through the masked layers
        let mut acc = masks[0].clone();
        for m in &masks[1..] {
            acc = acc.matmul(m).unwrap();
        }
        acc
    }

    #[test]
    fn two_dims_natural_order() {
        let masks = build_made_masks(&[2, 4, 4], 2, &[0, 1]).unwrap();
        let c = connected(&masks);
        // outputs: mu0, mu1, a0, a1
        for input in 0..2 {
            assert_eq!(c.get2(input, 0), 0.0);
            assert_eq!(c.get2(input, 2), 0.0);
        }
        assert!(c.get2(0, 1) > 0.0 && c.get2(0, 3) > 0.0);
        assert_eq!(c.get2(1, 1), 0.0);
        assert_eq!(c.get2(1, 3), 0.0);
    }

    #[test]
    fn reversed_order_flips_dependency() {
        let c = connected(&build_made_masks(&[2, 3, 4], 2, &[1, 0]).unwrap());
        assert!(c.get2(1, 0) > 0.0 && c.get2(1, 2) > 0.0);
        assert_eq!(c.get2(0, 1), 0.0);
        assert_eq!(c.get2(0, 0), 0.0);
    }

    #[test]
    fn one_dim_is_constant() {
        let c = connected(&build_made_masks(&[1, 3, 2], 1, &[0]).unwrap());
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_widths_rejected() {
        assert!(build_made_masks(&[3, 4, 5], 3, &[0, 1, 2]).is_err());
        assert!(build_made_masks(&[3, 4, 6], 3, &[0, 0, 2]).is_err());
        assert!(build_made_masks(&[0, 0], 0, &[]).is_err());
    }

    #[test]
    fn no_hidden_layer_is_strict() {
        let c = connected(&build_made_masks(&[3, 6], 3, &[2, 0, 1]).unwrap());
        // position of dims: 2 -> 1, 0 -> 2, 1 -> 3
        let pos = [2, 3, 1];
        for i in 0..3 {
            for o in 0..3 {
                let expect = pos[i] < pos[o];
                assert_eq!(c.get2(i, o) > 0.0, expect, "in {i} out {o}");
            }
        }
    }
}
