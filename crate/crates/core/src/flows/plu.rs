use super::{batch_of, Bijection};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Invertible linear map `x = P L (U + diag(s)) z + b`.
///
/// `P` is a fixed permutation, `L` unit lower triangular and `U` strictly
/// upper triangular, so `log|det| = Σ log|s_i|`. Only the relevant triangles
/// of the stored `L` and `U` matrices are ever read.
#[derive(Clone, Debug)]
pub struct PluLayer {
    dim: usize,
    perm: ParamId,
    lower: ParamId,
    upper: ParamId,
    log_scale: ParamId,
    sign: ParamId,
    bias: ParamId,
}

impl PluLayer {
    /// Starts as a random permutation: `L = I`, `U = 0`, `s = 1`, `b = 0`.
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Unsupported("zero-dimensional PLU layer".into()));
        }
        let perm = rng::permutation(rng, dim).into_iter().map(|i| i as f64).collect();
        Ok(PluLayer {
            dim,
            perm: store.add_buffer(format!("{prefix}.perm"), Tensor::vector(perm))?,
            lower: store.add(format!("{prefix}.lower"), Tensor::zeros([dim, dim]))?,
            upper: store.add(format!("{prefix}.upper"), Tensor::zeros([dim, dim]))?,
            log_scale: store.add(format!("{prefix}.log_scale"), Tensor::zeros([dim]))?,
            sign: store.add_buffer(format!("{prefix}.sign"), Tensor::ones([dim]))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros([dim]))?,
        })
    }

    /// Overwrites all factors. `perm[i]` is the input index routed to output `i`.
    #[allow(clippy::too_many_arguments)]
    pub fn set_factors(
        &self,
        store: &mut ParamStore,
        perm: &[usize],
        lower: Tensor,
        upper: Tensor,
        scale: &[f64],
        bias: &[f64],
    ) -> Result<()> {
        let mut seen = vec![false; self.dim];
        for &p in perm {
            if p >= self.dim || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Contract(format!("{perm:?} is not a permutation of 0..{}", self.dim)));
            }
        }
        if scale.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(Error::Contract("PLU scales must be finite and non-zero".into()));
        }
        store.set(self.perm, Tensor::vector(perm.iter().map(|&p| p as f64).collect()))?;
        store.set(self.lower, lower)?;
        store.set(self.upper, upper)?;
        store.set(self.log_scale, Tensor::vector(scale.iter().map(|s| s.abs().ln()).collect()))?;
        store.set(self.sign, Tensor::vector(scale.iter().map(|s| s.signum()).collect()))?;
        store.set(self.bias, Tensor::vector(bias.to_vec()))
    }

    fn perm(&self, store: &ParamStore) -> Vec<usize> {
        store.get(self.perm).data().iter().map(|&p| p as usize).collect()
    }

    /// Dense `A = P L (U + diag(s))`, for inspection and tests.
    pub fn matrix(&self, store: &ParamStore) -> Tensor {
        let d = self.dim;
        let (l, u) = (store.get(self.lower), store.get(self.upper));
        let (ls, sg) = (store.get(self.log_scale), store.get(self.sign));
        let mut lm = Tensor::eye(d);
        let mut um = Tensor::zeros([d, d]);
        for i in 0..d {
            for j in 0..d {
                if j < i {
                    lm.set2(i, j, l.get2(i, j));
                } else if j > i {
                    um.set2(i, j, u.get2(i, j));
                }
            }
            um.set2(i, i, sg.data()[i] * ls.data()[i].exp());
        }
        let lu = lm.matmul(&um).expect("square");
        let perm = self.perm(store);
        let mut a = Tensor::zeros([d, d]);
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..d {
                a.set2(i, j, lu.get2(p, j));
            }
        }
        a
    }

    fn triangle_masks(&self) -> (Tensor, Tensor) {
        let d = self.dim;
        let mut lower = Tensor::zeros([d, d]);
        let mut upper = Tensor::zeros([d, d]);
        for i in 0..d {
            for j in 0..d {
                if j < i {
                    lower.set2(i, j, 1.0);
                } else if j > i {
                    upper.set2(i, j, 1.0);
                }
            }
        }
        (lower, upper)
    }

    /// `(L, U + diag(s))` as graph nodes.
    fn factors(&self, g: &mut Graph) -> Result<(Var, Var)> {
        let (lmask, umask) = self.triangle_masks();
        let lmask = g.input(lmask);
        let umask = g.input(umask);
        let eye = g.input(Tensor::eye(self.dim));
        let l = g.param(self.lower);
        let l = g.mul(l, lmask)?;
        let l = g.add(l, eye)?;
        let u = g.param(self.upper);
        let u = g.mul(u, umask)?;
        let s = self.scale(g)?;
        let diag = g.mul(eye, s)?;
        let u = g.add(u, diag)?;
        Ok((l, u))
    }

    fn scale(&self, g: &mut Graph) -> Result<Var> {
        let ls = g.param(self.log_scale);
        let sign = g.param(self.sign);
        let s = g.exp(ls)?;
        g.mul(s, sign)
    }

    fn log_det(&self, g: &mut Graph, batch: usize, sign: f64) -> Result<Var> {
        let ls = g.param(self.log_scale);
        let total = g.sum(ls)?;
        let total = g.scale(total, sign)?;
        g.broadcast_to(total, &[batch])
    }
}

impl Bijection for PluLayer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        let batch = batch_of(g, z, self.dim)?;
        let (l, u) = self.factors(g)?;
        // row-vector form: x^T = z^T U^T L^T, then permute and shift
        let ut = g.transpose(u)?;
        let lt = g.transpose(l)?;
        let v = g.matmul(z, ut)?;
        let v = g.matmul(v, lt)?;
        let perm = self.perm(g.store());
        let v = g.gather_cols(v, &perm)?;
        let b = g.param(self.bias);
        let x = g.add(v, b)?;
        Ok((x, self.log_det(g, batch, 1.0)?))
    }

    fn inverse(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let batch = batch_of(g, x, self.dim)?;
        let (l, u) = self.factors(g)?;
        let b = g.param(self.bias);
        let v = g.sub(x, b)?;
        let perm = self.perm(g.store());
        let v = g.scatter_cols(v, &perm, self.dim)?;
        let v = g.tri_solve(l, v, true, true)?;
        let z = g.tri_solve(u, v, false, false)?;
        Ok((z, self.log_det(g, batch, -1.0)?))
    }
}
