use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-wise `softmax(logits / temperature)`.
pub fn softmax_with_temperature(g: &mut Graph, logits: Var, temperature: f64) -> Result<Var> {
    g.softmax(logits, temperature)
}

/// Mean over rows of `-ln probs[row, label]`, with probabilities clamped at
/// [`PROB_FLOOR`].
pub fn cross_entropy(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let (rows, k) = g.value(probs).dims2()?;
    if rows != labels.len() {
        return Err(Error::Shape { op: "cross_entropy", detail: format!("{rows} rows, {} labels", labels.len()) });
    }
    let mut onehot = Tensor::zeros([rows, k]);
    for (r, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Index(format!("label {l} with {k} classes")));
        }
        onehot.set2(r, l, 1.0);
    }
    let clamped = g.max_const(probs, PROB_FLOOR)?;
    let logp = g.log(clamped)?;
    let mask = g.input(onehot);
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / rows as f64)
}
