//! Training procedures: unsupervised ELBO ascent, supervised pretraining and
//! the interleaved semi-supervised schedule.

use std::time::Instant;

use super::{MixtureModel, TemperatureSchedule};
use crate::autodiff::{Gradients, Graph, ParamId};
use crate::datasets::minibatch_indices;
use crate::error::{Error, Result};
use crate::flows::FlowLayer;
use crate::nn::{cross_entropy, Adam};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Supervised,
    Unsupervised,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Supervised => "supervised",
            Phase::Unsupervised => "unsupervised",
        }
    }
}

/// Summary of one pass over a training set.
///
/// ELBO terms are batch-size weighted means over the epoch. Supervised epochs
/// report them on the labeled set after the epoch, at temperature 1, together
/// with the supervised losses.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub elbo: f64,
    pub reconstruction: f64,
    pub prior: f64,
    pub entropy: f64,
    pub temperature: f64,
    pub seconds: f64,
    /// Mean negative log-likelihood of labeled points under their own component.
    pub nll: Option<f64>,
    pub cross_entropy: Option<f64>,
    /// Components that saw no labeled example during the epoch.
    pub skipped_components: Vec<usize>,
}

fn apply_step(model: &mut MixtureModel, opt: &mut Adam, grads: Gradients, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
    opt.step(model.store_mut(), &grads.reachable_only())?;
    for (id, value) in updates {
        model.store_mut().set(id, value)?;
    }
    Ok(())
}

/// One epoch of ELBO ascent over shuffled minibatches of `data`.
pub fn train_epoch_unsupervised(
    model: &mut MixtureModel,
    data: &Tensor,
    opt: &mut Adam,
    temperature: f64,
    batch_size: usize,
    epoch: usize,
    rng: &mut Rng,
) -> Result<EpochMetrics> {
    let start = Instant::now();
    let (n, _) = data.dims2()?;
    if n == 0 {
        return Err(Error::Contract("training on an empty dataset".into()));
    }
    let mut batches = minibatch_indices(n, batch_size, rng)?;
    if has_batch_norm(model) && batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        // batch statistics of a single row are undefined; fold it into the previous batch
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    let (mut elbo, mut rec, mut pri, mut ent) = (0.0, 0.0, 0.0, 0.0);
    for (b, idx) in batches.iter().enumerate() {
        let x = data.select_rows(idx);
        let (grads, updates, terms) = {
            let mut g = Graph::training(model.store());
            let xv = g.input(x);
            let (value, terms) = model.elbo(&mut g, xv, temperature)?;
            let loss = g.neg(value)?;
            let grads = g.backward(loss)?;
            (grads, g.take_buffer_updates(), terms)
        };
        let w = idx.len() as f64;
        elbo += w * terms.mean_elbo();
        rec += w * terms.mean_reconstruction();
        pri += w * terms.mean_prior();
        ent += w * terms.mean_entropy();
        if !grads.iter().all(|(_, t)| t.is_finite()) {
            return Err(Error::numeric(format!("epoch {epoch}, batch {b}: non-finite gradient")));
        }
        apply_step(model, opt, grads, updates).map_err(|e| e.within(|| format!("epoch {epoch}, batch {b}")))?;
    }
    let n = n as f64;
    Ok(EpochMetrics {
        epoch,
        phase: Phase::Unsupervised,
        elbo: elbo / n,
        reconstruction: rec / n,
        prior: pri / n,
        entropy: ent / n,
        temperature,
        seconds: start.elapsed().as_secs_f64(),
        nll: None,
        cross_entropy: None,
        skipped_components: Vec::new(),
    })
}

fn has_batch_norm(model: &MixtureModel) -> bool {
    model.components().iter().any(|c| c.layers().iter().any(|l| matches!(l, FlowLayer::BatchNorm(_))))
}

/// One supervised epoch: each component fits the points of its own class and
/// the posterior network is trained with cross-entropy against the labels.
///
/// A component with no example of its class in a minibatch gets no gradient
/// for that batch, so its parameters and optimizer state stay untouched.
pub fn supervised_epoch(
    model: &mut MixtureModel,
    data: &Tensor,
    labels: &[usize],
    opt: &mut Adam,
    batch_size: usize,
    epoch: usize,
    rng: &mut Rng,
) -> Result<EpochMetrics> {
    let start = Instant::now();
    let (n, _) = data.dims2()?;
    if n == 0 {
        return Err(Error::Contract("supervised training needs labeled examples".into()));
    }
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} points", labels.len())));
    }
    let k = model.num_components();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index(format!("label {bad} with {k} components")));
    }
    // batch norm cannot normalise a single row in training mode
    let min_rows = if has_batch_norm(model) { 2 } else { 1 };
    let batches = minibatch_indices(n, batch_size, rng)?;
    let mut seen = vec![false; k];
    let (mut nll_sum, mut xent_sum) = (0.0, 0.0);
    for (b, idx) in batches.iter().enumerate() {
        let x = data.select_rows(idx);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (grads, updates, nll, xent) = {
            let mut g = Graph::training(model.store());
            let xv = g.input(x.clone());
            let logits = model.posterior_logits(&mut g, xv)?;
            let q = g.softmax(logits, 1.0)?;
            let xent = cross_entropy(&mut g, q, &y)?;
            let mut loss = xent;
            let mut nll = 0.0;
            for (c, comp) in model.components().iter().enumerate() {
                let rows: Vec<usize> = (0..y.len()).filter(|&r| y[r] == c).collect();
                if rows.len() < min_rows {
                    continue;
                }
                seen[c] = true;
                let xc = g.input(x.select_rows(&rows));
                let lp = comp.log_prob(&mut g, xc).map_err(|e| e.within(|| format!("component {c}")))?;
                let total = g.sum(lp)?;
                nll -= g.value(total).item();
                let term = g.scale(total, -1.0 / idx.len() as f64)?;
                loss = g.add(loss, term)?;
            }
            let xent_value = g.value(xent).item();
            let grads = g.backward(loss)?;
            (grads, g.take_buffer_updates(), nll, xent_value)
        };
        nll_sum += nll;
        xent_sum += xent * idx.len() as f64;
        apply_step(model, opt, grads, updates).map_err(|e| e.within(|| format!("epoch {epoch}, batch {b}")))?;
    }
    let terms = model.elbo_values(data, 1.0)?;
    Ok(EpochMetrics {
        epoch,
        phase: Phase::Supervised,
        elbo: terms.mean_elbo(),
        reconstruction: terms.mean_reconstruction(),
        prior: terms.mean_prior(),
        entropy: terms.mean_entropy(),
        temperature: 1.0,
        seconds: start.elapsed().as_secs_f64(),
        nll: Some(nll_sum / n as f64),
        cross_entropy: Some(xent_sum / n as f64),
        skipped_components: (0..k).filter(|&c| !seen[c]).collect(),
    })
}

/// `epochs` supervised epochs on the labeled set.
pub fn pretrain_supervised(
    model: &mut MixtureModel,
    data: &Tensor,
    labels: &[usize],
    opt: &mut Adam,
    epochs: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<EpochMetrics>> {
    (0..epochs).map(|e| supervised_epoch(model, data, labels, opt, batch_size, e, rng)).collect()
}

/// How supervised and unsupervised epochs alternate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemiSupervisedOptions {
    /// Number of rounds; each round runs the supervised epochs first.
    pub rounds: usize,
    pub supervised_per_round: usize,
    pub unsupervised_per_round: usize,
    pub batch_size: usize,
    /// Batch size of the supervised epochs.
    pub labeled_batch_size: usize,
}

/// Interleaves supervised epochs on `(labeled, labels)` with unsupervised
/// epochs on `unlabeled`. The temperature of an unsupervised epoch is taken
/// from `schedule` at the count of unsupervised epochs run so far.
///
/// `on_epoch` sees every epoch as it finishes; returning an error stops
/// training.
#[allow(clippy::too_many_arguments)]
pub fn train_semisupervised(
    model: &mut MixtureModel,
    labeled: &Tensor,
    labels: &[usize],
    unlabeled: &Tensor,
    opt: &mut Adam,
    schedule: &TemperatureSchedule,
    options: &SemiSupervisedOptions,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(&EpochMetrics, &MixtureModel) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    if labeled.dims2()?.0 == 0 || unlabeled.dims2()?.0 == 0 {
        return Err(Error::Contract("semi-supervised training needs labeled and unlabeled examples".into()));
    }
    let mut history = Vec::new();
    let mut unsup = 0;
    for _ in 0..options.rounds {
        for _ in 0..options.supervised_per_round {
            let m = supervised_epoch(model, labeled, labels, opt, options.labeled_batch_size, history.len(), rng)?;
            on_epoch(&m, model)?;
            history.push(m);
        }
        for _ in 0..options.unsupervised_per_round {
            let t = schedule.at(unsup);
            let m = train_epoch_unsupervised(model, unlabeled, opt, t, options.batch_size, history.len(), rng)?;
            unsup += 1;
            on_epoch(&m, model)?;
            history.push(m);
        }
    }
    Ok(history)
}
