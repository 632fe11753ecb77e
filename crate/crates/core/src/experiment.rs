//! Runs a configured experiment end to end.

use std::path::Path;

use crate::config::{ExperimentConfig, TrainingMode};
use crate::error::{Error, Result};
use crate::mixture::{pretrain_supervised, train_epoch_unsupervised, train_semisupervised, EpochMetrics, MixtureModel};
use crate::nn::Adam;
use crate::rng::{self, Rng};

/// Stream of the minibatch shuffling generator, kept apart from initialization.
const SHUFFLE_STREAM: u64 = 1;

pub const METRICS_HEADER: &str = "epoch,phase,elbo,recon,prior,entropy,temperature,seconds";

impl EpochMetrics {
    /// One line matching [`METRICS_HEADER`], without the newline.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.6}",
            self.epoch,
            self.phase.as_str(),
            self.elbo,
            self.reconstruction,
            self.prior,
            self.entropy,
            self.temperature,
            self.seconds
        )
    }
}

pub struct TrainOutcome {
    pub model: MixtureModel,
    pub history: Vec<EpochMetrics>,
    /// Shuffling generator after the last epoch.
    pub rng: Rng,
}

/// Builds the model and data described by `cfg` and trains it.
///
/// `on_epoch` sees each epoch's metrics and the model after that epoch, with
/// epochs numbered consecutively across pretraining and the main phase.
pub fn train(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    mut on_epoch: impl FnMut(&EpochMetrics, &MixtureModel) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t = &cfg.training;
    let data = cfg.dataset.load(data_dir)?;
    if data.is_empty() {
        return Err(Error::Config { key: "dataset".into(), reason: "the dataset is empty".into() });
    }
    let mut model = MixtureModel::new(cfg.model_spec(), t.seed)?;
    let mut opt = Adam::new(t.adam());
    let mut rng = rng::derive(t.seed, SHUFFLE_STREAM);
    let schedule = t.schedule();
    let mut history: Vec<EpochMetrics> = Vec::new();
    match t.mode {
        TrainingMode::Unsupervised => {
            for e in 0..t.epochs {
                let m = train_epoch_unsupervised(&mut model, &data.points, &mut opt, schedule.at(e), t.batch_size, e, &mut rng)?;
                on_epoch(&m, &model)?;
                history.push(m);
            }
        }
        TrainingMode::Semisupervised => {
            let labeled = cfg
                .dataset
                .load_labeled(data_dir)?
                .ok_or_else(|| Error::Config { key: "dataset.labeled_per_class".into(), reason: "no labeled set".into() })?;
            let labels = labeled.labels()?.to_vec();
            let opts = t.semisupervised();
            let pre = pretrain_supervised(
                &mut model,
                &labeled.points,
                &labels,
                &mut opt,
                t.pretrain_epochs,
                opts.labeled_batch_size,
                &mut rng,
            )?;
            for m in pre {
                on_epoch(&m, &model)?;
                history.push(m);
            }
            let offset = history.len();
            let main = train_semisupervised(
                &mut model,
                &labeled.points,
                &labels,
                &data.points,
                &mut opt,
                &schedule,
                &opts,
                &mut rng,
                |m, model| {
                    let mut m = m.clone();
                    m.epoch += offset;
                    on_epoch(&m, model)
                },
            )?;
            history.extend(main.into_iter().map(|mut m| {
                m.epoch += offset;
                m
            }));
        }
    }
    Ok(TrainOutcome { model, history, rng })
}
