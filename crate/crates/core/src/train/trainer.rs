use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::GradTape;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::exec::{map_ordered, workers};
use crate::layers::splitmix;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::eval::evaluate;
use crate::train::loss::{cross_entropy, cross_entropy_grad};
use crate::train::{EpochReport, Sgd, TrainConfig};

/// Name of the time-distributed backbone layer in an assembled model.
const BACKBONE: &str = "frames";

/// Summed loss and gradients of one batch, before mean reduction.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss_sum: f64,
    pub grads: Vec<Tensor>,
    pub count: usize,
}

/// Runs the epoch loop and keeps the model with the best evaluation
/// accuracy (earliest epoch on ties).
#[derive(Debug)]
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    opt: Sgd,
    epoch: usize,
    history: Vec<EpochReport>,
    best: Option<(EpochReport, Model)>,
}

impl Trainer {
    pub fn new(mut model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.classes() == 0 {
            return Err(Error::Structure("cannot train a headless model".into()));
        }
        if cfg.freeze_backbone {
            model
                .freeze(BACKBONE)
                .map_err(|_| Error::Config(format!("freeze_backbone set but the model has no {BACKBONE} layer")))?;
        }
        Ok(Trainer {
            opt: Sgd::new(cfg.lr, cfg.momentum),
            model,
            cfg,
            epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn history(&self) -> &[EpochReport] {
        &self.history
    }

    pub fn best(&self) -> Option<(&EpochReport, &Model)> {
        self.best.as_ref().map(|(r, m)| (r, m))
    }

    /// The best model seen, or the current one if no epoch has run.
    pub fn into_best_model(self) -> Model {
        self.best.map_or(self.model, |(_, m)| m)
    }

    fn sample_seed(&self, position: usize) -> u64 {
        splitmix(self.cfg.seed ^ splitmix((self.epoch as u64) << 32 | position as u64))
    }

    fn sample_gradient(&self, sample: &Sample, seed: u64) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = GradTape::new();
        let y = self.model.forward_train(&sample.input, &mut tape, seed)?;
        let loss = cross_entropy(&y, sample.label)?;
        let grads = self
            .model
            .backward_with(&cross_entropy_grad(&y, sample.label)?, &mut tape, false)?;
        Ok((loss, grads.params))
    }

    /// Forward and backward over `batch`, summing per-sample gradients in
    /// batch order. Samples are processed in groups the size of the worker
    /// pool so at most that many gradient sets are alive at once.
    pub fn batch_gradient(&self, batch: &[&Sample], first_position: usize) -> Result<BatchResult> {
        let mut sum = BatchResult {
            loss_sum: 0.0,
            grads: self.model.zero_grads(),
            count: 0,
        };
        let group = workers(self.model.execution());
        for (g, chunk) in batch.chunks(group).enumerate() {
            let base = first_position + g * group;
            let results = map_ordered(chunk, self.model.execution(), |i, s| {
                self.sample_gradient(s, self.sample_seed(base + i))
            });
            for r in results {
                let (loss, grads) = r?;
                sum.loss_sum += loss;
                sum.count += 1;
                for (acc, g) in sum.grads.iter_mut().zip(&grads) {
                    acc.add_assign(g)?;
                }
            }
        }
        Ok(sum)
    }

    /// One pass over `train` in a seeded order, then accuracy on both sets.
    pub fn run_epoch(&mut self, train: &[Sample], eval: &[Sample]) -> Result<EpochReport> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if eval.is_empty() {
            return Err(Error::Data("evaluation set is empty".into()));
        }
        self.epoch += 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(
            self.cfg.seed ^ self.epoch as u64,
        )));
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let mut result = self.batch_gradient(&batch, b * self.cfg.batch_size)?;
            if !result.loss_sum.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {}, batch {}",
                    self.epoch,
                    b + 1
                )));
            }
            loss_sum += result.loss_sum;
            let scale = 1.0 / result.count as f32;
            for g in &mut result.grads {
                g.scale(scale);
            }
            self.opt.step(self.model.parameters_mut(), &result.grads)?;
        }
        let report = EpochReport {
            epoch: self.epoch,
            loss: loss_sum / train.len() as f64,
            train_acc: evaluate(&self.model, train)?,
            eval_acc: evaluate(&self.model, eval)?,
        };
        if self.best.as_ref().is_none_or(|(r, _)| report.eval_acc > r.eval_acc) {
            self.best = Some((report, self.model.clone()));
        }
        self.history.push(report);
        Ok(report)
    }

    /// Runs up to the configured number of epochs. `on_epoch` sees each
    /// report and returns whether to continue.
    pub fn fit(
        &mut self,
        train: &[Sample],
        eval: &[Sample],
        mut on_epoch: impl FnMut(&EpochReport, &Trainer) -> Result<bool>,
    ) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            let report = self.run_epoch(train, eval)?;
            if !on_epoch(&report, self)? {
                break;
            }
        }
        Ok(())
    }
}
