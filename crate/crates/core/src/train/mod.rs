//! Loss, SGD, the epoch loop and accuracy.

pub mod eval;
pub mod loss;
mod trainer;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use eval::{confusion, evaluate, predict_all};
pub use loss::{cross_entropy, cross_entropy_grad, softmax_cross_entropy_grad, PROB_FLOOR};
pub use trainer::{BatchResult, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Person-vs-background still images on the VGG classifier.
    Pretrain,
    /// Clips on the assembled BiGRU-CNN.
    Main,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Main => "main",
        }
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "main" => Ok(Phase::Main),
            other => Err(Error::Config(format!("unknown phase {other:?} (pretrain or main)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub phase: Phase,
    /// Frames sampled per clip; ignored when pretraining.
    pub frames: usize,
    pub freeze_backbone: bool,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f32,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            phase: Phase::Pretrain,
            frames: 1,
            freeze_backbone: false,
            momentum: 0.0,
        }
    }

    pub fn main() -> Self {
        TrainConfig {
            lr: 0.0008,
            batch_size: 10,
            epochs: 250,
            seed: 0,
            phase: Phase::Main,
            frames: 10,
            freeze_backbone: false,
            momentum: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.phase == Phase::Main && self.frames == 0 {
            return Err(Error::Config("frames per clip must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch's batches.
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
}

impl EpochReport {
    pub const CSV_HEADER: &'static str = "epoch,loss,train_acc,eval_acc";
}

impl fmt::Display for EpochReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{:.6},{:.4},{:.4}",
            self.epoch, self.loss, self.train_acc, self.eval_acc
        )
    }
}

/// Appends one report to a CSV history, writing the header if the file is
/// new or empty.
pub fn append_history(path: &Path, report: &EpochReport) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let fresh = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut text = String::new();
    if fresh {
        text.push_str(EpochReport::CSV_HEADER);
        text.push('\n');
    }
    text.push_str(&format!("{report}\n"));
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// `theta -= lr * g` for each pair.
pub fn sgd_step(params: Vec<&mut Tensor>, grads: &[Tensor], lr: f32) -> Result<()> {
    check_pairs(&params, grads)?;
    for (p, g) in params.into_iter().zip(grads) {
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
    }
    Ok(())
}

fn check_pairs(params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum. With momentum 0 this is exactly
/// [`sgd_step`].
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(params, grads, self.lr);
        }
        check_pairs(&params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((w, d), m) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *m = self.momentum * *m + d;
                *w -= self.lr * *m;
            }
        }
        Ok(())
    }
}
