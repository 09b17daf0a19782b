//! The TOML run configuration. Every section rejects unknown keys, and
//! [`RunConfig::validate`] checks values before anything is read or written.

use std::path::{Path, PathBuf};

use bigru_cnn::data::SynthConfig;
use bigru_cnn::gradcheck::ReducedModel;
use bigru_cnn::model::HeadConfig;
use bigru_cnn::train::{Phase, TrainConfig};
use bigru_cnn::{Error, GradCheckOptions, Result};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub workers: usize,
    pub data: DataSection,
    pub model: ModelSection,
    pub pretrain: PhaseSection,
    pub train: PhaseSection,
    pub synth: SynthSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: None,
            workers: 1,
            data: DataSection::default(),
            model: ModelSection::default(),
            pretrain: PhaseSection::default(),
            train: PhaseSection::default(),
            synth: SynthSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Clip manifest for `train`.
    pub manifest: Option<PathBuf>,
    /// Held-out clip manifest. Without it the training manifest is split.
    pub eval_manifest: Option<PathBuf>,
    /// Still-image manifest for `pretrain`.
    pub image_manifest: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub train_fraction: f64,
    pub stratify: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            eval_manifest: None,
            image_manifest: None,
            height: 128,
            width: 176,
            frames: 10,
            train_fraction: 0.8,
            stratify: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub backbone_convs: usize,
    pub width_divisor: usize,
    pub gru_units: usize,
    pub fc_sizes: [usize; 2],
    pub classes: usize,
    pub pretrain_hidden: usize,
    pub backbone: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backbone_convs: 13,
            width_divisor: 1,
            gru_units: 256,
            fc_sizes: [512, 128],
            classes: 2,
            pretrain_hidden: 4096,
            backbone: None,
        }
    }
}

/// Overrides for one training phase; unset keys keep the phase defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseSection {
    pub lr: Option<f32>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub momentum: Option<f32>,
    pub freeze_backbone: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            clips: d.clips,
            frames: d.frames,
            height: d.height,
            width: d.width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub epsilon: f64,
    pub tolerance: f64,
    pub max_samples: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub gru_units: usize,
    pub backbone_convs: usize,
    pub width_divisor: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let opts = GradCheckOptions::default();
        let m = ReducedModel::default();
        GradcheckSection {
            epsilon: opts.epsilon,
            tolerance: opts.tolerance,
            max_samples: opts.max_samples,
            height: m.height,
            width: m.width,
            frames: m.frames,
            gru_units: m.gru_units,
            backbone_convs: m.backbone_convs,
            width_divisor: m.width_divisor,
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be at least 1")));
    }
    Ok(())
}

impl PhaseSection {
    fn resolve(&self, mut base: TrainConfig) -> TrainConfig {
        if let Some(v) = self.lr {
            base.lr = v;
        }
        if let Some(v) = self.batch_size {
            base.batch_size = v;
        }
        if let Some(v) = self.epochs {
            base.epochs = v;
        }
        if let Some(v) = self.momentum {
            base.momentum = v;
        }
        if let Some(v) = self.freeze_backbone {
            base.freeze_backbone = v;
        }
        base
    }
}

impl RunConfig {
    /// Reads a TOML file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            match e.span() {
                Some(span) => {
                    let line = text[..span.start].matches('\n').count() + 1;
                    Error::Config(format!("line {line}: {msg}"))
                }
                None => Error::Config(msg),
            }
        })
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut().filter(|p| p.is_relative()) {
                *path = base.join(&*path);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.data.manifest);
        fix(&mut self.data.eval_manifest);
        fix(&mut self.data.image_manifest);
        fix(&mut self.model.backbone);
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        let mut cfg = self.pretrain.resolve(TrainConfig::pretrain());
        cfg.seed = self.seed;
        cfg.phase = Phase::Pretrain;
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = self.train.resolve(TrainConfig::main());
        cfg.seed = self.seed;
        cfg.frames = self.data.frames;
        cfg
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            gru_units: self.model.gru_units,
            fc_sizes: self.model.fc_sizes,
            classes: self.model.classes,
            frames: self.data.frames,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            clips: self.synth.clips,
            frames: self.synth.frames,
            height: self.synth.height,
            width: self.synth.width,
            seed: self.seed,
        }
    }

    pub fn reduced_model(&self) -> ReducedModel {
        let g = &self.gradcheck;
        ReducedModel {
            height: g.height,
            width: g.width,
            frames: g.frames,
            gru_units: g.gru_units,
            backbone_convs: g.backbone_convs,
            width_divisor: g.width_divisor,
            fc_sizes: self.model.fc_sizes,
            classes: self.model.classes,
        }
    }

    pub fn gradcheck_options(&self) -> GradCheckOptions {
        GradCheckOptions {
            epsilon: self.gradcheck.epsilon,
            tolerance: self.gradcheck.tolerance,
            max_samples: self.gradcheck.max_samples,
            seed: self.seed,
            check_input: true,
        }
    }

    /// Value checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        positive("workers", self.workers)?;
        let d = &self.data;
        positive("data.height", d.height)?;
        positive("data.width", d.width)?;
        positive("data.frames", d.frames)?;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.train_fraction must be in (0, 1), got {}",
                d.train_fraction
            )));
        }
        let m = &self.model;
        if !(1..=13).contains(&m.backbone_convs) {
            return Err(Error::Config(format!(
                "model.backbone_convs must be in 1..=13, got {}",
                m.backbone_convs
            )));
        }
        positive("model.width_divisor", m.width_divisor)?;
        positive("model.gru_units", m.gru_units)?;
        positive("model.fc_sizes[0]", m.fc_sizes[0])?;
        positive("model.fc_sizes[1]", m.fc_sizes[1])?;
        if m.classes < 2 {
            return Err(Error::Config(format!(
                "model.classes must be at least 2, got {}",
                m.classes
            )));
        }
        positive("model.pretrain_hidden", m.pretrain_hidden)?;
        self.pretrain_config()
            .validate()
            .map_err(|e| prefix_config("pretrain", e))?;
        self.train_config().validate().map_err(|e| prefix_config("train", e))?;
        self.synth_config().validate().map_err(|e| prefix_config("synth", e))?;
        let g = &self.gradcheck;
        if !(g.epsilon > 0.0 && g.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "gradcheck.epsilon must be positive, got {}",
                g.epsilon
            )));
        }
        if !(g.tolerance > 0.0 && g.tolerance.is_finite()) {
            return Err(Error::Config(format!(
                "gradcheck.tolerance must be positive, got {}",
                g.tolerance
            )));
        }
        positive("gradcheck.max_samples", g.max_samples)?;
        positive("gradcheck.frames", g.frames)?;
        positive("gradcheck.gru_units", g.gru_units)?;
        positive("gradcheck.width_divisor", g.width_divisor)?;
        if !(1..=13).contains(&g.backbone_convs) {
            return Err(Error::Config(format!(
                "gradcheck.backbone_convs must be in 1..=13, got {}",
                g.backbone_convs
            )));
        }
        Ok(())
    }
}

fn prefix_config(section: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("[{section}] {msg}")),
        other => other,
    }
}
