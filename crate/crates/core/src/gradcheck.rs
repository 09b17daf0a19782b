//! Ready-made finite-difference checks: one small model per layer type, and
//! a reduced version of the full clip classifier. Everything runs in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, CheckLoss, GradCheckOptions, GradReport};
use crate::error::Result;
use crate::kernels::Padding;
use crate::layers::Activation;
use crate::model::{
    assemble_bigru_cnn, build_vgg_prefix, truncate_head, ArchDescriptor, HeadConfig, LayerKind, LayerSpec, Model,
    VggHead,
};
use crate::tensor::Tensor;

pub struct CheckCase {
    pub name: String,
    pub model: Model<f64>,
    pub input: Tensor<f64>,
    pub loss: CheckLoss<f64>,
}

impl CheckCase {
    pub fn run(&mut self, opts: &GradCheckOptions) -> Result<GradReport> {
        finite_diff_check(&mut self.model, &self.input, &self.loss, opts)
    }
}

/// Shape of the reduced clip classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReducedModel {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub gru_units: usize,
    pub backbone_convs: usize,
    pub width_divisor: usize,
    pub fc_sizes: [usize; 2],
    pub classes: usize,
}

impl Default for ReducedModel {
    fn default() -> Self {
        ReducedModel {
            height: 16,
            width: 16,
            frames: 2,
            gru_units: 8,
            backbone_convs: 4,
            width_divisor: 16,
            fc_sizes: [512, 128],
            classes: 2,
        }
    }
}

impl ReducedModel {
    /// Builds it the way the real one is built: a VGG prefix with a
    /// classifier head, truncated, then assembled with the recurrent head.
    pub fn build(&self, seed: u64) -> Result<Model<f64>> {
        let head = VggHead::Classifier {
            hidden: 8,
            classes: self.classes,
        };
        let vgg = build_vgg_prefix(
            [self.height, self.width, 3],
            self.backbone_convs,
            self.width_divisor,
            head,
            seed,
        )?;
        let cfg = HeadConfig {
            gru_units: self.gru_units,
            fc_sizes: self.fc_sizes,
            classes: self.classes,
            frames: self.frames,
        };
        assemble_bigru_cnn(truncate_head(vgg)?, &cfg, seed.wrapping_add(1))
    }

    pub fn case(&self, seed: u64) -> Result<CheckCase> {
        let model = self.build(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let input = Tensor::from_fn([self.frames, self.height, self.width, 3], |_| {
            rng.random_range(0.0..1.0)
        });
        Ok(CheckCase {
            name: "full model".into(),
            model,
            input,
            loss: CheckLoss::CrossEntropy {
                label: (seed as usize) % self.classes,
            },
        })
    }
}

fn case(name: &str, input: &[usize], layers: Vec<LayerSpec>, ce_label: Option<usize>, seed: u64) -> Result<CheckCase> {
    let desc = ArchDescriptor {
        input_shape: input.to_vec(),
        classes: 0,
        layers,
    };
    let mut model = Model::<f64>::from_descriptor(&desc, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca5e);
    // Biases start at zero; move them so their gradients are probed away
    // from the origin.
    for t in model.parameters_mut() {
        if t.rank() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let x = Tensor::from_fn(input.to_vec(), |_| rng.random_range(-1.0..1.0));
    let loss = match ce_label {
        Some(label) => CheckLoss::CrossEntropy { label },
        None => {
            let out = desc.output_shape()?;
            CheckLoss::Projection(Tensor::from_fn(out, |_| rng.random_range(-1.0..1.0)))
        }
    };
    Ok(CheckCase {
        name: name.into(),
        model,
        input: x,
        loss,
    })
}

fn dense(name: &str, units: usize, activation: Activation) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Dense { units, activation })
}

fn conv(name: &str, filters: usize, stride: usize, padding: Padding, activation: Activation) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv2d {
            filters,
            kernel: 3,
            stride,
            padding,
            activation,
        },
    )
}

/// One small randomized model per layer type.
pub fn layer_cases(seed: u64) -> Result<Vec<CheckCase>> {
    let pool = || LayerSpec::new("pool", LayerKind::MaxPool2d { window: 2, stride: 2 });
    let gru = |return_sequence| {
        LayerSpec::new(
            "gru",
            LayerKind::Gru {
                units: 4,
                return_sequence,
            },
        )
    };
    Ok(vec![
        case(
            "conv2d same",
            &[5, 6, 2],
            vec![conv("conv", 3, 1, Padding::Same, Activation::Linear)],
            None,
            seed,
        )?,
        case(
            "conv2d valid stride 2",
            &[6, 5, 2],
            vec![conv("conv", 3, 2, Padding::Valid, Activation::Linear)],
            None,
            seed + 1,
        )?,
        case(
            "maxpool",
            &[5, 6, 2],
            vec![conv("conv", 2, 1, Padding::Same, Activation::Linear), pool()],
            None,
            seed + 2,
        )?,
        case(
            "dense linear",
            &[6],
            vec![dense("fc", 4, Activation::Linear)],
            None,
            seed + 3,
        )?,
        case("relu", &[6], vec![dense("fc", 5, Activation::Relu)], None, seed + 4)?,
        case(
            "sigmoid",
            &[6],
            vec![dense("fc", 4, Activation::Sigmoid)],
            None,
            seed + 5,
        )?,
        case("tanh", &[6], vec![dense("fc", 4, Activation::Tanh)], None, seed + 6)?,
        case(
            "softmax + cross-entropy",
            &[6],
            vec![dense("fc", 3, Activation::Softmax)],
            Some(1),
            seed + 7,
        )?,
        case(
            "flatten + dropout",
            &[2, 3, 2],
            vec![
                LayerSpec::new("flat", LayerKind::Flatten),
                LayerSpec::new("drop", LayerKind::Dropout { rate: 0.25 }),
                dense("fc", 3, Activation::Tanh),
            ],
            None,
            seed + 8,
        )?,
        case("gru cell", &[1, 3], vec![gru(false)], None, seed + 9)?,
        case("gru sequence", &[4, 3], vec![gru(true)], None, seed + 10)?,
        case(
            "bidirectional gru",
            &[4, 3],
            vec![LayerSpec::new("bigru", LayerKind::BiGru { units: 4 })],
            None,
            seed + 11,
        )?,
        case(
            "time distributed",
            &[3, 4, 4, 2],
            vec![LayerSpec::new(
                "frames",
                LayerKind::TimeDistributed {
                    layers: vec![
                        conv("conv", 2, 1, Padding::Same, Activation::Relu),
                        pool(),
                        LayerSpec::new("flat", LayerKind::Flatten),
                    ],
                },
            )],
            None,
            seed + 12,
        )?,
    ])
}
