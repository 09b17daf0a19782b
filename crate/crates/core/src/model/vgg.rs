//! VGG16-style backbone, head removal, and assembly of the time-distributed
//! CNN + bidirectional GRU classifier.

use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::layers::{Activation, Layer};
use crate::model::descriptor::{ArchDescriptor, LayerKind, LayerSpec};
use crate::model::Model;
use crate::tensor::Element;

/// Output channels of each 3x3 conv, grouped by pooling block.
pub const VGG16_BLOCKS: [&[usize]; 5] = [
    &[64, 64],
    &[128, 128],
    &[256, 256, 256],
    &[512, 512, 512],
    &[512, 512, 512],
];

/// Names of the classifier layers removed by [`truncate_head`].
pub const HEAD_LAYERS: [&str; 3] = ["fc6", "fc7", "fc8"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VggHead {
    None,
    /// flatten -> fc6(hidden, relu) -> fc7(hidden, relu) -> fc8(classes, softmax)
    Classifier {
        hidden: usize,
        classes: usize,
    },
}

impl VggHead {
    /// Person vs. background pretraining head.
    pub const PERSON: VggHead = VggHead::Classifier {
        hidden: 4096,
        classes: 2,
    };
    /// The canonical ImageNet head.
    pub const IMAGENET: VggHead = VggHead::Classifier {
        hidden: 4096,
        classes: 1000,
    };
}

/// Descriptor for the first `convs` VGG16 conv layers (1..=13) on an
/// `[H, W, C]` input, with each conv's channel count divided by
/// `width_divisor`. A pool follows every completed block.
pub fn vgg_prefix_descriptor(
    input: [usize; 3],
    convs: usize,
    width_divisor: usize,
    head: VggHead,
) -> Result<ArchDescriptor> {
    let total: usize = VGG16_BLOCKS.iter().map(|b| b.len()).sum();
    if convs == 0 || convs > total {
        return Err(Error::Config(format!(
            "VGG conv count must be in 1..={total}, got {convs}"
        )));
    }
    if width_divisor == 0 {
        return Err(Error::Config("width divisor must be at least 1".into()));
    }
    let mut layers = Vec::new();
    let mut remaining = convs;
    let mut pools = 0u32;
    for (b, block) in VGG16_BLOCKS.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let take = remaining.min(block.len());
        for (i, &channels) in block.iter().take(take).enumerate() {
            layers.push(LayerSpec::new(
                format!("conv{}_{}", b + 1, i + 1),
                LayerKind::Conv2d {
                    filters: (channels / width_divisor).max(1),
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Same,
                    activation: Activation::Relu,
                },
            ));
        }
        remaining -= take;
        if take == block.len() {
            layers.push(LayerSpec::new(
                format!("pool{}", b + 1),
                LayerKind::MaxPool2d { window: 2, stride: 2 },
            ));
            pools += 1;
        }
    }
    let min = 1usize << pools;
    if input[0] < min || input[1] < min {
        return Err(Error::Dimension(format!(
            "input {}x{} too small for {pools} halvings (need at least {min}x{min})",
            input[0], input[1]
        )));
    }
    let classes = match head {
        VggHead::None => 0,
        VggHead::Classifier { hidden, classes } => {
            layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
            for (name, units, activation) in [
                ("fc6", hidden, Activation::Relu),
                ("fc7", hidden, Activation::Relu),
                ("fc8", classes, Activation::Softmax),
            ] {
                layers.push(LayerSpec::new(name, LayerKind::Dense { units, activation }));
            }
            classes
        }
    };
    let desc = ArchDescriptor {
        input_shape: input.to_vec(),
        classes,
        layers,
    };
    desc.infer_shapes()?;
    Ok(desc)
}

/// The full 13-conv / 5-pool VGG16 stack.
pub fn vgg16_descriptor(input: [usize; 3], head: VggHead) -> Result<ArchDescriptor> {
    vgg_prefix_descriptor(input, 13, 1, head)
}

pub fn build_vgg16<T: Element>(input: [usize; 3], head: VggHead, seed: u64) -> Result<Model<T>> {
    Model::from_descriptor(&vgg16_descriptor(input, head)?, seed)
}

pub fn build_vgg_prefix<T: Element>(
    input: [usize; 3],
    convs: usize,
    width_divisor: usize,
    head: VggHead,
    seed: u64,
) -> Result<Model<T>> {
    Model::from_descriptor(&vgg_prefix_descriptor(input, convs, width_divisor, head)?, seed)
}

/// Removes `fc6`, `fc7` and `fc8`, leaving a feature extractor that ends at
/// the flatten layer. Retained parameters are moved, not copied or altered.
pub fn truncate_head<T: Element>(model: Model<T>) -> Result<Model<T>> {
    let names: Vec<&str> = model.layers().iter().map(Layer::name).collect();
    for head in HEAD_LAYERS {
        if !names.contains(&head) {
            return Err(Error::Structure(format!("cannot truncate: no layer named {head}")));
        }
    }
    let (input_shape, _, layers) = model.into_parts();
    let mut kept: Vec<Layer<T>> = layers
        .into_iter()
        .take_while(|l| !HEAD_LAYERS.contains(&l.name()))
        .collect();
    if !matches!(kept.last(), Some(Layer::Flatten { .. })) {
        kept.push(Layer::Flatten { name: "flatten".into() });
    }
    Model::from_layers(input_shape, 0, kept)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadConfig {
    pub gru_units: usize,
    pub fc_sizes: [usize; 2],
    pub classes: usize,
    pub frames: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            gru_units: 256,
            fc_sizes: [512, 128],
            classes: 2,
            frames: 10,
        }
    }
}

/// `time_distributed(backbone) -> bigru -> fc1(relu) -> fc2(relu) ->
/// classifier(softmax)`, taking `[T, H, W, C]` clips.
pub fn assemble_bigru_cnn<T: Element>(backbone: Model<T>, cfg: &HeadConfig, seed: u64) -> Result<Model<T>> {
    if backbone.classes() != 0 {
        return Err(Error::Structure(
            "backbone still has a classifier head; truncate it first".into(),
        ));
    }
    if cfg.frames == 0 {
        return Err(Error::Structure("clip length must be at least 1 frame".into()));
    }
    let frame_shape = backbone.input_shape().to_vec();
    let (_, _, mut frame_layers) = backbone.into_parts();
    if !matches!(frame_layers.last(), Some(Layer::Flatten { .. })) {
        frame_layers.push(Layer::Flatten { name: "flatten".into() });
    }
    let mut input_shape = vec![cfg.frames];
    input_shape.extend(&frame_shape);

    let head_specs = [
        LayerSpec::new("bigru", LayerKind::BiGru { units: cfg.gru_units }),
        LayerSpec::new(
            "fc1",
            LayerKind::Dense {
                units: cfg.fc_sizes[0],
                activation: Activation::Relu,
            },
        ),
        LayerSpec::new(
            "fc2",
            LayerKind::Dense {
                units: cfg.fc_sizes[1],
                activation: Activation::Relu,
            },
        ),
        LayerSpec::new(
            "classifier",
            LayerKind::Dense {
                units: cfg.classes,
                activation: Activation::Softmax,
            },
        ),
    ];
    let frames_spec = LayerSpec::new(
        "frames",
        LayerKind::TimeDistributed {
            layers: frame_layers.iter().map(Layer::spec).collect(),
        },
    );
    let mut desc = ArchDescriptor {
        input_shape: input_shape.clone(),
        classes: cfg.classes,
        layers: vec![frames_spec],
    };
    desc.layers.extend(head_specs.iter().cloned());
    let shapes = desc.infer_shapes()?;

    // Fresh head parameters come from their own seeded descriptor so the
    // backbone weights are carried over untouched.
    let head_desc = ArchDescriptor {
        input_shape: shapes[0].clone(),
        classes: cfg.classes,
        layers: head_specs.to_vec(),
    };
    let head = Model::<T>::from_descriptor(&head_desc, seed)?;
    let (_, _, head_layers) = head.into_parts();
    let mut layers = vec![Layer::TimeDistributed(crate::layers::TimeDistributed {
        name: "frames".into(),
        layers: frame_layers,
    })];
    layers.extend(head_layers);
    Model::from_layers(input_shape, cfg.classes, layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_layout() {
        let d = vgg_prefix_descriptor([64, 64, 3], 4, 1, VggHead::None).unwrap();
        let names: Vec<_> = d.layers.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, ["conv1_1", "conv1_2", "pool1", "conv2_1", "conv2_2", "pool2"]);
        assert_eq!(d.output_shape().unwrap(), vec![16, 16, 128]);

        let d = vgg_prefix_descriptor([16, 16, 3], 3, 16, VggHead::None).unwrap();
        assert_eq!(d.output_shape().unwrap(), vec![8, 8, 8]);
    }

    #[test]
    fn too_small_input_is_a_dimension_error() {
        assert!(matches!(
            vgg16_descriptor([31, 64, 3], VggHead::None),
            Err(Error::Dimension(_))
        ));
        assert!(vgg16_descriptor([32, 32, 3], VggHead::None).is_ok());
    }

    #[test]
    fn truncate_requires_head() {
        let m = build_vgg_prefix::<f32>([8, 8, 3], 2, 16, VggHead::None, 0).unwrap();
        assert!(matches!(truncate_head(m), Err(Error::Structure(_))));
    }

    #[test]
    fn assemble_rejects_headed_backbone() {
        let m = build_vgg_prefix::<f32>([8, 8, 3], 2, 16, VggHead::PERSON, 0).unwrap();
        assert!(assemble_bigru_cnn(m, &HeadConfig::default(), 0).is_err());
    }
}
