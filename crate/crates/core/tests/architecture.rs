use bigru_cnn::model::{
    assemble_bigru_cnn, build_vgg16, build_vgg_prefix, load_checkpoint, save_checkpoint, truncate_head,
    vgg16_descriptor, HeadConfig, VggHead,
};
use bigru_cnn::{Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv_params(c_in: usize, c_out: usize) -> usize {
    9 * c_in * c_out + c_out
}

fn vgg16_conv_params() -> usize {
    let chans = [3, 64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];
    chans.windows(2).map(|w| conv_params(w[0], w[1])).sum()
}

fn gru_params(input: usize, units: usize) -> usize {
    3 * (input * units + units * units + units)
}

#[test]
fn vgg16_conv_stack_has_14_7m_parameters() {
    let desc = vgg16_descriptor([224, 224, 3], VggHead::None).unwrap();
    assert_eq!(desc.param_count().unwrap(), 14_714_688);
    assert_eq!(vgg16_conv_params(), 14_714_688);
}

#[test]
fn vgg16_with_imagenet_head_is_about_138m() {
    let n = vgg16_descriptor([224, 224, 3], VggHead::IMAGENET)
        .unwrap()
        .param_count()
        .unwrap() as f64;
    assert!((n - 138e6).abs() <= 0.01 * 138e6, "{n}");
    assert_eq!(n as usize, 138_357_544);
}

#[test]
fn clip_frames_flatten_to_10240() {
    let desc = vgg16_descriptor([128, 176, 3], VggHead::None).unwrap();
    let shapes = desc.infer_shapes().unwrap();
    assert_eq!(shapes.last().unwrap(), &vec![4, 5, 512]);
    let headed = vgg16_descriptor([128, 176, 3], VggHead::PERSON).unwrap();
    let shapes = headed.infer_shapes().unwrap();
    let flat = headed.layers.iter().position(|l| l.name == "flatten").unwrap();
    assert_eq!(shapes[flat], vec![10240]);
}

#[test]
fn full_model_shapes_and_count() {
    let backbone = build_vgg16::<f32>([128, 176, 3], VggHead::None, 0).unwrap();
    let model = assemble_bigru_cnn(backbone, &HeadConfig::default(), 1).unwrap();
    let shapes = model.descriptor().infer_shapes().unwrap();
    let names: Vec<_> = model.descriptor().layers.iter().map(|l| l.name.clone()).collect();
    let at = |name: &str| &shapes[names.iter().position(|n| n == name).unwrap()];
    assert_eq!(at("frames"), &vec![10, 10240]);
    assert_eq!(at("bigru"), &vec![512]);
    assert_eq!(at("fc1"), &vec![512]);
    assert_eq!(at("fc2"), &vec![128]);
    assert_eq!(model.output_shape().unwrap(), vec![2]);

    let expected =
        vgg16_conv_params() + 2 * gru_params(10240, 256) + (512 * 512 + 512) + (512 * 128 + 128) + (128 * 2 + 2);
    assert_eq!(model.param_count(), expected);
    assert_eq!(model.descriptor().param_count().unwrap(), expected);
}

#[test]
fn pretrained_backbone_carries_into_clip_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("backbone.ckpt");
    let head = VggHead::Classifier { hidden: 6, classes: 2 };
    let pretrained: Model = build_vgg_prefix([16, 16, 3], 4, 16, head, 21).unwrap();
    save_checkpoint(&pretrained, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let cfg = HeadConfig {
        gru_units: 4,
        fc_sizes: [8, 4],
        classes: 2,
        frames: 2,
    };
    let model = assemble_bigru_cnn(truncate_head(loaded).unwrap(), &cfg, 22).unwrap();

    let original = pretrained.parameters();
    let moved = model.parameters();
    let conv_names: Vec<_> = original.iter().filter(|(n, _)| n.starts_with("conv")).collect();
    assert_eq!(conv_names.len(), 8);
    for (name, t) in conv_names {
        let (_, m) = moved
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("{name} missing"));
        assert_eq!(*m, *t, "{name}");
    }

    // Frame features of the clip model are the pretrained features.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frame = Tensor::from_fn([16, 16, 3], |_| rng.random_range(0.0..1.0));
    let features = truncate_head(pretrained.clone()).unwrap().forward(&frame).unwrap();
    let again = truncate_head(load_checkpoint(&path).unwrap())
        .unwrap()
        .forward(&frame)
        .unwrap();
    assert_eq!(features, again);

    let clip_path = dir.path().join("clip.ckpt");
    save_checkpoint(&model, &clip_path).unwrap();
    let back = load_checkpoint(&clip_path).unwrap();
    let clip = Tensor::stack(&[frame.clone(), frame]).unwrap();
    assert_eq!(back.forward(&clip).unwrap(), model.forward(&clip).unwrap());
    assert_eq!(
        std::fs::read(&clip_path).unwrap(),
        bigru_cnn::model::encode_checkpoint(&back)
    );
}
