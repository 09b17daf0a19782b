//! Analytic gradients of every layer type against central differences.

use bigru_cnn::autodiff::{finite_diff_check, CheckLoss, GradCheckOptions, GradReport, GradTape};
use bigru_cnn::kernels::Padding;
use bigru_cnn::layers::Activation;
use bigru_cnn::model::{
    assemble_bigru_cnn, build_vgg_prefix, truncate_head, ArchDescriptor, HeadConfig, LayerKind, LayerSpec, Model,
    VggHead,
};
use bigru_cnn::{Execution, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(input: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Model<f64> {
    let desc = ArchDescriptor {
        input_shape: input.to_vec(),
        classes: 0,
        layers,
    };
    let mut m = Model::<f64>::from_descriptor(&desc, seed).unwrap();
    // Non-zero biases so bias gradients are exercised off the origin.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for t in m.parameters_mut() {
        if t.rank() == 1 {
            for v in t.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    m
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn projection(m: &Model<f64>, seed: u64) -> CheckLoss<f64> {
    CheckLoss::Projection(random(&m.output_shape().unwrap(), seed))
}

fn check(m: &mut Model<f64>, x: &Tensor<f64>, loss: &CheckLoss<f64>) -> GradReport {
    let opts = GradCheckOptions {
        check_input: true,
        ..Default::default()
    };
    let report = finite_diff_check(m, x, loss, &opts).unwrap();
    assert!(report.passed(), "\n{report}");
    let checked: usize = report.entries.iter().map(|e| e.checked).sum();
    assert!(checked > 0, "nothing was compared\n{report}");
    report
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

#[test]
fn conv2d_same_and_valid() {
    for (i, (stride, padding)) in [
        (1, Padding::Same),
        (2, Padding::Same),
        (1, Padding::Valid),
        (2, Padding::Valid),
    ]
    .into_iter()
    .enumerate()
    {
        let mut m = model(
            &[6, 5, 2],
            vec![conv("c", 3, stride, padding, Activation::Linear)],
            i as u64,
        );
        let loss = projection(&m, 100 + i as u64);
        check(&mut m, &random(&[6, 5, 2], 200 + i as u64), &loss);
    }
}

#[test]
fn conv2d_with_relu() {
    let mut m = model(&[5, 5, 2], vec![conv("c", 3, 1, Padding::Same, Activation::Relu)], 1);
    let loss = projection(&m, 2);
    check(&mut m, &random(&[5, 5, 2], 3), &loss);
}

#[test]
fn maxpool_after_conv() {
    let layers = vec![
        conv("c", 2, 1, Padding::Same, Activation::Tanh),
        LayerSpec::new("p", LayerKind::MaxPool2d { window: 2, stride: 2 }),
    ];
    let mut m = model(&[5, 6, 2], layers, 4);
    let loss = projection(&m, 5);
    check(&mut m, &random(&[5, 6, 2], 6), &loss);
}

#[test]
fn dense_each_activation() {
    for (i, act) in [
        Activation::Linear,
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh,
    ]
    .into_iter()
    .enumerate()
    {
        let mut m = model(&[7], vec![dense("fc", 4, act)], 10 + i as u64);
        let loss = projection(&m, 20 + i as u64);
        check(&mut m, &random(&[7], 30 + i as u64), &loss);
    }
}

#[test]
fn standalone_activations() {
    for (i, act) in [
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Softmax,
    ]
    .into_iter()
    .enumerate()
    {
        let layers = vec![
            dense("fc", 5, Activation::Linear),
            LayerSpec::new("act", LayerKind::Activation(act)),
        ];
        let mut m = model(&[4], layers, 40 + i as u64);
        let loss = projection(&m, 50 + i as u64);
        check(&mut m, &random(&[4], 60 + i as u64), &loss);
    }
}

#[test]
fn softmax_with_cross_entropy() {
    for label in 0..3 {
        let mut m = model(&[6], vec![dense("fc", 3, Activation::Softmax)], 70 + label as u64);
        check(&mut m, &random(&[6], 80), &CheckLoss::CrossEntropy { label });
    }
}

#[test]
fn flatten_and_dropout() {
    let layers = vec![
        LayerSpec::new("flat", LayerKind::Flatten),
        LayerSpec::new("drop", LayerKind::Dropout { rate: 0.3 }),
        dense("fc", 3, Activation::Tanh),
    ];
    let mut m = model(&[2, 3, 2], layers, 90);
    let loss = projection(&m, 91);
    check(&mut m, &random(&[2, 3, 2], 92), &loss);
}

#[test]
fn gru_single_step() {
    let layers = vec![LayerSpec::new(
        "gru",
        LayerKind::Gru {
            units: 4,
            return_sequence: false,
        },
    )];
    let mut m = model(&[1, 3], layers, 100);
    let loss = projection(&m, 101);
    check(&mut m, &random(&[1, 3], 102), &loss);
}

#[test]
fn gru_sequences() {
    for return_sequence in [false, true] {
        let layers = vec![LayerSpec::new(
            "gru",
            LayerKind::Gru {
                units: 5,
                return_sequence,
            },
        )];
        let mut m = model(&[4, 3], layers, 110);
        let loss = projection(&m, 111);
        check(&mut m, &random(&[4, 3], 112), &loss);
    }
}

#[test]
fn bidirectional_gru() {
    let layers = vec![LayerSpec::new("bigru", LayerKind::BiGru { units: 4 })];
    let mut m = model(&[5, 3], layers, 120);
    let loss = projection(&m, 121);
    check(&mut m, &random(&[5, 3], 122), &loss);
}

#[test]
fn time_distributed_conv_stack() {
    let inner = vec![
        conv("c", 2, 1, Padding::Same, Activation::Tanh),
        LayerSpec::new("p", LayerKind::MaxPool2d { window: 2, stride: 2 }),
        LayerSpec::new("flat", LayerKind::Flatten),
    ];
    let layers = vec![LayerSpec::new("frames", LayerKind::TimeDistributed { layers: inner })];
    let mut m = model(&[3, 4, 4, 2], layers, 130);
    let loss = projection(&m, 131);
    check(&mut m, &random(&[3, 4, 4, 2], 132), &loss);
}

fn reduced_model(seed: u64) -> Model<f64> {
    let pretrained =
        build_vgg_prefix::<f64>([16, 16, 3], 4, 16, VggHead::Classifier { hidden: 8, classes: 2 }, seed).unwrap();
    let cfg = HeadConfig {
        gru_units: 8,
        frames: 2,
        ..Default::default()
    };
    assemble_bigru_cnn(truncate_head(pretrained).unwrap(), &cfg, seed + 1).unwrap()
}

#[test]
fn full_reduced_model() {
    let mut m = reduced_model(140);
    let x = random(&[2, 16, 16, 3], 141).map(|v| v.abs());
    let report = check(&mut m, &x, &CheckLoss::CrossEntropy { label: 1 });
    assert_eq!(report.entries.len(), m.parameters().len() + 1);
}

#[test]
fn gradient_of_summed_losses_is_sum_of_gradients() {
    let layers = vec![
        conv("c", 2, 1, Padding::Same, Activation::Tanh),
        LayerSpec::new("flat", LayerKind::Flatten),
        dense("fc", 3, Activation::Sigmoid),
    ];
    let m = model(&[3, 3, 2], layers, 150);
    let x = random(&[3, 3, 2], 151);
    let (w1, w2) = (random(&[3], 152), random(&[3], 153));
    let grads = |w: &Tensor<f64>| {
        let mut tape = GradTape::new();
        m.forward_train(&x, &mut tape, 0).unwrap();
        m.backward(w, &mut tape).unwrap()
    };
    let mut sum = w1.clone();
    sum.add_assign(&w2).unwrap();
    let (a, b, ab) = (grads(&w1), grads(&w2), grads(&sum));
    for ((ga, gb), gab) in a.params.iter().zip(&b.params).zip(&ab.params) {
        let mut s = ga.clone();
        s.add_assign(gb).unwrap();
        assert!(s.max_abs_diff(gab) <= 1e-6);
    }
}

#[test]
fn shared_kernel_gradient_sums_over_frames() {
    let inner = vec![
        conv("c", 2, 1, Padding::Same, Activation::Linear),
        LayerSpec::new("flat", LayerKind::Flatten),
    ];
    let td = |t: usize| ArchDescriptor {
        input_shape: vec![t, 3, 3, 1],
        classes: 0,
        layers: vec![LayerSpec::new(
            "frames",
            LayerKind::TimeDistributed { layers: inner.clone() },
        )],
    };
    let clip = Model::<f32>::from_descriptor(&td(3), 5).unwrap();
    let single = Model::<f32>::from_descriptor(&td(1), 5).unwrap();
    let x = random(&[3, 3, 3, 1], 160).cast::<f32>();
    let w = random(&[3, 18], 161).cast::<f32>();

    let mut tape = GradTape::new();
    clip.forward_train(&x, &mut tape, 0).unwrap();
    let total = clip.backward(&w, &mut tape).unwrap();

    let mut summed = single.zero_grads();
    for t in 0..3 {
        let frame = x.index_axis0(t).reshape([1, 3, 3, 1]).unwrap();
        let wt = w.index_axis0(t).reshape([1, 18]).unwrap();
        single.forward_train(&frame, &mut tape, 0).unwrap();
        let g = single.backward(&wt, &mut tape).unwrap();
        for (acc, gi) in summed.iter_mut().zip(&g.params) {
            acc.add_assign(gi).unwrap();
        }
    }
    for (a, b) in total.params.iter().zip(&summed) {
        assert!(a.max_abs_diff(b) <= 1e-5);
    }
}

#[test]
fn identical_runs_give_identical_gradients() {
    let m = reduced_model(170).cast::<f32>();
    let x = random(&[2, 16, 16, 3], 171).map(|v| v.abs()).cast::<f32>();
    let run = |m: &Model<f32>| {
        let mut tape = GradTape::new();
        let y = m.forward_train(&x, &mut tape, 9).unwrap();
        let g = bigru_cnn::train::cross_entropy_grad(&y, 0).unwrap();
        m.backward(&g, &mut tape).unwrap()
    };
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let a = run(&m);
    let b = run(&m);
    let mut par = m.clone();
    par.set_execution(Execution::Parallel);
    let c = run(&par);
    for ((ga, gb), gc) in a.params.iter().zip(&b.params).zip(&c.params) {
        assert_eq!(bits(ga), bits(gb));
        assert_eq!(bits(ga), bits(gc));
    }
    assert_eq!(bits(a.input.as_ref().unwrap()), bits(c.input.as_ref().unwrap()));
}

#[test]
fn frozen_layers_report_zero_gradients() {
    let mut m = reduced_model(180).cast::<f32>();
    m.freeze("frames").unwrap();
    let x = random(&[2, 16, 16, 3], 181).cast::<f32>();
    let mut tape = GradTape::new();
    let y = m.forward_train(&x, &mut tape, 0).unwrap();
    let g = m
        .backward_with(&bigru_cnn::train::cross_entropy_grad(&y, 1).unwrap(), &mut tape, false)
        .unwrap();
    assert!(g.input.is_none());
    for ((name, _), (grad, frozen)) in m.parameters().iter().zip(g.params.iter().zip(m.frozen_mask())) {
        if frozen {
            assert!(grad.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    assert!(g.get("bigru.fwd.w_z").unwrap().data().iter().any(|&v| v != 0.0));
}
