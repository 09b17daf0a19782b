//! Layer catalogue. Every layer implements the same contract: a forward pass
//! that optionally records what its backward pass needs, and a backward pass
//! that accumulates parameter gradients and returns the input gradient.

pub mod gru;
mod sequence;
mod spatial;

use std::hash::{Hash, Hasher};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::exec::Execution;
use crate::kernels::softmax_in_place;
use crate::model::descriptor::{LayerKind, LayerSpec};
use crate::tensor::{Element, Tensor};

pub use gru::{bidirectional_gru, gru_cell, gru_sequence, GruParams};
pub use sequence::{BiGru, Gru, TimeDistributed};
pub use spatial::{Conv2d, MaxPool2d};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Tanh,
    /// Softmax over the last axis.
    Softmax,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Softmax => "softmax",
        }
    }

    pub(crate) fn apply<T: Element>(self, v: &mut [T], last_axis: usize) {
        match self {
            Activation::Linear => {}
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(T::zero())),
            Activation::Sigmoid => v.iter_mut().for_each(|x| *x = crate::kernels::sigmoid_scalar(*x)),
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
            Activation::Softmax => v.chunks_exact_mut(last_axis).for_each(softmax_in_place),
        }
    }

    /// Gradient w.r.t. the pre-activation, given the activation output `y`
    /// and the gradient `g` w.r.t. that output.
    pub(crate) fn backward<T: Element>(self, y: &[T], g: &[T], last_axis: usize) -> Vec<T> {
        match self {
            Activation::Linear => g.to_vec(),
            Activation::Relu => y
                .iter()
                .zip(g)
                .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                .collect(),
            Activation::Sigmoid => y.iter().zip(g).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
            Activation::Tanh => y.iter().zip(g).map(|(&y, &g)| g * (T::one() - y * y)).collect(),
            Activation::Softmax => {
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(last_axis).zip(g.chunks_exact(last_axis)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
                }
                out
            }
        }
    }

    /// Whether this activation has a non-differentiable switch point.
    fn has_kinks(self) -> bool {
        self == Activation::Relu
    }
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "linear" => Activation::Linear,
            "relu" => Activation::Relu,
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            "softmax" => Activation::Softmax,
            other => return Err(format!("unknown activation `{other}`")),
        })
    }
}

/// Glorot-uniform fill: `U(-l, l)` with `l = sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot<T: Element>(t: &mut Tensor<T>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in t.data_mut() {
        *v = T::from_f64_lossy(rng.random_range(-limit..limit));
    }
}

/// Settings for one forward (and matching backward) pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pass {
    /// Record activations for backward and enable dropout.
    pub train: bool,
    /// Seed for stochastic layers; mixed with layer names and frame indices.
    pub seed: u64,
    pub exec: Execution,
}

impl Pass {
    pub fn infer() -> Self {
        Pass {
            train: false,
            seed: 0,
            exec: Execution::Sequential,
        }
    }

    pub fn train(seed: u64) -> Self {
        Pass {
            train: true,
            seed,
            exec: Execution::Sequential,
        }
    }

    pub fn with_exec(self, exec: Execution) -> Self {
        Pass { exec, ..self }
    }

    pub(crate) fn derive(self, salt: u64) -> Self {
        Pass {
            seed: splitmix(self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            ..self
        }
    }
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn name_salt(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Saved<T> {
    Conv {
        input: Tensor<T>,
        output: Tensor<T>,
    },
    Pool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Dense {
        input: Tensor<T>,
        output: Tensor<T>,
    },
    Act {
        output: Tensor<T>,
    },
    Flatten {
        shape: Vec<usize>,
    },
    Dropout {
        mask: Option<Vec<T>>,
    },
    Gru(gru::GruTrace<T>),
    BiGru(gru::GruTrace<T>, gru::GruTrace<T>),
    Frames(Vec<Vec<Saved<T>>>),
}

#[derive(Debug, Clone)]
pub struct Dense<T = f32> {
    pub name: String,
    /// `[M, N]`: maps `N` inputs to `M` outputs.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Element> Dense<T> {
    pub fn new(name: impl Into<String>, weight: Tensor<T>, bias: Tensor<T>, activation: Activation) -> Result<Self> {
        let &[m, _] = weight.shape() else {
            return dim_err(format!("dense weight must be [M, N], got {:?}", weight.shape()));
        };
        if bias.shape() != [m] {
            return dim_err(format!(
                "dense bias {:?} does not match weight {:?}",
                bias.shape(),
                weight.shape()
            ));
        }
        Ok(Dense {
            name: name.into(),
            weight,
            bias,
            activation,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = (self.weight.shape()[0], self.weight.shape()[1]);
        if x.shape() != [n] {
            return dim_err(format!(
                "dense {}: input shape {:?}, expected [{n}]",
                self.name,
                x.shape()
            ));
        }
        let mut y = self.bias.data().to_vec();
        crate::kernels::gemm(m, n, 1, self.weight.data(), false, x.data(), false, &mut y, true);
        self.activation.apply(&mut y, m);
        Tensor::new([m], y)
    }

    fn backward(
        &self,
        input: &Tensor<T>,
        output: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Tensor<T>],
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let (m, n) = (self.weight.shape()[0], self.weight.shape()[1]);
        let dpre = self.activation.backward(output.data(), g.data(), m);
        let [gw, gb] = grads else {
            return dim_err("dense backward needs 2 gradient slots");
        };
        let x = input.data();
        for (row, &d) in gw.data_mut().chunks_exact_mut(n).zip(&dpre) {
            for (w, &xv) in row.iter_mut().zip(x) {
                *w += d * xv;
            }
        }
        for (b, &d) in gb.data_mut().iter_mut().zip(&dpre) {
            *b += d;
        }
        if !need_input {
            return Ok(None);
        }
        let mut dx = vec![T::zero(); n];
        crate::kernels::gemm(n, m, 1, self.weight.data(), true, &dpre, false, &mut dx, false);
        Ok(Some(Tensor::new([n], dx)?))
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Layer<T = f32> {
    Conv2d(Conv2d<T>),
    MaxPool2d(MaxPool2d),
    Dense(Dense<T>),
    Activation { name: String, function: Activation },
    Flatten { name: String },
    Dropout { name: String, rate: f32 },
    Gru(Gru<T>),
    BiGru(BiGru<T>),
    TimeDistributed(TimeDistributed<T>),
}

impl<T: Element> Layer<T> {
    /// Allocates a layer for `spec` fed with `input` shaped samples.
    pub fn from_spec(spec: &LayerSpec, input: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.output_shape(input)?;
        let name = spec.name.clone();
        Ok(match &spec.kind {
            LayerKind::Conv2d {
                filters,
                kernel,
                stride,
                padding,
                activation,
            } => {
                let c = input[2];
                let mut k = Tensor::zeros([*kernel, *kernel, c, *filters]);
                glorot(&mut k, kernel * kernel * c, kernel * kernel * filters, rng);
                Layer::Conv2d(Conv2d::new(
                    name,
                    k,
                    Tensor::zeros([*filters]),
                    *stride,
                    *padding,
                    *activation,
                )?)
            }
            LayerKind::MaxPool2d { window, stride } => Layer::MaxPool2d(MaxPool2d {
                name,
                window: *window,
                stride: *stride,
            }),
            LayerKind::Dense { units, activation } => {
                let n = input[0];
                let mut w = Tensor::zeros([*units, n]);
                glorot(&mut w, n, *units, rng);
                Layer::Dense(Dense::new(name, w, Tensor::zeros([*units]), *activation)?)
            }
            LayerKind::Activation(a) => Layer::Activation { name, function: *a },
            LayerKind::Flatten => Layer::Flatten { name },
            LayerKind::Dropout { rate } => Layer::Dropout { name, rate: *rate },
            LayerKind::Gru { units, return_sequence } => Layer::Gru(Gru {
                name,
                params: GruParams::glorot(*units, input[1], rng),
                return_sequence: *return_sequence,
            }),
            LayerKind::BiGru { units } => Layer::BiGru(BiGru {
                name,
                fwd: GruParams::glorot(*units, input[1], rng),
                bwd: GruParams::glorot(*units, input[1], rng),
            }),
            LayerKind::TimeDistributed { layers } => {
                let mut shape = input[1..].to_vec();
                let mut inner = Vec::with_capacity(layers.len());
                for l in layers {
                    inner.push(Layer::from_spec(l, &shape, rng)?);
                    shape = l.output_shape(&shape)?;
                }
                Layer::TimeDistributed(TimeDistributed { name, layers: inner })
            }
        })
    }

    pub fn name(&self) -> &str {
        match self {
            Layer::Conv2d(l) => &l.name,
            Layer::MaxPool2d(l) => &l.name,
            Layer::Dense(l) => &l.name,
            Layer::Gru(l) => &l.name,
            Layer::BiGru(l) => &l.name,
            Layer::TimeDistributed(l) => &l.name,
            Layer::Activation { name, .. } | Layer::Flatten { name } | Layer::Dropout { name, .. } => name,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        let kind = match self {
            Layer::Conv2d(c) => LayerKind::Conv2d {
                filters: c.kernel.shape()[3],
                kernel: c.kernel.shape()[0],
                stride: c.stride,
                padding: c.padding,
                activation: c.activation,
            },
            Layer::MaxPool2d(p) => LayerKind::MaxPool2d {
                window: p.window,
                stride: p.stride,
            },
            Layer::Dense(d) => LayerKind::Dense {
                units: d.weight.shape()[0],
                activation: d.activation,
            },
            Layer::Activation { function, .. } => LayerKind::Activation(*function),
            Layer::Flatten { .. } => LayerKind::Flatten,
            Layer::Dropout { rate, .. } => LayerKind::Dropout { rate: *rate },
            Layer::Gru(g) => LayerKind::Gru {
                units: g.params.units(),
                return_sequence: g.return_sequence,
            },
            Layer::BiGru(b) => LayerKind::BiGru { units: b.fwd.units() },
            Layer::TimeDistributed(td) => LayerKind::TimeDistributed {
                layers: td.layers.iter().map(Layer::spec).collect(),
            },
        };
        LayerSpec::new(self.name(), kind)
    }

    /// Visits `(name, tensor)` for each parameter in storage order.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        let n = self.name();
        match self {
            Layer::Conv2d(c) => {
                f(format!("{n}.kernel"), &c.kernel);
                f(format!("{n}.bias"), &c.bias);
            }
            Layer::Dense(d) => {
                f(format!("{n}.weight"), &d.weight);
                f(format!("{n}.bias"), &d.bias);
            }
            Layer::Gru(g) => {
                for (t, s) in g.params.tensors().into_iter().zip(gru::GRU_PARAM_NAMES) {
                    f(format!("{n}.{s}"), t);
                }
            }
            Layer::BiGru(b) => {
                for (dir, p) in [("fwd", &b.fwd), ("bwd", &b.bwd)] {
                    for (t, s) in p.tensors().into_iter().zip(gru::GRU_PARAM_NAMES) {
                        f(format!("{n}.{dir}.{s}"), t);
                    }
                }
            }
            Layer::TimeDistributed(td) => td.layers.iter().for_each(|l| l.visit_params(f)),
            _ => {}
        }
    }

    /// Pushes mutable references to every parameter, in storage order.
    pub fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        match self {
            Layer::Conv2d(c) => {
                out.push(&mut c.kernel);
                out.push(&mut c.bias);
            }
            Layer::Dense(d) => {
                out.push(&mut d.weight);
                out.push(&mut d.bias);
            }
            Layer::Gru(g) => out.extend(g.params.tensors_mut()),
            Layer::BiGru(b) => {
                out.extend(b.fwd.tensors_mut());
                out.extend(b.bwd.tensors_mut());
            }
            Layer::TimeDistributed(td) => td.layers.iter_mut().for_each(|l| l.collect_params_mut(out)),
            _ => {}
        }
    }

    pub fn param_tensors(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _| n += 1);
        n
    }

    /// Zero tensors shaped like this layer's parameters.
    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        let mut v = Vec::new();
        self.visit_params(&mut |_, t| v.push(Tensor::zeros(t.shape().to_vec())));
        v
    }

    pub fn forward(&self, x: &Tensor<T>, pass: Pass) -> Result<(Tensor<T>, Option<Saved<T>>)> {
        let keep = pass.train;
        match self {
            Layer::Conv2d(c) => {
                let y = c.forward(x)?;
                let saved = keep.then(|| Saved::Conv {
                    input: x.clone(),
                    output: y.clone(),
                });
                Ok((y, saved))
            }
            Layer::MaxPool2d(p) => {
                let (y, argmax) = crate::kernels::maxpool2d(x, p.window, p.stride)?;
                let saved = keep.then(|| Saved::Pool {
                    input_shape: x.shape().to_vec(),
                    argmax,
                });
                Ok((y, saved))
            }
            Layer::Dense(d) => {
                let y = d.forward(x)?;
                let saved = keep.then(|| Saved::Dense {
                    input: x.clone(),
                    output: y.clone(),
                });
                Ok((y, saved))
            }
            Layer::Activation { function, .. } => {
                let last = x.shape().last().copied().unwrap_or(1).max(1);
                let mut y = x.clone();
                function.apply(y.data_mut(), last);
                let saved = keep.then(|| Saved::Act { output: y.clone() });
                Ok((y, saved))
            }
            Layer::Flatten { .. } => {
                let y = x.clone().reshape([x.len()])?;
                Ok((
                    y,
                    keep.then(|| Saved::Flatten {
                        shape: x.shape().to_vec(),
                    }),
                ))
            }
            Layer::Dropout { name, rate } => {
                if !pass.train || *rate == 0.0 {
                    return Ok((x.clone(), keep.then_some(Saved::Dropout { mask: None })));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(pass.derive(name_salt(name)).seed);
                let keep_scale = T::one() / T::from_f64_lossy(1.0 - *rate as f64);
                let mask: Vec<T> = (0..x.len())
                    .map(|_| {
                        if rng.random::<f32>() < *rate {
                            T::zero()
                        } else {
                            keep_scale
                        }
                    })
                    .collect();
                let mut y = x.clone();
                y.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
                Ok((y, Some(Saved::Dropout { mask: Some(mask) })))
            }
            Layer::Gru(g) => g.forward(x, keep),
            Layer::BiGru(b) => b.forward(x, keep),
            Layer::TimeDistributed(td) => td.forward(x, pass),
        }
    }

    /// Accumulates parameter gradients into `grads` (this layer's slots, in
    /// [`Layer::visit_params`] order) and returns the input gradient when
    /// `need_input` is set.
    pub fn backward(
        &self,
        saved: Saved<T>,
        g: &Tensor<T>,
        grads: &mut [Tensor<T>],
        pass: Pass,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mismatch = || {
            dim_err(format!(
                "layer {}: tape entry does not belong to this layer type",
                self.name()
            ))
        };
        match (self, saved) {
            (Layer::Conv2d(c), Saved::Conv { input, output }) => c.backward(&input, &output, g, grads, need_input),
            (Layer::MaxPool2d(_), Saved::Pool { input_shape, argmax }) => {
                Ok(Some(crate::kernels::maxpool2d_backward(&input_shape, &argmax, g)?))
            }
            (Layer::Dense(d), Saved::Dense { input, output }) => d.backward(&input, &output, g, grads, need_input),
            (Layer::Activation { function, .. }, Saved::Act { output }) => {
                let last = output.shape().last().copied().unwrap_or(1).max(1);
                let dx = function.backward(output.data(), g.data(), last);
                Ok(Some(Tensor::new(output.shape().to_vec(), dx)?))
            }
            (Layer::Flatten { .. }, Saved::Flatten { shape }) => Ok(Some(g.clone().reshape(shape)?)),
            (Layer::Dropout { .. }, Saved::Dropout { mask }) => {
                let mut dx = g.clone();
                if let Some(mask) = mask {
                    dx.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
                }
                Ok(Some(dx))
            }
            (Layer::Gru(l), Saved::Gru(trace)) => gru::gru_backward(&trace, &l.params, g, grads, need_input),
            (Layer::BiGru(b), Saved::BiGru(f, r)) => b.backward(&f, &r, g, grads, need_input),
            (Layer::TimeDistributed(td), Saved::Frames(frames)) => td.backward(frames, g, grads, pass, need_input),
            _ => mismatch(),
        }
    }

    pub fn cast<U: Element>(&self) -> Layer<U> {
        match self {
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                name: c.name.clone(),
                kernel: c.kernel.cast(),
                bias: c.bias.cast(),
                stride: c.stride,
                padding: c.padding,
                activation: c.activation,
            }),
            Layer::MaxPool2d(p) => Layer::MaxPool2d(p.clone()),
            Layer::Dense(d) => Layer::Dense(Dense {
                name: d.name.clone(),
                weight: d.weight.cast(),
                bias: d.bias.cast(),
                activation: d.activation,
            }),
            Layer::Activation { name, function } => Layer::Activation {
                name: name.clone(),
                function: *function,
            },
            Layer::Flatten { name } => Layer::Flatten { name: name.clone() },
            Layer::Dropout { name, rate } => Layer::Dropout {
                name: name.clone(),
                rate: *rate,
            },
            Layer::Gru(g) => Layer::Gru(Gru {
                name: g.name.clone(),
                params: cast_gru(&g.params),
                return_sequence: g.return_sequence,
            }),
            Layer::BiGru(b) => Layer::BiGru(BiGru {
                name: b.name.clone(),
                fwd: cast_gru(&b.fwd),
                bwd: cast_gru(&b.bwd),
            }),
            Layer::TimeDistributed(td) => Layer::TimeDistributed(TimeDistributed {
                name: td.name.clone(),
                layers: td.layers.iter().map(Layer::cast).collect(),
            }),
        }
    }
}

fn cast_gru<T: Element, U: Element>(p: &GruParams<T>) -> GruParams<U> {
    GruParams {
        w_z: p.w_z.cast(),
        w_r: p.w_r.cast(),
        w_h: p.w_h.cast(),
        u_z: p.u_z.cast(),
        u_r: p.u_r.cast(),
        u_h: p.u_h.cast(),
        b_z: p.b_z.cast(),
        b_r: p.b_r.cast(),
        b_h: p.b_h.cast(),
    }
}

impl<T: Element> Saved<T> {
    /// Hashes the discrete decisions (relu on/off, pooling winners) made in
    /// the forward pass. Two passes with equal fingerprints took the same
    /// piecewise-smooth branch.
    pub(crate) fn fingerprint(&self, layer: &Layer<T>, h: &mut impl Hasher) {
        let relu_mask = |t: &Tensor<T>, h: &mut dyn FnMut(bool)| {
            for &v in t.data() {
                h(v > T::zero());
            }
        };
        match (layer, self) {
            (Layer::Conv2d(c), Saved::Conv { output, .. }) if c.activation.has_kinks() => {
                relu_mask(output, &mut |b| b.hash(h));
            }
            (Layer::Dense(d), Saved::Dense { output, .. }) if d.activation.has_kinks() => {
                relu_mask(output, &mut |b| b.hash(h));
            }
            (Layer::Activation { function, .. }, Saved::Act { output }) if function.has_kinks() => {
                relu_mask(output, &mut |b| b.hash(h));
            }
            (Layer::MaxPool2d(_), Saved::Pool { argmax, .. }) => argmax.hash(h),
            (Layer::TimeDistributed(td), Saved::Frames(frames)) => {
                for frame in frames {
                    for (l, s) in td.layers.iter().zip(frame) {
                        s.fingerprint(l, h);
                    }
                }
            }
            _ => {}
        }
    }
}

/// Runs `layers` in order. When `pass.train` is set, returns one saved
/// entry per layer.
pub(crate) fn forward_chain<T: Element>(
    layers: &[Layer<T>],
    x: &Tensor<T>,
    pass: Pass,
) -> Result<(Tensor<T>, Vec<Saved<T>>)> {
    let mut saves = Vec::with_capacity(if pass.train { layers.len() } else { 0 });
    let mut cur: Option<Tensor<T>> = None;
    for l in layers {
        let input = cur.as_ref().unwrap_or(x);
        let (y, saved) = l.forward(input, pass)?;
        if let Some(s) = saved {
            saves.push(s);
        }
        cur = Some(y);
    }
    Ok((cur.unwrap_or_else(|| x.clone()), saves))
}

/// Offsets of each layer's gradient slots within a flat gradient list.
pub(crate) fn grad_offsets<T: Element>(layers: &[Layer<T>]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(layers.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for l in layers {
        acc += l.param_tensors();
        offsets.push(acc);
    }
    offsets
}

/// Backward through `layers` using saves from [`forward_chain`]. Layers with
/// index below `first_needed` skip their backward entirely (their gradients
/// stay untouched and no input gradient is produced).
pub(crate) fn backward_chain<T: Element>(
    layers: &[Layer<T>],
    saves: Vec<Saved<T>>,
    g: &Tensor<T>,
    grads: &mut [Tensor<T>],
    pass: Pass,
    need_input: bool,
    first_needed: usize,
) -> Result<Option<Tensor<T>>> {
    if saves.len() != layers.len() {
        return Err(crate::error::Error::State(format!(
            "{} saved entries for {} layers",
            saves.len(),
            layers.len()
        )));
    }
    let offsets = grad_offsets(layers);
    let mut grad = g.clone();
    for (i, (l, s)) in layers.iter().zip(saves).enumerate().rev() {
        if i < first_needed {
            return Ok(None);
        }
        let want_input = i > first_needed || need_input;
        let slots = &mut grads[offsets[i]..offsets[i + 1]];
        match l.backward(s, &grad, slots, pass, want_input)? {
            Some(dx) => grad = dx,
            None => return Ok(None),
        }
    }
    Ok(Some(grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_and_bias_only() {
        let eye = Tensor::<f32>::new([3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let d = Dense::new("d", eye, Tensor::zeros([3]), Activation::Linear).unwrap();
        let x = Tensor::vector(vec![0.5, -2.0, 3.0]);
        assert_eq!(d.forward(&x).unwrap(), x);

        let b = Tensor::vector(vec![1.5, -0.5]);
        let d = Dense::new("d", Tensor::<f32>::zeros([2, 3]), b, Activation::Relu).unwrap();
        assert_eq!(d.forward(&x).unwrap().data(), &[1.5, 0.0]);
    }

    #[test]
    fn dense_backward_linear_sum_loss() {
        // y = W x, loss = sum(y): dW rows equal x, dx equals column sums of W.
        let w = Tensor::<f32>::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let d = Dense::new("d", w, Tensor::zeros([2]), Activation::Linear).unwrap();
        let layer = Layer::Dense(d);
        let x = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let (y, saved) = layer.forward(&x, Pass::train(0)).unwrap();
        let mut grads = layer.zero_grads();
        let dx = layer
            .backward(
                saved.unwrap(),
                &Tensor::full(y.shape().to_vec(), 1.0),
                &mut grads,
                Pass::train(0),
                true,
            )
            .unwrap()
            .unwrap();
        assert_eq!(grads[0].data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert_eq!(grads[1].data(), &[1.0, 1.0]);
        assert_eq!(dx.data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn two_chained_dense_layers_follow_chain_rule() {
        // y = B (A x); dL/dx for L = sum(y) is A^T B^T 1.
        let a = Tensor::<f32>::new([2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f32>::new([2, 2], vec![0., 1., -1., 2.]).unwrap();
        let layers = vec![
            Layer::Dense(Dense::new("a", a, Tensor::zeros([2]), Activation::Linear).unwrap()),
            Layer::Dense(Dense::new("b", b, Tensor::zeros([2]), Activation::Linear).unwrap()),
        ];
        let x = Tensor::vector(vec![1.0, 1.0]);
        let (y, saves) = forward_chain(&layers, &x, Pass::train(0)).unwrap();
        assert_eq!(y.data(), &[7.0, 11.0]);
        let mut grads: Vec<_> = layers.iter().flat_map(Layer::zero_grads).collect();
        let dx = backward_chain(
            &layers,
            saves,
            &Tensor::full([2], 1.0),
            &mut grads,
            Pass::train(0),
            true,
            0,
        )
        .unwrap()
        .unwrap();
        // B^T 1 = [-1, 3]; A^T [-1, 3] = [8, 10]
        assert_eq!(dx.data(), &[8.0, 10.0]);
        // dL/dB = 1 (A x)^T with A x = [3, 7]
        assert_eq!(grads[2].data(), &[3.0, 7.0, 3.0, 7.0]);
        // dL/dA = (B^T 1) x^T
        assert_eq!(grads[0].data(), &[-1.0, -1.0, 3.0, 3.0]);
    }

    #[test]
    fn flatten_is_row_major_and_invertible() {
        let l = Layer::<f32>::Flatten { name: "f".into() };
        let x = Tensor::new([2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        let (y, saved) = l.forward(&x, Pass::train(0)).unwrap();
        assert_eq!(y.shape(), &[4]);
        assert_eq!(y.data(), &[1., 2., 3., 4.]);
        let back = l
            .backward(saved.unwrap(), &y, &mut [], Pass::train(0), true)
            .unwrap()
            .unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn dropout_is_identity_at_inference_and_scales_in_training() {
        let l = Layer::<f32>::Dropout {
            name: "d".into(),
            rate: 0.5,
        };
        let x = Tensor::full([1000], 1.0f32);
        assert_eq!(l.forward(&x, Pass::infer()).unwrap().0, x);
        let (y, _) = l.forward(&x, Pass::train(3)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = y.data().iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept), "{kept}");
        let (y2, _) = l.forward(&x, Pass::train(3)).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn softmax_backward_matches_p_minus_onehot_under_ce() {
        let y = [0.2f64, 0.5, 0.3];
        // dL/dy for L = -ln y[1]
        let g = [0.0, -1.0 / 0.5, 0.0];
        let d = Activation::Softmax.backward(&y, &g, 3);
        let want = [0.2, -0.5, 0.3];
        for (a, b) in d.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
