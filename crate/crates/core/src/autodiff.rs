//! Reverse-mode gradients over a model's layer pipeline, and a central
//! finite-difference checker that validates them.
//!
//! Each layer owns its backward pass; the tape only records, in forward
//! order, what each layer saved. [`Model::backward`] consumes the tape from
//! the end.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::Hasher;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Pass, Saved};
use crate::model::Model;
use crate::tensor::{Element, Tensor};
use crate::train::loss::{cross_entropy, cross_entropy_grad};

#[derive(Debug)]
pub struct TapeEntry<T> {
    /// Index of the top-level layer that produced this entry.
    pub layer: usize,
    saved: Saved<T>,
}

/// Activations recorded by [`Model::forward_train`].
#[derive(Debug)]
pub struct GradTape<T = f32> {
    entries: Vec<TapeEntry<T>>,
    output_shape: Vec<usize>,
    pass: Pass,
}

impl<T: Element> Default for GradTape<T> {
    fn default() -> Self {
        GradTape {
            entries: Vec::new(),
            output_shape: Vec::new(),
            pass: Pass::train(0),
        }
    }
}

impl<T: Element> GradTape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.output_shape.clear();
    }

    pub fn entries(&self) -> &[TapeEntry<T>] {
        &self.entries
    }

    /// Hash of the discrete branch decisions (relu masks, pooling winners)
    /// recorded on this tape.
    pub fn activation_pattern(&self, model: &Model<T>) -> u64 {
        let mut h = DefaultHasher::new();
        for e in &self.entries {
            e.saved.fingerprint(&model.layers()[e.layer], &mut h);
        }
        h.finish()
    }
}

/// Gradients for every parameter tensor (storage order) and the input.
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }
}

impl<T: Element> Model<T> {
    /// Forward pass that records what backward needs. `seed` drives any
    /// stochastic layers (dropout).
    pub fn forward_train(&self, x: &Tensor<T>, tape: &mut GradTape<T>, seed: u64) -> Result<Tensor<T>> {
        self.check_input(x)?;
        tape.clear();
        let pass = Pass::train(seed).with_exec(self.execution());
        let mut cur: Option<Tensor<T>> = None;
        for (i, l) in self.layers().iter().enumerate() {
            let (y, saved) = l.forward(cur.as_ref().unwrap_or(x), pass)?;
            tape.entries.push(TapeEntry {
                layer: i,
                saved: saved.expect("training pass always saves"),
            });
            cur = Some(y);
        }
        let y = cur.unwrap_or_else(|| x.clone());
        tape.output_shape = y.shape().to_vec();
        tape.pass = pass;
        Ok(y)
    }

    /// Gradients of a scalar loss given `loss_grad = dL/d(output)`,
    /// including the input gradient. Clears the tape.
    pub fn backward(&self, loss_grad: &Tensor<T>, tape: &mut GradTape<T>) -> Result<Gradients<T>> {
        self.backward_with(loss_grad, tape, true)
    }

    /// As [`Model::backward`]; with `need_input` unset, layers in front of
    /// the first trainable layer are skipped. Gradients of frozen layers are
    /// reported as zero.
    pub fn backward_with(
        &self,
        loss_grad: &Tensor<T>,
        tape: &mut GradTape<T>,
        need_input: bool,
    ) -> Result<Gradients<T>> {
        if tape.entries.is_empty() && !self.layers().is_empty() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        if tape.entries.len() != self.layers().len() {
            return Err(Error::State(format!(
                "tape holds {} entries for a model of {} layers",
                tape.entries.len(),
                self.layers().len()
            )));
        }
        if loss_grad.shape() != tape.output_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "loss gradient shape {:?} does not match model output {:?}",
                loss_grad.shape(),
                tape.output_shape
            )));
        }
        let pass = tape.pass;
        let layers = self.layers();
        let first_needed = if need_input {
            0
        } else {
            layers
                .iter()
                .position(|l| !self.is_frozen(l.name()))
                .unwrap_or(layers.len())
        };
        let offsets = crate::layers::grad_offsets(layers);
        let mut grads = self.zero_grads();
        let mut grad = Some(loss_grad.clone());
        while let Some(entry) = tape.entries.pop() {
            let i = entry.layer;
            if i < first_needed {
                grad = None;
                continue;
            }
            let g = grad.take().expect("gradient flows until first_needed");
            let want_input = i > first_needed || need_input;
            let slots = &mut grads[offsets[i]..offsets[i + 1]];
            grad = layers[i].backward(entry.saved, &g, slots, pass, want_input)?;
            if want_input && grad.is_none() {
                return Err(Error::State(format!(
                    "layer {} produced no input gradient",
                    layers[i].name()
                )));
            }
        }
        tape.clear();
        for (g, frozen) in grads.iter_mut().zip(self.frozen_mask()) {
            if frozen {
                g.fill(T::zero());
            }
        }
        Ok(Gradients {
            names: self.parameters().into_iter().map(|(n, _)| n).collect(),
            params: grads,
            input: if need_input { grad } else { None },
        })
    }
}

/// Scalar objective used when checking gradients.
#[derive(Debug, Clone)]
pub enum CheckLoss<T = f64> {
    /// Cross-entropy of a softmax output against `label`.
    CrossEntropy { label: usize },
    /// `sum_i w_i * y_i` for fixed weights shaped like the output.
    Projection(Tensor<T>),
}

impl<T: Element> CheckLoss<T> {
    /// Loss value, accumulated in 64-bit.
    pub fn value(&self, y: &Tensor<T>) -> Result<f64> {
        match self {
            CheckLoss::CrossEntropy { label } => cross_entropy(y, *label),
            CheckLoss::Projection(w) => {
                if w.shape() != y.shape() {
                    return Err(Error::Dimension(format!(
                        "projection weights {:?} vs output {:?}",
                        w.shape(),
                        y.shape()
                    )));
                }
                Ok(w.data()
                    .iter()
                    .zip(y.data())
                    .map(|(a, b)| a.as_f64() * b.as_f64())
                    .sum())
            }
        }
    }

    pub fn grad(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            CheckLoss::CrossEntropy { label } => cross_entropy_grad(y, *label),
            CheckLoss::Projection(w) => Ok(w.clone()),
        }
    }
}

pub fn central_difference(mut f: impl FnMut(f64) -> f64, theta: f64, epsilon: f64) -> f64 {
    (f(theta + epsilon) - f(theta - epsilon)) / (2.0 * epsilon)
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// At most this many scalars are sampled from each tensor.
    pub max_samples: usize,
    pub seed: u64,
    pub check_input: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-3,
            tolerance: 1e-4,
            max_samples: 200,
            seed: 0,
            check_input: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Samples whose perturbation flipped a relu or pooling decision; the
    /// loss is not differentiable across such a switch, so they are excluded.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub entries: Vec<TensorCheck>,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn merge(&mut self, other: GradReport) {
        self.entries.extend(other.entries);
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(9);
        writeln!(
            f,
            "{:<width$}  {:>7}  {:>7}  {:>12}  {:>14}  {:>14}  status",
            "parameter", "checked", "kinks", "max_rel_err", "analytic", "numeric"
        )?;
        for e in &self.entries {
            let status = if e.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<width$}  {:>7}  {:>7}  {:>12.3e}  {:>14.6e}  {:>14.6e}  {status}",
                e.name, e.checked, e.skipped_kinks, e.max_rel_error, e.worst_analytic, e.worst_numeric
            )?;
        }
        write!(
            f,
            "max relative error {:.3e} (tolerance {:.0e}, epsilon {:.0e}): {}",
            self.max_rel_error(),
            self.tolerance,
            self.epsilon,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

struct Probe<'a, T: Element> {
    input: &'a Tensor<T>,
    loss: &'a CheckLoss<T>,
    base_pattern: u64,
    tape: GradTape<T>,
}

impl<T: Element> Probe<'_, T> {
    /// Loss at the current parameters, and whether the branch pattern
    /// matches the unperturbed pass.
    fn eval(&mut self, model: &Model<T>, input: Option<&Tensor<T>>) -> Result<(f64, bool)> {
        let x = input.unwrap_or(self.input);
        let y = model.forward_train(x, &mut self.tape, 0)?;
        let same = self.tape.activation_pattern(model) == self.base_pattern;
        let l = self.loss.value(&y)?;
        if !l.is_finite() {
            return Err(non_finite(model, x));
        }
        Ok((l, same))
    }
}

fn non_finite<T: Element>(model: &Model<T>, x: &Tensor<T>) -> Error {
    match model.first_non_finite_layer(x) {
        Ok(Some(layer)) => Error::Numeric(format!("non-finite values first produced by layer {layer}")),
        _ => Error::Numeric("loss is non-finite".into()),
    }
}

fn sample_indices(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut v = sample(rng, len, max).into_vec();
    v.sort_unstable();
    v
}

/// Checks analytic gradients of `loss(model(input))` against central
/// differences, one sampled scalar at a time. Parameters are restored
/// exactly after each probe.
pub fn finite_diff_check<T: Element>(
    model: &mut Model<T>,
    input: &Tensor<T>,
    loss: &CheckLoss<T>,
    opts: &GradCheckOptions,
) -> Result<GradReport> {
    if opts.epsilon.is_nan() || opts.epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {}", opts.epsilon)));
    }
    if model.parameters().iter().any(|(_, t)| !t.all_finite()) {
        return Err(Error::Numeric("model parameters are not finite".into()));
    }
    let mut tape = GradTape::new();
    let y = model.forward_train(input, &mut tape, 0)?;
    let base_pattern = tape.activation_pattern(model);
    if !loss.value(&y)?.is_finite() {
        return Err(non_finite(model, input));
    }
    let grads = model.backward_with(&loss.grad(&y)?, &mut tape, opts.check_input)?;
    let mut probe = Probe {
        input,
        loss,
        base_pattern,
        tape,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eps = T::from_f64_lossy(opts.epsilon);
    let mut entries = Vec::new();

    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    for (p, name) in names.iter().enumerate() {
        let len = grads.params[p].len();
        let mut check = TensorCheck::new(name.clone());
        for idx in sample_indices(len, opts.max_samples, &mut rng) {
            let orig = model.parameters_mut()[p].data()[idx];
            let mut at = |m: &mut Model<T>, v: T| -> Result<(f64, bool)> {
                m.parameters_mut()[p].data_mut()[idx] = v;
                probe.eval(m, None)
            };
            let (plus, minus) = (orig + eps, orig - eps);
            let hi = at(model, plus);
            let lo = at(model, minus);
            model.parameters_mut()[p].data_mut()[idx] = orig;
            let ((l_hi, same_hi), (l_lo, same_lo)) = (hi?, lo?);
            let numeric = (l_hi - l_lo) / (plus.as_f64() - minus.as_f64());
            check.record(idx, grads.params[p].data()[idx].as_f64(), numeric, same_hi && same_lo);
        }
        entries.push(check);
    }

    if opts.check_input {
        let gin = grads.input.as_ref().expect("input gradient requested");
        let mut check = TensorCheck::new("input".into());
        let mut x = input.clone();
        for idx in sample_indices(input.len(), opts.max_samples, &mut rng) {
            let orig = x.data()[idx];
            let (plus, minus) = (orig + eps, orig - eps);
            x.data_mut()[idx] = plus;
            let hi = probe.eval(model, Some(&x));
            x.data_mut()[idx] = minus;
            let lo = probe.eval(model, Some(&x));
            x.data_mut()[idx] = orig;
            let ((l_hi, same_hi), (l_lo, same_lo)) = (hi?, lo?);
            let numeric = (l_hi - l_lo) / (plus.as_f64() - minus.as_f64());
            check.record(idx, gin.data()[idx].as_f64(), numeric, same_hi && same_lo);
        }
        entries.push(check);
    }

    Ok(GradReport {
        entries,
        epsilon: opts.epsilon,
        tolerance: opts.tolerance,
    })
}

impl TensorCheck {
    fn new(name: String) -> Self {
        TensorCheck {
            name,
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            worst_index: None,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        }
    }

    fn record(&mut self, idx: usize, analytic: f64, numeric: f64, smooth: bool) {
        if !smooth {
            self.skipped_kinks += 1;
            return;
        }
        self.checked += 1;
        let err = relative_error(analytic, numeric);
        if self.worst_index.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst_index = Some(idx);
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Activation;
    use crate::model::{ArchDescriptor, LayerKind, LayerSpec};

    #[test]
    fn quadratic_central_difference() {
        let numeric = central_difference(|t| t * t, 3.0, 1e-3);
        assert!((numeric - 6.0).abs() < 1e-9);
        assert!(relative_error(6.0, numeric) < 1e-6);
    }

    #[test]
    fn zero_parameter_model_gives_empty_report() {
        let desc = ArchDescriptor {
            input_shape: vec![2, 2, 1],
            classes: 0,
            layers: vec![LayerSpec::new("flat", LayerKind::Flatten)],
        };
        let mut m = Model::<f64>::from_descriptor(&desc, 0).unwrap();
        let x = Tensor::from_fn([2, 2, 1], |i| i as f64);
        let loss = CheckLoss::Projection(Tensor::full([4], 1.0));
        let report = finite_diff_check(&mut m, &x, &loss, &GradCheckOptions::default()).unwrap();
        assert!(report.is_empty());
        assert!(report.passed());
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let desc = ArchDescriptor {
            input_shape: vec![3],
            classes: 0,
            layers: vec![LayerSpec::new(
                "fc",
                LayerKind::Dense {
                    units: 2,
                    activation: Activation::Tanh,
                },
            )],
        };
        let m = Model::<f32>::from_descriptor(&desc, 0).unwrap();
        let mut tape = GradTape::new();
        assert!(matches!(
            m.backward(&Tensor::zeros([2]), &mut tape),
            Err(Error::State(_))
        ));
        // A consumed tape cannot be replayed either.
        m.forward_train(&Tensor::zeros([3]), &mut tape, 0).unwrap();
        m.backward(&Tensor::zeros([2]), &mut tape).unwrap();
        assert!(tape.is_empty());
        assert!(matches!(
            m.backward(&Tensor::zeros([2]), &mut tape),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn non_positive_epsilon_rejected() {
        let desc = ArchDescriptor {
            input_shape: vec![3],
            classes: 0,
            layers: vec![],
        };
        let mut m = Model::<f64>::from_descriptor(&desc, 0).unwrap();
        let opts = GradCheckOptions {
            epsilon: 0.0,
            ..Default::default()
        };
        let loss = CheckLoss::Projection(Tensor::zeros([3]));
        assert!(finite_diff_check(&mut m, &Tensor::zeros([3]), &loss, &opts).is_err());
    }

    #[test]
    fn non_finite_loss_names_the_layer() {
        let desc = ArchDescriptor {
            input_shape: vec![2],
            classes: 0,
            layers: vec![LayerSpec::new(
                "fc",
                LayerKind::Dense {
                    units: 1,
                    activation: Activation::Linear,
                },
            )],
        };
        let mut m = Model::<f64>::from_descriptor(&desc, 0).unwrap();
        let x = Tensor::vector(vec![f64::INFINITY, 0.0]);
        let loss = CheckLoss::Projection(Tensor::full([1], 1.0));
        let err = finite_diff_check(&mut m, &x, &loss, &GradCheckOptions::default()).unwrap_err();
        assert!(err.to_string().contains("fc"), "{err}");
    }
}
