//! Model container, VGG backbone construction and surgery, and checkpoints.

pub mod checkpoint;
pub mod descriptor;
pub mod vgg;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::layers::{forward_chain, Layer, Pass};
use crate::tensor::{Element, Tensor};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use descriptor::{ArchDescriptor, LayerKind, LayerSpec};
pub use vgg::{
    assemble_bigru_cnn, build_vgg16, build_vgg_prefix, truncate_head, vgg16_descriptor, vgg_prefix_descriptor,
    HeadConfig, VggHead, VGG16_BLOCKS,
};

/// An ordered stack of layers with a fixed per-sample input shape.
#[derive(Debug, Clone)]
pub struct Model<T = f32> {
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<Layer<T>>,
    frozen: BTreeSet<String>,
    exec: Execution,
}

impl<T: Element> Model<T> {
    /// Validates `desc` by shape inference, then allocates Glorot-initialized
    /// parameters from a generator seeded with `seed`.
    pub fn from_descriptor(desc: &ArchDescriptor, seed: u64) -> Result<Self> {
        desc.infer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = desc.input_shape.clone();
        let mut layers = Vec::with_capacity(desc.layers.len());
        for spec in &desc.layers {
            layers.push(Layer::from_spec(spec, &shape, &mut rng)?);
            shape = spec.output_shape(&shape)?;
        }
        Ok(Model {
            input_shape: desc.input_shape.clone(),
            classes: desc.classes,
            layers,
            frozen: BTreeSet::new(),
            exec: Execution::Sequential,
        })
    }

    /// Wraps existing layers, checking that their parameters agree with the
    /// shapes the descriptor implies.
    pub fn from_layers(input_shape: Vec<usize>, classes: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        let model = Model {
            input_shape,
            classes,
            layers,
            frozen: BTreeSet::new(),
            exec: Execution::Sequential,
        };
        let expected = model.descriptor().param_shapes()?;
        let actual = model.parameters();
        if expected.len() != actual.len() {
            return Err(Error::Structure(format!(
                "descriptor implies {} parameter tensors, layers hold {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((en, es), (an, at)) in expected.iter().zip(&actual) {
            if en != an || es.as_slice() != at.shape() {
                return Err(Error::Structure(format!(
                    "parameter {an} {:?} disagrees with descriptor entry {en} {es:?}",
                    at.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn descriptor(&self) -> ArchDescriptor {
        ArchDescriptor {
            input_shape: self.input_shape.clone(),
            classes: self.classes,
            layers: self.layers.iter().map(Layer::spec).collect(),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub(crate) fn into_parts(self) -> (Vec<usize>, usize, Vec<Layer<T>>) {
        (self.input_shape, self.classes, self.layers)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        self.descriptor().output_shape()
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn set_execution(&mut self, exec: Execution) {
        self.exec = exec;
    }

    /// Excludes a top-level layer from gradient updates.
    pub fn freeze(&mut self, layer: &str) -> Result<()> {
        if !self.layers.iter().any(|l| l.name() == layer) {
            return Err(Error::Structure(format!("no top-level layer named {layer}")));
        }
        self.frozen.insert(layer.to_string());
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, layer: &str) -> bool {
        self.frozen.contains(layer)
    }

    pub(crate) fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "model input shape {:?}, expected {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let pass = Pass::infer().with_exec(self.exec);
        Ok(forward_chain(&self.layers, x, pass)?.0)
    }

    /// Name of the first top-level layer whose output has a NaN or infinity.
    pub fn first_non_finite_layer(&self, x: &Tensor<T>) -> Result<Option<String>> {
        self.check_input(x)?;
        let pass = Pass::infer().with_exec(self.exec);
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward(&cur, pass)?.0;
            if !cur.all_finite() {
                return Ok(Some(l.name().to_string()));
            }
        }
        Ok(None)
    }

    /// `(name, tensor)` for every parameter in storage order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        for l in &self.layers {
            l.visit_params(&mut |n, t| v.push((n, t)));
        }
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            l.collect_params_mut(&mut v);
        }
        v
    }

    /// For each parameter tensor, whether it belongs to a frozen layer.
    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut mask = Vec::new();
        for l in &self.layers {
            let frozen = self.frozen.contains(l.name());
            l.visit_params(&mut |_, _| mask.push(frozen));
        }
        mask
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.layers.iter().flat_map(Layer::zero_grads).collect()
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            input_shape: self.input_shape.clone(),
            classes: self.classes,
            layers: self.layers.iter().map(Layer::cast).collect(),
            frozen: self.frozen.clone(),
            exec: self.exec,
        }
    }

    /// Parameter values of `other` copied in, matched by position and
    /// checked by name and shape.
    pub fn copy_parameters_from(&mut self, other: &Model<T>) -> Result<()> {
        let src: Vec<(String, Tensor<T>)> = other.parameters().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let names: Vec<String> = self.parameters().into_iter().map(|(n, _)| n).collect();
        if names.len() != src.len() {
            return Err(Error::Structure("parameter lists differ in length".into()));
        }
        for ((dst, name), (sn, st)) in self.parameters_mut().into_iter().zip(&names).zip(src) {
            if *name != sn || dst.shape() != st.shape() {
                return Err(Error::Structure(format!("cannot copy {sn} into {name}")));
            }
            *dst = st;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Activation;

    fn dense_desc(n: usize, m: usize) -> ArchDescriptor {
        ArchDescriptor {
            input_shape: vec![n],
            classes: 0,
            layers: vec![LayerSpec::new(
                "fc",
                LayerKind::Dense {
                    units: m,
                    activation: Activation::Linear,
                },
            )],
        }
    }

    #[test]
    fn param_counts() {
        let empty = ArchDescriptor {
            input_shape: vec![4],
            classes: 0,
            layers: vec![],
        };
        assert_eq!(Model::<f32>::from_descriptor(&empty, 0).unwrap().param_count(), 0);
        let m = Model::<f32>::from_descriptor(&dense_desc(10, 5), 0).unwrap();
        assert_eq!(m.param_count(), 55);
        assert_eq!(dense_desc(10, 5).param_count().unwrap(), 55);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f32>::from_descriptor(&dense_desc(6, 3), 9).unwrap();
        let b = Model::<f32>::from_descriptor(&dense_desc(6, 3), 9).unwrap();
        let c = Model::<f32>::from_descriptor(&dense_desc(6, 3), 10).unwrap();
        assert_eq!(a.parameters()[0].1, b.parameters()[0].1);
        assert_ne!(a.parameters()[0].1, c.parameters()[0].1);
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let m = Model::<f32>::from_descriptor(&dense_desc(20, 4), 1).unwrap();
        let limit = (6.0f32 / 24.0).sqrt();
        let params = m.parameters();
        assert!(params[0].1.data().iter().all(|v| v.abs() <= limit));
        assert!(params[1].1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_checks_input_shape() {
        let m = Model::<f32>::from_descriptor(&dense_desc(3, 2), 0).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros([4])), Err(Error::Dimension(_))));
    }

    #[test]
    fn parameters_mut_reaches_every_tensor() {
        let mut m = Model::<f32>::from_descriptor(&dense_desc(3, 2), 0).unwrap();
        for t in m.parameters_mut() {
            t.fill(1.0);
        }
        let y = m.forward(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[7.0, 7.0]);
    }

    #[test]
    fn freeze_unknown_layer_fails() {
        let mut m = Model::<f32>::from_descriptor(&dense_desc(3, 2), 0).unwrap();
        assert!(m.freeze("nope").is_err());
        m.freeze("fc").unwrap();
        assert_eq!(m.frozen_mask(), vec![true, true]);
    }
}
