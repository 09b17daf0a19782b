use crate::error::{dim_err, Result};
use crate::kernels::{conv2d, conv2d_backward, Padding};
use crate::layers::Activation;
use crate::tensor::{Element, Tensor};

/// Convolution with a fused activation (`linear` or `relu` in practice).
#[derive(Debug, Clone)]
pub struct Conv2d<T = f32> {
    pub name: String,
    /// `[k_h, k_w, C_in, C_out]`.
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Activation,
}

impl<T: Element> Conv2d<T> {
    pub fn new(
        name: impl Into<String>,
        kernel: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: Padding,
        activation: Activation,
    ) -> Result<Self> {
        if kernel.rank() != 4 || bias.shape() != [kernel.shape()[3]] {
            return dim_err(format!(
                "conv2d kernel {:?} / bias {:?} are inconsistent",
                kernel.shape(),
                bias.shape()
            ));
        }
        Ok(Conv2d {
            name: name.into(),
            kernel,
            bias,
            stride,
            padding,
            activation,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = conv2d(x, &self.kernel, &self.bias, self.stride, self.padding)?;
        let c = self.kernel.shape()[3];
        self.activation.apply(y.data_mut(), c);
        Ok(y)
    }

    pub(crate) fn backward(
        &self,
        input: &Tensor<T>,
        output: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Tensor<T>],
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let c = self.kernel.shape()[3];
        let dpre = Tensor::new(
            output.shape().to_vec(),
            self.activation.backward(output.data(), g.data(), c),
        )?;
        let [gk, gb] = grads else {
            return dim_err("conv2d backward needs 2 gradient slots");
        };
        conv2d_backward(
            input,
            &self.kernel,
            &dpre,
            self.stride,
            self.padding,
            gk,
            gb,
            need_input,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaxPool2d {
    pub name: String,
    pub window: usize,
    pub stride: usize,
}
