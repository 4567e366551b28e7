//! Dense double-precision tensors and the layer kernels that run on them.
//!
//! Everything is stored row-major as `(image, channel, row, col)`. Kernels are
//! free functions over borrowed inputs; none of them keep state between calls.

mod conv;
mod ops;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads};
pub use ops::{
    add_backward, add_forward, avg_pool_backward, avg_pool_forward, batchnorm_backward,
    batchnorm_forward, channel_pad_backward, channel_pad_forward, concat_backward,
    concat_channels, dense_backward, dense_forward, global_avg_pool_backward,
    global_avg_pool_forward, max_pool_backward, max_pool_forward, maxpool2x2_forward,
    relu_backward, relu_forward, BatchNormGrads, DenseGrads,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A batch of feature maps: `g × channels × height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "tensor of dims {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn images(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Number of values in one image (`channels × height × width`).
    pub fn image_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn image(&self, n: usize) -> &[f64] {
        let len = self.image_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// One `height × width` plane, i.e. the feature map of channel `c` for image `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let plane = self.plane_len();
        let start = (n * self.dims[1] + c) * plane;
        &self.data[start..start + plane]
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, ch, h, w] = self.dims;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let [_, ch, h, w] = self.dims;
        self.data[((n * ch + c) * h + y) * w + x] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn shape_str(&self) -> String {
        let [n, c, h, w] = self.dims;
        format!("{n}x{c}x{h}x{w}")
    }
}

/// Weights of one convolutional layer: `n_out × n_in × k × k`, plus an optional bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterTensor {
    dims: [usize; 4],
    weights: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl FilterTensor {
    pub fn new(
        n_out: usize,
        n_in: usize,
        kernel: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if n_out == 0 || n_in == 0 || kernel == 0 {
            return Err(Error::Shape(format!(
                "filter dims must be positive, got {n_out}x{n_in}x{kernel}x{kernel}"
            )));
        }
        let expected = n_out * n_in * kernel * kernel;
        if weights.len() != expected {
            return Err(Error::Shape(format!(
                "filter {n_out}x{n_in}x{kernel}x{kernel} needs {expected} weights, got {}",
                weights.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != n_out {
                return Err(Error::Shape(format!(
                    "bias length {} does not match {n_out} filters",
                    b.len()
                )));
            }
        }
        Ok(FilterTensor {
            dims: [n_out, n_in, kernel, kernel],
            weights,
            bias,
        })
    }

    pub fn zeros(n_out: usize, n_in: usize, kernel: usize, with_bias: bool) -> Self {
        FilterTensor {
            dims: [n_out, n_in, kernel, kernel],
            weights: vec![0.0; n_out * n_in * kernel * kernel],
            bias: with_bias.then(|| vec![0.0; n_out]),
        }
    }

    pub fn n_out(&self) -> usize {
        self.dims[0]
    }

    pub fn n_in(&self) -> usize {
        self.dims[1]
    }

    pub fn kernel(&self) -> usize {
        self.dims[2]
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    /// Length of one filter (`n_in × k × k`).
    pub fn filter_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn filter(&self, j: usize) -> &[f64] {
        let len = self.filter_len();
        &self.weights[j * len..(j + 1) * len]
    }

    pub fn filter_mut(&mut self, j: usize) -> &mut [f64] {
        let len = self.filter_len();
        &mut self.weights[j * len..(j + 1) * len]
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    pub fn weights_and_bias_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>) {
        (&mut self.weights, self.bias.as_deref_mut())
    }

    pub(crate) fn shape_str(&self) -> String {
        let [o, i, k, _] = self.dims;
        format!("{o}x{i}x{k}x{k}")
    }

    /// Keeps the listed output filters and input channels, in the given order.
    pub fn select(&self, outputs: &[usize], inputs: &[usize]) -> FilterTensor {
        let k2 = self.kernel() * self.kernel();
        let mut weights = Vec::with_capacity(outputs.len() * inputs.len() * k2);
        for &o in outputs {
            let filter = self.filter(o);
            for &i in inputs {
                weights.extend_from_slice(&filter[i * k2..(i + 1) * k2]);
            }
        }
        FilterTensor {
            dims: [outputs.len(), inputs.len(), self.kernel(), self.kernel()],
            weights,
            bias: self
                .bias
                .as_ref()
                .map(|b| outputs.iter().map(|&o| b[o]).collect()),
        }
    }
}

/// Per-channel affine normalization using stored statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let c = self.scale.len();
        if self.shift.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(Error::Shape(format!(
                "batchnorm vectors disagree in length: scale {}, shift {}, mean {}, var {}",
                c,
                self.shift.len(),
                self.mean.len(),
                self.var.len()
            )));
        }
        Ok(())
    }

    pub fn select(&self, channels: &[usize]) -> BatchNormParams {
        let pick = |v: &[f64]| channels.iter().map(|&c| v[c]).collect::<Vec<_>>();
        BatchNormParams {
            scale: pick(&self.scale),
            shift: pick(&self.shift),
            mean: pick(&self.mean),
            var: pick(&self.var),
            eps: self.eps,
        }
    }
}

/// Fully-connected layer, `weights` stored `out × in` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub in_features: usize,
    pub out_features: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        DenseParams {
            in_features,
            out_features,
            weights: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.weights.len() != self.in_features * self.out_features
            || self.bias.len() != self.out_features
        {
            return Err(Error::Shape(format!(
                "dense layer {}->{} has {} weights and {} biases",
                self.in_features,
                self.out_features,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    /// Keeps the listed input features, in order.
    pub fn select_inputs(&self, inputs: &[usize]) -> DenseParams {
        let mut weights = Vec::with_capacity(self.out_features * inputs.len());
        for o in 0..self.out_features {
            let row = &self.weights[o * self.in_features..(o + 1) * self.in_features];
            weights.extend(inputs.iter().map(|&i| row[i]));
        }
        DenseParams {
            in_features: inputs.len(),
            out_features: self.out_features,
            weights,
            bias: self.bias.clone(),
        }
    }
}
