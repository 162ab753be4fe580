//! Layers with cached forward state and explicit backward passes.
//!
//! A [`Module`] owns its parameters and whatever it needs from the last
//! forward call; `backward` consumes that cache, accumulates parameter
//! gradients and returns the gradient with respect to the module input.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{self, Activation, Mode, PoolKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        self.grad.add_assign(g)
    }
}

/// Non-trainable named state such as batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

pub trait Module<T: Scalar>: Send {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

fn missing_cache(layer: &str) -> Error {
    Error::InvalidArgument(format!("{layer}: backward called without a forward pass"))
}

/// Kaiming-style normal: `N(0, 2 / fan_in)`.
pub fn kaiming_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

pub struct Conv3d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
    /// Skip the input gradient (first layer of a network).
    pub input_grad: bool,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv3d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel.pow(3);
        let weight = kaiming_normal(&[out_channels, in_channels, kernel, kernel, kernel], fan_in, rng);
        Conv3d {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: with_bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[out_channels]))),
            stride,
            padding,
            input_grad: true,
            input: None,
        }
    }
}

impl<T: Scalar> Module<T> for Conv3d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = ops::conv3d(x, &self.weight.value, self.bias.as_ref().map(|b| &b.value), self.stride, self.padding)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache("conv3d"))?;
        let g = ops::conv3d_backward(&x, &self.weight.value, grad_out, self.stride, self.padding, self.input_grad)?;
        self.weight.accumulate(&g.weight)?;
        if let Some(b) = &mut self.bias {
            b.accumulate(&g.bias)?;
        }
        Ok(g.input.unwrap_or_else(|| Tensor::zeros(x.shape())))
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let w = self.weight.value.shape();
        if input.len() != 5 || input[1] != w[1] {
            return Err(Error::Shape(format!("conv3d input {input:?} incompatible with weight {w:?}")));
        }
        let mut out = vec![input[0], w[0]];
        for (i, &n) in input[2..].iter().enumerate() {
            out.push(ops::output_extent(n, w[2 + i], self.stride, self.padding)?);
        }
        Ok(out)
    }

    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    pub eps: T,
    pub momentum: T,
    trace: Option<(ops::BatchNormTrace<T>, Mode)>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Buffer { name: format!("{name}.running_mean"), value: Tensor::zeros(&[channels]) },
            running_var: Buffer { name: format!("{name}.running_var"), value: Tensor::full(&[channels], T::one()) },
            eps: T::from_f64_lossy(1e-5),
            momentum: T::from_f64_lossy(0.1),
            trace: None,
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let stats = ops::RunningStats { mean: &mut self.running_mean.value, var: &mut self.running_var.value };
        let (y, trace) = ops::batch_norm(x, &self.gamma.value, &self.beta.value, stats, mode, self.eps, self.momentum)?;
        self.trace = Some((trace, mode));
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (trace, mode) = self.trace.take().ok_or_else(|| missing_cache("batch_norm"))?;
        let g = ops::batch_norm_backward(&trace, &self.gamma.value, mode, grad_out)?;
        self.gamma.accumulate(&g.gamma)?;
        self.beta.accumulate(&g.beta)?;
        Ok(g.input)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() < 2 || input[1] != self.gamma.value.len() {
            return Err(Error::Shape(format!("batch_norm input {input:?} has wrong channel count")));
        }
        Ok(input.to_vec())
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

pub struct Act<T> {
    pub kind: Activation,
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Act<T> {
    pub fn new(kind: Activation) -> Self {
        Act { kind, output: None }
    }
}

impl<T: Scalar> Module<T> for Act<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = ops::activation(x, self.kind);
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.take().ok_or_else(|| missing_cache("activation"))?;
        ops::activation_backward(self.kind, &y, grad_out)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }
}

pub struct Pool<T> {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
    trace: Option<ops::PoolTrace>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Pool<T> {
    pub fn new(kind: PoolKind, window: usize, stride: usize) -> Self {
        Pool { kind, window, stride, trace: None, _marker: std::marker::PhantomData }
    }
}

impl<T: Scalar> Module<T> for Pool<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (y, trace) = ops::pool3d(x, self.kind, self.window, self.stride)?;
        self.trace = Some(trace);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let trace = self.trace.take().ok_or_else(|| missing_cache("pool3d"))?;
        ops::pool3d_backward(&trace, self.kind, self.window, self.stride, grad_out)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 5 {
            return Err(Error::Shape(format!("pool3d expects [N,C,D,H,W], got {input:?}")));
        }
        if self.kind == PoolKind::GlobalAvg {
            return Ok(vec![input[0], input[1], 1, 1, 1]);
        }
        let mut out = input[..2].to_vec();
        for &n in &input[2..] {
            if self.window > n {
                return Err(Error::Shape(format!("pool window {} exceeds extent {n}", self.window)));
            }
            out.push(ops::output_extent(n, self.window, self.stride, 0)?);
        }
        Ok(out)
    }
}

/// `[N, ...] -> [N, prod(...)]`.
pub struct Flatten<T> {
    input_shape: Option<Vec<usize>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Default for Flatten<T> {
    fn default() -> Self {
        Flatten { input_shape: None, _marker: std::marker::PhantomData }
    }
}

impl<T: Scalar> Module<T> for Flatten<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.input_shape = Some(x.shape().to_vec());
        let out = self.output_shape(x.shape())?;
        x.clone().reshape(&out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.take().ok_or_else(|| missing_cache("flatten"))?;
        grad_out.clone().reshape(&shape)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(vec![input[0], input[1..].iter().product()])
    }
}

pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Dense {
            weight: Param::new(format!("{name}.weight"), kaiming_normal(&[outputs, inputs], inputs, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[outputs])),
            input: None,
        }
    }
}

impl<T: Scalar> Module<T> for Dense<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = ops::dense(x, &self.weight.value, &self.bias.value)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache("dense"))?;
        let g = ops::dense_backward(&x, &self.weight.value, grad_out)?;
        self.weight.accumulate(&g.weight)?;
        self.bias.accumulate(&g.bias)?;
        Ok(g.input)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let w = self.weight.value.shape();
        match input {
            [n, k] if *k == w[1] => Ok(vec![*n, w[0]]),
            _ => Err(Error::Shape(format!("dense input {input:?} incompatible with weight {w:?}"))),
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Layers applied in order.
pub struct Sequential<T> {
    pub layers: Vec<Box<dyn Module<T>>>,
}

impl<T: Scalar> Default for Sequential<T> {
    fn default() -> Self {
        Sequential { layers: Vec::new() }
    }
}

impl<T: Scalar> Sequential<T> {
    pub fn push(&mut self, layer: impl Module<T> + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }
}

impl<T: Scalar> Module<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, mode)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers.iter().try_fold(input.to_vec(), |s, l| l.output_shape(&s))
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }
}
