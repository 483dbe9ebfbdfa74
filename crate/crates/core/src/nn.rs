//! Trainable parameters and the small layer set used across the pipeline.

use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named trainable tensor with its gradient slot and AdamW moment buffers.
pub struct Parameter<T: Scalar> {
    id: u64,
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub moment1: Tensor<T>,
    pub moment2: Tensor<T>,
    /// Number of optimizer updates applied to this parameter; drives the
    /// AdamW bias correction and so lives with the moments, not globally
    /// (parameters may join training mid-run).
    pub adam_steps: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value,
            grad: None,
            moment1: Tensor::zeros(shape.clone()),
            moment2: Tensor::zeros(shape),
            adam_steps: 0,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Register this parameter on a tape as a differentiable leaf.
    pub fn on(&self, tape: &Tape<T>) -> Result<Var> {
        tape.param_leaf(self.id, &self.name, self.value.clone())
    }

    /// Replace the value, resetting optimizer state to match a fresh load.
    pub fn load(&mut self, value: Tensor<T>) {
        let shape = value.shape().to_vec();
        self.value = value;
        self.grad = None;
        self.moment1 = Tensor::zeros(shape.clone());
        self.moment2 = Tensor::zeros(shape);
        self.adam_steps = 0;
    }
}

/// Gaussian init with std sqrt(2 / fan_in); the usual choice ahead of ReLU.
pub fn kaiming_normal<T: Scalar>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let shape = shape.into();
    let std = (2.0 / fan_in as f64).sqrt();
    gaussian(shape, 0.0, std, rng)
}

pub fn gaussian<T: Scalar>(
    shape: impl Into<Vec<usize>>,
    mean: f64,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let dist = Normal::new(mean, std).expect("valid normal");
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape matches buffer")
}

/// Same-padded k x k convolution layer.
pub struct Conv2d<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cin * k * k;
        Conv2d {
            weight: Parameter::new(
                format!("{name}.weight"),
                kaiming_normal(vec![cout, cin, k, k], fan_in, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![cout])),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.on(tape)?;
        let b = self.bias.on(tape)?;
        tape.conv2d(x, w, b)
    }

    /// Convolution with the ReLU fused into the same op.
    pub fn forward_relu(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.on(tape)?;
        let b = self.bias.on(tape)?;
        tape.conv2d_relu(x, w, b)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Pixel-wise MLP realized as a stack of 1x1 convolutions with ReLU between.
pub struct PixelMlp<T: Scalar> {
    layers: Vec<Conv2d<T>>,
}

impl<T: Scalar> PixelMlp<T> {
    /// `dims` lists channel counts from input to output, e.g. [64, 256, 256, 256].
    pub fn new(name: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, pair)| Conv2d::new(&format!("{name}.{i}"), pair[0], pair[1], 1, rng))
            .collect();
        PixelMlp { layers }
    }

    pub fn forward(&self, tape: &Tape<T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = if i != last {
                layer.forward_relu(tape, x)?
            } else {
                layer.forward(tape, x)?
            };
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Dense layer acting on column-stacked feature matrices [in, n] -> [out, n].
pub struct Linear<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, dim_in: usize, dim_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Parameter::new(
                format!("{name}.weight"),
                kaiming_normal(vec![dim_out, dim_in], dim_in, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![dim_out])),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.on(tape)?;
        let b = self.bias.on(tape)?;
        let y = tape.matmul(w, x)?;
        tape.add_col_bias(y, b)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Column-wise MLP with ReLU between layers.
pub struct Mlp<T: Scalar> {
    layers: Vec<Linear<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(name: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, pair)| Linear::new(&format!("{name}.{i}"), pair[0], pair[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &Tape<T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i != last {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
