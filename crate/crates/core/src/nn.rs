//! Parameterized layers shared by the attention, FFN and backbone modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, layer_norm, Element, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Walks named parameters in a fixed order.
pub trait Module<E: Element> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded parameter initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std²) samples redrawn until they fall within ±2·std.
    pub fn trunc_normal<E: Element>(&mut self, shape: &[usize], std: f64) -> Result<Tensor<E>> {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                data.push(E::from_f64_lossy(z * std));
            }
        }
        Tensor::from_vec(shape, data)
    }

    pub fn normal<E: Element>(&mut self, shape: &[usize], std: f64) -> Result<Tensor<E>> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                E::from_f64_lossy(z * std)
            })
            .collect();
        Tensor::from_vec(shape, data)
    }
}

/// `y = x·W + b` with `W` stored as `[in × out]`.
#[derive(Debug, Clone)]
pub struct Linear<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
}

impl<E: Element> Linear<E> {
    pub fn new(init: &mut Initializer, input: usize, output: usize, bias: bool) -> Result<Self> {
        Ok(Linear {
            weight: init.trunc_normal(&[input, output], INIT_STD)?,
            bias: if bias {
                Some(Tensor::zeros(&[output])?)
            } else {
                None
            },
        })
    }

    /// Linear layer with all-zero weights (and bias, if any).
    pub fn zeros(input: usize, output: usize, bias: bool) -> Result<Self> {
        Ok(Linear {
            weight: Tensor::zeros(&[input, output])?,
            bias: if bias {
                Some(Tensor::zeros(&[output])?)
            } else {
                None
            },
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Applies the layer to the last axis of `x`.
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = self.forward_no_bias(x)?;
        match &self.bias {
            Some(b) => y.add(&b.expand(y.shape())?),
            None => Ok(y),
        }
    }

    /// Applies the weight only, skipping the bias.
    pub fn forward_no_bias(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.shape().last() != Some(&self.in_features()) {
            return Err(Error::dim(format!(
                "linear: input {:?} does not end in {} features",
                x.shape(),
                self.in_features()
            )));
        }
        x.matmul(&self.weight)
    }
}

impl<E: Element> Module<E> for Linear<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub eps: E,
}

impl<E: Element> LayerNorm<E> {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: Tensor::ones(&[dim])?,
            beta: Tensor::zeros(&[dim])?,
            eps: E::from_f64_lossy(LAYER_NORM_EPS),
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

impl<E: Element> Module<E> for LayerNorm<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub stride: usize,
    pub padding: usize,
}

impl<E: Element> Conv2d<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Initializer,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        Ok(Conv2d {
            weight: init.trunc_normal(&[output, input, kernel, kernel], INIT_STD)?,
            bias: if bias {
                Some(Tensor::zeros(&[output])?)
            } else {
                None
            },
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Spatial output extent for an input extent.
    pub fn out_extent(&self, extent: usize) -> usize {
        (extent + 2 * self.padding - self.kernel()) / self.stride + 1
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

impl<E: Element> Module<E> for Conv2d<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}
