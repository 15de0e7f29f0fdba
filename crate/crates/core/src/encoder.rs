//! Shared fully-convolutional feature extractor: a stack of
//! `conv3x3 (dilated, same padding) -> relu -> maxpool` blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Tape, Tensor, Var};

pub const KERNEL_SIZE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub out_channels: usize,
    /// Window and stride of the block's max pool; 1 keeps the resolution.
    pub pool_stride: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub blocks: Vec<BlockConfig>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let block = |out_channels, pool_stride, dilation| BlockConfig {
            out_channels,
            pool_stride,
            dilation,
        };
        Self {
            in_channels: 1,
            blocks: vec![block(16, 2, 1), block(32, 2, 1), block(32, 1, 2)],
        }
    }
}

impl EncoderConfig {
    pub fn feature_dim(&self) -> usize {
        self.blocks
            .last()
            .map_or(self.in_channels, |b| b.out_channels)
    }

    pub fn downsample_factor(&self) -> usize {
        self.blocks.iter().map(|b| b.pool_stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("encoder in_channels must be positive".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.pool_stride == 0 || b.dilation == 0 {
                return Err(Error::Config(format!(
                    "encoder block {i}: channels, pool stride and dilation must be positive, got {b:?}"
                )));
            }
        }
        Ok(())
    }

    /// Checks that `image_size` is divisible by the downsample factor.
    pub fn check_image_size(&self, height: usize, width: usize) -> Result<()> {
        let ds = self.downsample_factor();
        if !height.is_multiple_of(ds) || !width.is_multiple_of(ds) {
            return Err(Error::InvalidArgument(format!(
                "image size {height}x{width} is not divisible by the encoder downsample factor {ds}"
            )));
        }
        Ok(())
    }

    /// Shapes of the trainable tensors in their stable flat order
    /// `[kernel_0, bias_0, kernel_1, bias_1, ...]`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut c_in = self.in_channels;
        let mut shapes = Vec::with_capacity(2 * self.blocks.len());
        for b in &self.blocks {
            shapes.push(vec![b.out_channels, c_in, KERNEL_SIZE, KERNEL_SIZE]);
            shapes.push(vec![b.out_channels]);
            c_in = b.out_channels;
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<S: Scalar> {
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> EncoderParams<S> {
    /// He initialisation: kernels ~ N(0, 2 / fan_in), biases zero.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let std = (2.0 / fan_in).sqrt();
                Tensor::from_fn(shape, |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    S::lit(std * z)
                })
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn from_tensors(config: &EncoderConfig, tensors: Vec<Tensor<S>>) -> Result<Self> {
        let shapes = config.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "encoder expects {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (want, t) in shapes.iter().zip(&tensors) {
            if t.shape() != want.as_slice() {
                return Err(Error::shape("encoder params", want, t.shape()));
            }
        }
        Ok(Self { tensors })
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Flat copy of every parameter, in stable order.
    pub fn flatten(&self) -> Vec<S> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[S]) {
        assert_eq!(values.len(), self.count(), "flat parameter length");
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    }

    pub fn cast<T: Scalar>(&self) -> EncoderParams<T> {
        EncoderParams {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records the parameters as trainable leaves.
    pub fn register<'t>(&self, tape: &'t Tape<S>) -> Vec<Var<'t, S>> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Records the parameters as constants (no gradient).
    pub fn register_frozen<'t>(&self, tape: &'t Tape<S>) -> Vec<Var<'t, S>> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }
}

/// Runs the encoder on one `[in_channels, H, W]` image with parameters
/// already recorded on the image's tape.
pub fn forward<'t, S: Scalar>(
    config: &EncoderConfig,
    params: &[Var<'t, S>],
    image: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let shape = image.shape();
    let [c, h, w] = shape[..] else {
        return Err(Error::InvalidArgument(format!(
            "encoder input must be [C, H, W], got {shape:?}"
        )));
    };
    if c != config.in_channels {
        return Err(Error::shape(
            "encoder input channels",
            &[config.in_channels],
            &shape,
        ));
    }
    config.check_image_size(h, w)?;
    if params.len() != 2 * config.blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "encoder expects {} parameter tensors, got {}",
            2 * config.blocks.len(),
            params.len()
        )));
    }
    let mut x = image;
    for (block, p) in config.blocks.iter().zip(params.chunks(2)) {
        let spec = Conv2dSpec {
            stride: 1,
            padding: block.dilation * (KERNEL_SIZE - 1) / 2,
            dilation: block.dilation,
        };
        x = x.conv2d(&p[0], &p[1], spec)?.relu();
        if block.pool_stride > 1 {
            x = x.maxpool2d(block.pool_stride, block.pool_stride)?;
        }
    }
    Ok(x)
}

/// Untracked forward pass returning the feature map.
pub fn features<S: Scalar>(
    config: &EncoderConfig,
    params: &EncoderParams<S>,
    image: &Tensor<S>,
) -> Result<Tensor<S>> {
    let tape = Tape::new();
    let vars = params.register_frozen(&tape);
    let out = forward(config, &vars, tape.constant(image.clone()))?;
    let value = out.value();
    Ok((*value).clone())
}
