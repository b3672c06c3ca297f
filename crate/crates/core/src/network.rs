//! Layer tables shared by both networks.
//!
//! Layer notation in names follows `Conv<k>-<filters>-<dilation>`. Both
//! networks start from the same front end topology (independent weights):
//!
//! | layer      | kernel | filters | dilation | output scale |
//! |------------|--------|---------|----------|--------------|
//! | front.c1   | 3      | 16      | 1        | 1            |
//! | front.c2   | 3      | 16      | 1        | 1            |
//! | max-pool   |        |         |          | 1/2          |
//! | front.c3   | 3      | 32      | 1        | 1/2          |
//! | front.c4   | 3      | 32      | 1        | 1/2          |
//! | max-pool   |        |         |          | 1/4          |
//!
//! every convolution followed by ReLU. Each input image is first centred on
//! its own mean intensity and scaled by a fixed factor, so overall scene
//! brightness carries no signal.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::ops::Conv2dParams;
use crate::params::{he_normal, BoundParams, NetworkParams};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

/// Total spatial downsampling of the front end.
pub const DOWNSAMPLE: usize = 4;

/// Channels produced by the front end.
pub const FRONT_CHANNELS: usize = 32;

/// Divisor applied to mean-centred input intensities.
pub const INPUT_STD: f64 = 0.1;

/// `(x - mean(x)) / INPUT_STD` per batch item.
pub fn standardize_input<T: Real>(tape: &mut Tape<T>, image: Var) -> Result<Var> {
    let x = tape.value(image);
    let [n, ..] = x.dims4()?;
    let per = x.len() / n;
    let inv = T::from_f64_lossy(1.0 / INPUT_STD);
    let centre = move |v: &[T]| -> Vec<T> {
        let mut out = Vec::with_capacity(v.len());
        for item in v.chunks(per) {
            let mean = item.iter().fold(T::zero(), |a, &b| a + b) / T::from_f64_lossy(per as f64);
            out.extend(item.iter().map(|&e| (e - mean) * inv));
        }
        out
    };
    let value = Tensor::new(x.shape(), centre(x.data()))?;
    Ok(tape.custom(&[image], value, Box::new(move |_, _, g| vec![Some(centre(g))])))
}

/// A stride-1, size-preserving convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        ConvLayer {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            dilation,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }

    pub fn init<T: Real>(&self, params: &mut NetworkParams<T>, rng: &mut SplitMix64) -> Result<()> {
        let k = self.kernel;
        params.insert(
            &self.weight_name(),
            he_normal(&[self.out_channels, self.in_channels, k, k], rng),
        )?;
        params.insert(&self.bias_name(), Tensor::zeros(&[self.out_channels]))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &BoundParams, x: Var) -> Result<Var> {
        let w = bound.get(&self.weight_name())?;
        let b = bound.get(&self.bias_name())?;
        tape.conv2d(x, w, b, Conv2dParams::same(self.kernel, self.dilation))
    }
}

/// The four front-end convolutions under `prefix`.
pub fn front_end(prefix: &str) -> [ConvLayer; 4] {
    [
        ConvLayer::new(format!("{prefix}.front.c1"), 1, 16, 3, 1),
        ConvLayer::new(format!("{prefix}.front.c2"), 16, 16, 3, 1),
        ConvLayer::new(format!("{prefix}.front.c3"), 16, 32, 3, 1),
        ConvLayer::new(format!("{prefix}.front.c4"), 32, FRONT_CHANNELS, 3, 1),
    ]
}

/// conv-relu, conv-relu, pool, conv-relu, conv-relu, pool.
pub fn front_end_forward<T: Real>(
    layers: &[ConvLayer; 4],
    tape: &mut Tape<T>,
    bound: &BoundParams,
    image: Var,
) -> Result<Var> {
    let mut x = standardize_input(tape, image)?;
    for (i, layer) in layers.iter().enumerate() {
        x = layer.forward(tape, bound, x)?;
        x = tape.relu(x);
        if i % 2 == 1 {
            x = tape.max_pool2(x)?;
        }
    }
    Ok(x)
}
