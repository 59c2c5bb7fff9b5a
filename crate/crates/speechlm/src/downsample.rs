//! Trainable convolution stack that maps encoder features into the LM
//! embedding space at exactly 12.5 Hz.
//!
//! Each block is a same-padded 1-D convolution followed by layer
//! normalization, with no nonlinearity in between. Stride plans depend only
//! on the input rate: 50 Hz -> [2, 2], 25 Hz -> [2, 1], 12.5 Hz -> [1, 1].

use rand_chacha::ChaCha20Rng;

use crate::error::{invalid_arg, Result};
use crate::nn::{self, Bound};
use crate::optim::ParamSet;
use crate::tape::{Tape, TensorId};

pub const OUTPUT_RATE_HZ: f64 = 12.5;

/// Stride plan reaching 12.5 Hz in two blocks.
pub fn plan_strides(input_rate_hz: f64) -> Result<Vec<usize>> {
    let plans: [(f64, [usize; 2]); 3] = [(50.0, [2, 2]), (25.0, [2, 1]), (12.5, [1, 1])];
    for (rate, plan) in plans {
        if (input_rate_hz - rate).abs() < 1e-9 {
            return Ok(plan.to_vec());
        }
    }
    invalid_arg!("no stride plan reaches 12.5 Hz from {input_rate_hz} Hz with strides in {{1, 2}}")
}

#[derive(Debug, Clone)]
pub struct DownsampleConfig {
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub input_rate_hz: f64,
}

impl DownsampleConfig {
    /// Standard two-block configuration (kernel size 3) for the given rate.
    pub fn for_rate(input_rate_hz: f64, in_dim: usize, out_dim: usize) -> Result<Self> {
        let strides = plan_strides(input_rate_hz)?;
        Ok(DownsampleConfig {
            kernel_sizes: vec![3; strides.len()],
            strides,
            in_dim,
            out_dim,
            input_rate_hz,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.len() != self.strides.len() {
            invalid_arg!(
                "{} kernel sizes but {} strides",
                self.kernel_sizes.len(),
                self.strides.len()
            );
        }
        if self.kernel_sizes.iter().any(|&k| k % 2 == 0 || k == 0) {
            invalid_arg!("kernel sizes must be odd, got {:?}", self.kernel_sizes);
        }
        let total: usize = self.strides.iter().product();
        let want = self.input_rate_hz / OUTPUT_RATE_HZ;
        if (total as f64 - want).abs() > 1e-9 {
            invalid_arg!(
                "strides {:?} reduce by {total}, but {} Hz -> 12.5 Hz needs {want}",
                self.strides,
                self.input_rate_hz
            );
        }
        if self.in_dim == 0 || self.out_dim == 0 {
            invalid_arg!("downsampler dims must be positive");
        }
        Ok(())
    }

    /// Output length for an input of `t` frames: successive ceil divisions.
    pub fn out_len(&self, t: usize) -> usize {
        self.strides.iter().fold(t, |acc, &s| (acc + s - 1) / s)
    }
}

/// Register downsampler parameters under `ds.*`. Kernels draw from a centered
/// uniform scaled by `1/sqrt(K * in_dim)`.
pub fn init_downsampler_params(
    params: &mut ParamSet,
    cfg: &DownsampleConfig,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    cfg.validate()?;
    let mut in_dim = cfg.in_dim;
    for (i, (&k, _)) in cfg.kernel_sizes.iter().zip(&cfg.strides).enumerate() {
        let bound = 1.0 / ((k * in_dim) as f64).sqrt();
        params.add(
            format!("ds.block{i}.kernel"),
            nn::rand_uniform(&[k, in_dim, cfg.out_dim], bound, rng),
            true,
        )?;
        params.add(
            format!("ds.block{i}.ln.gain"),
            crate::tensor::Tensor::full(&[cfg.out_dim], 1.0),
            true,
        )?;
        params.add(
            format!("ds.block{i}.ln.bias"),
            crate::tensor::Tensor::zeros(&[cfg.out_dim]),
            true,
        )?;
        in_dim = cfg.out_dim;
    }
    Ok(())
}

const LN_EPS: f64 = 1e-5;

/// Run the convolution blocks over `[T, in_dim]` features.
pub fn downsample(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &DownsampleConfig,
    features: TensorId,
) -> Result<TensorId> {
    cfg.validate()?;
    if tape.value(features).cols() != cfg.in_dim {
        invalid_arg!(
            "downsampler expects {} input channels, got {:?}",
            cfg.in_dim,
            tape.value(features).shape()
        );
    }
    let mut x = features;
    for (i, &stride) in cfg.strides.iter().enumerate() {
        let p = format!("ds.block{i}");
        x = tape.conv1d(x, bound.id(&format!("{p}.kernel")), stride)?;
        x = tape.layer_norm(
            x,
            bound.id(&format!("{p}.ln.gain")),
            bound.id(&format!("{p}.ln.bias")),
            LN_EPS,
        )?;
    }
    Ok(x)
}
