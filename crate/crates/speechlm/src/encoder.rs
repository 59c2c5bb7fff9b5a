//! Miniature multi-layer audio encoder with learnable layer fusion.
//!
//! The encoder is a plain pre-norm transformer over projected raw feature
//! frames. It exposes every intermediate layer output so the combiner can
//! form a weighted average across layers; during multimodal training its
//! weights stay frozen and only the combination scalars receive gradients.

use rand_chacha::ChaCha20Rng;

use crate::error::{invalid_arg, Result};
use crate::nn::{self, Bound, LinearRef};
use crate::optim::ParamSet;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const SUPPORTED_RATES_HZ: [f64; 3] = [50.0, 25.0, 12.5];

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub feature_dim: usize,
    pub num_heads: usize,
    /// Output feature rate, i.e. the rate the downsampler sees.
    pub frame_rate_hz: f64,
    /// Input frames consumed per encoder frame (realized by frame stacking).
    pub temporal_reduction: usize,
    pub raw_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 4,
            feature_dim: 32,
            num_heads: 2,
            frame_rate_hz: 50.0,
            temporal_reduction: 1,
            raw_dim: 16,
        }
    }
}

impl EncoderConfig {
    pub fn ff_dim(&self) -> usize {
        4 * self.feature_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.feature_dim == 0 || self.raw_dim == 0 {
            invalid_arg!("encoder dimensions must be positive");
        }
        if self.feature_dim % self.num_heads != 0 {
            invalid_arg!(
                "feature_dim {} not divisible by num_heads {}",
                self.feature_dim,
                self.num_heads
            );
        }
        if self.temporal_reduction == 0 {
            invalid_arg!("temporal_reduction must be >= 1");
        }
        if !SUPPORTED_RATES_HZ
            .iter()
            .any(|&r| (r - self.frame_rate_hz).abs() < 1e-9)
        {
            invalid_arg!(
                "unsupported encoder frame rate {} Hz (supported: {:?})",
                self.frame_rate_hz,
                SUPPORTED_RATES_HZ
            );
        }
        Ok(())
    }
}

/// All intermediate layer outputs of one encoding pass, each `[T_enc, D]`.
#[derive(Debug)]
pub struct LayerStack {
    pub layers: Vec<TensorId>,
}

impl LayerStack {
    pub fn last(&self) -> TensorId {
        *self.layers.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombinerMode {
    LastLayer,
    Weighted,
}

/// Register encoder parameters under `encoder.*`. The combination scalars
/// `combiner.w{l}` are registered only in weighted mode (they do not exist
/// in last-layer mode) and start at 1.
pub fn init_encoder_params(
    params: &mut ParamSet,
    cfg: &EncoderConfig,
    mode: CombinerMode,
    trainable: bool,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let in_dim = cfg.raw_dim * cfg.temporal_reduction;
    let std_in = 1.0 / (in_dim as f64).sqrt();
    let std_d = 1.0 / (d as f64).sqrt();
    let std_ff = 1.0 / (cfg.ff_dim() as f64).sqrt();

    params.add("encoder.in_proj", nn::randn(&[in_dim, d], std_in, rng), trainable)?;
    for l in 0..cfg.num_layers {
        let p = format!("encoder.layer{l}");
        params.add(format!("{p}.ln1.gain"), Tensor::full(&[d], 1.0), trainable)?;
        params.add(format!("{p}.ln1.bias"), Tensor::zeros(&[d]), trainable)?;
        for w in ["wq", "wk", "wv", "wo"] {
            params.add(format!("{p}.attn.{w}"), nn::randn(&[d, d], std_d, rng), trainable)?;
        }
        params.add(format!("{p}.ln2.gain"), Tensor::full(&[d], 1.0), trainable)?;
        params.add(format!("{p}.ln2.bias"), Tensor::zeros(&[d]), trainable)?;
        params.add(
            format!("{p}.ff.w1"),
            nn::randn(&[d, cfg.ff_dim()], std_d, rng),
            trainable,
        )?;
        params.add(
            format!("{p}.ff.w2"),
            nn::randn(&[cfg.ff_dim(), d], std_ff, rng),
            trainable,
        )?;
    }
    if mode == CombinerMode::Weighted {
        for l in 0..cfg.num_layers {
            params.add(format!("combiner.w{l}"), Tensor::scalar(1.0), true)?;
        }
    }
    Ok(())
}

const LN_EPS: f64 = 1e-5;

/// Encode raw audio `[T, raw_dim]` into all layer outputs. When `masked` is
/// given, the selected raw frames are replaced with the (learned) replacement
/// row before any other processing; that path is used by the self-supervised
/// pretraining objective.
pub fn encode(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    audio: &Tensor,
    masked: Option<(&[bool], TensorId)>,
) -> Result<LayerStack> {
    if audio.shape().len() != 2 || audio.cols() != cfg.raw_dim {
        invalid_arg!(
            "audio feature dim mismatch: got {:?}, encoder expects [T, {}]",
            audio.shape(),
            cfg.raw_dim
        );
    }
    let t_raw = audio.rows();
    if t_raw == 0 {
        invalid_arg!("cannot encode empty audio");
    }
    let mut x = tape.constant(audio.clone());
    if let Some((mask, replacement)) = masked {
        x = tape.mask_rows(x, replacement, mask)?;
    }
    let r = cfg.temporal_reduction;
    if r > 1 {
        let t_enc = t_raw / r;
        if t_enc == 0 {
            invalid_arg!("audio too short for temporal reduction {r}: {t_raw} frames");
        }
        x = tape.slice_rows(x, 0, t_enc * r)?;
        x = tape.reshape(x, vec![t_enc, r * cfg.raw_dim])?;
    }
    x = tape.matmul(x, bound.id("encoder.in_proj"))?;
    let t_enc = tape.value(x).rows();
    let pos = tape.constant(nn::sinusoidal_positions(t_enc, cfg.feature_dim));
    x = tape.add(x, pos)?;

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let p = format!("encoder.layer{l}");
        let normed = tape.layer_norm(
            x,
            bound.id(&format!("{p}.ln1.gain")),
            bound.id(&format!("{p}.ln1.bias")),
            LN_EPS,
        )?;
        let attn = nn::multihead_attention(
            tape,
            normed,
            normed,
            &LinearRef::plain(bound.id(&format!("{p}.attn.wq"))),
            &LinearRef::plain(bound.id(&format!("{p}.attn.wk"))),
            &LinearRef::plain(bound.id(&format!("{p}.attn.wv"))),
            &LinearRef::plain(bound.id(&format!("{p}.attn.wo"))),
            cfg.num_heads,
            false,
        )?;
        x = tape.add(x, attn)?;
        let normed = tape.layer_norm(
            x,
            bound.id(&format!("{p}.ln2.gain")),
            bound.id(&format!("{p}.ln2.bias")),
            LN_EPS,
        )?;
        let h1 = tape.matmul(normed, bound.id(&format!("{p}.ff.w1")))?;
        let h1 = tape.gelu(h1);
        let h2 = tape.matmul(h1, bound.id(&format!("{p}.ff.w2")))?;
        x = tape.add(x, h2)?;
        layers.push(x);
    }
    Ok(LayerStack { layers })
}

/// Collapse a layer stack into one `[T_enc, D]` sequence: the last layer, or
/// the learnable weighted average `(1/L) * sum_l w_l h_l`.
pub fn combine(
    tape: &mut Tape,
    bound: &Bound,
    mode: CombinerMode,
    stack: &LayerStack,
) -> Result<TensorId> {
    match mode {
        CombinerMode::LastLayer => Ok(stack.last()),
        CombinerMode::Weighted => {
            let l = stack.layers.len();
            let mut acc: Option<TensorId> = None;
            for (i, &h) in stack.layers.iter().enumerate() {
                let w = bound
                    .try_id(&format!("combiner.w{i}"))
                    .ok_or_else(|| crate::error::Error::InvalidArgument(format!(
                        "combiner weight {i} missing (expected {l} weights)"
                    )))?;
                let term = tape.mul(w, h)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            Ok(tape.scale(acc.expect("at least one layer"), 1.0 / l as f64))
        }
    }
}
