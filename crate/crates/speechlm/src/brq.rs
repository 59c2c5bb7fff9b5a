//! Self-supervised encoder pretraining with a random-projection quantizer.
//!
//! Raw frames are stacked in groups, projected by and matched against frozen
//! random codebooks to produce discrete targets; the encoder is trained to
//! classify those targets at masked positions, with masked input frames
//! replaced by a learned embedding. Neither the projection nor the codebooks
//! ever receive optimizer updates.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::encoder::{self, EncoderConfig, LayerStack};
use crate::error::{invalid_arg, Error, Result};
use crate::nn::{self, Bound};
use crate::optim::{AdamConfig, OptimizerState, ParamSet};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub span: usize,
    pub target_ratio: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            span: 10,
            target_ratio: 0.4,
        }
    }
}

/// Draw a frame mask as a union of fixed-length spans (truncated at the
/// sequence end). Span starts are i.i.d. per frame with the probability that
/// makes the expected interior coverage equal `target_ratio` exactly:
/// `p = 1 - (1 - ratio)^(1/span)`.
pub fn make_mask(t: usize, spec: &MaskSpec, rng: &mut ChaCha20Rng) -> Result<Vec<bool>> {
    if t == 0 {
        invalid_arg!("mask length must be positive");
    }
    if spec.span == 0 {
        invalid_arg!("mask span must be positive");
    }
    if spec.target_ratio <= 0.0 || spec.target_ratio >= 1.0 {
        invalid_arg!("target_ratio must lie in (0, 1), got {}", spec.target_ratio);
    }
    let p = 1.0 - (1.0 - spec.target_ratio).powf(1.0 / spec.span as f64);
    let mut mask = vec![false; t];
    for start in 0..t {
        if rng.gen::<f64>() < p {
            for m in mask.iter_mut().skip(start).take(spec.span) {
                *m = true;
            }
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone)]
pub struct BrqConfig {
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Raw frames concatenated per projected vector.
    pub stack: usize,
    pub mask: MaskSpec,
}

impl Default for BrqConfig {
    fn default() -> Self {
        BrqConfig {
            num_codebooks: 2,
            codebook_size: 64,
            code_dim: 16,
            stack: 4,
            mask: MaskSpec::default(),
        }
    }
}

/// Frozen random projection plus frozen random codebooks. Codebook rows are
/// L2-normalized at construction, and projected vectors are L2-normalized
/// before the nearest-neighbor lookup, so the Euclidean argmin is the cosine
/// argmax.
#[derive(Debug, Clone)]
pub struct BrqQuantizer {
    pub stack: usize,
    pub code_dim: usize,
    projection: Tensor,
    codebooks: Vec<Tensor>,
}

fn l2_normalize(v: &mut [f64]) {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

impl BrqQuantizer {
    pub fn new(raw_dim: usize, cfg: &BrqConfig, rng: &mut ChaCha20Rng) -> Self {
        let projection = nn::randn(&[cfg.stack * raw_dim, cfg.code_dim], 1.0, rng);
        let mut codebooks = Vec::with_capacity(cfg.num_codebooks);
        for _ in 0..cfg.num_codebooks {
            let mut cb = nn::randn(&[cfg.codebook_size, cfg.code_dim], 1.0, rng);
            for r in 0..cfg.codebook_size {
                l2_normalize(&mut cb.data_mut()[r * cfg.code_dim..(r + 1) * cfg.code_dim]);
            }
            codebooks.push(cb);
        }
        BrqQuantizer {
            stack: cfg.stack,
            code_dim: cfg.code_dim,
            projection,
            codebooks,
        }
    }

    pub fn num_codebooks(&self) -> usize {
        self.codebooks.len()
    }

    pub fn num_targets(&self, t_raw: usize) -> usize {
        t_raw / self.stack
    }

    /// Project one stacked raw group and L2-normalize the result.
    fn projected(&self, group: &[f64]) -> Vec<f64> {
        let in_dim = self.projection.shape()[0];
        debug_assert_eq!(group.len(), in_dim);
        let mut out = vec![0.0; self.code_dim];
        for (i, &x) in group.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.projection.data()[i * self.code_dim..(i + 1) * self.code_dim];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        l2_normalize(&mut out);
        out
    }

    /// Discrete targets for `[T, raw_dim]` audio: one index sequence of length
    /// `floor(T / stack)` per codebook. Trailing frames that do not fill a
    /// group are dropped.
    pub fn quantize_targets(&self, raw: &Tensor) -> Result<Vec<Vec<usize>>> {
        let t = raw.rows();
        let raw_dim = raw.cols();
        if self.projection.shape()[0] != self.stack * raw_dim {
            invalid_arg!(
                "quantizer built for stacked dim {}, got raw dim {raw_dim} with stack {}",
                self.projection.shape()[0],
                self.stack
            );
        }
        if t < self.stack {
            invalid_arg!("need at least {} raw frames, got {t}", self.stack);
        }
        let n = self.num_targets(t);
        let mut out = vec![Vec::with_capacity(n); self.codebooks.len()];
        for g in 0..n {
            let group = &raw.data()[g * self.stack * raw_dim..(g + 1) * self.stack * raw_dim];
            let v = self.projected(group);
            for (cb_idx, cb) in self.codebooks.iter().enumerate() {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for r in 0..cb.rows() {
                    let row = &cb.data()[r * self.code_dim..(r + 1) * self.code_dim];
                    let d: f64 = v
                        .iter()
                        .zip(row)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = r;
                    }
                }
                out[cb_idx].push(best);
            }
        }
        Ok(out)
    }
}

/// Register the pretraining-only parameters: the learned embedding that
/// replaces masked input frames and one linear classifier head per codebook.
pub fn init_brq_params(
    params: &mut ParamSet,
    enc_cfg: &EncoderConfig,
    cfg: &BrqConfig,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    params.add("brq.mask_embed", nn::randn(&[enc_cfg.raw_dim], 0.1, rng), true)?;
    for k in 0..cfg.num_codebooks {
        params.add(
            format!("brq.head{k}"),
            nn::randn(&[enc_cfg.feature_dim, cfg.codebook_size], 0.02, rng),
            true,
        )?;
    }
    Ok(())
}

/// Map a raw-frame mask to encoder-frame positions: an encoder frame is
/// masked if any raw frame it covers is masked.
pub fn encoder_mask(raw_mask: &[bool], temporal_reduction: usize) -> Vec<bool> {
    let t_enc = raw_mask.len() / temporal_reduction;
    (0..t_enc)
        .map(|t| raw_mask[t * temporal_reduction..(t + 1) * temporal_reduction].iter().any(|&b| b))
        .collect()
}

/// Classification loss of the codebook targets at masked positions: the mean
/// over masked encoder frames and codebooks of each head's cross-entropy.
/// Positions whose raw coverage extends past the last full quantizer group
/// are excluded.
pub fn brq_loss(
    tape: &mut Tape,
    bound: &Bound,
    enc_cfg: &EncoderConfig,
    cfg: &BrqConfig,
    stack: &LayerStack,
    quant_targets: &[Vec<usize>],
    raw_mask: &[bool],
) -> Result<TensorId> {
    if quant_targets.len() != cfg.num_codebooks {
        invalid_arg!(
            "expected {} target sequences, got {}",
            cfg.num_codebooks,
            quant_targets.len()
        );
    }
    let h = stack.last();
    let t_enc = tape.value(h).rows();
    let r = enc_cfg.temporal_reduction;
    let n_targets = quant_targets[0].len();

    let enc_mask = encoder_mask(raw_mask, r);
    let mut mask = vec![false; t_enc];
    let mut targets_per_cb = vec![vec![0usize; t_enc]; cfg.num_codebooks];
    let mut any = false;
    for t in 0..t_enc {
        let q = t * r / cfg.stack;
        if q >= n_targets {
            continue;
        }
        for (cb, tgt) in targets_per_cb.iter_mut().enumerate() {
            tgt[t] = quant_targets[cb][q];
        }
        if enc_mask.get(t).copied().unwrap_or(false) {
            mask[t] = true;
            any = true;
        }
    }
    if !any {
        invalid_arg!("no masked frames fall inside the quantized range");
    }

    let mut acc: Option<TensorId> = None;
    for cb in 0..cfg.num_codebooks {
        let logits = tape.matmul(h, bound.id(&format!("brq.head{cb}")))?;
        let ce = tape.softmax_cross_entropy(logits, &targets_per_cb[cb], &mask)?;
        acc = Some(match acc {
            None => ce,
            Some(a) => tape.add(a, ce)?,
        });
    }
    Ok(tape.scale(acc.expect("at least one codebook"), 1.0 / cfg.num_codebooks as f64))
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 500,
            batch_size: 4,
            adam: AdamConfig {
                peak_lr: 5e-4,
                warmup_steps: 50,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

pub const PRETRAIN_RNG_STREAM: u64 = 3;

/// Run the masked-prediction pretraining loop over a pool of raw audio
/// clips. `params` must already contain trainable `encoder.*` and `brq.*`
/// entries. Returns the per-step loss curve.
pub fn pretrain_encoder(
    params: &mut ParamSet,
    enc_cfg: &EncoderConfig,
    cfg: &BrqConfig,
    quantizer: &BrqQuantizer,
    audios: &[Tensor],
    pcfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    use rand::SeedableRng;
    if audios.is_empty() {
        invalid_arg!("pretraining needs at least one audio clip");
    }
    let usable: Vec<&Tensor> = audios.iter().filter(|a| a.rows() >= cfg.stack).collect();
    if usable.is_empty() {
        invalid_arg!("no audio clip has at least {} frames", cfg.stack);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(pcfg.seed);
    rng.set_stream(PRETRAIN_RNG_STREAM);

    // The quantizer is frozen, so targets per clip never change.
    let targets: Vec<Vec<Vec<usize>>> = usable
        .iter()
        .map(|a| quantizer.quantize_targets(a))
        .collect::<Result<_>>()?;

    let mut opt = OptimizerState::new(pcfg.adam.clone());
    let mut losses = Vec::with_capacity(pcfg.steps);
    for step in 0..pcfg.steps {
        let mut tape = Tape::new();
        let bound = nn::bind_params(&mut tape, params, true);
        let mask_embed = bound.id("brq.mask_embed");
        let mut total: Option<TensorId> = None;
        for _ in 0..pcfg.batch_size {
            let idx = rng.gen_range(0..usable.len());
            let audio = usable[idx];
            // Redraw until at least one masked frame lands in quantized range.
            let mut mask = make_mask(audio.rows(), &cfg.mask, &mut rng)?;
            let mut tries = 0;
            while !mask.iter().take(quantizer.num_targets(audio.rows()) * cfg.stack).any(|&b| b) {
                mask = make_mask(audio.rows(), &cfg.mask, &mut rng)?;
                tries += 1;
                if tries > 100 {
                    return Err(Error::InvalidState(
                        "mask sampling failed to cover any quantized frame".into(),
                    ));
                }
            }
            let stack = encoder::encode(&mut tape, &bound, enc_cfg, audio, Some((&mask, mask_embed)))?;
            let loss = brq_loss(&mut tape, &bound, enc_cfg, cfg, &stack, &targets[idx], &mask)?;
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss)?,
            });
        }
        let total = tape.scale(total.expect("non-empty batch"), 1.0 / pcfg.batch_size as f64);
        let loss_value = tape.value(total).item();
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "pretraining loss diverged at step {step}: {loss_value}"
            )));
        }
        tape.backward(total)?;
        let grads = nn::collect_grads(&tape, &bound, params);
        opt.adamw_step(params, &grads)?;
        losses.push(loss_value);
    }
    Ok(losses)
}
