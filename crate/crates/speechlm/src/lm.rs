//! Small encoder-decoder text LM stand-in with low-rank adapters.
//!
//! The base weights (embeddings, positions, attention and feed-forward
//! matrices, output projection) are registered frozen; adaptation happens
//! through LoRA factors on the query and value projections of every
//! attention block, which start as an exact zero delta (`B = 0`).

use rand_chacha::ChaCha20Rng;

use crate::error::{invalid_arg, Result};
use crate::nn::{self, Bound, LinearRef, LoraRef};
use crate::optim::ParamSet;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LmConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub bos_id: usize,
    pub eos_id: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_model: 64,
            enc_layers: 2,
            dec_layers: 2,
            num_heads: 2,
            vocab_size: 0,
            max_positions: 160,
            bos_id: 1,
            eos_id: 2,
        }
    }
}

impl LmConfig {
    pub fn ff_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            invalid_arg!("lm dimensions must be positive");
        }
        if self.d_model % self.num_heads != 0 {
            invalid_arg!(
                "d_model {} not divisible by num_heads {}",
                self.d_model,
                self.num_heads
            );
        }
        if self.bos_id >= self.vocab_size || self.eos_id >= self.vocab_size {
            invalid_arg!("special ids out of vocab range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 16.0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// One low-rank adapter over a frozen base matrix: the effective delta is
/// `(alpha / r) * B . A` with `A [r, in]` and `B [out, r]`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub target: String,
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(target: impl Into<String>, a: Tensor, b: Tensor, rank: usize, alpha: f64) -> Result<Self> {
        if rank == 0 {
            invalid_arg!("lora rank must be >= 1");
        }
        if a.shape().len() != 2 || b.shape().len() != 2 {
            invalid_arg!("lora factors must be 2-D");
        }
        if a.shape()[0] != rank || b.shape()[1] != rank {
            invalid_arg!(
                "lora factor shapes {:?} / {:?} inconsistent with rank {rank}",
                a.shape(),
                b.shape()
            );
        }
        Ok(LoraAdapter {
            target: target.into(),
            a,
            b,
            rank,
            alpha,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Trainable parameters this adapter adds: `r * (in + out)`.
    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// Adapter-path forward: `x W + (alpha/r) * (x A^T) B^T` for row-major
/// `x [S, in]`, `W [in, out]`.
pub fn lora_forward(base_w: &Tensor, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    let base = nn::matmul_plain(x, base_w, false)?;
    let xa = nn::matmul_plain(x, &adapter.a, true)?;
    let xab = nn::matmul_plain(&xa, &adapter.b, true)?;
    let scale = adapter.scale();
    let mut out = base;
    for (o, d) in out.data_mut().iter_mut().zip(xab.data()) {
        *o += scale * d;
    }
    Ok(out)
}

/// Merge the low-rank delta into the base matrix:
/// `W' = W + (alpha/r) * A^T B^T` (row-major `[in, out]` convention).
pub fn lora_merged_weight(base_w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let (in_dim, out_dim) = (base_w.shape()[0], base_w.shape()[1]);
    if adapter.a.shape()[1] != in_dim || adapter.b.shape()[0] != out_dim {
        invalid_arg!(
            "adapter {:?}/{:?} does not fit base {:?}",
            adapter.a.shape(),
            adapter.b.shape(),
            base_w.shape()
        );
    }
    let scale = adapter.scale();
    let mut merged = base_w.clone();
    for i in 0..in_dim {
        for o in 0..out_dim {
            let mut acc = 0.0;
            for r in 0..adapter.rank {
                acc += adapter.a.data()[r * in_dim + i] * adapter.b.data()[o * adapter.rank + r];
            }
            merged.data_mut()[i * out_dim + o] += scale * acc;
        }
    }
    Ok(merged)
}

/// Base parameter names that receive adapters: query and value projections of
/// every attention block in both stacks.
pub fn lora_target_names(cfg: &LmConfig) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..cfg.enc_layers {
        out.push(format!("lm.enc.layer{l}.attn.wq"));
        out.push(format!("lm.enc.layer{l}.attn.wv"));
    }
    for l in 0..cfg.dec_layers {
        out.push(format!("lm.dec.layer{l}.self_attn.wq"));
        out.push(format!("lm.dec.layer{l}.self_attn.wv"));
        out.push(format!("lm.dec.layer{l}.cross_attn.wq"));
        out.push(format!("lm.dec.layer{l}.cross_attn.wv"));
    }
    out
}

fn add_attn_params(
    params: &mut ParamSet,
    prefix: &str,
    d: usize,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    let std = 1.0 / (d as f64).sqrt();
    for w in ["wq", "wk", "wv", "wo"] {
        params.add(format!("{prefix}.{w}"), nn::randn(&[d, d], std, rng), false)?;
    }
    Ok(())
}

fn add_ln_params(params: &mut ParamSet, prefix: &str, d: usize) -> Result<()> {
    params.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0), false)?;
    params.add(format!("{prefix}.bias"), Tensor::zeros(&[d]), false)?;
    Ok(())
}

/// Register the frozen LM base under `lm.*`. Position tables are initialized
/// sinusoidally; everything else is Gaussian with `1/sqrt(fan_in)` scale.
pub fn init_lm_params(params: &mut ParamSet, cfg: &LmConfig, rng: &mut ChaCha20Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let std_d = 1.0 / (d as f64).sqrt();
    let std_ff = 1.0 / (cfg.ff_dim() as f64).sqrt();

    params.add("lm.embed", nn::randn(&[cfg.vocab_size, d], std_d, rng), false)?;
    params.add("lm.enc_pos", nn::sinusoidal_positions(cfg.max_positions, d), false)?;
    params.add("lm.dec_pos", nn::sinusoidal_positions(cfg.max_positions, d), false)?;

    for l in 0..cfg.enc_layers {
        let p = format!("lm.enc.layer{l}");
        add_ln_params(params, &format!("{p}.ln1"), d)?;
        add_attn_params(params, &format!("{p}.attn"), d, rng)?;
        add_ln_params(params, &format!("{p}.ln2"), d)?;
        params.add(format!("{p}.ff.w1"), nn::randn(&[d, cfg.ff_dim()], std_d, rng), false)?;
        params.add(format!("{p}.ff.w2"), nn::randn(&[cfg.ff_dim(), d], std_ff, rng), false)?;
    }
    add_ln_params(params, "lm.enc.final_ln", d)?;

    for l in 0..cfg.dec_layers {
        let p = format!("lm.dec.layer{l}");
        add_ln_params(params, &format!("{p}.ln1"), d)?;
        add_attn_params(params, &format!("{p}.self_attn"), d, rng)?;
        add_ln_params(params, &format!("{p}.ln2"), d)?;
        add_attn_params(params, &format!("{p}.cross_attn"), d, rng)?;
        add_ln_params(params, &format!("{p}.ln3"), d)?;
        params.add(format!("{p}.ff.w1"), nn::randn(&[d, cfg.ff_dim()], std_d, rng), false)?;
        params.add(format!("{p}.ff.w2"), nn::randn(&[cfg.ff_dim(), d], std_ff, rng), false)?;
    }
    add_ln_params(params, "lm.dec.final_ln", d)?;
    // Half-scale readout keeps the untrained predictive distribution close
    // to uniform (mean loss near ln V).
    params.add(
        "lm.out_proj",
        nn::randn(&[d, cfg.vocab_size], 0.5 * std_d, rng),
        false,
    )?;
    Ok(())
}

/// Register `lora.<target>.a` / `.b` for every target: `A` Gaussian with
/// std 0.02, `B` zero so the initial delta vanishes.
pub fn attach_lora_params(
    params: &mut ParamSet,
    cfg: &LmConfig,
    lora: &LoraConfig,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    if lora.rank == 0 {
        invalid_arg!("lora rank must be >= 1");
    }
    let d = cfg.d_model;
    for target in lora_target_names(cfg) {
        params.add(format!("lora.{target}.a"), nn::randn(&[lora.rank, d], 0.02, rng), true)?;
        params.add(format!("lora.{target}.b"), Tensor::zeros(&[d, lora.rank]), true)?;
    }
    Ok(())
}

/// Resolve a weight name to its tape leaf, picking up the adapter factors
/// when they are bound.
fn linear_ref(bound: &Bound, name: &str, lora_scale: f64) -> LinearRef {
    let w = bound.id(name);
    let lora = match (
        bound.try_id(&format!("lora.{name}.a")),
        bound.try_id(&format!("lora.{name}.b")),
    ) {
        (Some(a), Some(b)) => Some(LoraRef {
            a,
            b,
            scale: lora_scale,
        }),
        _ => None,
    };
    LinearRef { w, lora }
}

const LN_EPS: f64 = 1e-5;

fn ln(tape: &mut Tape, bound: &Bound, prefix: &str, x: TensorId) -> Result<TensorId> {
    tape.layer_norm(
        x,
        bound.id(&format!("{prefix}.gain")),
        bound.id(&format!("{prefix}.bias")),
        LN_EPS,
    )
}

fn ff(tape: &mut Tape, bound: &Bound, prefix: &str, x: TensorId) -> Result<TensorId> {
    let h = tape.matmul(x, bound.id(&format!("{prefix}.w1")))?;
    let h = tape.gelu(h);
    tape.matmul(h, bound.id(&format!("{prefix}.w2")))
}

fn attn_refs(bound: &Bound, prefix: &str, lora_scale: f64) -> [LinearRef; 4] {
    [
        linear_ref(bound, &format!("{prefix}.wq"), lora_scale),
        linear_ref(bound, &format!("{prefix}.wk"), lora_scale),
        linear_ref(bound, &format!("{prefix}.wv"), lora_scale),
        linear_ref(bound, &format!("{prefix}.wo"), lora_scale),
    ]
}

/// Token embedding lookup, `[P, d]` (empty sequences give `[0, d]`).
pub fn embed_tokens(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &LmConfig,
    tokens: &[usize],
) -> Result<TensorId> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        invalid_arg!("token id {bad} out of range (V = {})", cfg.vocab_size);
    }
    tape.embed(bound.id("lm.embed"), tokens)
}

/// Run the LM encoder over an already-fused `[S, d]` sequence, adding
/// absolute positions first. Returns the memory for cross-attention.
pub fn lm_encode(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &LmConfig,
    lora_scale: f64,
    fused: TensorId,
) -> Result<TensorId> {
    let s = tape.value(fused).rows();
    if s > cfg.max_positions {
        invalid_arg!("fused length {s} exceeds max positions {}", cfg.max_positions);
    }
    if s == 0 {
        invalid_arg!("cannot encode an empty fused sequence");
    }
    let ids: Vec<usize> = (0..s).collect();
    let pos = tape.embed(bound.id("lm.enc_pos"), &ids)?;
    let mut x = tape.add(fused, pos)?;
    for l in 0..cfg.enc_layers {
        let p = format!("lm.enc.layer{l}");
        let normed = ln(tape, bound, &format!("{p}.ln1"), x)?;
        let [wq, wk, wv, wo] = attn_refs(bound, &format!("{p}.attn"), lora_scale);
        let attn = nn::multihead_attention(
            tape, normed, normed, &wq, &wk, &wv, &wo, cfg.num_heads, false,
        )?;
        x = tape.add(x, attn)?;
        let normed = ln(tape, bound, &format!("{p}.ln2"), x)?;
        let f = ff(tape, bound, &format!("{p}.ff"), normed)?;
        x = tape.add(x, f)?;
    }
    ln(tape, bound, "lm.enc.final_ln", x)
}

/// Teacher-forced decoder pass: embeds `dec_tokens`, runs causal self
/// attention and cross attention over `memory`, and returns logits
/// `[len, V]`.
pub fn lm_decode_logits(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &LmConfig,
    lora_scale: f64,
    memory: TensorId,
    dec_tokens: &[usize],
) -> Result<TensorId> {
    let n = dec_tokens.len();
    if n == 0 {
        invalid_arg!("decoder needs at least one input token");
    }
    if n > cfg.max_positions {
        invalid_arg!("decoder length {n} exceeds max positions {}", cfg.max_positions);
    }
    let emb = embed_tokens(tape, bound, cfg, dec_tokens)?;
    let ids: Vec<usize> = (0..n).collect();
    let pos = tape.embed(bound.id("lm.dec_pos"), &ids)?;
    let mut x = tape.add(emb, pos)?;
    for l in 0..cfg.dec_layers {
        let p = format!("lm.dec.layer{l}");
        let normed = ln(tape, bound, &format!("{p}.ln1"), x)?;
        let [wq, wk, wv, wo] = attn_refs(bound, &format!("{p}.self_attn"), lora_scale);
        let attn = nn::multihead_attention(
            tape, normed, normed, &wq, &wk, &wv, &wo, cfg.num_heads, true,
        )?;
        x = tape.add(x, attn)?;
        let normed = ln(tape, bound, &format!("{p}.ln2"), x)?;
        let [wq, wk, wv, wo] = attn_refs(bound, &format!("{p}.cross_attn"), lora_scale);
        let cross = nn::multihead_attention(
            tape, normed, memory, &wq, &wk, &wv, &wo, cfg.num_heads, false,
        )?;
        x = tape.add(x, cross)?;
        let normed = ln(tape, bound, &format!("{p}.ln3"), x)?;
        let f = ff(tape, bound, &format!("{p}.ff"), normed)?;
        x = tape.add(x, f)?;
    }
    let x = ln(tape, bound, "lm.dec.final_ln", x)?;
    tape.matmul(x, bound.id("lm.out_proj"))
}
