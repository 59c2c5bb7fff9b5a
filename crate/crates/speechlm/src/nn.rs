//! Shared neural building blocks: parameter binding onto a tape, linear maps
//! with optional low-rank deltas, multi-head attention, and initializers.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid_arg, Result};
use crate::optim::{GradMap, ParamSet};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Map from parameter name to its leaf id on one tape.
#[derive(Debug, Default)]
pub struct Bound {
    ids: HashMap<String, TensorId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_id(&self, name: &str) -> Option<TensorId> {
        self.ids.get(name).copied()
    }
}

/// Insert every parameter as a tape leaf. With `with_grads`, trainable
/// parameters become tracked leaves; frozen parameters are always constants.
pub fn bind_params(tape: &mut Tape, params: &ParamSet, with_grads: bool) -> Bound {
    let mut ids = HashMap::with_capacity(params.len());
    for p in params.iter() {
        let id = tape.leaf(p.value.clone(), with_grads && p.trainable);
        ids.insert(p.name.clone(), id);
    }
    Bound { ids }
}

/// Pull accumulated leaf gradients back out of a tape, keyed by parameter
/// name. Trainable parameters that received no gradient get zeros.
pub fn collect_grads(tape: &Tape, bound: &Bound, params: &ParamSet) -> GradMap {
    let mut out = GradMap::new();
    for p in params.iter() {
        if !p.trainable {
            continue;
        }
        let id = bound.id(&p.name);
        let g = tape
            .grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        out.insert(p.name.clone(), g);
    }
    out
}

/// A weight matrix `[in, out]` with an optional low-rank delta
/// `(scale) * x A^T B^T` where `A` is `[r, in]` and `B` is `[out, r]`.
#[derive(Debug, Clone, Copy)]
pub struct LinearRef {
    pub w: TensorId,
    pub lora: Option<LoraRef>,
}

#[derive(Debug, Clone, Copy)]
pub struct LoraRef {
    pub a: TensorId,
    pub b: TensorId,
    pub scale: f64,
}

impl LinearRef {
    pub fn plain(w: TensorId) -> Self {
        LinearRef { w, lora: None }
    }
}

/// `x [S, in] -> [S, out]`, adding the low-rank path when present.
pub fn linear(tape: &mut Tape, x: TensorId, l: &LinearRef) -> Result<TensorId> {
    let base = tape.matmul(x, l.w)?;
    match l.lora {
        None => Ok(base),
        Some(LoraRef { a, b, scale }) => {
            let xa = tape.matmul_nt(x, a)?;
            let xab = tape.matmul_nt(xa, b)?;
            let delta = tape.scale(xab, scale);
            tape.add(base, delta)
        }
    }
}

/// Standard scaled dot-product multi-head attention. Queries come from
/// `q_in [S, d]`, keys and values from `kv_in [M, d]`; `causal` restricts
/// position `i` to keys `0..=i` and requires `S == M`.
pub fn multihead_attention(
    tape: &mut Tape,
    q_in: TensorId,
    kv_in: TensorId,
    wq: &LinearRef,
    wk: &LinearRef,
    wv: &LinearRef,
    wo: &LinearRef,
    n_heads: usize,
    causal: bool,
) -> Result<TensorId> {
    let q = linear(tape, q_in, wq)?;
    let k = linear(tape, kv_in, wk)?;
    let v = linear(tape, kv_in, wv)?;
    let d = tape.value(q).cols();
    if d % n_heads != 0 {
        invalid_arg!("model dim {d} not divisible by {n_heads} heads");
    }
    let dh = d / n_heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, inv_sqrt);
        let attn = tape.row_softmax(scaled, causal)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let ctx = tape.concat_cols(&heads)?;
    linear(tape, ctx, wo)
}

/// Plain (untracked) matrix product `a . b` or `a . b^T` for small matrices.
pub fn matmul_plain(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        invalid_arg!("matmul_plain expects 2-D operands");
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (bk, n) = if transpose_b {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    if k != bk {
        invalid_arg!(
            "matmul_plain inner mismatch: {:?} vs {:?} (transpose_b={transpose_b})",
            a.shape(),
            b.shape()
        );
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                let bv = if transpose_b {
                    b.data()[j * k + p]
                } else {
                    b.data()[p * n + j]
                };
                acc += a.data()[i * k + p] * bv;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::matrix(m, n, out)
}

/// Gaussian-initialized tensor.
pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha20Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Centered uniform tensor on `(-bound, bound)`.
pub fn rand_uniform(shape: &[usize], bound: f64, rng: &mut ChaCha20Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Classic sinusoidal position table `[n, d]`, scaled so every row has unit
/// norm; well-conditioned keys for relative alignment.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    let norm = (2.0 / d as f64).sqrt();
    for pos in 0..n {
        for i in 0..d / 2 {
            let rate = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + 2 * i] = angle.sin() * norm;
            data[pos * d + 2 * i + 1] = angle.cos() * norm;
        }
    }
    Tensor::matrix(n, d, data).expect("consistent shape")
}
