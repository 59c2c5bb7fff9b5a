//! Eager reverse-mode autodiff over a closed operation set.
//!
//! A `Tape` owns every tensor produced during one forward pass. Operations
//! execute immediately and record just enough structure for `backward` to
//! propagate gradients in reverse insertion order (which is a valid reverse
//! topological order, because an operation can only consume ids that already
//! exist). The op set is exactly what the models here need: matmul, 1-D
//! convolution, layer norm, softmax attention pieces, embedding lookup,
//! elementwise arithmetic, and sequence concatenation/slicing. There is no
//! general broadcasting and no graph mutation.
//!
//! Gradients flow only into nodes with `requires_grad`; frozen parameters are
//! inserted as constants so entire frozen subgraphs are skipped during the
//! backward sweep.

use crate::error::{invalid_arg, Error, Result};
use crate::tensor::{add_assign, add_scaled, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    /// Elementwise product; either side may be a one-element tensor, which
    /// broadcasts against the other.
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Gelu(TensorId),
    Matmul {
        a: TensorId,
        b: TensorId,
        transpose_b: bool,
    },
    Conv1d {
        input: TensorId,
        kernels: TensorId,
        stride: usize,
    },
    LayerNorm {
        input: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    },
    RowSoftmax {
        input: TensorId,
        causal: bool,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    Embed {
        table: TensorId,
        ids: Vec<usize>,
    },
    /// Replace selected rows of `input` with a single learned row vector.
    MaskRows {
        input: TensorId,
        replacement: TensorId,
        mask: Vec<bool>,
    },
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    SliceRows {
        input: TensorId,
        start: usize,
        len: usize,
    },
    SliceCols {
        input: TensorId,
        start: usize,
        len: usize,
    },
    Reshape(TensorId),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// `C[m,n] (+)= op(A) . op(B)` on row-major storage. When a transpose flag is
/// set the corresponding argument is stored with its logical dimensions
/// swapped and read through strides instead of being copied.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv1d_out_len(t: usize, stride: usize) -> usize {
    (t + stride - 1) / stride
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> TensorId {
        debug_assert!(value.all_finite(), "tape op produced non-finite values");
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            invalid_arg!("add shape mismatch: {:?} vs {:?}", va.shape(), vb.shape());
        }
        let mut data = va.data().to_vec();
        add_assign(&mut data, vb.data());
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if va.is_scalar() {
            let s = va.item();
            Tensor::new(vb.shape().to_vec(), vb.data().iter().map(|y| s * y).collect())?
        } else if vb.is_scalar() {
            let s = vb.item();
            Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| s * x).collect())?
        } else {
            invalid_arg!("mul shape mismatch: {:?} vs {:?}", va.shape(), vb.shape());
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| c * a).collect())
            .expect("same shape");
        let rg = self.requires_grad(x);
        self.push(Op::Scale(x, c), value, rg)
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&z| 0.5 * z * (1.0 + (GELU_C0 * (z + GELU_C1 * z * z * z)).tanh()))
            .collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(Op::Gelu(x), value, rg)
    }

    /// `a [m,k] . b [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m,k] . b^T` where `b` is stored `[n,k]` -> `[m,n]`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: TensorId, b: TensorId, transpose_b: bool) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 {
            invalid_arg!(
                "matmul expects 2-D operands, got {:?} and {:?}",
                va.shape(),
                vb.shape()
            );
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (bk, n) = if transpose_b {
            (vb.shape()[1], vb.shape()[0])
        } else {
            (vb.shape()[0], vb.shape()[1])
        };
        if k != bk {
            invalid_arg!(
                "matmul inner dimension mismatch: {:?} vs {:?} (transpose_b={})",
                va.shape(),
                vb.shape(),
                transpose_b
            );
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), transpose_b, 0.0, &mut out);
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Matmul { a, b, transpose_b }, value, rg))
    }

    /// Same-padded 1-D convolution over a `[T, c_in]` sequence with kernels
    /// `[K, c_in, c_out]` and odd `K`; output length is `ceil(T / stride)`.
    pub fn conv1d(&mut self, input: TensorId, kernels: TensorId, stride: usize) -> Result<TensorId> {
        let (vi, vk) = (self.value(input), self.value(kernels));
        if vi.shape().len() != 2 || vk.shape().len() != 3 {
            invalid_arg!(
                "conv1d expects input [T,c_in] and kernels [K,c_in,c_out], got {:?} and {:?}",
                vi.shape(),
                vk.shape()
            );
        }
        let (t, c_in) = (vi.shape()[0], vi.shape()[1]);
        let (kw, kc_in, c_out) = (vk.shape()[0], vk.shape()[1], vk.shape()[2]);
        if kw % 2 == 0 {
            invalid_arg!("conv1d kernel size must be odd, got {kw}");
        }
        if stride == 0 {
            invalid_arg!("conv1d stride must be >= 1");
        }
        if t == 0 {
            invalid_arg!("conv1d input must have at least one frame");
        }
        if c_in != kc_in {
            invalid_arg!("conv1d channel mismatch: input has {c_in}, kernels expect {kc_in}");
        }
        let pad = (kw - 1) / 2;
        let t_out = conv1d_out_len(t, stride);
        let mut out = vec![0.0; t_out * c_out];
        let x = vi.data();
        let w = vk.data();
        for to in 0..t_out {
            let dst = &mut out[to * c_out..(to + 1) * c_out];
            for k in 0..kw {
                let src = (to * stride + k) as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let row = &x[src as usize * c_in..(src as usize + 1) * c_in];
                for (ci, &xv) in row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &w[(k * c_in + ci) * c_out..(k * c_in + ci + 1) * c_out];
                    add_scaled(dst, wrow, xv);
                }
            }
        }
        let value = Tensor::matrix(t_out, c_out, out)?;
        let rg = self.requires_grad(input) || self.requires_grad(kernels);
        Ok(self.push(
            Op::Conv1d {
                input,
                kernels,
                stride,
            },
            value,
            rg,
        ))
    }

    /// Per-row normalization of `[T, C]` to zero mean and unit variance,
    /// followed by the elementwise affine `gain * xhat + bias`.
    pub fn layer_norm(
        &mut self,
        input: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (vi, vg, vb) = (self.value(input), self.value(gain), self.value(bias));
        if vi.shape().len() != 2 {
            invalid_arg!("layer_norm expects a 2-D input, got {:?}", vi.shape());
        }
        let (t, c) = (vi.shape()[0], vi.shape()[1]);
        if c == 0 {
            invalid_arg!("layer_norm needs at least one channel");
        }
        if vg.numel() != c || vb.numel() != c {
            invalid_arg!(
                "layer_norm gain/bias must have {c} elements, got {} and {}",
                vg.numel(),
                vb.numel()
            );
        }
        let mut out = vec![0.0; t * c];
        let x = vi.data();
        let g = vg.data();
        let b = vb.data();
        for row in 0..t {
            let xr = &x[row * c..(row + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let dst = &mut out[row * c..(row + 1) * c];
            for i in 0..c {
                dst[i] = g[i] * (xr[i] - mean) * inv + b[i];
            }
        }
        let value = Tensor::matrix(t, c, out)?;
        let rg = self.requires_grad(input) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(
            Op::LayerNorm {
                input,
                gain,
                bias,
                eps,
            },
            value,
            rg,
        ))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked out for
    /// `j > i` (the input must then be square).
    pub fn row_softmax(&mut self, input: TensorId, causal: bool) -> Result<TensorId> {
        let vi = self.value(input);
        if vi.shape().len() != 2 {
            invalid_arg!("row_softmax expects a 2-D input, got {:?}", vi.shape());
        }
        let (r, c) = (vi.shape()[0], vi.shape()[1]);
        if causal && r != c {
            invalid_arg!("causal softmax needs a square matrix, got {:?}", vi.shape());
        }
        let mut out = vec![0.0; r * c];
        let x = vi.data();
        for i in 0..r {
            let limit = if causal { i + 1 } else { c };
            let xr = &x[i * c..i * c + limit];
            let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in xr.iter().enumerate() {
                let e = (v - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..limit {
                out[i * c + j] /= sum;
            }
        }
        let value = Tensor::matrix(r, c, out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(Op::RowSoftmax { input, causal }, value, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, averaged over positions where `mask` is true.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        let vl = self.value(logits);
        if vl.shape().len() != 2 {
            invalid_arg!("cross entropy expects 2-D logits, got {:?}", vl.shape());
        }
        let (n, v) = (vl.shape()[0], vl.shape()[1]);
        if targets.len() != n || mask.len() != n {
            invalid_arg!(
                "cross entropy expects {n} targets and mask entries, got {} and {}",
                targets.len(),
                mask.len()
            );
        }
        let m = mask.iter().filter(|&&b| b).count();
        if m == 0 {
            invalid_arg!("cross entropy mask selects no positions");
        }
        let x = vl.data();
        let mut loss = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                invalid_arg!("cross entropy target {} out of range (V={v})", targets[i]);
            }
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
        }
        let value = Tensor::scalar(loss / m as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Row lookup: `table [V, d]`, `ids` of length `P` -> `[P, d]`.
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            invalid_arg!("embed expects a 2-D table, got {:?}", vt.shape());
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                invalid_arg!("embed id {id} out of range (V={v})");
            }
            out.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        let rg = self.requires_grad(table);
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Replace rows of `input [T, C]` where `mask` is true with the single
    /// row vector `replacement [C]`.
    pub fn mask_rows(
        &mut self,
        input: TensorId,
        replacement: TensorId,
        mask: &[bool],
    ) -> Result<TensorId> {
        let (vi, vr) = (self.value(input), self.value(replacement));
        if vi.shape().len() != 2 {
            invalid_arg!("mask_rows expects a 2-D input, got {:?}", vi.shape());
        }
        let (t, c) = (vi.shape()[0], vi.shape()[1]);
        if mask.len() != t {
            invalid_arg!("mask_rows mask length {} != {t}", mask.len());
        }
        if vr.numel() != c {
            invalid_arg!("mask_rows replacement must have {c} elements, got {}", vr.numel());
        }
        let mut out = vi.data().to_vec();
        for (row, &m) in mask.iter().enumerate() {
            if m {
                out[row * c..(row + 1) * c].copy_from_slice(vr.data());
            }
        }
        let value = Tensor::matrix(t, c, out)?;
        let rg = self.requires_grad(input) || self.requires_grad(replacement);
        Ok(self.push(
            Op::MaskRows {
                input,
                replacement,
                mask: mask.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Stack 2-D blocks with equal column counts on top of each other.
    /// Zero-row blocks are allowed and contribute nothing.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            invalid_arg!("concat_rows needs at least one part");
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 {
                invalid_arg!("concat_rows expects 2-D parts, got {:?}", v.shape());
            }
            if v.cols() != cols {
                invalid_arg!("concat_rows column mismatch: {} vs {}", v.cols(), cols);
            }
            rows += v.rows();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, cols, out)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, rg))
    }

    /// Concatenate 2-D blocks with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            invalid_arg!("concat_cols needs at least one part");
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != rows {
                invalid_arg!("concat_cols row mismatch: {:?}", v.shape());
            }
            cols += v.cols();
        }
        let mut out = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let pc = v.cols();
            for r in 0..rows {
                out[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&v.data()[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        let value = Tensor::matrix(rows, cols, out)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, rg))
    }

    pub fn slice_rows(&mut self, input: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let vi = self.value(input);
        if vi.shape().len() != 2 || start + len > vi.rows() {
            invalid_arg!(
                "slice_rows [{start}, {}) out of bounds for {:?}",
                start + len,
                vi.shape()
            );
        }
        let c = vi.cols();
        let out = vi.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::matrix(len, c, out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(Op::SliceRows { input, start, len }, value, rg))
    }

    pub fn slice_cols(&mut self, input: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let vi = self.value(input);
        if vi.shape().len() != 2 || start + len > vi.cols() {
            invalid_arg!(
                "slice_cols [{start}, {}) out of bounds for {:?}",
                start + len,
                vi.shape()
            );
        }
        let (r, c) = (vi.rows(), vi.cols());
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&vi.data()[row * c + start..row * c + start + len]);
        }
        let value = Tensor::matrix(r, len, out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(Op::SliceCols { input, start, len }, value, rg))
    }

    pub fn reshape(&mut self, input: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let value = self.value(input).reshaped(shape)?;
        let rg = self.requires_grad(input);
        Ok(self.push(Op::Reshape(input), value, rg))
    }

    /// Reverse sweep from a scalar loss. Gradients are accumulated for every
    /// node on a path between the loss and a `requires_grad` leaf; everything
    /// else is skipped.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            invalid_arg!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            );
        }
        if !self.requires_grad(loss) {
            return Err(Error::InvalidState(
                "loss does not depend on any tracked input".into(),
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(i, &g)?;
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut [f64] {
        if self.grads[id.0].is_none() {
            self.grads[id.0] = Some(Tensor::zeros(self.nodes[id.0].value.shape()));
        }
        self.grads[id.0].as_mut().unwrap().data_mut()
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        // Reading values immutably while writing grads is fine because the
        // two live in separate vectors; we clone small operands when both are
        // needed at once.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires_grad(a) {
                    add_assign(self.grad_buf(a), g.data());
                }
                if self.requires_grad(b) {
                    add_assign(self.grad_buf(b), g.data());
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let va = self.value(a).clone();
                let vb = self.value(b).clone();
                if va.shape() == vb.shape() {
                    if self.requires_grad(a) {
                        let buf = self.grad_buf(a);
                        for ((d, &gv), &bv) in buf.iter_mut().zip(g.data()).zip(vb.data()) {
                            *d += gv * bv;
                        }
                    }
                    if self.requires_grad(b) {
                        let buf = self.grad_buf(b);
                        for ((d, &gv), &av) in buf.iter_mut().zip(g.data()).zip(va.data()) {
                            *d += gv * av;
                        }
                    }
                } else {
                    let (scalar_id, dense_id, scalar_v, dense_v) = if va.is_scalar() {
                        (a, b, va, vb)
                    } else {
                        (b, a, vb, va)
                    };
                    if self.requires_grad(scalar_id) {
                        let dot: f64 = g.data().iter().zip(dense_v.data()).map(|(x, y)| x * y).sum();
                        self.grad_buf(scalar_id)[0] += dot;
                    }
                    if self.requires_grad(dense_id) {
                        add_scaled(self.grad_buf(dense_id), g.data(), scalar_v.item());
                    }
                }
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                if self.requires_grad(x) {
                    add_scaled(self.grad_buf(x), g.data(), c);
                }
            }
            Op::Gelu(x) => {
                let x = *x;
                if self.requires_grad(x) {
                    let vx = self.value(x).clone();
                    let buf = self.grad_buf(x);
                    for ((d, &gv), &z) in buf.iter_mut().zip(g.data()).zip(vx.data()) {
                        let u = GELU_C0 * (z + GELU_C1 * z * z * z);
                        let t = u.tanh();
                        let du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * z * z);
                        *d += gv * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du);
                    }
                }
            }
            Op::Matmul { a, b, transpose_b } => {
                let (a, b, tb) = (*a, *b, *transpose_b);
                let va = self.value(a).clone();
                let vb = self.value(b).clone();
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = if tb { vb.shape()[0] } else { vb.shape()[1] };
                if self.requires_grad(a) {
                    // dA = G . B^T (plain) or G . B (when B was transposed).
                    let buf = self.grad_buf(a);
                    gemm(m, n, k, g.data(), false, vb.data(), !tb, 1.0, buf);
                }
                if self.requires_grad(b) {
                    let buf = self.grad_buf(b);
                    if tb {
                        // C = A . B^T  =>  dB = G^T . A, shape [n, k].
                        gemm(n, m, k, g.data(), true, va.data(), false, 1.0, buf);
                    } else {
                        // dB = A^T . G, shape [k, n].
                        gemm(k, m, n, va.data(), true, g.data(), false, 1.0, buf);
                    }
                }
            }
            Op::Conv1d {
                input,
                kernels,
                stride,
            } => {
                let (input, kernels, stride) = (*input, *kernels, *stride);
                let vi = self.value(input).clone();
                let vk = self.value(kernels).clone();
                let (t, c_in) = (vi.shape()[0], vi.shape()[1]);
                let (kw, _, c_out) = (vk.shape()[0], vk.shape()[1], vk.shape()[2]);
                let pad = (kw - 1) / 2;
                let t_out = conv1d_out_len(t, stride);
                if self.requires_grad(input) {
                    let buf = self.grad_buf(input);
                    for to in 0..t_out {
                        let grow = &g.data()[to * c_out..(to + 1) * c_out];
                        for k in 0..kw {
                            let src = (to * stride + k) as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let dst = &mut buf[src as usize * c_in..(src as usize + 1) * c_in];
                            for ci in 0..c_in {
                                let wrow =
                                    &vk.data()[(k * c_in + ci) * c_out..(k * c_in + ci + 1) * c_out];
                                dst[ci] += grow.iter().zip(wrow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                }
                if self.requires_grad(kernels) {
                    let buf = self.grad_buf(kernels);
                    for to in 0..t_out {
                        let grow = &g.data()[to * c_out..(to + 1) * c_out];
                        for k in 0..kw {
                            let src = (to * stride + k) as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let xrow = &vi.data()[src as usize * c_in..(src as usize + 1) * c_in];
                            for (ci, &xv) in xrow.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let dst =
                                    &mut buf[(k * c_in + ci) * c_out..(k * c_in + ci + 1) * c_out];
                                add_scaled(dst, grow, xv);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                eps,
            } => {
                let (input, gain, bias, eps) = (*input, *gain, *bias, *eps);
                let vi = self.value(input).clone();
                let vg = self.value(gain).clone();
                let (t, c) = (vi.shape()[0], vi.shape()[1]);
                let cf = c as f64;
                // Recompute per-row statistics; cheaper than caching them on the node.
                for row in 0..t {
                    let xr = &vi.data()[row * c..(row + 1) * c];
                    let gr = &g.data()[row * c..(row + 1) * c];
                    let mean = xr.iter().sum::<f64>() / cf;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let inv = 1.0 / (var + eps).sqrt();
                    if self.requires_grad(input) {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xc = 0.0;
                        for i in 0..c {
                            let dxhat = gr[i] * vg.data()[i];
                            sum_dxhat += dxhat;
                            sum_dxhat_xc += dxhat * (xr[i] - mean);
                        }
                        let dvar = -0.5 * inv * inv * inv * sum_dxhat_xc;
                        let dmean = -inv * sum_dxhat;
                        let buf = self.grad_buf(input);
                        let dst = &mut buf[row * c..(row + 1) * c];
                        for i in 0..c {
                            let dxhat = gr[i] * vg.data()[i];
                            dst[i] +=
                                dxhat * inv + dvar * 2.0 * (xr[i] - mean) / cf + dmean / cf;
                        }
                    }
                    if self.requires_grad(gain) {
                        let buf = self.grad_buf(gain);
                        for i in 0..c {
                            buf[i] += gr[i] * (xr[i] - mean) * inv;
                        }
                    }
                    if self.requires_grad(bias) {
                        let buf = self.grad_buf(bias);
                        add_assign(buf, gr);
                    }
                }
            }
            Op::RowSoftmax { input, causal } => {
                let (input, causal) = (*input, *causal);
                if self.requires_grad(input) {
                    let y = self.nodes[i].value.clone();
                    let (r, c) = (y.shape()[0], y.shape()[1]);
                    let buf = self.grad_buf(input);
                    for row in 0..r {
                        let limit = if causal { row + 1 } else { c };
                        let yr = &y.data()[row * c..row * c + limit];
                        let gr = &g.data()[row * c..row * c + limit];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let dst = &mut buf[row * c..row * c + limit];
                        for j in 0..limit {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                let logits = *logits;
                if self.requires_grad(logits) {
                    let targets = targets.clone();
                    let mask = mask.clone();
                    let vl = self.value(logits).clone();
                    let (n, v) = (vl.shape()[0], vl.shape()[1]);
                    let m = mask.iter().filter(|&&b| b).count() as f64;
                    let scale = g.item() / m;
                    let buf = self.grad_buf(logits);
                    for row in 0..n {
                        if !mask[row] {
                            continue;
                        }
                        let xr = &vl.data()[row * v..(row + 1) * v];
                        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = xr.iter().map(|&z| (z - max).exp()).sum();
                        let dst = &mut buf[row * v..(row + 1) * v];
                        for j in 0..v {
                            dst[j] += scale * (xr[j] - max).exp() / sum;
                        }
                        dst[targets[row]] -= scale;
                    }
                }
            }
            Op::Embed { table, ids } => {
                let table = *table;
                if self.requires_grad(table) {
                    let ids = ids.clone();
                    let d = self.value(table).shape()[1];
                    let buf = self.grad_buf(table);
                    for (row, &id) in ids.iter().enumerate() {
                        let grow = &g.data()[row * d..(row + 1) * d];
                        add_assign(&mut buf[id * d..(id + 1) * d], grow);
                    }
                }
            }
            Op::MaskRows {
                input,
                replacement,
                mask,
            } => {
                let (input, replacement) = (*input, *replacement);
                let mask = mask.clone();
                let c = self.value(input).shape()[1];
                if self.requires_grad(input) {
                    let buf = self.grad_buf(input);
                    for (row, &m) in mask.iter().enumerate() {
                        if !m {
                            add_assign(
                                &mut buf[row * c..(row + 1) * c],
                                &g.data()[row * c..(row + 1) * c],
                            );
                        }
                    }
                }
                if self.requires_grad(replacement) {
                    let buf = self.grad_buf(replacement);
                    for (row, &m) in mask.iter().enumerate() {
                        if m {
                            add_assign(buf, &g.data()[row * c..(row + 1) * c]);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let c = self.nodes[i].value.cols();
                let mut row = 0;
                for p in parts {
                    let rows = self.value(p).rows();
                    if self.requires_grad(p) {
                        let seg = g.data()[row * c..(row + rows) * c].to_vec();
                        add_assign(self.grad_buf(p), &seg);
                    }
                    row += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let total_cols = self.nodes[i].value.cols();
                let rows = self.nodes[i].value.rows();
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut seg = vec![0.0; rows * pc];
                        for r in 0..rows {
                            seg[r * pc..(r + 1) * pc].copy_from_slice(
                                &g.data()[r * total_cols + offset..r * total_cols + offset + pc],
                            );
                        }
                        add_assign(self.grad_buf(p), &seg);
                    }
                    offset += pc;
                }
            }
            Op::SliceRows { input, start, len } => {
                let (input, start, len) = (*input, *start, *len);
                if self.requires_grad(input) {
                    let c = self.value(input).cols();
                    let buf = self.grad_buf(input);
                    add_assign(&mut buf[start * c..(start + len) * c], g.data());
                }
            }
            Op::SliceCols { input, start, len } => {
                let (input, start, len) = (*input, *start, *len);
                if self.requires_grad(input) {
                    let (r, c) = {
                        let v = self.value(input);
                        (v.rows(), v.cols())
                    };
                    let buf = self.grad_buf(input);
                    for row in 0..r {
                        add_assign(
                            &mut buf[row * c + start..row * c + start + len],
                            &g.data()[row * len..(row + 1) * len],
                        );
                    }
                }
            }
            Op::Reshape(input) => {
                let input = *input;
                if self.requires_grad(input) {
                    add_assign(self.grad_buf(input), g.data());
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Central finite differences of a scalar-valued tape program with
    /// respect to one leaf, compared against reverse-mode gradients.
    fn check_grads<F>(build: F, leaf_shapes: &[Vec<usize>], seed: u64, tol: f64)
    where
        F: Fn(&mut Tape, &[TensorId]) -> TensorId,
    {
        let mut r = rng(seed);
        let leaf_values: Vec<Tensor> = leaf_shapes.iter().map(|s| rand_tensor(s, &mut r)).collect();

        let run = |values: &[Tensor]| -> (f64, Vec<Option<Tensor>>) {
            let mut tape = Tape::new();
            let ids: Vec<TensorId> = values
                .iter()
                .map(|v| tape.leaf(v.clone(), true))
                .collect();
            let loss = build(&mut tape, &ids);
            tape.backward(loss).unwrap();
            let grads = ids.iter().map(|&id| tape.grad(id).cloned()).collect();
            (tape.value(loss).item(), grads)
        };

        let (_, analytic) = run(&leaf_values);
        let eps = 1e-6;
        for (li, shape) in leaf_shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            for e in 0..n {
                let mut plus = leaf_values.clone();
                plus[li].data_mut()[e] += eps;
                let mut minus = leaf_values.clone();
                minus[li].data_mut()[e] -= eps;
                let (lp, _) = run(&plus);
                let (lm, _) = run(&minus);
                let numeric = (lp - lm) / (2.0 * eps);
                let a = analytic[li]
                    .as_ref()
                    .map(|t| t.data()[e])
                    .unwrap_or(0.0);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < tol,
                    "leaf {li} elem {e}: analytic {a} vs numeric {numeric} (rel {rel:.3e})"
                );
            }
        }
    }

    /// Sum all elements of a tensor on the tape (via matmul against ones).
    fn sum_all(tape: &mut Tape, x: TensorId) -> TensorId {
        let v = tape.value(x);
        let (r, c) = (v.rows(), v.cols());
        let x2 = if v.shape().len() == 2 {
            x
        } else {
            tape.reshape(x, vec![r, c]).unwrap()
        };
        let ones_r = tape.constant(Tensor::matrix(1, r, vec![1.0; r]).unwrap());
        let ones_c = tape.constant(Tensor::matrix(c, 1, vec![1.0; c]).unwrap());
        let rowsum = tape.matmul(ones_r, x2).unwrap();
        let t = tape.matmul(rowsum, ones_c).unwrap();
        tape.reshape(t, vec![1]).unwrap()
    }

    #[test]
    fn matmul_forward_matches_hand_result() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let d = tape.matmul_nt(a, b).unwrap();
        // a . b^T
        assert_eq!(tape.value(d).data(), &[17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv1d_matches_sliding_window_oracle() {
        // Independent direct evaluation of same-padded convolution.
        let t = 7;
        let (c_in, c_out, k, stride) = (2, 3, 3, 2);
        let mut r = rng(7);
        let x = rand_tensor(&[t, c_in], &mut r);
        let w = rand_tensor(&[k, c_in, c_out], &mut r);

        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let wi = tape.constant(w.clone());
        let y = tape.conv1d(xi, wi, stride).unwrap();

        let pad = (k - 1) / 2;
        let t_out = (t + stride - 1) / stride;
        assert_eq!(tape.value(y).shape(), &[t_out, c_out]);
        for to in 0..t_out {
            for co in 0..c_out {
                let mut acc = 0.0;
                for kk in 0..k {
                    let src = (to * stride + kk) as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    for ci in 0..c_in {
                        acc += x.at(src as usize, ci) * w.data()[(kk * c_in + ci) * c_out + co];
                    }
                }
                let got = tape.value(y).at(to, co);
                assert!((acc - got).abs() < 1e-12, "mismatch at ({to},{co})");
            }
        }
    }

    #[test]
    fn conv1d_spec_examples() {
        // [1,2,3,4] with kernel [1,1,1], stride 1 -> [3,6,9,7].
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap());
        let y = tape.conv1d(x, w, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 9.0, 7.0]);

        // Identity kernel [0,1,0] reproduces the input at stride 1.
        let mut r = rng(3);
        let x_val = rand_tensor(&[9, 1], &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(x_val.clone());
        let w = tape.constant(Tensor::new(vec![3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap());
        let y = tape.conv1d(x, w, 1).unwrap();
        assert_eq!(tape.value(y).data(), x_val.data());
    }

    #[test]
    fn conv1d_output_length_is_ceil_for_all_small_sizes() {
        for t in 1..=64usize {
            for stride in 1..=3usize {
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::zeros(&[t, 1]));
                let w = tape.constant(Tensor::new(vec![3, 1, 1], vec![1.0; 3]).unwrap());
                let y = tape.conv1d(x, w, stride).unwrap();
                assert_eq!(tape.value(y).rows(), (t + stride - 1) / stride);
            }
        }
    }

    #[test]
    fn conv1d_channel_mismatch_is_invalid_argument() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 2]));
        let w = tape.constant(Tensor::zeros(&[3, 3, 5]));
        assert!(matches!(
            tape.conv1d(x, w, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn layer_norm_spec_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![5.0, 5.0, 5.0]).unwrap());
        let g = tape.constant(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let b = tape.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9, "constant frame should normalize to zero");
        }

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let b = tape.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let want = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (got, want) in tape.value(y).data().iter().zip(want) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }

        // gain = 0 collapses to the bias.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap());
        let g = tape.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let b = tape.constant(Tensor::new(vec![3], vec![0.25, -0.5, 1.0]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -0.5, 1.0, 0.25, -0.5, 1.0]);
    }

    #[test]
    fn cross_entropy_spec_examples() {
        // Uniform logits over V=4 -> ln 4.
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(1, 4, vec![0.3; 4]).unwrap());
        let loss = tape
            .softmax_cross_entropy(logits, &[2], &[true])
            .unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);

        // A huge logit on the target class drives the loss to zero.
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(1, 4, vec![0.0, 1e3, 0.0, 0.0]).unwrap());
        let loss = tape
            .softmax_cross_entropy(logits, &[1], &[true])
            .unwrap();
        assert!(tape.value(loss).item() < 1e-12);

        // logits [1,2], target 1 -> ln(1 + e^-1).
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let loss = tape
            .softmax_cross_entropy(logits, &[1], &[true])
            .unwrap();
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
        assert!((want - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_all_false_mask_is_invalid() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(2, 4, vec![0.0; 8]).unwrap());
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[0, 1], &[false, false]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn embed_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros(&[4, 3]));
        assert!(tape.embed(table, &[0, 3]).is_ok());
        assert!(matches!(
            tape.embed(table, &[4]),
            Err(Error::InvalidArgument(_))
        ));
        // Empty id list produces a [0, d] tensor.
        let e = tape.embed(table, &[]).unwrap();
        assert_eq!(tape.value(e).shape(), &[0, 3]);
    }

    #[test]
    fn backward_skips_frozen_subgraphs() {
        let mut tape = Tape::new();
        let frozen = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let live = tape.leaf(Tensor::matrix(2, 2, vec![0.5; 4]).unwrap(), true);
        let prod = tape.matmul(frozen, live).unwrap();
        let loss = sum_all(&mut tape, prod);
        tape.backward(loss).unwrap();
        assert!(tape.grad(frozen).is_none(), "frozen leaf must get no grad");
        assert!(tape.grad(live).is_some());
    }

    // Finite-difference checks for every differentiable op, dimensions <= 16.

    #[test]
    fn grad_matmul() {
        check_grads(
            |tape, ids| {
                let c = tape.matmul(ids[0], ids[1]).unwrap();
                sum_all(tape, c)
            },
            &[vec![3, 4], vec![4, 2]],
            11,
            1e-4,
        );
    }

    #[test]
    fn grad_matmul_nt() {
        check_grads(
            |tape, ids| {
                let c = tape.matmul_nt(ids[0], ids[1]).unwrap();
                sum_all(tape, c)
            },
            &[vec![3, 4], vec![2, 4]],
            12,
            1e-4,
        );
    }

    #[test]
    fn grad_conv1d() {
        for stride in [1usize, 2, 3] {
            check_grads(
                |tape, ids| {
                    let y = tape.conv1d(ids[0], ids[1], stride).unwrap();
                    let sq = tape.mul(y, y).unwrap();
                    sum_all(tape, sq)
                },
                &[vec![7, 2], vec![3, 2, 3]],
                13 + stride as u64,
                1e-4,
            );
        }
    }

    #[test]
    fn grad_layer_norm() {
        check_grads(
            |tape, ids| {
                let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
                let sq = tape.mul(y, y).unwrap();
                sum_all(tape, sq)
            },
            &[vec![4, 5], vec![5], vec![5]],
            17,
            1e-4,
        );
    }

    #[test]
    fn grad_row_softmax() {
        for causal in [false, true] {
            check_grads(
                |tape, ids| {
                    let y = tape.row_softmax(ids[0], causal).unwrap();
                    let sq = tape.mul(y, y).unwrap();
                    sum_all(tape, sq)
                },
                &[vec![4, 4]],
                19 + causal as u64,
                1e-4,
            );
        }
    }

    #[test]
    fn grad_cross_entropy() {
        check_grads(
            |tape, ids| {
                tape.softmax_cross_entropy(ids[0], &[1, 0, 2, 1], &[true, false, true, true])
                    .unwrap()
            },
            &[vec![4, 3]],
            23,
            1e-4,
        );
    }

    #[test]
    fn grad_embed_mask_rows_and_misc() {
        check_grads(
            |tape, ids| {
                let e = tape.embed(ids[0], &[0, 2, 1, 2]).unwrap();
                let m = tape
                    .mask_rows(e, ids[1], &[false, true, false, true])
                    .unwrap();
                let a = tape.gelu(m);
                let s = tape.scale(a, 1.5);
                let sq = tape.mul(s, s).unwrap();
                sum_all(tape, sq)
            },
            &[vec![3, 4], vec![4]],
            29,
            1e-4,
        );
    }

    #[test]
    fn grad_concat_and_slice() {
        check_grads(
            |tape, ids| {
                let cat = tape.concat_rows(&[ids[0], ids[1]]).unwrap();
                let left = tape.slice_cols(cat, 0, 2).unwrap();
                let right = tape.slice_cols(cat, 2, 2).unwrap();
                let swapped = tape.concat_cols(&[right, left]).unwrap();
                let top = tape.slice_rows(swapped, 0, 3).unwrap();
                let sq = tape.mul(top, top).unwrap();
                sum_all(tape, sq)
            },
            &[vec![2, 4], vec![3, 4]],
            31,
            1e-4,
        );
    }

    #[test]
    fn grad_scalar_broadcast_mul() {
        check_grads(
            |tape, ids| {
                let scaled = tape.mul(ids[0], ids[1]).unwrap();
                let sq = tape.mul(scaled, scaled).unwrap();
                sum_all(tape, sq)
            },
            &[vec![1], vec![3, 3]],
            37,
            1e-4,
        );
    }

    #[test]
    fn grad_attention_composition() {
        // A miniature single-head attention: softmax(Q K^T / sqrt(d)) V.
        check_grads(
            |tape, ids| {
                let scores = tape.matmul_nt(ids[0], ids[1]).unwrap();
                let scaled = tape.scale(scores, 1.0 / (4f64).sqrt());
                let attn = tape.row_softmax(scaled, false).unwrap();
                let ctx = tape.matmul(attn, ids[2]).unwrap();
                let sq = tape.mul(ctx, ctx).unwrap();
                sum_all(tape, sq)
            },
            &[vec![3, 4], vec![5, 4], vec![5, 4]],
            41,
            1e-4,
        );
    }
}
