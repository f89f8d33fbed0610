//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an arena of nodes. Every operation evaluates eagerly,
//! stores its output as a new node and remembers how to propagate a
//! gradient back to its inputs. [`Tape::backward`] walks the arena in
//! reverse insertion order, which is a valid topological order because a
//! node can only reference nodes created before it.
//!
//! Leaf gradients persist across backward calls and accumulate; intermediate
//! gradients are scratch space local to one backward pass.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// GELU flavour. `Tanh` is the GPT-2 approximation and the default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeluKind {
    #[default]
    Tanh,
    Erf,
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_CUBIC: f32 = 0.044_715;
const INV_SQRT_2: f32 = std::f32::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f32 = 0.398_942_3;

pub fn gelu_scalar(x: f32, kind: GeluKind) -> f32 {
    match kind {
        GeluKind::Tanh => {
            let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            0.5 * x * (1.0 + inner.tanh())
        }
        GeluKind::Erf => 0.5 * x * (1.0 + libm::erff(x * INV_SQRT_2)),
    }
}

pub fn gelu_derivative(x: f32, kind: GeluKind) -> f32 {
    match kind {
        GeluKind::Tanh => {
            let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            let t = inner.tanh();
            let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        }
        GeluKind::Erf => {
            let cdf = 0.5 * (1.0 + libm::erff(x * INV_SQRT_2));
            let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
            cdf + x * pdf
        }
    }
}

/// Result of [`Tape::cross_entropy`].
#[derive(Clone, Copy, Debug)]
pub struct CrossEntropy {
    pub loss: Var,
    /// Number of positions that contributed to the mean.
    pub counted: usize,
}

impl CrossEntropy {
    /// True when every target was ignored and the loss was defined as 0.
    pub fn degenerate(&self) -> bool {
        self.counted == 0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Gelu {
        x: Var,
        kind: GeluKind,
    },
    Relu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax {
        x: Var,
    },
    CausalMask {
        x: Var,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f32>,
        counted: usize,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Operation arena with reverse-mode gradients.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor as a leaf. It takes part in gradient computation
    /// iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor.clone(), rg, Op::Leaf)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.clone(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn check_var(&self, v: Var) -> Result<(), TensorError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.nodes[v.0].value.shape();
        if s.len() != 2 {
            return Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        self.check_var(a)?;
        self.check_var(b)?;
        let op_name = if trans_b { "matmul_nt" } else { "matmul" };
        let (m, k) = self.dims2(a, op_name)?;
        let (br, bc) = self.dims2(b, op_name)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: vec![m, k],
                right: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        let mut out = vec![0.0f32; m * n];
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
            gemm(m, k, n, av, k, 1, bv, rsb, csb, &mut out, 0.0);
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, rg, Op::MatMul { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data: Vec<f32> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    /// Adds a `[n]` bias to every row of `x[..×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        self.check_var(x)?;
        self.check_var(bias)?;
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let n = xv.last_dim();
        if bv.numel() != n || bv.ndim() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let b = bv.data();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        let value = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, rg, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var, TensorError> {
        self.check_var(x)?;
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Scale { x, factor }))
    }

    pub fn gelu(&mut self, x: Var, kind: GeluKind) -> Result<Var, TensorError> {
        self.check_var(x)?;
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| gelu_scalar(v, kind)).collect();
        let value = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Gelu { x, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check_var(x)?;
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Relu { x }))
    }

    /// Normalizes each row of `x[..×d]` to zero mean and unit variance, then
    /// applies `gain` and `bias` (both `[d]`).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var, TensorError> {
        self.check_var(x)?;
        self.check_var(gain)?;
        self.check_var(bias)?;
        let xv = &self.nodes[x.0].value;
        let d = xv.last_dim();
        for p in [gain, bias] {
            let pv = &self.nodes[p.0].value;
            if pv.numel() != d || pv.ndim() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "layernorm",
                    left: xv.shape().to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
        }
        let g = self.nodes[gain.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let rows = xv.rows();
        let mut out = vec![0.0f32; xv.numel()];
        let mut xhat = vec![0.0f32; xv.numel()];
        let mut rstd = vec![0.0f32; rows];
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check_var(x)?;
        let xv = &self.nodes[x.0].value;
        let n = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Softmax { x }))
    }

    /// Sets entries above the diagonal of a square `[T×T]` matrix to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check_var(x)?;
        let (r, c) = self.dims2(x, "causal_mask")?;
        if r != c {
            return Err(TensorError::ShapeMismatch {
                op: "causal_mask",
                left: vec![r, c],
                right: vec![r, r],
            });
        }
        let mut out = self.nodes[x.0].value.data().to_vec();
        for i in 0..r {
            for v in &mut out[i * c + i + 1..(i + 1) * c] {
                *v = f32::NEG_INFINITY;
            }
        }
        let value = Tensor::new(&[r, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::CausalMask { x }))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        self.check_var(x)?;
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: r + 1,
            });
        }
        let data = self.nodes[x.0].value.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(&[len, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::SliceRows { x, start }))
    }

    /// Stacks 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Rank {
                op: "concat_rows",
                expected: 2,
                shape: vec![],
            });
        };
        for &p in parts {
            self.check_var(p)?;
        }
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, c],
                    right: vec![pr, pc],
                });
            }
            rows += pr;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.nodes[p.0].value.data());
        }
        let value = Tensor::new(&[rows, c], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value,
            rg,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        self.check_var(x)?;
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c + 1,
            });
        }
        let xv = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(&[r, len], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::SliceCols { x, start }))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Rank {
                op: "concat_cols",
                expected: 2,
                shape: vec![],
            });
        };
        for &p in parts {
            self.check_var(p)?;
        }
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![r],
                    right: vec![pr, pc],
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(&[r, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value,
            rg,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Row lookup `table[ids[i], :]`, e.g. an embedding.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        self.check_var(table)?;
        let (v, d) = self.dims2(table, "gather_rows")?;
        let tv = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            rg,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check_var(x)?;
        let s: f32 = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum { x }))
    }

    /// Mean over non-ignored rows of `-log softmax(logits)[t, target_t]`.
    ///
    /// Targets equal to `ignore_index` are skipped. When every target is
    /// skipped the loss is 0 and [`CrossEntropy::degenerate`] is set.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<CrossEntropy, TensorError> {
        self.check_var(logits)?;
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![t, v],
                right: vec![targets.len()],
            });
        }
        let mut resolved = Vec::with_capacity(t);
        for &target in targets {
            if target == ignore_index {
                resolved.push(None);
            } else if target >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: target,
                    bound: v,
                });
            } else {
                resolved.push(Some(target));
            }
        }
        let lv = self.nodes[logits.0].value.data();
        let mut probs = lv.to_vec();
        let mut total = 0.0f64;
        let mut counted = 0usize;
        for (row_idx, row) in probs.chunks_mut(v).enumerate() {
            let Some(target) = resolved[row_idx] else {
                continue;
            };
            let log_z = log_sum_exp(row);
            total += f64::from(log_z - row[target]);
            counted += 1;
            for p in row.iter_mut() {
                *p = (*p - log_z).exp();
            }
        }
        let loss = if counted == 0 {
            0.0
        } else {
            (total / counted as f64) as f32
        };
        let rg = self.rg(logits);
        let var = self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: resolved,
                probs,
                counted,
            },
        );
        Ok(CrossEntropy { loss: var, counted })
    }

    /// Propagates `d loss / d node` to every reachable node that requires a
    /// gradient, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.check_var(loss)?;
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        scratch[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = scratch[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    match &mut self.grads[idx] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&g) {
                                *a += v;
                            }
                        }
                        slot @ None => *slot = Some(g),
                    }
                }
                continue;
            }
            self.propagate(idx, &g, &mut scratch);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f32], scratch: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = node.value.shape()[1];
                if wants(*a) {
                    let ga = slot(scratch, *a, m * k);
                    // dA = dC · Bᵀ (or dC · B when B was used transposed)
                    let (rsb, csb) = if *trans_b { (k, 1) } else { (1, n) };
                    gemm(m, n, k, g, n, 1, bv, rsb, csb, ga, 1.0);
                }
                if wants(*b) {
                    let gb = slot(scratch, *b, k * n);
                    if *trans_b {
                        // dB[n×k] = dCᵀ · A
                        gemm(n, m, k, g, 1, n, av, k, 1, gb, 1.0);
                    } else {
                        // dB[k×n] = Aᵀ · dC
                        gemm(k, m, n, av, 1, k, g, n, 1, gb, 1.0);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        accumulate(slot(scratch, v, g.len()), g);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    accumulate(slot(scratch, *x, g.len()), g);
                }
                if wants(*bias) {
                    let n = nodes[bias.0].value.numel();
                    let gb = slot(scratch, *bias, n);
                    for row in g.chunks(n) {
                        accumulate(gb, row);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if wants(*x) {
                    let gx = slot(scratch, *x, g.len());
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += v * factor;
                    }
                }
            }
            Op::Gelu { x, kind } => {
                if wants(*x) {
                    let xv = nodes[x.0].value.data();
                    let gx = slot(scratch, *x, g.len());
                    for ((o, v), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += v * gelu_derivative(*xi, *kind);
                    }
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let xv = nodes[x.0].value.data();
                    let gx = slot(scratch, *x, g.len());
                    for ((o, v), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *o += v;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[gain.0].value.numel();
                let gv = nodes[gain.0].value.data();
                if wants(*gain) {
                    let gg = slot(scratch, *gain, d);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = slot(scratch, *bias, d);
                    for grow in g.chunks(d) {
                        accumulate(gb, grow);
                    }
                }
                if wants(*x) {
                    let gx = slot(scratch, *x, g.len());
                    let mut dxhat = vec![0.0f32; d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_d = 0.0f32;
                        let mut mean_dh = 0.0f32;
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hrow[j];
                        }
                        mean_d /= d as f32;
                        mean_dh /= d as f32;
                        let rs = rstd[r];
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rs * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if wants(*x) {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let gx = slot(scratch, *x, g.len());
                    for ((grow, yrow), orow) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            orow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::CausalMask { x } => {
                if wants(*x) {
                    let c = node.value.shape()[1];
                    let gx = slot(scratch, *x, g.len());
                    for (i, (grow, orow)) in g.chunks(c).zip(gx.chunks_mut(c)).enumerate() {
                        for j in 0..=i {
                            orow[j] += grow[j];
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let c = nodes[x.0].value.shape()[1];
                    let n = nodes[x.0].value.numel();
                    let gx = slot(scratch, *x, n);
                    accumulate(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    if wants(p) {
                        let gp = slot(scratch, p, n);
                        accumulate(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    let len = node.value.shape()[1];
                    let gx = slot(scratch, *x, r * c);
                    for i in 0..r {
                        accumulate(&mut gx[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let r = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    if wants(p) {
                        let gp = slot(scratch, p, r * w);
                        for i in 0..r {
                            accumulate(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, ids } => {
                if wants(*table) {
                    let tv = &nodes[table.0].value;
                    let d = tv.shape()[1];
                    let gt = slot(scratch, *table, tv.numel());
                    for (i, &id) in ids.iter().enumerate() {
                        accumulate(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    let n = nodes[x.0].value.numel();
                    let gx = slot(scratch, *x, n);
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                counted,
            } => {
                if wants(*logits) && *counted > 0 {
                    let v = nodes[logits.0].value.shape()[1];
                    let scale = g[0] / *counted as f32;
                    let gl = slot(scratch, *logits, probs.len());
                    for (row, target) in targets.iter().enumerate() {
                        let Some(target) = target else {
                            continue;
                        };
                        let prow = &probs[row * v..(row + 1) * v];
                        let orow = &mut gl[row * v..(row + 1) * v];
                        for j in 0..v {
                            orow[j] += prow[j] * scale;
                        }
                        orow[*target] -= scale;
                    }
                }
            }
        }
    }
}

fn slot(scratch: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    scratch[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return max;
    }
    let s: f32 = row.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, with arbitrary strides for `a` and
/// `b` and a row-major contiguous `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
    beta: f32,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index sgemm touches within the
    // three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_checked() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&t(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity_leaves_b_unchanged() {
        let mut tape = Tape::new();
        let eye = tape.constant(&t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let b_t = t(&[3, 2], &[0.5, -1.0, 2.0, 3.25, -7.0, 0.0]);
        let b = tape.constant(&b_t);
        let c = tape.matmul(eye, b).unwrap();
        assert!(tape.value(c).bit_eq(&b_t));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut tape = Tape::new();
        let a_t = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b_t = t(&[4, 3], &[1.0, 0.0, -1.0, 2.0, 2.0, 2.0, 0.5, 0.25, 0.0, -3.0, 1.0, 1.0]);
        let a = tape.constant(&a_t);
        let b = tape.constant(&b_t);
        let bt = tape.constant(&b_t.transpose2d().unwrap());
        let c1 = tape.matmul_nt(a, b).unwrap();
        let c2 = tape.matmul(a, bt).unwrap();
        assert!(tape.value(c1).bit_eq(tape.value(c2)));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[4], &[0.0; 4]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);

        let x = tape.constant(&t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-6 && d[1] < 1e-30 && d[1] >= 0.0);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        let base = [0.3f32, -1.2, 2.5, 0.0, 4.1];
        let x = tape.constant(&t(&[5], &base));
        let shifted: Vec<f32> = base.iter().map(|v| v + 17.5).collect();
        let xs = tape.constant(&t(&[5], &shifted));
        let y = tape.softmax(x).unwrap();
        let ys = tape.softmax(xs).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(ys)) < 1e-6);
    }

    #[test]
    fn layernorm_constant_row_and_zero_gain() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 4], &[3.0; 4]));
        let g = tape.constant(&Tensor::full(&[4], 1.0));
        let b = tape.constant(&Tensor::zeros(&[4]));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

        let x = tape.constant(&t(&[2, 3], &[1.0, 5.0, -2.0, 0.5, 0.25, 9.0]));
        let g0 = tape.constant(&Tensor::zeros(&[3]));
        let bias = tape.constant(&t(&[3], &[0.1, 0.2, 0.3]));
        let y = tape.layernorm(x, g0, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn gelu_fixed_points() {
        for kind in [GeluKind::Tanh, GeluKind::Erf] {
            assert_eq!(gelu_scalar(0.0, kind), 0.0);
            assert!(gelu_scalar(-10.0, kind).abs() < 1e-6);
            assert!((gelu_scalar(10.0, kind) - 10.0).abs() < 1e-5);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(&[3, 256]));
        let ce = tape.cross_entropy(logits, &[1, 200, 7], usize::MAX).unwrap();
        let loss = tape.value(ce.loss).item().unwrap();
        assert!((loss - 256f32.ln()).abs() < 1e-5);
        assert!(!ce.degenerate());
    }

    #[test]
    fn cross_entropy_margin_drives_loss_to_zero() {
        let mut last = f32::INFINITY;
        for margin in [1.0f32, 5.0, 20.0, 60.0] {
            let mut tape = Tape::new();
            let mut data = vec![0.0f32; 4];
            data[2] = margin;
            let logits = tape.constant(&t(&[1, 4], &data));
            let ce = tape.cross_entropy(logits, &[2], usize::MAX).unwrap();
            let loss = tape.value(ce.loss).item().unwrap();
            assert!(loss <= last);
            last = loss;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn cross_entropy_all_ignored_is_flagged_zero() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(&[2, 5]).with_requires_grad(true));
        let ce = tape.cross_entropy(logits, &[9, 9], 9).unwrap();
        assert!(ce.degenerate());
        assert_eq!(tape.value(ce.loss).item().unwrap(), 0.0);
        tape.backward(ce.loss).unwrap();
        assert!(tape.value(ce.loss).item().unwrap().is_finite());
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(&[1, 5]));
        let err = tape.cross_entropy(logits, &[5], usize::MAX).unwrap_err();
        assert!(matches!(err, TensorError::IndexOutOfRange { .. }));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[2, 3], 0.7).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_twice_doubles() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0.5, -1.0, 2.0]).with_requires_grad(true));
        let y = tape.gelu(x, GeluKind::Tanh).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let once = tape.grad(x).unwrap().to_vec();
        tape.backward(s).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn unreachable_and_frozen_leaves_get_no_grad() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::full(&[2, 2], 1.0).with_requires_grad(true));
        let frozen = tape.leaf(&Tensor::full(&[2, 2], 1.0));
        let unused = tape.leaf(&Tensor::full(&[2], 1.0).with_requires_grad(true));
        let y = tape.matmul(w, frozen).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_some());
        assert!(tape.grad(frozen).is_none());
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[3, 3]));
        let m = tape.causal_mask(x).unwrap();
        let p = tape.softmax(m).unwrap();
        let v = tape.value(p);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
    }
}
