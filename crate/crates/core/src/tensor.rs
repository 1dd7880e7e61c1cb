//! Dense f64 tensors and tape-based reverse-mode differentiation.
//!
//! The tape records every forward operation as an explicit enum variant;
//! `backward` walks the record in reverse and applies the matching adjoint
//! rule. Everything is 64-bit so analytic gradients can be checked against
//! central finite differences to tight tolerances.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical error: non-finite value in {0}")]
    NumericalError(String),
}

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(x: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor.
    pub fn nrows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn ncols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "ncols on non-2D tensor");
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max |a - b| over elements; tensors must have equal shapes.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub usize);

enum Op {
    Leaf,
    /// C = A @ B for (m,k) @ (k,n)
    Matmul { a: VarId, b: VarId },
    /// C = A @ B^T for (m,k) @ (n,k)
    MatmulNT { a: VarId, b: VarId },
    Add { a: VarId, b: VarId },
    /// C[i,:] = A[i,:] + bias
    AddBias { a: VarId, bias: VarId },
    /// C = A + constant tensor (no gradient into the constant)
    AddConst { a: VarId },
    Scale { a: VarId, c: f64 },
    SoftmaxRows { a: VarId },
    Gelu { a: VarId },
    /// Per-row layer norm over the last dimension with learnable gain/bias.
    LayerNormRows { x: VarId, gain: VarId, bias: VarId },
    /// Out[r, :] = Table[idx[r], :]
    GatherRows { table: VarId, idx: Vec<usize> },
    /// Out[g, :] = mean of Table rows in groups[g], zero row if the group is empty.
    GatherRowsMean { table: VarId, groups: Vec<Vec<usize>> },
    ConcatRows { parts: Vec<VarId> },
    SliceRows { a: VarId, start: usize, len: usize },
    ConcatCols { parts: Vec<VarId> },
    SliceCols { a: VarId, start: usize, len: usize },
    /// Same data, new shape.
    Reshape { a: VarId },
    /// Scalar mean of -log softmax(logits)[target] over rows with Some target.
    CrossEntropyMean {
        logits: VarId,
        targets: Vec<Option<usize>>,
    },
}

/// Records a forward computation and replays it in reverse for gradients.
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_into(a: &Tensor, b: &Tensor, transpose_b: bool) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = if transpose_b { b.shape[0] } else { b.shape[1] };
    if transpose_b {
        assert_eq!(b.shape[1], k, "matmul_nt inner dim");
    } else {
        assert_eq!(b.shape[0], k, "matmul inner dim");
    }
    let mut out = vec![0.0; m * n];
    if transpose_b {
        for i in 0..m {
            let arow = &a.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for t in 0..k {
                    acc += arow[t] * brow[t];
                }
                out[i * n + j] = acc;
            }
        }
    } else {
        for i in 0..m {
            let arow = &a.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (t, &av) in arow.iter().enumerate() {
                let brow = &b.data[t * n..(t + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// a^T @ b for a (m,k), b (m,n) -> (k,n); used only in backward passes.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    assert_eq!(b.shape[0], m);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            let orow = &mut out[t * n..(t + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::from_vec(&[k, n], out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

const LN_EPS: f64 = 1e-8;

impl Tape {
    pub fn new() -> Tape {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.values.push(value);
        self.ops.push(op);
        VarId(self.values.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id.0]
    }

    /// Record a leaf (input or parameter) on the tape.
    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let out = matmul_into(self.value(a), self.value(b), false);
        self.push(out, Op::Matmul { a, b })
    }

    /// A @ B^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let out = matmul_into(self.value(a), self.value(b), true);
        self.push(out, Op::MatmulNT { a, b })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(&ta.shape.clone(), data);
        self.push(out, Op::Add { a, b })
    }

    /// Add a length-n bias vector to every row of an (m, n) tensor.
    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> VarId {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.shape[1];
        assert_eq!(tb.len(), n, "bias length mismatch");
        let mut data = ta.data.clone();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(&tb.data) {
                *x += b;
            }
        }
        let out = Tensor::from_vec(&ta.shape.clone(), data);
        self.push(out, Op::AddBias { a, bias })
    }

    /// Add a constant tensor (e.g. an attention mask); no gradient flows into it.
    pub fn add_const(&mut self, a: VarId, c: &Tensor) -> VarId {
        let ta = self.value(a);
        assert_eq!(ta.shape, c.shape, "add_const shape mismatch");
        let data = ta.data.iter().zip(&c.data).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(&ta.shape.clone(), data);
        self.push(out, Op::AddConst { a })
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x * c).collect();
        let out = Tensor::from_vec(&ta.shape.clone(), data);
        self.push(out, Op::Scale { a, c })
    }

    /// Numerically stable softmax over each row (max-subtracted).
    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let ta = self.value(a);
        let n = ta.shape[1];
        let mut data = ta.data.clone();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let out = Tensor::from_vec(&ta.shape.clone(), data);
        self.push(out, Op::SoftmaxRows { a })
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| gelu_scalar(x)).collect();
        let out = Tensor::from_vec(&ta.shape.clone(), data);
        self.push(out, Op::Gelu { a })
    }

    /// Layer norm over each row with learnable gain and bias vectors.
    pub fn layer_norm_rows(&mut self, x: VarId, gain: VarId, bias: VarId) -> VarId {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.shape[1];
        assert_eq!(tg.len(), n);
        assert_eq!(tb.len(), n);
        let mut data = tx.data.clone();
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - mean) * inv * tg.data[j] + tb.data[j];
            }
        }
        let out = Tensor::from_vec(&tx.shape.clone(), data);
        self.push(out, Op::LayerNormRows { x, gain, bias })
    }

    pub fn gather_rows(&mut self, table: VarId, idx: &[usize]) -> VarId {
        let tt = self.value(table);
        let n = tt.shape[1];
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&tt.data[i * n..(i + 1) * n]);
        }
        let out = Tensor::from_vec(&[idx.len(), n], data);
        self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    /// Mean of table rows per group; an empty group yields a zero row.
    pub fn gather_rows_mean(&mut self, table: VarId, groups: &[Vec<usize>]) -> VarId {
        let tt = self.value(table);
        let n = tt.shape[1];
        let mut data = vec![0.0; groups.len() * n];
        for (g, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let row = &mut data[g * n..(g + 1) * n];
            for &i in group {
                for (j, r) in row.iter_mut().enumerate() {
                    *r += tt.data[i * n + j];
                }
            }
            let inv = 1.0 / group.len() as f64;
            for r in row.iter_mut() {
                *r *= inv;
            }
        }
        let out = Tensor::from_vec(&[groups.len(), n], data);
        self.push(
            out,
            Op::GatherRowsMean {
                table,
                groups: groups.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        let n = self.value(parts[0]).shape[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.shape[1], n, "concat_rows column mismatch");
            rows += tp.shape[0];
            data.extend_from_slice(&tp.data);
        }
        let out = Tensor::from_vec(&[rows, n], data);
        self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let ta = self.value(a);
        let n = ta.shape[1];
        let data = ta.data[start * n..(start + len) * n].to_vec();
        let out = Tensor::from_vec(&[len, n], data);
        self.push(out, Op::SliceRows { a, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        let m = self.value(parts[0]).shape[0];
        let total: usize = parts.iter().map(|&p| self.value(p).shape[1]).sum();
        let mut data = vec![0.0; m * total];
        let mut col = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.shape[0], m, "concat_cols row mismatch");
            let w = tp.shape[1];
            for i in 0..m {
                data[i * total + col..i * total + col + w]
                    .copy_from_slice(&tp.data[i * w..(i + 1) * w]);
            }
            col += w;
        }
        let out = Tensor::from_vec(&[m, total], data);
        self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let ta = self.value(a);
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&ta.data[i * n + start..i * n + start + len]);
        }
        let out = Tensor::from_vec(&[m, len], data);
        self.push(out, Op::SliceCols { a, start, len })
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let ta = self.value(a);
        assert_eq!(ta.len(), shape.iter().product::<usize>(), "reshape size");
        let out = Tensor::from_vec(shape, ta.data.clone());
        self.push(out, Op::Reshape { a })
    }

    /// Mean cross-entropy over rows with a target; `None` rows are ignored.
    /// Returns a scalar; zero if no row has a target.
    pub fn cross_entropy_mean(&mut self, logits: VarId, targets: &[Option<usize>]) -> VarId {
        let tl = self.value(logits);
        let n = tl.shape[1];
        assert_eq!(tl.shape[0], targets.len(), "target count mismatch");
        let mut total = 0.0;
        let mut count = 0usize;
        for (row, tgt) in tl.data.chunks(n).zip(targets) {
            if let Some(t) = tgt {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
                total += lse - row[*t];
                count += 1;
            }
        }
        let value = if count > 0 { total / count as f64 } else { 0.0 };
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar output. Returns per-variable gradients,
    /// `None` for variables the output does not depend on.
    pub fn backward(&self, output: VarId) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        assert_eq!(self.values[output.0].len(), 1, "backward needs a scalar");
        grads[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.ops.len()).rev() {
            let grad = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.ops[i] {
                Op::Leaf => {
                    grads[i] = Some(grad);
                    continue;
                }
                Op::Matmul { a, b } => {
                    let da = matmul_into(&grad, &self.values[b.0], true);
                    let db = matmul_tn(&self.values[a.0], &grad);
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::MatmulNT { a, b } => {
                    // C = A B^T: dA = dC @ B, dB = dC^T @ A
                    let da = matmul_into(&grad, &self.values[b.0], false);
                    let db = matmul_tn(&grad, &self.values[a.0]);
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, grad.clone());
                    self.accumulate(&mut grads, *b, grad);
                }
                Op::AddBias { a, bias } => {
                    let n = grad.shape[1];
                    let mut db = vec![0.0; n];
                    for row in grad.data.chunks(n) {
                        for (j, &g) in row.iter().enumerate() {
                            db[j] += g;
                        }
                    }
                    self.accumulate(&mut grads, *bias, Tensor::from_vec(&[n], db));
                    self.accumulate(&mut grads, *a, grad);
                }
                Op::AddConst { a } => {
                    self.accumulate(&mut grads, *a, grad);
                }
                Op::Scale { a, c } => {
                    let data = grad.data.iter().map(|g| g * c).collect();
                    self.accumulate(&mut grads, *a, Tensor::from_vec(&grad.shape.clone(), data));
                }
                Op::SoftmaxRows { a } => {
                    let p = &self.values[i];
                    let n = p.shape[1];
                    let mut dx = vec![0.0; p.len()];
                    for r in 0..p.shape[0] {
                        let prow = &p.data[r * n..(r + 1) * n];
                        let grow = &grad.data[r * n..(r + 1) * n];
                        let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                        for j in 0..n {
                            dx[r * n + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::from_vec(&p.shape.clone(), dx));
                }
                Op::Gelu { a } => {
                    let x = &self.values[a.0];
                    let data = x
                        .data
                        .iter()
                        .zip(&grad.data)
                        .map(|(&x, &g)| g * gelu_grad_scalar(x))
                        .collect();
                    self.accumulate(&mut grads, *a, Tensor::from_vec(&x.shape.clone(), data));
                }
                Op::LayerNormRows { x, gain, bias } => {
                    let tx = &self.values[x.0];
                    let tg = &self.values[gain.0];
                    let n = tx.shape[1];
                    let nf = n as f64;
                    let mut dx = vec![0.0; tx.len()];
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    for r in 0..tx.shape[0] {
                        let xrow = &tx.data[r * n..(r + 1) * n];
                        let grow = &grad.data[r * n..(r + 1) * n];
                        let mean = xrow.iter().sum::<f64>() / nf;
                        let var = xrow.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = xrow.iter().map(|x| (x - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            grow.iter().zip(&tg.data).map(|(g, gm)| g * gm).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / nf;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / nf;
                        for j in 0..n {
                            dgain[j] += grow[j] * xhat[j];
                            dbias[j] += grow[j];
                            dx[r * n + j] =
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    self.accumulate(&mut grads, *x, Tensor::from_vec(&tx.shape.clone(), dx));
                    self.accumulate(&mut grads, *gain, Tensor::from_vec(&[n], dgain));
                    self.accumulate(&mut grads, *bias, Tensor::from_vec(&[n], dbias));
                }
                Op::GatherRows { table, idx } => {
                    let tt = &self.values[table.0];
                    let n = tt.shape[1];
                    let mut dt = Tensor::zeros(&tt.shape.clone());
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            dt.data[i * n + j] += grad.data[r * n + j];
                        }
                    }
                    self.accumulate(&mut grads, *table, dt);
                }
                Op::GatherRowsMean { table, groups } => {
                    let tt = &self.values[table.0];
                    let n = tt.shape[1];
                    let mut dt = Tensor::zeros(&tt.shape.clone());
                    for (g, group) in groups.iter().enumerate() {
                        if group.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / group.len() as f64;
                        for &i in group {
                            for j in 0..n {
                                dt.data[i * n + j] += grad.data[g * n + j] * inv;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *table, dt);
                }
                Op::ConcatRows { parts } => {
                    let n = grad.shape[1];
                    let mut row = 0;
                    for &p in parts {
                        let rows = self.values[p.0].shape[0];
                        let shape = self.values[p.0].shape.clone();
                        let data = grad.data[row * n..(row + rows) * n].to_vec();
                        self.accumulate(&mut grads, p, Tensor::from_vec(&shape, data));
                        row += rows;
                    }
                }
                Op::SliceRows { a, start, len } => {
                    let ta = &self.values[a.0];
                    let n = ta.shape[1];
                    let mut da = Tensor::zeros(&ta.shape.clone());
                    da.data[start * n..(start + len) * n].copy_from_slice(&grad.data);
                    self.accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols { parts } => {
                    let m = grad.shape[0];
                    let total = grad.shape[1];
                    let mut col = 0;
                    for &p in parts {
                        let w = self.values[p.0].shape[1];
                        let mut data = Vec::with_capacity(m * w);
                        for i in 0..m {
                            data.extend_from_slice(
                                &grad.data[i * total + col..i * total + col + w],
                            );
                        }
                        self.accumulate(&mut grads, p, Tensor::from_vec(&[m, w], data));
                        col += w;
                    }
                }
                Op::SliceCols { a, start, len } => {
                    let ta = &self.values[a.0];
                    let (m, n) = (ta.shape[0], ta.shape[1]);
                    let mut da = Tensor::zeros(&ta.shape.clone());
                    for i in 0..m {
                        for j in 0..*len {
                            da.data[i * n + start + j] = grad.data[i * len + j];
                        }
                    }
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Reshape { a } => {
                    let shape = self.values[a.0].shape.clone();
                    self.accumulate(&mut grads, *a, Tensor::from_vec(&shape, grad.data.clone()));
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let tl = &self.values[logits.0];
                    let n = tl.shape[1];
                    let count = targets.iter().filter(|t| t.is_some()).count();
                    if count == 0 {
                        continue;
                    }
                    let scale = grad.data[0] / count as f64;
                    let mut dl = Tensor::zeros(&tl.shape.clone());
                    for (r, tgt) in targets.iter().enumerate() {
                        if let Some(t) = tgt {
                            let row = &tl.data[r * n..(r + 1) * n];
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                            let sum: f64 = exps.iter().sum();
                            for j in 0..n {
                                let p = exps[j] / sum;
                                dl.data[r * n + j] = scale * (p - if j == *t { 1.0 } else { 0.0 });
                            }
                        }
                    }
                    self.accumulate(&mut grads, *logits, dl);
                }
            }
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: VarId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => {
                debug_assert_eq!(g.shape, delta.shape);
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data)
    }

    /// Finite-difference check of d(scalar f)/d(inputs) against tape gradients.
    fn fd_check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[VarId]) -> VarId) {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &ids);
        assert_eq!(tape.value(out).len(), 1, "fd_check needs scalar output");
        let grads = tape.backward(out);

        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            for e in 0..input.len() {
                let run = |delta: f64| -> f64 {
                    let mut tape = Tape::new();
                    let ids: Vec<VarId> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == k {
                                t.data[e] += delta;
                            }
                            tape.leaf(t)
                        })
                        .collect();
                    let out = f(&mut tape, &ids);
                    tape.value(out).data[0]
                };
                let fd = (run(h) - run(-h)) / (2.0 * h);
                let analytic = grads[ids[k].0]
                    .as_ref()
                    .map(|g| g.data[e])
                    .unwrap_or(0.0);
                let denom = fd.abs().max(analytic.abs()).max(1e-4);
                assert!(
                    (fd - analytic).abs() / denom < 1e-6,
                    "input {k} elem {e}: fd={fd} analytic={analytic}"
                );
            }
        }
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let b = tape.leaf(Tensor::from_vec(&[3, 2], vec![7., 8., 9., 10., 11., 12.]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).data, vec![58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[5, 4]);
        let mut bt = Tensor::zeros(&[4, 5]);
        for i in 0..5 {
            for j in 0..4 {
                bt.data[j * 5 + i] = b.data[i * 4 + j];
            }
        }
        let mut tape = Tape::new();
        let (ia, ib, ibt) = (
            tape.leaf(a.clone()),
            tape.leaf(b.clone()),
            tape.leaf(bt.clone()),
        );
        let c1 = tape.matmul_nt(ia, ib);
        let c2 = tape.matmul(ia, ibt);
        assert!(tape.value(c1).max_abs_diff(tape.value(c2)) < 1e-14);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[4, 7]);
        let mut tape = Tape::new();
        let ix = tape.leaf(x);
        let p = tape.softmax_rows(ix);
        for row in tape.value(p).data.chunks(7) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_handles_large_mask() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3], vec![0.3, -1e30, 0.7]));
        let p = tape.softmax_rows(x);
        let v = tape.value(p);
        assert_eq!(v.data[1], 0.0);
        assert!((v.data[0] + v.data[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[2, 3]);
        let b = randn(&mut rng, &[3, 4]);
        let t = randn(&mut rng, &[2, 4]);
        fd_check(&[a, b, t], |tape, ids| {
            let c = tape.matmul(ids[0], ids[1]);
            let d = tape.add(c, ids[2]);
            let sm = tape.softmax_rows(d);
            tape.cross_entropy_mean(sm, &[Some(1), Some(3)])
        });
    }

    #[test]
    fn grad_attention_shape() {
        // q @ k^T scaled, biased, softmaxed, applied to v, summarized by CE
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = randn(&mut rng, &[3, 4]);
        let k = randn(&mut rng, &[3, 4]);
        let v = randn(&mut rng, &[3, 5]);
        let bias = randn(&mut rng, &[3, 3]);
        fd_check(&[q, k, v, bias], |tape, ids| {
            let scores = tape.matmul_nt(ids[0], ids[1]);
            let scaled = tape.scale(scores, 0.5);
            let biased = tape.add(scaled, ids[3]);
            let p = tape.softmax_rows(biased);
            let ctx = tape.matmul(p, ids[2]);
            tape.cross_entropy_mean(ctx, &[Some(0), None, Some(4)])
        });
    }

    #[test]
    fn grad_layer_norm_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[3, 6]);
        let gain = randn(&mut rng, &[6]);
        let bias = randn(&mut rng, &[6]);
        fd_check(&[x, gain, bias], |tape, ids| {
            let ln = tape.layer_norm_rows(ids[0], ids[1], ids[2]);
            let g = tape.gelu(ln);
            tape.cross_entropy_mean(g, &[Some(2), Some(0), Some(5)])
        });
    }

    #[test]
    fn grad_gather_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table = randn(&mut rng, &[5, 3]);
        fd_check(&[table], |tape, ids| {
            let g = tape.gather_rows(ids[0], &[0, 2, 2, 4]);
            let m = tape.gather_rows_mean(ids[0], &[vec![1, 3], vec![], vec![0, 0, 2]]);
            let all = tape.concat_rows(&[g, m]);
            tape.cross_entropy_mean(all, &[Some(0), Some(1), None, Some(2), Some(0), None, Some(1)])
        });
    }

    #[test]
    fn grad_col_ops_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[3, 6]);
        let b = randn(&mut rng, &[3]);
        fd_check(&[x, b], |tape, ids| {
            let left = tape.slice_cols(ids[0], 0, 3);
            let right = tape.slice_cols(ids[0], 3, 3);
            let swapped = tape.concat_cols(&[right, left]);
            let lo = tape.slice_cols(swapped, 0, 3);
            let biased = tape.add_bias(lo, ids[1]);
            let r = tape.reshape(biased, &[3, 3]);
            tape.cross_entropy_mean(r, &[Some(1), Some(2), Some(0)])
        });
    }

    #[test]
    fn grad_slice_rows_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[4, 3]);
        fd_check(&[x], |tape, ids| {
            let top = tape.slice_rows(ids[0], 0, 2);
            let bottom = tape.slice_rows(ids[0], 2, 2);
            let s = tape.scale(bottom, 1.7);
            let sum = tape.add(top, s);
            tape.cross_entropy_mean(sum, &[Some(0), Some(2)])
        });
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_classes() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 3]));
        let loss = tape.cross_entropy_mean(logits, &[Some(0), Some(2)]);
        assert!((tape.value(loss).data[0] - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_empty_targets_is_zero() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 3]));
        let loss = tape.cross_entropy_mean(logits, &[None, None]);
        assert_eq!(tape.value(loss).data[0], 0.0);
        let grads = tape.backward(loss);
        assert!(grads[0].is_none());
    }
}
