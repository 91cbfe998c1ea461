//! Operation tape for reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only arena of tensors. Forward operations push a
//! new entry recording their inputs; [`Tape::backward`] walks the entries in
//! reverse, applying each operation's adjoint rule. Entries are immutable
//! once written.
//!
//! Nodes behind [`Tape::stop_gradient`] receive no gradient, which is how the
//! advantage terms of the policy losses get detached.

use crate::autodiff::{ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tx(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// C = A · B
    Matmul { a: Tx, b: Tx },
    /// C = A · Bᵀ
    MatmulTransB { a: Tx, b: Tx },
    Add { a: Tx, b: Tx },
    Sub { a: Tx, b: Tx },
    Mul { a: Tx, b: Tx },
    /// C[i, :] = A[i, :] + row
    AddRow { a: Tx, row: Tx },
    Relu { x: Tx },
    SoftmaxRows { x: Tx },
    /// Masked entries produce exactly zero probability and zero gradient.
    MaskedSoftmaxRows { x: Tx, mask: Vec<bool> },
    /// Per-row normalisation over the last dimension; saves mean and 1/std.
    LayerNorm {
        x: Tx,
        gain: Tx,
        bias: Tx,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatLastDim { parts: Vec<Tx> },
    ConcatRows { parts: Vec<Tx> },
    MeanRows { x: Tx },
    /// C[r, :] = X[idx[r], :]
    GatherRows { x: Tx, idx: Vec<usize> },
    SliceCols { x: Tx, start: usize, len: usize },
    Scale { x: Tx, c: f64 },
    Log { x: Tx },
    Square { x: Tx },
    /// Full reduction to a scalar.
    Sum { x: Tx },
    /// Scalar C = X[r, c]
    Pick { x: Tx, r: usize, c: usize },
    /// x·ln x with the 0·ln 0 = 0 convention (entropy terms).
    XLogX { x: Tx },
    StopGradient,
}

struct Entry {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

/// Records a forward computation and replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

// Raw matmul kernels over flat row-major buffers. The `ikj` loop order keeps
// the inner loop contiguous in both `b` and `out`.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += ar[p] * br[p];
            }
            or[j] += acc;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            let or = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), *shape.last().unwrap()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tx {
        self.entries.push(Entry {
            op,
            shape,
            values,
            requires_grad,
        });
        Tx(self.entries.len() - 1)
    }

    fn req(&self, x: Tx) -> bool {
        self.entries[x.0].requires_grad
    }

    pub fn values(&self, x: Tx) -> &[f64] {
        &self.entries[x.0].values
    }

    pub fn shape(&self, x: Tx) -> &[usize] {
        &self.entries[x.0].shape
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self, x: Tx) -> f64 {
        debug_assert_eq!(self.entries[x.0].values.len(), 1);
        self.entries[x.0].values[0]
    }

    /// Registers a leaf holding a copy of `t`'s values.
    pub fn leaf(&mut self, t: &Tensor) -> Tx {
        self.push(Op::Leaf, t.shape.clone(), t.values.clone(), t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Tx {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.push(Op::Leaf, shape, values, false)
    }

    pub fn scalar(&mut self, v: f64) -> Tx {
        self.constant(vec![1], vec![v])
    }

    pub fn matmul(&mut self, a: Tx, b: Tx) -> Result<Tx> {
        let (m, k) = dims2(self.shape(a));
        let (k2, n) = dims2(self.shape(b));
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.values(a), self.values(b), m, k, n, &mut out);
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], out, req))
    }

    /// A · Bᵀ where B is [n × k]; used for attention scores Q·Kᵀ.
    pub fn matmul_transpose_b(&mut self, a: Tx, b: Tx) -> Result<Tx> {
        let (m, k) = dims2(self.shape(a));
        let (n, k2) = dims2(self.shape(b));
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_transpose_b",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(self.values(a), self.values(b), m, k, n, &mut out);
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::MatmulTransB { a, b }, vec![m, n], out, req))
    }

    fn elementwise2(&mut self, op_name: &'static str, a: Tx, b: Tx) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tx, b: Tx) -> Result<Tx> {
        self.elementwise2("add", a, b)?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let req = self.req(a) || self.req(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add { a, b }, shape, values, req))
    }

    pub fn sub(&mut self, a: Tx, b: Tx) -> Result<Tx> {
        self.elementwise2("sub", a, b)?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let req = self.req(a) || self.req(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sub { a, b }, shape, values, req))
    }

    pub fn mul(&mut self, a: Tx, b: Tx) -> Result<Tx> {
        self.elementwise2("mul", a, b)?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let req = self.req(a) || self.req(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul { a, b }, shape, values, req))
    }

    /// Broadcasts a width-n row over every row of a; the bias add.
    pub fn add_row(&mut self, a: Tx, row: Tx) -> Result<Tx> {
        let (m, n) = dims2(self.shape(a));
        if self.values(row).len() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let mut values = self.values(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                values[i * n + j] += self.values(row)[j];
            }
        }
        let req = self.req(a) || self.req(row);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::AddRow { a, row }, shape, values, req))
    }

    pub fn relu(&mut self, x: Tx) -> Tx {
        let values: Vec<f64> = self.values(x).iter().map(|&v| v.max(0.0)).collect();
        let req = self.req(x);
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu { x }, shape, values, req)
    }

    /// Row-wise softmax, stabilised by subtracting each row's max.
    pub fn softmax_rows(&mut self, x: Tx) -> Result<Tx> {
        if self.values(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "softmax_rows",
                detail: "non-finite input".into(),
            });
        }
        let (m, n) = dims2(self.shape(x));
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.values(x)[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut values[i * n..(i + 1) * n];
            let mut denom = 0.0;
            for j in 0..n {
                out[j] = (row[j] - max).exp();
                denom += out[j];
            }
            for v in out.iter_mut() {
                *v /= denom;
            }
        }
        let req = self.req(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::SoftmaxRows { x }, shape, values, req))
    }

    /// Softmax over the unmasked entries of each row; masked entries come out
    /// exactly zero. Errors if a row masks everything.
    pub fn masked_softmax_rows(&mut self, x: Tx, mask: &[bool]) -> Result<Tx> {
        let (m, n) = dims2(self.shape(x));
        if mask.len() != n {
            return Err(Error::Shape {
                op: "masked_softmax_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&f| f) {
            return Err(Error::contract("masked_softmax_rows: all entries masked"));
        }
        if self.values(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "masked_softmax_rows",
                detail: "non-finite input".into(),
            });
        }
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.values(x)[i * n..(i + 1) * n];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let out = &mut values[i * n..(i + 1) * n];
            let mut denom = 0.0;
            for j in 0..n {
                if mask[j] {
                    out[j] = (row[j] - max).exp();
                    denom += out[j];
                }
            }
            for j in 0..n {
                if mask[j] {
                    out[j] /= denom;
                }
            }
        }
        let req = self.req(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Op::MaskedSoftmaxRows {
                x,
                mask: mask.to_vec(),
            },
            shape,
            values,
            req,
        ))
    }

    /// Layer normalisation over the last dimension with epsilon 1e-5.
    pub fn layer_norm(&mut self, x: Tx, gain: Tx, bias: Tx) -> Result<Tx> {
        const EPS: f64 = 1e-5;
        let (m, n) = dims2(self.shape(x));
        if self.values(gain).len() != n || self.values(bias).len() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let mut values = vec![0.0; m * n];
        let mut means = vec![0.0; m];
        let mut inv_stds = vec![0.0; m];
        for i in 0..m {
            let row = &self.values(x)[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + EPS).sqrt();
            means[i] = mean;
            inv_stds[i] = inv_std;
            for j in 0..n {
                values[i * n + j] =
                    (row[j] - mean) * inv_std * self.values(gain)[j] + self.values(bias)[j];
            }
        }
        let req = self.req(x) || self.req(gain) || self.req(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                inv_std: inv_stds,
            },
            shape,
            values,
            req,
        ))
    }

    /// Concatenates along the last dimension; all parts need equal row counts.
    pub fn concat_last_dim(&mut self, parts: &[Tx]) -> Result<Tx> {
        assert!(!parts.is_empty());
        let m = dims2(self.shape(parts[0])).0;
        let mut total = 0;
        for &p in parts {
            let (mp, np) = dims2(self.shape(p));
            if mp != m {
                return Err(Error::Shape {
                    op: "concat_last_dim",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += np;
        }
        let mut values = vec![0.0; m * total];
        let mut offset = 0;
        for &p in parts {
            let n = dims2(self.shape(p)).1;
            for i in 0..m {
                values[i * total + offset..i * total + offset + n]
                    .copy_from_slice(&self.values(p)[i * n..(i + 1) * n]);
            }
            offset += n;
        }
        let req = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            Op::ConcatLastDim {
                parts: parts.to_vec(),
            },
            vec![m, total],
            values,
            req,
        ))
    }

    /// Stacks parts vertically; all parts need equal widths.
    pub fn concat_rows(&mut self, parts: &[Tx]) -> Result<Tx> {
        assert!(!parts.is_empty());
        let n = dims2(self.shape(parts[0])).1;
        let mut m = 0;
        for &p in parts {
            let (mp, np) = dims2(self.shape(p));
            if np != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            m += mp;
        }
        let mut values = Vec::with_capacity(m * n);
        for &p in parts {
            values.extend_from_slice(self.values(p));
        }
        let req = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            vec![m, n],
            values,
            req,
        ))
    }

    /// Column means: [m × n] → [1 × n], summed in row order.
    pub fn mean_rows(&mut self, x: Tx) -> Tx {
        let (m, n) = dims2(self.shape(x));
        let mut values = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                values[j] += self.values(x)[i * n + j];
            }
        }
        for v in values.iter_mut() {
            *v /= m as f64;
        }
        let req = self.req(x);
        self.push(Op::MeanRows { x }, vec![1, n], values, req)
    }

    /// Selects rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, x: Tx, idx: &[usize]) -> Result<Tx> {
        let (m, n) = dims2(self.shape(x));
        if idx.iter().any(|&i| i >= m) {
            return Err(Error::contract(format!(
                "gather_rows: index out of range for {m} rows"
            )));
        }
        let mut values = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            values.extend_from_slice(&self.values(x)[i * n..(i + 1) * n]);
        }
        let req = self.req(x);
        Ok(self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            vec![idx.len(), n],
            values,
            req,
        ))
    }

    /// Column slice [start, start+len).
    pub fn slice_cols(&mut self, x: Tx, start: usize, len: usize) -> Result<Tx> {
        let (m, n) = dims2(self.shape(x));
        if start + len > n {
            return Err(Error::contract(format!(
                "slice_cols: [{start}, {}) out of width {n}",
                start + len
            )));
        }
        let mut values = Vec::with_capacity(m * len);
        for i in 0..m {
            values.extend_from_slice(&self.values(x)[i * n + start..i * n + start + len]);
        }
        let req = self.req(x);
        Ok(self.push(Op::SliceCols { x, start, len }, vec![m, len], values, req))
    }

    pub fn scale(&mut self, x: Tx, c: f64) -> Tx {
        let values: Vec<f64> = self.values(x).iter().map(|v| v * c).collect();
        let req = self.req(x);
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale { x, c }, shape, values, req)
    }

    /// Natural log; errors on non-positive input.
    pub fn log(&mut self, x: Tx) -> Result<Tx> {
        if self.values(x).iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::Numeric {
                op: "log",
                detail: "input must be strictly positive and finite".into(),
            });
        }
        let values: Vec<f64> = self.values(x).iter().map(|v| v.ln()).collect();
        let req = self.req(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Log { x }, shape, values, req))
    }

    pub fn square(&mut self, x: Tx) -> Tx {
        let values: Vec<f64> = self.values(x).iter().map(|v| v * v).collect();
        let req = self.req(x);
        let shape = self.shape(x).to_vec();
        self.push(Op::Square { x }, shape, values, req)
    }

    /// Sums every element into a scalar.
    pub fn sum(&mut self, x: Tx) -> Tx {
        let total: f64 = self.values(x).iter().sum();
        let req = self.req(x);
        self.push(Op::Sum { x }, vec![1], vec![total], req)
    }

    /// Picks a single element as a scalar.
    pub fn pick(&mut self, x: Tx, r: usize, c: usize) -> Result<Tx> {
        let (m, n) = dims2(self.shape(x));
        if r >= m || c >= n {
            return Err(Error::contract(format!(
                "pick: ({r}, {c}) out of range for [{m}, {n}]"
            )));
        }
        let v = self.values(x)[r * n + c];
        let req = self.req(x);
        Ok(self.push(Op::Pick { x, r, c }, vec![1], vec![v], req))
    }

    /// x·ln x elementwise with 0·ln 0 = 0; requires non-negative input.
    pub fn xlogx(&mut self, x: Tx) -> Result<Tx> {
        if self.values(x).iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Numeric {
                op: "xlogx",
                detail: "input must be non-negative and finite".into(),
            });
        }
        let values: Vec<f64> = self
            .values(x)
            .iter()
            .map(|&v| if v == 0.0 { 0.0 } else { v * v.ln() })
            .collect();
        let req = self.req(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::XLogX { x }, shape, values, req))
    }

    /// Identity forward; blocks all gradient flow upstream.
    pub fn stop_gradient(&mut self, x: Tx) -> Tx {
        let values = self.values(x).to_vec();
        let shape = self.shape(x).to_vec();
        self.push(Op::StopGradient, shape, values, false)
    }

    /// Runs the reverse sweep from a scalar loss. Returns the per-entry
    /// gradient buffers, indexable by [`Tx`] via [`Tape::grad`].
    pub fn backward(&mut self, loss: Tx) -> Result<Gradients> {
        if self.entries[loss.0].values.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.entries[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = self.entries.iter().map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.entries[i].requires_grad {
                continue;
            }
            let upstream = grads[i].take().unwrap();
            self.apply_backward(i, &upstream, &mut grads);
            grads[i] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], x: Tx, delta: &[f64]) {
        if !self.entries[x.0].requires_grad {
            return;
        }
        let slot = grads[x.0].get_or_insert_with(|| vec![0.0; self.entries[x.0].values.len()]);
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn accumulate_fn(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Tx,
        f: impl Fn(&mut [f64]),
    ) {
        if !self.entries[x.0].requires_grad {
            return;
        }
        let slot = grads[x.0].get_or_insert_with(|| vec![0.0; self.entries[x.0].values.len()]);
        f(slot);
    }

    fn apply_backward(&self, i: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let entry = &self.entries[i];
        match &entry.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = dims2(self.shape(*a));
                let n = dims2(self.shape(*b)).1;
                // dA = dC · Bᵀ
                self.accumulate_fn(grads, *a, |ga| {
                    matmul_nt(up, &self.entries[b.0].values, m, n, k, ga);
                });
                // dB = Aᵀ · dC
                self.accumulate_fn(grads, *b, |gb| {
                    matmul_tn(&self.entries[a.0].values, up, m, k, n, gb);
                });
            }
            Op::MatmulTransB { a, b } => {
                let (m, k) = dims2(self.shape(*a));
                let n = dims2(self.shape(*b)).0;
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                self.accumulate_fn(grads, *a, |ga| {
                    matmul_nn(up, &self.entries[b.0].values, m, n, k, ga);
                });
                self.accumulate_fn(grads, *b, |gb| {
                    matmul_tn(up, &self.entries[a.0].values, m, n, k, gb);
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, up);
                self.accumulate(grads, *b, up);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, up);
                self.accumulate_fn(grads, *b, |gb| {
                    for (g, u) in gb.iter_mut().zip(up) {
                        *g -= u;
                    }
                });
            }
            Op::Mul { a, b } => {
                self.accumulate_fn(grads, *a, |ga| {
                    for ((g, u), bv) in ga.iter_mut().zip(up).zip(&self.entries[b.0].values) {
                        *g += u * bv;
                    }
                });
                self.accumulate_fn(grads, *b, |gb| {
                    for ((g, u), av) in gb.iter_mut().zip(up).zip(&self.entries[a.0].values) {
                        *g += u * av;
                    }
                });
            }
            Op::AddRow { a, row } => {
                let (m, n) = dims2(&entry.shape);
                self.accumulate(grads, *a, up);
                self.accumulate_fn(grads, *row, |gr| {
                    for i in 0..m {
                        for j in 0..n {
                            gr[j] += up[i * n + j];
                        }
                    }
                });
            }
            Op::Relu { x } => {
                self.accumulate_fn(grads, *x, |gx| {
                    for ((g, u), v) in gx.iter_mut().zip(up).zip(&self.entries[x.0].values) {
                        if *v > 0.0 {
                            *g += u;
                        }
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let (m, n) = dims2(&entry.shape);
                let p = &entry.values;
                self.accumulate_fn(grads, *x, |gx| {
                    for i in 0..m {
                        let pr = &p[i * n..(i + 1) * n];
                        let ur = &up[i * n..(i + 1) * n];
                        let dot: f64 = pr.iter().zip(ur).map(|(pv, uv)| pv * uv).sum();
                        for j in 0..n {
                            gx[i * n + j] += pr[j] * (ur[j] - dot);
                        }
                    }
                });
            }
            Op::MaskedSoftmaxRows { x, mask } => {
                let (m, n) = dims2(&entry.shape);
                let p = &entry.values;
                self.accumulate_fn(grads, *x, |gx| {
                    for i in 0..m {
                        let pr = &p[i * n..(i + 1) * n];
                        let ur = &up[i * n..(i + 1) * n];
                        let dot: f64 = (0..n)
                            .filter(|&j| mask[j])
                            .map(|j| pr[j] * ur[j])
                            .sum();
                        for j in 0..n {
                            if mask[j] {
                                gx[i * n + j] += pr[j] * (ur[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let (m, n) = dims2(&entry.shape);
                let xv = &self.entries[x.0].values;
                let gv = &self.entries[gain.0].values;
                self.accumulate_fn(grads, *bias, |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += up[i * n + j];
                        }
                    }
                });
                self.accumulate_fn(grads, *gain, |gg| {
                    for i in 0..m {
                        for j in 0..n {
                            let xhat = (xv[i * n + j] - mean[i]) * inv_std[i];
                            gg[j] += up[i * n + j] * xhat;
                        }
                    }
                });
                self.accumulate_fn(grads, *x, |gx| {
                    for i in 0..m {
                        // dxhat = up ⊙ gain; dx = (dxhat − mean(dxhat) − xhat·mean(dxhat⊙xhat)) / std
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (xv[i * n + j] - mean[i]) * inv_std[i];
                            let dxhat = up[i * n + j] * gv[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= n as f64;
                        mean_dxhat_xhat /= n as f64;
                        for j in 0..n {
                            let xhat = (xv[i * n + j] - mean[i]) * inv_std[i];
                            let dxhat = up[i * n + j] * gv[j];
                            gx[i * n + j] +=
                                (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std[i];
                        }
                    }
                });
            }
            Op::ConcatLastDim { parts } => {
                let total = dims2(&entry.shape).1;
                let m = dims2(&entry.shape).0;
                let mut offset = 0;
                for &p in parts {
                    let n = dims2(self.shape(p)).1;
                    self.accumulate_fn(grads, p, |gp| {
                        for i in 0..m {
                            for j in 0..n {
                                gp[i * n + j] += up[i * total + offset + j];
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::ConcatRows { parts } => {
                let n = dims2(&entry.shape).1;
                let mut row = 0;
                for &p in parts {
                    let mp = dims2(self.shape(p)).0;
                    self.accumulate(grads, p, &up[row * n..(row + mp) * n]);
                    row += mp;
                }
            }
            Op::MeanRows { x } => {
                let (m, n) = dims2(self.shape(*x));
                self.accumulate_fn(grads, *x, |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += up[j] / m as f64;
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let n = dims2(self.shape(*x)).1;
                self.accumulate_fn(grads, *x, |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            gx[src * n + j] += up[r * n + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = dims2(self.shape(*x));
                self.accumulate_fn(grads, *x, |gx| {
                    for i in 0..m {
                        for j in 0..*len {
                            gx[i * n + start + j] += up[i * len + j];
                        }
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate_fn(grads, *x, |gx| {
                    for (g, u) in gx.iter_mut().zip(up) {
                        *g += c * u;
                    }
                });
            }
            Op::Log { x } => {
                self.accumulate_fn(grads, *x, |gx| {
                    for ((g, u), v) in gx.iter_mut().zip(up).zip(&self.entries[x.0].values) {
                        *g += u / v;
                    }
                });
            }
            Op::Square { x } => {
                self.accumulate_fn(grads, *x, |gx| {
                    for ((g, u), v) in gx.iter_mut().zip(up).zip(&self.entries[x.0].values) {
                        *g += 2.0 * v * u;
                    }
                });
            }
            Op::Sum { x } => {
                self.accumulate_fn(grads, *x, |gx| {
                    for g in gx.iter_mut() {
                        *g += up[0];
                    }
                });
            }
            Op::Pick { x, r, c } => {
                let n = dims2(self.shape(*x)).1;
                let (r, c) = (*r, *c);
                self.accumulate_fn(grads, *x, |gx| {
                    gx[r * n + c] += up[0];
                });
            }
            Op::XLogX { x } => {
                self.accumulate_fn(grads, *x, |gx| {
                    for ((g, u), v) in gx.iter_mut().zip(up).zip(&self.entries[x.0].values) {
                        if *v > 0.0 {
                            *g += u * (v.ln() + 1.0);
                        }
                    }
                });
            }
            Op::StopGradient => {}
        }
    }
}

/// Gradient buffers produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, x: Tx) -> Option<&[f64]> {
        self.grads[x.0].as_deref()
    }
}

/// Caches parameter leaves on a tape so a parameter used many times in one
/// forward pass accumulates its gradient on a single leaf, then flushes those
/// gradients back into the [`ParameterSet`].
pub struct ParamTape<'p> {
    pub tape: Tape,
    params: &'p ParameterSet,
    bound: Vec<(String, Tx)>,
}

impl<'p> ParamTape<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        ParamTape {
            tape: Tape::new(),
            params,
            bound: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParameterSet {
        self.params
    }

    /// Tape handle for a named parameter, binding it on first use.
    pub fn p(&mut self, name: &str) -> Result<Tx> {
        if let Some((_, tx)) = self.bound.iter().find(|(n, _)| n == name) {
            return Ok(*tx);
        }
        let tensor = self.params.get(name)?;
        let tx = self.tape.leaf(tensor);
        self.bound.push((name.to_string(), tx));
        Ok(tx)
    }

    /// Registers a non-learnable input tensor.
    pub fn input(&mut self, t: &Tensor) -> Tx {
        debug_assert!(!t.requires_grad);
        self.tape.leaf(t)
    }

    /// Backward from `loss`, adding each bound parameter's gradient into
    /// `out` (normally the same set the tape was built from).
    pub fn backward_into(&mut self, loss: Tx, out: &mut ParameterSet) -> Result<()> {
        for (name, grad) in self.backward_params(loss)? {
            out.get_mut(&name)?.accumulate_grad(&grad);
        }
        Ok(())
    }

    /// Backward from `loss`, returning (parameter name, gradient) pairs for
    /// the bound parameters that received gradient.
    pub fn backward_params(&mut self, loss: Tx) -> Result<Vec<(String, Vec<f64>)>> {
        let grads = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter_map(|(name, tx)| grads.get(*tx).map(|g| (name.clone(), g.to_vec())))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.leaf(&t2(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(&[vec![1.0, 2.0]]));
        let b = tape.leaf(&t2(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(&[vec![1.0, 2.0]]));
        let b = tape.leaf(&t2(&[vec![3.0, 4.0]]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![0.0, 0.0], vec![1000.0, 0.0]]));
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.values(s);
        assert_eq!(&v[0..2], &[0.5, 0.5]);
        assert!(v[2] > 0.999_999 && v[2].is_finite());
        assert!(v[3] < 1e-6 && v[3] >= 0.0);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![f64::NAN, 0.0]);
        assert!(tape.softmax_rows(x).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_positive() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let vals: Vec<f64> = (0..12).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(vec![3, 4], vals);
            let s = tape.softmax_rows(x).unwrap();
            for i in 0..3 {
                let row = &tape.values(s)[i * 4..(i + 1) * 4];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-9);
                assert!(row.iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![5.0, 5.0, 5.0]]));
        let gain = tape.constant(vec![3], vec![1.0; 3]);
        let bias = tape.constant(vec![3], vec![0.0; 3]);
        let y = tape.layer_norm(x, gain, bias).unwrap();
        for v in tape.values(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_preserves_already_normalized_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![1.0, -1.0]]));
        let gain = tape.constant(vec![2], vec![1.0; 2]);
        let bias = tape.constant(vec![2], vec![0.0; 2]);
        let y = tape.layer_norm(x, gain, bias).unwrap();
        let v = tape.values(y);
        // variance epsilon shrinks the row by ~5e-6 relative
        assert!((v[0] - 1.0).abs() < 1e-4 && (v[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_output_statistics() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let vals: Vec<f64> = (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(vec![4, 5], vals);
        let gain = tape.constant(vec![5], vec![1.0; 5]);
        let bias = tape.constant(vec![5], vec![0.0; 5]);
        let y = tape.layer_norm(x, gain, bias).unwrap();
        for i in 0..4 {
            let row = &tape.values(y)[i * 5..(i + 1) * 5];
            let mean: f64 = row.iter().sum::<f64>() / 5.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn relu_and_concat_definitions() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![-1.0, 2.0]]));
        let r = tape.relu(x);
        assert_eq!(tape.values(r), &[0.0, 2.0]);

        let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = tape.constant(vec![2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let c = tape.concat_last_dim(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[2, 5]);
        assert_eq!(
            tape.values(c),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]
        );
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]).with_grad());
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![1.0, 2.0]]).with_grad());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn stop_gradient_blocks_upstream_flow() {
        // loss = sum(stop_gradient(x) * y) → grad(x) = 0, grad(y) = x
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![2.0, 3.0]]).with_grad());
        let y = tape.leaf(&t2(&[vec![5.0, 7.0]]).with_grad());
        let sx = tape.stop_gradient(x);
        let prod = tape.mul(sx, y).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(y).unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries_and_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![1.0, 5.0, 2.0, 3.0]]).with_grad());
        let mask = [true, false, true, false];
        let s = tape.masked_softmax_rows(x, &mask).unwrap();
        let v = tape.values(s).to_vec();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() <= 1e-12);
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        assert_eq!(g[1], 0.0);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn masked_softmax_all_masked_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![0.0, 0.0]);
        assert!(tape.masked_softmax_rows(x, &[false, false]).is_err());
    }

    #[test]
    fn single_feasible_action_gets_probability_one() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 4], vec![0.3, -2.0, 9.0, 0.1]);
        let s = tape
            .masked_softmax_rows(x, &[false, false, false, true])
            .unwrap();
        assert_eq!(tape.values(s), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn gather_rows_backward_scatters() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]).with_grad());
        let g = tape.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(tape.values(g), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = tape.sum(g);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn param_tape_binds_each_parameter_once() {
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let mut pt = ParamTape::new(&params);
        let w1 = pt.p("w").unwrap();
        let w2 = pt.p("w").unwrap();
        assert_eq!(w1, w2);
        // loss = w * w → dw = 2w = 4
        let prod = pt.tape.mul(w1, w2).unwrap();
        let loss = pt.tape.sum(prod);
        let mut out = params.clone();
        pt.backward_into(loss, &mut out).unwrap();
        assert_eq!(out.get("w").unwrap().grad.as_deref(), Some(&[4.0][..]));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let run = |vals: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.constant(vec![4, 6], vals.to_vec());
            let s = tape.softmax_rows(x).unwrap();
            let r = tape.relu(s);
            let m = tape.mean_rows(r);
            tape.values(m).to_vec()
        };
        let a = run(&vals);
        let b = run(&vals);
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
