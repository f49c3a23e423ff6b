//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] owns every intermediate buffer of one forward computation.
//! Ops compute eagerly, validate shapes, check their outputs for NaN/Inf, and
//! record just enough to replay themselves backward. [`Tape::backward`] walks
//! the recorded ops in reverse, accumulating gradients additively (fan-in
//! sums, zero-initialized), and returns per-node gradients for the leaves the
//! caller cares about.
//!
//! Tapes are single-threaded and cheap to build; training constructs a fresh
//! tape per step. Forward values are deterministic: rebuilding the same graph
//! from the same inputs reproduces every buffer bit for bit.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value on a specific tape. Using a node on any other tape is an
/// error, caught via the embedded tape id.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Node {
    tape: u32,
    idx: u32,
}

struct Slot {
    data: Vec<f64>,
    shape: Vec<usize>,
}

enum Op {
    MatMul { a: u32, b: u32, out: u32, m: usize, k: usize, n: usize },
    /// `broadcast` means `b` is rank-1 and added to every row of `a`.
    Add { a: u32, b: u32, out: u32, broadcast: bool },
    Sub { a: u32, b: u32, out: u32, broadcast: bool },
    Mul { a: u32, b: u32, out: u32 },
    Div { a: u32, b: u32, out: u32 },
    Scale { a: u32, out: u32, c: f64 },
    AddScalar { a: u32, out: u32 },
    Exp { a: u32, out: u32 },
    Log { a: u32, out: u32 },
    Square { a: u32, out: u32 },
    Relu { a: u32, out: u32 },
    Softplus { a: u32, out: u32 },
    Sigmoid { a: u32, out: u32 },
    SoftmaxRows { a: u32, out: u32, rows: usize, cols: usize },
    LogSoftmaxRows { a: u32, out: u32, rows: usize, cols: usize },
    SumAll { a: u32, out: u32 },
    MeanAll { a: u32, out: u32 },
    ConcatCols { a: u32, b: u32, out: u32, rows: usize, ca: usize, cb: usize },
    NarrowCols { a: u32, out: u32, rows: usize, cols: usize, start: usize, len: usize },
    /// Forward: one-hot of the row argmax (ties to the lowest index).
    /// Backward: upstream gradient passed through unchanged.
    StOnehot { a: u32, out: u32 },
}

pub struct Tape {
    id: u32,
    slots: Vec<Slot>,
    ops: Vec<Op>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op, detail: format!("output element {} is {}", i, data[i]) });
    }
    Ok(())
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            slots: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Node> {
        check_finite(op, &data)?;
        let idx = self.slots.len() as u32;
        self.slots.push(Slot { data, shape });
        Ok(Node { tape: self.id, idx })
    }

    fn slot(&self, n: Node, op: &'static str) -> Result<&Slot> {
        if n.tape != self.id {
            return Err(Error::Invalid(format!(
                "{}: node belongs to tape {}, this is tape {}",
                op, n.tape, self.id
            )));
        }
        Ok(&self.slots[n.idx as usize])
    }

    pub fn value(&self, n: Node) -> &[f64] {
        assert_eq!(n.tape, self.id, "node from another tape");
        &self.slots[n.idx as usize].data
    }

    pub fn shape(&self, n: Node) -> &[usize] {
        assert_eq!(n.tape, self.id, "node from another tape");
        &self.slots[n.idx as usize].shape
    }

    pub fn tensor(&self, n: Node) -> Tensor {
        let s = &self.slots[n.idx as usize];
        Tensor::new(s.shape.clone(), s.data.clone()).expect("tape slots hold valid tensors")
    }

    /// Register an input or parameter. Values are copied onto the tape and
    /// re-checked for finiteness (parameters are mutated between steps).
    pub fn leaf(&mut self, t: &Tensor) -> Result<Node> {
        self.push("leaf", t.shape().to_vec(), t.data().to_vec())
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Result<Node> {
        self.push("leaf", vec![], vec![v])
    }

    // ── Binary ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        let sa = self.slot(a, "matmul")?.shape.clone();
        let sb = self.slot(b, "matmul")?.shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} @ {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_into(
            &self.slots[a.idx as usize].data,
            &self.slots[b.idx as usize].data,
            m,
            k,
            n,
            &mut out,
        );
        let node = self.push("matmul", vec![m, n], out)?;
        self.ops.push(Op::MatMul { a: a.idx, b: b.idx, out: node.idx, m, k, n });
        Ok(node)
    }

    fn add_like(&mut self, a: Node, b: Node, sub: bool) -> Result<Node> {
        let opname: &'static str = if sub { "sub" } else { "add" };
        let sa = self.slot(a, opname)?.shape.clone();
        let sb = self.slot(b, opname)?.shape.clone();
        let broadcast = sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1];
        if !broadcast && sa != sb {
            return Err(Error::Shape { op: opname, detail: format!("{:?} vs {:?}", sa, sb) });
        }
        let av = &self.slots[a.idx as usize].data;
        let bv = &self.slots[b.idx as usize].data;
        let sign = if sub { -1.0 } else { 1.0 };
        let out: Vec<f64> = if broadcast {
            let n = sb[0];
            av.iter().enumerate().map(|(i, &x)| x + sign * bv[i % n]).collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| x + sign * y).collect()
        };
        let node = self.push(opname, sa, out)?;
        let op = if sub {
            Op::Sub { a: a.idx, b: b.idx, out: node.idx, broadcast }
        } else {
            Op::Add { a: a.idx, b: b.idx, out: node.idx, broadcast }
        };
        self.ops.push(op);
        Ok(node)
    }

    /// Elementwise sum; `b` may be rank-1 matching the columns of a rank-2
    /// `a`, in which case it is broadcast over the leading (batch) dim.
    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.add_like(a, b, false)
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.add_like(a, b, true)
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        let sa = self.slot(a, "mul")?.shape.clone();
        let sb = self.slot(b, "mul")?.shape.clone();
        if sa != sb {
            return Err(Error::Shape { op: "mul", detail: format!("{:?} vs {:?}", sa, sb) });
        }
        let out: Vec<f64> = self.slots[a.idx as usize]
            .data
            .iter()
            .zip(&self.slots[b.idx as usize].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let node = self.push("mul", sa, out)?;
        self.ops.push(Op::Mul { a: a.idx, b: b.idx, out: node.idx });
        Ok(node)
    }

    pub fn div(&mut self, a: Node, b: Node) -> Result<Node> {
        let sa = self.slot(a, "div")?.shape.clone();
        let sb = self.slot(b, "div")?.shape.clone();
        if sa != sb {
            return Err(Error::Shape { op: "div", detail: format!("{:?} vs {:?}", sa, sb) });
        }
        if let Some(i) = self.slots[b.idx as usize].data.iter().position(|&v| v == 0.0) {
            return Err(Error::Invalid(format!("div: denominator element {} is zero", i)));
        }
        let out: Vec<f64> = self.slots[a.idx as usize]
            .data
            .iter()
            .zip(&self.slots[b.idx as usize].data)
            .map(|(&x, &y)| x / y)
            .collect();
        let node = self.push("div", sa, out)?;
        self.ops.push(Op::Div { a: a.idx, b: b.idx, out: node.idx });
        Ok(node)
    }

    pub fn concat_cols(&mut self, a: Node, b: Node) -> Result<Node> {
        let sa = self.slot(a, "concat_cols")?.shape.clone();
        let sb = self.slot(b, "concat_cols")?.shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Shape { op: "concat_cols", detail: format!("{:?} ++ {:?}", sa, sb) });
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let av = &self.slots[a.idx as usize].data;
        let bv = &self.slots[b.idx as usize].data;
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let node = self.push("concat_cols", vec![rows, ca + cb], out)?;
        self.ops.push(Op::ConcatCols { a: a.idx, b: b.idx, out: node.idx, rows, ca, cb });
        Ok(node)
    }

    // ── Unary ops ───────────────────────────────────────────────────────

    fn unary(
        &mut self,
        a: Node,
        opname: &'static str,
        f: impl Fn(f64) -> f64,
        make: impl Fn(u32, u32) -> Op,
    ) -> Result<Node> {
        let shape = self.slot(a, opname)?.shape.clone();
        let out: Vec<f64> = self.slots[a.idx as usize].data.iter().map(|&x| f(x)).collect();
        let node = self.push(opname, shape, out)?;
        self.ops.push(make(a.idx, node.idx));
        Ok(node)
    }

    pub fn scale(&mut self, a: Node, c: f64) -> Result<Node> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale", detail: format!("factor is {}", c) });
        }
        self.unary(a, "scale", |x| c * x, |a, out| Op::Scale { a, out, c })
    }

    pub fn add_scalar(&mut self, a: Node, c: f64) -> Result<Node> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "add_scalar", detail: format!("addend is {}", c) });
        }
        self.unary(a, "add_scalar", |x| x + c, |a, out| Op::AddScalar { a, out })
    }

    pub fn exp(&mut self, a: Node) -> Result<Node> {
        self.unary(a, "exp", f64::exp, |a, out| Op::Exp { a, out })
    }

    pub fn log(&mut self, a: Node) -> Result<Node> {
        if let Some(i) = self.slot(a, "log")?.data.iter().position(|&v| v <= 0.0) {
            return Err(Error::Invalid(format!(
                "log: input element {} is {}, must be strictly positive",
                i, self.slots[a.idx as usize].data[i]
            )));
        }
        self.unary(a, "log", f64::ln, |a, out| Op::Log { a, out })
    }

    pub fn square(&mut self, a: Node) -> Result<Node> {
        self.unary(a, "square", |x| x * x, |a, out| Op::Square { a, out })
    }

    pub fn relu(&mut self, a: Node) -> Result<Node> {
        self.unary(a, "relu", |x| x.max(0.0), |a, out| Op::Relu { a, out })
    }

    pub fn softplus(&mut self, a: Node) -> Result<Node> {
        self.unary(a, "softplus", stable_softplus, |a, out| Op::Softplus { a, out })
    }

    pub fn sigmoid(&mut self, a: Node) -> Result<Node> {
        self.unary(a, "sigmoid", stable_sigmoid, |a, out| Op::Sigmoid { a, out })
    }

    fn rows_cols(&self, a: Node, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.slot(a, op)?.shape;
        if s.len() != 2 {
            return Err(Error::Shape { op, detail: format!("expected rank 2, got {:?}", s) });
        }
        Ok((s[0], s[1]))
    }

    /// Softmax over the last dim of a rank-2 tensor, max-subtracted.
    pub fn softmax_rows(&mut self, a: Node) -> Result<Node> {
        let (rows, cols) = self.rows_cols(a, "softmax_rows")?;
        let av = &self.slots[a.idx as usize].data;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &av[i * cols..(i + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (row[j] - m).exp();
                out[i * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                out[i * cols + j] /= sum;
            }
        }
        let node = self.push("softmax_rows", vec![rows, cols], out)?;
        self.ops.push(Op::SoftmaxRows { a: a.idx, out: node.idx, rows, cols });
        Ok(node)
    }

    pub fn log_softmax_rows(&mut self, a: Node) -> Result<Node> {
        let (rows, cols) = self.rows_cols(a, "log_softmax_rows")?;
        let av = &self.slots[a.idx as usize].data;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &av[i * cols..(i + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for j in 0..cols {
                out[i * cols + j] = row[j] - lse;
            }
        }
        let node = self.push("log_softmax_rows", vec![rows, cols], out)?;
        self.ops.push(Op::LogSoftmaxRows { a: a.idx, out: node.idx, rows, cols });
        Ok(node)
    }

    pub fn sum(&mut self, a: Node) -> Result<Node> {
        let _ = self.slot(a, "sum")?;
        let s: f64 = self.slots[a.idx as usize].data.iter().sum();
        let node = self.push("sum", vec![], vec![s])?;
        self.ops.push(Op::SumAll { a: a.idx, out: node.idx });
        Ok(node)
    }

    pub fn mean(&mut self, a: Node) -> Result<Node> {
        let slot = self.slot(a, "mean")?;
        if slot.data.is_empty() {
            return Err(Error::Shape { op: "mean", detail: "empty tensor".into() });
        }
        let s: f64 = slot.data.iter().sum::<f64>() / slot.data.len() as f64;
        let node = self.push("mean", vec![], vec![s])?;
        self.ops.push(Op::MeanAll { a: a.idx, out: node.idx });
        Ok(node)
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn narrow_cols(&mut self, a: Node, start: usize, len: usize) -> Result<Node> {
        let (rows, cols) = self.rows_cols(a, "narrow_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::Shape {
                op: "narrow_cols",
                detail: format!("range {}..{} of {} cols", start, start + len, cols),
            });
        }
        let av = &self.slots[a.idx as usize].data;
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&av[i * cols + start..i * cols + start + len]);
        }
        let node = self.push("narrow_cols", vec![rows, len], out)?;
        self.ops.push(Op::NarrowCols { a: a.idx, out: node.idx, rows, cols, start, len });
        Ok(node)
    }

    /// Straight-through discretization: forward emits the one-hot argmax of
    /// each row (ties to the lowest index); backward passes the upstream
    /// gradient through unchanged, as if the op were the identity.
    pub fn straight_through_onehot(&mut self, a: Node) -> Result<Node> {
        let (rows, cols) = self.rows_cols(a, "straight_through_onehot")?;
        let av = &self.slots[a.idx as usize].data;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &av[i * cols..(i + 1) * cols];
            let best = crate::tensor::argmax(row);
            out[i * cols + best] = 1.0;
        }
        let node = self.push("straight_through_onehot", vec![rows, cols], out)?;
        self.ops.push(Op::StOnehot { a: a.idx, out: node.idx });
        Ok(node)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively into
    /// zero-initialized buffers; nodes that do not influence the loss report
    /// no gradient.
    pub fn backward(&self, loss: Node) -> Result<Gradients> {
        let slot = self.slot(loss, "backward")?;
        if slot.data.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, shape is {:?}", slot.shape),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        grads[loss.idx as usize] = Some(vec![1.0]);

        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.slots[i].shape.clone(), data)
                        .expect("gradient buffers match slot shapes")
                })
            })
            .collect::<Vec<_>>();
        Ok(Gradients { tape: self.id, grads })
    }

    fn backward_op(&self, op: &Op, grads: &mut [Option<Vec<f64>>]) {
        // Accumulate `v` into the gradient of slot `idx`, allocating on first
        // touch. Closure-free so the borrow checker allows two targets per op.
        macro_rules! acc {
            ($idx:expr, $f:expr) => {{
                let idx = $idx as usize;
                if grads[idx].is_none() {
                    grads[idx] = Some(vec![0.0; self.slots[idx].data.len()]);
                }
                let g = grads[idx].as_mut().unwrap();
                #[allow(clippy::redundant_closure_call)]
                ($f)(g);
            }};
        }

        match *op {
            Op::MatMul { a, b, out, m, k, n } => {
                let Some(d) = grads[out as usize].clone() else { return };
                let av = &self.slots[a as usize].data;
                let bv = &self.slots[b as usize].data;
                // dA += d @ B^T
                acc!(a, |g: &mut Vec<f64>| {
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += d[i * n + j] * bv[kk * n + j];
                            }
                            g[i * k + kk] += s;
                        }
                    }
                });
                // dB += A^T @ d
                acc!(b, |g: &mut Vec<f64>| {
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                g[kk * n + j] += aik * d[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add { a, b, out, broadcast } | Op::Sub { a, b, out, broadcast } => {
                let Some(d) = grads[out as usize].clone() else { return };
                let sign = if matches!(op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                acc!(a, |g: &mut Vec<f64>| {
                    for (gi, di) in g.iter_mut().zip(&d) {
                        *gi += di;
                    }
                });
                if broadcast {
                    let n = self.slots[b as usize].data.len();
                    acc!(b, |g: &mut Vec<f64>| {
                        for (i, di) in d.iter().enumerate() {
                            g[i % n] += sign * di;
                        }
                    });
                } else {
                    acc!(b, |g: &mut Vec<f64>| {
                        for (gi, di) in g.iter_mut().zip(&d) {
                            *gi += sign * di;
                        }
                    });
                }
            }
            Op::Mul { a, b, out } => {
                let Some(d) = grads[out as usize].clone() else { return };
                let av = &self.slots[a as usize].data;
                let bv = &self.slots[b as usize].data;
                acc!(a, |g: &mut Vec<f64>| {
                    for i in 0..d.len() {
                        g[i] += d[i] * bv[i];
                    }
                });
                acc!(b, |g: &mut Vec<f64>| {
                    for i in 0..d.len() {
                        g[i] += d[i] * av[i];
                    }
                });
            }
            Op::Div { a, b, out } => {
                let Some(d) = grads[out as usize].clone() else { return };
                let av = &self.slots[a as usize].data;
                let bv = &self.slots[b as usize].data;
                acc!(a, |g: &mut Vec<f64>| {
                    for i in 0..d.len() {
                        g[i] += d[i] / bv[i];
                    }
                });
                acc!(b, |g: &mut Vec<f64>| {
                    for i in 0..d.len() {
                        g[i] -= d[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale { a, out, c } => {
                let Some(d) = grads[out as usize].clone() else { return };
                acc!(a, |g: &mut Vec<f64>| {
                    for i in 0..d.len() {
                        g[i] += c * d[i];
                    }
                });
            }
            Op::AddScalar { a, out } | Op::StOnehot { a, out } => {
                let Some(d) = grads[out as usize].clone() else { return };
                acc!(a, |g: &mut Vec<f64>| {
                    for i in 0..d.len() {
                        g[i] += d[i];
                    }
                });
            }
            Op::Exp { a, out } => {
                let Some(d) = grads[out as usize].clone() else { return };
                let ov = &self.slots[out as usize].data;
                acc!(a, |g: &mut Vec<f64>| {
                    for i in 0..d.len() {
                        g[i] += d[i] * ov[i];
                    }
                });
            }
            Op::Log { a, out } => {
                let Some(d) = grads[out as usize].clone() else { return };
                let av = &self.slots[a as usize].data;
                acc!(a, |g: &mut Vec<f64>| {
                    for i in 0..d.len() {
                        g[i] += d[i] / av[i];
                    }
                });
            }
            Op::Square { a, out } => {
                let Some(d) = grads[out as usize].clone() else { return };
                let av = &self.slots[a as usize].data;
                acc!(a, |g: &mut Vec<f64>| {
                    for i in 0..d.len() {
                        g[i] += 2.0 * av[i] * d[i];
                    }
                });
            }
            Op::Relu { a, out } => {
                let Some(d) = grads[out as usize].clone() else { return };
                let av = &self.slots[a as usize].data;
                // Subgradient 0 at the kink.
                acc!(a, |g: &mut Vec<f64>| {
                    for i in 0..d.len() {
                        if av[i] > 0.0 {
                            g[i] += d[i];
                        }
                    }
                });
            }
            Op::Softplus { a, out } => {
                let Some(d) = grads[out as usize].clone() else { return };
                let av = &self.slots[a as usize].data;
                acc!(a, |g: &mut Vec<f64>| {
                    for i in 0..d.len() {
                        g[i] += d[i] * stable_sigmoid(av[i]);
                    }
                });
            }
            Op::Sigmoid { a, out } => {
                let Some(d) = grads[out as usize].clone() else { return };
                let ov = &self.slots[out as usize].data;
                acc!(a, |g: &mut Vec<f64>| {
                    for i in 0..d.len() {
                        g[i] += d[i] * ov[i] * (1.0 - ov[i]);
                    }
                });
            }
            Op::SoftmaxRows { a, out, rows, cols } => {
                let Some(d) = grads[out as usize].clone() else { return };
                let y = &self.slots[out as usize].data;
                acc!(a, |g: &mut Vec<f64>| {
                    for i in 0..rows {
                        let base = i * cols;
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += d[base + j] * y[base + j];
                        }
                        for j in 0..cols {
                            g[base + j] += y[base + j] * (d[base + j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows { a, out, rows, cols } => {
                let Some(d) = grads[out as usize].clone() else { return };
                let y = &self.slots[out as usize].data;
                acc!(a, |g: &mut Vec<f64>| {
                    for i in 0..rows {
                        let base = i * cols;
                        let dsum: f64 = d[base..base + cols].iter().sum();
                        for j in 0..cols {
                            g[base + j] += d[base + j] - y[base + j].exp() * dsum;
                        }
                    }
                });
            }
            Op::SumAll { a, out } => {
                let Some(d) = grads[out as usize].clone() else { return };
                let dv = d[0];
                acc!(a, |g: &mut Vec<f64>| {
                    for gi in g.iter_mut() {
                        *gi += dv;
                    }
                });
            }
            Op::MeanAll { a, out } => {
                let Some(d) = grads[out as usize].clone() else { return };
                let n = self.slots[a as usize].data.len() as f64;
                let dv = d[0] / n;
                acc!(a, |g: &mut Vec<f64>| {
                    for gi in g.iter_mut() {
                        *gi += dv;
                    }
                });
            }
            Op::ConcatCols { a, b, out, rows, ca, cb } => {
                let Some(d) = grads[out as usize].clone() else { return };
                let cols = ca + cb;
                acc!(a, |g: &mut Vec<f64>| {
                    for i in 0..rows {
                        for j in 0..ca {
                            g[i * ca + j] += d[i * cols + j];
                        }
                    }
                });
                acc!(b, |g: &mut Vec<f64>| {
                    for i in 0..rows {
                        for j in 0..cb {
                            g[i * cb + j] += d[i * cols + ca + j];
                        }
                    }
                });
            }
            Op::NarrowCols { a, out, rows, cols, start, len } => {
                let Some(d) = grads[out as usize].clone() else { return };
                acc!(a, |g: &mut Vec<f64>| {
                    for i in 0..rows {
                        for j in 0..len {
                            g[i * cols + start + j] += d[i * len + j];
                        }
                    }
                });
            }
        }
    }
}

/// Gradient of the loss with respect to every node that influences it.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// None when the node does not affect the loss (its gradient is zero).
    pub fn get(&self, n: Node) -> Option<&Tensor> {
        assert_eq!(n.tape, self.tape, "node from another tape");
        self.grads[n.idx as usize].as_ref()
    }

    pub fn take(&mut self, n: Node) -> Option<Tensor> {
        assert_eq!(n.tape, self.tape, "node from another tape");
        self.grads[n.idx as usize].take()
    }
}

/// Max over coordinates of `|analytic - central| / max(1, |central|)` where
/// `central` is the two-sided difference quotient of `f` with step `h`.
/// The probe function sees a perturbed copy of `x0`; `analytic` is the
/// gradient under test, one value per coordinate.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    analytic: &[f64],
    x0: &[f64],
    h: f64,
) -> Result<f64> {
    if analytic.len() != x0.len() {
        return Err(Error::Shape {
            op: "finite_diff_check",
            detail: format!("{} analytic values for {} coordinates", analytic.len(), x0.len()),
        });
    }
    if h <= 0.0 {
        return Err(Error::Invalid("finite_diff_check: h must be positive".into()));
    }
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x)?;
        x[i] = orig - h;
        let fm = f(&x)?;
        x[i] = orig;
        let central = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
