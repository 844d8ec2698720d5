//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and the backward sweep walks it once in reverse.

use crate::error::{Error, Result};
use crate::fft::Fft;
use crate::tensor::{gemm, RealTensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fault switches used by the self-test fixture to prove the gradient checks
/// detect a broken adjoint. Never set in normal operation.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, Default)]
pub struct Faults {
    pub break_clip_adjoint: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Relu(Var),
    ClipZero(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Gradient passes unchanged; the constant lives only in the value.
    Shift(Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Powf(Var, f64),
    BroadcastRows(Var),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    PickRows(Var, Vec<usize>),
    StraightThrough(Var),
    Reshape(Var),
    Hermitian(Var),
    Dft(Var, bool),
    RealPart(Var),
    ToComplex(Var),
    SelectOdd(Var),
    PaprRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: RealTensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    faults: Faults,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<RealTensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&RealTensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<RealTensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: {a:?} vs {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_faults(faults: Faults) -> Self {
        Self {
            nodes: Vec::new(),
            faults,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: RealTensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf; receives a gradient.
    pub fn param(&mut self, value: RealTensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: RealTensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &RealTensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// `x·W + b` for `x: B×I`, `W: I×O`, `b: O`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, i) = self.value(x).dims2();
        let ws = self.value(w).shape().to_vec();
        let bshape = self.value(b).shape().to_vec();
        if ws.len() != 2 || ws[0] != i {
            return Err(dim_err("affine x·W", self.value(x).shape(), &ws));
        }
        let o = ws[1];
        if bshape.iter().product::<usize>() != o {
            return Err(dim_err("affine bias", &ws, &bshape));
        }
        let mut out = vec![0.0; bs * o];
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(o) {
            row.copy_from_slice(bias);
        }
        gemm(
            bs,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            true,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            RealTensor::new(vec![bs, o], out)?,
            Op::Affine { x, w, b },
            ng,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(dim_err(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(RealTensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `max(0, x)`; subgradient 0 at 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| t.max(0.0));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    /// Zero-clipping `max(0, x)` whose adjoint passes at exactly 0.
    pub fn clip_zero(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| if t >= 0.0 { t } else { 0.0 });
        let ng = self.ng(x);
        self.push(v, Op::ClipZero(x), ng)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::Softmax(x), ng)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = log_softmax_rows(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::LogSoftmax(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        let ng = self.ng(x);
        self.push(v, Op::Exp(x), ng)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err(what, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> RealTensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        RealTensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `x + c` for a constant tensor `c`.
    pub fn add_const(&mut self, x: Var, c: &RealTensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(dim_err("add_const", self.value(x).shape(), c.shape()));
        }
        let mut v = self.value(x).clone();
        v.add_assign(c);
        let ng = self.ng(x);
        Ok(self.push(v, Op::Shift(x), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|t| t * s);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, s), ng)
    }

    /// Multiply tensor `x` by the single-element node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err("mul_scalar", self.value(s).shape(), &[1]));
        }
        let sv = self.scalar(s);
        let v = self.value(x).map(|t| t * sv);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(v, Op::MulScalar(x, s), ng))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let v = self.value(x).map(|t| t.powf(p));
        let ng = self.ng(x);
        self.push(v, Op::Powf(x, p), ng)
    }

    /// Repeat a single row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if r != 1 {
            return Err(dim_err("broadcast_rows", self.value(x).shape(), &[1, c]));
        }
        let src = self.value(x).data().to_vec();
        let data = src.iter().copied().cycle().take(rows * c).collect();
        let ng = self.ng(x);
        Ok(self.push(
            RealTensor::new(vec![rows, c], data)?,
            Op::BroadcastRows(x),
            ng,
        ))
    }

    /// Sum over the last axis: `R×C → R`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        let data = self
            .value(x)
            .data()
            .chunks_exact(c.max(1))
            .map(|row| row.iter().sum())
            .collect();
        let ng = self.ng(x);
        self.push(
            RealTensor::new(vec![r], data).expect("rows"),
            Op::SumCols(x),
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = RealTensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let v = RealTensor::scalar(self.value(x).sum() / n);
        let ng = self.ng(x);
        self.push(v, Op::Mean(x), ng)
    }

    /// `out[r] = x[r, idx[r]]`.
    pub fn pick_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if idx.len() != r || idx.iter().any(|&i| i >= c) {
            return Err(Error::Dimension(format!(
                "pick_rows: {} indices for {r}×{c}",
                idx.len()
            )));
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(row, &i)| self.value(x).get2(row, i))
            .collect();
        let ng = self.ng(x);
        Ok(self.push(RealTensor::new(vec![r], data)?, Op::PickRows(x, idx), ng))
    }

    /// Forward value is `hard`; the adjoint is passed to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: RealTensor) -> Result<Var> {
        if self.value(soft).shape() != hard.shape() {
            return Err(dim_err("straight_through", self.value(soft).shape(), hard.shape()));
        }
        let ng = self.ng(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    /// Hermitian subcarrier layout per row: `F×2N` interleaved data to
    /// `F×8N` interleaved `4N`-point spectrum.
    pub fn hermitian(&mut self, x: Var) -> Result<Var> {
        let (f, two_n) = self.value(x).dims2();
        if two_n % 2 != 0 || two_n == 0 {
            return Err(Error::Dimension(format!("hermitian: row width {two_n}")));
        }
        let n = two_n / 2;
        let l = 4 * n;
        let mut out = vec![0.0; f * 2 * l];
        for (src, dst) in self
            .value(x)
            .data()
            .chunks_exact(two_n)
            .zip(out.chunks_exact_mut(2 * l))
        {
            for k in 0..n {
                let (re, im) = (src[2 * k], src[2 * k + 1]);
                let pos = 2 * k + 1;
                let neg = l - pos;
                dst[2 * pos] = re;
                dst[2 * pos + 1] = im;
                dst[2 * neg] = re;
                dst[2 * neg + 1] = -im;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(RealTensor::new(vec![f, 2 * l], out)?, Op::Hermitian(x), ng))
    }

    /// Row-wise unitary DFT on interleaved complex rows.
    pub fn dft(&mut self, x: Var, inverse: bool) -> Result<Var> {
        let (f, two_l) = self.value(x).dims2();
        let plan = Fft::new(two_l / 2)?;
        let mut v = self.value(x).clone().reshape(&[f, two_l])?;
        for row in v.data_mut().chunks_exact_mut(two_l) {
            plan.process_interleaved(row, inverse);
        }
        let ng = self.ng(x);
        Ok(self.push(v, Op::Dft(x, inverse), ng))
    }

    /// Real parts of interleaved complex rows. Fails when any imaginary part
    /// reaches `tol`.
    pub fn real_part(&mut self, x: Var, tol: f64) -> Result<Var> {
        let (f, two_l) = self.value(x).dims2();
        let src = self.value(x).data();
        let worst = src
            .iter()
            .skip(1)
            .step_by(2)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if worst >= tol {
            return Err(Error::Consistency(format!(
                "imaginary residue {worst:e} after IFFT (Hermitian layout broken)"
            )));
        }
        let data = src.iter().step_by(2).copied().collect();
        let ng = self.ng(x);
        Ok(self.push(
            RealTensor::new(vec![f, two_l / 2], data)?,
            Op::RealPart(x),
            ng,
        ))
    }

    /// Real rows to interleaved complex rows with zero imaginary part.
    pub fn to_complex(&mut self, x: Var) -> Var {
        let (f, l) = self.value(x).dims2();
        let data = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| [v, 0.0])
            .collect();
        let ng = self.ng(x);
        self.push(
            RealTensor::new(vec![f, 2 * l], data).expect("shape"),
            Op::ToComplex(x),
            ng,
        )
    }

    /// Data subcarriers `1, 3, …, 2N−1` of interleaved `4N`-point rows.
    pub fn select_odd(&mut self, x: Var) -> Result<Var> {
        let (f, two_l) = self.value(x).dims2();
        if two_l % 8 != 0 {
            return Err(Error::Dimension(format!("select_odd: row width {two_l}")));
        }
        let n = two_l / 8;
        let mut out = Vec::with_capacity(f * 2 * n);
        for row in self.value(x).data().chunks_exact(two_l) {
            for k in 0..n {
                let pos = 2 * k + 1;
                out.push(row[2 * pos]);
                out.push(row[2 * pos + 1]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(RealTensor::new(vec![f, 2 * n], out)?, Op::SelectOdd(x), ng))
    }

    /// Per-row `max|x|² / mean|x|²`. The max adjoint goes to the first
    /// argmax on ties.
    pub fn papr_rows(&mut self, x: Var) -> Result<Var> {
        let (f, l) = self.value(x).dims2();
        let mut vals = Vec::with_capacity(f);
        let mut arg = Vec::with_capacity(f);
        for row in self.value(x).data().chunks_exact(l) {
            let (a, peak) = first_argmax_sq(row);
            let mean = row.iter().map(|v| v * v).sum::<f64>() / l as f64;
            if mean <= 0.0 {
                return Err(Error::UndefinedPapr);
            }
            vals.push(peak / mean);
            arg.push(a);
        }
        let ng = self.ng(x);
        Ok(self.push(RealTensor::new(vec![f], vals)?, Op::PaprRows(x, arg), ng))
    }

    /// Reverse sweep from the single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<RealTensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(RealTensor::filled(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<RealTensor>], v: Var, g: RealTensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn with_shape_of(&self, v: Var, data: Vec<f64>) -> RealTensor {
        RealTensor::new(self.value(v).shape().to_vec(), data).expect("adjoint shape")
    }

    fn propagate(&self, i: usize, g: &RealTensor, grads: &mut [Option<RealTensor>]) {
        let node = &self.nodes[i];
        if !node.needs_grad {
            return;
        }
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (bs, inp) = self.value(*x).dims2();
                let o = out.dims2().1;
                if self.ng(*x) {
                    let mut dx = vec![0.0; bs * inp];
                    gemm(bs, o, inp, g.data(), false, self.value(*w).data(), true, &mut dx, false);
                    let t = self.with_shape_of(*x, dx);
                    self.accum(grads, *x, t);
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; inp * o];
                    gemm(inp, bs, o, self.value(*x).data(), true, g.data(), false, &mut dw, false);
                    let t = self.with_shape_of(*w, dw);
                    self.accum(grads, *w, t);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; o];
                    for row in g.data().chunks_exact(o) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let t = self.with_shape_of(*b, db);
                    self.accum(grads, *b, t);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut da, false);
                    let t = self.with_shape_of(*a, da);
                    self.accum(grads, *a, t);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut db, false);
                    let t = self.with_shape_of(*b, db);
                    self.accum(grads, *b, t);
                }
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                let t = self.with_shape_of(*x, d);
                self.accum(grads, *x, t);
            }
            Op::ClipZero(x) => {
                let broken = self.faults.break_clip_adjoint;
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let pass = if broken { v < 0.0 } else { v >= 0.0 };
                        if pass {
                            gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let t = self.with_shape_of(*x, d);
                self.accum(grads, *x, t);
            }
            Op::Softmax(x) => {
                let c = out.dims2().1;
                let mut d = Vec::with_capacity(out.len());
                for (s, gr) in out.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(s.iter().zip(gr).map(|(&si, &gi)| si * (gi - dot)));
                }
                let t = self.with_shape_of(*x, d);
                self.accum(grads, *x, t);
            }
            Op::LogSoftmax(x) => {
                let c = out.dims2().1;
                let mut d = Vec::with_capacity(out.len());
                for (ls, gr) in out.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
                    let gsum: f64 = gr.iter().sum();
                    d.extend(ls.iter().zip(gr).map(|(&l, &gi)| gi - l.exp() * gsum));
                }
                let t = self.with_shape_of(*x, d);
                self.accum(grads, *x, t);
            }
            Op::Exp(x) => {
                let d = out.data().iter().zip(g.data()).map(|(a, b)| a * b).collect();
                let t = self.with_shape_of(*x, d);
                self.accum(grads, *x, t);
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d = self.value(*b).data().iter().zip(g.data()).map(|(x, y)| x * y).collect();
                    let t = self.with_shape_of(*a, d);
                    self.accum(grads, *a, t);
                }
                if self.ng(*b) {
                    let d = self.value(*a).data().iter().zip(g.data()).map(|(x, y)| x * y).collect();
                    let t = self.with_shape_of(*b, d);
                    self.accum(grads, *b, t);
                }
            }
            Op::Shift(x) | Op::StraightThrough(x) => self.accum(grads, *x, g.clone()),
            Op::Reshape(x) => {
                let t = self.with_shape_of(*x, g.data().to_vec());
                self.accum(grads, *x, t);
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accum(grads, *x, g.map(|v| v * s));
            }
            Op::MulScalar(x, s) => {
                let sv = self.scalar(*s);
                if self.ng(*x) {
                    self.accum(grads, *x, g.map(|v| v * sv));
                }
                if self.ng(*s) {
                    let d: f64 = self.value(*x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                    let t = self.with_shape_of(*s, vec![d]);
                    self.accum(grads, *s, t);
                }
            }
            Op::Powf(x, p) => {
                let p = *p;
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * p * v.powf(p - 1.0))
                    .collect();
                let t = self.with_shape_of(*x, d);
                self.accum(grads, *x, t);
            }
            Op::BroadcastRows(x) => {
                let c = out.dims2().1;
                let mut d = vec![0.0; c];
                for row in g.data().chunks_exact(c) {
                    for (a, b) in d.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                let t = self.with_shape_of(*x, d);
                self.accum(grads, *x, t);
            }
            Op::SumCols(x) => {
                let c = self.value(*x).dims2().1;
                let d = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect();
                let t = self.with_shape_of(*x, d);
                self.accum(grads, *x, t);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                let t = self.value(*x).map(|_| gv);
                self.accum(grads, *x, t);
            }
            Op::Mean(x) => {
                let gv = g.data()[0] / self.value(*x).len().max(1) as f64;
                let t = self.value(*x).map(|_| gv);
                self.accum(grads, *x, t);
            }
            Op::PickRows(x, idx) => {
                let c = self.value(*x).dims2().1;
                let mut d = vec![0.0; self.value(*x).len()];
                for (r, (&i, &gv)) in idx.iter().zip(g.data()).enumerate() {
                    d[r * c + i] = gv;
                }
                let t = self.with_shape_of(*x, d);
                self.accum(grads, *x, t);
            }
            Op::Hermitian(x) => {
                let (_, two_n) = self.value(*x).dims2();
                let n = two_n / 2;
                let l = 4 * n;
                let mut d = vec![0.0; self.value(*x).len()];
                for (dst, src) in d.chunks_exact_mut(two_n).zip(g.data().chunks_exact(2 * l)) {
                    for k in 0..n {
                        let pos = 2 * k + 1;
                        let neg = l - pos;
                        dst[2 * k] = src[2 * pos] + src[2 * neg];
                        dst[2 * k + 1] = src[2 * pos + 1] - src[2 * neg + 1];
                    }
                }
                let t = self.with_shape_of(*x, d);
                self.accum(grads, *x, t);
            }
            Op::Dft(x, inverse) => {
                let two_l = out.dims2().1;
                let plan = Fft::new(two_l / 2).expect("validated in forward");
                let mut d = g.data().to_vec();
                for row in d.chunks_exact_mut(two_l) {
                    plan.process_interleaved(row, !inverse);
                }
                let t = self.with_shape_of(*x, d);
                self.accum(grads, *x, t);
            }
            Op::RealPart(x) => {
                let d = g.data().iter().flat_map(|&v| [v, 0.0]).collect();
                let t = self.with_shape_of(*x, d);
                self.accum(grads, *x, t);
            }
            Op::ToComplex(x) => {
                let d = g.data().iter().step_by(2).copied().collect();
                let t = self.with_shape_of(*x, d);
                self.accum(grads, *x, t);
            }
            Op::SelectOdd(x) => {
                let two_l = self.value(*x).dims2().1;
                let n = two_l / 8;
                let mut d = vec![0.0; self.value(*x).len()];
                for (dst, src) in d.chunks_exact_mut(two_l).zip(g.data().chunks_exact(2 * n)) {
                    for k in 0..n {
                        let pos = 2 * k + 1;
                        dst[2 * pos] = src[2 * k];
                        dst[2 * pos + 1] = src[2 * k + 1];
                    }
                }
                let t = self.with_shape_of(*x, d);
                self.accum(grads, *x, t);
            }
            Op::PaprRows(x, arg) => {
                let l = self.value(*x).dims2().1;
                let mut d = vec![0.0; self.value(*x).len()];
                for (r, (row, dst)) in self
                    .value(*x)
                    .data()
                    .chunks_exact(l)
                    .zip(d.chunks_exact_mut(l))
                    .enumerate()
                {
                    let gv = g.data()[r];
                    let papr = out.data()[r];
                    let mean = row.iter().map(|v| v * v).sum::<f64>() / l as f64;
                    for (dv, &xv) in dst.iter_mut().zip(row) {
                        *dv = -gv * papr * 2.0 * xv / (l as f64 * mean);
                    }
                    let a = arg[r];
                    dst[a] += gv * 2.0 * row[a] / mean;
                }
                let t = self.with_shape_of(*x, d);
                self.accum(grads, *x, t);
            }
        }
    }
}

/// First index of the largest `x²` and that value.
pub(crate) fn first_argmax_sq(row: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.iter().enumerate() {
        let p = v * v;
        if p > best.1 {
            best = (i, p);
        }
    }
    best
}

pub fn softmax_rows(x: &RealTensor) -> RealTensor {
    let c = x.dims2().1.max(1);
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut s = 0.0;
        for &v in row {
            let e = (v - m).exp();
            s += e;
            data.push(e);
        }
        for v in &mut data[start..] {
            *v /= s;
        }
    }
    RealTensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn log_softmax_rows(x: &RealTensor) -> RealTensor {
    let c = x.dims2().1.max(1);
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|v| v - lse));
    }
    RealTensor::new(x.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> RealTensor {
        RealTensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn affine_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.param(RealTensor::identity(2));
        let b = g.param(t(&[2], &[0.0, 0.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = g.param(t(&[2, 1], &[2.0, 3.0]));
        let b = g.param(t(&[1], &[1.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(RealTensor::zeros(&[1, 3]));
        let w = g.param(RealTensor::zeros(&[2, 2]));
        let b = g.param(RealTensor::zeros(&[2]));
        assert!(matches!(g.affine(x, w, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn affine_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rnd = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let x0 = t(&[3, 4], &rnd(12));
        let w0 = t(&[4, 2], &rnd(8));
        let b0 = t(&[2], &rnd(2));
        let build = |x: &RealTensor, w: &RealTensor, b: &RealTensor| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let bv = g.param(b.clone());
            let y = g.affine(xv, wv, bv).unwrap();
            let s = g.sum(y);
            (g, [xv, wv, bv], s)
        };
        let (g, vars, s) = build(&x0, &w0, &b0);
        let grads = g.backward(s).unwrap();
        let params = [x0.clone(), w0.clone(), b0.clone()];
        for (pi, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).unwrap();
            for j in 0..params[pi].len() {
                let cd = central_difference(
                    |h| {
                        let mut p = params.clone();
                        p[pi].data_mut()[j] += h;
                        let (g, _, s) = build(&p[0], &p[1], &p[2]);
                        g.scalar(s)
                    },
                    1e-6,
                );
                assert!(rel_err(analytic.data()[j], cd) < 1e-6, "param {pi}[{j}]");
            }
        }
    }

    #[test]
    fn relu_and_softmax() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(r);
        let gr = g.backward(s).unwrap();
        // subgradient at 0 is 0
        assert_eq!(gr.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let sm = softmax_rows(&t(&[1, 4], &[0.0; 4]));
        assert!(sm.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let big = softmax_rows(&t(&[1, 3], &[1e3, -1e3, 999.0]));
        assert!(big.all_finite());
        assert!((big.sum() - 1.0).abs() < 1e-12);
        let lbig = log_softmax_rows(&t(&[1, 3], &[1e3, -1e3, 999.0]));
        assert!(lbig.all_finite());
    }

    #[test]
    fn clip_passes_at_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let c = g.clip_zero(x);
        let s = g.sum(c);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn shared_node_visited_once_and_accumulated() {
        // y = x*x + x, dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(RealTensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(&[1], &[2.0]));
        let x = g.param(t(&[1], &[3.0]));
        let y = g.mul(c, x).unwrap();
        let gr = g.backward(y).unwrap();
        assert!(gr.get(c).is_none());
        assert_eq!(gr.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn straight_through_forwards_hard_backwards_soft() {
        let mut g = Graph::new();
        let logits = g.param(t(&[1, 3], &[0.1, 0.5, -0.2]));
        let soft = g.softmax(logits);
        let hard = t(&[1, 3], &[0.0, 1.0, 0.0]);
        let ste = g.straight_through(soft, hard.clone()).unwrap();
        assert_eq!(g.value(ste), &hard);
        let wv = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let prod = g.mul(ste, wv).unwrap();
        let s = g.sum(prod);
        let gr_ste = g.backward(s).unwrap();

        let mut g2 = Graph::new();
        let logits2 = g2.param(t(&[1, 3], &[0.1, 0.5, -0.2]));
        let soft2 = g2.softmax(logits2);
        let wv2 = g2.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let prod2 = g2.mul(soft2, wv2).unwrap();
        let s2 = g2.sum(prod2);
        let gr_soft = g2.backward(s2).unwrap();
        assert_eq!(gr_ste.get(logits).unwrap(), gr_soft.get(logits2).unwrap());
    }
}
