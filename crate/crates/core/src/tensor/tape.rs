//! Define-by-run reverse-mode differentiation over 2-D tensors.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse and accumulates gradients into the inputs;
//! parameter leaves hand their gradients to a [`Gradients`] map.

use std::collections::HashMap;

use super::{gemm, sigmoid, softplus, Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul { a: usize, b: usize, trans_b: bool },
    AddBias { x: usize, bias: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    LstmGates(usize),
    LstmCell { gates: usize, c_prev: usize },
    LstmHidden { gates: usize, c: usize },
    SliceCols { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows { x: usize, idx: Vec<usize> },
    BlendRows { new: usize, old: usize, mask: Vec<f64> },
    ScaleRows { x: usize, w: Vec<f64> },
    Mask { x: usize, mask: Vec<f64> },
    LogSoftmax { logits: usize, temp: Option<usize>, eps: f64 },
    Pick { x: usize, idx: Vec<usize> },
    Sum(usize),
    LogSumExpRows(usize),
    Reshape(usize),
    Detach,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    consumed: bool,
    inference: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records values only; parameters do not require gradients
    /// and `backward` is rejected.
    pub fn inference() -> Self {
        Tape {
            inference: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Registers a parameter leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&i) = self.params.get(&id) {
            return Var(i);
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), !self.inference);
        self.params.insert(id, v.0);
        v
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        let (m, k) = (av.rows(), av.cols());
        let (kb, n) = if trans_b {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        assert_eq!(k, kb, "matmul inner extents differ: {k} vs {kb}");
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, out.data_mut(), false);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            ng,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.val(x.0), self.val(bias.0));
        assert_eq!(bv.len(), xv.cols(), "bias width");
        let mut out = xv.clone();
        let n = xv.cols();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x.0) || self.ng(bias.0);
        self.push(out, Op::AddBias { x: x.0, bias: bias.0 }, ng)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        assert_eq!(av.shape(), bv.shape(), "elementwise shapes differ");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.val(x.0);
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(out, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(out, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(out, Op::Mul(a.0, b.0), ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.map(x, |v| v * factor);
        let ng = self.ng(x.0);
        self.push(out, Op::Scale(x.0, factor), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v + c);
        let ng = self.ng(x.0);
        self.push(out, Op::AddScalar(x.0), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        let ng = self.ng(x.0);
        self.push(out, Op::Sigmoid(x.0), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::tanh);
        let ng = self.ng(x.0);
        self.push(out, Op::Tanh(x.0), ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.map(x, softplus);
        let ng = self.ng(x.0);
        self.push(out, Op::Softplus(x.0), ng)
    }

    /// Gate activations from pre-activations laid out `[i | f | g | o]`:
    /// sigmoid on `i`, `f`, `o` and tanh on `g`.
    pub fn lstm_gates(&mut self, pre: Var) -> Var {
        let pv = self.val(pre.0);
        assert_eq!(pv.cols() % 4, 0, "gate width");
        let h = pv.cols() / 4;
        let mut out = pv.clone();
        for row in out.data_mut().chunks_exact_mut(4 * h) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j / h == 2 { v.tanh() } else { sigmoid(*v) };
            }
        }
        let ng = self.ng(pre.0);
        self.push(out, Op::LstmGates(pre.0), ng)
    }

    /// Memory-cell update from activated gates: `c = f·c_prev + i·g`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Var {
        let (av, cv) = (self.val(gates.0), self.val(c_prev.0));
        let (rows, h) = (cv.rows(), cv.cols());
        assert_eq!(av.cols(), 4 * h, "gate width");
        assert_eq!(av.rows(), rows, "gate rows");
        let mut out = Tensor::zeros(rows, h);
        for r in 0..rows {
            let a = av.row(r);
            let c0 = cv.row(r);
            let o = out.row_mut(r);
            for j in 0..h {
                o[j] = a[h + j] * c0[j] + a[j] * a[2 * h + j];
            }
        }
        let ng = self.ng(gates.0) || self.ng(c_prev.0);
        self.push(
            out,
            Op::LstmCell {
                gates: gates.0,
                c_prev: c_prev.0,
            },
            ng,
        )
    }

    /// Hidden output `h = o·tanh(c)` from activated gates.
    pub fn lstm_hidden(&mut self, gates: Var, c: Var) -> Var {
        let (av, cv) = (self.val(gates.0), self.val(c.0));
        let (rows, h) = (cv.rows(), cv.cols());
        assert_eq!(av.cols(), 4 * h, "gate width");
        let mut out = Tensor::zeros(rows, h);
        for r in 0..rows {
            let a = av.row(r);
            let cr = cv.row(r);
            let o = out.row_mut(r);
            for j in 0..h {
                o[j] = a[3 * h + j] * cr[j].tanh();
            }
        }
        let ng = self.ng(gates.0) || self.ng(c.0);
        self.push(out, Op::LstmHidden { gates: gates.0, c: c.0 }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.val(x.0);
        let (rows, cols) = (xv.rows(), xv.cols());
        assert!(width > 0 && start + width <= cols, "column slice out of range");
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let ng = self.ng(x.0);
        self.push(
            Tensor::matrix(rows, width, data).expect("slice shape"),
            Op::SliceCols { x: x.0, start },
            ng,
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let cols = self.val(xs[0].0).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for x in xs {
            let v = self.val(x.0);
            assert_eq!(v.cols(), cols, "concat_rows widths differ");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ng = xs.iter().any(|x| self.ng(x.0));
        self.push(
            Tensor::matrix(rows, cols, data).expect("concat shape"),
            Op::ConcatRows(xs.iter().map(|x| x.0).collect()),
            ng,
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let rows = self.val(xs[0].0).rows();
        let widths: Vec<usize> = xs.iter().map(|x| self.val(x.0).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for x in xs {
                let v = self.val(x.0);
                assert_eq!(v.rows(), rows, "concat_cols heights differ");
                data.extend_from_slice(v.row(r));
            }
        }
        let ng = xs.iter().any(|x| self.ng(x.0));
        self.push(
            Tensor::matrix(rows, total, data).expect("concat shape"),
            Op::ConcatCols(xs.iter().map(|x| x.0).collect()),
            ng,
        )
    }

    /// Row `i` of the result is row `idx[i]` of `x` (embedding lookup, broadcasts).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.val(x.0);
        let cols = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < xv.rows(), "gather index {i} out of range {}", xv.rows());
            data.extend_from_slice(xv.row(i));
        }
        let ng = self.ng(x.0);
        self.push(
            Tensor::matrix(idx.len(), cols, data).expect("gather shape"),
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Per-row `m·new + (1−m)·old`.
    pub fn blend_rows(&mut self, new: Var, old: Var, mask: &[f64]) -> Var {
        let (nv, ov) = (self.val(new.0), self.val(old.0));
        assert_eq!(nv.shape(), ov.shape(), "blend shapes differ");
        assert_eq!(mask.len(), nv.rows(), "blend mask length");
        let mut out = nv.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m != 1.0 {
                let o = ov.row(r);
                for (x, y) in out.row_mut(r).iter_mut().zip(o) {
                    *x = m * *x + (1.0 - m) * y;
                }
            }
        }
        let ng = self.ng(new.0) || self.ng(old.0);
        self.push(
            out,
            Op::BlendRows {
                new: new.0,
                old: old.0,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    /// Multiplies row `r` by `w[r]`.
    pub fn scale_rows(&mut self, x: Var, w: &[f64]) -> Var {
        let mut out = self.val(x.0).clone();
        assert_eq!(w.len(), out.rows(), "row weight length");
        for (r, &s) in w.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.ng(x.0);
        self.push(
            out,
            Op::ScaleRows {
                x: x.0,
                w: w.to_vec(),
            },
            ng,
        )
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let mut out = self.val(x.0).clone();
        assert_eq!(mask.len(), out.len(), "mask length");
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let ng = self.ng(x.0);
        self.push(out, Op::Mask { x: x.0, mask }, ng)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, logits: Var) -> Var {
        self.log_softmax_impl(logits, None, 0.0)
    }

    /// Row-wise `log softmax(logits / τ)` with `τ = softplus(t_raw) + eps`;
    /// `t_raw` is one column per row.
    pub fn log_softmax_relaxed(&mut self, logits: Var, t_raw: Var, eps: f64) -> Var {
        self.log_softmax_impl(logits, Some(t_raw), eps)
    }

    fn log_softmax_impl(&mut self, logits: Var, temp: Option<Var>, eps: f64) -> Var {
        let lv = self.val(logits.0);
        let (rows, cols) = (lv.rows(), lv.cols());
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let tau = match temp {
                Some(t) => softplus(self.val(t.0).data()[r]) + eps,
                None => 1.0,
            };
            let l = lv.row(r);
            let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
            let lse = max + l.iter().map(|x| (x / tau - max).exp()).sum::<f64>().ln();
            for (o, x) in out.row_mut(r).iter_mut().zip(l) {
                *o = x / tau - lse;
            }
        }
        let ng = self.ng(logits.0) || temp.is_some_and(|t| self.ng(t.0));
        if let Some(t) = temp {
            assert_eq!(self.val(t.0).len(), rows, "one temperature per row");
        }
        self.push(
            out,
            Op::LogSoftmax {
                logits: logits.0,
                temp: temp.map(|t| t.0),
                eps,
            },
            ng,
        )
    }

    /// Column `idx[r]` of each row `r`, as an `n×1` column.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.val(x.0);
        assert_eq!(idx.len(), xv.rows(), "one index per row");
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < xv.cols(), "pick index {c} out of range {}", xv.cols());
                xv.row(r)[c]
            })
            .collect();
        let ng = self.ng(x.0);
        self.push(
            Tensor::matrix(idx.len(), 1, data).expect("pick shape"),
            Op::Pick {
                x: x.0,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x.0).data().iter().sum();
        let ng = self.ng(x.0);
        self.push(Tensor::scalar(s), Op::Sum(x.0), ng)
    }

    /// Row-wise `ln Σ_j exp(x_rj)`, as an `n×1` column.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let xv = self.val(x.0);
        let data = (0..xv.rows()).map(|r| super::log_sum_exp(xv.row(r))).collect();
        let ng = self.ng(x.0);
        self.push(
            Tensor::matrix(xv.rows(), 1, data).expect("lse shape"),
            Op::LogSumExpRows(x.0),
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.val(x.0).clone();
        assert_eq!(xv.len(), rows * cols, "reshape size");
        let ng = self.ng(x.0);
        self.push(xv.reshaped(rows, cols), Op::Reshape(x.0), ng)
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.val(x.0).clone();
        self.push(v, Op::Detach, false)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.inference {
            return Err(Error::invalid("backward on an inference tape"));
        }
        if self.val(loss.0).len() != 1 {
            return Err(Error::NotScalar(self.val(loss.0).shape().to_vec()));
        }
        self.consumed = true;

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let mut out = Gradients::new();
        let lshape = nodes[loss.0].value.shape().to_vec();
        grads[loss.0] = Some(Tensor::new(lshape, vec![1.0]).expect("scalar"));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Input | Op::Detach => {}
                Op::Param(id) => out.insert(*id, g),
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (av.rows(), av.cols(), y.cols());
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        // dA = G · op(B)ᵀ
                        gemm(m, n, k, g.data(), false, bv.data(), !trans_b, ga.data_mut(), true);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        if *trans_b {
                            // B is n×k: dB = Gᵀ · A
                            gemm(n, m, k, g.data(), true, av.data(), false, gb.data_mut(), true);
                        } else {
                            // dB = Aᵀ · G
                            gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), true);
                        }
                    }
                }
                Op::AddBias { x, bias } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.add_assign(&g);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *bias) {
                        let n = g.cols();
                        let gbd = gb.data_mut();
                        for row in g.data().chunks_exact(n) {
                            for (acc, v) in gbd.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for j in [*a, *b] {
                        if let Some(gj) = slot(&mut grads, nodes, j) {
                            gj.add_assign(&g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.add_assign(&g);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        axpy(gb, -1.0, &g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        zip3(ga, &g, bv, |gv, o| gv * o);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        zip3(gb, &g, av, |gv, o| gv * o);
                    }
                }
                Op::Scale(x, f) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        axpy(gx, *f, &g);
                    }
                }
                Op::AddScalar(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.add_assign(&g);
                    }
                }
                Op::Sigmoid(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        zip3(gx, &g, y, |gv, s| gv * s * (1.0 - s));
                    }
                }
                Op::Tanh(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        zip3(gx, &g, y, |gv, t| gv * (1.0 - t * t));
                    }
                }
                Op::Softplus(x) => {
                    let xv = &nodes[*x].value;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        zip3(gx, &g, xv, |gv, v| gv * sigmoid(v));
                    }
                }
                Op::LstmGates(pre) => {
                    if let Some(gp) = slot(&mut grads, nodes, *pre) {
                        let h = y.cols() / 4;
                        for ((row, grow), arow) in gp
                            .data_mut()
                            .chunks_exact_mut(4 * h)
                            .zip(g.data().chunks_exact(4 * h))
                            .zip(y.data().chunks_exact(4 * h))
                        {
                            for j in 0..4 * h {
                                let a = arow[j];
                                let d = if j / h == 2 { 1.0 - a * a } else { a * (1.0 - a) };
                                row[j] += grow[j] * d;
                            }
                        }
                    }
                }
                Op::LstmCell { gates, c_prev } => {
                    let (av, cv) = (&nodes[*gates].value, &nodes[*c_prev].value);
                    let (rows, h) = (cv.rows(), cv.cols());
                    if let Some(ga) = slot(&mut grads, nodes, *gates) {
                        for r in 0..rows {
                            let a = av.row(r);
                            let c0 = cv.row(r);
                            let gr = g.row(r);
                            let gar = ga.row_mut(r);
                            for j in 0..h {
                                gar[j] += gr[j] * a[2 * h + j];
                                gar[h + j] += gr[j] * c0[j];
                                gar[2 * h + j] += gr[j] * a[j];
                            }
                        }
                    }
                    if let Some(gc) = slot(&mut grads, nodes, *c_prev) {
                        for r in 0..rows {
                            let a = av.row(r);
                            let gr = g.row(r);
                            let gcr = gc.row_mut(r);
                            for j in 0..h {
                                gcr[j] += gr[j] * a[h + j];
                            }
                        }
                    }
                }
                Op::LstmHidden { gates, c } => {
                    let (av, cv) = (&nodes[*gates].value, &nodes[*c].value);
                    let (rows, h) = (cv.rows(), cv.cols());
                    let t: Vec<f64> = cv.data().iter().map(|v| v.tanh()).collect();
                    if let Some(ga) = slot(&mut grads, nodes, *gates) {
                        for r in 0..rows {
                            let gr = g.row(r);
                            let tr = &t[r * h..(r + 1) * h];
                            let gar = ga.row_mut(r);
                            for j in 0..h {
                                gar[3 * h + j] += gr[j] * tr[j];
                            }
                        }
                    }
                    if let Some(gc) = slot(&mut grads, nodes, *c) {
                        for r in 0..rows {
                            let a = av.row(r);
                            let gr = g.row(r);
                            let tr = &t[r * h..(r + 1) * h];
                            let gcr = gc.row_mut(r);
                            for j in 0..h {
                                gcr[j] += gr[j] * a[3 * h + j] * (1.0 - tr[j] * tr[j]);
                            }
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let w = g.cols();
                        for r in 0..g.rows() {
                            for (acc, v) in gx.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                    }
                }
                Op::ConcatRows(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let n = nodes[x].value.len();
                        if let Some(gx) = slot(&mut grads, nodes, x) {
                            for (acc, v) in gx.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                                *acc += v;
                            }
                        }
                        offset += n;
                    }
                }
                Op::ConcatCols(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let w = nodes[x].value.cols();
                        if let Some(gx) = slot(&mut grads, nodes, x) {
                            for r in 0..g.rows() {
                                for (acc, v) in gx.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                    *acc += v;
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::GatherRows { x, idx } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, &src) in idx.iter().enumerate() {
                            for (acc, v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                    }
                }
                Op::BlendRows { new, old, mask } => {
                    if let Some(gn) = slot(&mut grads, nodes, *new) {
                        for (r, &m) in mask.iter().enumerate() {
                            if m != 0.0 {
                                for (acc, v) in gn.row_mut(r).iter_mut().zip(g.row(r)) {
                                    *acc += m * v;
                                }
                            }
                        }
                    }
                    if let Some(go) = slot(&mut grads, nodes, *old) {
                        for (r, &m) in mask.iter().enumerate() {
                            if m != 1.0 {
                                for (acc, v) in go.row_mut(r).iter_mut().zip(g.row(r)) {
                                    *acc += (1.0 - m) * v;
                                }
                            }
                        }
                    }
                }
                Op::ScaleRows { x, w } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, &s) in w.iter().enumerate() {
                            for (acc, v) in gx.row_mut(r).iter_mut().zip(g.row(r)) {
                                *acc += s * v;
                            }
                        }
                    }
                }
                Op::Mask { x, mask } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((acc, v), m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                            *acc += v * m;
                        }
                    }
                }
                Op::LogSoftmax { logits, temp, eps } => {
                    let lv = &nodes[*logits].value;
                    let rows = y.rows();
                    // dL/dz for z = logits / τ, then chain into logits and t_raw.
                    let mut dtau = vec![0.0; rows];
                    let mut dlogits = Tensor::zeros(rows, y.cols());
                    for r in 0..rows {
                        let tau = match temp {
                            Some(t) => softplus(nodes[*t].value.data()[r]) + eps,
                            None => 1.0,
                        };
                        let gr = g.row(r);
                        let s: f64 = gr.iter().sum();
                        let yr = y.row(r);
                        let l = lv.row(r);
                        let dl = dlogits.row_mut(r);
                        let mut acc = 0.0;
                        for j in 0..gr.len() {
                            let dz = gr[j] - yr[j].exp() * s;
                            dl[j] = dz / tau;
                            acc += dz * l[j];
                        }
                        dtau[r] = -acc / (tau * tau);
                    }
                    if let Some(gl) = slot(&mut grads, nodes, *logits) {
                        gl.add_assign(&dlogits);
                    }
                    if let Some(t) = temp {
                        let tv = &nodes[*t].value;
                        if let Some(gt) = slot(&mut grads, nodes, *t) {
                            for r in 0..rows {
                                gt.data_mut()[r] += dtau[r] * sigmoid(tv.data()[r]);
                            }
                        }
                    }
                }
                Op::Pick { x, idx } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, &c) in idx.iter().enumerate() {
                            gx.row_mut(r)[c] += g.data()[r];
                        }
                    }
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.data_mut().iter_mut().for_each(|v| *v += s);
                    }
                }
                Op::LogSumExpRows(x) => {
                    let xv = &nodes[*x].value;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for r in 0..xv.rows() {
                            let (gr, lse) = (g.data()[r], y.data()[r]);
                            for (acc, v) in gx.row_mut(r).iter_mut().zip(xv.row(r)) {
                                *acc += gr * (v - lse).exp();
                            }
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (acc, v) in gx.data_mut().iter_mut().zip(g.data()) {
                            *acc += v;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Gradient accumulator for node `j`, allocated on first use; `None` when
/// `j` does not require a gradient.
fn slot<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], j: usize) -> Option<&'g mut Tensor> {
    if !nodes[j].needs_grad {
        return None;
    }
    let v = &nodes[j].value;
    Some(grads[j].get_or_insert_with(|| {
        Tensor::new(v.shape().to_vec(), vec![0.0; v.len()]).expect("node shape")
    }))
}

fn axpy(acc: &mut Tensor, a: f64, x: &Tensor) {
    for (y, v) in acc.data_mut().iter_mut().zip(x.data()) {
        *y += a * v;
    }
}

fn zip3(acc: &mut Tensor, g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) {
    for ((y, gv), o) in acc.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
        *y += f(*gv, *o);
    }
}
