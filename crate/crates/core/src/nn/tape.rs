//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products into the
//! inputs that require gradients. Graph-specific operations work on *blocks*:
//! a batch of `B` graphs with `P` nodes each is laid out as `B·P` rows, and
//! attention never crosses a block boundary.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Scale(usize, f64),
    Slice { src: usize, start: usize },
    Reshape(usize),
    PairSum { src: usize, dst: usize, block: usize },
    MaskedSoftmax(usize),
    BlockAggregate { alpha: usize, z: usize, block: usize },
    BlockSum { src: usize, block: usize },
    Mean(usize),
    SumSquares(usize),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward evaluation for later differentiation.
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct TapeGradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl TapeGradients {
    /// Gradient for `v`; `None` if `v` does not require gradients or the root
    /// does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        let g = self.grads.get(v.idx)?.as_ref()?;
        Tensor::new(self.shapes[v.idx].clone(), g.clone()).ok()
    }

    /// Like [`get`](Self::get) but returns zeros for untouched variables.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.idx].clone()))
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Trainable leaf borrowed from the caller.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::InvalidState(
                "variable was not recorded on this tape".into(),
            ));
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.idx].value
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.val(ia).matmul(self.val(ib))?;
        Ok(self.push(out, Op::MatMul(ia, ib), &[ia, ib]))
    }

    /// `x (r×c) + b (c)` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(b)?);
        let (xv, bv) = (self.val(ix), self.val(ib));
        let c = xv.cols();
        if xv.shape().len() != 2 || bv.len() != c {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(ix, ib), &[ix, ib]))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (self.val(ia), self.val(ib));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok((Tensor::new(av.shape().to_vec(), data)?, ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ia, ib) = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(ia, ib), &[ia, ib]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ia, ib) = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(ia, ib), &[ia, ib]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ia, ib) = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(ia, ib), &[ia, ib]))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Result<(Tensor, usize)> {
        let ix = self.idx(x)?;
        let xv = self.val(ix);
        let data = xv.data().iter().map(|v| f(*v)).collect();
        Ok((Tensor::new(xv.shape().to_vec(), data)?, ix))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let (out, ix) = self.map(x, |v| v.max(0.0))?;
        Ok(self.push(out, Op::Relu(ix), &[ix]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let (out, ix) = self.map(x, sigmoid)?;
        Ok(self.push(out, Op::Sigmoid(ix), &[ix]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let (out, ix) = self.map(x, |v| v * c)?;
        Ok(self.push(out, Op::Scale(ix, c), &[ix]))
    }

    /// Flat slice `x[start..start+len]` as a `len × 1` column.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = self.val(ix);
        if start + len > xv.len() {
            return Err(Error::invalid(format!(
                "slice {start}..{} of a {}-element tensor",
                start + len,
                xv.len()
            )));
        }
        let out = Tensor::matrix(len, 1, xv.data()[start..start + len].to_vec())?;
        Ok(self.push(out, Op::Slice { src: ix, start }, &[ix]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.val(ix).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(ix), &[ix]))
    }

    /// `out[r][j] = src[r] + dst[block·⌊r/block⌋ + j]` for column vectors of
    /// length `R`; output is `R × block`.
    pub fn pair_sum(&mut self, src: Var, dst: Var, block: usize) -> Result<Var> {
        let (is, id) = (self.idx(src)?, self.idx(dst)?);
        let (sv, dv) = (self.val(is), self.val(id));
        let r = sv.len();
        if block == 0 || dv.len() != r || r % block != 0 {
            return Err(shape_err("pair_sum", sv.shape(), dv.shape()));
        }
        let mut out = Vec::with_capacity(r * block);
        for row in 0..r {
            let base = row / block * block;
            out.extend((0..block).map(|j| sv.data()[row] + dv.data()[base + j]));
        }
        let out = Tensor::matrix(r, block, out)?;
        Ok(self.push(
            out,
            Op::PairSum {
                src: is,
                dst: id,
                block,
            },
            &[is, id],
        ))
    }

    /// Row-wise softmax over the entries where `mask` is set; other entries are
    /// exactly zero. A row with no admitted entry is an error.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = self.val(ix);
        if xv.shape().len() != 2 || mask.len() != xv.len() {
            return Err(Error::invalid(format!(
                "masked_softmax: mask of {} entries for shape {:?}",
                mask.len(),
                xv.shape()
            )));
        }
        let cols = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for (row, (o, (x, m))) in out
            .chunks_mut(cols)
            .zip(xv.data().chunks(cols).zip(mask.chunks(cols)))
            .enumerate()
        {
            softmax_row(x, m, o).ok_or(Error::DegenerateRow { row })?;
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::MaskedSoftmax(ix), &[ix]))
    }

    /// `out[r] = Σ_j alpha[r][j] · z[block·⌊r/block⌋ + j]`.
    pub fn block_aggregate(&mut self, alpha: Var, z: Var) -> Result<Var> {
        let (ia, iz) = (self.idx(alpha)?, self.idx(z)?);
        let (av, zv) = (self.val(ia), self.val(iz));
        let (r, block, f) = (av.rows(), av.cols(), zv.cols());
        if zv.rows() != r || block == 0 || r % block != 0 {
            return Err(shape_err("block_aggregate", av.shape(), zv.shape()));
        }
        let mut out = vec![0.0; r * f];
        for row in 0..r {
            let base = row / block * block;
            let orow = &mut out[row * f..(row + 1) * f];
            for j in 0..block {
                let a = av.data()[row * block + j];
                for (o, zval) in orow.iter_mut().zip(zv.row(base + j)) {
                    *o += a * zval;
                }
            }
        }
        let out = Tensor::matrix(r, f, out)?;
        Ok(self.push(
            out,
            Op::BlockAggregate {
                alpha: ia,
                z: iz,
                block,
            },
            &[ia, iz],
        ))
    }

    /// Sums each block of `block` consecutive rows: `R × C → (R/block) × C`.
    pub fn block_sum(&mut self, x: Var, block: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = self.val(ix);
        let (r, c) = (xv.rows(), xv.cols());
        if block == 0 || r % block != 0 {
            return Err(Error::invalid(format!("block_sum: {r} rows, block {block}")));
        }
        let mut out = vec![0.0; r / block * c];
        for row in 0..r {
            let orow = &mut out[row / block * c..(row / block + 1) * c];
            for (o, v) in orow.iter_mut().zip(xv.row(row)) {
                *o += v;
            }
        }
        let out = Tensor::matrix(r / block, c, out)?;
        Ok(self.push(out, Op::BlockSum { src: ix, block }, &[ix]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = self.val(ix);
        if xv.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(ix), &[ix]))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.val(ix).sum_squares();
        Ok(self.push(Tensor::scalar(s), Op::SumSquares(ix), &[ix]))
    }

    /// Differentiates the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Var) -> Result<TapeGradients> {
        let ir = self.idx(root)?;
        if self.val(ir).len() != 1 {
            return Err(Error::InvalidState(format!(
                "backward needs a scalar root, got shape {:?}",
                self.val(ir).shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[ir].requires_grad {
            grads[ir] = Some(vec![1.0]);
        }

        for i in (0..=ir).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        Ok(TapeGradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.val(i);
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[j].requires_grad {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| vec![0.0; self.nodes[j].value.len()]);
            f(slot);
        };

        match self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(a, &mut |ga| {
                    add_into(ga, &gemm_nt(g, bv.data(), m, n, k));
                });
                acc(b, &mut |gb| {
                    add_into(gb, &gemm_tn(av.data(), g, m, k, n));
                });
            }
            Op::AddBias(x, b) => {
                let c = out.cols();
                acc(x, &mut |gx| add_into(gx, g));
                acc(b, &mut |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| {
                    for (o, v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                acc(a, &mut |ga| {
                    for ((o, gv), bval) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *o += gv * bval;
                    }
                });
                acc(b, &mut |gb| {
                    for ((o, gv), aval) in gb.iter_mut().zip(g).zip(av.data()) {
                        *o += gv * aval;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.val(x);
                acc(x, &mut |gx| {
                    for ((o, gv), v) in gx.iter_mut().zip(g).zip(xv.data()) {
                        if *v > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(x, &mut |gx| {
                for ((o, gv), y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *o += gv * y * (1.0 - y);
                }
            }),
            Op::Scale(x, c) => acc(x, &mut |gx| {
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += c * gv;
                }
            }),
            Op::Slice { src, start } => acc(src, &mut |gs| {
                add_into(&mut gs[start..start + g.len()], g);
            }),
            Op::Reshape(x) => acc(x, &mut |gx| add_into(gx, g)),
            Op::PairSum { src, dst, block } => {
                let r = out.rows();
                acc(src, &mut |gs| {
                    for (row, o) in gs.iter_mut().enumerate().take(r) {
                        *o += g[row * block..(row + 1) * block].iter().sum::<f64>();
                    }
                });
                acc(dst, &mut |gd| {
                    for row in 0..r {
                        let base = row / block * block;
                        add_into(&mut gd[base..base + block], &g[row * block..(row + 1) * block]);
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let c = out.cols();
                acc(x, &mut |gx| {
                    for ((o, y), gr) in gx.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((ov, yv), gv) in o.iter_mut().zip(y).zip(gr) {
                            *ov += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::BlockAggregate { alpha, z, block } => {
                let (av, zv) = (self.val(alpha), self.val(z));
                let (r, f) = (av.rows(), zv.cols());
                acc(alpha, &mut |ga| {
                    for row in 0..r {
                        let base = row / block * block;
                        let grow = &g[row * f..(row + 1) * f];
                        for j in 0..block {
                            ga[row * block + j] +=
                                grow.iter().zip(zv.row(base + j)).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                acc(z, &mut |gz| {
                    for row in 0..r {
                        let base = row / block * block;
                        let grow = &g[row * f..(row + 1) * f];
                        for j in 0..block {
                            let a = av.data()[row * block + j];
                            for (o, gv) in gz[(base + j) * f..(base + j + 1) * f].iter_mut().zip(grow) {
                                *o += a * gv;
                            }
                        }
                    }
                });
            }
            Op::BlockSum { src, block } => {
                let c = out.cols();
                acc(src, &mut |gs| {
                    for (row, o) in gs.chunks_mut(c).enumerate() {
                        add_into(o, &g[row / block * c..(row / block + 1) * c]);
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.val(x).len() as f64;
                acc(x, &mut |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                });
            }
            Op::SumSquares(x) => {
                let xv = self.val(x);
                acc(x, &mut |gx| {
                    for (o, v) in gx.iter_mut().zip(xv.data()) {
                        *o += 2.0 * v * g[0];
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Softmax of `x` restricted to `mask` into `out`; `None` when nothing is admitted.
fn softmax_row(x: &[f64], mask: &[bool], out: &mut [f64]) -> Option<()> {
    let max = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut total = 0.0;
    for ((o, v), &m) in out.iter_mut().zip(x).zip(mask) {
        *o = if m { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Some(())
}
