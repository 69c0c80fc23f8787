//! Reverse-mode differentiation over a linear tape of matrix ops.
//!
//! A forward pass pushes nodes onto the tape; `backward` walks it in reverse
//! and accumulates adjoints. Ops are matrix-level (matmul, broadcasts,
//! activations, reductions) so a whole batch-by-time block moves through one
//! node. Constants (observations, masks, stop-gradient targets) enter as
//! plain values via `constant`; only nodes reachable from parameters receive
//! adjoint storage.

use super::mat::Mat;
use crate::returns::rescale_deriv;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    /// a @ b
    MatMul(Var, Var),
    /// a @ C with constant C
    MatMulConst(Var, Mat),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// x + row broadcast over rows; rhs is [1, n]
    AddRow(Var, Var),
    /// x - row
    SubRow(Var, Var),
    /// x * row
    MulRow(Var, Var),
    /// x / row
    DivRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sqrt(Var),
    /// ln(max(x, floor))
    LogClamped(Var, f64),
    /// 1 - x
    OneMinus(Var),
    /// mean over rows -> [1, n]
    ColMean(Var),
    /// per-row constant multiplier, r[i] scales row i
    RowScale(Var, Vec<f64>),
    /// column slice
    SliceCols(Var, usize, usize),
    /// row slice
    SliceRows(Var, usize, usize),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    /// softmax within contiguous column groups of width g
    GroupSoftmax(Var, usize),
    /// y[i,0] = x[i, idx[i]]
    SelectCols(Var, Vec<usize>),
    /// mean over contiguous column groups of width g: [m, k*g] -> [m, k]
    GroupColMean(Var, usize),
    /// repeat each column g times: [m, k] -> [m, k*g]
    RepeatCols(Var, usize),
    /// invertible value rescaling h and its inverse
    RescaleH(Var),
    RescaleHInv(Var),
    /// sum_ij w[i,j] * x[i,j] -> [1,1]
    WeightedSumAll(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf with gradient tracking (parameters).
    pub fn param(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Leaf without gradient tracking (inputs, stop-gradient values).
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn matmul_const(&mut self, a: Var, m: Mat) -> Var {
        let v = self.value(a).matmul(&m);
        let g = self.ng(a);
        self.push(v, Op::MatMulConst(a, m), g)
    }

    fn zip_ew(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        debug_assert_eq!(ma.shape(), mb.shape());
        let data = ma.data.iter().zip(&mb.data).map(|(&x, &y)| f(x, y)).collect();
        let v = Mat {
            rows: ma.rows,
            cols: ma.cols,
            data,
        };
        let g = self.ng(a) || self.ng(b);
        self.push(v, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_ew(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_ew(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_ew(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, r: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ma, mr) = (self.value(a), self.value(r));
        debug_assert_eq!(mr.rows, 1);
        debug_assert_eq!(ma.cols, mr.cols);
        let mut v = Mat::zeros(ma.rows, ma.cols);
        for i in 0..ma.rows {
            for j in 0..ma.cols {
                v.data[i * ma.cols + j] = f(ma.data[i * ma.cols + j], mr.data[j]);
            }
        }
        let g = self.ng(a) || self.ng(r);
        self.push(v, op, g)
    }

    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        self.row_broadcast(a, r, |x, y| x + y, Op::AddRow(a, r))
    }

    pub fn sub_row(&mut self, a: Var, r: Var) -> Var {
        self.row_broadcast(a, r, |x, y| x - y, Op::SubRow(a, r))
    }

    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        self.row_broadcast(a, r, |x, y| x * y, Op::MulRow(a, r))
    }

    pub fn div_row(&mut self, a: Var, r: Var) -> Var {
        self.row_broadcast(a, r, |x, y| x / y, Op::DivRow(a, r))
    }

    fn map_ew(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ma = self.value(a);
        let v = Mat {
            rows: ma.rows,
            cols: ma.cols,
            data: ma.data.iter().map(|&x| f(x)).collect(),
        };
        let g = self.ng(a);
        self.push(v, op, g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map_ew(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map_ew(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_ew(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_ew(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_ew(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map_ew(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        self.map_ew(a, |x| x.max(floor).ln(), Op::LogClamped(a, floor))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map_ew(a, |x| 1.0 - x, Op::OneMinus(a))
    }

    pub fn rescale(&mut self, a: Var) -> Var {
        self.map_ew(a, crate::returns::rescale, Op::RescaleH(a))
    }

    pub fn unrescale(&mut self, a: Var) -> Var {
        self.map_ew(a, crate::returns::unrescale, Op::RescaleHInv(a))
    }

    pub fn col_mean(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let mut v = Mat::zeros(1, ma.cols);
        for i in 0..ma.rows {
            for j in 0..ma.cols {
                v.data[j] += ma.data[i * ma.cols + j];
            }
        }
        let inv = 1.0 / ma.rows as f64;
        for x in v.data.iter_mut() {
            *x *= inv;
        }
        let g = self.ng(a);
        self.push(v, Op::ColMean(a), g)
    }

    pub fn row_scale(&mut self, a: Var, r: Vec<f64>) -> Var {
        let ma = self.value(a);
        debug_assert_eq!(ma.rows, r.len());
        let mut v = ma.clone();
        for (i, &s) in r.iter().enumerate() {
            for x in v.data[i * v.cols..(i + 1) * v.cols].iter_mut() {
                *x *= s;
            }
        }
        let g = self.ng(a);
        self.push(v, Op::RowScale(a, r), g)
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let ma = self.value(a);
        let mut v = Mat::zeros(ma.rows, to - from);
        for i in 0..ma.rows {
            v.data[i * (to - from)..(i + 1) * (to - from)]
                .copy_from_slice(&ma.data[i * ma.cols + from..i * ma.cols + to]);
        }
        let g = self.ng(a);
        self.push(v, Op::SliceCols(a, from, to), g)
    }

    pub fn slice_rows(&mut self, a: Var, from: usize, to: usize) -> Var {
        let ma = self.value(a);
        let v = Mat {
            rows: to - from,
            cols: ma.cols,
            data: ma.data[from * ma.cols..to * ma.cols].to_vec(),
        };
        let g = self.ng(a);
        self.push(v, Op::SliceRows(a, from, to), g)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        debug_assert_eq!(ma.rows, mb.rows);
        let cols = ma.cols + mb.cols;
        let mut v = Mat::zeros(ma.rows, cols);
        for i in 0..ma.rows {
            v.data[i * cols..i * cols + ma.cols]
                .copy_from_slice(&ma.data[i * ma.cols..(i + 1) * ma.cols]);
            v.data[i * cols + ma.cols..(i + 1) * cols]
                .copy_from_slice(&mb.data[i * mb.cols..(i + 1) * mb.cols]);
        }
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::ConcatCols(a, b), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let mp = self.value(p);
            debug_assert_eq!(mp.cols, cols);
            v.data[at..at + mp.data.len()].copy_from_slice(&mp.data);
            at += mp.data.len();
        }
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), g)
    }

    /// Softmax over each contiguous group of `g` columns, per row.
    pub fn group_softmax(&mut self, a: Var, g: usize) -> Var {
        let ma = self.value(a);
        assert_eq!(ma.cols % g, 0);
        let mut v = ma.clone();
        for i in 0..ma.rows {
            let row = &mut v.data[i * ma.cols..(i + 1) * ma.cols];
            for grp in row.chunks_mut(g) {
                let m = grp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in grp.iter_mut() {
                    *x = (*x - m).exp();
                    z += *x;
                }
                for x in grp.iter_mut() {
                    *x /= z;
                }
            }
        }
        let grad = self.ng(a);
        self.push(v, Op::GroupSoftmax(a, g), grad)
    }

    /// Per-row column pick: `y[i, 0] = x[i, idx[i]]`.
    pub fn select_cols(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let ma = self.value(a);
        debug_assert_eq!(ma.rows, idx.len());
        let data = idx.iter().enumerate().map(|(i, &j)| ma.at(i, j)).collect();
        let v = Mat {
            rows: ma.rows,
            cols: 1,
            data,
        };
        let g = self.ng(a);
        self.push(v, Op::SelectCols(a, idx), g)
    }

    /// Mean over each contiguous group of `g` columns: `[m, k*g] -> [m, k]`.
    pub fn group_col_mean(&mut self, a: Var, g: usize) -> Var {
        let ma = self.value(a);
        assert_eq!(ma.cols % g, 0);
        let k = ma.cols / g;
        let mut v = Mat::zeros(ma.rows, k);
        for i in 0..ma.rows {
            for q in 0..k {
                let mut acc = 0.0;
                for j in 0..g {
                    acc += ma.at(i, q * g + j);
                }
                v.data[i * k + q] = acc / g as f64;
            }
        }
        let grad = self.ng(a);
        self.push(v, Op::GroupColMean(a, g), grad)
    }

    /// Repeat each column `g` times: `[m, k] -> [m, k*g]`.
    pub fn repeat_cols(&mut self, a: Var, g: usize) -> Var {
        let ma = self.value(a);
        let mut v = Mat::zeros(ma.rows, ma.cols * g);
        for i in 0..ma.rows {
            for q in 0..ma.cols {
                let x = ma.at(i, q);
                for j in 0..g {
                    v.data[i * ma.cols * g + q * g + j] = x;
                }
            }
        }
        let grad = self.ng(a);
        self.push(v, Op::RepeatCols(a, g), grad)
    }

    /// Weighted sum of all entries; the standard loss-reduction node.
    pub fn weighted_sum_all(&mut self, a: Var, w: Mat) -> Var {
        let ma = self.value(a);
        debug_assert_eq!(ma.shape(), w.shape());
        let s: f64 = ma.data.iter().zip(&w.data).map(|(&x, &y)| x * y).sum();
        let g = self.ng(a);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::WeightedSumAll(a, w), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let w = Mat::filled(ma.rows, ma.cols, 1.0);
        self.weighted_sum_all(a, w)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    /// Reverse pass from scalar `root`; returns per-node adjoints (empty Mat
    /// where no gradient was needed).
    pub fn backward(&self, root: Var) -> Vec<Mat> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Mat> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            if n.needs_grad {
                grads.push(Mat::zeros(n.value.rows, n.value.cols));
            } else {
                grads.push(Mat::zeros(0, 0));
            }
        }
        if !self.nodes[root.0].needs_grad {
            return grads;
        }
        grads[root.0].data[0] = 1.0;

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad || grads[idx].data.is_empty() {
                continue;
            }
            // Take this node's adjoint out to appease the borrow checker.
            let gy = std::mem::replace(&mut grads[idx], Mat::zeros(0, 0));
            self.accumulate(idx, &gy, &mut grads);
            grads[idx] = gy;
        }
        grads
    }

    fn accumulate(&self, idx: usize, gy: &Mat, grads: &mut [Mat]) {
        let add_to = |grads: &mut [Mat], v: Var, m: Mat| {
            if !grads[v.0].data.is_empty() {
                grads[v.0].add_assign(&m);
            }
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let ga = gy.matmul_t(self.value(*b));
                    add_to(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = self.value(*a).t_matmul(gy);
                    add_to(grads, *b, gb);
                }
            }
            Op::MatMulConst(a, c) => {
                if self.ng(*a) {
                    add_to(grads, *a, gy.matmul_t(c));
                }
            }
            Op::Add(a, b) => {
                add_to(grads, *a, gy.clone());
                add_to(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, gy.clone());
                let mut m = gy.clone();
                m.scale_assign(-1.0);
                add_to(grads, *b, m);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let mb = self.value(*b);
                    let mut m = gy.clone();
                    for (x, y) in m.data.iter_mut().zip(&mb.data) {
                        *x *= y;
                    }
                    add_to(grads, *a, m);
                }
                if self.ng(*b) {
                    let ma = self.value(*a);
                    let mut m = gy.clone();
                    for (x, y) in m.data.iter_mut().zip(&ma.data) {
                        *x *= y;
                    }
                    add_to(grads, *b, m);
                }
            }
            Op::AddRow(a, r) => {
                add_to(grads, *a, gy.clone());
                if self.ng(*r) {
                    add_to(grads, *r, col_sum(gy));
                }
            }
            Op::SubRow(a, r) => {
                add_to(grads, *a, gy.clone());
                if self.ng(*r) {
                    let mut m = col_sum(gy);
                    m.scale_assign(-1.0);
                    add_to(grads, *r, m);
                }
            }
            Op::MulRow(a, r) => {
                let (ma, mr) = (self.value(*a), self.value(*r));
                if self.ng(*a) {
                    let mut m = gy.clone();
                    for i in 0..m.rows {
                        for j in 0..m.cols {
                            m.data[i * m.cols + j] *= mr.data[j];
                        }
                    }
                    add_to(grads, *a, m);
                }
                if self.ng(*r) {
                    let mut m = Mat::zeros(1, ma.cols);
                    for i in 0..ma.rows {
                        for j in 0..ma.cols {
                            m.data[j] += gy.data[i * ma.cols + j] * ma.data[i * ma.cols + j];
                        }
                    }
                    add_to(grads, *r, m);
                }
            }
            Op::DivRow(a, r) => {
                let (ma, mr) = (self.value(*a), self.value(*r));
                if self.ng(*a) {
                    let mut m = gy.clone();
                    for i in 0..m.rows {
                        for j in 0..m.cols {
                            m.data[i * m.cols + j] /= mr.data[j];
                        }
                    }
                    add_to(grads, *a, m);
                }
                if self.ng(*r) {
                    let mut m = Mat::zeros(1, ma.cols);
                    for i in 0..ma.rows {
                        for j in 0..ma.cols {
                            let d = mr.data[j];
                            m.data[j] -= gy.data[i * ma.cols + j] * ma.data[i * ma.cols + j] / (d * d);
                        }
                    }
                    add_to(grads, *r, m);
                }
            }
            Op::Scale(a, s) => {
                let mut m = gy.clone();
                m.scale_assign(*s);
                add_to(grads, *a, m);
            }
            Op::AddScalar(a) => add_to(grads, *a, gy.clone()),
            Op::Relu(a) => {
                let ma = self.value(*a);
                let mut m = gy.clone();
                for (x, v) in m.data.iter_mut().zip(&ma.data) {
                    if *v <= 0.0 {
                        *x = 0.0;
                    }
                }
                add_to(grads, *a, m);
            }
            Op::Sigmoid(a) => {
                let yv = &node.value;
                let mut m = gy.clone();
                for (x, y) in m.data.iter_mut().zip(&yv.data) {
                    *x *= y * (1.0 - y);
                }
                add_to(grads, *a, m);
            }
            Op::Tanh(a) => {
                let yv = &node.value;
                let mut m = gy.clone();
                for (x, y) in m.data.iter_mut().zip(&yv.data) {
                    *x *= 1.0 - y * y;
                }
                add_to(grads, *a, m);
            }
            Op::Sqrt(a) => {
                let yv = &node.value;
                let mut m = gy.clone();
                for (x, y) in m.data.iter_mut().zip(&yv.data) {
                    *x *= 0.5 / y;
                }
                add_to(grads, *a, m);
            }
            Op::LogClamped(a, floor) => {
                let ma = self.value(*a);
                let mut m = gy.clone();
                for (x, v) in m.data.iter_mut().zip(&ma.data) {
                    if *v > *floor {
                        *x /= v;
                    } else {
                        *x = 0.0;
                    }
                }
                add_to(grads, *a, m);
            }
            Op::OneMinus(a) => {
                let mut m = gy.clone();
                m.scale_assign(-1.0);
                add_to(grads, *a, m);
            }
            Op::ColMean(a) => {
                let ma = self.value(*a);
                let inv = 1.0 / ma.rows as f64;
                let mut m = Mat::zeros(ma.rows, ma.cols);
                for i in 0..ma.rows {
                    for j in 0..ma.cols {
                        m.data[i * ma.cols + j] = gy.data[j] * inv;
                    }
                }
                add_to(grads, *a, m);
            }
            Op::RowScale(a, r) => {
                let mut m = gy.clone();
                for (i, &s) in r.iter().enumerate() {
                    for x in m.data[i * m.cols..(i + 1) * m.cols].iter_mut() {
                        *x *= s;
                    }
                }
                add_to(grads, *a, m);
            }
            Op::SliceCols(a, from, _to) => {
                let ma = self.value(*a);
                let mut m = Mat::zeros(ma.rows, ma.cols);
                for i in 0..gy.rows {
                    for j in 0..gy.cols {
                        m.data[i * ma.cols + from + j] = gy.data[i * gy.cols + j];
                    }
                }
                add_to(grads, *a, m);
            }
            Op::SliceRows(a, from, _to) => {
                let ma = self.value(*a);
                let mut m = Mat::zeros(ma.rows, ma.cols);
                m.data[from * ma.cols..from * ma.cols + gy.data.len()].copy_from_slice(&gy.data);
                add_to(grads, *a, m);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols, self.value(*b).cols);
                if self.ng(*a) {
                    let mut m = Mat::zeros(gy.rows, ca);
                    for i in 0..gy.rows {
                        m.data[i * ca..(i + 1) * ca]
                            .copy_from_slice(&gy.data[i * gy.cols..i * gy.cols + ca]);
                    }
                    add_to(grads, *a, m);
                }
                if self.ng(*b) {
                    let mut m = Mat::zeros(gy.rows, cb);
                    for i in 0..gy.rows {
                        m.data[i * cb..(i + 1) * cb]
                            .copy_from_slice(&gy.data[i * gy.cols + ca..(i + 1) * gy.cols]);
                    }
                    add_to(grads, *b, m);
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    if self.ng(p) {
                        let m = Mat {
                            rows,
                            cols: gy.cols,
                            data: gy.data[at * gy.cols..(at + rows) * gy.cols].to_vec(),
                        };
                        add_to(grads, p, m);
                    }
                    at += rows;
                }
            }
            Op::GroupSoftmax(a, g) => {
                let yv = &node.value;
                let mut m = Mat::zeros(yv.rows, yv.cols);
                for i in 0..yv.rows {
                    for q in 0..yv.cols / g {
                        let off = i * yv.cols + q * g;
                        let y = &yv.data[off..off + g];
                        let dy = &gy.data[off..off + g];
                        let dot: f64 = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
                        for j in 0..*g {
                            m.data[off + j] = y[j] * (dy[j] - dot);
                        }
                    }
                }
                add_to(grads, *a, m);
            }
            Op::SelectCols(a, idx) => {
                let ma = self.value(*a);
                let mut m = Mat::zeros(ma.rows, ma.cols);
                for (i, &j) in idx.iter().enumerate() {
                    m.data[i * ma.cols + j] = gy.data[i];
                }
                add_to(grads, *a, m);
            }
            Op::GroupColMean(a, g) => {
                let ma = self.value(*a);
                let k = ma.cols / g;
                let inv = 1.0 / *g as f64;
                let mut m = Mat::zeros(ma.rows, ma.cols);
                for i in 0..ma.rows {
                    for q in 0..k {
                        let gv = gy.data[i * k + q] * inv;
                        for j in 0..*g {
                            m.data[i * ma.cols + q * g + j] = gv;
                        }
                    }
                }
                add_to(grads, *a, m);
            }
            Op::RepeatCols(a, g) => {
                let ma = self.value(*a);
                let mut m = Mat::zeros(ma.rows, ma.cols);
                for i in 0..ma.rows {
                    for q in 0..ma.cols {
                        let mut acc = 0.0;
                        for j in 0..*g {
                            acc += gy.data[i * ma.cols * g + q * g + j];
                        }
                        m.data[i * ma.cols + q] = acc;
                    }
                }
                add_to(grads, *a, m);
            }
            Op::RescaleH(a) => {
                let ma = self.value(*a);
                let mut m = gy.clone();
                for (x, v) in m.data.iter_mut().zip(&ma.data) {
                    *x *= rescale_deriv(*v);
                }
                add_to(grads, *a, m);
            }
            Op::RescaleHInv(a) => {
                let yv = &node.value;
                let mut m = gy.clone();
                for (x, y) in m.data.iter_mut().zip(&yv.data) {
                    *x /= rescale_deriv(*y);
                }
                add_to(grads, *a, m);
            }
            Op::WeightedSumAll(a, w) => {
                let mut m = w.clone();
                m.scale_assign(gy.data[0]);
                add_to(grads, *a, m);
            }
        }
    }
}

fn col_sum(m: &Mat) -> Mat {
    let mut out = Mat::zeros(1, m.cols);
    for i in 0..m.rows {
        for j in 0..m.cols {
            out.data[j] += m.data[i * m.cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences over every entry of every param.
    fn finite_diff_check(
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        params: &[Mat],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|m| tape.param(m.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);

        let h = 1e-6;
        for (pi, pm) in params.iter().enumerate() {
            for ei in 0..pm.data.len() {
                let eval = |delta: f64| {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = params
                        .iter()
                        .enumerate()
                        .map(|(i, m)| {
                            let mut m = m.clone();
                            if i == pi {
                                m.data[ei] += delta;
                            }
                            tape.param(m)
                        })
                        .collect();
                    let root = build(&mut tape, &vars);
                    tape.scalar(root)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grads[vars[pi].0].data[ei];
                let denom = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "param {pi} entry {ei}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mat::uniform(3, 4, 0.8, &mut rng);
        let b = Mat::uniform(4, 2, 0.8, &mut rng);
        finite_diff_check(
            |t, v| {
                let y = t.matmul(v[0], v[1]);
                let y = t.tanh(y);
                t.sum_all(y)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn grad_broadcast_and_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Mat::uniform(5, 3, 0.9, &mut rng);
        let r = Mat::uniform(1, 3, 0.9, &mut rng);
        let s = Mat::uniform(1, 3, 0.3, &mut rng);
        // keep the divisor away from zero
        let s = Mat {
            rows: 1,
            cols: 3,
            data: s.data.iter().map(|v| v + 2.0).collect(),
        };
        finite_diff_check(
            |t, v| {
                let y = t.add_row(v[0], v[1]);
                let y = t.sigmoid(y);
                let y = t.div_row(y, v[2]);
                let y = t.mul(y, y);
                t.sum_all(y)
            },
            &[x, r, s],
            1e-6,
        );
    }

    #[test]
    fn grad_softmax_select_logmean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Mat::uniform(4, 6, 1.0, &mut rng);
        finite_diff_check(
            |t, v| {
                let p = t.group_softmax(v[0], 3);
                let lp = t.log_clamped(p, 1e-12);
                let sel = t.select_cols(lp, vec![0, 4, 2, 5]);
                t.sum_all(sel)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn grad_group_mean_repeat_slice_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Mat::uniform(3, 6, 1.0, &mut rng);
        let y = Mat::uniform(3, 2, 1.0, &mut rng);
        finite_diff_check(
            |t, v| {
                let m = t.group_col_mean(v[0], 3); // [3,2]
                let r = t.repeat_cols(v[1], 3); // [3,6]
                let s = t.slice_cols(r, 1, 5); // [3,4]
                let s2 = t.slice_rows(s, 0, 2); // [2,4]
                let m2 = t.slice_rows(m, 0, 2); // [2,2]
                let c = t.concat_cols(s2, m2); // [2,6]
                let c = t.relu(c);
                t.sum_all(c)
            },
            &[x, y],
            1e-6,
        );
    }

    #[test]
    fn grad_rescale_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Mat::uniform(2, 4, 3.0, &mut rng);
        finite_diff_check(
            |t, v| {
                let h = t.rescale(v[0]);
                let g = t.unrescale(h);
                let g = t.mul(g, g);
                t.sum_all(g)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn grad_col_mean_row_scale_weighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Mat::uniform(4, 3, 1.0, &mut rng);
        let w = Mat::uniform(1, 3, 1.0, &mut rng);
        finite_diff_check(
            move |t, v| {
                let m = t.col_mean(v[0]);
                let d = t.sub_row(v[0], m);
                let d = t.mul(d, d);
                let d = t.row_scale(d, vec![1.0, 0.5, 0.0, 2.0]);
                let s = t.mul_row(d, v[1]);
                let w = Mat::filled(4, 3, 0.25);
                t.weighted_sum_all(s, w)
            },
            &[x, w],
            1e-6,
        );
    }

    #[test]
    fn grad_concat_rows_and_gru_like_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Mat::uniform(2, 3, 1.0, &mut rng);
        let wx = Mat::uniform(3, 6, 0.7, &mut rng);
        let wh = Mat::uniform(2, 6, 0.7, &mut rng);
        let h0 = Mat::uniform(2, 2, 0.5, &mut rng);
        finite_diff_check(
            |t, v| {
                // two chained gate-style cells feeding concat_rows
                let mut h = v[3];
                let mut outs = Vec::new();
                for _ in 0..2 {
                    let gx = t.matmul(v[0], v[1]);
                    let gh = t.matmul(h, v[2]);
                    let g = t.add(gx, gh);
                    let z = t.slice_cols(g, 0, 2);
                    let z = t.sigmoid(z);
                    let n = t.slice_cols(g, 2, 4);
                    let n = t.tanh(n);
                    let zi = t.one_minus(z);
                    let a = t.mul(zi, n);
                    let b = t.mul(z, h);
                    h = t.add(a, b);
                    outs.push(h);
                }
                let all = t.concat_rows(&outs);
                t.sum_all(all)
            },
            &[x, wx, wh, h0],
            1e-6,
        );
    }

    #[test]
    fn constant_nodes_receive_no_grad() {
        let mut t = Tape::new();
        let c = t.constant(Mat::filled(2, 2, 3.0));
        let p = t.param(Mat::filled(2, 2, 1.0));
        let y = t.mul(c, p);
        let s = t.sum_all(y);
        let g = t.backward(s);
        assert!(g[c.0].data.is_empty());
        assert_eq!(g[p.0].data, vec![3.0; 4]);
    }
}
