//! A small reverse-mode automatic differentiation tape over dense `f64` matrices.
//!
//! Every forward operation appends a node holding its value. `backward` walks the
//! nodes in reverse order and accumulates gradients into the parameters that were
//! read through [`Tape::param`]. The op set is exactly what the encoder and the two
//! model stages need; nothing more.

use ndarray::{s, Array2, Axis};

use super::params::{ParamId, ParamStore};

pub type Matrix = Array2<f64>;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Column-wise max over row ranges; `argmax[k * cols + c]` is the winning source row.
    RangeMax { src: Var, argmax: Vec<usize> },
    /// Weighted categorical cross-entropy summed over rows; scalar output.
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Sum(Vec<Var>),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let probs = softmax_row(row.as_slice().expect("row-major"));
        for (dst, p) in row.iter_mut().zip(probs) {
            *dst = p;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite value in {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant; receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        self.push(v, Op::GatherRows(a, rows.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// For each half-open row range `[start, end)`, the column-wise maximum of `src`
    /// over those rows. Output has one row per range.
    pub fn range_max(&mut self, src: Var, ranges: &[(usize, usize)]) -> Var {
        let m = self.value(src);
        let cols = m.ncols();
        let mut out = Matrix::zeros((ranges.len(), cols));
        let mut argmax = Vec::with_capacity(ranges.len() * cols);
        for (k, &(start, end)) in ranges.iter().enumerate() {
            assert!(start < end && end <= m.nrows(), "invalid pooling range");
            for c in 0..cols {
                let mut best = start;
                for r in start + 1..end {
                    if m[[r, c]] > m[[best, c]] {
                        best = r;
                    }
                }
                out[[k, c]] = m[[best, c]];
                argmax.push(best);
            }
        }
        self.push(out, Op::RangeMax { src, argmax })
    }

    /// `sum_i weights[i] * -ln(clamp(softmax(logits_i)[targets[i]]))` as a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let m = self.value(logits);
        assert_eq!(m.nrows(), targets.len());
        assert_eq!(m.nrows(), weights.len());
        let probs = softmax_rows(m);
        let total: f64 = targets
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (&t, &w))| -w * probs[[i, t]].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln())
            .sum();
        self.push(
            Matrix::from_elem((1, 1), total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// Sum of `1 x 1` nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let total: f64 = parts.iter().map(|p| self.scalar(*p)).sum();
        self.push(Matrix::from_elem((1, 1), total), Op::Sum(parts.to_vec()))
    }

    /// Back-propagates from the scalar `root` and returns per-parameter gradients,
    /// indexed by [`ParamId`]. Parameters that were never read get `None`.
    pub fn backward(&self, root: Var, n_params: usize) -> Vec<Option<Matrix>> {
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Matrix::ones(self.value(root).raw_dim()));
        let mut param_grads: Vec<Option<Matrix>> = vec![None; n_params];

        fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
            match slot {
                Some(existing) => *existing += &g,
                None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => accumulate(&mut param_grads[id.index()], g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(a, factor) => accumulate(&mut grads[a.0], g * *factor),
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads[a.0], g * mask);
                }
                Op::SoftmaxRows(a) => {
                    // dx = y * (g - sum(g * y)) per row
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let gx = y * &(&g - &dot);
                    accumulate(&mut grads[a.0], gx);
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Matrix::zeros(self.value(*a).raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        accumulate(&mut grads[p.0], g.slice(s![offset..offset + n, ..]).to_owned());
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        accumulate(&mut grads[p.0], g.slice(s![.., offset..offset + n]).to_owned());
                        offset += n;
                    }
                }
                Op::RangeMax { src, argmax } => {
                    let cols = g.ncols();
                    let mut gs = Matrix::zeros(self.value(*src).raw_dim());
                    for k in 0..g.nrows() {
                        for c in 0..cols {
                            gs[[argmax[k * cols + c], c]] += g[[k, c]];
                        }
                    }
                    accumulate(&mut grads[src.0], gs);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                } => {
                    let upstream = g[[0, 0]];
                    let probs = softmax_rows(self.value(*logits));
                    let mut gl = Matrix::zeros(probs.raw_dim());
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let p = probs[[i, t]];
                        // Clamped probabilities are constant in the logits.
                        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                            continue;
                        }
                        for c in 0..probs.ncols() {
                            let indicator = if c == t { 1.0 } else { 0.0 };
                            gl[[i, c]] = upstream * w * (probs[[i, c]] - indicator);
                        }
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        accumulate(&mut grads[p.0], g.clone());
                    }
                }
            }
        }
        param_grads
    }
}
