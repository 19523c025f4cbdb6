//! Reverse-mode autodiff over `f64` matrices, recorded on a flat tape.
//!
//! Every intermediate is an `Array2<f64>`; scalars are 1×1 matrices. A
//! forward pass appends nodes, `backward` walks the tape once in reverse.
//! Parameters live outside the tape in a [`ParamStore`] so several tapes
//! (or none, for inference) can bind the same storage.

use ndarray::{s, Array2, Axis};
use std::collections::HashMap;

pub type Mat = Array2<f64>;

pub const LN_EPS: f64 = 1e-5;
/// Additive mask value that zeroes a softmax slot without producing NaN.
pub const NEG_MASK: f64 = -1e30;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Registration order is the canonical order used
/// by checkpoints and the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique dotted name.
    pub fn register(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total scalar count across all tensors.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots[id.0].as_ref()
    }

    /// Gradient for `id`, materializing zeros for parameters no loss touched.
    pub fn dense(&self, store: &ParamStore, id: ParamId) -> Mat {
        match &self.slots[id.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(store.get(id).raw_dim()),
        }
    }

    pub fn add(&mut self, id: ParamId, g: &Mat) {
        match &mut self.slots[id.0] {
            Some(acc) => *acc += g,
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn scale(&mut self, k: f64) {
        for slot in self.slots.iter_mut().flatten() {
            slot.mapv_inplace(|x| x * k);
        }
    }

    /// Global L2 norm over every stored gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

enum Op {
    /// Constant input; gradient is discarded.
    Input,
    /// Leaf bound to external storage; gradient accumulates per [`ParamId`].
    Param(ParamId),
    MatMul(Var, Var),
    /// `A · Bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `X + 1·b` with `b` a 1×c row.
    AddRow(Var, Var),
    /// `X + C` with constant `C` (masking, position offsets).
    AddConst(Var),
    /// `X ⊙ C` with constant `C`.
    MulConst(Var, Mat),
    Silu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    /// Row `i` of the output is row `ids[i]` of `table`.
    GatherRows { table: Var, ids: Vec<usize> },
    /// `scale · Σ x[r,c]` over picks, a 1×1 output.
    PickSum { x: Var, picks: Vec<(usize, usize)>, scale: f64 },
    /// `scale · Σ x`, a 1×1 output.
    SumAll(Var, f64),
    /// `Σ mask⊙(pred−target)² / denom`, a 1×1 output.
    MaskedSqErr { pred: Var, target: Mat, mask: Mat, denom: f64 },
    /// Masked mean Smooth-L1 (Huber with quadratic zone `|d| < beta`).
    MaskedSmoothL1 { pred: Var, target: Mat, mask: Mat, denom: f64, beta: f64 },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Flat computation tape. Append-only during forward; `backward` never
/// mutates nodes, so the same tape supports repeated backward passes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Scalar payload of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-1×1 node");
        m[(0, 0)]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).mapv(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    /// Adds a 1×c row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a 1×c row");
        assert_eq!(r.ncols(), self.value(a).ncols());
        let v = self.value(a) + &self.value(row).row(0);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a))
    }

    pub fn mul_const(&mut self, a: Var, c: &Mat) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::MulConst(a, c.clone()))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Per-row layer norm with learned gain and bias (both 1×c).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        assert_eq!(g.nrows(), 1);
        assert_eq!(b.nrows(), 1);
        let mut out = Mat::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let (xhat, _) = ln_row(&row.to_owned());
            for j in 0..xv.ncols() {
                out[(i, j)] = g[(0, j)] * xhat[j] + b[(0, j)];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Mat::zeros((total, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.ncols(), cols, "concat_rows column mismatch");
            v.slice_mut(s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Mat::zeros((rows, total));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), rows, "concat_cols row mismatch");
            v.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x, start, len })
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Mat::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&t.row(id));
        }
        self.push(
            v,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// `scale · Σ x[r,c]` over `picks` — negative-log-likelihood style sums.
    pub fn pick_sum(&mut self, x: Var, picks: &[(usize, usize)], scale: f64) -> Var {
        let xv = self.value(x);
        let total: f64 = picks.iter().map(|&(r, c)| xv[(r, c)]).sum();
        let v = Mat::from_elem((1, 1), scale * total);
        self.push(
            v,
            Op::PickSum {
                x,
                picks: picks.to_vec(),
                scale,
            },
        )
    }

    pub fn sum_all(&mut self, x: Var, scale: f64) -> Var {
        let v = Mat::from_elem((1, 1), scale * self.value(x).sum());
        self.push(v, Op::SumAll(x, scale))
    }

    /// `Σ mask⊙(pred−target)² / denom`.
    pub fn masked_sq_err(&mut self, pred: Var, target: &Mat, mask: &Mat, denom: f64) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim());
        assert_eq!(p.dim(), mask.dim());
        assert!(denom > 0.0);
        let mut total = 0.0;
        for ((&pv, &tv), &mv) in p.iter().zip(target.iter()).zip(mask.iter()) {
            let d = pv - tv;
            total += mv * d * d;
        }
        let v = Mat::from_elem((1, 1), total / denom);
        self.push(
            v,
            Op::MaskedSqErr {
                pred,
                target: target.clone(),
                mask: mask.clone(),
                denom,
            },
        )
    }

    /// `Σ mask⊙smooth_l1(pred−target) / denom` with quadratic zone `beta`.
    pub fn masked_smooth_l1(
        &mut self,
        pred: Var,
        target: &Mat,
        mask: &Mat,
        denom: f64,
        beta: f64,
    ) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim());
        assert_eq!(p.dim(), mask.dim());
        assert!(denom > 0.0 && beta > 0.0);
        let mut total = 0.0;
        for ((&pv, &tv), &mv) in p.iter().zip(target.iter()).zip(mask.iter()) {
            total += mv * smooth_l1(pv - tv, beta);
        }
        let v = Mat::from_elem((1, 1), total / denom);
        self.push(
            v,
            Op::MaskedSmoothL1 {
                pred,
                target: target.clone(),
                mask: mask.clone(),
                denom,
                beta,
            },
        )
    }

    /// Reverse pass from a 1×1 root seeded with 1. Returns per-node adjoints.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be a 1×1 scalar"
        );
        let mut adj: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Gradients { adj }
    }

    fn propagate(&self, i: usize, g: &Mat, adj: &mut [Option<Mat>]) {
        let acc = |adj: &mut [Option<Mat>], v: Var, delta: Mat| match &mut adj[v.0] {
            Some(a) => *a += &delta,
            slot => *slot = Some(delta),
        };
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(adj, *a, g.dot(&self.value(*b).t()));
                acc(adj, *b, self.value(*a).t().dot(g));
            }
            Op::MatMulNT(a, b) => {
                acc(adj, *a, g.dot(self.value(*b)));
                acc(adj, *b, g.t().dot(self.value(*a)));
            }
            Op::Add(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, -g.clone());
            }
            Op::Mul(a, b) => {
                acc(adj, *a, g * self.value(*b));
                acc(adj, *b, g * self.value(*a));
            }
            Op::Scale(a, k) => acc(adj, *a, g.mapv(|x| x * k)),
            Op::AddRow(a, row) => {
                acc(adj, *a, g.clone());
                let col_sums = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                acc(adj, *row, col_sums);
            }
            Op::AddConst(a) => acc(adj, *a, g.clone()),
            Op::MulConst(a, c) => acc(adj, *a, g * c),
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = x.mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                acc(adj, *a, g * &d);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut dx = g * y;
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.sum();
                    for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                        *d -= dot * yv;
                    }
                }
                acc(adj, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[i].value; // log-probs
                let mut dx = g.clone();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let gsum: f64 = drow.sum();
                    for (d, &lv) in drow.iter_mut().zip(yrow.iter()) {
                        *d -= gsum * lv.exp();
                    }
                }
                acc(adj, *a, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let n = xv.ncols() as f64;
                let mut dx = Mat::zeros(xv.raw_dim());
                let mut dgain = Mat::zeros((1, xv.ncols()));
                let mut dbias = Mat::zeros((1, xv.ncols()));
                for (r, row) in xv.rows().into_iter().enumerate() {
                    let (xhat, inv_std) = ln_row(&row.to_owned());
                    let grow = g.row(r);
                    let mut dxhat = vec![0.0; xv.ncols()];
                    for j in 0..xv.ncols() {
                        dgain[(0, j)] += grow[j] * xhat[j];
                        dbias[(0, j)] += grow[j];
                        dxhat[j] = grow[j] * gv[(0, j)];
                    }
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / n;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..xv.ncols() {
                        dx[(r, j)] =
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                acc(adj, *x, dx);
                acc(adj, *gain, dgain);
                acc(adj, *bias, dbias);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    acc(adj, p, g.slice(s![at..at + n, ..]).to_owned());
                    at += n;
                }
            }
            Op::SliceRows { x, start, len } => {
                let mut dx = Mat::zeros(self.value(*x).raw_dim());
                dx.slice_mut(s![*start..start + len, ..]).assign(g);
                acc(adj, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).ncols();
                    acc(adj, p, g.slice(s![.., at..at + n]).to_owned());
                    at += n;
                }
            }
            Op::SliceCols { x, start, len } => {
                let mut dx = Mat::zeros(self.value(*x).raw_dim());
                dx.slice_mut(s![.., *start..start + len]).assign(g);
                acc(adj, *x, dx);
            }
            Op::GatherRows { table, ids } => {
                let mut dt = Mat::zeros(self.value(*table).raw_dim());
                for (i, &id) in ids.iter().enumerate() {
                    let mut r = dt.row_mut(id);
                    r += &g.row(i);
                }
                acc(adj, *table, dt);
            }
            Op::PickSum { x, picks, scale } => {
                let mut dx = Mat::zeros(self.value(*x).raw_dim());
                let gs = g[(0, 0)] * scale;
                for &(r, c) in picks {
                    dx[(r, c)] += gs;
                }
                acc(adj, *x, dx);
            }
            Op::SumAll(x, scale) => {
                let gs = g[(0, 0)] * scale;
                acc(adj, *x, Mat::from_elem(self.value(*x).raw_dim(), gs));
            }
            Op::MaskedSqErr {
                pred,
                target,
                mask,
                denom,
            } => {
                let p = self.value(*pred);
                let gs = g[(0, 0)] / denom;
                let mut dp = Mat::zeros(p.raw_dim());
                for ((d, (&pv, &tv)), &mv) in dp
                    .iter_mut()
                    .zip(p.iter().zip(target.iter()))
                    .zip(mask.iter())
                {
                    *d = gs * mv * 2.0 * (pv - tv);
                }
                acc(adj, *pred, dp);
            }
            Op::MaskedSmoothL1 {
                pred,
                target,
                mask,
                denom,
                beta,
            } => {
                let p = self.value(*pred);
                let gs = g[(0, 0)] / denom;
                let mut dp = Mat::zeros(p.raw_dim());
                for ((d, (&pv, &tv)), &mv) in dp
                    .iter_mut()
                    .zip(p.iter().zip(target.iter()))
                    .zip(mask.iter())
                {
                    let diff = pv - tv;
                    *d = gs * mv * (diff / beta).clamp(-1.0, 1.0);
                }
                acc(adj, *pred, dp);
            }
        }
    }
}

/// Adjoints from one backward pass.
pub struct Gradients {
    adj: Vec<Option<Mat>>,
}

impl Gradients {
    /// Adjoint of a node; zero matrix when the root never reached it.
    pub fn of(&self, tape: &Tape, v: Var) -> Mat {
        match &self.adj[v.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(tape.value(v).raw_dim()),
        }
    }

    /// Whether any gradient reached this node at all.
    pub fn touched(&self, v: Var) -> bool {
        self.adj[v.0].is_some()
    }

    /// Folds every `Op::Param` adjoint into `out`, scaled by `k`.
    pub fn accumulate_params(&self, tape: &Tape, k: f64, out: &mut Grads) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &self.adj[i] {
                    if k == 1.0 {
                        out.add(id, g);
                    } else {
                        out.add(id, &g.mapv(|x| x * k));
                    }
                }
            }
        }
    }
}

/// Memoizes one tape node per parameter so repeated uses share storage and
/// their adjoints accumulate on a single leaf.
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            vars: vec![None; store.len()],
        }
    }

    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        match self.vars[id.index()] {
            Some(v) => v,
            None => {
                let v = tape.param(store, id);
                self.vars[id.index()] = Some(v);
                v
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

/// Row-wise softmax with max subtraction; safe against `NEG_MASK` columns.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut v = x.clone();
    for mut row in v.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    v
}

/// Normalized row and inverse std for layer norm: `(x−μ)/√(σ²+ε)`.
fn ln_row(row: &ndarray::Array1<f64>) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.sum() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    (row.iter().map(|&x| (x - mean) * inv_std).collect(), inv_std)
}
