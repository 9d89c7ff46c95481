//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are kept on
//! the tape so that [`Tape::backward`] can replay the graph in reverse and
//! produce exact partial derivatives for every node that depends on a
//! trainable input. Everything is a 2-D matrix; scalars are `1 x 1`.

use ndarray::{s, Array2, Axis};

use crate::params::ParamId;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Const,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Mat),
    Scale(Var, f64),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    NormalizeRows(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    SumRows(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Variance floor inside layer normalization.
pub const LN_EPS: f64 = 1e-10;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
    params: Vec<(ParamId, usize)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }

    /// Gradients of every parameter leaf, in tape order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
    }
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// Hash of the sign pattern of every ReLU input on the tape. Two
    /// evaluations with equal signatures lie on the same linear piece of
    /// every ReLU.
    pub fn relu_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                for &x in self.nodes[a.0].value.iter() {
                    h ^= (x > 0.0) as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
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

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Differentiable leaf that is not a parameter (e.g. an upstream output).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId, value: Mat) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 x m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    /// Elementwise product with a constant matrix of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        assert_eq!(self.shape(a), c.dim(), "mul_const: shape mismatch");
        let v = self.value(a) * &c;
        let ng = self.ng(a);
        self.push(v, Op::MulConst(a, c), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sin);
        let ng = self.ng(a);
        self.push(v, Op::Sin(a), ng)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::cos);
        let ng = self.ng(a);
        self.push(v, Op::Cos(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::Softmax(a), ng)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmax(a), ng)
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)` without affine.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, inv_std), ng)
    }

    /// Row-wise projection onto the unit sphere; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(out, Op::NormalizeRows(a, norms), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape: size mismatch");
        let flat: Vec<f64> = x.iter().copied().collect();
        let v = Mat::from_shape_vec((rows, cols), flat).expect("reshape");
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Column sums as a `1 x m` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(v, Op::SumRows(a), ng)
    }

    /// Sum of all entries as a `1 x 1` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// `x · W + b` with `W: in x out` and `b: 1 x out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    /// Backpropagates from a scalar output with seed 1.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.shape(out), (1, 1), "backward: output must be scalar");
        self.backward_seeded(&[(out, Mat::from_elem((1, 1), 1.0))])
    }

    /// Backpropagates arbitrary upstream gradients into the tape.
    pub fn backward_seeded(&self, seeds: &[(Var, Mat)]) -> Grads {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.dim(), "seed shape mismatch");
            accumulate(&mut grads[v.0], g.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Grads { grads, params }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let send = |v: Var, d: Mat, grads: &mut [Option<Mat>]| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], d);
            }
        };
        match &node.op {
            Op::Const | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    send(*a, g.dot(&self.value(*b).t()), grads);
                }
                if self.ng(*b) {
                    send(*b, self.value(*a).t().dot(g), grads);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.ng(*a) {
                    send(*a, g.dot(self.value(*b)), grads);
                }
                if self.ng(*b) {
                    send(*b, g.t().dot(self.value(*a)), grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::AddRow(a, r) => {
                send(*a, g.clone(), grads);
                if self.ng(*r) {
                    send(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
                }
            }
            Op::MulRow(a, r) => {
                if self.ng(*a) {
                    send(*a, g * self.value(*r), grads);
                }
                if self.ng(*r) {
                    let gr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(*r, gr, grads);
                }
            }
            Op::MulConst(a, c) => send(*a, g * c, grads),
            Op::Scale(a, k) => send(*a, g * *k, grads),
            Op::Relu(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| {
                        if y <= 0.0 {
                            *d = 0.0
                        }
                    });
                send(*a, d, grads);
            }
            Op::Sin(a) => send(*a, g * &self.value(*a).mapv(f64::cos), grads),
            Op::Cos(a) => send(*a, -(g * &self.value(*a).mapv(f64::sin)), grads),
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
                }
                send(*a, d, grads);
            }
            Op::LogSoftmax(a) => {
                let p = node.value.mapv(f64::exp);
                let mut d = g.clone();
                for (mut drow, prow) in d.rows_mut().into_iter().zip(p.rows()) {
                    let total = drow.sum();
                    drow.zip_mut_with(&prow, |dv, &pv| *dv -= pv * total);
                }
                send(*a, d, grads);
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let n = y.ncols() as f64;
                let mut d = g.clone();
                for ((mut drow, yrow), is) in d.rows_mut().into_iter().zip(y.rows()).zip(inv_std)
                {
                    let mean_g = drow.sum() / n;
                    let mean_gy = drow.dot(&yrow) / n;
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv = is * (*dv - mean_g - yv * mean_gy));
                }
                send(*a, d, grads);
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut d = g.clone();
                for ((mut drow, yrow), &n) in d.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                    if n > 0.0 {
                        let dot = drow.dot(&yrow);
                        drow.zip_mut_with(&yrow, |dv, &yv| *dv = (*dv - yv * dot) / n);
                    } else {
                        drow.fill(0.0);
                    }
                }
                send(*a, d, grads);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.ng(*p) {
                        send(*p, g.slice(s![.., off..off + w]).to_owned(), grads);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    if self.ng(*p) {
                        send(*p, g.slice(s![off..off + h, ..]).to_owned(), grads);
                    }
                    off += h;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Mat::zeros(self.shape(*a));
                let h = g.nrows();
                d.slice_mut(s![*start..*start + h, ..]).assign(g);
                send(*a, d, grads);
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(self.shape(*a));
                let w = g.ncols();
                d.slice_mut(s![.., *start..*start + w]).assign(g);
                send(*a, d, grads);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Mat::zeros(self.shape(*a));
                for (r, &src) in idx.iter().enumerate() {
                    let mut dst = d.row_mut(src);
                    dst += &g.row(r);
                }
                send(*a, d, grads);
            }
            Op::Reshape(a) => {
                let flat: Vec<f64> = g.iter().copied().collect();
                send(*a, Mat::from_shape_vec(self.shape(*a), flat).expect("reshape"), grads);
            }
            Op::SumRows(a) => {
                let (r, _) = self.shape(*a);
                let d = g.broadcast(self.shape(*a)).expect("broadcast").to_owned();
                debug_assert_eq!(d.nrows(), r);
                send(*a, d, grads);
            }
            Op::Sum(a) => send(*a, Mat::from_elem(self.shape(*a), g[[0, 0]]), grads),
        }
    }
}

fn accumulate(slot: &mut Option<Mat>, d: Mat) {
    match slot {
        Some(acc) => *acc += &d,
        None => *slot = Some(d),
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
