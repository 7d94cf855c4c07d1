//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation appends a node holding its value and the indices of its
//! inputs, so the record is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep. All binary elementwise ops
//! demand identical shapes; row-wise bias and row scaling are separate ops.

use super::tensor::{as_matrix, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, b_t: bool },
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Affine { x: usize, scale: T },
    AddBias { m: usize, bias: usize },
    ScaleRows { m: usize, s: usize },
    SoftmaxRows(usize),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    Sum(usize),
    Reshape(usize),
    CrossEntropyRows { logits: usize, targets: Vec<usize> },
    GruGates { gi: usize, gh: usize, h: usize, saved: Vec<T> },
}

/// Inline shape of at most two dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Shape {
    dims: [usize; 2],
    rank: usize,
}

impl Shape {
    fn of(s: &[usize]) -> Self {
        assert!(s.len() <= 2, "tape nodes are at most 2-D");
        let mut dims = [0; 2];
        dims[..s.len()].copy_from_slice(s);
        Shape { dims, rank: s.len() }
    }
}

impl std::ops::Deref for Shape {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.dims[..self.rank]
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Shape,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

/// The computation record. Values are computed eagerly as ops are added.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(shape: &[usize]) -> (usize, usize) {
    as_matrix(shape).expect("tape nodes are at most 2-D")
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Shape, value: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Records a tensor as a leaf; gradients flow to it iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        if t.shape().len() > 2 {
            return Err(Error::shape("leaf", t.shape(), &[]));
        }
        Ok(self.push(Shape::of(t.shape()), t.data().to_vec(), Op::Leaf, t.requires_grad()))
    }

    /// Trainable leaf from raw parts.
    pub fn param(&mut self, shape: &[usize], data: &[T]) -> Var {
        assert!(shape.len() <= 2 && shape.iter().product::<usize>() == data.len());
        self.push(Shape::of(shape), data.to_vec(), Op::Leaf, true)
    }

    /// Untracked leaf from raw parts.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Var {
        assert!(shape.len() <= 2 && shape.iter().product::<usize>() == data.len());
        self.push(Shape::of(shape), data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.to_vec(), n.value.clone()).expect("consistent node")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    /// Accumulated gradient of the last backward sweeps; zeros if untouched.
    pub fn grad(&self, v: Var) -> Vec<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.node(v).value.len()],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// `a·b`, or `a·bᵀ` when `b_t` (b stored as n×k).
    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = if b_t { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.nodes[a.0].value, false, &self.nodes[b.0].value, b_t, &mut out, false);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Shape::of(&[m, n]), out, Op::MatMul { a: a.0, b: b.0, b_t }, tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ`: applies a weight stored as (out × in) to row inputs.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                match op {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                self.shape(a),
                self.shape(b),
            ));
        }
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out: Vec<T> = match op {
            Binary::Add => x.iter().zip(y).map(|(p, q)| *p + *q).collect(),
            Binary::Sub => x.iter().zip(y).map(|(p, q)| *p - *q).collect(),
            Binary::Mul => x.iter().zip(y).map(|(p, q)| *p * *q).collect(),
        };
        let shape = Shape::of(self.shape(a));
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(shape, out, Op::Binary(op, a.0, b.0), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let out: Vec<T> = match op {
            Unary::Relu => x.iter().map(|v| v.max(T::zero())).collect(),
            Unary::Tanh => x.iter().map(|v| v.tanh()).collect(),
            Unary::Sigmoid => x.iter().map(|v| sigmoid(*v)).collect(),
        };
        let shape = Shape::of(self.shape(a));
        let tracked = self.tracked(&[a]);
        self.push(shape, out, Op::Unary(op, a.0), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.nodes[x.0]
            .value
            .iter()
            .map(|v| scale * *v + shift)
            .collect();
        let shape = Shape::of(self.shape(x));
        let tracked = self.tracked(&[x]);
        self.push(shape, out, Op::Affine { x: x.0, scale }, tracked)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::zero())
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    /// Adds a length-c bias to every row of an r×c matrix.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims(self.shape(m));
        if self.node(bias).value.len() != c || self.shape(bias).len() > 1 && dims(self.shape(bias)).0 != 1 {
            return Err(Error::shape("add_bias", self.shape(m), self.shape(bias)));
        }
        let b = &self.nodes[bias.0].value;
        let mut out = self.nodes[m.0].value.clone();
        for row in 0..r {
            for (o, bv) in out[row * c..(row + 1) * c].iter_mut().zip(b) {
                *o = *o + *bv;
            }
        }
        let shape = Shape::of(self.shape(m));
        let tracked = self.tracked(&[m, bias]);
        Ok(self.push(shape, out, Op::AddBias { m: m.0, bias: bias.0 }, tracked))
    }

    /// Multiplies row i of an r×c matrix by `s[i]` (s is r×1).
    pub fn scale_rows(&mut self, m: Var, s: Var) -> Result<Var> {
        let (r, c) = dims(self.shape(m));
        if self.shape(s) != [r, 1] {
            return Err(Error::shape("scale_rows", self.shape(m), self.shape(s)));
        }
        let sv = &self.nodes[s.0].value;
        let mut out = self.nodes[m.0].value.clone();
        for row in 0..r {
            for o in &mut out[row * c..(row + 1) * c] {
                *o = *o * sv[row];
            }
        }
        let shape = Shape::of(self.shape(m));
        let tracked = self.tracked(&[m, s]);
        Ok(self.push(shape, out, Op::ScaleRows { m: m.0, s: s.0 }, tracked))
    }

    /// Row-wise softmax with max subtraction. A vector is a single row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims(self.shape(x));
        if c == 0 {
            return Err(Error::Empty("softmax"));
        }
        let mut out = self.nodes[x.0].value.clone();
        for row in 0..r {
            softmax_in_place(&mut out[row * c..(row + 1) * c]);
        }
        let shape = Shape::of(self.shape(x));
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, out, Op::SoftmaxRows(x.0), tracked))
    }

    /// Horizontal concatenation; vectors concatenate into a longer vector.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat"))?;
        let rows = dims(self.shape(first)).0;
        let vector = self.shape(first).len() == 1;
        for x in xs {
            if dims(self.shape(*x)).0 != rows {
                return Err(Error::shape("concat", self.shape(first), self.shape(*x)));
            }
        }
        let widths: Vec<usize> = xs.iter().map(|x| dims(self.shape(*x)).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for row in 0..rows {
            for (x, w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[x.0].value[row * w..(row + 1) * w]);
            }
        }
        let shape = if vector { Shape::of(&[total]) } else { Shape::of(&[rows, total]) };
        let tracked = self.tracked(xs);
        Ok(self.push(shape, out, Op::ConcatCols(xs.iter().map(|v| v.0).collect()), tracked))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims(self.shape(x));
        if start > end || end > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(r * w);
        for row in 0..r {
            out.extend_from_slice(&v[row * c + start..row * c + end]);
        }
        let shape = if self.shape(x).len() == 1 { Shape::of(&[w]) } else { Shape::of(&[r, w]) };
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, out, Op::SliceCols { x: x.0, start }, tracked))
    }

    /// GRU gate arithmetic: `gi`, `gh` are B×3h projections (bias included) in r, z, n order,
    /// `h` is B×h. Returns `(1-z)∘n + z∘h`.
    pub fn gru_gates(&mut self, gi: Var, gh: Var, h: Var) -> Result<Var> {
        let (b, hd) = dims(self.shape(h));
        if self.shape(gi) != [b, 3 * hd] || self.shape(gh) != [b, 3 * hd] {
            return Err(Error::shape("gru_gates", self.shape(gi), self.shape(h)));
        }
        let (xi, xh, hv) = (&self.nodes[gi.0].value, &self.nodes[gh.0].value, &self.nodes[h.0].value);
        let mut out = Vec::with_capacity(b * hd);
        let mut saved = vec![T::zero(); 3 * b * hd];
        for row in 0..b {
            let (pi, ph) = (&xi[row * 3 * hd..(row + 1) * 3 * hd], &xh[row * 3 * hd..(row + 1) * 3 * hd]);
            let sv = &mut saved[row * 3 * hd..(row + 1) * 3 * hd];
            for j in 0..hd {
                let r = sigmoid(pi[j] + ph[j]);
                let z = sigmoid(pi[hd + j] + ph[hd + j]);
                let n = (pi[2 * hd + j] + r * ph[2 * hd + j]).tanh();
                sv[j] = r;
                sv[hd + j] = z;
                sv[2 * hd + j] = n;
                out.push((T::one() - z) * n + z * hv[row * hd + j]);
            }
        }
        let tracked = self.tracked(&[gi, gh, h]);
        let op = Op::GruGates { gi: gi.0, gh: gh.0, h: h.0, saved };
        Ok(self.push(Shape::of(&[b, hd]), out, op, tracked))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims(self.shape(x));
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", self.shape(x), &[*bad]));
        }
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Shape::of(&[idx.len(), c]), out, Op::GatherRows { x: x.0, idx: idx.to_vec() }, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().copied().sum();
        let tracked = self.tracked(&[x]);
        self.push(Shape::of(&[]), vec![s], Op::Sum(x.0), tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.len() > 2 || shape.iter().product::<usize>() != self.node(x).value.len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let v = self.nodes[x.0].value.clone();
        let tracked = self.tracked(&[x]);
        Ok(self.push(Shape::of(shape), v, Op::Reshape(x.0), tracked))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = dims(self.shape(logits));
        if targets.len() != r || targets.iter().any(|&t| t >= c) || r == 0 {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let v = &self.nodes[logits.0].value;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("cross-entropy logits".into()));
        }
        let mut total = T::zero();
        for (row, &t) in targets.iter().enumerate() {
            let xs = &v[row * c..(row + 1) * c];
            total = total + log_sum_exp(xs) - xs[t];
        }
        let loss = total / T::from_usize(r).unwrap();
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            Shape::of(&[]),
            vec![loss],
            Op::CrossEntropyRows {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            tracked,
        ))
    }

    fn acc(&mut self, idx: usize, delta: &[T]) {
        if !self.nodes[idx].tracked {
            return;
        }
        match &mut self.grads[idx] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a = *a + *b),
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    fn acc_with(&mut self, idx: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[idx].tracked {
            return;
        }
        let n = self.nodes[idx].value.len();
        let g = self.grads[idx].get_or_insert_with(|| vec![T::zero(); n]);
        f(g);
    }

    /// Propagates d loss / d node to every tracked node. Gradients accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        // seed grads are kept separate so accumulation across calls works
        let mut pending: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![T::one()]);
        let saved = std::mem::take(&mut self.grads);
        self.grads = pending;
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                self.grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        let fresh = std::mem::replace(&mut self.grads, saved);
        for (i, g) in fresh.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].tracked {
                    match &mut self.grads[i] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        if let Op::GruGates { .. } = self.nodes[i].op {
            return self.propagate_gru(i, g);
        }
        let op = self.nodes[i].op.clone();
        match op {
            Op::GruGates { .. } => unreachable!(),
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (m, k) = dims(&self.nodes[a].shape);
                let n = dims(&self.nodes[i].shape).1;
                if self.nodes[a].tracked {
                    // dA = dC·Bᵀ (or dC·B when B is stored transposed)
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, &self.nodes[b].value, !b_t, &mut da, false);
                    self.acc(a, &da);
                }
                if self.nodes[b].tracked {
                    let mut db = vec![T::zero(); k * n];
                    if b_t {
                        // B stored n×k: dB = dCᵀ·A
                        T::gemm(n, m, k, g, true, &self.nodes[a].value, false, &mut db, false);
                    } else {
                        T::gemm(k, m, n, &self.nodes[a].value, true, g, false, &mut db, false);
                    }
                    self.acc(b, &db);
                }
            }
            Op::Binary(kind, a, b) => match kind {
                Binary::Add => {
                    self.acc(a, g);
                    self.acc(b, g);
                }
                Binary::Sub => {
                    self.acc(a, g);
                    let neg: Vec<T> = g.iter().map(|v| -*v).collect();
                    self.acc(b, &neg);
                }
                Binary::Mul => {
                    if self.nodes[a].tracked {
                        let d: Vec<T> = g.iter().zip(&self.nodes[b].value).map(|(p, q)| *p * *q).collect();
                        self.acc(a, &d);
                    }
                    if self.nodes[b].tracked {
                        let d: Vec<T> = g.iter().zip(&self.nodes[a].value).map(|(p, q)| *p * *q).collect();
                        self.acc(b, &d);
                    }
                }
            },
            Op::Unary(kind, a) => {
                let y = &self.nodes[i].value;
                let x = &self.nodes[a].value;
                let d: Vec<T> = match kind {
                    Unary::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(gv, xv)| if *xv > T::zero() { *gv } else { T::zero() })
                        .collect(),
                    Unary::Tanh => g.iter().zip(y).map(|(gv, yv)| *gv * (T::one() - *yv * *yv)).collect(),
                    Unary::Sigmoid => g.iter().zip(y).map(|(gv, yv)| *gv * *yv * (T::one() - *yv)).collect(),
                };
                self.acc(a, &d);
            }
            Op::Affine { x, scale } => {
                let d: Vec<T> = g.iter().map(|v| *v * scale).collect();
                self.acc(x, &d);
            }
            Op::AddBias { m, bias } => {
                self.acc(m, g);
                let (r, c) = dims(&self.nodes[m].shape);
                self.acc_with(bias, |db| {
                    for row in 0..r {
                        for (a, b) in db.iter_mut().zip(&g[row * c..(row + 1) * c]) {
                            *a = *a + *b;
                        }
                    }
                });
            }
            Op::ScaleRows { m, s } => {
                let (r, c) = dims(&self.nodes[m].shape);
                if self.nodes[m].tracked {
                    let sv = self.nodes[s].value.clone();
                    self.acc_with(m, |dm| {
                        for row in 0..r {
                            for col in 0..c {
                                let j = row * c + col;
                                dm[j] = dm[j] + g[j] * sv[row];
                            }
                        }
                    });
                }
                if self.nodes[s].tracked {
                    let mv = self.nodes[m].value.clone();
                    self.acc_with(s, |ds| {
                        for row in 0..r {
                            let mut acc = T::zero();
                            for col in 0..c {
                                acc = acc + g[row * c + col] * mv[row * c + col];
                            }
                            ds[row] = ds[row] + acc;
                        }
                    });
                }
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = dims(&self.nodes[i].shape);
                let y = &self.nodes[i].value;
                let mut d = vec![T::zero(); r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let dot: T = ys.iter().zip(gs).map(|(a, b)| *a * *b).sum();
                    for col in 0..c {
                        d[row * c + col] = ys[col] * (gs[col] - dot);
                    }
                }
                self.acc(x, &d);
            }
            Op::ConcatCols(xs) => {
                let rows = dims(&self.nodes[i].shape).0;
                let total = dims(&self.nodes[i].shape).1;
                let mut offset = 0;
                for x in xs {
                    let w = dims(&self.nodes[x].shape).1;
                    if self.nodes[x].tracked {
                        let mut d = Vec::with_capacity(rows * w);
                        for row in 0..rows {
                            d.extend_from_slice(&g[row * total + offset..row * total + offset + w]);
                        }
                        self.acc(x, &d);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = dims(&self.nodes[x].shape);
                let w = dims(&self.nodes[i].shape).1;
                self.acc_with(x, |dx| {
                    for row in 0..r {
                        for col in 0..w {
                            let j = row * c + start + col;
                            dx[j] = dx[j] + g[row * w + col];
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = dims(&self.nodes[x].shape).1;
                self.acc_with(x, |dx| {
                    for (out_row, &src) in idx.iter().enumerate() {
                        for col in 0..c {
                            dx[src * c + col] = dx[src * c + col] + g[out_row * c + col];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let n = self.nodes[x].value.len();
                let d = vec![g[0]; n];
                self.acc(x, &d);
            }
            Op::Reshape(x) => self.acc(x, g),
            Op::CrossEntropyRows { logits, targets } => {
                let (r, c) = dims(&self.nodes[logits].shape);
                let v = &self.nodes[logits].value;
                let scale = g[0] / T::from_usize(r).unwrap();
                let mut d = v.clone();
                for (row, &t) in targets.iter().enumerate() {
                    let xs = &mut d[row * c..(row + 1) * c];
                    softmax_in_place(xs);
                    xs[t] = xs[t] - T::one();
                    xs.iter_mut().for_each(|p| *p = *p * scale);
                }
                self.acc(logits, &d);
            }
        }
    }
}

impl<T: Real> Tape<T> {
    fn propagate_gru(&mut self, i: usize, g: &[T]) {
        let Op::GruGates { gi, gh, h, saved } = &self.nodes[i].op else { unreachable!() };
        let (gi, gh, h) = (*gi, *gh, *h);
        let (b, hd) = dims(&self.nodes[h].shape);
        let hv = &self.nodes[h].value;
        let ghv = &self.nodes[gh].value;
        let mut dgi = vec![T::zero(); b * 3 * hd];
        let mut dgh = vec![T::zero(); b * 3 * hd];
        let mut dh = vec![T::zero(); b * hd];
        for row in 0..b {
            let base = row * 3 * hd;
            for j in 0..hd {
                let (r, z, n) = (saved[base + j], saved[base + hd + j], saved[base + 2 * hd + j]);
                let go = g[row * hd + j];
                dh[row * hd + j] = go * z;
                let dz = go * (hv[row * hd + j] - n) * z * (T::one() - z);
                let dn = go * (T::one() - z) * (T::one() - n * n);
                let dr = dn * ghv[base + 2 * hd + j] * r * (T::one() - r);
                dgi[base + j] = dr;
                dgh[base + j] = dr;
                dgi[base + hd + j] = dz;
                dgh[base + hd + j] = dz;
                dgi[base + 2 * hd + j] = dn;
                dgh[base + 2 * hd + j] = dn * r;
            }
        }
        self.acc(gi, &dgi);
        self.acc(gh, &dgh);
        self.acc(h, &dh);
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_in_place<T: Real>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    xs.iter_mut().for_each(|x| *x = *x / total);
}

pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    max + xs.iter().map(|x| (*x - max).exp()).sum::<T>().ln()
}
