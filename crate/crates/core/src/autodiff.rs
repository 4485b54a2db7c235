//! Reverse-mode differentiation over a per-forward tape.
//!
//! Every operation appends a node holding its forward value and enough
//! saved state to run its adjoint. Values are `rows × cols` matrices.
//! A tape is built for one forward pass, differentiated once, and dropped.

use std::collections::{BTreeMap, HashMap};

use crate::error::{shape_err, Error, Result};
use crate::params::ParameterTable;
use crate::tensor::{matmul, matmul_at_acc, matmul_bt, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Silu(Var),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    LogSigmoid(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    Broadcast(Var),
    Gather(Var, Vec<usize>),
    SelectCol(Var, usize),
    MeanRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    LogSoftmaxAt {
        logits: Var,
        mask: Vec<bool>,
        index: usize,
        probs: Vec<T>,
    },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

/// Adjoints for every node of a tape after one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    T::of(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

fn log_sigmoid<T: Real>(x: T) -> T {
    // log σ(x) = -softplus(-x)
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Softmax over `row` restricted to `mask` (true = allowed). Masked entries get 0.
pub(crate) fn masked_softmax_row<T: Real>(row: &[T], mask: Option<&[bool]>) -> Vec<T> {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    let mut out = vec![T::zero(); row.len()];
    let mut sum = T::zero();
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) {
            let e = (v - max).exp();
            out[j] = e;
            sum = sum + e;
        }
    }
    for o in &mut out {
        *o = *o / sum;
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Vars at or beyond
    /// `len` become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|(_, v)| v.0 < len);
        self.param_index.retain(|_, v| v.0 < len);
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.rows(), t.cols(), t.values().to_vec(), Op::Leaf)
    }

    pub fn leaf_values(&mut self, rows: usize, cols: usize, values: Vec<T>) -> Result<Var> {
        if rows * cols != values.len() {
            return Err(shape_err("leaf", format!("{rows}x{cols} vs {}", values.len())));
        }
        Ok(self.push(rows, cols, values, Op::Leaf))
    }

    /// Leaf bound to a named parameter; repeated lookups share one node.
    pub fn param(&mut self, table: &ParameterTable<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let t = table.get(name)?;
        let v = self.leaf(t);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let out = matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let out = matmul_bt(self.value(a), self.value(b), m, k, n);
        Ok(self.push(m, n, out, Op::MatMulBt(a, b)))
    }

    fn broadcast_index(&self, a: Var, b: Var, op: &'static str) -> Result<impl Fn(usize) -> usize> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let kind = if (ar, ac) == (br, bc) {
            0
        } else if br == 1 && bc == ac {
            1
        } else if br == 1 && bc == 1 {
            2
        } else {
            return Err(shape_err(op, format!("{ar}x{ac} with {br}x{bc}")));
        };
        Ok(move |i: usize| match kind {
            0 => i,
            1 => i % ac,
            _ => 0,
        })
    }

    /// Elementwise sum; `b` may be a row (broadcast over rows) or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let idx = self.broadcast_index(a, b, "add")?;
        let (r, c) = self.shape(a);
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..r * c).map(|i| av[i] + bv[idx(i)]).collect();
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("sub", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(r, c, out, Op::Sub(a, b)))
    }

    /// Elementwise product; `b` may be a row or a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let idx = self.broadcast_index(a, b, "mul")?;
        let (r, c) = self.shape(a);
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..r * c).map(|i| av[i] * bv[idx(i)]).collect();
        Ok(self.push(r, c, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(r, c, out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(masked_softmax_row(&av[i * c..(i + 1) * c], None));
        }
        self.push(r, c, out, Op::Softmax(a))
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) {
            return Err(shape_err("rmsnorm", format!("gain {:?} for width {c}", self.shape(gain))));
        }
        let (xv, gv) = (self.value(x), self.value(gain));
        let mut out = Vec::with_capacity(r * c);
        let mut inv_rms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::of(c as f64);
            let denom = (ms + eps).sqrt();
            let inv = if denom > T::zero() { T::one() / denom } else { T::zero() };
            inv_rms.push(inv);
            out.extend(row.iter().zip(gv).map(|(&v, &g)| v * inv * g));
        }
        Ok(self.push(r, c, out, Op::RmsNorm { x, gain, inv_rms }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(shape_err("concat_cols", format!("{ar} rows vs {br} rows")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ar * (ac + bc));
        for i in 0..ar {
            out.extend_from_slice(&av[i * ac..(i + 1) * ac]);
            out.extend_from_slice(&bv[i * bc..(i + 1) * bc]);
        }
        Ok(self.push(ar, ac + bc, out, Op::ConcatCols(a, b)))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(shape_err("concat_rows", format!("{ac} cols vs {bc} cols")));
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        Ok(self.push(ar + br, ac, out, Op::ConcatRows(a, b)))
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (ar, c) = self.shape(a);
        if ar != 1 {
            return Err(shape_err("broadcast_rows", format!("expected one row, got {ar}")));
        }
        let row = self.value(a).to_vec();
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(&row);
        }
        Ok(self.push(rows, c, out, Op::Broadcast(a)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} of {r}")));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        Ok(self.push(idx.len(), c, out, Op::Gather(a, idx.to_vec())))
    }

    pub fn select_col(&mut self, a: Var, j: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if j >= c {
            return Err(shape_err("select_col", format!("col {j} of {c}")));
        }
        let av = self.value(a);
        let out = (0..r).map(|i| av[i * c + j]).collect();
        Ok(self.push(r, 1, out, Op::SelectCol(a, j)))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let inv = T::one() / T::of(r as f64);
        let out = (0..c)
            .map(|j| (0..r).map(|i| av[i * c + j]).sum::<T>() * inv)
            .collect();
        self.push(1, c, out, Op::MeanRows(a))
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries `q` (r×d), keys `k` and values `v` (c×d). Head `m` uses
    /// columns `m·d'..(m+1)·d'`; outputs are concatenated back to r×d.
    /// Masked keys (false) receive zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
        let (r, d) = self.shape(q);
        let (c, dk) = self.shape(k);
        if dk != d || self.shape(v) != (c, d) {
            return Err(shape_err(
                "attention",
                format!("q {r}x{d}, k {c}x{dk}, v {:?}", self.shape(v)),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("width {d} not divisible by {heads} heads")));
        }
        if let Some(m) = mask {
            if m.len() != c {
                return Err(shape_err("attention", format!("mask {} for {c} keys", m.len())));
            }
            if !m.iter().any(|&x| x) {
                return Err(Error::NoFeasibleNode);
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); heads * r * c];
        let mut out = vec![T::zero(); r * d];
        let mut scores = vec![T::zero(); c];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..r {
                let qi = &qv[i * d + off..i * d + off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    *s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                let p = masked_softmax_row(&scores, mask);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    if pj == T::zero() {
                        continue;
                    }
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o = *o + pj * x;
                    }
                }
                probs[(h * r + i) * c..(h * r + i + 1) * c].copy_from_slice(&p);
            }
        }
        Ok(self.push(
            r,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,

                probs,
            },
        ))
    }

    /// `log softmax(logits)[index]` over the unmasked entries of a single row.
    pub fn log_softmax_at(&mut self, logits: Var, mask: &[bool], index: usize) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if r != 1 || mask.len() != c || index >= c {
            return Err(shape_err("log_softmax_at", format!("{r}x{c}, mask {}, index {index}", mask.len())));
        }
        if !mask[index] {
            return Err(Error::InfeasibleAction {
                action: index,
                reason: "masked".into(),
            });
        }
        let probs = masked_softmax_row(self.value(logits), Some(mask));
        let lv = self.value(logits);
        let max = (0..c)
            .filter(|&j| mask[j])
            .map(|j| lv[j])
            .fold(T::neg_infinity(), T::max);
        let lse = max
            + (0..c)
                .filter(|&j| mask[j])
                .map(|j| (lv[j] - max).exp())
                .sum::<T>()
                .ln();
        let out = lv[index] - lse;
        Ok(self.push(
            1,
            1,
            vec![out],
            Op::LogSoftmaxAt {
                logits,
                mask: mask.to_vec(),
                index,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, vars: &[Var]) -> Result<Var> {
        let Some(&first) = vars.first() else {
            return Err(shape_err("sum", "empty list"));
        };
        let (r, c) = self.shape(first);
        let mut out = vec![T::zero(); r * c];
        for &v in vars {
            if self.shape(v) != (r, c) {
                return Err(shape_err("sum", format!("{:?} vs {r}x{c}", self.shape(v))));
            }
            for (o, &x) in out.iter_mut().zip(self.value(v)) {
                *o = *o + x;
            }
        }
        Ok(self.push(r, c, out, Op::Sum(vars.to_vec())))
    }

    /// Back-propagates from a scalar (1×1) node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.adjoint(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn adjoint(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = c;
                // dA = G · Bᵀ ; dB = Aᵀ · G
                let da = matmul_bt(g, self.value(*b), m, n, k);
                add_into(self.acc(grads, *a), &da);
                matmul_at_acc(self.acc(grads, *b), self.value(*a), g, m, k, n);
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.shape(*a);
                let n = c;
                // C = A·Bᵀ ; dA = G · B ; dB = Gᵀ · A
                let da = matmul(g, self.value(*b), m, n, k);
                add_into(self.acc(grads, *a), &da);
                matmul_at_acc(self.acc(grads, *b), g, self.value(*a), m, n, k);
            }
            Op::Add(a, b) => {
                add_into(self.acc(grads, *a), g);
                let blen = self.nodes[b.0].value.len();
                let gb = self.acc(grads, *b);
                for (i, &gi) in g.iter().enumerate() {
                    let j = i % blen;
                    gb[j] = gb[j] + gi;
                }
            }
            Op::Sub(a, b) => {
                add_into(self.acc(grads, *a), g);
                let gb = self.acc(grads, *b);
                for (o, &gi) in gb.iter_mut().zip(g) {
                    *o = *o - gi;
                }
            }
            Op::Mul(a, b) => {
                let blen = self.nodes[b.0].value.len();
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let da: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * bv[i % blen]).collect();
                let mut db = vec![T::zero(); blen];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % blen] = db[i % blen] + gi * av[i];
                }
                add_into(self.acc(grads, *a), &da);
                add_into(self.acc(grads, *b), &db);
            }
            Op::Scale(a, s) => {
                let s = *s;
                let ga = self.acc(grads, *a);
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o = *o + gi * s;
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d: Vec<T> = g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect();
                add_into(self.acc(grads, *a), &d);
            }
            Op::Silu(a) => {
                let x = &self.nodes[a.0].value;
                let d: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| {
                        let s = sigmoid(xi);
                        gi * (s + xi * s * (T::one() - s))
                    })
                    .collect();
                add_into(self.acc(grads, *a), &d);
            }
            Op::Gelu(a) => {
                let x = &self.nodes[a.0].value;
                let d: Vec<T> = g.iter().zip(x).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect();
                add_into(self.acc(grads, *a), &d);
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                let d: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                add_into(self.acc(grads, *a), &d);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d: Vec<T> = g.iter().zip(y).map(|(&gi, &yi)| gi * (T::one() - yi * yi)).collect();
                add_into(self.acc(grads, *a), &d);
            }
            Op::LogSigmoid(a) => {
                let x = &self.nodes[a.0].value;
                let d: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| gi * (T::one() - sigmoid(xi)))
                    .collect();
                add_into(self.acc(grads, *a), &d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_into(self.acc(grads, *a), &d);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let mut dx = vec![T::zero(); r * c];
                let mut dg = vec![T::zero(); c];
                let cf = T::of(c as f64);
                for i in 0..r {
                    let inv = inv_rms[i];
                    let xr = &xv[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let mut dot = T::zero();
                    for j in 0..c {
                        dg[j] = dg[j] + gr[j] * xr[j] * inv;
                        dot = dot + gr[j] * gv[j] * xr[j];
                    }
                    let k = inv * inv * inv * dot / cf;
                    for j in 0..c {
                        dx[i * c + j] = gr[j] * gv[j] * inv - xr[j] * k;
                    }
                }
                add_into(self.acc(grads, *x), &dx);
                add_into(self.acc(grads, *gain), &dg);
            }
            Op::ConcatCols(a, b) => {
                let ac = self.nodes[a.0].cols;
                let bc = self.nodes[b.0].cols;
                {
                    let ga = self.acc(grads, *a);
                    for i in 0..r {
                        for j in 0..ac {
                            ga[i * ac + j] = ga[i * ac + j] + g[i * c + j];
                        }
                    }
                }
                let gb = self.acc(grads, *b);
                for i in 0..r {
                    for j in 0..bc {
                        gb[i * bc + j] = gb[i * bc + j] + g[i * c + ac + j];
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].value.len();
                add_into(self.acc(grads, *a), &g[..na]);
                add_into(self.acc(grads, *b), &g[na..]);
            }
            Op::Broadcast(a) => {
                let ga = self.acc(grads, *a);
                for i in 0..r {
                    for j in 0..c {
                        ga[j] = ga[j] + g[i * c + j];
                    }
                }
            }
            Op::Gather(a, idx) => {
                let ga = self.acc(grads, *a);
                for (row, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] = ga[src * c + j] + g[row * c + j];
                    }
                }
            }
            Op::SelectCol(a, col) => {
                let ac = self.nodes[a.0].cols;
                let ga = self.acc(grads, *a);
                for i in 0..r {
                    ga[i * ac + col] = ga[i * ac + col] + g[i];
                }
            }
            Op::MeanRows(a) => {
                let ar = self.nodes[a.0].rows;
                let inv = T::one() / T::of(ar as f64);
                let ga = self.acc(grads, *a);
                for i in 0..ar {
                    for j in 0..c {
                        ga[i * c + j] = ga[i * c + j] + g[j] * inv;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let d = c;
                let nk = self.nodes[k.0].rows;
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let qv = &self.nodes[q.0].value;
                let kv = &self.nodes[k.0].value;
                let vv = &self.nodes[v.0].value;
                let mut dq = vec![T::zero(); r * d];
                let mut dk = vec![T::zero(); nk * d];
                let mut dv = vec![T::zero(); nk * d];
                let mut dp = vec![T::zero(); nk];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..r {
                        let p = &probs[(h * r + i) * nk..(h * r + i + 1) * nk];
                        let go = &g[i * d + off..i * d + off + dh];
                        for j in 0..nk {
                            let vj = &vv[j * d + off..j * d + off + dh];
                            dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            if p[j] != T::zero() {
                                for t in 0..dh {
                                    dv[j * d + off + t] = dv[j * d + off + t] + p[j] * go[t];
                                }
                            }
                        }
                        let dot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                        for j in 0..nk {
                            if p[j] == T::zero() {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - dot) * scale;
                            for t in 0..dh {
                                dq[i * d + off + t] = dq[i * d + off + t] + ds * kv[j * d + off + t];
                                dk[j * d + off + t] = dk[j * d + off + t] + ds * qv[i * d + off + t];
                            }
                        }
                    }
                }
                add_into(self.acc(grads, *q), &dq);
                add_into(self.acc(grads, *k), &dk);
                add_into(self.acc(grads, *v), &dv);
            }
            Op::LogSoftmaxAt {
                logits,
                mask,
                index,
                probs,
            } => {
                let gi = g[0];
                let gl = self.acc(grads, *logits);
                for j in 0..mask.len() {
                    if !mask[j] {
                        continue;
                    }
                    let ind = if j == *index { T::one() } else { T::zero() };
                    gl[j] = gl[j] + gi * (ind - probs[j]);
                }
            }
            Op::Sum(vars) => {
                for v in vars {
                    add_into(self.acc(grads, *v), g);
                }
            }
        }
    }

    /// Gradients of every parameter touched by this tape, keyed by name.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Vec<T>> {
        self.params
            .iter()
            .map(|(name, v)| {
                let n = self.nodes[v.0].value.len();
                let g = grads.wrt(*v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); n]);
                (name.clone(), g)
            })
            .collect()
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks d(sum(w ⊙ f(x)))/dx against central differences for a unary op.
    fn check_unary(f: fn(&mut Tape<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, 3, 4, 1.5);
        let w = random_tensor(&mut rng, 3, 4, 1.0);
        let err = check_gradient(&[x, w], |tape, vars| {
            let y = f(tape, vars[0]);
            let rows = tape.shape(y).0;
            let w = tape.gather_rows(vars[1], &(0..rows).collect::<Vec<_>>())?;
            let p = tape.mul(y, w)?;
            let ones = tape.leaf(&Tensor::filled(&[4, 1], 1.0));
            let s = tape.matmul(p, ones)?;
            let ones_r = tape.leaf(&Tensor::filled(&[1, rows], 1.0));
            tape.matmul(ones_r, s)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn truncate_forgets_later_params() {
        let mut table = ParameterTable::<f64>::new();
        table.insert("a", Tensor::scalar(1.0)).unwrap();
        table.insert("b", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&table, "a").unwrap();
        let mark = tape.len();
        let b = tape.param(&table, "b").unwrap();
        let _ = tape.mul(a, b).unwrap();
        tape.truncate(mark);
        assert_eq!(tape.len(), 1);
        let b2 = tape.param(&table, "b").unwrap();
        assert_eq!(b2, b);
        assert_eq!(tape.scalar(b2), 2.0);
        let y = tape.mul(a, b2).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(tape.param_grads(&g)["a"], vec![2.0]);
    }

    #[test]
    fn unary_gradients() {
        check_unary(|t, x| t.sigmoid(x));
        check_unary(|t, x| t.silu(x));
        check_unary(|t, x| t.gelu(x));
        check_unary(|t, x| t.tanh(x));
        check_unary(|t, x| t.log_sigmoid(x));
        check_unary(|t, x| t.softmax(x));
        check_unary(|t, x| t.mean_rows(x));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let p = masked_softmax_row(&[1.0f64, 5.0, 2.0, -1.0], Some(&[true, false, true, true]));
        assert_eq!(p[1], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-800.0f64) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0f64).abs() < 1e-12);
        assert!((log_sigmoid(0.0f64) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_at_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 1, 6, 2.0);
        let mask = [true, false, true, true, false, true];
        let err = check_gradient(&[x], |tape, vars| tape.log_softmax_at(vars[0], &mask, 3));
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn log_softmax_at_rejects_masked_index() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::row(vec![0.0, 1.0]));
        assert!(tape.log_softmax_at(x, &[true, false], 1).is_err());
    }
}
