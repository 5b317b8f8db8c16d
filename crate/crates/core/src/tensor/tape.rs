use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    CausalSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    SetRow { x: Var, row: usize, src: Var },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dynamic computation graph recorded in topological order.
///
/// Inputs are always recorded before the ops that consume them, so a single
/// reverse sweep over the node list is a valid backward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss w.r.t. every reachable `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn dims2(t: &Tensor<impl Real>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(op, format!("expected a 2-D tensor, got {s:?}"))),
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (value, deriv)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical {
                op: op_name.to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("param", value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (br, bc) = dims2(self.value(b), "matmul")?;
        let (kb, n) = if b_transposed { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, b_transposed },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push("add", value, Op::Add(a, b), rg)
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.cols();
        if vb.len() != n {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", vx.shape(), vb.shape())));
        }
        let b = vb.data();
        let data = vx
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(&r, &c)| r + c))
            .collect();
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", value, Op::AddBias { x, bias }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push("mul", value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::from_parts(vx.shape().to_vec(), vx.data().iter().map(|&v| v * c).collect());
        let rg = self.rg(&[x]);
        self.push("scale", value, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::from_parts(
            vx.shape().to_vec(),
            vx.data().iter().map(|&v| gelu_parts(v).0).collect(),
        );
        let rg = self.rg(&[x]);
        self.push("gelu", value, Op::Gelu(x), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = vx.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).as_f64().exp();
                    out[at(j)] = T::from_f64_lossy(e);
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] = T::from_f64_lossy(out[at(j)].as_f64() / total);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax { x, axis }, rg)
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "causal_softmax")?;
        if m != n {
            return Err(Error::shape("causal_softmax", format!("expected square, got {m}x{n}")));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..i * n + i + 1];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let dst = &mut out[i * n..i * n + i + 1];
            let exps: Vec<f64> = row.iter().map(|&s| (s - max).as_f64().exp()).collect();
            let total: f64 = exps.iter().sum();
            for (d, e) in dst.iter_mut().zip(exps) {
                *d = T::from_f64_lossy(e / total);
            }
        }
        let rg = self.rg(&[x]);
        self.push("causal_softmax", Tensor::from_parts(vec![m, n], out), Op::CausalSoftmax(x), rg)
    }

    /// Normalizes each row to zero mean / unit (population) variance, then
    /// applies `gain` and `bias` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "row width {n}, gain {:?}, bias {:?}",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(vx.len());
        let mut stats = Vec::with_capacity(vx.rows());
        for row in vx.data().chunks_exact(n) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (row[j].as_f64() - mean) * rstd;
                out.push(T::from_f64_lossy(xhat * g[j].as_f64() + b[j].as_f64()));
            }
            stats.push((mean, rstd));
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(&[x, gain, bias]);
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, stats }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {n} columns", start + len)));
        }
        let src = self.value(x).data();
        let data = (0..m)
            .flat_map(|i| src[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        self.push("slice_cols", Tensor::from_parts(vec![m, len], data), Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (m, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} vs {pm}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![m, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Embedding lookup: rows of `table[V×d]` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.value(table), "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::OutOfVocab {
                id: bad,
                vocab_size: v,
            });
        }
        let src = self.value(table).data();
        let data = ids
            .iter()
            .flat_map(|&i| src[i * d..(i + 1) * d].iter().copied())
            .collect();
        let rg = self.rg(&[table]);
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Copy of `x` with row `row` replaced by the single-row `src`.
    pub fn set_row(&mut self, x: Var, row: usize, src: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "set_row")?;
        if row >= m || self.value(src).len() != n {
            return Err(Error::shape(
                "set_row",
                format!("row {row} of {m}x{n} from {:?}", self.value(src).shape()),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        data[row * n..(row + 1) * n].copy_from_slice(self.value(src).data());
        let rg = self.rg(&[x, src]);
        self.push("set_row", Tensor::from_parts(vec![m, n], data), Op::SetRow { x, row, src }, rg)
    }

    /// Column means of a 2-D tensor, as a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "mean_rows")?;
        let src = self.value(x).data();
        let mut acc = vec![0.0f64; n];
        for row in src.chunks_exact(n) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v.as_f64();
            }
        }
        let data = acc.into_iter().map(|a| T::from_f64_lossy(a / m as f64)).collect();
        let rg = self.rg(&[x]);
        self.push("mean_rows", Tensor::from_parts(vec![1, n], data), Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(T::from_f64_lossy(total)), Op::Sum(x), rg)
    }

    /// Mean negative log-likelihood over positions whose target is not `ignore_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let (t, v) = dims2(self.value(logits), "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::shape(
                "cross_entropy",
                format!("{t} logit rows vs {} targets", targets.len()),
            ));
        }
        let mut mapped = Vec::with_capacity(t);
        for &tg in targets {
            if tg == ignore_id {
                mapped.push(None);
            } else if tg >= v {
                return Err(Error::OutOfVocab {
                    id: tg,
                    vocab_size: v,
                });
            } else {
                mapped.push(Some(tg));
            }
        }
        let count = mapped.iter().flatten().count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); t * v];
        let mut nll = 0.0f64;
        for (i, target) in mapped.iter().enumerate() {
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
            let lse = max + total.ln();
            for (p, x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = T::from_f64_lossy((x.as_f64() - lse).exp());
            }
            if let Some(tg) = target {
                nll += lse - row[*tg].as_f64();
            }
        }
        let value = Tensor::scalar(T::from_f64_lossy(nll / count as f64));
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: mapped,
                probs,
                count,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let len = self.value(loss).len();
        if len != 1 {
            return Err(Error::NotScalar { len });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[idx] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = node.value.shape()[1];
                if let Some(da) = self.grad_buf(grads, *a) {
                    // da = g · op(b)ᵀ
                    let (rsb, csb) = if *b_transposed { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(m, n, k, gd, n as isize, 1, vb.data(), rsb, csb, T::one(), da);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    if *b_transposed {
                        // db[n×k] = gᵀ · a
                        T::gemm(n, m, k, gd, 1, n as isize, va.data(), k as isize, 1, T::one(), db);
                    } else {
                        // db[k×n] = aᵀ · g
                        T::gemm(k, m, n, va.data(), 1, k as isize, gd, n as isize, 1, T::one(), db);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_buf(grads, v) {
                        d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    dx.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                }
                let n = g.cols();
                if let Some(db) = self.grad_buf(grads, *bias) {
                    add_col_sums(db, gd, n);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.grad_buf(grads, *a) {
                    for ((d, &g), &y) in da.iter_mut().zip(gd).zip(vb) {
                        *d += g * y;
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for ((d, &g), &x) in db.iter_mut().zip(gd).zip(va) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    dx.iter_mut().zip(gd).for_each(|(d, &g)| *d += g * *c);
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((d, &g), &v) in dx.iter_mut().zip(gd).zip(vx) {
                        *d += g * gelu_parts(v).1;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let shape = node.value.shape();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| y[at(j)].as_f64() * gd[at(j)].as_f64()).sum();
                            for j in 0..n {
                                dx[at(j)] += T::from_f64_lossy(y[at(j)].as_f64() * (gd[at(j)].as_f64() - dot));
                            }
                        }
                    }
                }
            }
            Op::CausalSoftmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for i in 0..n {
                        let r = i * n..i * n + i + 1;
                        let dot: f64 = y[r.clone()].iter().zip(&gd[r.clone()]).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        for j in r {
                            dx[j] += T::from_f64_lossy(y[j].as_f64() * (gd[j].as_f64() - dot));
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let vx = self.value(*x).data();
                let gain_v = self.value(*gain).data();
                let n = node.value.cols();
                let xhat = |r: usize, j: usize| (vx[r * n + j].as_f64() - stats[r].0) * stats[r].1;
                if let Some(dg) = self.grad_buf(grads, *gain) {
                    for (j, d) in dg.iter_mut().enumerate() {
                        let s: f64 = (0..gd.len() / n).map(|r| gd[r * n + j].as_f64() * xhat(r, j)).sum();
                        *d += T::from_f64_lossy(s);
                    }
                }
                if let Some(db) = self.grad_buf(grads, *bias) {
                    add_col_sums(db, gd, n);
                }
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (r, row) in gd.chunks_exact(n).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_xh = 0.0;
                        for j in 0..n {
                            let dh = row[j].as_f64() * gain_v[j].as_f64();
                            mean_dh += dh;
                            mean_dh_xh += dh * xhat(r, j);
                        }
                        mean_dh /= n as f64;
                        mean_dh_xh /= n as f64;
                        for j in 0..n {
                            let dh = row[j].as_f64() * gain_v[j].as_f64();
                            dx[r * n + j] += T::from_f64_lossy(stats[r].1 * (dh - mean_dh - xhat(r, j) * mean_dh_xh));
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let w = g.cols();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (i, row) in gd.chunks_exact(w).enumerate() {
                        dx[i * n + start..i * n + start + w]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.grad_buf(grads, p) {
                        for (i, row) in gd.chunks_exact(total).enumerate() {
                            dp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&row[offset..offset + w])
                                .for_each(|(d, &g)| *d += g);
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, ids } => {
                let d = g.cols();
                if let Some(dt) = self.grad_buf(grads, *table) {
                    for (row, &id) in gd.chunks_exact(d).zip(ids) {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, &g)| *a += g);
                    }
                }
            }
            Op::SetRow { x, row, src } => {
                let n = g.cols();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (j, (d, &gv)) in dx.iter_mut().zip(gd).enumerate() {
                        if j / n != *row {
                            *d += gv;
                        }
                    }
                }
                if let Some(ds) = self.grad_buf(grads, *src) {
                    ds.iter_mut()
                        .zip(&gd[row * n..(row + 1) * n])
                        .for_each(|(d, &g)| *d += g);
                }
            }
            Op::MeanRows(x) => {
                let m = self.value(*x).rows();
                let inv = T::one() / T::from_usize(m).expect("row count fits");
                let n = g.cols();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for row in dx.chunks_exact_mut(n) {
                        row.iter_mut().zip(gd).for_each(|(d, &g)| *d += g * inv);
                    }
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                if let Some(dx) = self.grad_buf(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = gd[0] / T::from_usize(*count).expect("count fits");
                if let Some(dl) = self.grad_buf(grads, *logits) {
                    for (i, target) in targets.iter().enumerate() {
                        let Some(tg) = target else { continue };
                        let row = &mut dl[i * v..(i + 1) * v];
                        for (d, &p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                            *d += p * scale;
                        }
                        row[*tg] -= scale;
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not participate in differentiation.
    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }
}

/// `acc[j] += Σ_rows g[row, j]`, summed in 64-bit.
fn add_col_sums<T: Real>(acc: &mut [T], g: &[T], n: usize) {
    for (j, d) in acc.iter_mut().enumerate() {
        let s: f64 = g[j..].iter().step_by(n).map(|v| v.as_f64()).sum();
        *d += T::from_f64_lossy(s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn orthogonal_vectors_matmul() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap()).unwrap();
        let b = tape.constant(Tensor::from_f64([2, 1], &[0.0, 1.0]).unwrap()).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 1]);
        assert_eq!(tape.value(out).data(), &[0.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros([2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([3])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
        let x = tape.constant(Tensor::from_f64([2], &[1000.0, 0.0]).unwrap()).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-6 && d[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_inner_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 5.0, 0.0, 5.0])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        // columns are uniform
        for &p in tape.value(y).data() {
            assert!((p - 0.5).abs() < 1e-12);
        }
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[3.0, 9.0, 1.0, 1.0])).unwrap();
        let y = tape.causal_softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_constant_row_and_zero_mean_row() {
        let mut tape = Tape::<f32>::new();
        let g = tape.constant(Tensor::full([3], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros([3])).unwrap();
        let x = tape.constant(Tensor::full([1, 3], 5.0)).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let g = tape.constant(Tensor::full([2], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros([2])).unwrap();
        let x = tape.constant(Tensor::from_f64([1, 2], &[1.0, -1.0]).unwrap()).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-4 && (d[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_uniform_two_way() {
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(Tensor::zeros([1, 2])).unwrap();
        let ce = tape.cross_entropy(l, &[0], 99).unwrap();
        assert!((tape.value(ce).item() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(Tensor::zeros([2, 3])).unwrap();
        assert!(matches!(tape.cross_entropy(l, &[0, 0], 0), Err(Error::EmptyLoss)));
        assert!(matches!(
            tape.cross_entropy(l, &[1, 3], 0),
            Err(Error::OutOfVocab { id: 3, .. })
        ));
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_of_softmax_sum_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[4], &[0.3, -1.2, 2.0, 0.5])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|g| g.abs() < 1e-6));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros([2])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NotScalar { len: 2 })));
    }

    #[test]
    fn loss_gradient_wrt_itself_is_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::scalar(1.5)).unwrap();
        let grads = tape.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(f32::MAX)).unwrap();
        assert!(matches!(tape.scale(x, 10.0), Err(Error::Numerical { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0)).unwrap();
        let c = tape.constant(Tensor::scalar(5.0)).unwrap();
        let y = tape.mul(x, c).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert!(grads.get(c).is_none());
    }
}
