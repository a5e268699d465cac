use std::collections::HashMap;

use super::{NumericsError, ParamId, ParamStore, Real, Result, Tensor, GELU_COEFF};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MaskRows {
        x: Var,
        keep: Vec<bool>,
    },
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize)>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Wengert list of tensor operations.
///
/// Parameters are copied onto the tape once per tape via [`Tape::param`];
/// their gradients are read back with [`Gradients::param_grads`].
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap();
    (shape.iter().product::<usize>() / c, c)
}

// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    let u = GELU_COEFF * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_COEFF * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_COEFF * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a leaf; gradients flow to it iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let ng = t.requires_grad;
        let mut t = t;
        t.grad = None;
        self.push(t, Op::Leaf, ng)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Loads a parameter onto the tape, reusing the node on repeat calls.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.bound.insert(id, v);
        v
    }

    /// Substitutes `var` for parameter `id` in every later [`Tape::param`] call.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound.insert(id, var);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`; the natural layout for `x · Wᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(NumericsError::Dimension {
                op: "matmul_nt",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a `[n]` bias to every row of an `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(NumericsError::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(NumericsError::Dimension {
                op: "scale_by",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = self.value(s).item();
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::ScaleBy(x, s), ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Tanh(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| T::of(gelu_fwd(v.as_f64())))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(NumericsError::NonFinite { op: "softmax" });
        }
        let c = xv.cols();
        let mut out = vec![T::zero(); xv.len()];
        for (row, o) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(row, o);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Row softmax over a square score matrix restricted to columns `j <= i`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = dims2(xv.shape());
        if xv.shape().len() != 2 || r != c {
            return Err(NumericsError::Dimension {
                op: "causal_softmax",
                lhs: xv.shape().to_vec(),
                rhs: xv.shape().to_vec(),
            });
        }
        if !xv.is_finite() {
            return Err(NumericsError::NonFinite { op: "causal_softmax" });
        }
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_row(&xv.data()[i * c..i * c + i + 1], &mut out[i * c..i * c + i + 1]);
        }
        let t = Tensor::new(vec![r, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::CausalSoftmax(x), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(NumericsError::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let n = T::of(c as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = dims2(tv.shape());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::Index {
                    index: id,
                    extent: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        if ids.is_empty() {
            return Err(NumericsError::Index { index: 0, extent: 0 });
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.ng(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = dims2(xv.shape());
        if start + len > c || len == 0 {
            return Err(NumericsError::Index {
                index: start + len,
                extent: c,
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let t = Tensor::new(vec![r, len], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(NumericsError::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).cols() != c {
                return Err(NumericsError::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![out.len() / c, c], out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = dims2(xv.shape());
        if keep.len() != r {
            return Err(NumericsError::Dimension {
                op: "mask_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let mut out = xv.data().to_vec();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out[i * c..(i + 1) * c].fill(T::zero());
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(
            t,
            Op::MaskRows {
                x,
                keep: keep.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is
    /// true. Unmasked rows are never read, so they contribute neither loss
    /// nor gradient.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (t, v) = dims2(lv.shape());
        if targets.len() != t || mask.len() != t {
            return Err(NumericsError::Dimension {
                op: "cross_entropy_masked",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some((position, &target)) = targets.iter().enumerate().find(|(_, &x)| x >= v) {
            return Err(NumericsError::TargetOutOfRange {
                position,
                target,
                vocab: v,
            });
        }
        let rows: Vec<(usize, usize)> = (0..t)
            .filter(|&i| mask[i])
            .map(|i| (i, targets[i]))
            .collect();
        if rows.is_empty() {
            return Err(NumericsError::EmptyLoss);
        }
        let mut probs = vec![T::zero(); rows.len() * v];
        let mut total = T::zero();
        for (k, &(i, target)) in rows.iter().enumerate() {
            let row = lv.row(i);
            if row.iter().any(|x| !x.is_finite()) {
                return Err(NumericsError::NonFinite {
                    op: "cross_entropy_masked",
                });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[target];
            for (p, &x) in probs[k * v..(k + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / T::of(rows.len() as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows,
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            bound: self.bound.clone(),
        }
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(*a) {
                    gemm_nt(g, nodes[b.0].value.data(), acc!(*a), m, n, k);
                }
                if want(*b) {
                    gemm_tn(nodes[a.0].value.data(), g, acc!(*b), m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if want(*a) {
                    gemm_nn(g, nodes[b.0].value.data(), acc!(*a), m, n, k);
                }
                if want(*b) {
                    gemm_tn(g, nodes[a.0].value.data(), acc!(*b), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if want(*v) {
                        acc!(*v).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if want(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if want(*b) {
                    let c = nodes[b.0].value.len();
                    let db = acc!(*b);
                    for (i, &v) in g.iter().enumerate() {
                        db[i % c] += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bv = nodes[b.0].value.data();
                    for ((d, &x), &y) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if want(*b) {
                    let av = nodes[a.0].value.data();
                    for ((d, &x), &y) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::Scale(x, c) => {
                if want(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(d, &v)| *d += v * *c);
                }
            }
            Op::ScaleBy(x, s) => {
                let sv = nodes[s.0].value.item();
                if want(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(d, &v)| *d += v * sv);
                }
                if want(*s) {
                    let xv = nodes[x.0].value.data();
                    let ds: T = g.iter().zip(xv).map(|(&a, &b)| a * b).sum();
                    acc!(*s)[0] += ds;
                }
            }
            Op::Tanh(x) => {
                if want(*x) {
                    let y = node.value.data();
                    for ((d, &v), &yv) in acc!(*x).iter_mut().zip(g).zip(y) {
                        *d += v * (T::one() - yv * yv);
                    }
                }
            }
            Op::Gelu(x) => {
                if want(*x) {
                    let xv = nodes[x.0].value.data();
                    for ((d, &v), &xi) in acc!(*x).iter_mut().zip(g).zip(xv) {
                        *d += v * T::of(gelu_grad(xi.as_f64()));
                    }
                }
            }
            Op::Softmax(x) | Op::CausalSoftmax(x) => {
                if want(*x) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let dx = acc!(*x);
                    for r in 0..y.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let rows = rstd.len();
                if want(*gain) {
                    let dg = acc!(*gain);
                    for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % c] += gv * h;
                    }
                }
                if want(*bias) {
                    let db = acc!(*bias);
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % c] += gv;
                    }
                }
                if want(*x) {
                    let gain_v = nodes[gain.0].value.data();
                    let n = T::of(c as f64);
                    let dx = acc!(*x);
                    let mut dxhat = vec![T::zero(); c];
                    for r in 0..rows {
                        let (gr, hr) = (&g[r * c..(r + 1) * c], &xhat[r * c..(r + 1) * c]);
                        for j in 0..c {
                            dxhat[j] = gr[j] * gain_v[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / n;
                        let m2 = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..c {
                            dx[r * c + j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if want(*table) {
                    let d = node.value.cols();
                    let dt = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if want(*x) {
                    let len = node.value.cols();
                    let c = nodes[x.0].value.cols();
                    let dx = acc!(*x);
                    for r in 0..node.value.rows() {
                        for j in 0..len {
                            dx[r * c + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p.0].value.cols();
                    if want(p) {
                        let dp = acc!(p);
                        for r in 0..node.value.rows() {
                            for j in 0..c {
                                dp[r * c + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if want(p) {
                        acc!(p)
                            .iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(d, &v)| *d += v);
                    }
                    off += n;
                }
            }
            Op::MaskRows { x, keep } => {
                if want(*x) {
                    let c = node.value.cols();
                    let dx = acc!(*x);
                    for (r, &k) in keep.iter().enumerate() {
                        if k {
                            for j in 0..c {
                                dx[r * c + j] += g[r * c + j];
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if want(*x) {
                    let s = g[0];
                    acc!(*x).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                probs,
            } => {
                if want(*logits) {
                    let v = nodes[logits.0].value.cols();
                    let w = g[0] / T::of(rows.len() as f64);
                    let dl = acc!(*logits);
                    for (k, &(i, target)) in rows.iter().enumerate() {
                        let pr = &probs[k * v..(k + 1) * v];
                        for j in 0..v {
                            dl[i * v + j] += w * pr[j];
                        }
                        dl[i * v + target] -= w;
                    }
                }
            }
        }
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut [T] {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter that was loaded onto the tape and
    /// reached by the reverse pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.bound
            .iter()
            .filter_map(|(&id, &v)| self.get(v).map(|g| (id, g)))
    }

    /// Adds parameter gradients into the store's trainable tensors; frozen
    /// parameters are left untouched.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.param_grads() {
            if store.is_trainable(id) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}
