use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Ln,
    Abs,
    Sigmoid,
    Gelu,
    ClampMin(f64),
    ClampMax(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleBy(Var, Var),
    Unary(Var, Unary),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Vec<f64>,
    },
    Gather {
        src: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    NormalizeRows {
        src: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation tape. Nodes are appended in creation order, which is a valid
/// topological order; backward visits each node once in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element; meant for scalar outputs.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient after [`Graph::backward`]; `None` when no path
    /// from the loss reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ── forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).require_rank2("matmul")?;
        let (k2, m) = self.value(b).require_rank2("matmul")?;
        if k != k2 {
            return Err(Error::dims("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.data(a), self.data(b), n, k, m);
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.value(a).require_rank2("transpose")?;
        let out = transpose_raw(self.data(a), n, m);
        let ng = self.any_grad(&[a]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Transpose(a), ng))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// Adds a row vector to every row of `a` (bias broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, d) = self.value(a).require_rank2("add_row")?;
        if self.value(row).numel() != d {
            return Err(Error::dims("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.data(row);
        let mut out = self.data(a).to_vec();
        for i in 0..n {
            for (o, &b) in out[i * d..(i + 1) * d].iter_mut().zip(r) {
                *o += b;
            }
        }
        let ng = self.any_grad(&[a, row]);
        Ok(self.push(Tensor::matrix(n, d, out)?, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a]);
        self.push(Tensor { shape, data: out }, Op::Scale(a, c), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a]);
        self.push(Tensor { shape, data: out }, Op::AddConst(a), ng)
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dims("scale_by", self.shape(a), self.shape(s)));
        }
        let c = self.scalar(s);
        let out: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a, s]);
        Ok(self.push(Tensor { shape, data: out }, Op::ScaleBy(a, s), ng))
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let f: fn(f64, Unary) -> f64 = |x, u| match u {
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Gelu => gelu(x),
            Unary::ClampMin(c) => x.max(c),
            Unary::ClampMax(c) => x.min(c),
        };
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x, u)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a]);
        self.push(Tensor { shape, data: out }, Op::Unary(a, u), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Unary::ClampMin(c))
    }

    pub fn clamp_max(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Unary::ClampMax(c))
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies
    /// `gain` and `bias` (each of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).require_rank2("layer_norm")?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dims("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::matrix(n, d, out)?,
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

    /// Scaled dot-product attention of `q` (n×d) over keys `k` (m×d) and
    /// values `v` (m×dv), split into `heads` column groups. `key_mask[j]`
    /// false hides key `j` from every query: its weight is exactly zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: Option<&[bool]>,
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.value(q).require_rank2("attention")?;
        let (m, dk) = self.value(k).require_rank2("attention")?;
        let (mv, dv) = self.value(v).require_rank2("attention")?;
        if d != dk || m != mv {
            return Err(Error::dims("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(Error::dims("attention heads", self.shape(q), &[heads]));
        }
        if let Some(mask) = key_mask {
            if mask.len() != m {
                return Err(Error::dims("attention mask", &[mask.len()], &[m]));
            }
            if !mask.iter().any(|&b| b) {
                return Err(Error::DegenerateMask(format!(
                    "all {m} keys are masked for every query"
                )));
            }
        }
        let visible = |j: usize| key_mask.is_none_or(|mk| mk[j]);
        let hd = d / heads;
        let hv = dv / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let qs = self.data(q);
        let ks = self.data(k);
        let vs = self.data(v);
        let mut weights = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * dv];
        for h in 0..heads {
            for i in 0..n {
                let w = &mut weights[(h * n + i) * m..(h * n + i + 1) * m];
                let qi = &qs[i * d + h * hd..i * d + (h + 1) * hd];
                let mut max = f64::NEG_INFINITY;
                for (j, wj) in w.iter_mut().enumerate() {
                    if !visible(j) {
                        continue;
                    }
                    let kj = &ks[j * d + h * hd..j * d + (h + 1) * hd];
                    let s = dot(qi, kj) * scale;
                    *wj = s;
                    max = max.max(s);
                }
                let mut total = 0.0;
                for (j, wj) in w.iter_mut().enumerate() {
                    if visible(j) {
                        *wj = (*wj - max).exp();
                        total += *wj;
                    } else {
                        *wj = 0.0;
                    }
                }
                for wj in w.iter_mut() {
                    *wj /= total;
                }
                let o = &mut out[i * dv + h * hv..i * dv + (h + 1) * hv];
                for (j, &wj) in w.iter().enumerate() {
                    if wj == 0.0 {
                        continue;
                    }
                    let vj = &vs[j * dv + h * hv..j * dv + (h + 1) * hv];
                    for (oc, &vc) in o.iter_mut().zip(vj) {
                        *oc += wj * vc;
                    }
                }
            }
        }
        let ng = self.any_grad(&[q, k, v]);
        Ok(self.push(
            Tensor::matrix(n, dv, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            },
            ng,
        ))
    }

    /// Post-softmax attention weights of an attention node, laid out as
    /// `heads × queries × keys`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Selects rows of a matrix; gradients scatter-add back.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(src).require_rank2("gather_rows")?;
        if rows.is_empty() {
            return Err(Error::Empty("gather_rows indices"));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index {
                    what: "rows",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(&self.data(src)[i * c..(i + 1) * c]);
        }
        let ng = self.any_grad(&[src]);
        Ok(self.push(
            Tensor::matrix(rows.len(), c, out)?,
            Op::Gather {
                src,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    pub fn embed(&mut self, indices: &[usize], table: Var) -> Result<Var> {
        self.gather_rows(table, indices)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let (_, c) = self.value(first).require_rank2("concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).require_rank2("concat_rows")?;
            if pc != c {
                return Err(Error::dims("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.data(p));
            rows += r;
        }
        let ng = self.any_grad(parts);
        Ok(self.push(
            Tensor::matrix(rows, c, out)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let (n, _) = self.value(first).require_rank2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).require_rank2("concat_cols")?;
            if r != n {
                return Err(Error::dims("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for i in 0..n {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = self.any_grad(parts);
        Ok(self.push(
            Tensor::matrix(n, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.value(src).require_rank2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::Index {
                what: "columns",
                index: start + len,
                bound: c,
            });
        }
        let data = self.data(src);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&data[i * c + start..i * c + start + len]);
        }
        let ng = self.any_grad(&[src]);
        Ok(self.push(
            Tensor::matrix(n, len, out)?,
            Op::SliceCols { src, start },
            ng,
        ))
    }

    /// Rescales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, src: Var) -> Result<Var> {
        let (n, c) = self.value(src).require_rank2("normalize_rows")?;
        let data = self.data(src);
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            let row = &data[i * c..(i + 1) * c];
            let norm = dot(row, row).sqrt().max(NORM_FLOOR);
            norms.push(norm);
            out.extend(row.iter().map(|x| x / norm));
        }
        let ng = self.any_grad(&[src]);
        Ok(self.push(
            Tensor::matrix(n, c, out)?,
            Op::NormalizeRows { src, norms },
            ng,
        ))
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).require_rank2("softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dims("softmax_cross_entropy", &[n, c], &[targets.len()]));
        }
        let data = self.data(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index {
                    what: "classes",
                    index: t,
                    bound: c,
                });
            }
            let row = &data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[t];
            for j in 0..c {
                probs[i * c + j] = (row[j] - max).exp() / total;
            }
        }
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Backpropagates from a single-element `loss`. Gradients accumulated
    /// by an earlier call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dims("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].needs_grad {
                self.propagate(idx, &dy, &mut grads);
            }
            grads[idx] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut acc = |v: Var, g: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            g(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.value(*a).rows(), self.value(*a).cols());
                let m = self.value(*b).cols();
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &|ga| {
                    // dA = dC · Bᵀ
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += dy[i * m + j] * bd[p * m + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &|gb| {
                    // dB = Aᵀ · dC
                    for i in 0..n {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                gb[p * m + j] += av * dy[i * m + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = (self.value(*a).rows(), self.value(*a).cols());
                acc(*a, &|ga| {
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] += dy[j * n + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|g| add_into(g, dy));
                acc(*b, &|g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &|g| add_into(g, dy));
                acc(*b, &|g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bd[i];
                    }
                });
                acc(*b, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * ad[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / bd[i];
                    }
                });
                acc(*b, &|g| {
                    for i in 0..g.len() {
                        g[i] -= dy[i] * ad[i] / (bd[i] * bd[i]);
                    }
                });
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (ad, bd) = (self.data(*a), self.data(*b));
                let picks_a = |i: usize| if is_max { ad[i] >= bd[i] } else { ad[i] <= bd[i] };
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        if picks_a(i) {
                            g[i] += dy[i];
                        }
                    }
                });
                acc(*b, &|g| {
                    for i in 0..g.len() {
                        if !picks_a(i) {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &|g| add_into(g, dy));
                let d = self.value(*a).cols();
                acc(*row, &|g| {
                    for (i, &v) in dy.iter().enumerate() {
                        g[i % d] += v;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|g| {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * c)
            }),
            Op::AddConst(a) => acc(*a, &|g| add_into(g, dy)),
            Op::ScaleBy(a, s) => {
                let c = self.scalar(*s);
                let ad = self.data(*a);
                acc(*a, &|g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * c));
                acc(*s, &|g| g[0] += dot(dy, ad));
            }
            Op::Unary(a, u) => {
                let x = self.data(*a);
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        let d = match u {
                            Unary::Exp => y[i],
                            Unary::Ln => 1.0 / x[i],
                            Unary::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Gelu => gelu_grad(x[i]),
                            Unary::ClampMin(c) => f64::from(u8::from(x[i] > *c)),
                            Unary::ClampMax(c) => f64::from(u8::from(x[i] < *c)),
                        };
                        g[i] += dy[i] * d;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*x).cols();
                let n = rstd.len();
                let gd = self.data(*gain);
                acc(*x, &|gx| {
                    for i in 0..n {
                        let dyr = &dy[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = dyr[j] * gd[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = dyr[j] * gd[j];
                            gx[i * d + j] += rstd[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
                acc(*gain, &|gg| {
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += dy[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                acc(*bias, &|gb| {
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += dy[i * d + j];
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            } => {
                let (n, d) = (self.value(*q).rows(), self.value(*q).cols());
                let m = self.value(*k).rows();
                let dv = self.value(*v).cols();
                let (hd, hv) = (d / heads, dv / heads);
                let scale = 1.0 / (hd as f64).sqrt();
                let (qs, ks, vs) = (self.data(*q), self.data(*k), self.data(*v));
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), with dP = dO · Vᵀ
                let mut dscores = vec![0.0; heads * n * m];
                for h in 0..*heads {
                    for i in 0..n {
                        let w = &weights[(h * n + i) * m..(h * n + i + 1) * m];
                        let doi = &dy[i * dv + h * hv..i * dv + (h + 1) * hv];
                        let mut dp = vec![0.0; m];
                        let mut inner = 0.0;
                        for j in 0..m {
                            if w[j] == 0.0 {
                                continue;
                            }
                            dp[j] = dot(doi, &vs[j * dv + h * hv..j * dv + (h + 1) * hv]);
                            inner += dp[j] * w[j];
                        }
                        let ds = &mut dscores[(h * n + i) * m..(h * n + i + 1) * m];
                        for j in 0..m {
                            ds[j] = w[j] * (dp[j] - inner);
                        }
                    }
                }
                acc(*v, &|gv| {
                    for h in 0..*heads {
                        for i in 0..n {
                            let w = &weights[(h * n + i) * m..(h * n + i + 1) * m];
                            let doi = &dy[i * dv + h * hv..i * dv + (h + 1) * hv];
                            for j in 0..m {
                                if w[j] == 0.0 {
                                    continue;
                                }
                                let gvj = &mut gv[j * dv + h * hv..j * dv + (h + 1) * hv];
                                for (g, &o) in gvj.iter_mut().zip(doi) {
                                    *g += w[j] * o;
                                }
                            }
                        }
                    }
                });
                acc(*q, &|gq| {
                    for h in 0..*heads {
                        for i in 0..n {
                            let ds = &dscores[(h * n + i) * m..(h * n + i + 1) * m];
                            let gqi = &mut gq[i * d + h * hd..i * d + (h + 1) * hd];
                            for j in 0..m {
                                if ds[j] == 0.0 {
                                    continue;
                                }
                                let kj = &ks[j * d + h * hd..j * d + (h + 1) * hd];
                                for (g, &kc) in gqi.iter_mut().zip(kj) {
                                    *g += ds[j] * kc * scale;
                                }
                            }
                        }
                    }
                });
                acc(*k, &|gk| {
                    for h in 0..*heads {
                        for i in 0..n {
                            let ds = &dscores[(h * n + i) * m..(h * n + i + 1) * m];
                            let qi = &qs[i * d + h * hd..i * d + (h + 1) * hd];
                            for j in 0..m {
                                if ds[j] == 0.0 {
                                    continue;
                                }
                                let gkj = &mut gk[j * d + h * hd..j * d + (h + 1) * hd];
                                for (g, &qc) in gkj.iter_mut().zip(qi) {
                                    *g += ds[j] * qc * scale;
                                }
                            }
                        }
                    }
                });
            }
            Op::Gather { src, rows } => {
                let c = self.value(*src).cols();
                acc(*src, &|g| {
                    for (o, &r) in rows.iter().enumerate() {
                        add_into(&mut g[r * c..(r + 1) * c], &dy[o * c..(o + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &|g| add_into(g, &dy[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &|g| {
                        for i in 0..n {
                            add_into(
                                &mut g[i * w..(i + 1) * w],
                                &dy[i * total + off..i * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols { src, start } => {
                let c = self.value(*src).cols();
                let (n, w) = (node.value.rows(), node.value.cols());
                acc(*src, &|g| {
                    for i in 0..n {
                        add_into(
                            &mut g[i * c + start..i * c + start + w],
                            &dy[i * w..(i + 1) * w],
                        );
                    }
                });
            }
            Op::NormalizeRows { src, norms } => {
                let c = node.value.cols();
                acc(*src, &|g| {
                    for (i, &norm) in norms.iter().enumerate() {
                        let yr = &y[i * c..(i + 1) * c];
                        let dyr = &dy[i * c..(i + 1) * c];
                        let proj = dot(yr, dyr);
                        for j in 0..c {
                            g[i * c + j] += (dyr[j] - yr[j] * proj) / norm;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let n = targets.len() as f64;
                acc(*logits, &|g| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[i * c + j] += dy[0] * (probs[i * c + j] - onehot) / n;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                acc(*a, &|g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
        }
    }
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}
