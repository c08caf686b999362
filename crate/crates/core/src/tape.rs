//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every op appends one node holding its forward value; `backward` replays the
//! nodes in reverse, so the record is topologically ordered by construction.
//! Leaves registered from frozen parameters (or on a `no_grad` tape) are
//! constants and never receive a gradient.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Pick(Var, usize),
    Concat(Var, Var),
    Relu(Var),
    Gelu(Var),
    SumAll(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    PrependCls {
        x: Var,
        cls: Var,
        batch: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a named parameter; `None` for frozen or unused parameters.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn of(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(|s| s.as_str())
    }

    pub fn by_name(&self) -> &BTreeMap<String, Tensor> {
        &self.by_name
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    track: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    // SAFETY: slices cover the strided m×k, k×n and m×n extents checked by callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A tape that records values only; every leaf is a constant.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// A differentiable input that is not a named parameter (used by gradient checks).
    pub fn input(&mut self, value: Tensor) -> Var {
        let track = self.track;
        self.push_raw(value, Op::Leaf, track)
    }

    /// Registers a parameter. Frozen parameters become constants.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.param_if(p, true)
    }

    /// Registers a parameter, tracking its gradient only when `track` holds and it is not frozen.
    pub fn param_if(&mut self, p: &Parameter, track: bool) -> Var {
        if self.track && track && !p.frozen {
            self.push_raw(p.value.clone(), Op::Param(p.name.clone()), true)
        } else {
            self.leaf(p.value.clone())
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            0.0,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `x [n×d] + b [d]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, d) = tx.dims2();
        if tb.numel() != d {
            return Err(Error::dim("add_row", tx.shape(), tb.shape()));
        }
        let bias = tb.data();
        let data = tx
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias).map(|(v, b)| v + b))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(x, b), &[x, b]))
    }

    /// `x [(B·T)×d] + p [T×d]`, tiling `p` over the batch.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Result<Var> {
        let (tx, tp) = (self.value(x), self.value(p));
        let block = tp.numel();
        if block == 0 || tx.numel() % block != 0 || tx.dims2().1 != tp.dims2().1 {
            return Err(Error::dim("add_tiled", tx.shape(), tp.shape()));
        }
        let data = tx
            .data()
            .chunks(block)
            .flat_map(|chunk| chunk.iter().zip(tp.data()).map(|(v, q)| v + q))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddTiled(x, p), &[x, p]))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// Multiplication by a scalar node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::dim("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::ScaleBy(x, s), &[x, s]))
    }

    /// Element `i` of a flat tensor, as a scalar node.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        let tx = self.value(x);
        if i >= tx.numel() {
            return Err(Error::Index(format!("pick {i} from shape {:?}", tx.shape())));
        }
        let value = Tensor::scalar(tx.data()[i]);
        Ok(self.push(value, Op::Pick(x, i), &[x]))
    }

    /// Concatenation of two single-row tensors into one row `[1 × (a+b)]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2().0 != 1 || tb.dims2().0 != 1 {
            return Err(Error::dim("concat", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let value = Tensor::new(vec![1, data.len()], data)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| gelu_parts(*v).0).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    /// Per-row normalization over the last dimension followed by an affine map.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layernorm eps must be positive, got {eps}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, d) = tx.dims2();
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::dim("layernorm", tx.shape(), tg.shape()));
        }
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Scaled dot-product self-attention over `batch` independent sequences.
    ///
    /// `q`, `k`, `v` are `[(batch·tokens) × d]` with `d` split into `heads`
    /// contiguous slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(Error::dim("attention", tq.shape(), tk.shape()));
        }
        let (rows, d) = tq.dims2();
        if batch == 0 || heads == 0 || rows % batch != 0 || d % heads != 0 {
            return Err(Error::dim("attention", tq.shape(), &[batch, heads]));
        }
        let t = rows / batch;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; batch * heads * t * t];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; t];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..t {
                    let qi = &qd[(b * t + i) * d + off..(b * t + i) * d + off + hd];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..t {
                        let kj = &kd[(b * t + j) * d + off..(b * t + j) * d + off + hd];
                        let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let p_row = &mut probs[((b * heads + h) * t + i) * t..][..t];
                    for j in 0..t {
                        p_row[j] = scores[j] / z;
                    }
                    let o = &mut out[(b * t + i) * d + off..(b * t + i) * d + off + hd];
                    for j in 0..t {
                        let vj = &vd[(b * t + j) * d + off..(b * t + j) * d + off + hd];
                        let p = p_row[j];
                        for c in 0..hd {
                            o[c] += p * vj[c];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(tq.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities `[batch][head][query][key]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Inserts the `[1×d]` row `cls` before each of `batch` equal token blocks of `x`.
    pub fn prepend_cls(&mut self, x: Var, cls: Var, batch: usize) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(cls));
        let (rows, d) = tx.dims2();
        if tc.numel() != d || batch == 0 || rows % batch != 0 {
            return Err(Error::dim("prepend_cls", tx.shape(), tc.shape()));
        }
        let per = rows / batch;
        let mut data = Vec::with_capacity((rows + batch) * d);
        for b in 0..batch {
            data.extend_from_slice(tc.data());
            data.extend_from_slice(&tx.data()[b * per * d..(b + 1) * per * d]);
        }
        let value = Tensor::new(vec![rows + batch, d], data)?;
        Ok(self.push(value, Op::PrependCls { x, cls, batch }, &[x, cls]))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = tx.dims2();
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index(format!("row {bad} of {n}")));
        }
        let data = rows.iter().flat_map(|&r| tx.row(r).iter().copied()).collect();
        let value = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, c) = tl.dims2();
        if labels.len() != b {
            return Err(Error::dim("softmax_cross_entropy", tl.shape(), &[labels.len()]));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Label {
                index,
                label,
                classes: c,
            });
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[label];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Rank(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                by_var: grads,
                by_name: BTreeMap::new(),
            });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            if let Op::Param(name) = &node.op {
                match by_name.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        by_name.insert(name.clone(), g.clone());
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            by_var: grads,
            by_name,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, (n as isize, 1), tb.data(), (1, n as isize), &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), (1, k as isize), gd, (n as isize, 1), &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = gd.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), neg)?);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), db)?);
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                let tb = self.value(*b);
                let d = tb.numel();
                let mut db = vec![0.0; d];
                for row in gd.chunks(d) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
            }
            Op::AddTiled(x, p) => {
                self.accumulate(grads, *x, g.clone());
                let tp = self.value(*p);
                let block = tp.numel();
                let mut dp = vec![0.0; block];
                for chunk in gd.chunks(block) {
                    for (acc, v) in dp.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *p, Tensor::new(tp.shape().to_vec(), dp)?);
            }
            Op::Scale(x, c) => {
                let dx = gd.iter().map(|v| v * c).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).item();
                let tx = self.value(*x);
                let dx = gd.iter().map(|v| v * c).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                let ds: f64 = gd.iter().zip(tx.data()).map(|(a, b)| a * b).sum();
                let sshape = self.value(*s).shape().to_vec();
                self.accumulate(grads, *s, Tensor::new(sshape, vec![ds])?);
            }
            Op::Pick(x, i) => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                dx.data_mut()[*i] = gd[0];
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let na = ta.numel();
                let da = Tensor::new(ta.shape().to_vec(), gd[..na].to_vec())?;
                let db = Tensor::new(tb.shape().to_vec(), gd[na..].to_vec())?;
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let dx = gd
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let dx = gd
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| gv * gelu_parts(*xv).1)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::SumAll(x) => {
                let dx = Tensor::full(self.value(*x).shape(), gd[0]);
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gain);
                let d = tg.numel();
                let rows = inv_std.len();
                let mut dx = vec![0.0; rows * d];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..d {
                        let dh = gr[c] * tg.data()[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                        dg[c] += gr[c] * hr[c];
                        db[c] += gr[c];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for c in 0..d {
                        let dh = gr[c] * tg.data()[c];
                        dx[r * d + c] = inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                let xshape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(xshape, dx)?);
                self.accumulate(grads, *gain, Tensor::new(tg.shape().to_vec(), dg)?);
                let bshape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::new(bshape, db)?);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, d) = tq.dims2();
                let (batch, heads) = (*batch, *heads);
                let t = rows / batch;
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; t];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * hd;
                        for i in 0..t {
                            let p_row = &probs[((b * heads + h) * t + i) * t..][..t];
                            let gi = &gd[(b * t + i) * d + off..(b * t + i) * d + off + hd];
                            let mut dot = 0.0;
                            for j in 0..t {
                                let vj = &vd[(b * t + j) * d + off..(b * t + j) * d + off + hd];
                                dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                                dot += p_row[j] * dp[j];
                                let dvj = &mut dv[(b * t + j) * d + off..(b * t + j) * d + off + hd];
                                for c in 0..hd {
                                    dvj[c] += p_row[j] * gi[c];
                                }
                            }
                            for j in 0..t {
                                let ds = p_row[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let (ri, rj) = ((b * t + i) * d + off, (b * t + j) * d + off);
                                for c in 0..hd {
                                    dq[ri + c] += ds * kd[rj + c];
                                    dk[rj + c] += ds * qd[ri + c];
                                }
                            }
                        }
                    }
                }
                let shape = tq.shape().to_vec();
                self.accumulate(grads, *q, Tensor::new(shape.clone(), dq)?);
                self.accumulate(grads, *k, Tensor::new(shape.clone(), dk)?);
                self.accumulate(grads, *v, Tensor::new(shape, dv)?);
            }
            Op::PrependCls { x, cls, batch } => {
                let tx = self.value(*x);
                let (rows, d) = tx.dims2();
                let per = rows / batch;
                let mut dx = Vec::with_capacity(rows * d);
                let mut dc = vec![0.0; d];
                for b in 0..*batch {
                    let base = b * (per + 1) * d;
                    for (acc, v) in dc.iter_mut().zip(&gd[base..base + d]) {
                        *acc += v;
                    }
                    dx.extend_from_slice(&gd[base + d..base + (per + 1) * d]);
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
                let cshape = self.value(*cls).shape().to_vec();
                self.accumulate(grads, *cls, Tensor::new(cshape, dc)?);
            }
            Op::SelectRows { x, rows } => {
                let tx = self.value(*x);
                let (_, d) = tx.dims2();
                let mut dx = Tensor::zeros(tx.shape());
                for (out_r, &r) in rows.iter().enumerate() {
                    let dst = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for (acc, v) in dst.iter_mut().zip(&gd[out_r * d..(out_r + 1) * d]) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b.max(1);
                let coef = gd[0] / b as f64;
                let mut dl = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    dl[r * c + label] -= 1.0;
                }
                for v in dl.iter_mut() {
                    *v *= coef;
                }
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::new(shape, dl)?);
            }
        }
        Ok(())
    }
}
