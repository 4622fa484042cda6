//! Reverse-mode automatic differentiation over 2-D row-major values.
//!
//! Every operation appends a node holding its forward value and the
//! information needed to push gradients back to its inputs. Nodes are created
//! in evaluation order, so a single reverse sweep over the node list is a valid
//! topological traversal.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: u32,
    tape: u32,
}

/// Geometry of a fused multi-head scaled-dot-product attention.
///
/// Queries are laid out `[batch * q_len, dim]`, keys and values
/// `[batch * k_len, dim]`, row index `b * len + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Query `i` sits at absolute position `q_offset + i` and may only see
    /// keys at positions `<= q_offset + i`.
    pub causal: bool,
    pub q_offset: usize,
    /// Per-batch count of valid keys; keys past it are masked.
    pub key_lens: Option<Vec<usize>>,
}

impl AttnSpec {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        if self.causal && j > self.q_offset + i {
            return false;
        }
        match &self.key_lens {
            Some(l) => j < l[b],
            None => true,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + bias` with `bias` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    /// `w * a + (1 - w) * b` with constant `w`.
    Blend(Var, Var, Vec<f64>),
    /// `t * h + (1 - t) * x`.
    Gate {
        t: Var,
        h: Var,
        x: Var,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Softmax(Var),
    RowNormalize(Var),
    ShiftRight(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Unfold {
        x: Var,
        seq_len: usize,
        width: usize,
        pad_left: usize,
    },
    MaxPool2 {
        x: Var,
        src: Vec<usize>,
    },
    WeightedSum {
        w: Var,
        mem: Var,
    },
    RepeatRows(Var, usize),
    Sum(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    SigmoidXent {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation plus, after [`Tape::backward`], its gradients.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`; `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx as usize).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when `v` is unreached.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
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
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds row-major (or transposed) views of
    // slices whose lengths are checked by the callers.
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

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

fn slot(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op });
        Var { idx, tape: self.id }
    }

    fn node(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id, "var from another tape");
        &self.nodes[v.idx as usize].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.node(v)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.node(v);
        (t.rows(), t.cols())
    }

    /// Records a constant or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn mat(data: Vec<f64>, rows: usize, cols: usize) -> Tensor {
        Tensor::new(vec![rows, cols], data).expect("shape computed internally")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions {m}x{k} * {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.node(a).data(), (k as isize, 1), self.node(b).data(), (n as isize, 1), &mut out, 0.0);
        self.push(Self::mat(out, m, n), Op::MatMul(a, b))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.node(a), self.node(b));
        assert_eq!(ta.len(), tb.len(), "elementwise operands differ in size");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.node(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (_, n) = self.shape(a);
        let tb = self.node(bias);
        assert_eq!(tb.len(), n, "bias length");
        let b = tb.data().to_vec();
        let ta = self.node(a);
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        let ta = self.node(a);
        assert_eq!(ta.len(), c.len(), "constant multiplier size");
        let data = ta.data().iter().zip(&c).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::MulConst(a, c))
    }

    /// `w * a + (1 - w) * b` elementwise; exact selection when `w` is 0 or 1.
    pub fn blend(&mut self, a: Var, b: Var, w: Vec<f64>) -> Var {
        let (ta, tb) = (self.node(a), self.node(b));
        assert_eq!(ta.len(), tb.len());
        assert_eq!(ta.len(), w.len());
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .zip(&w)
            .map(|((x, y), w)| {
                if *w == 1.0 {
                    *x
                } else if *w == 0.0 {
                    *y
                } else {
                    w * x + (1.0 - w) * y
                }
            })
            .collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Blend(a, b, w))
    }

    /// Highway combination `t * h + (1 - t) * x`.
    pub fn gate(&mut self, t: Var, h: Var, x: Var) -> Var {
        let (tt, th, tx) = (self.node(t), self.node(h), self.node(x));
        assert!(tt.len() == th.len() && th.len() == tx.len());
        let data = tt.data().iter().zip(th.data()).zip(tx.data()).map(|((t, h), x)| t * h + (1.0 - t) * x).collect();
        let shape = tt.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Gate { t, h, x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    /// Row-wise softmax. Where `mask` is false the output is exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let ta = self.node(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let x = &ta.data()[i * c..(i + 1) * c];
            let m = mask.map(|m| &m[i * c..(i + 1) * c]);
            let ok = |j: usize| m.is_none_or(|m| m[j]);
            let max = (0..c).filter(|&j| ok(j)).map(|j| x[j]).fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..(i + 1) * c];
            let mut s = 0.0;
            for j in 0..c {
                if ok(j) {
                    o[j] = (x[j] - max).exp();
                    s += o[j];
                }
            }
            if s > 0.0 {
                o.iter_mut().for_each(|v| *v /= s);
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Softmax(a))
    }

    /// Divides each row by its sum. Callers guarantee positive row sums.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let ta = self.node(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::RowNormalize(a))
    }

    /// Shifts every row one column to the right, filling column 0 with zero.
    pub fn shift_right(&mut self, a: Var) -> Var {
        let ta = self.node(a);
        let c = ta.cols();
        let mut data = vec![0.0; ta.len()];
        for (dst, src) in data.chunks_mut(c).zip(ta.data().chunks(c)) {
            dst[1..].copy_from_slice(&src[..c - 1]);
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::ShiftRight(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p).1).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let tp = self.node(*p);
            assert_eq!(tp.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(tp.row(r));
            }
            off += w;
        }
        self.push(Self::mat(data, rows, total), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.node(a);
        let (r, c) = (ta.rows(), ta.cols());
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.data()[i * c + start..i * c + start + len]);
        }
        self.push(Self::mat(data, r, len), Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let tp = self.node(*p);
            assert_eq!(tp.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(tp.data());
            rows += tp.rows();
        }
        self.push(Self::mat(data, rows, cols), Op::ConcatRows(parts.to_vec()))
    }

    /// `out[i] = a[idx[i]]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let ta = self.node(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(ta.row(i));
        }
        let n = idx.len();
        self.push(Self::mat(data, n, c), Op::GatherRows(a, idx))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let ta = self.node(a);
        assert_eq!(ta.len(), rows * cols, "reshape size");
        let data = ta.data().to_vec();
        self.push(Self::mat(data, rows, cols), Op::Reshape(a))
    }

    /// Sliding windows for 1-D convolution over a batch of sequences.
    ///
    /// `x` is `[batch * seq_len, c]`; the result is `[batch * seq_len, width * c]`
    /// where block `w` of output row `t` is input row `t + w - pad_left` of the
    /// same sequence, or zeros outside it.
    pub fn unfold(&mut self, x: Var, seq_len: usize, width: usize, pad_left: usize) -> Var {
        let tx = self.node(x);
        let (rows, c) = (tx.rows(), tx.cols());
        assert_eq!(rows % seq_len, 0, "unfold: rows not a multiple of seq_len");
        let mut data = vec![0.0; rows * width * c];
        for r in 0..rows {
            let (b, t) = (r / seq_len, r % seq_len);
            for w in 0..width {
                let s = t as isize + w as isize - pad_left as isize;
                if s >= 0 && (s as usize) < seq_len {
                    let src = b * seq_len + s as usize;
                    let o = r * width * c + w * c;
                    data[o..o + c].copy_from_slice(tx.row(src));
                }
            }
        }
        self.push(Self::mat(data, rows, width * c), Op::Unfold { x, seq_len, width, pad_left })
    }

    /// Max-pool of width 2, stride 1, "same" length: `out[t] = max(x[t], x[t+1])`
    /// within each sequence's valid length, `out[t] = x[t]` at its last frame.
    pub fn max_pool2(&mut self, x: Var, seq_len: usize, lens: &[usize]) -> Var {
        let tx = self.node(x);
        let (rows, c) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; rows * c];
        let mut src = vec![0; rows * c];
        for r in 0..rows {
            let (b, t) = (r / seq_len, r % seq_len);
            let has_next = t + 1 < lens[b];
            for j in 0..c {
                let here = tx.data()[r * c + j];
                let (v, s) = if has_next && tx.data()[(r + 1) * c + j] > here {
                    (tx.data()[(r + 1) * c + j], (r + 1) * c + j)
                } else {
                    (here, r * c + j)
                };
                data[r * c + j] = v;
                src[r * c + j] = s;
            }
        }
        self.push(Self::mat(data, rows, c), Op::MaxPool2 { x, src })
    }

    /// `out[b] = sum_n w[b, n] * mem[b * n_src + n]` for `w: [batch, n_src]`
    /// and `mem: [batch * n_src, d]`.
    pub fn weighted_sum(&mut self, w: Var, mem: Var) -> Var {
        let (bsz, n) = self.shape(w);
        let (mr, d) = self.shape(mem);
        assert_eq!(mr, bsz * n, "weighted_sum memory rows");
        let (tw, tm) = (self.node(w), self.node(mem));
        let mut out = vec![0.0; bsz * d];
        for b in 0..bsz {
            let o = &mut out[b * d..(b + 1) * d];
            for k in 0..n {
                let wk = tw.data()[b * n + k];
                if wk != 0.0 {
                    o.iter_mut().zip(tm.row(b * n + k)).for_each(|(o, m)| *o += wk * m);
                }
            }
        }
        self.push(Self::mat(out, bsz, d), Op::WeightedSum { w, mem })
    }

    /// Repeats each row `n` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let ta = self.node(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(r * n * c);
        for i in 0..r {
            for _ in 0..n {
                data.extend_from_slice(ta.row(i));
            }
        }
        self.push(Self::mat(data, r * n, c), Op::RepeatRows(a, n))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `sum_r weights[r] * -sum_k targets[r, k] * log softmax(logits[r])_k`.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<f64>, weights: Vec<f64>) -> Var {
        let tl = self.node(logits);
        let (r, c) = (tl.rows(), tl.cols());
        assert_eq!(targets.len(), r * c);
        assert_eq!(weights.len(), r);
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let z = tl.row(i);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let t = &targets[i * c..(i + 1) * c];
            let mut l = 0.0;
            for j in 0..c {
                probs[i * c + j] = (z[j] - lse).exp();
                if t[j] != 0.0 {
                    l -= t[j] * (z[j] - lse);
                }
            }
            loss += weights[i] * l;
        }
        self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, targets, weights, probs })
    }

    /// `sum_r weights[r] * BCE(sigmoid(logits[r]), targets[r])` over a column of logits.
    pub fn sigmoid_xent(&mut self, logits: Var, targets: Vec<f64>, weights: Vec<f64>) -> Var {
        let tl = self.node(logits);
        assert_eq!(tl.len(), targets.len());
        assert_eq!(tl.len(), weights.len());
        let loss = tl.data().iter().zip(&targets).zip(&weights).map(|((z, y), w)| w * (softplus(*z) - y * z)).sum();
        self.push(Tensor::scalar(loss), Op::SigmoidXent { logits, targets, weights })
    }

    /// Fused multi-head scaled-dot-product attention (no projections).
    ///
    /// Returns the attended values and leaves the per-head weights readable
    /// through [`Tape::attention_weights`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (tq, tk, tv) = (self.node(q), self.node(k), self.node(v));
        let d = tq.cols();
        let (bq, tl, kl, h) = (spec.batch, spec.q_len, spec.k_len, spec.heads);
        if tq.rows() != bq * tl || tk.rows() != bq * kl || tv.rows() != bq * kl {
            return Err(Error::Shape("attention operand rows do not match spec".into()));
        }
        if tk.cols() != d || tv.cols() != d || d % h != 0 {
            return Err(Error::Shape(format!("attention dim {d} with {h} heads")));
        }
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; bq * h * tl * kl];
        let mut out = vec![0.0; bq * tl * d];
        let mut scores = vec![0.0; kl];
        for b in 0..bq {
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..tl {
                    let qi = &tq.row(b * tl + i)[off..off + dh];
                    let mut max = f64::NEG_INFINITY;
                    let mut any = false;
                    for j in 0..kl {
                        if spec.allowed(b, i, j) {
                            let kj = &tk.row(b * kl + j)[off..off + dh];
                            let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                            any = true;
                        }
                    }
                    if !any {
                        return Err(Error::InvalidArgument(format!(
                            "attention mask hides every key for query {i} of batch item {b}"
                        )));
                    }
                    let p = &mut probs[((b * h + hd) * tl + i) * kl..((b * h + hd) * tl + i + 1) * kl];
                    let mut s = 0.0;
                    for j in 0..kl {
                        if spec.allowed(b, i, j) {
                            p[j] = (scores[j] - max).exp();
                            s += p[j];
                        }
                    }
                    p.iter_mut().for_each(|x| *x /= s);
                    let o = &mut out[(b * tl + i) * d + off..(b * tl + i) * d + off + dh];
                    for j in 0..kl {
                        if p[j] != 0.0 {
                            let vj = &tv.row(b * kl + j)[off..off + dh];
                            o.iter_mut().zip(vj).for_each(|(o, v)| *o += p[j] * v);
                        }
                    }
                }
            }
        }
        Ok(self.push(Self::mat(out, bq * tl, d), Op::Attention { q, k, v, spec, probs }))
    }

    /// Weights of an attention node, laid out `[batch][head][q][k]`.
    pub fn attention_weights(&self, v: Var) -> Option<(&AttnSpec, &[f64])> {
        match &self.nodes[v.idx as usize].op {
            Op::Attention { spec, probs, .. } => Some((spec, probs)),
            _ => None,
        }
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.idx as usize >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        if self.node(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.idx as usize + 1];
        grads[loss.idx as usize] = Some(vec![1.0]);
        for i in (0..=loss.idx as usize).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: &Var| self.nodes[v.idx as usize].value.data();
        let len = |v: &Var| self.nodes[v.idx as usize].value.len();
        macro_rules! acc_map {
            ($v:expr, $f:expr) => {{
                let n = len(&$v);
                let d = slot(&mut grads[$v.idx as usize], n);
                let f: &dyn Fn(usize) -> f64 = &$f;
                for (j, dj) in d.iter_mut().enumerate() {
                    *dj += f(j);
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let (av, bv) = (val(a).to_vec(), val(b).to_vec());
                // dA = dC * B^T
                let da = slot(&mut grads[a.idx as usize], m * k);
                gemm(m, n, k, g, (n as isize, 1), &bv, (1, n as isize), da, 1.0);
                // dB = A^T * dC
                let db = slot(&mut grads[b.idx as usize], k * n);
                gemm(k, m, n, &av, (1, k as isize), g, (n as isize, 1), db, 1.0);
            }
            Op::Add(a, b) => {
                add_into(&mut grads[a.idx as usize], g);
                add_into(&mut grads[b.idx as usize], g);
            }
            Op::Sub(a, b) => {
                add_into(&mut grads[a.idx as usize], g);
                acc_map!(*b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc_map!(*a, |j| g[j] * bv[j]);
                acc_map!(*b, |j| g[j] * av[j]);
            }
            Op::AddRow(a, bias) => {
                add_into(&mut grads[a.idx as usize], g);
                let n = len(bias);
                let d = slot(&mut grads[bias.idx as usize], n);
                for row in g.chunks(n) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
            Op::Scale(a, s) => acc_map!(*a, |j| g[j] * s),
            Op::MulConst(a, c) => acc_map!(*a, |j| g[j] * c[j]),
            Op::Blend(a, b, w) => {
                acc_map!(*a, |j| g[j] * w[j]);
                acc_map!(*b, |j| g[j] * (1.0 - w[j]));
            }
            Op::Gate { t, h, x } => {
                let (tv, hv, xv) = (val(t), val(h), val(x));
                acc_map!(*t, |j| g[j] * (hv[j] - xv[j]));
                acc_map!(*h, |j| g[j] * tv[j]);
                acc_map!(*x, |j| g[j] * (1.0 - tv[j]));
            }
            Op::Sigmoid(a) => acc_map!(*a, |j| g[j] * out[j] * (1.0 - out[j])),
            Op::Tanh(a) => acc_map!(*a, |j| g[j] * (1.0 - out[j] * out[j])),
            Op::Relu(a) => acc_map!(*a, |j| if out[j] > 0.0 { g[j] } else { 0.0 }),
            Op::Abs(a) => {
                let av = val(a);
                acc_map!(*a, |j| g[j]
                    * if av[j] > 0.0 {
                        1.0
                    } else if av[j] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    })
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let n = out.len();
                let d = slot(&mut grads[a.idx as usize], n);
                for r in 0..n / c {
                    let (y, gy) = (&out[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot: f64 = y.iter().zip(gy).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        d[r * c + j] += y[j] * (gy[j] - dot);
                    }
                }
            }
            Op::RowNormalize(a) => {
                let c = node.value.cols();
                let av = val(a);
                let n = out.len();
                let d = slot(&mut grads[a.idx as usize], n);
                for r in 0..n / c {
                    let s: f64 = av[r * c..(r + 1) * c].iter().sum();
                    let (y, gy) = (&out[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot: f64 = y.iter().zip(gy).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        d[r * c + j] += (gy[j] - dot) / s;
                    }
                }
            }
            Op::ShiftRight(a) => {
                let c = node.value.cols();
                let n = out.len();
                let d = slot(&mut grads[a.idx as usize], n);
                for r in 0..n / c {
                    for j in 0..c - 1 {
                        d[r * c + j] += g[r * c + j + 1];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    let d = slot(&mut grads[p.idx as usize], rows * w);
                    for r in 0..rows {
                        d[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(&g[r * total + off..r * total + off + w])
                            .for_each(|(d, g)| *d += g);
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let w = node.value.cols();
                let d = slot(&mut grads[a.idx as usize], r * c);
                for i in 0..r {
                    d[i * c + start..i * c + start + w]
                        .iter_mut()
                        .zip(&g[i * w..(i + 1) * w])
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = len(p);
                    add_into(&mut grads[p.idx as usize], &g[off..off + n]);
                    off += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let c = node.value.cols();
                let n = len(a);
                let d = slot(&mut grads[a.idx as usize], n);
                for (k, &src) in idx.iter().enumerate() {
                    d[src * c..(src + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(d, g)| *d += g);
                }
            }
            Op::Reshape(a) => add_into(&mut grads[a.idx as usize], g),
            Op::Unfold { x, seq_len, width, pad_left } => {
                let (rows, c) = self.shape(*x);
                let d = slot(&mut grads[x.idx as usize], rows * c);
                for r in 0..rows {
                    let (b, t) = (r / seq_len, r % seq_len);
                    for w in 0..*width {
                        let s = t as isize + w as isize - *pad_left as isize;
                        if s >= 0 && (s as usize) < *seq_len {
                            let src = b * seq_len + s as usize;
                            let o = r * width * c + w * c;
                            d[src * c..(src + 1) * c].iter_mut().zip(&g[o..o + c]).for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
            Op::MaxPool2 { x, src } => {
                let n = len(x);
                let d = slot(&mut grads[x.idx as usize], n);
                for (k, &s) in src.iter().enumerate() {
                    d[s] += g[k];
                }
            }
            Op::WeightedSum { w, mem } => {
                let (bsz, n) = self.shape(*w);
                let d = self.shape(*mem).1;
                let (wv, mv) = (val(w).to_vec(), val(mem));
                let dw: Vec<f64> = (0..bsz * n)
                    .map(|bn| {
                        let b = bn / n;
                        let m = &mv[bn * d..(bn + 1) * d];
                        m.iter().zip(&g[b * d..(b + 1) * d]).map(|(m, g)| m * g).sum()
                    })
                    .collect();
                add_into(&mut grads[w.idx as usize], &dw);
                let dm = slot(&mut grads[mem.idx as usize], bsz * n * d);
                for bn in 0..bsz * n {
                    let b = bn / n;
                    let wk = wv[bn];
                    dm[bn * d..(bn + 1) * d].iter_mut().zip(&g[b * d..(b + 1) * d]).for_each(|(dm, g)| *dm += wk * g);
                }
            }
            Op::RepeatRows(a, n) => {
                let (r, c) = self.shape(*a);
                let d = slot(&mut grads[a.idx as usize], r * c);
                for i in 0..r {
                    for k in 0..*n {
                        let src = &g[(i * n + k) * c..(i * n + k + 1) * c];
                        d[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sum(a) => acc_map!(*a, |_| g[0]),
            Op::SoftmaxXent { logits, targets, weights, probs } => {
                let c = self.shape(*logits).1;
                let d = slot(&mut grads[logits.idx as usize], probs.len());
                for (r, w) in weights.iter().enumerate() {
                    let t = &targets[r * c..(r + 1) * c];
                    let mass: f64 = t.iter().sum();
                    for j in 0..c {
                        d[r * c + j] += g[0] * w * (probs[r * c + j] * mass - t[j]);
                    }
                }
            }
            Op::SigmoidXent { logits, targets, weights } => {
                let z = val(logits);
                acc_map!(*logits, |j| g[0] * weights[j] * (sigmoid(z[j]) - targets[j]))
            }
            Op::Attention { q, k, v, spec, probs } => {
                let d = self.shape(*q).1;
                let (bq, tl, kl, h) = (spec.batch, spec.q_len, spec.k_len, spec.heads);
                let dh = d / h;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (val(q).to_vec(), val(k).to_vec(), val(v).to_vec());
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; kl];
                for b in 0..bq {
                    for hd in 0..h {
                        let off = hd * dh;
                        for i in 0..tl {
                            let p = &probs[((b * h + hd) * tl + i) * kl..((b * h + hd) * tl + i + 1) * kl];
                            let go = &g[(b * tl + i) * d + off..(b * tl + i) * d + off + dh];
                            let mut dot = 0.0;
                            for j in 0..kl {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vr = (b * kl + j) * d + off;
                                dp[j] = go.iter().zip(&vv[vr..vr + dh]).map(|(a, b)| a * b).sum();
                                dot += p[j] * dp[j];
                                dv[vr..vr + dh].iter_mut().zip(go).for_each(|(dv, g)| *dv += p[j] * g);
                            }
                            let qr = (b * tl + i) * d + off;
                            for j in 0..kl {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let kr = (b * kl + j) * d + off;
                                for e in 0..dh {
                                    dq[qr + e] += ds * kv[kr + e];
                                    dk[kr + e] += ds * qv[qr + e];
                                }
                            }
                        }
                    }
                }
                add_into(&mut grads[q.idx as usize], &dq);
                add_into(&mut grads[k.idx as usize], &dk);
                add_into(&mut grads[v.idx as usize], &dv);
            }
        }
    }
}
