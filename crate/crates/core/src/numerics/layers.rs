//! Parameter storage and the trainable building blocks shared by the encoder
//! and decoder: dense layers, pre-nets, LSTM cells with zoneout, convolution
//! banks and highway layers.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::rng::{RngStream, Substream};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Whether stochastic regularizers draw random masks or use expectations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

fn name_key(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x1000_0000_01b3))
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
        ParamId(self.entries.len() - 1)
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, seeded by `(init, name)`.
    pub fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, init: &RngStream) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = init.fork(name_key(name)).rng(Substream::Init);
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data).unwrap())
    }

    pub fn constant(&mut self, name: &str, n: usize, value: f64) -> ParamId {
        self.insert(name, Tensor::full(&[n], value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|i| ParamId(*i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| self.get(i))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|i| self.get_mut(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries.iter().enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn total_size(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect() }
    }
}

/// Parameters recorded on a specific tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Uses already-recorded leaves, in parameter order, as the bound parameters.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients after `Tape::backward`; unreached ones are zero.
    pub fn gradients(&self, store: &ParamStore, grads: &crate::numerics::tape::Gradients) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| {
                let g = grads.get_or_zero(self.vars[id.0], t.len());
                Tensor::new(t.shape().to_vec(), g).unwrap()
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: &RngStream,
    ) -> Self {
        let w = store.glorot(&format!("{name}.w"), fan_in, fan_out, init);
        let b = bias.then(|| store.constant(&format!("{name}.b"), fan_out, 0.0));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => tape.add_row(y, p.var(b)),
            None => y,
        }
    }
}

/// Inverted dropout; the identity when `rate` is zero.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &RngStream) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let n = tape.value(x).len();
    let mask = rng.dropout_mask(n, rate);
    tape.mul_const(x, mask)
}

/// Stack of ReLU dense layers with dropout after each.
#[derive(Clone, Debug)]
pub struct Prenet {
    pub layers: Vec<Linear>,
    pub drop_rate: f64,
    /// Keep dropout active at inference time as well.
    pub always_drop: bool,
}

impl Prenet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        drop_rate: f64,
        always_drop: bool,
        init: &RngStream,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, init))
            .collect();
        Self { layers, drop_rate, always_drop }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mode: Mode, rng: &RngStream) -> Var {
        let active = mode == Mode::Train || self.always_drop;
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, p, h);
            h = tape.relu(h);
            if active {
                h = dropout(tape, h, self.drop_rate, &rng.fork(i as u64));
            }
        }
        h
    }
}

/// Single-layer LSTM cell with gate order `[input, forget, candidate, output]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

/// Zoneout setting for one recurrent step.
#[derive(Clone, Copy, Debug)]
pub struct Zoneout {
    pub rate: f64,
    pub mode: Mode,
}

impl Zoneout {
    pub fn new(rate: f64, mode: Mode) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("zoneout rate {rate} outside [0, 1]")));
        }
        Ok(Self { rate, mode })
    }

    /// Mixes previous and candidate state. Train mode keeps each unit's
    /// previous value with probability `rate`; infer mode takes the expectation.
    fn apply(&self, tape: &mut Tape, prev: Var, cand: Var, rng: &RngStream) -> Var {
        if self.rate == 0.0 {
            return cand;
        }
        let n = tape.value(cand).len();
        let w = match self.mode {
            Mode::Train => rng.zoneout_mask(n, self.rate),
            Mode::Infer => vec![self.rate; n],
        };
        tape.blend(prev, cand, w)
    }
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden: usize, init: &RngStream) -> Self {
        let w_ih = store.glorot(&format!("{name}.w_ih"), input_dim, 4 * hidden, init);
        let w_hh = store.glorot(&format!("{name}.w_hh"), hidden, 4 * hidden, init);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        let b = store.insert(&format!("{name}.b"), Tensor::vector(bias));
        Self { w_ih, w_hh, b, input_dim, hidden }
    }

    /// Input contribution `x W_ih + b`, computable for a whole sequence at once.
    pub fn input_proj(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.w_ih));
        tape.add_row(y, p.var(self.b))
    }

    /// One step given the precomputed input projection.
    pub fn step_proj(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x_proj: Var,
        h: Var,
        c: Var,
        zoneout: Zoneout,
        rng: &RngStream,
    ) -> (Var, Var) {
        let hh = tape.matmul(h, p.var(self.w_hh));
        let gates = tape.add(x_proj, hh);
        let n = self.hidden;
        let i = tape.slice_cols(gates, 0, n);
        let f = tape.slice_cols(gates, n, n);
        let g = tape.slice_cols(gates, 2 * n, n);
        let o = tape.slice_cols(gates, 3 * n, n);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_new = tape.add(fc, ig);
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc);
        let c_out = zoneout.apply(tape, c, c_new, &rng.fork(0));
        let h_out = zoneout.apply(tape, h, h_new, &rng.fork(1));
        (h_out, c_out)
    }

    /// One LSTM step with zoneout on both hidden and cell state.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        h: Var,
        c: Var,
        zoneout: Zoneout,
        rng: &RngStream,
    ) -> (Var, Var) {
        let xp = self.input_proj(tape, p, x);
        self.step_proj(tape, p, xp, h, c, zoneout, rng)
    }
}

/// Runs an LSTM over a padded batch of sequences laid out `[batch * len, d]`.
///
/// Positions at or past a sequence's length leave the state untouched, so a
/// reverse pass starts from a zero state at each sequence's true end.
/// Returns outputs in the same layout.
#[allow(clippy::too_many_arguments)]
pub fn run_lstm(
    cell: &LstmCell,
    tape: &mut Tape,
    p: &Bound,
    x: Var,
    seq_len: usize,
    lens: &[usize],
    reverse: bool,
    zoneout: Zoneout,
    rng: &RngStream,
) -> Var {
    let batch = lens.len();
    let hdim = cell.hidden;
    let xp = cell.input_proj(tape, p, x);
    let mut h = tape.leaf(Tensor::zeros(&[batch, hdim]));
    let mut c = tape.leaf(Tensor::zeros(&[batch, hdim]));
    let mut outs = vec![h; seq_len];
    let order: Vec<usize> = if reverse { (0..seq_len).rev().collect() } else { (0..seq_len).collect() };
    for t in order {
        let rows: Vec<usize> = (0..batch).map(|b| b * seq_len + t).collect();
        let xt = tape.gather_rows(xp, rows);
        let (hn, cn) = cell.step_proj(tape, p, xt, h, c, zoneout, &rng.fork(t as u64));
        if lens.iter().all(|&l| t < l) {
            h = hn;
            c = cn;
        } else {
            let keep: Vec<f64> =
                lens.iter().flat_map(|&l| std::iter::repeat_n(if t < l { 0.0 } else { 1.0 }, hdim)).collect();
            h = tape.blend(h, hn, keep.clone());
            c = tape.blend(c, cn, keep);
        }
        outs[t] = h;
    }
    // outs is time-major; permute rows back to batch-major.
    let stacked = tape.concat_rows(&outs);
    let perm: Vec<usize> = (0..batch * seq_len).map(|r| (r % seq_len) * batch + r / seq_len).collect();
    tape.gather_rows(stacked, perm)
}

/// 1-D convolution with "same" padding over `[batch * len, c_in]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub width: usize,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        c_in: usize,
        c_out: usize,
        bias: bool,
        init: &RngStream,
    ) -> Self {
        let w = store.glorot(&format!("{name}.w"), width * c_in, c_out, init);
        let b = bias.then(|| store.constant(&format!("{name}.b"), c_out, 0.0));
        Self { width, w, b, c_in, c_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, seq_len: usize) -> Var {
        let cols = tape.unfold(x, seq_len, self.width, (self.width - 1) / 2);
        let y = tape.matmul(cols, p.var(self.w));
        match self.b {
            Some(b) => tape.add_row(y, p.var(b)),
            None => y,
        }
    }
}

/// Activation applied after each bank convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

pub fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Linear => x,
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
    }
}

/// Convolutions of widths `1..=K` concatenated along channels.
#[derive(Clone, Debug)]
pub struct ConvBank {
    pub convs: Vec<Conv1d>,
    pub activation: Activation,
}

impl ConvBank {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        c_in: usize,
        channels: usize,
        activation: Activation,
        init: &RngStream,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("conv bank needs K >= 1".into()));
        }
        let convs =
            (1..=k).map(|w| Conv1d::new(store, &format!("{name}.k{w}"), w, c_in, channels, true, init)).collect();
        Ok(Self { convs, activation })
    }

    pub fn out_dim(&self) -> usize {
        self.convs.iter().map(|c| c.c_out).sum()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, seq_len: usize) -> Result<Var> {
        if seq_len == 0 {
            return Err(Error::InvalidArgument("conv bank on empty sequence".into()));
        }
        let outs: Vec<Var> = self
            .convs
            .iter()
            .map(|c| {
                let y = c.forward(tape, p, x, seq_len);
                activate(tape, y, self.activation)
            })
            .collect();
        Ok(tape.concat_cols(&outs))
    }
}

/// `y = T(x) * H(x) + (1 - T(x)) * x` with sigmoid gate `T` and ReLU transform `H`.
#[derive(Clone, Debug)]
pub struct Highway {
    pub transform: Linear,
    pub gate: Linear,
}

impl Highway {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, init: &RngStream) -> Self {
        Self {
            transform: Linear::new(store, &format!("{name}.h"), dim, dim, true, init),
            gate: Linear::new(store, &format!("{name}.t"), dim, dim, true, init),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let d = tape.shape(x).1;
        if d != self.transform.fan_in || self.transform.fan_in != self.transform.fan_out {
            return Err(Error::Shape(format!("highway expects width {} but got {d}", self.transform.fan_in)));
        }
        let h = self.transform.forward(tape, p, x);
        let h = tape.relu(h);
        let t = self.gate.forward(tape, p, x);
        let t = tape.sigmoid(t);
        Ok(tape.gate(t, h, x))
    }
}

/// Softmax of a standalone tensor along `axis` (0 or 1 for matrices).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let (r, c) = (x.rows(), x.cols());
    let (outer, inner, stride) = match (x.shape().len(), axis) {
        (1, 0) => (1, c, 1),
        (_, 1) if x.shape().len() == 2 => (r, c, 1),
        (_, 0) if x.shape().len() == 2 => (c, r, c),
        _ => return Err(Error::InvalidArgument(format!("axis {axis} for shape {:?}", x.shape()))),
    };
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        let idx = |k: usize| if stride == 1 { o * inner + k } else { k * stride + o };
        let max = (0..inner).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for k in 0..inner {
            d[idx(k)] = (d[idx(k)] - max).exp();
            s += d[idx(k)];
        }
        for k in 0..inner {
            d[idx(k)] /= s;
        }
    }
    Ok(out)
}
