use crate::error::{Error, Result};
use crate::numerics::{dropout, AttnSpec, Bound, Linear, Mode, ParamStore, RngStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiHeadConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub hops: usize,
    pub drop_rate: f64,
}

impl MultiHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.model_dim == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} is not divisible into {} heads",
                self.model_dim, self.n_heads
            )));
        }
        if self.hops == 0 {
            return Err(Error::InvalidArgument("self-attention needs at least one hop".into()));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::InvalidArgument(format!("drop rate {} outside [0, 1)", self.drop_rate)));
        }
        Ok(())
    }
}

/// Query/key/value projections, fused scaled-dot-product heads and an output
/// projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: MultiHeadConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        cfg: MultiHeadConfig,
        init: &RngStream,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(Self {
            cfg,
            q: Linear::new(store, &format!("{name}.wq"), in_dim, d, false, init),
            k: Linear::new(store, &format!("{name}.wk"), in_dim, d, false, init),
            v: Linear::new(store, &format!("{name}.wv"), in_dim, d, false, init),
            o: Linear::new(store, &format!("{name}.wo"), d, d, false, init),
        })
    }

    /// Returns the projected output and the fused attention node, whose
    /// weights are readable through `Tape::attention_weights`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, xq: Var, xkv: Var, spec: AttnSpec) -> Result<(Var, Var)> {
        let q = self.q.forward(tape, p, xq);
        let k = self.k.forward(tape, p, xkv);
        let v = self.v.forward(tape, p, xkv);
        let a = tape.attention(q, k, v, AttnSpec { heads: self.cfg.n_heads, ..spec })?;
        Ok((self.o.forward(tape, p, a), a))
    }
}

/// Single-example multi-head attention on plain tensors.
///
/// Returns the output `[t_q, model_dim]` and one `[t_q, t_k]` weight matrix
/// per head. With `causal`, query `i` sees keys `0..=i`.
pub fn multi_head_attend(
    mha: &MultiHeadAttention,
    params: &ParamStore,
    q: &Tensor,
    kv: &Tensor,
    causal: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (tq, tk) = (q.rows(), kv.rows());
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let qv = tape.leaf(q.clone());
    let kvv = tape.leaf(kv.clone());
    let spec = AttnSpec { batch: 1, q_len: tq, k_len: tk, heads: mha.cfg.n_heads, causal, q_offset: 0, key_lens: None };
    let (out, a) = mha.forward(&mut tape, &p, qv, kvv, spec)?;
    let (_, probs) = tape.attention_weights(a).expect("attention node");
    let heads = probs.chunks(tq * tk).map(|c| Tensor::matrix(tq, tk, c.to_vec())).collect::<Result<Vec<_>>>()?;
    Ok((tape.value(out).clone(), heads))
}

/// `y = x + FC_tanh(MHA(x, x, x))`, repeated `hops` times with shared weights.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub mha: MultiHeadAttention,
    pub fc: Linear,
    pub dim: usize,
}

impl SelfAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, cfg: MultiHeadConfig, init: &RngStream) -> Result<Self> {
        let mha = MultiHeadAttention::new(store, &format!("{name}.mha"), dim, cfg, init)?;
        let fc = Linear::new(store, &format!("{name}.fc"), cfg.model_dim, dim, true, init);
        Ok(Self { mha, fc, dim })
    }

    fn residual(&self, tape: &mut Tape, p: &Bound, x: Var, att: Var, mode: Mode, rng: &RngStream) -> Var {
        let f = self.fc.forward(tape, p, att);
        let f = tape.tanh(f);
        let f = match mode {
            Mode::Train => dropout(tape, f, self.mha.cfg.drop_rate, rng),
            Mode::Infer => f,
        };
        tape.add(x, f)
    }

    /// Full-sequence pass over `[batch * len, dim]`. With `causal` this is
    /// the step-masked parallel form of [`IncrementalSAState`].
    ///
    /// Returns the output and one attention node per hop.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        batch: usize,
        len: usize,
        key_lens: Option<Vec<usize>>,
        causal: bool,
        mode: Mode,
        rng: &RngStream,
    ) -> Result<(Var, Vec<Var>)> {
        let (rows, d) = tape.shape(x);
        if rows != batch * len || d != self.dim {
            return Err(Error::Shape(format!(
                "self-attention input {rows}x{d}, expected {}x{}",
                batch * len,
                self.dim
            )));
        }
        let spec = AttnSpec { batch, q_len: len, k_len: len, heads: 0, causal, q_offset: 0, key_lens };
        let mut h = x;
        let mut nodes = Vec::new();
        for hop in 0..self.mha.cfg.hops {
            let (att, node) = self.mha.forward(tape, p, h, h, spec.clone())?;
            h = self.residual(tape, p, h, att, mode, &rng.fork(hop as u64));
            nodes.push(node);
        }
        Ok((h, nodes))
    }
}

/// Cached keys and values of every past frame, per hop.
///
/// The cache holds handles on one tape and is only valid with that tape.
#[derive(Clone, Debug)]
pub struct IncrementalSAState {
    batch: usize,
    keys: Vec<Option<Var>>,
    values: Vec<Option<Var>>,
    frames: usize,
}

impl IncrementalSAState {
    pub fn new(batch: usize, hops: usize) -> Self {
        Self { batch, keys: vec![None; hops], values: vec![None; hops], frames: 0 }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Rows held by the key cache of the first hop, in frames.
    pub fn cache_len(&self, tape: &Tape) -> usize {
        self.keys[0].map_or(0, |k| tape.shape(k).0 / self.batch)
    }
}

fn append(tape: &mut Tape, cache: &mut Option<Var>, new: Var) -> Var {
    let all = match *cache {
        Some(c) => tape.concat_rows(&[c, new]),
        None => new,
    };
    *cache = Some(all);
    all
}

impl SelfAttentionBlock {
    /// Feeds one new frame `[batch, dim]` and returns its output, attending
    /// over all cached frames and itself. Also returns the attention node of
    /// each hop.
    pub fn incremental_step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        state: &mut IncrementalSAState,
        x: Var,
        mode: Mode,
        rng: &RngStream,
    ) -> Result<(Var, Vec<Var>)> {
        let (b, d) = tape.shape(x);
        if b != state.batch || d != self.dim {
            return Err(Error::Shape(format!("incremental frame {b}x{d}, expected {}x{}", state.batch, self.dim)));
        }
        let t = state.frames + 1;
        // Cache rows are time-major; attention wants batch-major keys.
        let perm: Vec<usize> = (0..b * t).map(|r| (r % t) * b + r / t).collect();
        let spec = AttnSpec { batch: b, q_len: 1, k_len: t, heads: 0, causal: false, q_offset: 0, key_lens: None };
        let mut h = x;
        let mut nodes = Vec::new();
        for hop in 0..self.mha.cfg.hops {
            let k = self.mha.k.forward(tape, p, h);
            let v = self.mha.v.forward(tape, p, h);
            let ks = append(tape, &mut state.keys[hop], k);
            let vs = append(tape, &mut state.values[hop], v);
            let (ks, vs) =
                if b > 1 { (tape.gather_rows(ks, perm.clone()), tape.gather_rows(vs, perm.clone())) } else { (ks, vs) };
            let q = self.mha.q.forward(tape, p, h);
            let a = tape.attention(q, ks, vs, AttnSpec { heads: self.mha.cfg.n_heads, ..spec.clone() })?;
            let att = self.mha.o.forward(tape, p, a);
            h = self.residual(tape, p, h, att, mode, &rng.fork(hop as u64));
            nodes.push(a);
        }
        state.frames = t;
        Ok((h, nodes))
    }

    /// Feeds `new_frames` (`[k, dim]`, single example) one at a time and
    /// returns the outputs for those frames only.
    pub fn incremental_self_attend(
        &self,
        tape: &mut Tape,
        p: &Bound,
        state: &mut IncrementalSAState,
        new_frames: Var,
    ) -> Result<Var> {
        let k = tape.shape(new_frames).0;
        let mut outs = Vec::with_capacity(k);
        for i in 0..k {
            let x = tape.gather_rows(new_frames, vec![i]);
            let (y, _) = self.incremental_step(tape, p, state, x, Mode::Infer, &RngStream::new(0))?;
            outs.push(y);
        }
        Ok(tape.concat_rows(&outs))
    }

    /// Step-masked parallel pass over a single `[t, dim]` sequence.
    pub fn step_masked_parallel(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let t = tape.shape(x).0;
        let (y, _) = self.forward(tape, p, x, 1, t, None, true, Mode::Infer, &RngStream::new(0))?;
        Ok(y)
    }
}
