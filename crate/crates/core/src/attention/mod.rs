//! Attention mechanisms: additive (content + location) attention, forward
//! attention, multi-head dot-product self-attention with incremental decoding,
//! and the dual-source combiner used by the self-attention decoder.
//!
//! All batched operations use the layout of [`crate::numerics`]: a batch of
//! sequences is `[batch * len, d]` with row `b * len + n`, per-step decoder
//! quantities are `[batch, d]`, and alignments are `[batch, len]`.

mod alignment;
mod multihead;

pub use alignment::{AlignmentMatrix, SourceKind};
pub use multihead::{multi_head_attend, IncrementalSAState, MultiHeadAttention, MultiHeadConfig, SelfAttentionBlock};

use crate::error::{Error, Result};
use crate::numerics::{Bound, Conv1d, Linear, ParamStore, RngStream, Tape, Tensor, Var};

/// Mask of valid source positions for `softmax_rows`, `[batch, n]` row-major.
pub fn length_mask(lens: &[usize], n: usize) -> Vec<bool> {
    lens.iter().flat_map(|&l| (0..n).map(move |j| j < l)).collect()
}

/// `e_n = v^T tanh(W_q q + W_m m_n + W_f f_n + b)`.
#[derive(Clone, Debug)]
pub struct AdditiveAttention {
    pub query: Linear,
    pub memory: Linear,
    pub location: Option<Linear>,
    pub v: Linear,
    pub dim: usize,
}

impl AdditiveAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        memory_dim: usize,
        location_dim: Option<usize>,
        dim: usize,
        init: &RngStream,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), query_dim, dim, true, init),
            memory: Linear::new(store, &format!("{name}.m"), memory_dim, dim, false, init),
            location: location_dim.map(|f| Linear::new(store, &format!("{name}.f"), f, dim, false, init)),
            v: Linear::new(store, &format!("{name}.v"), dim, 1, false, init),
            dim,
        }
    }

    /// `W_m m_n` for every memory row; constant across decoder steps.
    pub fn project_memory(&self, tape: &mut Tape, p: &Bound, memory: Var) -> Var {
        self.memory.forward(tape, p, memory)
    }

    /// Unnormalized energies `[batch, n]`.
    pub fn energies(&self, tape: &mut Tape, p: &Bound, query: Var, memory_proj: Var, location: Option<Var>) -> Var {
        let (batch, _) = tape.shape(query);
        let n = tape.shape(memory_proj).0 / batch;
        let q = self.query.forward(tape, p, query);
        let q = tape.repeat_rows(q, n);
        let mut s = tape.add(q, memory_proj);
        if let (Some(lin), Some(f)) = (&self.location, location) {
            let lf = lin.forward(tape, p, f);
            s = tape.add(s, lf);
        }
        let s = tape.tanh(s);
        let e = self.v.forward(tape, p, s);
        tape.reshape(e, batch, n)
    }

    /// Softmax over valid positions and the resulting context.
    /// Returns `(context [batch, d], weights [batch, n])`.
    #[allow(clippy::too_many_arguments)]
    pub fn attend(
        &self,
        tape: &mut Tape,
        p: &Bound,
        query: Var,
        memory: Var,
        memory_proj: Var,
        location: Option<Var>,
        lens: &[usize],
    ) -> (Var, Var) {
        let e = self.energies(tape, p, query, memory_proj, location);
        let n = tape.shape(e).1;
        let w = tape.softmax_rows(e, Some(&length_mask(lens, n)));
        (tape.weighted_sum(w, memory), w)
    }
}

/// Single-example additive attention on plain tensors.
///
/// `query` is a row vector, `memory` is `[n, d]`, `location` is `[n, f]`.
pub fn additive_attend(
    att: &AdditiveAttention,
    params: &ParamStore,
    query: &Tensor,
    memory: &Tensor,
    location: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    if memory.rows() == 0 || memory.is_empty() {
        return Err(Error::Shape("additive attention over empty memory".into()));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let q = tape.leaf(query.clone().reshape(vec![1, query.len()])?);
    let m = tape.leaf(memory.clone());
    let f = location.map(|f| tape.leaf(f.clone()));
    let mp = att.project_memory(&mut tape, &p, m);
    let (c, w) = att.attend(&mut tape, &p, q, m, mp, f, &[memory.rows()]);
    Ok((tape.value(c).clone(), tape.value(w).clone()))
}

/// Current alignment of forward attention.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardAttentionState {
    pub alpha: Tensor,
    pub step: usize,
}

impl ForwardAttentionState {
    /// One-hot on the first source position.
    pub fn initial(source_length: usize) -> Result<Self> {
        if source_length == 0 {
            return Err(Error::Shape("forward attention over empty source".into()));
        }
        let mut a = vec![0.0; source_length];
        a[0] = 1.0;
        Ok(Self { alpha: Tensor::vector(a), step: 0 })
    }
}

/// Renormalization sums below this are a collapsed alignment.
pub const DEGENERATE_SUM: f64 = 1e-20;

fn check_weights(y: &[f64], what: &str) -> Result<()> {
    if y.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(format!("{what} must be finite and nonnegative")));
    }
    Ok(())
}

/// `alpha'(n) ∝ (alpha(n) + alpha(n-1)) * y(n)` with `alpha(-1) = 0`.
pub fn forward_attention_step(state: &ForwardAttentionState, y: &Tensor) -> Result<ForwardAttentionState> {
    let a = state.alpha.data();
    if y.len() != a.len() {
        return Err(Error::Shape(format!("energies of length {} for alignment of length {}", y.len(), a.len())));
    }
    check_weights(y.data(), "forward attention energies")?;
    let mut next: Vec<f64> = (0..a.len()).map(|n| (a[n] + if n > 0 { a[n - 1] } else { 0.0 }) * y.data()[n]).collect();
    let s: f64 = next.iter().sum();
    if s < DEGENERATE_SUM {
        return Err(Error::DegenerateAlignment(format!("forward attention mass {s:e} at step {}", state.step + 1)));
    }
    next.iter_mut().for_each(|v| *v /= s);
    Ok(ForwardAttentionState { alpha: Tensor::vector(next), step: state.step + 1 })
}

/// Batched, differentiable forward-attention update on `[batch, n]` rows.
pub fn forward_attention_update(tape: &mut Tape, alpha: Var, y: Var) -> Result<Var> {
    let shifted = tape.shift_right(alpha);
    let both = tape.add(alpha, shifted);
    let un = tape.mul(both, y);
    let t = tape.value(un);
    let n = t.cols();
    for (b, row) in t.data().chunks(n).enumerate() {
        let s: f64 = row.iter().sum();
        if !(s >= DEGENERATE_SUM) {
            return Err(Error::DegenerateAlignment(format!("forward attention mass {s:e} for batch item {b}")));
        }
    }
    Ok(tape.row_normalize(un))
}

/// Width and channel count of the location convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocationConfig {
    pub kernel_width: usize,
    pub filters: usize,
}

/// Forward attention over the encoder LSTM memory, optionally paired with
/// additive attention over the self-attended memory.
#[derive(Clone, Debug)]
pub struct DualSourceAttention {
    pub location: Conv1d,
    pub forward: AdditiveAttention,
    pub additive: Option<AdditiveAttention>,
}

/// Precomputed memory projections for one utterance batch.
#[derive(Clone, Copy, Debug)]
pub struct DualMemory {
    pub lstm: Var,
    pub lstm_proj: Var,
    pub sa: Option<(Var, Var)>,
}

/// Outputs of one dual-source step.
#[derive(Clone, Copy, Debug)]
pub struct DualStep {
    pub context: Var,
    pub alpha: Var,
    pub sa_weights: Option<Var>,
}

/// Attention weights to use instead of the computed ones.
#[derive(Clone, Debug)]
pub struct ForcedWeights {
    pub forward: Tensor,
    pub additive: Option<Tensor>,
}

impl DualSourceAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        lstm_dim: usize,
        sa_dim: Option<usize>,
        attention_dim: usize,
        loc: LocationConfig,
        init: &RngStream,
    ) -> Self {
        Self {
            location: Conv1d::new(store, &format!("{name}.loc"), loc.kernel_width, 1, loc.filters, false, init),
            forward: AdditiveAttention::new(
                store,
                &format!("{name}.fwd"),
                query_dim,
                lstm_dim,
                Some(loc.filters),
                attention_dim,
                init,
            ),
            additive: sa_dim
                .map(|d| AdditiveAttention::new(store, &format!("{name}.sa"), query_dim, d, None, attention_dim, init)),
        }
    }

    pub fn context_dim(&self) -> usize {
        self.forward.memory.fan_in + self.additive.as_ref().map_or(0, |a| a.memory.fan_in)
    }

    pub fn prepare(&self, tape: &mut Tape, p: &Bound, lstm: Var, sa: Option<Var>) -> Result<DualMemory> {
        let sa = match (&self.additive, sa) {
            (Some(a), Some(m)) => {
                if tape.shape(m).0 != tape.shape(lstm).0 {
                    return Err(Error::Shape(format!(
                        "dual-source memories have {} and {} rows",
                        tape.shape(lstm).0,
                        tape.shape(m).0
                    )));
                }
                Some((m, a.project_memory(tape, p, m)))
            }
            (None, None) => None,
            _ => return Err(Error::InvalidArgument("self-attended memory presence does not match the model".into())),
        };
        let lstm_proj = self.forward.project_memory(tape, p, lstm);
        Ok(DualMemory { lstm, lstm_proj, sa })
    }

    /// Location features `[batch * n, filters]` from the previous alignment.
    pub fn location_features(&self, tape: &mut Tape, p: &Bound, alpha: Var) -> Var {
        let (b, n) = tape.shape(alpha);
        let col = tape.reshape(alpha, b * n, 1);
        self.location.forward(tape, p, col, n)
    }

    /// One decoder step. With `forced`, the supplied weights replace the
    /// computed ones.
    pub fn step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        query: Var,
        mem: &DualMemory,
        alpha: Var,
        lens: &[usize],
        forced: Option<&ForcedWeights>,
    ) -> Result<DualStep> {
        let alpha_new = match forced {
            Some(f) => tape.leaf(f.forward.clone()),
            None => {
                let loc = self.location_features(tape, p, alpha);
                let e = self.forward.energies(tape, p, query, mem.lstm_proj, Some(loc));
                let n = tape.shape(e).1;
                let y = tape.softmax_rows(e, Some(&length_mask(lens, n)));
                forward_attention_update(tape, alpha, y)?
            }
        };
        let fwd_ctx = tape.weighted_sum(alpha_new, mem.lstm);
        let (context, sa_weights) = match (&self.additive, mem.sa) {
            (Some(a), Some((m, mp))) => {
                let w = match forced.and_then(|f| f.additive.as_ref()) {
                    Some(w) => tape.leaf(w.clone()),
                    None => {
                        let e = a.energies(tape, p, query, mp, None);
                        let n = tape.shape(e).1;
                        tape.softmax_rows(e, Some(&length_mask(lens, n)))
                    }
                };
                let c = tape.weighted_sum(w, m);
                (tape.concat_cols(&[fwd_ctx, c]), Some(w))
            }
            _ => (fwd_ctx, None),
        };
        Ok(DualStep { context, alpha: alpha_new, sa_weights })
    }
}

/// Single-example dual-source step on plain tensors.
///
/// Returns the concatenated context, the new forward state and both weight
/// vectors.
pub fn dual_source_attend(
    att: &DualSourceAttention,
    params: &ParamStore,
    lstm_memory: &Tensor,
    sa_memory: &Tensor,
    query: &Tensor,
    state: &ForwardAttentionState,
) -> Result<(Tensor, ForwardAttentionState, (Tensor, Tensor))> {
    if lstm_memory.rows() != sa_memory.rows() {
        return Err(Error::Shape(format!("source lengths differ: {} vs {}", lstm_memory.rows(), sa_memory.rows())));
    }
    let n = lstm_memory.rows();
    if state.alpha.len() != n {
        return Err(Error::Shape("forward state length differs from memory".into()));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let lm = tape.leaf(lstm_memory.clone());
    let sm = tape.leaf(sa_memory.clone());
    let q = tape.leaf(query.clone().reshape(vec![1, query.len()])?);
    let a = tape.leaf(state.alpha.clone().reshape(vec![1, n])?);
    let mem = att.prepare(&mut tape, &p, lm, Some(sm))?;
    let out = att.step(&mut tape, &p, q, &mem, a, &[n], None)?;
    let alpha = tape.value(out.alpha).clone().reshape(vec![n])?;
    let sa_w = tape.value(out.sa_weights.expect("additive branch")).clone().reshape(vec![n])?;
    Ok((
        tape.value(out.context).clone(),
        ForwardAttentionState { alpha: alpha.clone(), step: state.step + 1 },
        (alpha, sa_w),
    ))
}
