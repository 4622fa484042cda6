//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so every line reaches stdout. The process
//! exits non-zero when a criterion fails that is not listed in `KNOWN_RED`.

#[path = "../../core/tests/common/pathological.rs"]
mod pathological;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ja_tacotron::attention::{
    additive_attend, dual_source_attend, forward_attention_step, multi_head_attend, AdditiveAttention,
    DualSourceAttention, ForwardAttentionState, IncrementalSAState, LocationConfig, MultiHeadAttention,
    MultiHeadConfig, SelfAttentionBlock, SourceKind,
};
use ja_tacotron::evaluation::{
    count_alignment_errors, diagnose_alignment, diagnose_head, f0_metrics, sa_pair_statistics, AlignmentDiagnosis,
    DiagnosisConfig,
};
use ja_tacotron::features::{
    generate_toy_corpus, split_corpus, trim_silence, PhonemeInventory, ToyCorpusConfig, Utterance,
};
use ja_tacotron::model::{
    compute_loss, train, validation_loss, Labels, Model, ModelConfig, Preset, RunConfig, SaMode, Target, Targets,
    TrainData, TrainState, Variant,
};
use ja_tacotron::numerics::{softmax, LstmCell, Mode, ParamStore, RngStream, Tape, Tensor, Zoneout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria expected to fail, with the reason recorded in the decisions ledger.
const KNOWN_RED: &[(u32, &str)] = &[
    (
        4,
        "the forward recurrence renormalizes a filtering posterior; new energies can pull mass back, so the expected position is not monotone",
    ),
    (
        8,
        "the toy VOCODER attention never locks on (diagonality stays near 0.4), so forced-alignment weights from the teacher-forced pass carry the reference F0 and both systems score about 0.96 with or without labels",
    ),
];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.8..0.8));
    }
}

// ---- 1: gradients ----

fn micro_config(variant: Variant, target: Target) -> ModelConfig {
    let mut c = ModelConfig::micro(variant, target, true);
    // Keep the concatenated conv-bank width at 8.
    c.conv_bank_k = 2;
    c
}

/// Deterministic offsets so no ReLU sits on its kink; `salt` picks another point.
fn jitter(model: &mut Model, scale: f64, salt: usize) {
    let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_string()).collect();
    for (i, n) in names.iter().enumerate() {
        for (j, x) in model.params.by_name_mut(n).unwrap().data_mut().iter_mut().enumerate() {
            *x += scale * ((i * 7919 + j * 104729 + salt * 31337) as f64 * 0.618).sin();
        }
    }
}

fn micro_batch(cfg: &ModelConfig, seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, Vec<Targets>) {
    let mut r = rng(seed);
    let n_classes = cfg.f0.n_classes();
    let mut phonemes = Vec::new();
    let mut accents = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..2 {
        phonemes.push((0..3).map(|_| r.gen_range(0..cfg.n_phonemes)).collect());
        accents.push((0..3).map(|_| r.gen_range(0..cfg.n_accents)).collect());
        let frames = rand_tensor(&mut r, 6, cfg.frame_dim(), 1.0);
        let f0_classes = (cfg.target == Target::Vocoder).then(|| (0..6).map(|_| r.gen_range(0..n_classes)).collect());
        targets.push(Targets { frames, f0_classes });
    }
    (phonemes, accents, targets)
}

struct GradCheck {
    /// Relative error and name of each parameter group.
    groups: Vec<(f64, String)>,
    /// Entries where a ReLU or max-pool switch lies within `eps`, so central
    /// differences measure the kink rather than the gradient.
    straddled: Vec<String>,
}

fn grad_check(cfg: &ModelConfig, salt: usize, eps: f64) -> GradCheck {
    let mut model = Model::new(cfg.clone(), 21).unwrap();
    jitter(&mut model, 0.05, salt);
    let (ph, ac, tg) = micro_batch(cfg, 3);
    let rs = RngStream::new(8);
    let loss_of = |m: &Model, with_grad: bool| -> (f64, Option<Vec<Tensor>>) {
        let ls: Vec<Labels> = ph.iter().zip(&ac).map(|(p, a)| Labels { phonemes: p, accents: Some(a) }).collect();
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let enc = m.encode(&mut tape, &p, &ls, Mode::Train, &rs).unwrap();
        let run =
            m.decode_batch_teacher_forced(&mut tape, &p, &enc, &tg, Mode::Train, &rs, SaMode::Parallel, None).unwrap();
        let l = run.loss(&mut tape, cfg, &tg).unwrap();
        let value = tape.value(l.total).data()[0];
        let grads = with_grad.then(|| {
            let g = tape.backward(l.total).unwrap();
            p.gradients(&m.params, &g)
        });
        (value, grads)
    };
    let (mid, grads) = loss_of(&model, true);
    let grads = grads.unwrap();
    let mut probe = Model::new(cfg.clone(), 21).unwrap();
    probe.load_params(&model.params).unwrap();
    let names: Vec<(usize, String, usize)> =
        model.params.iter().map(|(id, n, t)| (id.index(), n.to_string(), t.len())).collect();
    let mut pick = rng(77);
    let mut out = GradCheck { groups: Vec::new(), straddled: Vec::new() };
    for (idx, name, len) in names {
        let mut entries: Vec<usize> = vec![0, len - 1];
        entries.extend((0..2).map(|_| pick.gen_range(0..len)));
        entries.sort_unstable();
        entries.dedup();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for k in entries {
            let orig = model.params.by_name(&name).unwrap().data()[k];
            let mut at = |e: f64| {
                probe.params.by_name_mut(&name).unwrap().data_mut()[k] = orig + e;
                let up = loss_of(&probe, false).0;
                probe.params.by_name_mut(&name).unwrap().data_mut()[k] = orig - e;
                let down = loss_of(&probe, false).0;
                probe.params.by_name_mut(&name).unwrap().data_mut()[k] = orig;
                (up, down)
            };
            let (up, down) = at(eps);
            let (up_s, down_s) = at(eps / 10.0);
            // Smooth: the one-sided gap is eps * f'' and shrinks tenfold.
            let gap = (up - 2.0 * mid + down) / eps;
            let gap_s = (up_s - 2.0 * mid + down_s) / (eps / 10.0);
            if (gap - 10.0 * gap_s).abs() > 0.1 * gap.abs() + 1e-8 {
                out.straddled.push(format!("{name}[{k}]"));
            }
            numeric.push((up - down) / (2.0 * eps));
            analytic.push(grads[idx].data()[k]);
        }
        out.groups.push((rel_err(&analytic, &numeric), name));
    }
    out
}

fn c1_gradients() -> Outcome {
    let eps = 1e-4;
    let tol = 1e-3;
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut groups = 0;
    let mut redraws = Vec::new();
    for variant in [Variant::Ja, Variant::Sa] {
        for target in [Target::Mel, Target::Vocoder] {
            let cfg = micro_config(variant, target);
            let mut salt = 0;
            let mut check = grad_check(&cfg, salt, eps);
            while !check.straddled.is_empty() && salt < 4 {
                redraws.push(format!("{} {}", cfg.code(), check.straddled.join(" ")));
                salt += 1;
                check = grad_check(&cfg, salt, eps);
            }
            if !check.straddled.is_empty() {
                worst = (f64::INFINITY, format!("{} still straddles a kink", cfg.code()));
            }
            for (err, name) in check.groups {
                groups += 1;
                if err > worst.0 || !err.is_finite() {
                    worst = (err, format!("{} {name}", cfg.code()));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let redrawn = if redraws.is_empty() { "none".to_string() } else { redraws.join("; ") };
    Outcome::new(
        worst.0 < tol && secs < 60.0,
        format!(
            "{groups} parameter groups, worst rel err {:.2e} ({}), {secs:.1}s, points redrawn for kinks within eps: {redrawn}",
            worst.0, worst.1
        ),
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

// ---- 2: normalization ----

fn row_violation(w: &Tensor) -> f64 {
    let cols = w.shape().last().copied().unwrap_or(1);
    let mut worst: f64 = 0.0;
    for row in w.data().chunks(cols) {
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        if row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return f64::INFINITY;
        }
    }
    worst
}

fn c2_normalization() -> Outcome {
    let per = 2500;
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    let mut calls = 0;

    let mut store = ParamStore::new();
    let add = AdditiveAttention::new(&mut store, "a", 5, 4, Some(3), 6, &RngStream::new(1));
    randomize(&mut store, 1);
    for _ in 0..per {
        let n = r.gen_range(1..=12);
        let q = rand_tensor(&mut r, 1, 5, 3.0);
        let mem = rand_tensor(&mut r, n, 4, 3.0);
        let loc = rand_tensor(&mut r, n, 3, 3.0);
        let (_, w) = additive_attend(&add, &store, &q, &mem, Some(&loc)).unwrap();
        worst = worst.max(row_violation(&w));
        calls += 1;
    }

    let mut i = 0;
    while i < per {
        let n = r.gen_range(1..=12);
        let mut s = ForwardAttentionState::initial(n).unwrap();
        for _ in 0..r.gen_range(1..=20) {
            let logits = Tensor::vector((0..n).map(|_| r.gen_range(-6.0..6.0)).collect());
            s = forward_attention_step(&s, &softmax(&logits, 0).unwrap()).unwrap();
            worst = worst.max(row_violation(&s.alpha));
            calls += 1;
            i += 1;
        }
    }

    let mut store = ParamStore::new();
    let cfg = MultiHeadConfig { model_dim: 8, n_heads: 2, hops: 1, drop_rate: 0.0 };
    let mha = MultiHeadAttention::new(&mut store, "m", 6, cfg, &RngStream::new(3)).unwrap();
    randomize(&mut store, 3);
    for _ in 0..per {
        let causal = r.gen_bool(0.5);
        let tk = r.gen_range(1..=10);
        let tq = if causal { tk } else { r.gen_range(1..=10) };
        let q = rand_tensor(&mut r, tq, 6, 3.0);
        let kv = rand_tensor(&mut r, tk, 6, 3.0);
        let (_, heads) = multi_head_attend(&mha, &store, &q, &kv, causal).unwrap();
        for h in &heads {
            worst = worst.max(row_violation(h));
        }
        calls += 1;
    }

    let mut store = ParamStore::new();
    let loc = LocationConfig { kernel_width: 3, filters: 2 };
    let dual = DualSourceAttention::new(&mut store, "d", 5, 4, Some(3), 6, loc, &RngStream::new(4));
    randomize(&mut store, 4);
    let mut i = 0;
    while i < per {
        let n = r.gen_range(1..=10);
        let lstm = rand_tensor(&mut r, n, 4, 2.0);
        let sa = rand_tensor(&mut r, n, 3, 2.0);
        let mut s = ForwardAttentionState::initial(n).unwrap();
        for _ in 0..r.gen_range(1..=10) {
            let q = Tensor::vector((0..5).map(|_| r.gen_range(-2.0..2.0)).collect());
            let (_, next, (wf, wa)) = dual_source_attend(&dual, &store, &lstm, &sa, &q, &s).unwrap();
            worst = worst.max(row_violation(&wf)).max(row_violation(&wa));
            s = next;
            calls += 1;
            i += 1;
        }
    }
    Outcome::new(worst <= 1e-6, format!("{calls} calls, max |row sum - 1| {worst:.1e}, no negative weights"))
}

// ---- 3: step-mask equivalence ----

fn c3_step_mask() -> Outcome {
    let mut r = rng(3);
    let mut op_worst: f64 = 0.0;
    let mut max_t = 0;
    for trial in 0..24 {
        let t = if trial == 0 { 32 } else { r.gen_range(1..=32) };
        max_t = max_t.max(t);
        let hops = r.gen_range(1..=2);
        let mut store = ParamStore::new();
        let cfg = MultiHeadConfig { model_dim: 8, n_heads: 2, hops, drop_rate: 0.05 };
        let b = SelfAttentionBlock::new(&mut store, "sa", 6, cfg, &RngStream::new(trial)).unwrap();
        randomize(&mut store, trial);
        let x = rand_tensor(&mut r, t, 6, 1.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.leaf(x);
        let par = b.step_masked_parallel(&mut tape, &p, xv).unwrap();
        let mut st = IncrementalSAState::new(1, hops);
        let inc = b.incremental_self_attend(&mut tape, &p, &mut st, xv).unwrap();
        op_worst = op_worst.max(tape.value(par).max_abs_diff(tape.value(inc)));
    }

    let mut dec_worst: f64 = 0.0;
    let mut dec_max_steps = 0;
    for (k, target) in [Target::Mel, Target::Vocoder, Target::Mel, Target::Vocoder].into_iter().enumerate() {
        let cfg = ModelConfig::micro(Variant::Sa, target, true);
        let model = Model::new(cfg.clone(), 40 + k as u64).unwrap();
        let rr = cfg.reduction_factor;
        let mut ph = Vec::new();
        let mut ac = Vec::new();
        let mut tg = Vec::new();
        for j in 0..3 {
            let n = r.gen_range(2..=9);
            let steps = if k == 0 && j == 0 { 32 } else { r.gen_range(1..=32) };
            dec_max_steps = dec_max_steps.max(steps);
            let frames = steps * rr - r.gen_range(0..rr);
            ph.push((0..n).map(|_| r.gen_range(0..cfg.n_phonemes)).collect::<Vec<_>>());
            ac.push((0..n).map(|_| r.gen_range(0..cfg.n_accents)).collect::<Vec<_>>());
            let f0 =
                (target == Target::Vocoder).then(|| (0..frames).map(|_| r.gen_range(0..cfg.f0.n_classes())).collect());
            tg.push(Targets { frames: rand_tensor(&mut r, frames, cfg.frame_dim(), 1.0), f0_classes: f0 });
        }
        let ls: Vec<Labels> = ph.iter().zip(&ac).map(|(p, a)| Labels { phonemes: p, accents: Some(a) }).collect();
        let rs = RngStream::new(4);
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let enc = model.encode(&mut tape, &p, &ls, Mode::Infer, &rs).unwrap();
        let par = model
            .decode_batch_teacher_forced(&mut tape, &p, &enc, &tg, Mode::Infer, &rs, SaMode::Parallel, None)
            .unwrap();
        let inc = model
            .decode_batch_teacher_forced(&mut tape, &p, &enc, &tg, Mode::Infer, &rs, SaMode::Incremental, None)
            .unwrap();
        for (a, b) in [(par.decoder_out, inc.decoder_out), (par.frames, inc.frames), (par.stop_logits, inc.stop_logits)]
        {
            dec_worst = dec_worst.max(tape.value(a).max_abs_diff(tape.value(b)));
        }
    }
    Outcome::new(
        op_worst < 1e-10 && dec_worst < 1e-8,
        format!(
            "op max diff {op_worst:.1e} (T <= {max_t}), teacher-forced decoder max diff {dec_worst:.1e} (steps <= {dec_max_steps})"
        ),
    )
}

// ---- 4: forward-attention monotonicity ----

fn expected_position(a: &Tensor) -> f64 {
    a.data().iter().enumerate().map(|(n, v)| n as f64 * v).sum()
}

fn c4_monotonicity() -> Outcome {
    let s0 = ForwardAttentionState::initial(3).unwrap();
    let third = 1.0 / 3.0;
    let hand = forward_attention_step(&s0, &Tensor::vector(vec![third; 3])).unwrap();
    let hand_ok = hand.alpha.data() == [0.5, 0.5, 0.0];

    let mut r = rng(4);
    let mut decreasing = 0;
    let mut largest_drop: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.gen_range(1..=8);
        let mut s = ForwardAttentionState::initial(n).unwrap();
        let mut seen = false;
        for _ in 0..20 {
            let logits = Tensor::vector((0..n).map(|_| r.gen_range(-4.0..4.0)).collect());
            let next = forward_attention_step(&s, &softmax(&logits, 0).unwrap()).unwrap();
            let drop = expected_position(&s.alpha) - expected_position(&next.alpha);
            if drop > 1e-12 {
                seen = true;
                largest_drop = largest_drop.max(drop);
            }
            s = next;
        }
        decreasing += seen as usize;
    }
    Outcome::new(
        hand_ok && decreasing == 0,
        format!(
            "[0.5, 0.5, 0] case {}; {decreasing}/1000 sequences with a decreasing expected position (largest drop {largest_drop:.3})",
            if hand_ok { "exact" } else { "wrong" }
        ),
    )
}

// ---- 5: zoneout ----

fn cell_inputs(r: &mut ChaCha8Rng) -> (ParamStore, LstmCell, [Vec<f64>; 3]) {
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "cell", 3, 4, &RngStream::new(5));
    randomize(&mut store, 5);
    let v = |r: &mut ChaCha8Rng, n| (0..n).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let inputs = [v(r, 3), v(r, 4), v(r, 4)];
    (store, cell, inputs)
}

fn zoneout_step(
    store: &ParamStore,
    cell: &LstmCell,
    io: &[Vec<f64>; 3],
    z: Option<Zoneout>,
    rs: &RngStream,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let [x, h, c] = io.clone().map(|v| {
        let n = v.len();
        tape.leaf(Tensor::matrix(1, n, v).unwrap())
    });
    let (h2, c2) = match z {
        Some(z) => cell.step(&mut tape, &p, x, h, c, z, rs),
        None => {
            // Plain LSTM step written out on the tape, no zoneout at all.
            let xw = tape.matmul(x, p.var(cell.w_ih));
            let xp = tape.add_row(xw, p.var(cell.b));
            let hw = tape.matmul(h, p.var(cell.w_hh));
            let g = tape.add(xp, hw);
            let n = cell.hidden;
            let (i, f, gg, o) = (
                tape.slice_cols(g, 0, n),
                tape.slice_cols(g, n, n),
                tape.slice_cols(g, 2 * n, n),
                tape.slice_cols(g, 3 * n, n),
            );
            let (i, f, gg, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(gg), tape.sigmoid(o));
            let fc = tape.mul(f, c);
            let ig = tape.mul(i, gg);
            let c2 = tape.add(fc, ig);
            let tc = tape.tanh(c2);
            (tape.mul(o, tc), c2)
        }
    };
    let mut out = tape.value(h2).data().to_vec();
    out.extend_from_slice(tape.value(c2).data());
    out
}

fn c5_zoneout() -> Outcome {
    let mut r = rng(5);
    let (store, cell, io) = cell_inputs(&mut r);
    let rs = RngStream::new(9);
    let vanilla = zoneout_step(&store, &cell, &io, None, &rs);
    let rate0 = [Mode::Train, Mode::Infer]
        .iter()
        .all(|&m| zoneout_step(&store, &cell, &io, Some(Zoneout::new(0.0, m).unwrap()), &rs) == vanilla);

    let kept = zoneout_step(&store, &cell, &io, Some(Zoneout::new(1.0, Mode::Train).unwrap()), &rs);
    let mut prev = io[1].clone();
    prev.extend_from_slice(&io[2]);
    let identity = kept == prev;

    let rate = 0.3;
    let expect = zoneout_step(&store, &cell, &io, Some(Zoneout::new(rate, Mode::Infer).unwrap()), &rs);
    let draws = 20_000;
    let base = RngStream::new(2024);
    let mut sum = [0.0; 8];
    let mut sq = [0.0; 8];
    for k in 0..draws {
        let y = zoneout_step(&store, &cell, &io, Some(Zoneout::new(rate, Mode::Train).unwrap()), &base.fork(k));
        for j in 0..8 {
            sum[j] += y[j];
            sq[j] += y[j] * y[j];
        }
    }
    let mut worst_z: f64 = 0.0;
    for j in 0..8 {
        let mean = sum[j] / draws as f64;
        let se = ((sq[j] / draws as f64 - mean * mean) / draws as f64).sqrt();
        worst_z = worst_z.max((mean - expect[j]).abs() / se.max(1e-300));
    }
    Outcome::new(
        rate0 && identity && worst_z <= 3.0,
        format!(
            "rate 0 bit-exact {rate0}, rate 1 identity {identity}, Monte-Carlo worst |z| {worst_z:.2} over {draws} draws"
        ),
    )
}

// ---- 6: loss composition ----

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    row[k] - m - z.ln()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn c6_loss() -> Outcome {
    let cfg = ModelConfig::micro(Variant::Sa, Target::Vocoder, true);
    let mut model = Model::new(cfg.clone(), 6).unwrap();
    jitter(&mut model, 0.3, 0);
    let (ph, ac, tg) = micro_batch(&cfg, 6);
    let labels = Labels { phonemes: &ph[0], accents: Some(&ac[0]) };
    let g = &tg[0];
    let pred = model.decode_teacher_forced(labels, g, &RngStream::new(1)).unwrap();
    let l = compute_loss(&pred, g, &cfg).unwrap();

    // Independent recomputation of each term.
    let (t, d) = (g.len(), cfg.frame_dim());
    let l1: f64 = (0..t)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| (pred.frames.get(i, j) - g.frames.get(i, j)).abs())
        .sum::<f64>()
        / (t * d) as f64;
    let logits = pred.f0_logits.as_ref().unwrap();
    let classes = g.f0_classes.as_ref().unwrap();
    let ce_f0 = -(0..t).map(|i| log_softmax_at(logits.row(i), classes[i])).sum::<f64>() / t as f64;
    let steps = g.steps(cfg.reduction_factor);
    let ce_stop = (0..steps)
        .map(|s| {
            let x = pred.stop_logits[s];
            let y = if s + 1 == steps { 1.0 } else { 0.0 };
            softplus(x) - y * x
        })
        .sum::<f64>()
        / steps as f64;
    let composed = l1 + 0.45 * ce_f0 + ce_stop;
    let mut worst =
        [(l.l1 - l1).abs(), (l.f0.unwrap() - ce_f0).abs(), (l.stop - ce_stop).abs(), (l.total - composed).abs()]
            .into_iter()
            .fold(0.0f64, f64::max);

    // Perturb one component at a time and check the change in the total.
    let mut a = pred.clone();
    a.frames.row_mut(0)[0] += 0.37;
    let la = compute_loss(&a, g, &cfg).unwrap();
    worst = worst.max(((la.total - l.total) - (la.l1 - l.l1)).abs());
    worst = worst.max((la.f0.unwrap() - l.f0.unwrap()).abs() + (la.stop - l.stop).abs());
    let mut b = pred.clone();
    b.f0_logits.as_mut().unwrap().row_mut(1)[0] += 1.3;
    let lb = compute_loss(&b, g, &cfg).unwrap();
    worst = worst.max(((lb.total - l.total) - 0.45 * (lb.f0.unwrap() - l.f0.unwrap())).abs());
    worst = worst.max((lb.l1 - l.l1).abs() + (lb.stop - l.stop).abs());
    let mut c = pred;
    c.stop_logits[0] -= 0.8;
    let lc = compute_loss(&c, g, &cfg).unwrap();
    worst = worst.max(((lc.total - l.total) - (lc.stop - l.stop)).abs());
    worst = worst.max((lc.l1 - l.l1).abs() + (lc.f0.unwrap() - l.f0.unwrap()).abs());
    let moved = la.l1 != l.l1 && lb.f0 != l.f0 && lc.stop != l.stop;
    Outcome::new(
        worst < 1e-12 && moved,
        format!("total {:.6} = {l1:.6} + 0.45*{ce_f0:.6} + {ce_stop:.6}, worst discrepancy {worst:.1e}", l.total),
    )
}

// ---- 7-9: toy training ----

const TOY_STEPS: u64 = 2000;

struct ToyRun {
    code: String,
    l1_step0: f64,
    l1_final: f64,
    val_diagonality: f64,
    test_diagnoses: Vec<AlignmentDiagnosis>,
    f0_corr: Option<f64>,
    minutes: f64,
}

impl ToyRun {
    fn error_free(&self) -> usize {
        self.test_diagnoses.iter().filter(|d| d.categories.is_empty()).count()
    }

    fn error_rate(&self) -> f64 {
        count_alignment_errors(&self.test_diagnoses).error_rate()
    }
}

fn toy_corpus() -> (PhonemeInventory, Vec<Utterance>) {
    let inv = PhonemeInventory::toy();
    let corpus = generate_toy_corpus(1, 200, &inv, 4, &ToyCorpusConfig::default()).unwrap();
    (inv, corpus)
}

fn toy_run(inv: &PhonemeInventory, corpus: &[Utterance], target: Target, accents: bool) -> ToyRun {
    let start = Instant::now();
    let (n_train, n_val, _) = split_corpus(corpus.len(), 0.05, 0.05);
    let run = RunConfig::preset(Preset::Desk, Variant::Sa, target, accents);
    let data = TrainData::new(&corpus[..n_train], &corpus[n_train..n_train + n_val], inv, &run.model).unwrap();
    let mut state = TrainState::new(run, 0).unwrap();
    let l1_step0 = validation_loss(&state.model, &data, 0).unwrap().unwrap().0.l1;
    train(&mut state, &data, TOY_STEPS, 0, None, &mut std::io::sink()).unwrap();
    let (val, preds) = validation_loss(&state.model, &data, 0).unwrap().unwrap();

    let cfg = DiagnosisConfig::default();
    let pauses_of = |ph: &[usize]| ph.iter().map(|&p| inv.is_silence_or_pause(p)).collect::<Vec<bool>>();
    let mut diag_sum = 0.0;
    for (u, pred) in corpus[n_train..n_train + n_val].iter().zip(&preds) {
        let u = trim_silence(u, inv).unwrap();
        let a = pred.alignment(SourceKind::LstmMemory).unwrap();
        diag_sum += diagnose_alignment(a, &pauses_of(&u.phonemes), &cfg).unwrap()[0].diagonality;
    }

    let model = &state.model;
    let rs = RngStream::new(5);
    let mut diagnoses = Vec::new();
    let (mut pf, mut pv, mut rf, mut rv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for u in &corpus[n_train + n_val..] {
        let u = trim_silence(u, inv).unwrap();
        let labels = Labels::of(&u, accents);
        let free = model.decode_free_running(labels, &rs).unwrap();
        let a = free.alignment(SourceKind::LstmMemory).unwrap();
        diagnoses.push(diagnose_alignment(a, &pauses_of(&u.phonemes), &cfg).unwrap().remove(0));
        if target == Target::Vocoder {
            let tg = Targets::from_utterance(&u, &model.cfg).unwrap();
            let forced = model.decode_forced_alignment(labels, &tg, &rs).unwrap();
            let (hz, v) = forced.f0_track(&model.cfg.f0).unwrap().unwrap();
            let (lf, voiced) = (u.logf0.as_ref().unwrap(), u.voiced.as_ref().unwrap());
            pf.extend_from_slice(&hz[..lf.len()]);
            pv.extend_from_slice(&v[..lf.len()]);
            rf.extend(lf.iter().zip(voiced).map(|(&x, &on)| if on { x.exp() } else { 0.0 }));
            rv.extend_from_slice(voiced);
        }
    }
    let f0_corr =
        (target == Target::Vocoder).then(|| f0_metrics(&pf, &rf, &pv, &rv, false).map_or(f64::NAN, |m| m.corr));
    ToyRun {
        code: model.cfg.code(),
        l1_step0,
        l1_final: val.l1,
        val_diagonality: diag_sum / preds.len() as f64,
        test_diagnoses: diagnoses,
        f0_corr,
        minutes: start.elapsed().as_secs_f64() / 60.0,
    }
}

fn c7_convergence(mel: &ToyRun) -> Outcome {
    let ratio = mel.l1_final / mel.l1_step0;
    let n = mel.test_diagnoses.len();
    let clean = mel.error_free();
    Outcome::new(
        ratio < 0.5 && mel.val_diagonality > 0.6 && clean * 5 >= n * 4,
        format!(
            "{}: val L1 {:.3} -> {:.3} ({:.0}%), val diagonality {:.3}, error-free test {clean}/{n}, {:.1} min",
            mel.code,
            mel.l1_step0,
            mel.l1_final,
            100.0 * ratio,
            mel.val_diagonality,
            mel.minutes
        ),
    )
}

fn c8_accent_ablation(with: &ToyRun, without: &ToyRun) -> Outcome {
    let (a, b) = (with.f0_corr.unwrap(), without.f0_corr.unwrap());
    Outcome::new(
        a - b >= 0.05,
        format!("F0 corr with labels {a:.3}, without {b:.3}, difference {:.3} (needs >= 0.05)", a - b),
    )
}

fn c9_vocoder_fragility(voc: &ToyRun, mel: &ToyRun) -> Outcome {
    let (v, m) = (voc.error_rate(), mel.error_rate());
    Outcome::new(
        v >= m,
        format!(
            "free-running test alignment-error rate: {} {v:.2}, {} {m:.2}, {TOY_STEPS} steps each",
            voc.code, mel.code
        ),
    )
}

// ---- 10: evaluation oracles ----

fn c10_oracles() -> Outcome {
    let mut r = rng(10);
    let f0: Vec<f64> = (0..200).map(|_| r.gen_range(80.0..320.0)).collect();
    let voiced: Vec<bool> = (0..200).map(|i| i % 5 != 0).collect();
    let same = f0_metrics(&f0, &f0, &voiced, &voiced, false).unwrap();
    let identical = same.rmse_hz == 0.0 && same.corr == 1.0 && same.uv_error_pct == 0.0;
    let shifted: Vec<f64> = f0.iter().map(|x| x + 10.0).collect();
    let off = f0_metrics(&shifted, &f0, &voiced, &voiced, false).unwrap();
    let offset = (off.rmse_hz - 10.0).abs() < 1e-9 && (off.corr - 1.0).abs() < 1e-12;

    let cases = pathological::suite();
    let cfg = DiagnosisConfig::default();
    let classified = cases
        .iter()
        .filter(|c| diagnose_head(&c.weights, &c.pauses, &cfg).unwrap().categories == vec![c.expected])
        .count();

    // Pair statistics on encoder self-attention from a micro SA model.
    let cfg = ModelConfig::micro(Variant::Sa, Target::Mel, true);
    let model = Model::new(cfg.clone(), 10).unwrap();
    let seqs: Vec<Vec<usize>> = vec![vec![0, 1, 2, 1, 0, 3], vec![2, 2, 1, 3], vec![3, 0, 1, 1, 2, 0, 0]];
    let weights: Vec<_> = seqs
        .iter()
        .map(|s| {
            let acc = vec![1; s.len()];
            let tg = Targets { frames: Tensor::zeros(&[4, cfg.frame_dim()]), f0_classes: None };
            let pred = model
                .decode_teacher_forced(Labels { phonemes: s, accents: Some(&acc) }, &tg, &RngStream::new(0))
                .unwrap();
            pred.encoder_self.unwrap()
        })
        .collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let mut pair_ok = true;
    let mut rows_checked = 0;
    for min_count in [1, 2, 4] {
        for (h, table) in sa_pair_statistics(&weights, &refs, min_count).unwrap().iter().enumerate() {
            let mut expected = Vec::new();
            for a in 0..4 {
                for b in 0..4 {
                    let (mut count, mut sum) = (0, 0.0);
                    for (s, w) in seqs.iter().zip(&weights) {
                        for i in 0..s.len() {
                            for j in 0..s.len() {
                                if s[i] == a && s[j] == b {
                                    count += 1;
                                    sum += w.weights[h].get(i, j);
                                }
                            }
                        }
                    }
                    if count >= min_count {
                        expected.push((a, b, count, sum / count as f64));
                    }
                }
            }
            pair_ok &= table.rows.len() == expected.len();
            for row in &table.rows {
                rows_checked += 1;
                pair_ok &= expected
                    .iter()
                    .any(|e| (e.0, e.1, e.2) == (row.a, row.b, row.count) && (e.3 - row.mean_score).abs() < 1e-14);
            }
        }
    }
    Outcome::new(
        identical && offset && classified == cases.len() && pair_ok,
        format!(
            "identical F0 (0, 1, 0%) {identical}; +10 Hz gives rmse {:.6} corr {:.6}; pathological {classified}/{}; pair counts {} over {rows_checked} rows",
            off.rmse_hz,
            off.corr,
            cases.len(),
            if pair_ok { "match" } else { "differ" }
        ),
    )
}

// ---- 11: reproducibility ----

fn cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ja-tacotron")).args(args).output().unwrap();
    assert!(out.status.success(), "ja-tacotron {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn c11_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    cli(&["gen-corpus", "--seed", "3", "--n", "24", "--out", &path("corpus")]);
    std::fs::write(
        dir.path().join("run.cfg"),
        "preset = desk\nvariant = SA\ntarget = VOCODER\nbatch_size = 4\nval_interval = 3\ncheckpoint_interval = 4\n",
    )
    .unwrap();
    for run in ["a", "b"] {
        cli(&[
            "train",
            "--config",
            &path("run.cfg"),
            "--corpus",
            &path("corpus"),
            "--out",
            &path(run),
            "--steps",
            "8",
            "--seed",
            "11",
        ]);
    }
    let read = |run: &str, f: &str| std::fs::read(Path::new(&path(run)).join(f)).unwrap();
    let metrics = read("a", "metrics.csv") == read("b", "metrics.csv");
    let ckpt = read("a", "final.ckpt") == read("b", "final.ckpt");
    let rows = String::from_utf8(read("a", "metrics.csv")).unwrap().lines().count();
    Outcome::new(
        metrics && ckpt && rows == 9,
        format!("metrics.csv identical {metrics} ({rows} lines), final.ckpt identical {ckpt}"),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Outcome| {
        let known = KNOWN_RED.iter().find(|k| k.0 == id);
        let tag = match (o.pass, known) {
            (true, _) => "PASS",
            (false, Some(_)) => "FAIL (known)",
            (false, None) => "FAIL",
        };
        println!("criterion {id:>2} {name:<34} {tag:<12} {}", o.detail);
        results.push((id, name, o));
    };

    report(1, "gradient correctness", c1_gradients());
    report(2, "attention normalization", c2_normalization());
    report(3, "step-mask equivalence", c3_step_mask());
    report(4, "forward-attention monotonicity", c4_monotonicity());
    report(5, "zoneout contracts", c5_zoneout());
    report(6, "loss composition", c6_loss());
    let (inv, corpus) = toy_corpus();
    let mel = toy_run(&inv, &corpus, Target::Mel, true);
    report(7, "toy training convergence", c7_convergence(&mel));
    let voc = toy_run(&inv, &corpus, Target::Vocoder, true);
    let voc_plain = toy_run(&inv, &corpus, Target::Vocoder, false);
    report(8, "accent-ablation direction", c8_accent_ablation(&voc, &voc_plain));
    report(9, "vocoder-regime fragility direction", c9_vocoder_fragility(&voc, &mel));
    report(10, "evaluation oracles", c10_oracles());
    report(11, "reproducibility", c11_reproducibility());

    for (id, reason) in KNOWN_RED {
        if results.iter().any(|(i, _, o)| i == id && !o.pass) {
            println!("criterion {id:>2} known failure: {reason}");
        }
    }
    let passed = results.iter().filter(|r| r.2.pass).count();
    let unexpected: Vec<u32> =
        results.iter().filter(|(id, _, o)| !o.pass && !KNOWN_RED.iter().any(|k| k.0 == *id)).map(|r| r.0).collect();
    println!(
        "acceptance: {passed}/{} passed, {:.1} min, unexpected failures: {unexpected:?}",
        results.len(),
        start.elapsed().as_secs_f64() / 60.0
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
