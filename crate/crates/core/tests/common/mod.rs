#![allow(dead_code)]

pub mod pathological;

use ja_tacotron::numerics::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error between an analytic and a finite-difference gradient,
/// measured on whole vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Checks backprop against central differences for every input of `f`.
///
/// `f` builds a graph from leaf inputs and returns any tensor; the checked
/// scalar is `sum(out * probe)` with a fixed random probe.
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, f: F) -> Vec<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut probe_rng = seeded(99);
    let mut eval = |xs: &[Tensor], probe: &mut Option<Vec<f64>>| -> (f64, Option<(Tape, Var, Vec<Var>)>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let n = tape.value(out).len();
        let p = probe.get_or_insert_with(|| (0..n).map(|_| probe_rng.gen_range(-1.0..1.0)).collect()).clone();
        let weighted = tape.mul_const(out, p);
        let loss = tape.sum(weighted);
        let v = tape.value(loss).data()[0];
        (v, Some((tape, loss, vars)))
    };
    let mut probe = None;
    let (_, built) = eval(inputs, &mut probe);
    let (tape, loss, vars) = built.unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut errs = Vec::new();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zero(vars[k], x.len());
        let mut numeric = vec![0.0; x.len()];
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= eps;
            let (fp, _) = eval(&plus, &mut probe);
            let (fm, _) = eval(&minus, &mut probe);
            numeric[j] = (fp - fm) / (2.0 * eps);
        }
        errs.push(rel_err(&analytic, &numeric));
    }
    errs
}
