//! Central finite-difference checks for tape gradients.
//!
//! The numerical side only ever evaluates the forward closure on plain
//! perturbed tensors, so it shares no code path with the reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    /// Largest per-entry `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Human-readable location of the worst entry.
    pub worst: String,
}

impl GradReport {
    fn absorb(&mut self, analytic: f64, numeric: f64, floor: f64, location: impl FnOnce() -> String) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = format!("{} analytic={analytic:.6e} numeric={numeric:.6e}", location());
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Denominator floor of the relative error. Central differences at
/// `h = 1e-6` carry round-off near `1e-10` through deep graphs, so entries
/// whose gradients are both below this are effectively compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Central difference of a scalar function at `x` along coordinate `i`.
pub fn central_difference(f: &impl Fn(&Tensor) -> f64, x: &Tensor, i: usize, h: f64) -> f64 {
    let mut xp = x.clone();
    xp.data_mut()[i] += h;
    let fp = f(&xp);
    xp.data_mut()[i] = x.data()[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Compare the tape gradient of `build(x)` w.r.t. every entry of `x` with
/// central differences.
pub fn check_input_gradient(x0: &Tensor, h: f64, build: impl for<'t> Fn(Var<'t>) -> Var<'t>) -> GradReport {
    let tape = Tape::new();
    let x = tape.var(x0.clone());
    let out = build(x);
    let analytic = tape.backward(out).wrt_or_zeros(x);
    let f = |t: &Tensor| {
        let tape = Tape::new();
        build(tape.var(t.clone())).item()
    };
    let mut report = GradReport::default();
    for i in 0..x0.numel() {
        let numeric = central_difference(&f, x0, i, h);
        report.absorb(analytic.data()[i], numeric, REL_FLOOR, || format!("input[{i}]"));
    }
    report
}

/// Check gradients w.r.t. a set of named tensors, probing up to
/// `per_tensor` randomly chosen entries of each (all entries when smaller).
pub fn check_named_gradients(
    tensors: &[(String, Tensor)],
    h: f64,
    per_tensor: usize,
    seed: u64,
    build: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
) -> GradReport {
    let tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|(_, t)| tape.var(t.clone())).collect();
    let grads = tape.backward(build(&tape, &vars));
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt_or_zeros(v)).collect();

    let eval = |which: usize, t: &Tensor| {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .enumerate()
            .map(|(j, (_, orig))| tape.var(if j == which { t.clone() } else { orig.clone() }))
            .collect();
        build(&tape, &vars).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for (which, (name, t)) in tensors.iter().enumerate() {
        let indices: Vec<usize> = if t.numel() <= per_tensor {
            (0..t.numel()).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..t.numel())).collect()
        };
        let f = |x: &Tensor| eval(which, x);
        for i in indices {
            let numeric = central_difference(&f, t, i, h);
            report.absorb(analytic[which].data()[i], numeric, REL_FLOOR, || format!("{name}[{i}]"));
        }
    }
    report
}

/// Deterministic uniform tensor in `[lo, hi)` for tests and fixtures.
pub fn lcg_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}
