//! Central finite-difference checking of reverse-mode gradients.
//!
//! The oracle perturbs one input element at a time and re-runs the pure f64
//! forward; the analytic gradient must agree within a relative error floor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// |a - b| relative to the larger magnitude, floored at 1 so that tiny
/// gradients are compared absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub struct ProbeFailure {
    pub tensor: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl std::fmt::Display for ProbeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "input {} elem {}: analytic {:.6e} vs central-diff {:.6e} (rel err {:.3e})",
            self.tensor, self.element, self.analytic, self.numeric, self.rel_err
        )
    }
}

/// Probes `n_probes` random coordinates across `inputs` and compares the
/// analytic gradients against central differences of `forward`.
///
/// `analytic[i]` may be `None` for inputs that are deliberately off the tape;
/// those are skipped. `forward` must be a pure function of the values.
pub fn check_gradients(
    inputs: &[Vec<f64>],
    analytic: &[Option<Vec<f64>>],
    forward: &mut dyn FnMut(&[Vec<f64>]) -> f64,
    n_probes: usize,
    h: f64,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(), ProbeFailure> {
    assert_eq!(inputs.len(), analytic.len());
    let candidates: Vec<usize> =
        (0..inputs.len()).filter(|&i| analytic[i].is_some() && !inputs[i].is_empty()).collect();
    assert!(!candidates.is_empty(), "no differentiable inputs to probe");

    let mut values: Vec<Vec<f64>> = inputs.to_vec();
    for _ in 0..n_probes {
        let ti = candidates[rng.gen_range(0..candidates.len())];
        let ei = rng.gen_range(0..inputs[ti].len());
        let x0 = inputs[ti][ei];

        values[ti][ei] = x0 + h;
        let fp = forward(&values);
        values[ti][ei] = x0 - h;
        let fm = forward(&values);
        values[ti][ei] = x0;

        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[ti].as_ref().expect("candidate filtered")[ei];
        let rel = relative_error(a, numeric);
        if rel > tol {
            return Err(ProbeFailure { tensor: ti, element: ei, analytic: a, numeric, rel_err: rel });
        }
    }
    Ok(())
}

/// Panicking variant for tests.
#[allow(clippy::too_many_arguments)]
pub fn assert_gradients(
    what: &str,
    inputs: &[Vec<f64>],
    analytic: &[Option<Vec<f64>>],
    forward: &mut dyn FnMut(&[Vec<f64>]) -> f64,
    n_probes: usize,
    h: f64,
    tol: f64,
    rng: &mut ChaCha8Rng,
) {
    if let Err(fail) = check_gradients(inputs, analytic, forward, n_probes, h, tol, rng) {
        panic!("gradient check failed for {what}: {fail}");
    }
}
