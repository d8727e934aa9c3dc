use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` builds a scalar loss on the tape from the parameter handles it is
/// given. With `max_coords = Some(k)`, at most `k` coordinates per
/// parameter are checked, chosen by `seed`; `None` checks all of them.
pub fn grad_check<'a, T, F>(f: F, params: &[Tensor<T>], h: f64, max_coords: Option<usize>, seed: u64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<'a, T>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let mut tape: Tape<'a, T> = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item().as_f64())
    };

    let (analytic, base) = {
        let mut tape: Tape<'a, T> = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        let base = tape.value(loss).item().as_f64();
        let mut grads = tape.backward(loss)?;
        let analytic: Vec<Tensor<T>> = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        (analytic, base)
    };
    let again = eval(params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic { first: base, second: again });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coords_checked: 0 };
    for pi in 0..params.len() {
        let n = params[pi].numel();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params[pi].data()[c];
            work[pi].data_mut()[c] = T::from_f64_lossy(orig.as_f64() + h);
            let plus = eval(&work)?;
            work[pi].data_mut()[c] = T::from_f64_lossy(orig.as_f64() - h);
            let minus = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[c].as_f64();
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((pi, c));
                }
            }
        }
    }
    Ok(report)
}
