use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{param_err, Error, Result};

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over checked coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares the tape gradient of a scalar function against central
/// differences.
///
/// `f` receives a fresh tape and the leaf holding `x` and must return a
/// one-element result. At most `max_coords` coordinates are probed; when `x`
/// is larger they are drawn without replacement from a fixed-seed stream.
pub fn finite_difference_check<F>(
    f: F,
    x: &Tensor<f64>,
    eps: f64,
    max_coords: usize,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(param_err!("finite-difference eps {eps} out of range"));
    }
    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point.clone(), false);
        let out = f(&mut tape, leaf)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(param_err!("checked function must be scalar, got {:?}", v.shape()));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    if !tape.value(out).all_finite() {
        return Err(Error::NonFinite("function value at the probe point".into()));
    }
    let analytic = tape
        .backward(out)?
        .take(leaf)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    if !analytic.all_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let coords: Vec<usize> = if x.len() <= max_coords {
        (0..x.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        let mut idx = sample(&mut rng, x.len(), max_coords).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        coords_checked: coords.len(),
    };
    let mut probe = x.clone();
    for &i in &coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("function value near coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_function_is_reported_not_panicked() {
        let x = Tensor::full(&[1, 1, 1, 2], 1.0);
        let res = finite_difference_check(
            |tape, v| {
                let big = tape.scale(v, f64::INFINITY);
                Ok(tape.sum(big))
            },
            &x,
            1e-5,
            10,
        );
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let x = Tensor::full(&[1], 1.0);
        assert!(finite_difference_check(|t, v| Ok(t.sum(v)), &x, 0.5, 10).is_err());
    }
}
