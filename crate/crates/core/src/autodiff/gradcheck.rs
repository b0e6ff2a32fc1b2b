//! Central-difference verification of tape gradients.

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{DagamError, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    /// `(input, flat offset)` where the maximum occurred
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compare reverse-mode gradients of a scalar function with central finite
/// differences of step `h`.
///
/// Each coordinate is also probed for a kink: the one-sided slopes at `h` and
/// `h/2` must close up like a smooth function's would. A coordinate sitting on
/// a non-smooth point (a relu hinge, a max tie) fails with
/// [`DagamError::NonSmooth`].
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(DagamError::Config(format!("finite-difference step {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item()?;
    tape.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            let mut at = |delta: f64| -> Result<f64> {
                probe[i].data_mut()[j] = x0 + delta;
                let v = eval(&f, &probe);
                probe[i].data_mut()[j] = x0;
                v
            };
            let (fp, fm) = (at(h)?, at(-h)?);
            let (fp2, fm2) = (at(h / 2.0)?, at(-h / 2.0)?);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[j];
            if a.is_nan() || numeric.is_nan() {
                return Err(DagamError::GradCheck(format!(
                    "NaN gradient at input {i} offset {j} (analytic {a}, numeric {numeric})"
                )));
            }
            // slope jump (f(x+h) - 2f(x) + f(x-h)) / h halves with h when smooth
            let jump = (fp - 2.0 * f0 + fm) / h;
            let jump_half = (fp2 - 2.0 * f0 + fm2) / (h / 2.0);
            let scale = 1.0_f64.max(numeric.abs());
            if jump.abs() > 1e-6 * scale && jump_half.abs() > 0.75 * jump.abs() {
                return Err(DagamError::NonSmooth(format!(
                    "input {i} offset {j}: one-sided slopes differ by {jump:.3e}"
                )));
            }
            let rel = (a - numeric).abs() / scale;
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tanh_of_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::new(
            vec![3, 3],
            (0..9).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let x = Tensor::new(
            vec![3, 1],
            (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let r = grad_check(
            |t, v| {
                let wx = t.matmul(v[0], v[1])?;
                let y = t.tanh(wx);
                Ok(t.sum_all(y))
            },
            &[w, x],
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert_eq!(r.coordinates, 12);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![0.5, -2.0]).unwrap();
        let r = grad_check(|t, _| Ok(t.constant(Tensor::scalar(3.0))), &[x], 1e-4).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn relu_hinge_is_rejected() {
        let x = Tensor::vector(vec![0.7, 0.0, -0.4]).unwrap();
        let err = grad_check(
            |t, v| {
                let r = t.relu(v[0]);
                Ok(t.sum_all(r))
            },
            &[x],
            1e-4,
        )
        .unwrap_err();
        assert!(
            matches!(err, DagamError::NonSmooth(ref m) if m.contains("offset 1")),
            "{err}"
        );
    }

    #[test]
    fn nan_is_reported_with_coordinate() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let nan = t.constant(Tensor::scalar(f64::NAN));
                let y = t.mul(v[0], nan)?;
                Ok(t.sum_all(y))
            },
            &[x],
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, DagamError::GradCheck(ref m) if m.contains("input 0 offset 0")));
    }
}
