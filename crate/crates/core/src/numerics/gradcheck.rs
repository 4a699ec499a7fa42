use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` and returns the maximum
/// relative error over all coordinates of `x`.
///
/// `f` records its computation on the given tape, starting from the input
/// variable, and returns the scalar root.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidConfig(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let root = f(&mut tape, input)?;
    tape.backward(root)?;
    let analytic = match tape.grad(input)? {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.len()],
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.constant(Tensor::new(x.shape().to_vec(), data)?);
        let root = f(&mut tape, input)?;
        let value = tape.value(root)?;
        value.item().ok_or_else(|| Error::NotScalarRoot(value.shape().to_vec()))
    };

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_check",
            });
        }
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}
