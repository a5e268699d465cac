use super::{Result, Tape, Tensor, Var};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Floor on the relative-error denominator, so components whose true
/// gradient is ~0 are judged on absolute error instead of amplified noise.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the reverse-mode gradient of the scalar map `f` at `x` with
/// central differences `(f(x+h) - f(x-h)) / 2h` over every element of `x`.
/// Returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, h, &all)
}

/// [`grad_check`] restricted to the listed element indices.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, h: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out);
    let zeros = vec![0.0; x.len()];
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let mut worst = 0.0f64;
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
